//! Binary masks over an H×W grid and their run-length encoding.

use crate::error::{shape_err, Error, Result};

/// Row-major H×W binary grid.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(shape_err(height * width, bits.len()));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    /// Builds a mask from a 0/1 nested array, mostly handy in tests.
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Self {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let bits = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().map(|&v| v != 0))
            .collect();
        Self {
            height,
            width,
            bits,
        }
    }

    /// Pixels strictly above `threshold`.
    pub fn threshold(height: usize, width: usize, values: &[f64], threshold: f64) -> Result<Self> {
        Self::from_bits(height, width, values.iter().map(|&v| v > threshold).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.bits[h * self.width + w]
    }

    pub fn set(&mut self, h: usize, w: usize, value: bool) {
        self.bits[h * self.width + w] = value;
    }

    pub fn set_index(&mut self, idx: usize, value: bool) {
        self.bits[idx] = value;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    pub fn same_shape(&self, other: &Self) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(shape_err(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(())
    }

    pub fn intersection_area(&self, other: &Self) -> Result<usize> {
        self.same_shape(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    pub fn union_area(&self, other: &Self) -> Result<usize> {
        self.same_shape(other)?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a || **b)
            .count())
    }

    pub fn overlaps(&self, other: &Self) -> Result<bool> {
        Ok(self.intersection_area(other)? > 0)
    }

    /// In-place OR.
    pub fn union_with(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other)?;
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= *b;
        }
        Ok(())
    }

    /// Alternating run lengths over the row-major pixel order, starting with
    /// a (possibly empty) run of zeros.
    pub fn to_rle(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut count = 0u32;
        for &b in &self.bits {
            if b != current {
                runs.push(count);
                current = b;
                count = 0;
            }
            count += 1;
        }
        runs.push(count);
        runs
    }

    pub fn from_rle(height: usize, width: usize, runs: &[u32]) -> Result<Self> {
        let mut bits = Vec::with_capacity(height * width);
        let mut value = false;
        for &run in runs {
            bits.extend(std::iter::repeat_n(value, run as usize));
            value = !value;
        }
        if bits.len() != height * width {
            return Err(Error::Format(format!(
                "rle covers {} pixels, grid has {}",
                bits.len(),
                height * width
            )));
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }
}

/// Fails with an integrity error when any two masks share a pixel.
pub fn check_disjoint<'a, I>(masks: I, what: &str) -> Result<()>
where
    I: IntoIterator<Item = &'a BinaryMask>,
{
    let masks: Vec<&BinaryMask> = masks.into_iter().collect();
    let Some(first) = masks.first() else {
        return Ok(());
    };
    let mut seen = BinaryMask::zeros(first.height, first.width);
    for (idx, m) in masks.iter().enumerate() {
        if seen.overlaps(m)? {
            return Err(Error::Integrity(format!("{what}: segment {idx} overlaps an earlier one")));
        }
        seen.union_with(m)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rle_starts_with_zero_run() {
        let m = BinaryMask::from_rows(&[[1u8, 1, 0], [0, 0, 1]]);
        assert_eq!(m.to_rle(), vec![0, 2, 3, 1]);
        let z = BinaryMask::zeros(2, 2);
        assert_eq!(z.to_rle(), vec![4]);
    }

    #[test]
    fn rle_length_mismatch_rejected() {
        assert!(BinaryMask::from_rle(2, 2, &[1, 1]).is_err());
    }

    #[test]
    fn disjointness_check() {
        let a = BinaryMask::from_rows(&[[1u8, 0], [0, 0]]);
        let b = BinaryMask::from_rows(&[[0u8, 1], [0, 0]]);
        let c = BinaryMask::from_rows(&[[1u8, 1], [0, 0]]);
        assert!(check_disjoint([&a, &b], "t").is_ok());
        assert!(check_disjoint([&a, &b, &c], "t").is_err());
    }

    proptest! {
        #[test]
        fn rle_roundtrip(h in 1usize..9, w in 1usize..9, seed in any::<u64>()) {
            let bits: Vec<bool> = (0..h * w).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let m = BinaryMask::from_bits(h, w, bits).unwrap();
            let back = BinaryMask::from_rle(h, w, &m.to_rle()).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
