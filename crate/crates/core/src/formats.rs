//! Binary containers: `CMFD` scene records and `CMFK` checkpoints.
//!
//! All integers and floats are little-endian.
//!
//! A `CMFD` file is a concatenation of records:
//!
//! ```text
//! "CMFD" | version u16 | C u16 | H u16 | W u16 | segments u16
//! image: C*H*W f64, channel-major then row-major
//! per segment: class id u16 | runs u32 | run lengths u32...
//! ```
//!
//! Run lengths alternate starting with a run of zeros over the row-major
//! pixel order.
//!
//! A `CMFK` file holds named tensors:
//!
//! ```text
//! "CMFK" | version u16 | tensors u32
//! per tensor: name length u32 | UTF-8 name | rank u8 | dims u32... | f64 payload
//! ```

use std::io::{Read, Write};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::model::{MaskActivation, ModelConfig, ModelParams, Weights};
use crate::synthdata::{GtSegment, Image, SceneSample};

pub const DATASET_MAGIC: &[u8; 4] = b"CMFD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CMFK";
pub const FORMAT_VERSION: u16 = 1;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn done(&self) -> bool {
        self.pos >= self.buf.len()
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Format(format!("truncated input at byte {}", self.pos))
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        let version = self.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        Ok(())
    }
}

fn u16_field(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u16")))
}

pub fn encode_scene(sample: &SceneSample, out: &mut Vec<u8>) -> Result<()> {
    let img = &sample.image;
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (v, what) in [
        (img.channels, "channels"),
        (img.height, "height"),
        (img.width, "width"),
        (sample.segments.len(), "segment count"),
    ] {
        out.extend_from_slice(&u16_field(v, what)?.to_le_bytes());
    }
    for v in &img.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for seg in &sample.segments {
        out.extend_from_slice(&seg.class_id.to_le_bytes());
        let runs = seg.mask.to_rle();
        out.extend_from_slice(&(runs.len() as u32).to_le_bytes());
        for r in runs {
            out.extend_from_slice(&r.to_le_bytes());
        }
    }
    Ok(())
}

/// Decodes every record of a `CMFD` buffer. Seeds are not stored in the
/// records and come back as 0; the dataset manifest carries them.
pub fn decode_scenes(buf: &[u8]) -> Result<Vec<SceneSample>> {
    let mut r = Reader::new(buf);
    let mut samples = Vec::new();
    while !r.done() {
        r.magic(DATASET_MAGIC)?;
        let channels = r.u16()? as usize;
        let height = r.u16()? as usize;
        let width = r.u16()? as usize;
        let count = r.u16()? as usize;
        let mut image = Image::zeros(channels, height, width);
        for v in image.data.iter_mut() {
            *v = r.f64()?;
        }
        let mut segments = Vec::with_capacity(count);
        for _ in 0..count {
            let class_id = r.u16()?;
            let runs = r.u32()? as usize;
            let lengths = (0..runs).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            segments.push(GtSegment {
                class_id,
                mask: BinaryMask::from_rle(height, width, &lengths)?,
            });
        }
        samples.push(SceneSample { image, segments, seed: 0 });
    }
    Ok(samples)
}

pub fn write_scenes<W: Write>(mut w: W, samples: &[SceneSample]) -> Result<()> {
    let mut buf = Vec::new();
    for s in samples {
        encode_scene(s, &mut buf)?;
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_scenes<R: Read>(mut r: R) -> Result<Vec<SceneSample>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    decode_scenes(&buf)
}

/// A named tensor as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

pub fn encode_tensors(tensors: &[Tensor]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        let expected: usize = t.dims.iter().product();
        if expected != t.data.len() {
            return Err(Error::Format(format!("tensor {} has {} values for dims {:?}", t.name, t.data.len(), t.dims)));
        }
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.push(u8::try_from(t.dims.len()).map_err(|_| Error::Format("rank above 255".into()))?);
        for &d in &t.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_tensors(buf: &[u8]) -> Result<Vec<Tensor>> {
    let mut r = Reader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::Format(format!("tensor name: {e}")))?
            .to_owned();
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        tensors.push(Tensor { name, dims, data });
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(tensors)
}

const META_CONFIG: &str = "meta.config";
const META_CLASSES: &str = "meta.classes";

/// Serialises parameters. Weights come first in a fixed order, followed by
/// the model configuration and the seen-class list.
pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let c = &params.config;
    let mut tensors: Vec<Tensor> = params
        .weights
        .named()
        .into_iter()
        .map(|(name, a)| Tensor {
            name: name.to_owned(),
            dims: vec![a.nrows(), a.ncols()],
            data: a.iter().copied().collect(),
        })
        .collect();
    let activation = match c.mask_activation {
        MaskActivation::Softmax => 0.0,
        MaskActivation::Sigmoid => 1.0,
    };
    let config = vec![
        c.channels as f64,
        c.height as f64,
        c.width as f64,
        c.queries as f64,
        c.dim as f64,
        c.hidden as f64,
        c.ffn as f64,
        activation,
        c.new_row_std,
    ];
    tensors.push(Tensor {
        name: META_CONFIG.into(),
        dims: vec![config.len()],
        data: config,
    });
    tensors.push(Tensor {
        name: META_CLASSES.into(),
        dims: vec![params.classes.len()],
        data: params.classes.iter().map(|&c| c as f64).collect(),
    });
    encode_tensors(&tensors)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<ModelParams> {
    let mut tensors = decode_tensors(buf)?;
    let mut take = |name: &str| -> Result<Tensor> {
        let pos = tensors
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        Ok(tensors.remove(pos))
    };
    let cfg = take(META_CONFIG)?.data;
    if cfg.len() != 9 {
        return Err(Error::Format("malformed model config tensor".into()));
    }
    let config = ModelConfig {
        channels: cfg[0] as usize,
        height: cfg[1] as usize,
        width: cfg[2] as usize,
        queries: cfg[3] as usize,
        dim: cfg[4] as usize,
        hidden: cfg[5] as usize,
        ffn: cfg[6] as usize,
        mask_activation: if cfg[7] == 0.0 { MaskActivation::Softmax } else { MaskActivation::Sigmoid },
        new_row_std: cfg[8],
    };
    let classes = take(META_CLASSES)?.data.iter().map(|&c| c as u16).collect();
    let named = tensors
        .into_iter()
        .map(|t| {
            if t.dims.len() != 2 {
                return Err(Error::Format(format!("tensor {} has rank {}", t.name, t.dims.len())));
            }
            let a = Array2::from_shape_vec((t.dims[0], t.dims[1]), t.data)
                .map_err(|e| Error::Format(format!("tensor {}: {e}", t.name)))?;
            Ok((t.name, a))
        })
        .collect::<Result<Vec<_>>>()?;
    let params = ModelParams {
        config,
        weights: Weights::from_named(named)?,
        classes,
    };
    params.validate()?;
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{build_dataset, make_palette, Geometry};

    #[test]
    fn scene_roundtrip() {
        let palette = make_palette(4, 2, 3, 1).unwrap();
        let geo = Geometry {
            height: 12,
            width: 10,
            max_instances: 2,
        };
        let data = build_dataset(&palette, geo, 2, 5).unwrap();
        let mut buf = Vec::new();
        write_scenes(&mut buf, &data).unwrap();
        assert_eq!(&buf[..4], b"CMFD");
        assert_eq!(u16::from_le_bytes([buf[4], buf[5]]), FORMAT_VERSION);
        assert_eq!(u16::from_le_bytes([buf[6], buf[7]]), 3);
        let back = read_scenes(buf.as_slice()).unwrap();
        assert_eq!(back.len(), data.len());
        for (a, b) in back.iter().zip(&data) {
            assert_eq!(a.image, b.image);
            assert_eq!(a.segments, b.segments);
        }
    }

    #[test]
    fn bad_magic_and_truncation() {
        assert!(matches!(decode_scenes(b"XXXX\x01\x00"), Err(Error::Format(_))));
        assert!(matches!(decode_scenes(b"CMFD\x01\x00\x01"), Err(Error::Format(_))));
        assert!(matches!(decode_tensors(b"CMFK\x02\x00\x00\x00\x00\x00"), Err(Error::Format(_))));
    }

    #[test]
    fn checkpoint_layout() {
        let t = vec![Tensor {
            name: "ab".into(),
            dims: vec![1, 2],
            data: vec![1.0, -2.0],
        }];
        let buf = encode_tensors(&t).unwrap();
        let mut expected = b"CMFK".to_vec();
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.push(2);
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f64.to_le_bytes());
        expected.extend_from_slice(&(-2.0f64).to_le_bytes());
        assert_eq!(buf, expected);
        assert_eq!(decode_tensors(&buf).unwrap(), t);
    }

    #[test]
    fn params_roundtrip_bit_exact() {
        let cfg = ModelConfig {
            channels: 3,
            height: 8,
            width: 8,
            queries: 4,
            dim: 8,
            hidden: 4,
            ffn: 8,
            mask_activation: MaskActivation::Sigmoid,
            new_row_std: 0.01,
        };
        let p = ModelParams::init(cfg, &[3, 1, 2], 9);
        let bytes = encode_checkpoint(&p).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
    }
}
