//! Deterministic synthetic scenes with "thing" and "stuff" classes.
//!
//! Every scene is a pure function of `(seed, palette, present, geometry)`.
//! Stuff classes are placed first as one large region each, thing classes
//! afterwards as one or more smaller instances. All shapes keep a one pixel
//! gap to previously placed shapes, so segments are pairwise disjoint and
//! instances of the same class never touch.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mask::{check_disjoint, BinaryMask};

pub type ClassId = u16;

/// Placement attempts per shape before giving up.
pub const MAX_PLACEMENT_ATTEMPTS: usize = 100;
/// Half-width of the uniform pixel noise.
pub const NOISE_AMPLITUDE: f64 = 0.05;
/// Appearance of pixels no class owns.
pub const NEUTRAL_LEVEL: f64 = 0.5;
/// Minimum per-channel separation between two class appearances.
pub const MIN_APPEARANCE_GAP: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassKind {
    Thing,
    Stuff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDef {
    pub id: ClassId,
    pub kind: ClassKind,
    pub appearance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtSegment {
    pub class_id: ClassId,
    pub mask: BinaryMask,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geometry {
    pub height: usize,
    pub width: usize,
    pub max_instances: usize,
}

/// Channel-major C×H×W feature image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f64 {
        self.data[(c * self.height + h) * self.width + w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSample {
    pub image: Image,
    pub segments: Vec<GtSegment>,
    pub seed: u64,
}

impl SceneSample {
    pub fn classes(&self) -> BTreeSet<ClassId> {
        self.segments.iter().map(|s| s.class_id).collect()
    }
}

/// H×W map of class ids, 0 meaning unlabeled.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<ClassId>,
}

impl LabelMap {
    pub fn count(&self, class_id: ClassId) -> usize {
        self.labels.iter().filter(|&&l| l == class_id).count()
    }
}

/// Builds a palette of `size` classes whose first `things` ids are things.
///
/// Appearances are drawn without replacement from the {0.1, 0.5, 0.9}^C
/// lattice minus the neutral point, so any two classes differ by 0.4 in at
/// least one channel.
pub fn make_palette(size: usize, things: usize, channels: usize, seed: u64) -> Result<Vec<ClassDef>> {
    if things > size {
        return Err(Error::Config(format!("{things} thing classes exceed palette size {size}")));
    }
    let levels = [0.1, 0.5, 0.9];
    let lattice = 3usize.pow(channels as u32);
    let mut points: Vec<Vec<f64>> = (0..lattice)
        .map(|mut code| {
            (0..channels)
                .map(|_| {
                    let v = levels[code % 3];
                    code /= 3;
                    v
                })
                .collect::<Vec<f64>>()
        })
        .filter(|p| p.iter().any(|&v| v != NEUTRAL_LEVEL))
        .collect();
    if points.len() < size {
        return Err(Error::Config(format!(
            "{channels} channels allow at most {} distinct classes",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    points.shuffle(&mut rng);
    let palette = points
        .into_iter()
        .take(size)
        .enumerate()
        .map(|(idx, appearance)| ClassDef {
            id: idx as ClassId + 1,
            kind: if idx < things { ClassKind::Thing } else { ClassKind::Stuff },
            appearance,
        })
        .collect::<Vec<_>>();
    validate_palette(&palette)?;
    Ok(palette)
}

pub fn validate_palette(palette: &[ClassDef]) -> Result<()> {
    for (idx, class) in palette.iter().enumerate() {
        if class.id as usize != idx + 1 {
            return Err(Error::Config(format!("class ids must be contiguous from 1, found {}", class.id)));
        }
        if class.appearance.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config(format!("class {} appearance outside [0,1]", class.id)));
        }
        for other in &palette[..idx] {
            let gap = class
                .appearance
                .iter()
                .zip(&other.appearance)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if gap < MIN_APPEARANCE_GAP {
                return Err(Error::Config(format!(
                    "classes {} and {} are closer than {MIN_APPEARANCE_GAP}",
                    other.id, class.id
                )));
            }
        }
    }
    Ok(())
}

enum Shape {
    Rect { top: usize, left: usize, h: usize, w: usize },
    Circle { cy: f64, cx: f64, r: f64 },
}

impl Shape {
    fn contains(&self, y: usize, x: usize) -> bool {
        match *self {
            Shape::Rect { top, left, h, w } => y >= top && y < top + h && x >= left && x < left + w,
            Shape::Circle { cy, cx, r } => {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                dy * dy + dx * dx <= r * r
            }
        }
    }

    fn rasterize(&self, height: usize, width: usize) -> BinaryMask {
        let mut m = BinaryMask::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                if self.contains(y, x) {
                    m.set(y, x, true);
                }
            }
        }
        m
    }
}

fn random_shape(rng: &mut ChaCha8Rng, kind: ClassKind, height: usize, width: usize) -> Shape {
    let short = height.min(width);
    match kind {
        ClassKind::Stuff => {
            let lo = (short / 4).max(2);
            let hi = (short / 2).max(lo);
            let h = rng.gen_range(lo..=hi).min(height);
            let w = rng.gen_range(lo..=hi).min(width);
            Shape::Rect {
                top: rng.gen_range(0..=height - h),
                left: rng.gen_range(0..=width - w),
                h,
                w,
            }
        }
        ClassKind::Thing => {
            if rng.gen_bool(0.5) {
                let hi = (short / 4 + 1).max(3);
                let h = rng.gen_range(3..=hi).min(height);
                let w = rng.gen_range(3..=hi).min(width);
                Shape::Rect {
                    top: rng.gen_range(0..=height - h),
                    left: rng.gen_range(0..=width - w),
                    h,
                    w,
                }
            } else {
                let r = rng.gen_range(1.5..=(short as f64 / 8.0).max(2.0));
                let margin = r.ceil() as usize;
                let cy = rng.gen_range(margin..height.saturating_sub(margin).max(margin + 1)) as f64;
                let cx = rng.gen_range(margin..width.saturating_sub(margin).max(margin + 1)) as f64;
                Shape::Circle { cy, cx, r }
            }
        }
    }
}

/// Grows a mask by one pixel in the 8-neighbourhood.
fn dilate(mask: &BinaryMask) -> BinaryMask {
    let (h, w) = (mask.height(), mask.width());
    let mut out = BinaryMask::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                    out.set(ny, nx, true);
                }
            }
        }
    }
    out
}

pub fn generate_scene(
    seed: u64,
    palette: &[ClassDef],
    present: &BTreeSet<ClassId>,
    geometry: Geometry,
) -> Result<SceneSample> {
    let Geometry {
        height,
        width,
        max_instances,
    } = geometry;
    if height < 8 || width < 8 {
        return Err(Error::Config(format!("grid {height}x{width} smaller than 8x8")));
    }
    if max_instances == 0 {
        return Err(Error::Config("max_instances must be at least 1".into()));
    }
    let channels = palette.first().map_or(0, |c| c.appearance.len());
    let lookup = |id: ClassId| palette.iter().find(|c| c.id == id);
    for &id in present {
        if lookup(id).is_none() {
            return Err(Error::Config(format!("class {id} not in palette")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut occupied = BinaryMask::zeros(height, width);
    let mut segments = Vec::new();
    let ordered = present
        .iter()
        .filter(|&&id| lookup(id).unwrap().kind == ClassKind::Stuff)
        .chain(present.iter().filter(|&&id| lookup(id).unwrap().kind == ClassKind::Thing));
    for &id in ordered {
        let class = lookup(id).unwrap();
        let instances = match class.kind {
            ClassKind::Stuff => 1,
            ClassKind::Thing => rng.gen_range(1..=max_instances),
        };
        for _ in 0..instances {
            let mut placed = None;
            for _ in 0..MAX_PLACEMENT_ATTEMPTS {
                let mask = random_shape(&mut rng, class.kind, height, width).rasterize(height, width);
                if mask.area() > 0 && !mask.overlaps(&occupied)? {
                    placed = Some(mask);
                    break;
                }
            }
            let mask = placed.ok_or(Error::Placement {
                class_id: id,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            })?;
            occupied.union_with(&dilate(&mask))?;
            segments.push(GtSegment { class_id: id, mask });
        }
    }
    segments.sort_by_key(|s| s.class_id);

    let mut image = Image::zeros(channels, height, width);
    for y in 0..height {
        for x in 0..width {
            let owner = segments.iter().find(|s| s.mask.get(y, x));
            for c in 0..channels {
                let base = owner.map_or(NEUTRAL_LEVEL, |s| lookup(s.class_id).unwrap().appearance[c]);
                let noise = rng.gen_range(-NOISE_AMPLITUDE..=NOISE_AMPLITUDE);
                image.data[(c * height + y) * width + x] = base + noise;
            }
        }
    }
    Ok(SceneSample { image, segments, seed })
}

/// Keeps only the segments whose class is in `current`; the image is untouched.
pub fn filter_annotations(sample: &SceneSample, current: &BTreeSet<ClassId>) -> SceneSample {
    SceneSample {
        image: sample.image.clone(),
        segments: sample
            .segments
            .iter()
            .filter(|s| current.contains(&s.class_id))
            .cloned()
            .collect(),
        seed: sample.seed,
    }
}

pub fn to_semantic(segments: &[GtSegment], height: usize, width: usize) -> Result<LabelMap> {
    let mut labels = vec![0; height * width];
    for (idx, seg) in segments.iter().enumerate() {
        if seg.mask.height() != height || seg.mask.width() != width {
            return Err(crate::error::shape_err(
                format!("{height}x{width}"),
                format!("{}x{}", seg.mask.height(), seg.mask.width()),
            ));
        }
        for (p, &on) in seg.mask.bits().iter().enumerate() {
            if on {
                if labels[p] != 0 {
                    return Err(Error::Integrity(format!("segment {idx} overlaps another segment")));
                }
                labels[p] = seg.class_id;
            }
        }
    }
    Ok(LabelMap { height, width, labels })
}

/// splitmix64, used to derive per-sample seeds from a stream seed.
pub fn mix_seed(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `per_class` scenes for every palette class, each also holding one or two
/// other random classes. Placement failures retry with a fresh derived seed.
pub fn build_dataset(palette: &[ClassDef], geometry: Geometry, per_class: usize, seed: u64) -> Result<Vec<SceneSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ClassId> = palette.iter().map(|c| c.id).collect();
    let mut samples = Vec::with_capacity(ids.len() * per_class);
    for &anchor in &ids {
        for _ in 0..per_class {
            let extra = rng.gen_range(1..=2usize).min(ids.len() - 1);
            let mut present = BTreeSet::from([anchor]);
            let others: Vec<ClassId> = ids.iter().copied().filter(|&c| c != anchor).collect();
            present.extend(others.choose_multiple(&mut rng, extra).copied());
            let mut sample_seed = rng.gen::<u64>();
            let mut attempts = 0;
            loop {
                match generate_scene(sample_seed, palette, &present, geometry) {
                    Ok(s) => {
                        samples.push(s);
                        break;
                    }
                    Err(Error::Placement { .. }) if attempts < 20 => {
                        attempts += 1;
                        sample_seed = mix_seed(sample_seed);
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    Ok(samples)
}

/// Checks the generator's structural guarantees on one sample.
pub fn check_sample(sample: &SceneSample, palette: &[ClassDef]) -> Result<()> {
    if sample.image.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Integrity("non-finite pixel".into()));
    }
    check_disjoint(sample.segments.iter().map(|s| &s.mask), "scene")?;
    for kind_check in palette.iter().filter(|c| c.kind == ClassKind::Stuff) {
        if sample.segments.iter().filter(|s| s.class_id == kind_check.id).count() > 1 {
            return Err(Error::Integrity(format!("stuff class {} split into several segments", kind_check.id)));
        }
    }
    if sample.segments.iter().any(|s| s.mask.area() == 0) {
        return Err(Error::Integrity("empty segment".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geo(max_instances: usize) -> Geometry {
        Geometry {
            height: 16,
            width: 16,
            max_instances,
        }
    }

    #[test]
    fn palette_is_separable() {
        let p = make_palette(8, 4, 3, 0).unwrap();
        assert_eq!(p.len(), 8);
        assert_eq!(p.iter().filter(|c| c.kind == ClassKind::Thing).count(), 4);
        validate_palette(&p).unwrap();
    }

    #[test]
    fn palette_rejects_close_classes() {
        let mut p = make_palette(3, 1, 3, 0).unwrap();
        p[1].appearance = p[0].appearance.iter().map(|v| v + 0.1).collect();
        assert!(validate_palette(&p).is_err());
    }

    #[test]
    fn single_class_scene() {
        let p = make_palette(3, 1, 3, 1).unwrap();
        let s = generate_scene(7, &p, &BTreeSet::from([1]), geo(3)).unwrap();
        assert!(!s.segments.is_empty());
        assert!(s.segments.iter().all(|seg| seg.class_id == 1));
    }

    #[test]
    fn generation_is_deterministic() {
        let p = make_palette(3, 1, 3, 1).unwrap();
        let a = generate_scene(7, &p, &BTreeSet::from([1, 2, 3]), geo(3)).unwrap();
        let b = generate_scene(7, &p, &BTreeSet::from([1, 2, 3]), geo(3)).unwrap();
        assert_eq!(a, b);
        let bits_a: Vec<u64> = a.image.data.iter().map(|v| v.to_bits()).collect();
        let bits_b: Vec<u64> = b.image.data.iter().map(|v| v.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn thing_instances_disjoint() {
        let mut p = make_palette(3, 0, 3, 1).unwrap();
        p[1].kind = ClassKind::Thing;
        let s = generate_scene(7, &p, &BTreeSet::from([1, 2]), geo(3)).unwrap();
        let things: Vec<_> = s.segments.iter().filter(|x| x.class_id == 2).collect();
        assert!(!things.is_empty());
        for (i, a) in things.iter().enumerate() {
            for b in &things[i + 1..] {
                let and = a.mask.bits().iter().zip(b.mask.bits()).filter(|(x, y)| **x && **y).count();
                assert_eq!(and, 0);
            }
        }
    }

    #[test]
    fn tiny_grid_rejected() {
        let p = make_palette(3, 1, 3, 1).unwrap();
        let g = Geometry {
            height: 7,
            width: 16,
            max_instances: 1,
        };
        assert!(matches!(generate_scene(1, &p, &BTreeSet::from([1]), g), Err(Error::Config(_))));
    }

    #[test]
    fn crowded_scene_reports_placement_failure() {
        let p = make_palette(20, 20, 3, 1).unwrap();
        let present: BTreeSet<ClassId> = (1..=20).collect();
        let g = Geometry {
            height: 8,
            width: 8,
            max_instances: 3,
        };
        assert!(matches!(generate_scene(3, &p, &present, g), Err(Error::Placement { .. })));
    }

    #[test]
    fn filter_keeps_requested_classes() {
        let p = make_palette(3, 1, 3, 2).unwrap();
        let s = generate_scene(11, &p, &BTreeSet::from([1, 2, 3]), geo(1)).unwrap();
        let f = filter_annotations(&s, &BTreeSet::from([2]));
        assert_eq!(f.image, s.image);
        assert!(f.segments.iter().all(|seg| seg.class_id == 2));
        assert_eq!(f.segments.len(), s.segments.iter().filter(|x| x.class_id == 2).count());
        assert_eq!(filter_annotations(&s, &BTreeSet::from([1, 2, 3])), s);
        assert!(filter_annotations(&s, &BTreeSet::new()).segments.is_empty());
    }

    #[test]
    fn semantic_merges_instances_and_counts_pixels() {
        let a = BinaryMask::from_rows(&[[1u8, 0, 0], [0, 0, 0], [0, 0, 0]]);
        let b = BinaryMask::from_rows(&[[0u8, 0, 0], [0, 0, 0], [0, 1, 1]]);
        let c = BinaryMask::from_rows(&[[0u8, 1, 1], [0, 0, 0], [0, 0, 0]]);
        let segs = vec![
            GtSegment { class_id: 5, mask: a },
            GtSegment { class_id: 5, mask: b },
            GtSegment { class_id: 2, mask: c },
        ];
        let map = to_semantic(&segs, 3, 3).unwrap();
        assert_eq!(map.count(5), 3);
        assert_eq!(map.count(2), 2);
        assert_eq!(map.count(0), 4);
        assert!(to_semantic(&[], 3, 3).unwrap().labels.iter().all(|&l| l == 0));
    }

    #[test]
    fn semantic_rejects_overlap() {
        let a = BinaryMask::from_rows(&[[1u8, 1], [0, 0]]);
        let segs = vec![
            GtSegment { class_id: 1, mask: a.clone() },
            GtSegment { class_id: 2, mask: a },
        ];
        assert!(matches!(to_semantic(&segs, 2, 2), Err(Error::Integrity(_))));
    }

    #[test]
    fn dataset_samples_are_valid() {
        let p = make_palette(8, 4, 3, 3).unwrap();
        let data = build_dataset(&p, geo(2), 3, 9).unwrap();
        assert_eq!(data.len(), 24);
        for s in &data {
            check_sample(s, &p).unwrap();
            let total: usize = s.segments.iter().map(|x| x.mask.area()).sum();
            let map = to_semantic(&s.segments, 16, 16).unwrap();
            assert_eq!(map.labels.iter().filter(|&&l| l != 0).count(), total);
        }
    }
}
