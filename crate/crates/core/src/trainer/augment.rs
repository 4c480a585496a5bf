use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data_forge::Sample;

/// Which augmentations run and how often.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    /// Pad-and-crop shift of at most `crop_fraction` of the side.
    pub crop: bool,
    pub crop_fraction: f64,
    /// One zeroed rectangle of at most `erase_fraction` of the area,
    /// image only.
    pub erase: bool,
    pub erase_fraction: f64,
    /// Rotation about the center, nearest neighbour, image and mask.
    pub rotate: bool,
    pub max_degrees: f64,
    /// Chance that each enabled transform fires.
    pub probability: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        Self {
            crop: true,
            crop_fraction: 0.08,
            erase: true,
            erase_fraction: 0.10,
            rotate: true,
            max_degrees: 15.0,
            probability: 0.5,
        }
    }
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            crop: false,
            erase: false,
            rotate: false,
            ..Self::default()
        }
    }

    pub fn is_identity(&self) -> bool {
        !(self.crop || self.erase || self.rotate)
    }
}

fn remap<V: Copy>(src: &[V], side: usize, fill: V, f: impl Fn(f64, f64) -> (f64, f64)) -> Vec<V> {
    let mut out = vec![fill; src.len()];
    for r in 0..side {
        for c in 0..side {
            let (sr, sc) = f(r as f64, c as f64);
            let (sr, sc) = (sr.round(), sc.round());
            if sr >= 0.0 && sc >= 0.0 && (sr as usize) < side && (sc as usize) < side {
                out[r * side + c] = src[sr as usize * side + sc as usize];
            }
        }
    }
    out
}

/// Shifts image and mask by (dy, dx) with zero fill.
pub fn shift(sample: &Sample, dy: i64, dx: i64) -> Sample {
    let s = sample.width;
    let f = |r: f64, c: f64| (r - dy as f64, c - dx as f64);
    let image = remap(&sample.image, s, 0.0, f);
    let mask = remap(&sample.mask, s, 0, f);
    Sample::from_mask(s, image, mask)
}

/// Rotates image and mask by `degrees` about the image center.
pub fn rotate(sample: &Sample, degrees: f64) -> Sample {
    let s = sample.width;
    let c0 = (s as f64 - 1.0) / 2.0;
    let (sin, cos) = degrees.to_radians().sin_cos();
    // Inverse map: output pixel samples the source rotated back.
    let f = |r: f64, c: f64| {
        let (y, x) = (r - c0, c - c0);
        (c0 + cos * y - sin * x, c0 + sin * y + cos * x)
    };
    let image = remap(&sample.image, s, 0.0, f);
    let mask = remap(&sample.mask, s, 0, f);
    Sample::from_mask(s, image, mask)
}

/// Seeded augmentation. Label and report are recomputed from the
/// transformed mask.
pub fn augment(sample: &Sample, spec: &AugmentSpec, seed: u64) -> Sample {
    if spec.is_identity() {
        return sample.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = sample.width;
    let mut out = sample.clone();
    if spec.rotate && rng.random_bool(spec.probability) {
        let deg = rng.random_range(-spec.max_degrees..=spec.max_degrees);
        out = rotate(&out, deg);
    }
    if spec.crop && rng.random_bool(spec.probability) {
        let m = (spec.crop_fraction * s as f64).floor() as i64;
        let dy = rng.random_range(-m..=m);
        let dx = rng.random_range(-m..=m);
        out = shift(&out, dy, dx);
    }
    if spec.erase && rng.random_bool(spec.probability) {
        let max_area = (spec.erase_fraction * (s * s) as f64).floor() as usize;
        let h = rng.random_range(1..=s.min(max_area).max(1));
        let w = rng.random_range(1..=(max_area / h).clamp(1, s));
        let top = rng.random_range(0..=s - h);
        let left = rng.random_range(0..=s - w);
        for r in top..top + h {
            out.image[r * s + left..r * s + left + w].fill(0.0);
        }
    }
    out
}
