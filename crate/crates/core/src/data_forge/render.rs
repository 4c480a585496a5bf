use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::geometry::{LungRegion, Side, ZoneLayout};
use crate::error::{Error, Result};
use crate::locparse::{synthesize_report, LocationLabel};

pub const MIN_IMAGE_SIZE: usize = 32;

/// One circular lesion placed in a lung zone.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LesionSpec {
    pub region: LungRegion,
    /// (row, col) in pixels.
    pub center: (f64, f64),
    pub radius: f64,
    /// Brightness added inside the disk, in [0, 1].
    pub intensity: f64,
}

/// A grayscale image with its lesion mask, report and zone label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub height: usize,
    pub width: usize,
    /// Row-major intensities in [0, 1].
    pub image: Vec<f32>,
    /// Row-major {0, 1}.
    pub mask: Vec<u8>,
    pub report: String,
    pub label: LocationLabel,
}

impl Sample {
    /// Builds a sample whose label and report are derived from the mask.
    pub fn from_mask(size: usize, image: Vec<f32>, mask: Vec<u8>) -> Self {
        let label = LocationLabel::new(ZoneLayout::new(size).occupied_regions(&mask));
        Self {
            height: size,
            width: size,
            image,
            mask,
            report: synthesize_report(&label),
            label,
        }
    }

    pub fn lesion_pixels(&self) -> usize {
        self.mask.iter().filter(|&&m| m != 0).count()
    }
}

/// Appearance constants of the synthetic radiographs.
mod look {
    pub const BODY: f64 = 0.55;
    pub const LUNG: f64 = 0.22;
    pub const RIB_AMPLITUDE: f64 = 0.04;
    pub const NOISE_SIGMA: f64 = 0.05;
    pub const MAX_DECOYS: usize = 2;
    pub const DECOY_AMPLITUDE: (f64, f64) = (0.06, 0.18);
}

pub fn validate_specs(specs: &[LesionSpec], image_size: usize) -> Result<()> {
    if image_size < MIN_IMAGE_SIZE {
        return Err(Error::Invalid(format!(
            "image size {image_size} is below the minimum {MIN_IMAGE_SIZE}"
        )));
    }
    if specs.len() > LungRegion::COUNT {
        return Err(Error::Invalid(format!("{} lesions for 6 regions", specs.len())));
    }
    let layout = ZoneLayout::new(image_size);
    let mut seen = [false; 6];
    for s in specs {
        let i = s.region.index();
        if seen[i] {
            return Err(Error::Invalid(format!(
                "overlapping lesion specs in region {}",
                s.region
            )));
        }
        seen[i] = true;
        if !(s.radius > 0.0) {
            return Err(Error::Invalid(format!("lesion radius {} must be positive", s.radius)));
        }
        if !(0.0..=1.0).contains(&s.intensity) {
            return Err(Error::Invalid(format!(
                "lesion intensity {} outside [0, 1]",
                s.intensity
            )));
        }
        let z = layout.zone(s.region);
        let (r, c) = s.center;
        if !(r >= z.top as f64 && r < z.bottom as f64 && c >= z.left as f64 && c < z.right as f64) {
            return Err(Error::Invalid(format!(
                "lesion center ({r}, {c}) lies outside region {}",
                s.region
            )));
        }
        let mid = layout.midline() as f64;
        let crosses = match s.region.side {
            Side::Left => c + s.radius >= mid,
            Side::Right => c - s.radius < mid,
        };
        if crosses {
            return Err(Error::Invalid(format!(
                "lesion in {} crosses the mid-sternal line",
                s.region
            )));
        }
    }
    Ok(())
}

/// Renders a deterministic synthetic chest radiograph: two dark elliptical
/// lung fields with rib banding over a brighter body, a few unlabelled
/// smooth blobs, the requested lesion disks, and pixel noise.
pub fn render_sample(specs: &[LesionSpec], image_size: usize, seed: u64) -> Result<Sample> {
    validate_specs(specs, image_size)?;
    let size = image_size;
    let layout = ZoneLayout::new(size);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut img = vec![look::BODY; size * size];
    let rib_period = size as f64 / 6.0;
    let rib_phase = rng.random_range(0.0..std::f64::consts::TAU);
    for side in [Side::Left, Side::Right] {
        let f = layout.field(side);
        let cy = (f.top + f.bottom) as f64 / 2.0;
        let cx = (f.left + f.right) as f64 / 2.0;
        let ry = f.height() as f64 / 2.0 + 1.0;
        let rx = f.width() as f64 / 2.0 + 1.0;
        for row in 0..size {
            for col in 0..size {
                let dy = (row as f64 + 0.5 - cy) / ry;
                let dx = (col as f64 + 0.5 - cx) / rx;
                let rho = (dy * dy + dx * dx).sqrt();
                // soft-edged ellipse
                let inside = ((1.1 - rho) / 0.2).clamp(0.0, 1.0);
                if inside > 0.0 {
                    let rib = look::RIB_AMPLITUDE
                        * (std::f64::consts::TAU * row as f64 / rib_period + rib_phase).sin();
                    let lung = look::LUNG + rib;
                    let v = &mut img[row * size + col];
                    *v = *v * (1.0 - inside) + lung * inside;
                }
            }
        }
    }

    let (r_min, r_max) = lesion_radius_range(size);
    let decoys = rng.random_range(0..=look::MAX_DECOYS);
    for _ in 0..decoys {
        let side = if rng.random_bool(0.5) { Side::Left } else { Side::Right };
        let f = layout.field(side);
        let cy = rng.random_range(f.top as f64..f.bottom as f64);
        let cx = rng.random_range(f.left as f64..f.right as f64);
        let sigma = rng.random_range(r_min * 0.5..r_max * 0.7);
        let amp = rng.random_range(look::DECOY_AMPLITUDE.0..look::DECOY_AMPLITUDE.1);
        for row in 0..size {
            for col in 0..size {
                let d2 = (row as f64 + 0.5 - cy).powi(2) + (col as f64 + 0.5 - cx).powi(2);
                img[row * size + col] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
    }

    let mut mask = vec![0u8; size * size];
    for s in specs {
        let (cy, cx) = s.center;
        for row in 0..size {
            for col in 0..size {
                let d2 = (row as f64 + 0.5 - cy).powi(2) + (col as f64 + 0.5 - cx).powi(2);
                if d2 <= s.radius * s.radius {
                    let rel = d2.sqrt() / s.radius;
                    img[row * size + col] += s.intensity * (0.8 + 0.2 * (1.0 - rel * rel));
                    mask[row * size + col] = 1;
                }
            }
        }
    }

    let noise = Normal::new(0.0, look::NOISE_SIGMA).expect("valid sigma");
    let image: Vec<f32> = img
        .into_iter()
        .map(|v| (v + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32)
        .collect();
    Ok(Sample::from_mask(size, image, mask))
}

/// Lesion radii used by the random generator, scaled with the image.
pub fn lesion_radius_range(size: usize) -> (f64, f64) {
    (size as f64 / 16.0, size as f64 / 9.0)
}

/// Intensity range of randomly generated lesions.
pub const LESION_INTENSITY: (f64, f64) = (0.12, 0.35);

/// Draws `count` lesions in distinct random regions, each disk wholly inside
/// its zone rectangle.
pub fn random_specs(rng: &mut impl Rng, image_size: usize, count: usize) -> Vec<LesionSpec> {
    let layout = ZoneLayout::new(image_size);
    let (r_min, r_max) = lesion_radius_range(image_size);
    let mut regions: Vec<usize> = rand::seq::index::sample(rng, 6, count.min(6)).into_vec();
    regions.sort_unstable();
    regions
        .into_iter()
        .map(|i| {
            let region = LungRegion::ALL[i];
            let z = layout.zone(region);
            let max_r = (z.height().min(z.width()) as f64 / 2.0 - 0.5).min(r_max);
            let radius = rng.random_range(r_min.min(max_r)..=max_r);
            let center = (
                rng.random_range(z.top as f64 + radius..=z.bottom as f64 - radius),
                rng.random_range(z.left as f64 + radius..=z.right as f64 - radius),
            );
            let intensity = rng.random_range(LESION_INTENSITY.0..LESION_INTENSITY.1);
            LesionSpec {
                region,
                center,
                radius,
                intensity,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_forge::Zone;
    use crate::locparse::parse_report;
    use proptest::prelude::*;

    fn upper_left(size: usize) -> LesionSpec {
        let z = ZoneLayout::new(size).zone(LungRegion::new(Side::Left, Zone::Upper));
        LesionSpec {
            region: LungRegion::new(Side::Left, Zone::Upper),
            center: ((z.top + z.bottom) as f64 / 2.0, (z.left + z.right) as f64 / 2.0),
            radius: 4.0,
            intensity: 0.3,
        }
    }

    #[test]
    fn no_lesions_gives_blank_mask_and_no_infection_report() {
        let s = render_sample(&[], 64, 7).unwrap();
        assert_eq!(s.lesion_pixels(), 0);
        assert!(s.label.is_empty());
        assert_eq!(s.report, synthesize_report(&LocationLabel::empty()));
        assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn single_upper_left_lesion() {
        let s = render_sample(&[upper_left(64)], 64, 1).unwrap();
        assert_eq!(s.label, LocationLabel::new([true, false, false, false, false, false]));
        let zone = ZoneLayout::new(64).zone(LungRegion::new(Side::Left, Zone::Upper));
        for (i, &m) in s.mask.iter().enumerate() {
            if m != 0 {
                assert!(zone.contains(i / 64, i % 64));
            }
        }
        assert!(s.lesion_pixels() > 0);
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = render_sample(&[upper_left(64)], 64, 1).unwrap();
        let b = render_sample(&[upper_left(64)], 64, 1).unwrap();
        assert_eq!(a, b);
        let c = render_sample(&[upper_left(64)], 64, 2).unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let s = upper_left(64);
        assert!(render_sample(&[s, s], 64, 0).is_err());
        let mut outside = s;
        outside.center = (40.0, 10.0);
        assert!(render_sample(&[outside], 64, 0).is_err());
        let mut crossing = s;
        crossing.center.1 = 27.0;
        crossing.radius = 6.0;
        assert!(render_sample(&[crossing], 64, 0).is_err());
        assert!(render_sample(&[], 16, 0).is_err());
    }

    proptest! {
        #[test]
        fn label_matches_mask_and_report(seed in 0u64..10_000, count in 0usize..=6, size in prop::sample::select(vec![32usize, 64, 96])) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let specs = random_specs(&mut rng, size, count);
            let s = render_sample(&specs, size, seed).unwrap();
            let layout = ZoneLayout::new(size);
            for r in LungRegion::ALL {
                let zone = layout.zone(r);
                let hit = s.mask.iter().enumerate().any(|(i, &m)| m != 0 && zone.contains(i / size, i % size));
                prop_assert_eq!(s.label.get(r), hit);
            }
            prop_assert_eq!(s.label.count(), count);
            prop_assert_eq!(parse_report(&s.report), s.label);
        }
    }
}
