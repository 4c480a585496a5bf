use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::render::{random_specs, render_sample, Sample, MIN_IMAGE_SIZE};
use crate::config::{join_list, KeyValues};
use crate::error::{Error, Result};
use crate::locparse::parse_report;

pub const MANIFEST_HEADER: &str = "image,mask,report";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRecord {
    pub image: PathBuf,
    pub mask: PathBuf,
    pub report: String,
}

/// List of (image, mask, report) records. Relative paths resolve against
/// `root`, the directory holding the manifest file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
    pub split: Option<Split>,
}

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Writes the manifest file. Paths are kept relative when the file lives
    /// in `root`, and made absolute otherwise.
    pub fn write(&self, path: &Path) -> Result<()> {
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let same_root = dir == self.root
            || (dir.as_os_str().is_empty() && self.root.as_os_str().is_empty());
        let mut out = String::new();
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let (img, msk) = if same_root {
                (r.image.clone(), r.mask.clone())
            } else {
                (self.resolve(&r.image), self.resolve(&r.mask))
            };
            out.push_str(&csv_field(&img.to_string_lossy()));
            out.push(',');
            out.push_str(&csv_field(&msk.to_string_lossy()));
            out.push(',');
            out.push('"');
            out.push_str(&r.report.replace('"', "\"\""));
            out.push('"');
            out.push('\n');
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load_samples(&self) -> Result<Vec<Sample>> {
        self.records
            .par_iter()
            .map(|r| load_record(self, r))
            .collect()
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub num_samples: usize,
    pub image_size: usize,
    /// Relative weight of drawing 0, 1, …, 6 lesions per sample.
    pub lesion_count_weights: [f64; 7],
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_samples: 768,
            image_size: 64,
            lesion_count_weights: [0.15, 0.35, 0.30, 0.20, 0.0, 0.0, 0.0],
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub const KEYS: [&'static str; 4] = ["num_samples", "image_size", "lesion_count_weights", "seed"];

    pub fn validate(&self) -> Result<()> {
        if self.num_samples == 0 {
            return Err(Error::Invalid("num_samples must be at least 1".into()));
        }
        if self.image_size < MIN_IMAGE_SIZE {
            return Err(Error::Invalid(format!(
                "image size {} is below the minimum {MIN_IMAGE_SIZE}",
                self.image_size
            )));
        }
        WeightedIndex::new(self.lesion_count_weights)
            .map_err(|e| Error::Invalid(format!("lesion count weights: {e}")))?;
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KeyValues, prefix: &str) {
        kv.set(&format!("{prefix}num_samples"), self.num_samples);
        kv.set(&format!("{prefix}image_size"), self.image_size);
        kv.set(&format!("{prefix}lesion_count_weights"), join_list(&self.lesion_count_weights));
        kv.set(&format!("{prefix}seed"), self.seed);
    }

    pub fn from_kv(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let mut c = Self::default();
        kv.read(&format!("{prefix}num_samples"), &mut c.num_samples)?;
        kv.read(&format!("{prefix}image_size"), &mut c.image_size)?;
        let key = format!("{prefix}lesion_count_weights");
        let mut w = c.lesion_count_weights.to_vec();
        kv.read_list(&key, &mut w)?;
        c.lesion_count_weights = w
            .try_into()
            .map_err(|_| Error::Invalid(format!("config key `{key}`: expected 7 weights")))?;
        kv.read(&format!("{prefix}seed"), &mut c.seed)?;
        c.validate()?;
        Ok(c)
    }
}

/// SplitMix64 finalizer; decorrelates per-sample seeds.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sample `index` of the dataset described by `config`; depends only on
/// (config, index).
pub fn generate_sample(config: &GeneratorConfig, index: usize) -> Result<Sample> {
    let seed = mix_seed(config.seed, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = WeightedIndex::new(config.lesion_count_weights)
        .map_err(|e| Error::Invalid(format!("lesion count weights: {e}")))?;
    let count = dist.sample(&mut rng);
    let specs = random_specs(&mut rng, config.image_size, count);
    render_sample(&specs, config.image_size, mix_seed(seed, 1))
}

/// Renders `config.num_samples` samples into `out_dir/images`,
/// `out_dir/masks` and `out_dir/manifest.csv`.
pub fn generate_dataset(config: &GeneratorConfig, out_dir: &Path) -> Result<DatasetManifest> {
    if config.num_samples == 0 {
        return Err(Error::Invalid("num_samples must be at least 1".into()));
    }
    for sub in ["images", "masks"] {
        let d = out_dir.join(sub);
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let records: Vec<ManifestRecord> = (0..config.num_samples)
        .into_par_iter()
        .map(|i| {
            let sample = generate_sample(config, i)?;
            let image = PathBuf::from(format!("images/case_{i:05}.png"));
            let mask = PathBuf::from(format!("masks/case_{i:05}.png"));
            write_gray_png(&out_dir.join(&image), sample.width, sample.height, &quantize(&sample.image))?;
            let mask_px: Vec<u8> = sample.mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
            write_gray_png(&out_dir.join(&mask), sample.width, sample.height, &mask_px)?;
            Ok(ManifestRecord {
                image,
                mask,
                report: sample.report,
            })
        })
        .collect::<Result<_>>()?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        records,
        split: None,
    };
    manifest.write(&out_dir.join("manifest.csv"))?;
    Ok(manifest)
}

pub fn quantize(image: &[f32]) -> Vec<u8> {
    image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn write_gray_png(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    let img = image::GrayImage::from_raw(width as u32, height as u32, pixels.to_vec())
        .ok_or_else(|| Error::Shape(format!("{} pixels for {width}×{height}", pixels.len())))?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image {
                path: path.to_path_buf(),
                message: other.to_string(),
            },
        })
}

/// Loads an 8-bit grayscale image as (width, height, pixels).
pub fn read_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    if !path.exists() {
        return Err(Error::Data(format!("missing file {}", path.display())));
    }
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let g = img.to_luma8();
    Ok((g.width() as usize, g.height() as usize, g.into_raw()))
}

/// Problem with one manifest record; the record is skipped.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordError {
    /// 1-based line in the manifest file.
    pub line: usize,
    pub image: String,
    pub message: String,
}

impl fmt::Display for RecordError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {} ({}): {}", self.line, self.image, self.message)
    }
}

/// Reads and validates a manifest. Invalid records are dropped and
/// reported; reports are kept verbatim.
pub fn ingest_manifest(path: &Path) -> Result<(DatasetManifest, Vec<RecordError>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(text.as_bytes());
    let headers = reader
        .headers()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?
        .clone();
    if headers.iter().collect::<Vec<_>>() != ["image", "mask", "report"] {
        return Err(Error::Data(format!(
            "{}: header must be `{MANIFEST_HEADER}`",
            path.display()
        )));
    }
    let mut manifest = DatasetManifest {
        root,
        records: Vec::new(),
        split: None,
    };
    let mut errors = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                errors.push(RecordError {
                    line,
                    image: String::new(),
                    message: e.to_string(),
                });
                continue;
            }
        };
        let record = ManifestRecord {
            image: PathBuf::from(&row[0]),
            mask: PathBuf::from(&row[1]),
            report: row[2].to_string(),
        };
        let fail = |message: String| RecordError {
            line,
            image: row[0].to_string(),
            message,
        };
        let resolved = manifest.resolve(&record.image);
        if !seen.insert(resolved.clone()) {
            errors.push(fail("duplicate image path".into()));
            continue;
        }
        match load_record(&manifest, &record) {
            Ok(_) => manifest.records.push(record),
            Err(e) => errors.push(fail(match e {
                Error::Data(m) => m,
                other => other.to_string(),
            })),
        }
    }
    Ok((manifest, errors))
}

/// Loads one record into a [`Sample`]; the label comes from parsing the
/// report, never from disk.
pub fn load_record(manifest: &DatasetManifest, r: &ManifestRecord) -> Result<Sample> {
    let (w, h, px) = read_gray(&manifest.resolve(&r.image))?;
    let (mw, mh, mpx) = read_gray(&manifest.resolve(&r.mask))?;
    if (w, h) != (mw, mh) {
        return Err(Error::Data(format!(
            "shape mismatch: image {w}×{h}, mask {mw}×{mh}"
        )));
    }
    let zero_255 = mpx.iter().all(|&v| v == 0 || v == 255);
    let zero_one = mpx.iter().all(|&v| v <= 1);
    if !zero_255 && !zero_one {
        let bad = mpx.iter().find(|&&v| v != 0 && v != 255).copied().unwrap_or(0);
        return Err(Error::Data(format!("non-binary mask (value {bad})")));
    }
    let threshold = if zero_one { 1 } else { 128 };
    Ok(Sample {
        height: h,
        width: w,
        image: px.iter().map(|&v| v as f32 / 255.0).collect(),
        mask: mpx.iter().map(|&v| (v >= threshold) as u8).collect(),
        label: parse_report(&r.report),
        report: r.report.clone(),
    })
}

/// Seeded shuffle then partition. Validation and test sizes are
/// `floor(n·ratio)`; the remainder goes to training.
pub fn split_dataset(
    manifest: &DatasetManifest,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<[DatasetManifest; 3]> {
    let (a, b, c) = ratios;
    if !(a > 0.0 && b > 0.0 && c > 0.0) {
        return Err(Error::Invalid(format!(
            "split ratios must be positive, got ({a}, {b}, {c})"
        )));
    }
    if ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::Invalid(format!(
            "split ratios sum to {}, not 1",
            a + b + c
        )));
    }
    let n = manifest.len();
    // The slack keeps exact fractions such as 128/768 from flooring down.
    let n_val = (n as f64 * b + 1e-9).floor() as usize;
    let n_test = (n as f64 * c + 1e-9).floor() as usize;
    let n_train = n - n_val - n_test;
    if n_train == 0 || n_val == 0 || n_test == 0 {
        return Err(Error::Invalid(format!(
            "{n} records cannot fill three non-empty splits with ratios ({a}, {b}, {c})"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |idx: &[usize], split| DatasetManifest {
        root: manifest.root.clone(),
        records: idx.iter().map(|&i| manifest.records[i].clone()).collect(),
        split: Some(split),
    };
    Ok([
        take(&order[..n_train], Split::Train),
        take(&order[n_train..n_train + n_val], Split::Val),
        take(&order[n_train + n_val..], Split::Test),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fake_manifest(n: usize) -> DatasetManifest {
        DatasetManifest {
            root: PathBuf::new(),
            records: (0..n)
                .map(|i| ManifestRecord {
                    image: format!("img{i}.png").into(),
                    mask: format!("m{i}.png").into(),
                    report: String::new(),
                })
                .collect(),
            split: None,
        }
    }

    #[test]
    fn generator_config_kv_round_trip() {
        let c = GeneratorConfig {
            num_samples: 12,
            seed: 3,
            ..Default::default()
        };
        let mut kv = KeyValues::new();
        c.to_kv(&mut kv, "data.");
        assert_eq!(GeneratorConfig::from_kv(&kv, "data.").unwrap(), c);
        kv.set("data.lesion_count_weights", "1,2");
        assert!(GeneratorConfig::from_kv(&kv, "data.").is_err());
        kv.set("data.lesion_count_weights", "0,0,0,0,0,0,0");
        assert!(GeneratorConfig::from_kv(&kv, "data.").is_err());
    }

    #[test]
    fn split_sizes_floor_with_remainder_to_train() {
        let [tr, va, te] = split_dataset(&fake_manifest(10), (0.6, 0.2, 0.2), 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (6, 2, 2));
        let mut all: Vec<_> = tr.records.iter().chain(&va.records).chain(&te.records).map(|r| r.image.clone()).collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 10);
    }

    #[test]
    fn exact_fractions_do_not_lose_a_record() {
        let ratios = (512.0 / 768.0, 128.0 / 768.0, 128.0 / 768.0);
        let [tr, va, te] = split_dataset(&fake_manifest(768), ratios, 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (512, 128, 128));
    }

    #[test]
    fn split_reproduces_reference_partition_sizes() {
        let n = 9258;
        let ratios = (5716.0 / n as f64, 1429.0 / n as f64, 2113.0 / n as f64);
        let [tr, va, te] = split_dataset(&fake_manifest(n), ratios, 0).unwrap();
        assert!(tr.len().abs_diff(5716) <= 1);
        assert!(va.len().abs_diff(1429) <= 1);
        assert!(te.len().abs_diff(2113) <= 1);
        // The rounded ratios printed to three decimals land near, not on, it.
        let [tr, va, te] = split_dataset(&fake_manifest(n), (0.617, 0.155, 0.228), 0).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (5714, 1434, 2110));
    }

    #[test]
    fn split_rejects_bad_ratios_and_tiny_sets() {
        assert!(split_dataset(&fake_manifest(10), (1.0, 0.0, 0.0), 0).is_err());
        assert!(split_dataset(&fake_manifest(10), (0.5, 0.2, 0.2), 0).is_err());
        assert!(split_dataset(&fake_manifest(2), (0.6, 0.2, 0.2), 0).is_err());
    }

    #[test]
    fn split_is_seeded() {
        let m = fake_manifest(20);
        let a = split_dataset(&m, (0.5, 0.25, 0.25), 3).unwrap();
        let b = split_dataset(&m, (0.5, 0.25, 0.25), 3).unwrap();
        let c = split_dataset(&m, (0.5, 0.25, 0.25), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].records, c[0].records);
    }

    #[test]
    fn concentrated_zero_count_gives_blank_labels() {
        let cfg = GeneratorConfig {
            num_samples: 12,
            lesion_count_weights: [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            ..Default::default()
        };
        for i in 0..cfg.num_samples {
            assert!(generate_sample(&cfg, i).unwrap().label.is_empty());
        }
    }

    #[test]
    fn uniform_one_or_two_lesions_averages_one_and_a_half() {
        let cfg = GeneratorConfig {
            num_samples: 512,
            lesion_count_weights: [0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0],
            seed: 5,
            ..Default::default()
        };
        let total: usize = (0..cfg.num_samples)
            .map(|i| generate_sample(&cfg, i).unwrap().label.count())
            .sum();
        let mean = total as f64 / cfg.num_samples as f64;
        assert!((1.4..=1.6).contains(&mean), "mean {mean}");
    }

    #[test]
    fn per_sample_seeds_are_distinct() {
        let seeds: HashSet<u64> = (0..1000).map(|i| mix_seed(3, i)).collect();
        assert_eq!(seeds.len(), 1000);
    }
}
