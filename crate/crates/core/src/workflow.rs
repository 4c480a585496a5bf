//! End-to-end runs shared by the command line and the acceptance suite:
//! data preparation, pseudo-labelling, training, ablation and inference.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::config::KeyValues;
use crate::data_forge::{
    generate_dataset, mix_seed, read_gray, split_dataset, DatasetManifest, GeneratorConfig,
    ManifestRecord, Sample,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    evaluate_ablation, label_metrics, AblationInputs, AblationModels, LabelMetrics,
    MetricsReport, Mode,
};
use crate::lerg_detector::{DetConfig, Detector};
use crate::locparse::{
    parse_report, pseudo_label_corpus, read_label_file, synthesize_report, write_label_file,
    AuditParams, LocationLabel, PurityAudit,
};
use crate::seg_net::{SegConfig, SegNet};
use crate::trainer::{
    detector_checkpoint, hash_text, segmenter_checkpoint, train_detector, train_segmenter,
    with_threads, TextSource, TrainConfig, TrainHistory,
};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Everything a run depends on. A single seed drives data, split,
/// initialization and shuffling.
#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    pub seed: u64,
    pub data: GeneratorConfig,
    /// Fractions for (train, val, test).
    pub split: (f64, f64, f64),
    pub seg: SegConfig,
    pub det: DetConfig,
    pub train: TrainConfig,
    /// Segmentation binarization threshold.
    pub threshold: f64,
    /// Detector decision threshold.
    pub tau: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: GeneratorConfig::default(),
            split: (512.0 / 768.0, 128.0 / 768.0, 128.0 / 768.0),
            seg: SegConfig::default(),
            det: DetConfig::default(),
            train: TrainConfig::default(),
            threshold: 0.5,
            tau: 0.5,
        }
    }
}

const TOP_KEYS: [&str; 6] = ["seed", "threshold", "tau", "split.train", "split.val", "split.test"];

impl PipelineConfig {
    pub fn known_keys() -> Vec<String> {
        let mut keys: Vec<String> = TOP_KEYS.iter().map(|k| k.to_string()).collect();
        keys.extend(GeneratorConfig::KEYS.iter().map(|k| format!("data.{k}")));
        keys.extend(SegConfig::KEYS.iter().map(|k| format!("seg.{k}")));
        keys.extend(DetConfig::KEYS.iter().map(|k| format!("det.{k}")));
        keys.extend(TrainConfig::KEYS.iter().map(|k| format!("train.{k}")));
        keys
    }

    /// Reads a flat config; unknown keys are an error. Image sizes default
    /// to `data.image_size` and must agree when given.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let known = Self::known_keys();
        let known: Vec<&str> = known.iter().map(String::as_str).collect();
        kv.reject_unknown(&known)?;
        let mut c = Self::default();
        kv.read("seed", &mut c.seed)?;
        kv.read("threshold", &mut c.threshold)?;
        kv.read("tau", &mut c.tau)?;
        kv.read("split.train", &mut c.split.0)?;
        kv.read("split.val", &mut c.split.1)?;
        kv.read("split.test", &mut c.split.2)?;
        c.data = GeneratorConfig::from_kv(kv, "data.")?;
        let size = c.data.image_size;
        let mut kv = kv.clone();
        for key in ["seg.image_size", "det.image_size"] {
            match kv.get(key) {
                None => kv.set(key, size),
                Some(v) if v.parse::<usize>().ok() != Some(size) => {
                    return Err(Error::Invalid(format!(
                        "config key `{key}` = {v} disagrees with data.image_size = {size}"
                    )))
                }
                Some(_) => {}
            }
        }
        c.seg = SegConfig::from_kv(&kv, "seg.")?;
        c.det = DetConfig::from_kv(&kv, "det.")?;
        c.train = TrainConfig::from_kv(&kv, "train.")?;
        c.validate()?;
        let seed = c.seed;
        Ok(c.with_seed(seed))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_kv(&KeyValues::parse(text)?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Invalid(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        if !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(Error::Invalid(format!("tau {} outside (0, 1)", self.tau)));
        }
        if self.seg.image_size != self.data.image_size || self.det.image_size != self.data.image_size {
            return Err(Error::Invalid("seg, det and data image sizes differ".into()));
        }
        self.data.validate()?;
        self.seg.validate()?;
        self.det.validate()?;
        self.train.validate()
    }

    /// Copy with every seed derived from `seed`.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("seed", self.seed);
        kv.set("threshold", self.threshold);
        kv.set("tau", self.tau);
        kv.set("split.train", self.split.0);
        kv.set("split.val", self.split.1);
        kv.set("split.test", self.split.2);
        self.data.to_kv(&mut kv, "data.");
        self.seg.to_kv(&mut kv, "seg.");
        self.det.to_kv(&mut kv, "det.");
        self.train.to_kv(&mut kv, "train.");
        kv
    }

    /// Hash of the canonical config text. Thread count is excluded since
    /// results do not depend on it.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.train.threads = 0;
        hash_text(&c.to_kv().to_text())
    }

    pub fn provenance(&self) -> Provenance {
        Provenance {
            version: VERSION.to_string(),
            config_hash: self.config_hash(),
            seed: self.seed,
        }
    }

    fn init_seed(&self, stream: u64) -> u64 {
        mix_seed(self.seed, 0x5EED_0000 + stream)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provenance {
    pub version: String,
    pub config_hash: String,
    pub seed: u64,
}

impl Provenance {
    pub fn line(&self) -> String {
        format!(
            "sgseg {} config_hash={} seed={}",
            self.version, self.config_hash, self.seed
        )
    }

    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        self.add_to(&mut kv);
        kv
    }

    pub fn add_to(&self, kv: &mut KeyValues) {
        kv.set("provenance.version", &self.version);
        kv.set("provenance.config_hash", &self.config_hash);
        kv.set("provenance.seed", self.seed);
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const SPLIT_FILES: [&str; 3] = ["train.csv", "val.csv", "test.csv"];
pub const LABEL_FILE: &str = "train_labels.txt";

/// Renders the dataset into `dir` and writes the three split manifests
/// next to `manifest.csv`.
pub fn prepare_data(cfg: &PipelineConfig, dir: &Path) -> Result<[DatasetManifest; 3]> {
    let all = generate_dataset(&cfg.data, dir)?;
    let splits = split_dataset(&all, cfg.split, mix_seed(cfg.seed, 0x5B1))?;
    for (m, name) in splits.iter().zip(SPLIT_FILES) {
        m.write(&dir.join(name))?;
    }
    write_text(&dir.join("provenance.txt"), &format!("{}\n", cfg.provenance().line()))?;
    Ok(splits)
}

/// Reads a split manifest written by [`prepare_data`].
pub fn read_split(dir: &Path, name: &str) -> Result<DatasetManifest> {
    let (m, errors) = crate::data_forge::ingest_manifest(&dir.join(name))?;
    if let Some(e) = errors.first() {
        return Err(Error::Data(format!("{}: {e}", dir.join(name).display())));
    }
    Ok(m)
}

/// Labels the training reports, writes the label file and audit to `out`.
pub fn pseudo_label(train: &DatasetManifest, out: &Path, prov: &Provenance) -> Result<(Vec<LocationLabel>, PurityAudit)> {
    let reports: Vec<String> = train.records.iter().map(|r| r.report.clone()).collect();
    let (labels, audit) = pseudo_label_corpus(&reports, AuditParams::default())?;
    let entries: Vec<(PathBuf, LocationLabel)> = train
        .records
        .iter()
        .zip(&labels)
        .map(|(r, &l)| (r.image.clone(), l))
        .collect();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_label_file(&out.join(LABEL_FILE), &entries)?;
    let mut kv = prov.to_kv();
    kv.set("records", labels.len());
    match &audit {
        PurityAudit::Skipped { reason } => kv.set("audit", format!("skipped ({reason})")),
        PurityAudit::Clustered { clusters, noise } => {
            kv.set("audit.clusters", clusters.len());
            kv.set("audit.noise", noise);
            if let Some(p) = audit.mean_purity() {
                kv.set("audit.mean_purity", format!("{p:.6}"));
            }
        }
    }
    write_text(&out.join("pseudo_label_audit.txt"), &kv.to_text())?;
    Ok((labels, audit))
}

/// Labels for `manifest` looked up by image path in a label file.
pub fn labels_for(manifest: &DatasetManifest, label_file: &Path) -> Result<Vec<LocationLabel>> {
    let entries = read_label_file(label_file)?;
    let map: std::collections::HashMap<PathBuf, LocationLabel> = entries.into_iter().collect();
    manifest
        .records
        .iter()
        .map(|r| {
            map.get(&r.image).copied().ok_or_else(|| {
                Error::Data(format!("{}: no label for {}", label_file.display(), r.image.display()))
            })
        })
        .collect()
}

/// Id of a record: its image file stem.
pub fn record_id(r: &ManifestRecord) -> String {
    r.image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Segmenter trained on ground-truth reports, or on empty text for the
/// text-free baseline.
pub fn train_seg_model(
    cfg: &PipelineConfig,
    train: &[Sample],
    val: &[Sample],
    text: TextSource,
) -> Result<(SegNet<f32>, TrainHistory)> {
    let stream = if text == TextSource::Empty { 2 } else { 1 };
    let mut net = SegNet::<f32>::new(cfg.seg.clone(), cfg.init_seed(stream))?;
    let history = train_segmenter(&mut net, train, val, &cfg.train, text)?;
    Ok((net, history))
}

/// Detector trained on pseudo-labels; validation labels come from the
/// validation reports.
pub fn train_det_model(
    cfg: &PipelineConfig,
    train: &[Sample],
    labels: &[LocationLabel],
    val: &[Sample],
) -> Result<(Detector<f32>, TrainHistory)> {
    let mut det = Detector::<f32>::new(cfg.det.clone(), cfg.init_seed(3))?;
    let val_labels: Vec<LocationLabel> = val.iter().map(|s| parse_report(&s.report)).collect();
    let history = train_detector(&mut det, train, labels, val, &val_labels, &cfg.train)?;
    Ok((det, history))
}

pub fn checkpoint_meta(prov: &Provenance, history: &TrainHistory) -> KeyValues {
    let mut kv = prov.to_kv();
    kv.set("epochs_run", history.records.len());
    kv.set("best_epoch", history.best_epoch);
    if let Some(s) = history.best_score {
        kv.set("best_val_score", format!("{s:.6}"));
    }
    kv
}

/// Detector quality on labelled samples: per-region scores, macro-F1 and
/// exact match of the generated report against the ground-truth report.
pub fn detector_metrics(det: &Detector<f32>, samples: &[Sample], tau: f64) -> Result<LabelMetrics> {
    let pred: Vec<LocationLabel> = samples
        .par_iter()
        .map(|s| Ok(det.predict_labels(&s.image, tau)?.label))
        .collect::<Result<_>>()?;
    let gt: Vec<LocationLabel> = samples.iter().map(|s| parse_report(&s.report)).collect();
    label_metrics(&pred, &gt)
}

/// Samples whose location tokens outweigh filler tokens in the coarsest
/// cross-attention, out of those whose report has both kinds.
pub fn word_importance_wins(net: &SegNet<f32>, samples: &[Sample]) -> Result<(usize, usize)> {
    let cmp: Vec<Option<bool>> = samples
        .par_iter()
        .map(|s| {
            let wi = net.word_importance(&s.image, &s.report)?;
            Ok(wi.location_vs_filler().map(|(loc, fill)| loc > fill))
        })
        .collect::<Result<_>>()?;
    let scored: Vec<bool> = cmp.into_iter().flatten().collect();
    Ok((scored.iter().filter(|&&w| w).count(), scored.len()))
}

/// Output of [`run_ablation`].
#[derive(Clone, Debug)]
pub struct AblationOutcome {
    /// One report per mode in [`Mode::ALL`] order.
    pub reports: Vec<MetricsReport>,
    pub detector_val: LabelMetrics,
    pub word_importance: (usize, usize),
    pub histories: Vec<(String, TrainHistory)>,
    /// Metric files, in a fixed order.
    pub metric_files: Vec<PathBuf>,
}

impl AblationOutcome {
    pub fn dice(&self, mode: Mode) -> f64 {
        self.reports
            .iter()
            .find(|r| r.mode == mode.name())
            .map(|r| r.mean().dice)
            .unwrap_or(f64::NAN)
    }
}

/// Generates the data, trains the guided segmenter, the text-free
/// segmenter and the detector, then evaluates all three modes on the test
/// split. Everything lands under `out`; metric files hold no timings.
pub fn run_ablation(cfg: &PipelineConfig, out: &Path) -> Result<AblationOutcome> {
    cfg.validate()?;
    with_threads(cfg.train.threads, || run_ablation_inner(cfg, out))?
}

fn run_ablation_inner(cfg: &PipelineConfig, out: &Path) -> Result<AblationOutcome> {
    let prov = cfg.provenance();
    let data_dir = out.join("data");
    let [train_m, val_m, test_m] = prepare_data(cfg, &data_dir)?;
    let (labels, _) = pseudo_label(&train_m, &data_dir, &prov)?;
    let train = train_m.load_samples()?;
    let val = val_m.load_samples()?;
    let test = test_m.load_samples()?;

    let ckpt = out.join("checkpoints");
    let (guided, h_guided) = train_seg_model(cfg, &train, &val, TextSource::GroundTruth)?;
    segmenter_checkpoint(&guided, checkpoint_meta(&prov, &h_guided)).write(&ckpt.join("seg_guided.ckpt"))?;
    let (free, h_free) = train_seg_model(cfg, &train, &val, TextSource::Empty)?;
    segmenter_checkpoint(&free, checkpoint_meta(&prov, &h_free)).write(&ckpt.join("seg_text_free.ckpt"))?;
    let (det, h_det) = train_det_model(cfg, &train, &labels, &val)?;
    detector_checkpoint(&det, checkpoint_meta(&prov, &h_det)).write(&ckpt.join("detector.ckpt"))?;

    let histories = vec![
        ("seg_guided".to_string(), h_guided),
        ("seg_text_free".to_string(), h_free),
        ("detector".to_string(), h_det),
    ];
    for (name, h) in &histories {
        write_text(&out.join("histories").join(format!("{name}.tsv")), &h.to_tsv())?;
    }

    let ids: Vec<String> = test_m.records.iter().map(record_id).collect();
    let inputs = AblationInputs {
        samples: &test,
        ids: &ids,
        threshold: cfg.threshold,
        tau: cfg.tau,
        meta: prov.to_kv(),
    };
    let models = AblationModels {
        guided: Some(&guided),
        text_free: Some(&free),
        detector: Some(&det),
    };
    let reports = evaluate_ablation(models, &inputs, &Mode::ALL)?;
    let metrics = out.join("metrics");
    let mut metric_files = Vec::new();
    for r in &reports {
        r.write(&metrics, &r.mode)?;
        metric_files.push(metrics.join(format!("{}.txt", r.mode)));
        metric_files.push(metrics.join(format!("{}.tsv", r.mode)));
    }

    let detector_val = detector_metrics(&det, &val, cfg.tau)?;
    let mut kv = prov.to_kv();
    label_metrics_to_kv(&detector_val, &mut kv, "detector.");
    let wins = word_importance_wins(&guided, &test)?;
    kv.set("word_importance.location_wins", wins.0);
    kv.set("word_importance.scored", wins.1);
    let summary = metrics.join("summary.txt");
    write_text(&summary, &kv.to_text())?;
    metric_files.push(summary);

    Ok(AblationOutcome {
        reports,
        detector_val,
        word_importance: wins,
        histories,
        metric_files,
    })
}

pub fn label_metrics_to_kv(m: &LabelMetrics, kv: &mut KeyValues, prefix: &str) {
    kv.set(&format!("{prefix}macro_f1"), format!("{:.6}", m.macro_f1));
    kv.set(&format!("{prefix}exact_match"), format!("{:.6}", m.exact_match));
    for (r, s) in crate::data_forge::LungRegion::ALL.iter().zip(&m.regions) {
        kv.set(&format!("{prefix}f1.{}_{}", r.zone.word(), r.side.word()), format!("{:.6}", s.f1));
    }
}

/// Reads a grayscale PNG as a row-major square image in [0, 1].
pub fn load_image(path: &Path) -> Result<(usize, Vec<f32>)> {
    let (w, h, px) = read_gray(path)?;
    if w != h {
        return Err(Error::Data(format!("{}: image is {w}×{h}, expected square", path.display())));
    }
    Ok((w, px.iter().map(|&v| v as f32 / 255.0).collect()))
}

/// Reads a binary mask PNG (0/255 or 0/1).
pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let (w, h, px) = read_gray(path)?;
    let zero_one = px.iter().all(|&v| v <= 1);
    if !zero_one && !px.iter().all(|&v| v == 0 || v == 255) {
        return Err(Error::Data(format!("{}: mask is not binary", path.display())));
    }
    let th = if zero_one { 1 } else { 128 };
    Ok((w, h, px.iter().map(|&v| (v >= th) as u8).collect()))
}

/// Result of one inference call.
#[derive(Clone, Debug, PartialEq)]
pub struct Inference {
    pub report: String,
    /// Whether the report came from the detector.
    pub generated: bool,
    pub mask: Vec<u8>,
    pub side: usize,
}

/// Segments `image`. Without `report`, the detector writes the report
/// first (self-guided); without both, the empty report is used.
pub fn infer(
    seg: &SegNet<f32>,
    det: Option<&Detector<f32>>,
    image: &[f32],
    report: Option<&str>,
    tau: f64,
    threshold: f64,
) -> Result<Inference> {
    let side = (image.len() as f64).sqrt().round() as usize;
    let (report, generated) = match (report, det) {
        (Some(r), _) => (r.to_string(), false),
        (None, Some(d)) => (synthesize_report(&d.predict_labels(image, tau)?.label), true),
        (None, None) => (String::new(), false),
    };
    let mask = seg.segment(image, &report)?.binarize(threshold);
    Ok(Inference {
        report,
        generated,
        mask,
        side,
    })
}

