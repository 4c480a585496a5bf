use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::augment::{augment, AugmentSpec};
use super::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::config::KeyValues;
use crate::data_forge::{mix_seed, LungRegion, Sample};
use crate::diffkit::{Graph, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::evalkit::{label_metrics, seg_metrics};
use crate::lerg_detector::Detector;
use crate::locparse::{synthesize_report, LocationLabel};
use crate::seg_net::SegNet;

const AUGMENT_STREAM: u64 = 0xA5A5_0001;
const REPORT_NOISE_STREAM: u64 = 0xA5A5_0002;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_floor: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub dice_weight: f64,
    pub bce_weight: f64,
    pub augment: AugmentSpec,
    /// Probability that a text-guided training sample sees the report of
    /// its label with one zone flipped instead of its own report.
    pub report_noise: f64,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            lr: 3e-4,
            lr_floor: 1e-6,
            weight_decay: 0.01,
            seed: 0,
            dice_weight: 1.0,
            bce_weight: 1.0,
            augment: AugmentSpec::default(),
            report_noise: 0.3,
            threads: 0,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 14] = [
        "epochs",
        "batch_size",
        "lr",
        "lr_floor",
        "weight_decay",
        "seed",
        "dice_weight",
        "bce_weight",
        "augment_crop",
        "augment_erase",
        "augment_rotate",
        "augment_probability",
        "report_noise",
        "threads",
    ];

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr_floor >= 0.0 && self.lr_floor < self.lr) {
            return bad("need 0 <= lr_floor < lr");
        }
        if !(self.weight_decay >= 0.0 && self.dice_weight >= 0.0 && self.bce_weight >= 0.0) {
            return bad("weight_decay and loss weights must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.augment.probability) {
            return bad("augment_probability must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.report_noise) {
            return bad("report_noise must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn to_kv(&self, kv: &mut KeyValues, prefix: &str) {
        let p = |k: &str| format!("{prefix}{k}");
        kv.set(&p("epochs"), self.epochs);
        kv.set(&p("batch_size"), self.batch_size);
        kv.set(&p("lr"), self.lr);
        kv.set(&p("lr_floor"), self.lr_floor);
        kv.set(&p("weight_decay"), self.weight_decay);
        kv.set(&p("seed"), self.seed);
        kv.set(&p("dice_weight"), self.dice_weight);
        kv.set(&p("bce_weight"), self.bce_weight);
        kv.set(&p("augment_crop"), self.augment.crop);
        kv.set(&p("augment_erase"), self.augment.erase);
        kv.set(&p("augment_rotate"), self.augment.rotate);
        kv.set(&p("augment_probability"), self.augment.probability);
        kv.set(&p("report_noise"), self.report_noise);
        kv.set(&p("threads"), self.threads);
    }

    pub fn from_kv(kv: &KeyValues, prefix: &str) -> Result<Self> {
        let p = |k: &str| format!("{prefix}{k}");
        let mut c = Self::default();
        kv.read(&p("epochs"), &mut c.epochs)?;
        kv.read(&p("batch_size"), &mut c.batch_size)?;
        kv.read(&p("lr"), &mut c.lr)?;
        kv.read(&p("lr_floor"), &mut c.lr_floor)?;
        kv.read(&p("weight_decay"), &mut c.weight_decay)?;
        kv.read(&p("seed"), &mut c.seed)?;
        kv.read(&p("dice_weight"), &mut c.dice_weight)?;
        kv.read(&p("bce_weight"), &mut c.bce_weight)?;
        kv.read(&p("augment_crop"), &mut c.augment.crop)?;
        kv.read(&p("augment_erase"), &mut c.augment.erase)?;
        kv.read(&p("augment_rotate"), &mut c.augment.rotate)?;
        kv.read(&p("augment_probability"), &mut c.augment.probability)?;
        kv.read(&p("report_noise"), &mut c.report_noise)?;
        kv.read(&p("threads"), &mut c.threads)?;
        c.validate()?;
        Ok(c)
    }
}

/// Report fed to the segmenter's text encoder during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextSource {
    /// The sample's own report.
    GroundTruth,
    /// Report regenerated from the sample's label.
    Synthesized,
    /// Always the empty string: the text-free baseline.
    Empty,
}

impl TextSource {
    pub fn report(self, sample: &Sample) -> String {
        match self {
            TextSource::GroundTruth => sample.report.clone(),
            TextSource::Synthesized => synthesize_report(&sample.label),
            TextSource::Empty => String::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation Dice (segmenter) or macro-F1 (detector).
    pub val_score: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_score: Option<f64>,
}

impl TrainHistory {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\ttrain_loss\tval_score\tlr\n");
        for r in &self.records {
            let val = r.val_score.map_or("-".to_string(), |v| format!("{v:.6}"));
            out.push_str(&format!("{}\t{:.6}\t{val}\t{:.3e}\n", r.epoch, r.train_loss, r.lr));
        }
        out
    }

    /// Median train loss over the last tenth of epochs is below that of
    /// the first tenth.
    pub fn loss_trend_down(&self) -> bool {
        let n = self.records.len();
        if n < 2 {
            return false;
        }
        let k = (n / 10).max(1);
        let median = |rs: &[EpochRecord]| {
            let mut v: Vec<f64> = rs.iter().map(|r| r.train_loss).collect();
            v.sort_by(f64::total_cmp);
            let m = v.len();
            if m % 2 == 1 { v[m / 2] } else { 0.5 * (v[m / 2 - 1] + v[m / 2]) }
        };
        median(&self.records[n - k..]) < median(&self.records[..k])
    }
}

type SampleGrad = (f64, Vec<(ParamId, Vec<f32>)>);

fn grads_of(g: &Graph<f32>, loss: crate::diffkit::Var) -> SampleGrad {
    let grads = g.backward(loss);
    let list = grads.param_grads().into_iter().map(|(id, v)| (id, v.to_vec())).collect();
    (g.value(loss).data()[0] as f64, list)
}

/// Runs `f` on a pool of `threads` workers; 0 keeps the global pool.
pub fn with_threads<R: Send>(threads: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    if threads == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Shared loop: seeded shuffling, per-sample gradients in parallel, summed
/// in sample order, AdamW with a cosine schedule, best-score retention.
fn run<L, V>(
    store: &mut ParamStore<f32>,
    n_train: usize,
    cfg: &TrainConfig,
    what: &str,
    sample_grad: L,
    validate: V,
) -> Result<(TrainHistory, ParamStore<f32>)>
where
    L: Fn(&ParamStore<f32>, usize, u64) -> Result<SampleGrad> + Sync,
    V: Fn(&ParamStore<f32>) -> Result<Option<f64>>,
{
    cfg.validate()?;
    if n_train == 0 {
        return Err(Error::Data(format!("{what}: empty training set")));
    }
    let mut opt = AdamW::new(
        store,
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
    );
    let per_epoch = n_train.div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut history = TrainHistory::default();
    let mut best = store.clone();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64)));
        let mut loss_sum = 0.0;
        let mut lr = cfg.lr;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            lr = cosine_lr(step, total, cfg.lr, cfg.lr_floor);
            let frozen = &*store;
            let results: Vec<SampleGrad> = batch
                .par_iter()
                .map(|&i| {
                    let aug_seed = mix_seed(cfg.seed ^ AUGMENT_STREAM, (epoch * n_train + i) as u64);
                    sample_grad(frozen, i, aug_seed)
                })
                .collect::<Result<_>>()?;
            store.zero_grad();
            let scale = 1.0 / batch.len() as f32;
            for (loss, grads) in &results {
                if !loss.is_finite() || grads.iter().any(|(_, g)| g.iter().any(|v| !v.is_finite())) {
                    return Err(Error::NonFinite(format!(
                        "{what} loss at epoch {epoch}, batch {b} is {loss}"
                    )));
                }
                loss_sum += loss;
                for (id, g) in grads {
                    store.accumulate_grad(*id, g, scale);
                }
            }
            opt.step(store, lr);
            step += 1;
        }
        let score = validate(store)?;
        // Without validation data the latest parameters are kept.
        if history.records.is_empty() || score.is_none() || score > history.best_score {
            history.best_score = score;
            history.best_epoch = epoch;
            best = store.clone();
        }
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n_train as f64,
            val_score: score,
            lr,
        });
    }
    Ok((history, best))
}

fn target_of(sample: &Sample) -> Vec<f32> {
    sample.mask.iter().map(|&m| m as f32).collect()
}

/// Mean segmentation loss (no augmentation) over `samples`.
pub fn segmenter_loss(net: &SegNet<f32>, samples: &[Sample], cfg: &TrainConfig, text: TextSource) -> Result<f64> {
    let losses: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let mut g = Graph::new();
            let x = g.input(net.image_tensor(&s.image)?);
            let seq = net.tokenize(&text.report(s));
            let l = net.loss_graph(&mut g, &net.store, x, &seq, &target_of(s), (cfg.dice_weight, cfg.bce_weight))?;
            Ok(g.value(l).data()[0] as f64)
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len().max(1) as f64)
}

/// Mean Dice at threshold 0.5.
pub fn segmenter_dice(net: &SegNet<f32>, samples: &[Sample], text: TextSource) -> Result<f64> {
    let dice: Vec<f64> = samples
        .par_iter()
        .map(|s| {
            let pred = net.segment(&s.image, &text.report(s))?.binarize(0.5);
            Ok(seg_metrics(&pred, &s.mask)?.dice)
        })
        .collect::<Result<_>>()?;
    Ok(dice.iter().sum::<f64>() / samples.len().max(1) as f64)
}

/// The sample's report, or with probability `noise` the report of its
/// label with one random zone flipped.
fn noisy_report(sample: &Sample, text: TextSource, noise: f64, seed: u64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, REPORT_NOISE_STREAM));
    if noise > 0.0 && rng.random_bool(noise) {
        let mut label = sample.label;
        let r = LungRegion::ALL[rng.random_range(0..6)];
        label.set(r, !label.get(r));
        return synthesize_report(&label);
    }
    text.report(sample)
}

/// Trains the segmenter in place and leaves the best-validation-Dice
/// parameters in `net`. With an empty validation set the last epoch wins.
pub fn train_segmenter(
    net: &mut SegNet<f32>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    text: TextSource,
) -> Result<TrainHistory> {
    for s in train.iter().chain(val) {
        if s.width != net.config.image_size || s.height != net.config.image_size {
            return Err(Error::Data(format!(
                "sample of size {}×{} does not match segmenter image size {}",
                s.height, s.width, net.config.image_size
            )));
        }
    }
    let model = net.clone();
    let weights = (cfg.dice_weight, cfg.bce_weight);
    let (history, best) = with_threads(cfg.threads, || {
        run(
            &mut net.store,
            train.len(),
            cfg,
            "segmenter",
            |store, i, seed| {
                let s = augment(&train[i], &cfg.augment, seed);
                let mut g = Graph::new();
                let x = g.input(model.image_tensor(&s.image)?);
                let report = match text {
                    TextSource::Empty => text.report(&s),
                    _ => noisy_report(&s, text, cfg.report_noise, seed),
                };
                let seq = model.tokenize(&report);
                let l = model.loss_graph(&mut g, store, x, &seq, &target_of(&s), weights)?;
                Ok(grads_of(&g, l))
            },
            |store| {
                if val.is_empty() {
                    return Ok(None);
                }
                let mut probe = model.clone();
                probe.store = store.clone();
                segmenter_dice(&probe, val, text).map(Some)
            },
        )
    })??;
    net.store = best;
    Ok(history)
}

/// Macro-F1 of thresholded detector labels against `labels`.
pub fn detector_macro_f1(det: &Detector<f32>, samples: &[Sample], labels: &[LocationLabel], tau: f64) -> Result<f64> {
    let pred: Vec<LocationLabel> = samples
        .par_iter()
        .map(|s| Ok(det.predict_labels(&s.image, tau)?.label))
        .collect::<Result<_>>()?;
    Ok(label_metrics(&pred, labels)?.macro_f1)
}

/// Trains the detector on report-derived labels. Geometric augmentation is
/// skipped for a sample whenever it would move a lesion across a zone
/// boundary, since the weak label could no longer be trusted.
pub fn train_detector(
    det: &mut Detector<f32>,
    train: &[Sample],
    train_labels: &[LocationLabel],
    val: &[Sample],
    val_labels: &[LocationLabel],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if train.len() != train_labels.len() || val.len() != val_labels.len() {
        return Err(Error::Data(format!(
            "label counts ({}, {}) do not match sample counts ({}, {})",
            train_labels.len(),
            val_labels.len(),
            train.len(),
            val.len()
        )));
    }
    let model = det.clone();
    let (history, best) = with_threads(cfg.threads, || {
        run(
            &mut det.store,
            train.len(),
            cfg,
            "detector",
            |store, i, seed| {
                let mut s = augment(&train[i], &cfg.augment, seed);
                if s.label != train[i].label {
                    s = train[i].clone();
                }
                let mut g = Graph::new();
                let x = g.input(model.image_tensor(&s.image)?);
                let l = model.loss_graph(&mut g, store, x, &train_labels[i])?;
                Ok(grads_of(&g, l))
            },
            |store| {
                if val.is_empty() {
                    return Ok(None);
                }
                let mut probe = model.clone();
                probe.store = store.clone();
                detector_macro_f1(&probe, val, val_labels, 0.5).map(Some)
            },
        )
    })??;
    det.store = best;
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_forge::{generate_sample, GeneratorConfig};
    use crate::lerg_detector::DetConfig;
    use crate::seg_net::SegConfig;

    fn samples(n: usize, offset: usize) -> Vec<Sample> {
        let cfg = GeneratorConfig::default();
        (offset..offset + n).map(|i| generate_sample(&cfg, i).unwrap()).collect()
    }

    fn quick(epochs: usize, batch: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: batch,
            augment: AugmentSpec::none(),
            ..Default::default()
        }
    }

    #[test]
    fn report_noise_flips_exactly_one_zone() {
        use crate::locparse::parse_report;
        for (k, s) in samples(12, 0).iter().enumerate() {
            let seed = k as u64;
            assert_eq!(noisy_report(s, TextSource::GroundTruth, 0.0, seed), s.report);
            let noisy = noisy_report(s, TextSource::GroundTruth, 1.0, seed);
            assert_eq!(noisy, noisy_report(s, TextSource::GroundTruth, 1.0, seed));
            let a = parse_report(&noisy).bits();
            let b = s.label.bits();
            assert_eq!(a.iter().zip(&b).filter(|(x, y)| x != y).count(), 1, "{noisy}");
        }
        let mut bad = TrainConfig::default();
        bad.report_noise = 1.5;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn config_round_trip_and_validation() {
        let mut kv = KeyValues::new();
        let mut c = TrainConfig::default();
        c.augment.rotate = false;
        c.lr = 1e-3;
        c.to_kv(&mut kv, "");
        assert_eq!(TrainConfig::from_kv(&kv, "").unwrap(), c);
        c.lr_floor = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn one_epoch_reduces_loss() {
        let data = samples(8, 0);
        let mut net = SegNet::<f32>::new(SegConfig::default(), 0).unwrap();
        let cfg = quick(1, 1);
        let before = segmenter_loss(&net, &data, &cfg, TextSource::GroundTruth).unwrap();
        train_segmenter(&mut net, &data, &[], &cfg, TextSource::GroundTruth).unwrap();
        let after = segmenter_loss(&net, &data, &cfg, TextSource::GroundTruth).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn histories_are_reproducible_across_thread_counts() {
        let data = samples(6, 10);
        let val = samples(3, 20);
        let mut cfg = quick(2, 4);
        cfg.augment = AugmentSpec::default();
        let run = |threads| {
            let mut c = cfg.clone();
            c.threads = threads;
            let mut net = SegNet::<f32>::new(SegConfig::default(), 1).unwrap();
            let h = train_segmenter(&mut net, &data, &val, &c, TextSource::GroundTruth).unwrap();
            (h, net.store.iter().map(|(_, p)| p.value.clone()).collect::<Vec<_>>())
        };
        let (h1, p1) = run(1);
        let (h2, p2) = run(1);
        let (h3, p3) = run(3);
        assert_eq!(h1, h2);
        assert_eq!(p1, p2);
        assert_eq!(h1, h3);
        assert_eq!(p1, p3);
        assert_eq!(h1.records.len(), 2);
    }

    #[test]
    fn non_finite_loss_aborts() {
        let mut data = samples(2, 0);
        data[1].image[5] = f32::NAN;
        let mut net = SegNet::<f32>::new(SegConfig::default(), 0).unwrap();
        let err = train_segmenter(&mut net, &data, &[], &quick(1, 2), TextSource::Empty).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)), "{err}");
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let data = vec![generate_sample(&GeneratorConfig { image_size: 32, ..Default::default() }, 0).unwrap()];
        let mut net = SegNet::<f32>::new(SegConfig::default(), 0).unwrap();
        assert!(train_segmenter(&mut net, &data, &[], &quick(1, 1), TextSource::Empty).is_err());
    }

    #[test]
    fn memorizes_eight_samples() {
        let data: Vec<Sample> = samples(40, 0).into_iter().filter(|s| s.lesion_pixels() > 0).take(8).collect();
        let mut net = SegNet::<f32>::new(SegConfig::default(), 2).unwrap();
        let mut cfg = quick(200, 8);
        cfg.lr = 3e-3;
        train_segmenter(&mut net, &data, &[], &cfg, TextSource::GroundTruth).unwrap();
        let dice = segmenter_dice(&net, &data, TextSource::GroundTruth).unwrap();
        assert!(dice >= 0.95, "train Dice {dice}");
    }

    #[test]
    fn all_zero_labels_drive_probabilities_down() {
        let data = samples(16, 0);
        let zeros = vec![LocationLabel::empty(); data.len()];
        let mut det = Detector::<f32>::new(DetConfig::default(), 0).unwrap();
        let mut cfg = quick(30, 8);
        cfg.lr = 3e-3;
        let h = train_detector(&mut det, &data, &zeros, &[], &[], &cfg).unwrap();
        let last = h.records.last().unwrap().train_loss;
        assert!(last < 0.01, "final loss {last}");
        assert!(det.probabilities(&data[0].image).unwrap().iter().all(|&p| p < 0.05));
        assert!(h.loss_trend_down());
    }

    #[test]
    fn detector_label_count_mismatch() {
        let data = samples(3, 0);
        let mut det = Detector::<f32>::new(DetConfig::default(), 0).unwrap();
        let labels = vec![LocationLabel::empty(); 2];
        assert!(train_detector(&mut det, &data, &labels, &[], &[], &quick(1, 2)).is_err());
    }
}
