//! The `sgseg` command line. Exit codes: 0 success, 1 usage error,
//! 2 data or validation error, 3 numeric failure.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use sgseg::data_forge::write_gray_png;
use sgseg::evalkit::{
    evaluate_ablation, export_attention_maps, seg_metrics, AblationInputs, AblationModels, Mode,
};
use sgseg::lerg_detector::Detector;
use sgseg::seg_net::SegNet;
use sgseg::trainer::{detector_checkpoint, segmenter_checkpoint, Checkpoint, TextSource};
use sgseg::workflow::{
    checkpoint_meta, infer, labels_for, load_image, load_mask, prepare_data, pseudo_label,
    read_split, record_id, train_det_model, train_seg_model, write_text, PipelineConfig,
    Provenance, LABEL_FILE,
};
use sgseg::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Parser, Debug)]
#[command(name = "sgseg", version, about = "Self-guided lesion segmentation workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for data, initialization and shuffling [default: 0, or the config's seed].
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    TextFree,
    SelfGuided,
    FullText,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::TextFree => Mode::TextFree,
            ModeArg::SelfGuided => Mode::SelfGuided,
            ModeArg::FullText => Mode::FullText,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SegKind {
    /// Trained on ground-truth reports.
    Guided,
    /// Trained on empty reports.
    TextFree,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset and its train/val/test manifests.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Extract location labels from the training reports.
    PseudoLabel {
        #[command(flatten)]
        common: Common,
        /// Directory written by gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Output directory [default: the data directory].
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Train a segmenter.
    TrainSeg {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "guided")]
        kind: SegKind,
    },
    /// Train the location detector on pseudo-labels.
    TrainDet {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
        /// Label file [default: DATA/train_labels.txt].
        #[arg(long, value_name = "PATH")]
        labels: Option<PathBuf>,
    },
    /// Segment one image. Without --report the detector writes the report.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "PNG")]
        image: PathBuf,
        #[arg(long, value_name = "PATH")]
        seg_ckpt: PathBuf,
        #[arg(long, value_name = "PATH")]
        det_ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "self-guided")]
        mode: ModeArg,
        /// Report text; implies full-text mode.
        #[arg(long, value_name = "TEXT")]
        report: Option<String>,
        /// Ground-truth mask; adds a metrics file.
        #[arg(long, value_name = "PNG")]
        mask: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate one mode on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Guided segmenter, or the text-free one in text-free mode.
        #[arg(long, value_name = "PATH")]
        seg_ckpt: PathBuf,
        #[arg(long, value_name = "PATH")]
        det_ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "self-guided")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Evaluate several modes on the test split with shared samples.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Guided segmenter (self-guided and full-text modes).
        #[arg(long, value_name = "PATH")]
        seg_ckpt: Option<PathBuf>,
        /// Text-free segmenter (text-free mode).
        #[arg(long, value_name = "PATH")]
        free_ckpt: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        det_ckpt: Option<PathBuf>,
        /// Modes to run [default: all three].
        #[arg(long, value_enum)]
        mode: Vec<ModeArg>,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
    /// Export cross-attention panels and word importance for one test record.
    AttnViz {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Record id (image file stem) in the test split.
        #[arg(long)]
        record: String,
        #[arg(long, value_name = "PATH")]
        seg_ckpt: PathBuf,
        /// Use the detector's report instead of the record's report.
        #[arg(long, value_name = "PATH")]
        det_ckpt: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        tau: f64,
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(Failure::Usage(msg.into()))
}

/// Parses `argv` (program name first), runs the command, returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite(_) | Error::DegenerateAttention { .. } => EXIT_NUMERIC,
        _ => EXIT_DATA,
    }
}

fn resolve_config(common: &Common) -> CliResult<PipelineConfig> {
    let cfg = match &common.config {
        Some(p) => PipelineConfig::read(p)?,
        None => PipelineConfig::default(),
    };
    let seed = common.seed.unwrap_or(cfg.seed);
    Ok(cfg.with_seed(seed))
}

fn check_tau(tau: f64) -> CliResult<()> {
    if tau > 0.0 && tau < 1.0 {
        Ok(())
    } else {
        usage(format!("--tau {tau} must lie in (0, 1)"))
    }
}

fn write_provenance(dir: &Path, prov: &Provenance) -> CliResult<()> {
    write_text(&dir.join("provenance.txt"), &format!("{}\n", prov.line()))?;
    Ok(())
}

fn load_seg(path: &Path) -> CliResult<(SegNet<f32>, Checkpoint)> {
    let ck = Checkpoint::read(path)?;
    Ok((ck.segmenter::<f32>(None)?, ck))
}

fn load_det(path: &Path) -> CliResult<(Detector<f32>, Checkpoint)> {
    let ck = Checkpoint::read(path)?;
    Ok((ck.detector::<f32>(None)?, ck))
}

fn execute(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData { common, out } => {
            let cfg = resolve_config(&common)?;
            let [tr, va, te] = prepare_data(&cfg, &out)?;
            println!(
                "{} records: {} train, {} val, {} test in {}",
                tr.len() + va.len() + te.len(),
                tr.len(),
                va.len(),
                te.len(),
                out.display()
            );
            println!("{}", cfg.provenance().line());
            Ok(())
        }
        Command::PseudoLabel { common, data, out } => {
            let cfg = resolve_config(&common)?;
            let out = out.unwrap_or_else(|| data.clone());
            let train = read_split(&data, "train.csv")?;
            let prov = cfg.provenance();
            let (labels, audit) = pseudo_label(&train, &out, &prov)?;
            write_provenance(&out, &prov)?;
            println!("{} labels written to {}", labels.len(), out.join(LABEL_FILE).display());
            if let Some(p) = audit.mean_purity() {
                println!("cluster audit mean purity {p:.4}");
            }
            Ok(())
        }
        Command::TrainSeg {
            common,
            data,
            out,
            kind,
        } => {
            let cfg = resolve_config(&common)?;
            let train = read_split(&data, "train.csv")?.load_samples()?;
            let val = read_split(&data, "val.csv")?.load_samples()?;
            let (text, name) = match kind {
                SegKind::Guided => (TextSource::GroundTruth, "seg_guided"),
                SegKind::TextFree => (TextSource::Empty, "seg_text_free"),
            };
            let (net, history) = train_seg_model(&cfg, &train, &val, text)?;
            let prov = cfg.provenance();
            let path = out.join(format!("{name}.ckpt"));
            segmenter_checkpoint(&net, checkpoint_meta(&prov, &history)).write(&path)?;
            write_text(&out.join(format!("{name}_history.tsv")), &history.to_tsv())?;
            write_provenance(&out, &prov)?;
            println!("best val dice {:?} at epoch {}; wrote {}", history.best_score, history.best_epoch, path.display());
            Ok(())
        }
        Command::TrainDet {
            common,
            data,
            out,
            labels,
        } => {
            let cfg = resolve_config(&common)?;
            let train_m = read_split(&data, "train.csv")?;
            let label_file = labels.unwrap_or_else(|| data.join(LABEL_FILE));
            let labels = labels_for(&train_m, &label_file)?;
            let train = train_m.load_samples()?;
            let val = read_split(&data, "val.csv")?.load_samples()?;
            let (det, history) = train_det_model(&cfg, &train, &labels, &val)?;
            let prov = cfg.provenance();
            let path = out.join("detector.ckpt");
            detector_checkpoint(&det, checkpoint_meta(&prov, &history)).write(&path)?;
            write_text(&out.join("detector_history.tsv"), &history.to_tsv())?;
            write_provenance(&out, &prov)?;
            println!("best val macro-F1 {:?} at epoch {}; wrote {}", history.best_score, history.best_epoch, path.display());
            Ok(())
        }
        Command::Infer {
            common,
            image,
            seg_ckpt,
            det_ckpt,
            mode,
            report,
            mask,
            tau,
            out,
        } => {
            check_tau(tau)?;
            let cfg = resolve_config(&common)?;
            let mode = if report.is_some() { Mode::FullText } else { Mode::from(mode) };
            if mode == Mode::FullText && report.is_none() {
                return usage("full-text mode needs --report");
            }
            if mode == Mode::SelfGuided && det_ckpt.is_none() {
                return usage("self-guided mode needs --det-ckpt");
            }
            let (seg, seg_ck) = load_seg(&seg_ckpt)?;
            let det = match (&det_ckpt, mode) {
                (Some(p), Mode::SelfGuided) => Some(load_det(p)?),
                _ => None,
            };
            let (side, pixels) = load_image(&image)?;
            let text = match mode {
                Mode::TextFree => Some(""),
                _ => report.as_deref(),
            };
            let res = infer(&seg, det.as_ref().map(|d| &d.0), &pixels, text, tau, cfg.threshold)?;
            let px: Vec<u8> = res.mask.iter().map(|&m| if m != 0 { 255 } else { 0 }).collect();
            write_gray_png(&out.join("mask.png"), side, side, &px)?;
            let prov = cfg.provenance();
            let mut kv = prov.to_kv();
            kv.set("mode", mode);
            kv.set("seg_checkpoint", seg_ck.config_hash());
            if let Some((_, ck)) = &det {
                kv.set("det_checkpoint", ck.config_hash());
                kv.set("tau", tau);
            }
            kv.set("threshold", cfg.threshold);
            kv.set("report", &res.report);
            if let Some(m) = &mask {
                let (w, h, gt) = load_mask(m)?;
                if (w, h) != (side, side) {
                    return Err(Error::Data(format!(
                        "{}: mask is {w}×{h}, image is {side}×{side}",
                        m.display()
                    ))
                    .into());
                }
                let s = seg_metrics(&res.mask, &gt)?;
                kv.set("metrics.accuracy", format!("{:.6}", s.accuracy));
                kv.set("metrics.dice", format!("{:.6}", s.dice));
                kv.set("metrics.jaccard", format!("{:.6}", s.jaccard));
                println!("dice {:.4} jaccard {:.4} accuracy {:.4}", s.dice, s.jaccard, s.accuracy);
            }
            write_text(&out.join("report.txt"), &format!("{}\n{}\n", res.report, prov.line()))?;
            write_text(&out.join("inference.txt"), &kv.to_text())?;
            let origin = if res.generated { "generated report" } else { "report" };
            println!("{origin}: {}", if res.report.is_empty() { "(empty)" } else { &res.report });
            Ok(())
        }
        Command::Eval {
            common,
            data,
            seg_ckpt,
            det_ckpt,
            mode,
            tau,
            out,
        } => {
            check_tau(tau)?;
            let mode = Mode::from(mode);
            if mode == Mode::SelfGuided && det_ckpt.is_none() {
                return usage("self-guided mode needs --det-ckpt");
            }
            let (seg, _) = load_seg(&seg_ckpt)?;
            let det = match (&det_ckpt, mode) {
                (Some(p), Mode::SelfGuided) => Some(load_det(p)?.0),
                _ => None,
            };
            let models = match mode {
                Mode::TextFree => AblationModels {
                    text_free: Some(&seg),
                    ..Default::default()
                },
                _ => AblationModels {
                    guided: Some(&seg),
                    detector: det.as_ref(),
                    ..Default::default()
                },
            };
            run_eval(&common, &data, models, &[mode], tau, &out)
        }
        Command::Ablate {
            common,
            data,
            seg_ckpt,
            free_ckpt,
            det_ckpt,
            mode,
            tau,
            out,
        } => {
            check_tau(tau)?;
            let modes: Vec<Mode> = if mode.is_empty() {
                Mode::ALL.to_vec()
            } else {
                mode.into_iter().map(Mode::from).collect()
            };
            for &m in &modes {
                let missing = match m {
                    Mode::TextFree => free_ckpt.is_none().then_some("--free-ckpt"),
                    Mode::SelfGuided if seg_ckpt.is_none() => Some("--seg-ckpt"),
                    Mode::SelfGuided => det_ckpt.is_none().then_some("--det-ckpt"),
                    Mode::FullText => seg_ckpt.is_none().then_some("--seg-ckpt"),
                };
                if let Some(flag) = missing {
                    return usage(format!("{m} mode needs {flag}"));
                }
            }
            let guided = seg_ckpt.as_deref().map(load_seg).transpose()?.map(|x| x.0);
            let free = free_ckpt.as_deref().map(load_seg).transpose()?.map(|x| x.0);
            let det = match &det_ckpt {
                Some(p) if modes.contains(&Mode::SelfGuided) => Some(load_det(p)?.0),
                _ => None,
            };
            let models = AblationModels {
                guided: guided.as_ref(),
                text_free: free.as_ref(),
                detector: det.as_ref(),
            };
            run_eval(&common, &data, models, &modes, tau, &out)
        }
        Command::AttnViz {
            common,
            data,
            record,
            seg_ckpt,
            det_ckpt,
            tau,
            out,
        } => {
            check_tau(tau)?;
            let cfg = resolve_config(&common)?;
            let test = read_split(&data, "test.csv")?;
            let rec = test
                .records
                .iter()
                .find(|r| record_id(r) == record)
                .ok_or_else(|| Error::Data(format!("--record {record}: not in the test split")))?;
            let sample = sgseg::data_forge::load_record(&test, rec)?;
            let (seg, _) = load_seg(&seg_ckpt)?;
            let report = match &det_ckpt {
                Some(p) => load_det(p)?.0.generate_report(&sample.image, tau)?,
                None => sample.report.clone(),
            };
            let export = export_attention_maps(&seg, &sample.image, &report, Some(&sample.mask), &out)?;
            write_provenance(&out, &cfg.provenance())?;
            println!("report: {report}");
            for (t, s) in export.words.tokens.iter().zip(&export.words.scores) {
                println!("{t}\t{s:.4}");
            }
            println!("{} files in {}", export.files.len(), out.display());
            Ok(())
        }
    }
}

fn run_eval(
    common: &Common,
    data: &Path,
    models: AblationModels<'_>,
    modes: &[Mode],
    tau: f64,
    out: &Path,
) -> CliResult<()> {
    let cfg = resolve_config(common)?;
    let test_m = read_split(data, "test.csv")?;
    let test = test_m.load_samples()?;
    let ids: Vec<String> = test_m.records.iter().map(record_id).collect();
    let prov = cfg.provenance();
    let inputs = AblationInputs {
        samples: &test,
        ids: &ids,
        threshold: cfg.threshold,
        tau,
        meta: prov.to_kv(),
    };
    let reports = evaluate_ablation(models, &inputs, modes)?;
    for r in &reports {
        r.write(out, &r.mode)?;
        let m = r.mean();
        println!(
            "{:<12} dice {:.4} jaccard {:.4} accuracy {:.4}",
            r.mode, m.dice, m.jaccard, m.accuracy
        );
    }
    write_provenance(out, &prov)?;
    Ok(())
}
