use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use super::metrics::{label_metrics, seg_metrics};
use super::report::{MetricsReport, SampleRow};
use crate::config::KeyValues;
use crate::data_forge::Sample;
use crate::error::{Error, Result};
use crate::lerg_detector::Detector;
use crate::locparse::{parse_report, LocationLabel};
use crate::seg_net::SegNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Mode {
    /// Segmenter trained and run with the empty report.
    TextFree,
    /// Guided segmenter fed the detector's generated report.
    SelfGuided,
    /// Guided segmenter fed the ground-truth report.
    FullText,
}

impl Mode {
    pub const ALL: [Mode; 3] = [Mode::TextFree, Mode::SelfGuided, Mode::FullText];

    pub fn name(self) -> &'static str {
        match self {
            Mode::TextFree => "text-free",
            Mode::SelfGuided => "self-guided",
            Mode::FullText => "full-text",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown mode `{s}` (text-free, self-guided, full-text)")))
    }
}

/// Models available to the ablation; each mode needs only some of them.
#[derive(Clone, Copy, Default)]
pub struct AblationModels<'a> {
    pub guided: Option<&'a SegNet<f32>>,
    pub text_free: Option<&'a SegNet<f32>>,
    pub detector: Option<&'a Detector<f32>>,
}

pub struct AblationInputs<'a> {
    pub samples: &'a [Sample],
    /// One id per sample for the per-sample tables.
    pub ids: &'a [String],
    pub threshold: f64,
    pub tau: f64,
    pub meta: KeyValues,
}

fn require<'a, T>(m: Option<&'a T>, what: &str, mode: Mode) -> Result<&'a T> {
    m.ok_or_else(|| Error::Invalid(format!("{mode} mode needs a {what}")))
}

/// Runs every requested mode over the same samples in the same order.
pub fn evaluate_ablation(
    models: AblationModels<'_>,
    inputs: &AblationInputs<'_>,
    modes: &[Mode],
) -> Result<Vec<MetricsReport>> {
    if inputs.ids.len() != inputs.samples.len() {
        return Err(Error::Shape(format!(
            "{} ids for {} samples",
            inputs.ids.len(),
            inputs.samples.len()
        )));
    }
    for &mode in modes {
        match mode {
            Mode::TextFree => {
                require(models.text_free, "text-free segmenter", mode)?;
            }
            Mode::SelfGuided => {
                require(models.guided, "guided segmenter", mode)?;
                require(models.detector, "detector checkpoint", mode)?;
            }
            Mode::FullText => {
                require(models.guided, "guided segmenter", mode)?;
            }
        }
    }
    modes
        .iter()
        .map(|&mode| {
            let net = match mode {
                Mode::TextFree => models.text_free,
                _ => models.guided,
            }
            .expect("checked above");
            let rows: Vec<(SampleRow, Option<LocationLabel>)> = inputs
                .samples
                .par_iter()
                .zip(inputs.ids)
                .map(|(s, id)| {
                    let (report, predicted) = match mode {
                        Mode::TextFree => (String::new(), None),
                        Mode::FullText => (s.report.clone(), None),
                        Mode::SelfGuided => {
                            let det = models.detector.expect("checked above");
                            let out = det.predict_labels(&s.image, inputs.tau)?;
                            (crate::locparse::synthesize_report(&out.label), Some(out.label))
                        }
                    };
                    let pred = net.segment(&s.image, &report)?.binarize(inputs.threshold);
                    let row = SampleRow {
                        id: id.clone(),
                        scores: seg_metrics(&pred, &s.mask)?,
                        report,
                    };
                    Ok((row, predicted))
                })
                .collect::<Result<_>>()?;
            let mut meta = inputs.meta.clone();
            meta.set("threshold", inputs.threshold);
            let (detector, exact) = if mode == Mode::SelfGuided {
                meta.set("tau", inputs.tau);
                let pred: Vec<LocationLabel> = rows.iter().map(|(_, p)| p.expect("self-guided")).collect();
                let gt: Vec<LocationLabel> = inputs.samples.iter().map(|s| parse_report(&s.report)).collect();
                let exact = rows
                    .iter()
                    .zip(inputs.samples)
                    .filter(|((r, _), s)| r.report == s.report)
                    .count() as f64
                    / inputs.samples.len().max(1) as f64;
                (Some(label_metrics(&pred, &gt)?), Some(exact))
            } else {
                (None, None)
            };
            Ok(MetricsReport {
                mode: mode.name().to_string(),
                meta,
                samples: rows.into_iter().map(|(r, _)| r).collect(),
                detector,
                report_exact_match: exact,
            })
        })
        .collect()
}
