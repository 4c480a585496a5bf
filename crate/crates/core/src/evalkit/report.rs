use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::metrics::{LabelMetrics, SegScores};
use crate::config::KeyValues;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRow {
    pub id: String,
    pub scores: SegScores,
    /// Report fed to the segmenter.
    pub report: String,
}

/// Metrics of one evaluation mode plus run metadata.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub mode: String,
    /// Free-form run facts: seed, checkpoint ids, threshold, provenance.
    pub meta: KeyValues,
    pub samples: Vec<SampleRow>,
    pub detector: Option<LabelMetrics>,
    /// Fraction of generated reports equal to the ground-truth report.
    pub report_exact_match: Option<f64>,
}

impl MetricsReport {
    pub fn mean(&self) -> SegScores {
        let n = self.samples.len().max(1) as f64;
        let sum = |f: fn(&SegScores) -> f64| self.samples.iter().map(|s| f(&s.scores)).sum::<f64>() / n;
        SegScores {
            accuracy: sum(|s| s.accuracy),
            dice: sum(|s| s.dice),
            jaccard: sum(|s| s.jaccard),
        }
    }

    /// Flat `key = value` summary, deterministic for equal inputs.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("mode", &self.mode);
        for (k, v) in self.meta.iter() {
            kv.set(&format!("meta.{k}"), v);
        }
        let m = self.mean();
        kv.set("samples", self.samples.len());
        kv.set("mean.accuracy", format!("{:.6}", m.accuracy));
        kv.set("mean.dice", format!("{:.6}", m.dice));
        kv.set("mean.jaccard", format!("{:.6}", m.jaccard));
        if let Some(d) = &self.detector {
            kv.set("detector.macro_f1", format!("{:.6}", d.macro_f1));
            kv.set("detector.exact_match", format!("{:.6}", d.exact_match));
            for (r, s) in d.regions.iter().enumerate() {
                kv.set(&format!("detector.region{r}.precision"), format!("{:.6}", s.precision));
                kv.set(&format!("detector.region{r}.recall"), format!("{:.6}", s.recall));
                kv.set(&format!("detector.region{r}.f1"), format!("{:.6}", s.f1));
            }
        }
        if let Some(x) = self.report_exact_match {
            kv.set("report.exact_match", format!("{x:.6}"));
        }
        kv
    }

    /// Tab-separated per-sample table.
    pub fn to_table(&self) -> String {
        let mut out = String::from("id\taccuracy\tdice\tjaccard\treport\n");
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{}\t{:.6}\t{:.6}\t{:.6}\t{}",
                s.id, s.scores.accuracy, s.scores.dice, s.scores.jaccard, s.report
            );
        }
        out
    }

    /// Writes `<stem>.txt` and `<stem>.tsv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join(format!("{stem}.txt"));
        fs::write(&txt, self.to_kv().to_text()).map_err(|e| Error::io(&txt, e))?;
        let tsv = dir.join(format!("{stem}.tsv"));
        fs::write(&tsv, self.to_table()).map_err(|e| Error::io(&tsv, e))
    }
}
