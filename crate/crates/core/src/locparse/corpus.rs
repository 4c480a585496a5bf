use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use super::embed::embed_report;
use super::grammar::{parse_report, LocationLabel};
use super::hdbscan::{hdbscan_cluster, ClusterAssignment};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterPurity {
    pub size: usize,
    pub modal_label: LocationLabel,
    /// Fraction of members whose label equals the modal label.
    pub purity: f64,
    pub stability: f64,
}

/// Diagnostic view of how well report embeddings group by location.
#[derive(Clone, Debug, PartialEq)]
pub enum PurityAudit {
    Skipped { reason: String },
    Clustered {
        clusters: Vec<ClusterPurity>,
        noise: usize,
    },
}

impl PurityAudit {
    pub fn mean_purity(&self) -> Option<f64> {
        match self {
            PurityAudit::Clustered { clusters, .. } if !clusters.is_empty() => {
                Some(clusters.iter().map(|c| c.purity).sum::<f64>() / clusters.len() as f64)
            }
            _ => None,
        }
    }
}

impl fmt::Display for PurityAudit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PurityAudit::Skipped { reason } => write!(f, "clustering skipped: {reason}"),
            PurityAudit::Clustered { clusters, noise } => {
                writeln!(f, "{} clusters, {noise} noise reports", clusters.len())?;
                for (i, c) in clusters.iter().enumerate() {
                    writeln!(
                        f,
                        "cluster {i}: size {} modal {} purity {:.3} stability {:.3}",
                        c.size, c.modal_label, c.purity, c.stability
                    )?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AuditParams {
    pub min_cluster_size: usize,
    pub min_samples: usize,
}

impl Default for AuditParams {
    fn default() -> Self {
        Self {
            min_cluster_size: 5,
            min_samples: 5,
        }
    }
}

/// Labels every report with the grammar parser and audits the corpus by
/// clustering the report embeddings. The audit never changes the labels.
pub fn pseudo_label_corpus(
    reports: &[String],
    params: AuditParams,
) -> Result<(Vec<LocationLabel>, PurityAudit)> {
    if reports.is_empty() {
        return Err(Error::Invalid("empty report corpus".into()));
    }
    let labels: Vec<LocationLabel> = reports.iter().map(|r| parse_report(r)).collect();
    if reports.len() < params.min_cluster_size {
        return Ok((
            labels,
            PurityAudit::Skipped {
                reason: "insufficient data".into(),
            },
        ));
    }
    let vectors: Vec<Vec<f64>> = reports
        .iter()
        .map(|r| embed_report(r).vector.to_vec())
        .collect();
    let assignment = hdbscan_cluster(
        &vectors,
        params.min_cluster_size,
        params.min_samples.clamp(1, reports.len()),
    )?;
    let audit = purity_audit(&assignment, &labels);
    Ok((labels, audit))
}

pub fn purity_audit(assignment: &ClusterAssignment, labels: &[LocationLabel]) -> PurityAudit {
    let clusters = (0..assignment.num_clusters())
        .map(|k| {
            let members = assignment.members(k);
            let mut counts: HashMap<LocationLabel, usize> = HashMap::new();
            for &m in &members {
                *counts.entry(labels[m]).or_default() += 1;
            }
            let (modal_label, top) = counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("clusters are non-empty");
            ClusterPurity {
                size: members.len(),
                modal_label,
                purity: top as f64 / members.len() as f64,
                stability: assignment.stabilities[k],
            }
        })
        .collect();
    PurityAudit::Clustered {
        clusters,
        noise: assignment.noise_count(),
    }
}

/// One `image_path,b0b1b2b3b4b5` line per record.
pub fn write_label_file(path: &Path, entries: &[(PathBuf, LocationLabel)]) -> Result<()> {
    let mut out = String::new();
    for (p, l) in entries {
        out.push_str(&p.to_string_lossy());
        out.push(',');
        out.push_str(&l.to_bit_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_label_file(path: &Path) -> Result<Vec<(PathBuf, LocationLabel)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let (p, bits) = line.rsplit_once(',').ok_or_else(|| {
                Error::Data(format!("{}:{}: expected `path,bits`", path.display(), i + 1))
            })?;
            let label = LocationLabel::parse_bit_string(bits).ok_or_else(|| {
                Error::Data(format!("{}:{}: bad label `{bits}`", path.display(), i + 1))
            })?;
            Ok((PathBuf::from(p), label))
        })
        .collect()
}
