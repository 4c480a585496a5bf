//! Report grammar, report embeddings and density clustering.

mod corpus;
mod embed;
mod grammar;
mod hdbscan;

pub use corpus::{
    pseudo_label_corpus, purity_audit, read_label_file, write_label_file, AuditParams,
    ClusterPurity, PurityAudit,
};
pub use embed::{embed_report, euclidean, ReportEmbedding, EMBED_DIM};
pub use grammar::{
    parse_report, parse_report_detailed, synthesize_report, words, LocationLabel, ParsedReport,
    FILLER_WORDS, GRAMMAR_WORDS, LOCATION_WORDS,
};
pub use hdbscan::{hdbscan_cluster, hdbscan_precomputed, ClusterAssignment, NOISE};
