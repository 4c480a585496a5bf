use super::grammar::{words, GRAMMAR_WORDS};

/// Embedding dimension: one slot per grammar word plus an out-of-vocabulary
/// bucket.
pub const EMBED_DIM: usize = GRAMMAR_WORDS.len() + 1;

/// Bag-of-words vector of a report, L2-normalized when nonzero.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportEmbedding {
    pub vector: [f64; EMBED_DIM],
}

impl ReportEmbedding {
    pub fn counts(text: &str) -> [f64; EMBED_DIM] {
        let mut v = [0.0; EMBED_DIM];
        for w in words(text) {
            let slot = GRAMMAR_WORDS
                .iter()
                .position(|&g| g == w)
                .unwrap_or(EMBED_DIM - 1);
            v[slot] += 1.0;
        }
        v
    }

    pub fn distance(&self, other: &Self) -> f64 {
        euclidean(&self.vector, &other.vector)
    }
}

pub fn embed_report(text: &str) -> ReportEmbedding {
    let mut vector = ReportEmbedding::counts(text);
    let norm = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        vector.iter_mut().for_each(|x| *x /= norm);
    }
    ReportEmbedding { vector }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}
