use crate::locparse::GRAMMAR_WORDS;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const UNK: usize = 2;

const SPECIAL: [&str; 3] = ["[PAD]", "[CLS]", "[UNK]"];
const EXTRA: [&str; 4] = ["lung", "and", ",", "."];

/// Token ids and attention mask of one report, always starting with
/// `[CLS]` and padded or truncated to a fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_tokens(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Fixed vocabulary: special tokens, grammar words, then "lung", "and" and
/// the two punctuation marks.
#[derive(Clone, Debug)]
pub struct Tokenizer {
    vocab: Vec<&'static str>,
    max_len: usize,
}

impl Tokenizer {
    pub fn new(max_len: usize) -> Self {
        let mut vocab: Vec<&'static str> = SPECIAL.to_vec();
        vocab.extend(GRAMMAR_WORDS);
        vocab.extend(EXTRA);
        Self {
            vocab,
            max_len: max_len.max(1),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn token(&self, id: usize) -> &str {
        self.vocab[id]
    }

    pub fn id_of(&self, word: &str) -> usize {
        self.vocab.iter().position(|&v| v == word).unwrap_or(UNK)
    }

    /// Lower-cased word and punctuation pieces of `text`.
    pub fn pieces(text: &str) -> Vec<String> {
        let mut out = Vec::new();
        let mut cur = String::new();
        for c in text.chars() {
            if c.is_alphanumeric() {
                cur.extend(c.to_lowercase());
                continue;
            }
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                out.push(c.to_string());
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
        out
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        let mut ids = vec![CLS];
        ids.extend(
            Self::pieces(text)
                .iter()
                .take(self.max_len - 1)
                .map(|p| self.id_of(p)),
        );
        let real = ids.len();
        ids.resize(self.max_len, PAD);
        let mask = (0..self.max_len).map(|i| i < real).collect();
        TokenSequence { ids, mask }
    }

    /// Surface strings of the real tokens after `[CLS]`.
    pub fn report_tokens(&self, text: &str) -> Vec<String> {
        Self::pieces(text)
            .into_iter()
            .take(self.max_len - 1)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::locparse::{synthesize_report, LocationLabel};

    #[test]
    fn empty_report_is_cls_then_padding() {
        let t = Tokenizer::new(24).encode("");
        assert_eq!(t.ids[0], CLS);
        assert!(t.ids[1..].iter().all(|&i| i == PAD));
        assert_eq!(t.real_tokens(), 1);
    }

    #[test]
    fn one_word_change_is_one_position() {
        let tk = Tokenizer::new(24);
        let a = tk.encode("Unilateral pulmonary infection, one infected area, upper left lung.");
        let b = tk.encode("Unilateral pulmonary infection, one infected area, upper right lung.");
        let diff = a.ids.iter().zip(&b.ids).filter(|(x, y)| x != y).count();
        assert_eq!(diff, 1);
    }

    #[test]
    fn unknown_words_and_truncation() {
        let tk = Tokenizer::new(4);
        let t = tk.encode("zebra upper left lung");
        assert_eq!(t.ids, vec![CLS, UNK, tk.id_of("upper"), tk.id_of("left")]);
        assert!(t.mask.iter().all(|&m| m));
    }

    #[test]
    fn generated_reports_fit_without_unknowns() {
        let tk = Tokenizer::new(64);
        let mut longest = 0;
        for l in LocationLabel::all() {
            let t = tk.encode(&synthesize_report(&l));
            assert!(!t.ids.contains(&UNK));
            longest = longest.max(t.real_tokens());
        }
        // Reports with up to three zones fit the default length of 24.
        for l in LocationLabel::all().filter(|l| l.count() <= 3) {
            assert!(tk.encode(&synthesize_report(&l)).real_tokens() <= 24);
        }
        assert!(longest > 24);
    }
}
