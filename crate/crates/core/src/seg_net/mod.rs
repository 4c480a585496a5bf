//! Text-guided lesion segmentation network.

mod model;
mod text;
mod tokenizer;

pub use model::{AttentionField, FeaturePyramid, SegConfig, SegLogits, SegNet, SegTrace, WordImportance};
pub use text::{TextEncoder, TextMemory};
pub use tokenizer::{TokenSequence, Tokenizer, CLS, PAD, UNK};
