//! Optimization, augmentation, training loops and checkpoint files.

mod augment;
mod checkpoint;
mod loops;
mod optim;

pub use augment::{augment, rotate, shift, AugmentSpec};
pub use checkpoint::{
    detector_checkpoint, hash_text, segmenter_checkpoint, Checkpoint, ModelKind, StoredParam,
    FORMAT_VERSION, MAGIC,
};
pub use loops::{
    detector_macro_f1, segmenter_dice, segmenter_loss, train_detector, train_segmenter, with_threads,
    EpochRecord, TextSource, TrainConfig, TrainHistory,
};
pub use optim::{cosine_lr, AdamW, AdamWConfig};
