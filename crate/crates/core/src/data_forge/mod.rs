//! Synthetic chest radiographs, manifests and splits.

mod dataset;
mod geometry;
mod render;

pub use dataset::{
    generate_dataset, generate_sample, ingest_manifest, load_record, mix_seed, quantize, read_gray,
    split_dataset, write_gray_png, DatasetManifest, GeneratorConfig, ManifestRecord, RecordError,
    Split, MANIFEST_HEADER,
};
pub use geometry::{LungRegion, Rect, Side, Zone, ZoneLayout};
pub use render::{
    lesion_radius_range, random_specs, render_sample, validate_specs, LesionSpec, Sample,
    LESION_INTENSITY, MIN_IMAGE_SIZE,
};
