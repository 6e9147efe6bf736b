//! Deterministic synthetic weld radiographs with defect masks.
//!
//! A [`ScenarioSpec`] describes one image distribution: seam geometry,
//! defect mix, scale classes, contrast and noise. Sample `i` of a spec is a
//! pure function of `(spec, i)`, so datasets can be rendered in parallel and
//! still come out byte-identical.

mod io;
mod render;
mod spec;

pub use io::{
    dataset_entries, generate_dataset, load_dataset, read_mask, read_png, write_dataset, write_png, Manifest, ManifestEntry, MANIFEST_FILE,
    SCHEMA_VERSION,
};
pub use render::{generate_sample, quantize, BoundingBox, DefectRecord, Sample};
pub use spec::{
    classify_area, scale_bounds, DefectKind, DefectMix, ScaleClass, ScaleMix, ScenarioSpec, SeamOrientation, SeamProfile, PRESETS,
};
