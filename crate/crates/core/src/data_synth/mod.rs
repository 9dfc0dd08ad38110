//! Procedural depth-completion data: scenes, simulated sparse
//! measurements, covariate shifts and on-disk datasets.

mod dataset;
mod sample;
mod scene;
mod shift;
mod sparse;

pub use dataset::{
    load_all, load_dataset, read_manifest, sample_path, save_dataset, DatasetManifest, DatasetReader, Split,
    MANIFEST_FILE,
};
pub use sample::{Batch, DepthMap, Sample};
pub use scene::{check_geometry, generate_scene};
pub use shift::{apply_shift, ShiftKind, ShiftSpec, FOG_AIRLIGHT};
pub use sparse::{depth_gradient_magnitude, sample_sparse, tie_break_ranks, SparseStrategy};
