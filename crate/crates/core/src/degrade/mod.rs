//! Seeded synthesis of (input, target, instruction) triplets: procedural clean
//! images, the degradation operators, the task catalog and held-out corpora.

pub mod catalog;
pub mod clean;
pub mod corpus;
pub mod ops;
pub mod spec;

pub use catalog::{make_icl_sample, make_pair, Direction, IclSample, Pair, TaskCatalog, TaskDef, SEVERITY_WORDS};
pub use clean::{gen_clean, mean_abs_laplacian};
pub use corpus::{
    build_testset, manifest_path, read_ppm, test_seed, train_seed, write_ppm, LoadedEntry, Manifest, ManifestEntry, TestsetSpec,
    TEST_SEED_BASE,
};
pub use spec::{apply, DegradationKind, DegradationSpec};

use crate::tensor::Tensor;

/// `[channels, H, W]` tensor with values in `[0, 1]`.
pub type Image = Tensor;

/// `[0, 1]` → `[−1, 1]`.
pub fn to_model_range(img: &Image) -> Tensor {
    img.map(|x| 2.0 * x - 1.0)
}

/// `[−1, 1]` → `[0, 1]`, clamped.
pub fn from_model_range(x: &Tensor) -> Image {
    x.map(|v| ((v + 1.0) * 0.5).clamp(0.0, 1.0))
}
