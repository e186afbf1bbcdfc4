//! One-step hyperspectral anomaly detection.
//!
//! Labeled training pairs are fabricated from an unlabeled cube by pasting
//! spectrally shuffled rectangles into random patches and warping patch and
//! label together ([`sim`]). An encoder/decoder with global and local
//! self-attention ([`net`]) learns to map patches straight to anomaly maps;
//! [`pipeline`] trains it, adapts cubes with other band counts and tiles
//! whole images. [`eval`] provides 3D-ROC scores and the global RX baseline.

pub mod error;
pub mod eval;
pub mod exec;
pub mod hsi;
pub mod net;
pub mod pipeline;
pub mod sim;
pub mod synth;

pub use error::{Error, ErrorClass, Result};
pub use eval::{auc_report, grx, roc_series, separability_stats, AucReport, RocSeries};
pub use exec::Exec;
pub use hsi::{extract_patches, normalize_cube, BinaryMask, HsiCube, Patch, ScoreMap};
pub use net::{NetworkConfig, TddNet};
pub use pipeline::{adapt_bands, infer, train, Checkpoint, PatchScorer, TrainConfig};
pub use sim::{simulate_dataset, SimConfig, TrainingSample};
