//! Fundus-image screening, end to end and from scratch.
//!
//! The crate covers the whole pipeline for binary retina classification
//! (healthy vs. visible disease signs): PNM image decoding, retina-boundary
//! cropping, contrast-limited adaptive histogram equalization, bilinear
//! resizing, a small convolutional network with hand-written forward and
//! backward passes, momentum-SGD training with a piecewise learning-rate
//! schedule, finite-difference gradient checking, seeded dataset splits,
//! synthetic fundus generation, and a binary checkpoint format.
//!
//! Everything numeric is deterministic: a single seed drives weight
//! initialization, dropout, the train/test split and per-epoch shuffles
//! through independent ChaCha8 streams, and all reductions run in a fixed
//! order, so repeated runs produce byte-identical artifacts.

pub mod checkpoint;
pub mod clahe;
pub mod cli;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod image;
pub mod layers;
pub mod oracle;
pub mod pnm;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use clahe::{clahe, enhance_color, ClaheParams};
pub use data::{
    ingest_directory, load_manifest, make_batches, save_manifest, split_80_20, DatasetManifest,
    Label, LabelRule, SplitAssignment,
};
pub use error::{Error, Result};
pub use gradcheck::{grad_check, GradCheckReport};
pub use image::{crop, detect_retina_bbox, preprocess, resize_bilinear, BBox, Image8};
pub use layers::{build_network, conv2d_forward, Mode, Network, NetworkConfig};
pub use synth::synth_fundus;
pub use tensor::{Scalar, Tensor};
pub use train::{evaluate, train, LabeledSet, MetricsRecord, TrainingConfig};
