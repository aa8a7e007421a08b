//! Dataset plumbing: naming grammar, raster containers, manifests,
//! preprocessing, augmentation, batch sampling, and the synthetic
//! paired-modality generator.

pub mod augment;
pub mod batches;
pub mod manifest;
pub mod naming;
pub mod preprocess;
pub mod raster;
pub mod synth;

pub use augment::{augment, AugmentConfig};
pub use batches::{pair_batches, paired_pretrain_indices, pk_batches};
pub use manifest::{compute_stats, DatasetStats, ImageItem, ItemRecord, Role, SplitManifest};
pub use naming::{format_item_name, parse_item_name};
pub use preprocess::{preprocess, size_features, PreprocessConfig, SizeFeatures};
pub use raster::{load_raster, read_sarf, write_sarf, Raster};
pub use synth::{synth_generate, SynthSpec};
