//! The network: dual-head tokenizer, auxiliary embeddings, shared encoder.

pub mod checkpoint;
pub mod config;
pub mod forward;
pub mod params;

pub use checkpoint::{from_bytes, load_checkpoint, save_checkpoint, to_bytes};
pub use config::{ModalityTag, ModelConfig};
pub use forward::{
    assemble_sequence, attention_maps, batch_feature_node, encode, extract_feature, feature_node,
    param_nodes_from_ids, tokenize, ForwardInput, LinearNodes, ParamNodes,
};
pub use params::{LinearParams, Params, LOG_TAU_INIT};
