//! The toy dual encoder: scene features are frozen inputs, the text side is a
//! small transformer trained from scratch.

mod checkpoint;
mod encoder;
mod optim;
mod params;
mod pretrain;
mod tokenizer;

pub use checkpoint::{
    export_ln, import_ln, write_atomic, Checkpoint, TrainingMeta, CHECKPOINT_MAGIC,
};
pub use encoder::{GradMode, TextEncoder};
pub use optim::{AdamW, AdamWConfig};
pub use params::{Architecture, Layout, LnParameterSet, LnSite, ParamStore, TensorInfo};
pub use pretrain::{pretrain_dual_encoder, symmetric_info_nce, PretrainConfig};
pub use tokenizer::{TokenSequence, Tokenizer, END, PAD, START, TEMPLATE_WORDS, UNK};
