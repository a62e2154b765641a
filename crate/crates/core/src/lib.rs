//! Road-network-aware trajectory modelling: data preparation, a masked
//! tuple-sequence model, pre-training and downstream task adapters.

pub mod checkpoint;
pub mod error;
pub mod geo;
pub mod mapmatch;
pub mod metrics;
pub mod model;
pub mod pretrain;
pub mod roadnet;
pub mod tasks;
pub mod tokenizer;
pub mod trajdata;

pub use error::{Error, Result};
