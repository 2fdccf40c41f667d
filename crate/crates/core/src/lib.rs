//! Feature-predictive self-supervised pretraining for multispectral image
//! retrieval.
//!
//! A context encoder sees a subset of patch tokens, a narrow predictor
//! regresses the embeddings that an EMA target encoder assigns to the masked
//! tokens, and VICReg terms on pooled embeddings keep the representation from
//! collapsing. Trained encoders are used for k-NN retrieval.

pub mod ablation;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod masking;
pub mod model;
pub mod nn;
pub mod optim;
pub mod retrieval;
pub mod rng;
pub mod training;

pub use error::{Error, FieldError, Result};
