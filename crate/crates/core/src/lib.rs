//! Imbalance-aware self-supervised learning of 3D volume representations.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, layer kernels with manual backward passes, Adam.
//! - [`encoder`]: the 3D residual encoder and its predictor head.
//! - [`siamese`]: symmetrized negative-cosine training with a stop-gradient branch.
//! - [`imbalance`]: k-means based sample re-weighting and batch selection.
//! - [`augment`]: stochastic 3D view generation.
//! - [`radiomics`]: first-order, shape and co-occurrence features.
//! - [`evaluation`]: stratified cross validation of a linear SVM probe.
//! - [`data`]: volume files, manifests, checkpoints, synthetic phantoms.
//! - [`pipeline`]: end-to-end orchestration used by the command line tool.

pub mod error;
pub mod rng;
pub mod encoder;
pub mod siamese;
pub mod imbalance;
pub mod radiomics;
pub mod evaluation;
pub mod pipeline;
pub mod augment;
pub mod data;
pub mod tensor;

pub use error::{Error, Result};
