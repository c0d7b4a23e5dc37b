//! Hypernetwork-based fusion of tabular and image data at desk scale.
//!
//! A tabular attribute vector is embedded and used to *generate* the weights
//! of selected layers in an image-processing network, so the image analysis
//! is conditioned on the tabular data. The crate ships the full experiment
//! stack around that idea: a small f64 autodiff engine, the fusion model
//! zoo (unimodal baselines, concatenation, FiLM/DAFT-style conditioning,
//! hypernetwork fusion), variance-preserving head initialization, losses and
//! training, iterative imputation for missing tabular values, entropy-based
//! hyperlayer selection, entropy-weighted ensembling, evaluation metrics,
//! and deterministic synthetic benchmarks with Bayes oracles.

pub mod tensor;
pub mod tape;
pub mod params;
pub(crate) mod kernels;
pub mod rng;
pub mod gradcheck;
pub mod hypernet;
pub mod tabular;

pub use tensor::{Tensor, TensorError};
pub use tape::{Mode, NodeId, Tape};
pub use params::{Parameter, ParameterStore, Partition};
