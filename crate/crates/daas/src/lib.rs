//! Joint differentiable search over convolutional architectures and
//! data-augmentation policies, sized for a single desk machine.
//!
//! The crate provides, bottom up:
//!
//! - [`tensor`] / [`tape`]: a dense-tensor reverse-mode autodiff engine with
//!   the convolution, normalization, pooling and classification primitives a
//!   cell-based supernet needs (f32 for search, f64 for verification);
//! - [`augment`]: a 15-op image augmentation policy space with exact
//!   sampling, log-probabilities and closed-form score gradients;
//! - [`supernet`]: a weight-sharing cell supernet with Gumbel-softmax
//!   architecture sampling and straight-through gradients;
//! - [`search`]: the alternating bi-level loop that trains supernet weights
//!   while estimating gradients for architecture and policy parameters, the
//!   policy side via a score-function hypergradient;
//! - [`derive`]: discretization of a finished search into a genotype and a
//!   policy distribution table;
//! - [`eval`]: from-scratch training of a derived genotype under a chosen
//!   augmentation mode;
//! - [`oracle`]: brute-force enumerations, exact hypergradients and
//!   statistical bias reports that certify the estimators;
//! - [`data`], [`config`], [`run`]: synthetic and binary-batch datasets,
//!   run configuration, checkpoints and metrics.
//!
//! Every random decision flows from a single run seed through tagged
//! substreams ([`rng`]), so a run is bitwise reproducible and resumable.
//!
//! The `examples/` directory exercises each capability end to end; the thin
//! `daas` binary exposes the same entry points as subcommands
//! (`generate-data`, `search`, `derive`, `evaluate`, `verify`,
//! `preview-augment`).

pub mod augment;
pub mod config;
pub mod data;
pub mod derive;
pub mod error;
pub mod eval;
pub mod fdcheck;
pub mod kernels;
pub mod nn;
pub mod oracle;
pub mod rng;
pub mod run;
pub mod search;
pub mod supernet;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
