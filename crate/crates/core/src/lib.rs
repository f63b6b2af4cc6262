//! Contrastive pretraining of a bidirectional selective state-space image
//! encoder, built on a small reverse-mode autodiff engine.
//!
//! The pieces compose bottom-up: [`tensor`] and [`autodiff`] carry values
//! and gradients, [`ssm`] holds the discretization and both scan strategies,
//! [`encoder`] stacks them into the vision model, [`losses`] and [`train`]
//! drive pretraining, and [`probe`] measures what the frozen features are
//! worth. [`data`] covers datasets, checkpoints and embeddings on disk.
//!
//! Everything stochastic derives from explicit seeds (see [`seed`]), so a run
//! is reproducible bit for bit, whatever the thread count.

pub mod augment;
pub mod autodiff;
pub mod bench;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod optim;
pub mod params;
pub mod probe;
pub mod seed;
pub mod ssm;
pub mod tensor;
pub mod train;
