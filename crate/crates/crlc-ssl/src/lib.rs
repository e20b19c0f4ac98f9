//! Channel-agnostic contrastive self-supervision for multivariate time
//! series: per-channel convolutional encoding, message-passing channel
//! aggregation, three positive-pair strategies, and two contrastive
//! losses, plus a synthetic source-mixing benchmark.

pub mod augment;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod loss;
pub mod model;
pub mod optim;
pub mod pairing;
pub mod persist;
pub mod sim;
pub mod train;

pub use error::{Error, Result};
