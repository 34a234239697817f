//! Open-world continual learning with a single joint variational model.
//!
//! A shared encoder feeds a pixel decoder and a linear classifier. Tasks are
//! learned in sequence through generative replay, and replayed samples are
//! filtered by per-class Weibull bounds fitted to latent cosine distances,
//! which also drive open-set rejection of unseen inputs.

pub mod checkpoint;
pub mod continual;
pub mod data;
pub mod error;
pub mod evt;
pub mod model;
pub mod numcore;
pub mod replay;

pub use error::{Error, Result};
