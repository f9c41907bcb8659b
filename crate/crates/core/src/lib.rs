//! Desk-scale pipeline that adapts a tiny masked-diffusion language model to
//! offline black-box optimization: corpus construction, domain adaptation,
//! supervised fine-tuning, reward-weighted reinforcement learning, greedy
//! unmask decoding, and evaluation against enumerable oracles.

pub mod decode;
pub mod model;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod pool;
pub mod seed;
pub mod train;
pub mod text;
pub mod vocab;

pub use error::{Error, Result};

pub use ndarray;
