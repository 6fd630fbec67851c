//! FDY-LKA-CRNN sound event detection: log-mel frontend, frequency dynamic
//! convolution with large kernel attention, a Bi-GRU recurrent head,
//! mean-teacher training with pseudo-labeling, and event-based scoring.

pub mod error;
pub mod nn;
pub mod tensor;

pub use error::{Error, Result};
pub mod fdy;
pub mod lka;
pub mod checkpoint;
pub mod model;
pub mod dsp;
pub mod embeddings;
mod matrix_file;
pub mod eval;
pub mod data_io;
pub mod pseudolabel;
pub mod train;
