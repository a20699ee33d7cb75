//! Chunkwise Aligner streaming transduction with HAT-Transducer and Aligner baselines.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense `f64` tensors with a define-by-run reverse-mode tape.
//! * [`model`]: encoder, predictor and the HAT / Aligner / chunkwise joiners.
//! * [`alignment`]: forced alignments, delay shifting, chunk assignment and EOC targets.
//! * [`losses`]: Transducer full-sum, Aligner cross-entropy, chunkwise label CE + EOC BCE.
//! * [`decoding`]: chunkwise beam search and greedy search, baseline decoders.
//! * [`synthdata`]: synthetic token-to-frames corpus and token error rate.
//! * [`harness`]: run configuration, training, evaluation, benchmarking, attention export.

pub mod alignment;
pub mod decoding;
pub mod error;
pub mod harness;
pub mod losses;
pub mod model;
pub mod synthdata;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
