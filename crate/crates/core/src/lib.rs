//! EEG-to-mel spectrogram reconstruction.
//!
//! The network maps a `[B, T, C]` EEG window plus subject identities to a
//! `[B, T, M]` mel spectrogram:
//!
//! ```text
//! eeg -> esm -> { dcfam stack , hams u-net } -> progressive spline fusion
//!     -> convmamba stack -> linear head -> mel
//! ```
//!
//! All learnable pieces run on a small reverse-mode [`tape::Tape`] that is
//! generic over `f32` (training) and `f64` (gradient checks).

pub mod convmamba;
pub mod data;
pub mod dcfam;
pub mod error;
pub mod esm;
pub mod gradcheck;
pub mod hamsnet;
pub mod layers;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod ops;
pub mod params;
pub mod ridge;
pub mod rng;
pub mod splinemap;
pub mod tape;
pub mod tensor;
pub mod tensorfile;
pub mod training;

pub use error::{Error, Result};
pub use params::ParamStore;
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::{Precision, Scalar, Tensor};
