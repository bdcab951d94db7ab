//! Raw-waveform CLDNN spoofing detection.
//!
//! The crate covers the whole pipeline: WAV decoding and framing, a small
//! reverse-mode autodiff engine, the convolutional/LSTM/DNN model and its
//! Adadelta training loop, a GMM log-likelihood-ratio baseline on cepstral
//! features, and the FAR/FRR/HTER evaluation protocol.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod data;
pub mod error;
pub mod features;
pub mod gmm;
pub mod gradsuite;
pub mod layers;
pub mod manifest;
pub mod metrics;
pub mod model;
pub mod par;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod wav;

pub use error::{Error, Result};
