//! Siamese pair networks for few-shot emotion classification over fixed-length
//! acoustic feature vectors, with a distance-ratio loss for fine-tuning the
//! shared extractor and a harness for transfer-learning experiments.
//!
//! - [`nn`]: dense layers, reverse-mode gradients, Adam with freeze masks and
//!   a finite-difference checker.
//! - [`siamese`]: twin network, pair BCE and the distance-ratio loss.
//! - [`data`]: datasets, feature CSV, normalization, pairs, LOSO folds and a
//!   synthetic domain generator.
//! - [`protocols`]: out-of-domain, in-domain and fine-tuning protocols, UAR,
//!   and the sweep runner.
//! - [`gradcheck`]: finite-difference suite over both losses.

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod protocols;
pub mod siamese;

pub use error::{Error, Result};
