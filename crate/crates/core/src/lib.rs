//! Co-occurrence self-supervised learning toolkit.
//!
//! The crate is organized bottom-up:
//!
//! * [`tensor`]: dense tensors, a reverse-mode tape and a finite-difference checker.
//! * [`rfnet`]: receptive-field arithmetic and RF-bounded ResNet backbones.
//! * [`cossl`]: augmentation, dual online/target networks and the CO-BYOL objective.
//! * [`trainer`]: datasets, optimizer, online linear probes, checkpoints and the fit loop.
//! * [`probes`]: masking and PGD robustness, effective receptive fields, similarity analysis.
//! * [`config`]: the flat `key=value` configuration format.

// Negated float comparisons reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod cossl;
pub mod error;
pub mod nn;
pub mod probes;
pub mod rfnet;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
