//! Random i.i.d. matrix products S_n = A_n ... A_1, their first derived
//! products T_n (the first-order term of the perturbed product
//! (A_n + eps B_n) ... (A_1 + eps B_1)), and Monte Carlo estimators for the
//! constants that govern their growth.

// `!(x > 0.0)` is used on purpose so that NaN fails the check
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod diagnostics;
pub mod engine;
pub mod ensemble;
pub mod error;
pub mod estimators;
pub mod linalg;
pub mod record;
pub mod report;
pub mod rng;
pub mod stats;
pub mod verify;

pub use error::{Error, Result};
