//! sonoqa-core: quality assessment for 2D ultrasound standard planes.
//!
//! A standard plane is a section in which every required anatomical
//! structure appears fully with clear boundaries. This crate detects those
//! structures, scores each one with a binary quality flag, and renders a
//! per-plane verdict. Everything is built from scratch on a small
//! reverse-mode autodiff tape so that every gradient, weight and metric can
//! be verified against independent oracles:
//!
//! * [`tensor`] — dense tensors with reverse-mode differentiation and a
//!   finite-difference gradient checker
//! * [`preprocess`] — Gaussian smoothing and overlay-text removal
//! * [`backbone`] — the convolutional feature extractor (residual stages,
//!   global average pooling, spatial pyramid pooling)
//! * [`relation`] — geometry/appearance attention between detected regions
//! * [`detector`] — pyramid anchors, IoU, assignment, box regression, NMS
//! * [`classifier`] — structure classification and quality flags under
//!   focal loss
//! * [`phantom`] — deterministic synthetic ultrasound-like images with
//!   exact ground truth
//! * [`trainer`] — end-to-end multi-task training at desk scale
//! * [`metrics`] — AP/mAP, ROC/AUC, confusion metrics, IoU quartiles, all
//!   locked to brute-force oracles
//! * [`report`] — per-structure '1'/'0' assessment and plane verdict
//!
//! This crate is `no_std` (with `alloc`) and performs no IO; file formats,
//! the CLI and wall-clock timing live in the companion `sonoqa-cli` crate.

#![no_std]
#![deny(unsafe_code)]
// `!(x > 0.0)`-style guards are deliberate: they reject NaN, which the
// suggested `x <= 0.0` would silently accept.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod anatomy;
pub mod backbone;
pub mod classifier;
pub mod detector;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod phantom;
pub mod preprocess;
pub mod real;
pub mod relation;
pub mod report;
pub mod rng;
pub mod selfcheck;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use real::Real;
