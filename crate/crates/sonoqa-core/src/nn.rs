//! Shared parameter containers for the network modules.
//!
//! Raw weights live in these structs between steps; each forward pass
//! stages them onto a [`Tape`] as variables (training) or constants
//! (inference). Initialization is Glorot-uniform, ±√(6/(fan_in+fan_out)).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::Result;
use crate::real::Real;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Convolution weights [C_out, C_in, k, k] plus per-channel bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParam<T: Real> {
    pub weights: Vec<T>,
    pub shape: [usize; 4],
    pub bias: Vec<T>,
}

impl<T: Real> ConvParam<T> {
    pub fn init(shape: [usize; 4], rng: &mut Rng) -> Self {
        let [co, ci, kh, kw] = shape;
        let fan_in = ci * kh * kw;
        let fan_out = co * kh * kw;
        let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        let weights = (0..co * ci * kh * kw)
            .map(|_| T::from_f64(rng.range_f64(-bound, bound)))
            .collect();
        ConvParam { weights, shape, bias: vec![T::ZERO; co] }
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        let [co, ci, kh, kw] = shape;
        ConvParam { weights: vec![T::ZERO; co * ci * kh * kw], shape, bias: vec![T::ZERO; co] }
    }

    pub fn stage(&self, g: &Tape<T>, trainable: bool) -> Result<(Tensor, Tensor)> {
        let w = stage_values(g, &self.shape, &self.weights, trainable)?;
        let b = stage_values(g, &[self.shape[0]], &self.bias, trainable)?;
        Ok((w, b))
    }
}

/// Dense map weights [rows, cols] plus optional bias [cols is the input
/// dimension; outputs are rows].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearParam<T: Real> {
    pub weights: Vec<T>,
    /// [out_dim, in_dim]
    pub shape: [usize; 2],
    pub bias: Vec<T>,
}

impl<T: Real> LinearParam<T> {
    pub fn init(shape: [usize; 2], rng: &mut Rng) -> Self {
        let [out_dim, in_dim] = shape;
        let bound = libm::sqrt(6.0 / (in_dim + out_dim) as f64);
        let weights =
            (0..out_dim * in_dim).map(|_| T::from_f64(rng.range_f64(-bound, bound))).collect();
        LinearParam { weights, shape, bias: vec![T::ZERO; out_dim] }
    }

    pub fn zeros(shape: [usize; 2]) -> Self {
        let [out_dim, in_dim] = shape;
        LinearParam { weights: vec![T::ZERO; out_dim * in_dim], shape, bias: vec![T::ZERO; out_dim] }
    }

    pub fn stage(&self, g: &Tape<T>, trainable: bool) -> Result<(Tensor, Tensor)> {
        let w = stage_values(g, &self.shape, &self.weights, trainable)?;
        let b = stage_values(g, &[self.shape[0]], &self.bias, trainable)?;
        Ok((w, b))
    }
}

pub fn stage_values<T: Real>(
    g: &Tape<T>,
    shape: &[usize],
    values: &[T],
    trainable: bool,
) -> Result<Tensor> {
    if trainable {
        g.variable(shape, values.to_vec())
    } else {
        g.constant(shape, values.to_vec())
    }
}
