use rand::RngExt;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::scalar::Scalar;

use super::{Tape, Tensor};

/// Named learnable parameter held as plain data; lifted onto a tape per
/// forward pass. Models made of `Param`s are `Send + Sync`.
#[derive(Clone, Debug)]
pub struct Param<F: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<F>,
}

impl<F: Scalar> Param<F> {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Param {
            name: name.into(),
            shape: shape.to_vec(),
            data: vec![F::zero(); numel],
        }
    }

    /// Xavier-uniform init for a `fan_in×fan_out` matrix.
    pub fn xavier(name: impl Into<String>, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data: Vec<F> = (0..fan_in * fan_out)
            .map(|_| F::of_f64((rng.random::<f64>() * 2.0 - 1.0) * limit))
            .collect();
        Param {
            name: name.into(),
            shape: vec![fan_in, fan_out],
            data,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

/// Binds parameters onto a tape for one forward pass and remembers the leaf
/// handles so gradients can be read back by name after `backward`.
pub struct Binder<'t, F: Scalar> {
    tape: &'t Tape<F>,
    bound: Vec<(String, Tensor<F>, *const F)>,
}

impl<'t, F: Scalar> Binder<'t, F> {
    pub fn new(tape: &'t Tape<F>) -> Self {
        Binder {
            tape,
            bound: Vec::new(),
        }
    }

    pub fn tape(&self) -> &Tape<F> {
        self.tape
    }

    /// Lift a parameter as a differentiable leaf. Binding the same parameter
    /// twice returns the existing leaf so gradients accumulate in one place;
    /// two distinct parameters sharing a name is an error, not a silent
    /// aliasing.
    pub fn bind(&mut self, p: &Param<F>) -> Result<Tensor<F>> {
        if let Some((_, t, ptr)) = self.bound.iter().find(|(n, _, _)| n == &p.name) {
            if *ptr != p.data.as_ptr() {
                return Err(crate::error::Error::InvalidConfig {
                    what: "parameter binding",
                    why: format!("`{}` bound twice with different storage", p.name),
                });
            }
            return Ok(t.clone());
        }
        let t = self.tape.leaf(&p.shape, p.data.clone())?;
        self.bound.push((p.name.clone(), t.clone(), p.data.as_ptr()));
        Ok(t)
    }

    /// Leaf gradients by parameter name (after a backward pass).
    pub fn grads(&self) -> Vec<(String, Vec<F>)> {
        self.bound
            .iter()
            .filter_map(|(n, t, _)| t.grad().map(|g| (n.clone(), g)))
            .collect()
    }
}

/// Affine layer `x·W + b` over row-major feature matrices.
#[derive(Clone, Debug)]
pub struct Linear<F: Scalar> {
    pub weight: Param<F>,
    pub bias: Param<F>,
}

impl<F: Scalar> Linear<F> {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Param::xavier(format!("{name}.weight"), in_dim, out_dim, rng),
            bias: Param::zeros(format!("{name}.bias"), &[1, out_dim]),
        }
    }

    pub fn forward(&self, binder: &mut Binder<'_, F>, x: &Tensor<F>) -> Result<Tensor<F>> {
        let w = binder.bind(&self.weight)?;
        let b = binder.bind(&self.bias)?;
        let rows = x.shape()[0];
        x.matmul(&w)?.add(&b.broadcast_rows(rows)?)
    }

    pub fn params(&self) -> Vec<&Param<F>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<F>> {
        vec![&mut self.weight, &mut self.bias]
    }
}
