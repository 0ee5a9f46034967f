//! Dense layers assembled on a [`Tape`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    LeakyRelu,
    Gelu,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::LeakyRelu => tape.leaky_relu(x, LEAKY_SLOPE),
            Activation::Gelu => tape.gelu(x),
        }
    }
}

/// Xavier-uniform initialized `[rows, cols]` matrix.
pub fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Normal(0, std) initialized table, used for embeddings.
pub fn normal_table(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_parts(vec![rows, cols], data)
}

/// Affine map `x W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), xavier(in_dim, out_dim, rng));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// Square identity map with zero bias.
    pub fn identity(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let mut w = Tensor::zeros(&[dim, dim]);
        for i in 0..dim {
            w.data_mut()[i * dim + i] = 1.0;
        }
        let weight = store.add(format!("{name}.weight"), w);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self {
            weight,
            bias,
            in_dim: dim,
            out_dim: dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Stack of linear layers with an activation after every layer but the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `sizes` lists every layer's output width; the last entry is the output dim.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        sizes: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let mut layers = Vec::with_capacity(sizes.len());
        let mut prev = in_dim;
        for (i, &s) in sizes.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), prev, s, rng));
            prev = s;
        }
        Self { layers, activation }
    }

    pub fn identity(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            layers: vec![Linear::identity(store, &format!("{name}.0"), dim)],
            activation: Activation::LeakyRelu,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").out_dim
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h)?;
            if i + 1 < self.layers.len() {
                h = self.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    /// Forward pass on plain values, no gradient tracking.
    pub fn eval(&self, store: &ParamStore, x: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = self.forward(&mut tape, store, xv)?;
        Ok(tape.value(y).clone())
    }
}

/// Counts forward passes; lets tests assert which modules a code path touched.
#[derive(Debug, Default)]
pub struct CallCounter(std::sync::atomic::AtomicUsize);

impl CallCounter {
    pub fn bump(&self) {
        self.0.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
    }

    pub fn get(&self) -> usize {
        self.0.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl Clone for CallCounter {
    fn clone(&self) -> Self {
        Self(std::sync::atomic::AtomicUsize::new(self.get()))
    }
}
