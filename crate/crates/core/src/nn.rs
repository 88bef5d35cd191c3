//! Small building blocks shared by the model components.

use alloc::string::String;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Graph, ParamGroup, ParamId, ParamStore, Var};
use crate::{Result, Tensor};

pub type ModelRng = ChaCha8Rng;

/// Whether stochastic layers are active.
pub enum Mode<'r> {
    Eval,
    /// Dropout draws its masks from the given generator.
    Train { rng: &'r mut ModelRng, dropout: f64 },
}

impl Mode<'_> {
    pub fn is_training(&self) -> bool {
        matches!(self, Mode::Train { .. })
    }
}

/// Inverted dropout: kept units are divided by the keep probability, so
/// evaluation needs no rescaling. A no-op in eval mode or at rate zero.
pub fn dropout(graph: &mut Graph, x: Var, mode: &mut Mode<'_>) -> Result<Var> {
    let Mode::Train { rng, dropout } = mode else {
        return Ok(x);
    };
    if *dropout <= 0.0 {
        return Ok(x);
    }
    let keep = 1.0 - *dropout;
    let factors = (0..graph.value(x).numel())
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    graph.mul_const(x, factors)
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut ModelRng) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(rng)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// `y = x W + b` with `W` stored as `in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    /// Weights drawn from `N(0, 1/in)`, bias zero.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, group: ParamGroup, rng: &mut ModelRng) -> Self {
        let std = 1.0 / libm::sqrt(input as f64);
        Self::with_std(store, name, input, output, group, std, rng)
    }

    pub fn with_std(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        group: ParamGroup,
        std: f64,
        rng: &mut ModelRng,
    ) -> Self {
        let weight = store.add(join(name, "weight"), normal_tensor(&[input, output], std, rng), group);
        let bias = store.add(join(name, "bias"), Tensor::zeros([output]), group);
        Self { weight, bias }
    }

    /// Applies to an `N×in` matrix, or to a length-`in` vector (returning a vector).
    pub fn forward(&self, graph: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = graph.param(store, self.weight);
        let b = graph.param(store, self.bias);
        if graph.value(x).rank() == 1 {
            let n = graph.value(x).numel();
            let row = graph.reshape(x, &[1, n])?;
            let y = graph.matmul(row, w)?;
            let y = graph.add_bias(y, b)?;
            let out = graph.value(y).numel();
            graph.reshape(y, &[out])
        } else {
            let y = graph.matmul(x, w)?;
            graph.add_bias(y, b)
        }
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    let mut s = String::with_capacity(prefix.len() + name.len() + 1);
    s.push_str(prefix);
    s.push('.');
    s.push_str(name);
    s
}
