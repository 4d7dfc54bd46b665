use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

impl OutputActivation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            OutputActivation::Identity => x,
            OutputActivation::Sigmoid => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `out x in`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }
}

/// Feed-forward network: ReLU after every layer but the last, then the
/// output activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
    pub output: OutputActivation,
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>, output: OutputActivation) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Shape("network without layers".into()));
        }
        for (i, l) in layers.iter().enumerate() {
            if l.bias.len() != l.out_dim() {
                return Err(Error::Shape(format!("layer {i}: bias length {} vs {} outputs", l.bias.len(), l.out_dim())));
            }
            if !l.weight.is_finite() || l.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::Shape(format!("layer {i}: non-finite parameter")));
            }
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} emits {} values, layer {} expects {}",
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self { layers, output })
    }

    /// He-uniform weights, zero biases; the final layer is scaled by `last_scale`.
    pub fn init<R: Rng>(dims: &[usize], output: OutputActivation, last_scale: f64, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "need input and output dims");
        let n = dims.len() - 1;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let limit = (6.0 / w[0] as f64).sqrt() * if i + 1 == n { last_scale } else { 1.0 };
                let dist = Uniform::new_inclusive(-limit, limit);
                Layer {
                    weight: Tensor::from_fn(w[1], w[0], |_, _| dist.sample(rng)),
                    bias: vec![0.0; w[1]],
                }
            })
            .collect();
        Self { layers, output }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(Layer::out_dim))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Parameter slices in declaration order (`W₁, b₁, W₂, b₂, …`).
    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &mut self.layers {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
        }
        out
    }

    pub fn params(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len());
        for l in &self.layers {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
        }
        out
    }

    /// `θ ← (1-τ) θ + τ θ_src`.
    pub fn soft_update(&mut self, src: &MlpParams, tau: f64) {
        for (dst, s) in self.params_mut().into_iter().zip(src.params()) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d = (1.0 - tau) * *d + tau * v;
            }
        }
    }

    pub fn forward_batch(&self, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            h = h.matmul_nt(&l.weight);
            let cols = h.cols();
            for (k, v) in h.data_mut().iter_mut().enumerate() {
                *v += l.bias[k % cols];
                if i < last {
                    *v = v.max(0.0);
                } else {
                    *v = self.output.apply(*v);
                }
            }
        }
        h
    }

    pub fn register(&self, g: &mut Graph, trainable: bool) -> MlpVars {
        let layers = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = (l.weight.clone(), Tensor::row(l.bias.clone()));
                if trainable {
                    (g.input(w), g.input(b))
                } else {
                    (g.constant(w), g.constant(b))
                }
            })
            .collect();
        MlpVars {
            layers,
            output: self.output,
        }
    }
}

/// Graph handles for a network's parameters.
#[derive(Debug, Clone)]
pub struct MlpVars {
    pub layers: Vec<(Var, Var)>,
    pub output: OutputActivation,
}

impl MlpVars {
    /// Batched forward on the graph; `x` is `batch x in`. The sigmoid output
    /// is built as `1 / (1 + exp(-z))`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let z = g.matmul_t(h, w, false, true);
            h = g.add(z, b);
            if i < last {
                h = g.relu(h);
            }
        }
        match self.output {
            OutputActivation::Identity => h,
            OutputActivation::Sigmoid => {
                let n = g.neg(h);
                let e = g.exp(n);
                let one = g.scalar(1.0);
                let d = g.add(e, one);
                g.reciprocal(d)
            }
        }
    }

    pub fn param_vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

pub fn forward_mlp(params: &MlpParams, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.in_dim() {
        return Err(Error::Shape(format!("input length {} vs network input {}", x.len(), params.in_dim())));
    }
    Ok(params.forward_batch(&Tensor::row(x.to_vec())).into_vec())
}
