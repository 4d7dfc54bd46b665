//! Backward linear bound propagation (polytope abstract domain) through
//! feed-forward ReLU networks.
//!
//! Every pre-activation `h_k` is bounded by substituting linear relaxations
//! backwards to the input and concretising over the input box. Unstable ReLUs
//! use the upper chord `u/(u-l)·h - u·l/(u-l)` and a binary lower slope `α`.
//! Coefficients are split by sign: positive coefficients of an upper bound take
//! the neuron's upper relaxation, negative ones its lower relaxation, and
//! symmetrically for lower bounds. Each layer's bounds are also intersected
//! with the interval image of the previous layer's bounds.
//!
//! The whole computation is recorded on an [`ndiff::Graph`](crate::ndiff::Graph),
//! so the concretised bounds can be differentiated with respect to concrete
//! (zero-width) input coordinates. Discrete choices (neuron modes, `α`,
//! coefficient signs, which side of an intersection is active) are constants
//! on the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndiff::{Graph, MlpParams, OutputActivation, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Shape(format!("box bounds of length {} and {}", lower.len(), upper.len())));
        }
        if let Some(i) = (0..lower.len()).find(|&i| !(lower[i] <= upper[i])) {
            return Err(Error::Shape(format!("box dim {i}: lower {} > upper {}", lower[i], upper[i])));
        }
        Ok(Self { lower, upper })
    }

    pub fn point(x: Vec<f64>) -> Self {
        Self {
            lower: x.clone(),
            upper: x,
        }
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn mid(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn radius(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.len() && x.iter().zip(&self.lower).zip(&self.upper).all(|((v, l), u)| l <= v && v <= u)
    }

    pub fn concat(&self, other: &BoxBounds) -> BoxBounds {
        BoxBounds {
            lower: [self.lower.as_slice(), other.lower.as_slice()].concat(),
            upper: [self.upper.as_slice(), other.upper.as_slice()].concat(),
        }
    }
}

/// `A_lower·x + b_lower <= N(x) <= A_upper·x + b_upper` over the box. For a
/// sigmoid-output network the planes bound the pre-activation output.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBounds {
    pub a_lower: Tensor,
    pub a_upper: Tensor,
    pub b_lower: Vec<f64>,
    pub b_upper: Vec<f64>,
}

impl LinearBounds {
    pub fn eval(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let xr = Tensor::row(x.to_vec());
        let lo = xr.matmul_nt(&self.a_lower).into_vec().iter().zip(&self.b_lower).map(|(a, b)| a + b).collect();
        let hi = xr.matmul_nt(&self.a_upper).into_vec().iter().zip(&self.b_upper).map(|(a, b)| a + b).collect();
        (lo, hi)
    }
}

/// Pre-activation bounds of every layer, output layer last.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerBounds {
    pub lower: Vec<Vec<f64>>,
    pub upper: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Relaxation {
    pub lower_slope: f64,
    pub upper_slope: f64,
    pub upper_intercept: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NeuronMode {
    Active,
    Inactive,
    /// Unstable neuron with lower slope 1.
    UnstableIdentity,
    /// Unstable neuron with lower slope 0.
    UnstableZero,
}

pub fn neuron_mode(l: f64, u: f64) -> NeuronMode {
    if l > 0.0 {
        NeuronMode::Active
    } else if u <= 0.0 {
        NeuronMode::Inactive
    } else if u >= l.abs() {
        NeuronMode::UnstableIdentity
    } else {
        NeuronMode::UnstableZero
    }
}

pub fn relu_relaxation(l: f64, u: f64) -> Relaxation {
    match neuron_mode(l, u) {
        NeuronMode::Active => Relaxation {
            lower_slope: 1.0,
            upper_slope: 1.0,
            upper_intercept: 0.0,
        },
        NeuronMode::Inactive => Relaxation {
            lower_slope: 0.0,
            upper_slope: 0.0,
            upper_intercept: 0.0,
        },
        mode => Relaxation {
            lower_slope: if mode == NeuronMode::UnstableIdentity { 1.0 } else { 0.0 },
            upper_slope: u / (u - l),
            upper_intercept: -u * l / (u - l),
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundOptions {
    /// Treat intermediate bounds as constants when differentiating.
    pub detach_intermediate: bool,
    /// Intersect every layer with the interval image of the previous layer.
    pub intersect_interval: bool,
}

impl Default for BoundOptions {
    fn default() -> Self {
        Self {
            detach_intermediate: false,
            intersect_interval: true,
        }
    }
}

struct RelaxVars {
    alpha: Var,
    upper_slope: Var,
    upper_intercept: Var,
}

/// Bounds of one network recorded on a graph.
pub struct BoundVars {
    /// `1 x out` rows, after the output activation.
    pub lower: Var,
    pub upper: Var,
    /// Pre-activation bound rows per layer.
    pub layer_lower: Vec<Var>,
    pub layer_upper: Vec<Var>,
    /// Coefficients on the first layer's pre-activation for the output
    /// bounds, used to recover the input-space hyperplanes.
    out_coef_lower: Option<Var>,
    out_coef_upper: Option<Var>,
    out_bias_lower: Var,
    out_bias_upper: Var,
    /// Hash of every discrete choice made while bounding.
    pub signature: u64,
}

struct Builder<'a> {
    g: &'a mut Graph,
    params: &'a MlpParams,
    opts: BoundOptions,
    weights: Vec<Var>,
    biases: Vec<Var>,
    first_interval: Var,
    first_interval_abs: Var,
    rad_interval: Var,
    mid_h0: Var,
    relax: Vec<RelaxVars>,
    zero: Var,
    one: Var,
    keys: Vec<Var>,
    modes: Vec<NeuronMode>,
}

fn mix(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x100_0000_01b3).rotate_left(17) ^ 0x9e37_79b9_7f4a_7c15
}

impl Builder<'_> {
    /// Backward substitution for the pre-activation of layer `k`. Returns the
    /// concretised bound row plus the coefficients on `h_0` and the bias.
    fn backward(&mut self, k: usize, upper: bool) -> (Var, Option<Var>, Var) {
        if k == 0 {
            let spread = self.g.matmul_t(self.rad_interval, self.first_interval_abs, false, true);
            let bound = if upper {
                self.g.add(self.mid_h0, spread)
            } else {
                self.g.sub(self.mid_h0, spread)
            };
            return (bound, None, self.biases[0]);
        }
        let mut coef = self.weights[k];
        let mut bias = self.biases[k];
        for j in (0..k).rev() {
            let r = &self.relax[j];
            let (pos_slope, neg_slope) = if upper {
                (r.upper_slope, r.alpha)
            } else {
                (r.alpha, r.upper_slope)
            };
            let upper_intercept = r.upper_intercept;
            self.keys.push(coef);
            let pos = self.g.mul(coef, pos_slope);
            let neg = self.g.mul(coef, neg_slope);
            let chord_part = if upper {
                self.g.select_by_sign(coef, coef, self.zero)
            } else {
                self.g.select_by_sign(coef, self.zero, coef)
            };
            let shift = self.g.matmul_t(upper_intercept, chord_part, false, true);
            bias = self.g.add(bias, shift);
            coef = self.g.select_by_sign(coef, pos, neg);
            if j > 0 {
                let bshift = self.g.matmul_t(self.biases[j], coef, false, true);
                bias = self.g.add(bias, bshift);
                coef = self.g.matmul(coef, self.weights[j]);
            }
        }
        // coef now multiplies h_0 = W_0 x + b_0
        let centre = self.g.matmul_t(self.mid_h0, coef, false, true);
        let a_interval = self.g.matmul(coef, self.first_interval);
        self.keys.push(a_interval);
        let abs = self.g.abs(a_interval);
        let spread = self.g.matmul_t(self.rad_interval, abs, false, true);
        let partial = self.g.add(centre, bias);
        let bound = if upper {
            self.g.add(partial, spread)
        } else {
            self.g.sub(partial, spread)
        };
        (bound, Some(coef), bias)
    }

    /// Interval image of layer `k` from the bounds of layer `k-1`.
    fn interval_step(&mut self, k: usize, prev_l: Var, prev_u: Var) -> (Var, Var) {
        let gl = self.g.relu(prev_l);
        let gu = self.g.relu(prev_u);
        let sum = self.g.add(gl, gu);
        let mid = self.g.scale(sum, 0.5);
        let diff = self.g.sub(gu, gl);
        let rad = self.g.scale(diff, 0.5);
        let abs_w = self.g.constant(self.params.layers[k].weight.map(f64::abs));
        let centre0 = self.g.matmul_t(mid, self.weights[k], false, true);
        let centre = self.g.add(centre0, self.biases[k]);
        let spread = self.g.matmul_t(rad, abs_w, false, true);
        (self.g.sub(centre, spread), self.g.add(centre, spread))
    }

    fn relax_layer(&mut self, l: Var, u: Var) {
        let (lv, uv) = (self.g.value(l).clone(), self.g.value(u).clone());
        let n = lv.cols();
        let modes: Vec<NeuronMode> = (0..n).map(|i| neuron_mode(lv.data()[i], uv.data()[i])).collect();
        let row = |f: &dyn Fn(NeuronMode) -> f64| Tensor::row(modes.iter().map(|&m| f(m)).collect());
        let alpha = self.g.constant(row(&|m| match m {
            NeuronMode::Active | NeuronMode::UnstableIdentity => 1.0,
            _ => 0.0,
        }));
        let unstable_key = self.g.constant(row(&|m| match m {
            NeuronMode::UnstableIdentity | NeuronMode::UnstableZero => 1.0,
            _ => -1.0,
        }));
        let active = self.g.constant(row(&|m| if m == NeuronMode::Active { 1.0 } else { 0.0 }));
        let (l, u) = if self.opts.detach_intermediate {
            (self.g.constant(lv), self.g.constant(uv))
        } else {
            (l, u)
        };
        let width = self.g.sub(u, l);
        let den = self.g.select_by_sign(unstable_key, width, self.one);
        let inv = self.g.reciprocal(den);
        let slope = self.g.mul(u, inv);
        let ul = self.g.mul(u, l);
        let ul_inv = self.g.mul(ul, inv);
        let intercept = self.g.neg(ul_inv);
        let upper_slope = self.g.select_by_sign(unstable_key, slope, active);
        let upper_intercept = self.g.select_by_sign(unstable_key, intercept, self.zero);
        self.modes.extend(modes);
        self.relax.push(RelaxVars {
            alpha,
            upper_slope,
            upper_intercept,
        });
    }
}

/// Records the bounds of `params` over the box with centre `mid` (a `1 x in`
/// graph row, possibly differentiable) and fixed radius `rad`.
pub fn bound_network(g: &mut Graph, params: &MlpParams, mid: Var, rad: &[f64], opts: BoundOptions) -> Result<BoundVars> {
    let in_dim = params.in_dim();
    if g.value(mid).shape() != (1, in_dim) || rad.len() != in_dim {
        return Err(Error::Shape(format!(
            "box of {} dims for a network with {in_dim} inputs",
            rad.len()
        )));
    }
    let interval_dims: Vec<usize> = (0..in_dim).filter(|&i| rad[i] > 0.0).collect();
    let weights: Vec<Var> = params.layers.iter().map(|l| g.constant(l.weight.clone())).collect();
    let biases: Vec<Var> = params.layers.iter().map(|l| g.constant(Tensor::row(l.bias.clone()))).collect();
    let w0_interval = params.layers[0].weight.select_cols(&interval_dims);
    let first_interval_abs = g.constant(w0_interval.map(f64::abs));
    let first_interval = g.constant(w0_interval);
    let rad_interval = g.constant(Tensor::row(interval_dims.iter().map(|&i| rad[i]).collect()));
    let h0 = g.matmul_t(mid, weights[0], false, true);
    let mid_h0 = g.add(h0, biases[0]);
    let zero = g.scalar(0.0);
    let one = g.scalar(1.0);
    let mut b = Builder {
        g,
        params,
        opts,
        weights,
        biases,
        first_interval,
        first_interval_abs,
        rad_interval,
        mid_h0,
        relax: Vec::new(),
        zero,
        one,
        keys: Vec::new(),
        modes: Vec::new(),
    };
    let n = params.layers.len();
    let (mut layer_lower, mut layer_upper) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let mut out = None;
    for k in 0..n {
        let (mut lo, coef_lo, bias_lo) = b.backward(k, false);
        let (mut hi, coef_hi, bias_hi) = b.backward(k, true);
        if k > 0 && b.opts.intersect_interval {
            let (ilo, ihi) = b.interval_step(k, layer_lower[k - 1], layer_upper[k - 1]);
            b.keys.push(b.g.sub(lo, ilo));
            b.keys.push(b.g.sub(ihi, hi));
            lo = b.g.max(lo, ilo);
            hi = b.g.min(hi, ihi);
        }
        layer_lower.push(lo);
        layer_upper.push(hi);
        if k + 1 < n {
            b.relax_layer(lo, hi);
        } else {
            out = Some((coef_lo, coef_hi, bias_lo, bias_hi));
        }
    }
    let (out_coef_lower, out_coef_upper, out_bias_lower, out_bias_upper) = out.expect("network has layers");
    let mut signature = 0u64;
    for m in &b.modes {
        signature = mix(signature, *m as u64);
    }
    for &k in &b.keys {
        for v in b.g.value(k).data() {
            signature = mix(signature, (*v >= 0.0) as u64);
        }
    }
    let (pre_lo, pre_hi) = (layer_lower[n - 1], layer_upper[n - 1]);
    let (lower, upper) = match params.output {
        OutputActivation::Identity => (pre_lo, pre_hi),
        OutputActivation::Sigmoid => (sigmoid_on(b.g, pre_lo), sigmoid_on(b.g, pre_hi)),
    };
    Ok(BoundVars {
        lower,
        upper,
        layer_lower,
        layer_upper,
        out_coef_lower,
        out_coef_upper,
        out_bias_lower,
        out_bias_upper,
        signature,
    })
}

fn sigmoid_on(g: &mut Graph, x: Var) -> Var {
    let n = g.neg(x);
    let e = g.exp(n);
    let one = g.scalar(1.0);
    let d = g.add(e, one);
    g.reciprocal(d)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PropagationResult {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub linear: LinearBounds,
    pub layers: LayerBounds,
    pub signature: u64,
}

fn check_box(params: &MlpParams, bx: &BoxBounds) -> Result<()> {
    if bx.len() != params.in_dim() {
        return Err(Error::Shape(format!("box has {} dims, network expects {}", bx.len(), params.in_dim())));
    }
    Ok(())
}

pub fn propagate_bounds(params: &MlpParams, bx: &BoxBounds) -> Result<PropagationResult> {
    propagate_bounds_with(params, bx, BoundOptions::default())
}

pub fn propagate_bounds_with(params: &MlpParams, bx: &BoxBounds, opts: BoundOptions) -> Result<PropagationResult> {
    check_box(params, bx)?;
    let mut g = Graph::new();
    let mid = g.constant(Tensor::row(bx.mid()));
    let bv = bound_network(&mut g, params, mid, &bx.radius(), opts)?;
    let first = &params.layers[0];
    let plane = |coef: Option<Var>, bias: Var| -> (Tensor, Vec<f64>) {
        match coef {
            None => (first.weight.clone(), first.bias.clone()),
            Some(c) => {
                let c = g.value(c);
                let a = c.matmul(&first.weight);
                let b0 = Tensor::row(first.bias.clone()).matmul_nt(c);
                let b = g.value(bias).data().iter().zip(b0.data()).map(|(x, y)| x + y).collect();
                (a, b)
            }
        }
    };
    let (a_lower, b_lower) = plane(bv.out_coef_lower, bv.out_bias_lower);
    let (a_upper, b_upper) = plane(bv.out_coef_upper, bv.out_bias_upper);
    let rows = |vs: &[Var]| vs.iter().map(|&v| g.value(v).data().to_vec()).collect();
    Ok(PropagationResult {
        lower: g.value(bv.lower).data().to_vec(),
        upper: g.value(bv.upper).data().to_vec(),
        linear: LinearBounds {
            a_lower,
            a_upper,
            b_lower,
            b_upper,
        },
        layers: LayerBounds {
            lower: rows(&bv.layer_lower),
            upper: rows(&bv.layer_upper),
        },
        signature: bv.signature,
    })
}

/// Plain interval arithmetic through the network.
pub fn interval_bounds(params: &MlpParams, bx: &BoxBounds) -> Result<(Vec<f64>, Vec<f64>)> {
    check_box(params, bx)?;
    let (mut lo, mut hi) = (bx.lower().to_vec(), bx.upper().to_vec());
    let last = params.layers.len() - 1;
    for (i, layer) in params.layers.iter().enumerate() {
        let (mut nlo, mut nhi) = (layer.bias.clone(), layer.bias.clone());
        for o in 0..layer.out_dim() {
            for (k, w) in layer.weight.row_slice(o).iter().enumerate() {
                let (a, b) = (w * lo[k], w * hi[k]);
                nlo[o] += a.min(b);
                nhi[o] += a.max(b);
            }
        }
        if i < last {
            nlo.iter_mut().for_each(|v| *v = v.max(0.0));
            nhi.iter_mut().for_each(|v| *v = v.max(0.0));
        } else {
            nlo.iter_mut().for_each(|v| *v = params.output.apply(*v));
            nhi.iter_mut().for_each(|v| *v = params.output.apply(*v));
        }
        lo = nlo;
        hi = nhi;
    }
    Ok((lo, hi))
}

/// Mean over outputs of polytope width / interval width; `1` where both are 0.
pub fn compare_with_interval(params: &MlpParams, bx: &BoxBounds) -> Result<f64> {
    let poly = propagate_bounds(params, bx)?;
    let (ilo, ihi) = interval_bounds(params, bx)?;
    let n = poly.lower.len();
    let total: f64 = (0..n)
        .map(|j| {
            let (pw, iw) = (poly.upper[j] - poly.lower[j], ihi[j] - ilo[j]);
            if iw <= 0.0 {
                1.0
            } else {
                pw / iw
            }
        })
        .sum();
    Ok(total / n as f64)
}

/// Concrete-coordinate embedding `mid = x_c · P + rest` on a graph.
pub(crate) fn embed_concrete(g: &mut Graph, xc: Var, concrete_dims: &[usize], base_mid: &[f64]) -> Var {
    let n = base_mid.len();
    let mut sel = Tensor::zeros(concrete_dims.len(), n);
    let mut rest = base_mid.to_vec();
    for (r, &d) in concrete_dims.iter().enumerate() {
        sel.set(r, d, 1.0);
        rest[d] = 0.0;
    }
    let p = g.constant(sel);
    let rest = g.constant(Tensor::row(rest));
    let m = g.matmul(xc, p);
    g.add(m, rest)
}

/// Upper bound of output `j` and its gradient with respect to the listed
/// concrete (zero-width) input coordinates.
pub fn upper_bound_value_and_gradient(
    params: &MlpParams,
    bx: &BoxBounds,
    concrete_dims: &[usize],
    output: usize,
    opts: BoundOptions,
) -> Result<(f64, Vec<f64>, u64)> {
    check_box(params, bx)?;
    if output >= params.out_dim() {
        return Err(Error::Shape(format!("output {output} of a {}-output network", params.out_dim())));
    }
    if let Some(&d) = concrete_dims.iter().find(|&&d| d >= bx.len() || bx.lower()[d] != bx.upper()[d]) {
        return Err(Error::Contract(format!("dimension {d} is not a concrete box coordinate")));
    }
    let mut g = Graph::new();
    let xc = g.input(Tensor::row(concrete_dims.iter().map(|&d| bx.lower()[d]).collect()));
    let mid = embed_concrete(&mut g, xc, concrete_dims, &bx.mid());
    let bv = bound_network(&mut g, params, mid, &bx.radius(), opts)?;
    let mut seed = Tensor::zeros(1, params.out_dim());
    seed.set(0, output, 1.0);
    let grads = g.backward_with_seed(bv.upper, seed);
    let grad = grads.get_or_zeros(xc, (1, concrete_dims.len())).into_vec();
    Ok((g.value(bv.upper).data()[output], grad, bv.signature))
}

pub fn upper_bound_gradient(params: &MlpParams, bx: &BoxBounds, concrete_dims: &[usize], output: usize) -> Result<Vec<f64>> {
    upper_bound_value_and_gradient(params, bx, concrete_dims, output, BoundOptions::default()).map(|(_, g, _)| g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndiff::{forward_mlp, Layer};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(rng: &mut ChaCha8Rng, dims: &[usize], out: OutputActivation) -> MlpParams {
        let mut p = MlpParams::init(dims, out, 1.0, rng);
        for l in &mut p.layers {
            l.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        p
    }

    fn random_box(rng: &mut ChaCha8Rng, n: usize, width: f64) -> BoxBounds {
        let c: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..width)).collect();
        BoxBounds::new(c.iter().zip(&w).map(|(c, w)| c - w / 2.0).collect(), c.iter().zip(&w).map(|(c, w)| c + w / 2.0).collect()).unwrap()
    }

    fn sample(rng: &mut ChaCha8Rng, bx: &BoxBounds) -> Vec<f64> {
        bx.lower().iter().zip(bx.upper()).map(|(l, u)| if l == u { *l } else { rng.gen_range(*l..=*u) }).collect()
    }

    #[test]
    fn relaxation_cases() {
        assert_eq!(relu_relaxation(2.0, 5.0), Relaxation { lower_slope: 1.0, upper_slope: 1.0, upper_intercept: 0.0 });
        assert_eq!(relu_relaxation(-3.0, -1.0), Relaxation { lower_slope: 0.0, upper_slope: 0.0, upper_intercept: 0.0 });
        assert_eq!(relu_relaxation(-1.0, 1.0), Relaxation { lower_slope: 1.0, upper_slope: 0.5, upper_intercept: 0.5 });
        assert_eq!(relu_relaxation(-3.0, 1.0).lower_slope, 0.0);
        assert_eq!(relu_relaxation(0.0, 0.0).upper_slope, 0.0);
        assert_eq!(relu_relaxation(0.7, 0.7).upper_slope, 1.0);
    }

    #[test]
    fn box_validation() {
        assert!(BoxBounds::new(vec![1.0], vec![0.0]).is_err());
        assert!(BoxBounds::new(vec![0.0, 0.0], vec![1.0]).is_err());
        assert!(BoxBounds::new(vec![f64::NAN], vec![0.0]).is_err());
    }

    #[test]
    fn zero_width_box_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let p = random_net(&mut rng, &[4, 16, 16, 2], OutputActivation::Identity);
            let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r = propagate_bounds(&p, &BoxBounds::point(x.clone())).unwrap();
            let y = forward_mlp(&p, &x).unwrap();
            for j in 0..2 {
                assert!((r.lower[j] - y[j]).abs() < 1e-9 && (r.upper[j] - y[j]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn affine_network_is_exact_interval_image() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random_net(&mut rng, &[3, 2], OutputActivation::Identity);
        let bx = random_box(&mut rng, 3, 0.5);
        let r = propagate_bounds(&p, &bx).unwrap();
        let (ilo, ihi) = interval_bounds(&p, &bx).unwrap();
        for j in 0..2 {
            assert!((r.lower[j] - ilo[j]).abs() < 1e-12 && (r.upper[j] - ihi[j]).abs() < 1e-12);
        }
        assert!((compare_with_interval(&p, &bx).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(r.linear.a_upper, p.layers[0].weight);
        let g = upper_bound_gradient(&p, &BoxBounds::point(bx.mid()), &[0, 2], 1).unwrap();
        assert_eq!(g, vec![p.layers[0].weight.get(1, 0), p.layers[0].weight.get(1, 2)]);
    }

    #[test]
    fn sampled_soundness_and_hyperplanes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let p = random_net(&mut rng, &[2, 16, 16, 2], OutputActivation::Identity);
            let bx = random_box(&mut rng, 2, 0.2);
            let r = propagate_bounds(&p, &bx).unwrap();
            for _ in 0..500 {
                let x = sample(&mut rng, &bx);
                let y = forward_mlp(&p, &x).unwrap();
                let (plo, phi) = r.linear.eval(&x);
                for j in 0..2 {
                    assert!(r.lower[j] - 1e-7 <= y[j] && y[j] <= r.upper[j] + 1e-7);
                    assert!(plo[j] - 1e-7 <= y[j] && y[j] <= phi[j] + 1e-7);
                }
            }
        }
    }

    #[test]
    fn sigmoid_output_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_net(&mut rng, &[3, 8, 3], OutputActivation::Sigmoid);
        let bx = random_box(&mut rng, 3, 1.0);
        let r = propagate_bounds(&p, &bx).unwrap();
        for _ in 0..500 {
            let y = forward_mlp(&p, &sample(&mut rng, &bx)).unwrap();
            for j in 0..3 {
                assert!(r.lower[j] <= y[j] + 1e-12 && y[j] <= r.upper[j] + 1e-12);
                assert!((0.0..=1.0).contains(&r.lower[j]));
            }
        }
    }

    #[test]
    fn disconnected_input_has_zero_gradient() {
        let w1 = Tensor::from_vec(2, 2, vec![1.0, 0.0, -1.0, 0.0]);
        let p = MlpParams::new(
            vec![Layer { weight: w1, bias: vec![0.1, 0.2] }, Layer { weight: Tensor::row(vec![1.0, 2.0]), bias: vec![0.0] }],
            OutputActivation::Identity,
        )
        .unwrap();
        let bx = BoxBounds::new(vec![0.3, -1.0], vec![0.3, 1.0]).unwrap();
        let g = upper_bound_gradient(&p, &bx, &[0], 0).unwrap();
        assert!(g[0].abs() > 0.0);
        let bx2 = BoxBounds::new(vec![-1.0, 0.5], vec![1.0, 0.5]).unwrap();
        assert_eq!(upper_bound_gradient(&p, &bx2, &[1], 0).unwrap(), vec![0.0]);
        assert!(upper_bound_gradient(&p, &bx2, &[0], 0).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut checked, mut switched) = (0, 0);
        for _ in 0..20 {
            let p = random_net(&mut rng, &[6, 12, 12, 1], OutputActivation::Identity);
            let mut bx = random_box(&mut rng, 6, 0.8);
            let concrete = [0usize, 2, 5];
            let mut lo = bx.lower().to_vec();
            let mut hi = bx.upper().to_vec();
            for &d in &concrete {
                hi[d] = lo[d];
            }
            lo.iter_mut().zip(&hi).for_each(|(l, h)| *l = l.min(*h));
            bx = BoxBounds::new(lo, hi).unwrap();
            let (_, grad, sig) = upper_bound_value_and_gradient(&p, &bx, &concrete, 0, BoundOptions::default()).unwrap();
            for (i, &d) in concrete.iter().enumerate() {
                let h = 1e-5;
                let eval = |delta: f64| {
                    let (mut l, mut u) = (bx.lower().to_vec(), bx.upper().to_vec());
                    l[d] += delta;
                    u[d] += delta;
                    let r = propagate_bounds(&p, &BoxBounds::new(l, u).unwrap()).unwrap();
                    (r.upper[0], r.signature)
                };
                let ((fp, sp), (fm, sm)) = (eval(h), eval(-h));
                if sp != sig || sm != sig {
                    switched += 1;
                    continue;
                }
                checked += 1;
                let fd = (fp - fm) / (2.0 * h);
                let err = (fd - grad[i]).abs() / fd.abs().max(1e-6);
                assert!(err < 1e-3 || (fd - grad[i]).abs() < 1e-8, "fd {fd} vs {}", grad[i]);
            }
        }
        assert!(checked > switched);
    }

    fn alpha_flipped(a: &PropagationResult, b: &PropagationResult) -> bool {
        let hidden = a.layers.lower.len() - 1;
        (0..hidden).any(|k| {
            (0..a.layers.lower[k].len()).any(|n| {
                let ma = neuron_mode(a.layers.lower[k][n], a.layers.upper[k][n]);
                let mb = neuron_mode(b.layers.lower[k][n], b.layers.upper[k][n]);
                matches!(
                    (ma, mb),
                    (NeuronMode::UnstableIdentity, NeuronMode::UnstableZero) | (NeuronMode::UnstableZero, NeuronMode::UnstableIdentity)
                )
            })
        })
    }

    // Nested boxes give nested relaxations unless the area rule flips some
    // neuron's lower slope between them; only then may bounds tighten.
    #[test]
    fn nested_boxes_have_nested_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut checked = 0;
        for _ in 0..200 {
            let p = random_net(&mut rng, &[3, 10, 10, 2], OutputActivation::Identity);
            let inner = random_box(&mut rng, 3, 0.4);
            let outer = BoxBounds::new(
                inner.lower().iter().map(|l| l - 0.1).collect(),
                inner.upper().iter().map(|u| u + 0.1).collect(),
            )
            .unwrap();
            let (ri, ro) = (propagate_bounds(&p, &inner).unwrap(), propagate_bounds(&p, &outer).unwrap());
            if alpha_flipped(&ri, &ro) {
                continue;
            }
            checked += 1;
            for j in 0..2 {
                assert!(ro.lower[j] <= ri.lower[j] + 1e-9 && ri.upper[j] <= ro.upper[j] + 1e-9);
            }
        }
        assert!(checked > 150, "{checked}");
    }
}
