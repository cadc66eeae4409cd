//! MADE conditioners: masked feedforward networks that emit the parameters of
//! every one-dimensional conditional in a single pass.
//!
//! Output columns are grouped in blocks. The Gaussian head emits `[μ | α]`
//! (each `D` wide, indexed by variable). The mixture head emits
//! `[logits | means | log-stds]`, each `D·C` wide with column `i·C + c` for
//! variable `i`, component `c`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{FlowError, Result};
use crate::masking::{MaskSet, Order};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::{log_sum_exp, Tensor, LN_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub fn apply(self, tape: &mut Tape, v: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(v),
            Activation::Tanh => tape.tanh(v),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            _ => Err(FlowError::Format(format!("unknown activation code {c}"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        })
    }
}

impl FromStr for Activation {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(FlowError::Config {
                key: "model.activation".into(),
                message: format!("unknown value `{other}`; allowed: relu, tanh"),
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Gaussian,
    Mixture { components: usize },
}

impl Head {
    pub fn blocks(self) -> usize {
        match self {
            Head::Gaussian => 2,
            Head::Mixture { components } => 3 * components,
        }
    }
}

/// Conditional parameters for one input vector.
#[derive(Debug, Clone, PartialEq)]
pub enum CondParams {
    Gaussian { mu: Vec<f64>, alpha: Vec<f64> },
    /// `[D × C]` tensors; weight rows sum to one.
    Mixture { weights: Tensor, means: Tensor, log_stds: Tensor },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamCount {
    /// Unmasked connection weights.
    pub weights: usize,
    pub biases: usize,
    /// Closed-form approximation counting connection weights only.
    pub approx: f64,
}

#[derive(Debug, Clone)]
struct Dense {
    weight: ParamId,
    bias: ParamId,
    mask: Arc<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Conditioner {
    masks: MaskSet,
    layers: Vec<Dense>,
    activation: Activation,
    head: Head,
}

/// Uniform in ±1/√fan-in per destination unit, fan-in counted over unmasked
/// entries; masked entries start (and stay) at zero.
pub(crate) fn init_masked_weight(mask: &Tensor, rng: &mut Rng) -> Tensor {
    let (rows, cols) = (mask.rows(), mask.cols());
    let fan_in: Vec<f64> = (0..cols).map(|j| (0..rows).map(|i| mask.get(i, j)).sum()).collect();
    let mut w = Tensor::zeros(&[rows, cols]);
    for i in 0..rows {
        for j in 0..cols {
            let bound = 1.0 / fan_in[j].max(1.0).sqrt();
            let draw = rng.uniform_range(-bound, bound);
            if mask.get(i, j) != 0.0 {
                w.set(i, j, draw);
            }
        }
    }
    w
}

impl Conditioner {
    pub fn new(
        masks: MaskSet,
        activation: Activation,
        head: Head,
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
    ) -> Result<Self> {
        if let Head::Mixture { components: 0 } = head {
            return Err(FlowError::usage("mixture head needs at least one component"));
        }
        let d = masks.dim();
        let head_vars = head_columns(head, d);
        let n_masks = masks.masks.len();
        let mut layers = Vec::with_capacity(n_masks);
        for (k, m) in masks.masks.iter().enumerate() {
            let mask = if k + 1 == n_masks { Arc::new(m.select_cols(&head_vars)) } else { m.clone() };
            let w = init_masked_weight(&mask, rng);
            let weight = store.add(format!("{name}.w{k}"), w, ParamKind::Weight, Some(mask.clone()));
            let bias = store.add(format!("{name}.b{k}"), Tensor::zeros(&[mask.cols()]), ParamKind::Bias, None);
            layers.push(Dense { weight, bias, mask });
        }
        Ok(Conditioner { masks, layers, activation, head })
    }

    pub fn dim(&self) -> usize {
        self.masks.dim()
    }

    pub fn cond_width(&self) -> usize {
        self.masks.cond_width
    }

    pub fn head(&self) -> Head {
        self.head
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn masks(&self) -> &MaskSet {
        &self.masks
    }

    pub fn order(&self) -> &Order {
        &self.masks.order
    }

    /// `(weight, bias)` per layer, input side first.
    pub fn layer_params(&self) -> Vec<(ParamId, ParamId)> {
        self.layers.iter().map(|l| (l.weight, l.bias)).collect()
    }

    pub fn output_width(&self) -> usize {
        self.head.blocks() * self.dim()
    }

    fn check_label(&self, y: Option<&Tensor>, rows: usize) -> Result<()> {
        match (y, self.cond_width()) {
            (None, 0) => Ok(()),
            (None, w) => Err(FlowError::usage(format!("conditioner expects {w} label inputs, none given"))),
            (Some(_), 0) => Err(FlowError::usage("label inputs given to an unconditional conditioner")),
            (Some(t), w) if t.cols() != w || t.rows() != rows => {
                Err(FlowError::dim("conditioner", format!("labels {:?}, expected [{rows} × {w}]", t.shape())))
            }
            _ => Ok(()),
        }
    }

    /// Raw head outputs `[N × blocks·D]`.
    pub fn outputs(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Option<Var>) -> Result<Var> {
        let rows = tape.value(x).rows();
        if tape.value(x).cols() != self.dim() {
            return Err(FlowError::dim("conditioner", format!("input {:?}, expected D={}", tape.value(x).shape(), self.dim())));
        }
        self.check_label(y.map(|v| tape.value(v)), rows)?;
        let mut h = match y {
            Some(y) => tape.concat_cols(x, y)?,
            None => x,
        };
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let z = tape.matmul_masked(h, vars[layer.weight.0], layer.mask.clone())?;
            let z = tape.add_row(z, vars[layer.bias.0])?;
            h = if k == last { z } else { self.activation.apply(tape, z) };
            if !tape.value(h).all_finite() {
                let what = if k == last { "conditioner output".to_string() } else { format!("conditioner hidden layer {k}") };
                return Err(FlowError::numeric(None, what, "non-finite activations"));
            }
        }
        Ok(h)
    }

    /// `(μ, α)`, each `[N × D]`.
    pub fn gaussian(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Option<Var>) -> Result<(Var, Var)> {
        if self.head != Head::Gaussian {
            return Err(FlowError::usage("gaussian parameters requested from a mixture conditioner"));
        }
        let d = self.dim();
        let out = self.outputs(tape, vars, x, y)?;
        let mu = tape.gather_cols(out, (0..d).collect::<Vec<_>>())?;
        let alpha = tape.gather_cols(out, (d..2 * d).collect::<Vec<_>>())?;
        Ok((mu, alpha))
    }

    /// Per-row log-density `[N]` of the autoregressive model itself.
    pub fn log_prob_rows(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Option<Var>) -> Result<Var> {
        match self.head {
            Head::Gaussian => {
                let (mu, alpha) = self.gaussian(tape, vars, x, y)?;
                let diff = tape.sub(x, mu)?;
                let na = tape.neg(alpha);
                let inv = tape.exp(na);
                let z = tape.mul(diff, inv)?;
                let z2 = tape.square(z);
                let half = tape.scale(z2, -0.5);
                let t = tape.add(half, na)?;
                let t = tape.add_const(t, -0.5 * LN_2PI);
                tape.sum_cols(t)
            }
            Head::Mixture { components } => self.mixture_log_prob_rows(tape, vars, x, y, components),
        }
    }

    fn mixture_log_prob_rows(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Option<Var>, c: usize) -> Result<Var> {
        let d = self.dim();
        let n = tape.value(x).rows();
        let dc = d * c;
        let out = self.outputs(tape, vars, x, y)?;
        let logits = tape.gather_cols(out, (0..dc).collect::<Vec<_>>())?;
        let means = tape.gather_cols(out, (dc..2 * dc).collect::<Vec<_>>())?;
        let log_stds = tape.gather_cols(out, (2 * dc..3 * dc).collect::<Vec<_>>())?;
        let rep: Vec<usize> = (0..d).flat_map(|i| std::iter::repeat_n(i, c)).collect();
        let xr = tape.gather_cols(x, rep)?;
        let diff = tape.sub(xr, means)?;
        let neg_s = tape.neg(log_stds);
        let inv = tape.exp(neg_s);
        let z = tape.mul(diff, inv)?;
        let z2 = tape.square(z);
        let half = tape.scale(z2, -0.5);
        let comp = tape.add(half, neg_s)?;
        let comp = tape.add_const(comp, -0.5 * LN_2PI);
        let joint = tape.add(comp, logits)?;
        let joint = tape.reshape(joint, &[n * d, c])?;
        let lse_joint = tape.logsumexp_last(joint)?;
        let logits_r = tape.reshape(logits, &[n * d, c])?;
        let lse_norm = tape.logsumexp_last(logits_r)?;
        let per_dim = tape.sub(lse_joint, lse_norm)?;
        let per_dim = tape.reshape(per_dim, &[n, d])?;
        tape.sum_cols(per_dim)
    }

    fn value_outputs(&self, store: &ParamStore, x: &[f64], y: Option<&[f64]>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let xv = tape.constant(Tensor::row(x.to_vec()));
        let yv = y.map(|y| tape.constant(Tensor::row(y.to_vec())));
        let out = self.outputs(&mut tape, &vars, xv, yv)?;
        Ok(tape.value(out).data().to_vec())
    }

    /// Conditional parameters for a single input vector.
    pub fn forward(&self, store: &ParamStore, x: &[f64], y: Option<&[f64]>) -> Result<CondParams> {
        let d = self.dim();
        let out = self.value_outputs(store, x, y)?;
        Ok(match self.head {
            Head::Gaussian => CondParams::Gaussian { mu: out[..d].to_vec(), alpha: out[d..2 * d].to_vec() },
            Head::Mixture { components: c } => {
                let dc = d * c;
                let mut weights = Tensor::zeros(&[d, c]);
                for i in 0..d {
                    let row = &out[i * c..(i + 1) * c];
                    let lse = log_sum_exp(row);
                    for (k, &l) in row.iter().enumerate() {
                        weights.set(i, k, (l - lse).exp());
                    }
                }
                CondParams::Mixture {
                    weights,
                    means: Tensor::matrix(d, c, out[dc..2 * dc].to_vec())?,
                    log_stds: Tensor::matrix(d, c, out[2 * dc..3 * dc].to_vec())?,
                }
            }
        })
    }

    pub fn log_prob(&self, store: &ParamStore, x: &[f64], y: Option<&[f64]>) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let xv = tape.constant(Tensor::row(x.to_vec()));
        let yv = y.map(|y| tape.constant(Tensor::row(y.to_vec())));
        let lp = self.log_prob_rows(&mut tape, &vars, xv, yv)?;
        let v = tape.value(lp).item();
        if !v.is_finite() {
            return Err(FlowError::numeric(None, "conditioner log-density", format!("value {v}")));
        }
        Ok(v)
    }

    /// Ancestral sample: one network pass per order position.
    pub fn sample(&self, store: &ParamStore, rng: &mut Rng, y: Option<&[f64]>) -> Result<Vec<f64>> {
        let d = self.dim();
        let mut x = vec![0.0; d];
        match self.head {
            Head::Gaussian => {
                let u = rng.normals(d);
                for &i in self.order().sequence() {
                    let out = self.value_outputs(store, &x, y)?;
                    x[i] = u[i] * out[d + i].exp() + out[i];
                }
            }
            Head::Mixture { components: c } => {
                let dc = d * c;
                for &i in self.order().sequence() {
                    let out = self.value_outputs(store, &x, y)?;
                    let logits = &out[i * c..(i + 1) * c];
                    let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
                    let k = rng.categorical(&w);
                    let mean = out[dc + i * c + k];
                    let log_std = out[2 * dc + i * c + k];
                    x[i] = mean + log_std.exp() * rng.normal();
                }
            }
        }
        Ok(x)
    }

    /// Exact unmasked-weight count alongside the closed-form approximation
    /// `3/2·DH + ½(L−1)H²` (Gaussian) or `(C+½)·DH + ½(L−1)H²` (mixture).
    pub fn count_params(&self) -> ParamCount {
        let weights = self.layers.iter().map(|l| l.mask.sum() as usize).sum();
        let biases = self.layers.iter().map(|l| l.mask.cols()).sum();
        let d = self.dim() as f64;
        let hidden = &self.masks.hidden_degrees;
        let l = hidden.len() as f64;
        let h = hidden.first().map_or(0, Vec::len) as f64;
        let first = match self.head {
            Head::Gaussian => 1.5,
            Head::Mixture { components } => components as f64 + 0.5,
        };
        let approx = if hidden.is_empty() { 0.0 } else { first * d * h + 0.5 * (l - 1.0) * h * h };
        ParamCount { weights, biases, approx }
    }
}

fn head_columns(head: Head, d: usize) -> Vec<usize> {
    match head {
        Head::Gaussian => (0..d).chain(0..d).collect(),
        Head::Mixture { components } => {
            let block: Vec<usize> = (0..d).flat_map(|i| std::iter::repeat_n(i, components)).collect();
            block.iter().chain(&block).chain(&block).copied().collect()
        }
    }
}

/// A standalone MADE: one conditioner with its own parameters.
#[derive(Debug, Clone)]
pub struct Made {
    pub store: ParamStore,
    pub net: Conditioner,
}

impl Made {
    pub fn new(masks: MaskSet, activation: Activation, head: Head, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(seed, crate::rng::Stream::WeightInit);
        let net = Conditioner::new(masks, activation, head, &mut store, &mut rng, "made")?;
        Ok(Made { store, net })
    }

    pub fn forward(&self, x: &[f64], y: Option<&[f64]>) -> Result<CondParams> {
        self.net.forward(&self.store, x, y)
    }

    pub fn log_prob(&self, x: &[f64], y: Option<&[f64]>) -> Result<f64> {
        self.net.log_prob(&self.store, x, y)
    }

    pub fn sample(&self, rng: &mut Rng, y: Option<&[f64]>) -> Result<Vec<f64>> {
        self.net.sample(&self.store, rng, y)
    }

    pub fn count_params(&self) -> ParamCount {
        self.net.count_params()
    }

    /// Zero every weight and bias.
    pub fn zero(&mut self) {
        for p in self.store.iter_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::{build_masks, DegreeAssignment};
    use crate::tensor::standard_normal_logpdf;

    fn made(d: usize, hidden: &[usize], head: Head, cond: usize, seed: u64) -> Made {
        let ms = build_masks(d, hidden, &Order::identity(d), DegreeAssignment::Sequential, cond, 0).unwrap();
        Made::new(ms, Activation::Relu, head, seed).unwrap()
    }

    fn randomize(m: &mut Made, seed: u64, scale: f64) {
        let mut rng = Rng::new(seed);
        for p in m.store.iter_mut() {
            let mask = p.mask.clone();
            for (k, v) in p.value.data_mut().iter_mut().enumerate() {
                let keep = mask.as_ref().is_none_or(|m| m.data()[k] != 0.0);
                *v = if keep { scale * rng.normal() } else { 0.0 };
            }
        }
    }

    #[test]
    fn zero_conditioner_is_standard_normal() {
        let mut m = made(2, &[4], Head::Gaussian, 0, 1);
        m.zero();
        let CondParams::Gaussian { mu, alpha } = m.forward(&[3.0, -1.0], None).unwrap() else { panic!() };
        assert_eq!(mu, vec![0.0, 0.0]);
        assert_eq!(alpha, vec![0.0, 0.0]);
        let lp = m.log_prob(&[0.0, 0.0], None).unwrap();
        assert!((lp + 1.837_877_066_409_345_3).abs() < 1e-14);
    }

    #[test]
    fn hand_set_two_dim_network() {
        let mut m = made(2, &[1], Head::Gaussian, 0, 1);
        m.zero();
        let layers = m.net.layer_params();
        // input degree 1 → the single hidden unit (degree 1)
        m.store.get_mut(layers[0].0).set(0, 0, 1.0);
        // hidden → μ slot of variable 2 (output degree 1)
        m.store.get_mut(layers[1].0).set(0, 1, 1.0);
        let CondParams::Gaussian { mu, alpha } = m.forward(&[0.7, -3.0], None).unwrap() else { panic!() };
        assert_eq!(mu, vec![0.0, 0.7]);
        assert_eq!(alpha, vec![0.0, 0.0]);
    }

    #[test]
    fn single_component_mixture_matches_gaussian_head() {
        let mut g = made(3, &[6, 6], Head::Gaussian, 0, 5);
        randomize(&mut g, 11, 0.4);
        let mut mix = made(3, &[6, 6], Head::Mixture { components: 1 }, 0, 5);
        // Copy hidden layers and map [μ | α] onto [logit | mean | log-std].
        let gl = g.net.layer_params();
        let ml = mix.net.layer_params();
        for k in 0..gl.len() - 1 {
            let (w, b) = (g.store.get(gl[k].0).clone(), g.store.get(gl[k].1).clone());
            *mix.store.get_mut(ml[k].0) = w;
            *mix.store.get_mut(ml[k].1) = b;
        }
        let (gw, gb) = (g.store.get(gl[2].0).clone(), g.store.get(gl[2].1).clone());
        let mw = mix.store.get_mut(ml[2].0);
        for r in 0..6 {
            for i in 0..3 {
                mw.set(r, i, 0.3 * (r as f64 - i as f64));
                mw.set(r, 3 + i, gw.get(r, i));
                mw.set(r, 6 + i, gw.get(r, 3 + i));
            }
        }
        let mb = mix.store.get_mut(ml[2].1);
        for i in 0..3 {
            mb.data_mut()[3 + i] = gb.data()[i];
            mb.data_mut()[6 + i] = gb.data()[3 + i];
        }
        let mut rng = Rng::new(3);
        for _ in 0..20 {
            let x = rng.normals(3);
            let a = g.log_prob(&x, None).unwrap();
            let b = mix.log_prob(&x, None).unwrap();
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn gaussian_log_prob_formula() {
        let mut m = made(4, &[8], Head::Gaussian, 0, 2);
        randomize(&mut m, 4, 0.5);
        let x = [0.3, -1.2, 2.0, 0.1];
        let CondParams::Gaussian { mu, alpha } = m.forward(&x, None).unwrap() else { panic!() };
        let u: Vec<f64> = (0..4).map(|i| (x[i] - mu[i]) * (-alpha[i]).exp()).collect();
        let expect = standard_normal_logpdf(&u) - alpha.iter().sum::<f64>();
        assert!((m.log_prob(&x, None).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn mixture_weights_are_normalised() {
        let mut m = made(3, &[5], Head::Mixture { components: 4 }, 0, 1);
        randomize(&mut m, 9, 1.0);
        let CondParams::Mixture { weights, .. } = m.forward(&[0.1, 0.2, 0.3], None).unwrap() else { panic!() };
        for i in 0..3 {
            let s: f64 = weights.row_slice(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(weights.row_slice(i).iter().all(|&w| w > 0.0));
        }
    }

    #[test]
    fn label_presence_is_checked() {
        let m = made(2, &[3], Head::Gaussian, 0, 1);
        assert!(matches!(m.forward(&[0.0, 0.0], Some(&[1.0])), Err(FlowError::Usage(_))));
        let c = made(2, &[3], Head::Gaussian, 2, 1);
        assert!(matches!(c.forward(&[0.0, 0.0], None), Err(FlowError::Usage(_))));
        assert!(c.forward(&[0.0, 0.0], Some(&[1.0, 0.0])).is_ok());
    }

    #[test]
    fn non_finite_parameters_are_reported() {
        let mut m = made(2, &[3], Head::Gaussian, 0, 1);
        let (w, _) = m.net.layer_params()[0];
        m.store.get_mut(w).set(0, 0, f64::NAN);
        let err = m.log_prob(&[1.0, 1.0], None).unwrap_err();
        assert!(err.is_numeric());
        assert!(err.to_string().contains("hidden layer 0"));
    }

    #[test]
    fn zero_conditioner_sample_is_the_noise() {
        let mut m = made(3, &[4], Head::Gaussian, 0, 1);
        m.zero();
        let mut a = Rng::new(77);
        let mut b = Rng::new(77);
        let s = m.sample(&mut a, None).unwrap();
        assert_eq!(s, b.normals(3));
    }

    #[test]
    fn one_dim_gaussian_sample_moments() {
        // μ = 2 and α = log 3 through the output biases.
        let mut m = made(1, &[2], Head::Gaussian, 0, 1);
        m.zero();
        let (_, b) = m.net.layer_params()[1];
        m.store.get_mut(b).data_mut().copy_from_slice(&[2.0, 3.0f64.ln()]);
        let mut rng = Rng::new(2024);
        let n = 100_000;
        let xs: Vec<f64> = (0..n).map(|_| m.sample(&mut rng, None).unwrap()[0]).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!((mean - 2.0).abs() < 0.03, "mean {mean}");
        assert!((var - 9.0).abs() < 0.3, "var {var}");
    }

    #[test]
    fn samples_have_finite_density() {
        let mut m = made(3, &[6], Head::Mixture { components: 3 }, 0, 1);
        randomize(&mut m, 5, 0.3);
        let mut rng = Rng::new(1);
        for _ in 0..10_000 {
            let s = m.sample(&mut rng, None).unwrap();
            assert!(m.log_prob(&s, None).unwrap().is_finite());
        }
    }

    #[test]
    fn parameter_counts_from_masks() {
        // D=3, H=4, L=1 masks hold 6 + 6 ones; the Gaussian head duplicates
        // the output block: 6 + 2·6 = 18.
        let m = made(3, &[4], Head::Gaussian, 0, 1);
        let c = m.count_params();
        assert_eq!(c.weights, 18);
        assert_eq!(c.approx, 1.5 * 3.0 * 4.0);

        let c1 = made(3, &[4], Head::Mixture { components: 1 }, 0, 1).count_params();
        let c10 = made(3, &[4], Head::Mixture { components: 10 }, 0, 1).count_params();
        assert_eq!(c10.weights - c1.weights, 27 * 6);
    }
}
