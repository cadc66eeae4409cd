//! Flow models: a list of invertible layers over a base density.
//!
//! The layer list runs from the data side to the base side. `log_prob` walks
//! it in order through each layer's inverse and adds the base log-density;
//! `sample` walks it backwards through the forwards.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::conditioner::{Activation, Conditioner, Head};
use crate::error::{FlowError, Result};
use crate::layers::{AffineArLayer, ArDirection, BatchNormLayer, BnMode, CouplingLayer, Layer, Parity};
use crate::masking::{build_masks, reverse_order, DegreeAssignment, Order};
use crate::params::{ParamKind, ParamStore};
use crate::rng::{Rng, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{Tensor, LN_2PI};

const EVAL_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Family {
    Made,
    MadeMog,
    RealNvp,
    Maf,
    MafMog,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Made, Family::MadeMog, Family::RealNvp, Family::Maf, Family::MafMog];

    pub fn name(self) -> &'static str {
        match self {
            Family::Made => "made",
            Family::MadeMog => "made_mog",
            Family::RealNvp => "realnvp",
            Family::Maf => "maf",
            Family::MafMog => "maf_mog",
        }
    }

    pub fn is_mixture(self) -> bool {
        matches!(self, Family::MadeMog | Family::MafMog)
    }

    pub fn is_flow(self) -> bool {
        matches!(self, Family::RealNvp | Family::Maf | Family::MafMog)
    }

    /// Default Adam step size for this family.
    pub fn default_step_size(self) -> f64 {
        match self {
            Family::Made | Family::MadeMog => 1e-3,
            _ => 1e-4,
        }
    }

    pub fn code(self) -> u8 {
        Family::ALL.iter().position(|&f| f == self).unwrap() as u8
    }

    pub fn from_code(c: u8) -> Result<Self> {
        Family::ALL
            .get(c as usize)
            .copied()
            .ok_or_else(|| FlowError::Format(format!("unknown model family code {c}")))
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        Family::ALL.iter().copied().find(|f| f.name() == s).ok_or_else(|| FlowError::Config {
            key: "model.family".into(),
            message: format!("unknown value `{s}`; allowed: made, made_mog, realnvp, maf, maf_mog"),
        })
    }
}

/// Everything needed to rebuild a model's architecture and initial weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub dim: usize,
    /// Number of flow layers K; ignored by the MADE families.
    pub flow_layers: usize,
    /// Hidden layer widths, one entry per hidden layer.
    pub hidden: Vec<usize>,
    /// Mixture components C; ignored by Gaussian families.
    pub components: usize,
    pub cond_width: usize,
    pub activation: Activation,
    pub assignment: DegreeAssignment,
    pub batch_norm: bool,
    /// Order of the first autoregressive layer (or of the MADE itself).
    pub order: Order,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(family: Family, dim: usize) -> Self {
        ModelSpec {
            family,
            dim,
            flow_layers: 5,
            hidden: vec![100, 100],
            components: 10,
            cond_width: 0,
            activation: Activation::Relu,
            assignment: DegreeAssignment::Sequential,
            batch_norm: family.is_flow(),
            order: Order::identity(dim),
            seed: 0,
        }
    }

    pub fn layers(mut self, k: usize) -> Self {
        self.flow_layers = k;
        self
    }

    pub fn hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn components(mut self, c: usize) -> Self {
        self.components = c;
        self
    }

    pub fn cond_width(mut self, w: usize) -> Self {
        self.cond_width = w;
        self
    }

    pub fn activation(mut self, a: Activation) -> Self {
        self.activation = a;
        self
    }

    pub fn batch_norm(mut self, on: bool) -> Self {
        self.batch_norm = on;
        self
    }

    pub fn order(mut self, order: Order) -> Self {
        self.order = order;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Closed-form weight-count approximation for this architecture.
    pub fn approx_params(&self) -> f64 {
        let d = self.dim as f64;
        let l = self.hidden.len() as f64;
        let h = self.hidden.first().copied().unwrap_or(0) as f64;
        let k = self.flow_layers as f64;
        let c = self.components as f64;
        let made = 1.5 * d * h + 0.5 * (l - 1.0) * h * h;
        let mog = (c + 0.5) * d * h + 0.5 * (l - 1.0) * h * h;
        match self.family {
            Family::Made => made,
            Family::MadeMog => mog,
            Family::RealNvp => 2.0 * k * d * h + 2.0 * k * (l - 1.0) * h * h,
            Family::Maf => k * made,
            Family::MafMog => k * made + mog,
        }
    }
}

/// Density at the base-side end of the layer list.
#[derive(Debug, Clone)]
pub enum Base {
    StandardGaussian,
    /// An autoregressive conditioner (Gaussian or mixture head) used directly
    /// as a density.
    Made(Conditioner),
}

/// Exact unmasked parameter counts plus the closed-form weight approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParamCount {
    pub weights: usize,
    pub biases: usize,
    pub norm: usize,
    pub approx: f64,
}

/// Tape handles produced by one density evaluation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Per-row log-density `[N]`.
    pub log_prob: Var,
    /// Per-row base-side output `[N × D]`.
    pub u: Var,
    /// Inputs reaching each batch-norm layer, keyed by layer index.
    pub bn_inputs: Vec<(usize, Var)>,
}

#[derive(Debug, Clone)]
pub struct FlowModel {
    spec: ModelSpec,
    pub store: ParamStore,
    layers: Vec<Layer>,
    base: Base,
}

impl FlowModel {
    pub fn new(spec: ModelSpec) -> Result<Self> {
        let d = spec.dim;
        if d == 0 {
            return Err(FlowError::usage("data dimension must be at least 1"));
        }
        if spec.order.len() != d {
            return Err(FlowError::dim("model", format!("order of length {} for D={d}", spec.order.len())));
        }
        if spec.hidden.is_empty() || spec.hidden.contains(&0) {
            return Err(FlowError::usage("models need at least one non-empty hidden layer"));
        }
        if spec.family.is_mixture() && spec.components == 0 {
            return Err(FlowError::usage("mixture models need at least one component"));
        }
        let mut store = ParamStore::new();
        let mut rng = Rng::stream(spec.seed, Stream::WeightInit);
        let mut layers = Vec::new();
        let mut order = spec.order.clone();
        let made = |order: &Order, head: Head, k: usize, store: &mut ParamStore, rng: &mut Rng, name: &str| {
            let masks = build_masks(d, &spec.hidden, order, spec.assignment, spec.cond_width, spec.seed.wrapping_add(k as u64))?;
            Conditioner::new(masks, spec.activation, head, store, rng, name)
        };
        match spec.family {
            Family::Made | Family::MadeMog => {}
            Family::Maf | Family::MafMog => {
                for k in 0..spec.flow_layers {
                    let c = made(&order, Head::Gaussian, k, &mut store, &mut rng, &format!("maf{k}"))?;
                    layers.push(Layer::Autoregressive(AffineArLayer::new(c, ArDirection::Maf)?));
                    if spec.batch_norm {
                        layers.push(Layer::BatchNorm(BatchNormLayer::new(d, &mut store, &format!("bn{k}"))));
                    }
                    order = reverse_order(&order);
                }
            }
            Family::RealNvp => {
                let mut parity = Parity::CopyOdd;
                for k in 0..spec.flow_layers {
                    let name = format!("nvp{k}");
                    let c = CouplingLayer::new(d, parity, &spec.hidden, spec.cond_width, &mut store, &mut rng, &name)?;
                    layers.push(Layer::Coupling(c));
                    if spec.batch_norm {
                        layers.push(Layer::BatchNorm(BatchNormLayer::new(d, &mut store, &format!("bn{k}"))));
                    }
                    parity = parity.flipped();
                }
            }
        }
        let head = Head::Mixture { components: spec.components };
        let base = match spec.family {
            Family::Made => Base::Made(made(&order, Head::Gaussian, 0, &mut store, &mut rng, "made")?),
            Family::MadeMog => Base::Made(made(&order, head, 0, &mut store, &mut rng, "made")?),
            Family::MafMog => {
                let k = spec.flow_layers;
                Base::Made(made(&order, head, k, &mut store, &mut rng, "base")?)
            }
            Family::Maf | Family::RealNvp => Base::StandardGaussian,
        };
        Ok(FlowModel { spec, store, layers, base })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn cond_width(&self) -> usize {
        self.spec.cond_width
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn base(&self) -> &Base {
        &self.base
    }

    pub fn has_batch_norm(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(_)))
    }

    pub fn batch_norms_mut(&mut self) -> impl Iterator<Item = &mut BatchNormLayer> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b),
            _ => None,
        })
    }

    pub fn set_bn_mode(&mut self, mode: BnMode) {
        self.batch_norms_mut().for_each(|b| b.set_mode(mode));
    }

    fn check_input(&self, x: &Tensor, y: Option<&Tensor>) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.dim() {
            return Err(FlowError::dim("model input", format!("data has shape {:?}, model D={}", x.shape(), self.dim())));
        }
        match (y, self.cond_width()) {
            (None, 0) => Ok(()),
            (None, w) => Err(FlowError::usage(format!("model is conditional on {w} label inputs; none given"))),
            (Some(_), 0) => Err(FlowError::usage("labels given to an unconditional model")),
            (Some(y), w) if y.cols() != w || y.rows() != x.rows() => {
                Err(FlowError::dim("labels", format!("shape {:?}, expected [{} × {w}]", y.shape(), x.rows())))
            }
            _ => Ok(()),
        }
    }

    /// Record the full density evaluation of `x` on `tape`.
    pub fn trace(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Option<Var>) -> Result<Trace> {
        let n = tape.value(x).rows();
        let mut h = x;
        let mut total: Option<Var> = None;
        let mut bn_inputs = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::BatchNorm(_)) {
                bn_inputs.push((i, h));
            }
            let (u, ld) = layer.inverse_graph(tape, vars, h, y).map_err(|e| e.at_layer(i))?;
            if !tape.value(u).all_finite() || !tape.value(ld).all_finite() {
                return Err(FlowError::numeric(Some(i), layer.kind_name(), "non-finite output"));
            }
            total = Some(match total {
                Some(t) => tape.add(t, ld)?,
                None => ld,
            });
            h = u;
        }
        let base_index = self.layers.len();
        let base = match &self.base {
            Base::StandardGaussian => {
                let sq = tape.square(h);
                let t = tape.scale(sq, -0.5);
                let t = tape.add_const(t, -0.5 * LN_2PI);
                tape.sum_cols(t)?
            }
            Base::Made(c) => c.log_prob_rows(tape, vars, h, y).map_err(|e| e.at_layer(base_index))?,
        };
        if !tape.value(base).all_finite() {
            return Err(FlowError::numeric(Some(base_index), "base density", "non-finite log-density"));
        }
        let log_prob = match total {
            Some(t) => tape.add(base, t)?,
            None => base,
        };
        debug_assert_eq!(tape.value(log_prob).len(), n);
        Ok(Trace { log_prob, u: h, bn_inputs })
    }

    fn eval_chunk(&self, x: &Tensor, y: Option<&Tensor>) -> Result<(Vec<f64>, Tensor)> {
        let mut tape = Tape::new();
        let vars = self.store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let yv = y.map(|y| tape.constant(y.clone()));
        let tr = self.trace(&mut tape, &vars, xv, yv)?;
        Ok((tape.value(tr.log_prob).data().to_vec(), tape.value(tr.u).clone()))
    }

    fn chunked(&self, x: &Tensor, y: Option<&Tensor>) -> Result<(Vec<f64>, Tensor)> {
        self.check_input(x, y)?;
        let n = x.rows();
        let train_bn = self.layers.iter().any(|l| matches!(l, Layer::BatchNorm(b) if b.mode() == BnMode::Train));
        if train_bn || n <= EVAL_CHUNK {
            return self.eval_chunk(x, y);
        }
        let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
        let parts: Vec<(Vec<f64>, Tensor)> = starts
            .par_iter()
            .map(|&s| {
                let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(n)).collect();
                let yc = y.map(|y| y.select_rows(&idx));
                self.eval_chunk(&x.select_rows(&idx), yc.as_ref())
            })
            .collect::<Result<_>>()?;
        let mut lp = Vec::with_capacity(n);
        let mut u = Vec::with_capacity(n * self.dim());
        for (l, t) in parts {
            lp.extend(l);
            u.extend(t.into_data());
        }
        Ok((lp, Tensor::matrix(n, self.dim(), u)?))
    }

    /// Per-row log-density of `x[N × D]`.
    pub fn log_prob_batch(&self, x: &Tensor, y: Option<&Tensor>) -> Result<Vec<f64>> {
        Ok(self.chunked(x, y)?.0)
    }

    pub fn log_prob(&self, x: &[f64], y: Option<&[f64]>) -> Result<f64> {
        let yt = y.map(|y| Tensor::row(y.to_vec()));
        Ok(self.log_prob_batch(&Tensor::row(x.to_vec()), yt.as_ref())?[0])
    }

    /// Data → base-side output of the layer list (before the base density).
    pub fn inverse(&self, x: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.chunked(x, y)?.1)
    }

    /// Base-side vectors → data through each layer's forward.
    pub fn forward(&self, u: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
        self.check_input(u, y)?;
        let mut h = u.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            h = layer.forward(&self.store, &h, y).map_err(|e| e.at_layer(i))?;
        }
        Ok(h)
    }

    /// `n` draws; `y` holds one label row per draw when conditional.
    pub fn sample_n(&self, n: usize, rng: &mut Rng, y: Option<&Tensor>) -> Result<Tensor> {
        let d = self.dim();
        if let Some(y) = y {
            if y.rows() != n {
                return Err(FlowError::dim("sample labels", format!("{} label rows for {n} samples", y.rows())));
            }
        }
        let u = match &self.base {
            Base::StandardGaussian => Tensor::matrix(n, d, rng.normals(n * d))?,
            Base::Made(c) => {
                let mut data = Vec::with_capacity(n * d);
                for r in 0..n {
                    let yr = y.map(|y| y.row_slice(r));
                    data.extend(c.sample(&self.store, rng, yr).map_err(|e| e.at_layer(self.layers.len()))?);
                }
                Tensor::matrix(n, d, data)?
            }
        };
        self.forward(&u, y)
    }

    pub fn sample(&self, rng: &mut Rng, y: Option<&[f64]>) -> Result<Vec<f64>> {
        let yt = y.map(|y| Tensor::row(y.to_vec()));
        Ok(self.sample_n(1, rng, yt.as_ref())?.into_data())
    }

    /// Freeze every batch-norm layer to the statistics of the training data
    /// at its depth, front to back, and switch them to eval mode.
    pub fn finalize_batch_norm(&mut self, train: &Tensor, y: Option<&Tensor>) -> Result<()> {
        self.check_input(train, y)?;
        let mut h = train.clone();
        for i in 0..self.layers.len() {
            if let Layer::BatchNorm(b) = &mut self.layers[i] {
                b.finalize(&h).map_err(|e| e.at_layer(i))?;
            }
            let layer = &self.layers[i];
            h = chunked_layer_inverse(layer, &self.store, &h, y).map_err(|e| e.at_layer(i))?;
        }
        Ok(())
    }

    pub fn count_params(&self) -> ModelParamCount {
        ModelParamCount {
            weights: self.store.effective_count(ParamKind::Weight),
            biases: self.store.effective_count(ParamKind::Bias),
            norm: self.store.effective_count(ParamKind::Norm),
            approx: self.spec.approx_params(),
        }
    }

    /// Per-sample sides of the MAF↔IAF identity. With `u = f⁻¹(x)`:
    /// `lhs = log π_x(x) − log p_x(x)` and
    /// `rhs = log p_u(u) − log π_u(u)`, where `log p_u(u)` is evaluated at
    /// `x' = f(u)` as `log π_x(x') + log|det ∂f/∂u|`.
    pub fn kl_identity_check(&self, log_target: &dyn Fn(&[f64]) -> f64, xs: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        let (log_px, u) = self.chunked(xs, None)?;
        let base = self.base_log_prob(&u)?;
        let x_back = self.forward(&u, None)?;
        let (log_px_back, _) = self.chunked(&x_back, None)?;
        let base_back = self.base_log_prob(&u)?;
        let mut lhs = Vec::with_capacity(xs.rows());
        let mut rhs = Vec::with_capacity(xs.rows());
        for r in 0..xs.rows() {
            lhs.push(log_target(xs.row_slice(r)) - log_px[r]);
            // log|det ∂f/∂u| = −log|det ∂f⁻¹/∂x| at x' = f(u).
            let logdet_fwd = base_back[r] - log_px_back[r];
            let log_pu = log_target(x_back.row_slice(r)) + logdet_fwd;
            rhs.push(log_pu - base[r]);
        }
        Ok((lhs, rhs))
    }

    /// Base log-density of base-side vectors.
    pub fn base_log_prob(&self, u: &Tensor) -> Result<Vec<f64>> {
        match &self.base {
            Base::StandardGaussian => Ok((0..u.rows())
                .map(|r| u.row_slice(r).iter().map(|v| -0.5 * LN_2PI - 0.5 * v * v).sum())
                .collect()),
            Base::Made(c) => {
                let mut tape = Tape::new();
                let vars = self.store.bind(&mut tape, false);
                let uv = tape.constant(u.clone());
                let lp = c.log_prob_rows(&mut tape, &vars, uv, None)?;
                Ok(tape.value(lp).data().to_vec())
            }
        }
    }
}

fn chunked_layer_inverse(layer: &Layer, store: &ParamStore, x: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
    let n = x.rows();
    let starts: Vec<usize> = (0..n).step_by(EVAL_CHUNK).collect();
    let parts: Vec<Tensor> = starts
        .par_iter()
        .map(|&s| {
            let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(n)).collect();
            let yc = y.map(|y| y.select_rows(&idx));
            layer.inverse(store, &x.select_rows(&idx), yc.as_ref()).map(|r| r.0)
        })
        .collect::<Result<_>>()?;
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::matrix(n, x.cols(), data)
}
