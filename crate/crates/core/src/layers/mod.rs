//! Invertible layers.
//!
//! Convention: `x` is the side closer to the data, `u` the side closer to the
//! base density. `inverse` maps x → u and returns `log|det ∂u/∂x|` per row;
//! `forward` maps u → x.

mod autoregressive;
mod batchnorm;
mod coupling;
mod permutation;

pub use autoregressive::{AffineArLayer, ArDirection};
pub use batchnorm::{BatchNormLayer, BnMode, BN_EPS};
pub use coupling::{CouplingLayer, Mlp, Parity};
pub use permutation::PermutationLayer;

use crate::error::Result;
use crate::masking::Order;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Anything that yields full-width `(μ, α)` from the data-side vector while
/// respecting some autoregressive order.
pub trait ShiftScale {
    fn shift_log_scale(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Option<Var>) -> Result<(Var, Var)>;
}

impl ShiftScale for crate::conditioner::Conditioner {
    fn shift_log_scale(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Option<Var>) -> Result<(Var, Var)> {
        self.gaussian(tape, vars, x, y)
    }
}

/// `u = (x − μ) ⊙ exp(−α)` with per-row `log|det| = −Σ α`.
pub(crate) fn affine_inverse(tape: &mut Tape, x: Var, mu: Var, alpha: Var) -> Result<(Var, Var)> {
    let diff = tape.sub(x, mu)?;
    let na = tape.neg(alpha);
    let inv = tape.exp(na);
    let u = tape.mul(diff, inv)?;
    let logdet = tape.sum_cols(na)?;
    Ok((u, logdet))
}

/// `x = u ⊙ exp(α) + μ`.
pub(crate) fn affine_forward(tape: &mut Tape, u: Var, mu: Var, alpha: Var) -> Result<Var> {
    let s = tape.exp(alpha);
    let scaled = tape.mul(u, s)?;
    tape.add(scaled, mu)
}

pub(crate) fn check_finite(tape: &Tape, v: Var, what: &str) -> Result<()> {
    let t = tape.value(v);
    if let Some(bad) = t.data().iter().find(|x| !x.is_finite()) {
        return Err(crate::FlowError::numeric(None, what, format!("non-finite value {bad}")));
    }
    Ok(())
}

/// Generate x from u by the autoregressive recursion: one pass per order
/// position, each filling in the variable at that position.
pub fn sequential_forward<N: ShiftScale + ?Sized>(
    net: &N,
    order: &Order,
    store: &ParamStore,
    u: &Tensor,
    y: Option<&Tensor>,
) -> Result<Tensor> {
    let (n, d) = (u.rows(), u.cols());
    let mut x = Tensor::zeros(&[n, d]);
    for &i in order.sequence() {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let yv = y.map(|y| tape.constant(y.clone()));
        let (mu, alpha) = net.shift_log_scale(&mut tape, &vars, xv, yv)?;
        check_finite(&tape, alpha, "autoregressive log-scale")?;
        let (mu, alpha) = (tape.value(mu), tape.value(alpha));
        for r in 0..n {
            let v = u.get(r, i) * alpha.get(r, i).exp() + mu.get(r, i);
            x.set(r, i, v);
        }
    }
    Ok(x)
}

#[derive(Debug, Clone)]
pub enum Layer {
    Autoregressive(AffineArLayer),
    Coupling(CouplingLayer),
    BatchNorm(BatchNormLayer),
    Permutation(PermutationLayer),
}

impl Layer {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Layer::Autoregressive(l) => match l.direction() {
                ArDirection::Maf => "autoregressive",
                ArDirection::Iaf => "inverse-autoregressive",
            },
            Layer::Coupling(_) => "coupling",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::Permutation(_) => "permutation",
        }
    }

    /// x → u on the tape, returning `(u, logdet[N])`.
    pub fn inverse_graph(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Option<Var>) -> Result<(Var, Var)> {
        match self {
            Layer::Autoregressive(l) => l.inverse_graph(tape, vars, x, y),
            Layer::Coupling(l) => l.inverse_graph(tape, vars, x, y),
            Layer::BatchNorm(l) => l.inverse_graph(tape, vars, x),
            Layer::Permutation(l) => l.inverse_graph(tape, x),
        }
    }

    pub fn inverse(&self, store: &ParamStore, x: &Tensor, y: Option<&Tensor>) -> Result<(Tensor, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let yv = y.map(|y| tape.constant(y.clone()));
        let (u, ld) = self.inverse_graph(&mut tape, &vars, xv, yv)?;
        Ok((tape.value(u).clone(), tape.value(ld).data().to_vec()))
    }

    pub fn forward(&self, store: &ParamStore, u: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
        match self {
            Layer::Autoregressive(l) => l.forward(store, u, y),
            Layer::Coupling(l) => l.forward(store, u, y),
            Layer::BatchNorm(l) => l.forward(store, u),
            Layer::Permutation(l) => l.forward(u),
        }
    }
}
