use crate::conditioner::{Conditioner, Head};
use crate::error::{FlowError, Result};
use crate::masking::Order;
use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{affine_forward, affine_inverse, check_finite, sequential_forward, ShiftScale};

/// Which side the conditioner reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArDirection {
    /// μ, α are functions of preceding data variables: one-pass density,
    /// D-pass sampling.
    Maf,
    /// μ, α are functions of preceding noise variables: one-pass sampling,
    /// D-pass density.
    Iaf,
}

/// Affine autoregressive layer `x_i = u_i·exp(α_i) + μ_i`.
#[derive(Debug, Clone)]
pub struct AffineArLayer {
    conditioner: Conditioner,
    direction: ArDirection,
}

impl AffineArLayer {
    pub fn new(conditioner: Conditioner, direction: ArDirection) -> Result<Self> {
        if conditioner.head() != Head::Gaussian {
            return Err(FlowError::usage("autoregressive layers need a Gaussian-head conditioner"));
        }
        Ok(AffineArLayer { conditioner, direction })
    }

    pub fn conditioner(&self) -> &Conditioner {
        &self.conditioner
    }

    pub fn direction(&self) -> ArDirection {
        self.direction
    }

    pub fn order(&self) -> &Order {
        self.conditioner.order()
    }

    pub fn dim(&self) -> usize {
        self.conditioner.dim()
    }

    pub fn inverse_graph(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Option<Var>) -> Result<(Var, Var)> {
        match self.direction {
            ArDirection::Maf => {
                let (mu, alpha) = self.conditioner.shift_log_scale(tape, vars, x, y)?;
                check_finite(tape, alpha, "autoregressive log-scale")?;
                affine_inverse(tape, x, mu, alpha)
            }
            ArDirection::Iaf => self.iaf_inverse_graph(tape, vars, x, y),
        }
    }

    /// Recover u position by position, each step reading the noise filled in
    /// so far; a final pass supplies the α of the log-determinant.
    fn iaf_inverse_graph(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Option<Var>) -> Result<(Var, Var)> {
        let (n, d) = (tape.value(x).rows(), self.dim());
        let mut u = tape.constant(Tensor::zeros(&[n, d]));
        for &i in self.order().sequence() {
            let (mu, alpha) = self.conditioner.shift_log_scale(tape, vars, u, y)?;
            check_finite(tape, alpha, "autoregressive log-scale")?;
            let xi = tape.gather_cols(x, vec![i])?;
            let mi = tape.gather_cols(mu, vec![i])?;
            let ai = tape.gather_cols(alpha, vec![i])?;
            let (ui, _) = affine_inverse(tape, xi, mi, ai)?;
            let placed = tape.scatter_cols(ui, vec![i], d)?;
            u = tape.add(u, placed)?;
        }
        let (_, alpha) = self.conditioner.shift_log_scale(tape, vars, u, y)?;
        let na = tape.neg(alpha);
        let logdet = tape.sum_cols(na)?;
        Ok((u, logdet))
    }

    pub fn forward(&self, store: &ParamStore, u: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
        match self.direction {
            ArDirection::Maf => sequential_forward(&self.conditioner, self.order(), store, u, y),
            ArDirection::Iaf => {
                let mut tape = Tape::new();
                let vars = store.bind(&mut tape, false);
                let uv = tape.constant(u.clone());
                let yv = y.map(|y| tape.constant(y.clone()));
                let (mu, alpha) = self.conditioner.shift_log_scale(&mut tape, &vars, uv, yv)?;
                check_finite(&tape, alpha, "autoregressive log-scale")?;
                let x = affine_forward(&mut tape, uv, mu, alpha)?;
                Ok(tape.value(x).clone())
            }
        }
    }
}
