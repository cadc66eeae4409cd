use crate::error::{FlowError, Result};
use crate::masking::Order;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Reorders variables: `u_k = x_{order[k]}`.
#[derive(Debug, Clone)]
pub struct PermutationLayer {
    order: Order,
}

impl PermutationLayer {
    pub fn new(order: Order) -> Self {
        PermutationLayer { order }
    }

    pub fn order(&self) -> &Order {
        &self.order
    }

    pub fn dim(&self) -> usize {
        self.order.len()
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.ndim() != 2 || t.cols() != self.dim() {
            return Err(FlowError::dim("permutation", format!("input {:?}, expected D={}", t.shape(), self.dim())));
        }
        Ok(())
    }

    pub fn inverse_graph(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        self.check(tape.value(x))?;
        let n = tape.value(x).rows();
        let u = tape.gather_cols(x, self.order.sequence().to_vec())?;
        let logdet = tape.constant(Tensor::zeros(&[n]));
        Ok((u, logdet))
    }

    pub fn forward(&self, u: &Tensor) -> Result<Tensor> {
        self.check(u)?;
        let seq = self.order.sequence();
        let mut x = Tensor::zeros(u.shape());
        for r in 0..u.rows() {
            for (k, &i) in seq.iter().enumerate() {
                x.set(r, i, u.get(r, k));
            }
        }
        Ok(x)
    }
}
