use crate::error::{FlowError, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Statistics come from the batch being transformed.
    Train,
    /// Statistics are the stored `m`, `v`.
    Eval,
}

/// Batch normalization as an invertible elementwise affine map:
/// `u = (x − m) ⊙ (v + ε)^{−½} ⊙ exp(γ) + β`.
#[derive(Debug, Clone)]
pub struct BatchNormLayer {
    dim: usize,
    beta: ParamId,
    gamma: ParamId,
    mean: Option<Tensor>,
    var: Option<Tensor>,
    mode: BnMode,
}

/// Column mean and biased variance.
pub fn column_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (n, d) = (x.rows(), x.cols());
    if n == 0 {
        return Err(FlowError::usage("batch-norm statistics of empty data"));
    }
    let mut m = vec![0.0; d];
    for r in 0..n {
        for (j, v) in x.row_slice(r).iter().enumerate() {
            m[j] += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    let mut s = vec![0.0; d];
    for r in 0..n {
        for (j, v) in x.row_slice(r).iter().enumerate() {
            s[j] += (v - m[j]) * (v - m[j]);
        }
    }
    s.iter_mut().for_each(|v| *v /= n as f64);
    Ok((Tensor::vector(m), Tensor::vector(s)))
}

impl BatchNormLayer {
    pub fn new(dim: usize, store: &mut ParamStore, name: &str) -> Self {
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[dim]), ParamKind::Norm, None);
        let gamma = store.add(format!("{name}.gamma"), Tensor::zeros(&[dim]), ParamKind::Norm, None);
        BatchNormLayer { dim, beta, gamma, mean: None, var: None, mode: BnMode::Train }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn beta(&self) -> ParamId {
        self.beta
    }

    pub fn gamma(&self) -> ParamId {
        self.gamma
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
    }

    pub fn stats(&self) -> Option<(&Tensor, &Tensor)> {
        Some((self.mean.as_ref()?, self.var.as_ref()?))
    }

    pub fn set_stats(&mut self, mean: Tensor, var: Tensor) -> Result<()> {
        if mean.len() != self.dim || var.len() != self.dim {
            return Err(FlowError::dim("batch-norm statistics", format!("{} / {} for D={}", mean.len(), var.len(), self.dim)));
        }
        if var.data().iter().any(|&v| v < 0.0 || !v.is_finite()) || !mean.all_finite() {
            return Err(FlowError::numeric(None, "batch-norm statistics", "negative or non-finite variance"));
        }
        self.mean = Some(mean.reshape(&[self.dim])?);
        self.var = Some(var.reshape(&[self.dim])?);
        Ok(())
    }

    /// Freeze statistics to those of `x` (the inputs reaching this layer) and
    /// switch to eval mode.
    pub fn finalize(&mut self, x: &Tensor) -> Result<()> {
        if x.ndim() != 2 || x.cols() != self.dim {
            return Err(FlowError::dim("batch-norm finalize", format!("{:?}, expected D={}", x.shape(), self.dim)));
        }
        let (m, v) = column_stats(x)?;
        self.set_stats(m, v)?;
        self.mode = BnMode::Eval;
        Ok(())
    }

    fn stored(&self) -> Result<(&Tensor, &Tensor)> {
        self.stats()
            .ok_or_else(|| FlowError::usage("batch-norm layer has no stored statistics; finalize it first"))
    }

    pub fn inverse_graph(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<(Var, Var)> {
        let t = tape.value(x);
        if t.ndim() != 2 || t.cols() != self.dim {
            return Err(FlowError::dim("batch-norm", format!("input {:?}, expected D={}", t.shape(), self.dim)));
        }
        let n = t.rows();
        let (centered, log_inv_std, inv_std) = match self.mode {
            BnMode::Train => {
                if n < 2 {
                    return Err(FlowError::usage(format!("batch-norm in train mode needs N ≥ 2 rows, got {n}")));
                }
                let m = tape.col_mean(x)?;
                let nm = tape.neg(m);
                let c = tape.add_row(x, nm)?;
                let sq = tape.square(c);
                let v = tape.col_mean(sq)?;
                let ve = tape.add_const(v, BN_EPS);
                let lv = tape.log(ve);
                let liv = tape.scale(lv, -0.5);
                let iv = tape.exp(liv);
                (c, liv, iv)
            }
            BnMode::Eval => {
                let (m, v) = self.stored()?;
                let nm = tape.constant(m.map(|a| -a));
                let lv = v.map(|a| -0.5 * (a + BN_EPS).ln());
                let iv = tape.constant(v.map(|a| (a + BN_EPS).powf(-0.5)));
                let c = tape.add_row(x, nm)?;
                (c, tape.constant(lv), iv)
            }
        };
        let (beta, gamma) = (vars[self.beta.0], vars[self.gamma.0]);
        let eg = tape.exp(gamma);
        let scale = tape.mul(inv_std, eg)?;
        let z = tape.mul_row(centered, scale)?;
        let u = tape.add_row(z, beta)?;
        let per_dim = tape.add(gamma, log_inv_std)?;
        let total = tape.sum(per_dim);
        let logdet = tape.expand(total, n)?;
        Ok((u, logdet))
    }

    /// `x = (u − β) ⊙ exp(−γ) ⊙ (v + ε)^{½} + m`, always with stored statistics.
    pub fn forward(&self, store: &ParamStore, u: &Tensor) -> Result<Tensor> {
        let (m, v) = self.stored()?;
        if u.ndim() != 2 || u.cols() != self.dim {
            return Err(FlowError::dim("batch-norm", format!("input {:?}, expected D={}", u.shape(), self.dim)));
        }
        let (beta, gamma) = (store.get(self.beta).data(), store.get(self.gamma).data());
        let mut x = u.clone();
        let d = self.dim;
        for (k, val) in x.data_mut().iter_mut().enumerate() {
            let j = k % d;
            *val = (*val - beta[j]) * (-gamma[j]).exp() * (v.data()[j] + BN_EPS).sqrt() + m.data()[j];
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{jacobian, log_abs_det, randomize};
    use crate::layers::Layer;
    use crate::rng::Rng;

    fn unit(d: usize, store: &mut ParamStore) -> BatchNormLayer {
        let mut bn = BatchNormLayer::new(d, store, "bn");
        bn.set_stats(Tensor::zeros(&[d]), Tensor::full(&[d], 1.0 - BN_EPS)).unwrap();
        bn.set_mode(BnMode::Eval);
        bn
    }

    #[test]
    fn unit_variance_fixed_point() {
        let mut store = ParamStore::new();
        let l = Layer::BatchNorm(unit(3, &mut store));
        let x = Tensor::row(vec![0.5, -1.0, 2.0]);
        let (u, ld) = l.inverse(&store, &x, None).unwrap();
        assert!(u.max_abs_diff(&x) < 1e-15);
        assert!(ld[0].abs() < 1e-15);
    }

    #[test]
    fn logdet_ignores_beta_and_mean() {
        let mut store = ParamStore::new();
        let mut bn = unit(2, &mut store);
        bn.set_stats(Tensor::vector(vec![3.0, -7.0]), Tensor::full(&[2], 1.0 - BN_EPS)).unwrap();
        store.get_mut(bn.beta()).data_mut().copy_from_slice(&[1.5, -0.3]);
        let (_, ld) = Layer::BatchNorm(bn).inverse(&store, &Tensor::row(vec![0.0, 1.0]), None).unwrap();
        assert!(ld[0].abs() < 1e-15);
    }

    #[test]
    fn round_trip_and_diagonal_jacobian() {
        for seed in 0..20 {
            let mut store = ParamStore::new();
            let mut bn = BatchNormLayer::new(4, &mut store, "bn");
            randomize(&mut store, seed, 0.5);
            let mut rng = Rng::new(seed + 1000);
            let m = Tensor::vector(rng.normals(4));
            let v = Tensor::vector((0..4).map(|_| rng.uniform_range(0.1, 3.0)).collect());
            bn.set_stats(m, v).unwrap();
            bn.set_mode(BnMode::Eval);
            let l = Layer::BatchNorm(bn);
            let x = Tensor::row(rng.normals(4));
            let (u, ld) = l.inverse(&store, &x, None).unwrap();
            assert!(l.forward(&store, &u, None).unwrap().max_abs_diff(&x) < 1e-10);
            let f = |p: &[f64]| l.inverse(&store, &Tensor::row(p.to_vec()), None).unwrap().0.into_data();
            let jac = jacobian(&f, x.data(), 1e-5);
            for (i, row) in jac.iter().enumerate() {
                for (j, &e) in row.iter().enumerate() {
                    if i != j {
                        assert_eq!(e, 0.0);
                    }
                }
            }
            assert!((log_abs_det(jac) - ld[0]).abs() < 1e-8);
        }
    }

    #[test]
    fn train_mode_uses_batch_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNormLayer::new(2, &mut store, "bn");
        let x = Tensor::from_rows(&[vec![1.0, 10.0], vec![3.0, 14.0], vec![5.0, 12.0]]).unwrap();
        let (u, ld) = Layer::BatchNorm(bn.clone()).inverse(&store, &x, None).unwrap();
        let (m, v) = column_stats(&x).unwrap();
        assert_eq!(m.data(), &[3.0, 12.0]);
        assert!((v.data()[0] - 8.0 / 3.0).abs() < 1e-15);
        let expect = (1.0 - 3.0) / (8.0 / 3.0 + BN_EPS).sqrt();
        assert!((u.get(0, 0) - expect).abs() < 1e-14);
        let want = -0.5 * ((8.0 / 3.0 + BN_EPS).ln() + (8.0 / 3.0 + BN_EPS).ln());
        assert!(ld.iter().all(|&l| (l - want).abs() < 1e-14));

        let one = Tensor::row(vec![1.0, 2.0]);
        assert!(matches!(Layer::BatchNorm(bn).inverse(&store, &one, None), Err(FlowError::Usage(_))));
    }

    #[test]
    fn finalize_rules() {
        let mut store = ParamStore::new();
        let mut bn = BatchNormLayer::new(2, &mut store, "bn");
        assert!(bn.forward(&store, &Tensor::row(vec![0.0, 0.0])).is_err());
        assert!(bn.finalize(&Tensor::zeros(&[0, 2])).is_err());

        let same = Tensor::from_rows(&vec![vec![1.0, -2.0]; 5]).unwrap();
        bn.finalize(&same).unwrap();
        assert_eq!(bn.mode(), BnMode::Eval);
        assert_eq!(bn.stats().unwrap().1.data(), &[0.0, 0.0]);
        let (u, ld) = Layer::BatchNorm(bn.clone()).inverse(&store, &same, None).unwrap();
        assert!(u.all_finite() && ld.iter().all(|v| v.is_finite()));

        let mut rng = Rng::new(4);
        let n = 20_000;
        let data = Tensor::matrix(n, 2, rng.normals(2 * n)).unwrap();
        bn.finalize(&data).unwrap();
        let first = bn.stats().map(|(m, v)| (m.clone(), v.clone())).unwrap();
        for j in 0..2 {
            assert!(first.0.data()[j].abs() < 4.0 / (n as f64).sqrt());
            assert!((first.1.data()[j] - 1.0).abs() < 0.05);
        }
        bn.finalize(&data).unwrap();
        assert_eq!(bn.stats().unwrap().0, &first.0);
        assert_eq!(bn.stats().unwrap().1, &first.1);
    }
}
