use crate::conditioner::{init_masked_weight, Activation};
use crate::error::{FlowError, Result};
use crate::params::{ParamId, ParamKind, ParamStore};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{affine_forward, affine_inverse, check_finite, ShiftScale};

/// Plain fully connected network.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    activation: Activation,
}

impl Mlp {
    pub fn new(
        input: usize,
        hidden: &[usize],
        output: usize,
        activation: Activation,
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
    ) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(output);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let weight = init_masked_weight(&Tensor::ones(&[w[0], w[1]]), rng);
                let wid = store.add(format!("{name}.w{k}"), weight, ParamKind::Weight, None);
                let bid = store.add(format!("{name}.b{k}"), Tensor::zeros(&[w[1]]), ParamKind::Bias, None);
                (wid, bid)
            })
            .collect();
        Mlp { layers, activation }
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layer_params(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    pub fn apply(&self, tape: &mut Tape, vars: &[Var], input: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        let mut h = input;
        for (k, &(w, b)) in self.layers.iter().enumerate() {
            let z = tape.matmul(h, vars[w.0])?;
            let z = tape.add_row(z, vars[b.0])?;
            h = if k == last { z } else { self.activation.apply(tape, z) };
        }
        Ok(h)
    }

    pub fn weight_count(&self, store: &ParamStore) -> usize {
        self.layers.iter().map(|&(w, _)| store.get(w).len()).sum()
    }

    pub fn bias_count(&self, store: &ParamStore) -> usize {
        self.layers.iter().map(|&(_, b)| store.get(b).len()).sum()
    }
}

/// Which half of the variables a coupling layer copies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Parity {
    /// Copies x₁, x₃, x₅, … (0-based indices 0, 2, 4, …).
    CopyOdd,
    /// Copies x₂, x₄, ….
    CopyEven,
}

impl Parity {
    pub fn flipped(self) -> Parity {
        match self {
            Parity::CopyOdd => Parity::CopyEven,
            Parity::CopyEven => Parity::CopyOdd,
        }
    }

    pub fn copied(self, d: usize) -> Vec<usize> {
        let start = match self {
            Parity::CopyOdd => 0,
            Parity::CopyEven => 1,
        };
        (start..d).step_by(2).collect()
    }
}

/// Real NVP affine coupling: copied variables pass through, the rest are
/// scaled and shifted by functions of the copied ones.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    dim: usize,
    copied: Vec<usize>,
    transformed: Vec<usize>,
    cond_width: usize,
    scale_net: Mlp,
    shift_net: Mlp,
}

impl CouplingLayer {
    pub fn new(
        dim: usize,
        parity: Parity,
        hidden: &[usize],
        cond_width: usize,
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
    ) -> Result<Self> {
        Self::with_copied(dim, parity.copied(dim), hidden, cond_width, store, rng, name)
    }

    pub fn with_copied(
        dim: usize,
        mut copied: Vec<usize>,
        hidden: &[usize],
        cond_width: usize,
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
    ) -> Result<Self> {
        copied.sort_unstable();
        copied.dedup();
        if copied.iter().any(|&i| i >= dim) {
            return Err(FlowError::usage(format!("coupling copy index out of range for D={dim}")));
        }
        if copied.is_empty() || copied.len() >= dim {
            return Err(FlowError::usage(format!(
                "coupling split d={} must satisfy 1 ≤ d < D={dim}",
                copied.len()
            )));
        }
        if hidden.is_empty() {
            return Err(FlowError::usage("coupling nets need at least one hidden layer"));
        }
        let transformed: Vec<usize> = (0..dim).filter(|i| copied.binary_search(i).is_err()).collect();
        let (n_in, n_out) = (copied.len() + cond_width, transformed.len());
        let scale_net = Mlp::new(n_in, hidden, n_out, Activation::Tanh, store, rng, &format!("{name}.scale"));
        let shift_net = Mlp::new(n_in, hidden, n_out, Activation::Relu, store, rng, &format!("{name}.shift"));
        Ok(CouplingLayer { dim, copied, transformed, cond_width, scale_net, shift_net })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn cond_width(&self) -> usize {
        self.cond_width
    }

    pub fn copied(&self) -> &[usize] {
        &self.copied
    }

    pub fn transformed(&self) -> &[usize] {
        &self.transformed
    }

    pub fn scale_net(&self) -> &Mlp {
        &self.scale_net
    }

    pub fn shift_net(&self) -> &Mlp {
        &self.shift_net
    }

    pub fn inverse_graph(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Option<Var>) -> Result<(Var, Var)> {
        let (mu, alpha) = self.shift_log_scale(tape, vars, x, y)?;
        affine_inverse(tape, x, mu, alpha)
    }

    pub fn forward(&self, store: &ParamStore, u: &Tensor, y: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = store.bind(&mut tape, false);
        let uv = tape.constant(u.clone());
        let yv = y.map(|y| tape.constant(y.clone()));
        // The copied block is identical on both sides.
        let (mu, alpha) = self.shift_log_scale(&mut tape, &vars, uv, yv)?;
        let x = affine_forward(&mut tape, uv, mu, alpha)?;
        Ok(tape.value(x).clone())
    }
}

impl ShiftScale for CouplingLayer {
    /// Full-width `(μ, α)`, zero on the copied variables.
    fn shift_log_scale(&self, tape: &mut Tape, vars: &[Var], x: Var, y: Option<Var>) -> Result<(Var, Var)> {
        let t = tape.value(x);
        if t.ndim() != 2 || t.cols() != self.dim {
            return Err(FlowError::dim("coupling", format!("input {:?}, expected D={}", t.shape(), self.dim)));
        }
        let rows = t.rows();
        match (y, self.cond_width) {
            (None, 0) => {}
            (None, w) => return Err(FlowError::usage(format!("coupling layer expects {w} label inputs, none given"))),
            (Some(_), 0) => return Err(FlowError::usage("label inputs given to an unconditional coupling layer")),
            (Some(y), w) => {
                let ty = tape.value(y);
                if ty.cols() != w || ty.rows() != rows {
                    return Err(FlowError::dim("coupling", format!("labels {:?}, expected [{rows} × {w}]", ty.shape())));
                }
            }
        }
        let mut input = tape.gather_cols(x, self.copied.clone())?;
        if let Some(y) = y {
            input = tape.concat_cols(input, y)?;
        }
        let alpha = self.scale_net.apply(tape, vars, input)?;
        check_finite(tape, alpha, "coupling scale net")?;
        let mu = self.shift_net.apply(tape, vars, input)?;
        check_finite(tape, mu, "coupling shift net")?;
        let alpha = tape.scatter_cols(alpha, self.transformed.clone(), self.dim)?;
        let mu = tape.scatter_cols(mu, self.transformed.clone(), self.dim)?;
        Ok((mu, alpha))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::testutil::{jacobian, log_abs_det, randomize};
    use crate::layers::{sequential_forward, Layer};
    use crate::masking::Order;

    fn coupling(dim: usize, copied: Vec<usize>, store: &mut ParamStore) -> CouplingLayer {
        let mut rng = Rng::new(5);
        CouplingLayer::with_copied(dim, copied, &[6, 6], 0, store, &mut rng, "c").unwrap()
    }

    #[test]
    fn parity_partitions() {
        assert_eq!(Parity::CopyOdd.copied(5), vec![0, 2, 4]);
        assert_eq!(Parity::CopyEven.copied(5), vec![1, 3]);
        assert_eq!(Parity::CopyOdd.flipped(), Parity::CopyEven);
    }

    #[test]
    fn split_out_of_range() {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(0);
        for copied in [vec![], vec![0, 1, 2]] {
            let err = CouplingLayer::with_copied(3, copied, &[4], 0, &mut store, &mut rng, "c").unwrap_err();
            assert!(matches!(err, FlowError::Usage(_)));
        }
        assert!(CouplingLayer::new(1, Parity::CopyOdd, &[4], 0, &mut store, &mut rng, "c").is_err());
    }

    #[test]
    fn zero_nets_are_identity() {
        let mut store = ParamStore::new();
        let l = Layer::Coupling(coupling(4, vec![0, 2], &mut store));
        store.iter_mut().for_each(|p| p.value.data_mut().fill(0.0));
        let x = Tensor::row(vec![1.0, -2.0, 3.5, 0.25]);
        let (u, ld) = l.inverse(&store, &x, None).unwrap();
        assert_eq!(u, x);
        assert_eq!(ld, vec![0.0]);
    }

    #[test]
    fn activations_are_tanh_and_relu() {
        let mut store = ParamStore::new();
        let c = coupling(4, vec![0, 2], &mut store);
        assert_eq!(c.scale_net().activation(), Activation::Tanh);
        assert_eq!(c.shift_net().activation(), Activation::Relu);
    }

    #[test]
    fn jacobian_and_round_trip() {
        for seed in 0..10 {
            let mut store = ParamStore::new();
            let l = Layer::Coupling(coupling(5, vec![0, 1], &mut store));
            randomize(&mut store, seed, 0.5);
            let mut rng = Rng::new(50 + seed);
            let x = Tensor::row(rng.normals(5));
            let (u, ld) = l.inverse(&store, &x, None).unwrap();
            assert_eq!(&u.data()[..2], &x.data()[..2]);
            assert!(l.forward(&store, &u, None).unwrap().max_abs_diff(&x) < 1e-12);
            let f = |v: &[f64]| l.inverse(&store, &Tensor::row(v.to_vec()), None).unwrap().0.into_data();
            let jac = jacobian(&f, x.data(), 1e-6);
            assert!((log_abs_det(jac).exp() - ld[0].exp()).abs() < 1e-6 * ld[0].exp().max(1.0));
        }
    }

    #[test]
    fn autoregressive_recursion_reproduces_coupling_bitwise() {
        let mut store = ParamStore::new();
        let c = coupling(5, vec![1, 3], &mut store);
        randomize(&mut store, 9, 0.7);
        let order = Order::from_sequence(vec![1, 3, 0, 2, 4]).unwrap();
        let mut rng = Rng::new(3);
        let u = Tensor::matrix(4, 5, rng.normals(20)).unwrap();
        let direct = c.forward(&store, &u, None).unwrap();
        let recursive = sequential_forward(&c, &order, &store, &u, None).unwrap();
        assert_eq!(direct.data(), recursive.data());
    }
}
