//! Maximum-likelihood training with Adam and early stopping.

use std::io::Write;
use std::path::Path;

use log::{debug, info};

use crate::data::Split;
use crate::error::{FlowError, Result};
use crate::flow::FlowModel;
use crate::layers::{BnMode, Layer};
use crate::params::{ParamKind, ParamStore};
use crate::rng::{Rng, Stream};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub step_size: f64,
    pub batch_size: usize,
    pub l2: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: 1e-4,
            batch_size: 100,
            l2: 1e-6,
            patience: 30,
            max_epochs: 1000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("train.step_size", self.step_size),
            ("train.adam_eps", self.adam_eps),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(FlowError::Config { key: key.into(), message: format!("must be positive, got {v}") });
            }
        }
        if !(self.l2 >= 0.0 && self.l2.is_finite()) {
            return Err(FlowError::Config { key: "train.l2".into(), message: format!("must be non-negative, got {}", self.l2) });
        }
        for (key, b) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(FlowError::Config { key: key.into(), message: format!("must lie in [0, 1), got {b}") });
            }
        }
        if self.batch_size == 0 {
            return Err(FlowError::Config { key: "train.batch_size".into(), message: "must be at least 1".into() });
        }
        if self.patience == 0 {
            return Err(FlowError::Config { key: "train.patience".into(), message: "must be at least 1".into() });
        }
        Ok(())
    }
}

/// Adam moments, one pair per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        AdamState { m: zeros.clone(), v: zeros, t: 0 }
    }
}

/// One bias-corrected Adam update of every parameter.
pub fn adam_step(state: &mut AdamState, store: &mut ParamStore, grads: &[Tensor], cfg: &TrainConfig) -> Result<()> {
    if grads.len() != store.len() || state.m.len() != store.len() {
        return Err(FlowError::dim("adam_step", format!("{} gradients for {} parameters", grads.len(), store.len())));
    }
    for (p, g) in store.iter().zip(grads) {
        if p.value.shape() != g.shape() {
            return Err(FlowError::dim("adam_step", format!("{}: {:?} vs {:?}", p.name, p.value.shape(), g.shape())));
        }
        if let Some(bad) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(FlowError::numeric(None, format!("gradient of {}", p.name), format!("entry {bad} is {}", g.data()[bad])));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (k, (p, g)) in store.iter_mut().zip(grads).enumerate() {
        let (m, v) = (state.m[k].data_mut(), state.v[k].data_mut());
        for (j, (w, &gj)) in p.value.data_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            let mh = m[j] / c1;
            let vh = v[j] / c2;
            *w -= cfg.step_size * mh / (vh.sqrt() + cfg.adam_eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_nll: f64,
    pub val_ll: f64,
    /// Best validation log-likelihood so far.
    pub best: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn best_epoch(&self) -> Option<&EpochRecord> {
        self.epochs.iter().rev().find(|e| e.best)
    }

    pub fn write_csv(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "train_nll", "val_ll", "best_flag"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                format!("{:.17e}", e.train_nll),
                format!("{:.17e}", e.val_ll),
                (e.best as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Minibatch index lists for one epoch; a trailing single row is folded into
/// the previous batch when batch norm needs at least two rows.
pub fn minibatches(order: &[usize], batch_size: usize, need_pairs: bool) -> Vec<Vec<usize>> {
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if need_pairs && batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let tail = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(tail);
    }
    batches
}

/// Mean regularised NLL of one batch and its gradients; also returns the
/// batch-norm inputs seen on the way.
pub fn batch_loss(
    model: &FlowModel,
    x: &Tensor,
    y: Option<&Tensor>,
    l2: f64,
) -> Result<(f64, f64, Vec<Tensor>, Vec<(usize, Tensor)>)> {
    let mut tape = Tape::new();
    let vars = model.store.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let yv = y.map(|y| tape.constant(y.clone()));
    let trace = model.trace(&mut tape, &vars, xv, yv)?;
    let mean_lp = tape.mean(trace.log_prob);
    let nll = tape.neg(mean_lp);
    let mut loss = nll;
    if l2 > 0.0 {
        for (p, &v) in model.store.iter().zip(&vars) {
            if p.kind == ParamKind::Weight {
                let sq = tape.square(v);
                let s = tape.sum(sq);
                let s = tape.scale(s, 0.5 * l2);
                loss = tape.add(loss, s)?;
            }
        }
    }
    let grads = tape.backward(loss)?;
    let g: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    let bn = trace.bn_inputs.iter().map(|&(i, v)| (i, tape.value(v).clone())).collect();
    Ok((tape.value(nll).item(), tape.value(loss).item(), g, bn))
}

struct MomentSums {
    n: usize,
    sum: Vec<f64>,
    sq: Vec<f64>,
}

impl MomentSums {
    fn new(d: usize) -> Self {
        MomentSums { n: 0, sum: vec![0.0; d], sq: vec![0.0; d] }
    }

    fn add(&mut self, x: &Tensor) {
        for r in 0..x.rows() {
            for (j, &v) in x.row_slice(r).iter().enumerate() {
                self.sum[j] += v;
                self.sq[j] += v * v;
            }
        }
        self.n += x.rows();
    }

    fn stats(&self) -> (Tensor, Tensor) {
        let n = self.n as f64;
        let m: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let v: Vec<f64> = self.sq.iter().zip(&m).map(|(q, m)| (q / n - m * m).max(0.0)).collect();
        (Tensor::vector(m), Tensor::vector(v))
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

type BnState = Vec<Option<(Tensor, Tensor)>>;

fn bn_state(model: &FlowModel) -> BnState {
    model
        .layers()
        .iter()
        .filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b.stats().map(|(m, v)| (m.clone(), v.clone()))),
            _ => None,
        })
        .collect()
}

/// Train `model` in place and return the per-epoch history. The model ends
/// with the parameters of the best validation epoch and batch-norm statistics
/// of the full training set.
pub fn train(model: &mut FlowModel, train: &Split, val: &Split, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if train.x.rows() == 0 || val.x.rows() == 0 {
        return Err(FlowError::usage("training needs non-empty train and validation splits"));
    }
    let has_bn = model.has_batch_norm();
    if has_bn && train.x.rows() < 2 {
        return Err(FlowError::usage("batch norm needs at least two training rows"));
    }
    let n = train.x.rows();
    let d = model.dim();
    let mut rng = Rng::stream(cfg.seed, Stream::Shuffle);
    let mut adam = AdamState::new(&model.store);
    let mut history = History::default();
    let mut best_ll = f64::NEG_INFINITY;
    let mut best: Option<(Vec<Tensor>, BnState)> = None;
    let mut stale = 0;
    model.set_bn_mode(BnMode::Train);

    for epoch in 1..=cfg.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let n_bn = model.layers().iter().filter(|l| matches!(l, Layer::BatchNorm(_))).count();
        let mut sums: Vec<MomentSums> = (0..n_bn).map(|_| MomentSums::new(d)).collect();
        let mut nll_total = 0.0;
        for idx in minibatches(&order, cfg.batch_size, has_bn) {
            let xb = train.x.select_rows(&idx);
            let yb = train.y.as_ref().map(|y| y.select_rows(&idx));
            let (nll, _, grads, bn) = batch_loss(model, &xb, yb.as_ref(), cfg.l2)?;
            for (k, (_, input)) in bn.iter().enumerate() {
                sums[k].add(input);
            }
            nll_total += nll * idx.len() as f64;
            adam_step(&mut adam, &mut model.store, &grads, cfg)?;
        }
        let train_nll = nll_total / n as f64;

        for (b, s) in model.batch_norms_mut().zip(&sums) {
            let (m, v) = s.stats();
            b.set_stats(m, v)?;
            b.set_mode(BnMode::Eval);
        }
        let val_ll = mean(&model.log_prob_batch(&val.x, val.y.as_ref())?);
        model.set_bn_mode(BnMode::Train);

        let improved = val_ll > best_ll;
        if improved {
            best_ll = val_ll;
            best = Some((model.store.snapshot(), bn_state(model)));
            stale = 0;
        } else {
            stale += 1;
        }
        history.epochs.push(EpochRecord { epoch, train_nll, val_ll, best: improved });
        debug!("epoch {epoch}: train nll {train_nll:.6}, val ll {val_ll:.6}");
        if stale >= cfg.patience {
            info!("early stop after epoch {epoch}; best validation ll {best_ll:.6}");
            break;
        }
    }

    if let Some((params, stats)) = best {
        model.store.restore(&params)?;
        for (b, s) in model.batch_norms_mut().zip(stats) {
            if let Some((m, v)) = s {
                b.set_stats(m, v)?;
            }
        }
    }
    if has_bn {
        model.finalize_batch_norm(&train.x, train.y.as_ref())?;
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::{Family, ModelSpec};

    fn cfg(step: f64) -> TrainConfig {
        TrainConfig { step_size: step, ..TrainConfig::default() }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![1.0, -2.0]), ParamKind::Weight, None);
        let mut st = AdamState::new(&store);
        adam_step(&mut st, &mut store, &[Tensor::zeros(&[2])], &cfg(1e-3)).unwrap();
        assert_eq!(store.get(crate::params::ParamId(0)).data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_is_step_size() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.0), ParamKind::Weight, None);
        let mut st = AdamState::new(&store);
        let c = cfg(1e-3);
        adam_step(&mut st, &mut store, &[Tensor::scalar(1.0)], &c).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        let want = -1e-3 / (1.0 + 1e-8);
        assert!((store.get(crate::params::ParamId(0)).item() - want).abs() < 1e-18);
    }

    #[test]
    fn opposite_gradients_move_symmetrically() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::vector(vec![0.5, 0.5]), ParamKind::Weight, None);
        let mut st = AdamState::new(&store);
        for _ in 0..5 {
            adam_step(&mut st, &mut store, &[Tensor::vector(vec![0.3, -0.3])], &cfg(1e-2)).unwrap();
        }
        let w = store.get(crate::params::ParamId(0)).data();
        assert_eq!(w[0] - 0.5, 0.5 - w[1]);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::scalar(0.0), ParamKind::Weight, None);
        let mut st = AdamState::new(&store);
        let err = adam_step(&mut st, &mut store, &[Tensor::scalar(f64::NAN)], &cfg(1e-3)).unwrap_err();
        assert!(err.is_numeric());
    }

    #[test]
    fn batching_rules() {
        let idx: Vec<usize> = (0..201).collect();
        let b = minibatches(&idx, 100, true);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![100, 101]);
        let b = minibatches(&idx, 100, false);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![100, 100, 1]);
        let b = minibatches(&idx[..150], 100, true);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![100, 50]);
    }

    fn toy(n: usize, seed: u64) -> Split {
        let mut rng = Rng::new(seed);
        let data: Vec<f64> = (0..n).flat_map(|_| {
            let a = rng.normal();
            [a, 0.5 * a + 0.3 * rng.normal()]
        }).collect();
        Split { x: Tensor::matrix(n, 2, data).unwrap(), y: None }
    }

    #[test]
    fn zero_epochs_keep_initialisation() {
        let mut model = FlowModel::new(ModelSpec::new(Family::Made, 2).hidden(vec![8])).unwrap();
        let before = model.store.snapshot();
        let c = TrainConfig { max_epochs: 0, ..cfg(1e-3) };
        let h = train(&mut model, &toy(50, 0), &toy(20, 1), &c).unwrap();
        assert!(h.epochs.is_empty());
        assert_eq!(model.store.snapshot(), before);
    }

    #[test]
    fn training_is_reproducible_and_restores_best() {
        let run = || {
            let mut model = FlowModel::new(ModelSpec::new(Family::Maf, 2).layers(2).hidden(vec![8]).seed(4)).unwrap();
            let c = TrainConfig { max_epochs: 12, patience: 3, seed: 7, ..cfg(1e-2) };
            let h = train(&mut model, &toy(300, 2), &toy(100, 3), &c).unwrap();
            (model, h)
        };
        let (m1, h1) = run();
        let (_, h2) = run();
        assert_eq!(h1, h2);
        let best = h1.epochs.iter().map(|e| e.val_ll).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(h1.best_epoch().unwrap().val_ll, best);
        let first = h1.epochs[0].val_ll;
        assert!(best > first);
        let mut running = f64::NEG_INFINITY;
        for e in &h1.epochs {
            assert_eq!(e.best, e.val_ll > running);
            running = running.max(e.val_ll);
        }
        for p in m1.store.iter() {
            if let Some(mask) = &p.mask {
                for (w, m) in p.value.data().iter().zip(mask.data()) {
                    if *m == 0.0 {
                        assert_eq!(*w, 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn small_step_decreases_single_sample_loss() {
        let model = FlowModel::new(ModelSpec::new(Family::MadeMog, 2).hidden(vec![6]).components(3).seed(2)).unwrap();
        let x = Tensor::row(vec![0.7, -0.4]);
        let (_, before, grads, _) = batch_loss(&model, &x, None, 1e-6).unwrap();
        let mut m = model.clone();
        let mut st = AdamState::new(&m.store);
        adam_step(&mut st, &mut m.store, &grads, &cfg(1e-6)).unwrap();
        let (_, after, _, _) = batch_loss(&m, &x, None, 1e-6).unwrap();
        assert!(after < before);
    }

    #[test]
    fn history_csv_columns() {
        let h = History { epochs: vec![EpochRecord { epoch: 1, train_nll: 2.5, val_ll: -2.4, best: true }] };
        let mut buf = Vec::new();
        h.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("epoch,train_nll,val_ll,best_flag\n1,"));
        assert!(text.trim_end().ends_with(",1"));
    }
}
