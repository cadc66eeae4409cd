use flowcast::checkpoint;
use flowcast::data::{self, Split, Standardizer};
use flowcast::flow::{Family, FlowModel, ModelSpec};
use flowcast::masking::{build_masks, DegreeAssignment, Order};
use flowcast::rng::{Rng, Stream};
use flowcast::train::{self, TrainConfig};
use flowcast::Tensor;
use proptest::prelude::*;

fn zeroed(spec: ModelSpec) -> FlowModel {
    let mut m = FlowModel::new(spec).unwrap();
    for p in m.store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    m
}

fn figure1_splits(n: usize, seed: u64) -> (Split, Split, Split) {
    let mut rng = Rng::stream(seed, Stream::Synthetic);
    let x = data::synthetic_figure1(n, &mut rng);
    data::split_monolithic(&Split::new(x), 0.1, 0.1, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn reachability_is_strictly_autoregressive(
        d in 1usize..9,
        h1 in 1usize..12,
        h2 in 1usize..12,
        seed in 0u64..1000,
        random in any::<bool>(),
    ) {
        let mut rng = Rng::new(seed);
        let mut seq: Vec<usize> = (0..d).collect();
        rng.shuffle(&mut seq);
        let order = Order::from_sequence(seq).unwrap();
        let assignment = if random { DegreeAssignment::Random } else { DegreeAssignment::Sequential };
        let masks = build_masks(d, &[h1, h2], &order, assignment, 0, seed).unwrap();
        let reach = masks.connectivity();
        for i in 0..d {
            for o in 0..d {
                if reach.get(i, o) != 0.0 {
                    prop_assert!(order.position_of(i) < order.position_of(o));
                }
            }
        }
    }

    #[test]
    fn standardizer_round_trips(rows in 2usize..30, cols in 1usize..5, seed in 0u64..1000) {
        let mut rng = Rng::new(seed);
        let x = Tensor::matrix(rows, cols, (0..rows * cols).map(|_| 3.0 * rng.normal() + 1.0).collect()).unwrap();
        let s = Standardizer::fit(&x).unwrap();
        let back = s.invert(&s.apply(&x));
        prop_assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn checkpoints_round_trip(family_ix in 0usize..5, d in 2usize..5, seed in 0u64..100) {
        let family = Family::ALL[family_ix];
        let m = FlowModel::new(ModelSpec::new(family, d).layers(2).hidden(vec![4]).components(2).seed(seed)).unwrap();
        let bytes = checkpoint::to_bytes(&m);
        prop_assert_eq!(checkpoint::to_bytes(&checkpoint::from_bytes(&bytes).unwrap()), bytes);
    }
}

#[test]
fn identity_stack_samples_are_standard_normal() {
    let m = zeroed(ModelSpec::new(Family::Maf, 3).layers(3).hidden(vec![5]).batch_norm(false));
    let mut rng = Rng::new(4);
    let x = m.sample_n(20_000, &mut rng, None).unwrap();
    for c in 0..3 {
        let mean = (0..x.rows()).map(|r| x.get(r, c)).sum::<f64>() / x.rows() as f64;
        assert!(mean.abs() < 0.02, "column {c} mean {mean}");
    }
    let lp = m.log_prob_batch(&x, None).unwrap();
    for r in 0..5 {
        let want: f64 = x.row_slice(r).iter().map(|v| -0.5 * v * v - 0.5 * (2.0 * std::f64::consts::PI).ln()).sum();
        assert!((lp[r] - want).abs() < 1e-12);
    }
}

#[test]
fn training_is_reproducible_and_tracks_the_best_epoch() {
    let (tr, va, _) = figure1_splits(600, 1);
    let run = || {
        let mut m = FlowModel::new(ModelSpec::new(Family::Maf, 2).layers(2).hidden(vec![8]).seed(3)).unwrap();
        let cfg = TrainConfig { step_size: 1e-3, max_epochs: 6, seed: 9, ..TrainConfig::default() };
        let h = train::train(&mut m, &tr, &va, &cfg).unwrap();
        (h, checkpoint::to_bytes(&m))
    };
    let (h1, c1) = run();
    let (h2, c2) = run();
    assert_eq!(h1, h2);
    assert_eq!(c1, c2);
    let mut best = f64::NEG_INFINITY;
    for e in &h1.epochs {
        assert_eq!(e.best, e.val_ll > best);
        best = best.max(e.val_ll);
    }
}

#[test]
fn training_beats_the_gaussian_baseline_on_figure1() {
    let (tr, va, te) = figure1_splits(3000, 2);
    let mut m = FlowModel::new(ModelSpec::new(Family::Maf, 2).layers(3).hidden(vec![30, 30]).seed(1)).unwrap();
    let cfg = TrainConfig { step_size: 1e-3, max_epochs: 40, ..TrainConfig::default() };
    train::train(&mut m, &tr, &va, &cfg).unwrap();
    let maf = m.log_prob_batch(&te.x, None).unwrap();
    let base = flowcast::eval::GaussianBaseline::fit(&tr.x).unwrap().log_prob_batch(&te.x).unwrap();
    let c = flowcast::eval::paired_compare(&maf, &base).unwrap();
    assert!(c.mean_diff > 0.0 && c.p_value < 1e-3, "{c:?}");
}
