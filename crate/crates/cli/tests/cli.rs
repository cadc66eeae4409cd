use std::fs;
use std::path::Path;
use std::process::Command;

use serde_json::Value;

use flowcast::checkpoint;
use flowcast::data;
use flowcast::flow::{Family, FlowModel, ModelSpec};
use flowcast::rng::Rng;
use flowcast::Tensor;

const BIN: &str = env!("CARGO_BIN_EXE_flowcast");

fn run(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(BIN).args(args).env("RUST_LOG", "warn").output().unwrap();
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn identity_checkpoint(dir: &Path, d: usize) -> std::path::PathBuf {
    let mut m = FlowModel::new(ModelSpec::new(Family::Maf, d).layers(2).hidden(vec![4]).batch_norm(false)).unwrap();
    for p in m.store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let path = dir.join(format!("identity{d}.ckpt"));
    checkpoint::save(&m, &path).unwrap();
    path
}

fn normal_data(dir: &Path, n: usize, d: usize, seed: u64) -> std::path::PathBuf {
    let mut rng = Rng::new(seed);
    let path = dir.join(format!("normal{d}_{seed}.mat"));
    data::write_raw(&path, &Tensor::matrix(n, d, rng.normals(n * d)).unwrap()).unwrap();
    path
}

fn write_config(dir: &Path, body: &str) -> std::path::PathBuf {
    let p = dir.join("exp.ini");
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn unknown_family_exits_two_and_lists_families() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\nfamily = glow\n");
    let (code, _, err) = run(&["train", s(&cfg)]);
    assert_eq!(code, 2);
    for fam in ["made", "made_mog", "realnvp", "maf", "maf_mog"] {
        assert!(err.contains(fam), "{err}");
    }
}

#[test]
fn unknown_key_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "[model]\nfamily = maf\nwidth = 3\n");
    let (code, _, err) = run(&["train", s(&cfg)]);
    assert_eq!(code, 2);
    assert!(err.contains("width"), "{err}");
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "[dataset]\nn = 300\n[model]\nfamily = made\nhidden_units = 7\nseed = 4\n[train]\nmax_epochs = 0\n[output]\ndir = out\n",
    );
    let (code, _, err) = run(&["train", s(&cfg)]);
    assert_eq!(code, 0, "{err}");
    let saved = fs::read(dir.path().join("out/model.ckpt")).unwrap();
    let init = FlowModel::new(ModelSpec::new(Family::Made, 2).hidden(vec![7]).seed(4)).unwrap();
    assert_eq!(saved, checkpoint::to_bytes(&init));
    for f in ["history.csv", "eval.json", "test.mat"] {
        assert!(dir.path().join("out").join(f).exists(), "{f}");
    }
}

#[test]
fn eval_of_identity_stack_matches_standard_normal() {
    let dir = tempfile::tempdir().unwrap();
    let d = 3;
    let ck = identity_checkpoint(dir.path(), d);
    let x = normal_data(dir.path(), 20_000, d, 1);
    let (code, out, err) = run(&["eval", s(&ck), s(&x)]);
    assert_eq!(code, 0, "{err}");
    let j: Value = serde_json::from_str(&out).unwrap();
    let want = -(d as f64) / 2.0 * (1.0 + (2.0 * std::f64::consts::PI).ln());
    let got = j["mean_ll"].as_f64().unwrap();
    assert!((got - want).abs() < 0.03, "{got} vs {want}");
    assert_eq!(j["n"], 20_000);
    let (_, again, _) = run(&["eval", s(&ck), s(&x)]);
    assert_eq!(out, again);
}

#[test]
fn eval_errors() {
    let dir = tempfile::tempdir().unwrap();
    let ck = identity_checkpoint(dir.path(), 3);
    let x2 = normal_data(dir.path(), 10, 2, 2);
    let (code, _, err) = run(&["eval", s(&ck), s(&x2)]);
    assert_eq!(code, 2);
    assert!(err.contains("D = 3") && err.contains("D = 2"), "{err}");
    let x3 = normal_data(dir.path(), 10, 3, 3);
    let (code, _, _) = run(&["eval", s(&ck), s(&x3), "--bpp"]);
    assert_eq!(code, 2);
}

#[test]
fn grid_of_identity_model() {
    let dir = tempfile::tempdir().unwrap();
    let ck = identity_checkpoint(dir.path(), 2);
    let g = dir.path().join("g.csv");
    let (code, _, err) = run(&["grid", s(&ck), "--bounds", "-7,7,-7,7", "--resolution", "140", "-o", s(&g)]);
    assert_eq!(code, 0, "{err}");
    let text = fs::read_to_string(&g).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("x1,x2,logp"));
    let rows: Vec<[f64; 3]> = lines
        .map(|l| {
            let v: Vec<f64> = l.split(',').map(|t| t.parse().unwrap()).collect();
            [v[0], v[1], v[2]]
        })
        .collect();
    assert_eq!(rows.len(), 140 * 140);
    let mass: f64 = rows.iter().map(|r| r[2].exp()).sum::<f64>() * 0.01;
    assert!((mass - 1.0).abs() < 1e-2, "{mass}");
    // Symmetric bounds: the mirrored cell has the same density.
    let n = rows.len();
    for (k, r) in rows.iter().enumerate() {
        assert!((r[2] - rows[n - 1 - k][2]).abs() < 1e-12);
    }

    let (code, out, _) = run(&["grid", s(&ck), "--resolution", "1"]);
    assert_eq!(code, 0);
    assert_eq!(out.lines().count(), 2);

    let ck3 = identity_checkpoint(dir.path(), 3);
    let (code, _, _) = run(&["grid", s(&ck3)]);
    assert_eq!(code, 2);
}

#[test]
fn compare_is_zero_on_self_and_antisymmetric() {
    let dir = tempfile::tempdir().unwrap();
    let a = identity_checkpoint(dir.path(), 2);
    let mut m = FlowModel::new(ModelSpec::new(Family::Maf, 2).layers(1).hidden(vec![4]).batch_norm(false).seed(3)).unwrap();
    for p in m.store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v *= 0.5);
    }
    let b = dir.path().join("b.ckpt");
    checkpoint::save(&m, &b).unwrap();
    let x = normal_data(dir.path(), 500, 2, 5);
    let cmp = |p: &Path, q: &Path| -> Value {
        let (code, out, err) = run(&["compare", s(p), s(q), s(&x), "--json"]);
        assert_eq!(code, 0, "{err}");
        serde_json::from_str(&out).unwrap()
    };
    let same = cmp(&a, &a);
    assert_eq!(same["mean_diff"].as_f64(), Some(0.0));
    let (ab, ba) = (cmp(&a, &b), cmp(&b, &a));
    assert_eq!(ab["mean_diff"].as_f64().unwrap(), -ba["mean_diff"].as_f64().unwrap());
    assert_eq!(ab["p_value"], ba["p_value"]);
}

#[test]
fn sample_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let ck = identity_checkpoint(dir.path(), 2);
    let (_, a, _) = run(&["sample", s(&ck), "-n", "5", "--seed", "3"]);
    let (_, b, _) = run(&["sample", s(&ck), "-n", "5", "--seed", "3"]);
    let (_, c, _) = run(&["sample", s(&ck), "-n", "5", "--seed", "4"]);
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(a.lines().count(), 6);
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let out = Command::new(BIN).args(["params", "--family", "maf", "--dim", "2"]).env("FLOWCAST_THREADS", "zero").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}
