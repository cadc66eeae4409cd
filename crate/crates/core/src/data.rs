//! Datasets, preprocessing and synthetic sources.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};

use crate::error::{FlowError, Result};
use crate::rng::{Rng, Stream};
use crate::tensor::{Tensor, LN_2PI};

/// Magic bytes of the raw matrix format: 8-byte magic, `u32` rows, `u32`
/// cols, then row-major little-endian `f64` values.
pub const MATRIX_MAGIC: &[u8; 8] = b"FLOWMAT1";

/// Data rows with optional one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub x: Tensor,
    pub y: Option<Tensor>,
}

impl Split {
    pub fn new(x: Tensor) -> Self {
        Split { x, y: None }
    }

    pub fn rows(&self) -> usize {
        self.x.rows()
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split { x: self.x.select_rows(idx), y: self.y.as_ref().map(|y| y.select_rows(idx)) }
    }
}

/// One applied preprocessing step with its fitted statistics.
#[derive(Debug, Clone, PartialEq)]
pub enum Transform {
    Recipe { name: String, columns: Vec<String> },
    Standardize(Standardizer),
    Prune { kept: Vec<usize> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub train: Split,
    pub val: Split,
    pub test: Split,
    pub transforms: Vec<Transform>,
}

impl Dataset {
    pub fn dim(&self) -> usize {
        self.train.x.cols()
    }
}

// ---------------------------------------------------------------------------
// Standardization and correlation pruning

/// Per-feature train mean and standard deviation (divide-by-N) for the
/// retained features.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub kept: Vec<usize>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    pub dropped: Vec<usize>,
}

fn column_moments(x: &Tensor, j: usize) -> (f64, f64) {
    let n = x.rows() as f64;
    let m = (0..x.rows()).map(|r| x.get(r, j)).sum::<f64>() / n;
    let v = (0..x.rows()).map(|r| (x.get(r, j) - m).powi(2)).sum::<f64>() / n;
    (m, v.sqrt())
}

impl Standardizer {
    pub fn fit(train: &Tensor) -> Result<Self> {
        if train.rows() == 0 {
            return Err(FlowError::usage("cannot standardize an empty train split"));
        }
        let mut s = Standardizer { kept: vec![], mean: vec![], std: vec![], dropped: vec![] };
        for j in 0..train.cols() {
            let (m, sd) = column_moments(train, j);
            if sd > 0.0 && sd.is_finite() {
                s.kept.push(j);
                s.mean.push(m);
                s.std.push(sd);
            } else {
                warn!("feature {j} has zero variance on the train split; dropped");
                s.dropped.push(j);
            }
        }
        if s.kept.is_empty() {
            return Err(FlowError::usage("every feature has zero variance"));
        }
        Ok(s)
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let mut out = x.select_cols(&self.kept);
        let k = self.kept.len();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v = (*v - self.mean[i % k]) / self.std[i % k];
        }
        out
    }

    /// Map standardized values back to the retained raw features.
    pub fn invert(&self, z: &Tensor) -> Tensor {
        let k = self.kept.len();
        z.map_indexed(|i, v| v * self.std[i % k] + self.mean[i % k])
    }
}

trait MapIndexed {
    fn map_indexed(&self, f: impl Fn(usize, f64) -> f64) -> Tensor;
}

impl MapIndexed for Tensor {
    fn map_indexed(&self, f: impl Fn(usize, f64) -> f64) -> Tensor {
        let mut out = self.clone();
        out.data_mut().iter_mut().enumerate().for_each(|(i, v)| *v = f(i, *v));
        out
    }
}

pub fn standardize(train: &Tensor) -> Result<(Tensor, Standardizer)> {
    let s = Standardizer::fit(train)?;
    Ok((s.apply(train), s))
}

fn pearson(x: &Tensor, a: usize, b: usize) -> f64 {
    let (ma, sa) = column_moments(x, a);
    let (mb, sb) = column_moments(x, b);
    if sa == 0.0 || sb == 0.0 {
        return 0.0;
    }
    let n = x.rows() as f64;
    let cov = (0..x.rows()).map(|r| (x.get(r, a) - ma) * (x.get(r, b) - mb)).sum::<f64>() / n;
    cov / (sa * sb)
}

/// Greedy scan in column order: a column is kept unless `|r|` with some
/// already-kept column exceeds `threshold`.
pub fn prune_correlated(x: &Tensor, threshold: f64) -> Result<(Tensor, Vec<usize>)> {
    if x.rows() < 2 {
        return Err(FlowError::usage("correlation pruning needs at least two rows"));
    }
    let mut kept: Vec<usize> = Vec::new();
    for j in 0..x.cols() {
        if kept.iter().all(|&k| pearson(x, k, j).abs() <= threshold) {
            kept.push(j);
        } else {
            info!("feature {j} dropped: correlation above {threshold}");
        }
    }
    Ok((x.select_cols(&kept), kept))
}

// ---------------------------------------------------------------------------
// Pixels

pub fn logit(s: f64) -> f64 {
    (s / (1.0 - s)).ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `x = logit(λ + (1 − 2λ)·(z + noise)/256)` for one pixel.
pub fn dequantize_pixel(z: f64, noise: f64, lambda: f64) -> f64 {
    let s = lambda + (1.0 - 2.0 * lambda) * (z + noise) / 256.0;
    logit(s)
}

/// Inverse of the logit step: back to the dequantized value in `[0, 1)`.
pub fn logit_inverse(x: f64, lambda: f64) -> f64 {
    (sigmoid(x) - lambda) / (1.0 - 2.0 * lambda)
}

/// Dequantize integer pixels with uniform noise from `rng` and map them to
/// logit space.
pub fn dequantize_logit(pixels: &Tensor, lambda: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..0.5).contains(&lambda) {
        return Err(FlowError::usage(format!("logit λ must lie in [0, 0.5), got {lambda}")));
    }
    if let Some(bad) = pixels.data().iter().find(|&&v| v.fract() != 0.0 || !(0.0..=255.0).contains(&v)) {
        return Err(FlowError::usage(format!("pixel value {bad} is not an integer in 0..=255")));
    }
    let mut out = pixels.clone();
    out.data_mut().iter_mut().for_each(|z| *z = dequantize_pixel(*z, rng.uniform(), lambda));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic sources

/// Draws from `x₂ ~ N(0, 4)`, `x₁ | x₂ ~ N(x₂²/4, 1)`.
pub fn synthetic_figure1(n: usize, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let x2 = 2.0 * rng.normal();
        let x1 = 0.25 * x2 * x2 + rng.normal();
        data.extend([x1, x2]);
    }
    Tensor::matrix(n, 2, data).expect("shape")
}

/// Exact log-density of the two-dimensional source above.
pub fn figure1_log_density(x: &[f64]) -> f64 {
    let (x1, x2) = (x[0], x[1]);
    let lp2 = -0.5 * LN_2PI - 0.5 * 4f64.ln() - x2 * x2 / 8.0;
    let r = x1 - 0.25 * x2 * x2;
    let lp1 = -0.5 * LN_2PI - 0.5 * r * r;
    lp1 + lp2
}

/// `E[log π]` of the two-dimensional source: `−(1 + ln 2π) − ½ ln 4`.
pub fn figure1_expected_log_density() -> f64 {
    -(1.0 + LN_2PI) - 0.5 * 4f64.ln()
}

// ---------------------------------------------------------------------------
// Splits

/// Shuffle rows under `seed`, hold out ⌊10%⌋ for test and ⌊10%⌋ of the rest
/// for validation.
pub fn split_monolithic(data: &Split, test_fraction: f64, val_fraction: f64, seed: u64) -> Result<(Split, Split, Split)> {
    for (name, f) in [("test_fraction", test_fraction), ("val_fraction", val_fraction)] {
        if !(0.0..1.0).contains(&f) {
            return Err(FlowError::Config { key: format!("dataset.{name}"), message: format!("must lie in [0, 1), got {f}") });
        }
    }
    let n = data.rows();
    let mut idx: Vec<usize> = (0..n).collect();
    Rng::stream(seed, Stream::Split).shuffle(&mut idx);
    let n_test = (test_fraction * n as f64).floor() as usize;
    let n_val = (val_fraction * (n - n_test) as f64).floor() as usize;
    let test = data.select(&idx[..n_test]);
    let val = data.select(&idx[n_test..n_test + n_val]);
    let train = data.select(&idx[n_test + n_val..]);
    if train.rows() == 0 || val.rows() == 0 || test.rows() == 0 {
        return Err(FlowError::usage(format!(
            "{n} rows give an empty split (train {}, val {}, test {})",
            train.rows(),
            val.rows(),
            test.rows()
        )));
    }
    Ok((train, val, test))
}

// ---------------------------------------------------------------------------
// File formats

/// A numeric table with optional column names.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub data: Tensor,
}

impl Table {
    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.trim().eq_ignore_ascii_case(name))
    }

    pub fn select_cols(&self, idx: &[usize]) -> Table {
        Table { columns: idx.iter().map(|&i| self.columns[i].clone()).collect(), data: self.data.select_cols(idx) }
    }

    pub fn drop_cols(&self, drop: &[usize]) -> Table {
        let keep: Vec<usize> = (0..self.data.cols()).filter(|j| !drop.contains(j)).collect();
        self.select_cols(&keep)
    }
}

pub fn read_csv(bytes: &[u8]) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(bytes);
    let columns: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != columns.len() {
            return Err(FlowError::Format(format!("row {} has {} fields, header has {}", r + 1, rec.len(), columns.len())));
        }
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field
                .parse()
                .map_err(|_| FlowError::Format(format!("row {}, column `{}`: `{field}` is not a number", r + 1, columns[c])))?;
            data.push(v);
        }
        rows += 1;
    }
    Ok(Table { data: Tensor::matrix(rows, columns.len(), data)?, columns })
}

pub fn read_raw(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < 16 || &bytes[..8] != MATRIX_MAGIC {
        return Err(FlowError::Format("not a raw matrix file".into()));
    }
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if body.len() != rows * cols * 8 {
        return Err(FlowError::Format(format!("raw matrix body has {} bytes, header says {rows}×{cols}", body.len())));
    }
    let data = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::matrix(rows, cols, data)
}

/// Load a CSV or raw matrix file, detecting the format by its magic bytes.
pub fn read_table(path: &Path) -> Result<Table> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(MATRIX_MAGIC) {
        let data = read_raw(&bytes)?;
        let columns = (0..data.cols()).map(|j| format!("x{}", j + 1)).collect();
        Ok(Table { columns, data })
    } else {
        read_csv(&bytes)
    }
}

pub fn raw_bytes(x: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * x.len());
    out.extend_from_slice(MATRIX_MAGIC);
    out.extend_from_slice(&(x.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(x.cols() as u32).to_le_bytes());
    x.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
    out
}

pub fn write_raw(path: &Path, x: &Tensor) -> Result<()> {
    fs::write(path, raw_bytes(x))?;
    Ok(())
}

pub fn write_csv(path: &Path, columns: &[String], x: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(columns)?;
    for r in 0..x.rows() {
        w.write_record(x.row_slice(r).iter().map(|v| format!("{v:.17e}")))?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Dataset recipes

/// Fraction of rows a single value may occupy (at least one row) before a
/// feature counts as having too many reoccurring values.
pub const REPEAT_FRACTION: f64 = 0.01;
/// POWER noise width as a fraction of each feature's smallest nonzero gap.
pub const POWER_NOISE_FRACTION: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    None,
    Power,
    Gas,
    Hepmass,
    Miniboone,
    Pixels,
}

impl Recipe {
    pub const ALL: [Recipe; 6] = [Recipe::None, Recipe::Power, Recipe::Gas, Recipe::Hepmass, Recipe::Miniboone, Recipe::Pixels];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::None => "none",
            Recipe::Power => "power",
            Recipe::Gas => "gas",
            Recipe::Hepmass => "hepmass",
            Recipe::Miniboone => "miniboone",
            Recipe::Pixels => "pixels",
        }
    }

    /// Whether standardization and correlation pruning follow the recipe.
    pub fn tabular(self) -> bool {
        matches!(self, Recipe::Power | Recipe::Gas | Recipe::Hepmass | Recipe::Miniboone)
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = FlowError;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL.iter().copied().find(|r| r.name() == s).ok_or_else(|| FlowError::Config {
            key: "dataset.recipe".into(),
            message: format!("unknown value `{s}`; allowed: none, power, gas, hepmass, miniboone, pixels"),
        })
    }
}

fn modal_count(x: &Tensor, j: usize) -> usize {
    let mut col: Vec<f64> = (0..x.rows()).map(|r| x.get(r, j)).collect();
    col.sort_by(f64::total_cmp);
    let (mut best, mut run) = (0usize, 0usize);
    for k in 0..col.len() {
        run = if k > 0 && col[k] == col[k - 1] { run + 1 } else { 1 };
        best = best.max(run);
    }
    best
}

fn min_positive_gap(x: &Tensor, j: usize) -> Option<f64> {
    let mut col: Vec<f64> = (0..x.rows()).map(|r| x.get(r, j)).collect();
    col.sort_by(f64::total_cmp);
    col.windows(2).map(|w| w[1] - w[0]).filter(|&g| g > 0.0).min_by(f64::total_cmp)
}

fn drop_named(t: Table, names: &[&str]) -> Table {
    let idx: Vec<usize> = names.iter().filter_map(|n| t.column_index(n)).collect();
    t.drop_cols(&idx)
}

fn drop_repeating(t: Table) -> Table {
    let limit = ((REPEAT_FRACTION * t.data.rows() as f64).floor() as usize).max(1);
    let idx: Vec<usize> = (0..t.data.cols()).filter(|&j| modal_count(&t.data, j) > limit).collect();
    for &j in &idx {
        info!("column `{}` dropped: too many reoccurring values", t.columns[j]);
    }
    t.drop_cols(&idx)
}

/// Apply a named recipe to a raw table. `rng` supplies any noise.
pub fn apply_recipe(recipe: Recipe, table: Table, lambda: f64, rng: &mut Rng) -> Result<Table> {
    Ok(match recipe {
        Recipe::None => table,
        Recipe::Power => {
            let mut t = drop_named(table, &["date", "global_reactive_power"]);
            let time = t.column_index("time");
            for j in 0..t.data.cols() {
                let eps = if Some(j) == time {
                    1.0
                } else {
                    min_positive_gap(&t.data, j).map_or(0.0, |g| POWER_NOISE_FRACTION * g)
                };
                for r in 0..t.data.rows() {
                    let v = t.data.get(r, j) + eps * rng.uniform();
                    t.data.set(r, j, v);
                }
            }
            t
        }
        Recipe::Gas => drop_named(table, &["time"]),
        Recipe::Hepmass => drop_repeating(drop_named(table, &["label", "# label", "class"])),
        Recipe::Miniboone => {
            let t = drop_named(table, &["label", "class"]);
            let keep: Vec<usize> = (0..t.data.rows()).filter(|&r| !t.data.row_slice(r).iter().all(|&v| v == -1000.0)).collect();
            if keep.len() < t.data.rows() {
                info!("{} outlier rows at −1000 removed", t.data.rows() - keep.len());
            }
            drop_repeating(Table { columns: t.columns.clone(), data: t.data.select_rows(&keep) })
        }
        Recipe::Pixels => Table { data: dequantize_logit(&table.data, lambda, rng)?, columns: table.columns },
    })
}

/// Split off an integer label column as one-hot rows.
pub fn one_hot_labels(table: Table, column: &str) -> Result<(Table, Tensor)> {
    let j = table.column_index(column).ok_or_else(|| FlowError::Config {
        key: "dataset.label_column".into(),
        message: format!("no column named `{column}`; available: {}", table.columns.join(", ")),
    })?;
    let raw: Vec<f64> = (0..table.data.rows()).map(|r| table.data.get(r, j)).collect();
    if let Some(bad) = raw.iter().find(|v| v.fract() != 0.0 || **v < 0.0) {
        return Err(FlowError::Format(format!("label `{bad}` is not a non-negative integer")));
    }
    let classes = raw.iter().fold(0.0f64, |a, &b| a.max(b)) as usize + 1;
    let mut y = Tensor::zeros(&[raw.len(), classes]);
    for (r, &v) in raw.iter().enumerate() {
        y.set(r, v as usize, 1.0);
    }
    Ok((table.drop_cols(&[j]), y))
}

/// Options for assembling a dataset from one file.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    pub recipe: Recipe,
    pub lambda: f64,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub correlation_threshold: f64,
    pub label_column: Option<String>,
    pub seed: u64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            recipe: Recipe::None,
            lambda: 1e-6,
            test_fraction: 0.1,
            val_fraction: 0.1,
            correlation_threshold: 0.98,
            label_column: None,
            seed: 0,
        }
    }
}

/// Recipe, split, then (for tabular recipes) standardization and pruning
/// fitted on the train split.
pub fn prepare(name: &str, table: Table, opts: &LoadOptions) -> Result<Dataset> {
    let (table, y) = match &opts.label_column {
        Some(c) => {
            let (t, y) = one_hot_labels(table, c)?;
            (t, Some(y))
        }
        None => (table, None),
    };
    let mut rng = Rng::stream(opts.seed, if opts.recipe == Recipe::Pixels { Stream::Dequantize } else { Stream::Recipe });
    let table = apply_recipe(opts.recipe, table, opts.lambda, &mut rng)?;
    let mut transforms = vec![Transform::Recipe { name: opts.recipe.name().into(), columns: table.columns.clone() }];
    let all = Split { x: table.data, y };
    let (mut train, mut val, mut test) = split_monolithic(&all, opts.test_fraction, opts.val_fraction, opts.seed)?;
    if opts.recipe.tabular() {
        let s = Standardizer::fit(&train.x)?;
        for part in [&mut train, &mut val, &mut test] {
            part.x = s.apply(&part.x);
        }
        transforms.push(Transform::Standardize(s));
        let (_, kept) = prune_correlated(&train.x, opts.correlation_threshold)?;
        for part in [&mut train, &mut val, &mut test] {
            part.x = part.x.select_cols(&kept);
        }
        transforms.push(Transform::Prune { kept });
    }
    Ok(Dataset { name: name.into(), train, val, test, transforms })
}
