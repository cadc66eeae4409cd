//! Experiment configuration files.
//!
//! INI layout with four sections:
//!
//! ```ini
//! [dataset]
//! source = figure1        ; figure1 | file
//! n = 10000
//! seed = 0
//!
//! [model]
//! family = maf            ; made | made_mog | realnvp | maf | maf_mog
//! layers = 5
//! hidden_layers = 2
//! hidden_units = 100
//!
//! [train]
//! max_epochs = 1000
//!
//! [output]
//! dir = runs/maf5
//! ```

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::conditioner::Activation;
use crate::data::{self, Dataset, LoadOptions, Recipe, Split};
use crate::error::{FlowError, Result};
use crate::flow::{Family, ModelSpec};
use crate::masking::DegreeAssignment;
use crate::rng::{Rng, Stream};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    /// Draws from the two-dimensional banana-shaped test density.
    Figure1,
    File,
}

impl Source {
    fn name(self) -> &'static str {
        match self {
            Source::Figure1 => "figure1",
            Source::File => "file",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: Source,
    pub path: Option<PathBuf>,
    pub n: Option<usize>,
    pub recipe: Recipe,
    pub lambda: Option<f64>,
    pub test_fraction: f64,
    pub val_fraction: f64,
    pub correlation_threshold: f64,
    pub label_column: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub family: Family,
    pub layers: Option<usize>,
    pub hidden_layers: usize,
    pub hidden_units: usize,
    pub components: Option<usize>,
    pub activation: Activation,
    pub assignment: DegreeAssignment,
    pub batch_norm: Option<bool>,
    pub conditional: bool,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub step_size: Option<f64>,
    pub batch_size: usize,
    pub l2: f64,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub output_dir: PathBuf,
}

const DATASET_KEYS: &[&str] = &[
    "source",
    "path",
    "n",
    "recipe",
    "lambda",
    "test_fraction",
    "val_fraction",
    "correlation_threshold",
    "label_column",
    "seed",
];
const MODEL_KEYS: &[&str] = &[
    "family",
    "layers",
    "hidden_layers",
    "hidden_units",
    "components",
    "activation",
    "assignment",
    "batch_norm",
    "conditional",
    "seed",
];
const TRAIN_KEYS: &[&str] = &["step_size", "batch_size", "l2", "patience", "max_epochs", "seed"];
const OUTPUT_KEYS: &[&str] = &["dir"];

/// Drop `;` or `#` comments that follow whitespace on a line.
fn strip_inline_comments(text: &str) -> String {
    text.lines()
        .map(|line| {
            let cut = line
                .char_indices()
                .find(|&(i, c)| (c == ';' || c == '#') && i > 0 && line[..i].ends_with(char::is_whitespace))
                .map_or(line.len(), |(i, _)| i);
            line[..cut].trim_end()
        })
        .collect::<Vec<_>>()
        .join("\n")
}

fn cfg_err(key: &str, message: impl Into<String>) -> FlowError {
    FlowError::Config { key: key.into(), message: message.into() }
}

struct Section<'a> {
    name: &'static str,
    props: Option<&'a ini::Properties>,
}

impl Section<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.props.and_then(|p| p.get(key)).map(str::trim)
    }

    fn full(&self, key: &str) -> String {
        format!("{}.{key}", self.name)
    }

    fn parse<T: FromStr>(&self, key: &str, what: &str) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some(v) => v.parse().map(Some).map_err(|_| cfg_err(&self.full(key), format!("`{v}` is not {what}"))),
        }
    }

    fn count(&self, key: &str) -> Result<Option<usize>> {
        self.parse(key, "a non-negative integer")
    }

    fn real(&self, key: &str) -> Result<Option<f64>> {
        let v: Option<f64> = self.parse(key, "a number")?;
        match v {
            Some(x) if !x.is_finite() => Err(cfg_err(&self.full(key), "must be finite")),
            other => Ok(other),
        }
    }

    fn flag(&self, key: &str) -> Result<Option<bool>> {
        match self.raw(key) {
            None => Ok(None),
            Some("true") => Ok(Some(true)),
            Some("false") => Ok(Some(false)),
            Some(v) => Err(cfg_err(&self.full(key), format!("unknown value `{v}`; allowed: true, false"))),
        }
    }

    fn typed<T: FromStr<Err = FlowError>>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key).map(str::parse).transpose()
    }
}

fn check_keys(ini: &Ini) -> Result<()> {
    for (section, props) in ini.iter() {
        let allowed = match section {
            Some("dataset") => DATASET_KEYS,
            Some("model") => MODEL_KEYS,
            Some("train") => TRAIN_KEYS,
            Some("output") => OUTPUT_KEYS,
            None if props.is_empty() => continue,
            None => {
                let key = props.iter().next().map(|(k, _)| k).unwrap_or_default();
                return Err(cfg_err(key, "keys must sit inside a section; allowed sections: dataset, model, train, output"));
            }
            Some(other) => {
                return Err(cfg_err(other, "unknown section; allowed: dataset, model, train, output"));
            }
        };
        for (key, _) in props.iter() {
            if !allowed.contains(&key) {
                return Err(cfg_err(
                    &format!("{}.{key}", section.unwrap()),
                    format!("unknown key; allowed: {}", allowed.join(", ")),
                ));
            }
        }
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(&strip_inline_comments(text)).map_err(|e| cfg_err("<file>", e.to_string()))?;
        check_keys(&ini)?;
        let sec = |name: &'static str| Section { name, props: ini.section(Some(name)) };
        let (ds, md, tr, out) = (sec("dataset"), sec("model"), sec("train"), sec("output"));

        let source = match ds.raw("source") {
            None | Some("figure1") => Source::Figure1,
            Some("file") => Source::File,
            Some(v) => return Err(cfg_err("dataset.source", format!("unknown value `{v}`; allowed: figure1, file"))),
        };
        let dataset = DatasetConfig {
            source,
            path: ds.raw("path").map(PathBuf::from),
            n: ds.count("n")?,
            recipe: ds.typed("recipe")?.unwrap_or(Recipe::None),
            lambda: ds.real("lambda")?,
            test_fraction: ds.real("test_fraction")?.unwrap_or(0.1),
            val_fraction: ds.real("val_fraction")?.unwrap_or(0.1),
            correlation_threshold: ds.real("correlation_threshold")?.unwrap_or(0.98),
            label_column: ds.raw("label_column").map(str::to_string),
            seed: ds.parse("seed", "an unsigned integer")?.unwrap_or(0),
        };
        let family: Family = md.typed("family")?.ok_or_else(|| {
            cfg_err("model.family", "missing; allowed: made, made_mog, realnvp, maf, maf_mog")
        })?;
        let assignment = match md.raw("assignment") {
            None | Some("sequential") => DegreeAssignment::Sequential,
            Some("random") => DegreeAssignment::Random,
            Some(v) => return Err(cfg_err("model.assignment", format!("unknown value `{v}`; allowed: sequential, random"))),
        };
        let model = ModelConfig {
            family,
            layers: md.count("layers")?,
            hidden_layers: md.count("hidden_layers")?.unwrap_or(1),
            hidden_units: md.count("hidden_units")?.unwrap_or(100),
            components: md.count("components")?,
            activation: md.typed("activation")?.unwrap_or(Activation::Relu),
            assignment,
            batch_norm: md.flag("batch_norm")?,
            conditional: md.flag("conditional")?.unwrap_or(false),
            seed: md.parse("seed", "an unsigned integer")?.unwrap_or(0),
        };
        let defaults = TrainConfig::default();
        let train = TrainSection {
            step_size: tr.real("step_size")?,
            batch_size: tr.count("batch_size")?.unwrap_or(defaults.batch_size),
            l2: tr.real("l2")?.unwrap_or(defaults.l2),
            patience: tr.count("patience")?.unwrap_or(defaults.patience),
            max_epochs: tr.count("max_epochs")?.unwrap_or(defaults.max_epochs),
            seed: tr.parse("seed", "an unsigned integer")?.unwrap_or(0),
        };
        let output_dir = PathBuf::from(out.raw("dir").unwrap_or("."));
        let cfg = ExperimentConfig { dataset, model, train, output_dir };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.components.is_some() && !m.family.is_mixture() {
            return Err(cfg_err("model.components", format!("only applies to made_mog and maf_mog, not {}", m.family)));
        }
        if m.layers.is_some() && !m.family.is_flow() {
            return Err(cfg_err("model.layers", format!("only applies to realnvp, maf and maf_mog, not {}", m.family)));
        }
        if m.components == Some(0) {
            return Err(cfg_err("model.components", "must be at least 1"));
        }
        if m.hidden_layers == 0 {
            return Err(cfg_err("model.hidden_layers", "must be at least 1"));
        }
        if m.hidden_units == 0 {
            return Err(cfg_err("model.hidden_units", "must be at least 1"));
        }
        let d = &self.dataset;
        match d.source {
            Source::File if d.path.is_none() => return Err(cfg_err("dataset.path", "required when dataset.source = file")),
            Source::Figure1 if d.path.is_some() => return Err(cfg_err("dataset.path", "only applies to dataset.source = file")),
            _ => {}
        }
        if let Some(l) = d.lambda {
            if !(0.0..0.5).contains(&l) {
                return Err(cfg_err("dataset.lambda", format!("must lie in [0, 0.5), got {l}")));
            }
        }
        if m.conditional && d.label_column.is_none() {
            return Err(cfg_err("model.conditional", "needs dataset.label_column"));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            step_size: t.step_size.unwrap_or_else(|| self.model.family.default_step_size()),
            batch_size: t.batch_size,
            l2: t.l2,
            patience: t.patience,
            max_epochs: t.max_epochs,
            seed: t.seed,
            ..TrainConfig::default()
        }
    }

    pub fn model_spec(&self, dim: usize, cond_width: usize) -> ModelSpec {
        let m = &self.model;
        let mut spec = ModelSpec::new(m.family, dim)
            .layers(m.layers.unwrap_or(5))
            .hidden(vec![m.hidden_units; m.hidden_layers])
            .components(m.components.unwrap_or(10))
            .cond_width(cond_width)
            .activation(m.activation)
            .seed(m.seed);
        spec.assignment = m.assignment;
        if let Some(bn) = m.batch_norm {
            spec.batch_norm = bn;
        }
        spec
    }

    pub fn load_options(&self) -> LoadOptions {
        let d = &self.dataset;
        LoadOptions {
            recipe: d.recipe,
            lambda: d.lambda.unwrap_or(LoadOptions::default().lambda),
            test_fraction: d.test_fraction,
            val_fraction: d.val_fraction,
            correlation_threshold: d.correlation_threshold,
            label_column: if self.model.conditional { d.label_column.clone() } else { None },
            seed: d.seed,
        }
    }

    /// Build the dataset; relative file paths resolve against `base`.
    pub fn load_dataset(&self, base: &Path) -> Result<Dataset> {
        let d = &self.dataset;
        let opts = self.load_options();
        match d.source {
            Source::Figure1 => {
                let n = d.n.unwrap_or(10_000);
                let mut rng = Rng::stream(d.seed, Stream::Synthetic);
                let x = data::synthetic_figure1(n, &mut rng);
                let (train, val, test) = data::split_monolithic(&Split::new(x), d.test_fraction, d.val_fraction, d.seed)?;
                Ok(Dataset { name: "figure1".into(), train, val, test, transforms: vec![] })
            }
            Source::File => {
                let path = d.path.as_ref().expect("validated");
                let path = if path.is_absolute() { path.clone() } else { base.join(path) };
                let mut table = data::read_table(&path)?;
                if let Some(n) = d.n {
                    let keep: Vec<usize> = (0..n.min(table.data.rows())).collect();
                    table.data = table.data.select_rows(&keep);
                }
                let name = path.file_stem().map_or("data".into(), |s| s.to_string_lossy().into_owned());
                data::prepare(&name, table, &opts)
            }
        }
    }

    pub fn to_ini_string(&self) -> String {
        let mut s = String::new();
        let d = &self.dataset;
        let _ = writeln!(s, "[dataset]\nsource = {}", d.source.name());
        if let Some(p) = &d.path {
            let _ = writeln!(s, "path = {}", p.display());
        }
        if let Some(n) = d.n {
            let _ = writeln!(s, "n = {n}");
        }
        let _ = writeln!(s, "recipe = {}", d.recipe);
        if let Some(l) = d.lambda {
            let _ = writeln!(s, "lambda = {l:?}");
        }
        let _ = writeln!(s, "test_fraction = {:?}", d.test_fraction);
        let _ = writeln!(s, "val_fraction = {:?}", d.val_fraction);
        let _ = writeln!(s, "correlation_threshold = {:?}", d.correlation_threshold);
        if let Some(c) = &d.label_column {
            let _ = writeln!(s, "label_column = {c}");
        }
        let _ = writeln!(s, "seed = {}\n", d.seed);

        let m = &self.model;
        let _ = writeln!(s, "[model]\nfamily = {}", m.family);
        if let Some(k) = m.layers {
            let _ = writeln!(s, "layers = {k}");
        }
        let _ = writeln!(s, "hidden_layers = {}\nhidden_units = {}", m.hidden_layers, m.hidden_units);
        if let Some(c) = m.components {
            let _ = writeln!(s, "components = {c}");
        }
        let _ = writeln!(s, "activation = {}", m.activation);
        let assignment = match m.assignment {
            DegreeAssignment::Sequential => "sequential",
            DegreeAssignment::Random => "random",
        };
        let _ = writeln!(s, "assignment = {assignment}");
        if let Some(b) = m.batch_norm {
            let _ = writeln!(s, "batch_norm = {b}");
        }
        let _ = writeln!(s, "conditional = {}\nseed = {}\n", m.conditional, m.seed);

        let t = &self.train;
        let _ = writeln!(s, "[train]");
        if let Some(st) = t.step_size {
            let _ = writeln!(s, "step_size = {st:?}");
        }
        let _ = writeln!(
            s,
            "batch_size = {}\nl2 = {:?}\npatience = {}\nmax_epochs = {}\nseed = {}\n",
            t.batch_size, t.l2, t.patience, t.max_epochs, t.seed
        );
        let _ = writeln!(s, "[output]\ndir = {}", self.output_dir.display());
        s
    }
}
