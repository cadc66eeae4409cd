use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde_json::json;

use flowcast::checkpoint;
use flowcast::config::ExperimentConfig;
use flowcast::data;
use flowcast::eval::{self, EvalReport, GaussianBaseline};
use flowcast::flow::{Family, FlowModel, ModelSpec};
use flowcast::rng::{Rng, Stream};
use flowcast::train;
use flowcast::{FlowError, Result, Tensor};

#[derive(Parser)]
#[command(name = "flowcast", version, about = "Train and evaluate autoregressive flows for density estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from an INI experiment config.
    Train {
        config: PathBuf,
        /// Override the output directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Report the mean test log-likelihood of a checkpoint on a data file.
    Eval(EvalArgs),
    /// Draw samples from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(short, long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Condition every sample on this label index.
        #[arg(long)]
        label: Option<usize>,
        /// Output file (.csv or raw matrix); stdout CSV if omitted.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Write log-densities on a regular 2-D grid as CSV (x1,x2,logp).
    Grid(GridArgs),
    /// Paired comparison of two checkpoints on the same examples.
    Compare {
        a: PathBuf,
        b: PathBuf,
        data: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Print exact and approximate parameter counts.
    Params(ParamsArgs),
}

#[derive(Args)]
struct EvalArgs {
    checkpoint: PathBuf,
    data: PathBuf,
    /// One-hot label file for conditional models.
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Also report bits per pixel for logit-space pixel data made with this λ.
    #[arg(long, value_name = "LAMBDA")]
    bpp: Option<f64>,
    /// Marginalize labels out of a conditional model under a uniform prior.
    #[arg(long)]
    conditional_marginal: bool,
    /// Also report the Gaussian baseline fitted to this training file.
    #[arg(long, value_name = "TRAIN")]
    baseline: Option<PathBuf>,
    #[arg(long, default_value = "data")]
    dataset: String,
    /// Write the JSON report here as well as to stdout.
    #[arg(short, long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GridArgs {
    checkpoint: PathBuf,
    /// x1min,x1max,x2min,x2max
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [-4.0, 4.0, -4.0, 4.0])]
    bounds: Vec<f64>,
    /// Cells per axis.
    #[arg(long, default_value_t = 100)]
    resolution: usize,
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Points to map to the base space.
    #[arg(long, requires = "points_out")]
    points: Option<PathBuf>,
    #[arg(long)]
    points_out: Option<PathBuf>,
}

#[derive(Args)]
struct ParamsArgs {
    /// Read the architecture from a checkpoint instead of the flags below.
    #[arg(long, conflicts_with_all = ["family", "dim"])]
    checkpoint: Option<PathBuf>,
    #[arg(long, required_unless_present = "checkpoint")]
    family: Option<String>,
    #[arg(long, required_unless_present = "checkpoint")]
    dim: Option<usize>,
    #[arg(long, default_value_t = 5)]
    layers: usize,
    #[arg(long, default_value_t = 1)]
    hidden_layers: usize,
    #[arg(long, default_value_t = 100)]
    hidden_units: usize,
    #[arg(long, default_value_t = 10)]
    components: usize,
    #[arg(long, default_value_t = 0)]
    cond_width: usize,
    #[arg(long)]
    no_batch_norm: bool,
    #[arg(long)]
    json: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &FlowError) -> u8 {
    if e.is_numeric() {
        1
    } else {
        2
    }
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("FLOWCAST_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| FlowError::usage(format!("FLOWCAST_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| FlowError::usage(format!("thread pool: {e}")))
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train { config, out } => cmd_train(&config, out),
        Command::Eval(a) => cmd_eval(a),
        Command::Sample { checkpoint, n, seed, label, out } => cmd_sample(&checkpoint, n, seed, label, out.as_deref()),
        Command::Grid(a) => cmd_grid(a),
        Command::Compare { a, b, data, labels, json } => cmd_compare(&a, &b, &data, labels.as_deref(), json),
        Command::Params(a) => cmd_params(a),
    }
}

fn read_matrix(path: &Path) -> Result<Tensor> {
    Ok(data::read_table(path)?.data)
}

fn write_matrix(path: &Path, x: &Tensor, prefix: &str) -> Result<()> {
    if path.extension().is_some_and(|e| e == "csv") {
        let cols: Vec<String> = (1..=x.cols()).map(|i| format!("{prefix}{i}")).collect();
        data::write_csv(path, &cols, x)
    } else {
        data::write_raw(path, x)
    }
}

fn check_dim(model: &FlowModel, x: &Tensor) -> Result<()> {
    if x.cols() != model.dim() {
        return Err(FlowError::dim(
            "eval",
            format!("checkpoint has D = {}, data has D = {}", model.dim(), x.cols()),
        ));
    }
    Ok(())
}

fn load_labels(model: &FlowModel, path: Option<&Path>, rows: usize) -> Result<Option<Tensor>> {
    match (model.cond_width(), path) {
        (0, None) => Ok(None),
        (0, Some(_)) => Err(FlowError::usage("labels given for an unconditional model")),
        (w, None) => Err(FlowError::usage(format!(
            "model is conditional on {w} labels; pass --labels or --conditional-marginal"
        ))),
        (w, Some(p)) => {
            let y = read_matrix(p)?;
            if y.cols() != w || y.rows() != rows {
                return Err(FlowError::dim(
                    "labels",
                    format!("expected {rows}×{w}, got {}×{}", y.rows(), y.cols()),
                ));
            }
            Ok(Some(y))
        }
    }
}

fn cmd_train(config: &Path, out: Option<PathBuf>) -> Result<()> {
    let cfg = ExperimentConfig::load(config)?;
    let base = config.parent().unwrap_or(Path::new("."));
    let out_dir = out.unwrap_or_else(|| {
        if cfg.output_dir.is_absolute() {
            cfg.output_dir.clone()
        } else {
            base.join(&cfg.output_dir)
        }
    });
    fs::create_dir_all(&out_dir)?;

    let ds = cfg.load_dataset(base)?;
    let cond_width = ds.train.y.as_ref().map_or(0, |y| y.cols());
    info!(
        "dataset {}: D = {}, train {}, val {}, test {}",
        ds.name,
        ds.dim(),
        ds.train.rows(),
        ds.val.rows(),
        ds.test.rows()
    );
    let mut model = FlowModel::new(cfg.model_spec(ds.dim(), cond_width))?;
    let tc = cfg.train_config();
    let history = train::train(&mut model, &ds.train, &ds.val, &tc)?;
    if let Some(b) = history.best_epoch() {
        info!("best epoch {} with validation ll {:.6}", b.epoch, b.val_ll);
    }

    checkpoint::save(&model, &out_dir.join("model.ckpt"))?;
    history.save_csv(&out_dir.join("history.csv"))?;
    data::write_raw(&out_dir.join("train.mat"), &ds.train.x)?;
    data::write_raw(&out_dir.join("test.mat"), &ds.test.x)?;
    if let Some(y) = &ds.test.y {
        data::write_raw(&out_dir.join("test_labels.mat"), y)?;
    }
    fs::write(out_dir.join("config.ini"), cfg.to_ini_string())?;

    let lls = model.log_prob_batch(&ds.test.x, ds.test.y.as_ref())?;
    let mut report = EvalReport::from_lls(lls)?;
    if cfg.dataset.recipe == data::Recipe::Pixels {
        report = report.with_bpp(&ds.test.x, cfg.load_options().lambda)?;
    }
    let j = report.to_json(cfg.model.family.name(), &ds.name);
    fs::write(out_dir.join("eval.json"), serde_json::to_string_pretty(&j)?)?;
    println!("{}", serde_json::to_string(&j)?);
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    let x = read_matrix(&a.data)?;
    check_dim(&model, &x)?;
    let lls = if a.conditional_marginal {
        let w = model.cond_width();
        if w == 0 {
            return Err(FlowError::usage("--conditional-marginal needs a conditional model"));
        }
        eval::conditional_marginal_logprob(&model, &x, &vec![1.0 / w as f64; w])?
    } else {
        let y = load_labels(&model, a.labels.as_deref(), x.rows())?;
        model.log_prob_batch(&x, y.as_ref())?
    };
    let mut report = EvalReport::from_lls(lls)?;
    if let Some(lambda) = a.bpp {
        report = report.with_bpp(&x, lambda)?;
    }
    let mut j = report.to_json(model.spec().family.name(), &a.dataset);
    if let Some(train_path) = &a.baseline {
        let t = read_matrix(train_path)?;
        check_dim(&model, &t)?;
        let g = GaussianBaseline::fit(&t)?;
        let base = EvalReport::from_lls(g.log_prob_batch(&x)?)?;
        j["baseline"] = json!({ "mean_ll": base.mean, "two_sigma": base.two_sigma });
    }
    let text = serde_json::to_string_pretty(&j)?;
    if let Some(p) = &a.out {
        fs::write(p, &text)?;
    }
    println!("{text}");
    Ok(())
}

fn cmd_sample(ckpt: &Path, n: usize, seed: u64, label: Option<usize>, out: Option<&Path>) -> Result<()> {
    let model = checkpoint::load(ckpt)?;
    let w = model.cond_width();
    let y = match (w, label) {
        (0, None) => None,
        (0, Some(_)) => return Err(FlowError::usage("--label given for an unconditional model")),
        (w, None) => return Err(FlowError::usage(format!("model is conditional on {w} labels; pass --label"))),
        (w, Some(k)) if k >= w => return Err(FlowError::usage(format!("label {k} out of range 0..{w}"))),
        (w, Some(k)) => {
            let mut y = Tensor::zeros(&[n, w]);
            (0..n).for_each(|r| y.set(r, k, 1.0));
            Some(y)
        }
    };
    let mut rng = Rng::stream(seed, Stream::Sampling);
    let x = model.sample_n(n, &mut rng, y.as_ref())?;
    match out {
        Some(p) => write_matrix(p, &x, "x"),
        None => {
            let mut w = csv::Writer::from_writer(io::stdout().lock());
            w.write_record((1..=x.cols()).map(|i| format!("x{i}")))?;
            for r in 0..x.rows() {
                w.write_record(x.row_slice(r).iter().map(|v| format!("{v:?}")))?;
            }
            w.flush()?;
            Ok(())
        }
    }
}

/// Cell-centre coordinates of `resolution` equal cells on `[lo, hi]`.
fn cell_centres(lo: f64, hi: f64, resolution: usize) -> Vec<f64> {
    let h = (hi - lo) / resolution as f64;
    (0..resolution).map(|i| lo + (i as f64 + 0.5) * h).collect()
}

fn cmd_grid(a: GridArgs) -> Result<()> {
    let model = checkpoint::load(&a.checkpoint)?;
    if model.dim() != 2 {
        return Err(FlowError::usage(format!("grid needs a 2-D model, checkpoint has D = {}", model.dim())));
    }
    if model.cond_width() != 0 {
        return Err(FlowError::usage("grid does not support conditional models"));
    }
    if a.resolution == 0 {
        return Err(FlowError::usage("--resolution must be at least 1"));
    }
    let b = &a.bounds;
    if b.len() != 4 || !(b[0] < b[1] && b[2] < b[3]) {
        return Err(FlowError::usage("--bounds must be x1min,x1max,x2min,x2max with min < max"));
    }
    let (g1, g2) = (cell_centres(b[0], b[1], a.resolution), cell_centres(b[2], b[3], a.resolution));
    let mut pts = Vec::with_capacity(2 * g1.len() * g2.len());
    for &x1 in &g1 {
        for &x2 in &g2 {
            pts.extend([x1, x2]);
        }
    }
    let x = Tensor::matrix(g1.len() * g2.len(), 2, pts)?;
    let lp = model.log_prob_batch(&x, None)?;
    let cell = (b[1] - b[0]) * (b[3] - b[2]) / (a.resolution * a.resolution) as f64;
    let mass: f64 = lp.iter().map(|v| v.exp()).sum::<f64>() * cell;
    info!("grid probability mass {mass:.6}");

    let sink: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(fs::File::create(p)?),
        None => Box::new(io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["x1", "x2", "logp"])?;
    for (r, v) in lp.iter().enumerate() {
        w.write_record([format!("{:?}", x.get(r, 0)), format!("{:?}", x.get(r, 1)), format!("{v:?}")])?;
    }
    w.flush()?;

    if let (Some(src), Some(dst)) = (&a.points, &a.points_out) {
        let p = read_matrix(src)?;
        check_dim(&model, &p)?;
        write_matrix(dst, &model.inverse(&p, None)?, "u")?;
    }
    Ok(())
}

fn cmd_compare(a: &Path, b: &Path, data_path: &Path, labels: Option<&Path>, as_json: bool) -> Result<()> {
    let (ma, mb) = (checkpoint::load(a)?, checkpoint::load(b)?);
    if ma.dim() != mb.dim() {
        return Err(FlowError::dim("compare", format!("checkpoints have D = {} and D = {}", ma.dim(), mb.dim())));
    }
    let x = read_matrix(data_path)?;
    check_dim(&ma, &x)?;
    let la = ma.log_prob_batch(&x, load_labels(&ma, labels, x.rows())?.as_ref())?;
    let lb = mb.log_prob_batch(&x, load_labels(&mb, labels, x.rows())?.as_ref())?;
    let c = eval::paired_compare(&la, &lb)?;
    if c.p_value < 0.05 && c.mean_diff.abs() > 0.0 {
        info!("difference is significant at the 5% level");
    }
    if as_json {
        let j = json!({
            "a": a.display().to_string(),
            "b": b.display().to_string(),
            "mean_diff": c.mean_diff,
            "two_sigma": c.two_sigma,
            "t": c.t,
            "p_value": c.p_value,
            "n": c.n,
        });
        println!("{}", serde_json::to_string_pretty(&j)?);
    } else {
        println!("{:<24} {:<24} {:>14} {:>12} {:>10} {:>12}", "A", "B", "mean diff", "±2σ", "t", "p");
        println!(
            "{:<24} {:<24} {:>14.6} {:>12.6} {:>10.3} {:>12.3e}",
            short_name(a),
            short_name(b),
            c.mean_diff,
            c.two_sigma,
            c.t,
            c.p_value
        );
    }
    Ok(())
}

fn short_name(p: &Path) -> String {
    p.file_name().map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned())
}

fn cmd_params(a: ParamsArgs) -> Result<()> {
    let model = match &a.checkpoint {
        Some(p) => checkpoint::load(p)?,
        None => {
            let family: Family = a.family.as_deref().expect("required by clap").parse()?;
            let dim = a.dim.expect("required by clap");
            let mut spec = ModelSpec::new(family, dim)
                .layers(a.layers)
                .hidden(vec![a.hidden_units; a.hidden_layers])
                .components(a.components)
                .cond_width(a.cond_width);
            if a.no_batch_norm {
                spec = spec.batch_norm(false);
            }
            FlowModel::new(spec)?
        }
    };
    let c = model.count_params();
    let exact = c.weights;
    let rel = (c.approx - exact as f64) / exact as f64;
    if a.json {
        let j = json!({
            "family": model.spec().family.name(),
            "dim": model.dim(),
            "weights": c.weights,
            "biases": c.biases,
            "norm": c.norm,
            "exact": exact,
            "total": c.weights + c.biases + c.norm,
            "approx": c.approx,
            "relative_error": rel,
        });
        println!("{}", serde_json::to_string_pretty(&j)?);
    } else {
        println!("family          {}", model.spec().family.name());
        println!("weights (exact) {}", c.weights);
        println!("biases          {}", c.biases);
        println!("batch-norm      {}", c.norm);
        println!("total           {}", c.weights + c.biases + c.norm);
        println!("approximate     {:.0}", c.approx);
        println!("relative error  {:+.4}", rel);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_centres_cover_interval() {
        assert_eq!(cell_centres(-1.0, 1.0, 1), vec![0.0]);
        assert_eq!(cell_centres(0.0, 4.0, 4), vec![0.5, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn numeric_failures_exit_one() {
        assert_eq!(exit_code(&FlowError::numeric(Some(0), "x", "nan")), 1);
        assert_eq!(exit_code(&FlowError::usage("bad")), 2);
        assert_eq!(exit_code(&FlowError::Config { key: "k".into(), message: "m".into() }), 2);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
