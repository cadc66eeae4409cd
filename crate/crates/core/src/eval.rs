//! Evaluation: test log-likelihood reports, the Gaussian baseline, paired
//! comparisons, bits per pixel and label marginalization.

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{FlowError, Result};
use crate::flow::FlowModel;
use crate::tensor::{log_sum_exp, Tensor, LN_2PI};

/// Per-example log-likelihoods with their mean and ±2 standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub lls: Vec<f64>,
    pub mean: f64,
    pub two_sigma: f64,
    pub bpp: Option<BppSummary>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BppSummary {
    pub lambda: f64,
    pub mean: f64,
    pub two_sigma: f64,
}

/// Mean and `2·s/√N` with the sample standard deviation `s`.
pub fn mean_two_sigma(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 2.0 * var.sqrt() / n.sqrt())
}

impl EvalReport {
    pub fn from_lls(lls: Vec<f64>) -> Result<Self> {
        if lls.is_empty() {
            return Err(FlowError::usage("no examples to evaluate"));
        }
        let (mean, two_sigma) = mean_two_sigma(&lls);
        Ok(EvalReport { lls, mean, two_sigma, bpp: None })
    }

    pub fn n(&self) -> usize {
        self.lls.len()
    }

    /// Attach bits-per-pixel figures computed from the logit-space inputs.
    pub fn with_bpp(mut self, x: &Tensor, lambda: f64) -> Result<Self> {
        if x.rows() != self.lls.len() {
            return Err(FlowError::dim("bits per pixel", format!("{} rows for {} log-likelihoods", x.rows(), self.lls.len())));
        }
        let b: Vec<f64> = (0..x.rows()).map(|r| bits_per_pixel(self.lls[r], x.row_slice(r), lambda)).collect::<Result<_>>()?;
        let (mean, two_sigma) = mean_two_sigma(&b);
        self.bpp = Some(BppSummary { lambda, mean, two_sigma });
        Ok(self)
    }

    pub fn to_json(&self, model: &str, dataset: &str) -> serde_json::Value {
        #[derive(Serialize)]
        struct Out<'a> {
            model: &'a str,
            dataset: &'a str,
            mean_ll: f64,
            two_sigma: f64,
            n: usize,
            #[serde(skip_serializing_if = "Option::is_none")]
            bpp: Option<BppSummary>,
        }
        serde_json::to_value(Out { model, dataset, mean_ll: self.mean, two_sigma: self.two_sigma, n: self.n(), bpp: self.bpp })
            .expect("report serializes")
    }
}

// ---------------------------------------------------------------------------
// Gaussian baseline

/// Maximum-likelihood full-covariance Gaussian.
#[derive(Debug, Clone)]
pub struct GaussianBaseline {
    pub mean: Vec<f64>,
    /// Biased (divide-by-N) covariance, ridge included if one was added.
    pub cov: Vec<f64>,
    pub ridge: f64,
    chol_l: DMatrix<f64>,
    log_det: f64,
}

pub const BASELINE_RIDGE: f64 = 1e-6;

impl GaussianBaseline {
    pub fn fit(train: &Tensor) -> Result<Self> {
        let (n, d) = (train.rows(), train.cols());
        if n == 0 || d == 0 {
            return Err(FlowError::usage("Gaussian baseline needs non-empty data"));
        }
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (j, v) in train.row_slice(r).iter().enumerate() {
                mean[j] += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = DMatrix::<f64>::zeros(d, d);
        for r in 0..n {
            let row = train.row_slice(r);
            for a in 0..d {
                let da = row[a] - mean[a];
                for b in 0..=a {
                    cov[(a, b)] += da * (row[b] - mean[b]);
                }
            }
        }
        for a in 0..d {
            for b in 0..=a {
                let v = cov[(a, b)] / n as f64;
                cov[(a, b)] = v;
                cov[(b, a)] = v;
            }
        }
        let (chol, ridge) = match cov.clone().cholesky() {
            Some(c) if c.l().diagonal().iter().all(|&v| v > 0.0) => (c, 0.0),
            _ => {
                warn!("covariance is singular; adding {BASELINE_RIDGE}·I");
                let ridged = &cov + DMatrix::<f64>::identity(d, d) * BASELINE_RIDGE;
                let c = ridged
                    .cholesky()
                    .ok_or_else(|| FlowError::numeric(None, "Gaussian baseline", "covariance not positive definite after ridge"))?;
                cov += DMatrix::<f64>::identity(d, d) * BASELINE_RIDGE;
                (c, BASELINE_RIDGE)
            }
        };
        let chol_l = chol.l();
        let log_det = 2.0 * chol_l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(GaussianBaseline { mean, cov: cov.as_slice().to_vec(), ridge, chol_l, log_det })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_prob(&self, x: &[f64]) -> f64 {
        let d = self.dim();
        let diff = DVector::from_iterator(d, x.iter().zip(&self.mean).map(|(a, m)| a - m));
        let z = self.chol_l.solve_lower_triangular(&diff).expect("triangular factor is nonsingular");
        -0.5 * (d as f64 * LN_2PI + self.log_det + z.norm_squared())
    }

    pub fn log_prob_batch(&self, x: &Tensor) -> Result<Vec<f64>> {
        if x.cols() != self.dim() {
            return Err(FlowError::dim("Gaussian baseline", format!("data D={}, baseline D={}", x.cols(), self.dim())));
        }
        Ok((0..x.rows()).map(|r| self.log_prob(x.row_slice(r))).collect())
    }
}

// ---------------------------------------------------------------------------
// Paired comparison

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PairedComparison {
    /// Mean of `a − b` over examples.
    pub mean_diff: f64,
    pub two_sigma: f64,
    pub t: f64,
    /// Two-sided p-value under Student's t with N−1 degrees of freedom.
    pub p_value: f64,
    pub n: usize,
}

pub fn paired_compare(a: &[f64], b: &[f64]) -> Result<PairedComparison> {
    if a.len() != b.len() {
        return Err(FlowError::dim("paired comparison", format!("{} vs {} examples", a.len(), b.len())));
    }
    let n = a.len();
    if n < 2 {
        return Err(FlowError::usage("paired comparison needs at least two examples"));
    }
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let (mean, two_sigma) = mean_two_sigma(&diff);
    let se = two_sigma / 2.0;
    let t = if se > 0.0 {
        mean / se
    } else if mean == 0.0 {
        0.0
    } else {
        mean.signum() * f64::INFINITY
    };
    let p_value = student_t_two_sided(t, (n - 1) as f64);
    Ok(PairedComparison { mean_diff: mean, two_sigma, t, p_value, n })
}

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = C[0];
    let t = x + G + 0.5;
    for (i, &c) in C.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(x: f64, a: f64, b: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn regularized_beta(x: f64, a: f64, b: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(x, a, b) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(1.0 - x, b, a) / b
    }
}

/// `P(T ≤ t)` for Student's t with `nu` degrees of freedom.
pub fn student_t_cdf(t: f64, nu: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * regularized_beta(nu / (nu + t * t), 0.5 * nu, 0.5);
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// `P(|T| ≥ |t|)`.
pub fn student_t_two_sided(t: f64, nu: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    regularized_beta(nu / (nu + t * t), 0.5 * nu, 0.5)
}

// ---------------------------------------------------------------------------
// Bits per pixel

/// Bits per pixel of a logit-space point `x` whose model log-density is
/// `logp`.
pub fn bits_per_pixel(logp: f64, x: &[f64], lambda: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&lambda) {
        return Err(FlowError::usage(format!("logit λ must lie in [0, 0.5), got {lambda}")));
    }
    let d = x.len() as f64;
    let ln2 = std::f64::consts::LN_2;
    // log₂σ(x) + log₂(1 − σ(x)) = −(softplus(−x) + softplus(x))/ln 2.
    let softplus = |v: f64| v.max(0.0) + (-v.abs()).exp().ln_1p();
    let tail: f64 = x.iter().map(|&v| -(softplus(-v) + softplus(v)) / ln2).sum();
    Ok(-logp / (d * ln2) - (1.0 - 2.0 * lambda).log2() + 8.0 + tail / d)
}

// ---------------------------------------------------------------------------
// Label marginalization

/// `log Σ_y p(x | y) p(y)` over one-hot labels weighted by `prior`.
pub fn conditional_marginal_logprob(model: &FlowModel, x: &Tensor, prior: &[f64]) -> Result<Vec<f64>> {
    let k = prior.len();
    if k != model.cond_width() || k == 0 {
        return Err(FlowError::usage(format!("prior has {k} labels, model is conditional on {}", model.cond_width())));
    }
    if prior.iter().any(|&p| !(p >= 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(FlowError::usage("label prior must be non-negative and sum to 1"));
    }
    let n = x.rows();
    let mut per_label = Vec::with_capacity(k);
    for (label, &p) in prior.iter().enumerate() {
        let mut y = Tensor::zeros(&[n, k]);
        (0..n).for_each(|r| y.set(r, label, 1.0));
        let lp = model.log_prob_batch(x, Some(&y))?;
        per_label.push(lp.into_iter().map(|v| v + p.ln()).collect::<Vec<_>>());
    }
    Ok((0..n).map(|r| log_sum_exp(&per_label.iter().map(|l| l[r]).collect::<Vec<_>>())).collect())
}
