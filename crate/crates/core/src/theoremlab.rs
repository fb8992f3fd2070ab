//! Numerical verification of the dilution results and of the FOCAL guarantees.
//!
//! Each `verify_*` returns a [`TheoremReport`]: a list of named checks, each
//! with a measured value and the interval it must fall in, plus curves for
//! external plotting. Trials draw from per-trial ChaCha8 streams and run in
//! parallel; results are aggregated by trial index, so reports are
//! reproducible bit for bit (apart from `runtime_secs`).

use std::f64::consts::LN_2;
use std::fmt::Write as _;
use std::time::Instant;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aoa::{aoa_multi, beta_from_scores, semantic_mass};
use crate::error::{Error, Result};
use crate::fusion::{gate_floor, layer_aoa_vars, trace_forward};
use crate::hetgraph::{HetGraph, NodeRef, NodeTypeId, Relation, Split};
use crate::layout::ModelGraph;
use crate::params::FocalParams;
use crate::rng::{fnv1a, stream, Rng};
use crate::tape::Tape;
use crate::tensor::{log1p_exp, norm, softmax, Tensor};
use crate::trainer::{ablation_mode, names, train, FocalConfig, Mode};

/// Numerical slack allowed on proved inequalities.
pub const SLACK: f64 = 1e-9;

/// Per-trial stream: the key mixes the run seed with the check name.
pub fn trial_rng(seed: u64, scope: &str, trial: u64) -> Rng {
    stream(seed ^ fnv1a(scope.as_bytes()), trial)
}

/// One measured quantity and the closed interval it must fall in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub reference: f64,
    pub tolerance: f64,
    pub lower: f64,
    pub upper: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: impl Into<String>, measured: f64, reference: f64, tolerance: f64, lower: f64, upper: f64) -> Check {
        Check {
            name: name.into(),
            measured,
            reference,
            tolerance,
            lower,
            upper,
            pass: measured >= lower && measured <= upper,
        }
    }

    /// `|measured - reference| <= tol`.
    pub fn abs(name: impl Into<String>, measured: f64, reference: f64, tol: f64) -> Check {
        Check::new(name, measured, reference, tol, reference - tol, reference + tol)
    }

    /// `|measured - reference| <= tol * |reference|`.
    pub fn rel(name: impl Into<String>, measured: f64, reference: f64, tol: f64) -> Check {
        let w = tol * reference.abs();
        Check::new(name, measured, reference, tol, reference - w, reference + w)
    }

    /// `measured <= bound + slack`.
    pub fn at_most(name: impl Into<String>, measured: f64, bound: f64, slack: f64) -> Check {
        Check::new(name, measured, bound, slack, f64::NEG_INFINITY, bound + slack)
    }

    /// `measured >= bound - slack`.
    pub fn at_least(name: impl Into<String>, measured: f64, bound: f64, slack: f64) -> Check {
        Check::new(name, measured, bound, slack, bound - slack, f64::INFINITY)
    }

    pub fn range(name: impl Into<String>, measured: f64, lower: f64, upper: f64) -> Check {
        Check::new(name, measured, 0.5 * (lower + upper), 0.5 * (upper - lower), lower, upper)
    }
}

/// `(x, y)` series for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
}

impl Curve {
    pub fn new(name: impl Into<String>, x_label: &str, y_label: &str, points: Vec<(f64, f64)>) -> Curve {
        Curve {
            name: name.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            points,
        }
    }

    /// Two whitespace-separated columns with a commented header.
    pub fn to_columns(&self) -> String {
        let mut s = format!("# {}\n# {} {}\n", self.name, self.x_label, self.y_label);
        for (x, y) in &self.points {
            let _ = writeln!(s, "{x:e} {y:e}");
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub id: String,
    pub checks: Vec<Check>,
    pub curves: Vec<Curve>,
    pub pass: bool,
    pub runtime_secs: f64,
}

impl TheoremReport {
    fn finish(id: &str, checks: Vec<Check>, curves: Vec<Curve>, started: Instant) -> TheoremReport {
        TheoremReport {
            id: id.into(),
            pass: !checks.is_empty() && checks.iter().all(|c| c.pass),
            checks,
            curves,
            runtime_secs: started.elapsed().as_secs_f64(),
        }
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    pub fn without_timing(&self) -> TheoremReport {
        TheoremReport {
            runtime_secs: 0.0,
            ..self.clone()
        }
    }

    /// `key = value` lines, one block per check.
    pub fn to_text(&self) -> String {
        let mut s = format!("theorem = {}\npass = {}\nruntime_secs = {:.3}\n", self.id, self.pass, self.runtime_secs);
        for c in &self.checks {
            let _ = writeln!(
                s,
                "check = {} measured = {:e} reference = {:e} tolerance = {:e} interval = [{:e}, {:e}] pass = {}",
                c.name, c.measured, c.reference, c.tolerance, c.lower, c.upper, c.pass
            );
        }
        s
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Least-squares slope of `ys` against `xs`.
pub fn ols_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let (mx, my) = (mean(xs), mean(ys));
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Vector of dimension `d` with a uniform direction and norm `r`.
fn vector_with_norm(rng: &mut Rng, d: usize, r: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x * r / n).collect();
        }
    }
}

/// Matrix whose columns are vectors with norms drawn uniformly in `(0, max]`.
fn bounded_columns(rng: &mut Rng, d: usize, k: usize, max: f64) -> (Tensor, Vec<f64>) {
    let mut w = Tensor::zeros(d, k);
    let mut norms = Vec::with_capacity(k);
    for j in 0..k {
        let r = max * (1.0 - rng.random::<f64>());
        for (i, x) in vector_with_norm(rng, d, r).into_iter().enumerate() {
            w.set(i, j, x);
        }
        norms.push(r);
    }
    (w, norms)
}

// ---------------------------------------------------------------- dilution

/// Distribution of attention logits.
#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum LogitDist {
    Point { value: f64 },
    Normal { mean: f64, std: f64 },
    Uniform { low: f64, high: f64 },
    /// No closed form used; `E[exp]` is estimated.
    Logistic { loc: f64, scale: f64 },
}

/// `E[exp(E)]` and whether it is exact.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct ExpMean {
    pub value: f64,
    pub exact: bool,
}

/// Samples used to estimate `E[exp(E)]` without a closed form.
pub const EXP_MEAN_SAMPLES: usize = 10_000_000;

impl LogitDist {
    /// Parses `name` with positional parameters, e.g. `("normal", [0, 1])`.
    pub fn parse(name: &str, params: &[f64]) -> Result<LogitDist> {
        let want = |n: usize| {
            if params.len() == n {
                Ok(())
            } else {
                Err(Error::Config(format!("distribution `{name}` takes {n} parameter(s), got {}", params.len())))
            }
        };
        let d = match name {
            "point" => {
                want(1)?;
                LogitDist::Point { value: params[0] }
            }
            "normal" => {
                want(2)?;
                LogitDist::Normal {
                    mean: params[0],
                    std: params[1],
                }
            }
            "uniform" => {
                want(2)?;
                LogitDist::Uniform {
                    low: params[0],
                    high: params[1],
                }
            }
            "logistic" => {
                want(2)?;
                LogitDist::Logistic {
                    loc: params[0],
                    scale: params[1],
                }
            }
            other => return Err(Error::UnknownDistribution(other.into())),
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            LogitDist::Point { value } => value.is_finite(),
            LogitDist::Normal { mean, std } => mean.is_finite() && std.is_finite() && std >= 0.0,
            LogitDist::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
            LogitDist::Logistic { loc, scale } => loc.is_finite() && scale > 0.0 && scale < 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid parameters for {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> f64 {
        match *self {
            LogitDist::Point { value } => value,
            LogitDist::Normal { mean, std } => mean + std * normal(rng),
            LogitDist::Uniform { low, high } => {
                if low == high {
                    low
                } else {
                    rng.random_range(low..high)
                }
            }
            LogitDist::Logistic { loc, scale } => {
                let u: f64 = rng.random_range(f64::EPSILON..1.0);
                loc + scale * (u / (1.0 - u)).ln()
            }
        }
    }

    /// The same distribution moved by `delta`.
    pub fn shifted(&self, delta: f64) -> LogitDist {
        match *self {
            LogitDist::Point { value } => LogitDist::Point { value: value + delta },
            LogitDist::Normal { mean, std } => LogitDist::Normal { mean: mean + delta, std },
            LogitDist::Uniform { low, high } => LogitDist::Uniform {
                low: low + delta,
                high: high + delta,
            },
            LogitDist::Logistic { loc, scale } => LogitDist::Logistic { loc: loc + delta, scale },
        }
    }

    /// `E[exp(E)]`: closed form for point, normal and uniform; otherwise a
    /// Monte-Carlo estimate over [`EXP_MEAN_SAMPLES`] draws.
    pub fn exp_mean(&self, seed: u64) -> ExpMean {
        let exact = |value| ExpMean { value, exact: true };
        match *self {
            LogitDist::Point { value } => exact(value.exp()),
            LogitDist::Normal { mean, std } => exact((mean + 0.5 * std * std).exp()),
            LogitDist::Uniform { low, high } => {
                if low == high {
                    exact(low.exp())
                } else {
                    exact((high.exp() - low.exp()) / (high - low))
                }
            }
            LogitDist::Logistic { .. } => {
                let mut rng = trial_rng(seed, "dilution/exp-mean", 0);
                let sum: f64 = (0..EXP_MEAN_SAMPLES).map(|_| self.sample(&mut rng).exp()).sum();
                ExpMean {
                    value: sum / EXP_MEAN_SAMPLES as f64,
                    exact: false,
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DilutionTrialConfig {
    pub n_star: usize,
    pub m_values: Vec<usize>,
    pub primary: LogitDist,
    pub secondary: LogitDist,
    pub trials: usize,
    pub seed: u64,
    /// Allowed relative error of the mean primary mass.
    pub rel_tol: f64,
    pub slope_range: (f64, f64),
    /// Negative control: secondary logits shift by `-drift * ln m`, which
    /// breaks the i.i.d. assumption. Zero for the real check.
    pub drift: f64,
}

impl Default for DilutionTrialConfig {
    fn default() -> Self {
        DilutionTrialConfig {
            n_star: 4,
            m_values: vec![256, 512, 1024, 2048, 4096],
            primary: LogitDist::Normal { mean: 0.0, std: 1.0 },
            secondary: LogitDist::Normal { mean: 0.0, std: 1.0 },
            trials: 2000,
            seed: 0,
            rel_tol: 0.02,
            slope_range: (-1.1, -0.9),
            drift: 0.0,
        }
    }
}

impl DilutionTrialConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 || self.n_star == 0 {
            return Err(Error::Config("trials and n_star must be at least 1".into()));
        }
        if self.m_values.is_empty() || self.m_values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("m_values must be nonempty and strictly ascending".into()));
        }
        self.primary.validate()?;
        self.secondary.validate()
    }
}

/// Predicted primary mass `n* mu* / (n* mu* + m mu)`.
pub fn dilution_reference(n_star: usize, m: usize, mu_star: f64, mu: f64) -> f64 {
    let p = n_star as f64 * mu_star;
    p / (p + m as f64 * mu)
}

/// Monte-Carlo summary of one `m`.
#[derive(Clone, Debug, PartialEq)]
pub struct DilutionPoint {
    pub m: usize,
    /// Plain sample mean of `A*`.
    pub naive: f64,
    /// Control-variate estimate of `E[A*]` using the primary exp-sum, whose mean is known.
    pub estimate: f64,
    pub reference: f64,
    pub min: f64,
    pub max: f64,
}

/// Samples `A*` for each trial and returns the point summary.
pub fn dilution_point(cfg: &DilutionTrialConfig, idx: usize, mu_star: f64, mu: f64) -> DilutionPoint {
    let m = cfg.m_values[idx];
    let secondary = cfg.secondary.shifted(-cfg.drift * (m as f64).ln());
    let draws: Vec<(f64, f64)> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(cfg.seed, "dilution", ((idx as u64) << 32) | i as u64);
            let s: f64 = (0..cfg.n_star).map(|_| cfg.primary.sample(&mut rng).exp()).sum();
            let t: f64 = (0..m).map(|_| secondary.sample(&mut rng).exp()).sum();
            (s / (s + t), s)
        })
        .collect();
    let a: Vec<f64> = draws.iter().map(|d| d.0).collect();
    let s: Vec<f64> = draws.iter().map(|d| d.1).collect();
    let (ma, ms) = (mean(&a), mean(&s));
    let cov: f64 = a.iter().zip(&s).map(|(x, y)| (x - ma) * (y - ms)).sum();
    let var: f64 = s.iter().map(|y| (y - ms) * (y - ms)).sum();
    let b = if var > 0.0 { cov / var } else { 0.0 };
    let estimate = ma - b * (ms - cfg.n_star as f64 * mu_star);
    DilutionPoint {
        m,
        naive: ma,
        estimate,
        reference: dilution_reference(cfg.n_star, m, mu_star, mu),
        min: a.iter().copied().fold(f64::INFINITY, f64::min),
        max: a.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Mean primary mass against the closed-form prediction at every `m`, plus
/// the log-log slope of the measured curve.
pub fn verify_dilution(cfg: &DilutionTrialConfig) -> Result<TheoremReport> {
    cfg.validate()?;
    let started = Instant::now();
    let mu_star = cfg.primary.exp_mean(cfg.seed);
    let mu = cfg.secondary.exp_mean(cfg.seed.wrapping_add(1));
    let points: Vec<DilutionPoint> = (0..cfg.m_values.len())
        .map(|i| dilution_point(cfg, i, mu_star.value, mu.value))
        .collect();
    let mut checks = Vec::new();
    for p in &points {
        checks.push(Check::rel(format!("mean_primary_mass_m{}", p.m), p.estimate, p.reference, cfg.rel_tol));
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.m as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.estimate.ln()).collect();
    if points.len() >= 2 {
        checks.push(Check::range("loglog_slope", ols_slope(&xs, &ys), cfg.slope_range.0, cfg.slope_range.1));
    }
    checks.push(Check::abs("mu_star_over_mu", mu_star.value / mu.value, mu_star.value / mu.value, 0.0));
    let curves = vec![
        Curve::new(
            "primary_mass_measured",
            "m",
            "mean_A*",
            points.iter().map(|p| (p.m as f64, p.estimate)).collect(),
        ),
        Curve::new(
            "primary_mass_naive",
            "m",
            "mean_A*",
            points.iter().map(|p| (p.m as f64, p.naive)).collect(),
        ),
        Curve::new(
            "primary_mass_predicted",
            "m",
            "A*",
            points.iter().map(|p| (p.m as f64, p.reference)).collect(),
        ),
    ];
    Ok(TheoremReport::finish("dilution", checks, curves, started))
}

/// Ratios `mu*/mu` reported by the dilution suite.
pub const MU_RATIOS: [f64; 3] = [1.0, 2.0, 8.0];

/// Runs [`verify_dilution`] with normal logits at each ratio in
/// [`MU_RATIOS`] (primary mean `ln r`), plus the equal-logit exact case.
/// Only the `mu*/mu = 1` run gates the report; the others are reported as
/// relative-error curves since the prediction is asymptotic in `m`.
pub fn dilution_suite(seed: u64) -> Result<TheoremReport> {
    let started = Instant::now();
    let mut checks = Vec::new();
    let mut curves = Vec::new();
    for (i, r) in MU_RATIOS.iter().enumerate() {
        let cfg = DilutionTrialConfig {
            primary: LogitDist::Normal { mean: r.ln(), std: 1.0 },
            seed: seed.wrapping_add(i as u64),
            ..Default::default()
        };
        let rep = verify_dilution(&cfg)?;
        let tag = format!("ratio{r}");
        if *r == 1.0 {
            checks.extend(rep.checks.iter().cloned());
        }
        let errs = rep
            .checks
            .iter()
            .filter(|c| c.name.starts_with("mean_primary_mass_m"))
            .zip(&cfg.m_values)
            .map(|(c, &m)| (m as f64, (c.measured - c.reference) / c.reference))
            .collect();
        curves.push(Curve::new(format!("{tag}/relative_error"), "m", "rel_error", errs));
        curves.extend(rep.curves.into_iter().map(|mut c| {
            c.name = format!("{tag}/{}", c.name);
            c
        }));
    }
    checks.extend(dilution_point_mass_checks(4, &DilutionTrialConfig::default().m_values, seed));
    Ok(TheoremReport::finish("dilution", checks, curves, started))
}

/// Equal logits make `A* = n*/(n*+m)` on every trial.
pub fn dilution_point_mass_checks(n_star: usize, m_values: &[usize], seed: u64) -> Vec<Check> {
    let cfg = DilutionTrialConfig {
        n_star,
        m_values: m_values.to_vec(),
        primary: LogitDist::Point { value: 0.3 },
        secondary: LogitDist::Point { value: 0.3 },
        trials: 4,
        seed,
        ..Default::default()
    };
    (0..m_values.len())
        .map(|i| {
            let p = dilution_point(&cfg, i, 1.0, 1.0);
            let exact = n_star as f64 / (n_star + p.m) as f64;
            let worst = (p.min - exact).abs().max((p.max - exact).abs());
            Check::abs(format!("point_mass_m{}", p.m), exact + worst, exact, 1e-12)
        })
        .collect()
}

/// Negative control: with `m`-dependent secondary drift the dilution check
/// must fail. The report passes when it does.
pub fn dilution_negative_control(seed: u64) -> Result<TheoremReport> {
    let started = Instant::now();
    let cfg = DilutionTrialConfig {
        drift: 1.0,
        seed,
        ..Default::default()
    };
    let inner = verify_dilution(&cfg)?;
    let failed = inner.failures().count() as f64;
    let mut checks = vec![Check::at_least("failed_checks_under_drift", failed, 1.0, 0.0)];
    if let Some(slope) = inner.check("loglog_slope") {
        checks.push(Check::new(
            "slope_outside_range_under_drift",
            if slope.pass { 0.0 } else { 1.0 },
            1.0,
            0.0,
            1.0,
            1.0,
        ));
    }
    Ok(TheoremReport::finish("dilution_negative_control", checks, inner.curves, started))
}

// ------------------------------------------------------ gradient attenuation

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub trials: usize,
    pub seed: u64,
    pub max_n_star: usize,
    pub max_m: usize,
    pub max_labels: usize,
    pub max_dim: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            trials: 10_000,
            seed: 0,
            max_n_star: 5,
            max_m: 200,
            max_labels: 6,
            max_dim: 8,
        }
    }
}

/// One aggregation `h = sum_s alpha_s m_s` with `n*` primary messages first.
#[derive(Clone, Debug)]
pub struct ToyAggregation {
    /// `1 x n*` attention on primary messages.
    pub alpha_primary: Tensor,
    /// `1 x m` attention on secondary messages.
    pub alpha_secondary: Tensor,
    /// `n* x d`.
    pub primary: Tensor,
    /// `m x d`.
    pub secondary: Tensor,
}

impl ToyAggregation {
    pub fn primary_mass(&self) -> f64 {
        self.alpha_primary.sum()
    }

    /// Attention from standard-normal logits; messages standard normal.
    pub fn sample(rng: &mut Rng, n_star: usize, m: usize, d: usize) -> ToyAggregation {
        let logits: Vec<f64> = (0..n_star + m).map(|_| normal(rng)).collect();
        let alpha = softmax(&logits).expect("nonempty");
        let mat = |rng: &mut Rng, r: usize| Tensor::from_vec(r, d, (0..r * d).map(|_| normal(rng)).collect()).expect("sized");
        ToyAggregation {
            alpha_primary: Tensor::from_vec(1, n_star, alpha[..n_star].to_vec()).expect("sized"),
            alpha_secondary: Tensor::from_vec(1, m, alpha[n_star..].to_vec()).expect("sized"),
            primary: mat(rng, n_star),
            secondary: mat(rng, m),
        }
    }
}

/// `sum_k -log sigmoid(z_k)` for `z = h W` (all labels positive) and the
/// gradient with respect to the primary messages, by reverse-mode autodiff.
pub fn positive_bce_and_grad(agg: &ToyAggregation, w: &Tensor) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let p = tape.leaf(agg.primary.clone());
    let ap = tape.constant(agg.alpha_primary.clone());
    let hp = tape.matmul(ap, p)?;
    let h = if agg.secondary.rows() > 0 {
        let s = tape.constant(agg.secondary.clone());
        let a_s = tape.constant(agg.alpha_secondary.clone());
        let hs = tape.matmul(a_s, s)?;
        tape.add(hp, hs)?
    } else {
        hp
    };
    let wv = tape.constant(w.clone());
    let z = tape.matmul(h, wv)?;
    let neg = tape.scale(z, -1.0)?;
    let sp = tape.softplus(neg)?;
    let loss = tape.sum_all(sp)?;
    let value = tape.value(loss).item()?;
    Ok((value, tape.backward(loss)?.get(p)))
}

/// Gradient norm with respect to the primary messages is at most `C L A*`.
pub fn verify_grad_attenuation(cfg: &ToyConfig) -> Result<TheoremReport> {
    let started = Instant::now();
    let trials: Vec<Result<(f64, f64)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|i| {
            let mut rng = trial_rng(cfg.seed, "grad-attenuation", i as u64);
            let n_star = rng.random_range(1..=cfg.max_n_star);
            let m = rng.random_range(0..=cfg.max_m);
            let d = rng.random_range(2..=cfg.max_dim);
            let l = rng.random_range(1..=cfg.max_labels);
            let agg = ToyAggregation::sample(&mut rng, n_star, m, d);
            let (w, norms) = bounded_columns(&mut rng, d, l, 1.0);
            let c = norms.iter().copied().fold(0.0, f64::max);
            let (_, g) = positive_bce_and_grad(&agg, &w)?;
            Ok((g.norm(), c * l as f64 * agg.primary_mass()))
        })
        .collect();
    let trials = trials.into_iter().collect::<Result<Vec<_>>>()?;
    let holds = trials.iter().filter(|(g, b)| *g <= b + SLACK).count();
    let worst = trials.iter().map(|(g, b)| g - b).fold(f64::NEG_INFINITY, f64::max);
    let mut checks = vec![
        Check::abs("bound_holds_fraction", holds as f64 / trials.len() as f64, 1.0, 0.0),
        Check::at_most("max_norm_minus_bound", worst, 0.0, SLACK),
    ];

    // One primary neighbor with all the mass: the norm is |w| (1 - sigmoid(z)).
    let mut rng = trial_rng(cfg.seed, "grad-attenuation/single", 0);
    let agg = ToyAggregation::sample(&mut rng, 1, 0, 4);
    let (w, norms) = bounded_columns(&mut rng, 4, 1, 1.0);
    let (_, g) = positive_bce_and_grad(&agg, &w)?;
    let z: f64 = agg.primary.row(0).iter().zip(w.data()).map(|(a, b)| a * b).sum();
    let expect = norms[0] * (1.0 - crate::tensor::sigmoid(z));
    checks.push(Check::abs("single_neighbor_norm", g.norm(), expect, 1e-12));
    checks.push(Check::at_most("single_neighbor_norm_vs_w", g.norm(), norms[0], SLACK));

    // Trend in m at fixed n* = 2.
    let ms = [10usize, 30, 100, 300, 1000];
    let per_m = 400;
    let mut curve = Vec::new();
    for (j, &m) in ms.iter().enumerate() {
        let norms: Vec<f64> = (0..per_m)
            .into_par_iter()
            .map(|i| {
                let mut rng = trial_rng(cfg.seed, "grad-attenuation/trend", ((j as u64) << 32) | i as u64);
                let agg = ToyAggregation::sample(&mut rng, 2, m, 4);
                let (w, _) = bounded_columns(&mut rng, 4, 3, 1.0);
                positive_bce_and_grad(&agg, &w).map(|(_, g)| g.norm())
            })
            .collect::<Result<Vec<_>>>()?;
        curve.push((m as f64, mean(&norms)));
    }
    let ratio = curve[curve.len() - 1].1 / curve[0].1;
    checks.push(Check::at_most("mean_norm_ratio_m1000_over_m10", ratio, 0.2, 0.0));
    let decreasing = curve.windows(2).all(|w| w[1].1 < w[0].1);
    checks.push(Check::abs("mean_norm_decreasing_in_m", f64::from(u8::from(decreasing)), 1.0, 0.0));
    let curves = vec![Curve::new("grad_norm_vs_m", "m", "mean_grad_norm", curve)];
    Ok(TheoremReport::finish("grad_attenuation", checks, curves, started))
}

// ------------------------------------------------------- loss amplification

/// Positive BCE and the lower bound `L * (-log sigmoid(a M A* + b))` for one
/// constructed aggregation.
#[derive(Copy, Clone, Debug, PartialEq)]
pub struct AmplificationTrial {
    pub loss: f64,
    pub bound: f64,
    pub primary_mass: f64,
}

/// `L * softplus(-(a M A* + b))`.
pub fn amplification_bound(labels: usize, a: f64, m_norm: f64, mass: f64, b: f64) -> f64 {
    labels as f64 * log1p_exp(-(a * m_norm * mass + b))
}

fn amplification_trial(rng: &mut Rng, cfg: &ToyConfig) -> Result<AmplificationTrial> {
    let n_star = rng.random_range(1..=cfg.max_n_star);
    let m = rng.random_range(0..=cfg.max_m);
    let d = rng.random_range(2..=cfg.max_dim);
    let l = rng.random_range(1..=cfg.max_labels);
    let mut agg = ToyAggregation::sample(rng, n_star, m, d);
    let m_norm = 0.5 + 2.5 * rng.random::<f64>();
    for r in 0..n_star {
        let radius = m_norm * rng.random::<f64>();
        agg.primary.row_mut(r).copy_from_slice(&vector_with_norm(rng, d, radius));
    }
    let (w, norms) = bounded_columns(rng, d, l, 1.0);
    let a = norms.iter().copied().fold(0.0, f64::max);
    // b bounds the secondary contribution to every logit; shrink the
    // secondary messages if it would exceed a M.
    let hs = agg.alpha_secondary.matmul(&agg.secondary)?;
    let mut b = hs.matmul(&w)?.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == 0 {
        b = 0.0;
    } else if b > a * m_norm {
        let f = a * m_norm / b;
        agg.secondary = agg.secondary.scale(f);
        b = a * m_norm;
    }
    let (loss, _) = positive_bce_and_grad(&agg, &w)?;
    let mass = agg.primary_mass();
    Ok(AmplificationTrial {
        loss,
        bound: amplification_bound(l, a, m_norm, mass, b),
        primary_mass: mass,
    })
}

pub fn verify_loss_amplification(cfg: &ToyConfig) -> Result<TheoremReport> {
    let started = Instant::now();
    let trials = (0..cfg.trials)
        .into_par_iter()
        .map(|i| amplification_trial(&mut trial_rng(cfg.seed, "loss-amplification", i as u64), cfg))
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let holds = trials.iter().filter(|t| t.loss >= t.bound - SLACK).count();
    let worst = trials.iter().map(|t| t.loss - t.bound).fold(f64::INFINITY, f64::min);
    let mut checks = vec![
        Check::abs("bound_holds_fraction", holds as f64 / trials.len() as f64, 1.0, 0.0),
        Check::at_least("min_loss_minus_bound", worst, 0.0, SLACK),
    ];
    // No primary mass, zero secondary messages: z = 0 and the bound is tight.
    let l = 3;
    let agg = ToyAggregation {
        alpha_primary: Tensor::zeros(1, 1),
        alpha_secondary: Tensor::filled(1, 5, 0.2),
        primary: Tensor::filled(1, 4, 1.0),
        secondary: Tensor::zeros(5, 4),
    };
    let (w, _) = bounded_columns(&mut trial_rng(cfg.seed, "loss-amplification/tight", 0), 4, l, 1.0);
    let (loss, _) = positive_bce_and_grad(&agg, &w)?;
    let bound = amplification_bound(l, 1.0, 1.0, 0.0, 0.0);
    checks.push(Check::abs("zero_mass_bound", bound, l as f64 * LN_2, 1e-12));
    checks.push(Check::abs("zero_mass_loss", loss, l as f64 * LN_2, 1e-12));
    let (b1, b2) = (
        amplification_bound(3, 0.7, 2.0, 0.3, 0.1),
        amplification_bound(6, 0.7, 2.0, 0.3, 0.1),
    );
    checks.push(Check::abs("bound_linear_in_labels", b2 / b1, 2.0, 1e-12));
    let mut pts: Vec<(f64, f64)> = trials.iter().map(|t| (t.primary_mass, t.loss)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let step = (pts.len() / 200).max(1);
    let curves = vec![Curve::new(
        "positive_bce_vs_primary_mass",
        "A*",
        "positive_bce",
        pts.into_iter().step_by(step).collect(),
    )];
    Ok(TheoremReport::finish("loss_amplification", checks, curves, started))
}

// -------------------------------------------------------- meta-path mass

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetapathMassConfig {
    pub primary_counts: Vec<usize>,
    pub totals: Vec<usize>,
    pub draws: usize,
    pub seed: u64,
}

impl Default for MetapathMassConfig {
    fn default() -> Self {
        MetapathMassConfig {
            primary_counts: vec![1, 2, 4],
            totals: vec![8, 16, 32, 64, 128, 256],
            draws: 10_000,
            seed: 0,
        }
    }
}

/// `(e^(s_hi - s_lo) / c) * |M*| / |M|`.
pub fn metapath_mass_bound(s_hi: f64, s_lo: f64, c: f64, n_primary: usize, total: usize) -> f64 {
    (s_hi - s_lo).exp() / c * n_primary as f64 / total as f64
}

/// Primary semantic mass with the first `n_primary` of `scores` primary.
pub fn primary_semantic_mass(scores: &[f64], n_primary: usize) -> Result<f64> {
    let beta = beta_from_scores(scores)?;
    let flags: Vec<bool> = (0..scores.len()).map(|i| i < n_primary).collect();
    Ok(semantic_mass(&beta, &flags))
}

/// Scores are standard normal. `s_hi` is the largest primary score; `s_lo`
/// is the `k`-th largest secondary score for a random `k`, so `c = k/|M|`.
pub fn verify_metapath_mass(cfg: &MetapathMassConfig) -> Result<TheoremReport> {
    let started = Instant::now();
    let mut checks = Vec::new();
    let mut curves = Vec::new();
    for &np in &cfg.primary_counts {
        let mut curve = Vec::new();
        for &total in cfg.totals.iter().filter(|&&t| t > np) {
            let scope = format!("metapath-mass/{np}/{total}");
            let draws = (0..cfg.draws)
                .into_par_iter()
                .map(|i| {
                    let mut rng = trial_rng(cfg.seed, &scope, i as u64);
                    let s: Vec<f64> = (0..total).map(|_| normal(&mut rng)).collect();
                    let mass = primary_semantic_mass(&s, np)?;
                    let s_hi = s[..np].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut rest = s[np..].to_vec();
                    rest.sort_by(|a, b| b.total_cmp(a));
                    let k = rng.random_range(1..=rest.len());
                    let bound = metapath_mass_bound(s_hi, rest[k - 1], k as f64 / total as f64, np, total);
                    Ok((mass, bound))
                })
                .collect::<Vec<Result<_>>>()
                .into_iter()
                .collect::<Result<Vec<(f64, f64)>>>()?;
            let holds = draws.iter().filter(|(m, b)| *m <= b + SLACK).count();
            checks.push(Check::abs(
                format!("bound_holds_fraction_{np}_of_{total}"),
                holds as f64 / draws.len() as f64,
                1.0,
                0.0,
            ));
            let uniform = primary_semantic_mass(&vec![0.7; total], np)?;
            checks.push(Check::abs(
                format!("uniform_mass_{np}_of_{total}"),
                uniform,
                np as f64 / total as f64,
                1e-12,
            ));
            curve.push((total as f64, mean(&draws.iter().map(|d| d.0).collect::<Vec<_>>())));
        }
        let decays = curve.windows(2).all(|w| w[1].1 < w[0].1);
        checks.push(Check::abs(format!("mean_mass_decays_{np}"), f64::from(u8::from(decays)), 1.0, 0.0));
        curves.push(Curve::new(format!("mean_primary_mass_{np}"), "|M|", "mean_B*", curve));
    }
    checks.push(Check::abs("uniform_case_bound", metapath_mass_bound(0.4, 0.4, 1.0, 2, 10), 0.2, 1e-15));
    Ok(TheoremReport::finish("metapath_mass", checks, curves, started))
}

// ------------------------------------------------------------- loss floor

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossFloorConfig {
    pub w_max: f64,
    pub h_max: f64,
    pub mass_grid: Vec<f64>,
    pub positives_grid: Vec<usize>,
    pub draws: usize,
    pub dim: usize,
    pub seed: u64,
}

impl Default for LossFloorConfig {
    fn default() -> Self {
        LossFloorConfig {
            w_max: 1.0,
            h_max: 1.0,
            mass_grid: vec![0.0, 0.01, 0.05, 0.1, 0.2, 0.5, 1.0],
            positives_grid: vec![1, 2, 3, 4, 8],
            draws: 10_000,
            dim: 8,
            seed: 0,
        }
    }
}

/// `|P| log 2 - (|P|/2) W H B*`.
pub fn loss_floor(positives: usize, w: f64, h: f64, mass: f64) -> f64 {
    positives as f64 * LN_2 - 0.5 * positives as f64 * w * h * mass
}

/// Positive BCE of `z_k = w_k . (B* h*)` with random `|h*| <= H`, `|w_k| <= W`.
fn floor_draw(rng: &mut Rng, cfg: &LossFloorConfig, positives: usize, mass: f64) -> f64 {
    let r = cfg.h_max * rng.random::<f64>();
    let h: Vec<f64> = vector_with_norm(rng, cfg.dim, r).into_iter().map(|x| x * mass).collect();
    let (w, _) = bounded_columns(rng, cfg.dim, positives, cfg.w_max);
    (0..positives)
        .map(|k| {
            let z: f64 = (0..cfg.dim).map(|i| w.get(i, k) * h[i]).sum();
            log1p_exp(-z)
        })
        .sum()
}

pub fn verify_loss_floor(cfg: &LossFloorConfig) -> Result<TheoremReport> {
    let started = Instant::now();
    let mut checks = Vec::new();
    let mut all_hold = 0usize;
    let mut total = 0usize;
    let mut worst = f64::INFINITY;
    let mut curves = Vec::new();
    for &p in &cfg.positives_grid {
        let mut curve = Vec::new();
        for (j, &mass) in cfg.mass_grid.iter().enumerate() {
            let scope = format!("loss-floor/{p}/{j}");
            let losses: Vec<f64> = (0..cfg.draws)
                .into_par_iter()
                .map(|i| floor_draw(&mut trial_rng(cfg.seed, &scope, i as u64), cfg, p, mass))
                .collect();
            let floor = loss_floor(p, cfg.w_max, cfg.h_max, mass);
            all_hold += losses.iter().filter(|&&l| l >= floor - SLACK).count();
            total += losses.len();
            worst = losses.iter().map(|l| l - floor).fold(worst, f64::min);
            curve.push((mass, mean(&losses) / p as f64));
        }
        curves.push(Curve::new(format!("loss_per_positive_{p}"), "B*", "mean_loss_per_positive", curve));
    }
    checks.push(Check::abs("bound_holds_fraction", all_hold as f64 / total as f64, 1.0, 0.0));
    checks.push(Check::at_least("min_loss_minus_floor", worst, 0.0, SLACK));

    let mut rng = trial_rng(cfg.seed, "loss-floor/exact", 0);
    let zero2 = floor_draw(&mut rng, cfg, 2, 0.0);
    let zero4 = floor_draw(&mut rng, cfg, 4, 0.0);
    checks.push(Check::abs("zero_mass_loss", zero4, 4.0 * LN_2, 1e-12));
    checks.push(Check::abs("zero_mass_ratio_4_vs_2", zero4 / zero2, 2.0, 1e-12));

    let fixed = LossFloorConfig {
        w_max: 1.0,
        h_max: 1.0,
        ..cfg.clone()
    };
    let min3 = (0..cfg.draws)
        .into_par_iter()
        .map(|i| floor_draw(&mut trial_rng(cfg.seed, "loss-floor/fixed", i as u64), &fixed, 3, 0.1))
        .collect::<Vec<f64>>()
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    checks.push(Check::at_least("min_loss_mass0.1_p3", min3, 3.0 * LN_2 - 0.15, SLACK));
    Ok(TheoremReport::finish("loss_floor", checks, curves, started))
}

// --------------------------------------------------- FOCAL guarantees

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GuaranteeConfig {
    pub seed: u64,
    /// Nodes sampled for the gate floor.
    pub floor_nodes: usize,
    /// Secondary (target, neighbor) pairs perturbed.
    pub coverage_pairs: usize,
    /// (target, unreachable node) pairs perturbed.
    pub control_pairs: usize,
    pub epsilon: f64,
    pub extra_relations: usize,
    pub extra_metapaths: usize,
}

impl Default for GuaranteeConfig {
    fn default() -> Self {
        GuaranteeConfig {
            seed: 0,
            floor_nodes: 1000,
            coverage_pairs: 300,
            control_pairs: 300,
            epsilon: 1e-3,
            extra_relations: 3,
            extra_metapaths: 2,
        }
    }
}

/// `(gate floor gamma, |g2 * h_aoa|, |h_aoa|)` at `node`.
pub fn gate_floor_terms(trace: &crate::fusion::LayerTrace, node: usize) -> Option<(f64, f64, f64)> {
    let (g2, ha) = (trace.g2.as_ref()?, trace.h_aoa.as_ref()?);
    let gamma = gate_floor(trace, node)?;
    let gated: Vec<f64> = g2.row(node).iter().zip(ha.row(node)).map(|(g, h)| g * h).collect();
    Some((gamma, norm(&gated), norm(ha.row(node))))
}

/// Adds `extra` secondary self-relations on the target type and `paths`
/// secondary meta-paths over them. Returns the graph and the new meta-paths.
pub fn augment_secondary(g: &HetGraph, extra: usize, paths: usize, seed: u64) -> Result<(HetGraph, Vec<Vec<String>>)> {
    let mut parts = g.clone().into_parts();
    let tt = g.target_type();
    let n = g.num_targets();
    let mut rng = trial_rng(seed, "augment", 0);
    let mut new_names = Vec::new();
    for i in 0..extra {
        let mut name = format!("aug{i}");
        while parts.relations.iter().any(|r| r.name == name) {
            name.push('_');
        }
        let edges = if n == 0 {
            Vec::new()
        } else {
            (0..2 * n).map(|_| (rng.random_range(0..n), rng.random_range(0..n))).collect()
        };
        parts.relations.push(Relation {
            name: name.clone(),
            src: tt,
            dst: tt,
            primary: false,
            edges,
        });
        new_names.push(name);
    }
    let mut metapaths = Vec::new();
    for j in 0..paths.min(new_names.len().max(1)) {
        if new_names.is_empty() {
            break;
        }
        let len = (j % 2) + 1;
        metapaths.push((0..len).map(|k| new_names[(j + k) % new_names.len()].clone()).collect());
    }
    Ok((HetGraph::new(parts)?, metapaths))
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.max_abs_diff(b)
}

/// Gate floor, anchoring invariance under secondary augmentation, and
/// dependency coverage of secondary neighbors, for `params` on `g`.
pub fn verify_focal_guarantees(
    g: &HetGraph,
    cfg: &FocalConfig,
    params: &FocalParams,
    gc: &GuaranteeConfig,
) -> Result<TheoremReport> {
    let started = Instant::now();
    if cfg.mode != Mode::Full {
        return Err(Error::Config("guarantees are defined for the full model".into()));
    }
    let mg = ModelGraph::new(g, &cfg.metapaths)?;
    let (_, trace) = trace_forward(params, &mg, cfg, None)?;
    let mut checks = Vec::new();

    // (i) gate floor
    let n = mg.num_nodes();
    let mut rng = trial_rng(gc.seed, "guarantees/nodes", 0);
    let nodes: Vec<usize> = if n <= gc.floor_nodes {
        (0..n).collect()
    } else {
        rand::seq::index::sample(&mut rng, n, gc.floor_nodes).into_vec()
    };
    let (mut worst, mut min_gamma, mut count) = (f64::INFINITY, f64::INFINITY, 0usize);
    for layer in &trace {
        for &v in &nodes {
            let (gamma, lhs, hn) = gate_floor_terms(layer, v).ok_or_else(|| Error::Config("trace lacks gates".into()))?;
            worst = worst.min(lhs - gamma * hn);
            min_gamma = min_gamma.min(gamma);
            count += 1;
        }
    }
    checks.push(Check::at_least("gate_floor_min_slack", worst, 0.0, 1e-12));
    checks.push(Check::range("gate_floor_min_gamma", min_gamma, f64::MIN_POSITIVE, 1.0));
    checks.push(Check::abs("gate_floor_checked", count as f64, (nodes.len() * trace.len()) as f64, 0.0));

    // (ii) anchoring invariance
    let (g2, extra_paths) = augment_secondary(g, gc.extra_relations, gc.extra_metapaths, gc.seed)?;
    let cfg2 = FocalConfig {
        metapaths: cfg.metapaths.iter().cloned().chain(extra_paths.iter().cloned()).collect(),
        ..cfg.clone()
    };
    let mg2 = ModelGraph::new(&g2, &cfg2.metapaths)?;
    let mut params2 = params.clone();
    for l in 0..cfg.num_layers {
        for r in &g2.relations()[g.relations().len()..] {
            params2.insert(names::rho(l, &r.name), Tensor::zeros(1, cfg.coa_heads));
        }
    }
    let (_, trace2) = trace_forward(&params2, &mg2, &cfg2, None)?;
    let first = |t: &[crate::fusion::LayerTrace]| t[0].h_aoa.clone().unwrap_or_default();
    checks.push(Check::abs("aoa_layer1_max_abs_diff", max_abs_diff(&first(&trace), &first(&trace2)), 0.0, 0.0));
    let mut op_diff: f64 = 0.0;
    for (l, layer) in trace.iter().enumerate() {
        let aoa_on = |mg: &ModelGraph, p: &FocalParams| -> Result<Tensor> {
            let mut tape = Tape::new();
            let bound = p.bind(&mut tape);
            let h = tape.constant(layer.h_prev.clone());
            let (paths, sem) = layer_aoa_vars(&bound, mg, l)?;
            let pairs: Vec<_> = paths.into_iter().zip(mg.anchored().iter().map(|a| &a.edges)).collect();
            let out = aoa_multi(&mut tape, &pairs, sem.as_ref(), h, cfg.aoa_heads, cfg.leaky_slope)?;
            Ok(tape.value(out.h).clone())
        };
        op_diff = op_diff.max(max_abs_diff(&aoa_on(&mg, params)?, &aoa_on(&mg2, &params2)?));
    }
    checks.push(Check::abs("aoa_operator_max_abs_diff", op_diff, 0.0, 0.0));
    checks.push(Check::abs(
        "secondary_relations_added",
        (g2.relations().len() - g.relations().len()) as f64,
        gc.extra_relations as f64,
        0.0,
    ));
    checks.push(Check::abs("secondary_metapaths_added", extra_paths.len() as f64, gc.extra_metapaths as f64, 0.0));

    // (iii) dependency coverage, measured on the first layer's fused output
    let one = FocalConfig {
        num_layers: 1,
        ..cfg.clone()
    };
    let base = trace_forward(params, &mg, &one, None)?.1.remove(0).h_fuse;
    let tt = g.target_type();
    let mut sec_pairs = Vec::new();
    let mut ctl_pairs = Vec::new();
    let mut rng = trial_rng(gc.seed, "guarantees/pairs", 0);
    let mut order: Vec<usize> = (0..g.num_targets()).collect();
    rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut rng);
    for &t in &order {
        let hood = g.in_neighborhood(NodeRef { ty: tt, index: t });
        let mut reach: std::collections::BTreeSet<(usize, usize)> =
            hood.iter().map(|(_, s)| (s.ty.0, s.index)).collect();
        reach.insert((tt.0, t));
        for ap in mg.anchored() {
            for s in g.metapath_neighborhood(&ap.path, t)? {
                reach.insert((ap.path.end_type(g).0, s));
            }
        }
        for (r, s) in &hood {
            if !g.relation(*r).primary && sec_pairs.len() < gc.coverage_pairs {
                sec_pairs.push((t, *s));
            }
        }
        if ctl_pairs.len() < gc.control_pairs {
            for _ in 0..8 {
                let ty = rng.random_range(0..g.num_node_types());
                let cnt = g.node_count(NodeTypeId(ty));
                if cnt == 0 {
                    continue;
                }
                let u = rng.random_range(0..cnt);
                if !reach.contains(&(ty, u)) {
                    ctl_pairs.push((t, NodeRef { ty: NodeTypeId(ty), index: u }));
                    break;
                }
            }
        }
        if sec_pairs.len() >= gc.coverage_pairs && ctl_pairs.len() >= gc.control_pairs {
            break;
        }
    }
    let sensitivity = |t: usize, s: NodeRef| -> Result<f64> {
        let mut feats = g.all_features().to_vec();
        for x in feats[s.ty.0].row_mut(s.index) {
            *x += gc.epsilon;
        }
        let h = trace_forward(params, &mg, &one, Some(&feats))?.1.remove(0).h_fuse;
        let row = mg.target_row(t);
        Ok(h.row(row).iter().zip(base.row(row)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    };
    let sec: Vec<f64> = sec_pairs.iter().map(|&(t, s)| sensitivity(t, s)).collect::<Result<_>>()?;
    let ctl: Vec<f64> = ctl_pairs.iter().map(|&(t, s)| sensitivity(t, s)).collect::<Result<_>>()?;
    let frac = |v: &[f64], f: &dyn Fn(f64) -> bool| {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().filter(|&&x| f(x)).count() as f64 / v.len() as f64
        }
    };
    checks.push(Check::at_least("secondary_nonzero_fraction", frac(&sec, &|x| x > 0.0), 0.99, 0.0));
    checks.push(Check::abs("unreachable_zero_fraction", frac(&ctl, &|x| x == 0.0), 1.0, 0.0));
    checks.push(Check::at_least("secondary_pairs_checked", sec.len() as f64, 1.0, 0.0));
    checks.push(Check::at_least("unreachable_pairs_checked", ctl.len() as f64, 1.0, 0.0));
    let mut curve: Vec<(f64, f64)> = sec.iter().enumerate().map(|(i, &x)| (i as f64, x)).collect();
    curve.truncate(500);
    let curves = vec![Curve::new("secondary_sensitivity", "pair", "max_abs_delta_h_fuse", curve)];
    Ok(TheoremReport::finish("focal_guarantees", checks, curves, started))
}

// ---------------------------------------------------------- over-smoothing

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OversmoothingReport {
    pub depths: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Mean test micro-F1 per depth (validation when there is no test split).
    pub full: Vec<f64>,
    pub coa_only: Vec<f64>,
}

impl OversmoothingReport {
    /// Score at the first depth minus score at the last.
    pub fn drop(scores: &[f64]) -> f64 {
        match (scores.first(), scores.last()) {
            (Some(a), Some(b)) => a - b,
            _ => 0.0,
        }
    }

    pub fn pass(&self) -> bool {
        Self::drop(&self.full) <= Self::drop(&self.coa_only)
    }

    pub fn to_theorem_report(&self, runtime_secs: f64) -> TheoremReport {
        let (df, dc) = (Self::drop(&self.full), Self::drop(&self.coa_only));
        let checks = vec![Check::at_most("full_drop_minus_coa_only_drop", df - dc, 0.0, 0.0)];
        let x = |v: &[f64]| self.depths.iter().zip(v).map(|(&d, &f)| (d as f64, f)).collect();
        let curves = vec![
            Curve::new("micro_f1_full", "depth", "micro_f1", x(&self.full)),
            Curve::new("micro_f1_coa_only", "depth", "micro_f1", x(&self.coa_only)),
        ];
        TheoremReport {
            id: "oversmoothing".into(),
            pass: checks.iter().all(|c| c.pass),
            checks,
            curves,
            runtime_secs,
        }
    }
}

/// Trains the full model and the COA-only ablation at every depth and seed.
pub fn run_oversmoothing(g: &HetGraph, cfg: &FocalConfig, depths: &[usize], seeds: &[u64]) -> Result<OversmoothingReport> {
    if depths.is_empty() || seeds.is_empty() {
        return Err(Error::Config("need at least one depth and one seed".into()));
    }
    let split = if g.split(Split::Test).is_empty() { Split::Val } else { Split::Test };
    let score = |mode: Mode, depth: usize| -> Result<f64> {
        let mut total = 0.0;
        for &seed in seeds {
            let c = FocalConfig {
                num_layers: depth,
                seed,
                ..ablation_mode(cfg, mode)
            };
            let (_, rep) = train(g, &c)?;
            total += match split {
                Split::Test => rep.test.map(|m| m.micro_f1).unwrap_or(rep.best_val.micro_f1),
                _ => rep.best_val.micro_f1,
            };
        }
        Ok(total / seeds.len() as f64)
    };
    let mut full = Vec::new();
    let mut coa_only = Vec::new();
    for &d in depths {
        full.push(score(Mode::Full, d)?);
        coa_only.push(score(Mode::CoaOnly, d)?);
    }
    Ok(OversmoothingReport {
        depths: depths.to_vec(),
        seeds: seeds.to_vec(),
        full,
        coa_only,
    })
}

// -------------------------------------------------------------- suite

/// Graph and model used by the guarantee check in the standard suite.
pub fn guarantee_fixture(seed: u64) -> Result<(HetGraph, FocalConfig, FocalParams)> {
    use crate::synthgen::{generate, SynthConfig, PRIMARY_METAPATH, SECONDARY_METAPATH};
    let g = generate(&SynthConfig {
        seed,
        num_targets: 300,
        secondary_degree: 8.0,
        rare_rate: 0.1,
        noise_std: 0.5,
        num_distractors: 40,
        ..Default::default()
    })?;
    let cfg = FocalConfig {
        seed,
        metapaths: vec![vec![PRIMARY_METAPATH.into()], vec![SECONDARY_METAPATH.into()]],
        ..Default::default()
    };
    let mg = ModelGraph::new(&g, &cfg.metapaths)?;
    let params = crate::trainer::init_params(&cfg, &mg, seed)?;
    Ok((g, cfg, params))
}

pub const SUITE_NAMES: [&str; 7] = [
    "dilution",
    "dilution_negative_control",
    "grad_attenuation",
    "loss_amplification",
    "metapath_mass",
    "loss_floor",
    "focal_guarantees",
];

/// Runs one named check (see [`SUITE_NAMES`]) with default settings.
pub fn run_named(name: &str, seed: u64) -> Result<TheoremReport> {
    let toy = ToyConfig {
        seed,
        ..Default::default()
    };
    match name {
        "dilution" => dilution_suite(seed),
        "dilution_negative_control" => dilution_negative_control(seed),
        "grad_attenuation" => verify_grad_attenuation(&toy),
        "loss_amplification" => verify_loss_amplification(&toy),
        "metapath_mass" => verify_metapath_mass(&MetapathMassConfig {
            seed,
            ..Default::default()
        }),
        "loss_floor" => verify_loss_floor(&LossFloorConfig {
            seed,
            ..Default::default()
        }),
        "focal_guarantees" => {
            let (g, cfg, params) = guarantee_fixture(seed)?;
            verify_focal_guarantees(&g, &cfg, &params, &GuaranteeConfig {
                seed,
                ..Default::default()
            })
        }
        other => Err(Error::Config(format!("unknown theorem check `{other}`"))),
    }
}

/// Runs every check in [`SUITE_NAMES`] in order.
pub fn run_all(seed: u64) -> Result<Vec<TheoremReport>> {
    SUITE_NAMES.iter().map(|n| run_named(n, seed)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checks_use_closed_intervals() {
        assert!(Check::abs("a", 1.0, 1.0, 0.0).pass);
        assert!(!Check::abs("a", f64::NAN, 1.0, 1.0).pass);
        assert!(Check::rel("r", 1.019, 1.0, 0.02).pass);
        assert!(!Check::rel("r", 1.021, 1.0, 0.02).pass);
        assert!(Check::at_most("m", 1.0 + 1e-10, 1.0, SLACK).pass);
        assert!(!Check::at_least("l", 0.5, 1.0, 0.0).pass);
        assert!(Check::range("s", -1.0, -1.1, -0.9).pass);
    }

    #[test]
    fn report_pass_requires_all_checks() {
        let t = Instant::now();
        let ok = TheoremReport::finish("x", vec![Check::abs("a", 0.0, 0.0, 0.0)], vec![], t);
        assert!(ok.pass);
        let bad = TheoremReport::finish("x", vec![Check::abs("a", 0.0, 0.0, 0.0), Check::abs("b", 1.0, 0.0, 0.0)], vec![], t);
        assert!(!bad.pass);
        assert_eq!(bad.failures().count(), 1);
        assert!(!TheoremReport::finish("x", vec![], vec![], t).pass);
        assert!(bad.to_text().contains("check = b"));
    }

    #[test]
    fn distribution_parsing_and_means() {
        assert!(matches!(LogitDist::parse("cauchy", &[0.0]), Err(Error::UnknownDistribution(_))));
        assert!(LogitDist::parse("normal", &[0.0]).is_err());
        let n = LogitDist::parse("normal", &[0.0, 1.0]).unwrap();
        assert_eq!(n.exp_mean(0).value, 0.5f64.exp());
        let u = LogitDist::parse("uniform", &[0.0, 1.0]).unwrap();
        assert!((u.exp_mean(0).value - (1f64.exp() - 1.0)).abs() < 1e-15);
        assert_eq!(LogitDist::parse("point", &[2.0]).unwrap().exp_mean(0).value, 2f64.exp());
    }

    #[test]
    fn logistic_mean_is_estimated_close_to_closed_form() {
        // E[exp(X)] = pi s / sin(pi s) for the logistic with scale s < 1.
        let s = 0.3;
        let d = LogitDist::Logistic { loc: 0.0, scale: s };
        let est = d.exp_mean(1);
        assert!(!est.exact);
        let pi = std::f64::consts::PI;
        let truth = pi * s / (pi * s).sin();
        assert!((est.value - truth).abs() / truth < 2e-3, "{} vs {truth}", est.value);
    }

    #[test]
    fn point_mass_primary_share_is_exact() {
        let cfg = DilutionTrialConfig {
            n_star: 1,
            m_values: vec![9],
            primary: LogitDist::Point { value: -0.4 },
            secondary: LogitDist::Point { value: -0.4 },
            trials: 3,
            ..Default::default()
        };
        let p = dilution_point(&cfg, 0, 1.0, 1.0);
        assert!((p.naive - 0.1).abs() < 1e-15);
        assert!(dilution_point_mass_checks(4, &[256, 4096], 0).iter().all(|c| c.pass));
    }

    #[test]
    fn dilution_reference_values() {
        assert_eq!(dilution_reference(4, 4, 1.0, 1.0), 0.5);
        assert!((dilution_reference(4, 12, 2.0, 1.0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn dilution_config_validation() {
        let bad = DilutionTrialConfig {
            m_values: vec![512, 256],
            ..Default::default()
        };
        assert!(verify_dilution(&bad).is_err());
        let bad = DilutionTrialConfig {
            trials: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn small_dilution_run_matches_prediction() {
        let cfg = DilutionTrialConfig {
            m_values: vec![64, 256],
            trials: 4000,
            seed: 3,
            rel_tol: 0.05,
            slope_range: (-1.2, -0.7),
            ..Default::default()
        };
        let r = verify_dilution(&cfg).unwrap();
        assert!(r.pass, "{}", r.to_text());
        assert_eq!(r.without_timing(), verify_dilution(&cfg).unwrap().without_timing());
    }

    #[test]
    fn negative_control_breaks_the_fit() {
        let cfg = DilutionTrialConfig {
            m_values: vec![64, 256, 1024],
            trials: 200,
            drift: 1.0,
            ..Default::default()
        };
        let r = verify_dilution(&cfg).unwrap();
        assert!(!r.check("loglog_slope").unwrap().pass);
    }

    #[test]
    fn single_primary_neighbor_gradient() {
        let agg = ToyAggregation {
            alpha_primary: Tensor::scalar(1.0),
            alpha_secondary: Tensor::zeros(1, 0),
            primary: Tensor::from_rows(&[vec![0.5, -1.0]]).unwrap(),
            secondary: Tensor::zeros(0, 2),
        };
        let w = Tensor::column(&[0.6, 0.8]);
        let (loss, g) = positive_bce_and_grad(&agg, &w).unwrap();
        let z: f64 = 0.5 * 0.6 - 0.8;
        assert!((loss - log1p_exp(-z)).abs() < 1e-15);
        assert!((g.norm() - (1.0 - crate::tensor::sigmoid(z))).abs() < 1e-15);
    }

    #[test]
    fn toy_bounds_hold_on_small_runs() {
        let cfg = ToyConfig {
            trials: 300,
            seed: 5,
            ..Default::default()
        };
        let a = verify_grad_attenuation(&cfg).unwrap();
        assert!(a.pass, "{}", a.to_text());
        let b = verify_loss_amplification(&cfg).unwrap();
        assert!(b.pass, "{}", b.to_text());
    }

    #[test]
    fn metapath_mass_small_run() {
        let cfg = MetapathMassConfig {
            primary_counts: vec![1, 2],
            totals: vec![4, 8, 32],
            draws: 500,
            seed: 2,
        };
        let r = verify_metapath_mass(&cfg).unwrap();
        assert!(r.pass, "{}", r.to_text());
        assert_eq!(primary_semantic_mass(&[0.0; 10], 2).unwrap(), 0.2);
        assert_eq!(metapath_mass_bound(1.0, 1.0, 1.0, 2, 10), 0.2);
    }

    #[test]
    fn loss_floor_small_run() {
        let cfg = LossFloorConfig {
            draws: 300,
            positives_grid: vec![1, 3],
            ..Default::default()
        };
        let r = verify_loss_floor(&cfg).unwrap();
        assert!(r.pass, "{}", r.to_text());
        assert_eq!(loss_floor(4, 1.0, 1.0, 0.0), 4.0 * LN_2);
        assert_eq!(loss_floor(2, 1.0, 1.0, 0.2), 2.0 * LN_2 - 0.2);
    }

    #[test]
    fn augmentation_adds_only_secondary_structure() {
        let (g, _, _) = guarantee_fixture(1).unwrap();
        let (g2, paths) = augment_secondary(&g, 3, 2, 0).unwrap();
        assert_eq!(g2.relations().len(), g.relations().len() + 3);
        assert!(g2.relations()[g.relations().len()..].iter().all(|r| !r.primary));
        assert_eq!(paths.len(), 2);
        let mg = ModelGraph::new(&g2, &paths).unwrap();
        assert!(mg.anchored().is_empty());
        assert_eq!(mg.secondary_paths().len(), 2);
    }

    #[test]
    fn guarantees_hold_on_random_params() {
        let (g, cfg, params) = guarantee_fixture(2).unwrap();
        let gc = GuaranteeConfig {
            floor_nodes: 200,
            coverage_pairs: 40,
            control_pairs: 40,
            ..Default::default()
        };
        let r = verify_focal_guarantees(&g, &cfg, &params, &gc).unwrap();
        assert!(r.pass, "{}", r.to_text());
    }

    #[test]
    fn oversmoothing_drop_and_pass() {
        let r = OversmoothingReport {
            depths: vec![2, 6],
            seeds: vec![0],
            full: vec![0.8, 0.79],
            coa_only: vec![0.8, 0.7],
        };
        assert!((OversmoothingReport::drop(&r.full) - 0.01).abs() < 1e-12);
        assert!(r.pass());
        assert!(r.to_theorem_report(0.0).pass);
        let worse = OversmoothingReport {
            full: vec![0.8, 0.6],
            ..r
        };
        assert!(!worse.pass());
    }
}
