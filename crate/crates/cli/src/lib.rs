//! Batch driver for the focal engine: graph generation, training,
//! evaluation, theorem verification, gradient checks and ablations.
//!
//! Every command writes structured text under its `--out` location and a
//! `manifest.toml` recording what is needed to rerun it bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use focal_core::gradcheck::layer_suite;
use focal_core::hetgraph::{load_graph, save_graph, FORMAT_VERSION};
use focal_core::objective::{MetricsReport, METRIC_NAMES};
use focal_core::params::FocalParams;
use focal_core::rng::fnv1a;
use focal_core::synthgen::{describe, generate, SynthConfig};
use focal_core::theoremlab::{run_all, run_named, run_oversmoothing, TheoremReport, SUITE_NAMES};
use focal_core::trainer::{ablation_mode, evaluate, train, FocalConfig, Mode, TrainReport};
use focal_core::{HetGraph, Split};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERICAL: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "focal", version, about = "Heterogeneous multi-label graph attention: training and verification")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a planted synthetic graph.
    Gen(GenArgs),
    /// Train a model, optionally over several consecutive seeds.
    Train(TrainArgs),
    /// Evaluate saved parameters on one split.
    Eval(EvalArgs),
    /// Run the numerical theorem checks.
    VerifyTheorems(VerifyArgs),
    /// Finite-difference checks of every layer.
    Gradcheck(GradcheckArgs),
    /// Train the full model and both single-branch ablations.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Generator settings (TOML); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Graph file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub graph: PathBuf,
    /// Model settings (TOML); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// Number of runs; run `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 1)]
    pub runs: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub params: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// `all`, `oversmoothing`, or one check name.
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long)]
    pub seed: u64,
    /// Exit with code 2 if any check fails.
    #[arg(long)]
    pub strict: bool,
    /// Graph for the over-smoothing suite.
    #[arg(long)]
    pub graph: Option<PathBuf>,
    /// Model settings for the over-smoothing suite.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Depths for the over-smoothing suite.
    #[arg(long, value_delimiter = ',', default_value = "2,6")]
    pub depths: Vec<usize>,
    /// Training runs per depth for the over-smoothing suite.
    #[arg(long, default_value_t = 3)]
    pub runs: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10)]
    pub points: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long, default_value_t = 3)]
    pub runs: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Raised when a check fails under `--strict` or a gradient check exceeds its tolerance.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct CheckFailed(pub String);

/// Maps an error to the process exit code.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<CheckFailed>().is_some() {
        return EXIT_NUMERICAL;
    }
    match err.downcast_ref::<focal_core::Error>() {
        Some(e) if e.is_numerical() => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

/// Caps the global worker pool from `FOCAL_THREADS`.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("FOCAL_THREADS") {
        let n: usize = v.trim().parse().with_context(|| format!("FOCAL_THREADS must be a positive integer, got `{v}`"))?;
        if n == 0 {
            bail!("FOCAL_THREADS must be a positive integer, got `{v}`");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen(a) => cmd_gen(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::VerifyTheorems(a) => cmd_verify(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
        Command::Ablate(a) => cmd_ablate(&a),
    }
}

// ------------------------------------------------------------ manifest

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seeds: Vec<u64>,
    pub config_hash: String,
    pub graph_hash: Option<String>,
    pub graph_format_version: u32,
    pub params_format: String,
    pub outputs: Vec<String>,
    /// Config exactly as used, for reruns.
    pub config: String,
}

impl Manifest {
    fn new(command: &str, seeds: Vec<u64>, config: String) -> Manifest {
        Manifest {
            tool: "focal".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seeds,
            config_hash: format!("{:016x}", fnv1a(config.as_bytes())),
            graph_hash: None,
            graph_format_version: FORMAT_VERSION,
            params_format: "json".into(),
            outputs: Vec::new(),
            config,
        }
    }

    fn with_graph(mut self, g: &HetGraph) -> Manifest {
        self.graph_hash = Some(format!("{:016x}", fnv1a(g.to_json().as_bytes())));
        self
    }

    fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &toml::to_string(self).context("serializing manifest")?)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_focal_config(path: Option<&Path>) -> Result<FocalConfig> {
    Ok(match path {
        Some(p) => FocalConfig::load(p)?,
        None => FocalConfig::default(),
    })
}

// ------------------------------------------------------------ multi-seed

/// Per-metric mean and sample standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: MetricsReport,
    pub std: MetricsReport,
    pub runs: usize,
}

/// Aggregates metric reports; `std` is the sample deviation (n - 1), zero
/// for a single report.
pub fn aggregate(reports: &[MetricsReport]) -> Result<MeanStd> {
    if reports.is_empty() {
        bail!("nothing to aggregate");
    }
    let n = reports.len() as f64;
    let mut mean = [0.0; 9];
    for r in reports {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 9];
    if reports.len() > 1 {
        for r in reports {
            for ((s, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = (*s / (n - 1.0)).sqrt());
    }
    Ok(MeanStd {
        mean: MetricsReport::from_values(mean),
        std: MetricsReport::from_values(var),
        runs: reports.len(),
    })
}

/// `name = mean ± std` lines.
pub fn format_mean_std(agg: &MeanStd) -> String {
    let mut s = format!("runs = {}\n", agg.runs);
    for ((name, m), d) in METRIC_NAMES.iter().zip(agg.mean.values()).zip(agg.std.values()) {
        let _ = writeln!(s, "{name} = {m:.6} ± {d:.6}");
    }
    s
}

fn seeds(first: u64, runs: u64) -> Result<Vec<u64>> {
    if runs == 0 {
        bail!("--runs must be at least 1");
    }
    Ok((0..runs).map(|i| first.wrapping_add(i)).collect())
}

fn epoch_curve(r: &TrainReport) -> String {
    let mut s = "# epoch train_loss val_micro_f1\n".to_string();
    for e in &r.epochs {
        let _ = writeln!(s, "{} {:e} {:.6}", e.epoch, e.train_loss, e.val.micro_f1);
    }
    s
}

fn write_run(dir: &Path, params: &FocalParams, report: &TrainReport) -> Result<Vec<String>> {
    out_dir(dir)?;
    params.save(dir.join("params.json"))?;
    write_text(&dir.join("report.json"), &serde_json::to_string_pretty(report)?)?;
    write_text(&dir.join("train_metrics.txt"), &report.train.to_kv())?;
    write_text(&dir.join("val_metrics.txt"), &report.best_val.to_kv())?;
    let mut files = vec!["params.json", "report.json", "train_metrics.txt", "val_metrics.txt", "curve.txt"];
    if let Some(t) = &report.test {
        write_text(&dir.join("test_metrics.txt"), &t.to_kv())?;
        files.push("test_metrics.txt");
    }
    write_text(&dir.join("curve.txt"), &epoch_curve(report))?;
    Ok(files.into_iter().map(String::from).collect())
}

/// Trains once per seed; with more than one seed each run goes to
/// `seed-<s>/` and the summary aggregates the test (or validation) metrics.
fn train_seeds(g: &HetGraph, cfg: &FocalConfig, seeds: &[u64], out: &Path) -> Result<(Vec<String>, Vec<MetricsReport>)> {
    let mut outputs = Vec::new();
    let mut scores = Vec::new();
    for &seed in seeds {
        let c = FocalConfig { seed, ..cfg.clone() };
        let (params, report) = train(g, &c).with_context(|| format!("training with seed {seed}"))?;
        log::info!("seed {seed}: best epoch {} val micro-F1 {:.4}", report.best_epoch, report.best_val.micro_f1);
        let (dir, prefix) = if seeds.len() == 1 {
            (out.to_path_buf(), String::new())
        } else {
            (out.join(format!("seed-{seed}")), format!("seed-{seed}/"))
        };
        outputs.extend(write_run(&dir, &params, &report)?.into_iter().map(|f| format!("{prefix}{f}")));
        scores.push(report.test.clone().unwrap_or(report.best_val.clone()));
    }
    Ok((outputs, scores))
}

// ------------------------------------------------------------ commands

fn cmd_gen(a: &GenArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    cfg.seed = a.seed;
    let g = generate(&cfg)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        out_dir(dir)?;
    }
    save_graph(&g, &a.out)?;
    let summary = serde_json::to_string_pretty(&describe(&g))?;
    let summary_path = sibling(&a.out, "summary.json");
    write_text(&summary_path, &summary)?;
    let mut m = Manifest::new("gen", vec![a.seed], cfg.to_toml()).with_graph(&g);
    m.outputs = vec![a.out.display().to_string(), summary_path.display().to_string()];
    m.write(&sibling(&a.out, "manifest.toml"))?;
    println!("{summary}");
    Ok(())
}

/// `<file>.<suffix>` next to `file`.
fn sibling(file: &Path, suffix: &str) -> PathBuf {
    let mut s = file.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let cfg = load_focal_config(a.config.as_deref())?;
    let seeds = seeds(a.seed, a.runs)?;
    out_dir(&a.out)?;
    let (mut outputs, scores) = train_seeds(&g, &cfg, &seeds, &a.out)?;
    let agg = aggregate(&scores)?;
    let summary = format_mean_std(&agg);
    write_text(&a.out.join("summary.txt"), &summary)?;
    outputs.push("summary.txt".into());
    write_text(&a.out.join("config.toml"), &cfg.to_toml())?;
    outputs.push("config.toml".into());
    let mut m = Manifest::new("train", seeds, cfg.to_toml()).with_graph(&g);
    m.outputs = outputs;
    m.write(&a.out.join("manifest.toml"))?;
    print!("{summary}");
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let cfg = load_focal_config(a.config.as_deref())?;
    let params = FocalParams::load(&a.params)?;
    let metrics = evaluate(&params, &g, &cfg, a.split.into())?;
    out_dir(&a.out)?;
    write_text(&a.out.join("metrics.txt"), &metrics.to_kv())?;
    let mut m = Manifest::new("eval", vec![cfg.seed], cfg.to_toml()).with_graph(&g);
    m.outputs = vec!["metrics.txt".into()];
    m.write(&a.out.join("manifest.toml"))?;
    print!("{}", metrics.to_kv());
    Ok(())
}

fn write_reports(out: &Path, reports: &[TheoremReport]) -> Result<Vec<String>> {
    let mut files = Vec::new();
    let mut summary = String::new();
    for r in reports {
        write_text(&out.join(format!("{}.txt", r.id)), &r.to_text())?;
        write_text(&out.join(format!("{}.json", r.id)), &serde_json::to_string_pretty(r)?)?;
        files.push(format!("{}.txt", r.id));
        files.push(format!("{}.json", r.id));
        for c in &r.curves {
            let name = format!("curves/{}__{}.dat", r.id, c.name.replace('/', "__"));
            write_text(&out.join(&name), &c.to_columns())?;
            files.push(name);
        }
        let _ = writeln!(summary, "{} {} ({:.2}s)", r.id, if r.pass { "PASS" } else { "FAIL" }, r.runtime_secs);
        for c in r.failures() {
            let _ = writeln!(summary, "  failed {}: measured {:e}, allowed [{:e}, {:e}]", c.name, c.measured, c.lower, c.upper);
        }
    }
    write_text(&out.join("summary.txt"), &summary)?;
    files.push("summary.txt".into());
    print!("{summary}");
    Ok(files)
}

fn cmd_verify(a: &VerifyArgs) -> Result<()> {
    out_dir(&a.out)?;
    let (reports, config, graph) = match a.suite.as_str() {
        "all" => (run_all(a.seed)?, String::new(), None),
        "oversmoothing" => {
            let path = a.graph.as_ref().context("--suite oversmoothing needs --graph")?;
            let g = load_graph(path)?;
            let cfg = load_focal_config(a.config.as_deref())?;
            let seeds = seeds(a.seed, a.runs)?;
            let started = std::time::Instant::now();
            let r = run_oversmoothing(&g, &cfg, &a.depths, &seeds)?;
            (vec![r.to_theorem_report(started.elapsed().as_secs_f64())], cfg.to_toml(), Some(g))
        }
        name if SUITE_NAMES.contains(&name) => (vec![run_named(name, a.seed)?], String::new(), None),
        other => bail!(focal_core::Error::Config(format!(
            "unknown suite `{other}`; expected all, oversmoothing or one of {}",
            SUITE_NAMES.join(", ")
        ))),
    };
    let files = write_reports(&a.out, &reports)?;
    let mut m = Manifest::new(&format!("verify-theorems --suite {}", a.suite), vec![a.seed], config);
    if let Some(g) = &graph {
        m = m.with_graph(g);
    }
    m.outputs = files;
    m.write(&a.out.join("manifest.toml"))?;
    let failed: Vec<&str> = reports.iter().filter(|r| !r.pass).map(|r| r.id.as_str()).collect();
    if a.strict && !failed.is_empty() {
        return Err(CheckFailed(format!("theorem checks failed: {}", failed.join(", "))).into());
    }
    Ok(())
}

fn cmd_gradcheck(a: &GradcheckArgs) -> Result<()> {
    if a.points == 0 {
        bail!(focal_core::Error::Config("--points must be at least 1".into()));
    }
    out_dir(&a.out)?;
    let checks = layer_suite(a.seed, a.points)?;
    let mut text = format!("# layer points max_rel_error pass (tol {:e})\n", a.tol);
    for c in &checks {
        let _ = writeln!(text, "{} {} {:e} {}", c.layer, c.points, c.max_rel_error, c.passes(a.tol));
    }
    write_text(&a.out.join("gradcheck.txt"), &text)?;
    let mut m = Manifest::new("gradcheck", vec![a.seed], format!("points = {}\ntol = {:e}\n", a.points, a.tol));
    m.outputs = vec!["gradcheck.txt".into()];
    m.write(&a.out.join("manifest.toml"))?;
    print!("{text}");
    let bad: Vec<&str> = checks.iter().filter(|c| !c.passes(a.tol)).map(|c| c.layer.as_str()).collect();
    if !bad.is_empty() {
        return Err(CheckFailed(format!("gradient check failed for {}", bad.join(", "))).into());
    }
    Ok(())
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let g = load_graph(&a.graph)?;
    let cfg = load_focal_config(a.config.as_deref())?;
    let seeds = seeds(a.seed, a.runs)?;
    out_dir(&a.out)?;
    let mut outputs = Vec::new();
    let mut table = String::new();
    for mode in [Mode::Full, Mode::CoaOnly, Mode::AoaOnly] {
        let dir = a.out.join(mode.name());
        let c = ablation_mode(&cfg, mode);
        let (files, scores) = train_seeds(&g, &c, &seeds, &dir)?;
        outputs.extend(files.into_iter().map(|f| format!("{}/{f}", mode.name())));
        let agg = aggregate(&scores)?;
        write_text(&dir.join("summary.txt"), &format_mean_std(&agg))?;
        outputs.push(format!("{}/summary.txt", mode.name()));
        let _ = writeln!(
            table,
            "{} micro_f1 = {:.6} ± {:.6} macro_f1 = {:.6} ± {:.6}",
            mode.name(),
            agg.mean.micro_f1,
            agg.std.micro_f1,
            agg.mean.macro_f1,
            agg.std.macro_f1
        );
    }
    write_text(&a.out.join("ablation.txt"), &table)?;
    outputs.push("ablation.txt".into());
    let mut m = Manifest::new("ablate", seeds, cfg.to_toml()).with_graph(&g);
    m.outputs = outputs;
    m.write(&a.out.join("manifest.toml"))?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(micro: f64) -> MetricsReport {
        MetricsReport { micro_f1: micro, ..Default::default() }
    }

    #[test]
    fn hand_made_mean_and_sample_std() {
        let agg = aggregate(&[report(0.6), report(0.7)]).unwrap();
        assert!((agg.mean.micro_f1 - 0.65).abs() < 1e-12);
        assert!((agg.std.micro_f1 - 0.070_710_678_118_654_76).abs() < 1e-12);
    }

    #[test]
    fn identical_runs_have_zero_std() {
        let agg = aggregate(&vec![report(0.42); 4]).unwrap();
        assert_eq!(agg.std.micro_f1, 0.0);
        assert_eq!(agg.mean.micro_f1, 0.42);
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn exit_codes_by_error_kind() {
        let numerical: anyhow::Error = focal_core::Error::Divergence { epoch: 3, loss: f64::NAN }.into();
        assert_eq!(exit_code(&numerical), EXIT_NUMERICAL);
        let input: anyhow::Error = focal_core::Error::Config("x".into()).into();
        assert_eq!(exit_code(&input), EXIT_INPUT);
        assert_eq!(exit_code(&CheckFailed("t".into()).into()), EXIT_NUMERICAL);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), EXIT_INPUT);
    }

    #[test]
    fn seed_ranges() {
        assert_eq!(seeds(5, 3).unwrap(), vec![5, 6, 7]);
        assert!(seeds(0, 0).is_err());
    }

    #[test]
    fn sibling_appends_suffix() {
        assert_eq!(sibling(Path::new("a/g.graph"), "manifest.toml"), PathBuf::from("a/g.graph.manifest.toml"));
    }
}
