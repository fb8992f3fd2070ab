//! Model configuration, initialization and the training loop.

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{focal_forward, predict_logits, ForwardOptions};
use crate::hetgraph::{HetGraph, Split};
use crate::layout::ModelGraph;
use crate::objective::{asl_loss, consistency_loss, metrics, predict, total_loss, MetricsReport};
use crate::params::FocalParams;
use crate::rng::named_stream;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Full,
    CoaOnly,
    AoaOnly,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Full => "full",
            Mode::CoaOnly => "coa_only",
            Mode::AoaOnly => "aoa_only",
        }
    }

    pub fn uses_coa(self) -> bool {
        self != Mode::AoaOnly
    }

    pub fn uses_aoa(self) -> bool {
        self != Mode::CoaOnly
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Mode::Full),
            "coa_only" => Ok(Mode::CoaOnly),
            "aoa_only" => Ok(Mode::AoaOnly),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

/// Every hyperparameter of a run. Serialized as a flat TOML table; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FocalConfig {
    pub hidden_dim: usize,
    pub out_dim: usize,
    pub num_layers: usize,
    pub coa_heads: usize,
    pub aoa_heads: usize,
    pub dropout: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub patience: usize,
    pub max_epoch: usize,
    /// In-neighbors sampled per node for COA during training; full neighborhoods when absent.
    pub fanout: Option<usize>,
    pub lambda: f64,
    pub threshold: f64,
    pub seed: u64,
    pub metapaths: Vec<Vec<String>>,
    pub asl_gamma_pos: f64,
    pub asl_gamma_neg: f64,
    pub asl_margin: f64,
    pub leaky_slope: f64,
    pub mode: Mode,
}

impl Default for FocalConfig {
    fn default() -> Self {
        FocalConfig {
            hidden_dim: 16,
            out_dim: 16,
            num_layers: 2,
            coa_heads: 8,
            aoa_heads: 2,
            dropout: 0.5,
            lr: 0.003,
            weight_decay: 0.0005,
            batch_size: 5120,
            patience: 60,
            max_epoch: 500,
            fanout: None,
            lambda: 0.05,
            threshold: 0.5,
            seed: 0,
            metapaths: Vec::new(),
            asl_gamma_pos: 0.0,
            asl_gamma_neg: 4.0,
            asl_margin: 0.05,
            leaky_slope: crate::tensor::DEFAULT_LEAKY_SLOPE,
            mode: Mode::Full,
        }
    }
}

impl FocalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = self.hidden_dim;
        if d == 0 || self.num_layers == 0 {
            return bad("hidden_dim and num_layers must be positive".into());
        }
        if self.out_dim != d {
            return bad(format!("out_dim ({}) must equal hidden_dim ({d})", self.out_dim));
        }
        if self.coa_heads == 0 || !d.is_multiple_of(self.coa_heads) {
            return bad(format!("hidden_dim {d} not divisible by coa_heads {}", self.coa_heads));
        }
        if self.aoa_heads == 0 || !d.is_multiple_of(self.aoa_heads) {
            return bad(format!("hidden_dim {d} not divisible by aoa_heads {}", self.aoa_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad("lr and weight_decay must be finite and >= 0".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and >= 0".into());
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return bad("threshold must lie in (0, 1)".into());
        }
        if self.asl_gamma_pos < 0.0 || self.asl_gamma_neg < 0.0 || !(0.0..1.0).contains(&self.asl_margin) {
            return bad("asl gammas must be >= 0 and asl_margin in [0, 1)".into());
        }
        if self.batch_size == 0 || self.fanout == Some(0) {
            return bad("batch_size and fanout must be positive".into());
        }
        if !(self.leaky_slope >= 0.0 && self.leaky_slope < 1.0) {
            return bad("leaky_slope must lie in [0, 1)".into());
        }
        Ok(())
    }

    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: FocalConfig = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// FNV-1a of the canonical TOML form.
    pub fn hash(&self) -> u64 {
        crate::rng::fnv1a(self.to_toml().as_bytes())
    }

    pub fn asl(&self) -> crate::tape::AslSpec {
        crate::tape::AslSpec {
            gamma_pos: self.asl_gamma_pos,
            gamma_neg: self.asl_gamma_neg,
            margin: self.asl_margin,
        }
    }
}

/// Derives the configuration of an ablation run.
pub fn ablation_mode(cfg: &FocalConfig, mode: Mode) -> FocalConfig {
    FocalConfig { mode, ..cfg.clone() }
}

pub mod names {
    pub fn input(ty: &str) -> String {
        format!("input.{ty}")
    }
    pub fn coa(l: usize, w: &str) -> String {
        format!("l{l}.coa.{w}")
    }
    pub fn rho(l: usize, rel: &str) -> String {
        format!("l{l}.coa.rho.{rel}")
    }
    pub fn aoa(l: usize, key: &str, w: &str) -> String {
        format!("l{l}.aoa.{key}.{w}")
    }
    pub fn sem(l: usize, w: &str) -> String {
        format!("l{l}.sem.{w}")
    }
    pub fn gate(l: usize, which: usize, w: &str) -> String {
        format!("l{l}.gate{which}.{w}")
    }
    pub fn res(l: usize, w: &str) -> String {
        format!("l{l}.res.{w}")
    }
    pub const CLS_W: &str = "cls.w";
    pub const CLS_B: &str = "cls.b";
}

/// Xavier-uniform weights, zero biases, zero relation pre-activations.
/// Each tensor draws from its own stream keyed by its name.
pub fn init_params(cfg: &FocalConfig, mg: &ModelGraph, seed: u64) -> Result<FocalParams> {
    cfg.validate()?;
    let g = mg.graph();
    let d = cfg.hidden_dim;
    let mut p = FocalParams::new();
    let xavier = |p: &mut FocalParams, name: String, r: usize, c: usize| {
        let t = FocalParams::xavier(seed, &name, r, c);
        p.insert(name, t);
    };
    for (ty, name) in g.node_type_names().iter().enumerate() {
        let d_in = g.all_features()[ty].cols();
        xavier(&mut p, names::input(name), d_in, d);
    }
    for l in 0..cfg.num_layers {
        for w in ["wq", "wk", "wv"] {
            xavier(&mut p, names::coa(l, w), d, d);
        }
        for rel in g.relations() {
            p.insert(names::rho(l, &rel.name), Tensor::zeros(1, cfg.coa_heads));
        }
        for ap in mg.anchored() {
            xavier(&mut p, names::aoa(l, &ap.key, "w"), d, d);
            xavier(&mut p, names::aoa(l, &ap.key, "att_self"), 1, d);
            xavier(&mut p, names::aoa(l, &ap.key, "att_nbr"), 1, d);
        }
        if mg.anchored().len() > 1 {
            xavier(&mut p, names::sem(l, "ws"), d, d);
            p.insert(names::sem(l, "bs"), Tensor::zeros(1, d));
            xavier(&mut p, names::sem(l, "q"), d, 1);
        }
        for which in [1, 2] {
            xavier(&mut p, names::gate(l, which, "w"), 2 * d, d);
            p.insert(names::gate(l, which, "b"), Tensor::zeros(1, d));
        }
        xavier(&mut p, names::res(l, "w"), 2 * d, d);
        p.insert(names::res(l, "b"), Tensor::zeros(1, d));
    }
    xavier(&mut p, names::CLS_W.to_string(), d, g.num_labels());
    p.insert(names::CLS_B, Tensor::zeros(1, g.num_labels()));
    Ok(p)
}

/// Checks that `cfg` can run on `g`: meta-paths resolve and AOA has at least one primary path.
pub fn check_compatible(cfg: &FocalConfig, g: &HetGraph) -> Result<()> {
    cfg.validate()?;
    let mg = ModelGraph::new(g, &cfg.metapaths)?;
    if cfg.mode.uses_aoa() && mg.anchored().is_empty() {
        return Err(Error::EmptyMetaPathSet);
    }
    Ok(())
}

/// Adaptive moment estimation with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, shapes: &[Tensor]) -> Self {
        let zeros = || shapes.iter().map(|t| Tensor::zeros(t.rows(), t.cols())).collect();
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let update = (md[i] / bc1) / ((vd[i] / bc2).sqrt() + self.eps) + self.weight_decay * pd[i];
                pd[i] -= self.lr * update;
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val: MetricsReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val: MetricsReport,
    pub train: MetricsReport,
    pub test: Option<MetricsReport>,
    pub wall_time_secs: f64,
}

impl TrainReport {
    /// Copy with the wall-clock field zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> TrainReport {
        TrainReport {
            wall_time_secs: 0.0,
            ..self.clone()
        }
    }
}

fn divergence(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { .. } => Error::Divergence { epoch, loss: f64::NAN },
        other => other,
    }
}

/// Loss and parameter gradients on target rows `rows`.
pub fn loss_and_grads(
    params: &FocalParams,
    mg: &ModelGraph,
    cfg: &FocalConfig,
    rows: &[usize],
    opts: ForwardOptions,
) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let out = focal_forward(&mut tape, &bound, mg, cfg, rows, opts)?;
    let labels = Arc::new(mg.graph().labels().select_rows(rows));
    let asl = asl_loss(&mut tape, out.logits, labels, cfg.asl())?;
    let consist = match (cfg.mode, out.h_coa, out.h_aoa) {
        (Mode::Full, Some(c), Some(a)) if cfg.lambda > 0.0 => Some(consistency_loss(&mut tape, c, a)?),
        _ => None,
    };
    let loss = total_loss(&mut tape, asl, consist, cfg.lambda)?;
    let value = tape.value(loss).item()?;
    let grads = tape.backward(loss)?;
    Ok((value, bound.ids().iter().map(|&id| grads.get(id)).collect()))
}

pub fn evaluate(params: &FocalParams, g: &HetGraph, cfg: &FocalConfig, split: Split) -> Result<MetricsReport> {
    let rows = g.split(split);
    if rows.is_empty() {
        return Err(Error::EmptySplit(split.name().into()));
    }
    let mg = ModelGraph::new(g, &cfg.metapaths)?;
    let logits = predict_logits(params, &mg, cfg)?;
    split_metrics(&logits, g, rows, cfg.threshold)
}

fn split_metrics(logits: &Tensor, g: &HetGraph, rows: &[usize], threshold: f64) -> Result<MetricsReport> {
    let pred = predict(&logits.select_rows(rows), threshold);
    metrics(&g.labels().select_rows(rows), &pred)
}

/// Trains from `init_params(cfg, seed = cfg.seed)` and restores the best-validation parameters.
pub fn train(g: &HetGraph, cfg: &FocalConfig) -> Result<(FocalParams, TrainReport)> {
    cfg.validate()?;
    let mg = ModelGraph::new(g, &cfg.metapaths)?;
    let params = init_params(cfg, &mg, cfg.seed)?;
    train_from(g, &mg, cfg, params)
}

pub fn train_from(
    g: &HetGraph,
    mg: &ModelGraph,
    cfg: &FocalConfig,
    mut params: FocalParams,
) -> Result<(FocalParams, TrainReport)> {
    let started = Instant::now();
    for split in [Split::Train, Split::Val] {
        if g.split(split).is_empty() {
            return Err(Error::EmptySplit(split.name().into()));
        }
    }
    if cfg.mode.uses_aoa() && mg.anchored().is_empty() {
        return Err(Error::EmptyMetaPathSet);
    }
    let train_rows = g.split(Split::Train).to_vec();
    let batched = g.num_targets() > cfg.batch_size;
    let mut batch_rng = named_stream(cfg.seed, "train/batches");
    let mut dropout_rng = named_stream(cfg.seed, "train/dropout");
    let mut fanout_rng = named_stream(cfg.seed, "train/fanout");
    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay, params.tensors());

    let mut epochs = Vec::new();
    let mut best: Option<(usize, MetricsReport, FocalParams)> = None;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epoch {
        let mut order = train_rows.clone();
        if batched {
            order.shuffle(&mut batch_rng);
        }
        let mut total = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let sampled = match cfg.fanout {
                Some(k) if batched => Some(mg.sampled_coa(k, &mut fanout_rng)?),
                _ => None,
            };
            let opts = ForwardOptions {
                dropout_rng: Some(&mut dropout_rng),
                coa_edges: sampled.as_ref(),
                trace: false,
                features: None,
            };
            let (loss, grads) = loss_and_grads(&params, mg, cfg, chunk, opts).map_err(|e| divergence(epoch, e))?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            opt.step(params.tensors_mut(), &grads);
            if params.tensors().iter().any(|t| !t.is_finite()) {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss;
            batches += 1;
        }
        let logits = predict_logits(&params, mg, cfg).map_err(|e| divergence(epoch, e))?;
        let val = split_metrics(&logits, g, g.split(Split::Val), cfg.threshold)?;
        let train_loss = total / batches as f64;
        log::debug!("epoch {epoch}: loss {train_loss:.6} val micro-F1 {:.4}", val.micro_f1);
        let improved = best.as_ref().is_none_or(|b| val.micro_f1 > b.1.micro_f1);
        // A tie moves the snapshot to the later epoch but does not reset patience.
        let tied = best.as_ref().is_some_and(|b| val.micro_f1 == b.1.micro_f1);
        epochs.push(EpochRecord { epoch, train_loss, val: val.clone() });
        if improved {
            best = Some((epoch, val, params.clone()));
            since_best = 0;
        } else {
            if tied {
                best = Some((epoch, val, params.clone()));
            }
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (best_epoch, best_val, best_params) = match best {
        Some(b) => b,
        None => (0, MetricsReport::default(), params),
    };
    let logits = predict_logits(&best_params, mg, cfg)?;
    let train = split_metrics(&logits, g, g.split(Split::Train), cfg.threshold)?;
    let test = if g.split(Split::Test).is_empty() {
        None
    } else {
        Some(split_metrics(&logits, g, g.split(Split::Test), cfg.threshold)?)
    };
    let report = TrainReport {
        mode: cfg.mode,
        seed: cfg.seed,
        epochs,
        best_epoch,
        best_val,
        train,
        test,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((best_params, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, SynthConfig, PRIMARY_METAPATH};

    fn small_graph() -> HetGraph {
        generate(&SynthConfig {
            seed: 2,
            num_targets: 60,
            secondary_degree: 4.0,
            num_distractors: 20,
            noise_std: 0.3,
            ..Default::default()
        })
        .unwrap()
    }

    fn small_cfg() -> FocalConfig {
        FocalConfig {
            hidden_dim: 8,
            out_dim: 8,
            coa_heads: 4,
            max_epoch: 5,
            metapaths: vec![vec![PRIMARY_METAPATH.into()]],
            ..Default::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let g = small_graph();
        let cfg = FocalConfig { lr: 0.0, weight_decay: 0.0, ..small_cfg() };
        let mg = ModelGraph::new(&g, &cfg.metapaths).unwrap();
        let init = init_params(&cfg, &mg, cfg.seed).unwrap();
        let (trained, _) = train(&g, &cfg).unwrap();
        assert_eq!(trained, init);
    }

    #[test]
    fn same_seed_same_report_and_params() {
        let g = small_graph();
        let cfg = small_cfg();
        let (p1, r1) = train(&g, &cfg).unwrap();
        let (p2, r2) = train(&g, &cfg).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(r1.without_timing(), r2.without_timing());
        let (p3, _) = train(&g, &FocalConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(p1, p3);
    }

    #[test]
    fn best_val_is_max_over_epochs() {
        let g = small_graph();
        let (_, r) = train(&g, &FocalConfig { max_epoch: 12, patience: 3, ..small_cfg() }).unwrap();
        let max = r.epochs.iter().map(|e| e.val.micro_f1).fold(f64::MIN, f64::max);
        assert_eq!(r.best_val.micro_f1, max);
        assert_eq!(r.epochs[r.best_epoch - 1].val, r.best_val);
    }

    #[test]
    fn empty_split_is_an_error() {
        let g = small_graph();
        let mut parts = g.into_parts();
        parts.splits.val.clear();
        let g = HetGraph::new(parts).unwrap();
        let cfg = small_cfg();
        assert!(matches!(train(&g, &cfg), Err(Error::EmptySplit(_))));
        let mg = ModelGraph::new(&g, &cfg.metapaths).unwrap();
        let p = init_params(&cfg, &mg, 0).unwrap();
        assert!(matches!(evaluate(&p, &g, &cfg, Split::Val), Err(Error::EmptySplit(_))));
    }

    #[test]
    fn evaluate_leaves_params_untouched() {
        let g = small_graph();
        let cfg = small_cfg();
        let mg = ModelGraph::new(&g, &cfg.metapaths).unwrap();
        let p = init_params(&cfg, &mg, 3).unwrap();
        let copy = p.clone();
        let a = evaluate(&p, &g, &cfg, Split::Test).unwrap();
        let b = evaluate(&p, &g, &cfg, Split::Test).unwrap();
        assert_eq!(a, b);
        assert_eq!(p, copy);
    }

    #[test]
    fn coa_only_never_touches_aoa_params() {
        let g = small_graph();
        let cfg = ablation_mode(&small_cfg(), Mode::CoaOnly);
        let mg = ModelGraph::new(&g, &cfg.metapaths).unwrap();
        let p = init_params(&cfg, &mg, 0).unwrap();
        let rows: Vec<usize> = g.split(Split::Train).to_vec();
        let (_, grads) = loss_and_grads(&p, &mg, &cfg, &rows, ForwardOptions::default()).unwrap();
        let mut seen = 0;
        for (name, gr) in p.names().iter().zip(&grads) {
            if name.contains(".aoa.") || name.contains(".gate") {
                seen += 1;
                assert!(gr.data().iter().all(|&x| x == 0.0), "{name}");
            }
        }
        assert!(seen > 0);
        let (_, full) = loss_and_grads(&p, &mg, &small_cfg(), &rows, ForwardOptions::default()).unwrap();
        let i = p.position(&names::aoa(0, PRIMARY_METAPATH, "w")).unwrap();
        assert!(full[i].data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn ablation_full_is_identity() {
        let cfg = small_cfg();
        assert_eq!(ablation_mode(&cfg, Mode::Full), cfg);
        assert_eq!(ablation_mode(&cfg, Mode::AoaOnly).mode, Mode::AoaOnly);
    }

    #[test]
    fn adamw_step_matches_finite_difference_step() {
        // 20 parameters: w is 4x5, loss = sum(sigmoid(x w) * y).
        let x = Tensor::from_rows(&[
            vec![0.3, -1.2, 0.7, 0.1],
            vec![1.1, 0.4, -0.5, 0.9],
            vec![-0.6, 0.2, 0.8, -1.4],
        ])
        .unwrap();
        let y = Tensor::from_rows(&[
            vec![1.0, -0.5, 0.2, 0.0, 0.7],
            vec![0.3, 0.9, -1.0, 0.4, 0.1],
            vec![-0.2, 0.6, 0.5, 1.2, -0.8],
        ])
        .unwrap();
        let loss = |w: &Tensor| -> f64 {
            let z = x.matmul(w).unwrap();
            z.data().iter().zip(y.data()).map(|(&a, &b)| crate::tensor::sigmoid(a) * b).sum()
        };
        let w0 = FocalParams::xavier(9, "toy", 4, 5);
        let mut tape = Tape::new();
        let wv = tape.leaf(w0.clone());
        let xv = tape.constant(x.clone());
        let z = tape.matmul(xv, wv).unwrap();
        let s = tape.sigmoid(z).unwrap();
        let yv = tape.constant(y.clone());
        let m = tape.mul(s, yv).unwrap();
        let l = tape.sum_all(m).unwrap();
        let analytic = tape.backward(l).unwrap().get(wv);
        let h = 1e-6;
        let mut numeric = Tensor::zeros(4, 5);
        for i in 0..20 {
            let (mut up, mut dn) = (w0.clone(), w0.clone());
            up.data_mut()[i] += h;
            dn.data_mut()[i] -= h;
            numeric.data_mut()[i] = (loss(&up) - loss(&dn)) / (2.0 * h);
        }
        let run = |g: &Tensor| {
            let mut p = vec![w0.clone()];
            let mut opt = AdamW::new(0.01, 0.01, &p);
            for _ in 0..3 {
                opt.step(&mut p, std::slice::from_ref(g));
            }
            p.remove(0)
        };
        let (a, n) = (run(&analytic), run(&numeric));
        for (p, q) in a.data().iter().zip(n.data()) {
            assert!((p - q).abs() <= 1e-4 * p.abs().max(q.abs()).max(1e-12), "{p} vs {q}");
        }
    }

    #[test]
    fn adamw_first_step_is_signed_lr() {
        let mut p = vec![Tensor::from_rows(&[vec![1.0, -2.0]]).unwrap()];
        let mut opt = AdamW::new(0.1, 0.0, &p);
        opt.step(&mut p, &[Tensor::from_rows(&[vec![3.0, -0.5]]).unwrap()]);
        assert!((p[0].get(0, 0) - 0.9).abs() < 1e-8);
        assert!((p[0].get(0, 1) + 1.9).abs() < 1e-8);
    }

    #[test]
    fn config_round_trips_and_rejects_unknown_keys() {
        let cfg = FocalConfig { fanout: Some(5), mode: Mode::AoaOnly, ..small_cfg() };
        let back = FocalConfig::from_toml(&cfg.to_toml(), Path::new("mem")).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert!(FocalConfig::from_toml("hidden_dm = 3\n", Path::new("mem")).is_err());
        let partial = FocalConfig::from_toml("lr = 0.01\nmode = \"coa_only\"\n", Path::new("mem")).unwrap();
        assert_eq!(partial.lr, 0.01);
        assert_eq!(partial.mode, Mode::CoaOnly);
        assert_eq!(partial.hidden_dim, 16);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for cfg in [
            FocalConfig { out_dim: 8, ..Default::default() },
            FocalConfig { coa_heads: 3, ..Default::default() },
            FocalConfig { dropout: 1.0, ..Default::default() },
            FocalConfig { lr: -1.0, ..Default::default() },
        ] {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!("half".parse::<Mode>().is_err());
    }

    #[test]
    fn init_biases_zero_and_weights_bounded() {
        let g = small_graph();
        let cfg = small_cfg();
        let mg = ModelGraph::new(&g, &cfg.metapaths).unwrap();
        let p = init_params(&cfg, &mg, 4).unwrap();
        for (name, t) in p.names().iter().zip(p.tensors()) {
            if name.ends_with(".b") || name.contains(".rho.") || name.ends_with(".bs") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                let bound = (6.0 / (t.rows() + t.cols()) as f64).sqrt();
                assert!(t.data().iter().all(|&v| v.abs() <= bound), "{name}");
            }
        }
        assert_eq!(p, init_params(&cfg, &mg, 4).unwrap());
    }
}
