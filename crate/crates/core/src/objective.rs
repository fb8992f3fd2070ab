//! Training objective, thresholding and multi-label metrics.

use std::fmt::Write as _;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{AslSpec, Tape, VarId};
use crate::tensor::{sigmoid, Tensor};

pub type AslConfig = AslSpec;

impl Default for AslSpec {
    fn default() -> Self {
        AslSpec {
            gamma_pos: 0.0,
            gamma_neg: 4.0,
            margin: 0.05,
        }
    }
}

/// Asymmetric loss on the tape: mean over rows of the per-row sum over classes.
pub fn asl_loss(tape: &mut Tape, logits: VarId, labels: Arc<Tensor>, cfg: AslConfig) -> Result<VarId> {
    tape.asl(logits, labels, cfg)
}

/// Plain evaluation of the asymmetric loss.
pub fn asl_value(z: &Tensor, y: &Tensor, cfg: AslConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let zv = tape.leaf(z.clone());
    let l = tape.asl(zv, Arc::new(y.clone()), cfg)?;
    tape.value(l).item()
}

/// `mean_v (1 - cos(h_coa[v], h_aoa[v]))`. Rows where either side is zero count as 1.
pub fn consistency_loss(tape: &mut Tape, h_coa: VarId, h_aoa: VarId) -> Result<VarId> {
    let cos = tape.row_cosine(h_coa, h_aoa)?;
    let zero_rows = {
        let (a, b) = (tape.value(h_coa), tape.value(h_aoa));
        (0..a.rows())
            .filter(|&r| a.row(r).iter().all(|&x| x == 0.0) || b.row(r).iter().all(|&x| x == 0.0))
            .count()
    };
    if zero_rows > 0 {
        log::warn!("consistency loss: {zero_rows} zero row(s) counted as maximally inconsistent");
    }
    let mean = tape.mean_all(cos)?;
    let neg = tape.scale(mean, -1.0)?;
    tape.add_const(neg, 1.0)
}

/// `asl + lambda * consist`.
pub fn total_loss(tape: &mut Tape, asl: VarId, consist: Option<VarId>, lambda: f64) -> Result<VarId> {
    match consist {
        Some(c) if lambda != 0.0 => {
            let s = tape.scale(c, lambda)?;
            tape.add(asl, s)
        }
        _ => Ok(asl),
    }
}

/// Multi-hot predictions: `sigmoid(z) >= threshold`.
pub fn predict(logits: &Tensor, threshold: f64) -> Tensor {
    logits.map(|z| if sigmoid(z) >= threshold { 1.0 } else { 0.0 })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub sample_f1: f64,
    pub hamming_loss: f64,
    pub subset_accuracy: f64,
    pub micro_precision: f64,
    pub macro_precision: f64,
    pub micro_recall: f64,
    pub macro_recall: f64,
}

pub const METRIC_NAMES: [&str; 9] = [
    "micro_f1",
    "macro_f1",
    "sample_f1",
    "hamming_loss",
    "subset_accuracy",
    "micro_precision",
    "macro_precision",
    "micro_recall",
    "macro_recall",
];

impl MetricsReport {
    pub fn values(&self) -> [f64; 9] {
        [
            self.micro_f1,
            self.macro_f1,
            self.sample_f1,
            self.hamming_loss,
            self.subset_accuracy,
            self.micro_precision,
            self.macro_precision,
            self.micro_recall,
            self.macro_recall,
        ]
    }

    pub fn from_values(v: [f64; 9]) -> Self {
        MetricsReport {
            micro_f1: v[0],
            macro_f1: v[1],
            sample_f1: v[2],
            hamming_loss: v[3],
            subset_accuracy: v[4],
            micro_precision: v[5],
            macro_precision: v[6],
            micro_recall: v[7],
            macro_recall: v[8],
        }
    }

    /// One `name=value` line per metric.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        for (n, v) in METRIC_NAMES.iter().zip(self.values()) {
            writeln!(s, "{n}={v}").expect("string write");
        }
        s
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let mut vals = [f64::NAN; 9];
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("malformed metrics line `{line}`")))?;
            let i = METRIC_NAMES
                .iter()
                .position(|n| *n == k.trim())
                .ok_or_else(|| Error::Config(format!("unknown metric `{k}`")))?;
            vals[i] = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad value for `{k}`")))?;
        }
        if vals.iter().any(|v| v.is_nan()) {
            return Err(Error::Config("metrics block is missing entries".into()));
        }
        Ok(Self::from_values(vals))
    }
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

fn check_binary(t: &Tensor, what: &str) -> Result<()> {
    if let Some(i) = t.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        let c = t.cols().max(1);
        return Err(Error::Labels(format!("{what} row {} column {} is not 0/1", i / c, i % c)));
    }
    Ok(())
}

pub fn metrics(y_true: &Tensor, y_pred: &Tensor) -> Result<MetricsReport> {
    if y_true.shape() != y_pred.shape() {
        return Err(Error::shape("metrics", y_true.shape(), y_pred.shape()));
    }
    check_binary(y_true, "y_true")?;
    check_binary(y_pred, "y_pred")?;
    let (n, c) = (y_true.rows(), y_true.cols());
    let mut tp = vec![0.0; c];
    let mut fp = vec![0.0; c];
    let mut fnn = vec![0.0; c];
    let mut sample_f1 = 0.0;
    let mut exact = 0usize;
    let mut disagree = 0usize;
    for r in 0..n {
        let (t, p) = (y_true.row(r), y_pred.row(r));
        let (mut rtp, mut rfp, mut rfn) = (0.0, 0.0, 0.0);
        for k in 0..c {
            match (t[k] == 1.0, p[k] == 1.0) {
                (true, true) => {
                    tp[k] += 1.0;
                    rtp += 1.0;
                }
                (false, true) => {
                    fp[k] += 1.0;
                    rfp += 1.0;
                }
                (true, false) => {
                    fnn[k] += 1.0;
                    rfn += 1.0;
                }
                (false, false) => {}
            }
        }
        let wrong = (rfp + rfn) as usize;
        disagree += wrong;
        if wrong == 0 {
            exact += 1;
        }
        let den = 2.0 * rtp + rfp + rfn;
        sample_f1 += if den == 0.0 { 1.0 } else { 2.0 * rtp / den };
    }
    let (stp, sfp, sfn): (f64, f64, f64) = (tp.iter().sum(), fp.iter().sum(), fnn.iter().sum());
    let mut macro_p = 0.0;
    let mut macro_r = 0.0;
    let mut macro_f = 0.0;
    for k in 0..c {
        macro_p += ratio(tp[k], tp[k] + fp[k]);
        macro_r += ratio(tp[k], tp[k] + fnn[k]);
        macro_f += ratio(2.0 * tp[k], 2.0 * tp[k] + fp[k] + fnn[k]);
    }
    let cf = c.max(1) as f64;
    let nf = n.max(1) as f64;
    Ok(MetricsReport {
        micro_f1: ratio(2.0 * stp, 2.0 * stp + sfp + sfn),
        macro_f1: macro_f / cf,
        sample_f1: if n == 0 { 0.0 } else { sample_f1 / nf },
        hamming_loss: ratio(disagree as f64, (n * c) as f64),
        subset_accuracy: if n == 0 { 0.0 } else { exact as f64 / nf },
        micro_precision: ratio(stp, stp + sfp),
        macro_precision: macro_p / cf,
        micro_recall: ratio(stp, stp + sfn),
        macro_recall: macro_r / cf,
    })
}
