//! Gated fusion, adaptive residual and the full forward pass.
//!
//! Per layer, COA and AOA both read `h_prev`. Two independent sigmoid gates
//! mix them, `h_fuse = g1 * h_coa + g2 * h_aoa`, and a node-adaptive gate
//! `alpha` interpolates between `h_fuse` and `h_prev`. Layer 0 input is a
//! per-type linear projection of the raw features. Logits are
//! `h_L W_cls + b_cls` on target rows.

use std::sync::Arc;

use rand::Rng as _;

use crate::aoa::{aoa_multi, AoaPathVars, SemanticVars};
use crate::coa::{coa_attention, relation_weights, CoaVars};
use crate::error::{Error, Result};
use crate::layout::{CoaEdges, ModelGraph};
use crate::params::Bound;
use crate::rng::Rng;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;
use crate::trainer::{names, FocalConfig};

/// `g1 * h_coa + g2 * h_aoa`.
pub fn fuse(tape: &mut Tape, g1: VarId, g2: VarId, h_coa: VarId, h_aoa: VarId) -> Result<VarId> {
    let a = tape.mul(g1, h_coa)?;
    let b = tape.mul(g2, h_aoa)?;
    tape.add(a, b)
}

/// `sigmoid([a | b] W + bias)`.
pub fn gate(tape: &mut Tape, a: VarId, b: VarId, w: VarId, bias: VarId) -> Result<VarId> {
    let cat = tape.concat_cols(&[a, b])?;
    let lin = tape.matmul(cat, w)?;
    let shifted = tape.add_row(lin, bias)?;
    tape.sigmoid(shifted)
}

/// Returns `(h_out, alpha)` with `h_out = alpha * h_fuse + (1 - alpha) * h_prev`.
pub fn adaptive_residual(
    tape: &mut Tape,
    h_fuse: VarId,
    h_prev: VarId,
    w: VarId,
    bias: VarId,
) -> Result<(VarId, VarId)> {
    if tape.shape(h_fuse) != tape.shape(h_prev) {
        return Err(Error::shape("adaptive_residual", tape.shape(h_fuse), tape.shape(h_prev)));
    }
    let alpha = gate(tape, h_fuse, h_prev, w, bias)?;
    let diff = tape.sub(h_fuse, h_prev)?;
    let step = tape.mul(alpha, diff)?;
    Ok((tape.add(h_prev, step)?, alpha))
}

/// Values recorded for one layer. Branch-specific entries are `None` when the
/// ablation mode skips that branch.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub h_prev: Tensor,
    pub h_coa: Option<Tensor>,
    pub h_aoa: Option<Tensor>,
    pub g1: Option<Tensor>,
    pub g2: Option<Tensor>,
    pub h_fuse: Tensor,
    pub alpha: Tensor,
    pub h_out: Tensor,
    pub coa_weights: Option<Tensor>,
    pub aoa_weights: Vec<Tensor>,
    pub beta: Option<Tensor>,
}

/// Per-node floor of the AOA gate: `min_k g2[v, k]`.
pub fn gate_floor(trace: &LayerTrace, node: usize) -> Option<f64> {
    trace
        .g2
        .as_ref()
        .map(|g| g.row(node).iter().copied().fold(f64::INFINITY, f64::min))
}

#[derive(Default)]
pub struct ForwardOptions<'r> {
    /// Enables inverted dropout on every layer output.
    pub dropout_rng: Option<&'r mut Rng>,
    /// Replaces the full COA neighborhoods (e.g. sampled fanout).
    pub coa_edges: Option<&'r CoaEdges>,
    pub trace: bool,
    /// Replaces the graph's raw features, one matrix per node type.
    pub features: Option<&'r [Tensor]>,
}


pub struct ForwardOutput {
    /// `rows.len() x C`.
    pub logits: VarId,
    /// Final-layer branch outputs on the requested target rows.
    pub h_coa: Option<VarId>,
    pub h_aoa: Option<VarId>,
    /// Final node embeddings, all nodes.
    pub h: VarId,
    pub trace: Vec<LayerTrace>,
}

/// Per-type input projection stacked into one `num_nodes x d` matrix.
pub fn input_projection(tape: &mut Tape, params: &Bound, mg: &ModelGraph, features: &[Tensor]) -> Result<VarId> {
    let g = mg.graph();
    if features.len() != g.num_node_types() {
        return Err(Error::Config(format!("{} feature matrices for {} node types", features.len(), g.num_node_types())));
    }
    let mut parts = Vec::with_capacity(g.num_node_types());
    for (ty, name) in g.node_type_names().iter().enumerate() {
        if features[ty].rows() != g.node_counts()[ty] || features[ty].cols() != g.all_features()[ty].cols() {
            return Err(Error::shape("input_projection", features[ty].shape(), g.all_features()[ty].shape()));
        }
        let x = tape.constant(features[ty].clone());
        let p = params.var(&names::input(name))?;
        parts.push(tape.matmul(x, p)?);
    }
    tape.concat_rows(&parts)
}

pub fn layer_coa_vars(tape: &mut Tape, params: &Bound, mg: &ModelGraph, l: usize, heads: usize) -> Result<CoaVars> {
    let rho = mg
        .graph()
        .relations()
        .iter()
        .map(|r| params.var(&names::rho(l, &r.name)))
        .collect::<Result<Vec<_>>>()?;
    Ok(CoaVars {
        wq: params.var(&names::coa(l, "wq"))?,
        wk: params.var(&names::coa(l, "wk"))?,
        wv: params.var(&names::coa(l, "wv"))?,
        mu: relation_weights(tape, &rho, heads)?,
    })
}

pub fn layer_aoa_vars(params: &Bound, mg: &ModelGraph, l: usize) -> Result<(Vec<AoaPathVars>, Option<SemanticVars>)> {
    let paths = mg
        .anchored()
        .iter()
        .map(|ap| {
            Ok(AoaPathVars {
                w: params.var(&names::aoa(l, &ap.key, "w"))?,
                att_self: params.var(&names::aoa(l, &ap.key, "att_self"))?,
                att_nbr: params.var(&names::aoa(l, &ap.key, "att_nbr"))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sem = if paths.len() > 1 {
        Some(SemanticVars {
            ws: params.var(&names::sem(l, "ws"))?,
            bs: params.var(&names::sem(l, "bs"))?,
            q: params.var(&names::sem(l, "q"))?,
        })
    } else {
        None
    };
    Ok((paths, sem))
}

fn dropout(tape: &mut Tape, h: VarId, p: f64, rng: &mut Rng) -> Result<VarId> {
    let [r, c] = tape.shape(h);
    let keep = 1.0 - p;
    let mask: Vec<f64> = (0..r * c)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    tape.mul_const(h, Arc::new(Tensor::from_vec(r, c, mask)?))
}

/// Runs all layers and the classifier on target rows `rows` (target-local indices).
pub fn focal_forward(
    tape: &mut Tape,
    params: &Bound,
    mg: &ModelGraph,
    cfg: &FocalConfig,
    rows: &[usize],
    mut opts: ForwardOptions,
) -> Result<ForwardOutput> {
    let mode = cfg.mode;
    if mode.uses_aoa() && mg.anchored().is_empty() {
        return Err(Error::EmptyMetaPathSet);
    }
    let coa_edges = opts.coa_edges.unwrap_or(mg.coa());
    let mut h = input_projection(tape, params, mg, opts.features.unwrap_or(mg.graph().all_features()))?;
    let mut trace = Vec::new();
    let mut last = (None, None);
    for l in 0..cfg.num_layers {
        let h_coa = if mode.uses_coa() {
            let vars = layer_coa_vars(tape, params, mg, l, cfg.coa_heads)?;
            Some(coa_attention(tape, &vars, h, coa_edges, cfg.coa_heads)?)
        } else {
            None
        };
        let h_aoa = if mode.uses_aoa() {
            let (paths, sem) = layer_aoa_vars(params, mg, l)?;
            let pairs: Vec<_> = paths.into_iter().zip(mg.anchored().iter().map(|a| &a.edges)).collect();
            Some(aoa_multi(tape, &pairs, sem.as_ref(), h, cfg.aoa_heads, cfg.leaky_slope)?)
        } else {
            None
        };
        let (h_fuse, gates) = match (&h_coa, &h_aoa) {
            (Some(c), Some(a)) => {
                let g1 = gate(tape, c.h, a.h, params.var(&names::gate(l, 1, "w"))?, params.var(&names::gate(l, 1, "b"))?)?;
                let g2 = gate(tape, c.h, a.h, params.var(&names::gate(l, 2, "w"))?, params.var(&names::gate(l, 2, "b"))?)?;
                (fuse(tape, g1, g2, c.h, a.h)?, Some((g1, g2)))
            }
            (Some(c), None) => (c.h, None),
            (None, Some(a)) => (a.h, None),
            (None, None) => unreachable!("at least one branch is active"),
        };
        let (mut h_out, alpha) =
            adaptive_residual(tape, h_fuse, h, params.var(&names::res(l, "w"))?, params.var(&names::res(l, "b"))?)?;
        if let Some(rng) = opts.dropout_rng.as_deref_mut() {
            if cfg.dropout > 0.0 {
                h_out = dropout(tape, h_out, cfg.dropout, rng)?;
            }
        }
        if opts.trace {
            let val = |v: VarId| tape.value(v).clone();
            trace.push(LayerTrace {
                h_prev: val(h),
                h_coa: h_coa.map(|c| val(c.h)),
                h_aoa: h_aoa.as_ref().map(|a| val(a.h)),
                g1: gates.map(|g| val(g.0)),
                g2: gates.map(|g| val(g.1)),
                h_fuse: val(h_fuse),
                alpha: val(alpha),
                h_out: val(h_out),
                coa_weights: h_coa.map(|c| val(c.weights)),
                aoa_weights: h_aoa
                    .as_ref()
                    .map(|a| a.per_path.iter().map(|p| val(p.weights)).collect())
                    .unwrap_or_default(),
                beta: h_aoa.as_ref().and_then(|a| a.beta).map(val),
            });
        }
        last = (h_coa.map(|c| c.h), h_aoa.map(|a| a.h));
        h = h_out;
    }
    let idx: Arc<[usize]> = rows.iter().map(|&t| mg.target_row(t)).collect();
    let ht = tape.gather_rows(h, idx.clone())?;
    let lin = tape.matmul(ht, params.var(names::CLS_W)?)?;
    let logits = tape.add_row(lin, params.var(names::CLS_B)?)?;
    let h_coa = match last.0 {
        Some(v) => Some(tape.gather_rows(v, idx.clone())?),
        None => None,
    };
    let h_aoa = match last.1 {
        Some(v) => Some(tape.gather_rows(v, idx)?),
        None => None,
    };
    Ok(ForwardOutput {
        logits,
        h_coa,
        h_aoa,
        h,
        trace,
    })
}

/// Logits of all target nodes in evaluation mode.
pub fn predict_logits(params: &crate::params::FocalParams, mg: &ModelGraph, cfg: &FocalConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let rows: Vec<usize> = (0..mg.graph().num_targets()).collect();
    let out = focal_forward(&mut tape, &bound, mg, cfg, &rows, ForwardOptions::default())?;
    Ok(tape.value(out.logits).clone())
}

/// Evaluation-mode forward with the layer trace.
pub fn trace_forward(
    params: &crate::params::FocalParams,
    mg: &ModelGraph,
    cfg: &FocalConfig,
    features: Option<&[Tensor]>,
) -> Result<(Tensor, Vec<LayerTrace>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let rows: Vec<usize> = (0..mg.graph().num_targets()).collect();
    let opts = ForwardOptions {
        trace: true,
        features,
        ..Default::default()
    };
    let out = focal_forward(&mut tape, &bound, mg, cfg, &rows, opts)?;
    Ok((tape.value(out.logits).clone(), out.trace))
}
