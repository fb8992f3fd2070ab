//! Central finite-difference verification of tape gradients.

use std::sync::Arc;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::rng::{named_stream, Rng};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Builds a scalar loss on a fresh tape from leaves holding `inputs`.
pub trait TapeFn: Fn(&mut Tape, &[VarId]) -> Result<VarId> {}
impl<F: Fn(&mut Tape, &[VarId]) -> Result<VarId>> TapeFn for F {}

pub fn evaluate(f: &impl TapeFn, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    tape.value(loss).item()
}

pub fn analytic_gradients(f: &impl TapeFn, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    let grads = tape.backward(loss)?;
    Ok(ids.iter().map(|&id| grads.get(id)).collect())
}

pub fn numeric_gradients(f: &impl TapeFn, inputs: &[Tensor], h: f64) -> Result<Vec<Tensor>> {
    let mut point = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for k in 0..inputs.len() {
        let mut g = Tensor::zeros(inputs[k].rows(), inputs[k].cols());
        for j in 0..inputs[k].len() {
            let orig = point[k].data()[j];
            point[k].data_mut()[j] = orig + h;
            let up = evaluate(f, &point)?;
            point[k].data_mut()[j] = orig - h;
            let down = evaluate(f, &point)?;
            point[k].data_mut()[j] = orig;
            g.data_mut()[j] = (up - down) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

/// Max over coordinates of `|analytic - central| / max(1, |analytic|)`.
pub fn grad_check(f: &impl TapeFn, inputs: &[Tensor], h: f64) -> Result<f64> {
    let analytic = analytic_gradients(f, inputs)?;
    let numeric = numeric_gradients(f, inputs, h)?;
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&av, &nv) in a.data().iter().zip(n.data()) {
            worst = worst.max((av - nv).abs() / av.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Worst relative error of one layer over several random points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerGradCheck {
    pub layer: String,
    pub points: usize,
    pub max_rel_error: f64,
}

impl LayerGradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Layers covered by [`layer_suite`].
pub const SUITE_LAYERS: [&str; 8] = [
    "coa",
    "aoa_single",
    "aoa_multi",
    "fusion",
    "residual",
    "asl",
    "consistency",
    "full_forward",
];

fn random(rng: &mut Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect::<Vec<f64>>();
    Tensor::from_vec(rows, cols, data).expect("sized")
}

fn squared_sum(t: &mut Tape, v: VarId) -> Result<VarId> {
    let sq = t.mul(v, v)?;
    t.sum_all(sq)
}

fn check_points(layer: &str, points: usize, seed: u64, f: &impl TapeFn, draw: impl Fn(&mut Rng) -> Vec<Tensor>) -> Result<LayerGradCheck> {
    let mut worst: f64 = 0.0;
    for p in 0..points {
        let mut rng = named_stream(seed ^ p as u64, &format!("gradcheck/{layer}"));
        worst = worst.max(grad_check(f, &draw(&mut rng), DEFAULT_STEP)?);
    }
    Ok(LayerGradCheck {
        layer: layer.into(),
        points,
        max_rel_error: worst,
    })
}

/// Central-difference checks of every layer and of the full forward pass
/// (classifier logits through ASL plus consistency), each at `points`
/// random parameter/input draws.
pub fn layer_suite(seed: u64, points: usize) -> Result<Vec<LayerGradCheck>> {
    use crate::aoa::{aoa_attention, aoa_multi, AoaPathVars, SemanticVars};
    use crate::coa::{coa_attention, relation_weights, CoaVars};
    use crate::fusion::{adaptive_residual, focal_forward, fuse, gate, ForwardOptions};
    use crate::layout::{AoaEdges, CoaEdges, ModelGraph};
    use crate::objective::{asl_loss, consistency_loss, total_loss, AslConfig};
    use crate::params::Bound;
    use crate::synthgen::{generate, SynthConfig, PRIMARY_METAPATH};
    use crate::trainer::{init_params, FocalConfig};

    let mut out = Vec::new();
    let heads = 2;

    let coa_edges = CoaEdges::new(&[(1, 0, 0), (2, 0, 1), (3, 0, 0), (0, 1, 0), (2, 1, 1), (2, 2, 2), (1, 3, 1)], 4);
    let f = |t: &mut Tape, x: &[VarId]| {
        let mu = relation_weights(t, &x[4..7], heads)?;
        let vars = CoaVars { wq: x[1], wk: x[2], wv: x[3], mu };
        let o = coa_attention(t, &vars, x[0], &coa_edges, heads)?;
        squared_sum(t, o.h)
    };
    out.push(check_points("coa", points, seed, &f, |r| {
        let mut v = vec![random(r, 4, 3, 1.5), random(r, 3, 4, 0.7), random(r, 3, 4, 0.7), random(r, 3, 4, 0.7)];
        v.extend((0..3).map(|_| random(r, 1, heads, 1.0)));
        v
    })?);

    let e1 = AoaEdges::new(&[(1, 0), (2, 0), (3, 0), (1, 1), (0, 2), (3, 3)], 4);
    let e2 = AoaEdges::new(&[(3, 0), (0, 1), (2, 1), (2, 2), (1, 3)], 4);
    let path = |r: &mut Rng| vec![random(r, 3, 4, 0.7), random(r, 1, 4, 0.7), random(r, 1, 4, 0.7)];
    let f = |t: &mut Tape, x: &[VarId]| {
        let p = AoaPathVars { w: x[1], att_self: x[2], att_nbr: x[3] };
        let o = aoa_attention(t, &p, x[0], &e1, heads, 0.2)?;
        squared_sum(t, o.h)
    };
    out.push(check_points("aoa_single", points, seed, &f, |r| {
        let mut v = vec![random(r, 4, 3, 1.5)];
        v.extend(path(r));
        v
    })?);

    let f = |t: &mut Tape, x: &[VarId]| {
        let p1 = AoaPathVars { w: x[1], att_self: x[2], att_nbr: x[3] };
        let p2 = AoaPathVars { w: x[4], att_self: x[5], att_nbr: x[6] };
        let sem = SemanticVars { ws: x[7], bs: x[8], q: x[9] };
        let o = aoa_multi(t, &[(p1, &e1), (p2, &e2)], Some(&sem), x[0], heads, 0.2)?;
        squared_sum(t, o.h)
    };
    out.push(check_points("aoa_multi", points, seed, &f, |r| {
        let mut v = vec![random(r, 4, 3, 1.5)];
        v.extend(path(r));
        v.extend(path(r));
        v.extend([random(r, 4, 4, 0.7), random(r, 1, 4, 0.5), random(r, 4, 1, 0.7)]);
        v
    })?);

    let f = |t: &mut Tape, x: &[VarId]| {
        let g1 = gate(t, x[0], x[1], x[2], x[3])?;
        let g2 = gate(t, x[0], x[1], x[4], x[5])?;
        let h = fuse(t, g1, g2, x[0], x[1])?;
        squared_sum(t, h)
    };
    out.push(check_points("fusion", points, seed, &f, |r| {
        vec![random(r, 5, 3, 1.0), random(r, 5, 3, 1.0), random(r, 6, 3, 0.6), random(r, 1, 3, 0.5), random(r, 6, 3, 0.6), random(r, 1, 3, 0.5)]
    })?);

    let f = |t: &mut Tape, x: &[VarId]| {
        let (h, _) = adaptive_residual(t, x[0], x[1], x[2], x[3])?;
        squared_sum(t, h)
    };
    out.push(check_points("residual", points, seed, &f, |r| {
        vec![random(r, 5, 3, 1.0), random(r, 5, 3, 1.0), random(r, 6, 3, 0.6), random(r, 1, 3, 0.5)]
    })?);

    let labels = Arc::new(Tensor::from_rows(&[vec![1.0, 0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0, 1.0], vec![1.0, 1.0, 0.0, 0.0]])?);
    let asl = AslConfig { gamma_pos: 1.0, gamma_neg: 4.0, margin: 0.05 };
    let f = |t: &mut Tape, x: &[VarId]| asl_loss(t, x[0], labels.clone(), asl);
    out.push(check_points("asl", points, seed, &f, |r| vec![random(r, 3, 4, 1.5)])?);

    let f = |t: &mut Tape, x: &[VarId]| consistency_loss(t, x[0], x[1]);
    out.push(check_points("consistency", points, seed, &f, |r| vec![random(r, 5, 3, 1.0), random(r, 5, 3, 1.0)])?);

    let g = generate(&SynthConfig {
        seed,
        num_targets: 6,
        num_labels: 2,
        primary_degree: 2.0,
        secondary_degree: 2.0,
        rare_rate: 0.3,
        feature_dim: 3,
        noise_std: 0.3,
        anchors_per_label: 1,
        decisive_per_label: 1,
        num_distractors: 2,
        ..Default::default()
    })?;
    let cfg = FocalConfig {
        hidden_dim: 4,
        out_dim: 4,
        coa_heads: 2,
        aoa_heads: 2,
        lambda: 0.3,
        metapaths: vec![
            vec![PRIMARY_METAPATH.into()],
            vec![PRIMARY_METAPATH.into(), "anchor-target".into(), PRIMARY_METAPATH.into()],
        ],
        ..Default::default()
    };
    let mg = ModelGraph::new(&g, &cfg.metapaths)?;
    let base = init_params(&cfg, &mg, seed)?;
    let rows: Vec<usize> = (0..g.num_targets()).collect();
    let y = Arc::new(g.labels().clone());
    let f = |t: &mut Tape, x: &[VarId]| {
        let bound = Bound::from_ids(&base, x.to_vec())?;
        let o = focal_forward(t, &bound, &mg, &cfg, &rows, ForwardOptions::default())?;
        let a = asl_loss(t, o.logits, y.clone(), cfg.asl())?;
        let c = match (o.h_coa, o.h_aoa) {
            (Some(hc), Some(ha)) => Some(consistency_loss(t, hc, ha)?),
            _ => None,
        };
        total_loss(t, a, c, cfg.lambda)
    };
    out.push(check_points("full_forward", points, seed, &f, |r| {
        base.tensors()
            .iter()
            .map(|p| p.add(&random(r, p.rows(), p.cols(), 0.3)).expect("same shape"))
            .collect::<Vec<Tensor>>()
    })?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact_to_roundoff() {
        let f = |t: &mut Tape, x: &[VarId]| {
            let sq = t.mul(x[0], x[0])?;
            let s = t.scale(sq, 0.5)?;
            t.sum_all(s)
        };
        let x = Tensor::from_rows(&[vec![0.3, -1.7, 2.2]]).unwrap();
        assert!(grad_check(&f, &[x], DEFAULT_STEP).unwrap() <= 1e-9);
    }

    #[test]
    fn layer_suite_passes_at_two_points() {
        let r = layer_suite(4, 2).unwrap();
        assert_eq!(r.len(), SUITE_LAYERS.len());
        for (c, name) in r.iter().zip(SUITE_LAYERS) {
            assert_eq!(c.layer, name);
            assert!(c.passes(1e-5), "{c:?}");
        }
    }

    #[test]
    fn constant_function_has_zero_error() {
        let f = |t: &mut Tape, _x: &[VarId]| Ok(t.leaf(Tensor::scalar(4.0)));
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(grad_check(&f, &[x], DEFAULT_STEP).unwrap(), 0.0);
    }
}
