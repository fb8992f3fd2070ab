//! Anchoring-oriented attention.
//!
//! Node-level: for meta-path `P` and head `i`, `z = h W_P`, and target `t`
//! scores reachable node `s` with `LeakyReLU(a_self_i . z_i(t) + a_nbr_i . z_i(s))`,
//! normalized over the meta-path neighborhood. Heads split the output width.
//!
//! Semantic level (more than one meta-path): `u_P = q . tanh(W_s z_P + b_s)`,
//! `beta = softmax_P(u_P)`, output `sum_P beta_P z_P`. With a single meta-path
//! the node-level output is returned untouched.

use crate::error::{Error, Result};
use crate::layout::AoaEdges;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

#[derive(Copy, Clone, Debug)]
pub struct AoaPathVars {
    pub w: VarId,
    /// `1 x d`, head blocks of the target half of the attention vector.
    pub att_self: VarId,
    /// `1 x d`, head blocks of the neighbor half.
    pub att_nbr: VarId,
}

#[derive(Copy, Clone, Debug)]
pub struct SemanticVars {
    pub ws: VarId,
    pub bs: VarId,
    pub q: VarId,
}

#[derive(Copy, Clone, Debug)]
pub struct AoaOutput {
    pub h: VarId,
    /// `num_pairs x heads` node-level weights.
    pub weights: VarId,
}

#[derive(Clone, Debug)]
pub struct AoaMultiOutput {
    pub h: VarId,
    pub per_path: Vec<AoaOutput>,
    /// `num_nodes x |paths|` semantic weights; `None` with a single meta-path.
    pub beta: Option<VarId>,
}

pub fn aoa_attention(
    tape: &mut Tape,
    vars: &AoaPathVars,
    h_prev: VarId,
    edges: &AoaEdges,
    heads: usize,
    slope: f64,
) -> Result<AoaOutput> {
    let [n, _] = tape.shape(h_prev);
    if n != edges.num_nodes {
        return Err(Error::shape("aoa_attention", [n, 0], [edges.num_nodes, 0]));
    }
    let z = tape.matmul(h_prev, vars.w)?;
    let self_score = tape.head_dot(z, vars.att_self, heads)?;
    let nbr_score = tape.head_dot(z, vars.att_nbr, heads)?;
    let st = tape.gather_rows(self_score, edges.dst.clone())?;
    let ss = tape.gather_rows(nbr_score, edges.src.clone())?;
    let raw = tape.add(st, ss)?;
    let e = tape.leaky_relu(raw, slope)?;
    let weights = tape.segment_softmax(e, edges.dst.clone(), n)?;
    let h = tape.edge_aggregate(weights, z, edges.src.clone(), edges.dst.clone(), n, heads)?;
    Ok(AoaOutput { h, weights })
}

/// Semantic scores `u_P` for each meta-path output, as an `n x |P|` matrix.
pub fn semantic_scores(tape: &mut Tape, sem: &SemanticVars, z: &[VarId]) -> Result<VarId> {
    let mut cols = Vec::with_capacity(z.len());
    for &zp in z {
        let proj = tape.matmul(zp, sem.ws)?;
        let shifted = tape.add_row(proj, sem.bs)?;
        let act = tape.tanh(shifted)?;
        cols.push(tape.matmul(act, sem.q)?);
    }
    tape.concat_cols(&cols)
}

/// Combines per-path outputs with softmax weights over the columns of `scores`.
pub fn semantic_combine(tape: &mut Tape, z: &[VarId], scores: VarId) -> Result<(VarId, VarId)> {
    let beta = tape.row_softmax(scores)?;
    let mut acc = None;
    for (p, &zp) in z.iter().enumerate() {
        let b = tape.slice_cols(beta, p, 1)?;
        let term = tape.head_scale(zp, b, 1)?;
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    Ok((acc.ok_or(Error::EmptyMetaPathSet)?, beta))
}

pub fn aoa_multi(
    tape: &mut Tape,
    paths: &[(AoaPathVars, &AoaEdges)],
    sem: Option<&SemanticVars>,
    h_prev: VarId,
    heads: usize,
    slope: f64,
) -> Result<AoaMultiOutput> {
    if paths.is_empty() {
        return Err(Error::EmptyMetaPathSet);
    }
    let per_path = paths
        .iter()
        .map(|(v, e)| aoa_attention(tape, v, h_prev, e, heads, slope))
        .collect::<Result<Vec<_>>>()?;
    if per_path.len() == 1 {
        return Ok(AoaMultiOutput {
            h: per_path[0].h,
            per_path,
            beta: None,
        });
    }
    let sem = sem.ok_or_else(|| Error::Config("semantic attention parameters missing".into()))?;
    let z: Vec<VarId> = per_path.iter().map(|o| o.h).collect();
    let scores = semantic_scores(tape, sem, &z)?;
    let (h, beta) = semantic_combine(tape, &z, scores)?;
    Ok(AoaMultiOutput {
        h,
        per_path,
        beta: Some(beta),
    })
}

/// Primary semantic mass `B* = sum of beta over flagged meta-paths`.
pub fn semantic_mass(beta: &[f64], primary: &[bool]) -> f64 {
    beta.iter().zip(primary).filter(|(_, &p)| p).map(|(b, _)| b).sum()
}

/// Softmax of semantic scores given directly (`u_P` values).
pub fn beta_from_scores(u: &[f64]) -> Result<Vec<f64>> {
    crate::tensor::softmax(u)
}

/// Raw tensors of one meta-path's node-level attention.
#[derive(Clone, Debug)]
pub struct AoaPathParams {
    pub w: Tensor,
    pub att_self: Tensor,
    pub att_nbr: Tensor,
}

impl AoaPathParams {
    pub fn bind(&self, tape: &mut Tape) -> AoaPathVars {
        AoaPathVars {
            w: tape.leaf(self.w.clone()),
            att_self: tape.leaf(self.att_self.clone()),
            att_nbr: tape.leaf(self.att_nbr.clone()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use crate::params::FocalParams;
    use crate::tensor::leaky_relu;

    fn path(seed: u64, d_in: usize, d: usize) -> AoaPathParams {
        AoaPathParams {
            w: FocalParams::xavier(seed, "w", d_in, d),
            att_self: FocalParams::xavier(seed, "as", 1, d),
            att_nbr: FocalParams::xavier(seed, "an", 1, d),
        }
    }

    fn eval(p: &AoaPathParams, h: &Tensor, e: &AoaEdges, heads: usize) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let h = tape.leaf(h.clone());
        let o = aoa_attention(&mut tape, &v, h, e, heads, 0.01).unwrap();
        (tape.value(o.h).clone(), tape.value(o.weights).clone())
    }

    #[test]
    fn single_reachable_node_passes_its_projection() {
        let p = path(1, 3, 4);
        let h = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![0.5, -1.0, 2.0]]).unwrap();
        let e = AoaEdges::new(&[(1, 0), (1, 1)], 2);
        let (out, w) = eval(&p, &h, &e, 2);
        assert!(w.data().iter().all(|&x| x == 1.0));
        let z1 = Tensor::row_vector(h.row(1)).matmul(&p.w).unwrap();
        assert_eq!(out.row(0), z1.data());
    }

    #[test]
    fn zero_attention_vector_is_uniform() {
        let mut p = path(2, 2, 2);
        p.att_self = Tensor::zeros(1, 2);
        p.att_nbr = Tensor::zeros(1, 2);
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![3.0, 1.0]]).unwrap();
        let e = AoaEdges::new(&[(1, 0), (2, 0), (1, 1), (2, 2)], 3);
        let (_, w) = eval(&p, &h, &e, 1);
        assert_eq!(w.get(0, 0), 0.5);
        assert_eq!(w.get(1, 0), 0.5);
    }

    #[test]
    fn hand_computed_two_neighbors() {
        // width 1, W = 2, a_self = 0.5, a_nbr = 1; h(t) = 1, h(s1) = 1, h(s2) = -1.
        let p = AoaPathParams {
            w: Tensor::scalar(2.0),
            att_self: Tensor::scalar(0.5),
            att_nbr: Tensor::scalar(1.0),
        };
        let h = Tensor::column(&[1.0, 1.0, -1.0]);
        let e = AoaEdges::new(&[(1, 0), (2, 0), (1, 1), (2, 2)], 3);
        let (out, w) = eval(&p, &h, &e, 1);
        // Reference computed independently.
        let e1 = leaky_relu(0.5 * 2.0 + 1.0 * 2.0, 0.01);
        let e2 = leaky_relu(0.5 * 2.0 + 1.0 * -2.0, 0.01);
        let a1 = e1.exp() / (e1.exp() + e2.exp());
        let a2 = 1.0 - a1;
        assert!((w.get(0, 0) - a1).abs() < 1e-15);
        assert!((out.get(0, 0) - (a1 * 2.0 + a2 * -2.0)).abs() < 1e-14);
        assert!((e1 - 3.0).abs() < 1e-15 && (e2 + 0.01).abs() < 1e-15);
    }

    #[test]
    fn single_path_multi_is_bit_identical() {
        let p = path(3, 3, 4);
        let h = FocalParams::xavier(3, "h", 4, 3);
        let e = AoaEdges::new(&[(1, 0), (2, 0), (3, 0), (0, 1), (2, 2), (3, 3)], 4);
        let (single, _) = eval(&p, &h, &e, 2);
        let mut tape = Tape::new();
        let v = p.bind(&mut tape);
        let hv = tape.leaf(h.clone());
        let out = aoa_multi(&mut tape, &[(v, &e)], None, hv, 2, 0.01).unwrap();
        assert!(out.beta.is_none());
        assert_eq!(tape.value(out.h), &single);
    }

    #[test]
    fn semantic_weights() {
        let beta = beta_from_scores(&[3f64.ln(), 0.0]).unwrap();
        assert!((beta[0] - 0.75).abs() < 1e-15 && (beta[1] - 0.25).abs() < 1e-15);
        assert!((semantic_mass(&[0.1; 10], &[true, true, false, false, false, false, false, false, false, false]) - 0.2).abs() < 1e-15);
        assert_eq!(semantic_mass(&[0.5, 0.5], &[false, false]), 0.0);
        assert!((semantic_mass(&[0.3, 0.7], &[true, true]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_query_vector_gives_uniform_beta() {
        let h = FocalParams::xavier(4, "h", 3, 2);
        let e = AoaEdges::new(&[(1, 0), (2, 0), (1, 1), (2, 2)], 3);
        let mut tape = Tape::new();
        let v1 = path(1, 2, 2).bind(&mut tape);
        let v2 = path(2, 2, 2).bind(&mut tape);
        let v3 = path(5, 2, 2).bind(&mut tape);
        let sem = SemanticVars {
            ws: tape.leaf(FocalParams::xavier(1, "ws", 2, 2)),
            bs: tape.leaf(Tensor::zeros(1, 2)),
            q: tape.leaf(Tensor::zeros(2, 1)),
        };
        let hv = tape.leaf(h);
        let out = aoa_multi(&mut tape, &[(v1, &e), (v2, &e), (v3, &e)], Some(&sem), hv, 1, 0.01).unwrap();
        let beta = tape.value(out.beta.unwrap());
        assert!(beta.data().iter().all(|&b| (b - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn empty_path_set_is_an_error() {
        let mut tape = Tape::new();
        let h = tape.leaf(Tensor::zeros(1, 1));
        assert!(matches!(aoa_multi(&mut tape, &[], None, h, 1, 0.01), Err(Error::EmptyMetaPathSet)));
    }

    #[test]
    fn permuting_neighbor_order_is_harmless() {
        let p = path(6, 3, 4);
        let h = FocalParams::xavier(6, "h", 5, 3).scale(2.0);
        let a = AoaEdges::new(&[(1, 0), (2, 0), (3, 0), (4, 0), (1, 1), (2, 2), (3, 3), (4, 4)], 5);
        let b = AoaEdges::new(&[(4, 0), (2, 0), (1, 0), (3, 0), (1, 1), (2, 2), (3, 3), (4, 4)], 5);
        assert!(eval(&p, &h, &a, 2).0.max_abs_diff(&eval(&p, &h, &b, 2).0) <= 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let e1 = AoaEdges::new(&[(1, 0), (2, 0), (3, 0), (1, 1), (0, 2), (3, 3)], 4);
        let e2 = AoaEdges::new(&[(3, 0), (0, 1), (2, 1), (2, 2), (1, 3)], 4);
        let f = |t: &mut Tape, x: &[VarId]| {
            let p1 = AoaPathVars { w: x[1], att_self: x[2], att_nbr: x[3] };
            let p2 = AoaPathVars { w: x[4], att_self: x[5], att_nbr: x[6] };
            let sem = SemanticVars { ws: x[7], bs: x[8], q: x[9] };
            let out = aoa_multi(t, &[(p1, &e1), (p2, &e2)], Some(&sem), x[0], 2, 0.01)?;
            let sq = t.mul(out.h, out.h)?;
            t.sum_all(sq)
        };
        for seed in 0..3 {
            let a = path(seed, 3, 4);
            let b = path(seed + 100, 3, 4);
            let inputs = vec![
                FocalParams::xavier(seed, "h", 4, 3).scale(2.0),
                a.w, a.att_self, a.att_nbr, b.w, b.att_self, b.att_nbr,
                FocalParams::xavier(seed, "ws", 4, 4),
                FocalParams::xavier(seed, "bs", 1, 4),
                FocalParams::xavier(seed, "q", 4, 1),
            ];
            assert!(grad_check(&f, &inputs, DEFAULT_STEP).unwrap() <= 1e-5);
        }
    }
}
