//! Coverage-oriented attention.
//!
//! Multi-head dot-product attention over every typed in-neighbor of a node.
//! Head `i` scores neighbor `s` of `t` through relation `r` as
//! `(q_i(t) . k_i(s) / sqrt(d_head)) * mu[r, i]` with
//! `mu = softplus(rho) + MU_EPS`, normalizes over the neighborhood and sums
//! the value vectors. Head outputs are concatenated.

use crate::error::{Error, Result};
use crate::layout::CoaEdges;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

pub const MU_EPS: f64 = 1e-4;

/// Tape handles of one COA layer.
#[derive(Copy, Clone, Debug)]
pub struct CoaVars {
    pub wq: VarId,
    pub wk: VarId,
    pub wv: VarId,
    /// `(num_relations + 1) x heads`; the last row belongs to self-fallback edges.
    pub mu: VarId,
}

#[derive(Copy, Clone, Debug)]
pub struct CoaOutput {
    pub h: VarId,
    /// `num_edges x heads` attention weights, aligned with the edge list.
    pub weights: VarId,
}

/// Builds the relation-head weights from per-relation `1 x heads` pre-activations.
pub fn relation_weights(tape: &mut Tape, rho: &[VarId], heads: usize) -> Result<VarId> {
    let self_row = tape.constant(Tensor::filled(1, heads, 1.0));
    if rho.is_empty() {
        return Ok(self_row);
    }
    let stacked = tape.concat_rows(rho)?;
    let sp = tape.softplus(stacked)?;
    let mu = tape.add_const(sp, MU_EPS)?;
    tape.concat_rows(&[mu, self_row])
}

pub fn coa_attention(
    tape: &mut Tape,
    vars: &CoaVars,
    h_prev: VarId,
    edges: &CoaEdges,
    heads: usize,
) -> Result<CoaOutput> {
    let [n, _] = tape.shape(h_prev);
    if n != edges.num_nodes {
        return Err(Error::shape("coa_attention", [n, 0], [edges.num_nodes, 0]));
    }
    let d = tape.shape(vars.wq)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!("width {d} not divisible by {heads} heads")));
    }
    let q = tape.matmul(h_prev, vars.wq)?;
    let k = tape.matmul(h_prev, vars.wk)?;
    let v = tape.matmul(h_prev, vars.wv)?;
    let dots = tape.edge_head_dot(q, k, edges.dst.clone(), edges.src.clone(), heads)?;
    let scaled = tape.scale(dots, 1.0 / ((d / heads) as f64).sqrt())?;
    let mu_e = tape.gather_rows(vars.mu, edges.rel.clone())?;
    let logits = tape.mul(scaled, mu_e)?;
    let weights = tape.segment_softmax(logits, edges.dst.clone(), n)?;
    let h = tape.edge_aggregate(weights, v, edges.src.clone(), edges.dst.clone(), n, heads)?;
    Ok(CoaOutput { h, weights })
}

/// Per-head primary attention mass `A*` over one node's edges and its head average.
/// `weights` holds the node's edge rows (`k x heads`); `primary[e]` flags primary edges.
pub fn primary_attention_mass(weights: &Tensor, primary: &[bool]) -> (Vec<f64>, f64) {
    let heads = weights.cols();
    let mut per_head = vec![0.0; heads];
    for (e, &p) in primary.iter().enumerate() {
        if p {
            for (h, m) in per_head.iter_mut().enumerate() {
                *m += weights.get(e, h);
            }
        }
    }
    let avg = if heads == 0 { 0.0 } else { per_head.iter().sum::<f64>() / heads as f64 };
    (per_head, avg)
}

/// Rows of `weights` belonging to edges into `node`, with their edge indices.
pub fn node_weights(weights: &Tensor, edges: &CoaEdges, node: usize) -> (Vec<usize>, Tensor) {
    let idx: Vec<usize> = edges
        .dst
        .iter()
        .enumerate()
        .filter(|(_, &d)| d == node)
        .map(|(e, _)| e)
        .collect();
    let rows = weights.select_rows(&idx);
    (idx, rows)
}

/// Convenience wrapper holding the raw tensors of a COA layer.
#[derive(Clone, Debug)]
pub struct CoaParams {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub rho: Vec<Tensor>,
}

impl CoaParams {
    /// Pushes the tensors as leaves and returns their handles.
    pub fn bind(&self, tape: &mut Tape, heads: usize) -> Result<CoaVars> {
        let wq = tape.leaf(self.wq.clone());
        let wk = tape.leaf(self.wk.clone());
        let wv = tape.leaf(self.wv.clone());
        let rho: Vec<VarId> = self.rho.iter().map(|r| tape.leaf(r.clone())).collect();
        let mu = relation_weights(tape, &rho, heads)?;
        Ok(CoaVars { wq, wk, wv, mu })
    }
}

/// Evaluates a COA layer without keeping the tape.
pub fn coa_eval(p: &CoaParams, h_prev: &Tensor, edges: &CoaEdges, heads: usize) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let vars = p.bind(&mut tape, heads)?;
    let h = tape.leaf(h_prev.clone());
    let out = coa_attention(&mut tape, &vars, h, edges, heads)?;
    Ok((tape.value(out.h).clone(), tape.value(out.weights).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_STEP};
    use crate::params::FocalParams;

    fn params(d_in: usize, d: usize, rels: usize, heads: usize, seed: u64) -> CoaParams {
        CoaParams {
            wq: FocalParams::xavier(seed, "q", d_in, d),
            wk: FocalParams::xavier(seed, "k", d_in, d),
            wv: FocalParams::xavier(seed, "v", d_in, d),
            rho: (0..rels).map(|r| FocalParams::xavier(seed, &format!("r{r}"), 1, heads)).collect(),
        }
    }

    #[test]
    fn single_neighbor_gets_weight_one() {
        let p = params(3, 4, 1, 2, 1);
        let h = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 0.0]]).unwrap();
        let edges = CoaEdges::new(&[(1, 0, 0), (0, 1, 0)], 2);
        let (out, w) = coa_eval(&p, &h, &edges, 2).unwrap();
        assert!(w.data().iter().all(|&x| x == 1.0));
        let v1 = Tensor::row_vector(h.row(1)).matmul(&p.wv).unwrap();
        assert!(out.row(0).iter().zip(v1.data()).all(|(a, b)| (a - b).abs() < 1e-15));
    }

    #[test]
    fn zero_query_gives_uniform_weights() {
        let mut p = params(2, 4, 2, 2, 2);
        p.wq = Tensor::zeros(2, 4);
        let h = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0], vec![2.0, -1.0]]).unwrap();
        let edges = CoaEdges::new(&[(1, 0, 0), (2, 0, 1), (3, 0, 1), (0, 1, 0), (0, 2, 0), (0, 3, 0)], 4);
        let (_, w) = coa_eval(&p, &h, &edges, 2).unwrap();
        for e in 0..3 {
            for hd in 0..2 {
                assert!((w.get(e, hd) - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn hand_toy_two_thirds() {
        // 1 head, d = 1: q(t) = 1, k(s1) = ln 2, k(s2) = 0, mu = 1 (rho chosen so softplus + eps = 1).
        let rho = ((1.0 - MU_EPS).exp() - 1.0).ln();
        let p = CoaParams {
            wq: Tensor::scalar(1.0),
            wk: Tensor::scalar(1.0),
            wv: Tensor::scalar(1.0),
            rho: vec![Tensor::scalar(rho)],
        };
        let h = Tensor::column(&[1.0, 2f64.ln(), 0.0]);
        let edges = CoaEdges::new(&[(1, 0, 0), (2, 0, 0), (0, 1, 1), (0, 2, 1)], 3);
        let (out, w) = coa_eval(&p, &h, &edges, 1).unwrap();
        assert!((w.get(0, 0) - 2.0 / 3.0).abs() < 1e-12);
        assert!((w.get(1, 0) - 1.0 / 3.0).abs() < 1e-12);
        assert!((out.get(0, 0) - 2.0 / 3.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn primary_mass_cases() {
        let w = Tensor::filled(10, 2, 0.1);
        let mut flags = vec![false; 10];
        assert_eq!(primary_attention_mass(&w, &flags).1, 0.0);
        flags[3] = true;
        assert!((primary_attention_mass(&w, &flags).1 - 0.1).abs() < 1e-15);
        let all = vec![true; 10];
        assert!((primary_attention_mass(&w, &all).1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn raising_mu_raises_relation_mass_with_positive_logits() {
        // Fixed q, k with positive dot-products; relation 0 on edge 0, relation 1 on edge 1.
        let base = CoaParams {
            wq: Tensor::scalar(1.0),
            wk: Tensor::scalar(1.0),
            wv: Tensor::scalar(1.0),
            rho: vec![Tensor::scalar(0.0), Tensor::scalar(0.0)],
        };
        let h = Tensor::column(&[1.0, 0.5, 0.8]);
        let edges = CoaEdges::new(&[(1, 0, 0), (2, 0, 1), (0, 1, 2), (0, 2, 2)], 3);
        let mut prev = coa_eval(&base, &h, &edges, 1).unwrap().1.get(0, 0);
        for step in 1..5 {
            let mut p = base.clone();
            p.rho[0] = Tensor::scalar(step as f64);
            let w = coa_eval(&p, &h, &edges, 1).unwrap().1.get(0, 0);
            assert!(w > prev);
            prev = w;
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let heads = 2;
        let edges = CoaEdges::new(&[(1, 0, 0), (2, 0, 1), (3, 0, 0), (0, 1, 0), (2, 1, 1), (2, 2, 2), (1, 3, 1)], 4);
        let f = |t: &mut Tape, x: &[VarId]| {
            let mu = relation_weights(t, &x[4..6], heads)?;
            let vars = CoaVars { wq: x[1], wk: x[2], wv: x[3], mu };
            let out = coa_attention(t, &vars, x[0], &edges, heads)?;
            let sq = t.mul(out.h, out.h)?;
            t.sum_all(sq)
        };
        for seed in 0..3 {
            let p = params(3, 4, 2, heads, seed);
            let h = FocalParams::xavier(seed, "h", 4, 3).scale(3.0);
            let inputs = vec![h, p.wq, p.wk, p.wv, p.rho[0].clone(), p.rho[1].clone()];
            assert!(grad_check(&f, &inputs, DEFAULT_STEP).unwrap() <= 1e-5);
        }
    }
}
