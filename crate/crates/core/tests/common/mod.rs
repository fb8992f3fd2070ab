//! Independent reference implementations used by the integration tests.

#![allow(dead_code)]

use std::collections::BTreeSet;

use focal_core::objective::MetricsReport;
use focal_core::{HetGraph, MetaPath, Tensor};

/// Confusion-matrix metrics computed from integer counts.
pub fn metrics_oracle(y: &[Vec<bool>], p: &[Vec<bool>]) -> MetricsReport {
    let n = y.len();
    let c = y.first().map_or(0, Vec::len);
    // counts[k] = [tp, fp, fn, tn]
    let mut counts = vec![[0u64; 4]; c];
    let mut sample = 0.0;
    let mut exact = 0u64;
    let mut wrong = 0u64;
    for (yr, pr) in y.iter().zip(p) {
        let mut row = [0u64; 4];
        for k in 0..c {
            let cell = match (yr[k], pr[k]) {
                (true, true) => 0,
                (false, true) => 1,
                (true, false) => 2,
                (false, false) => 3,
            };
            counts[k][cell] += 1;
            row[cell] += 1;
        }
        wrong += row[1] + row[2];
        if row[1] + row[2] == 0 {
            exact += 1;
        }
        let den = 2 * row[0] + row[1] + row[2];
        sample += if den == 0 { 1.0 } else { (2 * row[0]) as f64 / den as f64 };
    }
    let div = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let total = |j: usize| counts.iter().map(|x| x[j]).sum::<u64>();
    let (tp, fp, fnn) = (total(0), total(1), total(2));
    let mut mp = 0.0;
    let mut mr = 0.0;
    let mut mf = 0.0;
    for x in &counts {
        mp += div(x[0], x[0] + x[1]);
        mr += div(x[0], x[0] + x[2]);
        mf += div(2 * x[0], 2 * x[0] + x[1] + x[2]);
    }
    let cf = c.max(1) as f64;
    let nf = n.max(1) as f64;
    MetricsReport {
        micro_f1: div(2 * tp, 2 * tp + fp + fnn),
        macro_f1: mf / cf,
        sample_f1: if n == 0 { 0.0 } else { sample / nf },
        hamming_loss: div(wrong, (n * c) as u64),
        subset_accuracy: if n == 0 { 0.0 } else { exact as f64 / nf },
        micro_precision: div(tp, tp + fp),
        macro_precision: mp / cf,
        micro_recall: div(tp, tp + fnn),
        macro_recall: mr / cf,
    }
}

pub fn to_tensor(rows: &[Vec<bool>], cols: usize) -> Tensor {
    let data = rows.iter().flat_map(|r| r.iter().map(|&b| f64::from(u8::from(b)))).collect();
    Tensor::from_vec(rows.len(), cols, data).unwrap()
}

/// Endpoints of every walk from target `t` that follows `path`, found by
/// depth-first enumeration of the walks themselves over raw edge lists.
pub fn walk_endpoints(g: &HetGraph, path: &MetaPath, t: usize) -> BTreeSet<usize> {
    fn walk(g: &HetGraph, rels: &[focal_core::RelationTypeId], at: usize, out: &mut BTreeSet<usize>) {
        match rels.split_first() {
            None => {
                out.insert(at);
            }
            Some((&r, rest)) => {
                for &(s, d) in &g.relation(r).edges {
                    if s == at {
                        walk(g, rest, d, out);
                    }
                }
            }
        }
    }
    let mut out = BTreeSet::new();
    walk(g, path.relations(), t, &mut out);
    out
}
