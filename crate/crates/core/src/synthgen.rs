//! Planted-structure synthetic graphs.
//!
//! Three node types: `target` (labelled), `anchor` (primary) and `context`
//! (secondary). Two semantic relations, each stored in both directions:
//! `target-anchor`/`anchor-target` (primary) and
//! `target-context`/`context-target` (secondary).
//!
//! Every label `k` has a prototype vector. Anchors each carry one label's
//! prototype. Contexts are either decisive (carry a label's prototype and a
//! marker column set to 1) or distractors (carry a random label's prototype
//! with marker 0). A target is positive for `k` iff it links to an anchor of
//! label `k` or to a decisive context of label `k`. All features get
//! additive Gaussian noise of std `noise_std`; target features are pure
//! noise.
//!
//! Randomness: one ChaCha8 stream per concern (`synth/prototypes`,
//! `synth/structure`, `synth/noise`, `synth/split`), see [`crate::rng`].

use std::collections::BTreeSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hetgraph::{GraphParts, HetGraph, NodeTypeId, Relation, Splits};
use crate::rng::named_stream;
use crate::tensor::Tensor;

pub const TARGET: usize = 0;
pub const ANCHOR: usize = 1;
pub const CONTEXT: usize = 2;

pub const PRIMARY_METAPATH: &str = "target-anchor";
pub const SECONDARY_METAPATH: &str = "target-context";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub seed: u64,
    pub num_targets: usize,
    pub num_labels: usize,
    /// Mean number of primary (anchor) neighbors per target.
    pub primary_degree: f64,
    /// Mean number of secondary (context) neighbors per target.
    pub secondary_degree: f64,
    /// Probability that a secondary link goes to a decisive context.
    pub rare_rate: f64,
    pub label_cardinality: f64,
    pub feature_dim: usize,
    pub noise_std: f64,
    pub anchors_per_label: usize,
    pub decisive_per_label: usize,
    pub num_distractors: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            num_targets: 500,
            num_labels: 5,
            primary_degree: 3.0,
            secondary_degree: 30.0,
            rare_rate: 0.02,
            label_cardinality: 2.0,
            feature_dim: 16,
            noise_std: 0.0,
            anchors_per_label: 12,
            decisive_per_label: 6,
            num_distractors: 120,
        }
    }
}

impl SynthConfig {
    pub fn from_toml(text: &str, origin: &Path) -> Result<Self> {
        let cfg: SynthConfig = toml::from_str(text).map_err(|e| Error::Parse {
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

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_labels == 0 {
            return bad("num_labels must be at least 1");
        }
        if !(self.primary_degree >= 0.0 && self.primary_degree.is_finite()) {
            return bad("primary_degree must be finite and >= 0");
        }
        if !(self.secondary_degree >= 0.0 && self.secondary_degree.is_finite()) {
            return bad("secondary_degree must be finite and >= 0");
        }
        if !(0.0..=1.0).contains(&self.rare_rate) {
            return bad("rare_rate must lie in [0, 1]");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and >= 0");
        }
        if !(self.label_cardinality >= 1.0 && self.label_cardinality <= self.num_labels as f64) {
            return bad("label_cardinality must lie in [1, num_labels]");
        }
        if self.feature_dim == 0 || self.anchors_per_label == 0 {
            return bad("feature_dim and anchors_per_label must be positive");
        }
        if self.rare_rate > 0.0 && self.decisive_per_label == 0 {
            return bad("rare_rate > 0 needs decisive_per_label > 0");
        }
        if self.rare_rate < 1.0 && self.secondary_degree > 0.0 && self.num_distractors == 0 {
            return bad("secondary links need num_distractors > 0");
        }
        Ok(())
    }
}

fn poisson(rng: &mut impl Rng, mean: f64) -> usize {
    if mean <= 0.0 {
        return 0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng) as usize
}

/// Draws a label prototype per class: i.i.d. standard normal entries.
pub fn prototypes(cfg: &SynthConfig) -> Tensor {
    let mut rng = named_stream(cfg.seed, "synth/prototypes");
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let data = (0..cfg.num_labels * cfg.feature_dim).map(|_| n.sample(&mut rng)).collect();
    Tensor::from_vec(cfg.num_labels, cfg.feature_dim, data).expect("sized")
}

pub fn generate(cfg: &SynthConfig) -> Result<HetGraph> {
    cfg.validate()?;
    let c = cfg.num_labels;
    let d = cfg.feature_dim;
    let protos = prototypes(cfg);

    // Pools: anchor a carries label a / anchors_per_label; decisive context j
    // carries label j / decisive_per_label; distractors follow.
    let n_anchor = c * cfg.anchors_per_label;
    let n_decisive = c * cfg.decisive_per_label;
    let n_context = n_decisive + cfg.num_distractors;

    let mut rng = named_stream(cfg.seed, "synth/structure");
    let distractor_label: Vec<usize> = (0..cfg.num_distractors).map(|_| rng.random_range(0..c)).collect();

    let mut labels = Tensor::zeros(cfg.num_targets, c);
    let mut ta = Vec::new();
    let mut tc = Vec::new();
    for t in 0..cfg.num_targets {
        let k_total = (1 + poisson(&mut rng, cfg.label_cardinality - 1.0)).min(c);

        let m = poisson(&mut rng, cfg.secondary_degree);
        let mut rare = BTreeSet::new();
        for _ in 0..m {
            if cfg.rare_rate > 0.0 && rng.random_bool(cfg.rare_rate) {
                let j = rng.random_range(0..n_decisive);
                rare.insert(j / cfg.decisive_per_label);
                tc.push((t, j));
            } else {
                tc.push((t, n_decisive + rng.random_range(0..cfg.num_distractors)));
            }
        }

        let mut pool: Vec<usize> = (0..c).filter(|k| !rare.contains(k)).collect();
        pool.shuffle(&mut rng);
        let n_primary = k_total.saturating_sub(rare.len()).min(pool.len());
        let primary = &pool[..n_primary];
        if !primary.is_empty() {
            let links = poisson(&mut rng, cfg.primary_degree).max(primary.len());
            for i in 0..links {
                let k = if i < primary.len() {
                    primary[i]
                } else {
                    primary[rng.random_range(0..primary.len())]
                };
                let a = k * cfg.anchors_per_label + rng.random_range(0..cfg.anchors_per_label);
                ta.push((t, a));
            }
        }
        for &k in primary.iter().chain(rare.iter()) {
            labels.set(t, k, 1.0);
        }
    }

    let mut noise_rng = named_stream(cfg.seed, "synth/noise");
    let noise = Normal::new(0.0, cfg.noise_std.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let mut jitter = |v: f64| {
        if cfg.noise_std > 0.0 {
            v + noise.sample(&mut noise_rng)
        } else {
            v
        }
    };
    let target_x = Tensor::from_vec(cfg.num_targets, d, (0..cfg.num_targets * d).map(|_| jitter(0.0)).collect())?;
    let mut anchor_x = Tensor::zeros(n_anchor, d);
    for a in 0..n_anchor {
        let k = a / cfg.anchors_per_label;
        for j in 0..d {
            anchor_x.set(a, j, jitter(protos.get(k, j)));
        }
    }
    let mut context_x = Tensor::zeros(n_context, d + 1);
    for s in 0..n_context {
        let (k, marker) = if s < n_decisive {
            (s / cfg.decisive_per_label, 1.0)
        } else {
            (distractor_label[s - n_decisive], 0.0)
        };
        for j in 0..d {
            context_x.set(s, j, jitter(protos.get(k, j)));
        }
        context_x.set(s, d, jitter(marker));
    }

    let mut order: Vec<usize> = (0..cfg.num_targets).collect();
    order.shuffle(&mut named_stream(cfg.seed, "synth/split"));
    let n_train = cfg.num_targets * 70 / 100;
    let n_val = cfg.num_targets * 15 / 100;
    let splits = Splits {
        train: order[..n_train].to_vec(),
        val: order[n_train..n_train + n_val].to_vec(),
        test: order[n_train + n_val..].to_vec(),
    };

    let flip = |e: &[(usize, usize)]| e.iter().map(|&(a, b)| (b, a)).collect::<Vec<_>>();
    let rel = |name: &str, src, dst, primary, edges| Relation {
        name: name.to_string(),
        src: NodeTypeId(src),
        dst: NodeTypeId(dst),
        primary,
        edges,
    };
    HetGraph::new(GraphParts {
        node_type_names: vec!["target".into(), "anchor".into(), "context".into()],
        node_counts: vec![cfg.num_targets, n_anchor, n_context],
        relations: vec![
            rel("target-anchor", TARGET, ANCHOR, true, ta.clone()),
            rel("anchor-target", ANCHOR, TARGET, true, flip(&ta)),
            rel("target-context", TARGET, CONTEXT, false, tc.clone()),
            rel("context-target", CONTEXT, TARGET, false, flip(&tc)),
        ],
        features: vec![target_x, anchor_x, context_x],
        target_type: TARGET,
        labels,
        splits,
    })
}

/// Counts summarizing a graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub node_counts: Vec<(String, usize)>,
    pub edge_counts: Vec<(String, usize)>,
    pub num_labels: usize,
    /// Fraction of ones in the label matrix.
    pub label_density: f64,
    pub mean_cardinality: f64,
    pub split_sizes: [usize; 3],
}

pub fn describe(g: &HetGraph) -> GraphSummary {
    let y = g.labels();
    let ones = y.sum();
    GraphSummary {
        node_counts: g
            .node_type_names()
            .iter()
            .cloned()
            .zip(g.node_counts().iter().copied())
            .collect(),
        edge_counts: g.relations().iter().map(|r| (r.name.clone(), r.edges.len())).collect(),
        num_labels: g.num_labels(),
        label_density: if y.is_empty() { 0.0 } else { ones / y.len() as f64 },
        mean_cardinality: if y.rows() == 0 { 0.0 } else { ones / y.rows() as f64 },
        split_sizes: [g.splits().train.len(), g.splits().val.len(), g.splits().test.len()],
    }
}
