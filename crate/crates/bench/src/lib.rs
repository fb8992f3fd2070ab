//! Shared fixtures for the criterion benches.

use focal_core::synthgen::{generate, SynthConfig, PRIMARY_METAPATH};
use focal_core::trainer::FocalConfig;
use focal_core::HetGraph;

/// Synthetic graph with `targets` target nodes and secondary degree `m`.
pub fn graph(targets: usize, m: f64) -> HetGraph {
    let cfg = SynthConfig { num_targets: targets, secondary_degree: m, ..Default::default() };
    generate(&cfg).expect("bench graph")
}

pub fn model_config() -> FocalConfig {
    FocalConfig { dropout: 0.0, metapaths: vec![vec![PRIMARY_METAPATH.into()]], ..Default::default() }
}
