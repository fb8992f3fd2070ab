//! Flattened edge lists over a global node numbering.
//!
//! Nodes of all types are numbered consecutively in type order, so type `φ`
//! occupies `offset(φ)..offset(φ) + count(φ)`. Every node gets at least one
//! incoming COA edge and one AOA pair per primary meta-path: nodes without
//! neighbors attend to themselves.

use std::sync::Arc;

use rand::seq::index::sample;

use crate::error::{Error, Result};
use crate::hetgraph::{HetGraph, MetaPath, NodeRef, NodeTypeId};
use crate::rng::Rng;

/// Edge lists for coverage-oriented attention. `rel[e]` indexes the graph's
/// relations; the value `num_relations` marks a self-fallback edge.
#[derive(Clone, Debug, PartialEq)]
pub struct CoaEdges {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub rel: Arc<[usize]>,
    pub num_nodes: usize,
}

/// Node-level pairs `(dst attends to src)` for one meta-path.
#[derive(Clone, Debug, PartialEq)]
pub struct AoaEdges {
    pub src: Arc<[usize]>,
    pub dst: Arc<[usize]>,
    pub num_nodes: usize,
}

impl AoaEdges {
    pub fn new(pairs: &[(usize, usize)], num_nodes: usize) -> Self {
        AoaEdges {
            src: pairs.iter().map(|p| p.0).collect(),
            dst: pairs.iter().map(|p| p.1).collect(),
            num_nodes,
        }
    }
}

impl CoaEdges {
    pub fn new(triples: &[(usize, usize, usize)], num_nodes: usize) -> Self {
        CoaEdges {
            src: triples.iter().map(|p| p.0).collect(),
            dst: triples.iter().map(|p| p.1).collect(),
            rel: triples.iter().map(|p| p.2).collect(),
            num_nodes,
        }
    }
}

/// A primary meta-path with its parameter key and node-level pairs.
#[derive(Clone, Debug)]
pub struct AnchoredPath {
    pub path: MetaPath,
    pub key: String,
    pub edges: AoaEdges,
}

pub struct ModelGraph<'g> {
    graph: &'g HetGraph,
    offsets: Vec<usize>,
    coa: CoaEdges,
    anchored: Vec<AnchoredPath>,
    secondary: Vec<MetaPath>,
}

pub fn path_key(names: &[String]) -> String {
    names.join(">")
}

impl<'g> ModelGraph<'g> {
    /// Resolves `metapaths` and flattens neighborhoods. Only meta-paths made
    /// entirely of primary relations get anchoring edges.
    pub fn new(graph: &'g HetGraph, metapaths: &[Vec<String>]) -> Result<Self> {
        let mut offsets = Vec::with_capacity(graph.num_node_types() + 1);
        let mut acc = 0;
        for &c in graph.node_counts() {
            offsets.push(acc);
            acc += c;
        }
        offsets.push(acc);
        let n = acc;
        let mut mg = ModelGraph {
            graph,
            offsets,
            coa: CoaEdges::new(&[], n),
            anchored: Vec::new(),
            secondary: Vec::new(),
        };
        mg.coa = mg.build_coa(None)?;
        let target_off = mg.offset(graph.target_type());
        for names in metapaths {
            let path = MetaPath::new(graph, names)?;
            if !path.is_primary(graph) {
                mg.secondary.push(path);
                continue;
            }
            let end_off = mg.offset(path.end_type(graph));
            let mut pairs = Vec::new();
            for t in 0..graph.num_targets() {
                let reach = graph.metapath_neighborhood(&path, t)?;
                if reach.is_empty() {
                    pairs.push((target_off + t, target_off + t));
                }
                pairs.extend(reach.into_iter().map(|s| (end_off + s, target_off + t)));
            }
            for v in 0..n {
                if v < target_off || v >= target_off + graph.num_targets() {
                    pairs.push((v, v));
                }
            }
            pairs.sort_by_key(|p| p.1);
            mg.anchored.push(AnchoredPath {
                key: path_key(&path.names(graph)),
                path,
                edges: AoaEdges::new(&pairs, n),
            });
        }
        Ok(mg)
    }

    fn build_coa(&self, mut fanout: Option<(usize, &mut Rng)>) -> Result<CoaEdges> {
        let g = self.graph;
        let self_rel = g.relations().len();
        let mut triples = Vec::new();
        for ty in 0..g.num_node_types() {
            let off = self.offsets[ty];
            for i in 0..g.node_count(NodeTypeId(ty)) {
                let hood = g.in_neighborhood(NodeRef { ty: NodeTypeId(ty), index: i });
                let v = off + i;
                if hood.is_empty() {
                    triples.push((v, v, self_rel));
                    continue;
                }
                let chosen: Vec<usize> = match fanout.as_mut() {
                    Some((k, rng)) if hood.len() > *k => {
                        let mut idx = sample(*rng, hood.len(), *k).into_vec();
                        idx.sort_unstable();
                        idx
                    }
                    _ => (0..hood.len()).collect(),
                };
                for j in chosen {
                    let (r, s) = hood[j];
                    triples.push((self.offsets[s.ty.0] + s.index, v, r.0));
                }
            }
        }
        if triples.is_empty() && self.num_nodes() > 0 {
            return Err(Error::Validation("graph has no nodes to attend over".into()));
        }
        Ok(CoaEdges::new(&triples, self.num_nodes()))
    }

    /// COA edges with at most `fanout` sampled in-neighbors per node.
    pub fn sampled_coa(&self, fanout: usize, rng: &mut Rng) -> Result<CoaEdges> {
        self.build_coa(Some((fanout, rng)))
    }

    pub fn graph(&self) -> &'g HetGraph {
        self.graph
    }

    pub fn num_nodes(&self) -> usize {
        *self.offsets.last().expect("offsets")
    }

    pub fn offset(&self, ty: NodeTypeId) -> usize {
        self.offsets[ty.0]
    }

    pub fn global(&self, node: NodeRef) -> usize {
        self.offsets[node.ty.0] + node.index
    }

    /// Global row of target node `t`.
    pub fn target_row(&self, t: usize) -> usize {
        self.offset(self.graph.target_type()) + t
    }

    pub fn coa(&self) -> &CoaEdges {
        &self.coa
    }

    pub fn anchored(&self) -> &[AnchoredPath] {
        &self.anchored
    }

    pub fn secondary_paths(&self) -> &[MetaPath] {
        &self.secondary
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hetgraph::tests::toy_graph;

    #[test]
    fn every_node_has_an_incoming_edge() {
        let g = toy_graph();
        let mg = ModelGraph::new(&g, &[vec!["movie-keyword".into(), "keyword-movie".into()]]).unwrap();
        let mut seen = vec![false; mg.num_nodes()];
        for &d in mg.coa().dst.iter() {
            seen[d] = true;
        }
        assert!(seen.iter().all(|&s| s));
        let a = &mg.anchored()[0];
        let mut seen = vec![false; mg.num_nodes()];
        for &d in a.edges.dst.iter() {
            seen[d] = true;
        }
        assert!(seen.iter().all(|&s| s));
        assert_eq!(a.key, "movie-keyword>keyword-movie");
    }

    #[test]
    fn secondary_paths_get_no_anchoring_edges() {
        let g = toy_graph();
        let mg = ModelGraph::new(&g, &[vec!["movie-actor".into(), "actor-movie".into()]]).unwrap();
        assert!(mg.anchored().is_empty());
        assert_eq!(mg.secondary_paths().len(), 1);
    }

    #[test]
    fn fanout_caps_in_degree() {
        let g = toy_graph();
        let mg = ModelGraph::new(&g, &[]).unwrap();
        let mut rng = crate::rng::stream(1, 0);
        let e = mg.sampled_coa(1, &mut rng).unwrap();
        let mut deg = vec![0; mg.num_nodes()];
        for &d in e.dst.iter() {
            deg[d] += 1;
        }
        assert!(deg.iter().all(|&k| k == 1));
    }
}
