//! Heterogeneous graph data model.
//!
//! A [`HetGraph`] holds typed nodes, typed directed relations, per-type
//! feature matrices, multi-hot labels on one target node type and a
//! train/val/test split over the target nodes. It is validated once at
//! construction and immutable afterwards.
//!
//! Edges are directed as stored. A relation `r` with edge `(s, d)` makes
//! `s` an in-neighbor of `d`; meta-path walks follow edges from source to
//! destination. Symmetric relations are stored as two relations, one per
//! direction.

mod io;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use io::{load_graph, save_graph, FORMAT_VERSION};

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeTypeId(pub usize);

#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RelationTypeId(pub usize);

/// A node identified by its type and its index within that type.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeRef {
    pub ty: NodeTypeId,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Relation {
    pub name: String,
    pub src: NodeTypeId,
    pub dst: NodeTypeId,
    /// Whether the relation carries task-critical (primary) semantics.
    pub primary: bool,
    pub edges: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// Raw, unvalidated graph contents. Turn into a [`HetGraph`] with [`HetGraph::new`].
#[derive(Clone, Debug, Default)]
pub struct GraphParts {
    pub node_type_names: Vec<String>,
    pub node_counts: Vec<usize>,
    pub relations: Vec<Relation>,
    pub features: Vec<Tensor>,
    pub target_type: usize,
    pub labels: Tensor,
    pub splits: Splits,
}

/// Compressed adjacency of one relation keyed by one endpoint.
#[derive(Clone, Debug, PartialEq)]
struct Csr {
    offsets: Vec<usize>,
    targets: Vec<usize>,
}

impl Csr {
    fn build(n: usize, pairs: impl Iterator<Item = (usize, usize)> + Clone) -> Csr {
        let mut offsets = vec![0; n + 1];
        for (k, _) in pairs.clone() {
            offsets[k + 1] += 1;
        }
        for i in 0..n {
            offsets[i + 1] += offsets[i];
        }
        let mut cursor = offsets.clone();
        let mut targets = vec![0; offsets[n]];
        for (k, v) in pairs {
            targets[cursor[k]] = v;
            cursor[k] += 1;
        }
        Csr { offsets, targets }
    }

    fn get(&self, k: usize) -> &[usize] {
        &self.targets[self.offsets[k]..self.offsets[k + 1]]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HetGraph {
    node_type_names: Vec<String>,
    node_counts: Vec<usize>,
    relations: Vec<Relation>,
    features: Vec<Tensor>,
    target_type: NodeTypeId,
    labels: Tensor,
    splits: Splits,
    in_adj: Vec<Csr>,
    out_adj: Vec<Csr>,
}

impl HetGraph {
    pub fn new(parts: GraphParts) -> Result<HetGraph> {
        validate(&parts)?;
        let GraphParts {
            node_type_names,
            node_counts,
            relations,
            features,
            target_type,
            labels,
            splits,
        } = parts;
        let in_adj = relations
            .iter()
            .map(|r| Csr::build(node_counts[r.dst.0], r.edges.iter().map(|&(s, d)| (d, s))))
            .collect();
        let out_adj = relations
            .iter()
            .map(|r| Csr::build(node_counts[r.src.0], r.edges.iter().copied()))
            .collect();
        Ok(HetGraph {
            node_type_names,
            node_counts,
            relations,
            features,
            target_type: NodeTypeId(target_type),
            labels,
            splits,
            in_adj,
            out_adj,
        })
    }

    pub fn into_parts(self) -> GraphParts {
        GraphParts {
            node_type_names: self.node_type_names,
            node_counts: self.node_counts,
            relations: self.relations,
            features: self.features,
            target_type: self.target_type.0,
            labels: self.labels,
            splits: self.splits,
        }
    }

    pub fn node_type_names(&self) -> &[String] {
        &self.node_type_names
    }

    pub fn num_node_types(&self) -> usize {
        self.node_type_names.len()
    }

    pub fn node_counts(&self) -> &[usize] {
        &self.node_counts
    }

    pub fn node_count(&self, ty: NodeTypeId) -> usize {
        self.node_counts[ty.0]
    }

    pub fn total_nodes(&self) -> usize {
        self.node_counts.iter().sum()
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn relation(&self, r: RelationTypeId) -> &Relation {
        &self.relations[r.0]
    }

    pub fn relation_id(&self, name: &str) -> Result<RelationTypeId> {
        self.relations
            .iter()
            .position(|r| r.name == name)
            .map(RelationTypeId)
            .ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }

    pub fn node_type_id(&self, name: &str) -> Option<NodeTypeId> {
        self.node_type_names.iter().position(|n| n == name).map(NodeTypeId)
    }

    pub fn features(&self, ty: NodeTypeId) -> &Tensor {
        &self.features[ty.0]
    }

    pub fn all_features(&self) -> &[Tensor] {
        &self.features
    }

    pub fn target_type(&self) -> NodeTypeId {
        self.target_type
    }

    pub fn num_targets(&self) -> usize {
        self.node_counts[self.target_type.0]
    }

    pub fn labels(&self) -> &Tensor {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.cols()
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn split(&self, which: Split) -> &[usize] {
        match which {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        }
    }

    /// In-neighbors of `index` (of type `dst`) through relation `r`, in edge order.
    pub fn in_neighbors(&self, r: RelationTypeId, index: usize) -> &[usize] {
        self.in_adj[r.0].get(index)
    }

    /// Out-neighbors of `index` (of type `src`) through relation `r`, in edge order.
    pub fn out_neighbors(&self, r: RelationTypeId, index: usize) -> &[usize] {
        self.out_adj[r.0].get(index)
    }

    /// Union of typed one-hop in-neighbors of `node` over every relation
    /// ending at its type, each tagged with its relation. Duplicate edges
    /// are kept; the node itself appears only through an explicit self-loop.
    pub fn in_neighborhood(&self, node: NodeRef) -> Vec<(RelationTypeId, NodeRef)> {
        let mut out = Vec::new();
        for (ri, rel) in self.relations.iter().enumerate() {
            if rel.dst != node.ty {
                continue;
            }
            let rid = RelationTypeId(ri);
            for &s in self.in_neighbors(rid, node.index) {
                out.push((
                    rid,
                    NodeRef {
                        ty: rel.src,
                        index: s,
                    },
                ));
            }
        }
        out
    }

    /// The unconstrained heterogeneous neighborhood of target node `t`.
    pub fn coverage_neighborhood(&self, t: usize) -> Vec<(RelationTypeId, NodeRef)> {
        self.in_neighborhood(NodeRef {
            ty: self.target_type,
            index: t,
        })
    }

    /// Set of terminal nodes of all walks from target `t` along `path`, sorted ascending.
    pub fn metapath_neighborhood(&self, path: &MetaPath, t: usize) -> Result<Vec<usize>> {
        let first = self.relation(path.relations[0]);
        if first.src != self.target_type {
            return Err(Error::TypeInconsistent {
                path: path.names(self),
                reason: format!(
                    "starts at `{}`, target type is `{}`",
                    self.node_type_names[first.src.0], self.node_type_names[self.target_type.0]
                ),
            });
        }
        let mut frontier: BTreeSet<usize> = BTreeSet::from([t]);
        for &r in &path.relations {
            let mut next = BTreeSet::new();
            for &v in &frontier {
                next.extend(self.out_neighbors(r, v).iter().copied());
            }
            frontier = next;
            if frontier.is_empty() {
                break;
            }
        }
        Ok(frontier.into_iter().collect())
    }
}

fn validate(p: &GraphParts) -> Result<()> {
    let bad = |msg: String| Err(Error::Validation(msg));
    let nt = p.node_type_names.len();
    if nt == 0 {
        return bad("no node types declared".into());
    }
    if p.node_counts.len() != nt {
        return bad(format!("{} node counts for {nt} node types", p.node_counts.len()));
    }
    if p.features.len() != nt {
        return bad(format!("{} feature matrices for {nt} node types", p.features.len()));
    }
    let mut names = BTreeSet::new();
    for n in &p.node_type_names {
        if !names.insert(n) {
            return bad(format!("duplicate node type `{n}`"));
        }
    }
    for (ty, (f, &n)) in p.features.iter().zip(&p.node_counts).enumerate() {
        let name = &p.node_type_names[ty];
        if f.rows() != n {
            return bad(format!("features of `{name}` have {} rows, expected {n}", f.rows()));
        }
        if let Some(pos) = f.data().iter().position(|v| !v.is_finite()) {
            let cols = f.cols().max(1);
            return bad(format!(
                "non-finite feature in `{name}` at row {}, column {}",
                pos / cols,
                pos % cols
            ));
        }
    }
    let mut rel_names = BTreeSet::new();
    for rel in &p.relations {
        if !rel_names.insert(&rel.name) {
            return bad(format!("duplicate relation `{}`", rel.name));
        }
        if rel.src.0 >= nt || rel.dst.0 >= nt {
            return bad(format!("relation `{}` references an undeclared node type", rel.name));
        }
        let (ns, nd) = (p.node_counts[rel.src.0], p.node_counts[rel.dst.0]);
        for (row, &(s, d)) in rel.edges.iter().enumerate() {
            if s >= ns || d >= nd {
                return bad(format!(
                    "relation `{}` edge row {row}: ({s}, {d}) out of range for counts ({ns}, {nd})",
                    rel.name
                ));
            }
        }
    }
    if p.target_type >= nt {
        return bad(format!("target type {} is undeclared", p.target_type));
    }
    let n_target = p.node_counts[p.target_type];
    if p.labels.rows() != n_target {
        return bad(format!(
            "label matrix has {} rows for {n_target} target nodes",
            p.labels.rows()
        ));
    }
    if let Some(pos) = p.labels.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        let cols = p.labels.cols().max(1);
        return bad(format!("label row {} column {} is not 0/1", pos / cols, pos % cols));
    }
    let mut seen = vec![None::<&str>; n_target];
    for (name, idx) in [("train", &p.splits.train), ("val", &p.splits.val), ("test", &p.splits.test)] {
        for &i in idx {
            if i >= n_target {
                return bad(format!("{name} split index {i} out of range ({n_target} targets)"));
            }
            if let Some(prev) = seen[i] {
                return bad(format!("target {i} appears in both {prev} and {name} splits"));
            }
            seen[i] = Some(name);
        }
    }
    Ok(())
}

/// An ordered, type-consistent sequence of relations starting at the target type.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaPath {
    relations: Vec<RelationTypeId>,
}

impl MetaPath {
    pub fn new(g: &HetGraph, names: &[impl AsRef<str>]) -> Result<MetaPath> {
        let names: Vec<String> = names.iter().map(|n| n.as_ref().to_string()).collect();
        if names.is_empty() {
            return Err(Error::TypeInconsistent {
                path: names,
                reason: "empty meta-path".into(),
            });
        }
        let relations = names
            .iter()
            .map(|n| g.relation_id(n))
            .collect::<Result<Vec<_>>>()?;
        Self::from_ids(g, relations)
    }

    pub fn from_ids(g: &HetGraph, relations: Vec<RelationTypeId>) -> Result<MetaPath> {
        let path = MetaPath { relations };
        let names = path.names(g);
        if path.relations.is_empty() {
            return Err(Error::TypeInconsistent {
                path: names,
                reason: "empty meta-path".into(),
            });
        }
        if g.relation(path.relations[0]).src != g.target_type() {
            return Err(Error::TypeInconsistent {
                path: names,
                reason: "does not start at the target type".into(),
            });
        }
        for w in path.relations.windows(2) {
            if g.relation(w[0]).dst != g.relation(w[1]).src {
                return Err(Error::TypeInconsistent {
                    path: names,
                    reason: format!(
                        "`{}` ends where `{}` does not start",
                        g.relation(w[0]).name,
                        g.relation(w[1]).name
                    ),
                });
            }
        }
        Ok(path)
    }

    pub fn relations(&self) -> &[RelationTypeId] {
        &self.relations
    }

    pub fn names(&self, g: &HetGraph) -> Vec<String> {
        self.relations.iter().map(|&r| g.relation(r).name.clone()).collect()
    }

    /// True when every relation on the path is primary.
    pub fn is_primary(&self, g: &HetGraph) -> bool {
        self.relations.iter().all(|&r| g.relation(r).primary)
    }

    pub fn end_type(&self, g: &HetGraph) -> NodeTypeId {
        g.relation(*self.relations.last().expect("non-empty")).dst
    }
}
