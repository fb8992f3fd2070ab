//! JSON graph file format.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "schema": {
//!     "node_types": ["movie", "keyword"],
//!     "relations": [{"name": "movie-keyword", "src": "movie", "dst": "keyword", "primary": true}]
//!   },
//!   "counts": {"movie": 2, "keyword": 1},
//!   "features": {"movie": {"dim": 2, "rows": [[0.1, 0.2], [0.3, 0.4]]}, "keyword": {"dim": 1, "rows": [[1.0]]}},
//!   "edges": {"movie-keyword": [[0, 0], [1, 0]]},
//!   "labels": {"target_type": "movie", "num_classes": 2, "rows": [[1, 0], [0, 1]]},
//!   "splits": {"train": [0], "val": [1], "test": []}
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed with exact
//! round-trip, so `load_graph(save_graph(g)) == g` bit for bit.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GraphParts, HetGraph, NodeTypeId, Relation, Splits};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format_version: u32,
    schema: Schema,
    counts: BTreeMap<String, usize>,
    features: BTreeMap<String, FeatureBlock>,
    edges: BTreeMap<String, Vec<(usize, usize)>>,
    labels: LabelBlock,
    splits: Splits,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Schema {
    node_types: Vec<String>,
    relations: Vec<RelationDecl>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RelationDecl {
    name: String,
    src: String,
    dst: String,
    #[serde(default)]
    primary: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureBlock {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelBlock {
    target_type: String,
    num_classes: usize,
    rows: Vec<Vec<u8>>,
}

impl HetGraph {
    pub fn to_json(&self) -> String {
        let names = self.node_type_names();
        let doc = Document {
            format_version: FORMAT_VERSION,
            schema: Schema {
                node_types: names.to_vec(),
                relations: self
                    .relations()
                    .iter()
                    .map(|r| RelationDecl {
                        name: r.name.clone(),
                        src: names[r.src.0].clone(),
                        dst: names[r.dst.0].clone(),
                        primary: r.primary,
                    })
                    .collect(),
            },
            counts: names.iter().cloned().zip(self.node_counts().iter().copied()).collect(),
            features: names
                .iter()
                .zip(self.all_features())
                .map(|(n, f)| {
                    let rows = (0..f.rows()).map(|i| f.row(i).to_vec()).collect();
                    (n.clone(), FeatureBlock { dim: f.cols(), rows })
                })
                .collect(),
            edges: self
                .relations()
                .iter()
                .map(|r| (r.name.clone(), r.edges.clone()))
                .collect(),
            labels: LabelBlock {
                target_type: names[self.target_type().0].clone(),
                num_classes: self.num_labels(),
                rows: (0..self.labels().rows())
                    .map(|i| self.labels().row(i).iter().map(|&v| v as u8).collect())
                    .collect(),
            },
            splits: self.splits().clone(),
        };
        serde_json::to_string(&doc).expect("graph document serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<HetGraph> {
        let parse = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            message,
        };
        let doc: Document = serde_json::from_str(text).map_err(|e| parse(e.to_string()))?;
        if doc.format_version != FORMAT_VERSION {
            return Err(parse(format!(
                "unsupported format_version {} (expected {FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let names = doc.schema.node_types;
        let type_id = |n: &str| {
            names
                .iter()
                .position(|x| x == n)
                .map(NodeTypeId)
                .ok_or_else(|| Error::Validation(format!("undeclared node type `{n}`")))
        };
        let mut node_counts = Vec::with_capacity(names.len());
        let mut features = Vec::with_capacity(names.len());
        for n in &names {
            let count = *doc
                .counts
                .get(n)
                .ok_or_else(|| Error::Validation(format!("missing count for `{n}`")))?;
            let block = doc
                .features
                .get(n)
                .ok_or_else(|| Error::Validation(format!("missing features for `{n}`")))?;
            let mut data = Vec::with_capacity(block.rows.len() * block.dim);
            for (i, row) in block.rows.iter().enumerate() {
                if row.len() != block.dim {
                    return Err(Error::Validation(format!(
                        "features of `{n}` row {i} has {} values, expected {}",
                        row.len(),
                        block.dim
                    )));
                }
                data.extend_from_slice(row);
            }
            node_counts.push(count);
            features.push(Tensor::from_vec(block.rows.len(), block.dim, data)?);
        }
        for key in doc.counts.keys().chain(doc.features.keys()) {
            type_id(key)?;
        }
        let mut relations = Vec::with_capacity(doc.schema.relations.len());
        let mut edges = doc.edges;
        for decl in doc.schema.relations {
            let e = edges.remove(&decl.name).unwrap_or_default();
            relations.push(Relation {
                src: type_id(&decl.src)?,
                dst: type_id(&decl.dst)?,
                primary: decl.primary,
                edges: e,
                name: decl.name,
            });
        }
        if let Some(extra) = edges.keys().next() {
            return Err(Error::UnknownRelation(extra.clone()));
        }
        let target = type_id(&doc.labels.target_type)?;
        let c = doc.labels.num_classes;
        let mut label_data = Vec::with_capacity(doc.labels.rows.len() * c);
        for (i, row) in doc.labels.rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Validation(format!(
                    "label row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            label_data.extend(row.iter().map(|&v| f64::from(v)));
        }
        let labels = Tensor::from_vec(doc.labels.rows.len(), c, label_data)?;
        HetGraph::new(GraphParts {
            node_type_names: names,
            node_counts,
            relations,
            features,
            target_type: target.0,
            labels,
            splits: doc.splits,
        })
    }
}

pub fn save_graph(g: &HetGraph, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, g.to_json()).map_err(|e| Error::io(path, e))
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<HetGraph> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    HetGraph::from_json(&text, path)
}
