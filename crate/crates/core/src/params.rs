//! Named parameter storage.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::named_stream;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// All learnable tensors of a model, addressed by name, in insertion order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<(String, Tensor)>", into = "Vec<(String, Tensor)>")]
pub struct FocalParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl From<Vec<(String, Tensor)>> for FocalParams {
    fn from(v: Vec<(String, Tensor)>) -> Self {
        let mut p = FocalParams::default();
        for (n, t) in v {
            p.insert(n, t);
        }
        p
    }
}

impl From<FocalParams> for Vec<(String, Tensor)> {
    fn from(p: FocalParams) -> Self {
        p.names.into_iter().zip(p.tensors).collect()
    }
}

impl FocalParams {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts or replaces `name`.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.tensors[i] = value,
            None => {
                self.index.insert(name.clone(), self.names.len());
                self.names.push(name);
                self.tensors.push(value);
            }
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Pushes every parameter as a leaf on `tape`. Leaves come first on a
    /// fresh tape, so parameter `i` gets `VarId` index `i`.
    pub fn bind<'p>(&'p self, tape: &mut Tape) -> Bound<'p> {
        let ids = self.tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        Bound { params: self, ids }
    }

    /// Draws `rows x cols` Xavier-uniform entries from the stream keyed by `name`.
    pub fn xavier(seed: u64, name: &str, rows: usize, cols: usize) -> Tensor {
        let bound = if rows + cols == 0 { 0.0 } else { (6.0 / (rows + cols) as f64).sqrt() };
        let mut rng = named_stream(seed, &format!("init/{name}"));
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Tensor::from_vec(rows, cols, data).expect("sized")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("params serialize")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, path)
    }
}

/// Parameters bound to tape leaves.
pub struct Bound<'p> {
    params: &'p FocalParams,
    ids: Vec<VarId>,
}

impl<'p> Bound<'p> {
    /// Associates existing tape handles (one per parameter, in order) with `params`.
    pub fn from_ids(params: &'p FocalParams, ids: Vec<VarId>) -> Result<Self> {
        if ids.len() != params.len() {
            return Err(Error::Config(format!("{} handles for {} parameters", ids.len(), params.len())));
        }
        Ok(Bound { params, ids })
    }

    pub fn var(&self, name: &str) -> Result<VarId> {
        self.params
            .position(name)
            .map(|i| self.ids[i])
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn ids(&self) -> &[VarId] {
        &self.ids
    }

    pub fn params(&self) -> &FocalParams {
        self.params
    }
}
