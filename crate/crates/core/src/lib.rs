pub mod aoa;
pub mod coa;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod hetgraph;
pub mod layout;
pub mod objective;
pub mod params;
pub mod rng;
pub mod synthgen;
pub mod tape;
pub mod tensor;
pub mod theoremlab;
pub mod trainer;

pub use error::{Error, Result};
pub use hetgraph::{HetGraph, MetaPath, NodeRef, NodeTypeId, RelationTypeId, Split};
pub use tape::{Gradients, Tape, VarId};
pub use tensor::Tensor;
