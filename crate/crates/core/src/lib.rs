//! Semantic class prototypes from class names and one-sentence definitions,
//! and closed-form linear zero-shot classifiers built on top of them.

pub mod attention;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod prototypes;
pub mod ridge;
pub mod synthetic;
pub mod visualness;

pub use attention::{AttentionModel, TrainConfig};
pub use error::{Error, Result};
pub use evaluation::{EvalReport, HyperGrid, HyperPoint, SplitSpec};
pub use io::{ClassCatalog, ClassRecord, EmbeddingTable, FeatureMatrix, WordImageBundle};
pub use prototypes::{Method, PrototypeMeta, PrototypeParams, PrototypeSet, WeightReport};
pub use ridge::{Direction, RidgeModel};
pub use visualness::VisualnessTable;
