//! Model files and tree dumps.

use std::path::Path;

use crf_core::partition::Node;
use crf_core::{ClusteredForest, ClusteredTree};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const FORMAT: &str = "crf-model";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ModelFile {
    format: String,
    version: u32,
    seed: u64,
    forest: ClusteredForest,
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: not a model file: {source}")]
    Json { path: String, source: serde_json::Error },
    #[error("{path}: unsupported model format {format:?} version {version}")]
    Format { path: String, format: String, version: u32 },
}

/// Floats are written with round-trip precision, so a reload is bit-exact.
pub fn save_model(path: &Path, forest: &ClusteredForest) -> Result<(), ModelError> {
    let file = ModelFile { format: FORMAT.into(), version: VERSION, seed: forest.config.seed, forest: forest.clone() };
    let text = serde_json::to_string(&file)
        .map_err(|source| ModelError::Json { path: path.display().to_string(), source })?;
    std::fs::write(path, text).map_err(|source| ModelError::Io { path: path.display().to_string(), source })
}

pub fn load_model(path: &Path) -> Result<ClusteredForest, ModelError> {
    let p = || path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io { path: p(), source })?;
    let file: ModelFile = serde_json::from_str(&text).map_err(|source| ModelError::Json { path: p(), source })?;
    if file.format != FORMAT || file.version != VERSION {
        return Err(ModelError::Format { path: p(), format: file.format, version: file.version });
    }
    Ok(file.forest)
}

fn num(v: f64) -> Value {
    // infinite cell faces become null
    serde_json::Number::from_f64(v).map_or(Value::Null, Value::Number)
}

fn node_json(tree: &ClusteredTree, id: usize) -> Value {
    let p = &tree.partition;
    match p.nodes()[id] {
        Node::Split { feature, threshold, left, right } => json!({
            "feature": feature,
            "threshold": num(threshold),
            "left": node_json(tree, left as usize),
            "right": node_json(tree, right as usize),
        }),
        Node::Leaf { leaf } => {
            let cell = &p.leaves()[leaf as usize];
            json!({
                "leaf": leaf,
                "lo": cell.lo.iter().map(|&v| num(v)).collect::<Vec<_>>(),
                "hi": cell.hi.iter().map(|&v| num(v)).collect::<Vec<_>>(),
                "count": cell.count,
                "value": num(tree.leaf_values[leaf as usize]),
            })
        }
    }
}

/// Nested records per tree: split nodes with children, leaves with their
/// boxes, split-sample counts and fitted values.
pub fn dump_trees(forest: &ClusteredForest) -> Value {
    let bags: Vec<Value> = forest
        .bags
        .iter()
        .map(|bag| {
            Value::Array(
                bag.iter()
                    .map(|t| match t {
                        None => Value::Null,
                        Some(t) => json!({ "rho_hat": t.rho_hat, "root": node_json(t, 0) }),
                    })
                    .collect(),
            )
        })
        .collect();
    json!({ "dim": forest.dim, "bags": bags })
}
