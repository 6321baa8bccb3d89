use std::fs;
use std::path::Path;

use slimdet::graph::Graph;
use slimdet::tensor::WeightStore;
use slimdet::zoo::{self, InitScheme};

use crate::failure::{Classify, CmdResult, Failure};

/// A loaded model plus the exact bytes it was read from, when it came from
/// files.
pub struct Model {
    pub graph: Graph,
    pub weights: Option<WeightStore>,
    pub raw: Option<(Vec<u8>, Vec<u8>)>,
}

fn check(graph: &Graph, label: &str) -> CmdResult {
    graph.validate().map_err(|errs| {
        Failure::input(format!(
            "model {label}: {}",
            errs.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ")
        ))
    })?;
    graph.infer_shapes().input_err(format!("model {label}"))?;
    Ok(())
}

/// Loads `zoo:<name>` (weights seeded by `seed`) or a graph JSON file with
/// an optional weight file.
pub fn load(spec: &str, weights: Option<&Path>, seed: u64, need_weights: bool) -> CmdResult<Model> {
    if let Some(name) = spec.strip_prefix("zoo:") {
        if weights.is_some() {
            return Err(Failure::input("--weights cannot be combined with a zoo model"));
        }
        let graph = zoo::graph_by_name(name).input_err("model")?;
        let weights = need_weights.then(|| zoo::init_weights(&graph, seed, InitScheme::HeNormal));
        return Ok(Model { graph, weights, raw: None });
    }
    let graph_bytes = fs::read(spec).input_err(format!("reading model {spec}"))?;
    let text = String::from_utf8(graph_bytes.clone()).input_err(format!("model {spec}"))?;
    let graph = Graph::from_json(&text).input_err(format!("model {spec}"))?;
    check(&graph, spec)?;
    let (store, raw) = match weights {
        Some(p) => {
            let bytes = fs::read(p).input_err(format!("reading weights {}", p.display()))?;
            let store = WeightStore::read_from(&mut bytes.as_slice()).input_err(format!("weights {}", p.display()))?;
            (Some(store), Some((graph_bytes, bytes)))
        }
        None if need_weights => return Err(Failure::input(format!("model {spec} needs --weights"))),
        None => (None, None),
    };
    Ok(Model { graph, weights: store, raw })
}

pub fn write(path: &Path, bytes: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).internal_err(format!("creating {}", dir.display()))?;
    }
    fs::write(path, bytes).internal_err(format!("writing {}", path.display()))
}
