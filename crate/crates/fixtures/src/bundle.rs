use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde_json::json;

use crate::gen::{planted_clusters, random_eval_instance, random_graph, random_weights};

pub const BUNDLE_VERSION: u32 = 1;

/// A named set of generated files and the seed they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub name: String,
    pub seed: u64,
    pub files: Vec<(String, Vec<u8>)>,
}

impl Fixture {
    pub fn graph(seed: u64) -> Fixture {
        let g = random_graph(seed);
        let w = random_weights(&g, seed);
        Fixture {
            name: format!("graph_{seed}"),
            seed,
            files: vec![("graph.json".into(), g.to_json().into_bytes()), ("weights.bin".into(), w.to_bytes())],
        }
    }

    pub fn eval(seed: u64) -> Fixture {
        let inst = random_eval_instance(seed);
        Fixture {
            name: format!("eval_{seed}"),
            seed,
            files: vec![("gt.jsonl".into(), inst.gt_lines().into_bytes()), ("det.jsonl".into(), inst.det_lines().into_bytes())],
        }
    }

    /// Ground truth for one image holding every planted box.
    pub fn clusters(seed: u64) -> Fixture {
        let p = planted_clusters(seed, 20);
        let boxes: Vec<_> =
            p.boxes.iter().map(|b| json!({"x": b.x0(), "y": b.y0(), "w": b.w, "h": b.h, "class": 1})).collect();
        let gt = format!("{}\n", json!({"image_id": "planted", "boxes": boxes}));
        let centers: Vec<_> = p.centers.iter().map(|c| json!({"w": c.w, "h": c.h})).collect();
        Fixture {
            name: format!("clusters_{seed}"),
            seed,
            files: vec![
                ("gt.jsonl".into(), gt.into_bytes()),
                ("centers.json".into(), serde_json::to_vec_pretty(&centers).unwrap()),
            ],
        }
    }
}

/// Writes `root/v{BUNDLE_VERSION}/{name}/{file}` for every fixture plus a
/// `manifest.json` listing names, seeds and files. Returns the versioned
/// directory.
pub fn write_bundle(root: &Path, fixtures: &[Fixture]) -> io::Result<PathBuf> {
    let dir = root.join(format!("v{BUNDLE_VERSION}"));
    let mut manifest = Vec::new();
    for f in fixtures {
        let sub = dir.join(&f.name);
        fs::create_dir_all(&sub)?;
        for (file, bytes) in &f.files {
            fs::write(sub.join(file), bytes)?;
        }
        manifest.push(json!({
            "name": f.name,
            "seed": f.seed,
            "files": f.files.iter().map(|(n, _)| n.clone()).collect::<Vec<_>>(),
        }));
    }
    fs::create_dir_all(&dir)?;
    let text = serde_json::to_string_pretty(&json!({"version": BUNDLE_VERSION, "fixtures": manifest})).unwrap();
    fs::write(dir.join("manifest.json"), text)?;
    Ok(dir)
}
