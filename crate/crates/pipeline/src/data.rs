//! Reading a simulated dataset back from disk.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use goalcast_core::envsim::{DatasetConfig, SceneRecord, Split, SCENE_LEN};
use goalcast_core::{Error, Homography, Result, SemanticGrid};

/// An environment grid together with its world→pixel transform.
#[derive(Debug)]
pub struct EnvGrid {
    pub grid: SemanticGrid,
    pub homography: Homography,
}

/// Validated scene records; grids are loaded on first use and cached per
/// environment.
#[derive(Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<SceneRecord>,
    grids: Mutex<BTreeMap<String, Arc<EnvGrid>>>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&SceneRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn grid(&self, env_id: &str) -> Result<Arc<EnvGrid>> {
        if let Some(g) = self.grids.lock().expect("grid cache poisoned").get(env_id) {
            return Ok(g.clone());
        }
        let envs = self.root.join("envs");
        let pgm = envs.join(format!("{env_id}.pgm"));
        if !pgm.exists() {
            return Err(Error::io(&pgm, std::io::Error::new(std::io::ErrorKind::NotFound, "grid file missing")));
        }
        let (grid, homography) = SemanticGrid::load(&pgm, &envs.join(format!("{env_id}.json")))?;
        let env = Arc::new(EnvGrid { grid, homography });
        self.grids
            .lock()
            .expect("grid cache poisoned")
            .entry(env_id.to_string())
            .or_insert(env.clone());
        Ok(env)
    }

    /// Loads every grid referenced by the records; fails on the first
    /// missing or malformed one.
    pub fn check_grids(&self) -> Result<()> {
        let ids: std::collections::BTreeSet<&str> = self.records.iter().map(|r| r.env_id.as_str()).collect();
        ids.into_iter().try_for_each(|id| self.grid(id).map(|_| ()))
    }
}

/// Parses `scenes.jsonl` under `root`, checking every record has a unique
/// scene id and exactly 20 finite points.
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let path = root.join("scenes.jsonl");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.clone(),
        msg: format!("line {line}: {msg}"),
    };
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let r: SceneRecord = serde_json::from_str(line).map_err(|e| parse_err(line_no, e.to_string()))?;
        if r.points.len() != SCENE_LEN {
            return Err(parse_err(
                line_no,
                format!("scene '{}' has {} points, expected {SCENE_LEN}", r.scene_id, r.points.len()),
            ));
        }
        if r.points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(parse_err(line_no, format!("scene '{}' has non-finite points", r.scene_id)));
        }
        if !(r.fps > 0.0) {
            return Err(parse_err(line_no, format!("scene '{}' has fps {}", r.scene_id, r.fps)));
        }
        if !seen.insert(r.scene_id.clone()) {
            return Err(parse_err(line_no, format!("duplicate scene_id '{}'", r.scene_id)));
        }
        records.push(r);
    }
    Ok(Dataset {
        root: root.to_path_buf(),
        records,
        grids: Mutex::new(BTreeMap::new()),
    })
}

/// Generator settings stored next to a dataset so later stages can check
/// they were configured for the same data.
pub const MANIFEST: &str = "dataset.json";

pub fn write_manifest(root: &Path, cfg: &DatasetConfig) -> Result<()> {
    let path = root.join(MANIFEST);
    let text = serde_json::to_string_pretty(cfg).expect("dataset config serialises");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// `Ok(false)` when no manifest exists; an error when it differs from `cfg`.
pub fn check_manifest(root: &Path, cfg: &DatasetConfig) -> Result<bool> {
    let path = root.join(MANIFEST);
    if !path.exists() {
        return Ok(false);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let stored: DatasetConfig = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if &stored != cfg {
        return Err(Error::Config(format!(
            "dataset at {} was generated with different settings (seed {} vs {}); rerun `simulate`",
            root.display(),
            stored.seed,
            cfg.seed
        )));
    }
    Ok(true)
}
