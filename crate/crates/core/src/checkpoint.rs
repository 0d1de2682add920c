//! Checkpoint directories.
//!
//! ```text
//! <dir>/manifest.json          version, stage, step, hashes, tensor list
//! <dir>/vlm/<name>.f64         one raw little-endian f64 file per tensor
//! <dir>/proj/<name>.f64
//! <dir>/optim/{m,v}/<name>.f64 optimizer moments (optional)
//! ```
//!
//! Tensor files are named after the parameter with its namespace prefix
//! stripped, e.g. `vlm.l0.wq` lives at `vlm/l0.wq.f64`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use think3d_autograd::{AdamW, ParamStore, Tensor};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const NAMESPACES: [&str; 2] = ["vlm", "proj"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub stage: String,
    pub step: u64,
    /// Hash of the full run config that produced this checkpoint.
    pub config_hash: String,
    /// Hash of the architecture sections only; later stages check this one.
    pub model_hash: String,
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerState>,
    /// Score used for best-checkpoint retention (higher is better).
    pub score: Option<f64>,
}

fn tensor_path(dir: &Path, sub: &str, name: &str) -> Result<PathBuf> {
    let (ns, rest) = name.split_once('.').ok_or_else(|| Error::Format {
        path: dir.to_path_buf(),
        reason: format!("parameter {name:?} has no namespace"),
    })?;
    if !NAMESPACES.contains(&ns) {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: format!("unknown namespace {ns:?}"),
        });
    }
    let mut p = dir.to_path_buf();
    if !sub.is_empty() {
        p.push(sub);
    }
    p.push(ns);
    p.push(format!("{rest}.f64"));
    Ok(p)
}

fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut bytes = Vec::with_capacity(t.data.len() * 8);
    for v in &t.data {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_tensor(path: &Path, rows: usize, cols: usize) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != rows * cols * 8 {
        return Err(Error::Format {
            path: path.to_path_buf(),
            reason: format!("{} bytes for a {rows}x{cols} tensor", bytes.len()),
        });
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Tensor::from_vec(rows, cols, data))
}

pub struct Checkpoint {
    pub manifest: CheckpointManifest,
    pub params: ParamStore,
    pub optimizer: Option<AdamW>,
}

/// Writes a checkpoint, replacing any previous content of `dir`.
pub fn save_checkpoint(
    dir: &Path,
    params: &ParamStore,
    optimizer: Option<&AdamW>,
    mut manifest: CheckpointManifest,
) -> Result<()> {
    let tmp = dir.with_extension("tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    manifest.version = CHECKPOINT_VERSION;
    manifest.tensors = params
        .iter()
        .map(|(_, name, t)| TensorEntry {
            name: name.to_string(),
            rows: t.rows,
            cols: t.cols,
        })
        .collect();
    for (id, name, t) in params.iter() {
        write_tensor(&tensor_path(&tmp, "", name)?, t)?;
        if let Some(opt) = optimizer {
            write_tensor(&tensor_path(&tmp, "optim/m", name)?, &opt.first_moment[id.0])?;
            write_tensor(&tensor_path(&tmp, "optim/v", name)?, &opt.second_moment[id.0])?;
        }
    }
    manifest.optimizer = optimizer.map(|o| OptimizerState {
        step: o.step,
        beta1: o.beta1,
        beta2: o.beta2,
        eps: o.eps,
        weight_decay: o.weight_decay,
    });
    let mpath = tmp.join("manifest.json");
    fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: CheckpointManifest = serde_json::from_str(&text)?;
    if m.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: mpath,
            reason: format!("checkpoint version {} (expected {CHECKPOINT_VERSION})", m.version),
        });
    }
    Ok(m)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(dir)?;
    let mut params = ParamStore::new();
    for e in &manifest.tensors {
        params.insert(e.name.clone(), read_tensor(&tensor_path(dir, "", &e.name)?, e.rows, e.cols)?);
    }
    let optimizer = match &manifest.optimizer {
        None => None,
        Some(o) => {
            let mut opt = AdamW::new(&params, o.weight_decay);
            opt.step = o.step;
            opt.beta1 = o.beta1;
            opt.beta2 = o.beta2;
            opt.eps = o.eps;
            for (i, e) in manifest.tensors.iter().enumerate() {
                opt.first_moment[i] = read_tensor(&tensor_path(dir, "optim/m", &e.name)?, e.rows, e.cols)?;
                opt.second_moment[i] = read_tensor(&tensor_path(dir, "optim/v", &e.name)?, e.rows, e.cols)?;
            }
            Some(opt)
        }
    };
    Ok(Checkpoint {
        manifest,
        params,
        optimizer,
    })
}

/// Fails with `MissingComponent` unless the checkpoint has parameters under
/// `namespace` (e.g. `"proj"`).
pub fn require_component(dir: &Path, manifest: &CheckpointManifest, namespace: &str) -> Result<()> {
    let prefix = format!("{namespace}.");
    if manifest.tensors.iter().any(|t| t.name.starts_with(&prefix)) {
        Ok(())
    } else {
        Err(Error::MissingComponent {
            path: dir.to_path_buf(),
            component: namespace.to_string(),
        })
    }
}

/// SHA-256 over names, shapes and bit patterns of the parameters whose name
/// starts with `prefix`, as hex.
pub fn params_hash(params: &ParamStore, prefix: &str) -> String {
    let mut h = Sha256::new();
    for (_, name, t) in params.iter().filter(|(_, n, _)| n.starts_with(prefix)) {
        h.update(name.as_bytes());
        h.update((t.rows as u64).to_le_bytes());
        h.update((t.cols as u64).to_le_bytes());
        for v in &t.data {
            h.update(v.to_bits().to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Keeps `latest/` and `best/` under a run directory.
#[derive(Debug, Clone)]
pub struct Retention {
    pub root: PathBuf,
}

impl Retention {
    pub fn latest(&self) -> PathBuf {
        self.root.join("latest")
    }

    pub fn best(&self) -> PathBuf {
        self.root.join("best")
    }

    /// Saves `latest`, and also `best` when `manifest.score` beats the
    /// current best (or none exists).
    pub fn save(&self, params: &ParamStore, optimizer: Option<&AdamW>, manifest: CheckpointManifest) -> Result<bool> {
        save_checkpoint(&self.latest(), params, optimizer, manifest.clone())?;
        let improved = match (manifest.score, read_manifest(&self.best()).ok().and_then(|m| m.score)) {
            (Some(new), Some(old)) => new > old,
            (Some(_), None) => true,
            (None, _) => !self.best().exists(),
        };
        if improved {
            save_checkpoint(&self.best(), params, None, manifest)?;
        }
        Ok(improved)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> CheckpointManifest {
        CheckpointManifest {
            version: 0,
            stage: "sft".into(),
            step: 3,
            config_hash: "abc".into(),
            model_hash: "def".into(),
            tensors: vec![],
            optimizer: None,
            score: Some(1.0),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.insert("vlm.a", Tensor::from_vec(1, 3, vec![0.1, -0.0, f64::MIN_POSITIVE]));
        store.insert("proj.in.w", Tensor::from_vec(2, 1, vec![1e300, -7.25]));
        let mut opt = AdamW::new(&store, 0.01);
        opt.step = 5;
        opt.first_moment[0].data[1] = 0.5;
        let path = dir.path().join("ck");
        save_checkpoint(&path, &store, Some(&opt), manifest()).unwrap();
        let ck = load_checkpoint(&path).unwrap();
        assert_eq!(params_hash(&ck.params, ""), params_hash(&store, ""));
        assert_eq!(ck.optimizer.unwrap(), opt);
        assert_eq!(ck.manifest.step, 3);
        assert!(path.join("proj/in.w.f64").exists());
    }

    #[test]
    fn missing_projector_is_reported() {
        let m = CheckpointManifest {
            tensors: vec![TensorEntry {
                name: "vlm.x".into(),
                rows: 1,
                cols: 1,
            }],
            ..manifest()
        };
        assert!(matches!(
            require_component(Path::new("ck"), &m, "proj"),
            Err(Error::MissingComponent { .. })
        ));
    }

    #[test]
    fn retention_tracks_best_score() {
        let dir = tempfile::tempdir().unwrap();
        let r = Retention {
            root: dir.path().to_path_buf(),
        };
        let mut store = ParamStore::new();
        store.insert("vlm.a", Tensor::scalar(1.0));
        assert!(r.save(&store, None, CheckpointManifest { score: Some(1.0), ..manifest() }).unwrap());
        assert!(!r.save(&store, None, CheckpointManifest { score: Some(0.5), step: 4, ..manifest() }).unwrap());
        assert_eq!(read_manifest(&r.best()).unwrap().step, 3);
        assert_eq!(read_manifest(&r.latest()).unwrap().step, 4);
    }
}
