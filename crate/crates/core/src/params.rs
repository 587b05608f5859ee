//! Named parameter collections and the checkpoint format: a flat
//! little-endian f64 binary (`checkpoint.bin`) plus a JSON manifest
//! (`checkpoint.json`) listing name, shape and byte offset per tensor.
//! Optimizer moments ride along as extra entries so training can resume.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::optim::Adam;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn register(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        debug_assert!(
            !self.entries.iter().any(|(n, _)| *n == name),
            "duplicate parameter {name}"
        );
        self.entries.push((name, t));
    }

    pub fn register_all(&mut self, params: Vec<(String, Tensor)>) {
        for (n, t) in params {
            self.register(n, t);
        }
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }

    /// Overwrite stored tensors from a loaded checkpoint, matching by name.
    pub fn load_values(&self, ckpt: &Checkpoint) -> Result<()> {
        for (name, t) in &self.entries {
            let found = ckpt
                .params
                .iter()
                .find(|(n, _, _)| n == name)
                .ok_or_else(|| {
                    Error::Format {
                        path: "checkpoint".into(),
                        msg: format!("missing parameter `{name}`"),
                    }
                })?;
            if found.1 != t.shape() {
                return Err(Error::Format {
                    path: "checkpoint".into(),
                    msg: format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        found.1,
                        t.shape()
                    ),
                });
            }
            t.set_data(&found.2)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainMeta {
    pub epoch: usize,
    pub lr: f64,
    pub plateau_best: f64,
    pub plateau_bad_epochs: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into `checkpoint.bin`.
    offset: u64,
    kind: String, // "param" | "adam_m" | "adam_v"
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    tensors: Vec<ManifestEntry>,
    adam_steps: Option<u64>,
    training: Option<TrainMeta>,
}

const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "checkpoint.json";
pub const BINARY_FILE: &str = "checkpoint.bin";

#[derive(Debug)]
pub struct Checkpoint {
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
    /// (step count, first moments, second moments), aligned with `params`.
    pub adam: Option<(u64, Vec<Vec<f64>>, Vec<Vec<f64>>)>,
    pub training: Option<TrainMeta>,
}

pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    adam: Option<&Adam>,
    training: Option<&TrainMeta>,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let push = |name: String, shape: Vec<usize>, data: &[f64], kind: &str, blob: &mut Vec<u8>,
                    entries: &mut Vec<ManifestEntry>| {
        entries.push(ManifestEntry {
            name,
            shape,
            offset: blob.len() as u64,
            kind: kind.to_string(),
        });
        for v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (name, t) in store.entries() {
        push(
            name.clone(),
            t.shape().to_vec(),
            &t.to_vec(),
            "param",
            &mut blob,
            &mut entries,
        );
    }
    let mut adam_steps = None;
    if let Some(opt) = adam {
        let (t, m, v) = opt.state();
        adam_steps = Some(t);
        if !m.is_empty() {
            if m.len() != store.len() {
                return Err(Error::invalid(
                    "save_checkpoint",
                    "optimizer state does not match the parameter list",
                ));
            }
            for ((name, p), mi) in store.entries().iter().zip(m) {
                push(
                    format!("adam_m:{name}"),
                    p.shape().to_vec(),
                    mi,
                    "adam_m",
                    &mut blob,
                    &mut entries,
                );
            }
            for ((name, p), vi) in store.entries().iter().zip(v) {
                push(
                    format!("adam_v:{name}"),
                    p.shape().to_vec(),
                    vi,
                    "adam_v",
                    &mut blob,
                    &mut entries,
                );
            }
        }
    }
    let manifest = Manifest {
        version: CHECKPOINT_VERSION,
        tensors: entries,
        adam_steps,
        training: training.cloned(),
    };
    let mpath = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format {
        path: mpath.display().to_string(),
        msg: e.to_string(),
    })?;
    fs::write(&mpath, json).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let bpath = dir.join(BINARY_FILE);
    fs::write(&bpath, blob).map_err(|e| Error::io(bpath.display().to_string(), e))?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(mpath.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        path: mpath.display().to_string(),
        msg: e.to_string(),
    })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Format {
            path: mpath.display().to_string(),
            msg: format!("unsupported checkpoint version {}", manifest.version),
        });
    }
    let bpath = dir.join(BINARY_FILE);
    let blob = fs::read(&bpath).map_err(|e| Error::io(bpath.display().to_string(), e))?;

    let read_entry = |e: &ManifestEntry| -> Result<Vec<f64>> {
        let count: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + count * 8;
        if end > blob.len() {
            return Err(Error::Format {
                path: bpath.display().to_string(),
                msg: format!(
                    "tensor `{}` needs bytes {start}..{end} but the file has {}",
                    e.name,
                    blob.len()
                ),
            });
        }
        Ok(blob[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    };

    let mut params = Vec::new();
    let mut adam_m = Vec::new();
    let mut adam_v = Vec::new();
    for e in &manifest.tensors {
        let data = read_entry(e)?;
        match e.kind.as_str() {
            "param" => params.push((e.name.clone(), e.shape.clone(), data)),
            "adam_m" => adam_m.push(data),
            "adam_v" => adam_v.push(data),
            other => {
                return Err(Error::Format {
                    path: mpath.display().to_string(),
                    msg: format!("unknown tensor kind `{other}`"),
                })
            }
        }
    }
    let adam = match manifest.adam_steps {
        Some(t) if !adam_m.is_empty() => Some((t, adam_m, adam_v)),
        Some(t) => Some((t, Vec::new(), Vec::new())),
        None => None,
    };
    Ok(Checkpoint {
        params,
        adam,
        training: manifest.training,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_with_adam_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.register("a", Tensor::param(vec![1.0, 2.0, 3.0], &[3]).unwrap());
        store.register("b", Tensor::param(vec![4.0; 4], &[2, 2]).unwrap());
        let mut adam = Adam::new(1e-3).unwrap();
        for (_, t) in store.entries() {
            t.accumulate_grad(|g| g.iter_mut().for_each(|v| *v = 0.5));
        }
        adam.step(&store.tensors()).unwrap();
        let meta = TrainMeta {
            epoch: 3,
            lr: 5e-4,
            plateau_best: 0.12,
            plateau_bad_epochs: 1,
        };
        save_checkpoint(dir.path(), &store, Some(&adam), Some(&meta)).unwrap();

        let ckpt = load_checkpoint(dir.path()).unwrap();
        assert_eq!(ckpt.params.len(), 2);
        assert_eq!(ckpt.training.as_ref().unwrap(), &meta);
        let (t, m, v) = ckpt.adam.as_ref().unwrap();
        assert_eq!(*t, 1);
        assert_eq!(m.len(), 2);
        assert_eq!(v.len(), 2);

        // Fresh store loads the same values.
        let mut store2 = ParamStore::new();
        store2.register("a", Tensor::param(vec![0.0; 3], &[3]).unwrap());
        store2.register("b", Tensor::param(vec![0.0; 4], &[2, 2]).unwrap());
        store2.load_values(&ckpt).unwrap();
        for ((_, x), (_, y)) in store.entries().iter().zip(store2.entries()) {
            assert_eq!(x.to_vec(), y.to_vec());
        }
    }

    #[test]
    fn missing_and_mismatched_parameters_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.register("x", Tensor::param(vec![1.0], &[1]).unwrap());
        save_checkpoint(dir.path(), &store, None, None).unwrap();
        let ckpt = load_checkpoint(dir.path()).unwrap();

        let mut other = ParamStore::new();
        other.register("y", Tensor::param(vec![1.0], &[1]).unwrap());
        assert!(other.load_values(&ckpt).is_err());

        let mut wrong_shape = ParamStore::new();
        wrong_shape.register("x", Tensor::param(vec![1.0, 2.0], &[2]).unwrap());
        assert!(wrong_shape.load_values(&ckpt).is_err());
    }

    #[test]
    fn truncated_binary_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        store.register("x", Tensor::param(vec![1.0; 8], &[8]).unwrap());
        save_checkpoint(dir.path(), &store, None, None).unwrap();
        let bpath = dir.path().join(BINARY_FILE);
        let blob = std::fs::read(&bpath).unwrap();
        std::fs::write(&bpath, &blob[..blob.len() - 8]).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(err.to_string().contains("needs bytes"), "{err}");
    }
}
