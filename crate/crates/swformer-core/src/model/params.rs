//! Named parameter storage and deterministic initialization.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::DenseTensor;

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: DenseTensor,
    /// Running BN statistics are stored here too but skipped by the
    /// optimizer.
    pub trainable: bool,
    /// Weight decay is skipped for norms and biases.
    pub decay: bool,
}

/// Ordered, named parameter set. Iteration order is creation order, which
/// fixes both optimizer update order and checkpoint layout.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, value: DenseTensor, trainable: bool, decay: bool) -> usize {
        assert!(
            !self.index.contains_key(name),
            "duplicate parameter {name}"
        );
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            trainable,
            decay,
        });
        self.index.insert(name.to_string(), self.entries.len() - 1);
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry {
        &self.entries[idx]
    }

    pub fn entry_mut(&mut self, idx: usize) -> &mut ParamEntry {
        &mut self.entries[idx]
    }

    pub fn lookup(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Result<&DenseTensor> {
        self.lookup(name)
            .map(|i| &self.entries[i].value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    /// Total scalar count over trainable entries.
    pub fn trainable_scalars(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Total scalar count over trainable entries whose name starts with
    /// the prefix.
    pub fn trainable_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable && e.name.starts_with(prefix))
            .map(|e| e.value.len())
            .sum()
    }

    /// Writes a checkpoint: `manifest.json` with config and the parameter
    /// index, plus one tensor container per entry under `tensors/`.
    pub fn save(&self, dir: &Path, config_json: &serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir.join("tensors"))?;
        let mut index = Vec::new();
        for (i, e) in self.entries.iter().enumerate() {
            let file = format!("tensors/{i:04}.swt");
            crate::io::write_dense(dir.join(&file), &e.value)?;
            index.push(serde_json::json!({
                "name": e.name,
                "file": file,
                "shape": e.value.shape(),
                "trainable": e.trainable,
                "decay": e.decay,
            }));
        }
        let manifest = serde_json::json!({
            "config": config_json,
            "params": index,
        });
        let bytes = serde_json::to_vec_pretty(&manifest)?;
        std::fs::write(dir.join("manifest.json"), bytes)?;
        Ok(())
    }

    /// Loads a checkpoint written by [`ParamSet::save`]. Returns the set
    /// and the stored config JSON.
    pub fn load(dir: &Path) -> Result<(ParamSet, serde_json::Value)> {
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
        let params = manifest
            .get("params")
            .and_then(|p| p.as_array())
            .ok_or_else(|| Error::Format {
                path: dir.join("manifest.json").display().to_string(),
                offset: 0,
                detail: "missing params array".into(),
            })?;
        let mut set = ParamSet::new();
        for p in params {
            let name = p["name"].as_str().ok_or_else(|| Error::Config("bad manifest entry".into()))?;
            let file = p["file"].as_str().ok_or_else(|| Error::Config("bad manifest entry".into()))?;
            let trainable = p["trainable"].as_bool().unwrap_or(true);
            let decay = p["decay"].as_bool().unwrap_or(false);
            let value = crate::io::read_dense(dir.join(file))?;
            set.push(name, value, trainable, decay);
        }
        let config = manifest.get("config").cloned().unwrap_or(serde_json::Value::Null);
        Ok((set, config))
    }
}

/// Deterministic initializer shared by all layers.
pub(crate) struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Kaiming-style normal with std `sqrt(2 / fan_in)`.
    pub fn conv(&mut self, shape: &[usize]) -> DenseTensor {
        let fan_in: usize = shape[1..].iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        self.normal(shape, std)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> DenseTensor {
        let dist = Normal::new(0.0, std).expect("normal std");
        DenseTensor::from_fn(shape, |_| dist.sample(&mut self.rng))
    }
}
