use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AutodiffError, Result, Tensor};

/// Value of the `format` header field in parameter files.
pub const PARAM_FORMAT: &str = "budgetnet-params";
/// Current parameter file version.
pub const PARAM_FORMAT_VERSION: u32 = 1;

/// Named parameters, each flagged trainable or frozen.
///
/// The trainable flag is the leaf's `requires_grad`; frozen entries are never
/// visited by `backward` and are skipped by the optimizers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

/// Plain, thread-safe copy of a [`ParamStore`]; also the on-disk layout.
///
/// ```json
/// { "format": "budgetnet-params", "version": 1,
///   "params": [ { "name": "...", "shape": [8, 16], "trainable": true, "data": [...] } ] }
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSnapshot {
    pub format: String,
    pub version: u32,
    pub params: Vec<ParamRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if self.entries.contains_key(name) {
            return Err(AutodiffError::DuplicateParam(name.to_string()));
        }
        let t = Tensor::param(shape, data)?;
        self.entries.insert(name.to_string(), t.clone());
        Ok(t)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn is_trainable(&self, name: &str) -> Result<bool> {
        Ok(self.get(name)?.requires_grad())
    }

    pub fn set_trainable(&self, name: &str, on: bool) -> Result<()> {
        self.get(name)?.set_requires_grad(on);
        Ok(())
    }

    /// Freezes every entry, then unfreezes those whose name starts with one of
    /// `prefixes`.
    pub fn train_only(&self, prefixes: &[&str]) {
        for (name, t) in &self.entries {
            t.set_requires_grad(prefixes.iter().any(|p| name.starts_with(p)));
        }
    }

    pub fn freeze_all(&self) {
        self.entries.values().for_each(|t| t.set_requires_grad(false));
    }

    /// Largest absolute gradient entry over parameters matching `pred`.
    pub fn max_abs_grad(&self, pred: impl Fn(&str) -> bool) -> f64 {
        self.entries
            .iter()
            .filter(|(n, _)| pred(n))
            .flat_map(|(_, t)| t.grad().iter().map(|g| g.abs()).collect::<Vec<_>>())
            .fold(0.0, f64::max)
    }

    /// Overwrites values of every entry present in both stores (shapes must
    /// match). Entries only in `other` are added. Returns the names that
    /// already existed and were overwritten.
    pub fn load_from(&mut self, other: &ParamSnapshot) -> Result<Vec<String>> {
        let mut overridden = Vec::new();
        for rec in &other.params {
            match self.entries.get(&rec.name) {
                Some(t) => {
                    if t.shape() != rec.shape.as_slice() {
                        return Err(AutodiffError::shape("load", t.shape(), &rec.shape));
                    }
                    t.data_mut().copy_from_slice(&rec.data);
                    overridden.push(rec.name.clone());
                }
                None => {
                    let t = Tensor::param(&rec.shape, rec.data.clone())?;
                    t.set_requires_grad(rec.trainable);
                    self.entries.insert(rec.name.clone(), t);
                }
            }
        }
        Ok(overridden)
    }

    pub fn snapshot(&self) -> ParamSnapshot {
        ParamSnapshot {
            format: PARAM_FORMAT.to_string(),
            version: PARAM_FORMAT_VERSION,
            params: self
                .entries
                .iter()
                .map(|(name, t)| ParamRecord {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    trainable: t.requires_grad(),
                    data: t.to_vec(),
                })
                .collect(),
        }
    }

    pub fn from_snapshot(snap: &ParamSnapshot) -> Result<Self> {
        snap.validate()?;
        let mut store = ParamStore::new();
        for rec in &snap.params {
            let t = store.insert(&rec.name, &rec.shape, rec.data.clone())?;
            t.set_requires_grad(rec.trainable);
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.snapshot().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        ParamStore::from_snapshot(&ParamSnapshot::load(path)?)
    }
}

impl ParamSnapshot {
    pub fn validate(&self) -> Result<()> {
        if self.format != PARAM_FORMAT {
            return Err(AutodiffError::Format(format!("unexpected format tag {:?}", self.format)));
        }
        if self.version != PARAM_FORMAT_VERSION {
            return Err(AutodiffError::Format(format!("unsupported version {}", self.version)));
        }
        for rec in &self.params {
            if rec.shape.iter().product::<usize>() != rec.data.len() {
                return Err(AutodiffError::DataLength {
                    shape: rec.shape.clone(),
                    len: rec.data.len(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self).map_err(|e| AutodiffError::Format(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let snap: ParamSnapshot = serde_json::from_str(&text).map_err(|e| AutodiffError::Format(e.to_string()))?;
        snap.validate()?;
        Ok(snap)
    }
}
