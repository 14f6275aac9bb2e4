use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::{Matrix, NeuralError, Params};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// Named parameter tensors for one model plus its structural configuration.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Section {
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, Matrix>,
}

/// Self-describing JSON container holding several model sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub sections: BTreeMap<String, Section>,
}

impl Default for Checkpoint {
    fn default() -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            sections: BTreeMap::new(),
        }
    }
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self, NeuralError> {
        let text = fs::read_to_string(path)
            .map_err(|e| NeuralError::Checkpoint(format!("{}: {e}", path.display())))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| NeuralError::Checkpoint(format!("{}: {e}", path.display())))?;
        if ckpt.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(NeuralError::Checkpoint(format!(
                "unsupported checkpoint version {}",
                ckpt.format_version
            )));
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), NeuralError> {
        if let Some(dir) = path.parent() {
            if !dir.as_os_str().is_empty() {
                fs::create_dir_all(dir).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
            }
        }
        let text = serde_json::to_string(self).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        fs::write(path, text).map_err(|e| NeuralError::Checkpoint(format!("{}: {e}", path.display())))
    }

    pub fn has(&self, name: &str) -> bool {
        self.sections.contains_key(name)
    }

    pub fn section(&self, name: &str) -> Result<&Section, NeuralError> {
        self.sections
            .get(name)
            .ok_or_else(|| NeuralError::Checkpoint(format!("missing section `{name}`")))
    }

    /// Stores a model's parameters and config under `name`.
    pub fn put<P: Params, C: Serialize>(&mut self, name: &str, config: &C, params: &P) -> Result<(), NeuralError> {
        let mut tensors = BTreeMap::new();
        params.visit("", &mut |n, m| {
            tensors.insert(n.to_string(), m.clone());
        });
        let config = serde_json::to_value(config).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        self.sections.insert(name.to_string(), Section { config, tensors });
        Ok(())
    }

    /// Stores a serializable value (optimizer state, vocabulary, ...) without tensors.
    pub fn put_value<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), NeuralError> {
        let config = serde_json::to_value(value).map_err(|e| NeuralError::Checkpoint(e.to_string()))?;
        self.sections.insert(
            name.to_string(),
            Section {
                config,
                tensors: BTreeMap::new(),
            },
        );
        Ok(())
    }

    pub fn config<C: DeserializeOwned>(&self, name: &str) -> Result<C, NeuralError> {
        let sec = self.section(name)?;
        serde_json::from_value(sec.config.clone()).map_err(|e| NeuralError::Checkpoint(format!("{name}: {e}")))
    }

    /// Copies stored tensors into an already-shaped model; every tensor must be
    /// present with a matching shape.
    pub fn fill<P: Params>(&self, name: &str, params: &mut P) -> Result<(), NeuralError> {
        let sec = self.section(name)?;
        let mut err = None;
        let mut seen = 0;
        params.visit_mut("", &mut |n, m| {
            if err.is_some() {
                return;
            }
            match sec.tensors.get(n) {
                Some(t) if t.same_shape(m) => {
                    m.as_mut_slice().copy_from_slice(t.as_slice());
                    seen += 1;
                }
                Some(t) => {
                    err = Some(NeuralError::Checkpoint(format!(
                        "{name}.{n}: stored {}x{}, expected {}x{}",
                        t.rows(),
                        t.cols(),
                        m.rows(),
                        m.cols()
                    )))
                }
                None => err = Some(NeuralError::Checkpoint(format!("{name}: missing tensor `{n}`"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if seen != sec.tensors.len() {
            return Err(NeuralError::Checkpoint(format!("{name}: unexpected extra tensors")));
        }
        Ok(())
    }
}
