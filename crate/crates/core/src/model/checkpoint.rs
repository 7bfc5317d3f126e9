//! JSON checkpoints: format version, model config, and every parameter as
//! path → shape + flat values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    config: ModelConfig,
    params: BTreeMap<String, Entry>,
}

impl Model {
    pub fn to_json(&self) -> Result<String> {
        let params = self
            .store()
            .iter()
            .map(|(name, t)| {
                (
                    name.to_string(),
                    Entry {
                        shape: t.shape().to_vec(),
                        values: t.data().to_vec(),
                    },
                )
            })
            .collect();
        let ck = Checkpoint {
            format_version: FORMAT_VERSION,
            config: self.config().clone(),
            params,
        };
        Ok(serde_json::to_string_pretty(&ck)?)
    }

    pub fn from_json(text: &str) -> Result<Model> {
        let mut ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        let mut model = Model::new(ck.config, 0)?;
        let ids: Vec<_> = model.store().ids().collect();
        for id in ids {
            let name = model.store().name(id).to_string();
            let entry = ck
                .params
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            let t = Tensor::new(entry.shape, entry.values)
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
            model
                .store_mut()
                .set(id, t)
                .map_err(|e| Error::Checkpoint(format!("parameter `{name}`: {e}")))?;
        }
        if let Some(extra) = ck.params.keys().next() {
            return Err(Error::Checkpoint(format!("unknown parameter `{extra}`")));
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Model> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Model::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Model {
        Model::new(
            ModelConfig {
                heads: 1,
                d_k: 4,
                ffn: 8,
                vocab: 5,
                input_dim: 3,
                ..Default::default()
            },
            7,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let m = tiny();
        let back = Model::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back.config(), m.config());
        for ((na, a), (nb, b)) in m.store().iter().zip(back.store().iter()) {
            assert_eq!(na, nb);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn version_and_shape_are_checked() {
        let m = tiny();
        let mut v: serde_json::Value = serde_json::from_str(&m.to_json().unwrap()).unwrap();
        v["format_version"] = 99.into();
        assert!(matches!(Model::from_json(&v.to_string()), Err(Error::Checkpoint(_))));
        v["format_version"] = FORMAT_VERSION.into();
        v["params"]["out.b"]["shape"] = serde_json::json!([1, 4]);
        assert!(matches!(Model::from_json(&v.to_string()), Err(Error::Checkpoint(_))));
    }
}
