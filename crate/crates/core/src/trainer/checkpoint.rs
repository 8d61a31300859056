//! Versioned checkpoints on top of the `IBRT` container: model parameters,
//! the training-time critic, a config snapshot, and the step counter.

use crate::container;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::mi::CriticParams;
use crate::model::{Model, ModelConfig};
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    /// Flat key=value snapshot of the run configuration (informational).
    pub config_text: String,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub step: u64,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(
        model: &Model,
        critic: Option<&CriticParams>,
        step: u64,
        config_text: String,
    ) -> Self {
        let mut tensors: Vec<(String, Tensor)> = model.params.entries().to_vec();
        if let Some(c) = critic {
            tensors.push(("critic.w1".into(), c.w1.clone()));
            tensors.push(("critic.b1".into(), c.b1.clone()));
            tensors.push(("critic.w2".into(), c.w2.clone()));
            tensors.push(("critic.b2".into(), c.b2.clone()));
        }
        Checkpoint {
            meta: CheckpointMeta {
                model: model.config.clone(),
                config_text,
            },
            step,
            tensors,
        }
    }

    pub fn build_model(&self) -> Result<Model> {
        Model::from_named_tensors(self.meta.model.clone(), &self.tensors)
    }

    pub fn critic(&self) -> Option<CriticParams> {
        let find = |name: &str| {
            self.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
        };
        Some(CriticParams {
            w1: find("critic.w1")?,
            b1: find("critic.b1")?,
            w2: find("critic.w2")?,
            b2: find("critic.b2")?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta_json = serde_json::to_string(&self.meta)
            .map_err(|e| Error::Checkpoint(format!("meta serialization failed: {e}")))?;
        let mut records: Vec<(String, Tensor)> = vec![
            container::string_record("meta.config", &meta_json),
            ("meta.step".into(), Tensor::scalar(self.step as f64)),
        ];
        records.extend(self.tensors.iter().cloned());
        container::write_container(path, &records)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let records = container::read_container(path)?;
        let mut meta = None;
        let mut step = None;
        let mut tensors = Vec::new();
        for (name, tensor) in records {
            match name.as_str() {
                "meta.config" => {
                    let text = container::record_string(&tensor)?;
                    meta = Some(serde_json::from_str::<CheckpointMeta>(&text).map_err(|e| {
                        Error::Checkpoint(format!("{}: bad meta.config: {e}", path.display()))
                    })?);
                }
                "meta.step" => step = Some(tensor.data[0] as u64),
                _ => tensors.push((name, tensor)),
            }
        }
        let meta = meta.ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing meta.config record", path.display()))
        })?;
        let step = step.ok_or_else(|| {
            Error::Checkpoint(format!("{}: missing meta.step record", path.display()))
        })?;
        Ok(Checkpoint {
            meta,
            step,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Pooling;
    use tempfile::tempdir;

    fn model() -> Model {
        Model::init(
            ModelConfig {
                dim: 8,
                layers: 1,
                heads: 2,
                vocab_size: 10,
                num_classes: 2,
                max_len: 6,
                pool: Pooling::Cls,
                tagging_head: false,
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn checkpoint_round_trip_rebuilds_identical_model() {
        let m = model();
        let critic = CriticParams::init(16, 8, 1);
        let ckpt = Checkpoint::from_model(&m, Some(&critic), 42, "lr = 0.1".into());
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.step, 42);
        assert_eq!(back.meta.config_text, "lr = 0.1");
        let rebuilt = back.build_model().unwrap();
        assert_eq!(rebuilt, m);
        assert_eq!(back.critic().unwrap().w1.data, critic.w1.data);
    }

    #[test]
    fn missing_model_tensor_surfaces_expected_names() {
        let m = model();
        let mut ckpt = Checkpoint::from_model(&m, None, 0, String::new());
        ckpt.tensors.retain(|(n, _)| n != "enc0.wq");
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let err = back.build_model().unwrap_err().to_string();
        assert!(err.contains("enc0.wq"), "{err}");
    }
}
