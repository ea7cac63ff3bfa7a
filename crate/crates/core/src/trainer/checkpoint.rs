use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{TrainConfig, Trainer, TrainerState};
use crate::data::Dataset;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized trainer: format version, the dataset it was trained on, the
/// resolved config and the complete state (parameters carry their shapes).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub dataset_hash: String,
    pub config: TrainConfig,
    pub state: TrainerState,
}

fn field<T: DeserializeOwned>(obj: &serde_json::Map<String, Value>, name: &str) -> Result<T> {
    let v = obj.get(name).ok_or_else(|| Error::Checkpoint {
        field: name.to_string(),
        reason: "missing".into(),
    })?;
    T::deserialize(v).map_err(|e| Error::Checkpoint {
        field: name.to_string(),
        reason: e.to_string(),
    })
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Checkpoint {
            field: "<root>".into(),
            reason: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::Checkpoint {
            field: "<root>".into(),
            reason: "expected a JSON object".into(),
        })?;
        let version: u32 = field(obj, "version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint {
                field: "version".into(),
                reason: format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
            });
        }
        let dataset_hash = field(obj, "dataset_hash")?;
        let config = field(obj, "config")?;
        let state_obj = obj
            .get("state")
            .and_then(Value::as_object)
            .ok_or_else(|| Error::Checkpoint {
                field: "state".into(),
                reason: "missing or not an object".into(),
            })?;
        let state = TrainerState {
            model: field(state_obj, "model").map_err(prefix("state"))?,
            adam: field(state_obj, "adam").map_err(prefix("state"))?,
            moving: field(state_obj, "moving").map_err(prefix("state"))?,
            stats: field(state_obj, "stats").map_err(prefix("state"))?,
            corrected: field(state_obj, "corrected").map_err(prefix("state"))?,
            records: field(state_obj, "records").map_err(prefix("state"))?,
            epoch: field(state_obj, "epoch").map_err(prefix("state"))?,
            step: field(state_obj, "step").map_err(prefix("state"))?,
            rng: field(state_obj, "rng").map_err(prefix("state"))?,
            history: field(state_obj, "history").map_err(prefix("state"))?,
        };
        Ok(Checkpoint {
            version,
            dataset_hash,
            config,
            state,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

fn prefix(outer: &'static str) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Checkpoint { field, reason } => Error::Checkpoint {
            field: format!("{outer}.{field}"),
            reason,
        },
        other => other,
    }
}

impl Trainer {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            dataset_hash: self.dataset_hash.clone(),
            config: self.config.clone(),
            state: self.state.clone(),
        }
    }

    /// Rebuild a trainer from a checkpoint and the dataset it was trained on.
    pub fn restore(ckpt: Checkpoint, dataset: &Dataset) -> Result<Self> {
        let bad = |field: &str, reason: String| Error::Checkpoint {
            field: field.to_string(),
            reason,
        };
        let hash = dataset.content_hash();
        if hash != ckpt.dataset_hash {
            return Err(bad(
                "dataset_hash",
                format!("checkpoint was trained on {}, dataset is {hash}", ckpt.dataset_hash),
            ));
        }
        ckpt.config.validate()?;
        let (train, test) = dataset.split(ckpt.config.eval_period);
        let st = &ckpt.state;
        st.model
            .validate_shapes(dataset.feature_dim(), dataset.num_classes())?;
        if !st.adam.matches(&st.model) {
            return Err(bad("state.adam", "moment buffers do not match model shapes".into()));
        }
        if st.moving.e.len() != st.model.balanced.head.feature_dim() {
            return Err(bad("state.moving", "moving vector has the wrong dimension".into()));
        }
        if st.stats.num_classes() != dataset.num_classes() {
            return Err(bad("state.stats", "class count mismatch".into()));
        }
        if st.corrected.len() != train.len()
            || st.corrected.iter().any(|r| r.len() != dataset.num_classes())
        {
            return Err(bad("state.corrected", "does not match the training split".into()));
        }
        Trainer::assemble(ckpt.config, dataset, train, test, ckpt.state)
    }
}
