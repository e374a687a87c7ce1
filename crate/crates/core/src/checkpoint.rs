//! Versioned JSON checkpoint: config snapshot, named parameter arrays and
//! fold metrics.
//!
//! ```json
//! { "format": "murrenet-checkpoint", "version": "1.0",
//!   "config": { ...TrainConfig... }, "d_in_p": 16, "d_in_g": 8,
//!   "bin_edges": [..], "params": [{"name", "rows", "cols", "data"}],
//!   "metrics": { "fold", "c_index", "epochs" } }
//! ```
//!
//! Readers accept any `1.x` version. Minor versions may add fields.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossBreakdown;
use crate::model::{build_ablation, Model};
use crate::tensor::Mat;
use crate::training::TrainConfig;

pub const FORMAT: &str = "murrenet-checkpoint";
pub const VERSION: &str = "1.0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: Option<usize>,
    pub c_index: Option<f64>,
    #[serde(default)]
    pub epochs: Vec<LossBreakdown>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: String,
    pub config: TrainConfig,
    pub d_in_p: usize,
    pub d_in_g: usize,
    pub bin_edges: Vec<f64>,
    pub params: Vec<NamedArray>,
    pub metrics: FoldMetrics,
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: &TrainConfig, bin_edges: &[f64], metrics: FoldMetrics) -> Self {
        let params = model
            .store
            .iter()
            .map(|(_, name, m)| NamedArray {
                name: name.to_string(),
                rows: m.rows(),
                cols: m.cols(),
                data: m.as_slice().to_vec(),
            })
            .collect();
        let mut config = config.clone();
        config.model = model.config.clone();
        config.ablation = model.ablation;
        Self {
            format: FORMAT.into(),
            version: VERSION.into(),
            config,
            d_in_p: model.d_in_p,
            d_in_g: model.d_in_g,
            bin_edges: bin_edges.to_vec(),
            params,
            metrics,
        }
    }

    /// Rebuilds the model and loads every named array; missing, extra or
    /// mis-shaped arrays are errors.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = build_ablation(&self.config.model, self.config.ablation, self.d_in_p, self.d_in_g, 0)?;
        if self.params.len() != model.store.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameter arrays, model expects {}",
                self.params.len(),
                model.store.len()
            )));
        }
        for a in &self.params {
            let id = model
                .store
                .find(&a.name)
                .ok_or_else(|| Error::Data(format!("checkpoint array '{}' is not a model parameter", a.name)))?;
            if model.store.get(id).shape() != (a.rows, a.cols) || a.data.len() != a.rows * a.cols {
                return Err(Error::shape("checkpoint array", format!("{:?}", model.store.get(id).shape()), format!("{}: {}x{}", a.name, a.rows, a.cols)));
            }
            model.store.set(id, Mat::from_vec(a.rows, a.cols, a.data.clone()));
        }
        Ok(model)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Head {
            format: String,
            version: String,
        }
        let head: Head = serde_json::from_str(text).map_err(|e| Error::Data(format!("checkpoint: {e}")))?;
        if head.format != FORMAT {
            return Err(Error::Data(format!("not a checkpoint (format '{}')", head.format)));
        }
        if head.version.split('.').next() != Some("1") {
            return Err(Error::Data(format!("unsupported checkpoint version {}", head.version)));
        }
        serde_json::from_str(text).map_err(|e| Error::Data(format!("checkpoint: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_json(&text)
    }
}
