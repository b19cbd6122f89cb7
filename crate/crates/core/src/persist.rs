//! Model persistence: one JSON document holding the fitted model, the
//! feature schema and the stored training samples needed to evaluate
//! kernel rows at prediction time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Schema};
use crate::error::{Error, Result};
use crate::kernels::Evaluator;
use crate::pgpda::FittedModel;

pub const FORMAT_VERSION: u32 = 1;

/// Training samples as used in fitting (after any scaling), stored so
/// analytic kernels can evaluate fresh rows after a reload.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingStore {
    pub n: usize,
    pub numeric: Vec<Vec<f64>>,
    pub categorical: Vec<Vec<u16>>,
    /// Basis coefficients of training curves for functional kernels.
    pub coeffs: Option<Vec<Vec<f64>>>,
}

impl TrainingStore {
    pub fn from_dataset(data: &Dataset, coeffs: Option<Vec<Vec<f64>>>) -> Self {
        TrainingStore {
            n: data.n(),
            numeric: data.numeric.clone(),
            categorical: data.categorical.clone(),
            coeffs,
        }
    }
}

/// The on-disk model format.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelDocument {
    pub format_version: u32,
    pub model: FittedModel,
    pub class_names: Vec<String>,
    pub schema: Schema,
    pub training: TrainingStore,
    pub sample_ids: Vec<String>,
}

impl ModelDocument {
    pub fn new(
        model: FittedModel,
        class_names: Vec<String>,
        schema: Schema,
        training: TrainingStore,
        sample_ids: Vec<String>,
    ) -> Self {
        ModelDocument {
            format_version: FORMAT_VERSION,
            model,
            class_names,
            schema,
            training,
            sample_ids,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument = serde_json::from_str(text)?;
        if doc.format_version != FORMAT_VERSION {
            return Err(Error::Input(format!(
                "unsupported model format version {} (expected {})",
                doc.format_version, FORMAT_VERSION
            )));
        }
        if doc.class_names.len() != doc.model.k() {
            return Err(Error::Input(
                "model document is inconsistent: class name count differs from the model".into(),
            ));
        }
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::data_write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        ModelDocument::from_json(&text)
    }

    /// Kernel-row evaluator over the stored training samples. Fails for
    /// transductive kernels (precomputed, graph), whose rows must be
    /// supplied by the caller.
    pub fn evaluator(&self) -> Result<Evaluator> {
        Evaluator::new(
            self.model.kernel.clone(),
            self.training.numeric.clone(),
            self.training.categorical.clone(),
            self.training.coeffs.clone(),
        )
    }
}
