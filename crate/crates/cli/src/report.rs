//! The versioned run report. Layout is documented in `docs/report-schema.md`.

use neoclassical::predict::{EffectPrediction, LinearDiagnostic, Prediction, SplineDiagnostic};
use neoclassical::{FitResult, IdentifiabilityReport, SpectralTable, YatesResult};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: &str = "neoanova-report/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: String,
    pub command: String,
    pub data: DataSummary,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelEcho>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identifiability: Option<IdentifiabilityReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitResult>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub predictions: Vec<PredictionRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub contrasts: Vec<ContrastRecord>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub effects: Vec<EffectsRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spectrum: Option<SpectralTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub yates: Option<YatesResult>,
    pub warnings: Vec<Warning>,
}

impl RunReport {
    pub fn new(command: &str, data: DataSummary) -> Self {
        Self {
            schema_version: SCHEMA_VERSION.to_string(),
            command: command.to_string(),
            data,
            model: None,
            identifiability: None,
            fit: None,
            predictions: Vec::new(),
            contrasts: Vec::new(),
            effects: Vec::new(),
            diagnostics: None,
            spectrum: None,
            yates: None,
            warnings: Vec::new(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report is serializable");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> serde_json::Result<Self> {
        serde_json::from_str(text)
    }

    pub fn warn(&mut self, code: &str, message: impl Into<String>) {
        self.warnings.push(Warning {
            code: code.to_string(),
            message: message.into(),
        });
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSummary {
    pub n_units: usize,
    pub response: String,
    pub factors: Vec<FactorSummary>,
    pub covariates: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub name: String,
    pub levels: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelEcho {
    pub mean: String,
    pub cov: String,
    pub mean_columns: Vec<String>,
    pub mean_rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub unit: String,
    #[serde(flatten)]
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContrastRecord {
    pub unit_a: String,
    pub unit_b: String,
    #[serde(flatten)]
    pub prediction: Prediction,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsRecord {
    pub term: String,
    /// Effects are measured against a unit at a NEW level of the term.
    pub effects: Vec<EffectPrediction>,
    /// The same effects with their mean subtracted.
    pub centered: Vec<EffectPrediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub covariate: String,
    pub start: f64,
    pub stop: f64,
    pub step: f64,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub grid: GridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spline: Option<SplineDiagnostic>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub piecewise_linear: Option<LinearDiagnostic>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Warning {
    pub code: String,
    pub message: String,
}
