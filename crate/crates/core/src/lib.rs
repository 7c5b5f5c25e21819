//! Factorial models that are linear in the mean and linear in the
//! covariance.
//!
//! A design is a set of units carrying factors and covariates. The mean model
//! is a span of indicator and covariate columns; the covariance is
//! `Σ σ²_k G_k` over block relations `E(A) = X_A X_Aᵀ` and kernels on
//! covariates. Variance components are fitted by REML on residual contrasts,
//! fixed effects by GLS, and predictions are conditional means.

pub mod covariance;
pub mod design;
pub mod error;
pub mod estimate;
pub mod formula;
pub mod identify;
pub mod linalg;
pub mod predict;
pub mod spectral;

pub use covariance::{
    conditional_pd_check, generator_matrix, kernel_matrix, span_equal, CovarianceModel,
    CovarianceTerm, KernelKind,
};
pub use design::{
    cross, deletion_closure_check, forget, indicator, is_ring, mean_model_matrix, BlockRelation,
    Design, FactorExpr, IndicatorMatrix, MeanColumn, MeanModel, MeanTerm, TreatmentFactor,
};
pub use error::{Error, Result};
pub use estimate::{fit_reml, gls, reml_loglik, reml_score_info, FitConfig, FitResult, GlsResult};
pub use formula::{parse_cov, parse_mean, CovFormulaAst, FormulaError, MeanFormulaAst};
pub use identify::{identifiability_report, IdentifiabilityReport, TermReport, TermStatus};
pub use predict::{
    centered_effects, EffectPrediction, FittedModel, LevelSpec, LinearDiagnostic, NewUnit,
    Prediction, SplineDiagnostic, NEW_LEVEL,
};
pub use spectral::{
    periodogram_anova, periodogram_anova_with, yates_transform, Divisor, SpectralMethod,
    SpectralTable, YatesResult,
};
