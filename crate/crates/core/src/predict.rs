//! Prediction by conditional means.
//!
//! A prediction target is the latent value of a new unit: its fixed part
//! `x*ᵀβ` plus every covariance term except the unit (identity) term. Its
//! conditional mean equals the conditional mean of a new observation, and
//! `se` is the root prediction error of the latent value. All targets go
//! through the bordered system `[V T; Tᵀ 0]`, so generalized covariances
//! are handled without inverting `V` on the whole space.
//!
//! A new unit may carry the level `NEW` for any factor that only enters the
//! covariance. Every `NEW` is a level of its own: it shares no block with the
//! data or with another new unit.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{CovarianceModel, CovarianceTerm, KernelKind};
use crate::design::{mean_model_matrix, Design, FactorExpr, MeanColumn, MeanModel, MeanTerm};
use crate::error::{Error, Result};
use crate::estimate::{
    self, check_trends, BorderedSystem, FitConfig, FitResult, GlsResult, RemlProblem,
};
use crate::linalg;

/// Reserved level token for an unobserved level.
pub const NEW_LEVEL: &str = "NEW";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum LevelSpec {
    Observed(String),
    New,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NewUnit {
    pub levels: BTreeMap<String, LevelSpec>,
    pub covariates: BTreeMap<String, f64>,
}

impl NewUnit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn level(mut self, factor: &str, level: &str) -> Self {
        self.levels
            .insert(factor.to_string(), LevelSpec::Observed(level.to_string()));
        self
    }

    pub fn new_level(mut self, factor: &str) -> Self {
        self.levels.insert(factor.to_string(), LevelSpec::New);
        self
    }

    pub fn covariate(mut self, name: &str, value: f64) -> Self {
        self.covariates.insert(name.to_string(), value);
        self
    }

    /// Parses `A=lvl,x=1.5`; names are typed against the design and `NEW`
    /// marks an unobserved level.
    pub fn parse(spec: &str, design: &Design) -> Result<Self> {
        let mut unit = NewUnit::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) = part
                .split_once('=')
                .ok_or_else(|| Error::InvalidNewUnit(format!("`{part}` is not name=value")))?;
            let (name, value) = (name.trim(), value.trim());
            if design.factors().contains_key(name) {
                unit = if value == NEW_LEVEL {
                    unit.new_level(name)
                } else {
                    unit.level(name, value)
                };
            } else if design.covariates().contains_key(name) {
                let v: f64 = value.parse().map_err(|_| {
                    Error::InvalidNewUnit(format!(
                        "`{value}` is not a number for covariate `{name}`"
                    ))
                })?;
                if !v.is_finite() {
                    return Err(Error::InvalidNewUnit(format!(
                        "non-finite value for `{name}`"
                    )));
                }
                unit = unit.covariate(name, v);
            } else {
                return Err(Error::InvalidNewUnit(format!("unknown variable `{name}`")));
            }
        }
        Ok(unit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub point: f64,
    /// Root prediction error of the latent value.
    pub se: f64,
    /// `x*ᵀβ̂`.
    pub fixed: f64,
    /// `c*ᵀ V⁻(y - Xβ̂)`.
    pub random: f64,
    /// Also counts the new unit's own identity variance (single units only).
    pub se_observation: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectPrediction {
    pub level: String,
    #[serde(flatten)]
    pub prediction: Prediction,
}

/// A fitted model ready for prediction.
#[derive(Debug, Clone)]
pub struct FittedModel {
    design: Design,
    mean: MeanModel,
    cov: CovarianceModel,
    y: Vec<f64>,
    fit: FitResult,
    system: BorderedSystem,
    gls: GlsResult,
    /// Predict from a fit that did not converge.
    pub allow_unconverged: bool,
}

/// A new unit resolved against the design: level indices (`None` = NEW).
#[derive(Debug, Clone)]
struct Resolved {
    levels: BTreeMap<String, Option<usize>>,
    covariates: BTreeMap<String, f64>,
}

/// A linear prediction target: covariances with the data, fixed-part row on
/// the basis columns, and its own variance.
struct Target {
    c: DVector<f64>,
    t: DVector<f64>,
    v: f64,
}

impl FittedModel {
    /// Builds the design matrices, fits by REML and prepares for prediction.
    pub fn fit(
        design: Design,
        mean_terms: &[MeanTerm],
        cov_terms: &[CovarianceTerm],
        y: Vec<f64>,
        config: &FitConfig,
    ) -> Result<Self> {
        let mean = mean_model_matrix(mean_terms, &design)?;
        let cov = CovarianceModel::build(cov_terms, &design)?;
        let fit = estimate::fit_reml(&design, &mean, &cov, &y, config)?;
        Self::new(design, mean, cov, y, fit)
    }

    pub fn new(
        design: Design,
        mean: MeanModel,
        cov: CovarianceModel,
        y: Vec<f64>,
        fit: FitResult,
    ) -> Result<Self> {
        if fit.components.len() != cov.len() {
            return Err(Error::InvalidCoefficients(
                "fit does not match the covariance model".into(),
            ));
        }
        let v = cov.assemble(&fit.components)?;
        let system = BorderedSystem::new(mean.matrix(), &v)?;
        let gls = estimate::gls_with_system(&system, mean.matrix().ncols(), &y)?;
        Ok(Self {
            design,
            mean,
            cov,
            y,
            fit,
            system,
            gls,
            allow_unconverged: false,
        })
    }

    /// A model with fixed variance components instead of REML estimates.
    pub fn with_components(
        design: Design,
        mean: MeanModel,
        cov: CovarianceModel,
        y: Vec<f64>,
        components: Vec<f64>,
    ) -> Result<Self> {
        let gls = estimate::gls(&design, &mean, &cov, &components, &y)?;
        let reml_loglik = estimate::contrast_basis(mean.matrix())
            .and_then(|l| RemlProblem::new(&l, &y, &cov))
            .and_then(|p| p.loglik(&components))
            .unwrap_or(f64::NAN);
        let fit = FitResult {
            terms: cov.term_names(),
            boundary_flags: components.iter().map(|&c| c == 0.0).collect(),
            components,
            coefficient_names: mean.columns().iter().map(|c| c.to_string()).collect(),
            beta: gls.beta.as_slice().to_vec(),
            beta_aliased: gls.aliased.clone(),
            beta_covariance: gls.covariance_rows(),
            reml_loglik,
            converged: true,
            iterations: 0,
            degenerate: false,
            loglik_trace: Vec::new(),
        };
        Self::new(design, mean, cov, y, fit)
    }

    pub fn design(&self) -> &Design {
        &self.design
    }

    pub fn mean(&self) -> &MeanModel {
        &self.mean
    }

    pub fn covariance(&self) -> &CovarianceModel {
        &self.cov
    }

    pub fn response(&self) -> &[f64] {
        &self.y
    }

    pub fn result(&self) -> &FitResult {
        &self.fit
    }

    pub fn beta(&self) -> &DVector<f64> {
        &self.gls.beta
    }

    fn check_converged(&self) -> Result<()> {
        if self.fit.converged || self.allow_unconverged {
            Ok(())
        } else {
            Err(Error::NotConverged)
        }
    }

    fn resolve(&self, unit: &NewUnit) -> Result<Resolved> {
        let mut factor_names: Vec<String> = Vec::new();
        let mut covariate_names: Vec<String> = Vec::new();
        let mut note = |name: &str| {
            if self.design.factors().contains_key(name) {
                factor_names.push(name.to_string());
            } else if self.design.covariates().contains_key(name) {
                covariate_names.push(name.to_string());
            }
        };
        for term in self.mean.terms() {
            match term {
                MeanTerm::Intercept => {}
                MeanTerm::Name(a) => note(a),
                MeanTerm::Cross(a, b) => {
                    note(a);
                    note(b);
                }
            }
        }
        for term in self.cov.terms() {
            match term {
                CovarianceTerm::Identity => {}
                CovarianceTerm::Block(expr) => {
                    for a in expr.names() {
                        note(a);
                    }
                }
                CovarianceTerm::Kernel(_, x) => note(x),
            }
        }
        for name in unit.levels.keys() {
            if !self.design.factors().contains_key(name) {
                return Err(Error::InvalidNewUnit(format!(
                    "`{name}` is not a factor of the design"
                )));
            }
        }
        for name in unit.covariates.keys() {
            if !self.design.covariates().contains_key(name) {
                return Err(Error::InvalidNewUnit(format!(
                    "`{name}` is not a covariate of the design"
                )));
            }
        }
        let mut levels = BTreeMap::new();
        for name in &factor_names {
            let name = name.as_str();
            let spec = unit.levels.get(name).ok_or_else(|| {
                Error::InvalidNewUnit(format!("missing level for factor `{name}`"))
            })?;
            let idx = match spec {
                LevelSpec::New => None,
                LevelSpec::Observed(l) => {
                    Some(self.design.factors()[name].level_index(l).ok_or_else(|| {
                        Error::InvalidNewUnit(format!(
                            "`{l}` is not an observed level of `{name}` (use {NEW_LEVEL})"
                        ))
                    })?)
                }
            };
            levels.insert(name.to_string(), idx);
        }
        let mut covariates = BTreeMap::new();
        for name in &covariate_names {
            let name = name.as_str();
            let v = unit.covariates.get(name).ok_or_else(|| {
                Error::InvalidNewUnit(format!("missing value for covariate `{name}`"))
            })?;
            covariates.insert(name.to_string(), *v);
        }
        Ok(Resolved { levels, covariates })
    }

    /// Full model-matrix row of a resolved unit.
    fn mean_row(&self, unit: &Resolved) -> Result<DVector<f64>> {
        let cols = self.mean.columns();
        let mut row = DVector::zeros(cols.len());
        for (j, col) in cols.iter().enumerate() {
            row[j] = match col {
                MeanColumn::Intercept => 1.0,
                MeanColumn::Covariate(x) => unit.covariates[x],
                MeanColumn::Level { factor, level } => {
                    self.level_matches(unit, factor, level)? as u8 as f64
                }
                MeanColumn::Cell { factors, levels } => {
                    (self.level_matches(unit, &factors.0, &levels.0)?
                        && self.level_matches(unit, &factors.1, &levels.1)?)
                        as u8 as f64
                }
            };
        }
        Ok(row)
    }

    fn level_matches(&self, unit: &Resolved, factor: &str, level: &str) -> Result<bool> {
        match unit.levels[factor] {
            None => Err(Error::InvalidNewUnit(format!(
                "factor `{factor}` is in the mean model and cannot take a {NEW_LEVEL} level"
            ))),
            Some(idx) => Ok(self.design.factors()[factor].levels()[idx] == level),
        }
    }

    fn estimable_basis_row(&self, row: &DVector<f64>) -> Result<DVector<f64>> {
        let xt = self.mean.matrix().transpose();
        if !linalg::vector_in_span(&xt, row) {
            return Err(Error::NotEstimable);
        }
        Ok(DVector::from_iterator(
            self.system.basis_columns.len(),
            self.system.basis_columns.iter().map(|&j| row[j]),
        ))
    }

    fn block_level(&self, unit: &Resolved, expr: &FactorExpr) -> Option<Vec<usize>> {
        expr.names()
            .iter()
            .map(|n| unit.levels[*n])
            .collect::<Option<Vec<usize>>>()
    }

    fn data_block_level(&self, i: usize, expr: &FactorExpr) -> Vec<usize> {
        expr.names()
            .iter()
            .map(|n| self.design.factors()[*n].assignment()[i])
            .collect()
    }

    /// Covariances of the latent value with the data units.
    fn data_covariances(&self, unit: &Resolved) -> DVector<f64> {
        let n = self.design.n_units();
        let mut c = DVector::zeros(n);
        for (term, &sigma) in self.cov.terms().iter().zip(&self.fit.components) {
            if sigma == 0.0 {
                continue;
            }
            match term {
                CovarianceTerm::Identity => {}
                CovarianceTerm::Block(expr) => {
                    if let Some(lv) = self.block_level(unit, expr) {
                        for i in 0..n {
                            if self.data_block_level(i, expr) == lv {
                                c[i] += sigma;
                            }
                        }
                    }
                }
                CovarianceTerm::Kernel(kind, name) => {
                    let x0 = unit.covariates[name];
                    let xs = &self.design.covariates()[name];
                    for i in 0..n {
                        c[i] += sigma * kind.eval(x0, xs[i]);
                    }
                }
            }
        }
        c
    }

    /// Latent covariance between two distinct new units (`same` = the same unit).
    fn latent_covariance(&self, a: &Resolved, b: &Resolved, same: bool) -> f64 {
        let mut v = 0.0;
        for (term, &sigma) in self.cov.terms().iter().zip(&self.fit.components) {
            match term {
                CovarianceTerm::Identity => {}
                CovarianceTerm::Block(expr) => {
                    let shared = same
                        || match (self.block_level(a, expr), self.block_level(b, expr)) {
                            (Some(la), Some(lb)) => la == lb,
                            _ => false,
                        };
                    if shared {
                        v += sigma;
                    }
                }
                CovarianceTerm::Kernel(kind, name) => {
                    v += sigma * kind.eval(a.covariates[name], b.covariates[name]);
                }
            }
        }
        v
    }

    fn target_for(&self, unit: &Resolved) -> Result<(Target, DVector<f64>)> {
        let row = self.mean_row(unit)?;
        let t = self.estimable_basis_row(&row)?;
        let c = self.data_covariances(unit);
        let v = self.latent_covariance(unit, unit, true);
        Ok((Target { c, t, v }, row))
    }

    fn predict_target(&self, target: &Target) -> Result<Prediction> {
        let beta_b = DVector::from_iterator(
            self.system.basis_columns.len(),
            self.system.basis_columns.iter().map(|&j| self.gls.beta[j]),
        );
        let fixed = target.t.dot(&beta_b);
        let random = target.c.dot(&self.gls.weights);
        let (lambda, mu) = self.system.solve(&target.c, &target.t)?;
        let pev = target.v - lambda.dot(&target.c) - mu.dot(&target.t);
        Ok(Prediction {
            point: fixed + random,
            se: pev.max(0.0).sqrt(),
            fixed,
            random,
            se_observation: None,
        })
    }

    pub fn blup_point(&self, unit: &NewUnit) -> Result<Prediction> {
        self.check_converged()?;
        let resolved = self.resolve(unit)?;
        let (target, _) = self.target_for(&resolved)?;
        let mut p = self.predict_target(&target)?;
        let pev = p.se * p.se + self.fit.components[0];
        p.se_observation = Some(pev.sqrt());
        Ok(p)
    }

    pub fn blup_contrast(&self, a: &NewUnit, b: &NewUnit) -> Result<Prediction> {
        self.check_converged()?;
        let ra = self.resolve(a)?;
        let rb = self.resolve(b)?;
        let (ta, _) = self.target_for(&ra)?;
        let (tb, _) = self.target_for(&rb)?;
        let pa = self.predict_target(&ta)?;
        let pb = self.predict_target(&tb)?;
        let vab = self.latent_covariance(&ra, &rb, false);
        let diff = Target {
            c: &ta.c - &tb.c,
            t: &ta.t - &tb.t,
            v: ta.v + tb.v - 2.0 * vab,
        };
        let joint = self.predict_target(&diff)?;
        Ok(Prediction {
            point: pa.point - pb.point,
            se: joint.se,
            fixed: pa.fixed - pb.fixed,
            random: pa.random - pb.random,
            se_observation: None,
        })
    }

    /// Predicted effect of every observed level of a block term, measured
    /// against a `NEW`-level unit that agrees in everything else.
    pub fn effect_predict(&self, factor: &FactorExpr) -> Result<Vec<EffectPrediction>> {
        self.check_converged()?;
        let k = self
            .cov
            .terms()
            .iter()
            .position(|t| match (t, factor) {
                (CovarianceTerm::Block(FactorExpr::Cross(a1, b1)), FactorExpr::Cross(a2, b2)) => {
                    (a1 == a2 && b1 == b2) || (a1 == b2 && b1 == a2)
                }
                (CovarianceTerm::Block(e), f) => e == f,
                _ => false,
            })
            .ok_or_else(|| Error::NotABlockTerm(factor.to_string()))?;
        let CovarianceTerm::Block(expr) = &self.cov.terms()[k] else {
            unreachable!()
        };
        let f = self.design.factor_expr(expr)?;
        let sigma = self.fit.components[k];
        let r = self.system.basis_columns.len();
        let mut out = Vec::with_capacity(f.n_levels());
        for (j, level) in f.levels().iter().enumerate() {
            let c = DVector::from_iterator(
                f.n_units(),
                f.assignment()
                    .iter()
                    .map(|&a| if a == j { sigma } else { 0.0 }),
            );
            let target = Target {
                c,
                t: DVector::zeros(r),
                v: 2.0 * sigma,
            };
            out.push(EffectPrediction {
                level: level.clone(),
                prediction: self.predict_target(&target)?,
            });
        }
        Ok(out)
    }

    fn grid_unit(&self, covariate: &str) -> Result<Resolved> {
        let mut levels = BTreeMap::new();
        for term in self.cov.terms() {
            if let CovarianceTerm::Block(e) = term {
                for n in e.names() {
                    levels.insert(n.to_string(), None);
                }
            }
        }
        for term in self.mean.terms() {
            let names: Vec<&String> = match term {
                MeanTerm::Intercept => vec![],
                MeanTerm::Name(a) => vec![a],
                MeanTerm::Cross(a, b) => vec![a, b],
            };
            if names.iter().any(|n| n.as_str() != covariate) {
                return Err(Error::InvalidNewUnit(format!(
                    "the curve diagnostic needs a mean model in `1` and `{covariate}` only"
                )));
            }
        }
        for term in self.cov.terms() {
            if let CovarianceTerm::Kernel(_, x) = term {
                if x != covariate {
                    return Err(Error::InvalidNewUnit(format!(
                        "kernel on `{x}` would need a value along the `{covariate}` curve"
                    )));
                }
            }
        }
        let mut covariates = BTreeMap::new();
        covariates.insert(covariate.to_string(), 0.0);
        Ok(Resolved { levels, covariates })
    }

    /// Latent prediction curve along `grid` for the named covariate.
    pub fn prediction_curve(&self, covariate: &str, grid: &[f64]) -> Result<Vec<f64>> {
        self.check_converged()?;
        self.design.covariate(covariate)?;
        let mut unit = self.grid_unit(covariate)?;
        grid.iter()
            .map(|&g| {
                unit.covariates.insert(covariate.to_string(), g);
                let row = self.mean_row(&unit)?;
                let t = self.estimable_basis_row(&row)?;
                let beta_b = DVector::from_iterator(
                    self.system.basis_columns.len(),
                    self.system.basis_columns.iter().map(|&j| self.gls.beta[j]),
                );
                Ok(t.dot(&beta_b) + self.data_covariances(&unit).dot(&self.gls.weights))
            })
            .collect()
    }

    fn kernel_sigma(&self, kind: KernelKind, covariate: &str) -> Option<(usize, f64)> {
        self.cov
            .terms()
            .iter()
            .enumerate()
            .find_map(|(k, t)| match t {
                CovarianceTerm::Kernel(kd, x) if *kd == kind && x == covariate => {
                    Some((k, self.fit.components[k]))
                }
                _ => None,
            })
    }

    /// Checks that the prediction curve is a natural cubic spline with knots
    /// at the observed covariate values.
    pub fn spline_property_check(&self, covariate: &str, grid: &[f64]) -> Result<SplineDiagnostic> {
        let (k, sigma) = self
            .kernel_sigma(KernelKind::Cubic, covariate)
            .ok_or_else(|| Error::InvalidInput(format!("model has no spl3({covariate}) term")))?;
        self.require_trend(k)?;
        let knots = self.knots(covariate)?;
        let h = check_grid(grid, &knots)?;
        let f = self.prediction_curve(covariate, grid)?;
        let zero_random = self.kernel_components_zero();
        if zero_random || sigma == 0.0 && zero_random {
            return Ok(SplineDiagnostic::linear(knots, grid.len()));
        }
        Ok(spline_diagnostic(grid, &f, &knots, h))
    }

    /// Brownian analog: the prediction curve is piecewise linear.
    pub fn piecewise_linear_check(
        &self,
        covariate: &str,
        grid: &[f64],
    ) -> Result<LinearDiagnostic> {
        let (k, _) = self
            .kernel_sigma(KernelKind::Brownian, covariate)
            .ok_or_else(|| Error::InvalidInput(format!("model has no bm({covariate}) term")))?;
        self.require_trend(k)?;
        let knots = self.knots(covariate)?;
        let h = check_grid(grid, &knots)?;
        let f = self.prediction_curve(covariate, grid)?;
        if self.kernel_components_zero() {
            return Ok(LinearDiagnostic {
                knots,
                grid_points: grid.len(),
                ..LinearDiagnostic::default()
            });
        }
        Ok(linear_diagnostic(grid, &f, &knots, h))
    }

    fn kernel_components_zero(&self) -> bool {
        self.cov
            .terms()
            .iter()
            .zip(&self.fit.components)
            .all(|(t, &s)| {
                matches!(t, CovarianceTerm::Identity | CovarianceTerm::Block(_)) || s == 0.0
            })
    }

    fn require_trend(&self, term: usize) -> Result<()> {
        let single = CovarianceModel::from_generators(
            vec![CovarianceTerm::Identity, self.cov.terms()[term].clone()],
            vec![
                self.cov.generators()[0].clone(),
                self.cov.generators()[term].clone(),
            ],
        )?;
        check_trends(&self.mean, &single, &self.design)
    }

    fn knots(&self, covariate: &str) -> Result<Vec<f64>> {
        let mut knots = self.design.covariate(covariate)?.to_vec();
        knots.sort_by(f64::total_cmp);
        knots.dedup();
        if knots.len() < 2 {
            return Err(Error::InvalidGrid(
                "need at least two distinct covariate values".into(),
            ));
        }
        Ok(knots)
    }
}

/// Centered view of predicted effects (mean point value subtracted).
pub fn centered_effects(effects: &[EffectPrediction]) -> Vec<EffectPrediction> {
    let n = effects.len().max(1) as f64;
    let mean = effects.iter().map(|e| e.prediction.point).sum::<f64>() / n;
    effects
        .iter()
        .map(|e| {
            let mut c = e.clone();
            c.prediction.point -= mean;
            c.prediction.random -= mean;
            c
        })
        .collect()
}

pub const MIN_POINTS_PER_INTERVAL: usize = 8;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SplineDiagnostic {
    pub knots: Vec<f64>,
    pub grid_points: usize,
    /// Max over inter-knot intervals of (range of f''') / |mean f'''|.
    pub third_derivative_variation: f64,
    /// Knot jumps of f, f', f'', each relative to that derivative's scale.
    pub value_gap: f64,
    pub first_derivative_gap: f64,
    pub second_derivative_gap: f64,
    /// Max |f''| outside the boundary knots relative to the interior max.
    pub exterior_second_derivative: f64,
    /// The kernel component is zero and the curve is the fixed part.
    pub linear: bool,
}

impl SplineDiagnostic {
    fn linear(knots: Vec<f64>, grid_points: usize) -> Self {
        Self {
            knots,
            grid_points,
            linear: true,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LinearDiagnostic {
    pub knots: Vec<f64>,
    pub grid_points: usize,
    /// Max within-interval |f''| times the smallest knot spacing over max |f'|.
    pub second_derivative_within: f64,
    pub value_gap: f64,
    /// Max |f'| outside the boundary knots relative to the interior max.
    pub exterior_slope: f64,
}

/// Returns the grid step; the grid must be uniform, cover the knots and put
/// at least `MIN_POINTS_PER_INTERVAL` points in every inter-knot interval.
fn check_grid(grid: &[f64], knots: &[f64]) -> Result<f64> {
    if grid.len() < 2 || grid.iter().any(|g| !g.is_finite()) {
        return Err(Error::InvalidGrid(
            "grid needs at least two finite points".into(),
        ));
    }
    let h = (grid[grid.len() - 1] - grid[0]) / (grid.len() - 1) as f64;
    if h <= 0.0 {
        return Err(Error::InvalidGrid(
            "grid must be strictly increasing".into(),
        ));
    }
    for (i, w) in grid.windows(2).enumerate() {
        if w[1] <= w[0] {
            return Err(Error::InvalidGrid(format!(
                "grid not strictly increasing at index {}",
                i + 1
            )));
        }
        if ((w[1] - w[0]) - h).abs() > 1e-6 * h {
            return Err(Error::InvalidGrid("grid must be uniformly spaced".into()));
        }
    }
    let (lo, hi) = (knots[0], knots[knots.len() - 1]);
    if grid[0] > lo || grid[grid.len() - 1] < hi {
        return Err(Error::InvalidGrid("grid must cover all knots".into()));
    }
    for w in knots.windows(2) {
        let count = grid.iter().filter(|&&g| g >= w[0] && g <= w[1]).count();
        if count < MIN_POINTS_PER_INTERVAL {
            return Err(Error::InvalidGrid(format!(
                "grid too coarse: {count} points in [{}, {}], need {MIN_POINTS_PER_INTERVAL}",
                w[0], w[1]
            )));
        }
    }
    Ok(h)
}

/// True if some knot lies strictly inside `(a, b)`.
fn straddles(knots: &[f64], a: f64, b: f64, h: f64) -> bool {
    let eps = 1e-9 * h;
    knots.iter().any(|&k| k > a + eps && k < b - eps)
}

/// Index of the inter-knot interval containing `x` (None outside the knots).
fn interval_of(knots: &[f64], x: f64) -> Option<usize> {
    if x < knots[0] || x > knots[knots.len() - 1] {
        return None;
    }
    Some(
        knots
            .windows(2)
            .position(|w| x >= w[0] && x <= w[1])
            .unwrap_or(knots.len() - 2),
    )
}

fn third_derivative(f: &[f64], i: usize, h: f64) -> f64 {
    (-f[i + 3] + 8.0 * f[i + 2] - 13.0 * f[i + 1] + 13.0 * f[i - 1] - 8.0 * f[i - 2] + f[i - 3])
        / (8.0 * h * h * h)
}

fn second_derivative(f: &[f64], i: usize, h: f64) -> f64 {
    (-f[i + 2] + 16.0 * f[i + 1] - 30.0 * f[i] + 16.0 * f[i - 1] - f[i - 2]) / (12.0 * h * h)
}

fn first_derivative(f: &[f64], i: usize, h: f64) -> f64 {
    (-f[i + 2] + 8.0 * f[i + 1] - 8.0 * f[i - 1] + f[i - 2]) / (12.0 * h)
}

/// Derivatives `[p(x0), p'(x0), …]` at `x0` of the least-squares polynomial
/// of the given degree through the samples.
fn poly_derivatives_at(xs: &[f64], ys: &[f64], degree: usize, x0: f64) -> Option<Vec<f64>> {
    if xs.len() <= degree {
        return None;
    }
    let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w = (hi - lo).max(f64::MIN_POSITIVE);
    let a = DMatrix::from_fn(xs.len(), degree + 1, |i, d| {
        ((xs[i] - x0) / w).powi(d as i32)
    });
    let b = DVector::from_column_slice(ys);
    let coef = a.svd(true, true).solve(&b, 1e-14).ok()?;
    let mut fact = 1.0;
    Some(
        (0..=degree)
            .map(|d| {
                if d > 0 {
                    fact *= d as f64;
                }
                coef[d] * fact / w.powi(d as i32)
            })
            .collect(),
    )
}

/// Per-knot derivative jumps between the polynomial pieces on either side.
fn knot_gaps(grid: &[f64], f: &[f64], knots: &[f64], degree: usize, h: f64) -> Vec<f64> {
    let mut pieces: Vec<(f64, f64)> = Vec::new();
    pieces.push((f64::NEG_INFINITY, knots[0]));
    for w in knots.windows(2) {
        pieces.push((w[0], w[1]));
    }
    pieces.push((knots[knots.len() - 1], f64::INFINITY));
    let eps = 1e-9 * h;
    let samples = |(a, b): (f64, f64)| -> (Vec<f64>, Vec<f64>) {
        grid.iter()
            .zip(f)
            .filter(|(g, _)| **g > a + eps && **g < b - eps)
            .map(|(g, v)| (*g, *v))
            .unzip()
    };
    let mut gaps = vec![0.0f64; degree];
    let mut scales = vec![0.0f64; degree];
    for (k, &knot) in knots.iter().enumerate() {
        let (xl, yl) = samples(pieces[k]);
        let (xr, yr) = samples(pieces[k + 1]);
        let (Some(left), Some(right)) = (
            poly_derivatives_at(&xl, &yl, degree, knot),
            poly_derivatives_at(&xr, &yr, degree, knot),
        ) else {
            continue;
        };
        for d in 0..degree {
            gaps[d] = gaps[d].max((left[d] - right[d]).abs());
            scales[d] = scales[d].max(left[d].abs()).max(right[d].abs());
        }
    }
    gaps.iter()
        .zip(&scales)
        .map(|(g, s)| if *s > 0.0 { g / s } else { *g })
        .collect()
}

fn spline_diagnostic(grid: &[f64], f: &[f64], knots: &[f64], h: f64) -> SplineDiagnostic {
    let n = grid.len();
    let n_int = knots.len() - 1;
    let mut third: Vec<Vec<f64>> = vec![Vec::new(); n_int];
    let mut interior_second = 0.0f64;
    let mut exterior_second = 0.0f64;
    for i in 2..n.saturating_sub(2) {
        if !straddles(knots, grid[i - 2], grid[i + 2], h) {
            let d2 = second_derivative(f, i, h).abs();
            match interval_of(knots, grid[i]) {
                Some(_) if grid[i] > knots[0] && grid[i] < knots[n_int] => {
                    interior_second = interior_second.max(d2)
                }
                None => exterior_second = exterior_second.max(d2),
                _ => {}
            }
        }
        if i >= 3 && i + 3 < n && !straddles(knots, grid[i - 3], grid[i + 3], h) {
            if let Some(k) = interval_of(knots, grid[i]) {
                if grid[i - 3] >= knots[k] - 1e-9 * h && grid[i + 3] <= knots[k + 1] + 1e-9 * h {
                    third[k].push(third_derivative(f, i, h));
                }
            }
        }
    }
    let means: Vec<f64> = third
        .iter()
        .map(|v| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        })
        .collect();
    let max_mean = means.iter().fold(0.0f64, |a, m| a.max(m.abs()));
    let third_derivative_variation = third
        .iter()
        .zip(&means)
        .filter(|(v, _)| !v.is_empty())
        .map(|(v, m)| {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom = m.abs().max(1e-3 * max_mean);
            if denom > 0.0 {
                (hi - lo) / denom
            } else {
                0.0
            }
        })
        .fold(0.0, f64::max);
    let gaps = knot_gaps(grid, f, knots, 3, h);
    SplineDiagnostic {
        knots: knots.to_vec(),
        grid_points: n,
        third_derivative_variation,
        value_gap: gaps[0],
        first_derivative_gap: gaps[1],
        second_derivative_gap: gaps[2],
        exterior_second_derivative: if interior_second > 0.0 {
            exterior_second / interior_second
        } else {
            exterior_second
        },
        linear: false,
    }
}

fn linear_diagnostic(grid: &[f64], f: &[f64], knots: &[f64], h: f64) -> LinearDiagnostic {
    let n = grid.len();
    let n_int = knots.len() - 1;
    let mut max_second = 0.0f64;
    let mut interior_slope = 0.0f64;
    let mut exterior_slope = 0.0f64;
    for i in 2..n.saturating_sub(2) {
        if straddles(knots, grid[i - 2], grid[i + 2], h) {
            continue;
        }
        let d1 = first_derivative(f, i, h).abs();
        if grid[i] > knots[0] && grid[i] < knots[n_int] {
            max_second = max_second.max(second_derivative(f, i, h).abs());
            interior_slope = interior_slope.max(d1);
        } else if grid[i] < knots[0] || grid[i] > knots[n_int] {
            exterior_slope = exterior_slope.max(d1);
        }
    }
    let min_spacing = knots
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let gaps = knot_gaps(grid, f, knots, 1, h);
    LinearDiagnostic {
        knots: knots.to_vec(),
        grid_points: n,
        second_derivative_within: if interior_slope > 0.0 {
            max_second * min_spacing / interior_slope
        } else {
            max_second
        },
        value_gap: gaps[0],
        exterior_slope: if interior_slope > 0.0 {
            exterior_slope / interior_slope
        } else {
            exterior_slope
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::formula::{parse_cov, parse_mean};

    fn one_way(groups: &[&[f64]]) -> (Design, Vec<f64>) {
        let mut labels = Vec::new();
        let mut y = Vec::new();
        for (g, vals) in groups.iter().enumerate() {
            for v in vals.iter() {
                labels.push(format!("g{g}"));
                y.push(*v);
            }
        }
        (Design::new(y.len()).with_factor("A", &labels).unwrap(), y)
    }

    fn model(d: &Design, y: &[f64], mean: &str, cov: &str, comps: Vec<f64>) -> FittedModel {
        let m = mean_model_matrix(&parse_mean(mean).unwrap().terms, d).unwrap();
        let c = CovarianceModel::build(&parse_cov(cov).unwrap().terms, d).unwrap();
        FittedModel::with_components(d.clone(), m, c, y.to_vec(), comps).unwrap()
    }

    #[test]
    fn zero_component_predicts_grand_mean() {
        let (d, y) = one_way(&[&[1.0, 2.0, 3.0], &[7.0, 8.0], &[4.0, 4.5, 5.0, 6.0]]);
        let fm = model(&d, &y, "1", "I + E(A)", vec![1.3, 0.0]);
        let mu = fm.beta()[0];
        let ybar = y.iter().sum::<f64>() / y.len() as f64;
        assert!((mu - ybar).abs() < 1e-12);
        for lvl in ["g0", "g1", "g2"] {
            let p = fm.blup_point(&NewUnit::new().level("A", lvl)).unwrap();
            assert!((p.point - mu).abs() < 1e-12);
        }
    }

    #[test]
    fn huge_component_predicts_group_mean() {
        let (d, y) = one_way(&[&[1.0, 2.0, 3.0], &[7.0, 8.0], &[4.0, 4.5, 5.0, 6.0]]);
        let fm = model(&d, &y, "1", "I + E(A)", vec![1.0, 1e8]);
        let p = fm.blup_point(&NewUnit::new().level("A", "g1")).unwrap();
        assert!((p.point - 7.5).abs() < 1e-6, "{}", p.point);
    }

    #[test]
    fn contrast_of_unit_with_itself_is_zero() {
        let (d, y) = one_way(&[&[1.0, 2.0, 3.0], &[7.0, 8.0]]);
        let fm = model(&d, &y, "1", "I + E(A)", vec![1.0, 2.0]);
        let u = NewUnit::new().level("A", "g0");
        let c = fm.blup_contrast(&u, &u).unwrap();
        assert_eq!(c.point, 0.0);
        assert!(c.se.abs() < 1e-7, "{}", c.se);
        let new = NewUnit::new().new_level("A");
        let c = fm.blup_contrast(&new, &new).unwrap();
        assert!(c.point.abs() < 1e-12);
        assert!((c.se - 2.0f64.sqrt() * 2.0f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn new_unit_errors() {
        let (d, y) = one_way(&[&[1.0, 2.0, 3.0], &[7.0, 8.0]]);
        let fm = model(&d, &y, "1", "I + E(A)", vec![1.0, 2.0]);
        assert!(fm.blup_point(&NewUnit::new()).is_err());
        assert!(fm.blup_point(&NewUnit::new().level("A", "zzz")).is_err());
        assert!(fm.blup_point(&NewUnit::new().level("B", "g0")).is_err());
        let fixed = model(&d, &y, "A", "I", vec![1.0]);
        assert!(fixed.blup_point(&NewUnit::new().new_level("A")).is_err());
        assert!(matches!(
            fm.effect_predict(&FactorExpr::Single("B".into())),
            Err(Error::NotABlockTerm(_))
        ));
    }

    #[test]
    fn new_unit_parse() {
        let d = Design::new(2)
            .with_factor("A", &["a", "b"])
            .unwrap()
            .with_covariate("x", vec![0.0, 1.0])
            .unwrap();
        let u = NewUnit::parse("A=NEW, x=1.5", &d).unwrap();
        assert_eq!(u.levels["A"], LevelSpec::New);
        assert_eq!(u.covariates["x"], 1.5);
        assert_eq!(
            NewUnit::parse("A=b", &d).unwrap().levels["A"],
            LevelSpec::Observed("b".into())
        );
        assert!(NewUnit::parse("x=abc", &d).is_err());
        assert!(NewUnit::parse("q=1", &d).is_err());
        assert!(NewUnit::parse("A", &d).is_err());
    }

    #[test]
    fn grid_validation() {
        let knots = [0.0, 1.0];
        assert!(check_grid(&[0.0, 0.5, 1.0], &knots).is_err());
        let fine: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
        assert!(check_grid(&fine, &knots).is_ok());
        let mut uneven = fine.clone();
        uneven[3] = 0.31;
        assert!(check_grid(&uneven, &knots).is_err());
        assert!(check_grid(&fine[1..], &knots).is_err());
    }

    #[test]
    fn poly_fit_recovers_derivatives() {
        let xs: Vec<f64> = (0..20).map(|i| 1.0 + i as f64 * 0.05).collect();
        let ys: Vec<f64> = xs
            .iter()
            .map(|x| 2.0 - x + 0.5 * x * x + x * x * x)
            .collect();
        let d = poly_derivatives_at(&xs, &ys, 3, 1.0).unwrap();
        assert!((d[0] - 2.5).abs() < 1e-9);
        assert!((d[1] - 3.0).abs() < 1e-8);
        assert!((d[2] - 7.0).abs() < 1e-7);
        assert!((d[3] - 6.0).abs() < 1e-6);
    }
}
