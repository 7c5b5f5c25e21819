//! Residual maximum likelihood for the variance components, then generalized
//! least squares for the mean coefficients.
//!
//! REML works with the contrasts `Lᵀy`, where `L` has orthonormal columns
//! spanning the orthogonal complement of the mean space. Everything is
//! expressed through `Lᵀ V L`, which stays positive definite for the
//! generalized covariances as long as their polynomial trends are in the mean.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};
use serde::{Deserialize, Serialize};

use crate::covariance::{self, validate_coefficients, CovarianceModel, CovarianceTerm};
use crate::design::{Design, MeanModel};
use crate::error::{Error, Result};
use crate::identify::identifiability_report;
use crate::linalg::{self, PivotedQr};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub max_iterations: usize,
    pub score_tolerance: f64,
    pub loglik_rel_tolerance: f64,
    /// Relative to the sample variance of the response.
    pub boundary_tolerance: f64,
    pub max_step_halvings: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            score_tolerance: 1e-8,
            loglik_rel_tolerance: 1e-10,
            boundary_tolerance: 1e-8,
            max_step_halvings: 30,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let tols = [
            self.score_tolerance,
            self.loglik_rel_tolerance,
            self.boundary_tolerance,
        ];
        if tols.iter().any(|t| !(t.is_finite() && *t > 0.0)) || self.max_iterations == 0 {
            return Err(Error::InvalidInput(
                "fit tolerances must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Orthonormal basis of the orthogonal complement of `col(x)`.
pub fn contrast_basis(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let qr = PivotedQr::new(x);
    if qr.rank() >= x.nrows() {
        return Err(Error::Saturated);
    }
    Ok(qr.complement_basis())
}

/// The REML objective restricted to a fixed contrast basis.
#[derive(Debug, Clone)]
pub struct RemlProblem {
    /// `Lᵀ G_k L`.
    projected: Vec<DMatrix<f64>>,
    /// `Lᵀ y`.
    z: DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct RemlEval {
    pub loglik: f64,
    pub gradient: DVector<f64>,
    pub information: DMatrix<f64>,
}

impl RemlProblem {
    pub fn new(l: &DMatrix<f64>, y: &[f64], cov: &CovarianceModel) -> Result<Self> {
        if l.nrows() != y.len() || cov.n_units() != y.len() {
            return Err(Error::ShapeMismatch(
                "contrast basis, response and covariance model disagree on n".into(),
            ));
        }
        let projected = cov
            .generators()
            .iter()
            .map(|g| linalg::congruence(l, g))
            .collect();
        let z = l.transpose() * DVector::from_column_slice(y);
        Ok(Self { projected, z })
    }

    /// Number of contrasts, `n - rank(X)`.
    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn n_components(&self) -> usize {
        self.projected.len()
    }

    pub fn contrasts(&self) -> &DVector<f64> {
        &self.z
    }

    fn factor(&self, coefficients: &[f64]) -> Result<Cholesky<f64, Dyn>> {
        let w = covariance::combine(&self.projected, coefficients);
        Cholesky::new(w).ok_or(Error::NotPositiveDefinite)
    }

    pub fn loglik(&self, coefficients: &[f64]) -> Result<f64> {
        let chol = self.factor(coefficients)?;
        let logdet: f64 = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let u = chol.solve(&self.z);
        let quad = self.z.dot(&u);
        Ok(-0.5 * (logdet + quad + self.dim() as f64 * LN_2PI))
    }

    /// Log-likelihood, score and expected information.
    pub fn evaluate(&self, coefficients: &[f64]) -> Result<RemlEval> {
        let chol = self.factor(coefficients)?;
        let logdet: f64 = 2.0
            * chol
                .l_dirty()
                .diagonal()
                .iter()
                .map(|d| d.ln())
                .sum::<f64>();
        let u = chol.solve(&self.z);
        let loglik = -0.5 * (logdet + self.z.dot(&u) + self.dim() as f64 * LN_2PI);
        let w = chol.inverse();
        let k = self.n_components();
        let products: Vec<DMatrix<f64>> = self.projected.iter().map(|g| &w * g).collect();
        let mut gradient = DVector::zeros(k);
        let mut information = DMatrix::zeros(k, k);
        for a in 0..k {
            let gu = &self.projected[a] * &u;
            gradient[a] = -0.5 * (products[a].trace() - u.dot(&gu));
            for b in 0..=a {
                let v = 0.5 * linalg::trace_of_product(&products[a], &products[b]);
                information[(a, b)] = v;
                information[(b, a)] = v;
            }
        }
        Ok(RemlEval {
            loglik,
            gradient,
            information,
        })
    }
}

/// Restricted log-likelihood `-½[log det(LᵀVL) + yᵀL(LᵀVL)⁻¹Lᵀy + (n-r) log 2π]`.
pub fn reml_loglik(
    coefficients: &[f64],
    l: &DMatrix<f64>,
    y: &[f64],
    cov: &CovarianceModel,
) -> Result<f64> {
    validate_coefficients(cov, coefficients)?;
    RemlProblem::new(l, y, cov)?.loglik(coefficients)
}

/// REML score vector and expected information matrix.
pub fn reml_score_info(
    coefficients: &[f64],
    l: &DMatrix<f64>,
    y: &[f64],
    cov: &CovarianceModel,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    validate_coefficients(cov, coefficients)?;
    let e = RemlProblem::new(l, y, cov)?.evaluate(coefficients)?;
    Ok((e.gradient, e.information))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub terms: Vec<String>,
    pub components: Vec<f64>,
    pub boundary_flags: Vec<bool>,
    pub coefficient_names: Vec<String>,
    pub beta: Vec<f64>,
    /// Columns dropped as linearly dependent; their coefficients are 0.
    pub beta_aliased: Vec<bool>,
    /// Absent when the fitted `V` is a generalized covariance only.
    pub beta_covariance: Option<Vec<Vec<f64>>>,
    pub reml_loglik: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Identity component pinned at its positive floor.
    pub degenerate: bool,
    /// Log-likelihood at the start and after every accepted step.
    pub loglik_trace: Vec<f64>,
}

/// Checks that each generalized-covariance term has its polynomial trend in the mean.
pub fn check_trends(mean: &MeanModel, cov: &CovarianceModel, design: &Design) -> Result<()> {
    for term in cov.terms() {
        if let CovarianceTerm::Kernel(kind, name) = term {
            let order = kind.cpd_order();
            if order == 0 {
                continue;
            }
            let x = design.covariate(name)?;
            let ok = covariance::required_trend(x, order)
                .iter()
                .all(|p| mean.contains(p));
            if !ok {
                let required = (0..order)
                    .map(|d| match d {
                        0 => "1".to_string(),
                        1 => name.clone(),
                        d => format!("{name}^{d}"),
                    })
                    .collect();
                return Err(Error::MissingTrend {
                    term: term.to_string(),
                    required,
                });
            }
        }
    }
    Ok(())
}

fn trends_satisfied(mean: &MeanModel, cov: &CovarianceModel, design: &Design) -> bool {
    check_trends(mean, cov, design).is_ok()
}

fn sample_variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    if y.len() < 2 {
        return 0.0;
    }
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
}

/// Fisher scoring on the variance scale, projected onto `σ²_k ≥ 0`, with
/// monotone step halving. GLS coefficients are computed at the optimum.
pub fn fit_reml(
    design: &Design,
    mean: &MeanModel,
    cov: &CovarianceModel,
    y: &[f64],
    config: &FitConfig,
) -> Result<FitResult> {
    config.validate()?;
    let n = y.len();
    if mean.n_units() != n || cov.n_units() != n || design.n_units() != n {
        return Err(Error::UnitCountMismatch {
            expected: design.n_units(),
            found: n,
        });
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(
            "response contains non-finite values".into(),
        ));
    }
    let report = identifiability_report(mean, cov)?;
    if !report.all_identifiable {
        return Err(Error::NotIdentifiable(Box::new(report)));
    }
    check_trends(mean, cov, design)?;

    let l = contrast_basis(mean.matrix())?;
    let problem = RemlProblem::new(&l, y, cov)?;
    let m = problem.dim() as f64;
    let rss = problem.contrasts().norm_squared();
    let y_norm = DVector::from_column_slice(y).norm();
    if rss == 0.0 || rss.sqrt() <= 1e-14 * y_norm {
        return Err(Error::DegenerateResponse);
    }
    let scale = rss / m;
    let k = cov.len();
    let identity_floor = 1e-12 * scale;

    let mut theta = vec![0.0; k];
    if k == 1 {
        theta[0] = scale;
    } else {
        theta[0] = 0.5 * scale;
        for t in theta.iter_mut().skip(1) {
            *t = 0.5 * scale / (k - 1) as f64;
        }
    }

    let mut cur = problem.evaluate(&theta)?;
    let mut trace = vec![cur.loglik];
    let mut last_change = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;

    let mut lower = vec![0.0; k];
    lower[0] = identity_floor;
    let projected_score = |theta: &[f64], e: &RemlEval| -> f64 {
        (0..k)
            .filter(|&j| !(theta[j] <= lower[j] && e.gradient[j] <= 0.0))
            .map(|j| e.gradient[j].abs())
            .fold(0.0, f64::max)
            * scale
    };

    while iterations < config.max_iterations {
        let score = projected_score(&theta, &cur);
        if score <= config.score_tolerance && last_change <= config.loglik_rel_tolerance {
            converged = true;
            break;
        }
        let direction = scoring_direction(&theta, &lower, &cur);
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=config.max_step_halvings {
            let cand: Vec<f64> = (0..k)
                .map(|j| (theta[j] + step * direction[j]).max(lower[j]))
                .collect();
            if let Ok(e) = problem.evaluate(&cand) {
                if e.loglik >= cur.loglik {
                    accepted = Some((cand, e));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, e)) = accepted else {
            // No ascent possible along the scoring direction.
            converged = score <= config.score_tolerance;
            break;
        };
        iterations += 1;
        last_change = (e.loglik - cur.loglik).abs() / cur.loglik.abs().max(1.0);
        let moved = cand != theta;
        theta = cand;
        cur = e;
        trace.push(cur.loglik);
        if !moved {
            converged = projected_score(&theta, &cur) <= config.score_tolerance;
            break;
        }
    }
    if !converged && iterations >= config.max_iterations {
        converged = projected_score(&theta, &cur) <= config.score_tolerance
            && last_change <= config.loglik_rel_tolerance;
    }

    let var_y = sample_variance(y);
    let boundary_flags: Vec<bool> = theta
        .iter()
        .map(|&t| t <= config.boundary_tolerance * var_y)
        .collect();
    let gls = gls(design, mean, cov, &theta, y)?;
    Ok(FitResult {
        terms: cov.term_names(),
        components: theta.clone(),
        boundary_flags,
        coefficient_names: mean.columns().iter().map(|c| c.to_string()).collect(),
        beta: gls.beta.as_slice().to_vec(),
        beta_aliased: gls.aliased.clone(),
        beta_covariance: gls.covariance_rows(),
        reml_loglik: cur.loglik,
        converged,
        iterations,
        degenerate: theta[0] <= identity_floor,
        loglik_trace: trace,
    })
}

/// Fisher scoring step on the free set; components at their lower bound
/// whose score points outward (or whose step would push them below it)
/// stay pinned.
fn scoring_direction(theta: &[f64], lower: &[f64], e: &RemlEval) -> Vec<f64> {
    let k = theta.len();
    let mut free: Vec<usize> = (0..k)
        .filter(|&j| !(theta[j] <= lower[j] && e.gradient[j] <= 0.0))
        .collect();
    loop {
        let mut direction = vec![0.0; k];
        if free.is_empty() {
            return direction;
        }
        let info = e
            .information
            .select_rows(free.iter())
            .select_columns(free.iter());
        let grad = DVector::from_iterator(free.len(), free.iter().map(|&j| e.gradient[j]));
        let delta = match Cholesky::new(info.clone()) {
            Some(c) => c.solve(&grad),
            None => info
                .svd(true, true)
                .solve(&grad, 1e-12 * e.information.norm())
                .unwrap_or_else(|_| grad.clone()),
        };
        let blocked: Vec<usize> = free
            .iter()
            .zip(delta.iter())
            .filter(|(&j, &d)| theta[j] <= lower[j] && d < 0.0)
            .map(|(&j, _)| j)
            .collect();
        if blocked.is_empty() {
            for (&j, &d) in free.iter().zip(delta.iter()) {
                direction[j] = d;
            }
            return direction;
        }
        free.retain(|j| !blocked.contains(j));
    }
}

/// Bordered (universal kriging) system `[V T; Tᵀ 0]`, with `T` the
/// independent columns of the model matrix.
#[derive(Debug, Clone)]
pub(crate) struct BorderedSystem {
    pub basis_columns: Vec<usize>,
    pub t: DMatrix<f64>,
    lu: LU<f64, Dyn, Dyn>,
    n: usize,
    /// `V` itself is a covariance matrix (not only positive on contrasts).
    pub positive_definite: bool,
}

impl BorderedSystem {
    pub fn new(x: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<Self> {
        let qr = PivotedQr::new(x);
        let basis_columns = qr.independent_columns();
        let t = x.select_columns(basis_columns.iter());
        let n = v.nrows();
        let r = t.ncols();
        let mut k = DMatrix::zeros(n + r, n + r);
        k.view_mut((0, 0), (n, n)).copy_from(v);
        k.view_mut((0, n), (n, r)).copy_from(&t);
        k.view_mut((n, 0), (r, n)).copy_from(&t.transpose());
        let lu = LU::new(k);
        if !lu.is_invertible() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(Self {
            basis_columns,
            t,
            lu,
            n,
            positive_definite: Cholesky::new(v.clone()).is_some(),
        })
    }

    pub fn rank(&self) -> usize {
        self.t.ncols()
    }

    /// Solves for `(λ, μ)` given right-hand side `(c, t)`.
    pub fn solve(
        &self,
        c: &DVector<f64>,
        t: &DVector<f64>,
    ) -> Result<(DVector<f64>, DVector<f64>)> {
        let mut rhs = DVector::zeros(self.n + self.rank());
        rhs.rows_mut(0, self.n).copy_from(c);
        rhs.rows_mut(self.n, self.rank()).copy_from(t);
        let sol = self.lu.solve(&rhs).ok_or(Error::NotPositiveDefinite)?;
        Ok((
            sol.rows(0, self.n).into_owned(),
            sol.rows(self.n, self.rank()).into_owned(),
        ))
    }
}

#[derive(Debug, Clone)]
pub struct GlsResult {
    /// Full-length coefficient vector; aliased columns are 0.
    pub beta: DVector<f64>,
    /// Only defined when `V` is positive definite.
    pub covariance: Option<DMatrix<f64>>,
    pub aliased: Vec<bool>,
    /// `V⁻(y - Xβ̂)` in the bordered-system sense.
    pub weights: DVector<f64>,
}

impl GlsResult {
    pub fn covariance_rows(&self) -> Option<Vec<Vec<f64>>> {
        self.covariance
            .as_ref()
            .map(|c| c.row_iter().map(|r| r.iter().copied().collect()).collect())
    }
}

/// Generalized least squares `β̂ = (XᵀV⁻¹X)⁻XᵀV⁻¹y` through the bordered
/// system, which also covers generalized covariances.
pub fn gls(
    design: &Design,
    mean: &MeanModel,
    cov: &CovarianceModel,
    coefficients: &[f64],
    y: &[f64],
) -> Result<GlsResult> {
    let v = covariance::assemble(cov, coefficients)?;
    if y.len() != v.nrows() || mean.n_units() != y.len() {
        return Err(Error::ShapeMismatch(
            "response length differs from model size".into(),
        ));
    }
    if !trends_satisfied(mean, cov, design) && Cholesky::new(v.clone()).is_none() {
        check_trends(mean, cov, design)?;
    }
    let system = BorderedSystem::new(mean.matrix(), &v)?;
    gls_with_system(&system, mean.matrix().ncols(), y)
}

pub(crate) fn gls_with_system(system: &BorderedSystem, p: usize, y: &[f64]) -> Result<GlsResult> {
    let r = system.rank();
    let yv = DVector::from_column_slice(y);
    let (weights, beta_b) = system.solve(&yv, &DVector::zeros(r))?;
    let mut cov_b = DMatrix::zeros(r, r);
    for j in 0..r {
        let mut e = DVector::zeros(r);
        e[j] = 1.0;
        let (_, mu) = system.solve(&DVector::zeros(yv.len()), &e)?;
        cov_b.set_column(j, &(-mu));
    }
    linalg::symmetrize(&mut cov_b);
    let mut beta = DVector::zeros(p);
    let mut covariance = DMatrix::zeros(p, p);
    let mut aliased = vec![true; p];
    for (a, &ca) in system.basis_columns.iter().enumerate() {
        beta[ca] = beta_b[a];
        aliased[ca] = false;
        for (b, &cb) in system.basis_columns.iter().enumerate() {
            covariance[(ca, cb)] = cov_b[(a, b)];
        }
    }
    Ok(GlsResult {
        beta,
        covariance: system.positive_definite.then_some(covariance),
        aliased,
        weights,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{mean_model_matrix, MeanTerm};
    use crate::formula::{parse_cov, parse_mean};

    #[test]
    fn contrast_basis_examples() {
        let ones = DMatrix::from_element(2, 1, 1.0);
        let l = contrast_basis(&ones).unwrap();
        assert_eq!(l.ncols(), 1);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((l[(0, 0)].abs() - s).abs() < 1e-12);
        assert!((l[(0, 0)] + l[(1, 0)]).abs() < 1e-12);
        assert!(matches!(
            contrast_basis(&DMatrix::identity(3, 3)),
            Err(Error::Saturated)
        ));
    }

    #[test]
    fn unit_covariance_loglik() {
        let d = Design::new(4)
            .with_factor("A", &["a", "a", "b", "b"])
            .unwrap();
        let mean = mean_model_matrix(&[MeanTerm::Intercept], &d).unwrap();
        let cov = CovarianceModel::build(&parse_cov("I").unwrap().terms, &d).unwrap();
        let y = [1.0f64, 2.0, 4.0, 7.0];
        let l = contrast_basis(mean.matrix()).unwrap();
        let ybar = 3.5;
        let s: f64 = y.iter().map(|v| (v - ybar).powi(2)).sum();
        let expected = -0.5 * (s + 3.0 * LN_2PI);
        let got = reml_loglik(&[1.0], &l, &y, &cov).unwrap();
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn gls_with_identity_is_ols() {
        let x = [0.0, 1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 2.9, 5.2, 7.1, 8.8];
        let d = Design::new(5).with_covariate("x", x.to_vec()).unwrap();
        let mean = mean_model_matrix(&parse_mean("1 + x").unwrap().terms, &d).unwrap();
        let cov = CovarianceModel::build(&parse_cov("I").unwrap().terms, &d).unwrap();
        let r = gls(&d, &mean, &cov, &[2.0], &y).unwrap();
        let xm = mean.matrix();
        let ols = (xm.transpose() * xm).try_inverse().unwrap()
            * xm.transpose()
            * DVector::from_column_slice(&y);
        assert!((&r.beta - &ols).norm() < 1e-12);
        let ols_cov = (xm.transpose() * xm).try_inverse().unwrap() * 2.0;
        assert!((r.covariance.unwrap() - ols_cov).norm() < 1e-12);
    }

    #[test]
    fn gls_rank_deficient_marks_aliased_columns() {
        let d = Design::new(4)
            .with_factor("A", &["a", "a", "b", "b"])
            .unwrap();
        let mean = mean_model_matrix(&parse_mean("1 + A").unwrap().terms, &d).unwrap();
        let cov = CovarianceModel::build(&parse_cov("I").unwrap().terms, &d).unwrap();
        let y = [1.0, 3.0, 5.0, 9.0];
        let r = gls(&d, &mean, &cov, &[1.0], &y).unwrap();
        assert_eq!(r.aliased.iter().filter(|a| **a).count(), 1);
        let fitted = mean.matrix() * &r.beta;
        assert!((fitted[0] - 2.0).abs() < 1e-12 && (fitted[3] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn gls_rejects_generalized_covariance_without_trend() {
        let x = vec![0.0, 1.0, 2.5, 4.0];
        let d = Design::new(4).with_covariate("x", x).unwrap();
        let mean = mean_model_matrix(&parse_mean("1").unwrap().terms, &d).unwrap();
        let cov = CovarianceModel::build(&parse_cov("I + spl3(x)").unwrap().terms, &d).unwrap();
        let err = gls(&d, &mean, &cov, &[0.01, 5.0], &[1.0, 2.0, 0.0, 3.0]).unwrap_err();
        assert!(matches!(err, Error::MissingTrend { .. }), "{err}");
    }

    #[test]
    fn fit_rejects_non_identifiable_and_degenerate() {
        let d = Design::new(8)
            .with_factor("A", &["a", "a", "b", "b", "a", "a", "b", "b"])
            .unwrap()
            .with_factor("B", &["c", "d", "c", "d", "c", "d", "c", "d"])
            .unwrap();
        let mean = mean_model_matrix(&parse_mean("A.B").unwrap().terms, &d).unwrap();
        let cov = CovarianceModel::build(&parse_cov("I + E(A)").unwrap().terms, &d).unwrap();
        let y = [1.0, 2.0, 3.0, 4.0, 1.5, 2.5, 2.0, 5.0];
        assert!(matches!(
            fit_reml(&d, &mean, &cov, &y, &FitConfig::default()),
            Err(Error::NotIdentifiable(_))
        ));
        let mean = mean_model_matrix(&parse_mean("1").unwrap().terms, &d).unwrap();
        assert!(matches!(
            fit_reml(&d, &mean, &cov, &[3.0; 8], &FitConfig::default()),
            Err(Error::DegenerateResponse)
        ));
    }
}
