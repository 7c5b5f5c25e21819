//! Linear covariance models `V = Σ σ²_k G_k`.
//!
//! Generators come from block factors (`E = X Xᵀ`) and from kernels on a
//! quantitative covariate. The Brownian and cubic kernels are generalized
//! covariances: they are positive definite only on contrasts that annihilate
//! polynomials of degree below their `cpd_order`, so any model using them
//! needs those polynomials in the mean.
//!
//! `random_slope` (`x xᵀ`) is kept so that random-coefficient models can be
//! examined, but its span changes under affine recoding of `x` (°C versus °F);
//! see [`span_equal`].

use std::fmt;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::design::{forget, indicator, Design, FactorExpr};
use crate::error::{Error, Result};
use crate::linalg;

/// Relative eigenvalue tolerance for [`conditional_pd_check`].
pub const EIGEN_RTOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `1 + [x = x']`
    Exchangeable,
    /// `-|x - x'|`
    Brownian,
    /// `|x - x'|³`
    Cubic,
    /// `x x'`
    RandomSlope,
}

impl KernelKind {
    /// Degree of the polynomials the kernel must be contrasted against.
    pub fn cpd_order(self) -> usize {
        match self {
            KernelKind::Exchangeable | KernelKind::RandomSlope => 0,
            KernelKind::Brownian => 1,
            KernelKind::Cubic => 2,
        }
    }

    /// Formula keyword.
    pub fn keyword(self) -> &'static str {
        match self {
            KernelKind::Exchangeable => "exch",
            KernelKind::Brownian => "bm",
            KernelKind::Cubic => "spl3",
            KernelKind::RandomSlope => "slope",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        Some(match s {
            "exch" => KernelKind::Exchangeable,
            "bm" => KernelKind::Brownian,
            "spl3" => KernelKind::Cubic,
            "slope" => KernelKind::RandomSlope,
            _ => return None,
        })
    }

    pub fn eval(self, a: f64, b: f64) -> f64 {
        match self {
            KernelKind::Exchangeable => {
                if a == b {
                    2.0
                } else {
                    1.0
                }
            }
            KernelKind::Brownian => -(a - b).abs(),
            KernelKind::Cubic => (a - b).abs().powi(3),
            KernelKind::RandomSlope => a * b,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum CovarianceTerm {
    Identity,
    Block(FactorExpr),
    Kernel(KernelKind, String),
}

impl CovarianceTerm {
    pub fn cpd_order(&self) -> usize {
        match self {
            CovarianceTerm::Kernel(kind, _) => kind.cpd_order(),
            _ => 0,
        }
    }
}

impl fmt::Display for CovarianceTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CovarianceTerm::Identity => write!(f, "I"),
            CovarianceTerm::Block(e) => write!(f, "E({e})"),
            CovarianceTerm::Kernel(k, x) => write!(f, "{}({x})", k.keyword()),
        }
    }
}

/// Generator matrix of a single covariance term on the design's units.
pub fn generator_matrix(term: &CovarianceTerm, design: &Design) -> Result<DMatrix<f64>> {
    let n = design.n_units();
    match term {
        CovarianceTerm::Identity => Ok(DMatrix::identity(n, n)),
        CovarianceTerm::Block(expr) => {
            let f = design.factor_expr(expr)?;
            Ok(forget(&indicator(&f)).into_inner())
        }
        CovarianceTerm::Kernel(kind, name) => {
            let x = design.covariate(name)?;
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.clone()));
            }
            Ok(kernel_matrix(*kind, x))
        }
    }
}

pub fn kernel_matrix(kind: KernelKind, x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| kind.eval(x[i], x[j]))
}

/// An ordered list of covariance terms and their generators on a design.
/// The identity comes first, exactly once.
#[derive(Debug, Clone)]
pub struct CovarianceModel {
    terms: Vec<CovarianceTerm>,
    generators: Vec<DMatrix<f64>>,
}

impl CovarianceModel {
    pub fn build(terms: &[CovarianceTerm], design: &Design) -> Result<Self> {
        if terms.first() != Some(&CovarianceTerm::Identity) {
            return Err(Error::InvalidCovariance(
                "the identity term must come first".into(),
            ));
        }
        if terms
            .iter()
            .filter(|t| **t == CovarianceTerm::Identity)
            .count()
            != 1
        {
            return Err(Error::InvalidCovariance(
                "the identity term must appear exactly once".into(),
            ));
        }
        let generators = terms
            .iter()
            .map(|t| generator_matrix(t, design))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            terms: terms.to_vec(),
            generators,
        })
    }

    /// Model from explicit generators; the first must be the identity.
    pub fn from_generators(
        terms: Vec<CovarianceTerm>,
        generators: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        if terms.len() != generators.len() || terms.is_empty() {
            return Err(Error::InvalidCovariance(
                "need one generator per term".into(),
            ));
        }
        if terms[0] != CovarianceTerm::Identity
            || terms.iter().skip(1).any(|t| *t == CovarianceTerm::Identity)
        {
            return Err(Error::InvalidCovariance(
                "the identity term must appear exactly once, first".into(),
            ));
        }
        let n = generators[0].nrows();
        if generators
            .iter()
            .any(|g| g.shape() != (n, n) || !linalg::is_symmetric(g))
        {
            return Err(Error::ShapeMismatch(
                "generators must be symmetric and of equal size".into(),
            ));
        }
        Ok(Self { terms, generators })
    }

    pub fn terms(&self) -> &[CovarianceTerm] {
        &self.terms
    }

    pub fn generators(&self) -> &[DMatrix<f64>] {
        &self.generators
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn n_units(&self) -> usize {
        self.generators[0].nrows()
    }

    pub fn term_names(&self) -> Vec<String> {
        self.terms.iter().map(|t| t.to_string()).collect()
    }

    pub fn assemble(&self, coefficients: &[f64]) -> Result<DMatrix<f64>> {
        assemble(self, coefficients)
    }
}

pub fn validate_coefficients(model: &CovarianceModel, coefficients: &[f64]) -> Result<()> {
    if coefficients.len() != model.len() {
        return Err(Error::InvalidCoefficients(format!(
            "expected {} coefficients, got {}",
            model.len(),
            coefficients.len()
        )));
    }
    if let Some((k, c)) = coefficients
        .iter()
        .enumerate()
        .find(|(_, c)| !c.is_finite() || **c < 0.0)
    {
        return Err(Error::InvalidCoefficients(format!(
            "coefficient {c} of `{}` must be finite and nonnegative",
            model.terms[k]
        )));
    }
    if coefficients[0] <= 0.0 {
        return Err(Error::InvalidCoefficients(
            "the identity coefficient must be positive".into(),
        ));
    }
    Ok(())
}

/// `Σ_k σ²_k G_k`.
pub fn assemble(model: &CovarianceModel, coefficients: &[f64]) -> Result<DMatrix<f64>> {
    validate_coefficients(model, coefficients)?;
    Ok(combine(&model.generators, coefficients))
}

/// Unchecked linear combination of generators.
pub(crate) fn combine(generators: &[DMatrix<f64>], coefficients: &[f64]) -> DMatrix<f64> {
    let n = generators[0].nrows();
    let mut v = DMatrix::zeros(n, n);
    for (g, &c) in generators.iter().zip(coefficients) {
        if c != 0.0 {
            v += g * c;
        }
    }
    v
}

/// Whether two sets of matrices span the same linear space.
pub fn span_equal(gens_a: &[DMatrix<f64>], gens_b: &[DMatrix<f64>]) -> Result<bool> {
    let shape = gens_a
        .first()
        .or(gens_b.first())
        .map(|m| m.shape())
        .unwrap_or((0, 0));
    if gens_a.iter().chain(gens_b).any(|m| m.shape() != shape) {
        return Err(Error::ShapeMismatch(
            "all generator matrices must have the same shape".into(),
        ));
    }
    let a = linalg::vectorize_all(gens_a);
    let b = linalg::vectorize_all(gens_b);
    let len = shape.0 * shape.1;
    let a = if gens_a.is_empty() {
        DMatrix::zeros(len, 0)
    } else {
        a
    };
    let b = if gens_b.is_empty() {
        DMatrix::zeros(len, 0)
    } else {
        b
    };
    Ok(linalg::spans_equal(&a, &b))
}

/// `n x order` matrix with columns `1, x, …, x^(order-1)`.
pub fn polynomial_basis(x: &[f64], order: usize) -> DMatrix<f64> {
    DMatrix::from_fn(x.len(), order, |i, d| x[i].powi(d as i32))
}

/// Checks that `g` is positive semidefinite on the contrasts orthogonal to
/// polynomials in `x` of degree below `cpd_order`.
pub fn conditional_pd_check(g: &DMatrix<f64>, cpd_order: usize, x: Option<&[f64]>) -> Result<bool> {
    let n = g.nrows();
    if !g.is_square() {
        return Err(Error::ShapeMismatch("generator must be square".into()));
    }
    if n < cpd_order + 1 {
        return Err(Error::TooFewUnits(n, cpd_order));
    }
    let projected = if cpd_order == 0 {
        g.clone()
    } else {
        let x = x.ok_or_else(|| {
            Error::InvalidInput("covariate values are required when cpd_order > 0".into())
        })?;
        if x.len() != n {
            return Err(Error::ShapeMismatch(
                "covariate length differs from generator size".into(),
            ));
        }
        let p = polynomial_basis(x, cpd_order);
        let basis = linalg::PivotedQr::new(&p).range_basis();
        let q = DMatrix::identity(n, n) - &basis * basis.transpose();
        let mut m = &q * g * &q;
        linalg::symmetrize(&mut m);
        m
    };
    Ok(min_eigen_ok(&projected))
}

fn min_eigen_ok(m: &DMatrix<f64>) -> bool {
    if m.nrows() == 0 {
        return true;
    }
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let scale = eig.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let min = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    min >= -EIGEN_RTOL * scale
}

/// Covariate column as a vector, for span tests against a mean model.
pub(crate) fn required_trend(x: &[f64], order: usize) -> Vec<DVector<f64>> {
    (0..order)
        .map(|d| DVector::from_iterator(x.len(), x.iter().map(|v| v.powi(d as i32))))
        .collect()
}
