//! Python bindings. Results cross the boundary as plain dicts and lists
//! built from the same JSON shapes the command-line reports use.

#[pyo3::pymodule]
mod neoclassical {
    use nalgebra::DMatrix;
    use neoclassical_core as core;
    use pyo3::exceptions::{PyRuntimeError, PyValueError};
    use pyo3::prelude::*;
    use serde::Serialize;

    pyo3::create_exception!(neoclassical, ModelError, pyo3::exceptions::PyException);

    #[pymodule_export]
    const NEW: &str = core::NEW_LEVEL;

    #[pymodule_init]
    fn init(m: &Bound<'_, PyModule>) -> PyResult<()> {
        m.add("ModelError", m.py().get_type::<ModelError>())
    }

    fn model_err(e: core::Error) -> PyErr {
        ModelError::new_err(e.to_string())
    }

    fn formula_err(e: core::FormulaError) -> PyErr {
        PyValueError::new_err(e.to_string())
    }

    fn to_py<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
        let text =
            serde_json::to_string(value).map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        py.import("json")?.call_method1("loads", (text,))
    }

    fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        m.row_iter().map(|r| r.iter().copied().collect()).collect()
    }

    fn factor_expr(term: &str) -> PyResult<core::FactorExpr> {
        match term.split('.').map(str::trim).collect::<Vec<_>>()[..] {
            [a] if !a.is_empty() => Ok(core::FactorExpr::Single(a.into())),
            [a, b] if !a.is_empty() && !b.is_empty() => {
                Ok(core::FactorExpr::Cross(a.into(), b.into()))
            }
            _ => Err(PyValueError::new_err(format!(
                "`{term}` is not a factor or a two-factor cross"
            ))),
        }
    }

    fn build(
        design: &core::Design,
        mean: &str,
        cov: &str,
    ) -> PyResult<(core::MeanModel, core::CovarianceModel)> {
        let mean_terms = core::parse_mean(mean).map_err(formula_err)?.terms;
        let cov_terms = core::parse_cov(cov).map_err(formula_err)?.terms;
        Ok((
            core::mean_model_matrix(&mean_terms, design).map_err(model_err)?,
            core::CovarianceModel::build(&cov_terms, design).map_err(model_err)?,
        ))
    }

    /// Units with their treatment factors and numeric covariates.
    #[pyclass(name = "Design", skip_from_py_object)]
    #[derive(Clone)]
    pub struct PyDesign {
        inner: core::Design,
    }

    #[pymethods]
    impl PyDesign {
        #[new]
        fn new(n_units: usize) -> Self {
            Self {
                inner: core::Design::new(n_units),
            }
        }

        fn add_factor(&mut self, name: &str, labels: Vec<String>) -> PyResult<()> {
            self.inner.add_factor(name, &labels).map_err(model_err)?;
            Ok(())
        }

        fn add_covariate(&mut self, name: &str, values: Vec<f64>) -> PyResult<()> {
            self.inner.add_covariate(name, values).map_err(model_err)?;
            Ok(())
        }

        #[getter]
        fn n_units(&self) -> usize {
            self.inner.n_units()
        }

        #[getter]
        fn factors(&self) -> Vec<String> {
            self.inner.factors().keys().cloned().collect()
        }

        #[getter]
        fn covariates(&self) -> Vec<String> {
            self.inner.covariates().keys().cloned().collect()
        }

        /// The n×n block relation `XXᵀ` of a factor or a cross `A.B`.
        fn block_relation(&self, term: &str) -> PyResult<Vec<Vec<f64>>> {
            let f = self
                .inner
                .factor_expr(&factor_expr(term)?)
                .map_err(model_err)?;
            Ok(rows(core::forget(&core::indicator(&f)).matrix()))
        }

        /// Mean model matrix columns for a formula such as `1 + A + x`.
        fn mean_matrix(&self, formula: &str) -> PyResult<Vec<Vec<f64>>> {
            let terms = core::parse_mean(formula).map_err(formula_err)?.terms;
            Ok(rows(
                core::mean_model_matrix(&terms, &self.inner)
                    .map_err(model_err)?
                    .matrix(),
            ))
        }

        fn is_ring(&self, formula: &str) -> PyResult<bool> {
            let terms = core::parse_mean(formula).map_err(formula_err)?.terms;
            Ok(core::is_ring(
                &core::mean_model_matrix(&terms, &self.inner).map_err(model_err)?,
            ))
        }

        fn deletion_closure_check(
            &self,
            formula: &str,
            factor: &str,
            level: &str,
        ) -> PyResult<bool> {
            let terms = core::parse_mean(formula).map_err(formula_err)?.terms;
            core::deletion_closure_check(&terms, &self.inner, factor, level).map_err(model_err)
        }

        fn __repr__(&self) -> String {
            format!(
                "Design(n_units={}, factors={:?}, covariates={:?})",
                self.inner.n_units(),
                self.factors(),
                self.covariates()
            )
        }
    }

    /// Canonical form of a mean formula.
    #[pyfunction]
    fn parse_mean(text: &str) -> PyResult<String> {
        Ok(core::parse_mean(text).map_err(formula_err)?.to_string())
    }

    /// Canonical form of a covariance formula.
    #[pyfunction]
    fn parse_cov(text: &str) -> PyResult<String> {
        Ok(core::parse_cov(text).map_err(formula_err)?.to_string())
    }

    #[pyfunction]
    fn generator_matrix(design: &PyDesign, term: &str) -> PyResult<Vec<Vec<f64>>> {
        if term.contains('+') {
            return Err(PyValueError::new_err("expected a single covariance term"));
        }
        // the parser always supplies `I`, so the requested term is the last one
        let terms = core::parse_cov(term).map_err(formula_err)?.terms;
        let t = terms.last().expect("parsed formula has at least one term");
        Ok(rows(
            &core::generator_matrix(t, &design.inner).map_err(model_err)?,
        ))
    }

    /// Whether two covariance formulas span the same space of matrices on this design.
    #[pyfunction]
    fn span_equal(design: &PyDesign, cov_a: &str, cov_b: &str) -> PyResult<bool> {
        let build = |f: &str| -> PyResult<core::CovarianceModel> {
            let terms = core::parse_cov(f).map_err(formula_err)?.terms;
            core::CovarianceModel::build(&terms, &design.inner).map_err(model_err)
        };
        core::span_equal(build(cov_a)?.generators(), build(cov_b)?.generators()).map_err(model_err)
    }

    #[pyfunction]
    fn identify<'py>(
        py: Python<'py>,
        design: &PyDesign,
        mean: &str,
        cov: &str,
    ) -> PyResult<Bound<'py, PyAny>> {
        let (m, c) = build(&design.inner, mean, cov)?;
        to_py(
            py,
            &core::identifiability_report(&m, &c).map_err(model_err)?,
        )
    }

    /// A REML fit with BLUP-based prediction.
    #[pyclass(name = "FittedModel", skip_from_py_object)]
    pub struct PyFitted {
        inner: core::FittedModel,
    }

    #[pyfunction]
    #[pyo3(signature = (design, y, mean, cov, max_iterations = None))]
    fn fit(
        design: &PyDesign,
        y: Vec<f64>,
        mean: &str,
        cov: &str,
        max_iterations: Option<usize>,
    ) -> PyResult<PyFitted> {
        let mean_terms = core::parse_mean(mean).map_err(formula_err)?.terms;
        let cov_terms = core::parse_cov(cov).map_err(formula_err)?.terms;
        let mut config = core::FitConfig::default();
        if let Some(n) = max_iterations {
            config.max_iterations = n;
        }
        let inner =
            core::FittedModel::fit(design.inner.clone(), &mean_terms, &cov_terms, y, &config)
                .map_err(model_err)?;
        Ok(PyFitted { inner })
    }

    #[pymethods]
    impl PyFitted {
        #[getter]
        fn components(&self) -> Vec<f64> {
            self.inner.result().components.clone()
        }

        #[getter]
        fn terms(&self) -> Vec<String> {
            self.inner.result().terms.clone()
        }

        #[getter]
        fn beta(&self) -> Vec<f64> {
            self.inner.result().beta.clone()
        }

        #[getter]
        fn converged(&self) -> bool {
            self.inner.result().converged
        }

        #[getter]
        fn reml_loglik(&self) -> f64 {
            self.inner.result().reml_loglik
        }

        /// Full fit summary as a dict.
        fn summary<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
            to_py(py, self.inner.result())
        }

        /// Predicts a unit given as `"A=a1,x=0.5"`; `A=NEW` is an unobserved level.
        fn predict<'py>(&self, py: Python<'py>, unit: &str) -> PyResult<Bound<'py, PyAny>> {
            let u = core::NewUnit::parse(unit, self.inner.design()).map_err(model_err)?;
            to_py(py, &self.inner.blup_point(&u).map_err(model_err)?)
        }

        fn contrast<'py>(
            &self,
            py: Python<'py>,
            unit_a: &str,
            unit_b: &str,
        ) -> PyResult<Bound<'py, PyAny>> {
            let d = self.inner.design();
            let a = core::NewUnit::parse(unit_a, d).map_err(model_err)?;
            let b = core::NewUnit::parse(unit_b, d).map_err(model_err)?;
            to_py(py, &self.inner.blup_contrast(&a, &b).map_err(model_err)?)
        }

        fn effects<'py>(&self, py: Python<'py>, term: &str) -> PyResult<Bound<'py, PyAny>> {
            to_py(
                py,
                &self
                    .inner
                    .effect_predict(&factor_expr(term)?)
                    .map_err(model_err)?,
            )
        }

        fn curve(&self, covariate: &str, grid: Vec<f64>) -> PyResult<Vec<f64>> {
            self.inner
                .prediction_curve(covariate, &grid)
                .map_err(model_err)
        }

        fn spline_check<'py>(
            &self,
            py: Python<'py>,
            covariate: &str,
            grid: Vec<f64>,
        ) -> PyResult<Bound<'py, PyAny>> {
            to_py(
                py,
                &self
                    .inner
                    .spline_property_check(covariate, &grid)
                    .map_err(model_err)?,
            )
        }

        fn piecewise_linear_check<'py>(
            &self,
            py: Python<'py>,
            covariate: &str,
            grid: Vec<f64>,
        ) -> PyResult<Bound<'py, PyAny>> {
            to_py(
                py,
                &self
                    .inner
                    .piecewise_linear_check(covariate, &grid)
                    .map_err(model_err)?,
            )
        }
    }

    #[pyfunction]
    #[pyo3(signature = (y, method = "direct"))]
    fn periodogram<'py>(py: Python<'py>, y: Vec<f64>, method: &str) -> PyResult<Bound<'py, PyAny>> {
        let method = match method {
            "direct" => core::SpectralMethod::Direct,
            "fft" => core::SpectralMethod::Fft,
            other => return Err(PyValueError::new_err(format!("unknown method `{other}`"))),
        };
        to_py(
            py,
            &core::periodogram_anova_with(&y, method).map_err(model_err)?,
        )
    }

    #[pyfunction]
    #[pyo3(signature = (y, divisor = "totals"))]
    fn yates<'py>(py: Python<'py>, y: Vec<f64>, divisor: &str) -> PyResult<Bound<'py, PyAny>> {
        let divisor = match divisor {
            "totals" => core::Divisor::Totals,
            "effects" => core::Divisor::Effects,
            other => return Err(PyValueError::new_err(format!("unknown divisor `{other}`"))),
        };
        to_py(py, &core::yates_transform(&y, divisor).map_err(model_err)?)
    }
}
