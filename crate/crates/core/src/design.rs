//! Units, treatment factors, block factors and the factor algebra on them.
//!
//! A treatment factor assigns a labelled level to every unit. Its indicator
//! matrix has one column per level; the forgetful map `E = X Xᵀ` turns it
//! into a block factor, an equivalence relation on the units in which the
//! level names no longer appear.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;

/// A categorical assignment of one level per unit.
///
/// Levels are kept in order of first occurrence and every listed level is
/// used by at least one unit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreatmentFactor {
    name: String,
    levels: Vec<String>,
    assignment: Vec<usize>,
}

impl TreatmentFactor {
    /// Builds a factor from per-unit labels.
    pub fn from_labels<S: AsRef<str>>(name: impl Into<String>, labels: &[S]) -> Self {
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut levels = Vec::new();
        let mut assignment = Vec::with_capacity(labels.len());
        for label in labels {
            let label = label.as_ref();
            let next = levels.len();
            let idx = *index.entry(label).or_insert_with(|| {
                levels.push(label.to_string());
                next
            });
            assignment.push(idx);
        }
        Self {
            name: name.into(),
            levels,
            assignment,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn levels(&self) -> &[String] {
        &self.levels
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn n_units(&self) -> usize {
        self.assignment.len()
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn level_of(&self, unit: usize) -> &str {
        &self.levels[self.assignment[unit]]
    }

    pub fn level_index(&self, label: &str) -> Option<usize> {
        self.levels.iter().position(|l| l == label)
    }

    /// Per-unit labels, in unit order.
    pub fn labels(&self) -> Vec<&str> {
        self.assignment
            .iter()
            .map(|&i| self.levels[i].as_str())
            .collect()
    }

    /// The same factor on the subset `keep` of units; levels that disappear are dropped.
    pub fn restrict(&self, keep: &[usize]) -> Self {
        let labels: Vec<&str> = keep.iter().map(|&u| self.level_of(u)).collect();
        Self::from_labels(self.name.clone(), &labels)
    }
}

/// Level label of a crossed factor. Dots and backslashes in the components
/// are escaped so that distinct pairs never share a label.
pub fn cross_label(a: &str, b: &str) -> String {
    fn esc(s: &str) -> String {
        s.replace('\\', "\\\\").replace('.', "\\.")
    }
    format!("{}.{}", esc(a), esc(b))
}

/// Crossed factor `A.B`: the level on unit i is the pair (A(i), B(i)).
/// Only observed pairs become levels.
pub fn cross(a: &TreatmentFactor, b: &TreatmentFactor) -> Result<TreatmentFactor> {
    if a.n_units() != b.n_units() {
        return Err(Error::UnitCountMismatch {
            expected: a.n_units(),
            found: b.n_units(),
        });
    }
    let labels: Vec<String> = (0..a.n_units())
        .map(|u| cross_label(a.level_of(u), b.level_of(u)))
        .collect();
    Ok(TreatmentFactor::from_labels(
        format!("{}.{}", a.name(), b.name()),
        &labels,
    ))
}

/// Unit-by-level 0/1 matrix with exactly one 1 per row.
#[derive(Debug, Clone, PartialEq)]
pub struct IndicatorMatrix(DMatrix<f64>);

impl IndicatorMatrix {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    /// Reorders the columns; used to check that the forgetful map ignores level names.
    pub fn permute_columns(&self, order: &[usize]) -> Self {
        let m = &self.0;
        let mut out = DMatrix::zeros(m.nrows(), m.ncols());
        for (dst, &src) in order.iter().enumerate() {
            out.set_column(dst, &m.column(src));
        }
        Self(out)
    }
}

pub fn indicator(factor: &TreatmentFactor) -> IndicatorMatrix {
    let mut x = DMatrix::zeros(factor.n_units(), factor.n_levels());
    for (u, &lvl) in factor.assignment().iter().enumerate() {
        x[(u, lvl)] = 1.0;
    }
    IndicatorMatrix(x)
}

/// Symmetric unit-by-unit relation matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockRelation {
    matrix: DMatrix<f64>,
    is_equivalence: bool,
}

impl BlockRelation {
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.matrix
    }

    pub fn is_equivalence(&self) -> bool {
        self.is_equivalence
    }

    pub fn is_symmetric(&self) -> bool {
        linalg::is_symmetric(&self.matrix)
    }

    pub fn is_reflexive(&self) -> bool {
        (0..self.matrix.nrows()).all(|i| self.matrix[(i, i)] == 1.0)
    }

    /// `E_ij = E_jk = 1` implies `E_ik = 1`, checked over all triples.
    pub fn is_transitive(&self) -> bool {
        let e = &self.matrix;
        let n = e.nrows();
        (0..n).all(|i| {
            (0..n).all(|j| e[(i, j)] != 1.0 || (0..n).all(|k| e[(j, k)] != 1.0 || e[(i, k)] == 1.0))
        })
    }
}

/// The forgetful map `E = X Xᵀ`.
pub fn forget(x: &IndicatorMatrix) -> BlockRelation {
    let m = x.matrix();
    let mut e = m * m.transpose();
    linalg::symmetrize(&mut e);
    BlockRelation {
        matrix: e,
        is_equivalence: true,
    }
}

/// The unit set with its treatment factors and quantitative covariates.
#[derive(Debug, Clone, PartialEq)]
pub struct Design {
    n_units: usize,
    factors: BTreeMap<String, TreatmentFactor>,
    covariates: BTreeMap<String, Vec<f64>>,
}

impl Design {
    pub fn new(n_units: usize) -> Self {
        Self {
            n_units,
            factors: BTreeMap::new(),
            covariates: BTreeMap::new(),
        }
    }

    fn check_name(&self, name: &str, len: usize) -> Result<()> {
        if name.is_empty() {
            return Err(Error::InvalidDesign("empty variable name".into()));
        }
        if self.factors.contains_key(name) || self.covariates.contains_key(name) {
            return Err(Error::InvalidDesign(format!("duplicate variable `{name}`")));
        }
        if len != self.n_units {
            return Err(Error::UnitCountMismatch {
                expected: self.n_units,
                found: len,
            });
        }
        Ok(())
    }

    pub fn add_factor<S: AsRef<str>>(&mut self, name: &str, labels: &[S]) -> Result<&mut Self> {
        self.check_name(name, labels.len())?;
        self.factors
            .insert(name.to_string(), TreatmentFactor::from_labels(name, labels));
        Ok(self)
    }

    pub fn add_covariate(&mut self, name: &str, values: Vec<f64>) -> Result<&mut Self> {
        self.check_name(name, values.len())?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.to_string()));
        }
        self.covariates.insert(name.to_string(), values);
        Ok(self)
    }

    /// Builder-style variant of [`Design::add_factor`].
    pub fn with_factor<S: AsRef<str>>(mut self, name: &str, labels: &[S]) -> Result<Self> {
        self.add_factor(name, labels)?;
        Ok(self)
    }

    pub fn with_covariate(mut self, name: &str, values: Vec<f64>) -> Result<Self> {
        self.add_covariate(name, values)?;
        Ok(self)
    }

    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn factors(&self) -> &BTreeMap<String, TreatmentFactor> {
        &self.factors
    }

    pub fn covariates(&self) -> &BTreeMap<String, Vec<f64>> {
        &self.covariates
    }

    pub fn factor(&self, name: &str) -> Result<&TreatmentFactor> {
        match self.factors.get(name) {
            Some(f) => Ok(f),
            None if self.covariates.contains_key(name) => Err(Error::NotAFactor(name.to_string())),
            None => Err(Error::UnknownName(name.to_string())),
        }
    }

    pub fn covariate(&self, name: &str) -> Result<&[f64]> {
        self.covariates
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownName(name.to_string()))
    }

    /// Resolves a single factor or a two-factor cross.
    pub fn factor_expr(&self, expr: &FactorExpr) -> Result<TreatmentFactor> {
        match expr {
            FactorExpr::Single(a) => Ok(self.factor(a)?.clone()),
            FactorExpr::Cross(a, b) => cross(self.factor(a)?, self.factor(b)?),
        }
    }

    /// The design on the units in `keep`, in that order.
    pub fn restrict(&self, keep: &[usize]) -> Design {
        Design {
            n_units: keep.len(),
            factors: self
                .factors
                .iter()
                .map(|(k, f)| (k.clone(), f.restrict(keep)))
                .collect(),
            covariates: self
                .covariates
                .iter()
                .map(|(k, v)| (k.clone(), keep.iter().map(|&u| v[u]).collect()))
                .collect(),
        }
    }
}

/// A factor reference inside a formula: `A` or `A.B`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FactorExpr {
    Single(String),
    Cross(String, String),
}

impl FactorExpr {
    pub fn names(&self) -> Vec<&str> {
        match self {
            FactorExpr::Single(a) => vec![a],
            FactorExpr::Cross(a, b) => vec![a, b],
        }
    }
}

impl fmt::Display for FactorExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FactorExpr::Single(a) => write!(f, "{a}"),
            FactorExpr::Cross(a, b) => write!(f, "{a}.{b}"),
        }
    }
}

/// One term of a mean formula. Whether `Name` is a factor or a covariate
/// is decided against the design.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MeanTerm {
    Intercept,
    Name(String),
    Cross(String, String),
}

impl fmt::Display for MeanTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeanTerm::Intercept => write!(f, "1"),
            MeanTerm::Name(a) => write!(f, "{a}"),
            MeanTerm::Cross(a, b) => write!(f, "{a}.{b}"),
        }
    }
}

/// What a column of the model matrix encodes.
#[derive(Debug, Clone, PartialEq)]
pub enum MeanColumn {
    Intercept,
    Level {
        factor: String,
        level: String,
    },
    Cell {
        factors: (String, String),
        levels: (String, String),
    },
    Covariate(String),
}

impl fmt::Display for MeanColumn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MeanColumn::Intercept => write!(f, "1"),
            MeanColumn::Level { factor, level } => write!(f, "{factor}[{level}]"),
            MeanColumn::Cell { factors, levels } => {
                write!(
                    f,
                    "{}.{}[{}]",
                    factors.0,
                    factors.1,
                    cross_label(&levels.0, &levels.1)
                )
            }
            MeanColumn::Covariate(x) => write!(f, "{x}"),
        }
    }
}

/// A model matrix together with the terms that generated it.
///
/// Only the column span is meaningful; the basis depends on level order.
#[derive(Debug, Clone)]
pub struct MeanModel {
    terms: Vec<MeanTerm>,
    columns: Vec<MeanColumn>,
    matrix: DMatrix<f64>,
    rank: usize,
}

impl MeanModel {
    pub fn terms(&self) -> &[MeanTerm] {
        &self.terms
    }

    pub fn columns(&self) -> &[MeanColumn] {
        &self.columns
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn n_units(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn residual_df(&self) -> usize {
        self.n_units() - self.rank
    }

    /// Whether `v` lies in the column span.
    pub fn contains(&self, v: &DVector<f64>) -> bool {
        linalg::vector_in_span(&self.matrix, v)
    }

    /// True iff the column span contains `1` and is closed under entrywise products.
    pub fn is_ring(&self) -> bool {
        let n = self.n_units();
        if !self.contains(&DVector::from_element(n, 1.0)) {
            return false;
        }
        let p = self.matrix.ncols();
        if p == 0 {
            return n == 0;
        }
        let mut products = DMatrix::zeros(n, p * (p + 1) / 2);
        let mut c = 0;
        for i in 0..p {
            for j in i..p {
                let prod = self.matrix.column(i).component_mul(&self.matrix.column(j));
                products.set_column(c, &prod);
                c += 1;
            }
        }
        linalg::span_contains(&self.matrix, &products)
    }
}

/// Builds the model matrix for `terms` by concatenating indicator and covariate columns.
pub fn mean_model_matrix(terms: &[MeanTerm], design: &Design) -> Result<MeanModel> {
    let n = design.n_units();
    let mut cols: Vec<DVector<f64>> = Vec::new();
    let mut columns = Vec::new();
    for term in terms {
        match term {
            MeanTerm::Intercept => {
                cols.push(DVector::from_element(n, 1.0));
                columns.push(MeanColumn::Intercept);
            }
            MeanTerm::Name(name) => {
                if let Some(f) = design.factors().get(name) {
                    let x = indicator(f).into_inner();
                    for (j, level) in f.levels().iter().enumerate() {
                        cols.push(x.column(j).into_owned());
                        columns.push(MeanColumn::Level {
                            factor: name.clone(),
                            level: level.clone(),
                        });
                    }
                } else {
                    let x = design.covariate(name)?;
                    cols.push(DVector::from_column_slice(x));
                    columns.push(MeanColumn::Covariate(name.clone()));
                }
            }
            MeanTerm::Cross(a, b) => {
                let fa = design.factor(a)?;
                let fb = design.factor(b)?;
                // Observed cells in order of first occurrence.
                let mut cells: Vec<(usize, usize)> = Vec::new();
                let mut cell_of = Vec::with_capacity(n);
                for u in 0..n {
                    let key = (fa.assignment()[u], fb.assignment()[u]);
                    let idx = match cells.iter().position(|c| *c == key) {
                        Some(i) => i,
                        None => {
                            cells.push(key);
                            cells.len() - 1
                        }
                    };
                    cell_of.push(idx);
                }
                for (j, &(la, lb)) in cells.iter().enumerate() {
                    cols.push(DVector::from_iterator(
                        n,
                        cell_of.iter().map(|&c| if c == j { 1.0 } else { 0.0 }),
                    ));
                    columns.push(MeanColumn::Cell {
                        factors: (a.clone(), b.clone()),
                        levels: (fa.levels()[la].clone(), fb.levels()[lb].clone()),
                    });
                }
            }
        }
    }
    let matrix = if cols.is_empty() {
        DMatrix::zeros(n, 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    let rank = linalg::rank(&matrix);
    Ok(MeanModel {
        terms: terms.to_vec(),
        columns,
        matrix,
        rank,
    })
}

pub fn is_ring(model: &MeanModel) -> bool {
    model.is_ring()
}

/// Checks that deleting one level of a factor commutes with building the
/// model: restricting the rows of the model matrix spans the same space as
/// the model rebuilt on the surviving units.
pub fn deletion_closure_check(
    terms: &[MeanTerm],
    design: &Design,
    factor_name: &str,
    level: &str,
) -> Result<bool> {
    let factor = design.factor(factor_name)?;
    let level_idx = factor
        .level_index(level)
        .ok_or_else(|| Error::UnknownLevel {
            factor: factor_name.to_string(),
            level: level.to_string(),
        })?;
    let keep: Vec<usize> = (0..design.n_units())
        .filter(|&u| factor.assignment()[u] != level_idx)
        .collect();
    if keep.is_empty() {
        return Err(Error::EmptyRestriction {
            factor: factor_name.to_string(),
            level: level.to_string(),
        });
    }
    let full = mean_model_matrix(terms, design)?;
    let restricted = full.matrix().select_rows(keep.iter());
    let rebuilt = mean_model_matrix(terms, &design.restrict(&keep))?;
    Ok(linalg::spans_equal(&restricted, rebuilt.matrix()))
}
