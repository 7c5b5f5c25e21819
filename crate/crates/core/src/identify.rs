//! Identifiability of variance components under a given mean model.
//!
//! With `Q` the orthogonal projector onto the residual space of the mean
//! model, a component can only be estimated through `Q G_k Q`. A term whose
//! projected generator vanishes is aliased with the mean; a term whose
//! projected generator is a linear combination of the others is confounded.
//! All computations use an orthonormal contrast basis `L` (`Q = L Lᵀ`), so
//! `‖Q G Q‖_F = ‖Lᵀ G L‖_F`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covariance::CovarianceModel;
use crate::design::MeanModel;
use crate::error::{Error, Result};
use crate::estimate::contrast_basis;
use crate::linalg;

/// Relative Frobenius tolerance for aliasing with the mean.
pub const ALIAS_RTOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum TermStatus {
    Identifiable,
    AliasedWithMean,
    /// `with` is a minimal dependent set found by greedy elimination in listed
    /// order; other minimal sets may exist.
    Confounded {
        with: Vec<String>,
    },
}

impl TermStatus {
    pub fn label(&self) -> &'static str {
        match self {
            TermStatus::Identifiable => "identifiable",
            TermStatus::AliasedWithMean => "aliased_with_mean",
            TermStatus::Confounded { .. } => "confounded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TermReport {
    pub term: String,
    #[serde(flatten)]
    pub status: TermStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdentifiabilityReport {
    pub terms: Vec<TermReport>,
    pub all_identifiable: bool,
    pub residual_df: usize,
}

impl IdentifiabilityReport {
    pub fn status_of(&self, term: &str) -> Option<&TermStatus> {
        self.terms
            .iter()
            .find(|t| t.term == term)
            .map(|t| &t.status)
    }

    /// One-line description of the problem terms, or "all identifiable".
    pub fn summary(&self) -> String {
        let bad: Vec<String> = self
            .terms
            .iter()
            .filter(|t| t.status != TermStatus::Identifiable)
            .map(|t| match &t.status {
                TermStatus::Confounded { with } => {
                    format!("{} confounded with {}", t.term, with.join(", "))
                }
                s => format!("{} {}", t.term, s.label()),
            })
            .collect();
        if bad.is_empty() {
            "all identifiable".into()
        } else {
            bad.join("; ")
        }
    }
}

pub fn identifiability_report(
    mean: &MeanModel,
    cov: &CovarianceModel,
) -> Result<IdentifiabilityReport> {
    if mean.n_units() != cov.n_units() {
        return Err(Error::UnitCountMismatch {
            expected: mean.n_units(),
            found: cov.n_units(),
        });
    }
    let l = contrast_basis(mean.matrix())?;
    let projected: Vec<DMatrix<f64>> = cov
        .generators()
        .iter()
        .map(|g| linalg::congruence(&l, g))
        .collect();
    let names = cov.term_names();

    let aliased: Vec<bool> = cov
        .generators()
        .iter()
        .zip(&projected)
        .map(|(g, pg)| pg.norm() <= ALIAS_RTOL * g.norm())
        .collect();
    let live: Vec<usize> = (0..names.len()).filter(|&k| !aliased[k]).collect();

    let mut terms = Vec::with_capacity(names.len());
    for k in 0..names.len() {
        let status = if aliased[k] {
            TermStatus::AliasedWithMean
        } else {
            let others: Vec<usize> = live.iter().copied().filter(|&j| j != k).collect();
            match minimal_dependent_set(&projected, k, &others) {
                Some(set) => TermStatus::Confounded {
                    with: set.into_iter().map(|j| names[j].clone()).collect(),
                },
                None => TermStatus::Identifiable,
            }
        };
        terms.push(TermReport {
            term: names[k].clone(),
            status,
        });
    }
    let all_identifiable = terms.iter().all(|t| t.status == TermStatus::Identifiable);
    Ok(IdentifiabilityReport {
        terms,
        all_identifiable,
        residual_df: mean.residual_df(),
    })
}

fn in_span(projected: &[DMatrix<f64>], target: usize, set: &[usize]) -> bool {
    let basis: Vec<DMatrix<f64>> = set.iter().map(|&j| projected[j].clone()).collect();
    let len = projected[target].len();
    let a = if basis.is_empty() {
        DMatrix::zeros(len, 0)
    } else {
        linalg::vectorize_all(&basis)
    };
    let b = linalg::vectorize_all(std::slice::from_ref(&projected[target]));
    linalg::span_contains(&a, &b)
}

/// Greedy leave-one-out reduction of `candidates` to a minimal set whose
/// span still contains the target, or `None` if the target is independent.
fn minimal_dependent_set(
    projected: &[DMatrix<f64>],
    target: usize,
    candidates: &[usize],
) -> Option<Vec<usize>> {
    if !in_span(projected, target, candidates) {
        return None;
    }
    let mut set = candidates.to_vec();
    let mut i = 0;
    while i < set.len() {
        let mut trial = set.clone();
        trial.remove(i);
        if in_span(projected, target, &trial) {
            set = trial;
        } else {
            i += 1;
        }
    }
    Some(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{mean_model_matrix, Design};
    use crate::formula::{parse_cov, parse_mean};

    fn cross_design(levels_a: usize, levels_b: usize, reps: usize) -> Design {
        let mut a = Vec::new();
        let mut b = Vec::new();
        for _ in 0..reps {
            for i in 0..levels_a {
                for j in 0..levels_b {
                    a.push(format!("a{i}"));
                    b.push(format!("b{j}"));
                }
            }
        }
        Design::new(a.len())
            .with_factor("A", &a)
            .unwrap()
            .with_factor("B", &b)
            .unwrap()
    }

    fn report(mean: &str, cov: &str, d: &Design) -> Result<IdentifiabilityReport> {
        let m = mean_model_matrix(&parse_mean(mean).unwrap().terms, d)?;
        let c = CovarianceModel::build(&parse_cov(cov).unwrap().terms, d)?;
        identifiability_report(&m, &c)
    }

    #[test]
    fn interaction_in_mean_aliases_everything() {
        let d = cross_design(2, 2, 2);
        let r = report("A.B", "I + E(A) + E(B) + E(A.B)", &d).unwrap();
        assert_eq!(r.status_of("I"), Some(&TermStatus::Identifiable));
        for t in ["E(A)", "E(B)", "E(A.B)"] {
            assert_eq!(r.status_of(t), Some(&TermStatus::AliasedWithMean), "{t}");
        }
        assert!(!r.all_identifiable);
    }

    #[test]
    fn additive_mean_with_interaction_variance() {
        let d = cross_design(2, 3, 2);
        let r = report("1 + A + B", "I + E(A.B)", &d).unwrap();
        assert!(r.all_identifiable, "{}", r.summary());
    }

    #[test]
    fn singleton_cells_confound_interaction_with_identity() {
        let d = cross_design(2, 3, 1);
        let r = report("1 + A + B", "I + E(A.B)", &d).unwrap();
        assert_eq!(
            r.status_of("E(A.B)"),
            Some(&TermStatus::Confounded {
                with: vec!["I".into()]
            })
        );
        assert_eq!(
            r.status_of("I"),
            Some(&TermStatus::Confounded {
                with: vec!["E(A.B)".into()]
            })
        );
    }

    #[test]
    fn saturated_mean_is_an_error() {
        let d = cross_design(2, 2, 1);
        assert!(matches!(
            report("A.B", "I + E(A)", &d),
            Err(Error::Saturated)
        ));
    }

    #[test]
    fn greedy_set_is_minimal() {
        // G3 = G1 + G2 after projection, G4 independent.
        let n = 5;
        let e = |i: usize, j: usize| {
            let mut m = DMatrix::zeros(n, n);
            m[(i, j)] = 1.0;
            m[(j, i)] = 1.0;
            m
        };
        let g1 = e(0, 1);
        let g2 = e(1, 2);
        let g3 = &g1 + &g2;
        let g4 = e(3, 4);
        let projected = vec![DMatrix::identity(n, n), g1, g2, g3, g4];
        let set = minimal_dependent_set(&projected, 3, &[0, 1, 2, 4]).unwrap();
        assert_eq!(set, vec![1, 2]);
        assert!(minimal_dependent_set(&projected, 4, &[0, 1, 2, 3]).is_none());
    }
}
