#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use neoclassical::{parse_cov, parse_mean};
use neoclassical::{Design, FitConfig, FittedModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Balanced or unbalanced one-way layout; group `g` has `sizes[g]` units.
pub fn one_way_design(sizes: &[usize]) -> Design {
    let labels: Vec<String> = sizes
        .iter()
        .enumerate()
        .flat_map(|(g, &m)| std::iter::repeat_n(format!("g{g}"), m))
        .collect();
    Design::new(labels.len()).with_factor("A", &labels).unwrap()
}

pub fn simulate_one_way(
    sizes: &[usize],
    mu: f64,
    sigma: f64,
    sigma_b: f64,
    r: &mut impl Rng,
) -> Vec<f64> {
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut y = Vec::new();
    for &m in sizes {
        let b = sigma_b * noise.sample(r);
        for _ in 0..m {
            y.push(mu + b + sigma * noise.sample(r));
        }
    }
    y
}

pub struct OneWayStats {
    pub group_means: Vec<f64>,
    pub grand_mean: f64,
    pub ssw: f64,
    pub ssb: f64,
}

pub fn one_way_stats(sizes: &[usize], y: &[f64]) -> OneWayStats {
    let n = y.len() as f64;
    let grand_mean = y.iter().sum::<f64>() / n;
    let mut start = 0;
    let mut group_means = Vec::new();
    let (mut ssw, mut ssb) = (0.0, 0.0);
    for &m in sizes {
        let g = &y[start..start + m];
        let mean = g.iter().sum::<f64>() / m as f64;
        ssw += g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        ssb += m as f64 * (mean - grand_mean) * (mean - grand_mean);
        group_means.push(mean);
        start += m;
    }
    OneWayStats {
        group_means,
        grand_mean,
        ssw,
        ssb,
    }
}

pub fn fit(design: &Design, y: &[f64], mean: &str, cov: &str) -> neoclassical::Result<FittedModel> {
    FittedModel::fit(
        design.clone(),
        &parse_mean(mean).unwrap().terms,
        &parse_cov(cov).unwrap().terms,
        y.to_vec(),
        &FitConfig::default(),
    )
}

pub fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Dense inverse by Gauss-Jordan elimination with partial pivoting.
pub fn gauss_jordan_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let mut m = a.clone();
    let mut inv = DMatrix::<f64>::identity(n, n);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| m[(i, col)].abs().total_cmp(&m[(j, col)].abs()))
            .unwrap();
        m.swap_rows(col, piv);
        inv.swap_rows(col, piv);
        let d = m[(col, col)];
        for j in 0..n {
            m[(col, j)] /= d;
            inv[(col, j)] /= d;
        }
        for i in 0..n {
            if i != col {
                let f = m[(i, col)];
                for j in 0..n {
                    m[(i, j)] -= f * m[(col, j)];
                    inv[(i, j)] -= f * inv[(col, j)];
                }
            }
        }
    }
    inv
}

/// Plug-in conditional mean and universal-kriging prediction variance of a
/// target with covariance `c` with the data, own variance `v` and fixed row `x0`.
pub fn joint_gaussian_prediction(
    x: &DMatrix<f64>,
    v: &DMatrix<f64>,
    y: &DVector<f64>,
    c: &DVector<f64>,
    v0: f64,
    x0: &DVector<f64>,
) -> (f64, f64) {
    let vi = gauss_jordan_inverse(v);
    let info = x.transpose() * &vi * x;
    let info_inv = gauss_jordan_inverse(&info);
    let beta = &info_inv * x.transpose() * &vi * y;
    let n = v.nrows();
    let mut joint = DMatrix::zeros(n + 1, n + 1);
    joint.view_mut((0, 0), (n, n)).copy_from(v);
    for i in 0..n {
        joint[(i, n)] = c[i];
        joint[(n, i)] = c[i];
    }
    joint[(n, n)] = v0;
    let sdd = joint.view((0, 0), (n, n)).clone_owned();
    let s0d = joint.view((n, 0), (1, n)).clone_owned();
    let resid = y - x * &beta;
    let point = x0.dot(&beta) + (s0d * gauss_jordan_inverse(&sdd) * resid)[(0, 0)];
    let r = x0 - x.transpose() * &vi * c;
    let pev = v0 - (c.transpose() * &vi * c)[(0, 0)] + (r.transpose() * info_inv * &r)[(0, 0)];
    (point, pev)
}
