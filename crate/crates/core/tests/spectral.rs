use neoclassical::spectral::yates_label;
use neoclassical::{
    periodogram_anova, periodogram_anova_with, yates_transform, Divisor, SpectralMethod,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn centered_ss(y: &[f64]) -> f64 {
    let m = y.iter().sum::<f64>() / y.len() as f64;
    y.iter().map(|v| (v - m) * (v - m)).sum()
}

#[test]
fn four_point_example() {
    let t = periodogram_anova(&[1.0, 0.0, -1.0, 0.0]).unwrap();
    assert_eq!(t.rows.len(), 2);
    assert!((t.rows[0].ss - 2.0).abs() < 1e-12);
    assert_eq!(t.rows[0].df, 2);
    assert!(t.rows[1].ss.abs() < 1e-12);
    assert_eq!(t.rows[1].df, 1);
    assert!((t.total_ss - 2.0).abs() < 1e-12);
}

#[test]
fn constant_series_is_all_zero() {
    let t = periodogram_anova(&[3.5; 9]).unwrap();
    assert!(t.rows.iter().all(|r| r.ss == 0.0));
    assert!(periodogram_anova(&[1.0]).is_err());
    assert!(periodogram_anova(&[1.0, f64::NAN]).is_err());
}

#[test]
fn parseval_and_degrees_of_freedom() {
    let mut r = ChaCha8Rng::seed_from_u64(31);
    for n in (2..=64).chain([101, 255, 256, 1000, 1023, 4096]) {
        let y: Vec<f64> = (0..n).map(|_| r.random_range(-10.0..10.0)).collect();
        let t = periodogram_anova(&y).unwrap();
        let ss: f64 = t.rows.iter().map(|r| r.ss).sum();
        let total = centered_ss(&y);
        assert!((ss - total).abs() <= 1e-10 * total, "n = {n}");
        assert!((t.total_ss - total).abs() <= 1e-12 * total);
        assert_eq!(t.rows.iter().map(|r| r.df).sum::<usize>(), n - 1, "n = {n}");
        if n.is_power_of_two() {
            let f = periodogram_anova_with(&y, SpectralMethod::Fft).unwrap();
            for (a, b) in t.rows.iter().zip(&f.rows) {
                assert!((a.ss - b.ss).abs() <= 1e-9 * total / n as f64, "n = {n}");
            }
        }
    }
}

/// Contrast for effect `j` on run `i`: +1 when the runs agree in the parity
/// of the factors in `j` at their high level.
fn sign(i: usize, j: usize) -> f64 {
    if (i & j).count_ones() % 2 == j.count_ones() % 2 {
        1.0
    } else {
        -1.0
    }
}

#[test]
fn yates_matches_sign_matrix() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    for n in 1..=6 {
        let len = 1 << n;
        let y: Vec<f64> = (0..len).map(|_| r.random_range(-5i32..=5) as f64).collect();
        let got = yates_transform(&y, Divisor::Totals).unwrap();
        assert_eq!(got.n_factors, n);
        for j in 0..len {
            let want: f64 = (0..len).map(|i| sign(i, j) * y[i]).sum();
            assert!((got.entries[j].value - want).abs() <= 1e-12, "n={n} j={j}");
            assert_eq!(got.entries[j].label, yates_label(j));
        }
        let total: f64 = y.iter().sum();
        assert_eq!(got.entries[0].value, total);
        let energy: f64 = got.entries.iter().map(|e| e.value * e.value).sum();
        let sumsq: f64 = y.iter().map(|v| v * v).sum();
        assert!((energy - len as f64 * sumsq).abs() <= 1e-10 * energy.max(1.0));
    }
}

#[test]
fn yates_examples() {
    let t = yates_transform(&[1.0, 2.0, 3.0, 4.0], Divisor::Totals).unwrap();
    let v: Vec<f64> = t.entries.iter().map(|e| e.value).collect();
    assert_eq!(v, [10.0, 2.0, 4.0, 0.0]);
    let t = yates_transform(&[2.5, 7.0], Divisor::Totals).unwrap();
    assert_eq!(t.entries[0].value, 9.5);
    assert_eq!(t.entries[1].value, 4.5);
    let ones = yates_transform(&[1.0; 16], Divisor::Totals).unwrap();
    assert_eq!(ones.entries[0].value, 16.0);
    assert!(ones.entries[1..].iter().all(|e| e.value == 0.0));
    let labels: Vec<String> = (0..8).map(yates_label).collect();
    assert_eq!(labels, ["(1)", "A", "B", "AB", "C", "AC", "BC", "ABC"]);
}

proptest! {
    #[test]
    fn yates_is_linear(
        n in 1usize..=5,
        seed in proptest::collection::vec(-3.0f64..3.0, 64),
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let len = 1 << n;
        let y = &seed[..len];
        let z = &seed[32..32 + len];
        let mix: Vec<f64> = y.iter().zip(z).map(|(a, b)| alpha * a + beta * b).collect();
        for div in [Divisor::Totals, Divisor::Effects] {
            let ty = yates_transform(y, div).unwrap();
            let tz = yates_transform(z, div).unwrap();
            let tm = yates_transform(&mix, div).unwrap();
            for k in 0..len {
                let want = alpha * ty.entries[k].value + beta * tz.entries[k].value;
                prop_assert!((tm.entries[k].value - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn effects_divisor_scales_totals(n in 1usize..=6, seed in proptest::collection::vec(-3.0f64..3.0, 64)) {
        let y = &seed[..1 << n];
        let t = yates_transform(y, Divisor::Totals).unwrap();
        let e = yates_transform(y, Divisor::Effects).unwrap();
        let len = (1 << n) as f64;
        prop_assert!((e.entries[0].value * len - t.entries[0].value).abs() < 1e-12);
        for k in 1..1 << n {
            prop_assert!((e.entries[k].value * len / 2.0 - t.entries[k].value).abs() < 1e-12);
        }
    }
}
