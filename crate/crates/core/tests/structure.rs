use nalgebra::DMatrix;
use neoclassical::{
    conditional_pd_check, cross, deletion_closure_check, forget, generator_matrix, indicator,
    is_ring, kernel_matrix, mean_model_matrix, parse_cov, parse_mean, span_equal, CovarianceModel,
    CovarianceTerm, Design, FactorExpr, KernelKind, TreatmentFactor,
};
use proptest::prelude::*;

fn labels_strategy(n: usize, levels: usize) -> impl Strategy<Value = Vec<String>> {
    proptest::collection::vec(0..levels, n)
        .prop_map(|v| v.into_iter().map(|i| format!("l{i}")).collect())
}

#[test]
fn celsius_fahrenheit() {
    let c = vec![0.0, 10.0, 100.0];
    let f: Vec<f64> = c.iter().map(|v| 1.8 * v + 32.0).collect();
    let d = Design::new(3)
        .with_covariate("c", c)
        .unwrap()
        .with_covariate("f", f)
        .unwrap();
    let mc = mean_model_matrix(&parse_mean("1 + c").unwrap().terms, &d).unwrap();
    let mf = mean_model_matrix(&parse_mean("1 + f").unwrap().terms, &d).unwrap();
    assert!(neoclassical::linalg::spans_equal(mc.matrix(), mf.matrix()));
    let gc = CovarianceModel::build(&parse_cov("I + slope(c)").unwrap().terms, &d).unwrap();
    let gf = CovarianceModel::build(&parse_cov("I + slope(f)").unwrap().terms, &d).unwrap();
    assert!(!span_equal(gc.generators(), gf.generators()).unwrap());
    assert!(span_equal(gc.generators(), gc.generators()).unwrap());
}

#[test]
fn ring_examples() {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for i in 0..2 {
        for j in 0..2 {
            a.push(format!("a{i}"));
            b.push(format!("b{j}"));
        }
    }
    let d = Design::new(4)
        .with_factor("A", &a)
        .unwrap()
        .with_factor("B", &b)
        .unwrap();
    let ring = |f: &str| is_ring(&mean_model_matrix(&parse_mean(f).unwrap().terms, &d).unwrap());
    assert!(ring("A"));
    assert!(ring("B"));
    assert!(ring("A.B"));
    assert!(!ring("1 + A + B"));
}

fn relabel(labels: &[String], perm: &[usize]) -> Vec<String> {
    labels
        .iter()
        .map(|l| {
            let i: usize = l[1..].parse().unwrap();
            format!("m{}", perm[i])
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forget_is_invariant_to_relabeling(
        labels in labels_strategy(9, 4),
        perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let f = TreatmentFactor::from_labels("A", &labels);
        let g = TreatmentFactor::from_labels("A", &relabel(&labels, &perm));
        let ef = forget(&indicator(&f));
        let eg = forget(&indicator(&g));
        prop_assert_eq!(ef.matrix(), eg.matrix());
        prop_assert!(ef.is_equivalence());
    }

    #[test]
    fn cross_block_is_elementwise_product(a in labels_strategy(10, 3), b in labels_strategy(10, 3)) {
        let fa = TreatmentFactor::from_labels("A", &a);
        let fb = TreatmentFactor::from_labels("B", &b);
        let ab = cross(&fa, &fb).unwrap();
        let e = forget(&indicator(&ab)).into_inner();
        let prod = forget(&indicator(&fa)).into_inner().component_mul(forget(&indicator(&fb)).matrix());
        prop_assert_eq!(e, prod);
        // observed cells only
        let cells: std::collections::BTreeSet<(String, String)> =
            a.iter().cloned().zip(b.iter().cloned()).collect();
        prop_assert_eq!(ab.n_levels(), cells.len());
    }

    #[test]
    fn deletion_closure_holds_for_factorial_formulas(
        n in 2usize..=10,
        seed_a in labels_strategy(10, 3),
        seed_b in labels_strategy(10, 3),
        formula in prop::sample::select(vec![
            "1", "A", "B", "1 + A", "1 + B", "1 + A + B", "A.B", "1 + A.B", "1 + A + B + A.B",
            "A + B", "1 + A + x", "A.B + x", "1 + x", "B + A.B",
        ]),
        which in prop::bool::ANY,
        level in 0usize..3,
    ) {
        let a = &seed_a[..n];
        let b = &seed_b[..n];
        let x: Vec<f64> = (0..n).map(|i| (i * i) as f64 * 0.5 - 1.0).collect();
        let d = Design::new(n)
            .with_factor("A", a).unwrap()
            .with_factor("B", b).unwrap()
            .with_covariate("x", x).unwrap();
        let terms = parse_mean(formula).unwrap().terms;
        let (factor, labels) = if which { ("A", a) } else { ("B", b) };
        let lvl = format!("l{level}");
        if labels.contains(&lvl) && labels.iter().any(|l| *l != lvl) {
            prop_assert!(deletion_closure_check(&terms, &d, factor, &lvl).unwrap(), "{formula}");
        }
    }

    #[test]
    fn span_equal_under_invertible_recombination(
        seed in proptest::collection::vec(-1.0f64..1.0, 3 * 36),
        mix in proptest::collection::vec(-2.0f64..2.0, 9),
    ) {
        let gens: Vec<DMatrix<f64>> = (0..3)
            .map(|k| {
                let m = DMatrix::from_column_slice(6, 6, &seed[k * 36..(k + 1) * 36]);
                &m + m.transpose()
            })
            .collect();
        let w = DMatrix::from_row_slice(3, 3, &mix);
        prop_assume!(w.determinant().abs() > 0.2);
        let mixed: Vec<DMatrix<f64>> = (0..3)
            .map(|i| (0..3).fold(DMatrix::zeros(6, 6), |acc, j| acc + &gens[j] * w[(i, j)]))
            .collect();
        prop_assert!(span_equal(&gens, &mixed).unwrap());
        prop_assert!(!span_equal(&gens, &mixed[..2]).unwrap());
    }

    #[test]
    fn assemble_is_linear(
        labels in labels_strategy(8, 3),
        x in proptest::collection::vec(-3.0f64..3.0, 8),
        a in proptest::collection::vec(0.0f64..2.0, 4),
        b in proptest::collection::vec(0.0f64..2.0, 4),
    ) {
        let d = Design::new(8).with_factor("A", &labels).unwrap().with_covariate("x", x).unwrap();
        let cov = CovarianceModel::build(&parse_cov("I + E(A) + exch(x) + slope(x)").unwrap().terms, &d).unwrap();
        let sum: Vec<f64> = a.iter().zip(&b).map(|(p, q)| p + q).collect();
        let lhs = cov.assemble(&sum).unwrap();
        let rhs = cov.assemble(&a).unwrap() + cov.assemble(&b).unwrap();
        prop_assert!((lhs - rhs).norm() <= 1e-12 * (1.0 + sum.iter().sum::<f64>()));
    }

    #[test]
    fn kernels_are_conditionally_positive_definite(
        steps in proptest::collection::vec(0.01f64..2.0, 3..50),
        start in -5.0f64..5.0,
    ) {
        let x: Vec<f64> = steps.iter().scan(start, |s, d| { *s += d; Some(*s) }).collect();
        for kind in [KernelKind::Exchangeable, KernelKind::Brownian, KernelKind::Cubic, KernelKind::RandomSlope] {
            let g = kernel_matrix(kind, &x);
            prop_assert!(conditional_pd_check(&g, kind.cpd_order(), Some(&x)).unwrap(), "{kind:?}");
        }
        let cubic = kernel_matrix(KernelKind::Cubic, &x);
        prop_assert!(!conditional_pd_check(&cubic, 0, Some(&x)).unwrap());
    }

    #[test]
    fn generator_of_block_term_is_forget(labels in labels_strategy(7, 4)) {
        let d = Design::new(7).with_factor("A", &labels).unwrap();
        let g = generator_matrix(&CovarianceTerm::Block(FactorExpr::Single("A".into())), &d).unwrap();
        let e = forget(&indicator(d.factor("A").unwrap())).into_inner();
        prop_assert_eq!(g, e);
    }
}

const MEAN_ATOMS: &[&str] = &["1", "A", "B", "x", "A.B", "B.x"];
const COV_ATOMS: &[&str] = &[
    "E(A)", "E(B)", "E(A.B)", "exch(x)", "bm(x)", "spl3(z)", "slope(x)",
];

fn formula_text(atoms: &'static [&'static str]) -> impl Strategy<Value = String> {
    (
        proptest::sample::subsequence(atoms.to_vec(), 1..=atoms.len()).prop_shuffle(),
        proptest::collection::vec(prop::sample::select(vec!["", " ", "  ", "\t"]), 16),
    )
        .prop_map(|(terms, ws)| {
            let mut s = String::new();
            for (i, t) in terms.iter().enumerate() {
                if i > 0 {
                    s.push_str(ws[i % ws.len()]);
                    s.push('+');
                    s.push_str(ws[(i + 7) % ws.len()]);
                }
                s.push_str(t);
            }
            s
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn mean_formula_round_trips(text in formula_text(MEAN_ATOMS)) {
        let ast = parse_mean(&text).unwrap();
        let again = parse_mean(&ast.to_string()).unwrap();
        prop_assert_eq!(&ast, &again);
        prop_assert_eq!(ast.to_string(), again.to_string());
    }

    #[test]
    fn cov_formula_round_trips(text in formula_text(COV_ATOMS), identity in prop::bool::ANY) {
        let text = if identity { format!("I + {text}") } else { text };
        let ast = parse_cov(&text).unwrap();
        prop_assert_eq!(&ast.terms[0], &CovarianceTerm::Identity);
        let again = parse_cov(&ast.to_string()).unwrap();
        prop_assert_eq!(&ast, &again);
    }

    #[test]
    fn parsers_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
        let text = String::from_utf8_lossy(&bytes);
        let m = parse_mean(&text);
        let c = parse_cov(&text);
        if let Err(e) = m {
            prop_assert!(e.offset <= text.len());
        }
        if let Err(e) = c {
            prop_assert!(e.offset <= text.len());
        }
    }

    #[test]
    fn parsers_never_panic_on_formula_like_text(
        chars in proptest::collection::vec(prop::sample::select(
            vec!['A', 'B', 'x', '1', '.', '+', '(', ')', ' ', 'E', 'I', 'm', 'b', '0', '-', '*']), 0..40)
    ) {
        let text: String = chars.into_iter().collect();
        let _ = parse_mean(&text);
        let _ = parse_cov(&text);
    }
}
