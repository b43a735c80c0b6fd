use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use signreg_core::categorizer::Category;
use signreg_core::data::RegionTable;
use signreg_core::features::{evaluate_expr, parse_discovery_response, FeatureExpr, Transform};
use signreg_core::metrics::{
    jaccard, mi_difference_mean, mutual_information, pearson, rmse, win_matrix, EvalCell, ModelScore, WinMetric,
};
use signreg_core::solver::{brute_force_standardized, kkt_violation, objective, solve_standardized, SignConstraint};

fn constraint() -> impl Strategy<Value = SignConstraint> {
    prop_oneof![
        Just(SignConstraint::NonNegative),
        Just(SignConstraint::NonPositive),
        Just(SignConstraint::Free),
    ]
}

fn problem() -> impl Strategy<Value = (DMatrix<f64>, DVector<f64>, Vec<SignConstraint>, f64)> {
    (1usize..=8, 1usize..=6).prop_flat_map(|(m, p)| {
        (
            prop::collection::vec(-3.0f64..3.0, m * p),
            prop::collection::vec(-3.0f64..3.0, m),
            prop::collection::vec(constraint(), p),
            prop_oneof![Just(0.0), Just(0.1), Just(1.0), Just(10.0)],
        )
            .prop_map(move |(x, y, c, l)| (DMatrix::from_row_slice(m, p, &x), DVector::from_vec(y), c, l))
    })
}

fn rel_gap(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn active_set_matches_brute_force((x, y, c, l) in problem()) {
        let fast = solve_standardized(&x, &y, &c, l).unwrap();
        let brute = brute_force_standardized(&x, &y, &c, l).unwrap();
        prop_assert!(rel_gap(fast.objective, brute.objective) < 1e-8 || (fast.objective - brute.objective).abs() < 1e-10,
            "{} vs {}", fast.objective, brute.objective);
        prop_assert!(kkt_violation(&x, &y, &fast.beta, &c, l) < 1e-6);
        for (b, k) in fast.beta.iter().zip(&c) {
            prop_assert!(k.admits(*b));
        }
    }

    #[test]
    fn sign_flip_equivariance((x, y, c, l) in problem(), j in 0usize..6) {
        let j = j % x.ncols();
        let mut xf = x.clone();
        xf.column_mut(j).neg_mut();
        let mut cf = c.clone();
        cf[j] = c[j].flipped();
        let a = solve_standardized(&x, &y, &c, l).unwrap();
        let b = solve_standardized(&xf, &y, &cf, l).unwrap();
        prop_assert!(rel_gap(a.objective, b.objective) < 1e-8 || (a.objective - b.objective).abs() < 1e-10);
        prop_assert!((objective(&xf, &y, &b.beta, l) - b.objective).abs() < 1e-9 * (1.0 + b.objective));
    }

    #[test]
    fn pearson_affine_invariance(
        pairs in prop::collection::vec((-100.0f64..100.0, -100.0f64..100.0), 3..40),
        a in prop_oneof![-50.0f64..-0.1, 0.1f64..50.0],
        b in -100.0f64..100.0,
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        if let Ok(r) = pearson(&x, &y) {
            let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            let rt = pearson(&xt, &y).unwrap();
            prop_assert!((rt - a.signum() * r).abs() < 1e-9);
            prop_assert!(r.abs() <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn mutual_information_is_symmetric(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 6..60),
        bins in 2usize..6,
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let a = mutual_information(&x, &y, bins).unwrap();
        let b = mutual_information(&y, &x, bins).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        prop_assert!(a >= -1e-12);
    }

    #[test]
    fn win_matrix_antisymmetry(scores in prop::collection::vec(prop::collection::vec(0u8..4, 3), 1..30)) {
        let models: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let cells: Vec<EvalCell> = scores
            .iter()
            .enumerate()
            .map(|(i, row)| EvalCell {
                setting: "3-shot".into(),
                indicator: "y".into(),
                dataset: format!("d{i}"),
                scores: models
                    .iter()
                    .zip(row)
                    .map(|(m, &v)| (m.clone(), ModelScore::from_runs(&[v as f64 / 4.0], &[v as f64])))
                    .collect::<BTreeMap<_, _>>(),
            })
            .collect();
        for metric in [WinMetric::Pearson, WinMetric::Rmse] {
            let w = win_matrix(&cells, &models, metric).unwrap();
            for a in &models {
                for b in &models {
                    if a != b {
                        let s = w.rate(a, b).unwrap() + w.rate(b, a).unwrap();
                        prop_assert!((s - 1.0).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn evaluated_features_are_finite(
        rows in prop::collection::vec((-1e6f64..1e6, -1e3f64..1e3), 2..30),
        t in prop_oneof![Just(Transform::Log), Just(Transform::Sqrt), Just(Transform::Exp), Just(Transform::None)],
    ) {
        let n = rows.len();
        let values = DMatrix::from_fn(n, 2, |i, j| if j == 0 { rows[i].0 } else { rows[i].1 });
        let table = RegionTable::new(
            (0..n).map(|i| format!("r{i}")).collect(),
            vec!["a".into(), "b".into()],
            values,
            None,
            "y",
        )
        .unwrap();
        let prod = FeatureExpr::product(vec!["a".into(), "b".into()], Category::Positive);
        for e in [prod.clone(), FeatureExpr::transformed("a", t, Category::Positive)] {
            let v = evaluate_expr(&e, &table).unwrap();
            prop_assert!(v.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn parser_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..400)) {
        let text = String::from_utf8_lossy(&bytes);
        let subset = vec!["a".to_string(), "b".to_string()];
        let _ = parse_discovery_response(&text, &subset, Category::Positive);
    }

    #[test]
    fn rmse_triangle_inequality(
        v in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0, -50.0f64..50.0), 1..30),
    ) {
        let a: Vec<f64> = v.iter().map(|t| t.0).collect();
        let b: Vec<f64> = v.iter().map(|t| t.1).collect();
        let c: Vec<f64> = v.iter().map(|t| t.2).collect();
        prop_assert!(rmse(&a, &c).unwrap() <= rmse(&a, &b).unwrap() + rmse(&b, &c).unwrap() + 1e-12);
    }

    #[test]
    fn jaccard_symmetry(a in prop::collection::btree_set(0u8..12, 0..8), b in prop::collection::btree_set(0u8..12, 0..8)) {
        prop_assert_eq!(jaccard(&a, &b), jaccard(&b, &a));
        prop_assert_eq!(jaccard(&a, &b) == 1.0, a == b);
    }
}

#[test]
fn independent_uniforms_share_little_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(10_000);
    let x: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    let y: Vec<f64> = (0..10_000).map(|_| rng.gen()).collect();
    assert!(mutual_information(&x, &y, 4).unwrap() < 0.02);
}

#[test]
fn product_column_gains_information() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x1: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x2: Vec<f64> = (0..400).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let y: Vec<f64> = x1.iter().zip(&x2).map(|(a, b)| a * b).collect();
    let (mean, _) = mi_difference_mean(std::slice::from_ref(&y), &[x1, x2], &y, 4).unwrap();
    assert!(mean > 0.0, "{mean}");
    let empty: BTreeSet<u8> = BTreeSet::new();
    assert_eq!(jaccard(&empty, &empty), 1.0);
}
