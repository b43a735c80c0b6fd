mod common;

use common::{scripted, scripted_gateway};
use signreg_core::ensemble::Variant;
use signreg_core::gateway::{FnProvider, Gateway, GatewayError, LlmRequest, RequestTag};
use signreg_core::harness::{
    reliability_report, run_ablation, run_experiment, run_sweep, run_transfer, ArtifactWriter, CategorizationMode,
    Dataset, ExperimentConfig, HarnessError, MiRows, SweepAxis,
};
use signreg_core::metrics::DEFAULT_TAUS;
use signreg_core::synth::SyntheticSpec;

const COEFS: [(&str, f64); 4] = [("a", 2.0), ("b", -1.5), ("c", 1.0), ("d", -0.5)];

fn datasets() -> Vec<Dataset> {
    vec![
        Dataset::synthetic("one", &SyntheticSpec::new(&COEFS, 24, 1).with_noise(0.01)).unwrap(),
        Dataset::synthetic("two", &SyntheticSpec::new(&COEFS, 30, 2).with_noise(0.01)).unwrap(),
    ]
}

fn truth_cfg() -> ExperimentConfig {
    ExperimentConfig {
        categorization: CategorizationMode::Truth,
        variant: Variant::NoNonlinear,
        lambda: 1e-6,
        runs: 1,
        ..Default::default()
    }
}

#[test]
fn transfer_between_matching_datasets() {
    let gw = scripted_gateway();
    let ds = datasets();
    let rep = run_transfer(&truth_cfg(), &ds, &gw, None).unwrap();
    assert_eq!(rep.datasets, vec!["one", "two"]);
    for row in &rep.pearson {
        for r in row {
            assert!(*r > 0.99, "{:?}", rep.pearson);
        }
    }
    assert!(rep.to_csv().starts_with("source\\target,one,two\n"));
}

#[test]
fn transfer_reports_missing_columns() {
    let gw = scripted_gateway();
    let mut ds = datasets();
    ds.push(Dataset::synthetic("short", &SyntheticSpec::new(&[("a", 1.0), ("b", 1.0)], 12, 3)).unwrap());
    match run_transfer(&truth_cfg(), &ds, &gw, None) {
        Err(HarnessError::Schema { dataset, missing }) => {
            assert_eq!(dataset, "short");
            assert_eq!(missing, vec!["c".to_string(), "d".to_string()]);
        }
        other => panic!("expected schema error, got {other:?}"),
    }
}

#[test]
fn k_sweep_grows_design_monotonically() {
    let gw = scripted_gateway();
    let cfg = ExperimentConfig {
        shots: vec![5],
        runs: 2,
        ..Default::default()
    };
    let rep = run_sweep(
        &cfg,
        &datasets()[..1],
        &gw,
        SweepAxis::KPercent,
        &[10.0, 25.0, 50.0, 100.0],
        None,
    )
    .unwrap();
    let cols: Vec<f64> = rep.rows.iter().map(|r| r.mean_design_columns).collect();
    assert!(cols.windows(2).all(|w| w[0] <= w[1]), "{cols:?}");
    assert!(cols[3] > cols[0], "{cols:?}");
    assert!(rep.to_csv().starts_with("k_percent,"));
}

#[test]
fn ensemble_size_sweep_shares_shots() {
    let gw = scripted_gateway();
    let cfg = ExperimentConfig {
        shots: vec![3],
        runs: 2,
        ..Default::default()
    };
    let rep = run_sweep(&cfg, &datasets()[..1], &gw, SweepAxis::EnsembleSize, &[1.0, 5.0], None).unwrap();
    assert_eq!(rep.rows.len(), 2);
    assert!(run_sweep(&cfg, &datasets()[..1], &gw, SweepAxis::EnsembleSize, &[2.5], None).is_err());
}

#[test]
fn ablation_writes_win_matrices() {
    let gw = scripted_gateway();
    let dir = tempfile::tempdir().unwrap();
    let w = ArtifactWriter::new(dir.path()).unwrap();
    let cfg = ExperimentConfig {
        runs: 1,
        ..Default::default()
    };
    let rep = run_ablation(&cfg, &datasets(), &gw, &Variant::ALL, Some(&w)).unwrap();
    assert_eq!(rep.cells.len(), 4);
    assert!(rep.cells.iter().all(|c| c.scores.len() == 5));
    for a in Variant::ALL {
        for b in Variant::ALL {
            if a != b {
                let s = rep.win_pearson.rate(a.as_str(), b.as_str()).unwrap()
                    + rep.win_pearson.rate(b.as_str(), a.as_str()).unwrap();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }
    for f in [
        "win_pearson.csv",
        "win_pearson.svg",
        "win_rmse.csv",
        "ablation_metrics.csv",
        "full/metrics.json",
    ] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn discovery_outage_degrades_to_transforms() {
    let gw = Gateway::new(Box::new(FnProvider::new("flaky", |req: &LlmRequest| match req.tag {
        RequestTag::Categorize => scripted(req),
        RequestTag::Discover => Err(GatewayError::Transport {
            attempts: 3,
            message: "connection reset".into(),
        }),
    })));
    let cfg = ExperimentConfig {
        shots: vec![3],
        runs: 1,
        ..Default::default()
    };
    let rep = run_experiment(&cfg, &datasets()[..1], &gw, None).unwrap();
    assert!(
        rep.runs[0].warnings.iter().any(|w| w.contains("connection reset")),
        "{:?}",
        rep.runs[0].warnings
    );
    assert!(rep.outcomes[0].candidates.iter().all(|c| c.discovered.is_empty()));
}

#[test]
fn unscripted_gateway_errors_abort() {
    let gw = Gateway::new(Box::new(FnProvider::new("broken", |_: &LlmRequest| {
        Err(GatewayError::Config("misconfigured".into()))
    })));
    let cfg = ExperimentConfig {
        shots: vec![3],
        runs: 1,
        ..Default::default()
    };
    assert!(run_experiment(&cfg, &datasets()[..1], &gw, None).is_err());
}

#[test]
fn reliability_report_covers_datasets() {
    let gw = scripted_gateway();
    let dir = tempfile::tempdir().unwrap();
    let w = ArtifactWriter::new(dir.path()).unwrap();
    let rep = reliability_report(
        &ExperimentConfig::default(),
        &datasets(),
        &gw,
        &DEFAULT_TAUS,
        MiRows::All,
        Some(&w),
    )
    .unwrap();
    assert_eq!(rep.jaccard.rows.len(), 2);
    for (_, s) in &rep.jaccard.rows {
        for v in [s.positive, s.negative, s.mixed] {
            assert!((0.0..=1.0).contains(&v));
        }
    }
    assert!(rep.mi.iter().any(|m| m.discovered > 0 && m.mean_percent.is_some()));
    assert!(dir.path().join("reliability.md").exists());
}

#[test]
fn flipped_coefficients_transfer_negatively() {
    let gw = scripted_gateway();
    let flipped: Vec<(&str, f64)> = COEFS.iter().map(|(n, c)| (*n, -c)).collect();
    let ds = vec![
        Dataset::synthetic("one", &SyntheticSpec::new(&COEFS, 24, 1).with_noise(0.01)).unwrap(),
        Dataset::synthetic("mirror", &SyntheticSpec::new(&flipped, 24, 5).with_noise(0.01)).unwrap(),
    ];
    let rep = run_transfer(&truth_cfg(), &ds, &gw, None).unwrap();
    assert!(rep.pearson[0][1] < 0.0 && rep.pearson[1][0] < 0.0, "{:?}", rep.pearson);
    assert!(rep.pearson[0][0] > 0.99 && rep.pearson[1][1] > 0.99);
}

#[test]
fn ensemble_prediction_is_member_mean() {
    let gw = scripted_gateway();
    let ds = &datasets()[..1];
    let cfg = ExperimentConfig {
        shots: vec![5],
        runs: 1,
        ..Default::default()
    };
    let rep = run_experiment(&cfg, ds, &gw, None).unwrap();
    let model = &rep.outcomes[0].model;
    let members: Vec<Vec<f64>> = model.members.iter().map(|m| m.predict(&ds[0].table).unwrap()).collect();
    let mean = model.predict(&ds[0].table).unwrap();
    for (i, v) in mean.iter().enumerate() {
        let direct = members.iter().map(|m| m[i]).sum::<f64>() / members.len() as f64;
        assert_eq!(*v, direct);
    }
}

#[test]
fn ablation_variants_shape_the_design() {
    let gw = scripted_gateway();
    let ds = &datasets()[..1];
    let cfg = ExperimentConfig {
        runs: 1,
        shots: vec![3],
        ..Default::default()
    };
    let rep = run_ablation(
        &cfg,
        ds,
        &gw,
        &[
            Variant::Full,
            Variant::NoNonlinear,
            Variant::NoConstraints,
            Variant::SimpleLinear,
        ],
        None,
    )
    .unwrap();
    let direct = run_experiment(&cfg, ds, &gw, None).unwrap();
    assert_eq!(rep.reports[0].1.runs, direct.runs);

    for (variant, r) in &rep.reports {
        for outcome in &r.outcomes {
            for m in &outcome.model.members {
                let cand = &outcome.candidates[m.candidate];
                let relevant = cand
                    .assignments
                    .iter()
                    .filter(|a| a.category != signreg_core::categorizer::Category::Irrelevant)
                    .count();
                match variant {
                    Variant::NoNonlinear => assert_eq!(m.recipe.len(), relevant),
                    Variant::SimpleLinear => assert_eq!(m.recipe.len(), ds[0].table.n_features()),
                    _ => {}
                }
                if matches!(variant, Variant::NoConstraints | Variant::SimpleLinear) {
                    assert!(m
                        .fit
                        .constraints
                        .iter()
                        .all(|c| *c == signreg_core::solver::SignConstraint::Free));
                }
            }
        }
    }
}

#[test]
fn sweep_rerun_is_identical() {
    let gw = scripted_gateway();
    let cfg = ExperimentConfig {
        shots: vec![3],
        runs: 2,
        ..Default::default()
    };
    let a = run_sweep(&cfg, &datasets(), &gw, SweepAxis::KPercent, &[10.0, 50.0], None).unwrap();
    let b = run_sweep(
        &cfg,
        &datasets(),
        &scripted_gateway(),
        SweepAxis::KPercent,
        &[10.0, 50.0],
        None,
    )
    .unwrap();
    assert_eq!(a.to_csv(), b.to_csv());
}

#[test]
fn replay_miss_aborts_but_keeps_transcripts() {
    use signreg_core::gateway::{ReplayProvider, ReplayStore};
    let dir = tempfile::tempdir().unwrap();
    let w = ArtifactWriter::new(dir.path()).unwrap();
    let gw = Gateway::new(Box::new(ReplayProvider::new(ReplayStore::in_memory())));
    let cfg = ExperimentConfig {
        shots: vec![3],
        runs: 1,
        ..Default::default()
    };
    let err = run_experiment(&cfg, &datasets()[..1], &gw, Some(&w)).unwrap_err();
    assert!(matches!(
        err,
        HarnessError::Ensemble(_) | HarnessError::Categorize(_) | HarnessError::Gateway(_)
    ));
    assert!(err.to_string().contains("replay"), "{err}");
    assert!(dir.path().join("transcripts.jsonl").exists());
    assert!(!dir.path().join("metrics.json").exists());
}

#[test]
fn mi_on_shot_rows() {
    let gw = scripted_gateway();
    let rep = reliability_report(
        &ExperimentConfig::default(),
        &datasets(),
        &gw,
        &DEFAULT_TAUS,
        MiRows::Shots(5),
        None,
    )
    .unwrap();
    assert_eq!(rep.mi_rows, MiRows::Shots(5));
    assert_eq!(rep.mi.len(), 2);
}
