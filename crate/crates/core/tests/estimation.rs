use std::collections::BTreeMap;

use approx::assert_relative_eq;

use rdhetero::bandwidth::{resolve_policy, JOINT_LABEL};
use rdhetero::covariates::{classify_heterogeneity, parse_covariate_spec, HeteroMode};
use rdhetero::data::{read_csv, ColumnRoles, Covariate, Sample};
use rdhetero::estimator::{estimate, BandwidthPolicy, CovarianceStructure, EstimationConfig, ResultMode};
use rdhetero::kernel::KernelKind;
use rdhetero::montecarlo::{coverage_experiment, ClusterSpec, DgpPreset, DgpSpec};
use rdhetero::RdError;

fn manual(h: f64) -> EstimationConfig {
    EstimationConfig {
        bandwidth: BandwidthPolicy::Manual { h, joint: false },
        ..Default::default()
    }
}

fn three_groups(n: usize) -> Sample {
    let x: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / n as f64).collect();
    let g: Vec<String> = (0..n).map(|i| ["a", "b", "c"][i % 3].to_string()).collect();
    let y: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, &xi)| {
            xi + 0.4 * xi * xi
                + if xi >= 0.0 { 0.1 * (i % 3) as f64 } else { 0.0 }
                + 0.05 * ((i * 37 % 11) as f64 - 5.0) / 5.0
        })
        .collect();
    Sample::from_columns(y, x, vec![Covariate::text("g", g)], vec![], None).unwrap()
}

#[test]
fn csv_to_estimate() {
    let mut csv = String::from("y,x,grp\n");
    for i in 0..400 {
        let x = -1.0 + 2.0 * (i as f64 + 0.5) / 400.0;
        let y = 0.3 * x + if x >= 0.0 { 0.5 } else { 0.0 } + 0.01 * ((i * 13 % 7) as f64 - 3.0);
        if i == 17 {
            csv.push_str(&format!(",{x},{}\n", i % 2));
        } else {
            csv.push_str(&format!("{y},{x},{}\n", i % 2));
        }
    }
    let roles = ColumnRoles {
        outcome: "y".into(),
        score: "x".into(),
        hetero: vec!["grp".into()],
        ..Default::default()
    };
    let sample = read_csv(csv.as_bytes(), &roles).unwrap();
    assert_eq!((sample.n(), sample.rows_dropped), (399, 1));

    let ate = estimate(&sample, None, &manual(0.5)).unwrap();
    assert_eq!(ate.mode, ResultMode::Ate);
    assert_eq!(ate.labels(), vec!["T"]);
    assert!((ate.rows[0].rbc_estimate - 0.5).abs() < 0.02);

    let sub = estimate(&sample, Some("i.grp"), &manual(0.5)).unwrap();
    assert_eq!(sub.mode, ResultMode::Subgroup);
    assert_eq!(sub.rows.len(), 2);
    assert_eq!(sub.covariance, CovarianceStructure::IndependentFits);
    let v = sub.v_matrix();
    assert_eq!(v[(0, 1)], 0.0);
    assert_eq!(sub.config.bandwidth, "manual h=0.5");
}

#[test]
fn manual_bandwidth_applies_to_every_group() {
    let sample = three_groups(900);
    let spec = parse_covariate_spec("i.g", &sample).unwrap();
    let design = classify_heterogeneity(&spec, &sample).unwrap();
    assert_eq!(design.mode, HeteroMode::Subgroup);
    let bw = resolve_policy(&sample, Some(&design), &manual(0.1)).unwrap();
    let hs = bw.per_group();
    assert_eq!(hs.len(), 3);
    assert!(hs.values().all(|&h| h == 0.1));
}

#[test]
fn automatic_bandwidths_per_group_or_joint() {
    let spec = DgpSpec::new(DgpPreset::Subgroup, 3000, 9);
    let sample = spec.generate(0).unwrap();
    let expr = parse_covariate_spec("i.g", &sample).unwrap();
    let design = classify_heterogeneity(&expr, &sample).unwrap();
    let cfg = EstimationConfig::default();
    let per = resolve_policy(&sample, Some(&design), &cfg).unwrap();
    assert_eq!(per.entries.len(), 2);
    assert!(!per.joint);

    let joint_cfg = EstimationConfig {
        bandwidth: BandwidthPolicy::Auto { joint: true },
        ..Default::default()
    };
    let joint = resolve_policy(&sample, Some(&design), &joint_cfg).unwrap();
    assert_eq!(joint.entries.len(), 1);
    assert_eq!(joint.entries[0].label, JOINT_LABEL);

    let generic = DgpSpec::new(DgpPreset::Quadratic, 2000, 9).generate(0).unwrap();
    let expr = parse_covariate_spec("c.w", &generic).unwrap();
    let design = classify_heterogeneity(&expr, &generic).unwrap();
    assert_eq!(design.mode, HeteroMode::Generic);
    let bw = resolve_policy(&generic, Some(&design), &cfg).unwrap();
    assert_eq!(bw.entries.len(), 1);
}

#[test]
fn per_group_bandwidths_validate_labels() {
    let sample = three_groups(300);
    let expr = parse_covariate_spec("i.g", &sample).unwrap();
    let design = classify_heterogeneity(&expr, &sample).unwrap();
    let mut map = BTreeMap::new();
    map.insert("z.g".to_string(), 0.3);
    let cfg = EstimationConfig {
        bandwidth: BandwidthPolicy::PerGroup(map),
        ..Default::default()
    };
    match resolve_policy(&sample, Some(&design), &cfg) {
        Err(RdError::UnknownLabel { label, available }) => {
            assert_eq!(label, "z.g");
            assert!(available.iter().any(|l| l == "a.g"));
        }
        other => panic!("expected UnknownLabel, got {other:?}"),
    }
}

#[test]
fn shifting_score_and_cutoff_together_changes_nothing() {
    let sample = three_groups(600);
    let mut shifted = sample.clone();
    for x in &mut shifted.x {
        *x += 3.0;
    }
    let cfg = manual(0.4);
    let cfg_shift = EstimationConfig {
        cutoff: 3.0,
        ..manual(0.4)
    };
    for hetero in [None, Some("i.g")] {
        let a = estimate(&sample, hetero, &cfg).unwrap();
        let b = estimate(&shifted, hetero, &cfg_shift).unwrap();
        for (ra, rb) in a.rows.iter().zip(&b.rows) {
            assert_relative_eq!(ra.rbc_estimate, rb.rbc_estimate, epsilon = 1e-9);
            assert_relative_eq!(ra.rbc_se, rb.rbc_se, epsilon = 1e-9);
            assert_eq!((ra.n_eff_left, ra.n_eff_right), (rb.n_eff_left, rb.n_eff_right));
        }
    }
}

#[test]
fn joint_subgroup_fit_matches_split_fits() {
    let sample = three_groups(900);
    let split = estimate(&sample, Some("i.g"), &manual(0.5)).unwrap();
    let joint_cfg = EstimationConfig {
        bandwidth: BandwidthPolicy::Manual { h: 0.5, joint: true },
        ..Default::default()
    };
    let joint = estimate(&sample, Some("i.g"), &joint_cfg).unwrap();
    assert_eq!(joint.covariance, CovarianceStructure::JointFit);
    assert_eq!(split.labels(), joint.labels());
    for (a, b) in split.rows.iter().zip(&joint.rows) {
        assert_relative_eq!(a.rbc_estimate, b.rbc_estimate, epsilon = 1e-10);
        assert_relative_eq!(a.conventional_estimate, b.conventional_estimate, epsilon = 1e-10);
    }
}

#[test]
fn kernels_and_orders_run() {
    let sample = DgpSpec::new(DgpPreset::Quadratic, 1500, 4).generate(0).unwrap();
    for kernel in [KernelKind::Triangular, KernelKind::Uniform, KernelKind::Epanechnikov] {
        for p in 0..=2 {
            let cfg = EstimationConfig {
                kernel,
                p,
                ..manual(0.6)
            };
            let r = estimate(&sample, Some("c.w"), &cfg).unwrap();
            assert_eq!(r.labels(), vec!["T", "T#w"]);
            assert!(r.rows.iter().all(|row| row.rbc_se > 0.0 && row.ci[0] < row.ci[1]));
        }
    }
}

#[test]
fn noiseless_designs_have_full_coverage() {
    let mut spec = DgpSpec::new(DgpPreset::Linear, 500, 3);
    spec.noise_sd = 0.0;
    // the conditional model is exact; the average effect still varies with w
    let report = coverage_experiment(&spec, &manual(0.5), Some("c.w"), 100).unwrap();
    assert_eq!(report.failures, 0);
    assert_eq!(report.rows.len(), 2);
    assert!(report
        .rows
        .iter()
        .all(|r| r.coverage_rbc == 1.0 && r.mean_bias_rbc.abs() < 1e-10));
}

#[test]
fn one_cluster_per_unit_matches_independent_noise_labels() {
    let mut spec = DgpSpec::new(DgpPreset::Linear, 200, 3);
    spec.clusters = Some(ClusterSpec { groups: 200, sd: 0.1 });
    let s = spec.generate(0).unwrap();
    let labels = s.clusters.as_ref().unwrap();
    let mut sorted = labels.clone();
    sorted.sort_unstable();
    sorted.dedup();
    assert_eq!(sorted.len(), 200);
}

#[test]
fn cluster_robust_estimation_runs() {
    let mut spec = DgpSpec::new(DgpPreset::Quadratic, 1200, 5);
    spec.clusters = Some(ClusterSpec { groups: 40, sd: 0.2 });
    let sample = spec.generate(1).unwrap();
    for vce in ["cluster:id", "cluster_hc2:id"] {
        let cfg = EstimationConfig {
            vce: vce.parse().unwrap(),
            ..manual(0.5)
        };
        let r = estimate(&sample, None, &cfg).unwrap();
        assert!(r.rows[0].rbc_se > 0.0);
    }
}

#[test]
fn degenerate_score_is_rejected() {
    let s = Sample::from_columns(vec![1.0; 50], vec![0.2; 50], vec![], vec![], None).unwrap();
    let err = estimate(&s, None, &EstimationConfig::default()).unwrap_err();
    assert_eq!(err.kind(), "DegenerateScore");
}
