use proptest::prelude::*;
use transfer_risk::analysis::*;
use transfer_risk::envgen::*;
use transfer_risk::inner::InverseHvp;
use transfer_risk::logistic;
use transfer_risk::objectives::{TrmHyper, Variant};
use transfer_risk::trainer::*;

fn explicit_suite(mu_c: f64, means: &[f64]) -> Vec<EnvData> {
    let cfg = SuiteConfig {
        means: MeanSource::Explicit(means.iter().map(|m| vec![*m]).collect()),
        materialize: Materialize::Quadrature { nodes: 20 },
        ..SuiteConfig::linear(means.len(), mu_c, 0.0, 1.0)
    };
    make_suite(&cfg, 0).unwrap().envs
}

fn drawn_suite(envs: usize, mu_c: f64, mean: f64, seed: u64) -> (Vec<EnvData>, Vec<f64>) {
    let cfg = SuiteConfig { materialize: Materialize::Quadrature { nodes: 20 }, ..SuiteConfig::linear(envs, mu_c, mean, 1.0) };
    let suite = make_suite(&cfg, seed).unwrap();
    let means = suite.scalar_means();
    (suite.envs, means)
}

const OBJECTIVES: [RatioObjective; 4] = [
    RatioObjective::Erm,
    RatioObjective::Irmv1 { lambda: 1.0 },
    RatioObjective::Trm { variant: Variant::SumSum },
    RatioObjective::Trm { variant: Variant::SumSup },
];

#[test]
fn weight_ratio_examples() {
    assert_eq!(weight_ratio(1.0, 0.0), 0.0);
    assert!((weight_ratio(0.6, 0.8) - 4.0 / 3.0).abs() <= 1e-15);
    assert_eq!(weight_ratio(-0.6, 0.8), weight_ratio(0.6, 0.8));
    assert_eq!(weight_ratio(0.0, 1.0), f64::INFINITY);
}

#[test]
fn grid_values_are_symmetric_under_sign_flip() {
    let (envs, _) = drawn_suite(4, 1.5, 1.0, 3);
    for obj in OBJECTIVES {
        let bf = bruteforce_ratio(&envs, obj, 512, None).unwrap();
        for i in 0..256 {
            let (a, b) = (bf.values[i], bf.values[i + 256]);
            assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0), "{obj:?} at {i}: {a} vs {b}");
        }
    }
}

#[test]
fn erm_oracle_on_unbiased_suite_is_zero() {
    for seed in 0..3 {
        let (envs, _) = drawn_suite(5, 1.0, 0.0, seed);
        let bf = bruteforce_ratio(&envs, RatioObjective::Erm, 4096, None).unwrap();
        assert!(bf.angle() <= bf.step, "seed {seed}: angle {} vs step {}", bf.angle(), bf.step);
    }
    // Symmetric means make the pooled z_e independent of y, so the grid hits 0 exactly.
    let envs = explicit_suite(1.0, &[-1.0, 0.0, 1.0]);
    for obj in OBJECTIVES {
        assert_eq!(bruteforce_ratio(&envs, obj, 4096, None).unwrap().ratio, 0.0, "{obj:?}");
    }
}

#[test]
fn closed_form_and_newton_oracles_agree() {
    let (envs, means) = drawn_suite(5, 1.0, 1.0, 7);
    let closed = ClosedForm { mu_c: 1.0, means, sigma_c: 1.0, sigma_e: 1.0 };
    for variant in [Variant::SumSum, Variant::SumSup] {
        let obj = RatioObjective::Trm { variant };
        let newton = bruteforce_ratio(&envs, obj, 4096, None).unwrap();
        let closed = bruteforce_ratio(&envs, obj, 4096, Some(&closed)).unwrap();
        assert!((newton.angle() - closed.angle()).abs() <= newton.step, "{variant:?}: {} vs {}", newton.ratio, closed.ratio);
    }
}

#[test]
fn oracle_rejects_bad_inputs() {
    let envs = explicit_suite(1.0, &[0.0, 1.0]);
    assert!(bruteforce_ratio(&envs, RatioObjective::Erm, 2, None).is_err());
    let short = ClosedForm { mu_c: 1.0, means: vec![0.0], sigma_c: 1.0, sigma_e: 1.0 };
    assert!(bruteforce_ratio(&envs, RatioObjective::Erm, 64, Some(&short)).is_err());
    assert!(bruteforce_ratio(&envs[..1], RatioObjective::Trm { variant: Variant::SumSum }, 64, None).is_err());
}

#[test]
fn trained_ratio_matches_oracle() {
    let (envs, _) = drawn_suite(5, 1.0, 1.0, 21);
    let trm = Algorithm::Trm(TrmHyper { lambda: 1.0, inverse: InverseHvp::Exact, variant: Variant::SumSum });
    for (alg, obj) in [(Algorithm::Erm, RatioObjective::Erm), (trm, RatioObjective::Trm { variant: Variant::SumSum })] {
        let cfg = TrainConfig::weight_ratio(alg, 21);
        let out = train_from(&envs, init_model(&envs, &cfg).unwrap(), &cfg).unwrap();
        let (a, b) = out.family.model.phi.as_pair().unwrap();
        let bf = bruteforce_ratio(&envs, obj, 4096, None).unwrap();
        assert!(within_grid_steps(weight_ratio(a, b), &bf, 2.0), "{}: {} vs {}", alg.tag(), weight_ratio(a, b), bf.ratio);
    }
}

#[test]
fn within_grid_steps_counts_angles() {
    let envs = explicit_suite(1.0, &[-1.0, 0.0, 1.0]);
    let bf = bruteforce_ratio(&envs, RatioObjective::Erm, 4096, None).unwrap();
    assert!(within_grid_steps((1.9 * bf.step).tan(), &bf, 2.0));
    assert!(!within_grid_steps((2.1 * bf.step).tan(), &bf, 2.0));
}

#[test]
fn small_sweep_is_deterministic_under_parallelism() {
    let mut spec = SweepSpec::new(SweepAxis::Envs(vec![3, 5]));
    spec.seeds = vec![0, 1];
    spec.train.iterations = 200;
    let parallel = ratio_sweep(&spec).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let sequential = pool.install(|| ratio_sweep(&spec).unwrap());
    assert_eq!(parallel.runs, sequential.runs);
    assert_eq!(parallel.points.len(), 2);
    for p in &parallel.points {
        assert_eq!((p.erm.len(), p.irmv1.len(), p.trm.len()), (2, 2, 2));
        assert!(p.erm.iter().chain(&p.irmv1).chain(&p.trm).all(|r| *r >= 0.0));
    }
    let mut buf = Vec::new();
    parallel.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(SWEEP_VERSION));
    assert_eq!(lines.next(), Some("axis,value,algorithm,seed,ratio"));
    assert_eq!(lines.count(), 2 * 2 * 3);
    assert!(parallel.summary().contains("erm/trm"));
}

#[test]
fn sweep_validation_rejects_bad_axes() {
    for axis in [SweepAxis::MuC(vec![]), SweepAxis::MuC(vec![1.0, -2.0]), SweepAxis::Envs(vec![1])] {
        assert!(matches!(SweepSpec::new(axis).validate(), Err(AnalysisError::Invalid(_))));
    }
    let mut spec = SweepSpec::new(SweepAxis::MuC(vec![1.0]));
    spec.seeds.clear();
    assert!(spec.validate().is_err());
}

#[test]
fn sweep_statistics() {
    assert_eq!(median(&[5.0]), 5.0);
    assert_eq!(median(&[2.0, 1.0]), 1.5);
    assert_eq!(inversions(&[1.0, 0.9, 0.8]), 0);
    assert_eq!(inversions(&[1.0, 1.1, 0.8, 0.9]), 2);
    assert_eq!(half_width(&[1.0, 1.0, 1.0]), 0.0);
    assert!(half_width(&[1.0, 2.0, 3.0]) > 0.0);
}

#[test]
fn counterexample_branch_examples() {
    let spec = ConstructionSpec::recipe(4, 16, 3, 1.0, 1000).unwrap();
    let clf = build_counterexample(&spec).unwrap();
    let (i, j) = (spec.far, spec.partner);
    assert!(clf.invariant_branch(&spec.means[j]));
    assert!(clf.invariant_branch(&spec.means[j].iter().map(|v| -v).collect::<Vec<_>>()));
    assert!(!clf.invariant_branch(&spec.means[i]));
    let z_c = vec![0.3, -1.0, 2.0, 0.5];
    let f = clf.features(&z_c, &spec.means[j]);
    assert_eq!(&f[..4], &z_c[..]);
    assert!(f[4..].iter().all(|v| *v == 0.0));
    // Invariant-branch score is 2μ_cᵀz_c/σ_c² whatever z_e is inside the ball.
    let want: f64 = spec.mu_c.iter().zip(&z_c).map(|(m, z)| 2.0 * m * z).sum();
    let mut nudged = spec.means[j].clone();
    nudged[3] += 0.5 * spec.radius();
    for z_e in [&spec.means[j], &nudged] {
        assert!((clf.score(&z_c, z_e) - want).abs() <= 1e-12);
    }
    let off: f64 = spec.means[i].iter().map(|m| 2.0 * m * m).sum();
    assert!((clf.score(&z_c, &spec.means[i]) - want - off).abs() <= 1e-9 * off);
}

#[test]
fn geometry_errors_quote_the_bound() {
    let mut spec = ConstructionSpec::recipe(4, 16, 3, 1.0, 1000).unwrap();
    spec.mu_c = vec![0.1; 4];
    let err = build_counterexample(&spec).unwrap_err();
    let AnalysisError::Geometry(v) = &err else { panic!("{err}") };
    assert!(v.iter().any(|m| m.contains("‖μ_c‖") && m.contains("√d_e")), "{v:?}");
    assert!(err.to_string().contains("construction geometry violated"));

    let mut spec = ConstructionSpec::recipe(4, 16, 3, 1.0, 1000).unwrap();
    spec.means[2] = spec.means[0].iter().map(|v| v * 0.9).collect();
    let v = spec.violations();
    assert!(v.iter().any(|m| m.contains("‖μ_0 − μ_2‖") && m.contains("2√(2d_e)")), "{v:?}");

    let mut spec = ConstructionSpec::recipe(4, 16, 3, 1.0, 1000).unwrap();
    spec.means[1] = vec![0.0; 16];
    assert!(spec.violations().iter().any(|m| m.contains("μ_0ᵀμ_1")));

    assert!(ConstructionSpec::recipe(4, 1, 3, 1.0, 1000).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn branch_is_scale_consistent(
        centers in prop::collection::vec(prop::collection::vec(-4.0f64..4.0, 3), 1..4),
        point in prop::collection::vec(-6.0f64..6.0, 3),
        radius in 0.5f64..3.0,
        scale in prop::sample::select(vec![2.0, 4.0, 0.5]),
    ) {
        let clf = PiecewiseClassifier::from_parts(vec![1.0], vec![0.0; 3], centers.clone(), radius);
        let scaled = PiecewiseClassifier::from_parts(
            vec![1.0],
            vec![0.0; 3],
            centers.iter().map(|c| c.iter().map(|v| v * scale).collect()).collect(),
            radius * scale,
        );
        let p2: Vec<f64> = point.iter().map(|v| v * scale).collect();
        prop_assert_eq!(clf.invariant_branch(&point), scaled.invariant_branch(&p2));
    }
}

fn overlap(a: &Clause, b: &Clause) -> bool {
    a.ci_low <= b.ci_high && b.ci_low <= a.ci_high
}

#[test]
fn certificate_is_seed_stable() {
    let spec = ConstructionSpec::recipe(8, 64, 3, 1.0, 200_000).unwrap();
    let clf = build_counterexample(&spec).unwrap();
    let a = certify_counterexample(&clf, &spec, &CertifyConfig::new(200_000, 1)).unwrap();
    let b = certify_counterexample(&clf, &spec, &CertifyConfig::new(200_000, 2)).unwrap();
    assert_eq!(a.clauses.len(), b.clauses.len());
    for (x, y) in a.clauses.iter().zip(&b.clauses) {
        assert_eq!((x.name, x.env), (y.name, y.env));
        assert!(overlap(x, y), "{}: [{}, {}] vs [{}, {}]", x.name, x.ci_low, x.ci_high, y.ci_low, y.ci_high);
    }
    let again = certify_counterexample(&clf, &spec, &CertifyConfig::new(200_000, 1)).unwrap();
    assert_eq!(a, again);
    let mut buf = Vec::new();
    a.write_csv(&mut buf, "feedbeef").unwrap();
    let text = String::from_utf8(buf).unwrap();
    assert!(text.starts_with(CERTIFICATE_VERSION));
    assert!(text.contains("config_hash=feedbeef") && text.contains("seed=1"));
}

#[test]
fn invariant_classifier_transfers_at_its_own_loss() {
    let spec = ConstructionSpec::recipe(4, 16, 3, 1.0, 200_000).unwrap();
    let clf = PiecewiseClassifier::invariant(&spec);
    let cert = certify_counterexample(&clf, &spec, &CertifyConfig::new(200_000, 5)).unwrap();
    let t = cert.clause("transfer_statistic").next().unwrap();
    let far = cert.env_loss[spec.far];
    assert!((t.estimate - far.0).abs() <= 1e-15);
    // The margin y·2μ_cᵀz_c/σ_c² is N(2s, 4s) with s = ‖μ_c‖²/σ_c² in every
    // environment; integrate the logistic loss against it on a fine grid.
    let s: f64 = spec.mu_c.iter().map(|m| m * m).sum();
    let (mean, sd) = (2.0 * s, 2.0 * s.sqrt());
    let h = 1e-3;
    let exact: f64 = (-12_000..=12_000)
        .map(|k| {
            let u = k as f64 * h;
            logistic::loss(mean + sd * u) * (-0.5 * u * u).exp() * h / (2.0 * std::f64::consts::PI).sqrt()
        })
        .sum();
    for (env, (m, lo, hi)) in cert.env_loss.iter().enumerate() {
        assert!(*lo <= exact && exact <= *hi, "env {env}: {m} [{lo}, {hi}] vs {exact}");
    }
    assert!(cert.clause("excess_erm").all(|c| c.estimate == 0.0));
}

#[test]
fn two_dimensional_construction_fails_to_certify() {
    let spec = ConstructionSpec::recipe(1, 2, 3, 1.0, 100_000).unwrap();
    let clf = build_counterexample(&spec).unwrap();
    let cert = certify_counterexample(&clf, &spec, &CertifyConfig::new(100_000, 0)).unwrap();
    assert!(!cert.passed, "{}", cert.summary());
    assert!(cert.clauses.iter().any(|c| !c.pass));
    assert!(cert.summary().contains("FAIL"));
}

#[test]
fn certify_reports_unsettled_clauses() {
    // Two batches of two samples leave every interval wide open.
    let spec = ConstructionSpec::recipe(4, 16, 3, 1.0, 4).unwrap();
    let clf = build_counterexample(&spec).unwrap();
    let cfg = CertifyConfig { batches: 2, max_rounds: 1, ..CertifyConfig::new(4, 0) };
    match certify_counterexample(&clf, &spec, &cfg) {
        Err(AnalysisError::Precision { achieved, target, samples, .. }) => {
            assert!(achieved >= target);
            assert_eq!(samples, 8);
        }
        other => panic!("expected a precision error, got {other:?}"),
    }
    let bad = CertifyConfig { batches: 1, ..CertifyConfig::new(100, 0) };
    assert!(matches!(certify_counterexample(&clf, &spec, &bad), Err(AnalysisError::Invalid(_))));
}
