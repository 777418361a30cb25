use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use transfer_risk::autodiff::{Array, Tape};
use transfer_risk::envgen::*;
use transfer_risk::inner::{self, Batch, InverseHvp, SolverConfig};
use transfer_risk::logistic;
use transfer_risk::model::{FeatureMap, Model};
use transfer_risk::objectives::*;

fn quad_suite(envs: usize, mu_c: f64, means: Vec<f64>) -> Vec<EnvData> {
    quad_suite_with(envs, mu_c, means, 20)
}

fn quad_suite_with(envs: usize, mu_c: f64, means: Vec<f64>, nodes: usize) -> Vec<EnvData> {
    let cfg = SuiteConfig {
        means: MeanSource::Explicit(means.into_iter().map(|m| vec![m]).collect()),
        materialize: Materialize::Quadrature { nodes },
        ..SuiteConfig::linear(envs, mu_c, 0.0, 1.0)
    };
    make_suite(&cfg, 0).unwrap().envs
}

fn sampled_suite(envs: usize, n: usize, seed: u64) -> Vec<EnvData> {
    make_suite(&SuiteConfig { n_samples: n, ..SuiteConfig::linear(envs, 1.0, 1.0, 1.0) }, seed).unwrap().envs
}

fn pair_model(a: f64, b: f64, w: f64) -> Model {
    Model::new(FeatureMap::pair(a, b), Array::vector(vec![w]))
}

/// Central differences of `f` over every parameter entry of `model`.
fn finite_gradient(model: &Model, h: f64, f: impl Fn(&Model) -> f64) -> Vec<f64> {
    let mut out = Vec::new();
    let n = model.params().len();
    for k in 0..n {
        for j in 0..model.params()[k].len() {
            let mut plus = model.clone();
            plus.params_mut()[k].data_mut()[j] += h;
            let mut minus = model.clone();
            minus.params_mut()[k].data_mut()[j] -= h;
            out.push((f(&plus) - f(&minus)) / (2.0 * h));
        }
    }
    out
}

fn flat(grads: &[Array]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.data().iter().copied()).collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n.max(1e-300)
}

#[test]
fn zero_predictor_costs_ln2_everywhere() {
    let envs = sampled_suite(3, 200, 1);
    let r = erm_risk(&pair_model(0.6, 0.8, 0.0), &envs).unwrap();
    assert!(r.per_env.iter().all(|l| (l - std::f64::consts::LN_2).abs() <= 1e-13));
}

#[test]
fn large_margin_predictor_has_tiny_loss() {
    let x = Array::matrix(4, 1, vec![2.0, 3.0, -2.5, -4.0]).unwrap();
    let env = EnvData::uniform(x, Labels::Binary(vec![1.0, 1.0, -1.0, -1.0]));
    let model = Model::new(FeatureMap::linear(Array::matrix(1, 1, vec![1.0]).unwrap()), Array::vector(vec![20.0]));
    assert!(erm_risk(&model, &[env]).unwrap().total <= 1e-6);
}

#[test]
fn pooled_loss_is_size_weighted() {
    let mut envs = sampled_suite(2, 300, 2);
    envs.push(sampled_suite(2, 900, 3).remove(1));
    let r = erm_risk(&pair_model(0.3, 0.5, 1.2), &envs).unwrap();
    let expect = (300.0 * r.per_env[0] + 300.0 * r.per_env[1] + 900.0 * r.per_env[2]) / 1500.0;
    assert!((r.pooled - expect).abs() <= 1e-14);
    assert_eq!(r.total, r.erm_term);
}

#[test]
fn irm_penalty_vanishes_at_single_env_optimum() {
    let env = sampled_suite(2, 2_000, 4).remove(0);
    let phi = FeatureMap::pair(0.7, 0.4);
    let f = phi.apply(&env.features);
    let w = inner::solve_optimal_predictor(&Batch::with_features(&env, &f), &SolverConfig::default(), None).unwrap();
    let model = Model::new(phi, w.predictor);
    let r = irmv1_risk(&model, std::slice::from_ref(&env), 1.0).unwrap();
    assert!(r.penalty <= 1e-16, "{}", r.penalty);
}

#[test]
fn irm_penalty_doubles_over_identical_envs() {
    let env = sampled_suite(2, 500, 5).remove(0);
    let model = pair_model(0.9, -0.3, 0.4);
    let one = irmv1_risk(&model, std::slice::from_ref(&env), 1.0).unwrap().penalty;
    let two = irmv1_risk(&model, &[env.clone(), env], 1.0).unwrap().penalty;
    assert!(one > 0.0 && (two - 2.0 * one).abs() <= 1e-15 * two);
}

fn mlp_model(rng: &mut ChaCha8Rng) -> Model {
    let mut r = |n: usize| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    Model::new(
        FeatureMap::mlp(Array::matrix(3, 2, r(6)).unwrap(), Array::matrix(2, 3, r(6)).unwrap()),
        Array::vector(r(2)),
    )
}

#[test]
fn penalized_objectives_match_finite_differences() {
    let envs = sampled_suite(3, 300, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for model in [pair_model(0.8, 0.6, 1.3), mlp_model(&mut rng)] {
        type Build = for<'t> fn(&Model, &transfer_risk::model::ModelVars<'t>, &[EnvData]) -> Objective<'t>;
        let builders: [Build; 2] =
            [|m, v, e| irmv1_objective(m, v, e, 2.0).unwrap(), |m, v, e| rex_objective(m, v, e, 3.0).unwrap()];
        for build in builders {
            let tape = Tape::new();
            let vars = model.vars(&tape);
            let ad = flat(&build(&model, &vars, &envs).gradient(&vars).unwrap());
            let fd = finite_gradient(&model, 1e-5, |m| {
                let t = Tape::new();
                build(m, &m.vars(&t), &envs).report.total
            });
            assert!(rel(&ad, &fd) <= 1e-4, "{ad:?} vs {fd:?}");
        }
    }
}

/// One-point environment whose loss under `Φ = 1, w = 1` is `target`.
fn env_with_loss(target: f64) -> EnvData {
    let s = -(target.exp() - 1.0).ln();
    EnvData::uniform(Array::matrix(1, 1, vec![s]).unwrap(), Labels::Binary(vec![1.0]))
}

#[test]
fn rex_variance_examples() {
    let model = Model::new(FeatureMap::linear(Array::matrix(1, 1, vec![1.0]).unwrap()), Array::vector(vec![1.0]));
    let r = rex_risk(&model, &[env_with_loss(0.2), env_with_loss(0.4)], 1.0).unwrap();
    assert!((r.per_env[0] - 0.2).abs() <= 1e-15 && (r.per_env[1] - 0.4).abs() <= 1e-15);
    assert!((r.penalty - 0.01).abs() <= 1e-15);
    let same = rex_risk(&model, &[env_with_loss(0.3), env_with_loss(0.3)], 5.0).unwrap();
    assert_eq!(same.penalty, 0.0);
    assert!(matches!(
        rex_risk(&model, &[env_with_loss(0.3)], 1.0),
        Err(ObjectiveError::TooFewEnvironments { .. })
    ));
}

#[test]
fn identical_pair_transfer_is_twice_optimal_risk() {
    let env = sampled_suite(2, 1_000, 7).remove(0);
    let model = pair_model(0.5, 0.5, 0.0);
    let solver = SolverConfig::default();
    let m = transfer_matrix(&model, &[env.clone(), env.clone()], &solver, None, true).unwrap();
    let opt = m.predictors[0].as_ref().unwrap().risk;
    assert!((m.sum_sum() - 2.0 * opt).abs() <= 1e-12);
    assert!((m.sum_sup() - 2.0 * opt).abs() <= 1e-12);
}

#[test]
fn unbiased_pair_transfer_matches_1d_quadrature() {
    // Oracle: E_{z~N(1,1)} ℓ(2z) by a 1-d 80-node Gauss–Hermite rule.
    let (x, w) = gauss_hermite(80);
    let oracle: f64 = x.iter().zip(&w).map(|(x, w)| w * logistic::loss(2.0 * (1.0 + x))).sum();
    let envs = quad_suite_with(2, 1.0, vec![-1.0, 1.0], 80);
    for a in [1.0, -1.0] {
        let r = transfer_risk(&pair_model(a, 0.0, 0.0), &envs, Variant::SumSum, InnerMax::ExactWorst, None, &SolverConfig::default())
            .unwrap();
        assert!((r.total - 2.0 * oracle).abs() <= 1e-9, "{} vs {}", r.total, 2.0 * oracle);
    }
}

#[test]
fn single_class_env_skipped_in_metric_mode() {
    let mut envs = sampled_suite(3, 200, 8);
    envs[1] = EnvData::uniform(envs[1].features.clone(), Labels::Binary(vec![1.0; 200]));
    let model = pair_model(1.0, 0.2, 0.0);
    let m = transfer_matrix(&model, &envs, &SolverConfig::default(), None, false).unwrap();
    assert_eq!(m.skipped, vec![1]);
    assert!(transfer_matrix(&model, &envs, &SolverConfig::default(), None, true).is_err());
}

fn solved(model: &Model, env: &EnvData) -> SolvedPredictor {
    solve_predictor(model, env, &SolverConfig::default(), None).unwrap()
}

#[test]
fn lambda_zero_is_erm_plus_direct_transfer() {
    let envs = quad_suite(3, 1.0, vec![0.2, 1.1, 1.7]);
    let model = pair_model(0.8, 0.6, 1.5);
    let s = solved(&model, &envs[1]);
    let alpha = SimplexWeights::new(vec![0.3, 0.0, 0.7], Some(1)).unwrap();
    let tape = Tape::new();
    let vars = model.vars(&tape);
    let hyper = TrmHyper { lambda: 0.0, ..TrmHyper::default() };
    let step = trm_step_objective(&model, &vars, &envs, 1, &alpha, &hyper, &s).unwrap();
    let r = &step.objective.report;
    assert_eq!(r.total, r.erm_term + r.transfer_term);
    assert_eq!(step.objective.total.item(), r.erm_term + r.transfer_term);
    let direct = 0.3 * step.transfer_losses[0] + 0.7 * step.transfer_losses[2];
    assert!((r.transfer_term - direct).abs() <= 1e-15);
    assert!((r.erm_term - erm_risk(&model, &envs[1..2]).unwrap().total).abs() <= 1e-15);
}

#[test]
fn grad_match_vanishes_in_value_but_not_in_gradient() {
    let envs = quad_suite(3, 1.0, vec![-0.5, 1.0, 2.0]);
    let model = pair_model(0.8, 0.6, 1.5);
    let s = solved(&model, &envs[0]);
    let alpha = SimplexWeights::uniform(3, Some(0));
    let hyper = TrmHyper { lambda: 1.0, inverse: InverseHvp::Exact, variant: Variant::SumSup };
    let tape = Tape::new();
    let vars = model.vars(&tape);
    let step = trm_step_objective(&model, &vars, &envs, 0, &alpha, &hyper, &s).unwrap();
    let v_norm: f64 = step.v_q.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(step.objective.report.grad_match_term.abs() <= v_norm * s.solve.grad_norm.max(1e-300) + 1e-18);
    let with = flat(&step.objective.gradient(&vars).unwrap());
    let tape0 = Tape::new();
    let vars0 = model.vars(&tape0);
    let no_gm = TrmHyper { lambda: 0.0, ..hyper };
    let without = flat(&trm_step_objective(&model, &vars0, &envs, 0, &alpha, &no_gm, &s).unwrap().objective.gradient(&vars0).unwrap());
    let diff: f64 = with.iter().zip(&without).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-3, "grad-match gradient should not vanish: {diff}");
}

/// `Σ_P α_P E_P[ℓ(w(Q;Φ)∘Φ)]` with `w(Q)` re-solved at this `Φ`.
fn resolved_transfer(model: &Model, envs: &[EnvData], q: usize, alpha: &[f64]) -> f64 {
    let tight = SolverConfig { tol: 1e-13, ..SolverConfig::default() };
    let f: Vec<Array> = envs.iter().map(|e| model.phi.apply(&e.features)).collect();
    let w = inner::solve_optimal_predictor(&Batch::with_features(&envs[q], &f[q]), &tight, None).unwrap().predictor;
    (0..envs.len()).filter(|&p| p != q).map(|p| alpha[p] * Batch::with_features(&envs[p], &f[p]).risk(w.data())).sum()
}

/// Dense `-g_Pᵀ H⁻¹ ∂²E_Q[ℓ]/∂w∂(a,b)` for the scalar-predictor pair model.
fn dense_implicit(model: &Model, envs: &[EnvData], q: usize, alpha: &[f64], w: f64) -> [f64; 2] {
    let (a, b) = model.phi.as_pair().unwrap();
    let mut g_p = 0.0;
    for p in (0..envs.len()).filter(|&p| p != q) {
        let Labels::Binary(y) = &envs[p].labels else { unreachable!() };
        for i in 0..envs[p].len() {
            let s = a * envs[p].features.get2(i, 0) + b * envs[p].features.get2(i, 1);
            g_p += alpha[p] * envs[p].weights[i] * logistic::loss_prime(y[i] * w * s) * y[i] * s;
        }
    }
    let env = &envs[q];
    let Labels::Binary(y) = &env.labels else { unreachable!() };
    let (mut h, mut cross) = (0.0, [0.0; 2]);
    for i in 0..env.len() {
        let x = [env.features.get2(i, 0), env.features.get2(i, 1)];
        let s = a * x[0] + b * x[1];
        let m = y[i] * w * s;
        h += env.weights[i] * logistic::loss_second(m) * s * s;
        for j in 0..2 {
            cross[j] += env.weights[i] * (logistic::loss_second(m) * w * s * x[j] + logistic::loss_prime(m) * y[i] * x[j]);
        }
    }
    [-g_p / h * cross[0], -g_p / h * cross[1]]
}

#[test]
fn implicit_gradient_identities_in_linear_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..10 {
        let means: Vec<f64> = (0..3).map(|_| rng.random_range(-1.5..1.5)).collect();
        let envs = quad_suite(3, rng.random_range(0.5..2.0), means);
        let th: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let r = rng.random_range(0.5..1.5);
        let model = pair_model(r * th.cos(), r * th.sin(), rng.random_range(-1.0..1.0));
        let q = rng.random_range(0..3);
        let mut alpha = vec![0.0; 3];
        let share = rng.random_range(0.0..1.0);
        let others: Vec<usize> = (0..3).filter(|&p| p != q).collect();
        alpha[others[0]] = share;
        alpha[others[1]] = 1.0 - share;
        let s = solve_predictor(&model, &envs[q], &SolverConfig { tol: 1e-13, ..SolverConfig::default() }, None).unwrap();
        let hyper = TrmHyper { lambda: 1.0, inverse: InverseHvp::Exact, variant: Variant::SumSup };
        let tape = Tape::new();
        let vars = model.vars(&tape);
        let step = trm_step_objective(&model, &vars, &envs, q, &SimplexWeights::new(alpha.clone(), Some(q)).unwrap(), &hyper, &s)
            .unwrap();
        // Gradient of transfer + grad-match with respect to (a, b): the ERM
        // term's contribution is removed.
        let g_all = flat(&step.objective.gradient(&vars).unwrap());
        let tape_e = Tape::new();
        let vars_e = model.vars(&tape_e);
        let g_erm = flat(&erm_objective(&model, &vars_e, &envs[q..q + 1]).unwrap().gradient(&vars_e).unwrap());
        let ad: Vec<f64> = (0..2).map(|j| g_all[j] - g_erm[j]).collect();
        let fd = finite_gradient(&model, 1e-4, |m| resolved_transfer(m, &envs, q, &alpha));
        assert!(rel(&ad, &fd[..2]) <= 1e-3, "{ad:?} vs {fd:?}");
        // Implicit part alone against dense assembly.
        let tape_d = Tape::new();
        let vars_d = model.vars(&tape_d);
        let direct_only = TrmHyper { lambda: 0.0, ..hyper };
        let g_direct = flat(
            &trm_step_objective(&model, &vars_d, &envs, q, &SimplexWeights::new(alpha.clone(), Some(q)).unwrap(), &direct_only, &s)
                .unwrap()
                .objective
                .gradient(&vars_d)
                .unwrap(),
        );
        let implicit: Vec<f64> = (0..2).map(|j| g_all[j] - g_direct[j]).collect();
        let dense = dense_implicit(&model, &envs, q, &alpha, s.solve.predictor.data()[0]);
        assert!(rel(&implicit, &dense) <= 1e-6, "{implicit:?} vs {dense:?}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn eg_preserves_simplex_and_favors_worst(seed in any::<u64>(), n in 2usize..8, eta in 0.0f64..20.0, owned in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let owner = owned.then(|| rng.random_range(0..n)).filter(|_| n > 2);
        let mut w: Vec<f64> = (0..n).map(|i| if Some(i) == owner { 0.0 } else { rng.random_range(0.01..1.0) }).collect();
        let s: f64 = w.iter().sum();
        w.iter_mut().for_each(|v| *v /= s);
        let alpha = SimplexWeights::new(w, owner).unwrap();
        let losses: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..3.0)).collect();
        let out = eg_update(&alpha, &losses, eta).unwrap();
        prop_assert!(out.validate(1e-12).is_ok());
        let worst = (0..n).filter(|&i| Some(i) != owner).max_by(|&a, &b| losses[a].total_cmp(&losses[b])).unwrap();
        prop_assert!(out.weights()[worst] >= alpha.weights()[worst]);
        let small = eg_update(&alpha, &losses, 1e-9).unwrap();
        let delta: f64 = small.weights().iter().zip(alpha.weights()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!(delta <= 1e-9 * 3.0);
        let big = eg_update(&alpha, &losses, 1e6).unwrap();
        prop_assert!(big.weights()[worst] > 0.999);
    }

    #[test]
    fn sup_dominates_any_mixture(seed in any::<u64>()) {
        let envs = sampled_suite(4, 200, seed % 50);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = pair_model(rng.random_range(0.1..1.0), rng.random_range(-1.0..1.0), 0.0);
        let m = transfer_matrix(&model, &envs, &SolverConfig::default(), None, true).unwrap();
        let alphas: Vec<SimplexWeights> = (0..4).map(|q| {
            let w: Vec<f64> = (0..4).map(|p| if p == q { 0.0 } else { rng.random_range(0.0..1.0) }).collect();
            let s: f64 = w.iter().sum();
            SimplexWeights::new(w.into_iter().map(|v| v / s).collect(), Some(q)).unwrap()
        }).collect();
        prop_assert!(m.sum_sup() >= m.eg_state(&alphas).unwrap() - 1e-12);
    }
}

#[test]
fn groupdro_update_examples() {
    let u = SimplexWeights::uniform(2, None);
    let out = groupdro_weights_update(&u, &[4f64.ln(), 2f64.ln()], 1.0).unwrap();
    assert!((out.weights()[0] - 2.0 / 3.0).abs() <= 1e-15);
    assert_eq!(groupdro_weights_update(&u, &[0.5, 0.5], 1.0).unwrap(), u);
    assert!(groupdro_weights_update(&SimplexWeights::uniform(3, Some(0)), &[0.0; 3], 1.0).is_err());
}
