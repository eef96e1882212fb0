use tvo::autodiff::{finite_difference_gradient, relative_error, ParamVector, RealArray, Role};
use tvo::error::Result;
use tvo::estimators::{
    covariance_gradient, estimate_gradient, gradient_std_diagnostic, reinforce_baseline_gradient, reinforce_gradient,
    reparam_gradient, EstimatorConfig, EstimatorKind, Integrand, Term,
};
use tvo::models::{ConjugateGaussian, LatentModel, ToyBernoulli};
use tvo::objectives::{training_gradient, tvo_lower, DataSource, ObjectiveKind, ObjectiveSpec, Optimize};
use tvo::oracles::enumerate;
use tvo::path::{make_schedule, Spacing};
use tvo::rng;

struct Moments {
    mean: Vec<f64>,
    se: Vec<f64>,
    var: Vec<f64>,
}

fn moments(reps: u64, mut draw: impl FnMut(u64) -> Result<Vec<f64>>) -> Moments {
    let draws: Vec<Vec<f64>> = (0..reps).map(|r| draw(r).unwrap()).collect();
    let n = reps as f64;
    let d = draws[0].len();
    let mean: Vec<f64> = (0..d).map(|j| draws.iter().map(|g| g[j]).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..d).map(|j| draws.iter().map(|g| (g[j] - mean[j]).powi(2)).sum::<f64>() / (n - 1.0)).collect();
    let se = var.iter().map(|v| (v / n).sqrt()).collect();
    Moments { mean, se, var }
}

fn assert_within_3se(m: &Moments, target: &[f64], what: &str) {
    for (j, t) in target.iter().enumerate() {
        let diff = (m.mean[j] - t).abs();
        assert!(diff <= 3.0 * m.se[j] + 1e-12, "{what}: coord {j} mean {} vs {t} (se {})", m.mean[j], m.se[j]);
    }
}

fn gaussian() -> (ConjugateGaussian, ParamVector, RealArray) {
    let (m, p, x) = ConjugateGaussian::random_instance(3);
    (m, p, RealArray::matrix(1, 1, vec![x]).unwrap())
}

#[test]
fn covariance_estimator_matches_the_analytic_elbo_gradient() {
    let (m, p, x) = gaussian();
    let s = 10;
    let analytic = m.analytic_elbo_gradient(&p, x.data()[0]);
    // E_q[∇_φ U'] = 0 at β = 0, so the φ block is the plug-in covariance with mean (S-1)/S times its limit
    let phi = p.layout().role_mask(&[Role::Phi]);
    let target: Vec<f64> =
        analytic.iter().zip(&phi).map(|(g, &f)| if f == 1.0 { g * (s - 1) as f64 / s as f64 } else { *g }).collect();
    let est = moments(20_000, |r| Ok(covariance_gradient(&m, &p, &x, Integrand::InstantaneousElbo, 0.0, s, r)?.vector));
    assert_within_3se(&est, &target, "covariance");
}

#[test]
fn unbiased_estimators_match_the_analytic_elbo_gradient() {
    let (m, p, x) = gaussian();
    let analytic = m.analytic_elbo_gradient(&p, x.data()[0]);
    let reparam = moments(10_000, |r| Ok(reparam_gradient(&m, &p, &x, Integrand::InstantaneousElbo, 0.0, 10, r)?.vector));
    assert_within_3se(&reparam, &analytic, "reparam");
    let rb = moments(20_000, |r| Ok(reinforce_baseline_gradient(&m, &p, &x, Integrand::InstantaneousElbo, 0.0, 10, r)?.vector));
    assert_within_3se(&rb, &analytic, "reinforce-baseline");
    let plain = moments(20_000, |r| Ok(reinforce_gradient(&m, &p, &x, Integrand::InstantaneousElbo, 0.0, 10, r)?.vector));
    assert_within_3se(&plain, &analytic, "reinforce");
    for j in 0..analytic.len() {
        assert!(plain.var[j] >= rb.var[j], "coord {j}: reinforce var {} < baseline var {}", plain.var[j], rb.var[j]);
    }
}

#[test]
fn constant_integrand_has_no_gradient() {
    let (m, p, x) = gaussian();
    let f = Integrand::Constant(2.5);
    let cov = covariance_gradient(&m, &p, &x, f, 0.4, 7, 1).unwrap();
    assert!(cov.vector.iter().all(|g| g.abs() <= 1e-12), "{:?}", cov.vector);
    let rb = moments(20_000, |r| Ok(reinforce_baseline_gradient(&m, &p, &x, f, 0.0, 5, r)?.vector));
    assert_within_3se(&rb, &vec![0.0; p.dim()], "baseline with constant f");
}

#[test]
fn plain_reinforce_refuses_interior_beta() {
    let (m, p, x) = gaussian();
    let err = reinforce_gradient(&m, &p, &x, Integrand::InstantaneousElbo, 0.5, 5, 0).unwrap_err();
    assert!(matches!(err, tvo::TvoError::Unsupported(_)), "{err}");
}

#[test]
fn gradient_std_shrinks_like_inverse_root_s() {
    let (m, p, x) = gaussian();
    let std = |s: usize| {
        gradient_std_diagnostic(400, s as u64, |seed| {
            Ok(covariance_gradient(&m, &p, &x, Integrand::InstantaneousElbo, 0.0, s, seed)?.vector)
        })
        .unwrap()
    };
    let ratio = std(10) / std(1000);
    assert!((7.0..=13.0).contains(&ratio), "ratio {ratio}");
    let exact = gradient_std_diagnostic(5, 0, |_| {
        let (tm, tp, tx) = toy();
        let cfg = EstimatorConfig::new(EstimatorKind::ExactEnumeration, 0);
        Ok(estimate_gradient(&tm, &tp, &tx, &[Term::new(0.3, 1.0)], Integrand::InstantaneousElbo, cfg, 0)?.vector)
    })
    .unwrap();
    assert_eq!(exact, 0.0);
}

#[test]
fn inference_compilation_matches_the_cross_entropy_gradient() {
    // sleep-phase φ: EUBO on simulated data, covariance estimator
    let m = ConjugateGaussian::new(1.0, 1.0).unwrap();
    let p = m.params(0.5, 0.2, -0.3, 0.4);
    let spec = ObjectiveSpec::new(ObjectiveKind::Eubo, make_schedule(1, 0.5, Spacing::Equal).unwrap(), 200)
        .optimize(Optimize::Phi)
        .data_source(DataSource::ModelSimulated);
    let batch = RealArray::matrix(4, 1, vec![0.0; 4]).unwrap();
    let est = moments(4_000, |r| Ok(training_gradient(&spec, &m, &p, &batch, r)?.vector));
    // ∇_φ EUBO = −E_post[∇_φ log q], which averaged over x ~ p is ∇_φ E_{p(x,z)}[−log q]
    let target = m.analytic_cross_entropy_gradient(&p);
    let theta = p.layout().role_mask(&[Role::Theta]);
    for (j, t) in theta.iter().enumerate() {
        if *t == 1.0 {
            assert_eq!(est.mean[j], 0.0, "θ coordinate {j} must be zero with simulated data");
        }
    }
    // self-normalized weights carry an O(1/S) bias; S = 200 keeps it below the noise
    assert_within_3se(&est, &target, "inference compilation");
}

fn toy() -> (ToyBernoulli, ParamVector, RealArray) {
    let m = ToyBernoulli::new(3, 3).unwrap();
    let p = m.random_params(1.5, 21);
    let (x, _) = m.sample_joint(&p, 2, &mut rng::rng(22)).unwrap();
    (m, p, x)
}

#[test]
fn exact_tvo_gradient_matches_finite_differences() {
    let (m, p, x) = toy();
    let schedule = make_schedule(2, 0.3, Spacing::Log).unwrap();
    let spec = ObjectiveSpec::new(ObjectiveKind::TvoLower, schedule.clone(), 1).estimator(EstimatorKind::ExactEnumeration);
    let grad = training_gradient(&spec, &m, &p, &x, 0).unwrap().vector;
    let exact_tvo = |v: &[f64]| -> Result<f64> {
        let q = p.with_values(v.to_vec())?;
        let mut total = 0.0;
        for i in 0..x.rows() {
            let e = enumerate(&m, &q, x.row(i))?;
            total += tvo_lower(&e.table(schedule.betas())?, &schedule)?;
        }
        Ok(total / x.rows() as f64)
    };
    let fd = finite_difference_gradient(exact_tvo, p.values(), 1e-5).unwrap();
    let err = relative_error(&grad, &fd);
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn identical_seeds_give_identical_estimates() {
    let (m, p, x) = toy();
    let terms = [Term::new(0.0, 0.5), Term::new(0.3, 0.5)];
    for kind in [EstimatorKind::Covariance, EstimatorKind::ReinforceBaseline] {
        for crn in [true, false] {
            let cfg = EstimatorConfig { kind, samples: 8, crn };
            let a = estimate_gradient(&m, &p, &x, &terms, Integrand::InstantaneousElbo, cfg, 99).unwrap();
            let b = estimate_gradient(&m, &p, &x, &terms, Integrand::InstantaneousElbo, cfg, 99).unwrap();
            assert_eq!(a, b);
        }
    }
}
