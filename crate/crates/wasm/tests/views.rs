use tvo_wasm::{gaussian_sampled_view, gaussian_view, toy_view, BoundsView};

fn check_sandwich(v: &BoundsView) {
    let tol = 1e-12;
    assert!(v.elbo <= v.lower + tol, "{} > {}", v.elbo, v.lower);
    assert!(v.lower <= v.log_evidence + tol);
    assert!(v.log_evidence <= v.upper + tol);
    assert!(v.upper <= v.eubo + tol);
}

#[test]
fn gaussian_bounds_bracket_the_evidence() {
    for (k, log_spacing) in [(1, false), (2, true), (5, true), (10, false)] {
        let v = gaussian_view(1.5, -0.5, 0.3, k, 0.1, log_spacing).unwrap();
        check_sandwich(&v);
        assert_eq!(v.knots.len(), k + 1);
        assert!(v.betas.windows(2).all(|w| w[0] < w[1]));
        assert!(v.g.windows(2).all(|w| w[1] >= w[0] - 1e-12));
        for (b, g) in v.knots.iter().zip(&v.knot_g) {
            let i = v.betas.iter().position(|x| x == b).expect("knots are on the plot grid");
            assert_eq!(v.g[i], *g);
        }
    }
}

#[test]
fn one_partition_gives_elbo_and_eubo() {
    let v = gaussian_view(0.7, 0.0, 0.0, 1, 0.5, false).unwrap();
    assert_eq!(v.lower, v.elbo);
    assert_eq!(v.upper, v.eubo);
}

#[test]
fn toy_bounds_and_posterior_matching() {
    let v = toy_view(4, 3, 5, 2.0, 4, 0.05, true, false).unwrap();
    check_sandwich(&v);
    assert!(v.upper - v.lower > 1e-6);
    let flat = toy_view(4, 3, 5, 2.0, 4, 0.05, true, true).unwrap();
    assert!((flat.upper - flat.lower).abs() < 1e-10);
    assert!((flat.lower - flat.log_evidence).abs() < 1e-10);
}

#[test]
fn sampled_curve_tracks_the_exact_one() {
    let v = gaussian_sampled_view(1.0, 0.2, 0.1, 3, 0.1, true, 5_000, 9).unwrap();
    let se = v.std_errors.as_ref().unwrap();
    let exact = v.reference_g.as_ref().unwrap();
    for i in 0..v.betas.len() {
        assert!((v.g[i] - exact[i]).abs() <= 5.0 * se[i] + 1e-3, "beta {}: {} vs {}", v.betas[i], v.g[i], exact[i]);
    }
    assert_eq!(v.g[0], v.knot_g[0]);
    assert_eq!(v.g.last(), v.knot_g.last());
}

#[test]
fn invalid_schedules_are_errors() {
    assert!(gaussian_view(0.0, 0.0, 0.0, 0, 0.1, false).is_err());
    assert!(gaussian_view(0.0, 0.0, 0.0, 3, 1.5, true).is_err());
    assert!(toy_view(0, 13, 2, 1.0, 2, 0.1, false, false).is_err());
}
