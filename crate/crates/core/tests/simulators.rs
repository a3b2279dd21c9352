mod support;

use ci_stonet_core::datagen::{
    generate, misspec_effect, proxy_sim_eta, proxy_sim_propensity, sample_treatment_inverse_cdf, tilted_cdf, xi, DgpKind,
    DgpSpec, PROXY_SIM_CENTERING,
};
use ci_stonet_core::rng::{open_unit, substream};
use proptest::prelude::*;
use support::{bisect_inverse, ks_statistic, tilted_cdf_quadrature};

const TILTS: [f64; 5] = [-5.0, -1.0, 0.0, 1.0, 5.0];

#[test]
fn inverse_cdf_draws_pass_ks_against_quadrature_cdf() {
    for (k, &c) in TILTS.iter().enumerate() {
        let mut rng = substream(77, k as u64);
        let mut draws: Vec<f64> = (0..10_000).map(|_| sample_treatment_inverse_cdf(c, open_unit(&mut rng))).collect();
        let d = ks_statistic(&mut draws, |a| tilted_cdf_quadrature(c, a));
        assert!(d < 0.02, "c = {c}: KS statistic {d}");
    }
}

#[test]
fn closed_form_cdf_matches_quadrature() {
    for &c in &TILTS {
        for k in 0..=40 {
            let a = -1.0 + k as f64 * 0.05;
            let (closed, quad) = (tilted_cdf(c, a), tilted_cdf_quadrature(c, a));
            assert!((closed - quad).abs() < 1e-10, "c = {c}, a = {a}: {closed} vs {quad}");
        }
    }
}

#[test]
fn closed_form_inverse_matches_bisection() {
    for &c in &TILTS {
        for k in 1..200 {
            let u = k as f64 / 200.0;
            let closed = sample_treatment_inverse_cdf(c, u);
            let bisect = bisect_inverse(u, |a| tilted_cdf(c, a));
            assert!((closed - bisect).abs() < 1e-10, "c = {c}, u = {u}: {closed} vs {bisect}");
        }
    }
}

#[test]
fn inverse_cdf_extremes_are_clamped() {
    assert_eq!(sample_treatment_inverse_cdf(0.0, 0.5), 0.0);
    for &c in &TILTS {
        let lo = sample_treatment_inverse_cdf(c, 1e-300);
        let hi = sample_treatment_inverse_cdf(c, 1.0 - 1e-16);
        assert!((-1.0..=1.0).contains(&lo) && (-1.0..=1.0).contains(&hi));
    }
}

#[test]
fn confounding_strength_values() {
    // beta = 0 leaves only the two logistic terms: 2 expit(-0.5).
    let z = [0.3, -1.2, 0.7, 2.0, -0.4, 1.1];
    let expit = |v: f64| 1.0 / (1.0 + (-v).exp());
    assert!((xi(&z, 0.0).unwrap() - 2.0 * expit(-0.5)).abs() < 1e-15);
    let by_hand = z[0].sin() + z[1].sin() + z[2].cos() + z[3].cos() + expit(z[4] - 0.5) + expit(z[5] - 0.5);
    assert!((xi(&z, 1.0).unwrap() - by_hand).abs() < 1e-14);
}

#[test]
fn proxy_effect_centering_matches_quadrature() {
    // E f(w) for w ~ N(0, 1), f(w) = 2 expit(w - 0.5), by Simpson on [-12, 12].
    let f = |w: f64| 2.0 / (1.0 + (0.5 - w).exp()) * (-0.5 * w * w).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let m = 20_000;
    let h = 24.0 / m as f64;
    let mut s = f(-12.0) + f(12.0);
    for k in 1..m {
        s += f(-12.0 + k as f64 * h) * if k % 2 == 1 { 4.0 } else { 2.0 };
    }
    let ef = s * h / 3.0;
    assert!((PROXY_SIM_CENTERING - ef * ef).abs() < 1e-12);
}

#[test]
fn simple_design_outcomes_and_effects_follow_the_structural_equation() {
    for kind in [DgpKind::SeparableConfounding, DgpKind::NonSeparableConfounding] {
        let spec = DgpSpec { noise_scale: 0.0, ..DgpSpec::new(kind, 50, 5, 5, 13) };
        let g = generate(&spec).unwrap();
        let get = |name: &str| g.constants.iter().find(|(k, _)| k == name).map(|&(_, v)| v);
        let theta: Vec<f64> = (1..=9).map(|j| get(&format!("theta_{j}")).unwrap()).collect();
        let d = &g.train;
        let truth = d.truth.as_ref().unwrap();
        let zs = truth.true_z.as_ref().unwrap();
        let me = truth.marginal_effects.as_ref().unwrap();
        for i in 0..d.n() {
            let z = zs.row(i);
            let c = xi(z, 1.0).unwrap();
            let coupling = get("theta0").unwrap_or(c);
            let outcome = |a: &[f64]| {
                let mut v = c;
                for j in 0..9 {
                    v += theta[j] * a[j] * a[j];
                    for k in j + 1..9 {
                        v -= coupling * a[j] * a[k];
                    }
                }
                v
            };
            let a = d.a.row(i).to_vec();
            assert!((outcome(&a) - d.y.get(i, 0)).abs() < 1e-12);
            for j in 0..9 {
                let h = 1e-5;
                let mut up = a.clone();
                up[j] += h;
                let mut down = a.clone();
                down[j] -= h;
                let fd = (outcome(&up) - outcome(&down)) / (2.0 * h);
                assert!((fd - me.get(i, j)).abs() < 1e-7, "{kind:?} unit {i} treatment {j}");
            }
        }
    }
}

#[test]
fn proxy_designs_carry_consistent_truth() {
    let g = generate(&DgpSpec { noise_scale: 0.0, ..DgpSpec::new(DgpKind::ProxySim, 400, 10, 10, 1) }).unwrap();
    let t = g.train.truth.as_ref().unwrap();
    let zs = t.true_z.as_ref().unwrap();
    let cate = t.true_cate.as_ref().unwrap();
    let treated = g.train.a.as_slice().iter().filter(|&&a| a == 1.0).count();
    assert_eq!(treated, 200);
    for (i, c) in cate.iter().enumerate() {
        assert!((c - 3.0 - proxy_sim_eta(zs.row(i))).abs() < 1e-14);
    }
    assert_eq!(g.train.d_x(), 100);

    for kind in [DgpKind::MisspecBasicProxy, DgpKind::MisspecOutcomeProxy, DgpKind::MisspecTreatmentProxy] {
        let g = generate(&DgpSpec::new(kind, 30, 5, 5, 2)).unwrap();
        let t = g.train.truth.as_ref().unwrap();
        let zs = t.true_z.as_ref().unwrap();
        for (i, c) in t.true_cate.as_ref().unwrap().iter().enumerate() {
            assert_eq!(*c, misspec_effect(zs.row(i)));
        }
        assert_eq!(t.true_ate, Some(3.0));
        assert_eq!(g.train.d_x(), 50);
    }
}

#[test]
fn generation_is_seeded() {
    for kind in DgpKind::ALL {
        let spec = DgpSpec::new(kind, 30, 10, 10, 5);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a, b);
        let c = generate(&DgpSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a.train.y, c.train.y);
        assert_eq!((a.train.n(), a.val.n(), a.test.n()), (30, 10, 10));
        assert_eq!(a.train.d_a(), kind.treatment_dim());
        assert_eq!(a.train.d_x(), kind.proxy_dim());
    }
}

#[test]
fn empty_split_is_rejected() {
    assert!(generate(&DgpSpec::new(DgpKind::ProxySim, 0, 10, 10, 0)).is_err());
}

proptest! {
    #[test]
    fn proxy_propensity_stays_in_band(z in proptest::collection::vec(-8.0f64..8.0, 5)) {
        let p = proxy_sim_propensity(&z);
        prop_assert!((0.25..=0.5).contains(&p));
    }

    #[test]
    fn tilted_cdf_is_monotone_and_inverted(c in -20.0f64..20.0, u in 0.001f64..0.999, v in 0.001f64..0.999) {
        let a = sample_treatment_inverse_cdf(c, u);
        prop_assert!((-1.0..=1.0).contains(&a));
        prop_assert!((tilted_cdf(c, a) - u).abs() < 1e-9);
        let b = sample_treatment_inverse_cdf(c, v);
        prop_assert!((u < v) <= (a <= b));
    }
}
