use statrs::distribution::{ContinuousCDF, Normal};

use splinevine::dgp::{
    frank_h, frank_h_inverse, frank_tau_to_theta, frank_theta_to_tau, replicate_rng, simulate_frank_vine, DgpSpec,
    FrankCase, FrankVineSpec, Mixture, NormalMixtureSpec,
};
use splinevine::metrics::{kl_oos, posterior_prob};

fn ks_uniform(mut x: Vec<f64>) -> f64 {
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| (v - i as f64 / n).abs().max(((i + 1) as f64 / n - v).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn frank_vine_margins_are_uniform() {
    let u = simulate_frank_vine(&FrankVineSpec::new(4, FrankCase::A, 0.6).unwrap(), 4000, 1).unwrap();
    for j in 0..4 {
        let d = ks_uniform(u.column(j).iter().copied().collect());
        // 0.1% critical value
        assert!(d < 1.95 / 4000f64.sqrt(), "column {j}: {d}");
    }
}

#[test]
fn mixture_margins_are_uniform_and_components_balanced() {
    let mix = Mixture::new(NormalMixtureSpec::three_d()).unwrap();
    let (raw, cop, labels) = mix.simulate_with(5000, &mut replicate_rng(2, 0));
    for j in 0..3 {
        let d = ks_uniform(cop.column(j).iter().copied().collect());
        assert!(d < 1.95 / 5000f64.sqrt(), "column {j}: {d}");
    }
    let share = labels.iter().filter(|&&k| k == 0).count() as f64 / 5000.0;
    assert!((share - 0.5).abs() < 4.0 * (0.25f64 / 5000.0).sqrt(), "{share}");
    // first component has mean 1 and variance 1.0 per coordinate
    let std = Normal::new(1.0, 1.0).unwrap();
    let comp0: Vec<f64> = labels.iter().zip(raw.column(0).iter()).filter(|(k, _)| **k == 0).map(|(_, &x)| std.cdf(x)).collect();
    assert!(ks_uniform(comp0.clone()) < 1.95 / (comp0.len() as f64).sqrt());
}

#[test]
fn frank_helpers_are_consistent() {
    for tau in [-0.6, -0.2, 0.05, 0.3, 0.7] {
        let th = frank_tau_to_theta(tau).unwrap();
        assert!((frank_theta_to_tau(th) - tau).abs() < 1e-9);
        for v in [0.1, 0.5, 0.93] {
            for p in [0.01, 0.4, 0.99] {
                assert!((frank_h(frank_h_inverse(p, v, th), v, th) - p).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn spec_strings_round_trip() {
    for s in ["frank:p=3,case=b,beta=0.6", "frank:p=4,tau=0.25", "mixture:p=5"] {
        let spec: DgpSpec = s.parse().unwrap();
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(serde_json::from_str::<DgpSpec>(&json).unwrap(), spec);
    }
    for bad in ["frank:p=1,tau=0.2", "mixture:p=4", "clayton:p=3", "frank:p=3,case=z,beta=0.5"] {
        assert!(bad.parse::<DgpSpec>().is_err(), "{bad}");
    }
}

#[test]
fn kl_of_a_model_against_itself_is_zero_and_positive_otherwise() {
    let truth = "frank:p=3,case=b,beta=0.6".parse::<DgpSpec>().unwrap().build().unwrap();
    let other = "frank:p=3,tau=0.3".parse::<DgpSpec>().unwrap().build().unwrap();
    let pts = truth.sample(3000, &mut replicate_rng(3, 0)).unwrap();
    let same = kl_oos(|u: &[f64]| truth.log_density(u), |u: &[f64]| Ok(truth.log_density(u)), &pts, false).unwrap();
    assert_eq!(same.kl, 0.0);
    let diff = kl_oos(|u: &[f64]| truth.log_density(u), |u: &[f64]| Ok(other.log_density(u)), &pts, false).unwrap();
    assert!(diff.kl > 0.01, "{}", diff.kl);
    assert!(posterior_prob(0.0, 0.0, 0.5).unwrap() == 0.5);
}
