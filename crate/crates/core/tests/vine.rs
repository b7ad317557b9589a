use nalgebra::DMatrix;
use rand::Rng;

use splinevine::copula::{Along, EvalPoint, Evaluator};
use splinevine::dgp::{replicate_rng, simulate_frank_vine, FrankCase, FrankVineSpec};
use splinevine::vine::{
    fit_vine, fit_vine_on, select_structure, select_structure_with_fits, vine_log_density, Edge, EdgeKind, FitMode,
    FittedVine, VineConfig, VineEvaluator, VineStructure,
};

fn config() -> VineConfig {
    VineConfig::new(2, 4, 4).unwrap()
}

fn non_simplified(n: usize, seed: u64) -> DMatrix<f64> {
    simulate_frank_vine(&FrankVineSpec::new(3, FrankCase::B, 0.6).unwrap(), n, seed).unwrap()
}

#[test]
fn two_dimensional_vine_has_one_edge() {
    let u = simulate_frank_vine(&FrankVineSpec::simplified(2, 0.4).unwrap(), 300, 1).unwrap();
    let s = select_structure(&u, &config()).unwrap();
    assert_eq!(s.trees, vec![vec![Edge::new(0, 1, vec![])]]);
    let fv = fit_vine(&u, FitMode::Test, &config()).unwrap();
    assert!(fv.edges[0][0].sa_test.is_none());
    assert_eq!(fv.conditional_edges(), 0);
}

#[test]
fn selected_structures_satisfy_proximity() {
    let u = simulate_frank_vine(&FrankVineSpec::simplified(5, 0.3).unwrap(), 400, 2).unwrap();
    let s = select_structure(&u, &config()).unwrap();
    s.validate().unwrap();
    assert_eq!(s.trees.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 3, 2, 1]);
    assert!(VineStructure::d_vine(5).validate().is_ok());

    let mut broken = VineStructure::d_vine(4);
    broken.trees[1][0] = Edge::new(0, 3, vec![1]);
    assert!(broken.validate().is_err());
}

#[test]
fn structure_is_invariant_under_relabelling() {
    let u = non_simplified(500, 3);
    let perm = [2usize, 0, 1];
    let up = DMatrix::from_fn(u.nrows(), 3, |i, j| u[(i, perm[j])]);
    let s = select_structure(&u, &config()).unwrap();
    let sp = select_structure(&up, &config()).unwrap();
    let relabel = |e: &Edge| Edge::new(perm[e.a], perm[e.b], e.cond.iter().map(|&c| perm[c]).collect());
    for (t, tp) in s.trees.iter().zip(&sp.trees) {
        let mut mapped: Vec<Edge> = tp.iter().map(relabel).collect();
        let mut orig = t.clone();
        mapped.sort();
        orig.sort();
        assert_eq!(orig, mapped);
    }
}

#[test]
fn test_mode_keeps_partial_fits_where_not_rejected() {
    let u = simulate_frank_vine(&FrankVineSpec::simplified(3, 0.3).unwrap(), 500, 4).unwrap();
    let simpa = select_structure_with_fits(&u, &config()).unwrap();
    let test = fit_vine_on(&u, &simpa.structure, FitMode::Test, &config(), Some(&simpa)).unwrap();
    for (ts, tt) in simpa.edges.iter().zip(&test.edges) {
        for (es, et) in ts.iter().zip(tt) {
            assert_eq!(es.edge, et.edge);
            let rejected = et.sa_test.as_ref().is_some_and(|t| t.reject);
            if rejected {
                assert_eq!(et.kind, EdgeKind::Conditional);
                assert_eq!(et.partial.as_ref().unwrap().coeffs, es.fit.coeffs);
            } else {
                assert_eq!(et.kind, EdgeKind::Partial);
                assert_eq!(et.fit.coeffs, es.fit.coeffs);
            }
        }
    }
    assert!(test.edges[1][0].sa_test.is_some());
}

fn integral(fv: &FittedVine, n: usize, seed: u64) -> f64 {
    let ev = VineEvaluator::new(fv).unwrap();
    let mut rng = replicate_rng(seed, 0);
    let p = fv.structure.dim;
    let mut sum = 0.0;
    let mut u = vec![0.0; p];
    for _ in 0..n {
        u.iter_mut().for_each(|x| *x = rng.random::<f64>());
        sum += ev.log_density(&u).unwrap().exp();
    }
    sum / n as f64
}

#[test]
fn vine_density_integrates_to_one() {
    let u = non_simplified(600, 5);
    for mode in [FitMode::SimpA, FitMode::Cond] {
        let fv = fit_vine(&u, mode, &config()).unwrap();
        let mass = integral(&fv, 100_000, 6);
        assert!((mass - 1.0).abs() < 0.02, "{mode}: mass {mass}");
    }
}

fn manual_log_density(fv: &FittedVine, u: &[f64]) -> f64 {
    let t1 = &fv.edges[0];
    let e2 = &fv.edges[1][0];
    let c = e2.edge.cond[0];
    let mut total = 0.0;
    let mut cond_args = Vec::new();
    for fe in t1 {
        let ev = Evaluator::new(&fe.fit).unwrap();
        let (a, b) = (fe.edge.a, fe.edge.b);
        total += ev.density(&EvalPoint::new(u[a], u[b])).unwrap().ln();
        let arg = if a == c {
            (b, ev.h(Along::Second, u[b], u[a], None).unwrap())
        } else {
            (a, ev.h(Along::First, u[a], u[b], None).unwrap())
        };
        cond_args.push(arg);
    }
    cond_args.sort_by_key(|x| x.0);
    let w = e2.reduction.as_ref().filter(|_| e2.kind == EdgeKind::Conditional).map(|r| r.project(&[u[c]]).unwrap());
    let ev = Evaluator::new(&e2.fit).unwrap();
    total + ev.density(&EvalPoint { u: cond_args[0].1, v: cond_args[1].1, w }).unwrap().ln()
}

#[test]
fn three_dimensional_density_matches_explicit_decomposition() {
    let u = non_simplified(500, 7);
    let mut rng = replicate_rng(8, 0);
    for mode in FitMode::ALL {
        let fv = fit_vine(&u, mode, &config()).unwrap();
        for _ in 0..50 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.01..0.99)).collect();
            let got = vine_log_density(&fv, &x).unwrap();
            let want = manual_log_density(&fv, &x);
            assert!((got - want).abs() < 1e-10, "{mode}: {got} vs {want}");
        }
    }
}

#[test]
fn model_round_trips_through_json() {
    let u = non_simplified(400, 9);
    let fv = fit_vine(&u, FitMode::Test, &config()).unwrap();
    let back = FittedVine::from_json(&fv.to_json().unwrap()).unwrap();
    assert_eq!(fv, back);
    let x = [0.2, 0.7, 0.4];
    assert_eq!(vine_log_density(&fv, &x).unwrap(), vine_log_density(&back, &x).unwrap());
}

#[test]
fn rejects_bad_input() {
    let cfg = config();
    let mut u = non_simplified(100, 10);
    u[(3, 1)] = 1.5;
    assert!(fit_vine(&u, FitMode::SimpA, &cfg).is_err());
    let one = DMatrix::from_element(50, 1, 0.5);
    assert!(fit_vine(&one, FitMode::SimpA, &cfg).is_err());
    let fv = fit_vine(&non_simplified(200, 11), FitMode::SimpA, &cfg).unwrap();
    assert!(vine_log_density(&fv, &[0.5, 0.5]).is_err());
}

#[test]
fn test_mode_improves_out_of_sample_loglik_on_non_simplified_data() {
    let cfg = config();
    let mut diffs = Vec::new();
    for r in 0..6 {
        let u = non_simplified(1000, 100 + r);
        let eval = non_simplified(1000, 200 + r);
        let simpa = select_structure_with_fits(&u, &cfg).unwrap();
        let test = fit_vine_on(&u, &simpa.structure, FitMode::Test, &cfg, Some(&simpa)).unwrap();
        let (es, et) = (VineEvaluator::new(&simpa).unwrap(), VineEvaluator::new(&test).unwrap());
        let mut d = 0.0;
        for i in 0..eval.nrows() {
            let x: Vec<f64> = eval.row(i).iter().copied().collect();
            d += et.log_density(&x).unwrap() - es.log_density(&x).unwrap();
        }
        diffs.push(d / eval.nrows() as f64);
    }
    diffs.sort_by(f64::total_cmp);
    let med = 0.5 * (diffs[2] + diffs[3]);
    assert!(med > 0.0, "median gain {med}, {diffs:?}");
}
