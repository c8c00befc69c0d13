mod common;

use common::*;
use fsmol_core::cgib::{self, NoiseStats};
use fsmol_core::eval::{gate_similarity_analysis, pr_auc, roc_auc};
use fsmol_core::stats::spearman;
use fsmol_core::tensor::{Tape, Tensor};
use fsmol_core::Error;
use rand::seq::SliceRandom;
use rand::Rng;

#[test]
fn closed_form_penalty_matches_integrated_kl() {
    let err = mi_kl_error(100);
    assert!(err <= 1e-6, "max deviation {err:e}");
}

#[test]
fn integrator_recovers_known_kl() {
    // KL(N(0,1) || N(1,4)) = ln 2 + (1 + 1) / 8 - 1/2
    let kl = integrate_kl(0.0, 1.0, 1.0, 2.0);
    let exact = 2f64.ln() + 2.0 / 8.0 - 0.5;
    assert!((kl - exact).abs() < 1e-10);
}

#[test]
fn gumbel_gate_exceeds_half_with_probability_p() {
    for (i, p) in [0.1, 0.5, 0.9].into_iter().enumerate() {
        let (_, frac, band) = gumbel_law(p, 100_000, 60 + i as u64);
        assert!((frac - p).abs() <= band, "p={p}: {frac} outside +-{band}");
    }
}

#[test]
fn perturbation_mean_matches_expectation() {
    let mut r = rng(5);
    let d = 3;
    let stats = NoiseStats { mean: vec![0.5, -1.0, 0.0], var: vec![1.0, 0.25, 4.0] };
    let x = vec![1.0, 2.0, -0.5];
    let lambda = 0.3;
    let n = 10_000;
    let mut sums = vec![0.0; d];
    for _ in 0..n {
        let tape = Tape::new();
        let noise = stats.sample(1, &mut r);
        let out = cgib::perturb_environment(
            tape.constant(Tensor::new(vec![1, d], x.clone()).unwrap()),
            tape.constant(Tensor::new(vec![1, 1], vec![lambda]).unwrap()),
            &noise,
        )
        .unwrap();
        for (s, v) in sums.iter_mut().zip(out.value().data()) {
            *s += v;
        }
    }
    for k in 0..d {
        let expect = lambda * x[k] + (1.0 - lambda) * stats.mean[k];
        let sigma = (1.0 - lambda) * stats.var[k].sqrt();
        let got = sums[k] / n as f64;
        assert!((got - expect).abs() <= 3.0 * sigma / 100.0, "dim {k}: {got} vs {expect}");
    }
}

#[test]
fn metrics_match_brute_force() {
    let err = metric_oracle_error(100);
    assert!(err <= 1e-12, "max deviation {err:e}");
}

#[test]
fn metric_examples() {
    assert_eq!(roc_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.5, 0.5], &[true, false]).unwrap(), 0.5);
    assert_eq!(pr_auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
    assert_eq!(pr_auc(&[0.1, 0.9], &[true, false]).unwrap(), 0.5);
    assert!(matches!(roc_auc(&[0.1, 0.2], &[true, true]), Err(Error::UndefinedMetric(_))));
    assert!(matches!(pr_auc(&[0.1, 0.2], &[false, false]), Err(Error::UndefinedMetric(_))));
}

#[test]
fn roc_auc_is_invariant_to_monotone_transforms() {
    let mut r = rng(8);
    for _ in 0..50 {
        let n = r.gen_range(4..100);
        let mut labels: Vec<bool> = (0..n).map(|_| r.gen_bool(0.5)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| r.gen_range(-3.0..3.0)).collect();
        let moved: Vec<f64> = scores.iter().map(|s| (2.0 * s).exp() + 7.0).collect();
        let (a, b) = (roc_auc(&scores, &labels).unwrap(), roc_auc(&moved, &labels).unwrap());
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn spearman_null_distribution_is_centered() {
    let mut r = rng(12);
    let trials = 1000;
    let mut total = 0.0;
    for _ in 0..trials {
        let a: Vec<f64> = (0..10).map(|_| r.gen()).collect();
        let mut b = a.clone();
        b.shuffle(&mut r);
        let b: Vec<f64> = b.iter().map(|_| r.gen()).collect();
        total += spearman(&a, &b).unwrap();
    }
    let mean = total / trials as f64;
    assert!(mean.abs() < 0.1, "null mean {mean}");
}

#[test]
fn gate_analysis_with_random_gates_is_near_zero() {
    use fsmol_core::cgib::GateRecord;
    let mut r = rng(13);
    let ids: Vec<String> = (0..11).map(|i| format!("p{i}")).collect();
    let mut rhos = 0.0;
    for _ in 0..1000 {
        let sim: Vec<Vec<f64>> = (0..11).map(|_| (0..11).map(|_| r.gen()).collect()).collect();
        let recs: Vec<GateRecord> = (1..11)
            .map(|a| GateRecord { epoch: 0, target: "p0".into(), auxiliary: ids[a].clone(), retain_probability: r.gen() })
            .collect();
        rhos += gate_similarity_analysis(&recs, &ids, &sim, None).unwrap().mean.unwrap();
    }
    assert!((rhos / 1000.0).abs() < 0.1);
}

#[test]
fn penalty_examples() {
    let stats = NoiseStats { mean: vec![0.0; 32], var: vec![1.0; 32] };
    let x = vec![vec![0.0; 32]];
    let closed = cgib::mi_penalty_value(&[0.0], &x, &stats);
    assert!((closed - 16.0).abs() < 1e-9);
    // penalty decreases in A below the stationary point
    let d = 4.0;
    let n = 3.0;
    let f = |a: f64| -(d / 2.0) * a.ln() + d / (2.0 * n) * a;
    let grid: Vec<f64> = (1..30).map(|i| i as f64 * 0.1).collect();
    assert!(grid.windows(2).all(|w| f(w[1]) < f(w[0])));
}
