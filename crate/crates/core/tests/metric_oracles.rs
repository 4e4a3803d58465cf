//! Metrics against brute-force recomputations and hand-worked cases.

use dspr_core::metrics::{mca, regime_split, tda, tvr, TdaConfig, DEFAULT_EPS};
use dspr_core::{MetricReport, Regime, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(s: usize, h: usize, v: Vec<f64>) -> Tensor {
    Tensor::new(vec![s, h], v).unwrap()
}

fn oracle_mca(p: &[Vec<f64>], y: &[Vec<f64>], eps: f64) -> f64 {
    let mut acc = 0.0;
    for i in 0..y.len() {
        let mut sp = 0.0;
        let mut sy = 0.0;
        for j in 0..y[i].len() {
            sp += p[i][j];
            sy += y[i][j];
        }
        acc += 1.0 - (sp - sy).abs() / (sy + eps);
    }
    100.0 * acc / y.len() as f64
}

fn oracle_tvr(p: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let mut acc = 0.0;
    for i in 0..y.len() {
        let mut tp = 0.0;
        let mut ty = 0.0;
        for j in 1..y[i].len() {
            tp += (p[i][j] - p[i][j - 1]).abs();
            ty += (y[i][j] - y[i][j - 1]).abs();
        }
        let r = tp / ty;
        acc += 1.0 - (1.0 - r).abs();
    }
    100.0 * acc / y.len() as f64
}

/// Enumerates every pair of adjacent segments explicitly.
fn oracle_tda(p: &[Vec<f64>], y: &[Vec<f64>], seg: usize, delta: f64) -> Option<f64> {
    let mut significant = 0;
    let mut agree = 0;
    for i in 0..y.len() {
        let n_seg = y[i].len() / seg;
        for k in 1..n_seg {
            let mean = |x: &[f64], s: usize| (s * seg..(s + 1) * seg).map(|j| x[j]).sum::<f64>() / seg as f64;
            let dy = mean(&y[i], k) - mean(&y[i], k - 1);
            let dp = mean(&p[i], k) - mean(&p[i], k - 1);
            if dy.abs() > delta {
                significant += 1;
                if (dy > 0.0 && dp > 0.0) || (dy < 0.0 && dp < 0.0) {
                    agree += 1;
                }
            }
        }
    }
    if significant == 0 {
        None
    } else {
        Some(100.0 * agree as f64 / significant as f64)
    }
}

fn flat(x: &[Vec<f64>]) -> Vec<f64> {
    x.iter().flatten().copied().collect()
}

#[test]
fn metrics_match_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..100 {
        let s = rng.gen_range(1..12);
        let h = rng.gen_range(2..17);
        // positive totals keep the signed MCA denominator away from zero
        let y: Vec<Vec<f64>> = (0..s)
            .map(|_| (0..h).map(|_| rng.gen_range(0.5..3.0)).collect())
            .collect();
        let p: Vec<Vec<f64>> = (0..s)
            .map(|_| (0..h).map(|_| rng.gen_range(0.0..3.5)).collect())
            .collect();
        let (yt, pt) = (t(s, h, flat(&y)), t(s, h, flat(&p)));
        assert!((mca(&pt, &yt, DEFAULT_EPS).unwrap() - oracle_mca(&p, &y, DEFAULT_EPS)).abs() < 1e-10);
        assert!((tvr(&pt, &yt, DEFAULT_EPS).unwrap() - oracle_tvr(&p, &y)).abs() < 1e-10);
        let seg = rng.gen_range(1..=h / 2);
        let delta = rng.gen_range(0.0..0.8);
        let got = tda(&pt, &yt, &TdaConfig { segment: seg, delta }).unwrap();
        let want = oracle_tda(&p, &y, seg, delta);
        match (got, want) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-10),
            (a, b) => assert_eq!(a, b),
        }
    }
}

#[test]
fn identity_cases_are_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = t(6, 8, (0..48).map(|_| rng.gen_range(0.5..2.0)).collect());
    let r = MetricReport::compute(
        &y,
        &y,
        &TdaConfig {
            segment: 2,
            delta: 0.01,
        },
        None,
    )
    .unwrap();
    assert_eq!((r.mae, r.rmse, r.mca, r.tvr), (0.0, 0.0, 100.0, 100.0));
    assert_eq!(r.tda, Some(100.0));

    let flat_pred = t(6, 8, vec![1.0; 48]);
    assert_eq!(tvr(&flat_pred, &y, DEFAULT_EPS).unwrap(), 0.0);
}

#[test]
fn hand_worked_values() {
    let y = t(1, 4, vec![1.0; 4]);
    let p = t(1, 4, vec![1.0, 1.0, 1.0, 0.0]);
    assert!((mca(&p, &y, DEFAULT_EPS).unwrap() - 75.0).abs() < 1e-6);

    let y = t(1, 3, vec![0.0, 1.0, 0.0]);
    let doubled = t(1, 3, vec![0.0, 2.0, 0.0]);
    assert!(tvr(&doubled, &y, DEFAULT_EPS).unwrap().abs() < 1e-12);

    let y = t(1, 4, vec![-1.0, -1.0, 1.0, 1.0]);
    let neg = t(1, 4, vec![1.0, 1.0, -1.0, -1.0]);
    assert_eq!(tda(&neg, &y, &TdaConfig { segment: 2, delta: 0.1 }).unwrap(), Some(0.0));
    assert_eq!(tda(&y, &y, &TdaConfig { segment: 2, delta: 5.0 }).unwrap(), None);
}

#[test]
fn nine_sample_tertiles() {
    let stds: Vec<f64> = (1..=9).map(f64::from).collect();
    let part = regime_split(&stds).unwrap();
    assert_eq!(part.group(Regime::High).unwrap(), &[6, 7, 8]);
    assert_eq!(part.group(Regime::Medium).unwrap(), &[3, 4, 5]);
    assert_eq!(part.group(Regime::Low).unwrap(), &[0, 1, 2]);

    let tied = regime_split(&[2.0; 9]).unwrap();
    for r in [Regime::High, Regime::Medium, Regime::Low] {
        assert_eq!(tied.group(r).unwrap().len(), 3);
    }
    assert_eq!(tied.group(Regime::Low).unwrap(), &[0, 1, 2]);
}
