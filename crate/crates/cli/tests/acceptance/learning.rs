//! Criteria that need trained models on the variable-delay process.

use std::time::Instant;

use dspr_core::arx::fit_arx;
use dspr_core::data::{gen_autoregressive, gen_transport_delay, split_windows, TransportDelayConfig};
use dspr_core::metrics::{regime_split, Regime};
use dspr_core::stability::{mechanism_stability, top_edges};
use dspr_core::training::{evaluate, train};
use dspr_core::{ModelConfig, Result, RunRecord, SeriesDataset, SplitConfig, Splits, Tensor, TrainConfig, Variant};

use crate::Verdict;

const SEEDS: [u64; 3] = [0, 1, 2];
const LOOKBACK: usize = 24;
const HORIZON: usize = 4;
const ABLATIONS: [Variant; 3] = [Variant::NoAdaptiveWindow, Variant::NoPrior, Variant::ShuffledPrior];

fn split_config() -> SplitConfig {
    SplitConfig {
        val_stride: 4,
        ..SplitConfig::new(LOOKBACK, HORIZON)
    }
}

fn model_config(ds: &SeriesDataset) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        heads: 4,
        d_node: 8,
        trend_d_model: 8,
        trend_depth: 1,
        ma_kernel: 5,
        ..ModelConfig::new(ds.n_vars(), ds.target(), LOOKBACK, HORIZON)
    }
}

fn train_config(seed: u64, variant: Variant) -> TrainConfig {
    TrainConfig {
        epochs: 15,
        lr: 5e-3,
        seed,
        variant,
        max_steps_per_epoch: Some(300),
        patience: 15,
        ..Default::default()
    }
}

pub struct NoisySeed {
    pub seed: u64,
    pub full: RunRecord,
    /// Mean learned target receptive field at the forecast origin, keyed by
    /// the true delay of the window.
    pub tau_by_delay: Vec<(f64, f64)>,
    pub ablations: Vec<(Variant, f64)>,
    pub arx_mae: f64,
}

pub struct CleanSeed {
    pub a_dynamic: Tensor,
    pub target: usize,
    pub parents: Vec<usize>,
    pub names: Vec<String>,
}

pub struct Suite {
    pub noisy: Vec<NoisySeed>,
    pub clean: Vec<CleanSeed>,
    pub secs: f64,
}

fn run(ds: &SeriesDataset, splits: &Splits, seed: u64, variant: Variant) -> Result<dspr_core::TrainedRun> {
    let t0 = Instant::now();
    let out = train(ds, splits, &model_config(ds), &train_config(seed, variant))?;
    eprintln!(
        "  seed {seed} {variant}: test MAE {:.4} ({:.0}s)",
        out.record.test_metrics.mae,
        t0.elapsed().as_secs_f64()
    );
    Ok(out)
}

fn tau_by_delay(origin_tau: &[f64], true_tau: &[f64]) -> Vec<(f64, f64)> {
    let mut delays: Vec<f64> = true_tau.to_vec();
    delays.sort_by(f64::total_cmp);
    delays.dedup();
    delays
        .into_iter()
        .map(|d| {
            let picked: Vec<f64> = origin_tau
                .iter()
                .zip(true_tau)
                .filter(|(_, &t)| t == d)
                .map(|(v, _)| *v)
                .collect();
            (d, picked.iter().sum::<f64>() / picked.len() as f64)
        })
        .collect()
}

impl Suite {
    pub fn train() -> Result<Self> {
        let started = Instant::now();
        eprintln!("training acceptance runs");
        let mut noisy = Vec::new();
        for seed in SEEDS {
            let ds = gen_transport_delay(&TransportDelayConfig {
                seed,
                noise_std: 0.1,
                n_steps: 20_000,
                ..Default::default()
            })?;
            let splits = split_windows(&ds, &split_config())?;
            let full = run(&ds, &splits, seed, Variant::Full)?;
            let model = full.predictor.model().expect("neural run");
            let ev = evaluate(model, &splits.test)?;
            let origin = ev.origin_tau(ds.target()).expect("adaptive windows");
            let truth = splits.test.true_tau.as_ref().expect("generator exports delays");
            let tau_by_delay = tau_by_delay(&origin, truth);
            let mut ablations = Vec::new();
            for v in ABLATIONS {
                ablations.push((v, run(&ds, &splits, seed, v)?.record.test_metrics.mae));
            }
            let arx_mae = run(&ds, &splits, seed, Variant::Arx)?.record.test_metrics.mae;
            noisy.push(NoisySeed {
                seed,
                full: full.record,
                tau_by_delay,
                ablations,
                arx_mae,
            });
        }
        let mut clean = Vec::new();
        for seed in SEEDS {
            let ds = gen_transport_delay(&TransportDelayConfig {
                seed,
                noise_std: 0.0,
                n_steps: 20_000,
                ..Default::default()
            })?;
            let splits = split_windows(&ds, &split_config())?;
            let full = run(&ds, &splits, seed, Variant::Full)?;
            let ev = evaluate(full.predictor.model().expect("neural run"), &splits.test)?;
            clean.push(CleanSeed {
                a_dynamic: ev.a_dynamic_mean.expect("dynamic graph"),
                target: ds.target(),
                parents: ds.delay.as_ref().expect("generator exports parents").parents.clone(),
                names: ds.names(),
            });
        }
        Ok(Self {
            noisy,
            clean,
            secs: started.elapsed().as_secs_f64(),
        })
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn delay_recovery(s: &Suite) -> std::result::Result<Verdict, String> {
    let mut separated = 0;
    let mut parts = Vec::new();
    for n in &s.noisy {
        let low = n.tau_by_delay.first().ok_or("no delay groups")?;
        let high = n.tau_by_delay.last().ok_or("no delay groups")?;
        let gap = high.1 - low.1;
        separated += usize::from(high.0 > low.0 && gap >= 2.0);
        parts.push(format!(
            "seed {}: tau {:.2} (delay {}) vs {:.2} (delay {}), gap {gap:.2}",
            n.seed, low.1, low.0, high.1, high.0
        ));
    }
    Ok(Verdict::new(
        separated >= 2,
        format!(
            "{separated}/3 seeds separated by >= 2 steps; {}; all training {:.0}s",
            parts.join(", "),
            s.secs
        ),
    ))
}

pub fn ablation(s: &Suite) -> std::result::Result<Verdict, String> {
    let full = median(s.noisy.iter().map(|n| n.full.test_metrics.mae).collect());
    let of = |v: Variant| {
        median(
            s.noisy
                .iter()
                .map(|n| n.ablations.iter().find(|a| a.0 == v).expect("trained").1)
                .collect(),
        )
    };
    let (window, prior, shuffled) = (
        of(Variant::NoAdaptiveWindow),
        of(Variant::NoPrior),
        of(Variant::ShuffledPrior),
    );
    Ok(Verdict::new(
        full < window && full < prior && shuffled > full,
        format!(
            "median test MAE full {full:.4}, no_adaptive_window {window:.4}, no_prior {prior:.4}, shuffled_prior {shuffled:.4}"
        ),
    ))
}

pub fn graph_recovery(s: &Suite) -> std::result::Result<Verdict, String> {
    let mut all_match = true;
    let mut found = Vec::new();
    for c in &s.clean {
        let n = c.names.len();
        let row = &c.a_dynamic.data()[c.target * n..(c.target + 1) * n];
        let mut order: Vec<usize> = (0..n).filter(|&j| j != c.target).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
        let top2 = &order[..2];
        all_match &= top2.iter().all(|j| c.parents.contains(j));
        found.push(format!("{}+{}", c.names[top2[0]], c.names[top2[1]]));
    }
    let maps: Vec<Tensor> = s.clean.iter().map(|c| c.a_dynamic.clone()).collect();
    let stability = mechanism_stability("noiseless", &maps).map_err(|e| e.to_string())?;
    let top5: Vec<String> = maps
        .iter()
        .map(|m| format!("{:?}", top_edges(m, 5).unwrap_or_default()))
        .collect();
    Ok(Verdict::new(
        all_match && stability.jaccard_top5 >= 0.6,
        format!(
            "target parents {}; top-5 Jaccard {:.3} (edges {})",
            found.join(", "),
            stability.jaccard_top5,
            top5.join(" ")
        ),
    ))
}

pub fn baselines(s: &Suite) -> std::result::Result<Verdict, String> {
    let ds = gen_autoregressive(300, 0.9, 0.0, 5).map_err(|e| e.to_string())?;
    let arx = fit_arx(&ds.values, 1, 1, 1).map_err(|e| e.to_string())?;
    let coef_err = (arx.ar[0] - 0.9).abs();
    let dspr = median(s.noisy.iter().map(|n| n.full.test_metrics.mae).collect());
    let linear = median(s.noisy.iter().map(|n| n.arx_mae).collect());
    let per_seed: Vec<String> = s
        .noisy
        .iter()
        .map(|n| format!("{:.4}/{:.4}", n.full.test_metrics.mae, n.arx_mae))
        .collect();
    Ok(Verdict::new(
        coef_err < 1e-6 && dspr < linear,
        format!(
            "AR(1) coefficient error {coef_err:.1e}; median test MAE dspr {dspr:.4} vs arx {linear:.4} (per seed {})",
            per_seed.join(", ")
        ),
    ))
}

pub fn regime_protocol(s: &Suite) -> std::result::Result<Verdict, String> {
    let stds: Vec<f64> = (1..=9).map(f64::from).collect();
    let part = regime_split(&stds).map_err(|e| e.to_string())?;
    let tertiles = part.group(Regime::High) == Some(&[6, 7, 8][..])
        && part.group(Regime::Medium) == Some(&[3, 4, 5][..])
        && part.group(Regime::Low) == Some(&[0, 1, 2][..]);

    let record = &s.noisy[0].full;
    let lookback = record.model_config.as_ref().map(|m| m.lookback);
    let regimes: Vec<Option<Regime>> = record.regime_metrics.iter().map(|r| r.regime).collect();
    let expected = [
        Some(Regime::All),
        Some(Regime::High),
        Some(Regime::Medium),
        Some(Regime::Low),
    ];
    let counted: usize = record.regime_metrics[1..].iter().map(|r| r.n_samples).sum();
    let covers = record
        .regime_metrics
        .first()
        .is_some_and(|all| all.n_samples == counted);
    let summary: Vec<String> = record
        .regime_metrics
        .iter()
        .map(|r| {
            format!(
                "{} MAE {:.4} (n={})",
                r.regime.map_or("?".into(), |g| g.to_string()),
                r.mae,
                r.n_samples
            )
        })
        .collect();
    Ok(Verdict::new(
        tertiles && lookback == Some(24) && regimes == expected && covers,
        format!(
            "9-sample tertiles exact {tertiles}; lookback {lookback:?}: {}",
            summary.join(", ")
        ),
    ))
}
