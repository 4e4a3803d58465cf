//! Criteria that need no training: gradients, structure, gating, metrics.

use std::time::Instant;

use dspr_core::data::N_TIME_FEATS;
use dspr_core::gradcheck::{audit_model, audit_ops, ModelAudit};
use dspr_core::graph_dynamic::{adaptive_tau, dynamic_adjacency, DynamicBranch, DynamicConfig, WindowMask};
use dspr_core::graph_static::{PriorGraph, Role, Variable};
use dspr_core::metrics::{mca, tda, tvr, TdaConfig, DEFAULT_EPS};
use dspr_core::{DsprModel, MetricReport, ModelConfig, ParamStore, Tape, Tensor, Variant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Verdict;

const GRAD_SEEDS: u64 = 20;
const GRAD_TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn gradients() -> Result<Verdict, String> {
    let started = Instant::now();
    let ops = audit_ops(GRAD_SEEDS).map_err(|e| e.to_string())?;
    let (op_name, op_worst) = ops.iter().fold(
        ("", 0.0f64),
        |w, &(n, e)| if e > w.1 || e.is_nan() { (n, e) } else { w },
    );
    let mut model = ModelAudit::default();
    for seed in 0..GRAD_SEEDS {
        model = model.merge(audit_model(Variant::Full, seed, 3, GRAD_TOL).map_err(|e| e.to_string())?);
    }
    let secs = started.elapsed().as_secs_f64();
    let pass = op_worst < GRAD_TOL && model.worst < GRAD_TOL && model.skipped * 50 <= model.checked && secs < 120.0;
    Ok(Verdict::new(
        pass,
        format!(
            "{} ops x {GRAD_SEEDS} seeds, worst {op_worst:.1e} ({op_name}); full model worst {:.1e} over {} coordinates \
             ({} kink-skipped); {secs:.1}s",
            ops.len(),
            model.worst,
            model.checked,
            model.skipped
        ),
    ))
}

pub fn structure() -> Result<Verdict, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    let mut worst_row = 0.0f64;
    let mut diag_ok = true;
    for _ in 0..300 {
        let (g, c, d) = (rng.gen_range(1..4), rng.gen_range(2..8), rng.gen_range(1..9));
        let scale = rng.gen_range(0.01..50.0);
        let mut tape = Tape::new();
        let h = tape.constant(random(&mut rng, &[g, c, d], scale));
        let a = dynamic_adjacency(&mut tape, h).map_err(|e| e.to_string())?;
        let a = tape.value(a);
        for row in 0..g * c {
            let vals = &a.data()[row * c..(row + 1) * c];
            diag_ok &= vals[row % c] == 0.0;
            worst_row = worst_row.max((vals.iter().sum::<f64>() - 1.0).abs());
        }
    }

    let mut causal_ok = true;
    for _ in 0..1000 {
        let (t_len, c) = (rng.gen_range(2..13), rng.gen_range(1..5));
        let tau = Tensor::new(
            vec![t_len, c],
            (0..t_len * c).map(|_| rng.gen_range(1.0..=20.0)).collect(),
        )
        .unwrap();
        let mask = WindowMask::from_tau(&tau).map_err(|e| e.to_string())?;
        for q in 0..t_len {
            for k in q + 1..t_len {
                for ch in 0..c {
                    causal_ok &= mask.weight(q, k, ch) == 0.0;
                }
            }
        }
        let cfg = DynamicConfig {
            n_vars: c,
            lookback: t_len,
            d_model: 8,
            heads: 2,
            tau_max: 20.0,
            positional: false,
        };
        let mut store = ParamStore::new();
        let branch = DynamicBranch::new(cfg, &mut store, &mut rng).map_err(|e| e.to_string())?;
        let h = random(&mut rng, &[t_len, c, 8], 1.0);
        let attend = |h: &Tensor| -> Result<Tensor, String> {
            let mut tape = Tape::new();
            let p = store.bind(&mut tape);
            let (hv, tv) = (tape.constant(h.clone()), tape.constant(tau.clone()));
            let out = branch
                .masked_temporal_attention(&mut tape, &p, hv, tv)
                .map_err(|e| e.to_string())?;
            Ok(tape.value(out).clone())
        };
        let base = attend(&h)?;
        let (q, ch) = (rng.gen_range(0..t_len), rng.gen_range(0..c));
        let mut moved = h.clone();
        for k in (0..t_len).filter(|&k| k > q || !mask.allowed(q, k, ch)) {
            for j in 0..8 {
                moved.data_mut()[(k * c + ch) * 8 + j] += rng.gen_range(-5.0..5.0);
            }
        }
        let after = attend(&moved)?;
        let at = |t: &Tensor| t.data()[(q * c + ch) * 4..(q * c + ch + 1) * 4].to_vec();
        causal_ok &= at(&base) == at(&after);
    }

    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for _ in 0..1000 {
        let (rows, d) = (rng.gen_range(1..40), rng.gen_range(1..9));
        let scale = 10f64.powf(rng.gen_range(-2.0..6.0));
        let mut tape = Tape::new();
        let feats = tape.constant(random(&mut rng, &[rows, d], scale));
        let w = tape.constant(random(&mut rng, &[d, 1], 1.0));
        let tau = adaptive_tau(&mut tape, feats, w, 20.0).map_err(|e| e.to_string())?;
        for &t in tape.value(tau).data() {
            lo = lo.min(t);
            hi = hi.max(t);
        }
    }

    let pass = worst_row < 1e-12 && diag_ok && causal_ok && lo >= 1.0 && hi <= 20.0;
    Ok(Verdict::new(
        pass,
        format!(
            "row-sum error {worst_row:.1e}, zero diagonal {diag_ok}; 1000 window configurations causal {causal_ok}; \
             tau range [{lo:.3}, {hi:.3}]"
        ),
    ))
}

fn gating_prior(c: usize) -> PriorGraph {
    let vars = (0..c)
        .map(|i| Variable {
            name: format!("v{i}"),
            role: if i + 1 == c {
                Role::Target
            } else if i == 0 {
                Role::Actuator
            } else {
                Role::State
            },
        })
        .collect();
    PriorGraph::build(vars, &[(1, c - 1)]).unwrap()
}

pub fn gating() -> Result<Verdict, String> {
    let c = 6;
    let mut worst_init = 0.0f64;
    let mut trend_exact = true;
    for seed in 0..10 {
        for variant in [Variant::Full, Variant::TrendOnly] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cfg = ModelConfig {
                variant,
                ..ModelConfig::new(c, c - 1, 24, 4)
            };
            let model = DsprModel::new(cfg, gating_prior(c), &mut rng).map_err(|e| e.to_string())?;
            let x = random(&mut rng, &[8, 24, c], 3.0);
            let feats = random(&mut rng, &[8, 28, N_TIME_FEATS], 1.0);
            let out = model.predict(&x, &feats).map_err(|e| e.to_string())?;
            let gap = out
                .y_hat
                .data()
                .iter()
                .zip(out.y_base.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            match variant {
                Variant::TrendOnly => trend_exact &= out.y_hat == out.y_base,
                _ => worst_init = worst_init.max(gap),
            }
        }
    }
    Ok(Verdict::new(
        worst_init < 1e-3 && trend_exact,
        format!("max |y_hat - y_base| at init {worst_init:.2e} over 10 seeds; trend-only identical {trend_exact}"),
    ))
}

fn oracle_mca(p: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let per: Vec<f64> = p
        .iter()
        .zip(y)
        .map(|(pi, yi)| {
            let (sp, sy): (f64, f64) = (pi.iter().sum(), yi.iter().sum());
            1.0 - (sp - sy).abs() / (sy + DEFAULT_EPS)
        })
        .collect();
    100.0 * per.iter().sum::<f64>() / per.len() as f64
}

fn oracle_tvr(p: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    let tv = |s: &[f64]| s.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
    let per: Vec<f64> = p
        .iter()
        .zip(y)
        .map(|(pi, yi)| 1.0 - (1.0 - tv(pi) / tv(yi)).abs())
        .collect();
    100.0 * per.iter().sum::<f64>() / per.len() as f64
}

fn oracle_tda(p: &[Vec<f64>], y: &[Vec<f64>], seg: usize, delta: f64) -> Option<f64> {
    let means = |s: &[f64]| {
        s.chunks_exact(seg)
            .map(|c| c.iter().sum::<f64>() / seg as f64)
            .collect::<Vec<_>>()
    };
    let (mut significant, mut agree) = (0usize, 0usize);
    for (pi, yi) in p.iter().zip(y) {
        let (mp, my) = (means(pi), means(yi));
        for k in 1..my.len() {
            let (dy, dp) = (my[k] - my[k - 1], mp[k] - mp[k - 1]);
            if dy.abs() > delta {
                significant += 1;
                agree += usize::from(dy * dp > 0.0);
            }
        }
    }
    (significant > 0).then(|| 100.0 * agree as f64 / significant as f64)
}

pub fn metric_oracles() -> Result<Verdict, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4242);
    let mut worst = 0.0f64;
    let mut tda_undefined_agree = true;
    for _ in 0..100 {
        let (s, h) = (rng.gen_range(1..12), rng.gen_range(2..17));
        let y: Vec<Vec<f64>> = (0..s)
            .map(|_| (0..h).map(|_| rng.gen_range(0.5..3.0)).collect())
            .collect();
        let p: Vec<Vec<f64>> = (0..s)
            .map(|_| (0..h).map(|_| rng.gen_range(0.0..3.5)).collect())
            .collect();
        let yt = Tensor::new(vec![s, h], y.concat()).unwrap();
        let pt = Tensor::new(vec![s, h], p.concat()).unwrap();
        worst = worst.max((mca(&pt, &yt, DEFAULT_EPS).map_err(|e| e.to_string())? - oracle_mca(&p, &y)).abs());
        worst = worst.max((tvr(&pt, &yt, DEFAULT_EPS).map_err(|e| e.to_string())? - oracle_tvr(&p, &y)).abs());
        let seg = rng.gen_range(1..=h / 2);
        let delta = rng.gen_range(0.0..0.8);
        match (
            tda(&pt, &yt, &TdaConfig { segment: seg, delta }).map_err(|e| e.to_string())?,
            oracle_tda(&p, &y, seg, delta),
        ) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            _ => tda_undefined_agree = false,
        }
    }

    let y = random(&mut rng, &[6, 8], 1.0);
    let y = Tensor::new(vec![6, 8], y.data().iter().map(|v| v + 2.0).collect()).unwrap();
    let perfect = MetricReport::compute(
        &y,
        &y,
        &TdaConfig {
            segment: 2,
            delta: 0.01,
        },
        None,
    )
    .map_err(|e| e.to_string())?;
    let identity = perfect.mca == 100.0 && perfect.tvr == 100.0 && perfect.tda == Some(100.0);
    let constant = tvr(&Tensor::new(vec![6, 8], vec![1.0; 48]).unwrap(), &y, DEFAULT_EPS).map_err(|e| e.to_string())?;

    Ok(Verdict::new(
        worst < 1e-10 && tda_undefined_agree && identity && constant == 0.0,
        format!(
            "100 random pairs, max deviation {worst:.1e}; perfect prediction {}/{}/{:?}; constant prediction TVR {constant}",
            perfect.mca, perfect.tvr, perfect.tda
        ),
    ))
}
