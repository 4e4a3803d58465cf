//! Training loop, evaluation, ablation harness and baselines.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arx::{fit_arx, ArxModel};
use crate::data::{SeriesDataset, Splits, WindowBatch};
use crate::error::{DsprError, Result};
use crate::graph_dynamic::{DelayProfile, DelayRow};
use crate::metrics::{regime_split, MetricReport, Regime, TdaConfig};
use crate::model::{pgnn_loss, DsprModel, ModelConfig, Variant};
use crate::optim::{adam_step, clip_grad_norm, AdamConfig, AdamState};
use crate::tensor::{Tape, Tensor};

const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub clip_norm: f64,
    pub patience: usize,
    pub variant: Variant,
    /// Caps optimizer steps per epoch; `None` uses every training window.
    pub max_steps_per_epoch: Option<usize>,
    /// Weight of the conservation penalty for the `pgnn` variant.
    pub pgnn_lambda: f64,
    /// ARX orders `(own lags, exogenous lags)`.
    pub arx_orders: (usize, usize),
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            clip_norm: 5.0,
            patience: 10,
            variant: Variant::Full,
            max_steps_per_epoch: None,
            pgnn_lambda: 0.1,
            arx_orders: (2, 16),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.patience == 0 {
            return Err(DsprError::Config(
                "epochs, batch_size and patience must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.clip_norm > 0.0 && self.pgnn_lambda >= 0.0) {
            return Err(DsprError::Config(
                "lr and clip_norm must be positive, pgnn_lambda nonnegative".into(),
            ));
        }
        if self.max_steps_per_epoch == Some(0) {
            return Err(DsprError::Config("max_steps_per_epoch must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub train_config: TrainConfig,
    pub model_config: Option<ModelConfig>,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    /// `sigmoid(beta)` after every epoch.
    pub gate: Vec<f64>,
    pub val_metrics: MetricReport,
    pub test_metrics: MetricReport,
    pub regime_metrics: Vec<MetricReport>,
    /// Path of the stored parameters, relative to the run directory.
    #[serde(default)]
    pub checkpoint: Option<String>,
    #[serde(skip)]
    pub wall_time_s: f64,
}

/// A trained predictor: neural model or ARX baseline.
#[derive(Clone, Debug)]
pub enum Predictor {
    Neural(Box<DsprModel>),
    Arx(ArxModel),
}

impl Predictor {
    pub fn predict(&self, batch: &WindowBatch) -> Result<Tensor> {
        match self {
            Predictor::Neural(m) => Ok(evaluate(m, batch)?.y_hat),
            Predictor::Arx(m) => m.predict(&batch.x, batch.horizon()),
        }
    }

    pub fn model(&self) -> Option<&DsprModel> {
        match self {
            Predictor::Neural(m) => Some(m),
            Predictor::Arx(_) => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainedRun {
    pub predictor: Predictor,
    pub record: RunRecord,
}

/// Forward artifacts gathered over a whole split.
#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    /// `[B, H]`
    pub y_hat: Tensor,
    pub y_base: Tensor,
    pub a_dynamic_mean: Option<Tensor>,
    /// `[B, L, C]`
    pub taus: Option<Tensor>,
}

impl Evaluation {
    /// Receptive field of `channel` at the forecast origin of every window.
    pub fn origin_tau(&self, channel: usize) -> Option<Vec<f64>> {
        let t = self.taus.as_ref()?;
        let (b, l, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        Some((0..b).map(|bi| t.data()[(bi * l + l - 1) * c + channel]).collect())
    }

    /// Every `(window, step, channel)` receptive field, tagged with a
    /// per-window regime label.
    pub fn delay_profile(&self, labels: Option<&[String]>) -> Option<DelayProfile> {
        let t = self.taus.as_ref()?;
        let (b, l, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let mut rows = Vec::with_capacity(b * l * c);
        for bi in 0..b {
            let label = labels.map_or_else(|| "all".to_string(), |r| r[bi].clone());
            for ti in 0..l {
                for ch in 0..c {
                    rows.push(DelayRow {
                        sample_id: bi,
                        t: ti,
                        channel: ch,
                        tau: t.data()[(bi * l + ti) * c + ch],
                        regime: label.clone(),
                    });
                }
            }
        }
        Some(DelayProfile { rows })
    }
}

/// Runs the model over `batch` in fixed-size chunks.
pub fn evaluate(model: &DsprModel, batch: &WindowBatch) -> Result<Evaluation> {
    let n = batch.len();
    let h = batch.horizon();
    let mut y_hat = Vec::with_capacity(n * h);
    let mut y_base = Vec::with_capacity(n * h);
    let mut a_sum: Option<Vec<f64>> = None;
    let mut taus: Option<Vec<f64>> = None;
    let (l, c) = (batch.lookback(), batch.x.shape()[2]);
    let mut from = 0;
    while from < n {
        let to = (from + EVAL_CHUNK).min(n);
        let idx: Vec<usize> = (from..to).collect();
        let chunk = batch.select(&idx)?;
        let out = model.predict(&chunk.x, &chunk.time_feats)?;
        y_hat.extend_from_slice(out.y_hat.data());
        y_base.extend_from_slice(out.y_base.data());
        if let Some(a) = &out.a_dynamic_mean {
            let w = (to - from) as f64;
            let acc = a_sum.get_or_insert_with(|| vec![0.0; a.numel()]);
            for (s, v) in acc.iter_mut().zip(a.data()) {
                *s += w * v;
            }
        }
        if let Some(t) = &out.taus {
            taus.get_or_insert_with(Vec::new).extend_from_slice(t.data());
        }
        from = to;
    }
    Ok(Evaluation {
        y_hat: Tensor::new(vec![n, h], y_hat)?,
        y_base: Tensor::new(vec![n, h], y_base)?,
        a_dynamic_mean: a_sum
            .map(|s| Tensor::new(vec![c, c], s.into_iter().map(|v| v / n as f64).collect()))
            .transpose()?,
        taus: taus.map(|t| Tensor::new(vec![n, l, c], t)).transpose()?,
    })
}

/// Regime label of every window: the true delay at the origin when the
/// generator exports it, otherwise the volatility tertile.
pub fn regime_labels(batch: &WindowBatch) -> Result<Vec<String>> {
    if let Some(tau) = &batch.true_tau {
        return Ok(tau.iter().map(|t| format!("delay_{t}")).collect());
    }
    let part = regime_split(&batch.sample_std)?;
    let mut labels = vec![String::new(); batch.len()];
    for r in [Regime::High, Regime::Medium, Regime::Low] {
        for &i in part.group(r).expect("tertile group") {
            labels[i] = r.to_string();
        }
    }
    Ok(labels)
}

/// Overall report plus High/Medium/Low volatility tertiles.
pub fn regime_reports(y_hat: &Tensor, batch: &WindowBatch, tda: &TdaConfig) -> Result<Vec<MetricReport>> {
    let part = regime_split(&batch.sample_std)?;
    let mut out = vec![MetricReport::compute(y_hat, &batch.y, tda, Some(Regime::All))?];
    for r in [Regime::High, Regime::Medium, Regime::Low] {
        let idx = part.group(r).expect("tertile group");
        let sub = batch.select(idx)?;
        let h = batch.horizon();
        let mut p = Vec::with_capacity(idx.len() * h);
        for &i in idx {
            p.extend_from_slice(&y_hat.data()[i * h..(i + 1) * h]);
        }
        let p = Tensor::new(vec![idx.len(), h], p)?;
        out.push(MetricReport::compute(&p, &sub.y, tda, Some(r))?);
    }
    Ok(out)
}

fn prior_for(ds: &SeriesDataset, variant: Variant, rng: &mut ChaCha8Rng) -> crate::graph_static::PriorGraph {
    if variant == Variant::ShuffledPrior {
        ds.prior.shuffled(rng)
    } else {
        ds.prior.clone()
    }
}

/// Mean squared error of predictions against `batch.y`.
fn mse(pred: &Tensor, batch: &WindowBatch) -> f64 {
    pred.data()
        .iter()
        .zip(batch.y.data())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / pred.numel() as f64
}

/// Normalised training segment as a contiguous `[T, N]` series.
pub fn normalized_segment(ds: &SeriesDataset, splits: &Splits, segment: usize) -> Result<Tensor> {
    let (a, b) = splits.segments[segment];
    let n = ds.n_vars();
    let data = ds.values.data()[a * n..b * n]
        .chunks(n)
        .flat_map(|row| row.iter().enumerate().map(|(j, &v)| splits.normalizer.apply(j, v)))
        .collect();
    Tensor::new(vec![b - a, n], data)
}

/// Trains one variant on prepared splits.
///
/// Everything random (shuffled prior, initialisation, batch order) draws
/// from one generator seeded by `cfg.seed`. The returned predictor holds the
/// parameters with the lowest validation MSE.
pub fn train(ds: &SeriesDataset, splits: &Splits, model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<TrainedRun> {
    cfg.validate()?;
    let started = Instant::now();
    let tda_cfg = TdaConfig::for_truth(&splits.test.y);
    let val_tda = TdaConfig::for_truth(&splits.val.y);

    if cfg.variant == Variant::Arx {
        let series = normalized_segment(ds, splits, 0)?;
        let arx = fit_arx(&series, ds.target(), cfg.arx_orders.0, cfg.arx_orders.1)?;
        let predictor = Predictor::Arx(arx);
        let val_pred = predictor.predict(&splits.val)?;
        let test_pred = predictor.predict(&splits.test)?;
        let record = RunRecord {
            variant: cfg.variant,
            train_config: cfg.clone(),
            model_config: None,
            epochs_run: 0,
            best_epoch: 0,
            train_loss: Vec::new(),
            val_loss: Vec::new(),
            gate: Vec::new(),
            val_metrics: MetricReport::compute(&val_pred, &splits.val.y, &val_tda, None)?,
            test_metrics: MetricReport::compute(&test_pred, &splits.test.y, &tda_cfg, None)?,
            regime_metrics: regime_reports(&test_pred, &splits.test, &tda_cfg)?,
            checkpoint: None,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        return Ok(TrainedRun { predictor, record });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mcfg = model_cfg.clone();
    mcfg.variant = cfg.variant;
    let prior = prior_for(ds, cfg.variant, &mut rng);
    let mut model = DsprModel::new(mcfg, prior, &mut rng)?;
    if cfg.variant == Variant::Pgnn && splits.train.f_cons.is_none() {
        return Err(DsprError::Config(
            "dataset has no conservation surrogate; pgnn unavailable".into(),
        ));
    }

    let adam = AdamConfig::new(cfg.lr);
    let mut state = AdamState::new(model.params().values());
    let n_train = splits.train.len();
    let mut order: Vec<usize> = (0..n_train).collect();
    let (mut train_loss, mut val_loss, mut gate) = (Vec::new(), Vec::new(), Vec::new());
    let mut best = (f64::INFINITY, 0usize, model.params().clone());
    let mut since_best = 0;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let steps = n_train.div_ceil(cfg.batch_size);
        let steps = cfg.max_steps_per_epoch.map_or(steps, |m| m.min(steps));
        let mut epoch_loss = 0.0;
        for step in 0..steps {
            let idx = &order[step * cfg.batch_size..((step + 1) * cfg.batch_size).min(n_train)];
            let batch = splits.train.select(idx)?;
            let diverged = |loss: f64| DsprError::Diverged { epoch, step, loss };
            let mut tape = Tape::new();
            let p = model.params().bind(&mut tape);
            let fv = model
                .forward(&mut tape, &p, &batch.x, &batch.time_feats)
                .map_err(|e| match e {
                    DsprError::NonFinite(_) => diverged(f64::NAN),
                    e => e,
                })?;
            let loss = if cfg.variant == Variant::Pgnn {
                pgnn_loss(&mut tape, fv.y_hat, &batch.y, batch.f_cons.as_ref(), cfg.pgnn_lambda)
            } else {
                model.loss(&mut tape, &fv, &batch.y)
            }
            .map_err(|e| match e {
                DsprError::NonFinite(_) => diverged(f64::NAN),
                e => e,
            })?;
            let value = tape.value(loss).item();
            if !value.is_finite() {
                return Err(diverged(value));
            }
            let grads = tape.backward(loss)?;
            let mut g: Vec<Tensor> = p
                .vars()
                .iter()
                .map(|&v| grads.get(v).expect("parameter gradient"))
                .collect();
            clip_grad_norm(&mut g, cfg.clip_norm);
            adam_step(model.params_mut().values_mut(), &g, &mut state, &adam)?;
            epoch_loss += value;
        }
        train_loss.push(epoch_loss / steps as f64);
        let vl = mse(&evaluate(&model, &splits.val)?.y_hat, &splits.val);
        if !vl.is_finite() {
            return Err(DsprError::Diverged {
                epoch,
                step: steps,
                loss: vl,
            });
        }
        val_loss.push(vl);
        gate.push(model.gate());
        if vl < best.0 {
            best = (vl, epoch, model.params().clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    *model.params_mut() = best.2;
    let val_pred = evaluate(&model, &splits.val)?.y_hat;
    let test_pred = evaluate(&model, &splits.test)?.y_hat;
    let record = RunRecord {
        variant: cfg.variant,
        train_config: cfg.clone(),
        model_config: Some(model.config().clone()),
        epochs_run: val_loss.len(),
        best_epoch: best.1,
        train_loss,
        val_loss,
        gate,
        val_metrics: MetricReport::compute(&val_pred, &splits.val.y, &val_tda, None)?,
        test_metrics: MetricReport::compute(&test_pred, &splits.test.y, &tda_cfg, None)?,
        regime_metrics: regime_reports(&test_pred, &splits.test, &tda_cfg)?,
        checkpoint: None,
        wall_time_s: started.elapsed().as_secs_f64(),
    };
    Ok(TrainedRun {
        predictor: Predictor::Neural(Box::new(model)),
        record,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Number of runs averaged into this row.
    pub runs: usize,
    pub mae: f64,
    pub rmse: f64,
    /// `(variant - full) / full * 100`
    pub delta_mae_pct: f64,
    pub delta_rmse_pct: f64,
}

/// Per-variant mean test MAE/RMSE and the relative change against the full
/// model. Variants keep their order of first appearance.
pub fn ablation_table(records: &[RunRecord]) -> Result<Vec<AblationRow>> {
    let mut groups: Vec<(Variant, Vec<&RunRecord>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|g| g.0 == r.variant) {
            Some(g) => g.1.push(r),
            None => groups.push((r.variant, vec![r])),
        }
    }
    let mean = |rs: &[&RunRecord], f: fn(&MetricReport) -> f64| {
        rs.iter().map(|r| f(&r.test_metrics)).sum::<f64>() / rs.len() as f64
    };
    let (fm, fr) = groups
        .iter()
        .find(|g| g.0 == Variant::Full)
        .map(|g| (mean(&g.1, |m| m.mae), mean(&g.1, |m| m.rmse)))
        .ok_or_else(|| DsprError::Contract("ablation table needs a full-model run".into()))?;
    Ok(groups
        .iter()
        .map(|(variant, rs)| {
            let (mae, rmse) = (mean(rs, |m| m.mae), mean(rs, |m| m.rmse));
            AblationRow {
                variant: *variant,
                runs: rs.len(),
                mae,
                rmse,
                delta_mae_pct: (mae - fm) / fm * 100.0,
                delta_rmse_pct: (rmse - fr) / fr * 100.0,
            }
        })
        .collect())
}

/// Trains every variant on identical splits and seed.
pub fn run_ablation_suite(
    ds: &SeriesDataset,
    splits: &Splits,
    model_cfg: &ModelConfig,
    base: &TrainConfig,
    variants: &[Variant],
) -> Result<(Vec<AblationRow>, Vec<TrainedRun>)> {
    let runs = variants
        .iter()
        .map(|&variant| {
            let cfg = TrainConfig {
                variant,
                ..base.clone()
            };
            train(ds, splits, model_cfg, &cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    Ok((ablation_table(&records)?, runs))
}

/// Forecast that repeats the last observed target value.
pub fn naive_last_value(batch: &WindowBatch, target: usize) -> Result<Tensor> {
    let (b, l, n) = (batch.len(), batch.lookback(), batch.x.shape()[2]);
    let h = batch.horizon();
    let data = (0..b)
        .flat_map(|bi| std::iter::repeat_n(batch.x.data()[(bi * l + l - 1) * n + target], h))
        .collect();
    Tensor::new(vec![b, h], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_autoregressive, split_windows, SplitConfig};

    fn tiny() -> (SeriesDataset, Splits, ModelConfig) {
        let ds = gen_autoregressive(400, 0.9, 0.3, 5).unwrap();
        let splits = split_windows(&ds, &SplitConfig::new(8, 2)).unwrap();
        let mcfg = ModelConfig {
            d_model: 8,
            heads: 2,
            d_node: 4,
            trend_d_model: 4,
            trend_depth: 1,
            ma_kernel: 3,
            ..ModelConfig::new(2, 1, 8, 2)
        };
        (ds, splits, mcfg)
    }

    #[test]
    fn same_seed_same_record() {
        let (ds, splits, mcfg) = tiny();
        let cfg = TrainConfig {
            epochs: 2,
            max_steps_per_epoch: Some(3),
            ..TrainConfig::default()
        };
        let a = train(&ds, &splits, &mcfg, &cfg).unwrap().record;
        let b = train(&ds, &splits, &mcfg, &cfg).unwrap().record;
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a.val_loss.len(), a.epochs_run);
    }

    #[test]
    fn pgnn_needs_conservation_data() {
        let (ds, splits, mcfg) = tiny();
        let cfg = TrainConfig {
            epochs: 1,
            variant: Variant::Pgnn,
            ..TrainConfig::default()
        };
        assert!(matches!(train(&ds, &splits, &mcfg, &cfg), Err(DsprError::Config(_))));
    }

    #[test]
    fn runaway_learning_rate_reports_divergence() {
        let (ds, splits, mcfg) = tiny();
        let cfg = TrainConfig {
            epochs: 50,
            lr: 1e300,
            clip_norm: 1e300,
            ..TrainConfig::default()
        };
        match train(&ds, &splits, &mcfg, &cfg) {
            Err(DsprError::Diverged { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|r| r.record.val_loss)),
        }
    }

    #[test]
    fn ablation_delta_uses_full_as_reference() {
        let (ds, splits, mcfg) = tiny();
        let base = TrainConfig {
            epochs: 1,
            max_steps_per_epoch: Some(2),
            ..TrainConfig::default()
        };
        let (rows, _) = run_ablation_suite(&ds, &splits, &mcfg, &base, &[Variant::Full, Variant::TrendOnly]).unwrap();
        assert_eq!(rows[0].delta_mae_pct, 0.0);
        let expect = (rows[1].mae - rows[0].mae) / rows[0].mae * 100.0;
        assert!((rows[1].delta_mae_pct - expect).abs() < 1e-12);
    }

    #[test]
    fn naive_forecast_repeats_last_value() {
        let (_, splits, _) = tiny();
        let p = naive_last_value(&splits.test, 1).unwrap();
        let l = splits.test.lookback();
        assert_eq!(p.data()[0], splits.test.x.data()[(l - 1) * 2 + 1]);
        assert_eq!(p.data()[0], p.data()[1]);
    }
}
