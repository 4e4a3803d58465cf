use std::path::PathBuf;

use anyhow::{Context, Result};
use dspr_core::data::{split_windows, SeriesDataset, SplitConfig};
use dspr_core::training::{evaluate, train, Predictor};
use dspr_core::{Checkpoint, DsprError, ModelConfig, TrainConfig, Variant};

use crate::eval::{write_artifacts, ReportOptions};
use crate::generate::prepare_out_dir;
use crate::settings::{usage, Settings};
use crate::TrainArgs;

pub const RUN_JSON: &str = "run.json";
pub const CHECKPOINT: &str = "model.ckpt";
pub const ARX_JSON: &str = "arx.json";

pub const DEFAULT_LOOKBACK: usize = 24;
pub const DEFAULT_HORIZON: usize = 4;

const FULL_REPORT: ReportOptions = ReportOptions {
    regimes: true,
    tda: None,
};

fn as_usage(e: DsprError) -> anyhow::Error {
    usage(e.to_string())
}

pub fn run(a: TrainArgs, s: &Settings) -> Result<()> {
    let data: PathBuf = s.require(a.data, "data")?;
    let out: PathBuf = s.require(a.out, "out")?;
    let variant: Variant = s
        .get(a.variant, "variant", "full".to_string())?
        .parse()
        .map_err(as_usage)?;
    let seed = s.seed(a.seed)?;

    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: s.get(a.epochs, "epochs", d.epochs)?,
        batch_size: s.get(a.batch_size, "batch_size", d.batch_size)?,
        lr: s.get(a.lr, "lr", d.lr)?,
        seed,
        clip_norm: s.get(a.clip_norm, "clip_norm", d.clip_norm)?,
        patience: s.get(a.patience, "patience", d.patience)?,
        variant,
        max_steps_per_epoch: s.pick(a.steps_per_epoch, "steps_per_epoch")?,
        pgnn_lambda: s.get(a.pgnn_lambda, "pgnn_lambda", d.pgnn_lambda)?,
        arx_orders: (
            s.get(a.arx_p, "arx_p", d.arx_orders.0)?,
            s.get(a.arx_q, "arx_q", d.arx_orders.1)?,
        ),
    };
    cfg.validate().map_err(as_usage)?;

    let ds = SeriesDataset::load_dir(&data).with_context(|| format!("loading dataset {}", data.display()))?;
    let lookback = s.get(a.lookback, "lookback", DEFAULT_LOOKBACK)?;
    let horizon = s.get(a.horizon, "horizon", DEFAULT_HORIZON)?;
    let mut split = SplitConfig::new(lookback, horizon);
    split.val_stride = s.get(a.val_stride, "val_stride", split.val_stride)?;

    let m = ModelConfig::new(ds.n_vars(), ds.target(), lookback, horizon);
    let model_cfg = ModelConfig {
        d_model: s.get(a.d_model, "d_model", m.d_model)?,
        heads: s.get(a.heads, "heads", m.heads)?,
        d_node: s.get(a.d_node, "d_node", m.d_node)?,
        trend_d_model: s.get(a.trend_d_model, "trend_d_model", m.trend_d_model)?,
        trend_depth: s.get(a.trend_depth, "trend_depth", m.trend_depth)?,
        trend_scales: s.get(a.trend_scales, "trend_scales", m.trend_scales)?,
        ma_kernel: s.get(a.ma_kernel, "ma_kernel", m.ma_kernel)?,
        tau_max: s.get(a.tau_max, "tau_max", m.tau_max)?,
        gamma: s.get(a.gamma, "gamma", m.gamma)?,
        lambda_sparse: s.get(a.lambda_sparse, "lambda_sparse", m.lambda_sparse)?,
        positional: s.switch(a.positional, "positional")?,
        variant,
        ..m
    };
    if variant != Variant::Arx {
        model_cfg.validate().map_err(as_usage)?;
    }

    let splits = split_windows(&ds, &split)?;
    prepare_out_dir(&out, s.switch(a.force, "force")?)?;
    let run = train(&ds, &splits, &model_cfg, &cfg)?;
    let mut record = run.record;
    let names = ds.names();
    match &run.predictor {
        Predictor::Neural(model) => {
            let mut ck = Checkpoint::from_model(model, seed);
            ck.split = Some(split.clone());
            ck.normalizer = Some(splits.normalizer.clone());
            ck.metrics = Some(record.val_metrics.clone());
            ck.save(&out.join(CHECKPOINT))?;
            record.checkpoint = Some(CHECKPOINT.into());
            let ev = evaluate(model, &splits.test)?;
            write_artifacts(&out, "test", &ev.y_hat, &splits.test, Some(&ev), &names, FULL_REPORT)?;
        }
        Predictor::Arx(arx) => {
            std::fs::write(out.join(ARX_JSON), serde_json::to_string_pretty(arx)?)?;
            record.checkpoint = Some(ARX_JSON.into());
            let y_hat = run.predictor.predict(&splits.test)?;
            write_artifacts(&out, "test", &y_hat, &splits.test, None, &names, FULL_REPORT)?;
        }
    }
    std::fs::write(out.join(RUN_JSON), serde_json::to_string_pretty(&record)?)?;
    println!(
        "{variant} seed {seed}: {} epochs (best {}) in {:.1}s, test MAE {:.6} RMSE {:.6} -> {}",
        record.epochs_run,
        record.best_epoch,
        record.wall_time_s,
        record.test_metrics.mae,
        record.test_metrics.rmse,
        out.display()
    );
    Ok(())
}
