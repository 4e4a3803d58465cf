use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dspr_core::data::{split_windows, SeriesDataset, SplitConfig, WindowBatch};
use dspr_core::graph_dynamic::write_matrix_csv;
use dspr_core::metrics::{write_reports_csv, MetricReport, Regime, TdaConfig};
use dspr_core::training::{evaluate, regime_labels, regime_reports, Evaluation};
use dspr_core::{Checkpoint, Tensor};

use crate::settings::{usage, Settings};
use crate::EvalArgs;

pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const DELAY_CSV: &str = "delay_profile.csv";
pub const ADJACENCY_CSV: &str = "adjacency.csv";

#[derive(Clone, Copy, Debug)]
pub struct ReportOptions {
    /// Add the volatility tertiles at the full horizon.
    pub regimes: bool,
    /// Fixed interval convention; derived from the truth when absent.
    pub tda: Option<TdaConfig>,
}

/// Per-horizon reports over every window, plus the tertile reports when
/// requested.
pub fn reports(y_hat: &Tensor, batch: &WindowBatch, opts: ReportOptions) -> Result<Vec<MetricReport>> {
    let mut out = MetricReport::per_horizon(y_hat, &batch.y, Some(Regime::All), opts.tda)?;
    if opts.regimes {
        let tda = opts.tda.unwrap_or_else(|| TdaConfig::for_truth(&batch.y));
        out.extend(regime_reports(y_hat, batch, &tda)?.into_iter().skip(1));
    }
    Ok(out)
}

/// Writes the metric tables and, for neural runs, the delay profile and the
/// mean dynamic adjacency of `batch`.
pub fn write_artifacts(
    dir: &Path,
    label: &str,
    y_hat: &Tensor,
    batch: &WindowBatch,
    evaluation: Option<&Evaluation>,
    names: &[String],
    opts: ReportOptions,
) -> Result<Vec<MetricReport>> {
    let reps = reports(y_hat, batch, opts)?;
    let rows: Vec<(String, MetricReport)> = reps.iter().map(|r| (label.to_string(), r.clone())).collect();
    write_reports_csv(&dir.join(METRICS_CSV), &rows)?;
    std::fs::write(dir.join(METRICS_JSON), serde_json::to_string_pretty(&reps)?)?;
    if let Some(ev) = evaluation {
        let labels = regime_labels(batch)?;
        if let Some(profile) = ev.delay_profile(Some(&labels)) {
            profile.write_csv(&dir.join(DELAY_CSV))?;
        }
        if let Some(a) = &ev.a_dynamic_mean {
            write_matrix_csv(&dir.join(ADJACENCY_CSV), names, a)?;
        }
    }
    Ok(reps)
}

fn check_compatible(ck: &Checkpoint, ds: &SeriesDataset) -> Result<()> {
    let expected = ck.prior.names();
    let found = ds.names();
    if expected != found || ck.model.target != ds.target() {
        bail!(
            "checkpoint expects {} variables {:?} with target '{}'; data has {} variables {:?} with target '{}'",
            expected.len(),
            expected,
            expected[ck.model.target],
            found.len(),
            found,
            found[ds.target()]
        );
    }
    Ok(())
}

pub fn run(a: EvalArgs, s: &Settings) -> Result<()> {
    let ck_path: PathBuf = s.require(a.checkpoint, "checkpoint")?;
    let data: PathBuf = s.require(a.data, "data")?;
    let split_name = s.get(a.split, "split", "test".to_string())?;
    let regimes = s.switch(a.regimes, "regimes")?;
    let tda = match (s.pick(a.tda_segment, "tda_segment")?, s.pick(a.tda_delta, "tda_delta")?) {
        (None, None) => None,
        (segment, delta) => {
            if segment == Some(0) || delta.is_some_and(|d: f64| d.is_nan() || d < 0.0) {
                return Err(usage("--tda-segment must be >= 1 and --tda-delta >= 0"));
            }
            Some((segment, delta))
        }
    };
    let ck = Checkpoint::load(&ck_path).with_context(|| format!("loading checkpoint {}", ck_path.display()))?;
    let ds = SeriesDataset::load_dir(&data).with_context(|| format!("loading dataset {}", data.display()))?;
    check_compatible(&ck, &ds)?;
    if let Some(l) = s.pick(a.lookback, "lookback")? {
        if l != ck.model.lookback {
            bail!(
                "checkpoint expects lookback {} (x shape [B, {}, {}]); requested {l} (x shape [B, {l}, {}])",
                ck.model.lookback,
                ck.model.lookback,
                ck.model.n_vars,
                ds.n_vars()
            );
        }
    }
    let split = ck
        .split
        .clone()
        .unwrap_or_else(|| SplitConfig::new(ck.model.lookback, ck.model.horizon));
    let splits = split_windows(&ds, &split)?;
    let batch = match split_name.as_str() {
        "val" => &splits.val,
        "test" => &splits.test,
        other => return Err(usage(format!("--split must be val or test, got '{other}'"))),
    };
    let out = match s.pick(a.out, "out")? {
        Some(o) => o,
        None => ck_path
            .parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{split_name}")),
    };
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let model = ck.restore()?;
    let ev = evaluate(&model, batch)?;
    let tda = tda.map(|(segment, delta)| {
        let derived = TdaConfig::for_truth(&batch.y);
        TdaConfig {
            segment: segment.unwrap_or(derived.segment),
            delta: delta.unwrap_or(derived.delta),
        }
    });
    let reps = write_artifacts(
        &out,
        &split_name,
        &ev.y_hat,
        batch,
        Some(&ev),
        &ds.names(),
        ReportOptions { regimes, tda },
    )?;
    let full = &reps[split.horizon - 1];
    println!(
        "{split_name}: {} windows, MAE {:.6} RMSE {:.6} MCA {:.3} TVR {:.3} -> {}",
        full.n_samples,
        full.mae,
        full.rmse,
        full.mca,
        full.tvr,
        out.display()
    );
    if let (Some(stored), "val") = (&ck.metrics, split_name.as_str()) {
        println!(
            "stored val MAE {:.6} (difference {:.3e})",
            stored.mae,
            (stored.mae - full.mae).abs()
        );
    }
    Ok(())
}
