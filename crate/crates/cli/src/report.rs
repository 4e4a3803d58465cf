use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dspr_core::graph_dynamic::{read_matrix_csv, DelayProfile};
use dspr_core::metrics::{write_reports_csv, MetricReport};
use dspr_core::training::ablation_table;
use dspr_core::{RunRecord, Variant};

use crate::eval::{ADJACENCY_CSV, DELAY_CSV};
use crate::settings::Settings;
use crate::svg;
use crate::train::RUN_JSON;
use crate::ReportArgs;

pub const TABLE_METRICS: &str = "table_metrics.csv";
pub const TABLE_ABLATION: &str = "table_ablation.csv";
pub const TABLE_REGIMES: &str = "table_regimes.csv";
pub const TAU_SVG: &str = "tau_histogram.svg";
pub const HEATMAP_SVG: &str = "adjacency_heatmap.svg";

struct Run {
    label: String,
    dir: PathBuf,
    record: RunRecord,
}

/// Run directories under `root` (itself included), sorted by path.
fn find_runs(root: &Path) -> Result<Vec<Run>> {
    let mut dirs = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join(RUN_JSON).is_file() {
            dirs.push(dir);
            continue;
        }
        for entry in std::fs::read_dir(&dir).with_context(|| format!("reading {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            }
        }
    }
    dirs.sort();
    dirs.into_iter()
        .map(|dir| {
            let text = std::fs::read_to_string(dir.join(RUN_JSON))?;
            let record: RunRecord =
                serde_json::from_str(&text).with_context(|| format!("parsing {}", dir.join(RUN_JSON).display()))?;
            let label = match dir.strip_prefix(root) {
                Ok(p) if !p.as_os_str().is_empty() => p.display().to_string(),
                _ => dir
                    .file_name()
                    .map_or_else(|| ".".into(), |n| n.to_string_lossy().into_owned()),
            };
            Ok(Run { label, dir, record })
        })
        .collect()
}

fn write_ablation(path: &Path, records: &[RunRecord]) -> Result<()> {
    let rows = ablation_table(records)?;
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["variant", "runs", "MAE", "RMSE", "dMAE_pct", "dRMSE_pct"])?;
    for r in rows {
        w.write_record([
            r.variant.to_string(),
            r.runs.to_string(),
            r.mae.to_string(),
            r.rmse.to_string(),
            r.delta_mae_pct.to_string(),
            r.delta_rmse_pct.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

type TauGroups = Vec<(String, Vec<f64>)>;

/// Target receptive fields at the forecast origin, pooled across runs by
/// regime label, plus the window cap.
fn origin_taus(runs: &[&Run]) -> Result<(TauGroups, f64)> {
    let mut groups: Vec<(String, Vec<f64>)> = Vec::new();
    let mut tau_max: f64 = 20.0;
    for run in runs {
        let Some(mc) = &run.record.model_config else { continue };
        let path = run.dir.join(DELAY_CSV);
        if !path.is_file() {
            continue;
        }
        tau_max = mc.tau_max;
        let profile = DelayProfile::read_csv(&path)?;
        for row in profile
            .rows
            .iter()
            .filter(|r| r.channel == mc.target && r.t + 1 == mc.lookback)
        {
            match groups.iter_mut().find(|g| g.0 == row.regime) {
                Some(g) => g.1.push(row.tau),
                None => groups.push((row.regime.clone(), vec![row.tau])),
            }
        }
    }
    groups.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((groups, tau_max))
}

/// Element-wise mean of the stored adjacency matrices.
fn mean_adjacency(runs: &[&Run]) -> Result<Option<(Vec<String>, Vec<f64>)>> {
    let mut acc: Option<(Vec<String>, Vec<f64>)> = None;
    let mut count = 0.0;
    for run in runs {
        let path = run.dir.join(ADJACENCY_CSV);
        if !path.is_file() {
            continue;
        }
        let (names, m) = read_matrix_csv(&path)?;
        match &mut acc {
            None => acc = Some((names, m.data().to_vec())),
            Some((n0, sum)) => {
                if *n0 != names {
                    bail!(
                        "adjacency in {} has variables {:?}, expected {:?}",
                        run.label,
                        names,
                        n0
                    );
                }
                for (s, v) in sum.iter_mut().zip(m.data()) {
                    *s += v;
                }
            }
        }
        count += 1.0;
    }
    Ok(acc.map(|(n, s)| (n, s.into_iter().map(|v| v / count).collect())))
}

pub fn run(a: ReportArgs, s: &Settings) -> Result<()> {
    let root: PathBuf = s.require(a.runs, "runs")?;
    let out: PathBuf = s.require(a.out, "out")?;
    let runs = find_runs(&root)?;
    if runs.is_empty() {
        bail!(
            "no completed runs (directories with {RUN_JSON}) under {}",
            root.display()
        );
    }
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let overall: Vec<(String, MetricReport)> = runs
        .iter()
        .map(|r| (r.label.clone(), r.record.test_metrics.clone()))
        .collect();
    write_reports_csv(&out.join(TABLE_METRICS), &overall)?;

    let regimes: Vec<(String, MetricReport)> = runs
        .iter()
        .flat_map(|r| r.record.regime_metrics.iter().map(|m| (r.label.clone(), m.clone())))
        .collect();
    write_reports_csv(&out.join(TABLE_REGIMES), &regimes)?;

    let records: Vec<RunRecord> = runs.iter().map(|r| r.record.clone()).collect();
    let mut written = vec![TABLE_METRICS, TABLE_REGIMES];
    if records.iter().any(|r| r.variant == Variant::Full) {
        write_ablation(&out.join(TABLE_ABLATION), &records)?;
        written.push(TABLE_ABLATION);
    }

    // figures prefer the full model when it is among the runs
    let full: Vec<&Run> = runs.iter().filter(|r| r.record.variant == Variant::Full).collect();
    let figure_runs = if full.is_empty() { runs.iter().collect() } else { full };
    let (groups, tau_max) = origin_taus(&figure_runs)?;
    if !groups.is_empty() {
        std::fs::write(out.join(TAU_SVG), svg::tau_histogram(&groups, tau_max))?;
        written.push(TAU_SVG);
    }
    if let Some((names, m)) = mean_adjacency(&figure_runs)? {
        let svg = svg::heatmap(&names, &m, "Mean dynamic adjacency (row = receiver)");
        std::fs::write(out.join(HEATMAP_SVG), svg)?;
        written.push(HEATMAP_SVG);
    }
    println!("{} runs -> {}: {}", runs.len(), out.display(), written.join(", "));
    Ok(())
}
