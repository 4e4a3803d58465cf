//! Datasets: synthetic processes with known mechanisms, CSV ingestion,
//! on-disk layout, normalisation and chronological windowing.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{DsprError, Result};
use crate::graph_static::{PriorGraph, Role, Variable};
use crate::tensor::Tensor;

/// Number of calendar features per step.
pub const N_TIME_FEATS: usize = 4;

/// Known linear mass balance `y[t] = (1 - leak) * sum_i inputs_i[t - delay]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationLaw {
    pub inputs: Vec<usize>,
    pub target: usize,
    pub leak: f64,
    pub delay: usize,
}

impl ConservationLaw {
    /// Surrogate target at absolute step `t` from raw values `[T, N]`.
    pub fn at(&self, values: &Tensor, t: usize) -> Option<f64> {
        let n = values.shape()[1];
        let src = t.checked_sub(self.delay)?;
        let total: f64 = self.inputs.iter().map(|&i| values.data()[src * n + i]).sum();
        Some((1.0 - self.leak) * total)
    }
}

/// Ground truth exported by the transport-delay generator.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayTruth {
    /// True transport delay (steps) acting on the target at each step.
    pub tau: Vec<f64>,
    /// Regime index at each step.
    pub regime: Vec<usize>,
    /// True causal parents of the target.
    pub parents: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeriesDataset {
    pub values: Tensor,
    pub period_s: f64,
    pub prior: PriorGraph,
    pub delay: Option<DelayTruth>,
    pub conservation: Option<ConservationLaw>,
    pub generator: Option<serde_json::Value>,
}

impl SeriesDataset {
    pub fn n_steps(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_vars(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn target(&self) -> usize {
        self.prior.target()
    }

    pub fn names(&self) -> Vec<String> {
        self.prior.names()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        let n = self.n_vars();
        (0..self.n_steps()).map(|t| self.values.data()[t * n + j]).collect()
    }

    /// Writes `data.csv`, `meta.json`, `prior.json` and, when present, `truth.csv`.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_values_csv(&dir.join("data.csv"), &self.names(), &self.values)?;
        self.prior.save(&dir.join("prior.json"))?;
        let meta = DatasetMeta {
            names: self.names(),
            roles: self.prior.variables().iter().map(|v| v.role).collect(),
            period_s: self.period_s,
            target: self.target(),
            n_steps: self.n_steps(),
            parents: self.delay.as_ref().map(|d| d.parents.clone()),
            conservation: self.conservation.clone(),
            generator: self.generator.clone(),
        };
        std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        if let Some(d) = &self.delay {
            let mut w = csv::Writer::from_path(dir.join("truth.csv"))?;
            w.write_record(["t", "tau", "regime"])?;
            for (t, (tau, r)) in d.tau.iter().zip(&d.regime).enumerate() {
                w.write_record([t.to_string(), tau.to_string(), r.to_string()])?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load_dir(dir: &Path) -> Result<Self> {
        let meta: DatasetMeta = serde_json::from_str(&std::fs::read_to_string(dir.join("meta.json"))?)?;
        let prior = PriorGraph::load(&dir.join("prior.json"))?;
        let (names, values) = read_values_csv(&dir.join("data.csv"))?;
        if names != meta.names || names != prior.names() {
            return Err(DsprError::Schema(format!(
                "column names {names:?} disagree with metadata {:?}",
                meta.names
            )));
        }
        if values.shape()[0] != meta.n_steps {
            return Err(DsprError::Schema(format!(
                "expected {} rows, found {}",
                meta.n_steps,
                values.shape()[0]
            )));
        }
        let truth_path = dir.join("truth.csv");
        let delay = if truth_path.exists() {
            let mut r = csv::Reader::from_path(&truth_path)?;
            let mut truth = DelayTruth {
                parents: meta.parents.clone().unwrap_or_default(),
                ..DelayTruth::default()
            };
            for (i, rec) in r.records().enumerate() {
                let rec = rec?;
                let cell = |j: usize| -> Result<&str> {
                    rec.get(j).ok_or_else(|| DsprError::Parse {
                        row: i + 2,
                        col: j + 1,
                        msg: "missing field".into(),
                    })
                };
                truth.tau.push(parse_cell(cell(1)?, i + 2, 2)?);
                truth.regime.push(parse_cell(cell(2)?, i + 2, 3)? as usize);
            }
            Some(truth)
        } else {
            None
        };
        Ok(Self {
            values,
            period_s: meta.period_s,
            prior,
            delay,
            conservation: meta.conservation,
            generator: meta.generator,
        })
    }
}

/// Dataset metadata document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub names: Vec<String>,
    pub roles: Vec<Role>,
    pub period_s: f64,
    pub target: usize,
    pub n_steps: usize,
    #[serde(default)]
    pub parents: Option<Vec<usize>>,
    #[serde(default)]
    pub conservation: Option<ConservationLaw>,
    #[serde(default)]
    pub generator: Option<serde_json::Value>,
}

fn parse_cell(s: &str, row: usize, col: usize) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|e| DsprError::Parse {
        row,
        col,
        msg: format!("'{s}': {e}"),
    })
}

pub fn write_values_csv(path: &Path, names: &[String], values: &Tensor) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for row in values.data().chunks(names.len()) {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

fn read_values_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        for (j, cell) in rec.iter().enumerate() {
            data.push(parse_cell(cell, i + 2, j + 1)?);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(DsprError::Schema(format!("{} has no data rows", path.display())));
    }
    Ok((names.clone(), Tensor::new(vec![rows, names.len()], data)?))
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Variable-delay process: the actuator reaches the target after a delay set
/// by the current flow regime.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransportDelayConfig {
    pub n_steps: usize,
    pub seed: u64,
    /// `(flow level, delay in steps)` per regime.
    pub lag_regimes: Vec<(f64, usize)>,
    pub noise_std: f64,
    pub min_dwell: usize,
    pub max_dwell: usize,
    pub actuator_gain: f64,
    pub state_gain: f64,
    pub n_distractors: usize,
    pub period_s: f64,
}

impl Default for TransportDelayConfig {
    fn default() -> Self {
        Self {
            n_steps: 20_000,
            seed: 0,
            lag_regimes: vec![(1.0, 4), (0.3, 12)],
            noise_std: 0.1,
            min_dwell: 150,
            max_dwell: 450,
            actuator_gain: 1.0,
            state_gain: 0.5,
            n_distractors: 2,
            period_s: 10.0,
        }
    }
}

/// Columns: `u` (actuator), `v` (flow), `x` (AR(2) state), distractors
/// `d1..`, and target `y = a * u[t - tau(v[t])] + b * x[t] + noise`.
pub fn gen_transport_delay(cfg: &TransportDelayConfig) -> Result<SeriesDataset> {
    if cfg.lag_regimes.is_empty() {
        return Err(DsprError::Config("at least one lag regime is required".into()));
    }
    for (i, a) in cfg.lag_regimes.iter().enumerate() {
        if a.1 == 0 || !a.0.is_finite() {
            return Err(DsprError::Config(format!(
                "regime {i}: delay must be >= 1 and level finite"
            )));
        }
        if cfg.lag_regimes[..i].iter().any(|b| b.1 == a.1) {
            return Err(DsprError::Config(format!(
                "regime delays must be distinct, {} repeats",
                a.1
            )));
        }
    }
    if cfg.min_dwell == 0 || cfg.max_dwell < cfg.min_dwell || cfg.noise_std < 0.0 {
        return Err(DsprError::Config("invalid dwell range or noise level".into()));
    }
    let max_tau = cfg.lag_regimes.iter().map(|r| r.1).max().unwrap();
    let burn = max_tau + 50;
    let total = cfg.n_steps + burn;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut regime = Vec::with_capacity(total);
    let mut current = rng.gen_range(0..cfg.lag_regimes.len());
    while regime.len() < total {
        let dwell = rng.gen_range(cfg.min_dwell..=cfg.max_dwell);
        regime.extend(std::iter::repeat_n(current, dwell));
        if cfg.lag_regimes.len() > 1 {
            let step = rng.gen_range(1..cfg.lag_regimes.len());
            current = (current + step) % cfg.lag_regimes.len();
        }
    }
    regime.truncate(total);

    let n_vars = 4 + cfg.n_distractors;
    let target = n_vars - 1;
    let mut u = vec![0.0; total];
    let mut v = vec![0.0; total];
    let mut x = vec![0.0; total];
    let mut dist = vec![vec![0.0; total]; cfg.n_distractors];
    for t in 0..total {
        let prev = |s: &[f64], k: usize| if t >= k { s[t - k] } else { 0.0 };
        u[t] = 0.9 * prev(&u, 1) + 0.45 * gauss(&mut rng);
        v[t] = cfg.lag_regimes[regime[t]].0 + 0.05 * gauss(&mut rng);
        x[t] = 1.5 * prev(&x, 1) - 0.6 * prev(&x, 2) + 0.2 * gauss(&mut rng);
        for d in dist.iter_mut() {
            d[t] = 0.9 * prev(d, 1) + 0.45 * gauss(&mut rng);
        }
    }
    let mut y = vec![0.0; total];
    let mut tau = vec![0.0; total];
    for t in burn..total {
        let lag = cfg.lag_regimes[regime[t]].1;
        tau[t] = lag as f64;
        y[t] = cfg.actuator_gain * u[t - lag] + cfg.state_gain * x[t] + cfg.noise_std * gauss(&mut rng);
    }

    let mut data = Vec::with_capacity(cfg.n_steps * n_vars);
    for t in burn..total {
        data.push(u[t]);
        data.push(v[t]);
        data.push(x[t]);
        for d in &dist {
            data.push(d[t]);
        }
        data.push(y[t]);
    }
    let mut vars = vec![
        Variable {
            name: "u".into(),
            role: Role::Actuator,
        },
        Variable {
            name: "v".into(),
            role: Role::State,
        },
        Variable {
            name: "x".into(),
            role: Role::State,
        },
    ];
    for i in 0..cfg.n_distractors {
        vars.push(Variable {
            name: format!("d{}", i + 1),
            role: Role::State,
        });
    }
    vars.push(Variable {
        name: "y".into(),
        role: Role::Target,
    });
    let prior = PriorGraph::build(vars, &[(1, target), (2, target)])?;
    Ok(SeriesDataset {
        values: Tensor::new(vec![cfg.n_steps, n_vars], data)?,
        period_s: cfg.period_s,
        prior,
        delay: Some(DelayTruth {
            tau: tau[burn..].to_vec(),
            regime: regime[burn..].to_vec(),
            parents: vec![0, 1, 2],
        }),
        conservation: None,
        generator: Some(serde_json::json!({ "kind": "transport_delay", "config": cfg })),
    })
}

/// Mass-balance process: two positive inflows reach the outlet after a
/// fixed delay, minus a proportional leak.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservationConfig {
    pub n_steps: usize,
    pub seed: u64,
    pub leak: f64,
    pub delay: usize,
    pub noise_std: f64,
    pub period_s: f64,
}

impl Default for ConservationConfig {
    fn default() -> Self {
        Self {
            n_steps: 5_000,
            seed: 0,
            leak: 0.05,
            delay: 6,
            noise_std: 0.02,
            period_s: 60.0,
        }
    }
}

/// Columns: `in1`, `in2` (actuators), `level` (state), `out` (target).
pub fn gen_conservation(cfg: &ConservationConfig) -> Result<SeriesDataset> {
    if !(0.0..1.0).contains(&cfg.leak) || cfg.delay == 0 || cfg.noise_std < 0.0 {
        return Err(DsprError::Config(
            "leak must be in [0, 1), delay >= 1, noise >= 0".into(),
        ));
    }
    let burn = cfg.delay + 20;
    let total = cfg.n_steps + burn;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut z1 = 0.0;
    let mut z2 = 0.0;
    let mut in1 = vec![0.0; total];
    let mut in2 = vec![0.0; total];
    for t in 0..total {
        z1 = 0.95 * z1 + 0.3 * gauss(&mut rng);
        z2 = 0.8 * z2 + 0.5 * gauss(&mut rng);
        in1[t] = softplus(z1) + 0.5;
        in2[t] = 0.5 * softplus(z2) + 0.2;
    }
    let law = ConservationLaw {
        inputs: vec![0, 1],
        target: 3,
        leak: cfg.leak,
        delay: cfg.delay,
    };
    let mut data = Vec::with_capacity(cfg.n_steps * 4);
    let mut level = 0.0;
    for t in burn..total {
        let out = (1.0 - cfg.leak) * (in1[t - cfg.delay] + in2[t - cfg.delay]) + cfg.noise_std * gauss(&mut rng);
        level = 0.9 * level + in1[t] + in2[t] - out;
        data.extend_from_slice(&[in1[t], in2[t], level, out]);
    }
    let vars = vec![
        Variable {
            name: "in1".into(),
            role: Role::Actuator,
        },
        Variable {
            name: "in2".into(),
            role: Role::Actuator,
        },
        Variable {
            name: "level".into(),
            role: Role::State,
        },
        Variable {
            name: "out".into(),
            role: Role::Target,
        },
    ];
    let prior = PriorGraph::build(vars, &[(2, 3)])?;
    Ok(SeriesDataset {
        values: Tensor::new(vec![cfg.n_steps, 4], data)?,
        period_s: cfg.period_s,
        prior,
        delay: None,
        conservation: Some(law),
        generator: Some(serde_json::json!({ "kind": "conservation", "config": cfg })),
    })
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Autoregressive toy: white-noise actuator `u` and `y[t] = coef * y[t-1] + noise`.
pub fn gen_autoregressive(n_steps: usize, coef: f64, noise_std: f64, seed: u64) -> Result<SeriesDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = 1.0;
    let mut data = Vec::with_capacity(n_steps * 2);
    for _ in 0..n_steps {
        let u: f64 = gauss(&mut rng);
        y = coef * y + noise_std * gauss(&mut rng);
        data.extend_from_slice(&[u, y]);
    }
    let vars = vec![
        Variable {
            name: "u".into(),
            role: Role::Actuator,
        },
        Variable {
            name: "y".into(),
            role: Role::Target,
        },
    ];
    Ok(SeriesDataset {
        values: Tensor::new(vec![n_steps, 2], data)?,
        period_s: 1.0,
        prior: PriorGraph::build(vars, &[])?,
        delay: None,
        conservation: None,
        generator: Some(
            serde_json::json!({ "kind": "autoregressive", "coef": coef, "noise_std": noise_std, "seed": seed }),
        ),
    })
}

/// Column semantics for [`ingest_csv`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub target: String,
    #[serde(default)]
    pub actuators: Vec<String>,
    /// Additional `(source, destination)` edges of the prior.
    #[serde(default)]
    pub confirmed_edges: Vec<(String, String)>,
    /// Columns whose negative values are clipped to zero.
    #[serde(default)]
    pub zero_clip: Vec<String>,
    #[serde(default = "default_period")]
    pub period_s: f64,
    /// Leading fraction of rows used for outlier statistics.
    #[serde(default = "default_fit_fraction")]
    pub fit_fraction: f64,
}

fn default_period() -> f64 {
    1.0
}

fn default_fit_fraction() -> f64 {
    0.6
}

/// Reads a headered numeric CSV and cleans every column: `|z| > 3`
/// outliers (statistics from the leading `fit_fraction` of rows) and empty
/// or `NaN` cells are filled by linear interpolation, edge gaps take the
/// nearest observed value, and flagged columns are clipped at zero.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<SeriesDataset> {
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().map(|s| s.trim().to_string()).collect();
    let n = names.len();
    let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::new(); n];
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != n {
            return Err(DsprError::Parse {
                row: i + 2,
                col: rec.len().min(n) + 1,
                msg: format!("expected {n} fields, found {}", rec.len()),
            });
        }
        for (j, cell) in rec.iter().enumerate() {
            let cell = cell.trim();
            let v = if cell.is_empty() || cell.eq_ignore_ascii_case("nan") || cell.eq_ignore_ascii_case("na") {
                None
            } else {
                let v = parse_cell(cell, i + 2, j + 1)?;
                v.is_finite().then_some(v)
            };
            cols[j].push(v);
        }
    }
    let rows = cols.first().map_or(0, Vec::len);
    if rows == 0 {
        return Err(DsprError::Schema(format!("{} has no data rows", path.display())));
    }
    let fit_rows = ((rows as f64 * schema.fit_fraction).floor() as usize).clamp(1, rows);
    for (j, col) in cols.iter_mut().enumerate() {
        if col.iter().all(Option::is_none) {
            return Err(DsprError::Schema(format!(
                "column '{}' has no numeric values",
                names[j]
            )));
        }
        let fit: Vec<f64> = col[..fit_rows].iter().flatten().copied().collect();
        if fit.len() >= 2 {
            let mean = fit.iter().sum::<f64>() / fit.len() as f64;
            let std = (fit.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / fit.len() as f64).sqrt();
            if std > 0.0 {
                for v in col.iter_mut() {
                    if v.is_some_and(|x| ((x - mean) / std).abs() > 3.0) {
                        *v = None;
                    }
                }
            }
        }
        if col.iter().all(Option::is_none) {
            return Err(DsprError::Schema(format!("column '{}' is entirely outliers", names[j])));
        }
    }
    let mut filled: Vec<Vec<f64>> = cols.iter().map(|c| fill_gaps(c)).collect();
    for name in &schema.zero_clip {
        let j = names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DsprError::Schema(format!("zero-clip column '{name}' not found")))?;
        filled[j].iter_mut().for_each(|v| *v = v.max(0.0));
    }
    let index = |name: &str| -> Result<usize> {
        names
            .iter()
            .position(|n| n == name)
            .ok_or_else(|| DsprError::Schema(format!("column '{name}' not found")))
    };
    let target = index(&schema.target)?;
    let mut vars: Vec<Variable> = names
        .iter()
        .map(|n| Variable {
            name: n.clone(),
            role: Role::State,
        })
        .collect();
    vars[target].role = Role::Target;
    for a in &schema.actuators {
        let j = index(a)?;
        if j == target {
            return Err(DsprError::Schema("the target cannot be an actuator".into()));
        }
        vars[j].role = Role::Actuator;
    }
    let edges = schema
        .confirmed_edges
        .iter()
        .map(|(s, d)| Ok((index(s)?, index(d)?)))
        .collect::<Result<Vec<_>>>()?;
    let prior = PriorGraph::build(vars, &edges).map_err(|e| DsprError::Schema(e.to_string()))?;
    let mut data = Vec::with_capacity(rows * n);
    for t in 0..rows {
        for col in &filled {
            data.push(col[t]);
        }
    }
    Ok(SeriesDataset {
        values: Tensor::new(vec![rows, n], data)?,
        period_s: schema.period_s,
        prior,
        delay: None,
        conservation: None,
        generator: None,
    })
}

/// Linear interpolation between observed neighbours; leading and trailing
/// gaps copy the nearest observation.
fn fill_gaps(col: &[Option<f64>]) -> Vec<f64> {
    let known: Vec<(usize, f64)> = col.iter().enumerate().filter_map(|(i, v)| v.map(|x| (i, x))).collect();
    let mut out = vec![0.0; col.len()];
    let (first, last) = (known[0], known[known.len() - 1]);
    for (i, o) in out.iter_mut().enumerate() {
        *o = match col[i] {
            Some(v) => v,
            None if i < first.0 => first.1,
            None if i > last.0 => last.1,
            None => {
                let k = known.partition_point(|&(j, _)| j < i);
                let (i0, v0) = known[k - 1];
                let (i1, v1) = known[k];
                v0 + (v1 - v0) * (i - i0) as f64 / (i1 - i0) as f64
            }
        };
    }
    out
}

/// Sine/cosine of minute-of-hour and hour-of-day at absolute step `t`.
pub fn time_features(t: usize, period_s: f64) -> [f64; N_TIME_FEATS] {
    let secs = t as f64 * period_s;
    let minute = (secs / 60.0) % 60.0;
    let hour = (secs / 3600.0) % 24.0;
    let (m, h) = (2.0 * PI * minute / 60.0, 2.0 * PI * hour / 24.0);
    [m.sin(), m.cos(), h.sin(), h.cos()]
}

/// Per-variable z-score statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Fits on rows `[0, rows)` of `values`; constant columns get unit scale.
    pub fn fit(values: &Tensor, rows: usize) -> Self {
        let n = values.shape()[1];
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for row in values.data()[..rows * n].chunks(n) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        for row in values.data()[..rows * n].chunks(n) {
            for j in 0..n {
                std[j] += (row[j] - mean[j]).powi(2);
            }
        }
        for s in &mut std {
            *s = (*s / rows as f64).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        }
        Self { mean, std }
    }

    pub fn apply(&self, j: usize, v: f64) -> f64 {
        (v - self.mean[j]) / self.std[j]
    }

    pub fn invert(&self, j: usize, v: f64) -> f64 {
        v * self.std[j] + self.mean[j]
    }
}

/// Stacked lookback/horizon windows in normalised space.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowBatch {
    /// `[B, L, N]`
    pub x: Tensor,
    /// `[B, L + H, F]`
    pub time_feats: Tensor,
    /// `[B, H]`
    pub y: Tensor,
    /// Target std over lookback and horizon per window.
    pub sample_std: Vec<f64>,
    /// Absolute index of each window's first lookback step.
    pub start: Vec<usize>,
    /// True delay at the forecast origin, when the generator exports it.
    pub true_tau: Option<Vec<f64>>,
    /// Generator regime at the forecast origin.
    pub regime: Option<Vec<usize>>,
    /// Normalised conservation surrogate `[B, H]`.
    pub f_cons: Option<Tensor>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.start.len()
    }

    pub fn is_empty(&self) -> bool {
        self.start.is_empty()
    }

    pub fn lookback(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn horizon(&self) -> usize {
        self.y.shape()[1]
    }

    /// Gathers windows by position.
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        if idx.is_empty() || idx.iter().any(|&i| i >= self.len()) {
            return Err(DsprError::Contract("window selection out of range".into()));
        }
        Ok(Self {
            x: gather(&self.x, idx)?,
            time_feats: gather(&self.time_feats, idx)?,
            y: gather(&self.y, idx)?,
            sample_std: idx.iter().map(|&i| self.sample_std[i]).collect(),
            start: idx.iter().map(|&i| self.start[i]).collect(),
            true_tau: self.true_tau.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect()),
            regime: self.regime.as_ref().map(|v| idx.iter().map(|&i| v[i]).collect()),
            f_cons: self.f_cons.as_ref().map(|t| gather(t, idx)).transpose()?,
        })
    }
}

fn gather(t: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let stride = t.numel() / t.shape()[0];
    let mut data = Vec::with_capacity(idx.len() * stride);
    for &i in idx {
        data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
    }
    let mut shape = t.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(shape, data)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub ratios: (f64, f64, f64),
    pub train_stride: usize,
    pub val_stride: usize,
    pub test_stride: usize,
}

impl SplitConfig {
    pub fn new(lookback: usize, horizon: usize) -> Self {
        Self {
            lookback,
            horizon,
            ratios: (0.6, 0.2, 0.2),
            train_stride: 1,
            val_stride: 1,
            test_stride: horizon,
        }
    }

    /// Row ranges of the three chronological segments.
    pub fn segments(&self, n_steps: usize) -> [(usize, usize); 3] {
        let total = self.ratios.0 + self.ratios.1 + self.ratios.2;
        let n_train = (n_steps as f64 * self.ratios.0 / total).floor() as usize;
        let n_val = (n_steps as f64 * self.ratios.1 / total).floor() as usize;
        [(0, n_train), (n_train, n_train + n_val), (n_train + n_val, n_steps)]
    }

    /// Windows in a segment of `len` rows at `stride`.
    pub fn window_count(&self, len: usize, stride: usize) -> usize {
        let span = self.lookback + self.horizon;
        if len < span {
            0
        } else {
            (len - span) / stride + 1
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits {
    pub train: WindowBatch,
    pub val: WindowBatch,
    pub test: WindowBatch,
    pub normalizer: Normalizer,
    pub segments: [(usize, usize); 3],
}

/// Chronological split with train-fitted normalisation; windows never cross
/// segment boundaries.
pub fn split_windows(ds: &SeriesDataset, cfg: &SplitConfig) -> Result<Splits> {
    if cfg.lookback == 0 || cfg.horizon == 0 || cfg.train_stride == 0 || cfg.val_stride == 0 || cfg.test_stride == 0 {
        return Err(DsprError::Config(
            "lookback, horizon and strides must be positive".into(),
        ));
    }
    let segments = cfg.segments(ds.n_steps());
    let strides = [cfg.train_stride, cfg.val_stride, cfg.test_stride];
    for (i, &(a, b)) in segments.iter().enumerate() {
        if cfg.window_count(b - a, strides[i]) == 0 {
            return Err(DsprError::Config(format!(
                "series of {} steps too short: segment {i} has {} rows, needs {}",
                ds.n_steps(),
                b - a,
                cfg.lookback + cfg.horizon
            )));
        }
    }
    let normalizer = Normalizer::fit(&ds.values, segments[0].1);
    let mut out = segments
        .iter()
        .zip(strides)
        .map(|(&(a, b), stride)| build_windows(ds, cfg, &normalizer, a, b, stride));
    Ok(Splits {
        train: out.next().unwrap()?,
        val: out.next().unwrap()?,
        test: out.next().unwrap()?,
        normalizer,
        segments,
    })
}

fn build_windows(
    ds: &SeriesDataset,
    cfg: &SplitConfig,
    norm: &Normalizer,
    from: usize,
    to: usize,
    stride: usize,
) -> Result<WindowBatch> {
    let (l, h, n) = (cfg.lookback, cfg.horizon, ds.n_vars());
    let y_idx = ds.target();
    let count = cfg.window_count(to - from, stride);
    let raw = ds.values.data();
    let mut x = Vec::with_capacity(count * l * n);
    let mut feats = Vec::with_capacity(count * (l + h) * N_TIME_FEATS);
    let mut y = Vec::with_capacity(count * h);
    let mut sample_std = Vec::with_capacity(count);
    let mut start = Vec::with_capacity(count);
    let mut f_cons = ds.conservation.as_ref().map(|_| Vec::with_capacity(count * h));
    for w in 0..count {
        let s = from + w * stride;
        start.push(s);
        for t in s..s + l {
            for j in 0..n {
                x.push(norm.apply(j, raw[t * n + j]));
            }
        }
        for t in s..s + l + h {
            feats.extend_from_slice(&time_features(t, ds.period_s));
        }
        let span: Vec<f64> = (s..s + l + h).map(|t| norm.apply(y_idx, raw[t * n + y_idx])).collect();
        y.extend_from_slice(&span[l..]);
        let mean = span.iter().sum::<f64>() / span.len() as f64;
        sample_std.push((span.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / span.len() as f64).sqrt());
        if let (Some(fc), Some(law)) = (f_cons.as_mut(), ds.conservation.as_ref()) {
            for t in s + l..s + l + h {
                let v = law
                    .at(&ds.values, t)
                    .ok_or_else(|| DsprError::Contract("conservation delay reaches before the series start".into()))?;
                fc.push(norm.apply(law.target, v));
            }
        }
    }
    let origin = |s: usize| s + l - 1;
    Ok(WindowBatch {
        x: Tensor::new(vec![count, l, n], x)?,
        time_feats: Tensor::new(vec![count, l + h, N_TIME_FEATS], feats)?,
        y: Tensor::new(vec![count, h], y)?,
        sample_std,
        true_tau: ds
            .delay
            .as_ref()
            .map(|d| start.iter().map(|&s| d.tau[origin(s)]).collect()),
        regime: ds
            .delay
            .as_ref()
            .map(|d| start.iter().map(|&s| d.regime[origin(s)]).collect()),
        start,
        f_cons: f_cons.map(|v| Tensor::new(vec![count, h], v)).transpose()?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn xcorr_peak(a: &[f64], b: &[f64], idx: &[usize], max_lag: usize) -> usize {
        (0..=max_lag)
            .map(|lag| {
                let pairs: Vec<(f64, f64)> = idx.iter().filter(|&&t| t >= lag).map(|&t| (a[t - lag], b[t])).collect();
                let n = pairs.len() as f64;
                let ma = pairs.iter().map(|p| p.0).sum::<f64>() / n;
                let mb = pairs.iter().map(|p| p.1).sum::<f64>() / n;
                let cov: f64 = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum();
                let va: f64 = pairs.iter().map(|p| (p.0 - ma).powi(2)).sum();
                let vb: f64 = pairs.iter().map(|p| (p.1 - mb).powi(2)).sum();
                (lag, cov / (va * vb).sqrt())
            })
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap()
            .0
    }

    #[test]
    fn single_regime_cross_correlation_peaks_at_delay() {
        let cfg = TransportDelayConfig {
            n_steps: 4000,
            lag_regimes: vec![(1.0, 4)],
            noise_std: 0.0,
            state_gain: 0.0,
            ..TransportDelayConfig::default()
        };
        let ds = gen_transport_delay(&cfg).unwrap();
        let idx: Vec<usize> = (0..ds.n_steps()).collect();
        assert_eq!(xcorr_peak(&ds.column(0), &ds.column(5), &idx, 20), 4);
    }

    #[test]
    fn two_regimes_peak_at_their_own_delays() {
        let cfg = TransportDelayConfig {
            n_steps: 8000,
            noise_std: 0.0,
            ..TransportDelayConfig::default()
        };
        let ds = gen_transport_delay(&cfg).unwrap();
        let truth = ds.delay.as_ref().unwrap();
        for (r, expect) in [(0usize, 4usize), (1, 12)] {
            let idx: Vec<usize> = (20..ds.n_steps()).filter(|&t| truth.regime[t] == r).collect();
            assert_eq!(xcorr_peak(&ds.column(0), &ds.column(5), &idx, 20), expect);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let cfg = TransportDelayConfig {
            n_steps: 500,
            seed: 9,
            ..TransportDelayConfig::default()
        };
        assert_eq!(gen_transport_delay(&cfg).unwrap(), gen_transport_delay(&cfg).unwrap());
    }

    #[test]
    fn repeated_delays_are_rejected() {
        let cfg = TransportDelayConfig {
            lag_regimes: vec![(1.0, 4), (0.5, 4)],
            ..TransportDelayConfig::default()
        };
        assert!(matches!(gen_transport_delay(&cfg), Err(DsprError::Config(_))));
    }

    #[test]
    fn noiseless_conservation_matches_surrogate() {
        let ds = gen_conservation(&ConservationConfig {
            n_steps: 600,
            noise_std: 0.0,
            ..ConservationConfig::default()
        })
        .unwrap();
        let law = ds.conservation.clone().unwrap();
        for t in law.delay..ds.n_steps() {
            let y = ds.values.at(&[t, 3]);
            assert!((law.at(&ds.values, t).unwrap() - y).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_leak_conserves_running_totals() {
        let ds = gen_conservation(&ConservationConfig {
            n_steps: 400,
            noise_std: 0.0,
            leak: 0.0,
            ..ConservationConfig::default()
        })
        .unwrap();
        let d = 6;
        let inflow: f64 = (0..ds.n_steps() - d)
            .map(|t| ds.values.at(&[t, 0]) + ds.values.at(&[t, 1]))
            .sum();
        let outflow: f64 = (d..ds.n_steps()).map(|t| ds.values.at(&[t, 3])).sum();
        assert!((inflow - outflow).abs() < 1e-8 * inflow);
    }

    #[test]
    fn interpolation_fills_midpoint() {
        assert_eq!(fill_gaps(&[Some(1.0), None, Some(3.0)]), vec![1.0, 2.0, 3.0]);
        assert_eq!(fill_gaps(&[None, None, Some(3.0), None]), vec![3.0, 3.0, 3.0, 3.0]);
    }

    #[test]
    fn window_counts_follow_segment_lengths() {
        let ds = gen_autoregressive(100, 0.5, 1.0, 1).unwrap();
        let mut cfg = SplitConfig::new(8, 4);
        cfg.test_stride = 1;
        let s = split_windows(&ds, &cfg).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (49, 9, 9));
    }

    #[test]
    fn short_series_is_rejected() {
        let ds = gen_autoregressive(40, 0.5, 1.0, 1).unwrap();
        assert!(split_windows(&ds, &SplitConfig::new(8, 4)).is_err());
    }

    #[test]
    fn time_features_are_on_unit_circle() {
        for t in [0, 17, 1000] {
            let f = time_features(t, 10.0);
            assert!((f[0] * f[0] + f[1] * f[1] - 1.0).abs() < 1e-12);
            assert!((f[2] * f[2] + f[3] * f[3] - 1.0).abs() < 1e-12);
        }
    }
}
