//! Statistical trend stream: a compact multi-scale decomposition mixer.
//!
//! The target series is embedded together with calendar features, average-
//! pooled into `n_scales` resolutions and passed through `depth` mixing
//! blocks. Each block splits every scale into trend and seasonal parts with
//! an edge-padded moving average, mixes seasonal parts bottom-up (fine to
//! coarse) and trend parts top-down (coarse to fine) with two-layer MLPs over
//! the time axis, then applies a feature-wise feed-forward residual. A linear
//! head reads per-step summaries of every scale and emits the `H` forecasts.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DsprError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub n_vars: usize,
    pub target: usize,
    pub n_time_feats: usize,
    pub d_model: usize,
    pub depth: usize,
    pub downsample_ratio: usize,
    pub n_scales: usize,
    pub ma_kernel: usize,
}

impl TrendConfig {
    pub fn new(lookback: usize, horizon: usize, n_vars: usize, target: usize) -> Self {
        Self {
            lookback,
            horizon,
            n_vars,
            target,
            n_time_feats: 4,
            d_model: 64,
            depth: 4,
            downsample_ratio: 2,
            n_scales: 3,
            ma_kernel: 25,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(DsprError::Config("trend depth must be >= 1".into()));
        }
        if self.downsample_ratio < 2 {
            return Err(DsprError::Config("downsample_ratio must be >= 2".into()));
        }
        if self.ma_kernel.is_multiple_of(2) {
            return Err(DsprError::Config(format!(
                "ma_kernel must be odd, got {}",
                self.ma_kernel
            )));
        }
        if self.n_scales < 1 || self.scale_len(self.n_scales - 1) == 0 {
            return Err(DsprError::Config(format!(
                "lookback {} too short for {} scales at ratio {}",
                self.lookback, self.n_scales, self.downsample_ratio
            )));
        }
        if self.target >= self.n_vars || self.horizon == 0 {
            return Err(DsprError::Config("invalid target index or horizon".into()));
        }
        Ok(())
    }

    pub fn scale_len(&self, m: usize) -> usize {
        self.lookback / self.downsample_ratio.pow(m as u32)
    }

    fn total_scale_len(&self) -> usize {
        (0..self.n_scales).map(|m| self.scale_len(m)).sum()
    }
}

/// Edge-padded centred moving average over the rows of an `[L, N]` tensor.
///
/// Returns `(trend, seasonal)` with `seasonal = x - trend`.
pub fn moving_average_decompose(x: &Tensor, kernel: usize) -> Result<(Tensor, Tensor)> {
    if kernel.is_multiple_of(2) {
        return Err(DsprError::Contract(format!(
            "moving-average kernel must be odd, got {kernel}"
        )));
    }
    if x.shape().len() != 2 {
        return Err(DsprError::Contract("decomposition expects an [L, N] tensor".into()));
    }
    let (l, n) = (x.shape()[0], x.shape()[1]);
    let half = (kernel / 2) as isize;
    let mut trend = vec![0.0; l * n];
    for i in 0..l {
        for j in -half..=half {
            let src = (i as isize + j).clamp(0, l as isize - 1) as usize;
            for c in 0..n {
                trend[i * n + c] += x.data()[src * n + c];
            }
        }
        for c in 0..n {
            trend[i * n + c] /= kernel as f64;
        }
    }
    let seasonal = x.data().iter().zip(&trend).map(|(a, b)| a - b).collect();
    Ok((Tensor::new(vec![l, n], trend)?, Tensor::new(vec![l, n], seasonal)?))
}

/// `[n, n]` matrix `Mt` with `x_row * Mt` = edge-padded moving average of `x_row`.
pub fn moving_average_matrix(n: usize, kernel: usize) -> Tensor {
    let half = (kernel / 2) as isize;
    let mut m = Tensor::zeros(&[n, n]);
    let w = 1.0 / kernel as f64;
    for i in 0..n {
        for j in -half..=half {
            let src = (i as isize + j).clamp(0, n as isize - 1) as usize;
            // output i reads input src: column i of Mt, row src
            m.data_mut()[src * n + i] += w;
        }
    }
    m
}

/// `[L, L_m]` pooling matrix averaging consecutive blocks of `block` steps,
/// aligned to the most recent step.
fn pooling_matrix(l: usize, block: usize) -> Tensor {
    let lm = l / block;
    let offset = l - lm * block;
    let mut m = Tensor::zeros(&[l, lm]);
    for j in 0..lm {
        for i in 0..block {
            m.data_mut()[(offset + j * block + i) * lm + j] = 1.0 / block as f64;
        }
    }
    m
}

#[derive(Clone, Debug)]
struct TimeMlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl TimeMlp {
    fn new(store: &mut ParamStore, prefix: &str, from: usize, to: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            w1: store.add_uniform(format!("{prefix}.w1"), &[from, to], from, rng),
            b1: store.add_uniform(format!("{prefix}.b1"), &[to], from, rng),
            w2: store.add_uniform(format!("{prefix}.w2"), &[to, to], to, rng),
            b2: store.add_uniform(format!("{prefix}.b2"), &[to], to, rng),
        }
    }

    fn apply(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let h = tape.matmul(x, p[self.w1])?;
        let h = tape.add_row(h, p[self.b1])?;
        let h = tape.tanh(h)?;
        let h = tape.matmul(h, p[self.w2])?;
        tape.add_row(h, p[self.b2])
    }
}

#[derive(Clone, Debug)]
struct MixBlock {
    season_down: Vec<TimeMlp>,
    trend_up: Vec<TimeMlp>,
    ffn: TimeMlp,
}

/// Parameter handles and constant operators of the trend stream.
#[derive(Clone, Debug)]
pub struct TrendStream {
    cfg: TrendConfig,
    w_in: ParamId,
    b_in: ParamId,
    blocks: Vec<MixBlock>,
    w_proj: ParamId,
    w_head: ParamId,
    b_head: ParamId,
    pools: Vec<Tensor>,
    ma: Vec<Tensor>,
}

impl TrendStream {
    pub fn new(cfg: TrendConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let fin = 1 + cfg.n_time_feats;
        let w_in = store.add_uniform("trend.embed.w", &[fin, d], fin, rng);
        let b_in = store.add_uniform("trend.embed.b", &[d], fin, rng);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let mut season_down = Vec::new();
            let mut trend_up = Vec::new();
            for m in 0..cfg.n_scales - 1 {
                let (hi, lo) = (cfg.scale_len(m), cfg.scale_len(m + 1));
                season_down.push(TimeMlp::new(store, &format!("trend.block{b}.season{m}"), hi, lo, rng));
                trend_up.push(TimeMlp::new(store, &format!("trend.block{b}.trend{m}"), lo, hi, rng));
            }
            let ffn = TimeMlp::new(store, &format!("trend.block{b}.ffn"), d, d, rng);
            blocks.push(MixBlock {
                season_down,
                trend_up,
                ffn,
            });
        }
        let w_proj = store.add_uniform("trend.proj.w", &[d, 1], d, rng);
        let w_head = store.add_zeros("trend.head.w", &[cfg.total_scale_len(), cfg.horizon]);
        let b_head = store.add_zeros("trend.head.b", &[cfg.horizon]);
        let pools = (0..cfg.n_scales)
            .map(|m| pooling_matrix(cfg.lookback, cfg.downsample_ratio.pow(m as u32)))
            .collect();
        let ma = (0..cfg.n_scales)
            .map(|m| moving_average_matrix(cfg.scale_len(m), cfg.ma_kernel))
            .collect();
        Ok(Self {
            cfg,
            w_in,
            b_in,
            blocks,
            w_proj,
            w_head,
            b_head,
            pools,
            ma,
        })
    }

    pub fn config(&self) -> &TrendConfig {
        &self.cfg
    }

    /// Base forecast for a batch.
    ///
    /// `x: [B, L, N]`, `time_feats: [B, L + H, F]` (values only; inputs are
    /// never differentiated). Returns a `[B, H]` tape node.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: &Tensor, time_feats: &Tensor) -> Result<Var> {
        let cfg = &self.cfg;
        let (l, n, f, h) = (cfg.lookback, cfg.n_vars, cfg.n_time_feats, cfg.horizon);
        let b = x.shape()[0];
        if x.shape() != [b, l, n] {
            return Err(DsprError::Shape {
                op: "trend_forecast",
                lhs: vec![b, l, n],
                rhs: x.shape().to_vec(),
            });
        }
        if time_feats.shape() != [b, l + h, f] {
            return Err(DsprError::Shape {
                op: "trend_forecast",
                lhs: vec![b, l + h, f],
                rhs: time_feats.shape().to_vec(),
            });
        }
        let d = cfg.d_model;
        let mut tokens = Vec::with_capacity(b * l * (1 + f));
        for bi in 0..b {
            for t in 0..l {
                tokens.push(x.data()[(bi * l + t) * n + cfg.target]);
                let off = (bi * (l + h) + t) * f;
                tokens.extend_from_slice(&time_feats.data()[off..off + f]);
            }
        }
        let tokens = tape.constant(Tensor::new(vec![b * l, 1 + f], tokens)?);
        let emb = tape.matmul(tokens, p[self.w_in])?;
        let emb = tape.add_row(emb, p[self.b_in])?;
        let emb = tape.reshape(emb, &[b, l, d])?;
        let emb = tape.transpose_last2(emb)?;
        let emb = tape.reshape(emb, &[b * d, l])?;

        // time-last layout: scale m is [B*d, L_m]
        let mut scales = Vec::with_capacity(cfg.n_scales);
        for pool in &self.pools {
            let pm = tape.constant(pool.clone());
            scales.push(tape.matmul(emb, pm)?);
        }

        for block in &self.blocks {
            let mut seasonal = Vec::with_capacity(cfg.n_scales);
            let mut trend = Vec::with_capacity(cfg.n_scales);
            for (m, &xm) in scales.iter().enumerate() {
                let ma = tape.constant(self.ma[m].clone());
                let t = tape.matmul(xm, ma)?;
                seasonal.push(tape.sub(xm, t)?);
                trend.push(t);
            }
            for m in 0..cfg.n_scales - 1 {
                let mixed = block.season_down[m].apply(tape, p, seasonal[m])?;
                seasonal[m + 1] = tape.add(seasonal[m + 1], mixed)?;
            }
            for m in (0..cfg.n_scales - 1).rev() {
                let mixed = block.trend_up[m].apply(tape, p, trend[m + 1])?;
                trend[m] = tape.add(trend[m], mixed)?;
            }
            for m in 0..cfg.n_scales {
                let lm = cfg.scale_len(m);
                let y = tape.add(seasonal[m], trend[m])?;
                let y = to_feature_last(tape, y, b, d, lm)?;
                let y = block.ffn.apply(tape, p, y)?;
                let y = to_time_last(tape, y, b, d, lm)?;
                scales[m] = tape.add(scales[m], y)?;
            }
        }

        let mut summary: Option<Var> = None;
        for (m, &xm) in scales.iter().enumerate() {
            let lm = cfg.scale_len(m);
            let y = to_feature_last(tape, xm, b, d, lm)?;
            let y = tape.matmul(y, p[self.w_proj])?;
            let y = tape.reshape(y, &[b, lm])?;
            summary = Some(match summary {
                None => y,
                Some(s) => tape.concat_last(s, y)?,
            });
        }
        let out = tape.matmul(summary.expect("at least one scale"), p[self.w_head])?;
        tape.add_row(out, p[self.b_head])
    }
}

/// `[B*d, L_m] -> [B*L_m, d]`
fn to_feature_last(tape: &mut Tape, x: Var, b: usize, d: usize, lm: usize) -> Result<Var> {
    let y = tape.reshape(x, &[b, d, lm])?;
    let y = tape.transpose_last2(y)?;
    tape.reshape(y, &[b * lm, d])
}

/// `[B*L_m, d] -> [B*d, L_m]`
fn to_time_last(tape: &mut Tape, x: Var, b: usize, d: usize, lm: usize) -> Result<Var> {
    let y = tape.reshape(x, &[b, lm, d])?;
    let y = tape.transpose_last2(y)?;
    tape.reshape(y, &[b * d, lm])
}

/// Single-window convenience: `x: [L, N]`, `time_feats: [L+H, F]` -> `[H, 1]`.
pub fn trend_forecast(stream: &TrendStream, store: &ParamStore, x: &Tensor, time_feats: &Tensor) -> Result<Tensor> {
    let cfg = stream.config();
    let xb = x
        .clone()
        .reshaped(&[1, cfg.lookback, cfg.n_vars])
        .map_err(|_| DsprError::Shape {
            op: "trend_forecast",
            lhs: vec![cfg.lookback, cfg.n_vars],
            rhs: x.shape().to_vec(),
        })?;
    let fb = time_feats
        .clone()
        .reshaped(&[1, cfg.lookback + cfg.horizon, cfg.n_time_feats])
        .map_err(|_| DsprError::Shape {
            op: "trend_forecast",
            lhs: vec![cfg.lookback + cfg.horizon, cfg.n_time_feats],
            rhs: time_feats.shape().to_vec(),
        })?;
    let mut tape = Tape::new();
    let p = store.bind(&mut tape);
    let y = stream.forward(&mut tape, &p, &xb, &fb)?;
    tape.value(y).clone().reshaped(&[cfg.horizon, 1])
}
