//! Dual-stream composition: trend forecast plus a gated physics-aware residual.
//!
//! The residual is target-centric. Node features are propagated once through
//! the per-step dynamic graph; the target's propagated history is attended
//! inside its learned window, the target's neighbourhood at the last step
//! goes through the dynamic GCN, and the static branch aggregates the last
//! step through the prior-fused adjacency. The static and dynamic summaries of
//! the target node are concatenated and mapped to the horizon.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DsprError, Result};
use crate::graph_dynamic::{dynamic_adjacency, DynamicBranch, DynamicConfig};
use crate::graph_static::{PriorGraph, StaticBranch};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var};
use crate::trend::{TrendConfig, TrendStream};

/// Model and baseline variants compared by the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    NoPrior,
    ShuffledPrior,
    NoAdaptiveWindow,
    TrendOnly,
    Pgnn,
    Arx,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoPrior,
        Variant::ShuffledPrior,
        Variant::NoAdaptiveWindow,
        Variant::TrendOnly,
        Variant::Pgnn,
        Variant::Arx,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoPrior => "no_prior",
            Variant::ShuffledPrior => "shuffled_prior",
            Variant::NoAdaptiveWindow => "no_adaptive_window",
            Variant::TrendOnly => "trend_only",
            Variant::Pgnn => "pgnn",
            Variant::Arx => "arx",
        }
    }

    /// Whether the residual stream is built at all.
    pub fn has_residual(self) -> bool {
        matches!(
            self,
            Variant::Full | Variant::NoPrior | Variant::ShuffledPrior | Variant::NoAdaptiveWindow
        )
    }

    pub fn uses_prior(self) -> bool {
        self.has_residual() && self != Variant::NoPrior
    }

    pub fn adaptive_window(self) -> bool {
        self.has_residual() && self != Variant::NoAdaptiveWindow
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = DsprError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| DsprError::Config(format!("unknown variant '{s}'")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_vars: usize,
    pub target: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub d_model: usize,
    pub heads: usize,
    pub tau_max: f64,
    pub positional: bool,
    pub d_node: usize,
    pub trend_d_model: usize,
    pub trend_depth: usize,
    pub trend_scales: usize,
    pub ma_kernel: usize,
    pub n_time_feats: usize,
    /// Weight of the prior-consistency penalty.
    pub gamma: f64,
    /// Weight of the off-prior dynamic-mass penalty.
    pub lambda_sparse: f64,
    pub beta_init: f64,
    pub variant: Variant,
}

impl ModelConfig {
    pub fn new(n_vars: usize, target: usize, lookback: usize, horizon: usize) -> Self {
        Self {
            n_vars,
            target,
            lookback,
            horizon,
            d_model: 64,
            heads: 4,
            tau_max: 20.0,
            positional: false,
            d_node: 10,
            trend_d_model: 64,
            trend_depth: 4,
            trend_scales: 3,
            ma_kernel: 25,
            n_time_feats: 4,
            gamma: 1e-2,
            lambda_sparse: 1e-4,
            beta_init: -8.0,
            variant: Variant::Full,
        }
    }

    pub fn trend_config(&self) -> TrendConfig {
        TrendConfig {
            d_model: self.trend_d_model,
            depth: self.trend_depth,
            n_scales: self.trend_scales,
            ma_kernel: self.ma_kernel,
            n_time_feats: self.n_time_feats,
            ..TrendConfig::new(self.lookback, self.horizon, self.n_vars, self.target)
        }
    }

    pub fn dynamic_config(&self) -> DynamicConfig {
        DynamicConfig {
            n_vars: self.n_vars,
            lookback: self.lookback,
            d_model: self.d_model,
            heads: self.heads,
            tau_max: self.tau_max,
            positional: self.positional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.target >= self.n_vars {
            return Err(DsprError::Config(format!(
                "target index {} out of range for {} variables",
                self.target, self.n_vars
            )));
        }
        if self.variant == Variant::Arx {
            return Err(DsprError::Config("arx is not a neural variant".into()));
        }
        if self.gamma < 0.0 || self.lambda_sparse < 0.0 {
            return Err(DsprError::Config("loss weights must be nonnegative".into()));
        }
        self.trend_config().validate()?;
        if self.variant.has_residual() {
            self.dynamic_config().validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Residual {
    static_branch: StaticBranch,
    dynamic: DynamicBranch,
    w_fuse: ParamId,
    b_fuse: ParamId,
    beta: ParamId,
}

/// Parameters and fixed structure of one model instance.
#[derive(Clone, Debug)]
pub struct DsprModel {
    cfg: ModelConfig,
    prior: PriorGraph,
    store: ParamStore,
    trend: TrendStream,
    residual: Option<Residual>,
}

/// Tape handles produced by [`DsprModel::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `[B, H]`
    pub y_hat: Var,
    /// `[B, H]`
    pub y_base: Var,
    /// `[B, H]`, absent for trend-only models.
    pub delta_y: Option<Var>,
    /// `[1]`
    pub gate: Option<Var>,
    /// `[C, C]`, receiver-row.
    pub a_static: Option<Var>,
    /// `[B*L, C, C]`, receiver-row.
    pub a_dynamic: Option<Var>,
    /// `[B*L*C]`
    pub taus: Option<Var>,
}

/// Detached forward artifacts for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// `[B, H]`
    pub y_hat: Tensor,
    pub y_base: Tensor,
    pub delta_y: Tensor,
    pub gate: f64,
    pub a_static: Option<Tensor>,
    /// Mean over batch and time, `[C, C]`.
    pub a_dynamic_mean: Option<Tensor>,
    /// Learned receptive fields `[B, L, C]`.
    pub taus: Option<Tensor>,
}

impl DsprModel {
    /// `prior` is the graph the model is built on: already shuffled for the
    /// shuffled-prior variant, ignored by the variants without a prior.
    pub fn new(cfg: ModelConfig, prior: PriorGraph, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        prior.validate()?;
        if prior.n_vars() != cfg.n_vars || prior.target() != cfg.target {
            return Err(DsprError::Config(format!(
                "prior has {} variables with target {}, model expects {} with target {}",
                prior.n_vars(),
                prior.target(),
                cfg.n_vars,
                cfg.target
            )));
        }
        let mut store = ParamStore::new();
        let trend = TrendStream::new(cfg.trend_config(), &mut store, rng)?;
        let residual = if cfg.variant.has_residual() {
            let d = cfg.d_model;
            let static_branch = StaticBranch::new(&mut store, cfg.n_vars, d, cfg.d_node, rng)?;
            let dynamic = DynamicBranch::new(cfg.dynamic_config(), &mut store, rng)?;
            let w_fuse = store.add_uniform("fuse.w", &[d, cfg.horizon], d, rng);
            let b_fuse = store.add_zeros("fuse.b", &[cfg.horizon]);
            let beta = store.add("gate.beta", Tensor::full(&[1], cfg.beta_init));
            Some(Residual {
                static_branch,
                dynamic,
                w_fuse,
                b_fuse,
                beta,
            })
        } else {
            None
        };
        Ok(Self {
            cfg,
            prior,
            store,
            trend,
            residual,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn prior(&self) -> &PriorGraph {
        &self.prior
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn trend(&self) -> &TrendStream {
        &self.trend
    }

    /// Current gate value `sigmoid(beta)`; 0 for trend-only models.
    pub fn gate(&self) -> f64 {
        self.residual
            .as_ref()
            .map_or(0.0, |r| sigmoid(self.store.get(r.beta).data()[0]))
    }

    fn check_inputs(&self, x: &Tensor, time_feats: &Tensor) -> Result<usize> {
        let c = &self.cfg;
        let b = x.shape().first().copied().unwrap_or(0);
        if b == 0 || x.shape() != [b, c.lookback, c.n_vars] {
            return Err(DsprError::Shape {
                op: "forward",
                lhs: vec![b, c.lookback, c.n_vars],
                rhs: x.shape().to_vec(),
            });
        }
        if time_feats.shape() != [b, c.lookback + c.horizon, c.n_time_feats] {
            return Err(DsprError::Shape {
                op: "forward",
                lhs: vec![b, c.lookback + c.horizon, c.n_time_feats],
                rhs: time_feats.shape().to_vec(),
            });
        }
        Ok(b)
    }

    /// Records the forward pass for `x: [B, L, C]`, `time_feats: [B, L+H, F]`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: &Tensor, time_feats: &Tensor) -> Result<ForwardVars> {
        let b = self.check_inputs(x, time_feats)?;
        let y_base = self.trend.forward(tape, p, x, time_feats)?;
        let Some(r) = &self.residual else {
            return Ok(ForwardVars {
                y_hat: y_base,
                y_base,
                delta_y: None,
                gate: None,
                a_static: None,
                a_dynamic: None,
                taus: None,
            });
        };
        let (l, c, d, y) = (self.cfg.lookback, self.cfg.n_vars, self.cfg.d_model, self.cfg.target);

        // node features and one step of dynamic propagation, [B*L, C, D]
        let h = r.dynamic.embed(tape, p, x)?;
        let a_dyn = dynamic_adjacency(tape, h)?;
        let ah = tape.bmm(a_dyn, h)?;
        let g = tape.add(h, ah)?;

        let g_flat = tape.reshape(g, &[b * l * c, d])?;
        let taus = r.dynamic.adaptive_tau(tape, p, g_flat)?;

        let last_target: Vec<usize> = (0..b).map(|bi| (bi * l + l - 1) * c + y).collect();
        let window = if self.cfg.variant.adaptive_window() {
            let tau_y = tape.index_rows(taus, &last_target)?;
            let lags: Vec<f64> = (0..l).map(|k| (l - 1 - k) as f64).collect();
            tape.window_weights(tau_y, &lags)?
        } else {
            tape.constant(Tensor::full(&[b, l], 1.0))
        };
        let target_hist: Vec<usize> = (0..b)
            .flat_map(|bi| (0..l).map(move |k| (bi * l + k) * c + y))
            .collect();
        let seq = tape.index_rows(g_flat, &target_hist)?;
        let seq = tape.reshape(seq, &[b, l, d])?;
        let h_tmp = r.dynamic.attend(tape, p, seq, l - 1, window)?;

        let ah_flat = tape.reshape(ah, &[b * l * c, d])?;
        let ah_y = tape.index_rows(ah_flat, &last_target)?;
        let h_sp = r.dynamic.project_gcn(tape, p, ah_y)?;
        let h_flat = tape.reshape(h, &[b * l * c, d])?;
        let h_y = tape.index_rows(h_flat, &last_target)?;
        let z_dyn = r.dynamic.gated_fuse(tape, p, h_y, h_sp, h_tmp)?;

        let mask = if self.cfg.variant.uses_prior() {
            Some(tape.constant(self.prior.aggregation_mask()))
        } else {
            None
        };
        let a_static = r.static_branch.static_adjacency(tape, p, mask)?;
        let last_rows: Vec<usize> = (0..b).map(|bi| bi * l + l - 1).collect();
        let h_last = tape.index_rows(h, &last_rows)?;
        let a_row = tape.index_rows(a_static, &[y])?;
        let z_static = r.static_branch.static_context(tape, p, h_last, a_row)?;
        let z_static = tape.reshape(z_static, &[b, d / 2])?;

        let fused = tape.concat_last(z_static, z_dyn)?;
        let delta = tape.matmul(fused, p[r.w_fuse])?;
        let delta = tape.add_row(delta, p[r.b_fuse])?;
        let gate = tape.sigmoid(p[r.beta])?;
        let gated = tape.scale_by(delta, gate)?;
        let y_hat = tape.add(y_base, gated)?;
        Ok(ForwardVars {
            y_hat,
            y_base,
            delta_y: Some(delta),
            gate: Some(gate),
            a_static: Some(a_static),
            a_dynamic: Some(a_dyn),
            taus: Some(taus),
        })
    }

    /// Composite objective: MSE plus, when a prior is in use, the weighted
    /// prior-consistency and off-prior sparsity penalties.
    pub fn loss(&self, tape: &mut Tape, out: &ForwardVars, y: &Tensor) -> Result<Var> {
        let target = tape.constant(y.clone());
        let mse = tape.mse(out.y_hat, target)?;
        if !self.cfg.variant.uses_prior() {
            return Ok(mse);
        }
        let (Some(a_s), Some(a_d)) = (out.a_static, out.a_dynamic) else {
            return Ok(mse);
        };
        let m = self.prior.aggregation_mask();
        let off = Tensor::new(m.shape().to_vec(), m.data().iter().map(|v| 1.0 - v).collect())?;
        let m = tape.constant(m);
        let off = tape.constant(off);

        let diff = tape.sub(a_s, m)?;
        let diff = tape.mul(diff, m)?;
        let sq = tape.square(diff)?;
        let phys = tape.sum(sq)?;
        let phys = tape.scale(phys, self.cfg.gamma)?;

        let mean_d = tape.mean_axis0(a_d)?;
        let stray = tape.mul(mean_d, off)?;
        let stray = tape.abs(stray)?;
        let sparse = tape.sum(stray)?;
        let sparse = tape.scale(sparse, self.cfg.lambda_sparse)?;

        let total = tape.add(mse, phys)?;
        tape.add(total, sparse)
    }

    /// Inference on a batch with a private tape.
    pub fn predict(&self, x: &Tensor, time_feats: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let fv = self.forward(&mut tape, &p, x, time_feats)?;
        self.detach(&tape, &fv, x.shape()[0])
    }

    pub fn detach(&self, tape: &Tape, fv: &ForwardVars, batch: usize) -> Result<ForwardOutput> {
        let y_hat = tape.value(fv.y_hat).clone();
        let y_base = tape.value(fv.y_base).clone();
        let delta_y = match fv.delta_y {
            Some(v) => tape.value(v).clone(),
            None => Tensor::zeros(y_hat.shape()),
        };
        let gate = fv.gate.map_or(0.0, |v| tape.value(v).data()[0]);
        let a_dynamic_mean = match fv.a_dynamic {
            Some(v) => {
                let t = tape.value(v);
                let c = self.cfg.n_vars;
                let rows = t.shape()[0];
                let mut m = vec![0.0; c * c];
                for chunk in t.data().chunks(c * c) {
                    for (o, &a) in m.iter_mut().zip(chunk) {
                        *o += a;
                    }
                }
                m.iter_mut().for_each(|v| *v /= rows as f64);
                Some(Tensor::new(vec![c, c], m)?)
            }
            None => None,
        };
        let taus = match fv.taus {
            Some(v) => Some(
                tape.value(v)
                    .clone()
                    .reshaped(&[batch, self.cfg.lookback, self.cfg.n_vars])?,
            ),
            None => None,
        };
        Ok(ForwardOutput {
            y_hat,
            y_base,
            delta_y,
            gate,
            a_static: fv.a_static.map(|v| tape.value(v).clone()),
            a_dynamic_mean,
            taus,
        })
    }
}

/// Loss-penalty baseline objective: `MSE + lambda_phy * mean((y_hat - f_cons)^2)`.
///
/// `f_cons` is the conservation surrogate evaluated on the inputs, `[B, H]`.
pub fn pgnn_loss(tape: &mut Tape, y_hat: Var, y: &Tensor, f_cons: Option<&Tensor>, lambda_phy: f64) -> Result<Var> {
    let f_cons =
        f_cons.ok_or_else(|| DsprError::Config("dataset has no conservation surrogate; pgnn unavailable".into()))?;
    let target = tape.constant(y.clone());
    let mse = tape.mse(y_hat, target)?;
    let cons = tape.constant(f_cons.clone());
    let dev = tape.mse(y_hat, cons)?;
    let dev = tape.scale(dev, lambda_phy)?;
    tape.add(mse, dev)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
