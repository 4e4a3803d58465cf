//! Dynamic branch: per-step similarity graphs, learned receptive fields and
//! windowed graph-temporal attention.
//!
//! Node features `H: [T, C, D]` come from [`DynamicBranch::embed`]. For every
//! step the dynamic adjacency `A_t = softmax(H_t H_t^T / sqrt(D) + M_diag)`
//! propagates features once, `G_t = H_t + A_t H_t`. The receptive field
//! `tau_{t,c}` is read from `G_{t,c}`, and channel `c` attends over its own
//! propagated history `G_{.,c}` inside the window `[t - tau, t]`.

use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DsprError, Result};
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::{Tape, Tensor, Var, MASK_NEG};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicConfig {
    pub n_vars: usize,
    pub lookback: usize,
    pub d_model: usize,
    pub heads: usize,
    pub tau_max: f64,
    /// Adds a learned per-position offset to every node feature.
    pub positional: bool,
}

impl DynamicConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.d_model.is_multiple_of(2) {
            return Err(DsprError::Config(format!("d_model must be even, got {}", self.d_model)));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(DsprError::Config(format!(
                "{} heads do not divide d_model {}",
                self.heads, self.d_model
            )));
        }
        if self.tau_max < 1.0 {
            return Err(DsprError::Config("tau_max must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DynamicBranch {
    pub cfg: DynamicConfig,
    pub w_emb: ParamId,
    pub node_emb: ParamId,
    pub pos_emb: Option<ParamId>,
    pub w_tau: ParamId,
    pub w_d: ParamId,
    pub b_d: ParamId,
    pub w_g: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
}

impl DynamicBranch {
    pub fn new(cfg: DynamicConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let (c, d, l) = (cfg.n_vars, cfg.d_model, cfg.lookback);
        Ok(Self {
            w_emb: store.add_uniform("dynamic.w_emb", &[c, d], 1, rng),
            node_emb: store.add_uniform("dynamic.node_emb", &[c, d], d, rng),
            pos_emb: cfg
                .positional
                .then(|| store.add_uniform("dynamic.pos_emb", &[l, d], d, rng)),
            w_tau: store.add_uniform("dynamic.w_tau", &[d, 1], d, rng),
            w_d: store.add_uniform("dynamic.w_d", &[d, d / 2], d, rng),
            b_d: store.add_uniform("dynamic.b_d", &[d / 2], d, rng),
            w_g: store.add_uniform("dynamic.w_g", &[d, d / 2], d, rng),
            w_q: store.add_uniform("dynamic.attn.w_q", &[d, d], d, rng),
            w_k: store.add_uniform("dynamic.attn.w_k", &[d, d], d, rng),
            w_v: store.add_uniform("dynamic.attn.w_v", &[d, d], d, rng),
            w_o: store.add_uniform("dynamic.attn.w_o", &[d, d / 2], d, rng),
            cfg,
        })
    }

    /// Per-node embedding of `x: [B, L, C]` into `[B*L, C, D]`.
    pub fn embed(&self, tape: &mut Tape, p: &Bound, x: &Tensor) -> Result<Var> {
        let (l, c) = (self.cfg.lookback, self.cfg.n_vars);
        let b = x.shape()[0];
        if x.shape() != [b, l, c] {
            return Err(DsprError::Shape {
                op: "embed",
                lhs: vec![b, l, c],
                rhs: x.shape().to_vec(),
            });
        }
        let xv = tape.constant(x.clone().reshaped(&[b * l, c])?);
        let pos = match self.pos_emb {
            Some(id) => p[id],
            None => tape.constant(Tensor::zeros(&[1, self.cfg.d_model])),
        };
        tape.node_embed(xv, p[self.w_emb], p[self.node_emb], pos)
    }

    /// `tau = 1 + (tau_max - 1) * sigmoid(feats W_tau)` for `feats: [R, D]`; returns `[R]`.
    pub fn adaptive_tau(&self, tape: &mut Tape, p: &Bound, feats: Var) -> Result<Var> {
        adaptive_tau(tape, feats, p[self.w_tau], self.cfg.tau_max)
    }

    /// `relu(A H W_d + b_d)` for `h: [G, C, D]`, `a: [G, C, C]`; returns `[G, C, D/2]`.
    pub fn dynamic_gcn(&self, tape: &mut Tape, p: &Bound, h: Var, a: Var) -> Result<Var> {
        let ah = tape.bmm(a, h)?;
        self.project_gcn(tape, p, ah)
    }

    /// GCN tail for already-aggregated features `ah: [..., D]`.
    pub fn project_gcn(&self, tape: &mut Tape, p: &Bound, ah: Var) -> Result<Var> {
        let shape = tape.shape(ah).to_vec();
        let d = self.cfg.d_model;
        let rows = shape.iter().product::<usize>() / d;
        let flat = tape.reshape(ah, &[rows, d])?;
        let z = tape.matmul(flat, p[self.w_d])?;
        let z = tape.add_row(z, p[self.b_d])?;
        let z = tape.relu(z)?;
        let mut out = shape;
        *out.last_mut().unwrap() = d / 2;
        tape.reshape(z, &out)
    }

    /// `g = sigmoid(h_t W_g)`, `Z = g * h_sp + (1 - g) * h_tmp`; all `[G, .]` 2-D.
    pub fn gated_fuse(&self, tape: &mut Tape, p: &Bound, h_t: Var, h_sp: Var, h_tmp: Var) -> Result<Var> {
        let g = tape.matmul(h_t, p[self.w_g])?;
        let g = tape.sigmoid(g)?;
        let diff = tape.sub(h_sp, h_tmp)?;
        let gd = tape.mul(g, diff)?;
        tape.add(h_tmp, gd)
    }

    /// Multi-head attention of the query at time `t` over a per-channel sequence.
    ///
    /// `seq: [G, T, D]` (one row per channel instance), `window: [G, T]` key
    /// weights. Returns the output projection `[G, D/2]`.
    pub fn attend(&self, tape: &mut Tape, p: &Bound, seq: Var, t: usize, window: Var) -> Result<Var> {
        let s = tape.shape(seq).to_vec();
        let (g, tt, d) = (s[0], s[1], s[2]);
        let flat = tape.reshape(seq, &[g * tt, d])?;
        let rows: Vec<usize> = (0..g).map(|gi| gi * tt + t).collect();
        let q_in = tape.index_rows(flat, &rows)?;
        let q = tape.matmul(q_in, p[self.w_q])?;
        let k = tape.matmul(flat, p[self.w_k])?;
        let k = tape.reshape(k, &[g, tt, d])?;
        let v = tape.matmul(flat, p[self.w_v])?;
        let v = tape.reshape(v, &[g, tt, d])?;
        let o = tape.weighted_attention(q, k, v, window, self.cfg.heads)?;
        tape.matmul(o, p[self.w_o])
    }

    /// Full masked temporal attention: every query time of every channel.
    ///
    /// `h: [T, C, D]` for one sample, `tau: [T, C]` receptive fields (values
    /// or tape nodes). Output `[T, C, D/2]`.
    pub fn masked_temporal_attention(&self, tape: &mut Tape, p: &Bound, h: Var, tau: Var) -> Result<Var> {
        let s = tape.shape(h).to_vec();
        let (tt, c, d) = (s[0], s[1], s[2]);
        // channel-major sequences [C, T, D]
        let hs = tape.reshape(h, &[tt, c * d])?;
        let hs = tape.transpose_last2(hs)?;
        let hs = tape.reshape(hs, &[c, d, tt])?;
        let seq = tape.transpose_last2(hs)?;
        let mut outs = Vec::with_capacity(tt);
        for t in 0..tt {
            let rows: Vec<usize> = (0..c).map(|ci| t * c + ci).collect();
            let tau_flat = tape.reshape(tau, &[tt * c])?;
            let tau_t = tape.index_rows(tau_flat, &rows)?;
            let lags: Vec<f64> = (0..tt).map(|k| t as f64 - k as f64).collect();
            let w = tape.window_weights(tau_t, &lags)?;
            outs.push(self.attend(tape, p, seq, t, w)?);
        }
        let mut acc = outs[0];
        for &o in &outs[1..] {
            acc = tape.concat_last(acc, o)?;
        }
        // acc: [C, T*(D/2)] in time-major blocks
        let acc = tape.reshape(acc, &[c, tt * (d / 2)])?;
        let acc = tape.transpose_last2(acc)?;
        let acc = tape.reshape(acc, &[tt, d / 2, c])?;
        let acc = tape.transpose_last2(acc)?;
        tape.reshape(acc, &[tt, c, d / 2])
    }
}

/// `softmax(h h^T / sqrt(D) + M_diag)` per group; `h: [G, C, D]` -> `[G, C, C]`.
pub fn dynamic_adjacency(tape: &mut Tape, h: Var) -> Result<Var> {
    let s = tape.shape(h).to_vec();
    if s.len() != 3 {
        return Err(DsprError::Shape {
            op: "dynamic_adjacency",
            lhs: vec![0, 0, 0],
            rhs: s,
        });
    }
    let (g, c, d) = (s[0], s[1], s[2]);
    let sim = tape.bmm_nt(h, h)?;
    let sim = tape.scale(sim, 1.0 / (d as f64).sqrt())?;
    let mut mask = Tensor::zeros(&[g, c, c]);
    for gi in 0..g {
        for i in 0..c {
            mask.data_mut()[(gi * c + i) * c + i] = MASK_NEG;
        }
    }
    let mask = tape.constant(mask);
    let logits = tape.add(sim, mask)?;
    tape.softmax_rows(logits)
}

/// `1 + (tau_max - 1) * sigmoid(feats W_tau)`; `feats: [R, D]` -> `[R]`.
pub fn adaptive_tau(tape: &mut Tape, feats: Var, w_tau: Var, tau_max: f64) -> Result<Var> {
    let r = tape.shape(feats)[0];
    let z = tape.matmul(feats, w_tau)?;
    let z = tape.sigmoid(z)?;
    let z = tape.scale(z, tau_max - 1.0)?;
    let z = tape.add_scalar(z, 1.0)?;
    tape.reshape(z, &[r])
}

/// Key weights of the adaptive window for every query, channel and key.
///
/// `weight(t, k, c) = clamp(tau[t,c] + 1 - (t - k), 0, 1)` for `k <= t`,
/// zero for `k > t`. For integer `tau` this is the indicator of
/// `max(0, t - tau) <= k <= t`; otherwise the oldest admitted key carries the
/// fractional part of `tau`.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowMask {
    t: usize,
    c: usize,
    weights: Vec<f64>,
}

impl WindowMask {
    pub fn from_tau(tau: &Tensor) -> Result<Self> {
        if tau.shape().len() != 2 {
            return Err(DsprError::Contract("tau must be [T, C]".into()));
        }
        let (t, c) = (tau.shape()[0], tau.shape()[1]);
        let mut weights = vec![0.0; t * t * c];
        for q in 0..t {
            for k in 0..=q {
                for ch in 0..c {
                    let lag = (q - k) as f64;
                    weights[(q * t + k) * c + ch] = (tau.data()[q * c + ch] + 1.0 - lag).clamp(0.0, 1.0);
                }
            }
        }
        Ok(Self { t, c, weights })
    }

    pub fn weight(&self, query: usize, key: usize, channel: usize) -> f64 {
        self.weights[(query * self.t + key) * self.c + channel]
    }

    pub fn allowed(&self, query: usize, key: usize, channel: usize) -> bool {
        self.weight(query, key, channel) > 0.0
    }

    /// Additive log-domain mask with the [`MASK_NEG`] sentinel, `[T, T, C]`.
    pub fn additive(&self) -> Tensor {
        let data = self
            .weights
            .iter()
            .map(|&w| if w > 0.0 { w.ln() } else { MASK_NEG })
            .collect();
        Tensor::new(vec![self.t, self.t, self.c], data).expect("shape")
    }

    /// Allowed key range `[lo, hi]` for a query and channel.
    pub fn range(&self, query: usize, channel: usize) -> (usize, usize) {
        let lo = (0..=query).find(|&k| self.allowed(query, k, channel)).unwrap_or(query);
        (lo, query)
    }
}

/// Learned receptive fields for a set of windows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DelayProfile {
    pub rows: Vec<DelayRow>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayRow {
    pub sample_id: usize,
    pub t: usize,
    pub channel: usize,
    pub tau: f64,
    pub regime: String,
}

impl DelayProfile {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<DelayRow>, _>>()?;
        Ok(Self { rows })
    }

    /// Mean tau per regime label for one channel at one time index.
    pub fn mean_by_regime(&self, channel: usize, t: usize) -> Vec<(String, f64, usize)> {
        let mut acc: Vec<(String, f64, usize)> = Vec::new();
        for r in self.rows.iter().filter(|r| r.channel == channel && r.t == t) {
            match acc.iter_mut().find(|(k, _, _)| *k == r.regime) {
                Some(e) => {
                    e.1 += r.tau;
                    e.2 += 1;
                }
                None => acc.push((r.regime.clone(), r.tau, 1)),
            }
        }
        for e in &mut acc {
            e.1 /= e.2 as f64;
        }
        acc.sort_by(|a, b| a.0.cmp(&b.0));
        acc
    }
}

/// Writes a square matrix with header row and row labels.
pub fn write_matrix_csv(path: &Path, names: &[String], m: &Tensor) -> Result<()> {
    let n = names.len();
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "row,{}", names.join(","))?;
    for (name, row) in names.iter().zip(m.data().chunks(n)) {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(f, "{name},{}", vals.join(","))?;
    }
    Ok(())
}

pub fn read_matrix_csv(path: &Path) -> Result<(Vec<String>, Tensor)> {
    let mut r = csv::Reader::from_path(path)?;
    let names: Vec<String> = r.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut data = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        for (j, cell) in rec.iter().skip(1).enumerate() {
            data.push(cell.parse::<f64>().map_err(|e| DsprError::Parse {
                row: i + 1,
                col: j + 1,
                msg: e.to_string(),
            })?);
        }
    }
    let n = names.len();
    Ok((names, Tensor::new(vec![n, n], data)?))
}
