//! Numerical differentiation used to audit the tape.
//!
//! The stencils only see a scalar function of a flat vector. The audits
//! compare tape gradients of every differentiable op, and of the whole
//! model loss, against central differences on random inputs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::N_TIME_FEATS;
use crate::error::Result;
use crate::graph_static::{PriorGraph, Role, Variable};
use crate::model::{DsprModel, ModelConfig, Variant};
use crate::tensor::{Tape, Tensor, Var};

/// Probe step for the audits.
pub const STEP: f64 = 1e-6;
/// Gradients smaller than this are compared absolutely.
pub const FLOOR: f64 = 1e-6;

/// Central differences, `(f(x+h) - f(x-h)) / 2h` per coordinate.
pub fn central_difference(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Five-point stencil, fourth-order accurate.
pub fn five_point(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            let mut at = |d: f64| {
                probe[i] = orig + d;
                f(&probe)
            };
            let (p2, p1, m1, m2) = (at(2.0 * h), at(h), at(-h), at(-2.0 * h));
            probe[i] = orig;
            (-p2 + 8.0 * p1 - 8.0 * m1 + m2) / (12.0 * h)
        })
        .collect()
}

/// Largest `|a - n| / max(|a|, |n|, floor)` over all coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(lo..hi));
    t
}

/// Magnitudes in `[0.05, 1.5)` with random sign, for ops with a kink at zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        let m = rng.gen_range(0.05..1.5);
        *v = if rng.gen_bool(0.5) { m } else { -m };
    }
    t
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

struct OpCase {
    name: &'static str,
    inputs: Vec<Tensor>,
    build: Build,
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

fn op_cases(r: &mut ChaCha8Rng) -> Vec<OpCase> {
    let mut out = vec![
        case(
            "matmul",
            vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[4, 5], -1.0, 1.0)],
            |t, v| t.matmul(v[0], v[1]),
        ),
        case(
            "bmm",
            vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 4, 3], -1.0, 1.0)],
            |t, v| t.bmm(v[0], v[1]),
        ),
        case(
            "bmm_nt",
            vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 5, 4], -1.0, 1.0)],
            |t, v| t.bmm_nt(v[0], v[1]),
        ),
        case(
            "left_matmul",
            vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[2, 4, 5], -1.0, 1.0)],
            |t, v| t.left_matmul(v[0], v[1]),
        ),
        case(
            "add_row",
            vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[4], -1.0, 1.0)],
            |t, v| t.add_row(v[0], v[1]),
        ),
        case(
            "scale_by",
            vec![uniform(r, &[3, 4], -1.0, 1.0), uniform(r, &[1], -1.0, 1.0)],
            |t, v| t.scale_by(v[0], v[1]),
        ),
        case("relu", vec![away_from_zero(r, &[3, 5])], |t, v| t.relu(v[0])),
        case("abs", vec![away_from_zero(r, &[3, 5])], |t, v| t.abs(v[0])),
        case(
            "concat_last",
            vec![uniform(r, &[2, 3, 4], -1.0, 1.0), uniform(r, &[2, 3, 2], -1.0, 1.0)],
            |t, v| t.concat_last(v[0], v[1]),
        ),
        case(
            "mse",
            vec![uniform(r, &[4, 3], -1.0, 1.0), uniform(r, &[4, 3], -1.0, 1.0)],
            |t, v| t.mse(v[0], v[1]),
        ),
        case(
            "node_embed",
            vec![
                uniform(r, &[6, 3], -1.0, 1.0),
                uniform(r, &[3, 4], -1.0, 1.0),
                uniform(r, &[3, 4], -1.0, 1.0),
                uniform(r, &[2, 4], -1.0, 1.0),
            ],
            |t, v| t.node_embed(v[0], v[1], v[2], v[3]),
        ),
        case(
            "weighted_attention",
            vec![
                uniform(r, &[3, 8], -1.0, 1.0),
                uniform(r, &[3, 5, 8], -1.0, 1.0),
                uniform(r, &[3, 5, 8], -1.0, 1.0),
                uniform(r, &[3, 5], 0.2, 1.0),
            ],
            |t, v| t.weighted_attention(v[0], v[1], v[2], v[3], 2),
        ),
    ];

    let pair = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 4], -2.0, 2.0), uniform(r, &[3, 4], -2.0, 2.0)];
    out.push(case("add", pair(r), |t, v| t.add(v[0], v[1])));
    out.push(case("sub", pair(r), |t, v| t.sub(v[0], v[1])));
    out.push(case("mul", pair(r), |t, v| t.mul(v[0], v[1])));

    let one = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 5], -3.0, 3.0)];
    out.push(case("scale", one(r), |t, v| t.scale(v[0], -1.7)));
    out.push(case("add_scalar", one(r), |t, v| t.add_scalar(v[0], 0.3)));
    out.push(case("one_minus", one(r), |t, v| t.one_minus(v[0])));
    out.push(case("sigmoid", one(r), |t, v| t.sigmoid(v[0])));
    out.push(case("tanh", one(r), |t, v| t.tanh(v[0])));
    out.push(case("square", one(r), |t, v| t.square(v[0])));

    let cube = |r: &mut ChaCha8Rng| vec![uniform(r, &[3, 2, 4], -2.0, 2.0)];
    out.push(case("softmax_rows", cube(r), |t, v| t.softmax_rows(v[0])));
    out.push(case("sum", cube(r), |t, v| t.sum(v[0])));
    out.push(case("mean", cube(r), |t, v| t.mean(v[0])));
    out.push(case("mean_axis0", cube(r), |t, v| t.mean_axis0(v[0])));
    out.push(case("reshape", cube(r), |t, v| t.reshape(v[0], &[6, 4])));
    out.push(case("transpose_last2", cube(r), |t, v| t.transpose_last2(v[0])));
    out.push(case("index_rows", cube(r), |t, v| t.index_rows(v[0], &[2, 0, 2])));

    // fractional parts stay clear of the clamp corners
    let mut tau = Tensor::zeros(&[5]);
    tau.data_mut()
        .iter_mut()
        .for_each(|v| *v = r.gen_range(0..6) as f64 + r.gen_range(0.1..0.9));
    let lags: Vec<f64> = (0..8).map(|k| 7.0 - k as f64).collect();
    out.push(case("window_weights", vec![tau], move |t, v| {
        t.window_weights(v[0], &lags)
    }));

    let w = Tensor::new(
        vec![2, 6],
        vec![0.0, 0.0, 0.4, 1.0, 1.0, 1.0, 0.0, 0.7, 1.0, 1.0, 1.0, 0.0],
    )
    .expect("static shape");
    out.push(case(
        "weighted_attention_masked",
        vec![
            uniform(r, &[2, 4], -1.0, 1.0),
            uniform(r, &[2, 6, 4], -1.0, 1.0),
            uniform(r, &[2, 6, 4], -1.0, 1.0),
        ],
        move |t, v| {
            let wv = t.constant(w.clone());
            t.weighted_attention(v[0], v[1], v[2], wv, 2)
        },
    ));
    out
}

/// Scalar probe `sum(op(inputs) * r)`.
fn probe(build: &Build, inputs: &[Tensor], r: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
}

fn op_error(c: &OpCase, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = c.inputs.iter().map(|x| tape.param(x.clone())).collect();
    let out = (c.build)(&mut tape, &vars)?;
    let shape = tape.value(out).shape().to_vec();
    let r = uniform(rng, &shape, -1.0, 1.0);
    let rv = tape.constant(r.clone());
    let weighted = tape.mul(out, rv)?;
    let loss = tape.sum(weighted)?;
    let grads = tape.backward(loss)?;

    let mut worst: f64 = 0.0;
    for (i, x) in c.inputs.iter().enumerate() {
        let analytic = grads.get(vars[i]).unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut failure = None;
        let mut f = |flat: &[f64]| {
            let mut xs = c.inputs.clone();
            xs[i].data_mut().copy_from_slice(flat);
            probe(&c.build, &xs, &r).unwrap_or_else(|e| {
                failure = Some(e);
                f64::NAN
            })
        };
        let numeric = central_difference(&mut f, x.data(), STEP);
        if let Some(e) = failure {
            return Err(e);
        }
        for (a, n) in analytic.data().iter().zip(&numeric) {
            worst = worst.max(rel_err(*a, *n));
        }
    }
    Ok(worst)
}

/// Worst relative error of every differentiable op over `seeds` random
/// draws, keyed by op name.
pub fn audit_ops(seeds: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for c in op_cases(&mut rng) {
            let e = op_error(&c, &mut rng)?;
            match worst.iter_mut().find(|w| w.0 == c.name) {
                Some(w) => w.1 = w.1.max(e),
                None => worst.push((c.name, e)),
            }
        }
    }
    Ok(worst)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ModelAudit {
    pub worst: f64,
    pub checked: usize,
    /// Coordinates where two step sizes disagree by more than `tol`, the
    /// signature of a ReLU kink inside the probe interval.
    pub skipped: usize,
}

impl ModelAudit {
    pub fn merge(self, o: Self) -> Self {
        Self {
            worst: self.worst.max(o.worst),
            checked: self.checked + o.checked,
            skipped: self.skipped + o.skipped,
        }
    }
}

fn audit_prior(c: usize) -> Result<PriorGraph> {
    let vars = (0..c)
        .map(|i| Variable {
            name: format!("v{i}"),
            role: if i == c - 1 {
                Role::Target
            } else if i == 0 {
                Role::Actuator
            } else {
                Role::State
            },
        })
        .collect();
    PriorGraph::build(vars, &[(1, c - 1)])
}

/// Full training loss of a five-variable model (L = 8, H = 4, D = 16)
/// against central differences at `per_tensor` random coordinates of every
/// parameter tensor. The gate is opened so the residual path carries
/// full-size gradients.
pub fn audit_model(variant: Variant, seed: u64, per_tensor: usize, tol: f64) -> Result<ModelAudit> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, l, h, b) = (5, 8, 4, 2);
    let cfg = ModelConfig {
        d_model: 16,
        heads: 4,
        d_node: 4,
        trend_d_model: 8,
        trend_depth: 2,
        trend_scales: 2,
        ma_kernel: 3,
        variant,
        ..ModelConfig::new(c, c - 1, l, h)
    };
    let mut model = DsprModel::new(cfg, audit_prior(c)?, &mut rng)?;
    if let Some(beta) = model.params().find("gate.beta") {
        model.params_mut().get_mut(beta).data_mut().fill(0.3);
    }
    let x = uniform(&mut rng, &[b, l, c], -1.5, 1.5);
    let feats = uniform(&mut rng, &[b, l + h, N_TIME_FEATS], -1.0, 1.0);
    let y = uniform(&mut rng, &[b, h], -1.0, 1.0);

    let loss_of = |m: &DsprModel| -> Result<f64> {
        let mut tape = Tape::new();
        let p = m.params().bind(&mut tape);
        let fv = m.forward(&mut tape, &p, &x, &feats)?;
        let loss = m.loss(&mut tape, &fv, &y)?;
        Ok(tape.value(loss).item())
    };
    let mut tape = Tape::new();
    let p = model.params().bind(&mut tape);
    let fv = model.forward(&mut tape, &p, &x, &feats)?;
    let loss = model.loss(&mut tape, &fv, &y)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor> = p
        .vars()
        .iter()
        .zip(model.params().values())
        .map(|(&v, value)| grads.get(v).unwrap_or_else(|| Tensor::zeros(value.shape())))
        .collect();

    let mut audit = ModelAudit::default();
    for (ti, g) in analytic.iter().enumerate() {
        let n = g.numel();
        for _ in 0..per_tensor.min(n) {
            let j = rng.gen_range(0..n);
            let mut diff = |step: f64| -> Result<f64> {
                let orig = model.params().values()[ti].data()[j];
                model.params_mut().values_mut()[ti].data_mut()[j] = orig + step;
                let up = loss_of(&model)?;
                model.params_mut().values_mut()[ti].data_mut()[j] = orig - step;
                let down = loss_of(&model)?;
                model.params_mut().values_mut()[ti].data_mut()[j] = orig;
                Ok((up - down) / (2.0 * step))
            };
            let (n1, n2) = (diff(STEP)?, diff(STEP / 4.0)?);
            if rel_err(n1, n2) > tol {
                audit.skipped += 1;
                continue;
            }
            audit.checked += 1;
            audit.worst = audit.worst.max(rel_err(g.data()[j], n1));
        }
    }
    Ok(audit)
}
