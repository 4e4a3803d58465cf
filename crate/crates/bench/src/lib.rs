//! Shared fixtures for the criterion benches.

use dspr_core::data::{gen_transport_delay, split_windows, TransportDelayConfig};
use dspr_core::{DsprModel, ModelConfig, SplitConfig, Tensor, WindowBatch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LOOKBACK: usize = 24;
pub const HORIZON: usize = 4;

/// A freshly initialised model and a training batch of `batch` windows from
/// the variable-delay generator.
pub fn model_and_batch(batch: usize, d_model: usize) -> (DsprModel, WindowBatch) {
    let ds = gen_transport_delay(&TransportDelayConfig {
        n_steps: 3000,
        ..Default::default()
    })
    .expect("generator");
    let splits = split_windows(&ds, &SplitConfig::new(LOOKBACK, HORIZON)).expect("split");
    let idx: Vec<usize> = (0..batch).collect();
    let windows = splits.train.select(&idx).expect("enough windows");
    let cfg = ModelConfig {
        d_model,
        ..ModelConfig::new(ds.n_vars(), ds.target(), LOOKBACK, HORIZON)
    };
    let model = DsprModel::new(cfg, ds.prior.clone(), &mut ChaCha8Rng::seed_from_u64(0)).expect("model");
    (model, windows)
}

pub fn uniform(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    t
}
