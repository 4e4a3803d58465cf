//! Versioned binary checkpoints.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, the
//! JSON manifest, then every parameter's values as little-endian `f64` in
//! manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Normalizer, SplitConfig};
use crate::error::{DsprError, Result};
use crate::graph_static::PriorGraph;
use crate::metrics::MetricReport;
use crate::model::{DsprModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"DSPRCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    model: ModelConfig,
    prior: serde_json::Value,
    seed: u64,
    split: Option<SplitConfig>,
    normalizer: Option<Normalizer>,
    metrics: Option<MetricReport>,
    params: Vec<ParamEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub prior: PriorGraph,
    pub seed: u64,
    pub split: Option<SplitConfig>,
    pub normalizer: Option<Normalizer>,
    /// Validation metrics of the stored parameters.
    pub metrics: Option<MetricReport>,
    pub params: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn from_model(model: &DsprModel, seed: u64) -> Self {
        Self {
            model: model.config().clone(),
            prior: model.prior().clone(),
            seed,
            split: None,
            normalizer: None,
            metrics: None,
            params: model.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        }
    }

    /// Rebuilds the model structure and loads the stored parameters.
    pub fn restore(&self) -> Result<DsprModel> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed);
        let mut model = DsprModel::new(self.model.clone(), self.prior.clone(), &mut rng)?;
        model.params_mut().load(self.params.clone())?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: FORMAT_VERSION,
            model: self.model.clone(),
            prior: serde_json::from_str(&self.prior.to_json()?)?,
            seed: self.seed,
            split: self.split.clone(),
            normalizer: self.normalizer.clone(),
            metrics: self.metrics.clone(),
            params: self
                .params
                .iter()
                .map(|(name, t)| ParamEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let mut out = Vec::with_capacity(20 + json.len() + 8 * self.params.iter().map(|p| p.1.numel()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.params {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| DsprError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(DsprError::Checkpoint(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + len).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Manifest = serde_json::from_slice(body)?;
        if manifest.version != FORMAT_VERSION {
            return Err(bad("manifest version disagrees with header"));
        }
        let mut blob = &bytes[20 + len..];
        let mut params = Vec::with_capacity(manifest.params.len());
        for p in manifest.params {
            let n: usize = p.shape.iter().product();
            if blob.len() < 8 * n {
                return Err(DsprError::Checkpoint(format!("truncated values for {}", p.name)));
            }
            let data = blob[..8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            blob = &blob[8 * n..];
            params.push((p.name, Tensor::new(p.shape, data)?));
        }
        if !blob.is_empty() {
            return Err(bad("trailing bytes after parameter blobs"));
        }
        Ok(Self {
            model: manifest.model,
            prior: PriorGraph::from_json(&manifest.prior.to_string())?,
            seed: manifest.seed,
            split: manifest.split,
            normalizer: manifest.normalizer,
            metrics: manifest.metrics,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }
}
