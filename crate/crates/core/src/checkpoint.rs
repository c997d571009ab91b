//! Single-file checkpoints: named little-endian f32 arrays plus the run
//! configuration, seed and step in the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, SafeTensors, TensorView};

use crate::config::RunConfig;
use crate::error::{Error, Result};

const OPTIMIZER_PREFIX: &str = "optimizer/";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub seed: u64,
    pub step: usize,
    /// Classes seen in training.
    pub classes: Vec<String>,
    /// Model weights, trainable and frozen.
    pub weights: BTreeMap<String, Tensor>,
    /// Optimizer moments; empty for inference-only checkpoints.
    pub optimizer: BTreeMap<String, Tensor>,
}

fn ck_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        let entries = self
            .weights
            .iter()
            .map(|(k, v)| (k.clone(), v))
            .chain(self.optimizer.iter().map(|(k, v)| (format!("{OPTIMIZER_PREFIX}{k}"), v)));
        for (name, t) in entries {
            let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            blobs.push((name, t.dims().to_vec(), bytes));
        }
        let views = blobs
            .iter()
            .map(|(name, shape, bytes)| Ok((name.as_str(), TensorView::new(Dtype::F32, shape.clone(), bytes)?)))
            .collect::<std::result::Result<Vec<_>, safetensors::SafeTensorError>>()
            .map_err(|e| Error::Config(e.to_string()))?;
        let meta = HashMap::from([
            ("config".to_string(), self.config.to_toml_string()?),
            ("seed".to_string(), self.seed.to_string()),
            ("step".to_string(), self.step.to_string()),
            ("classes".to_string(), serde_json::to_string(&self.classes)?),
        ]);
        safetensors::tensor::serialize(views, Some(meta)).map_err(|e| Error::Config(e.to_string()))
    }

    /// Tensors are loaded onto the CPU.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| ck_err(origin, e))?;
        let meta = meta.metadata().clone().unwrap_or_default();
        let field = |k: &str| meta.get(k).ok_or_else(|| ck_err(origin, format!("metadata lacks {k:?}")));
        let config = RunConfig::from_toml_str(field("config")?)?;
        let seed = field("seed")?.parse().map_err(|e| ck_err(origin, e))?;
        let step = field("step")?.parse().map_err(|e| ck_err(origin, e))?;
        let classes = match meta.get("classes") {
            Some(c) => serde_json::from_str(c).map_err(|e| ck_err(origin, e))?,
            None => Vec::new(),
        };
        let st = SafeTensors::deserialize(bytes).map_err(|e| ck_err(origin, e))?;
        let mut weights = BTreeMap::new();
        let mut optimizer = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(ck_err(origin, format!("{name} is {:?}, expected F32", view.dtype())));
            }
            let values: Vec<f32> = view
                .data()
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::from_vec(values, view.shape(), &Device::Cpu)?;
            match name.strip_prefix(OPTIMIZER_PREFIX) {
                Some(k) => optimizer.insert(k.to_string(), t),
                None => weights.insert(name, t),
            };
        }
        Ok(Self {
            config,
            seed,
            step,
            classes,
            weights,
            optimizer,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
