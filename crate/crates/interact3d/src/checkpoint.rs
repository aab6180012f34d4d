//! Checkpoint archives.
//!
//! One safetensors file: parameters under `param/`, optional optimizer
//! moments under `adam_m/` and `adam_v/`, and JSON metadata carrying the
//! network config, the optimizer step and free-form trainer state.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::Tensor;
use safetensors::{Dtype, SafeTensors};
use sha2::{Digest, Sha256};

use crate::network::{Network, NetworkConfig, NetworkError};

const FORMAT: &str = "interact3d-checkpoint/1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

pub type Result<T, E = CheckpointError> = std::result::Result<T, E>;

/// A dense `f32` array in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Array {
    pub fn from_tensor(t: &Tensor) -> candle_core::Result<Self> {
        Ok(Self { shape: t.dims().to_vec(), data: t.flatten_all()?.to_vec1::<f32>()? })
    }

    pub fn to_tensor(&self) -> candle_core::Result<Tensor> {
        Tensor::from_slice(&self.data, self.shape.as_slice(), &candle_core::Device::Cpu)
    }

    fn bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Array>,
    pub v: BTreeMap<String, Array>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: NetworkConfig,
    pub params: BTreeMap<String, Array>,
    pub adam: Option<AdamState>,
    /// Trainer state as JSON, opaque to this module.
    pub train_state: Option<String>,
}

impl Checkpoint {
    pub fn from_network(net: &Network) -> Result<Self> {
        let params = net
            .params()
            .iter()
            .map(|(k, v)| Ok((k.clone(), Array::from_tensor(v.as_tensor()).map_err(NetworkError::from)?)))
            .collect::<Result<_>>()?;
        Ok(Self { network: net.config().clone(), params, adam: None, train_state: None })
    }

    /// Builds the network and loads the weights, checking names and shapes.
    pub fn to_network(&self) -> Result<Network> {
        let net = Network::new(&self.network)?;
        let values = self
            .params
            .iter()
            .map(|(k, a)| Ok((k.clone(), a.to_tensor().map_err(NetworkError::from)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        net.load_params(&values)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut named: Vec<(String, &Array)> = self.params.iter().map(|(k, a)| (format!("param/{k}"), a)).collect();
        if let Some(adam) = &self.adam {
            named.extend(adam.m.iter().map(|(k, a)| (format!("adam_m/{k}"), a)));
            named.extend(adam.v.iter().map(|(k, a)| (format!("adam_v/{k}"), a)));
        }
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> =
            named.into_iter().map(|(k, a)| (k, a.shape.clone(), a.bytes())).collect();
        let views = bytes.iter().map(|(k, shape, b)| {
            (k.clone(), safetensors::tensor::TensorView::new(Dtype::F32, shape.clone(), b).expect("size matches shape"))
        });
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT.to_string());
        meta.insert("network_config".to_string(), serde_json::to_string(&self.network).expect("config serializes"));
        if let Some(adam) = &self.adam {
            meta.insert("adam_step".to_string(), adam.step.to_string());
        }
        if let Some(s) = &self.train_state {
            meta.insert("train_state".to_string(), s.clone());
        }
        safetensors::serialize(views, Some(meta)).expect("tensor views are valid")
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |m: String| CheckpointError::Format { path: path.to_path_buf(), message: m };
        let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
        let meta = meta.metadata().clone().unwrap_or_default();
        if meta.get("format").map(String::as_str) != Some(FORMAT) {
            return Err(bad("not an interact3d checkpoint".into()));
        }
        let network: NetworkConfig = serde_json::from_str(meta.get("network_config").ok_or_else(|| bad("missing network_config".into()))?)
            .map_err(|e| bad(format!("network_config: {e}")))?;
        network.validate()?;
        let st = SafeTensors::deserialize(bytes).map_err(|e| bad(e.to_string()))?;
        let mut params = BTreeMap::new();
        let mut m = BTreeMap::new();
        let mut v = BTreeMap::new();
        for (name, view) in st.tensors() {
            if view.dtype() != Dtype::F32 {
                return Err(bad(format!("{name}: expected f32, got {:?}", view.dtype())));
            }
            let data = view.data().chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let arr = Array { shape: view.shape().to_vec(), data };
            let (group, key) = name.split_once('/').ok_or_else(|| bad(format!("unexpected tensor {name}")))?;
            let dst = match group {
                "param" => &mut params,
                "adam_m" => &mut m,
                "adam_v" => &mut v,
                _ => return Err(bad(format!("unexpected tensor {name}"))),
            };
            dst.insert(key.to_string(), arr);
        }
        let adam = match meta.get("adam_step") {
            Some(s) => {
                let step = s.parse().map_err(|_| bad("adam_step is not an integer".into()))?;
                if m.keys().ne(params.keys()) || v.keys().ne(params.keys()) {
                    return Err(bad("optimizer moments do not match parameters".into()));
                }
                Some(AdamState { step, m, v })
            }
            None => None,
        };
        Ok(Self { network, params, adam, train_state: meta.get("train_state").cloned() })
    }

    /// Writes to a sibling temp file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let io = |source| CheckpointError::Io { path: path.to_path_buf(), source };
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(io)?;
        }
        let tmp = path.with_extension(format!("tmp{}", std::process::id()));
        fs::write(&tmp, self.to_bytes()).map_err(io)?;
        fs::rename(&tmp, path).map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
        Self::from_bytes(&bytes, path)
    }
}

/// Hex SHA-256 of a file, used as the checkpoint id.
pub fn file_sha256(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}

/// Loads a checkpoint and returns the network with its id.
pub fn load_network(path: &Path) -> Result<(Network, String)> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: path.to_path_buf(), source })?;
    let net = Checkpoint::from_bytes(&bytes, path)?.to_network()?;
    Ok((net, hex::encode(Sha256::digest(&bytes))))
}
