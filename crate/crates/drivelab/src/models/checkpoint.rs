//! Checkpoint archives: a JSON architecture header followed by raw f32
//! little-endian parameter data. Loading validates the header against the
//! constructed network before any data is copied.

use super::nets::ModelScale;
use crate::nn::ParamTensor;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"DLCK0001";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("header parse error: {0}")]
    Header(#[from] serde_json::Error),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ComponentManifest {
    pub name: String,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub method: String,
    pub scale: ModelScale,
    pub config_hash: String,
    pub seed: u64,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    pub components: Vec<ComponentManifest>,
}

/// In-memory checkpoint: header plus flattened tensor data, one entry per
/// tensor in declared order.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub data: Vec<Vec<f32>>,
}

impl Checkpoint {
    pub fn new(method: &str, scale: ModelScale, config_hash: &str, seed: u64) -> Self {
        Checkpoint {
            header: CheckpointHeader {
                format_version: 1,
                method: method.to_string(),
                scale,
                config_hash: config_hash.to_string(),
                seed,
                meta: BTreeMap::new(),
                components: Vec::new(),
            },
            data: Vec::new(),
        }
    }

    /// Append a component snapshot taken from live parameters.
    pub fn push_component(&mut self, name: &str, params: Vec<&mut ParamTensor<f32>>) {
        let mut tensors = Vec::new();
        for p in params {
            tensors.push(TensorInfo { name: p.name.clone(), shape: p.value.shape().to_vec() });
            self.data.push(p.value.iter().cloned().collect());
        }
        self.header.components.push(ComponentManifest { name: name.to_string(), tensors });
    }

    /// Copy a component's tensors into live parameters, validating the
    /// manifest against the constructed network.
    pub fn load_component(
        &self,
        name: &str,
        params: Vec<&mut ParamTensor<f32>>,
    ) -> Result<(), CheckpointError> {
        let (ci, comp) = self
            .header
            .components
            .iter()
            .enumerate()
            .find(|(_, c)| c.name == name)
            .ok_or_else(|| CheckpointError::Mismatch(format!("component '{name}' absent")))?;
        if comp.tensors.len() != params.len() {
            return Err(CheckpointError::Mismatch(format!(
                "component '{name}': {} tensors in file, {} in network",
                comp.tensors.len(),
                params.len()
            )));
        }
        let offset: usize = self.header.components[..ci].iter().map(|c| c.tensors.len()).sum();
        for (k, (info, p)) in comp.tensors.iter().zip(params.into_iter()).enumerate() {
            if info.name != p.name || info.shape != p.value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "tensor {k}: file has {} {:?}, network has {} {:?}",
                    info.name,
                    info.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            let src = &self.data[offset + k];
            for (dst, s) in p.value.iter_mut().zip(src.iter()) {
                *dst = *s;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let header = serde_json::to_vec(&self.header)?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::io::BufWriter::new(std::fs::File::create(&tmp)?);
            f.write_all(MAGIC)?;
            f.write_all(&(header.len() as u64).to_le_bytes())?;
            f.write_all(&header)?;
            for t in &self.data {
                for v in t {
                    f.write_all(&v.to_le_bytes())?;
                }
            }
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut len8 = [0u8; 8];
        f.read_exact(&mut len8)?;
        let hlen = u64::from_le_bytes(len8) as usize;
        let mut hbuf = vec![0u8; hlen];
        f.read_exact(&mut hbuf)?;
        let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;
        let mut data = Vec::new();
        for comp in &header.components {
            for t in &comp.tensors {
                let n: usize = t.shape.iter().product();
                let mut buf = vec![0u8; n * 4];
                f.read_exact(&mut buf)?;
                let vals: Vec<f32> = buf
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                data.push(vals);
            }
        }
        Ok(Checkpoint { header, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::nets::{MimicNet, NetParams};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_and_header_validation() {
        let scale = ModelScale::Desk { width: 4 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut net = MimicNet::<f32>::new(&mut rng, scale);
        let mut ck = Checkpoint::new("sam", scale, "deadbeef", 7);
        ck.push_component("mimic", net.params_mut());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        ck.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.header, ck.header);

        // Fresh net with a different seed loads the stored weights exactly.
        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let mut net2 = MimicNet::<f32>::new(&mut rng2, scale);
        loaded.load_component("mimic", net2.params_mut()).unwrap();
        let a: Vec<f32> = net.params_mut().iter().flat_map(|p| p.value.iter().cloned().collect::<Vec<_>>()).collect();
        let b: Vec<f32> = net2.params_mut().iter().flat_map(|p| p.value.iter().cloned().collect::<Vec<_>>()).collect();
        assert_eq!(a, b);

        // A mismatched architecture is rejected.
        let mut rng3 = ChaCha8Rng::seed_from_u64(1);
        let mut wrong = MimicNet::<f32>::new(&mut rng3, ModelScale::Desk { width: 8 });
        assert!(loaded.load_component("mimic", wrong.params_mut()).is_err());
        assert!(loaded.load_component("nope", net2.params_mut()).is_err());
    }
}
