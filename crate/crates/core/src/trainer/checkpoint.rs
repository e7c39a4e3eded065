use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::InferenceConfig;
use crate::networks::{Net1, Net1Config, Net2, Net2Config};
use crate::nn::ParamStore;

use super::Models;

pub const MAGIC: &[u8; 8] = b"CSEGCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    net1: Net1Config,
    net2: Net2Config,
    inference: InferenceConfig,
    completed_steps: Vec<u8>,
    net1_tensors: Vec<TensorEntry>,
    net2_tensors: Vec<TensorEntry>,
}

/// Everything `predict` needs, plus the training progress.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub models: Models,
    pub inference: InferenceConfig,
}

fn entries(p: &ParamStore) -> Vec<TensorEntry> {
    p.iter().map(|(name, shape, _)| TensorEntry { name: name.to_string(), shape: shape.to_vec() }).collect()
}

/// Layout: magic, `u32` version, `u64` header length, JSON header, then
/// every tensor as little-endian `f32` in header order (Net1 then Net2).
pub fn save_checkpoint(path: impl AsRef<Path>, models: &Models, inference: &InferenceConfig) -> Result<()> {
    let header = Header {
        net1: *models.net1.config(),
        net2: *models.net2.config(),
        inference: *inference,
        completed_steps: models.completed_steps.clone(),
        net1_tensors: entries(models.net1.params()),
        net2_tensors: entries(models.net2.params()),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let path = path.as_ref();
    let unwritable = |e: std::io::Error| Error::Unwritable { path: path.to_path_buf(), reason: e.to_string() };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(unwritable)?;
    }
    let mut w = BufWriter::new(File::create(path).map_err(unwritable)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for store in [models.net1.params(), models.net2.params()] {
        for (_, _, values) in store.iter() {
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn fill(store: &mut ParamStore, tensors: &[TensorEntry], r: &mut impl Read) -> Result<()> {
    if tensors.len() != store.len() {
        return Err(Error::Checkpoint(format!("{} tensors stored, network has {}", tensors.len(), store.len())));
    }
    for t in tensors {
        let n: usize = t.shape.iter().product();
        let mut bytes = vec![0u8; 4 * n];
        r.read_exact(&mut bytes).map_err(|e| Error::Checkpoint(format!("truncated tensor {}: {e}", t.name)))?;
        let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        store.set(&t.name, &t.shape, values).map_err(Error::Checkpoint)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a checkpoint", path.display())));
    }
    let mut word = [0u8; 4];
    r.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut json = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut json)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut net1 = Net1::new(header.net1, 0)?;
    let mut net2 = Net2::new(header.net2, 0)?;
    fill(net1.params_mut(), &header.net1_tensors, &mut r)?;
    fill(net2.params_mut(), &header.net2_tensors, &mut r)?;
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint("trailing bytes after the last tensor".into()));
    }
    Ok(Checkpoint {
        models: Models { net1, net2, completed_steps: header.completed_steps },
        inference: header.inference,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let n1 = Net1Config { base_width: 2, blocks_per_path: 2, ..Net1Config::default() };
        let n2 = Net2Config { base_width: 2, blocks_per_path: 2, k_slices: 3, ..Net2Config::default() };
        let mut models = Models::new(n1, n2, 7).unwrap();
        models.completed_steps = vec![1, 2];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let inf = InferenceConfig { roi_margin_vox: 3, ..InferenceConfig::default() };
        save_checkpoint(&path, &models, &inf).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.inference, inf);
        assert_eq!(back.models.completed_steps, vec![1, 2]);
        assert_eq!(back.models.net1.params(), models.net1.params());
        assert_eq!(back.models.net2.params(), models.net2.params());
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"NOTACKPT0000").unwrap();
        assert!(matches!(load_checkpoint(&p), Err(Error::Checkpoint(_))));
        let models = Models::new(
            Net1Config { base_width: 1, blocks_per_path: 1, ..Net1Config::default() },
            Net2Config { base_width: 1, blocks_per_path: 1, k_slices: 1, ..Net2Config::default() },
            0,
        )
        .unwrap();
        save_checkpoint(&p, &models, &InferenceConfig::default()).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        assert!(load_checkpoint(&p).is_err());
        assert!(matches!(load_checkpoint(dir.path().join("missing")), Err(Error::MissingFile(_))));
    }
}
