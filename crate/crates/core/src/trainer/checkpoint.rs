//! Checkpoints: a JSON manifest plus a raw little-endian f32 tensor blob.
//! A round trip reproduces every parameter, momentum slot and running
//! statistic bitwise, along with the epoch counter, seed and the epoch's
//! fitted PCA model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featpipe::PcaModel;
use crate::model::NetState;
use crate::trainer::TrainConfig;

const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the blob, in f32 units.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    epoch: usize,
    seed: u64,
    head_dim: usize,
    config: TrainConfig,
    tensors: Vec<TensorEntry>,
    pca: Option<PcaModel>,
    total_len: usize,
}

/// State restored from a checkpoint.
#[derive(Debug)]
pub struct Checkpoint {
    pub net: NetState,
    pub epoch: usize,
    pub seed: u64,
    pub config: TrainConfig,
    pub pca: Option<PcaModel>,
}

/// Writes `manifest.json` and `weights.bin` into `dir` (created if
/// needed).
pub fn save_checkpoint(
    dir: &Path,
    net: &NetState,
    config: &TrainConfig,
    epoch: usize,
    pca: Option<&PcaModel>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    let mut offset = 0usize;
    net.visit_tensors(|name, data, shape| {
        entries.push(TensorEntry {
            name,
            shape: shape.to_vec(),
            offset,
            len: data.len(),
        });
        for &v in data {
            blob.extend_from_slice(&v.to_le_bytes());
        }
        offset += data.len();
    });
    let manifest = Manifest {
        version: VERSION,
        epoch,
        seed: config.seed,
        head_dim: net.head_dim(),
        config: config.clone(),
        tensors: entries,
        pca: pca.cloned(),
        total_len: offset,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    fs::write(dir.join("weights.bin"), blob)?;
    Ok(())
}

/// Loads a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)
        .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
    if manifest.version != VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: checkpoint {} vs supported {VERSION}",
            manifest.version
        )));
    }
    let blob = fs::read(dir.join("weights.bin"))?;
    if blob.len() != manifest.total_len * 4 {
        return Err(Error::Checkpoint(format!(
            "blob length {} does not match manifest total {}",
            blob.len(),
            manifest.total_len * 4
        )));
    }
    // Rebuild the network skeleton, then fill tensors by name.
    let mut seed_rng = crate::rng::SeededRng::new(0);
    let mut net = NetState::new(
        manifest.config.net.clone(),
        manifest.head_dim.max(2),
        &mut seed_rng,
    )?;
    net.resize_head(manifest.head_dim);
    for entry in &manifest.tensors {
        let start = entry.offset * 4;
        let end = start + entry.len * 4;
        if end > blob.len() {
            return Err(Error::Checkpoint(format!(
                "tensor {} extends past blob end",
                entry.name
            )));
        }
        let data: Vec<f32> = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
            .collect();
        net.load_tensor(&entry.name, &data)?;
    }
    Ok(Checkpoint {
        net,
        epoch: manifest.epoch,
        seed: manifest.seed,
        config: manifest.config,
        pca: manifest.pca,
    })
}
