use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TriAugConfig, TriAugModel};
use crate::data::ClassPriors;
use crate::diffcore::{Param, Tensor};
use crate::error::{Error, Result};
use crate::loss::{LossConfig, MaskM};

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.toml";
pub const CHECKPOINT_BLOB: &str = "params.bin";

/// Everything evaluation needs: weights, training priors, mask and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TriAugModel,
    pub priors: ClassPriors,
    pub mask: MaskM,
    pub loss: LossConfig,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the blob.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    seed: u64,
    input_dim: usize,
    num_classes: usize,
    class_counts: Vec<usize>,
    mask: Vec<u8>,
    config: TriAugConfig,
    loss: LossConfig,
    params: Vec<ParamEntry>,
}

/// Writes `checkpoint.toml` plus `params.bin` (32-bit little-endian floats,
/// row-major, concatenated in manifest order).
pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    for p in ckpt.model.params() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: blob.len() as u64,
        });
        for &v in p.value.data() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = Manifest {
        format: 1,
        seed: ckpt.seed,
        input_dim: ckpt.model.input_dim(),
        num_classes: ckpt.model.num_classes(),
        class_counts: ckpt.priors.counts.clone(),
        mask: ckpt.mask.entries().to_vec(),
        config: ckpt.model.config().clone(),
        loss: ckpt.loss,
        params: entries,
    };
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = toml::to_string(&manifest).map_err(|e| Error::format(&mpath, e.to_string()))?;
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    let bpath = dir.join(CHECKPOINT_BLOB);
    fs::write(&bpath, blob).map_err(|e| Error::io(&bpath, e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mpath = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let m: Manifest = toml::from_str(&text).map_err(|e| Error::format(&mpath, e.to_string()))?;
    if m.format != 1 {
        return Err(Error::format(&mpath, format!("unsupported format {}", m.format)));
    }
    let bpath = dir.join(CHECKPOINT_BLOB);
    let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;

    let mut params = Vec::with_capacity(m.params.len());
    for e in &m.params {
        let n: usize = e.shape.iter().product();
        let start = e.offset as usize;
        let end = start + 4 * n;
        if end > blob.len() {
            return Err(Error::format(&bpath, format!("parameter `{}` runs past the blob", e.name)));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        params.push(Param::new(e.name.clone(), Tensor::new(e.shape.clone(), data)?));
    }
    let model = TriAugModel::from_params(m.config, m.input_dim, m.num_classes, params)?;
    let priors = ClassPriors::from_counts(m.class_counts)?;
    let mask = MaskM::new(m.mask)?;
    if priors.num_classes() != model.num_classes() || mask.len() != model.num_classes() {
        return Err(Error::format(&mpath, "priors or mask length disagrees with num_classes"));
    }
    Ok(Checkpoint {
        model,
        priors,
        mask,
        loss: m.loss,
        seed: m.seed,
    })
}
