//! Checkpoints: a JSON manifest plus little-endian `f64` weights in manifest
//! order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::Dataset;
use crate::train::{RunConfig, Trainer};

pub const MANIFEST: &str = "manifest.json";
pub const WEIGHTS: &str = "weights.bin";
const FORMAT: &str = "relnet-checkpoint";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub dtype: String,
    pub seed: u64,
    pub epoch: usize,
    pub config: RunConfig,
    pub params: Vec<ParamMeta>,
}

impl Manifest {
    fn signature(&self) -> Vec<String> {
        self.params.iter().map(|p| format!("{}{:?}", p.name, p.shape)).collect()
    }
}

pub fn save(dir: &Path, trainer: &Trainer) -> Result<()> {
    fs::create_dir_all(dir)?;
    let entries = trainer.store.entries();
    let manifest = Manifest {
        format: FORMAT.into(),
        dtype: "f64-le".into(),
        seed: trainer.cfg.seed,
        epoch: trainer.epoch,
        config: trainer.cfg.clone(),
        params: entries
            .iter()
            .map(|e| ParamMeta { name: e.name.clone(), shape: e.value.shape().to_vec(), trainable: e.trainable })
            .collect(),
    };
    let mut bytes = Vec::with_capacity(trainer.store.num_scalars() * 8);
    for e in entries {
        for v in e.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(dir.join(MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
    fs::write(dir.join(WEIGHTS), bytes)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m: Manifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST))?)
        .map_err(|e| Error::Checkpoint(format!("unreadable manifest: {e}")))?;
    if m.format != FORMAT || m.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!("unsupported checkpoint {} / {}", m.format, m.dtype)));
    }
    Ok(m)
}

/// Restores weights into `trainer`, whose model must match the manifest.
pub fn restore(dir: &Path, trainer: &mut Trainer) -> Result<Manifest> {
    let manifest = read_manifest(dir)?;
    let have = trainer.store.signature();
    let want = manifest.signature();
    if have != want {
        return Err(Error::Checkpoint(format!(
            "model does not match checkpoint\n  checkpoint: {}\n  model:      {}",
            want.join(", "),
            have.join(", ")
        )));
    }
    let bytes = fs::read(dir.join(WEIGHTS))?;
    let need = trainer.store.num_scalars() * 8;
    if bytes.len() != need {
        return Err(Error::Checkpoint(format!("weights file holds {} bytes, expected {need}", bytes.len())));
    }
    let mut values = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for id in trainer.store.ids().collect::<Vec<_>>() {
        for slot in trainer.store.get_mut(id).data_mut() {
            *slot = values.next().expect("length checked");
        }
    }
    trainer.epoch = manifest.epoch;
    Ok(manifest)
}

/// Rebuilds the trainer described by a checkpoint, optionally over a
/// different dataset, and loads its weights.
pub fn load(dir: &Path, data: Option<Dataset>) -> Result<Trainer> {
    let manifest = read_manifest(dir)?;
    let mut trainer = match data {
        Some(d) => Trainer::with_data(manifest.config.clone(), d)?,
        None => Trainer::new(manifest.config.clone())?,
    };
    restore(dir, &mut trainer)?;
    Ok(trainer)
}
