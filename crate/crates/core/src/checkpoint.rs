//! Checkpoint persistence: a compact binary container for named f64
//! tensors (parameters plus optimizer moments) and a JSON manifest that is
//! readable without touching the weights.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::generator::PairedGeneratorConfig;
use crate::nn::Adam;
use crate::rng::RngState;
use crate::superres::SRConfig;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

const MAGIC: &[u8; 4] = b"PGW1";

/// Serializable optimizer moments.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub step_count: u64,
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
}

impl AdamState {
    pub fn capture(opt: &Adam) -> Self {
        AdamState { step_count: opt.step_count, m: opt.m.clone(), v: opt.v.clone() }
    }

    pub fn restore_into(&self, opt: &mut Adam) {
        opt.step_count = self.step_count;
        opt.m = self.m.clone();
        opt.v = self.v.clone();
    }
}

fn write_tensor<W: Write>(w: &mut W, name: &str, arr: &ArrayD<f64>) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_u16::<LittleEndian>(bytes.len() as u16)?;
    w.write_all(bytes)?;
    w.write_u8(arr.ndim() as u8)?;
    for d in arr.shape() {
        w.write_u32::<LittleEndian>(*d as u32)?;
    }
    for v in arr.iter() {
        w.write_f64::<LittleEndian>(*v)?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut R) -> Result<(String, ArrayD<f64>)> {
    let name_len = r.read_u16::<LittleEndian>()? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let ndim = r.read_u8()? as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        shape.push(r.read_u32::<LittleEndian>()? as usize);
    }
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(r.read_f64::<LittleEndian>()?);
    }
    let arr = ArrayD::from_shape_vec(IxDyn(&shape), data)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok((name, arr))
}

/// Write parameters (and optimizer state when given) to `path` atomically.
pub fn save_weights(path: &Path, store: &ParamStore, opt: Option<&AdamState>) -> Result<()> {
    let tmp = path.with_extension("bin.tmp");
    {
        let file = std::fs::File::create(&tmp).map_err(|e| Error::io_at(&tmp, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(MAGIC)?;
        w.write_u32::<LittleEndian>(store.len() as u32)?;
        for p in store.iter() {
            write_tensor(&mut w, &p.name, &p.value)?;
        }
        match opt {
            Some(state) => {
                w.write_u8(1)?;
                w.write_u64::<LittleEndian>(state.step_count)?;
                for (m, v) in state.m.iter().zip(state.v.iter()) {
                    write_tensor(&mut w, "m", m)?;
                    write_tensor(&mut w, "v", v)?;
                }
            }
            None => w.write_u8(0)?,
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io_at(path, e))?;
    Ok(())
}

/// Read a weight file back into a fresh store plus optional optimizer state.
pub fn load_weights(path: &Path) -> Result<(ParamStore, Option<AdamState>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io_at(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("{path:?}: bad magic")));
    }
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut store = ParamStore::new();
    for _ in 0..n {
        let (name, arr) = read_tensor(&mut r)?;
        store.add(name, arr);
    }
    let has_opt = r.read_u8()? != 0;
    let opt = if has_opt {
        let step_count = r.read_u64::<LittleEndian>()?;
        let mut m = Vec::with_capacity(n);
        let mut v = Vec::with_capacity(n);
        for _ in 0..n {
            m.push(read_tensor(&mut r)?.1);
            v.push(read_tensor(&mut r)?.1);
        }
        Some(AdamState { step_count, m, v })
    } else {
        None
    };
    Ok((store, opt))
}

/// RNG stream snapshots captured at a checkpoint boundary.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainRngState {
    pub batch: RngState,
    pub noise: RngState,
    pub timesteps: RngState,
    pub augment: RngState,
}

/// What a training run persists per checkpoint, next to the weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub epoch: usize,
    pub val_loss: f64,
    #[serde(default)]
    pub mean_jsd: Option<f64>,
    pub config_hash: String,
    #[serde(default)]
    pub generator: Option<PairedGeneratorConfig>,
    #[serde(default)]
    pub sr: Option<SRConfig>,
    pub schedule_t: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    #[serde(default)]
    pub rng_state: Option<TrainRngState>,
    #[serde(default)]
    pub global_step: usize,
}

/// Metadata view of one saved checkpoint, as consumed by weight selection.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub epoch: usize,
    pub weights_uri: PathBuf,
    pub val_loss: f64,
    pub mean_jsd: Option<f64>,
}

impl CheckpointRecord {
    pub fn dir(&self) -> &Path {
        self.weights_uri.parent().expect("weights live in a checkpoint dir")
    }
}

pub fn manifest_path(ckpt_dir: &Path) -> PathBuf {
    ckpt_dir.join("manifest.json")
}

pub fn weights_path(ckpt_dir: &Path) -> PathBuf {
    ckpt_dir.join("weights.bin")
}

pub fn discriminator_weights_path(ckpt_dir: &Path) -> PathBuf {
    ckpt_dir.join("disc.bin")
}

pub fn write_manifest(ckpt_dir: &Path, manifest: &CheckpointManifest) -> Result<()> {
    crate::dataset::write_json_atomic(&manifest_path(ckpt_dir), manifest)
}

pub fn read_manifest(ckpt_dir: &Path) -> Result<CheckpointManifest> {
    let path = manifest_path(ckpt_dir);
    let body = std::fs::read_to_string(&path).map_err(|e| Error::io_at(&path, e))?;
    Ok(serde_json::from_str(&body)?)
}

/// Scan a run directory for `ckpt_*` subdirectories, ordered by epoch.
pub fn list_checkpoints(run_dir: &Path) -> Result<Vec<CheckpointRecord>> {
    let mut out = Vec::new();
    if !run_dir.exists() {
        return Ok(out);
    }
    for entry in std::fs::read_dir(run_dir).map_err(|e| Error::io_at(run_dir, e))? {
        let entry = entry.map_err(|e| Error::io_at(run_dir, e))?;
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|s| s.to_str()) else {
            continue;
        };
        if !path.is_dir() || !name.starts_with("ckpt_") {
            continue;
        }
        let manifest = read_manifest(&path)?;
        out.push(CheckpointRecord {
            epoch: manifest.epoch,
            weights_uri: weights_path(&path),
            val_loss: manifest.val_loss,
            mean_jsd: manifest.mean_jsd,
        });
    }
    out.sort_by_key(|r| r.epoch);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, Stream};
    use tempfile::tempdir;

    #[test]
    fn weights_round_trip_bitwise() {
        let mut rng = rng::derive(3, Stream::ParamInit, 20);
        let mut store = ParamStore::new();
        store.add("a.w", rng::randn::<IxDyn, _>(&mut rng, IxDyn(&[3, 2, 3, 3])));
        store.add("a.b", rng::randn::<IxDyn, _>(&mut rng, IxDyn(&[3])));
        let mut opt = Adam::new(&store, 1e-3);
        opt.step_count = 17;
        let dir = tempdir().unwrap();
        let path = dir.path().join("weights.bin");
        save_weights(&path, &store, Some(&AdamState::capture(&opt))).unwrap();
        let (back, opt_state) = load_weights(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (a, b) in store.iter().zip(back.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        let opt_state = opt_state.unwrap();
        assert_eq!(opt_state.step_count, 17);
        assert_eq!(opt_state.m.len(), 2);
    }

    #[test]
    fn manifest_round_trip_and_listing() {
        let dir = tempdir().unwrap();
        for epoch in [5usize, 1, 9] {
            let ck = dir.path().join(format!("ckpt_{epoch}"));
            std::fs::create_dir_all(&ck).unwrap();
            write_manifest(
                &ck,
                &CheckpointManifest {
                    epoch,
                    val_loss: epoch as f64 * 0.1,
                    mean_jsd: None,
                    config_hash: "h".into(),
                    generator: None,
                    sr: None,
                    schedule_t: 10,
                    beta_start: 1e-4,
                    beta_end: 0.02,
                    rng_state: None,
                    global_step: epoch * 3,
                },
            )
            .unwrap();
            std::fs::write(weights_path(&ck), b"placeholder").unwrap();
        }
        let records = list_checkpoints(dir.path()).unwrap();
        assert_eq!(records.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![1, 5, 9]);
        assert!(records[0].weights_uri.ends_with("ckpt_1/weights.bin"));
    }
}
