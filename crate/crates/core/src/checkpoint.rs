//! Binary tensor checkpoints and the model sidecar.
//!
//! Layout: `UMOE`, version `u32`, tensor count `u32`, then per tensor the
//! name length `u16`, UTF-8 name, rank `u8`, dims as `u32` and the data as
//! `f32`, all little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::connectors::{self, ConnectorConfig};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraSpec};
use crate::model::{init_llm, ExpertSource, UniMoe};
use crate::moe::{LayerLayout, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"UMOE";
pub const VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "model.umoe";
pub const META_FILE: &str = "model.json";

pub fn write_tensors<W: Write>(w: &mut W, tensors: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let count = u32::try_from(tensors.len()).map_err(|_| Error::Checkpoint("too many tensors".into()))?;
    w.write_all(&count.to_le_bytes())?;
    for (name, t) in tensors {
        let len = u16::try_from(name.len()).map_err(|_| Error::Checkpoint(format!("name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::Checkpoint(format!("rank too large: {name}")))?;
        w.write_all(&[rank])?;
        for &d in t.shape() {
            let d = u32::try_from(d).map_err(|_| Error::Checkpoint(format!("dim too large: {name}")))?;
            w.write_all(&d.to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
    Ok(b)
}

pub fn read_tensors<R: Read>(r: &mut R) -> Result<Vec<(String, Tensor<f32>)>> {
    let magic: [u8; 4] = read_exact(r)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}")));
    }
    let version = u32::from_le_bytes(read_exact(r)?);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = u32::from_le_bytes(read_exact(r)?);
    let mut out = Vec::with_capacity(count.min(1 << 16) as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(r)?) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|e| Error::Checkpoint(format!("truncated name: {e}")))?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let [rank] = read_exact::<_, 1>(r)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_le_bytes(read_exact(r)?));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after last tensor".into()));
    }
    Ok(out)
}

/// Everything besides tensor data needed to rebuild a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub stage: String,
    pub config: ModelConfig,
    pub connectors: ConnectorConfig,
    pub layout: LayerLayout,
    pub adapters: BTreeMap<String, LoraSpec>,
    pub frozen: Vec<String>,
    pub experts: Vec<ExpertSource>,
}

/// Shapes a model with this metadata must have.
pub fn expected_shapes(meta: &ModelMeta) -> Result<BTreeMap<String, Vec<usize>>> {
    meta.config.validate()?;
    if meta.layout.is_moe.len() != meta.config.layers {
        return Err(Error::Checkpoint("layout length does not match layer count".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f32>::new();
    init_llm(&meta.config, &meta.layout, &mut store, &mut rng);
    connectors::init_connectors(&meta.connectors, meta.config.width, &mut store, &mut rng);
    let mut shapes: BTreeMap<String, Vec<usize>> = store.iter().map(|(k, p)| (k.clone(), p.value.shape().to_vec())).collect();
    for (target, spec) in &meta.adapters {
        let s = shapes
            .get(target)
            .ok_or_else(|| Error::Checkpoint(format!("adapter on unknown weight `{target}`")))?
            .clone();
        shapes.insert(spec.a_name(target), vec![spec.rank, s[0]]);
        shapes.insert(spec.b_name(target), vec![s[1], spec.rank]);
    }
    Ok(shapes)
}

pub fn save_model<S: Real>(dir: &Path, model: &UniMoe<S>, stage: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let tensors: Vec<(String, Tensor<f32>)> = model.store.iter().map(|(k, p)| (k.clone(), p.value.cast())).collect();
    let ckpt = dir.join(CHECKPOINT_FILE);
    let mut buf = Vec::new();
    write_tensors(&mut buf, &tensors)?;
    fs::write(&ckpt, buf)?;
    let meta = ModelMeta {
        stage: stage.to_string(),
        config: model.config.clone(),
        connectors: model.connectors.clone(),
        layout: model.layout.clone(),
        adapters: model.adapters.clone(),
        frozen: model.store.iter().filter(|(_, p)| p.frozen).map(|(k, _)| k.clone()).collect(),
        experts: model.experts.clone(),
    };
    let meta_path = dir.join(META_FILE);
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(vec![ckpt, meta_path])
}

/// Loads a model directory, checking every tensor against the shapes its
/// metadata implies.
pub fn load_model(dir: &Path) -> Result<(UniMoe<f32>, ModelMeta)> {
    let meta: ModelMeta = serde_json::from_str(&fs::read_to_string(dir.join(META_FILE))?)?;
    let bytes = fs::read(dir.join(CHECKPOINT_FILE))?;
    let tensors = read_tensors(&mut bytes.as_slice())?;
    let expected = expected_shapes(&meta)?;
    let mut store = ParamStore::new();
    for (name, t) in tensors {
        match expected.get(&name) {
            None => return Err(Error::Checkpoint(format!("unexpected tensor `{name}`"))),
            Some(s) if s.as_slice() != t.shape() => {
                return Err(Error::Checkpoint(format!(
                    "`{name}` has shape {:?}, expected {s:?}",
                    t.shape()
                )))
            }
            Some(_) => {}
        }
        if store.contains(&name) {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        store.insert(name, t, false);
    }
    if let Some(missing) = expected.keys().find(|k| !store.contains(k)) {
        return Err(Error::Checkpoint(format!("missing tensor `{missing}`")));
    }
    for name in &meta.frozen {
        store.set_frozen(name, true)?;
    }
    let adapters: AdapterSet = meta.adapters.clone();
    let model = UniMoe {
        config: meta.config.clone(),
        connectors: meta.connectors.clone(),
        layout: meta.layout.clone(),
        store,
        adapters,
        experts: meta.experts.clone(),
    };
    Ok((model, meta))
}

/// SHA-256 of a checkpoint file.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(fs::read(path)?)))
}
