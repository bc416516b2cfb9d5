use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::net::Model;
use crate::binio;
use crate::error::{bail, Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 4] = b"MHAN";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u32 = 1;
const DTYPE_F64: u32 = 2;
const WHAT: &str = "checkpoint";

/// Writes config and every parameter buffer. Data is stored as f64 so a
/// save/load cycle reproduces the parameters bit for bit.
pub fn write_checkpoint(w: &mut impl Write, model: &Model) -> Result<()> {
    w.write_all(MAGIC)?;
    binio::write_u32(w, CHECKPOINT_VERSION)?;
    binio::write_u32(w, DTYPE_F64)?;
    let cfg = serde_json::to_string(&model.cfg)?;
    binio::write_u32(w, binio::to_u32(cfg.len(), "config length")?)?;
    w.write_all(cfg.as_bytes())?;
    let store = &model.store;
    binio::write_u32(w, binio::to_u32(store.len(), "parameter count")?)?;
    for id in store.ids() {
        let name = store.name(id);
        binio::write_u32(w, binio::to_u32(name.len(), "name length")?)?;
        w.write_all(name.as_bytes())?;
        let t = store.get(id);
        binio::write_u32(w, binio::to_u32(t.shape().len(), "rank")?)?;
        for &d in t.shape() {
            binio::write_u32(w, binio::to_u32(d, "extent")?)?;
        }
        for &v in t.data() {
            binio::write_f64(w, v)?;
        }
    }
    Ok(())
}

/// Rebuilds the model from its stored config and overwrites every buffer.
pub fn read_checkpoint(r: &mut impl Read) -> Result<Model> {
    binio::read_magic(r, MAGIC, WHAT)?;
    let version = binio::read_u32(r, WHAT)?;
    if version != CHECKPOINT_VERSION {
        bail!(Format, "checkpoint version {} is not supported", version);
    }
    let dtype = binio::read_u32(r, WHAT)?;
    if dtype != DTYPE_F32 && dtype != DTYPE_F64 {
        bail!(Format, "unknown checkpoint dtype code {}", dtype);
    }
    let cfg_len = binio::read_u32(r, WHAT)? as usize;
    let cfg_bytes = binio::read_bytes(r, cfg_len, WHAT)?;
    let cfg: ModelConfig =
        serde_json::from_slice(&cfg_bytes).map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let mut model = Model::new(cfg, 0)?;
    let count = binio::read_u32(r, WHAT)? as usize;
    if count != model.store.len() {
        bail!(
            Format,
            "checkpoint holds {} buffers, config implies {}",
            count,
            model.store.len()
        );
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = binio::read_u32(r, WHAT)? as usize;
        let name = String::from_utf8(binio::read_bytes(r, name_len, WHAT)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let rank = binio::read_u32(r, WHAT)? as usize;
        let shape = (0..rank)
            .map(|_| binio::read_u32(r, WHAT).map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = if dtype == DTYPE_F64 {
            (0..n).map(|_| binio::read_f64(r, WHAT)).collect::<Result<Vec<_>>>()?
        } else {
            binio::read_f32s(r, n, WHAT)?.into_iter().map(f64::from).collect()
        };
        let Some(id) = model.store.find(&name) else {
            bail!(Format, "checkpoint parameter {} is not part of the model", name);
        };
        if !seen.insert(id) {
            bail!(Format, "checkpoint parameter {} appears twice", name);
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
        model
            .store
            .set(id, t)
            .map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
    }
    binio::expect_eof(r, WHAT)?;
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    Ok(w.flush()?)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}
