//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic   8 bytes  "FPDCKPT1"
//! version u32
//! meta    u64 length + JSON (model config, class table, iteration)
//! count   u64 parameter count
//! repeat  name (u64 len + utf8), rows u64, cols u64, f64 data row-major
//! ```
//! Parameters are written in sorted name order, so identical model state
//! produces identical bytes.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::detector::{Model, ModelConfig};
use crate::error::{FpdError, Result};
use crate::optim::ParamStore;
use crate::types::ClassId;

const MAGIC: &[u8; 8] = b"FPDCKPT1";
const VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub classes: Vec<u32>,
    /// Training iterations completed when this checkpoint was written.
    pub iteration: usize,
}

pub fn save_checkpoint(model: &Model, iteration: usize, path: &Path) -> Result<()> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        classes: model.classes.iter().map(|c| c.0).collect(),
        iteration,
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| FpdError::Format(format!("checkpoint meta: {e}")))?;

    let mut f = fs::File::create(path)?;
    f.write_all(MAGIC)?;
    f.write_all(&VERSION.to_le_bytes())?;
    f.write_all(&(meta_json.len() as u64).to_le_bytes())?;
    f.write_all(&meta_json)?;
    f.write_all(&(model.store.len() as u64).to_le_bytes())?;
    for (name, value) in model.store.iter() {
        let bytes = name.as_bytes();
        f.write_all(&(bytes.len() as u64).to_le_bytes())?;
        f.write_all(bytes)?;
        f.write_all(&(value.nrows() as u64).to_le_bytes())?;
        f.write_all(&(value.ncols() as u64).to_le_bytes())?;
        for v in value.iter() {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(f: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    f.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, usize)> {
    let mut f = fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(FpdError::Format("not a checkpoint file".to_string()));
    }
    let mut vb = [0u8; 4];
    f.read_exact(&mut vb)?;
    let version = u32::from_le_bytes(vb);
    if version != VERSION {
        return Err(FpdError::Format(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }
    let meta_len = read_u64(&mut f)? as usize;
    let mut meta_bytes = vec![0u8; meta_len];
    f.read_exact(&mut meta_bytes)?;
    let meta: CheckpointMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| FpdError::Format(format!("checkpoint meta parse: {e}")))?;

    let count = read_u64(&mut f)? as usize;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = read_u64(&mut f)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        f.read_exact(&mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| FpdError::Format(format!("checkpoint name: {e}")))?;
        let rows = read_u64(&mut f)? as usize;
        let cols = read_u64(&mut f)? as usize;
        let mut data = vec![0.0f64; rows * cols];
        let mut buf = [0u8; 8];
        for v in data.iter_mut() {
            f.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        store.insert(
            &name,
            Array2::from_shape_vec((rows, cols), data)
                .map_err(|e| FpdError::Format(format!("checkpoint shape: {e}")))?,
        );
    }

    let model = Model {
        config: meta.config,
        classes: meta.classes.into_iter().map(ClassId).collect(),
        store,
    };
    Ok((model, meta.iteration))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Variant;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let cfg = ModelConfig::desk_default(8, Variant::Full);
        let classes: Vec<ClassId> = (0..4).map(ClassId).collect();
        let model = Model::new(cfg, classes, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, 17, &path).unwrap();
        let (loaded, iter) = load_checkpoint(&path).unwrap();
        assert_eq!(iter, 17);
        assert_eq!(loaded.classes, model.classes);
        assert_eq!(loaded.store.len(), model.store.len());
        for (name, value) in model.store.iter() {
            assert_eq!(loaded.store.get(name), value, "param {name}");
        }
        // byte-identical on rewrite
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&loaded, 17, &path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        fs::write(&path, b"FPDCKPT1\x01\x00").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
