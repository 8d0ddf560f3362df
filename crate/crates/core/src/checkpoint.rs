//! Single-file binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic                  8 bytes   "MGTLAB01"
//! header_len             u32
//! header                 header_len bytes of UTF-8 JSON:
//!                        { "schema_version", "run", "vocab" }
//! n_blocks               u32
//! n_blocks times:
//!   name_len  u32, name  UTF-8
//!   ndim      u32, dims  ndim x u64
//!   values    product(dims) x f64
//! has_optimizer          u8 (0 or 1)
//! if 1:
//!   step                 u64
//!   per parameter block, in the same order as above:
//!     m values           product(dims) x f64
//!     v values           product(dims) x f64
//! ```
//!
//! Parameter blocks are keyed by name; loading rebuilds the model from the
//! header's run config and then fills each named parameter, erroring on
//! unknown names, missing names, or shape mismatches.

use crate::config::RunConfig;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::train::Model;
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"MGTLAB01";
pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    run: RunConfig,
    vocab: Vec<String>,
}

pub fn save(
    path: &Path,
    model: &Model,
    vocab: &Vocab,
    run: &RunConfig,
    optimizer: Option<&AdamState>,
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    w.write_all(MAGIC).map_err(io_err)?;
    let header = Header {
        schema_version: CHECKPOINT_SCHEMA_VERSION,
        run: run.clone(),
        vocab: vocab.words().to_vec(),
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    w.write_all(&(header_json.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_json).map_err(io_err)?;

    let ids: Vec<crate::params::ParamId> = model.store.ids().collect();
    w.write_all(&(ids.len() as u32).to_le_bytes())
        .map_err(io_err)?;
    for &id in &ids {
        let name = model.store.name(id).as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        w.write_all(name).map_err(io_err)?;
        let t = model.store.tensor(id);
        w.write_all(&(t.shape.len() as u32).to_le_bytes())
            .map_err(io_err)?;
        for &d in &t.shape {
            w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
        }
        for v in &t.values {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }

    match optimizer {
        None => w.write_all(&[0u8]).map_err(io_err)?,
        Some(state) => {
            w.write_all(&[1u8]).map_err(io_err)?;
            w.write_all(&state.step_count().to_le_bytes())
                .map_err(io_err)?;
            for &id in &ids {
                let (m, v) = state.moments(id);
                for x in m {
                    w.write_all(&x.to_le_bytes()).map_err(io_err)?;
                }
                for x in v {
                    w.write_all(&x.to_le_bytes()).map_err(io_err)?;
                }
            }
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub struct Loaded {
    pub model: Model,
    pub vocab: Vocab,
    pub run: RunConfig,
    pub optimizer: Option<AdamState>,
}

pub fn load(path: &Path) -> Result<Loaded> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path.display().to_string(), e);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}; not a checkpoint file",
            String::from_utf8_lossy(&magic)
        )));
    }
    let header_len = read_u32(&mut r, path)? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(io_err)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported schema version {} (expected {CHECKPOINT_SCHEMA_VERSION})",
            header.schema_version
        )));
    }

    let mut model = Model::new(&header.run)?;
    let mut vocab = Vocab::from_words(header.vocab.clone());
    vocab.reindex();

    let n_blocks = read_u32(&mut r, path)? as usize;
    if n_blocks != model.store.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {n_blocks} parameter blocks, model needs {}",
            model.store.len()
        )));
    }
    let mut ids_in_file_order = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let name_len = read_u32(&mut r, path)? as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(io_err)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|e| Error::Checkpoint(format!("bad block name: {e}")))?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf).map_err(io_err)?;
            shape.push(u64::from_le_bytes(buf) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut values = Vec::with_capacity(numel);
        let mut buf = [0u8; 8];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(io_err)?;
            values.push(f64::from_le_bytes(buf));
        }
        let id = model
            .store
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter block {name:?}")))?;
        if model.store.tensor(id).shape != shape {
            return Err(Error::Checkpoint(format!(
                "parameter {name:?} has shape {:?} in file, {:?} in model",
                shape,
                model.store.tensor(id).shape
            )));
        }
        model.store.set_values(id, values);
        ids_in_file_order.push(id);
    }

    let mut flag = [0u8; 1];
    r.read_exact(&mut flag).map_err(io_err)?;
    let optimizer = if flag[0] == 1 {
        let mut buf = [0u8; 8];
        r.read_exact(&mut buf).map_err(io_err)?;
        let step = u64::from_le_bytes(buf);
        let mut state = AdamState::new(&model.store);
        for &id in &ids_in_file_order {
            let n = model.store.tensor(id).numel();
            let read_vec = |r: &mut BufReader<std::fs::File>| -> Result<Vec<f64>> {
                let mut out = Vec::with_capacity(n);
                let mut buf = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut buf).map_err(io_err)?;
                    out.push(f64::from_le_bytes(buf));
                }
                Ok(out)
            };
            let m = read_vec(&mut r)?;
            let v = read_vec(&mut r)?;
            state.restore(id, m, v, step);
        }
        Some(state)
    } else {
        None
    };

    Ok(Loaded {
        model,
        vocab,
        run: header.run,
        optimizer,
    })
}

fn read_u32(r: &mut BufReader<std::fs::File>, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(u32::from_le_bytes(buf))
}
