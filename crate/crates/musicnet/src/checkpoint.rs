//! Versioned binary checkpoints: a JSON metadata header followed by the
//! named parameter arrays as raw IEEE-754 bits, so a save/load round trip
//! reproduces every value exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{CorrelationKind, Task};
use crate::data::Normalizer;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::spectral::CorrelationMatrix;

const MAGIC: &[u8; 4] = b"MSCN";
const VERSION: u32 = 1;

/// Everything an evaluation needs besides the parameter arrays.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub task: Task,
    pub model: ModelConfig,
    pub normalizer: Normalizer,
    pub correlation_kind: CorrelationKind,
    pub correlation: CorrelationMatrix,
    pub num_scales: usize,
    pub max_refs: usize,
    pub seed: u64,
}

pub fn save(path: &Path, meta: &CheckpointMeta, params: &ModelParams) -> Result<()> {
    let header = serde_json::to_vec(meta)
        .map_err(|e| Error::data(format!("cannot encode checkpoint metadata: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&(params.store.len() as u64).to_le_bytes());
    for i in 0..params.store.len() {
        let name = params.store.name(i).as_bytes();
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name);
        let shape = &params.store.tensor(i).shape;
        out.extend_from_slice(&(shape.len() as u64).to_le_bytes());
        for &dim in shape {
            out.extend_from_slice(&(dim as u64).to_le_bytes());
        }
        let data = params.store.data(i);
        out.extend_from_slice(&(data.len() as u64).to_le_bytes());
        for &v in data {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(Error::data(format!("checkpoint truncated while reading {what}")));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

fn take_u64(buf: &mut &[u8], what: &str) -> Result<u64> {
    let bytes = take(buf, 8, what)?;
    Ok(u64::from_le_bytes(bytes.try_into().expect("slice length checked")))
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, ModelParams)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;
    let mut buf = raw.as_slice();
    if take(&mut buf, 4, "magic")? != MAGIC {
        return Err(Error::data(format!("{} is not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut buf, 4, "version")?.try_into().expect("len checked"));
    if version != VERSION {
        return Err(Error::data(format!(
            "checkpoint version {version} unsupported (expected {VERSION})"
        )));
    }
    let header_len = take_u64(&mut buf, "header length")? as usize;
    let header = take(&mut buf, header_len, "header")?;
    let meta: CheckpointMeta = serde_json::from_slice(header)
        .map_err(|e| Error::data(format!("corrupt checkpoint metadata: {e}")))?;

    // Rebuild the parameter layout from the recorded dimensions, then
    // overwrite every array with the stored bits, matched by name.
    let mut params = ModelParams::init(meta.model, meta.seed);
    let count = take_u64(&mut buf, "parameter count")? as usize;
    if count != params.store.len() {
        return Err(Error::data(format!(
            "checkpoint has {count} parameters, model layout expects {}",
            params.store.len()
        )));
    }
    for _ in 0..count {
        let name_len = take_u64(&mut buf, "name length")? as usize;
        let name = std::str::from_utf8(take(&mut buf, name_len, "name")?)
            .map_err(|_| Error::data("checkpoint parameter name is not UTF-8"))?
            .to_string();
        let idx = params
            .store
            .index_of(&name)
            .ok_or_else(|| Error::data(format!("checkpoint parameter {name} unknown to this model")))?;
        let rank = take_u64(&mut buf, "shape rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(take_u64(&mut buf, "shape dim")? as usize);
        }
        if shape != params.store.tensor(idx).shape {
            return Err(Error::data(format!(
                "checkpoint parameter {name} has shape {shape:?}, expected {:?}",
                params.store.tensor(idx).shape
            )));
        }
        let len = take_u64(&mut buf, "data length")? as usize;
        if len != params.store.tensor(idx).numel() {
            return Err(Error::data(format!("checkpoint parameter {name} has wrong element count")));
        }
        let dst = params.store.data_mut(idx);
        for v in dst.iter_mut() {
            let bits = take_u64(&mut buf, "element")?;
            *v = f64::from_bits(bits);
        }
    }
    if !buf.is_empty() {
        return Err(Error::data(format!("checkpoint has {} trailing bytes", buf.len())));
    }
    Ok((meta, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn sample() -> (CheckpointMeta, ModelParams) {
        let model = ModelConfig {
            num_heads: 2,
            d_r: 4,
            d_model: 6,
            gru_hidden: 5,
            num_channels: 3,
            num_classes: 2,
        };
        let mut params = ModelParams::init(model, 99);
        // Scribble distinctive values, including negative zero and subnormal
        // neighborhoods, to make bit-exactness meaningful.
        let mut rng = crate::rng::substream(7, "ckpt");
        for i in 0..params.store.len() {
            for v in params.store.data_mut(i) {
                *v = if rng.gen_bool(0.05) { -0.0 } else { rng.gen::<f64>() * 1e-3 };
            }
        }
        let meta = CheckpointMeta {
            task: Task::Classify,
            model,
            normalizer: Normalizer { means: vec![0.1, -0.4, 2.0], stds: vec![1.0, 0.5, 3.0] },
            correlation_kind: CorrelationKind::LspDtw,
            correlation: CorrelationMatrix {
                num_channels: 3,
                weights: vec![1.0, 0.5, 0.2, 0.5, 1.0, 0.8, 0.2, 0.8, 1.0],
                raw_distances: vec![0.0, 1.0, 2.0, 1.0, 0.0, 0.5, 2.0, 0.5, 0.0],
            },
            num_scales: 3,
            max_refs: 48,
            seed: 99,
        };
        (meta, params)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("checkpoint.bin");
        let (meta, params) = sample();
        save(&path, &meta, &params).unwrap();
        let (meta2, params2) = load(&path).unwrap();
        assert_eq!(meta2.num_scales, meta.num_scales);
        assert_eq!(meta2.normalizer, meta.normalizer);
        assert_eq!(meta2.correlation, meta.correlation);
        assert_eq!(params2.store.len(), params.store.len());
        for i in 0..params.store.len() {
            assert_eq!(params2.store.name(i), params.store.name(i));
            let a = params.store.data(i);
            let b = params2.store.data(i);
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "parameter {}", params.store.name(i));
            }
        }
    }

    #[test]
    fn rejects_foreign_and_truncated_files() {
        let dir = tempfile::tempdir().unwrap();
        let bogus = dir.path().join("bogus.bin");
        std::fs::write(&bogus, b"not a checkpoint").unwrap();
        assert!(load(&bogus).is_err());

        let path = dir.path().join("checkpoint.bin");
        let (meta, params) = sample();
        save(&path, &meta, &params).unwrap();
        let full = std::fs::read(&path).unwrap();
        let cut = path.with_extension("cut");
        std::fs::write(&cut, &full[..full.len() - 9]).unwrap();
        assert!(load(&cut).is_err());
    }
}
