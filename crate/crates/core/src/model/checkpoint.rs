//! Binary checkpoint: magic, version, a JSON segment with the configuration and
//! scaler, then every parameter in declaration order as a shape header
//! followed by little-endian `f64` values.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::data::Scaler;
use crate::error::{PastnError, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"PASTNCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Trained parameters, the scaler they expect, and the graph size.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub scaler: Scaler,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    num_nodes: usize,
    scaler: Scaler,
}

fn corrupt(msg: impl Into<String>) -> PastnError {
    PastnError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(mut w: W, ck: &Checkpoint) -> Result<()> {
    let header = Header { config: ck.params.config.clone(), num_nodes: ck.params.num_nodes, scaler: ck.scaler };
    let json = serde_json::to_vec(&header)?;
    w.write_all(MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    w.write_all(&(ck.params.store.len() as u64).to_le_bytes())?;
    for p in ck.params.store.iter() {
        let shape = p.value.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * p.value.numel());
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    w.flush()?;
    Ok(())
}

fn take<const K: usize>(r: &mut impl Read) -> Result<[u8; K]> {
    let mut b = [0u8; K];
    r.read_exact(&mut b).map_err(|e| corrupt(format!("truncated file: {e}")))?;
    Ok(b)
}

fn take_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(take::<8>(r)?))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Checkpoint> {
    if &take::<8>(&mut r)? != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(take::<4>(&mut r)?);
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(format!("unsupported version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let json_len = take_u64(&mut r)? as usize;
    if json_len > 1 << 24 {
        return Err(corrupt("header segment too large"));
    }
    let mut json = vec![0u8; json_len];
    r.read_exact(&mut json).map_err(|e| corrupt(format!("truncated header: {e}")))?;
    let header: Header = serde_json::from_slice(&json)?;
    let mut params = ModelParams::init(&header.config, header.num_nodes, 0)?;
    let count = take_u64(&mut r)? as usize;
    if count != params.store.len() {
        return Err(corrupt(format!("expected {} tensors, found {count}", params.store.len())));
    }
    let mut values = Vec::with_capacity(count);
    for p in params.store.iter() {
        let rank = u32::from_le_bytes(take::<4>(&mut r)?) as usize;
        let shape: Vec<usize> = (0..rank).map(|_| take_u64(&mut r).map(|d| d as usize)).collect::<Result<_>>()?;
        if shape != p.value.shape() {
            return Err(corrupt(format!("{}: stored shape {shape:?}, expected {:?}", p.name, p.value.shape())));
        }
        let numel = p.value.numel();
        let mut raw = vec![0u8; 8 * numel];
        r.read_exact(&mut raw).map_err(|e| corrupt(format!("truncated tensor {}: {e}", p.name)))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        values.push(Tensor::new(shape, data)?);
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(corrupt("trailing bytes after last tensor"));
    }
    params.store.load_values(values)?;
    Ok(Checkpoint { params, scaler: header.scaler })
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_checkpoint(std::io::BufWriter::new(f), ck)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let f = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = ModelConfig::tiny();
        let params = ModelParams::init(&cfg, 4, 11).unwrap();
        let ck = Checkpoint { params, scaler: Scaler { mean: 1.25, std: 0.1 + 0.2, num_nodes: 4 } };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.params.store.iter().zip(ck.params.store.iter()) {
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn rejects_damage() {
        let params = ModelParams::init(&ModelConfig::tiny(), 3, 1).unwrap();
        let ck = Checkpoint { params, scaler: Scaler { mean: 0.0, std: 1.0, num_nodes: 3 } };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ck).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(bad.as_slice()), Err(PastnError::Checkpoint(_))));
        let mut long = buf;
        long.push(0);
        assert!(read_checkpoint(long.as_slice()).is_err());
    }
}
