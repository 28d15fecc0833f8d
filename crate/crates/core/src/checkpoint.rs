//! Binary model checkpoints.
//!
//! Layout (little endian): magic `TSDN`, `u32` version, `u32` length plus
//! the network config as JSON, `u32` tensor count, then per tensor a
//! `u32` name length, the UTF-8 name, a `u8` dtype tag, `u32` rank, `u32`
//! dims and the `f32` values.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{NetworkConfig, TsdnModel};
use crate::tensor::{Real, Tensor};

const MAGIC: &[u8; 4] = b"TSDN";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 1;

pub fn encode<T: Real>(model: &TsdnModel<T>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(model.config())?;
    put_u32(&mut out, cfg.len());
    out.extend_from_slice(&cfg);
    put_u32(&mut out, model.params().len());
    for (spec, t) in model.specs().iter().zip(model.params()) {
        put_u32(&mut out, spec.name.len());
        out.extend_from_slice(spec.name.as_bytes());
        out.push(DTYPE_F32);
        put_u32(&mut out, t.shape().len());
        for &d in t.shape() {
            put_u32(&mut out, d);
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<TsdnModel<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a TSDN checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let config: NetworkConfig = serde_json::from_slice(r.take(cfg_len)?)?;
    let skeleton = TsdnModel::<T>::new(&config, 0)?;
    let count = r.u32()? as usize;
    if count != skeleton.specs().len() {
        return Err(Error::Format(format!(
            "checkpoint holds {count} tensors, architecture needs {}",
            skeleton.specs().len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for spec in skeleton.specs() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        if name != spec.name {
            return Err(Error::Format(format!("expected tensor {}, found {name}", spec.name)));
        }
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F32 {
            return Err(Error::Format(format!("{name}: unknown dtype tag {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != spec.shape {
            return Err(Error::Format(format!("{name}: shape {shape:?}, expected {:?}", spec.shape)));
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        params.push(Tensor::new(shape, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    TsdnModel::from_params(&config, params)
}

pub fn save<T: Real>(model: &TsdnModel<T>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)?).map_err(|e| Error::io(path, e))
}

pub fn load<T: Real>(path: &Path) -> Result<TsdnModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::Format("checkpoint is truncated".into()));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = NetworkConfig {
            use_skips_dcd_a: false,
            ..NetworkConfig::default()
        };
        let m = TsdnModel::<f32>::new(&cfg, 3).unwrap();
        let bytes = encode(&m).unwrap();
        let back: TsdnModel<f32> = decode(&bytes).unwrap();
        assert_eq!(back.config(), m.config());
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.shape(), b.shape());
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let m = TsdnModel::<f32>::new(&NetworkConfig::default(), 1).unwrap();
        let bytes = encode(&m).unwrap();
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode::<f32>(&long).is_err());
    }
}
