//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MUBERTCK"  u32 version
//! u64 config length, config text (UTF-8 `key = value` lines)
//! u32 tensor count
//! per tensor: u32 name length, name, u32 rank, u64 extents..., f32 values...
//! ```

use std::fs;
use std::path::Path;

use mubert_tensor::Tensor;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::MuBert;

pub const MAGIC: &[u8; 8] = b"MUBERTCK";
pub const VERSION: u32 = 1;

pub fn encode(config: &TrainConfig, model: &MuBert<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let text = config.to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    let params = model.store.params();
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&(p.value.ndim() as u32).to_le_bytes());
        for &e in p.value.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::data(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let n = self.u64()? as usize;
        if n > self.bytes.len() {
            return Err(Error::data(format!("checkpoint {what} length {n} exceeds file size")));
        }
        Ok(n)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(TrainConfig, MuBert<f32>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::data("not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::data(format!("unsupported checkpoint version {version}")));
    }
    let n = r.len("config")?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::data("checkpoint config is not UTF-8"))?;
    let config = TrainConfig::parse(text)?;
    let count = r.u32()? as usize;
    let mut named = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| Error::data("parameter name is not UTF-8"))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.len("extent")?);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| Error::data("tensor too large"))?)?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::data(format!("{} trailing bytes after checkpoint", bytes.len() - r.pos)));
    }
    let mut model = MuBert::<f32>::new(config.model.clone(), 0)?;
    if named.len() != model.store.len() {
        return Err(Error::Integrity(format!(
            "checkpoint holds {} tensors, model layout has {}",
            named.len(),
            model.store.len()
        )));
    }
    model.store.load_named(&named)?;
    Ok((config, model))
}

pub fn save(path: impl AsRef<Path>, config: &TrainConfig, model: &MuBert<f32>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(config, model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<(TrainConfig, MuBert<f32>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.in_file(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn small() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.apply("model.height = 16\nmodel.width = 16\nmodel.d = 8\nmodel.n_heads = 2\nmodel.enc_layers = 1\nmodel.dec_layers = 1\ngen.subject_min = 0.5\ngen.subject_max = 0.5\ngen.regions_max = 2").unwrap();
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn round_trip_preserves_parameters() {
        let cfg = small();
        let model = MuBert::<f32>::new(cfg.model.clone(), 5).unwrap().with_classifier(3, 1).unwrap();
        let mut cfg = cfg;
        cfg.model.classes = 3;
        let bytes = encode(&cfg, &model);
        let (c2, m2) = decode(&bytes).unwrap();
        assert_eq!(c2, cfg);
        for (a, b) in model.store.params().iter().zip(m2.store.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn corrupt_inputs() {
        let cfg = small();
        let model = MuBert::<f32>::new(cfg.model.clone(), 5).unwrap();
        let bytes = encode(&cfg, &model);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut other = cfg.clone();
        other.model = ModelConfig { d: 16, ..cfg.model.clone() };
        let mismatched = encode(&other, &model);
        assert!(matches!(decode(&mismatched), Err(Error::Integrity(_))));
    }
}
