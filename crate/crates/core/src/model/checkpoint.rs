//! Versioned binary checkpoints.
//!
//! Layout: magic "YONOCKPT", u32 format version, a flat-text config block
//! (u32 length + bytes), then named parameter tensors: u32 name length,
//! name bytes, u32 rank, u32 dims, little-endian f32 data. Round-trips are
//! bitwise exact.

use std::io::Read;
use std::path::Path;

use super::{Model, ParamStore};
use crate::config::{parse_config, render_config, TrainConfig};
use crate::error::{Error, Result};

pub const CKPT_MAGIC: &[u8; 8] = b"YONOCKPT";
const CKPT_VERSION: u32 = 1;

fn w_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

pub fn save_checkpoint(path: &Path, model: &Model, train: &TrainConfig) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    w_u32(&mut out, CKPT_VERSION);
    let cfg = render_config(&model.config, train);
    w_u32(&mut out, cfg.len() as u32);
    out.extend_from_slice(cfg.as_bytes());
    w_u32(&mut out, model.params.len() as u32);
    for id in 0..model.params.len() {
        let name = model.params.name(id).as_bytes();
        w_u32(&mut out, name.len() as u32);
        out.extend_from_slice(name);
        let shape = model.params.shape(id);
        w_u32(&mut out, shape.len() as u32);
        for &d in shape {
            w_u32(&mut out, d as u32);
        }
        for &v in model.params.values(id) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(Error::format("checkpoint", "unexpected end of file"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainConfig)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { buf: &buf, at: 0 };
    if r.take(8)? != CKPT_MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported version {version}"),
        ));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|_| Error::format("checkpoint", "config block is not utf-8"))?;
    let (config, train) = parse_config(cfg_text)?;

    let n_tensors = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("checkpoint", "tensor name is not utf-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let count: usize = shape.iter().product();
        let bytes = r.take(count * 4)?;
        let mut data = Vec::with_capacity(count);
        for c in bytes.chunks_exact(4) {
            data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        params.add(name, shape, data);
    }
    if r.at != buf.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    // Cross-check the parameter layout against a fresh init of the config.
    let reference = Model::init(config.clone(), 0)?;
    for id in 0..reference.params.len() {
        let name = reference.params.name(id);
        let found = params.lookup(name).ok_or_else(|| {
            Error::format("checkpoint", format!("missing tensor {name}"))
        })?;
        if params.shape(found) != reference.params.shape(id) {
            return Err(Error::format(
                "checkpoint",
                format!("tensor {name} has shape {:?}", params.shape(found)),
            ));
        }
    }
    if params.len() != reference.params.len() {
        return Err(Error::format("checkpoint", "unexpected extra tensors"));
    }
    Ok((Model { config, params }, train))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg = ModelConfig {
            vocab_size: 31,
            d_model: 16,
            n_heads: 2,
            ..ModelConfig::default()
        };
        let model = Model::init(cfg, 11).unwrap();
        let train = TrainConfig::default();
        save_checkpoint(&path, &model, &train).unwrap();
        let bytes1 = std::fs::read(&path).unwrap();

        let (loaded, train2) = load_checkpoint(&path).unwrap();
        assert_eq!(train, train2);
        assert!(model.params.bitwise_eq(&loaded.params));

        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&path2, &loaded, &train2).unwrap();
        let bytes2 = std::fs::read(&path2).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
