//! Checkpoint files.
//!
//! Layout:
//!
//! ```text
//! waitk-checkpoint v1
//! variant=incremental
//! n_layers=2
//! ...                      (one key=value line per config field)
//! params=<count>
//! param <name> <d0>x<d1>...
//! <numel little-endian f64 values>
//! ...                      (one block per parameter)
//! sha256=<hex digest of every preceding byte>
//! ```

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::network::{Seq2Seq, Variant};
use crate::error::{Error, Result};

const MAGIC: &str = "waitk-checkpoint v1";

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn to_bytes(model: &Seq2Seq) -> Vec<u8> {
    let mut out = Vec::new();
    let line = |out: &mut Vec<u8>, s: String| {
        out.extend_from_slice(s.as_bytes());
        out.push(b'\n');
    };
    line(&mut out, MAGIC.to_string());
    line(&mut out, format!("variant={}", model.variant.name()));
    for (k, v) in model.config.to_pairs() {
        line(&mut out, format!("{k}={v}"));
    }
    line(&mut out, format!("params={}", model.params.len()));
    for (name, t) in model.params.iter() {
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        line(&mut out, format!("param {name} {}", dims.join("x")));
        for v in t.values() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(b'\n');
    }
    let digest = hex(&Sha256::digest(&out));
    line(&mut out, format!("sha256={digest}"));
    out
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str> {
        let rest = &self.data[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end]).map_err(|_| Error::Checkpoint("header is not UTF-8".into()))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Checkpoint("truncated parameter block".into()));
        }
        let b = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(b)
    }
}

fn key_value(line: &str) -> Result<(&str, &str)> {
    line.split_once('=')
        .ok_or_else(|| Error::Checkpoint(format!("expected key=value, got {line:?}")))
}

pub fn from_bytes(data: &[u8]) -> Result<Seq2Seq> {
    let body_end = data[..data.len().saturating_sub(1)]
        .iter()
        .rposition(|&b| b == b'\n')
        .map(|p| p + 1)
        .ok_or_else(|| Error::Checkpoint("missing checksum line".into()))?;
    let tail =
        std::str::from_utf8(&data[body_end..]).map_err(|_| Error::Checkpoint("checksum line is not UTF-8".into()))?;
    let stored = tail
        .trim_end()
        .strip_prefix("sha256=")
        .ok_or_else(|| Error::Checkpoint("missing checksum line".into()))?;
    let actual = hex(&Sha256::digest(&data[..body_end]));
    if stored != actual {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }

    let mut cur = Cursor {
        data: &data[..body_end],
        pos: 0,
    };
    if cur.line()? != MAGIC {
        return Err(Error::Checkpoint(
            "not a waitk checkpoint or unsupported version".into(),
        ));
    }
    let (key, value) = key_value(cur.line()?)?;
    if key != "variant" {
        return Err(Error::Checkpoint(format!("expected variant, got {key}")));
    }
    let variant = Variant::parse(value).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut config = ModelConfig::default();
    let count = loop {
        let (key, value) = key_value(cur.line()?)?;
        if key == "params" {
            break value
                .parse::<usize>()
                .map_err(|_| Error::Checkpoint(format!("bad parameter count {value:?}")))?;
        }
        if !config.set(key, value)? {
            return Err(Error::Checkpoint(format!("unknown config key {key:?}")));
        }
    };
    let mut model = Seq2Seq::new(config, variant, 0).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if count != model.params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {count} parameters, the configured model has {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let header = cur.line()?;
        let mut parts = header.split(' ');
        let (Some("param"), Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next())
        else {
            return Err(Error::Checkpoint(format!("bad parameter header {header:?}")));
        };
        let shape: Vec<usize> = dims
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Checkpoint(format!("bad shape {dims:?}")))?;
        let id = model
            .params
            .find(name)
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter {name}")))?;
        let t = model.params.get_mut(id);
        if t.shape() != shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "{name}: stored shape {shape:?}, model expects {:?}",
                t.shape()
            )));
        }
        let raw = cur.bytes(8 * t.numel())?;
        for (v, chunk) in t.values_mut().iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
        if cur.bytes(1)? != b"\n" {
            return Err(Error::Checkpoint(format!("{name}: block not terminated")));
        }
    }
    if cur.pos != body_end {
        return Err(Error::Checkpoint("trailing data after parameter blocks".into()));
    }
    Ok(model)
}

pub fn save(model: &Seq2Seq, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Seq2Seq> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut data))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let model = Seq2Seq::new(ModelConfig::default(), Variant::Incremental, 7).unwrap();
        let bytes = to_bytes(&model);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back.variant, model.variant);
        assert_eq!(back.config, model.config);
        for ((na, a), (nb, b)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            let bits = |t: &crate::tensor::Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let model = Seq2Seq::new(ModelConfig::default(), Variant::Offline, 1).unwrap();
        let mut bytes = to_bytes(&model);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }
}
