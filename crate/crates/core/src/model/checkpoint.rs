//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"LIFTCKPT"  u32 version  u32 header_len  header (UTF-8 "key=value\n" lines, sorted)
//! u32 n_params  { u32 name_len  name  u32 ndim  u64 dims[ndim]  f32 data[..] }*
//! ```
//!
//! The header carries the model configuration plus free-form `meta.*` keys.
//! Writing the same model and metadata twice yields identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use super::{Model, ModelConfig};
use crate::numcore::Tensor;
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LIFTCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub meta: BTreeMap<String, String>,
}

impl Default for Model<f32> {
    fn default() -> Self {
        Model::new(ModelConfig::default()).expect("default config is valid")
    }
}

fn config_entries(c: &ModelConfig) -> [(&'static str, String); 6] {
    [
        ("config.context_window", c.context_window.to_string()),
        ("config.embed_dim", c.embed_dim.to_string()),
        ("config.n_heads", c.n_heads.to_string()),
        ("config.n_layers", c.n_layers.to_string()),
        ("config.seed", c.seed.to_string()),
        ("config.vocab_size", c.vocab_size.to_string()),
    ]
}

pub fn to_bytes(model: &Model<f32>, meta: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let mut header = BTreeMap::new();
    for (k, v) in config_entries(model.config()) {
        header.insert(k.to_string(), v);
    }
    for (k, v) in meta {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::InvalidInput(format!("metadata entry {k:?} cannot be stored")));
        }
        header.insert(format!("meta.{k}"), v.clone());
    }
    let header: String = header.iter().map(|(k, v)| format!("{k}={v}\n")).collect();

    let mut out = Vec::with_capacity(64 + 4 * model.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.names().iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &x in t.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a>(Cursor<&'a [u8]>);

impl Reader<'_> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let remaining = self.0.get_ref().len() as u64 - self.0.position();
        if n as u64 > remaining {
            return Err(Error::Format(format!("truncated checkpoint while reading {what}")));
        }
        let mut buf = vec![0; n];
        self.0.read_exact(&mut buf).expect("length checked");
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8, what)?.try_into().unwrap()))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader(Cursor::new(bytes));
    if r.bytes(8, "magic")? != MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = r.u32("header length")? as usize;
    let header = String::from_utf8(r.bytes(hlen, "header")?)
        .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
    let mut kv = BTreeMap::new();
    for line in header.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("malformed header line {line:?}")))?;
        kv.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| -> Result<u64> {
        kv.get(k)
            .ok_or_else(|| Error::Format(format!("header is missing {k}")))?
            .parse()
            .map_err(|_| Error::Format(format!("header value for {k} is not an integer")))
    };
    let config = ModelConfig {
        vocab_size: get("config.vocab_size")? as usize,
        context_window: get("config.context_window")? as usize,
        n_layers: get("config.n_layers")? as usize,
        n_heads: get("config.n_heads")? as usize,
        embed_dim: get("config.embed_dim")? as usize,
        seed: get("config.seed")?,
    };
    config.validate().map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    let meta = kv
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_string(), v.clone())))
        .collect();

    let n = r.u32("parameter count")? as usize;
    let expected = config.param_layout().len();
    if n != expected {
        return Err(Error::Format(format!("{n} parameter tensors, expected {expected}")));
    }
    let mut named = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32("name length")? as usize;
        let name = String::from_utf8(r.bytes(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        let ndim = r.u32("rank")? as usize;
        if ndim > 4 {
            return Err(Error::Format(format!("parameter {name} has rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u64("dimension")? as usize);
        }
        let count = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let count = count.ok_or_else(|| Error::Format(format!("parameter {name} is too large")))?;
        let raw = r.bytes(count.saturating_mul(4), "tensor data")?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        named.push((name, Tensor::new(shape, data)?));
    }
    if r.0.position() as usize != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(Checkpoint {
        model: Model::from_parts(config, named)?,
        meta,
    })
}

pub fn save(path: &Path, model: &Model<f32>, meta: &BTreeMap<String, String>) -> Result<()> {
    let bytes = to_bytes(model, meta)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Model<f32> {
        Model::new(ModelConfig {
            vocab_size: 11,
            context_window: 6,
            n_layers: 1,
            n_heads: 1,
            embed_dim: 4,
            seed: 9,
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_exact() {
        let m = small();
        let meta = BTreeMap::from([("config_hash".to_string(), "abc".to_string())]);
        let a = to_bytes(&m, &meta).unwrap();
        let ck = from_bytes(&a).unwrap();
        assert_eq!(ck.model, m);
        assert_eq!(ck.meta, meta);
        assert_eq!(to_bytes(&ck.model, &ck.meta).unwrap(), a);
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let a = to_bytes(&small(), &BTreeMap::new()).unwrap();
        assert!(matches!(from_bytes(&a[..a.len() - 1]), Err(Error::Format(_))));
        let mut bad = a.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(Error::Format(_))));
        let mut extra = a.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
        assert!(from_bytes(b"").is_err());
    }

    #[test]
    fn nonfinite_weights_rejected_on_load() {
        let mut m = small();
        m.params_mut()[0].data_mut()[0] = f32::NAN;
        let a = to_bytes(&m, &BTreeMap::new()).unwrap();
        assert!(matches!(from_bytes(&a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &small(), &BTreeMap::new()).unwrap();
        assert_eq!(load(&p).unwrap().model, small());
        assert!(matches!(load(&dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
