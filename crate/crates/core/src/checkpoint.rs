//! Checkpoint files.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   b"DSAT"
//! version u32 (1)
//! config  u64 length + UTF-8 TOML of the run configuration
//! epoch   u64
//! params  u64 count, then per tensor:
//!           u64 name length, name bytes, u64 rank, rank × u64 dims,
//!           product(dims) × f64
//! velocity  same tensor list for the optimizer state
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DSAT";
const VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub params: ParamStore,
    pub velocity: BTreeMap<String, Tensor>,
}

fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    Ok(w.write_all(&v.to_le_bytes())?)
}

fn put_bytes(w: &mut impl Write, b: &[u8]) -> Result<()> {
    put_u64(w, b.len() as u64)?;
    Ok(w.write_all(b)?)
}

fn put_tensors<'a>(w: &mut impl Write, items: impl ExactSizeIterator<Item = (&'a String, &'a Tensor)>) -> Result<()> {
    put_u64(w, items.len() as u64)?;
    for (name, t) in items {
        put_bytes(w, name.as_bytes())?;
        put_u64(w, t.shape().len() as u64)?;
        for &d in t.shape() {
            put_u64(w, d as u64)?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn get_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

const LIMIT: u64 = 1 << 34;

fn get_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let n = get_u64(r)?;
    if n > LIMIT {
        return Err(Error::Checkpoint(format!("implausible length {n}")));
    }
    let mut b = vec![0u8; n as usize];
    r.read_exact(&mut b).map_err(|e| Error::Checkpoint(format!("truncated file: {e}")))?;
    Ok(b)
}

fn get_tensors(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let n = get_u64(r)?;
    let mut out = Vec::new();
    for _ in 0..n {
        let name = String::from_utf8(get_bytes(r)?).map_err(|_| Error::Checkpoint("non-UTF-8 name".into()))?;
        let rank = get_u64(r)?;
        if rank > 8 {
            return Err(Error::Checkpoint(format!("{name}: rank {rank}")));
        }
        let shape: Vec<usize> = (0..rank).map(|_| get_u64(r).map(|d| d as usize)).collect::<Result<_>>()?;
        let len: usize = shape.iter().product();
        if len as u64 > LIMIT {
            return Err(Error::Checkpoint(format!("{name}: implausible size")));
        }
        let mut raw = vec![0u8; len * 8];
        r.read_exact(&mut raw).map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        put_bytes(&mut w, self.config.to_toml_string().as_bytes())?;
        put_u64(&mut w, self.epoch as u64)?;
        let params: Vec<(&String, &Tensor)> = self.params.iter().map(|(k, v)| (k, &**v)).collect();
        put_tensors(&mut w, params.into_iter())?;
        put_tensors(&mut w, self.velocity.iter())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| Error::Checkpoint("file too short".into()))?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let mut v = [0u8; 4];
        r.read_exact(&mut v)?;
        if u32::from_le_bytes(v) != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", u32::from_le_bytes(v))));
        }
        let text = String::from_utf8(get_bytes(&mut r)?).map_err(|_| Error::Checkpoint("config not UTF-8".into()))?;
        let config = RunConfig::from_toml_str(&text)?;
        let epoch = get_u64(&mut r)? as usize;
        let mut params = ParamStore::new();
        for (k, t) in get_tensors(&mut r)? {
            params.insert(k, t);
        }
        let velocity = get_tensors(&mut r)?.into_iter().collect();
        Ok(Self {
            config,
            epoch,
            params,
            velocity,
        })
    }
}

fn flatten(prefix: &str, v: &toml::Value, out: &mut BTreeMap<String, String>) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.to_string());
        }
    }
}

/// Keys that shape the network and differ between two configurations.
pub fn architecture_mismatch(a: &RunConfig, b: &RunConfig) -> Vec<String> {
    let flat = |c: &RunConfig| {
        let mut m = BTreeMap::new();
        let v = toml::Value::try_from(c).expect("config serializes");
        flatten("", &v, &mut m);
        m
    };
    let (fa, fb) = (flat(a), flat(b));
    let relevant = |k: &str| {
        ["backbone.", "attention.", "rpn.", "refinement."].iter().any(|p| k.starts_with(p))
            || k == "data.exemplar_size"
            || k == "data.search_size"
    };
    let mut keys: Vec<String> = fa.keys().chain(fb.keys()).filter(|k| relevant(k)).cloned().collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| fa.get(k) != fb.get(k)).collect()
}
