//! Versioned binary checkpoint container.
//!
//! Layout: magic, format version, a JSON metadata blob (network kind,
//! architecture header, counters), then named parameter tables with raw
//! little-endian `f64` payloads, then a trailing end marker. Loading
//! validates lengths at every step, so a truncated file reports a
//! checkpoint error instead of crashing; round-trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::nn::{Params, TensorValue};

const MAGIC: &[u8; 4] = b"SCPK";
const END: &[u8; 4] = b"END.";
pub const FORMAT_VERSION: u32 = 1;

/// In-memory checkpoint: metadata plus named parameter tables.
#[derive(Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub meta: serde_json::Value,
    pub tables: Vec<(String, Params)>,
}

impl Checkpoint {
    pub fn new(kind: &str, meta: serde_json::Value) -> Self {
        Checkpoint {
            kind: kind.to_string(),
            meta,
            tables: Vec::new(),
        }
    }

    pub fn add_table(&mut self, name: &str, params: Params) {
        self.tables.push((name.to_string(), params));
    }

    pub fn table(&self, name: &str) -> Result<&Params> {
        self.tables
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Checkpoint(format!("missing table {name}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.write_all(MAGIC)?;
        buf.write_u32::<LittleEndian>(FORMAT_VERSION)?;
        let header = serde_json::json!({ "kind": self.kind, "meta": self.meta });
        let header_bytes = serde_json::to_vec(&header).map_err(|e| {
            Error::Checkpoint(format!("header encode: {e}"))
        })?;
        write_bytes(&mut buf, &header_bytes)?;
        buf.write_u32::<LittleEndian>(self.tables.len() as u32)?;
        for (name, params) in &self.tables {
            write_bytes(&mut buf, name.as_bytes())?;
            buf.write_u32::<LittleEndian>(params.len() as u32)?;
            for (pname, tv) in params.iter() {
                write_bytes(&mut buf, pname.as_bytes())?;
                buf.write_u32::<LittleEndian>(tv.shape.len() as u32)?;
                for &d in &tv.shape {
                    buf.write_u64::<LittleEndian>(d as u64)?;
                }
                for &v in &tv.data {
                    buf.write_f64::<LittleEndian>(v)?;
                }
            }
        }
        buf.write_all(END)?;
        let tmp = path.with_extension("ckpt.tmp");
        std::fs::write(&tmp, &buf)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let mut r = std::io::Cursor::new(bytes.as_slice());
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "version mismatch: file {version}, supported {FORMAT_VERSION}"
            )));
        }
        let header_bytes = read_bytes(&mut r)?;
        let header: serde_json::Value = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
        let kind = header
            .get("kind")
            .and_then(|v| v.as_str())
            .ok_or_else(|| Error::Checkpoint("header missing kind".into()))?
            .to_string();
        let meta = header.get("meta").cloned().unwrap_or(serde_json::Value::Null);
        let n_tables = read_u32(&mut r)? as usize;
        let mut tables = Vec::with_capacity(n_tables);
        for _ in 0..n_tables {
            let tname = String::from_utf8(read_bytes(&mut r)?)
                .map_err(|_| Error::Checkpoint("bad table name".into()))?;
            let n_params = read_u32(&mut r)? as usize;
            let mut params = Params::new();
            for _ in 0..n_params {
                let pname = String::from_utf8(read_bytes(&mut r)?)
                    .map_err(|_| Error::Checkpoint("bad parameter name".into()))?;
                let ndim = read_u32(&mut r)? as usize;
                if ndim > 8 {
                    return Err(Error::Checkpoint(format!("implausible rank {ndim}")));
                }
                let mut shape = Vec::with_capacity(ndim);
                for _ in 0..ndim {
                    shape.push(read_u64(&mut r)? as usize);
                }
                let numel: usize = shape.iter().product();
                if numel > 1 << 28 {
                    return Err(Error::Checkpoint("implausible tensor size".into()));
                }
                let mut data = Vec::with_capacity(numel);
                for _ in 0..numel {
                    data.push(read_f64(&mut r)?);
                }
                params.insert(&pname, TensorValue { shape, data });
            }
            tables.push((tname, params));
        }
        let mut end = [0u8; 4];
        read_exact(&mut r, &mut end)?;
        if &end != END {
            return Err(Error::Checkpoint("missing end marker".into()));
        }
        Ok(Checkpoint { kind, meta, tables })
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }
}

fn write_bytes(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_u32::<LittleEndian>(bytes.len() as u32)?;
    w.write_all(bytes)?;
    Ok(())
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint("truncated checkpoint file".into()))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    r.read_u32::<LittleEndian>()
        .map_err(|_| Error::Checkpoint("truncated checkpoint file".into()))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    r.read_u64::<LittleEndian>()
        .map_err(|_| Error::Checkpoint("truncated checkpoint file".into()))
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    r.read_f64::<LittleEndian>()
        .map_err(|_| Error::Checkpoint("truncated checkpoint file".into()))
}

fn read_bytes(r: &mut impl Read) -> Result<Vec<u8>> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(Error::Checkpoint("implausible string length".into()));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use tempfile::tempdir;

    fn sample_ckpt() -> Checkpoint {
        let mut rng = seeded_rng(3);
        let mut params = Params::new();
        params.insert("w", TensorValue::randn(&[2, 3], 1.0, &mut rng));
        params.insert("b", TensorValue::zeros(&[3]));
        let mut ck = Checkpoint::new("test", serde_json::json!({"epoch": 7}));
        ck.add_table("net", params);
        ck
    }

    #[test]
    fn roundtrip_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.ckpt");
        let ck = sample_ckpt();
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.kind, "test");
        assert_eq!(back.meta["epoch"], 7);
        let orig = ck.table("net").unwrap();
        let got = back.table("net").unwrap();
        for (name, tv) in orig.iter() {
            let g = got.get(name);
            assert_eq!(g.shape, tv.shape);
            for (a, b) in g.data.iter().zip(&tv.data) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_is_checkpoint_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("b.ckpt");
        sample_ckpt().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 10, bytes.len() / 2, bytes.len() - 1] {
            let tpath = dir.path().join("cut.ckpt");
            std::fs::write(&tpath, &bytes[..cut]).unwrap();
            match Checkpoint::load(&tpath) {
                Err(Error::Checkpoint(_)) => {}
                other => panic!("cut at {cut}: expected checkpoint error, got {other:?}"),
            }
        }
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        sample_ckpt().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99; // bump version field
        std::fs::write(&path, &bytes).unwrap();
        match Checkpoint::load(&path) {
            Err(Error::Checkpoint(msg)) => assert!(msg.contains("version")),
            other => panic!("expected version error, got {other:?}"),
        }
    }
}
