//! Binary record container shared by model checkpoints and GMM files.
//!
//! ```text
//! "SPGD" | version u32 | header_len u32 | header (UTF-8 key = value text)
//! then until EOF, per record:
//!   name_len u32 | name | rank u32 | dims u32 × rank | f32 × Π dims
//! ```
//!
//! All integers and floats are little-endian.

use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"SPGD";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Record {
    /// Rounds `data` to single precision.
    pub fn from_f64(name: impl Into<String>, dims: &[usize], data: &[f64]) -> Self {
        Self {
            name: name.into(),
            dims: dims.to_vec(),
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub header: String,
    pub records: Vec<Record>,
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let out = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(out)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v)
        .map_err(|_| Error::Checkpoint(format!("value {v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

impl Container {
    pub fn new(header: impl Into<String>) -> Self {
        Self {
            header: header.into(),
            records: Vec::new(),
        }
    }

    pub fn push(&mut self, record: Record) {
        self.records.push(record);
    }

    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, self.header.len())?;
        out.extend_from_slice(self.header.as_bytes());
        for r in &self.records {
            let numel: usize = r.dims.iter().product();
            if numel != r.data.len() {
                return Err(Error::Checkpoint(format!(
                    "record '{}': dims {:?} do not match {} values",
                    r.name,
                    r.dims,
                    r.data.len()
                )));
            }
            put_u32(&mut out, r.name.len())?;
            out.extend_from_slice(r.name.as_bytes());
            put_u32(&mut out, r.dims.len())?;
            for &d in &r.dims {
                put_u32(&mut out, d)?;
            }
            for v in &r.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4) != Some(MAGIC.as_slice()) {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = rd
            .u32()
            .ok_or_else(|| Error::Checkpoint("truncated file header".into()))?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let header = rd
            .u32()
            .and_then(|n| rd.take(n as usize))
            .ok_or_else(|| Error::Checkpoint("truncated config block".into()))?;
        let header = String::from_utf8(header.to_vec())
            .map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let mut records = Vec::new();
        while !rd.at_end() {
            let after = records
                .last()
                .map(|r: &Record| format!(" after '{}'", r.name))
                .unwrap_or_default();
            let trunc = || Error::Checkpoint(format!("truncated record header{after}"));
            let name = rd.u32().and_then(|n| rd.take(n as usize)).ok_or_else(trunc)?;
            let name = String::from_utf8(name.to_vec())
                .map_err(|_| Error::Checkpoint(format!("record name{after} is not UTF-8")))?;
            let rank = rd.u32().ok_or_else(trunc)? as usize;
            let dims = (0..rank)
                .map(|_| rd.u32().map(|d| d as usize))
                .collect::<Option<Vec<_>>>()
                .ok_or_else(|| Error::Checkpoint(format!("record '{name}': truncated dims")))?;
            let numel: usize = dims.iter().product();
            let payload = rd.take(numel * 4).ok_or_else(|| {
                Error::Checkpoint(format!(
                    "record '{name}': payload truncated (expected {} bytes, {} left)",
                    numel * 4,
                    bytes.len() - rd.pos
                ))
            })?;
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            records.push(Record { name, dims, data });
        }
        Ok(Self { header, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("kind = test\nx = 1\n");
        c.push(Record::from_f64("a.weight", &[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 0.1]));
        c.push(Record::from_f64("b", &[1], &[-7.5]));
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.get("a.weight").unwrap().data[5], 0.1f32);
    }

    #[test]
    fn layout_is_little_endian() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SPGD");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
    }

    #[test]
    fn truncation_names_the_record() {
        let bytes = sample().to_bytes().unwrap();
        let err = Container::from_bytes(&bytes[..bytes.len() - 2])
            .unwrap_err()
            .to_string();
        assert!(err.contains("'b'") && err.contains("truncated"), "{err}");
    }

    #[test]
    fn rejects_other_versions_and_magic() {
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 9;
        assert!(Container::from_bytes(&bytes).unwrap_err().to_string().contains("version 9"));
        bytes[0] = b'X';
        assert!(Container::from_bytes(&bytes).is_err());
    }
}
