//! Flat named-segment checkpoints.
//!
//! Layout: the magic bytes `TVOM`, a little-endian `u32` version, then
//! segments until end of file. Each segment is a `u32` name length, the UTF-8
//! name, a `u64` element count and that many little-endian `f64`s.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::{ParamLayout, ParamVector};
use crate::error::{Result, TvoError};

pub const MAGIC: &[u8; 4] = b"TVOM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub segments: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    /// All parameter segments followed by `extras` (e.g. `data/mean`).
    pub fn from_params(params: &ParamVector, extras: &[(&str, &[f64])]) -> Self {
        let mut segments: Vec<(String, Vec<f64>)> = params
            .layout()
            .segments()
            .iter()
            .map(|s| (s.name.clone(), params.values()[s.range()].to_vec()))
            .collect();
        segments.extend(extras.iter().map(|(n, v)| (n.to_string(), v.to_vec())));
        Self { segments }
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.segments.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }

    /// Fills a parameter vector for `layout`; every layout segment must be
    /// present with the right length.
    pub fn params(&self, layout: &Arc<ParamLayout>) -> Result<ParamVector> {
        let mut params = ParamVector::zeros(layout.clone());
        for seg in layout.segments() {
            let values = self.get(&seg.name).ok_or_else(|| TvoError::Unknown {
                kind: "checkpoint segment",
                name: seg.name.clone(),
            })?;
            if values.len() != seg.len() {
                return Err(TvoError::domain(format!(
                    "checkpoint segment {} has {} values, model expects {}",
                    seg.name,
                    values.len(),
                    seg.len()
                )));
            }
            params.segment_mut(&seg.name)?.copy_from_slice(values);
        }
        Ok(params)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for (name, values) in &self.segments {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(values.len() as u64).to_le_bytes())?;
            for v in values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::parse(&bytes)
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(4, "magic")? != MAGIC {
            return Err(TvoError::Format { offset: 0, detail: "bad magic, expected TVOM".into() });
        }
        let version = cur.u32("version")?;
        if version != VERSION {
            return Err(TvoError::Format { offset: 4, detail: format!("unsupported version {version}") });
        }
        let mut segments = Vec::new();
        while cur.pos < bytes.len() {
            let start = cur.pos as u64;
            let len = cur.u32("name length")? as usize;
            let name = std::str::from_utf8(cur.take(len, "name")?)
                .map_err(|_| TvoError::Format { offset: start + 4, detail: "segment name is not UTF-8".into() })?
                .to_string();
            let count = cur.u64("element count")? as usize;
            let raw = cur.take(count.saturating_mul(8), "segment data")?;
            let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            segments.push((name, values));
        }
        Ok(Self { segments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| TvoError::io_at(path, e))?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path).map_err(|e| TvoError::io_at(path, e))?))
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(TvoError::Format {
                offset: self.pos as u64,
                detail: format!("truncated {what}: need {n} bytes, {} remain", self.bytes.len() - self.pos),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}
