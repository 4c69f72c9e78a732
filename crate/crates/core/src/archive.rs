//! Binary window archive.
//!
//! All integers and reals are little-endian. Strings are a `u32` byte length
//! followed by UTF-8 bytes.
//!
//! ```text
//! magic        8 bytes  "CKSPWIN\0"
//! version      u32      1
//! target_len   u32      samples per axis in every window
//! n_species    u32
//! species[n_species]:
//!     name         str
//!     rate_hz      f64
//!     n_classes    u32
//!     classes      str[n_classes]
//! n_windows    u64
//! windows[n_windows]:
//!     species      u32
//!     label        u32
//!     subject      str
//!     data         f64[3 * target_len]   (x axis, then y, then z)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::dataset::{Dataset, SampleWindow, SpeciesInfo};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CKSPWIN\0";
pub const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub fn encode(dataset: &Dataset) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, dataset.target_len as u32);
    put_u32(&mut out, dataset.species.len() as u32);
    for s in &dataset.species {
        put_str(&mut out, &s.name);
        out.extend_from_slice(&s.sampling_rate_hz.to_le_bytes());
        put_u32(&mut out, s.classes.len() as u32);
        for c in &s.classes {
            put_str(&mut out, c);
        }
    }
    out.extend_from_slice(&(dataset.windows.len() as u64).to_le_bytes());
    for w in &dataset.windows {
        put_u32(&mut out, w.species as u32);
        put_u32(&mut out, w.label as u32);
        put_str(&mut out, &w.subject);
        for v in w.data.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Archive(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Archive(format!("invalid UTF-8 before byte {}", self.pos)))
    }
}

pub fn decode(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf, pos: 0 };
    if c.take(8)? != MAGIC {
        return Err(Error::Archive("bad magic bytes".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Archive(format!("unsupported version {version}")));
    }
    let target_len = c.u32()? as usize;
    let n_species = c.u32()? as usize;
    let mut species = Vec::with_capacity(n_species);
    for _ in 0..n_species {
        let name = c.str()?;
        let rate = c.f64()?;
        let k = c.u32()? as usize;
        let classes = (0..k).map(|_| c.str()).collect::<Result<Vec<_>>>()?;
        species.push(SpeciesInfo {
            name,
            sampling_rate_hz: rate,
            classes,
        });
    }
    let n = c.u64()? as usize;
    let mut windows = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let s = c.u32()? as usize;
        let label = c.u32()? as usize;
        let subject = c.str()?;
        let data = (0..3 * target_len).map(|_| c.f64()).collect::<Result<Vec<_>>>()?;
        windows.push(SampleWindow {
            data: Tensor::new(&[1, 3, target_len], data)?,
            species: s,
            label,
            subject,
        });
    }
    if c.pos != buf.len() {
        return Err(Error::Archive(format!("{} trailing bytes", buf.len() - c.pos)));
    }
    let ds = Dataset {
        species,
        target_len,
        windows,
    };
    ds.validate().map_err(|e| Error::Archive(e.to_string()))?;
    Ok(ds)
}

pub fn write(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode(dataset)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Dataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    decode(&buf)
}
