//! SEQD binary files and CSV export.
//!
//! Layout (little-endian): magic `SEQD`, version u32, tau u32, d u32,
//! d_out u32, count u64, filter tag u32 (0 none, 1 exponential, 2 random)
//! followed by `tau` f64 filter values when the tag is nonzero, then for each
//! sample its `tau * d` inputs and `tau * d_out` targets as f64, row-major.

use std::io::Write;
use std::path::Path;

use super::{ConvolutionFilter, DataError, Dataset, FilterKind, Result};

const MAGIC: &[u8; 4] = b"SEQD";
const VERSION: u32 = 1;

pub fn to_bytes(data: &Dataset) -> Result<Vec<u8>> {
    data.validate()?;
    let mut out = Vec::with_capacity(40 + 8 * (data.x.len() + data.y.len()));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [data.tau, data.d, data.d_out] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    out.extend_from_slice(&(data.count() as u64).to_le_bytes());
    match &data.filter {
        None => out.extend_from_slice(&0u32.to_le_bytes()),
        Some(f) => {
            let tag: u32 = match f.kind {
                FilterKind::Exponential => 1,
                FilterKind::Random => 2,
            };
            out.extend_from_slice(&tag.to_le_bytes());
            for v in &f.rho {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    for i in 0..data.count() {
        for v in data.x_of(i).iter().chain(data.y_of(i)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let needed = self.pos.saturating_add(n);
        if needed > self.buf.len() {
            return Err(DataError::Truncated {
                needed,
                found: self.buf.len(),
            });
        }
        let s = &self.buf[self.pos..needed];
        self.pos = needed;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize, out: &mut Vec<f64>) -> Result<()> {
        let bytes = self.take(n.saturating_mul(8))?;
        out.extend(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
        Ok(())
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<Dataset> {
    let mut c = Cursor { buf, pos: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(DataError::BadMagic(magic));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let tau = c.u32()? as usize;
    let d = c.u32()? as usize;
    let d_out = c.u32()? as usize;
    let count = usize::try_from(c.u64()?).map_err(|_| DataError::Invalid("count too large".into()))?;
    let filter = match c.u32()? {
        0 => None,
        tag @ (1 | 2) => {
            let mut rho = Vec::with_capacity(tau);
            c.f64s(tau, &mut rho)?;
            let kind = if tag == 1 {
                FilterKind::Exponential
            } else {
                FilterKind::Random
            };
            Some(ConvolutionFilter { kind, rho })
        }
        other => return Err(DataError::Invalid(format!("unknown filter tag {other}"))),
    };
    let mut data = Dataset::empty(tau, d, d_out);
    data.filter = filter;
    // Check the full length up front so a huge count cannot allocate.
    let per = (tau * (d + d_out)).saturating_mul(8);
    let needed = c.pos.saturating_add(count.saturating_mul(per));
    if needed > buf.len() {
        return Err(DataError::Truncated {
            needed,
            found: buf.len(),
        });
    }
    data.x.reserve(count * tau * d);
    data.y.reserve(count * tau * d_out);
    for _ in 0..count {
        c.f64s(tau * d, &mut data.x)?;
        c.f64s(tau * d_out, &mut data.y)?;
    }
    if c.pos != buf.len() {
        return Err(DataError::TrailingBytes(buf.len() - c.pos));
    }
    data.validate()?;
    Ok(data)
}

pub fn save_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(data)?)?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    from_bytes(&std::fs::read(path)?)
}

/// One row per `(sample, t)`: `sample, t, x0.., y0..`.
pub fn export_csv(data: &Dataset, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["sample".to_string(), "t".to_string()];
    header.extend((0..data.d).map(|j| format!("x{j}")));
    header.extend((0..data.d_out).map(|j| format!("y{j}")));
    w.write_record(&header)?;
    for i in 0..data.count() {
        let (x, y) = (data.x_of(i), data.y_of(i));
        for t in 0..data.tau {
            let mut row = vec![i.to_string(), t.to_string()];
            row.extend(x[t * data.d..(t + 1) * data.d].iter().map(f64::to_string));
            row.extend(y[t * data.d_out..(t + 1) * data.d_out].iter().map(f64::to_string));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}
