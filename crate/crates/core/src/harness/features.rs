//! TPPF frame-feature files: magic `TPPF`, u32 version (1), u32 rows,
//! u32 cols, then rows·cols little-endian f32 values in row-major order.

use std::fs::File;
use std::io::Read;
use std::path::Path;

use crate::codec::{self, Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::Matrix;

const MAGIC: &[u8; 4] = b"TPPF";
const VERSION: u32 = 1;

pub fn frame_features_to_bytes(m: &Matrix) -> Result<Vec<u8>> {
    let mut w = Writer::new(MAGIC);
    w.u32(VERSION).count(m.rows())?.count(m.cols())?;
    let values: Vec<f32> = m.as_slice().iter().map(|&v| v as f32).collect();
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Config(format!("value at index {i} overflows f32")));
    }
    w.f32s(values);
    Ok(w.into_bytes())
}

/// Stores `m` with single precision.
pub fn write_frame_features(path: &Path, m: &Matrix) -> Result<()> {
    codec::write_file(path, &frame_features_to_bytes(m)?)
}

pub fn frame_features_from_bytes(path: &Path, bytes: &[u8]) -> Result<Matrix> {
    let mut r = Reader::new(path, bytes, MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    let n = r.count("rows")?;
    let d = r.count("cols")?;
    let values = r.f32s(n * d, "payload")?;
    r.finish()?;
    Matrix::new(n, d, values)
}

pub fn load_frame_features(path: &Path) -> Result<Matrix> {
    frame_features_from_bytes(path, &codec::read_file(path)?)
}

/// `(rows, cols)` from the header alone.
pub fn read_frame_feature_header(path: &Path) -> Result<(usize, usize)> {
    let mut header = [0u8; 16];
    File::open(path)
        .and_then(|mut f| f.read_exact(&mut header))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(path, &header, MAGIC)?;
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(r.error(format!("unsupported version {version}")));
    }
    Ok((r.count("rows")?, r.count("cols")?))
}
