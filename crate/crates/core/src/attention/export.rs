use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Binary PGM (P5), one pixel per matrix entry, linearly scaled so the
/// matrix minimum maps to 0 and the maximum to 255. Width = columns.
pub fn alignment_to_pgm(m: &Tensor) -> Result<Vec<u8>> {
    if m.rank() != 2 {
        return Err(Error::dim(format!("PGM export needs a matrix, got {:?}", m.shape())));
    }
    let (h, w) = (m.rows(), m.cols());
    let lo = m.data().iter().copied().fold(f64::INFINITY, f64::min);
    let hi = m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(m.data().iter().map(|&v| {
        if hi > lo && v.is_finite() {
            ((v - lo) / (hi - lo) * 255.0).round().clamp(0.0, 255.0) as u8
        } else {
            0
        }
    }));
    Ok(out)
}

pub fn alignment_to_csv(m: &Tensor) -> Result<String> {
    if m.rank() != 2 {
        return Err(Error::dim(format!("CSV export needs a matrix, got {:?}", m.shape())));
    }
    let mut s = String::new();
    for i in 0..m.rows() {
        for (j, v) in m.row(i).iter().enumerate() {
            if j > 0 {
                s.push(',');
            }
            write!(s, "{v:e}").unwrap();
        }
        s.push('\n');
    }
    Ok(s)
}

pub fn write_alignment_pgm(path: impl AsRef<Path>, m: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, alignment_to_pgm(m)?).map_err(|e| Error::io(path, e))
}

pub fn write_alignment_csv(path: impl AsRef<Path>, m: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, alignment_to_csv(m)?).map_err(|e| Error::io(path, e))
}
