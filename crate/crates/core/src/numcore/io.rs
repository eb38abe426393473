//! TNSR binary format.
//!
//! ```text
//! tensor     := "TNSR" version:u16=1 rank:u16 extent:u64{rank} value:f64{∏extent}
//! checkpoint := (name_len:u16 name:utf8 tensor)*
//! ```
//!
//! All integers and floats are little-endian; payload is row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u16 = 1;

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.rank() as u16).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    write_tensor(&mut buf, t).expect("writing to a Vec");
    buf
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        ErrorKind::UnexpectedEof => Error::format(format!("truncated TNSR data while reading {what}")),
        _ => Error::format(format!("{what}: {e}")),
    })
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact_or(r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::format(format!("bad magic {magic:?}, expected \"TNSR\"")));
    }
    read_tensor_body(r)
}

fn read_tensor_body(r: &mut impl Read) -> Result<Tensor> {
    let mut b2 = [0u8; 2];
    read_exact_or(r, &mut b2, "version")?;
    let version = u16::from_le_bytes(b2);
    if version != VERSION {
        return Err(Error::format(format!("unsupported TNSR version {version}")));
    }
    read_exact_or(r, &mut b2, "rank")?;
    let rank = u16::from_le_bytes(b2) as usize;
    if rank == 0 {
        return Err(Error::format("rank-0 tensors are not supported"));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        read_exact_or(r, &mut b8, "extent")?;
        let d = u64::from_le_bytes(b8);
        if d == 0 || d > (1 << 40) {
            return Err(Error::format(format!("implausible extent {d}")));
        }
        shape.push(d as usize);
    }
    let n = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n <= 1 << 32)
        .ok_or_else(|| Error::format(format!("tensor of shape {shape:?} is too large")))?;
    let mut raw = vec![0u8; n * 8];
    read_exact_or(r, &mut raw, "payload")?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tensor(&mut BufReader::new(f))
}

pub fn write_named(w: &mut impl Write, entries: &[(&str, &Tensor)]) -> Result<()> {
    for (name, t) in entries {
        let bytes = name.as_bytes();
        let len: u16 = bytes
            .len()
            .try_into()
            .map_err(|_| Error::format(format!("tensor name too long: {name}")))?;
        w.write_all(&len.to_le_bytes())
            .and_then(|_| w.write_all(bytes))
            .and_then(|_| write_tensor(w, t))
            .map_err(|e| Error::format(e.to_string()))?;
    }
    Ok(())
}

/// Reads named records until EOF.
pub fn read_named(r: &mut impl Read) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    loop {
        let mut b2 = [0u8; 2];
        match r.read(&mut b2[..1]) {
            Ok(0) => return Ok(out),
            Ok(_) => {}
            Err(e) => return Err(Error::format(e.to_string())),
        }
        read_exact_or(r, &mut b2[1..], "name length")?;
        let len = u16::from_le_bytes(b2) as usize;
        let mut name = vec![0u8; len];
        read_exact_or(r, &mut name, "name")?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::format("checkpoint entry name is not UTF-8"))?;
        let t = read_tensor(r)?;
        out.push((name, t));
    }
}

pub fn save_named(path: impl AsRef<Path>, entries: &[(&str, &Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_named(&mut w, entries)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_named(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_named(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let t = Tensor::new(vec![1, 2], vec![1.0, -2.5]).unwrap();
        let b = encode_tensor(&t);
        let mut expect = b"TNSR".to_vec();
        expect.extend_from_slice(&[1, 0, 2, 0]);
        expect.extend_from_slice(&1u64.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f64.to_le_bytes());
        expect.extend_from_slice(&(-2.5f64).to_le_bytes());
        assert_eq!(b, expect);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let t = Tensor::zeros(vec![3]);
        let mut b = encode_tensor(&t);
        b[0] = b'X';
        assert!(matches!(read_tensor(&mut &b[..]), Err(Error::Format(_))));
        let b = encode_tensor(&t);
        assert!(matches!(
            read_tensor(&mut &b[..b.len() - 1]),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn named_records() {
        let a = Tensor::zeros(vec![2, 2]);
        let b = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut buf = Vec::new();
        write_named(&mut buf, &[("enc.w", &a), ("é", &b)]).unwrap();
        let back = read_named(&mut &buf[..]).unwrap();
        assert_eq!(back, vec![("enc.w".to_string(), a), ("é".to_string(), b)]);
        assert!(read_named(&mut &buf[..buf.len() - 3]).is_err());
    }

    proptest! {
        #[test]
        fn tensor_roundtrip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| f64::from_bits(seed.rotate_left(i as u32) >> 2)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = read_tensor(&mut &encode_tensor(&t)[..]).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
