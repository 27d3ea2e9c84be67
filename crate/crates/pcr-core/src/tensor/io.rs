//! Flat binary tensor container: a header of four 64-bit little-endian
//! unsigned extents `(N, C, H, W)` followed by the row-major 64-bit IEEE
//! values. Used for parameter checkpoints and CLI round trips.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

use super::{Shape, Tensor};

pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    let s = t.shape();
    for extent in [s.n, s.c, s.h, s.w] {
        w.write_all(&(extent as u64).to_le_bytes())?;
    }
    for v in t.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let mut buf = [0u8; 8];
    let mut extents = [0usize; 4];
    for e in &mut extents {
        r.read_exact(&mut buf)?;
        let v = u64::from_le_bytes(buf);
        *e = usize::try_from(v)
            .map_err(|_| Error::invalid("tensor container", format!("extent {v} too large")))?;
    }
    let shape = Shape::new(extents[0], extents[1], extents[2], extents[3]);
    let mut data = Vec::with_capacity(shape.len());
    for _ in 0..shape.len() {
        r.read_exact(&mut buf)?;
        data.push(f64::from_le_bytes(buf));
    }
    Tensor::from_vec(shape, data)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let mut r = BufReader::new(File::open(path)?);
    read_tensor(&mut r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trips() {
        let t = Tensor::from_fn(Shape::new(2, 3, 4, 5), |n, c, h, w| {
            (n * 1000 + c * 100 + h * 10 + w) as f64 * 0.125 - 3.0
        });
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(buf.len(), 32 + 120 * 8);
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(back.shape(), t.shape());
        assert_eq!(back.data(), t.data());
    }

    #[test]
    fn header_is_little_endian() {
        let t = Tensor::filled(Shape::new(1, 2, 1, 1), 0.5);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[0..8], &1u64.to_le_bytes());
        assert_eq!(&buf[8..16], &2u64.to_le_bytes());
    }

    #[test]
    fn truncated_container_is_rejected() {
        let t = Tensor::filled(Shape::new(1, 1, 2, 2), 1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 4);
        assert!(read_tensor(&mut buf.as_slice()).is_err());
    }
}
