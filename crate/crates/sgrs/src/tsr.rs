//! TSR v1 tensor files.
//!
//! Layout: magic `TSR1`, one dtype byte (0 = f32, 1 = f64, 2 = u8,
//! 3 = i64), one ndim byte, `ndim` little-endian u32 extents, then the
//! raw little-endian row-major payload. No padding, no checksum.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

const MAGIC: [u8; 4] = *b"TSR1";
pub const DTYPE_U8: u8 = 2;
pub const DTYPE_I64: u8 = 3;

fn bad_data(msg: impl Into<String>) -> crate::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into()).into()
}

fn write_header(w: &mut impl Write, dtype: u8, dims: &[usize]) -> Result<()> {
    if dims.len() > u8::MAX as usize {
        return Err(bad_data(format!("too many dimensions: {}", dims.len())));
    }
    w.write_all(&MAGIC)?;
    w.write_all(&[dtype, dims.len() as u8])?;
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| bad_data(format!("extent {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    Ok(())
}

/// Reads the header and returns (dtype, dims).
fn read_header(r: &mut impl Read) -> Result<(u8, Vec<usize>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(bad_data("missing TSR1 magic"));
    }
    let mut head = [0u8; 2];
    r.read_exact(&mut head)?;
    let (dtype, ndim) = (head[0], head[1] as usize);
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut ext = [0u8; 4];
        r.read_exact(&mut ext)?;
        dims.push(u32::from_le_bytes(ext) as usize);
    }
    Ok((dtype, dims))
}

/// Reads exactly `expected` payload bytes and requires EOF after them.
fn read_payload(r: &mut impl Read, expected: usize) -> Result<Vec<u8>> {
    let mut payload = vec![0u8; expected];
    r.read_exact(&mut payload)?;
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(payload),
        _ => Err(bad_data("trailing bytes after tensor payload")),
    }
}

pub fn write_tensor<T: Scalar>(path: &Path, t: &Tensor<T>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, T::TSR_DTYPE, t.dims())?;
    for &v in t.data() {
        w.write_all(&Scalar::to_le_bytes(v)[..T::WIDTH])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensor<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, dims) = read_header(&mut r)?;
    if dtype != T::TSR_DTYPE {
        return Err(bad_data(format!(
            "dtype code {dtype} does not match requested element type (code {})",
            T::TSR_DTYPE
        )));
    }
    let n: usize = dims.iter().product();
    let payload = read_payload(&mut r, n * T::WIDTH)?;
    let data = payload
        .chunks_exact(T::WIDTH)
        .map(T::from_le_slice)
        .collect();
    Tensor::new(dims, data)
}

pub fn write_u8(path: &Path, dims: &[usize], data: &[u8]) -> Result<()> {
    check_len(dims, data.len())?;
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_U8, dims)?;
    w.write_all(data)?;
    w.flush()?;
    Ok(())
}

pub fn read_u8(path: &Path) -> Result<(Vec<usize>, Vec<u8>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, dims) = read_header(&mut r)?;
    if dtype != DTYPE_U8 {
        return Err(bad_data(format!("dtype code {dtype} is not u8")));
    }
    let n: usize = dims.iter().product();
    let payload = read_payload(&mut r, n)?;
    Ok((dims, payload))
}

pub fn write_i64(path: &Path, dims: &[usize], data: &[i64]) -> Result<()> {
    check_len(dims, data.len())?;
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, DTYPE_I64, dims)?;
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_i64(path: &Path) -> Result<(Vec<usize>, Vec<i64>)> {
    let mut r = BufReader::new(File::open(path)?);
    let (dtype, dims) = read_header(&mut r)?;
    if dtype != DTYPE_I64 {
        return Err(bad_data(format!("dtype code {dtype} is not i64")));
    }
    let n: usize = dims.iter().product();
    let payload = read_payload(&mut r, n * 8)?;
    let data = payload
        .chunks_exact(8)
        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((dims, data))
}

fn check_len(dims: &[usize], len: usize) -> Result<()> {
    let n: usize = dims.iter().product();
    if n != len {
        return Err(bad_data(format!(
            "dims {dims:?} imply {n} elements, got {len}"
        )));
    }
    Ok(())
}
