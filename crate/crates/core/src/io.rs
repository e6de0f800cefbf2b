//! Little-endian binary helpers and the PCXL point-cloud format.
//!
//! PCXL layout: magic `PCXL`, version `u16`, flags `u16` (bit 0: labels
//! present), point count `u64`, then per point `x, y, z` as `f32` followed by
//! the class as `u32` when labeled (`0xFFFFFFFF` = unlabeled).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::cloud::PointCloud;
use crate::error::{Error, Result};

const PCXL_VERSION: u16 = 1;
const FLAG_LABELS: u16 = 1;

pub(crate) fn read_bytes<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

macro_rules! reader {
    ($name:ident, $t:ty) => {
        pub(crate) fn $name<R: Read>(r: &mut R) -> Result<$t> {
            Ok(<$t>::from_le_bytes(read_bytes::<{ std::mem::size_of::<$t>() }, _>(r)?))
        }
    };
}

reader!(read_u8, u8);
reader!(read_u16, u16);
reader!(read_u32, u32);
reader!(read_u64, u64);
reader!(read_i32, i32);
reader!(read_f32, f32);
reader!(read_f64, f64);

pub(crate) fn read_u128<R: Read>(r: &mut R) -> Result<u128> {
    Ok(u128::from_le_bytes(read_bytes::<16, _>(r)?))
}

/// Fails unless the reader is exhausted.
pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

pub fn write_pcxl<W: Write>(w: &mut W, cloud: &PointCloud) -> Result<()> {
    w.write_all(b"PCXL")?;
    w.write_all(&PCXL_VERSION.to_le_bytes())?;
    let flags = if cloud.labels.is_some() { FLAG_LABELS } else { 0 };
    w.write_all(&flags.to_le_bytes())?;
    w.write_all(&(cloud.len() as u64).to_le_bytes())?;
    let stride = if cloud.labels.is_some() { 16 } else { 12 };
    let mut buf = Vec::with_capacity(cloud.len() * stride);
    for (i, p) in cloud.points.iter().enumerate() {
        for v in p {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        if let Some(labels) = &cloud.labels {
            buf.extend_from_slice(&labels[i].to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_pcxl<R: Read>(r: &mut R) -> Result<PointCloud> {
    if &read_bytes::<4, _>(r)? != b"PCXL" {
        return Err(Error::Format("not a PCXL point file".into()));
    }
    let version = read_u16(r)?;
    if version != PCXL_VERSION {
        return Err(Error::Format(format!("unsupported PCXL version {version}")));
    }
    let flags = read_u16(r)?;
    if flags & !FLAG_LABELS != 0 {
        return Err(Error::Format(format!("unknown PCXL flags {flags:#x}")));
    }
    let n = read_u64(r)? as usize;
    let labeled = flags & FLAG_LABELS != 0;
    let stride = if labeled { 16 } else { 12 };
    let len = n.checked_mul(stride).ok_or_else(|| Error::Format(format!("PCXL point count {n} is implausible")))?;
    let mut payload = Vec::new();
    r.take(len as u64).read_to_end(&mut payload)?;
    if payload.len() != len {
        return Err(Error::Format(format!("PCXL header declares {n} points but payload is short")));
    }
    expect_eof(r)?;
    let mut points = Vec::with_capacity(n);
    let mut labels = labeled.then(|| Vec::with_capacity(n));
    let f = |b: &[u8]| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64;
    for chunk in payload.chunks_exact(stride) {
        points.push([f(&chunk[0..4]), f(&chunk[4..8]), f(&chunk[8..12])]);
        if let Some(l) = &mut labels {
            l.push(u32::from_le_bytes([chunk[12], chunk[13], chunk[14], chunk[15]]));
        }
    }
    Ok(PointCloud { points, labels })
}

pub fn save_pcxl(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pcxl(&mut w, cloud)?;
    w.flush()?;
    Ok(())
}

pub fn load_pcxl(path: impl AsRef<Path>) -> Result<PointCloud> {
    read_pcxl(&mut BufReader::new(File::open(path)?))
}

/// Writes `value` to `path` through a buffered writer.
pub fn save_with<T>(path: impl AsRef<Path>, value: &T, write: impl FnOnce(&T, &mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write(value, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads `path` with `read`, rejecting trailing bytes.
pub fn load_with<T>(path: impl AsRef<Path>, read: impl FnOnce(&mut BufReader<File>) -> Result<T>) -> Result<T> {
    let mut r = BufReader::new(File::open(path)?);
    let value = read(&mut r)?;
    expect_eof(&mut r)?;
    Ok(value)
}
