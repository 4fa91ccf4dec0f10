//! Flat binary parameter files.
//!
//! Layout (all integers little-endian):
//! `b"VMAD"`, `u32` version, `u32` value width in bytes (4 or 8), `u64`
//! parameter count, then per parameter a `u32` name length, UTF-8 name,
//! `u32` dim count, `u64` dims and the values as `f32` or `f64`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VMAD";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_params<R: Real>(store: &ParamStore<R>, mut w: impl Write) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let wide = std::mem::size_of::<R>() > 4;
    w.write_all(&(if wide { 8u32 } else { 4u32 }).to_le_bytes())?;
    w.write_all(&(store.len() as u64).to_le_bytes())?;
    for (_, p) in store.iter() {
        let name = p.name().as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        let shape = p.value().shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in p.value().data() {
            if wide {
                w.write_all(&x.as_f64().to_le_bytes())?;
            } else {
                w.write_all(&(x.as_f64() as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn save<R: Real>(store: &ParamStore<R>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_params(store, &mut w).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_params<R: Real>(mut r: impl Read) -> Result<ParamStore<R>> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    let io = |e: std::io::Error| Error::Checkpoint(format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes"));
    }
    let version = read_u32(&mut r).map_err(io)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let width = read_u32(&mut r).map_err(io)? as usize;
    if width != 4 && width != 8 {
        return Err(Error::Checkpoint(format!("unsupported value width {width}")));
    }
    let count = read_u64(&mut r).map_err(io)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = read_u32(&mut r).map_err(io)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let ndim = read_u32(&mut r).map_err(io)? as usize;
        let shape = (0..ndim)
            .map(|_| read_u64(&mut r).map(|d| d as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(io)?;
        let numel: usize = shape.iter().product();
        let mut buf = vec![0u8; numel * width];
        r.read_exact(&mut buf).map_err(io)?;
        let data = buf
            .chunks_exact(width)
            .map(|c| match width {
                4 => R::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64),
                _ => R::lit(f64::from_le_bytes(c.try_into().unwrap())),
            })
            .collect();
        store.add(name, Tensor::new(&shape, data)?)?;
    }
    Ok(store)
}

pub fn load<R: Real>(path: impl AsRef<Path>) -> Result<ParamStore<R>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_params(BufReader::new(file))
}

/// Copies every parameter of `src` into the same-named parameter of `dst`.
/// Both must hold exactly the same names and shapes.
pub fn restore_into<R: Real>(dst: &mut ParamStore<R>, src: &ParamStore<R>) -> Result<()> {
    if dst.len() != src.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint holds {} parameters, model expects {}",
            src.len(),
            dst.len()
        )));
    }
    for (_, p) in src.iter() {
        let id = dst
            .id(p.name())
            .ok_or_else(|| Error::Checkpoint(format!("unexpected parameter `{}`", p.name())))?;
        dst.set_value(id, p.value().clone())
            .map_err(|e| Error::Checkpoint(format!("`{}`: {e}", p.name())))?;
    }
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}
