//! Little-endian helpers shared by the RATD / RATI / RATM file formats.

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::{Error, Result};

pub(crate) fn write_header<W: Write>(w: &mut W, magic: &[u8; 4], version: u16) -> Result<()> {
    w.write_all(magic)?;
    w.write_u16::<LittleEndian>(version)?;
    Ok(())
}

pub(crate) fn read_header<R: Read>(r: &mut R, magic: &[u8; 4], version: u16) -> Result<()> {
    let mut got = [0u8; 4];
    r.read_exact(&mut got).map_err(truncated)?;
    if &got != magic {
        return Err(Error::format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let v = r.read_u16::<LittleEndian>().map_err(truncated)?;
    if v != version {
        return Err(Error::format(format!(
            "unsupported {} version {v} (this build reads version {version})",
            String::from_utf8_lossy(magic)
        )));
    }
    Ok(())
}

pub(crate) fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf).map_err(truncated)?;
    String::from_utf8(buf).map_err(|e| Error::format(format!("invalid utf-8 string: {e}")))
}

pub(crate) fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    r.read_u8().map_err(truncated)
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    r.read_u32::<LittleEndian>().map_err(truncated)
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    r.read_u64::<LittleEndian>().map_err(truncated)
}

pub(crate) fn read_i64<R: Read>(r: &mut R) -> Result<i64> {
    r.read_i64::<LittleEndian>().map_err(truncated)
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    r.read_f64::<LittleEndian>().map_err(truncated)
}

/// Fails unless the reader is exhausted.
pub(crate) fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(Error::format("trailing bytes after payload")),
    }
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::format("file is truncated")
    } else {
        Error::Io(e)
    }
}
