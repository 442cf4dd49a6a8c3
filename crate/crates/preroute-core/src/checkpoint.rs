//! Versioned binary containers for model parameters.
//!
//! Layout: magic bytes, format version (u16), a format-specific config
//! header, then named parameter blobs (name length, name, shape, f64 data).
//! Everything is little-endian.

use std::io::{Read, Write};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u16 = 1;

/// One named parameter: (name, shape, row-major f64 data).
pub type Blob = (String, Vec<usize>, Vec<f64>);

pub fn write_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn write_f64(w: &mut impl Write, v: f64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

pub fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

pub fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_f64(r: &mut impl Read) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

pub fn write_magic(w: &mut impl Write, magic: &[u8], version: u16) -> Result<()> {
    w.write_all(magic)?;
    write_u16(w, version)
}

pub fn expect_magic(r: &mut impl Read, magic: &[u8], what: &'static str) -> Result<u16> {
    let mut buf = vec![0u8; magic.len()];
    r.read_exact(&mut buf)?;
    if buf != magic {
        return Err(Error::Format {
            what,
            detail: format!("bad magic {buf:02x?}"),
        });
    }
    let version = read_u16(r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            what,
            detail: format!("unsupported version {version}"),
        });
    }
    Ok(version)
}

pub fn write_blobs(w: &mut impl Write, blobs: &[Blob]) -> Result<()> {
    write_u32(w, blobs.len() as u32)?;
    for (name, shape, data) in blobs {
        let nb = name.as_bytes();
        write_u32(w, nb.len() as u32)?;
        w.write_all(nb)?;
        write_u32(w, shape.len() as u32)?;
        for &d in shape {
            write_u64(w, d as u64)?;
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "write-blob",
                lhs: shape.clone(),
                rhs: vec![data.len()],
            });
        }
        for &v in data {
            write_f64(w, v)?;
        }
    }
    Ok(())
}

pub fn read_blobs(r: &mut impl Read, what: &'static str) -> Result<Vec<Blob>> {
    let count = read_u32(r)? as usize;
    // sanity bound so a corrupt header cannot trigger a huge allocation
    if count > 1 << 20 {
        return Err(Error::Format {
            what,
            detail: format!("implausible blob count {count}"),
        });
    }
    let mut blobs = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > 4096 {
            return Err(Error::Format {
                what,
                detail: format!("implausible name length {name_len}"),
            });
        }
        let mut nb = vec![0u8; name_len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|e| Error::Format {
            what,
            detail: format!("non-utf8 name: {e}"),
        })?;
        let rank = read_u32(r)? as usize;
        if rank > 8 {
            return Err(Error::Format {
                what,
                detail: format!("implausible rank {rank}"),
            });
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(r)? as usize);
        }
        let numel: usize = shape.iter().product();
        if numel > 1 << 28 {
            return Err(Error::Format {
                what,
                detail: format!("implausible tensor size {numel}"),
            });
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(read_f64(r)?);
        }
        blobs.push((name, shape, data));
    }
    Ok(blobs)
}

/// FNV-1a fingerprint of a serialized parameter list, used for the
/// frozen-weight integrity checks and run manifests.
pub fn blobs_checksum(blobs: &[Blob]) -> u64 {
    let mut buf = Vec::new();
    write_blobs(&mut buf, blobs).expect("in-memory write");
    crate::rng::fnv1a64(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_round_trip_is_exact() {
        let blobs: Vec<Blob> = vec![
            ("a.w".into(), vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, 1e-300, f64::MAX]),
            ("b".into(), vec![1], vec![42.0]),
        ];
        let mut buf = Vec::new();
        write_magic(&mut buf, b"TEST", FORMAT_VERSION).unwrap();
        write_blobs(&mut buf, &blobs).unwrap();
        let mut r = buf.as_slice();
        expect_magic(&mut r, b"TEST", "test file").unwrap();
        let back = read_blobs(&mut r, "test file").unwrap();
        assert_eq!(blobs, back);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut buf = Vec::new();
        write_magic(&mut buf, b"AAAA", FORMAT_VERSION).unwrap();
        let mut r = buf.as_slice();
        assert!(expect_magic(&mut r, b"BBBB", "test file").is_err());
    }

    #[test]
    fn checksum_changes_with_data() {
        let a: Vec<Blob> = vec![("w".into(), vec![2], vec![1.0, 2.0])];
        let mut b = a.clone();
        b[0].2[1] = 2.0000001;
        assert_ne!(blobs_checksum(&a), blobs_checksum(&b));
        assert_eq!(blobs_checksum(&a), blobs_checksum(&a));
    }
}
