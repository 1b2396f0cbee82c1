//! Binary tensor files.
//!
//! Float tensors (`.evwq`):
//!
//! ```text
//! "EVWQ" | u32 version = 1 | u64 count | count x f32
//! ```
//!
//! Quantized tensors (`.evq4`):
//!
//! ```text
//! "EVQ4" | u32 version = 1 | u32 block_size | u64 count
//! per block: f32 scale | ceil(block_len / 2) bytes of nibbles
//! ```
//!
//! Nibbles hold `code + 8` (1..=15), low nibble first. All integers and floats
//! are little-endian. Tensor names are not stored.

use std::io::{Read, Write};

use super::{QuantBlock, QuantizedTensor, WeightTensor};
use crate::error::{Error, Result};

pub const FLOAT_MAGIC: &[u8; 4] = b"EVWQ";
pub const QUANT_MAGIC: &[u8; 4] = b"EVQ4";
pub const VERSION: u32 = 1;

pub fn write_float_tensor<W: Write>(mut w: W, t: &WeightTensor) -> Result<()> {
    w.write_all(FLOAT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(t.values.len() as u64).to_le_bytes())?;
    for v in &t.values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_float_tensor<R: Read>(mut r: R, name: &str) -> Result<WeightTensor> {
    read_header(&mut r, FLOAT_MAGIC)?;
    let count = read_u64(&mut r)? as usize;
    let mut values = Vec::with_capacity(count.min(1 << 24));
    for _ in 0..count {
        values.push(f32::from_le_bytes(read_array(&mut r)?));
    }
    expect_eof(&mut r)?;
    Ok(WeightTensor::new(name, values))
}

pub fn write_quantized<W: Write>(mut w: W, q: &QuantizedTensor) -> Result<()> {
    q.validate()?;
    let block_size = u32::try_from(q.block_size)
        .map_err(|_| Error::InvalidInput(format!("block size {} exceeds u32", q.block_size)))?;
    w.write_all(QUANT_MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&block_size.to_le_bytes())?;
    w.write_all(&(q.original_len as u64).to_le_bytes())?;
    for b in &q.blocks {
        w.write_all(&b.scale.to_le_bytes())?;
        w.write_all(&pack_nibbles(&b.codes))?;
    }
    Ok(())
}

pub fn read_quantized<R: Read>(mut r: R, name: &str) -> Result<QuantizedTensor> {
    read_header(&mut r, QUANT_MAGIC)?;
    let block_size = u32::from_le_bytes(read_array(&mut r)?) as usize;
    if block_size == 0 {
        return Err(Error::Format("block size is zero".into()));
    }
    let count = read_u64(&mut r)? as usize;
    let mut blocks = Vec::with_capacity(count.div_ceil(block_size).min(1 << 20));
    let mut remaining = count;
    while remaining > 0 {
        let len = remaining.min(block_size);
        let scale = f32::from_le_bytes(read_array(&mut r)?);
        let mut packed = vec![0u8; len.div_ceil(2)];
        r.read_exact(&mut packed).map_err(truncated)?;
        let codes = unpack_nibbles(&packed, len)?;
        blocks.push(QuantBlock { scale, codes });
        remaining -= len;
    }
    expect_eof(&mut r)?;
    let q = QuantizedTensor { name: name.to_string(), block_size, blocks, original_len: count };
    q.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(q)
}

/// Two codes per byte, low nibble first, each stored as `code + 8`. An odd
/// tail leaves the high nibble zero.
pub fn pack_nibbles(codes: &[i8]) -> Vec<u8> {
    codes
        .chunks(2)
        .map(|pair| {
            let lo = (pair[0] + 8) as u8;
            let hi = pair.get(1).map_or(0, |&c| (c + 8) as u8);
            lo | (hi << 4)
        })
        .collect()
}

pub fn unpack_nibbles(packed: &[u8], len: usize) -> Result<Vec<i8>> {
    let mut codes = Vec::with_capacity(len);
    for (i, byte) in packed.iter().enumerate() {
        for (k, nib) in [byte & 0x0f, byte >> 4].into_iter().enumerate() {
            let idx = 2 * i + k;
            if idx >= len {
                if nib != 0 {
                    return Err(Error::Format(format!("non-zero padding nibble at code {idx}")));
                }
                continue;
            }
            if nib == 0 {
                return Err(Error::Format(format!("nibble 0 at code {idx} is outside 1..=15")));
            }
            codes.push(nib as i8 - 8);
        }
    }
    Ok(codes)
}

fn read_header<R: Read>(r: &mut R, magic: &[u8; 4]) -> Result<()> {
    let got: [u8; 4] = read_array(r)?;
    if &got != magic {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&got),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = u32::from_le_bytes(read_array(r)?);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    Ok(u64::from_le_bytes(read_array(r)?))
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(truncated)?;
    Ok(buf)
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("file is truncated".into())
    } else {
        Error::Io(e)
    }
}

fn expect_eof<R: Read>(r: &mut R) -> Result<()> {
    let mut byte = [0u8; 1];
    match r.read(&mut byte)? {
        0 => Ok(()),
        _ => Err(Error::Format("trailing bytes after payload".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::quantize;

    #[test]
    fn float_file_layout() {
        let t = WeightTensor::new("w", vec![1.0, -2.5]);
        let mut buf = Vec::new();
        write_float_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"EVWQ");
        assert_eq!(&buf[4..8], &[1, 0, 0, 0]);
        assert_eq!(&buf[8..16], &[2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(&buf[16..20], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 24);
        assert_eq!(read_float_tensor(&buf[..], "w").unwrap(), t);
    }

    #[test]
    fn quant_file_layout() {
        let t = WeightTensor::new("w", vec![0.0, 3.5, -7.0, 1.75, 7.0]);
        let q = quantize(&t, 4).unwrap();
        let mut buf = Vec::new();
        write_quantized(&mut buf, &q).unwrap();
        assert_eq!(&buf[..4], b"EVQ4");
        assert_eq!(&buf[8..12], &4u32.to_le_bytes());
        assert_eq!(&buf[12..20], &5u64.to_le_bytes());
        assert_eq!(&buf[20..24], &1.0f32.to_le_bytes());
        // codes [0, 4, -7, 2] -> nibbles [8, 12, 1, 10]
        assert_eq!(&buf[24..26], &[0xC8, 0xA1]);
        // second block: one code 7 -> nibble 15 with zero high nibble
        assert_eq!(buf[30], 0x0F);
        assert_eq!(buf.len(), 31);
        assert_eq!(read_quantized(&buf[..], "w").unwrap(), q);
    }

    #[test]
    fn rejects_corrupt_files() {
        assert!(matches!(read_float_tensor(&b"EVQ4\x01\0\0\0"[..], "x"), Err(Error::Format(_))));
        assert!(matches!(read_float_tensor(&b"EVWQ\x02\0\0\0"[..], "x"), Err(Error::Format(_))));
        assert!(matches!(
            read_float_tensor(&b"EVWQ\x01\0\0\0\x01\0\0\0\0\0\0\0\0\0"[..], "x"),
            Err(Error::Format(_))
        ));
        let t = WeightTensor::new("w", vec![1.0, 2.0]);
        let mut buf = Vec::new();
        write_quantized(&mut buf, &quantize(&t, 2).unwrap()).unwrap();
        let mut bad = buf.clone();
        *bad.last_mut().unwrap() = 0x80;
        assert!(matches!(read_quantized(&bad[..], "w"), Err(Error::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_quantized(&long[..], "w"), Err(Error::Format(_))));
    }

    #[test]
    fn nibble_values_stay_in_range() {
        let codes: Vec<i8> = (-7..=7).collect();
        let packed = pack_nibbles(&codes);
        for (i, b) in packed.iter().enumerate() {
            assert!((1..=15).contains(&(b & 0x0f)));
            if 2 * i + 1 < codes.len() {
                assert!((1..=15).contains(&(b >> 4)));
            }
        }
        assert_eq!(unpack_nibbles(&packed, codes.len()).unwrap(), codes);
    }
}
