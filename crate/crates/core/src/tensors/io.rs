//! TFT1 binary tensor format.
//!
//! Layout, all little-endian, no padding:
//!
//! | bytes        | field                         |
//! |--------------|-------------------------------|
//! | 4            | magic `b"TFT1"`               |
//! | 4            | dtype code `u32` (1 = f32)    |
//! | 4            | ndim `u32`                    |
//! | 8 · ndim     | dims, `u64` each              |
//! | 4 · count    | payload, `f32` each           |
//!
//! A file therefore occupies `12 + 8·ndim + 4·count` bytes.

use std::fs;
use std::path::Path;

use super::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"TFT1";
pub const DTYPE_F32: u32 = 1;

const HEADER_LEN: usize = 12;

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * t.ndim() + 4 * t.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    buf.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.dims() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                format_err(
                    self.bytes.len(),
                    format!("truncated while reading {what} ({n} bytes at {})", self.pos),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}")));
    }
    let dtype = cur.u32("dtype")?;
    if dtype != DTYPE_F32 {
        return Err(format_err(4, format!("unknown dtype code {dtype}")));
    }
    let ndim = cur.u32("ndim")? as usize;
    let mut dims = Vec::with_capacity(ndim.min(64));
    let mut count: usize = 1;
    for i in 0..ndim {
        let at = cur.pos;
        let d = usize::try_from(cur.u64("dims")?)
            .map_err(|_| format_err(at, format!("dim {i} does not fit in usize")))?;
        count = count
            .checked_mul(d)
            .ok_or_else(|| format_err(at, "element count overflows"))?;
        dims.push(d);
    }
    let payload_at = cur.pos;
    let nbytes = count
        .checked_mul(4)
        .ok_or_else(|| format_err(payload_at, "payload size overflows"))?;
    let payload = cur.take(nbytes, "payload")?;
    if cur.pos != bytes.len() {
        return Err(format_err(
            cur.pos,
            format!("{} trailing bytes", bytes.len() - cur.pos),
        ));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data)
}

pub fn save_tensor(t: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::File {
            path: path.to_path_buf(),
            msg: format!("format error at byte {offset}: {msg}"),
        },
        e => e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensors::Rng;
    use proptest::prelude::*;

    #[test]
    fn empty_dim_round_trips() {
        let t = Tensor::new(vec![0], vec![]).unwrap();
        assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);
    }

    #[test]
    fn small_tensor_round_trips_bit_exactly() {
        let t = Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"TFT1");
        assert!(decode_tensor(&bytes).unwrap().bit_eq(&t));
    }

    #[test]
    fn million_elements_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("big.tft");
        let t = Rng::new(5).normal_tensor(&[1000, 1000], 1.0);
        save_tensor(&t, &path).unwrap();
        let size = fs::metadata(&path).unwrap().len() as usize;
        assert_eq!(size, 12 + 8 * 2 + 4 * 1_000_000);
        assert!(load_tensor(&path).unwrap().bit_eq(&t));
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode_tensor(&Tensor::zeros(&[2]));
        bytes[0] = b'X';
        assert!(matches!(
            decode_tensor(&bytes),
            Err(Error::Format { offset: 0, .. })
        ));
    }

    #[test]
    fn rejects_unknown_dtype() {
        let mut bytes = encode_tensor(&Tensor::zeros(&[2]));
        bytes[4] = 7;
        assert!(matches!(
            decode_tensor(&bytes),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn rejects_truncation() {
        let bytes = encode_tensor(&Tensor::zeros(&[3, 3]));
        let err = decode_tensor(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }), "{err}");
        assert!(decode_tensor(&bytes[..6]).is_err());
    }

    #[test]
    fn rejects_trailing_bytes() {
        let mut bytes = encode_tensor(&Tensor::zeros(&[1]));
        bytes.push(0);
        assert!(decode_tensor(&bytes).is_err());
    }

    proptest! {
        #[test]
        fn load_inverts_save(
            dims in proptest::collection::vec(0usize..5, 0..4),
            seed in any::<u64>(),
        ) {
            let count: usize = dims.iter().product();
            let mut rng = Rng::new(seed);
            let data: Vec<f32> = (0..count)
                .map(|_| f32::from_bits(rng.next_u64() as u32))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t)).unwrap();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
