//! Portable tensor file: magic `T5F1`, five little-endian `u32` dims, a `u8`
//! dtype tag (0 = f32, 1 = f64), then raw little-endian elements.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape5, Tensor5};

pub const TENSOR_MAGIC: &[u8; 4] = b"T5F1";

/// Little-endian cursor over a byte buffer; every read is bounds-checked.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Format(format!(
                    "truncated: need {len} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn is_done(&self) -> bool {
        self.pos == self.bytes.len()
    }

    /// Reads `count` elements stored as `dtype`, converting to `T`.
    pub fn elements<T: Scalar>(&mut self, dtype: DType, count: usize) -> Result<Vec<T>> {
        let width = dtype.size();
        let total = count
            .checked_mul(width)
            .ok_or_else(|| Error::Format("element count overflows".into()))?;
        let raw = self.take(total)?;
        Ok(match dtype {
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| T::from_f64(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => raw.chunks_exact(8).map(|c| T::from_f64(f64::read_le(c))).collect(),
        })
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor5<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(25 + t.len() * T::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE.tag());
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

/// Decodes a tensor file; data stored at the other precision is converted.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor5<T>> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != TENSOR_MAGIC {
        return Err(Error::Format("bad tensor magic (expected T5F1)".into()));
    }
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let tag = r.u8()?;
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let shape = Shape5::new(dims[0], dims[1], dims[2], dims[3], dims[4])?;
    let data = r.elements(dtype, shape.len())?;
    if !r.is_done() {
        return Err(Error::Format("trailing bytes after tensor data".into()));
    }
    Tensor5::from_vec(shape, data)
}

pub fn save_tensor<T: Scalar>(t: &Tensor5<T>, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor<T: Scalar>(path: &Path) -> Result<Tensor5<T>> {
    decode_tensor(&fs::read(path)?)
}

/// Binary 8-bit greyscale PGM (P5).
pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    if pixels.len() != width * height {
        return Err(Error::shape("write_pgm", "pixels", width * height, pixels.len()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    fs::write(path, out)?;
    Ok(())
}

/// Parses a binary PGM written by [`write_pgm`]: `(width, height, pixels)`.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(Error::Format("expected 8-bit P5 PGM".into()));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PGM dimension {s:?}")))
    };
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let pixels = bytes
        .get(pos..pos + w * h)
        .ok_or_else(|| Error::Format("truncated PGM pixels".into()))?;
    Ok((w, h, pixels.to_vec()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor5::<f32>::filled(Shape5::new(1, 2, 1, 1, 3).unwrap(), 1.0);
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"T5F1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(bytes[24], 0);
        assert_eq!(bytes.len(), 25 + 6 * 4);
        assert_eq!(&bytes[25..29], &1.0f32.to_le_bytes());
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor5::<f64>::filled(Shape5::new(1, 1, 1, 2, 2).unwrap(), 0.5);
        let bytes = encode_tensor(&t);
        assert!(decode_tensor::<f64>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_tensor::<f64>(&bad).is_err());
        let mut tag = bytes.clone();
        tag[24] = 9;
        assert!(decode_tensor::<f64>(&tag).is_err());
    }

    #[test]
    fn pgm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, 3, 2, &[0, 1, 2, 3, 4, 255]).unwrap();
        let (w, h, px) = read_pgm(&fs::read(&path).unwrap()).unwrap();
        assert_eq!((w, h), (3, 2));
        assert_eq!(px, vec![0, 1, 2, 3, 4, 255]);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(dims in proptest::array::uniform5(1usize..4), seed in any::<u64>()) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = Shape5::new(dims[0], dims[1], dims[2], dims[3], dims[4]).unwrap();
            let t = Tensor5::<f64>::uniform(s, 1e3, &mut rng);
            prop_assert_eq!(decode_tensor::<f64>(&encode_tensor(&t)).unwrap(), t.clone());
            let f = t.cast::<f32>();
            prop_assert_eq!(decode_tensor::<f32>(&encode_tensor(&f)).unwrap(), f);
        }
    }
}
