//! Binary file formats.
//!
//! * `HSEGT1` tensor: magic, u8 dtype (0 = f32, 1 = f64), u8 rank (4), four
//!   u32 LE dims `(n, c, h, w)`, then the LE payload in NCHW order.
//! * `HSEGW1` weights: magic, u16 version, u8 fused flag, u32 count, then per
//!   tensor u16 name length, UTF-8 name, u8 dtype, u8 rank, rank u32 dims and
//!   the LE payload. Tensors are written sorted by name.
//! * Binary PGM (P5) label maps out, binary PPM (P6) images in.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{ParseError, Result};
use crate::scalar::{DType, Scalar};
use crate::tensor::{Shape, Tensor};

pub const TENSOR_MAGIC: &[u8; 6] = b"HSEGT1";
pub const WEIGHTS_MAGIC: &[u8; 6] = b"HSEGW1";
pub const WEIGHTS_VERSION: u16 = 1;

/// Upper bound on elements in one stored array (16 GiB of f64).
const MAX_ELEMENTS: u64 = 1 << 31;

/// An n-dimensional array as stored in a weight file.
#[derive(Debug, Clone, PartialEq)]
pub struct Array<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
}

impl<T: Scalar> Array<T> {
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Array { dims, data }
    }

    pub fn vector(data: Vec<T>) -> Self {
        Array {
            dims: vec![data.len()],
            data,
        }
    }

    pub fn from_tensor(t: &Tensor<T>) -> Self {
        Array {
            dims: t.shape().dims().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Array<U> {
        Array {
            dims: self.dims.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64_lossless()))
                .collect(),
        }
    }
}

/// Contents of an `HSEGW1` file.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightFile<T> {
    pub fused: bool,
    pub tensors: BTreeMap<String, Array<T>>,
}

/// A tensor whose precision is only known at run time.
#[derive(Debug, Clone, PartialEq)]
pub enum DynTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl DynTensor {
    pub fn dtype(&self) -> DType {
        match self {
            DynTensor::F32(_) => DType::F32,
            DynTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> Shape {
        match self {
            DynTensor::F32(t) => t.shape(),
            DynTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`; exact when the stored precision is not wider than `T`.
    pub fn into_tensor<T: Scalar>(self) -> Tensor<T> {
        match self {
            DynTensor::F32(t) => t.cast(),
            DynTensor::F64(t) => t.cast(),
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ParseError> {
        let available = self.buf.len() - self.pos;
        if n > available {
            return Err(ParseError::Truncated {
                needed: n,
                available,
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ParseError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ParseError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ParseError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn magic(&mut self, magic: &'static [u8; 6]) -> Result<(), ParseError> {
        let expected = std::str::from_utf8(magic).unwrap();
        match self.take(6) {
            Ok(m) if m == magic => Ok(()),
            _ => Err(ParseError::BadMagic { expected }),
        }
    }

    fn dims(&mut self, rank: u8) -> Result<Vec<usize>, ParseError> {
        let raw: Vec<u64> = (0..rank)
            .map(|_| self.u32().map(u64::from))
            .collect::<Result<_, _>>()?;
        let total = raw.iter().try_fold(1u64, |acc, &d| acc.checked_mul(d));
        match total {
            Some(t) if t <= MAX_ELEMENTS => Ok(raw.iter().map(|&d| d as usize).collect()),
            _ => Err(ParseError::DimOverflow { dims: raw }),
        }
    }

    fn payload<T: Scalar>(&mut self, count: usize) -> Result<Vec<T>, ParseError> {
        let size = T::DTYPE.size();
        let bytes = self.take(count * size)?;
        Ok(bytes.chunks_exact(size).map(T::read_le).collect())
    }

    fn finish(&self) -> Result<(), ParseError> {
        match self.buf.len() - self.pos {
            0 => Ok(()),
            extra => Err(ParseError::TrailingBytes(extra)),
        }
    }
}

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + t.data().len() * T::DTYPE.size());
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(T::DTYPE.tag());
    out.push(4);
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

pub fn decode_tensor(bytes: &[u8]) -> Result<DynTensor, ParseError> {
    let mut r = Reader::new(bytes);
    r.magic(TENSOR_MAGIC)?;
    let dtype = r.u8()?;
    let dtype = DType::from_tag(dtype).ok_or(ParseError::UnsupportedDtype(dtype))?;
    let rank = r.u8()?;
    if rank != 4 {
        return Err(ParseError::BadRank(rank));
    }
    let d = r.dims(rank)?;
    if d.iter().any(|&x| x == 0) {
        return Err(ParseError::DimOverflow {
            dims: d.iter().map(|&x| x as u64).collect(),
        });
    }
    let shape = Shape::new(d[0], d[1], d[2], d[3]);
    let t = match dtype {
        DType::F32 => {
            DynTensor::F32(Tensor::new(shape, r.payload(shape.numel())?).expect("validated dims"))
        }
        DType::F64 => {
            DynTensor::F64(Tensor::new(shape, r.payload(shape.numel())?).expect("validated dims"))
        }
    };
    r.finish()?;
    Ok(t)
}

pub fn write_tensor<T: Scalar>(path: impl AsRef<Path>, t: &Tensor<T>) -> Result<()> {
    write_atomic(path.as_ref(), &encode_tensor(t))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DynTensor> {
    let bytes = fs::read(path)?;
    Ok(decode_tensor(&bytes)?)
}

pub fn encode_weights<T: Scalar>(file: &WeightFile<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.push(file.fused as u8);
    out.extend_from_slice(&(file.tensors.len() as u32).to_le_bytes());
    for (name, arr) in &file.tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(T::DTYPE.tag());
        out.push(arr.dims.len() as u8);
        for &d in &arr.dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &arr.data {
            v.write_le(&mut out);
        }
    }
    out
}

/// Decodes a weight file, converting every tensor to `T`.
pub fn decode_weights<T: Scalar>(bytes: &[u8]) -> Result<WeightFile<T>, ParseError> {
    let mut r = Reader::new(bytes);
    r.magic(WEIGHTS_MAGIC)?;
    let version = r.u16()?;
    if version != WEIGHTS_VERSION {
        return Err(ParseError::Version {
            found: version,
            expected: WEIGHTS_VERSION,
        });
    }
    let fused = r.u8()? != 0;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| ParseError::BadName)?
            .to_owned();
        let dtype = r.u8()?;
        let dtype = DType::from_tag(dtype).ok_or(ParseError::UnsupportedDtype(dtype))?;
        let rank = r.u8()?;
        let dims = r.dims(rank)?;
        let n = dims.iter().product();
        let data: Vec<T> = match dtype {
            DType::F32 => r
                .payload::<f32>(n)?
                .into_iter()
                .map(|v| T::of(v as f64))
                .collect(),
            DType::F64 => r.payload::<f64>(n)?.into_iter().map(T::of).collect(),
        };
        if tensors.insert(name.clone(), Array { dims, data }).is_some() {
            return Err(ParseError::DuplicateName(name));
        }
    }
    r.finish()?;
    Ok(WeightFile { fused, tensors })
}

/// Reads only the precision of the first stored tensor, if any.
pub fn weights_dtype(bytes: &[u8]) -> Result<Option<DType>, ParseError> {
    let mut r = Reader::new(bytes);
    r.magic(WEIGHTS_MAGIC)?;
    r.u16()?;
    r.u8()?;
    if r.u32()? == 0 {
        return Ok(None);
    }
    let len = r.u16()? as usize;
    r.take(len)?;
    let tag = r.u8()?;
    DType::from_tag(tag)
        .map(Some)
        .ok_or(ParseError::UnsupportedDtype(tag))
}

/// Writes through a temporary file in the destination directory and renames on success.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => std::env::current_dir()?,
    };
    let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{file_name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

/// Binary P5 PGM, one byte per pixel.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    assert_eq!(pixels.len(), width * height);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

/// Parses a binary P6 PPM into a `(1, 3, h, w)` tensor with samples scaled to `[0, 1]`.
pub fn decode_ppm<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>, ParseError> {
    let mut pos = 0;
    let mut token = || -> Result<String, ParseError> {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(ParseError::Image("unexpected end of header".into())),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err(ParseError::BadMagic { expected: "P6" });
    }
    let mut num = |what: &str| -> Result<usize, ParseError> {
        token()?
            .parse::<usize>()
            .map_err(|_| ParseError::Image(format!("bad {what}")))
    };
    let (w, h, maxval) = (num("width")?, num("height")?, num("maxval")?);
    if w == 0 || h == 0 || maxval == 0 || maxval > 255 {
        return Err(ParseError::Image(format!(
            "unsupported header {w}x{h} maxval {maxval}"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    let start = pos + 1;
    let needed = 3 * w * h;
    let available = bytes.len().saturating_sub(start);
    if available < needed {
        return Err(ParseError::Truncated { needed, available });
    }
    let raster = &bytes[start..start + needed];
    let scale = T::of(maxval as f64);
    Ok(Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, i, j| {
        T::of(raster[(i * w + j) * 3 + c] as f64) / scale
    }))
}

pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), 3 * width * height);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tensor_roundtrip_small() {
        let t = Tensor::<f32>::new(Shape::new(1, 1, 1, 1), vec![-0.0]).unwrap();
        match decode_tensor(&encode_tensor(&t)).unwrap() {
            DynTensor::F32(u) => assert!(u.bit_eq(&t)),
            other => panic!("wrong dtype {:?}", other.dtype()),
        }
    }

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::<f64>::full(Shape::new(1, 2, 1, 1), 1.0);
        let b = encode_tensor(&t);
        assert_eq!(&b[..6], b"HSEGT1");
        assert_eq!(b[6], 1);
        assert_eq!(b[7], 4);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(b.len(), 24 + 16);
    }

    #[test]
    fn tensor_parse_errors_are_distinct() {
        let t = Tensor::<f32>::full(Shape::new(1, 1, 2, 2), 1.0);
        let mut b = encode_tensor(&t);
        b[0] = b'X';
        assert_eq!(
            decode_tensor(&b).unwrap_err(),
            ParseError::BadMagic { expected: "HSEGT1" }
        );
        let b = encode_tensor(&t);
        assert!(matches!(
            decode_tensor(&b[..b.len() - 1]),
            Err(ParseError::Truncated { .. })
        ));
        let mut b = encode_tensor(&t);
        b[8..12].copy_from_slice(&u32::MAX.to_le_bytes());
        b[12..16].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(matches!(
            decode_tensor(&b),
            Err(ParseError::DimOverflow { .. })
        ));
    }

    #[test]
    fn weights_roundtrip_and_errors() {
        let mut tensors = BTreeMap::new();
        tensors.insert("b".to_string(), Array::vector(vec![1.0f64, -2.0]));
        tensors.insert(
            "a.weight".to_string(),
            Array::new(vec![2, 1, 1, 1], vec![0.5, 0.25]),
        );
        let file = WeightFile {
            fused: true,
            tensors,
        };
        let bytes = encode_weights(&file);
        assert_eq!(decode_weights::<f64>(&bytes).unwrap(), file);
        assert_eq!(weights_dtype(&bytes).unwrap(), Some(DType::F64));
        // canonical order: "a.weight" precedes "b"
        assert_eq!(&bytes[13..15], &8u16.to_le_bytes());
        let mut bad = bytes.clone();
        bad[6] = 2;
        assert!(matches!(
            decode_weights::<f64>(&bad),
            Err(ParseError::Version { found: 2, .. })
        ));
        assert!(matches!(
            decode_weights::<f64>(&bytes[..bytes.len() - 3]),
            Err(ParseError::Truncated { .. })
        ));
    }

    #[test]
    fn ppm_pgm() {
        let ppm = encode_ppm(2, 1, &[255, 0, 51, 0, 255, 0]);
        let t = decode_ppm::<f64>(&ppm).unwrap();
        assert_eq!(t.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(t.at(0, 0, 0, 0), 1.0);
        assert_eq!(t.at(0, 2, 0, 0), 0.2);
        assert!(decode_ppm::<f64>(&ppm[..ppm.len() - 1]).is_err());
        assert_eq!(
            encode_pgm(2, 1, &[3, 4]),
            b"P5\n2 1\n255\n\x03\x04".to_vec()
        );
    }

    proptest! {
        #[test]
        fn tensor_roundtrip_bit_exact(
            dims in (1usize..3, 1usize..4, 1usize..6, 1usize..8),
            bits in proptest::collection::vec(any::<u64>(), 1..200),
        ) {
            let shape = Shape::new(dims.0, dims.1, dims.2, dims.3);
            let data: Vec<f64> = (0..shape.numel())
                .map(|i| f64::from_bits(bits[i % bits.len()]))
                .map(|v| if v.is_finite() { v } else { -0.0 })
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode_tensor(&encode_tensor(&t)).unwrap().into_tensor::<f64>();
            prop_assert!(back.bit_eq(&t));
        }
    }
}
