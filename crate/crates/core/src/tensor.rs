//! Dense row-major tensors and the `EFBT` binary tensor file format.
//!
//! Values are stored as `f64`. Files may carry either `f32` (dtype code 0)
//! or `f64` (dtype code 1) payloads; images are written as `f32`, parameter
//! checkpoints as `f64` so that they reload bit for bit.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Dense n-dimensional array with an optional gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero-sized dimension in {dims:?}")));
        }
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("dims {dims:?} need {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { dims: dims.to_vec(), data, grad: None, requires_grad: false })
    }

    /// Zero-dimensional tensor holding one value.
    pub fn scalar(value: f64) -> Self {
        Tensor { dims: Vec::new(), data: vec![value], grad: None, requires_grad: false }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor { dims: dims.to_vec(), data: vec![value; n], grad: None, requires_grad: false }
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: (0..n).map(&mut f).collect(),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match self.dims.as_slice() {
            &[c, h, w] => Ok((c, h, w)),
            d => Err(Error::shape("chw", format!("expected 3 dims, got {d:?}"))),
        }
    }

    pub fn at3(&self, c: usize, y: usize, x: usize) -> f64 {
        let (h, w) = (self.dims[1], self.dims[2]);
        self.data[(c * h + y) * w + x]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn with_requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    /// Bitwise equality of shape and values, ignoring gradient state.
    pub fn bit_eq(&self, other: &Tensor) -> bool {
        self.dims == other.dims
            && self.data.len() == other.data.len()
            && self.data.iter().zip(&other.data).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

const MAGIC: &[u8; 4] = b"EFBT";
const VERSION: u8 = 1;

/// Payload element type of an `EFBT` file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

pub fn encode(tensor: &Tensor, dtype: DType) -> Result<Vec<u8>> {
    let ndim = u8::try_from(tensor.dims.len())
        .map_err(|_| Error::Invalid(format!("too many dims: {}", tensor.dims.len())))?;
    let width = match dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(7 + 4 * tensor.dims.len() + width * tensor.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype as u8);
    out.push(ndim);
    for &d in &tensor.dims {
        let d = u32::try_from(d).map_err(|_| Error::Invalid(format!("dim {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match dtype {
        DType::F32 => tensor.data.iter().for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => tensor.data.iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    let bad = |m: &str| Error::Invalid(format!("malformed EFBT data: {m}"));
    if bytes.len() < 7 || &bytes[..4] != MAGIC {
        return Err(bad("missing magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| bad(&format!("dtype code {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    let mut pos = 7;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let raw = bytes.get(pos..pos + 4).ok_or_else(|| bad("truncated header"))?;
        dims.push(u32::from_le_bytes(raw.try_into().unwrap()) as usize);
        pos += 4;
    }
    let n: usize = dims.iter().product();
    let payload = &bytes[pos..];
    let data = match dtype {
        DType::F32 => {
            if payload.len() != 4 * n {
                return Err(bad("payload length"));
            }
            payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
        }
        DType::F64 => {
            if payload.len() != 8 * n {
                return Err(bad("payload length"));
            }
            payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
        }
    };
    Tensor::new(&dims, data)
}

pub fn write_tensor(path: &Path, tensor: &Tensor, dtype: DType) -> Result<()> {
    let bytes = encode(tensor, dtype)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&bytes).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Invalid(m) => Error::Invalid(format!("{}: {m}", path.display())),
        other => other,
    })
}
