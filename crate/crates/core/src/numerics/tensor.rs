use std::fs;
use std::path::Path;

use super::Scalar;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"UPTN";

/// Dense row-major array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("tensor", format!("zero extent in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::ZERO)
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let n = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Self::new(shape.to_vec(), values.iter().map(|&v| F::of(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    /// Value of a rank-0 (or single-element) tensor.
    pub fn item(&self) -> F {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(op, format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn cast<G: Scalar>(&self) -> Tensor<G> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|v| G::of(v.to_f64())).collect() }
    }

    pub fn sum(&self) -> F {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> F {
        self.sum() / F::of(self.data.len() as f64)
    }

    /// Index of the first NaN or infinity, if any.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// Serializes to the UPTN binary layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let width = F::PRECISION_CODE as usize;
        let mut out = Vec::with_capacity(6 + 4 * self.shape.len() + width * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(self.shape.len() as u8);
        for &d in &self.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.push(F::PRECISION_CODE);
        for &v in &self.data {
            v.write_le(&mut out);
        }
        out
    }

    /// Parses a UPTN buffer. Values stored at the other precision are converted.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |m: &str| Error::Format(m.to_string());
        if bytes.len() < 6 || &bytes[..4] != MAGIC {
            return Err(fail("missing UPTN magic"));
        }
        let rank = bytes[4] as usize;
        let header = 5 + 4 * rank;
        if bytes.len() < header + 1 {
            return Err(fail("truncated header"));
        }
        let shape: Vec<usize> = (0..rank)
            .map(|i| {
                let o = 5 + 4 * i;
                u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize
            })
            .collect();
        let code = bytes[header];
        let body = &bytes[header + 1..];
        let n: usize = shape.iter().product();
        let data: Vec<F> = match code {
            4 => decode::<f32, F>(body, n)?,
            8 => decode::<f64, F>(body, n)?,
            other => return Err(Error::Format(format!("unknown precision code {other}"))),
        };
        Self::new(shape, data)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

fn decode<S: Scalar, F: Scalar>(body: &[u8], n: usize) -> Result<Vec<F>> {
    let width = S::PRECISION_CODE as usize;
    if body.len() != n * width {
        return Err(Error::Format(format!(
            "expected {} payload bytes, found {}",
            n * width,
            body.len()
        )));
    }
    Ok(body.chunks_exact(width).map(|c| F::of(S::read_le(c).to_f64())).collect())
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}
