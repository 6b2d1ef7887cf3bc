//! Minimal dense-matrix numerics used by the importance scorer.
//!
//! Everything here works on row-major `f32` storage and accumulates in `f64`
//! with a fixed sequential order, so results are bit-reproducible.

use std::fmt;
use std::str::FromStr;

use half::{bf16, f16};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element encodings accepted in checkpoint files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Dtype {
    F32,
    F16,
    BF16,
}

impl Dtype {
    pub fn byte_width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F16 | Dtype::BF16 => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Dtype::F32 => "F32",
            Dtype::F16 => "F16",
            Dtype::BF16 => "BF16",
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Dtype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "F32" => Ok(Dtype::F32),
            "F16" => Ok(Dtype::F16),
            "BF16" => Ok(Dtype::BF16),
            other => Err(Error::Format(format!("unsupported dtype `{other}`"))),
        }
    }
}

/// Decodes `count` little-endian elements into `f32`, rejecting non-finite values.
///
/// `tensor` is only used to name the offending tensor in errors.
pub fn decode_to_f32(raw: &[u8], dtype: Dtype, count: usize, tensor: &str) -> Result<Vec<f32>> {
    let expected = count
        .checked_mul(dtype.byte_width())
        .ok_or_else(|| Error::Format(format!("tensor `{tensor}`: element count overflows")))?;
    if raw.len() != expected {
        return Err(Error::Format(format!(
            "tensor `{tensor}`: {} bytes for {count} {dtype} elements (expected {expected})",
            raw.len()
        )));
    }

    let values: Vec<f32> = match dtype {
        Dtype::F32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => raw
            .chunks_exact(2)
            .map(|c| f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => raw
            .chunks_exact(2)
            .map(|c| bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
    };

    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data {
            tensor: tensor.to_string(),
            reason: format!("non-finite value {} at element {pos}", values[pos]),
        });
    }
    Ok(values)
}

/// Encodes values in `dtype`. Narrowing is exact for values that were widened from that dtype.
pub fn encode_from_f32(values: &[f32], dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * dtype.byte_width());
    match dtype {
        Dtype::F32 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        Dtype::F16 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&f16::from_f32(*v).to_le_bytes())),
        Dtype::BF16 => values
            .iter()
            .for_each(|v| out.extend_from_slice(&bf16::from_f32(*v).to_le_bytes())),
    }
    out
}

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::Argument(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if rows.checked_mul(cols) != Some(data.len()) {
            return Err(Error::Argument(format!(
                "matrix {rows}x{cols} needs {} elements, got {}",
                rows.saturating_mul(cols),
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows; mostly useful in tests and fixtures.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != cols) {
            return Err(Error::Argument("ragged rows".into()));
        }
        let data = rows
            .iter()
            .flat_map(|r| r.as_ref().iter().copied())
            .collect();
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Result<Self> {
        Self::new(rows, cols, vec![0.0; rows.saturating_mul(cols)])
    }

    pub fn identity(n: usize) -> Result<Self> {
        let mut m = Self::zeros(n, n)?;
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        Ok(m)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.cols + col]
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.data[r * self.cols + c]);
            }
        }
        DenseMatrix {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }

    /// Multiplies every element by `factor` in `f32`.
    pub fn scaled(&self, factor: f32) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }
}

/// A 64-bit accumulator produced by the reductions below.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ScalarStat(pub f64);

impl ScalarStat {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// Computes `b · a` with `f64` accumulation, rounding to `f32` on store.
///
/// `label` names the layer in shape errors.
pub fn matmul(b: &DenseMatrix, a: &DenseMatrix, label: &str) -> Result<DenseMatrix> {
    if b.cols != a.rows {
        return Err(Error::shape(
            label,
            &b.shape(),
            &a.shape(),
            "inner dimensions of the product disagree",
        ));
    }
    let (m, r, n) = (b.rows, b.cols, a.cols);
    let a64: Vec<f64> = a.data.iter().map(|&v| f64::from(v)).collect();
    let mut out = Vec::with_capacity(m * n);
    let mut acc = vec![0.0f64; n];
    for i in 0..m {
        acc.iter_mut().for_each(|v| *v = 0.0);
        let b_row = &b.data[i * r..(i + 1) * r];
        for (p, &bv) in b_row.iter().enumerate() {
            let bv = f64::from(bv);
            let a_row = &a64[p * n..(p + 1) * n];
            for (dst, &av) in acc.iter_mut().zip(a_row) {
                *dst += bv * av;
            }
        }
        out.extend(acc.iter().map(|&v| v as f32));
    }
    Ok(DenseMatrix {
        rows: m,
        cols: n,
        data: out,
    })
}

/// Sum of `|x|` over all elements in row-major order.
pub fn abs_sum(m: &DenseMatrix) -> ScalarStat {
    ScalarStat(
        m.data
            .iter()
            .fold(0.0f64, |acc, v| acc + f64::from(v.abs())),
    )
}

/// Sum of the `k` largest absolute values, `k` clamped to the element count.
///
/// The selected values are summed in descending order, which makes the
/// result identical to sorting everything and summing the first `k`.
pub fn topk_abs_sum(m: &DenseMatrix, k: usize) -> Result<ScalarStat> {
    if k == 0 {
        return Err(Error::Argument("top-k requires k >= 1".into()));
    }
    if k >= m.len() {
        return Ok(abs_sum(m));
    }
    let mut mags: Vec<f32> = m.data.iter().map(|v| v.abs()).collect();
    mags.select_nth_unstable_by(k - 1, |x, y| y.total_cmp(x));
    let top = &mut mags[..k];
    top.sort_unstable_by(|x, y| y.total_cmp(x));
    Ok(ScalarStat(
        top.iter().fold(0.0f64, |acc, v| acc + f64::from(*v)),
    ))
}
