//! Dense row-major `f64` tensors.
//!
//! No strides or views: every operation returns a fresh tensor. Shapes are
//! checked on every binary op and mismatches come back as
//! [`Error::Dimension`] naming both shapes.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::rng::RngState;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(Error::Shape(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data)
    }

    /// Builds a 2-D tensor from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![m, n], rows.concat())
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        assert!(len > 0, "zero-sized tensor shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        assert!(len > 0, "zero-sized tensor shape {shape:?}");
        Self {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn randn(shape: &[usize], rng: &mut RngState) -> Self {
        Self::from_fn(shape, |_| rng.normal())
    }

    pub fn rand_uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut RngState) -> Self {
        Self::from_fn(shape, |_| rng.uniform_range(lo, hi))
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [m, n] => Ok((m, n)),
            _ => Err(Error::Shape(format!(
                "expected a 2-D tensor, got {:?}",
                self.shape
            ))),
        }
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    fn check_same(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension {
                op,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other, op)?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn scale(&self, alpha: f64) -> Self {
        self.map(|v| v * alpha)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self[i, :] += row` for every row of a 2-D tensor.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if row.shape != [n] {
            return Err(Error::Dimension {
                op: "add_row",
                left: self.shape.clone(),
                right: row.shape.clone(),
            });
        }
        let mut data = self.data.clone();
        for i in 0..m {
            for (d, &b) in data[i * n..(i + 1) * n].iter_mut().zip(&row.data) {
                *d += b;
            }
        }
        Ok(Self {
            shape: self.shape.clone(),
            data,
        })
    }

    /// Column sums of a 2-D tensor.
    pub fn sum_rows(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for (o, &v) in out.iter_mut().zip(&self.data[i * n..(i + 1) * n]) {
                *o += v;
            }
        }
        Self::vector(out)
    }

    /// Horizontal concatenation of two 2-D tensors with equal row counts.
    pub fn concat_cols(&self, other: &Self) -> Result<Self> {
        let (m, n1) = self.dims2()?;
        let (m2, n2) = other.dims2()?;
        if m != m2 {
            return Err(Error::Dimension {
                op: "concat_cols",
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(m * (n1 + n2));
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n1..(i + 1) * n1]);
            data.extend_from_slice(&other.data[i * n2..(i + 1) * n2]);
        }
        Self::new(vec![m, n1 + n2], data)
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (m, n) = self.dims2()?;
        if start >= end || end > n {
            return Err(Error::Shape(format!("column range {start}..{end} out of 0..{n}")));
        }
        let mut data = Vec::with_capacity(m * (end - start));
        for i in 0..m {
            data.extend_from_slice(&self.data[i * n + start..i * n + end]);
        }
        Self::new(vec![m, end - start], data)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (m, n) = self.dims2()?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Self::new(vec![n, m], data)
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        matmul(self, other)
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn norm_l2(&self) -> f64 {
        self.sum_sq().sqrt()
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// `max - min`.
    pub fn range(&self) -> f64 {
        self.max() - self.min()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Serializes in the MDTN layout: magic `MDTN`, version, rank, extents,
    /// then the little-endian `f64` payload.
    pub fn write_mdtn<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MDTN_MAGIC)?;
        w.write_all(&MDTN_VERSION.to_le_bytes())?;
        w.write_all(&(self.rank() as u32).to_le_bytes())?;
        for &e in &self.shape {
            let e = u32::try_from(e)
                .map_err(|_| Error::Format(format!("extent {e} does not fit in u32")))?;
            w.write_all(&e.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_mdtn_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(12 + 4 * self.rank() + 8 * self.len());
        self.write_mdtn(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_mdtn<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MDTN_MAGIC {
            return Err(Error::Format(format!("bad magic {magic:?}")));
        }
        let version = read_u32(&mut r)?;
        if version != MDTN_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let rank = read_u32(&mut r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::Format(format!("unsupported rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r)? as usize);
        }
        let len: usize = shape.iter().product();
        let mut bytes = vec![0u8; len * 8];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        Self::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub const MDTN_MAGIC: &[u8; 4] = b"MDTN";
pub const MDTN_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// `c[i, j] = Σ_k a[i, k] · b[k, j]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension {
            op: "matmul",
            left: a.shape.clone(),
            right: b.shape.clone(),
        });
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b.data[p * n..(p + 1) * n]) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `‖x − y‖₂ / ‖y‖₂`.
pub fn relative_l2(x: &Tensor, y: &Tensor) -> Result<f64> {
    let diff = x.sub(y)?;
    let denom = y.norm_l2();
    if denom == 0.0 {
        return Err(Error::DegenerateReference);
    }
    Ok(diff.norm_l2() / denom)
}

/// Largest singular value of a 2-D tensor by power iteration on `wᵀw`.
///
/// Stops once the relative change of the estimate falls to `tol`. The start
/// vector is drawn from a fixed seed so results are reproducible.
pub fn operator_norm(w: &Tensor, tol: f64, max_iter: usize) -> Result<f64> {
    if !(tol > 0.0) || max_iter == 0 {
        return Err(Error::Config(format!(
            "operator_norm needs tol > 0 and max_iter >= 1 (got {tol}, {max_iter})"
        )));
    }
    let (_, n) = w.dims2()?;
    let wt = w.transpose()?;
    let mut rng = RngState::new(0x5EED_0F0B);
    let mut v = Tensor::randn(&[n, 1], &mut rng);
    let norm = v.norm_l2();
    v = v.scale(1.0 / norm);

    let mut sigma = w.matmul(&v)?.norm_l2();
    if sigma == 0.0 {
        return Ok(0.0);
    }
    for _ in 0..max_iter {
        let u = w.matmul(&v)?;
        let g = wt.matmul(&u)?;
        let gn = g.norm_l2();
        if gn == 0.0 {
            return Ok(0.0);
        }
        v = g.scale(1.0 / gn);
        let next = w.matmul(&v)?.norm_l2();
        let change = (next - sigma).abs() / next;
        sigma = next;
        if change <= tol {
            return Ok(sigma);
        }
    }
    Err(Error::Convergence {
        iterations: max_iter,
        last_estimate: sigma,
    })
}
