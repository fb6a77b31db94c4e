//! Dense n-dimensional `f64` arrays in row-major layout.
//!
//! The tensor is deliberately minimal: flat storage plus the shape algebra
//! the graph primitives need (strides, broadcasting, a matmul kernel). All
//! structured operations live in [`crate::autodiff`].

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(
                "tensor",
                format!(
                    "shape {:?} implies {} elements, data has {}",
                    shape,
                    expected,
                    data.len()
                ),
            ));
        }
        if shape.contains(&0) {
            return Err(Error::shape("tensor", format!("zero-sized dim in {shape:?}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::filled(shape, 1.0)
    }

    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The single element of a scalar-shaped tensor (any shape of product 1).
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn set(&mut self, index: &[usize], value: f64) {
        let i = flat_index(&self.shape, index);
        self.data[i] = value;
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// Row-major strides, with stride 0 reserved for broadcasting callers.
    pub fn strides(&self) -> Vec<usize> {
        strides_of(&self.shape)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.numel(), other.numel());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

pub(crate) fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        strides[i] = acc;
        acc *= shape[i];
    }
    strides
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    debug_assert_eq!(shape.len(), index.len());
    let mut flat = 0;
    let mut stride = 1;
    for i in (0..shape.len()).rev() {
        debug_assert!(index[i] < shape[i]);
        flat += index[i] * stride;
        stride *= shape[i];
    }
    flat
}

/// Shape of `lhs op rhs` under trailing-dimension broadcasting, or an error
/// naming both shapes.
pub(crate) fn broadcast_shape(op: &str, lhs: &[usize], rhs: &[usize]) -> Result<Vec<usize>> {
    let rank = lhs.len().max(rhs.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let l = dim_from_end(lhs, rank - 1 - i);
        let r = dim_from_end(rhs, rank - 1 - i);
        out[i] = if l == r {
            l
        } else if l == 1 {
            r
        } else if r == 1 {
            l
        } else {
            return Err(Error::shape(
                op,
                format!("cannot broadcast {lhs:?} with {rhs:?}"),
            ));
        };
    }
    Ok(out)
}

fn dim_from_end(shape: &[usize], pos_from_end: usize) -> usize {
    if pos_from_end < shape.len() {
        shape[shape.len() - 1 - pos_from_end]
    } else {
        1
    }
}

/// Strides for reading `shape` as if it had `target` shape: broadcast dims
/// get stride 0, missing leading dims get stride 0.
pub(crate) fn broadcast_strides(shape: &[usize], target: &[usize]) -> Vec<usize> {
    let strides = strides_of(shape);
    let mut out = vec![0; target.len()];
    let offset = target.len() - shape.len();
    for i in 0..shape.len() {
        out[offset + i] = if shape[i] == 1 && target[offset + i] != 1 {
            0
        } else {
            strides[i]
        };
    }
    out
}

/// Apply `f` elementwise over the broadcast of `a` and `b`.
pub(crate) fn broadcast_zip(
    op: &str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        // fast path, also the common case
        let data = a
            .data
            .iter()
            .zip(b.data.iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor {
            shape: a.shape.clone(),
            data,
        });
    }
    let out_shape = broadcast_shape(op, &a.shape, &b.shape)?;
    let n: usize = out_shape.iter().product();
    let sa = broadcast_strides(&a.shape, &out_shape);
    let sb = broadcast_strides(&b.shape, &out_shape);
    let mut data = Vec::with_capacity(n);
    let mut index = vec![0usize; out_shape.len()];
    let mut off_a = 0usize;
    let mut off_b = 0usize;
    for _ in 0..n {
        data.push(f(a.data[off_a], b.data[off_b]));
        // advance the multi-index
        for axis in (0..out_shape.len()).rev() {
            index[axis] += 1;
            off_a += sa[axis];
            off_b += sb[axis];
            if index[axis] < out_shape[axis] {
                break;
            }
            off_a -= sa[axis] * out_shape[axis];
            off_b -= sb[axis] * out_shape[axis];
            index[axis] = 0;
        }
    }
    Ok(Tensor {
        shape: out_shape,
        data,
    })
}

/// Materialize `t` broadcast to `target`.
pub(crate) fn broadcast_to(op: &str, t: &Tensor, target: &[usize]) -> Result<Tensor> {
    // Validate compatibility by broadcasting against the target itself.
    let joint = broadcast_shape(op, &t.shape, target)?;
    if joint != target {
        return Err(Error::shape(
            op,
            format!("cannot broadcast {:?} to {:?}", t.shape, target),
        ));
    }
    if t.shape == target {
        return Ok(t.clone());
    }
    let n: usize = target.iter().product();
    let st = broadcast_strides(&t.shape, target);
    let mut data = Vec::with_capacity(n);
    let mut index = vec![0usize; target.len()];
    let mut off = 0usize;
    for _ in 0..n {
        data.push(t.data[off]);
        for axis in (0..target.len()).rev() {
            index[axis] += 1;
            off += st[axis];
            if index[axis] < target[axis] {
                break;
            }
            off -= st[axis] * target[axis];
            index[axis] = 0;
        }
    }
    Ok(Tensor {
        shape: target.to_vec(),
        data,
    })
}

/// `(m,k)·(k,n)` matrix product.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::shape(
            "matmul",
            format!("expects rank-2 operands, got {:?} and {:?}", a.shape, b.shape),
        ));
    }
    let (m, k) = (a.shape[0], a.shape[1]);
    let (k2, n) = (b.shape[0], b.shape[1]);
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("inner dims differ: {:?} x {:?}", a.shape, b.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[l * n..(l + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Sum over `axes` (sorted, unique); `keepdims` keeps reduced axes as size 1.
pub(crate) fn reduce_sum(t: &Tensor, axes: &[usize], keepdims: bool) -> Tensor {
    let rank = t.rank();
    let reduce_all: Vec<usize> = if axes.is_empty() {
        (0..rank).collect()
    } else {
        axes.to_vec()
    };
    let mut kept_shape = t.shape.clone();
    for &a in &reduce_all {
        kept_shape[a] = 1;
    }
    let out_n: usize = kept_shape.iter().product();
    let mut out = vec![0.0; out_n];
    let out_strides = strides_of(&kept_shape);
    let mut index = vec![0usize; rank];
    for &v in &t.data {
        let mut off = 0;
        for i in 0..rank {
            if kept_shape[i] != 1 {
                off += index[i] * out_strides[i];
            }
        }
        out[off] += v;
        for axis in (0..rank).rev() {
            index[axis] += 1;
            if index[axis] < t.shape[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    let shape = if keepdims {
        kept_shape
    } else {
        t.shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !reduce_all.contains(i))
            .map(|(_, &d)| d)
            .collect()
    };
    Tensor { shape, data: out }
}

/// Per-row maximum of a rank-2 tensor, shape `(rows, 1)`.
pub(crate) fn row_max(t: &Tensor) -> Result<Tensor> {
    if t.rank() != 2 {
        return Err(Error::shape(
            "row_max",
            format!("expects rank-2, got {:?}", t.shape),
        ));
    }
    let (rows, cols) = (t.shape[0], t.shape[1]);
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &t.data[r * cols..(r + 1) * cols];
        out.push(row.iter().cloned().fold(f64::NEG_INFINITY, f64::max));
    }
    Ok(Tensor {
        shape: vec![rows, 1],
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_element_count() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn scalar_is_rank_zero() {
        let s = Tensor::scalar(4.0);
        assert_eq!(s.rank(), 0);
        assert_eq!(s.numel(), 1);
        assert_eq!(s.item(), 4.0);
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[2, 1], &[1, 4]).unwrap(), vec![2, 4]);
        assert_eq!(broadcast_shape("t", &[], &[5]).unwrap(), vec![5]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn broadcast_zip_matches_manual() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2], vec![10.0, 20.0]).unwrap();
        let c = broadcast_zip("add", &a, &b, |x, y| x + y).unwrap();
        assert_eq!(c.data(), &[11.0, 22.0, 13.0, 24.0]);
    }

    #[test]
    fn matmul_small() {
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[17.0, 39.0]);
    }

    #[test]
    fn reduce_sum_axes() {
        let t = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let rows = reduce_sum(&t, &[1], false);
        assert_eq!(rows.shape(), &[2]);
        assert_eq!(rows.data(), &[6.0, 15.0]);
        let cols = reduce_sum(&t, &[0], true);
        assert_eq!(cols.shape(), &[1, 3]);
        assert_eq!(cols.data(), &[5.0, 7.0, 9.0]);
        let all = reduce_sum(&t, &[], false);
        assert_eq!(all.shape(), &[] as &[usize]);
        assert_eq!(all.item(), 21.0);
    }
}
