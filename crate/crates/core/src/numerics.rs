//! Dense row-major storage and the handful of reductions everything else is
//! built from. All sums run sequentially in index order so identical inputs
//! give bit-identical outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major array of `f64` with an explicit shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero extent in shape {shape:?}")));
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

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    /// Builds a `[rows, cols]` matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    /// Number of rows when viewed as a matrix over the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

pub fn softmax_stable(logits: &[f64]) -> Result<Vec<f64>> {
    let max = max_of(logits)?;
    let exps: Vec<f64> = logits.iter().map(|&x| (x - max).exp()).collect();
    let total = seq_sum(&exps);
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn logsumexp(logits: &[f64]) -> Result<f64> {
    let max = max_of(logits)?;
    if max == f64::NEG_INFINITY {
        return Ok(f64::NEG_INFINITY);
    }
    let total = seq_sum(&logits.iter().map(|&x| (x - max).exp()).collect::<Vec<_>>());
    Ok(max + total.ln())
}

/// `W·x + b` where `w` is `[rows, cols]`.
pub fn affine(x: &[f64], w: &DenseArray, b: &[f64]) -> Result<Vec<f64>> {
    if w.shape().len() != 2 {
        return Err(Error::Shape(format!("weight must be 2-d, got {:?}", w.shape())));
    }
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    if cols != x.len() || rows != b.len() {
        return Err(Error::Shape(format!(
            "affine: weight {rows}x{cols}, input {}, bias {}",
            x.len(),
            b.len()
        )));
    }
    Ok((0..rows).map(|r| b[r] + dot(w.row(r), x)).collect())
}

/// Per-dimension mean over the rows of a `[T, d]` matrix.
pub fn mean_pool(frames: &DenseArray) -> Result<Vec<f64>> {
    let t = frames.rows();
    if frames.is_empty() || t == 0 {
        return Err(Error::Domain("mean_pool over zero frames".into()));
    }
    let mut acc = vec![0.0; frames.cols()];
    for r in 0..t {
        for (a, v) in acc.iter_mut().zip(frames.row(r)) {
            *a += v;
        }
    }
    let n = t as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

/// Sequential left-to-right sum.
pub fn seq_sum(xs: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in xs {
        s += x;
    }
    s
}

/// `out += scale * x`
pub fn axpy(out: &mut [f64], scale: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += scale * v;
    }
}

/// Vector-Jacobian product of softmax: given `probs = softmax(z)` and
/// `grad = dL/dprobs`, returns `dL/dz`.
pub fn softmax_backward(probs: &[f64], grad: &[f64]) -> Vec<f64> {
    let inner = dot(probs, grad);
    probs.iter().zip(grad).map(|(p, g)| p * (g - inner)).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn max_of(xs: &[f64]) -> Result<f64> {
    if xs.is_empty() {
        return Err(Error::Domain("empty input".into()));
    }
    Ok(xs.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_uniform_at_zero() {
        let p = softmax_stable(&[0.0; 4]).unwrap();
        assert_eq!(p, vec![0.25; 4]);
    }

    #[test]
    fn softmax_closed_form() {
        let p = softmax_stable(&[0.0, 3f64.ln()]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-15);
        assert!((p[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_and_logsumexp_reject_empty() {
        assert!(matches!(softmax_stable(&[]), Err(Error::Domain(_))));
        assert!(matches!(logsumexp(&[]), Err(Error::Domain(_))));
    }

    #[test]
    fn logsumexp_values() {
        assert_eq!(logsumexp(&[0.0]).unwrap(), 0.0);
        let c = -3.5;
        assert!((logsumexp(&[c, c]).unwrap() - (c + 2f64.ln())).abs() < 1e-15);
        let big = logsumexp(&[1000.0, 1000.0]).unwrap();
        assert!(big.is_finite());
        assert!((big - (1000.0 + 2f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn affine_cases() {
        let w = DenseArray::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(affine(&[1.0, 1.0], &w, &[0.0, 1.0]).unwrap(), vec![3.0, 8.0]);

        let eye = DenseArray::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(affine(&[5.0, -2.0], &eye, &[0.0, 0.0]).unwrap(), vec![5.0, -2.0]);

        let zero = DenseArray::zeros(vec![2, 2]);
        assert_eq!(affine(&[5.0, -2.0], &zero, &[7.0, 9.0]).unwrap(), vec![7.0, 9.0]);

        assert!(matches!(affine(&[1.0], &w, &[0.0, 0.0]), Err(Error::Shape(_))));
        assert!(matches!(affine(&[1.0, 1.0], &w, &[0.0]), Err(Error::Shape(_))));
    }

    #[test]
    fn mean_pool_cases() {
        let m = DenseArray::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0]]).unwrap();
        assert_eq!(mean_pool(&m).unwrap(), vec![2.0, 4.0]);

        let single = DenseArray::from_rows(&[vec![0.3, -1.7]]).unwrap();
        assert_eq!(mean_pool(&single).unwrap(), vec![0.3, -1.7]);

        let sym = DenseArray::from_rows(&[vec![0.3, -1.7], vec![-0.3, 1.7]]).unwrap();
        assert_eq!(mean_pool(&sym).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn dense_array_rejects_bad_shapes() {
        assert!(DenseArray::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(DenseArray::new(vec![0, 2], vec![]).is_err());
        assert!(DenseArray::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
    }

    #[test]
    fn softmax_backward_matches_finite_difference() {
        let z = [0.3, -1.2, 2.0];
        let g = [0.7, -0.1, 0.4];
        let analytic = softmax_backward(&softmax_stable(&z).unwrap(), &g);
        let h = 1e-6;
        for k in 0..3 {
            let (mut up, mut dn) = (z, z);
            up[k] += h;
            dn[k] -= h;
            let f = |v: &[f64]| dot(&softmax_stable(v).unwrap(), &g);
            let fd = (f(&up) - f(&dn)) / (2.0 * h);
            assert!((fd - analytic[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[1.0]), 0);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(x in prop::collection::vec(-50.0f64..50.0, 1..64)) {
            let p = softmax_stable(&x).unwrap();
            prop_assert!((seq_sum(&p) - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0));
        }

        #[test]
        fn softmax_shift_invariant(x in prop::collection::vec(-50.0f64..50.0, 1..64), c in -100.0f64..100.0) {
            let p = softmax_stable(&x).unwrap();
            let shifted: Vec<f64> = x.iter().map(|v| v + c).collect();
            let q = softmax_stable(&shifted).unwrap();
            for (a, b) in p.iter().zip(&q) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn logsumexp_bounds(x in prop::collection::vec(-50.0f64..50.0, 1..64)) {
            let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let l = logsumexp(&x).unwrap();
            prop_assert!(l >= m);
            prop_assert!(l <= m + (x.len() as f64).ln() + 1e-12);
        }

        #[test]
        fn reductions_are_repeatable(x in prop::collection::vec(-50.0f64..50.0, 1..64)) {
            prop_assert_eq!(logsumexp(&x).unwrap().to_bits(), logsumexp(&x).unwrap().to_bits());
            let a = softmax_stable(&x).unwrap();
            let b = softmax_stable(&x).unwrap();
            prop_assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
    }
}
