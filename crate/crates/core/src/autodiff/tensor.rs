use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense row-major array. Rank is usually 1 or 2; convolution kernels are rank 3.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Invalid(format!(
                "tensor of shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Builds a `[rows, cols]` matrix from row slices of equal length.
    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Invalid("ragged rows".into()));
        }
        Ok(Self {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Leading dimension; 1 for scalars.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[0],
        }
    }

    /// Product of trailing dimensions; for a rank-1 tensor this is 1.
    pub fn cols(&self) -> usize {
        if self.shape.len() <= 1 {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Element-type conversion through `f64`.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::lit(x.to_f64_lossy())).collect(),
        }
    }

    pub fn transpose2(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs())
            .fold(T::zero(), T::max)
    }

    /// Plain `self · other` for 2-D tensors.
    pub fn matmul(&self, other: &Self) -> Self {
        let (m, k, n) = (self.rows(), self.cols(), other.cols());
        assert_eq!(k, other.rows(), "matmul inner dimensions");
        let mut out = vec![T::zero(); m * n];
        gemm_acc(&self.data, &other.data, &mut out, m, k, n);
        Self {
            shape: vec![m, n],
            data: out,
        }
    }

    /// Plain `self · otherᵀ` for 2-D tensors.
    pub fn matmul_t(&self, other: &Self) -> Self {
        let (m, n, k) = (self.rows(), self.cols(), other.rows());
        assert_eq!(n, other.cols(), "matmul_t inner dimensions");
        let mut out = vec![T::zero(); m * k];
        gemm_nt_acc(&self.data, &other.data, &mut out, m, k, n);
        Self {
            shape: vec![m, k],
            data: out,
        }
    }
}

/// Below this many rows the packing cost of the blocked kernel outweighs
/// its gain; single-row products dominate the recurrent decoder.
const BLOCKED_MIN_ROWS: usize = 4;

/// `out[m,n] += a[m,k] · b[k,n]`, all row-major.
pub(crate) fn gemm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if m >= BLOCKED_MIN_ROWS {
        let (k_, n_) = (k as isize, n as isize);
        return T::gemm_strided(m, k, n, a, (k_, 1), b, (n_, 1), out, (n_, 1));
    }
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] · b[k,n]ᵀ`.
pub(crate) fn gemm_nt_acc<T: Scalar>(
    g: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    if m >= BLOCKED_MIN_ROWS {
        let (k_, n_) = (k as isize, n as isize);
        return T::gemm_strided(m, n, k, g, (n_, 1), b, (1, n_), out, (k_, 1));
    }
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&x, &y) in grow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * k + p] += acc;
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · g[m,n]`.
pub(crate) fn gemm_tn_acc<T: Scalar>(
    a: &[T],
    g: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    if m >= BLOCKED_MIN_ROWS {
        let (k_, n_) = (k as isize, n as isize);
        return T::gemm_strided(k, m, n, a, (1, k_), g, (n_, 1), out, (n_, 1));
    }
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for (p, &av) in a[i * k..(i + 1) * k].iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_wrong_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn gemm_variants_agree_with_naive_product() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0f64, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut out = [0.0; 4];
        gemm_acc(&a, &b, &mut out, 2, 3, 2);
        assert_eq!(out, [58.0, 64.0, 139.0, 154.0]);

        // aᵀ·out has shape 3x2
        let mut tn = [0.0; 6];
        gemm_tn_acc(&a, &out, &mut tn, 2, 3, 2);
        assert_eq!(tn[0], 1.0 * 58.0 + 4.0 * 139.0);

        // out·bᵀ has shape 2x3
        let mut nt = [0.0; 6];
        gemm_nt_acc(&out, &b, &mut nt, 2, 3, 2);
        assert_eq!(nt[0], 58.0 * 7.0 + 64.0 * 8.0);
    }

    #[test]
    fn blocked_and_row_paths_agree() {
        let (m, k, n) = (9, 7, 5);
        let a: Vec<f64> = (0..m * k)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.3)
            .collect();
        let b: Vec<f64> = (0..k * n)
            .map(|i| ((i * 13 % 7) as f64 - 3.0) * 0.7)
            .collect();
        let g: Vec<f64> = (0..m * n)
            .map(|i| ((i * 5 % 9) as f64 - 4.0) * 0.2)
            .collect();
        let naive = |i: usize, j: usize| (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum::<f64>();

        let mut out = vec![1.0; m * n];
        gemm_acc(&a, &b, &mut out, m, k, n);
        for i in 0..m {
            for j in 0..n {
                assert!((out[i * n + j] - 1.0 - naive(i, j)).abs() < 1e-12);
            }
        }
        // the row path (m < 4) must agree with the blocked one row for row
        let mut nt_blocked = vec![0.0; m * k];
        gemm_nt_acc(&g, &b, &mut nt_blocked, m, k, n);
        let mut tn_blocked = vec![0.0; k * n];
        gemm_tn_acc(&a, &g, &mut tn_blocked, m, k, n);
        let mut tn_rows = vec![0.0; k * n];
        for i in 0..m {
            let mut row = vec![0.0; k];
            gemm_nt_acc(&g[i * n..(i + 1) * n], &b, &mut row, 1, k, n);
            for p in 0..k {
                assert!((row[p] - nt_blocked[i * k + p]).abs() < 1e-12);
            }
            gemm_tn_acc(
                &a[i * k..(i + 1) * k],
                &g[i * n..(i + 1) * n],
                &mut tn_rows,
                1,
                k,
                n,
            );
        }
        for (x, y) in tn_rows.iter().zip(&tn_blocked) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transpose_round_trip() {
        let t = Tensor::<f32>::from_fn(&[3, 4], |i| i as f32);
        assert_eq!(t.transpose2().transpose2(), t);
        assert_eq!(t.transpose2().at(1, 0), 1.0);
    }
}
