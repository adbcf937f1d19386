//! Dense kernels shared by every other module.
//!
//! All aggregation math runs in `f64`. Matrices are row-major.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input, so keep
    /// it to literals and tests.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn diagonal(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m.data[i * values.len() + i] = *v;
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without materialising the transpose.
    pub fn t_matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Dimension(format!(
                "t_matmul {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "matmul_t {}x{} by ({}x{})ᵀ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// Gram matrix `selfᵀ · self`.
    pub fn gram(&self) -> Matrix {
        let mut g = self.t_matmul(self).expect("gram shapes always agree");
        g.symmetrize();
        g
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha · other`
    pub fn axpy(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        self.check_same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        self.check_same_shape(other)?;
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| f(*a, *b))
                .collect(),
        })
    }

    fn check_same_shape(&self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    /// Largest `|a_ij − a_ji|`; zero for non-square input is meaningless, so
    /// returns infinity there.
    pub fn asymmetry(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let n = self.rows;
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                worst = worst.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        worst
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square() && self.asymmetry() <= tol
    }

    /// Replaces the matrix with `(A + Aᵀ)/2`.
    pub fn symmetrize(&mut self) {
        let n = self.rows;
        debug_assert!(self.is_square());
        for i in 0..n {
            for j in (i + 1)..n {
                let m = 0.5 * (self.data[i * n + j] + self.data[j * n + i]);
                self.data[i * n + j] = m;
                self.data[j * n + i] = m;
            }
        }
    }

    /// Reorders rows and columns: `out[i][j] = self[perm[i]][perm[j]]`.
    pub fn permute_symmetric(&self, perm: &[usize]) -> Result<Matrix> {
        if !self.is_square() || perm.len() != self.rows {
            return Err(Error::Dimension(format!(
                "permutation of length {} for {}x{} matrix",
                perm.len(),
                self.rows,
                self.cols
            )));
        }
        let n = self.rows;
        let mut out = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out.data[i * n + j] = self.data[perm[i] * n + perm[j]];
            }
        }
        Ok(out)
    }

    /// `out[i] = self[perm[i]]` row-wise.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Matrix> {
        if perm.len() != self.rows {
            return Err(Error::Dimension(format!(
                "row permutation of length {} for {} rows",
                perm.len(),
                self.rows
            )));
        }
        let mut out = Matrix::zeros(self.rows, self.cols);
        for (i, &p) in perm.iter().enumerate() {
            out.row_mut(i).copy_from_slice(self.row(p));
        }
        Ok(out)
    }

    fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn from_nalgebra(m: &DMatrix<f64>) -> Matrix {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(m[(r, c)]);
            }
        }
        Matrix { rows, cols, data }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Dense 4-D tensor with dims `(k, c_in, n, n)`: a bank of `k` convolution
/// kernels over `c_in` input channels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor4 {
    dims: [usize; 4],
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: [usize; 4]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.iter().product()],
        }
    }

    pub fn from_vec(dims: [usize; 4], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(Error::Dimension(format!(
                "{} values for tensor {:?}",
                data.len(),
                dims
            )));
        }
        if dims[2] == 0 || dims[3] == 0 {
            return Err(Error::Dimension("kernel size must be at least 1".into()));
        }
        Ok(Self { dims, data })
    }

    #[inline]
    pub fn dims(&self) -> [usize; 4] {
        self.dims
    }

    #[inline]
    pub fn filters(&self) -> usize {
        self.dims[0]
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.dims[1]
    }

    #[inline]
    pub fn kernel_size(&self) -> usize {
        self.dims[2]
    }

    /// Length of one flattened kernel, `c_in · n · n`.
    #[inline]
    pub fn kernel_len(&self) -> usize {
        self.dims[1] * self.dims[2] * self.dims[3]
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn kernel(&self, a: usize) -> &[f64] {
        let len = self.kernel_len();
        &self.data[a * len..(a + 1) * len]
    }

    #[inline]
    pub fn kernel_mut(&mut self, a: usize) -> &mut [f64] {
        let len = self.kernel_len();
        &mut self.data[a * len..(a + 1) * len]
    }

    #[inline]
    pub fn at(&self, o: usize, c: usize, u: usize, v: usize) -> f64 {
        let [_, ch, n, m] = self.dims;
        self.data[((o * ch + c) * n + u) * m + v]
    }

    /// One `n × n` spatial slice `(o, c)` as a matrix.
    pub fn slice(&self, o: usize, c: usize) -> Matrix {
        let [_, ch, n, m] = self.dims;
        let start = (o * ch + c) * n * m;
        Matrix::from_vec(n, m, self.data[start..start + n * m].to_vec())
            .expect("slice shape is consistent")
    }

    /// Reorders output filters: `out[a] = self[perm[a]]`.
    pub fn permute_filters(&self, perm: &[usize]) -> Result<Tensor4> {
        if perm.len() != self.filters() {
            return Err(Error::Dimension(format!(
                "filter permutation of length {} for {} filters",
                perm.len(),
                self.filters()
            )));
        }
        let mut out = Tensor4::zeros(self.dims);
        for (a, &p) in perm.iter().enumerate() {
            out.kernel_mut(a).copy_from_slice(self.kernel(p));
        }
        Ok(out)
    }

    /// Reorders input channels: `out[:, c] = self[:, perm[c]]`.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Tensor4> {
        if perm.len() != self.channels() {
            return Err(Error::Dimension(format!(
                "channel permutation of length {} for {} channels",
                perm.len(),
                self.channels()
            )));
        }
        let [k, ch, n, m] = self.dims;
        let plane = n * m;
        let mut out = Tensor4::zeros(self.dims);
        for o in 0..k {
            for (c, &p) in perm.iter().enumerate() {
                let dst = (o * ch + c) * plane;
                let src = (o * ch + p) * plane;
                out.data[dst..dst + plane].copy_from_slice(&self.data[src..src + plane]);
            }
        }
        Ok(out)
    }

    /// Resizes every spatial slice to `target × target` with [`bilinear_resize`].
    pub fn resize_kernels(&self, target: usize) -> Result<Tensor4> {
        let [k, ch, n, m] = self.dims;
        if n != m {
            return Err(Error::Dimension("only square kernels can be resized".into()));
        }
        if target == n {
            return Ok(self.clone());
        }
        let mut data = Vec::with_capacity(k * ch * target * target);
        for o in 0..k {
            for c in 0..ch {
                let resized = bilinear_resize(&self.slice(o, c), target)?;
                data.extend_from_slice(resized.as_slice());
            }
        }
        Tensor4::from_vec([k, ch, target, target], data)
    }
}

/// ChaCha8 stream keyed by a 64-bit seed. Identical seeds yield identical
/// streams on every platform.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream for a tagged sub-task, e.g.
    /// `(round, station, client)`.
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let mut h = splitmix64(seed ^ 0x4846_4154_4d00_0000);
        for &t in tags {
            h = splitmix64(h ^ t.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        }
        Self::new(h)
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform on `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n` (Lemire's widening multiply, no modulo bias
    /// worth caring about at these sizes).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        ((self.inner.next_u64() as u128 * n as u128) >> 64) as usize
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// How [`solve_spd`] ended up solving the system.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveMethod {
    Cholesky,
    /// Cholesky failed on every jittered attempt but the matrix is a
    /// non-singular indefinite one (e.g. after DP noise); pivoted LU on the
    /// unjittered system.
    Lu,
}

#[derive(Clone, Debug)]
pub struct SpdSolve {
    pub solution: Matrix,
    /// Ridge added to the diagonal, zero when none was needed.
    pub jitter: f64,
    pub method: SolveMethod,
}

const SPD_JITTER_ATTEMPTS: usize = 3;

/// Solves `A X = B` for symmetric `A`.
///
/// Cholesky first. On failure, a ridge `δ·I` with `δ = 1e-8·tr(A)/dim` is
/// added and doubled up to three times. If the matrix is still not positive
/// definite it is solved by pivoted LU when non-singular, otherwise
/// [`Error::Singular`] is returned.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<SpdSolve> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "solve_spd needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "solve_spd: A is {}x{}, B is {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("solve_spd matrix"));
    }
    if !b.is_finite() {
        return Err(Error::NonFinite("solve_spd right-hand side"));
    }
    let sym_tol = 1e-9 * a.max_abs().max(1.0);
    if a.asymmetry() > sym_tol {
        return Err(Error::InvalidArgument(format!(
            "solve_spd matrix is not symmetric (asymmetry {:e})",
            a.asymmetry()
        )));
    }

    let n = a.rows;
    let na = a.to_nalgebra();
    let nb = b.to_nalgebra();
    if let Some(ch) = na.clone().cholesky() {
        return Ok(SpdSolve {
            solution: Matrix::from_nalgebra(&ch.solve(&nb)),
            jitter: 0.0,
            method: SolveMethod::Cholesky,
        });
    }

    let base = {
        let t = a.trace() / n.max(1) as f64;
        if t > 0.0 && t.is_finite() {
            1e-8 * t
        } else {
            1e-8
        }
    };
    let mut delta = base;
    for _ in 0..SPD_JITTER_ATTEMPTS {
        let mut jittered = na.clone();
        for i in 0..n {
            jittered[(i, i)] += delta;
        }
        if let Some(ch) = jittered.cholesky() {
            return Ok(SpdSolve {
                solution: Matrix::from_nalgebra(&ch.solve(&nb)),
                jitter: delta,
                method: SolveMethod::Cholesky,
            });
        }
        delta *= 2.0;
    }

    let lu = na.lu();
    match lu.solve(&nb) {
        Some(x) if x.iter().all(|v| v.is_finite()) => Ok(SpdSolve {
            solution: Matrix::from_nalgebra(&x),
            jitter: 0.0,
            method: SolveMethod::Lu,
        }),
        _ => Err(Error::Singular {
            attempts: SPD_JITTER_ATTEMPTS,
            jitter: delta / 2.0,
        }),
    }
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    if !a.is_square() {
        return Err(Error::Dimension("eigenvalues of a non-square matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("eigenvalue input"));
    }
    let eig = SymmetricEigen::new(a.to_nalgebra());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    Ok(vals)
}

/// Nearest positive semidefinite matrix in Frobenius norm: negative
/// eigenvalues are set to zero.
pub fn project_psd(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Dimension("PSD projection of a non-square matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite("PSD projection input"));
    }
    let mut sym = a.clone();
    sym.symmetrize();
    let eig = SymmetricEigen::new(sym.to_nalgebra());
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    let q = &eig.eigenvectors;
    let mut out = Matrix::from_nalgebra(&(q * DMatrix::from_diagonal(&clipped) * q.transpose()));
    out.symmetrize();
    Ok(out)
}

/// Spectral norm `‖A‖₂ = max |λ|` of a symmetric matrix.
pub fn spectral_norm_symmetric(a: &Matrix) -> Result<f64> {
    let vals = symmetric_eigenvalues(a)?;
    Ok(vals.iter().fold(0.0_f64, |m, v| m.max(v.abs())))
}

/// Bilinear resize of an `n × n` kernel to `target × target` with
/// align-corners sampling: target index `t` reads source coordinate
/// `t·(n−1)/(target−1)`. A 1×1 source broadcasts; a 1×1 target samples the
/// centre.
pub fn bilinear_resize(kernel: &Matrix, target: usize) -> Result<Matrix> {
    let n = kernel.rows;
    if n == 0 || kernel.cols != n {
        return Err(Error::Dimension(format!(
            "bilinear_resize needs a non-empty square kernel, got {}x{}",
            kernel.rows, kernel.cols
        )));
    }
    if target == 0 {
        return Err(Error::InvalidArgument("resize target must be at least 1".into()));
    }
    if target == n {
        return Ok(kernel.clone());
    }
    let coord = |t: usize| -> f64 {
        if n == 1 {
            0.0
        } else if target == 1 {
            (n - 1) as f64 / 2.0
        } else {
            t as f64 * (n - 1) as f64 / (target - 1) as f64
        }
    };
    let mut out = Matrix::zeros(target, target);
    for ty in 0..target {
        let sy = coord(ty);
        let y0 = (sy.floor() as usize).min(n - 1);
        let y1 = (y0 + 1).min(n - 1);
        let fy = sy - y0 as f64;
        for tx in 0..target {
            let sx = coord(tx);
            let x0 = (sx.floor() as usize).min(n - 1);
            let x1 = (x0 + 1).min(n - 1);
            let fx = sx - x0 as f64;
            let top = kernel.get(y0, x0) * (1.0 - fx) + kernel.get(y0, x1) * fx;
            let bottom = kernel.get(y1, x0) * (1.0 - fx) + kernel.get(y1, x1) * fx;
            out.set(ty, tx, top * (1.0 - fy) + bottom * fy);
        }
    }
    Ok(out)
}

/// `rows × cols` matrix of i.i.d. `N(0, σ²)` draws.
pub fn gaussian_sample(rng: &mut SeededRng, rows: usize, cols: usize, sigma: f64) -> Result<Matrix> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "gaussian sigma must be finite and non-negative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(Matrix::zeros(rows, cols));
    }
    let data = (0..rows * cols).map(|_| sigma * rng.normal()).collect();
    Matrix::from_vec(rows, cols, data)
}

/// Haar-ish random orthogonal matrix from the QR factorisation of a
/// Gaussian matrix (column signs fixed by `R`'s diagonal).
pub fn random_orthogonal(rng: &mut SeededRng, n: usize) -> Matrix {
    let g = gaussian_sample(rng, n, n, 1.0).expect("unit sigma is valid");
    let qr = g.to_nalgebra().qr();
    let mut q = qr.q();
    let r = qr.r();
    for c in 0..n {
        if r[(c, c)] < 0.0 {
            for row in 0..n {
                q[(row, c)] = -q[(row, c)];
            }
        }
    }
    Matrix::from_nalgebra(&q)
}
