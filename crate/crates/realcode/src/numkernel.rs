//! Dense numeric kernels: matrices, vectors, products, factorizations.
//!
//! Matrices are row-major `Vec<f64>`. Products are backed by
//! `matrixmultiply::dgemm`, which is single-threaded and deterministic —
//! results are bit-identical across runs, which the rest of the crate relies
//! on. The QR factorization is blocked Householder (compact WY), kept in
//! factored form so that projections onto the orthogonal complement of a
//! column span never materialize `Q`.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("rank deficient: column {column} has no usable pivot")]
    RankDeficient { column: usize },
    #[error("matrix not positive definite at pivot {0}")]
    NotPositiveDefinite(usize),
}

/// Pivot threshold for rank detection in QR, relative to the Frobenius norm
/// of the input.
pub const QR_RANK_TOL: f64 = 1e-10;

// ---------------------------------------------------------------------------
// Vector
// ---------------------------------------------------------------------------

/// A dense vector of finite `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Vector {
    pub(crate) data: Vec<f64>,
}

impl Vector {
    pub fn zeros(n: usize) -> Self {
        Vector { data: vec![0.0; n] }
    }

    /// Validates that every entry is finite.
    pub fn from_vec(data: Vec<f64>) -> Result<Self, NumError> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite(i));
        }
        Ok(Vector { data })
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize) -> f64) -> Self {
        Vector { data: (0..n).map(|i| f(i)).collect() }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn set(&mut self, i: usize, v: f64) {
        self.data[i] = v;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn dot(&self, other: &Vector) -> Result<f64, NumError> {
        if self.len() != other.len() {
            return Err(NumError::DimensionMismatch(format!(
                "dot: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn norm2(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn norm1(&self) -> f64 {
        self.data.iter().map(|v| v.abs()).sum()
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn add(&self, other: &Vector) -> Result<Vector, NumError> {
        if self.len() != other.len() {
            return Err(NumError::DimensionMismatch(format!(
                "add: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(Vector {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Vector) -> Result<Vector, NumError> {
        if self.len() != other.len() {
            return Err(NumError::DimensionMismatch(format!(
                "sub: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(Vector {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector { data: self.data.iter().map(|v| s * v).collect() }
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.data[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.data[i]
    }
}

// ---------------------------------------------------------------------------
// Matrix
// ---------------------------------------------------------------------------

/// A dense row-major matrix of finite `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub(crate) rows: usize,
    pub(crate) cols: usize,
    pub(crate) data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Validates the length of `data` against the shape and that every entry
    /// is finite.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, NumError> {
        if data.len() != rows * cols {
            return Err(NumError::DimensionMismatch(format!(
                "from_vec: {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(NumError::NonFinite(i));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        debug_assert!(i < self.rows && j < self.cols);
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Columns `c0..c1` as a new matrix.
    pub fn columns(&self, c0: usize, c1: usize) -> Matrix {
        assert!(c0 <= c1 && c1 <= self.cols);
        let w = c1 - c0;
        let mut out = Matrix::zeros(self.rows, w);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[c0..c1]);
        }
        out
    }

    /// `self * v`.
    pub fn matvec(&self, v: &Vector) -> Result<Vector, NumError> {
        if v.len() != self.cols {
            return Err(NumError::DimensionMismatch(format!(
                "matvec: {}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            out[i] = dot(self.row(i), &v.data);
        }
        Ok(Vector { data: out })
    }

    /// `self' * v` without forming the transpose.
    pub fn tr_matvec(&self, v: &Vector) -> Result<Vector, NumError> {
        if v.len() != self.rows {
            return Err(NumError::DimensionMismatch(format!(
                "tr_matvec: {}x{} transposed times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        let mut out = vec![0.0; self.cols];
        for i in 0..self.rows {
            axpy(v.data[i], self.row(i), &mut out);
        }
        Ok(Vector { data: out })
    }

    /// `self * other` via dgemm.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, NumError> {
        if self.cols != other.rows {
            return Err(NumError::DimensionMismatch(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            other.cols as isize,
            1,
            0.0,
            &mut out.data,
            other.cols as isize,
            1,
        );
        Ok(out)
    }

    /// `self * other'` via dgemm, without materializing the transpose.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix, NumError> {
        if self.cols != other.cols {
            return Err(NumError::DimensionMismatch(format!(
                "matmul_nt: {}x{} times ({}x{})'",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        gemm(
            self.rows,
            self.cols,
            other.rows,
            1.0,
            &self.data,
            self.cols as isize,
            1,
            &other.data,
            1,
            other.cols as isize,
            0.0,
            &mut out.data,
            other.rows as isize,
            1,
        );
        Ok(out)
    }

    /// `self' * other` via dgemm, without materializing the transpose.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix, NumError> {
        if self.rows != other.rows {
            return Err(NumError::DimensionMismatch(format!(
                "matmul_tn: ({}x{})' times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        gemm(
            self.cols,
            self.rows,
            other.cols,
            1.0,
            &self.data,
            1,
            self.cols as isize,
            &other.data,
            other.cols as isize,
            1,
            0.0,
            &mut out.data,
            other.cols as isize,
            1,
        );
        Ok(out)
    }

    /// Frobenius inner product `sum_ij self[i,j] * other[i,j]`.
    pub fn frobenius_inner(&self, other: &Matrix) -> Result<f64, NumError> {
        if self.shape() != other.shape() {
            return Err(NumError::DimensionMismatch(format!(
                "frobenius_inner: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Column-stacking vectorization: columns of `self` concatenated top to
    /// bottom, first column first.
    pub fn col_stack(&self) -> Vector {
        let mut out = Vec::with_capacity(self.rows * self.cols);
        for j in 0..self.cols {
            for i in 0..self.rows {
                out.push(self.data[i * self.cols + j]);
            }
        }
        Vector { data: out }
    }

    /// Inverse of [`Matrix::col_stack`]: rebuild a `rows x cols` matrix from
    /// a column-stacked vector.
    pub fn from_col_stack(rows: usize, cols: usize, v: &Vector) -> Result<Matrix, NumError> {
        if v.len() != rows * cols {
            return Err(NumError::DimensionMismatch(format!(
                "from_col_stack: {}x{} needs {} entries, got {}",
                rows,
                cols,
                rows * cols,
                v.len()
            )));
        }
        let mut m = Matrix::zeros(rows, cols);
        for j in 0..cols {
            for i in 0..rows {
                m.data[i * cols + j] = v.data[j * rows + i];
            }
        }
        Ok(m)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, NumError> {
        if self.shape() != other.shape() {
            return Err(NumError::DimensionMismatch(format!(
                "add: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, NumError> {
        if self.shape() != other.shape() {
            return Err(NumError::DimensionMismatch(format!(
                "sub: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        })
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| s * v).collect(),
        }
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

// ---------------------------------------------------------------------------
// Slice-level helpers shared across the crate
// ---------------------------------------------------------------------------

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators keep the FP dependency chain short; the order of
    // operations is fixed, so results stay run-to-run identical.
    let n = a.len();
    let chunks = n / 4;
    let (mut s0, mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0, 0.0);
    for c in 0..chunks {
        let i = 4 * c;
        s0 += a[i] * b[i];
        s1 += a[i + 1] * b[i + 1];
        s2 += a[i + 2] * b[i + 2];
        s3 += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in 4 * chunks..n {
        tail += a[i] * b[i];
    }
    (s0 + s1) + (s2 + s3) + tail
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub(crate) fn norm2(x: &[f64]) -> f64 {
    // Scaled to avoid overflow for very large entries.
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m == 0.0 || !m.is_finite() {
        return m;
    }
    let mut s = 0.0;
    for v in x {
        let t = v / m;
        s += t * t;
    }
    m * s.sqrt()
}

pub(crate) fn norm_inf(x: &[f64]) -> f64 {
    x.iter().fold(0.0, |m, v| m.max(v.abs()))
}

/// Safe dgemm wrapper: `c <- alpha * a * b + beta * c` where the operands are
/// slices with explicit row/column strides. Dimensions: `a` is `m x k`, `b`
/// is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    beta: f64,
    c: &mut [f64],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(span(m, k, rsa, csa) <= a.len());
    debug_assert!(span(k, n, rsb, csb) <= b.len());
    debug_assert!(span(m, n, rsc, csc) <= c.len());
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
}

// ---------------------------------------------------------------------------
// Householder QR (blocked, compact WY)
// ---------------------------------------------------------------------------

/// Panel width for the blocked factorization and blocked applications.
const QR_PANEL: usize = 48;

/// QR factorization of a tall matrix (`rows >= cols`) in factored form.
///
/// The reflectors `H_j = I - tau_j v_j v_j'` satisfy
/// `H_0 H_1 ... H_{cols-1} = Q` (full, `rows x rows`) and `Q' u = [R; 0]`.
/// Projections use the reflectors directly; `Q` is only materialized on
/// request.
pub struct HouseholderQr {
    rows: usize,
    cols: usize,
    /// Column-major `rows x cols`: `R` on and above the diagonal, scaled
    /// reflector tails below it (the leading 1 of each `v_j` is implicit).
    factors: Vec<f64>,
    taus: Vec<f64>,
}

impl HouseholderQr {
    /// Factor `u`. Errors with [`NumError::RankDeficient`] if a pivot falls
    /// below [`QR_RANK_TOL`] times the Frobenius norm of `u`.
    pub fn factor(u: &Matrix) -> Result<Self, NumError> {
        let (m, n) = u.shape();
        if m < n {
            return Err(NumError::DimensionMismatch(format!(
                "qr: need rows >= cols, got {m}x{n}"
            )));
        }
        // Column-major working copy.
        let mut f = vec![0.0; m * n];
        for i in 0..m {
            let row = u.row(i);
            for j in 0..n {
                f[j * m + i] = row[j];
            }
        }
        let pivot_tol = QR_RANK_TOL * norm2(&f);
        let mut taus = vec![0.0; n];

        let mut k0 = 0;
        while k0 < n {
            let kb = QR_PANEL.min(n - k0);
            // Panel: generate reflectors and apply them to the remaining
            // panel columns (level 2).
            for p in 0..kb {
                let j = k0 + p;
                let tau = house_generate(&mut f[j * m + j..(j + 1) * m]);
                taus[j] = tau;
                if f[j * m + j].abs() < pivot_tol {
                    return Err(NumError::RankDeficient { column: j });
                }
                // Apply the new reflector to the rest of the panel. The
                // split puts column j in `left` and columns j+1.. in
                // `right`, so the borrows are disjoint.
                let (left, right) = f.split_at_mut((j + 1) * m);
                let vj = &left[j * m + j..];
                for c in 0..(k0 + kb - j - 1) {
                    house_apply(tau, vj, &mut right[c * m + j..c * m + m]);
                }
            }
            // Blocked update of the trailing columns.
            if k0 + kb < n {
                let t = form_t_block(&f, m, &taus, k0, kb);
                let v = copy_v_panel(&f, m, k0, kb);
                let (_, trail) = f.split_at_mut((k0 + kb) * m);
                apply_wy_block(&v, &t, m, k0, kb, trail, n - k0 - kb, true);
            }
            k0 += kb;
        }
        Ok(HouseholderQr { rows: m, cols: n, factors: f, taus })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// `x <- Q' x` (length `rows`).
    pub fn apply_qt(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.rows);
        for j in 0..self.cols {
            let vj = &self.factors[j * self.rows + j..(j + 1) * self.rows];
            house_apply(self.taus[j], vj, &mut x[j..]);
        }
    }

    /// `x <- Q x` (length `rows`).
    pub fn apply_q(&self, x: &mut [f64]) {
        assert_eq!(x.len(), self.rows);
        for j in (0..self.cols).rev() {
            let vj = &self.factors[j * self.rows + j..(j + 1) * self.rows];
            house_apply(self.taus[j], vj, &mut x[j..]);
        }
    }

    /// `x <- (I - Q_thin Q_thin') x`: the orthogonal projection of `x` onto
    /// the complement of the column span of the factored matrix.
    pub fn project_onto_complement(&self, x: &mut [f64]) {
        self.apply_qt(x);
        x[..self.cols].fill(0.0);
        self.apply_q(x);
    }

    /// The thin factor `Q` (`rows x cols`, orthonormal columns).
    pub fn thin_q(&self) -> Matrix {
        let (m, n) = (self.rows, self.cols);
        // Identity columns in column-major layout, then apply Q blockwise,
        // last panel first.
        let mut e = vec![0.0; m * n];
        for j in 0..n {
            e[j * m + j] = 1.0;
        }
        let mut k0s: Vec<usize> = (0..n).step_by(QR_PANEL).collect();
        k0s.reverse();
        for k0 in k0s {
            let kb = QR_PANEL.min(n - k0);
            let t = form_t_block(&self.factors, m, &self.taus, k0, kb);
            let v = copy_v_panel(&self.factors, m, k0, kb);
            apply_wy_block(&v, &t, m, k0, kb, &mut e, n, false);
        }
        let mut q = Matrix::zeros(m, n);
        for j in 0..n {
            for i in 0..m {
                q.data[i * n + j] = e[j * m + i];
            }
        }
        q
    }

    /// The upper-triangular factor `R` (`cols x cols`).
    pub fn r(&self) -> Matrix {
        let n = self.cols;
        let mut r = Matrix::zeros(n, n);
        for j in 0..n {
            for i in 0..=j {
                r.data[i * n + j] = self.factors[j * self.rows + i];
            }
        }
        r
    }
}

/// Generate a Householder reflector for `col` (the diagonal-and-below part of
/// one column). On return `col[0]` holds `beta` (the new pivot) and
/// `col[1..]` the scaled reflector tail; the leading 1 is implicit. Returns
/// `tau` (0 means the column was already reduced).
fn house_generate(col: &mut [f64]) -> f64 {
    let alpha = col[0];
    let sigma = norm2(&col[1..]);
    if sigma == 0.0 {
        return 0.0;
    }
    let norm = alpha.hypot(sigma);
    let beta = if alpha >= 0.0 { -norm } else { norm };
    let tau = (beta - alpha) / beta;
    let scale = 1.0 / (alpha - beta);
    for v in &mut col[1..] {
        *v *= scale;
    }
    col[0] = beta;
    tau
}

/// Apply `H = I - tau v v'` to `x`, where `v = [1; vtail]` and `vtail` is
/// `v_stored[1..]` (entry 0 of `v_stored` is ignored — it holds `beta`).
fn house_apply(tau: f64, v_stored: &[f64], x: &mut [f64]) {
    if tau == 0.0 {
        return;
    }
    debug_assert_eq!(v_stored.len(), x.len());
    let mut w = x[0];
    for i in 1..x.len() {
        w += v_stored[i] * x[i];
    }
    let tw = tau * w;
    x[0] -= tw;
    for i in 1..x.len() {
        x[i] -= tw * v_stored[i];
    }
}

/// Upper-triangular `T` for the compact WY form of panel `k0..k0+kb`:
/// `H_{k0} ... H_{k0+kb-1} = I - V T V'`.
fn form_t_block(f: &[f64], m: usize, taus: &[f64], k0: usize, kb: usize) -> Vec<f64> {
    let mut t = vec![0.0; kb * kb];
    let mut w = vec![0.0; kb];
    for p in 0..kb {
        let jp = k0 + p;
        let tau_p = taus[jp];
        t[p * kb + p] = tau_p;
        if p > 0 && tau_p != 0.0 {
            // w = V[:, 0..p]' v_p over rows jp..m (v_p has implicit 1 at jp).
            let colp = &f[jp * m..(jp + 1) * m];
            for (q, wq) in w.iter_mut().enumerate().take(p) {
                let colq = &f[(k0 + q) * m..(k0 + q + 1) * m];
                let mut acc = colq[jp];
                for i in jp + 1..m {
                    acc += colq[i] * colp[i];
                }
                *wq = acc;
            }
            // T[0..p, p] = -tau_p * T[0..p, 0..p] * w.
            for r in 0..p {
                let mut acc = 0.0;
                for c in r..p {
                    acc += t[r * kb + c] * w[c];
                }
                t[r * kb + p] = -tau_p * acc;
            }
        }
    }
    t
}

/// The panel's `V` (rows `k0..m`, `kb` columns) as a dense column-major
/// buffer with the implicit unit diagonal made explicit.
fn copy_v_panel(f: &[f64], m: usize, k0: usize, kb: usize) -> Vec<f64> {
    let mv = m - k0;
    let mut v = vec![0.0; mv * kb];
    for p in 0..kb {
        let j = k0 + p;
        v[p * mv + p] = 1.0;
        let src = &f[j * m + j + 1..(j + 1) * m];
        v[p * mv + p + 1..p * mv + mv].copy_from_slice(src);
    }
    v
}

/// Apply `(I - V T' V')` (`transpose = true`, the Q'-direction) or
/// `(I - V T V')` (`transpose = false`, the Q-direction) for one panel to a
/// column-major `m x w` buffer `b`; only rows `k0..m` are touched.
#[allow(clippy::too_many_arguments)]
fn apply_wy_block(
    v: &[f64],
    t: &[f64],
    m: usize,
    k0: usize,
    kb: usize,
    b: &mut [f64],
    w: usize,
    transpose: bool,
) {
    if w == 0 {
        return;
    }
    let mv = m - k0;
    // W = V' * B[k0.., :]  (kb x w, row-major).
    let mut wk = vec![0.0; kb * w];
    gemm(
        kb,
        mv,
        w,
        1.0,
        v,
        mv as isize,
        1,
        &b[k0..],
        1,
        m as isize,
        0.0,
        &mut wk,
        w as isize,
        1,
    );
    // W <- T' W (solve order low-to-high rows reversed) or T W.
    if transpose {
        for r in (0..kb).rev() {
            for c in 0..w {
                let mut acc = 0.0;
                for s in 0..=r {
                    acc += t[s * kb + r] * wk[s * w + c];
                }
                wk[r * w + c] = acc;
            }
        }
    } else {
        for r in 0..kb {
            for c in 0..w {
                let mut acc = 0.0;
                for s in r..kb {
                    acc += t[r * kb + s] * wk[s * w + c];
                }
                wk[r * w + c] = acc;
            }
        }
    }
    // B[k0.., :] -= V * W.
    gemm(
        mv,
        kb,
        w,
        -1.0,
        v,
        1,
        mv as isize,
        &wk,
        w as isize,
        1,
        1.0,
        &mut b[k0..],
        1,
        m as isize,
    );
}

/// Thin QR with the sign convention that the diagonal of `R` is positive.
/// Returns `(q, r)` with `q` `rows x cols` orthonormal and `r` `cols x cols`
/// upper triangular, `q * r == u`.
pub fn qr_orthonormalize(u: &Matrix) -> Result<(Matrix, Matrix), NumError> {
    let qr = HouseholderQr::factor(u)?;
    let mut q = qr.thin_q();
    let mut r = qr.r();
    let n = r.rows;
    for i in 0..n {
        if r.at(i, i) < 0.0 {
            for j in i..n {
                r[(i, j)] = -r[(i, j)];
            }
            for row in 0..q.rows {
                q[(row, i)] = -q[(row, i)];
            }
        }
    }
    Ok((q, r))
}

// ---------------------------------------------------------------------------
// Symmetric kernels for the interior-point solver
// ---------------------------------------------------------------------------

const SYRK_BLOCK: usize = 128;
const CHOL_BLOCK: usize = 64;

/// `c <- a * a'` for row-major `a` (`m x n`), filling the lower triangle of
/// the row-major `m x m` buffer `c` (entries above the diagonal are left
/// untouched). Blocked so the bulk of the work is dgemm on block pairs at or
/// below the diagonal, roughly halving the flops of a full product.
pub(crate) fn syrk_lower(c: &mut [f64], m: usize, a: &[f64], n: usize) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(c.len(), m * m);
    let mut i0 = 0;
    while i0 < m {
        let ib = SYRK_BLOCK.min(m - i0);
        let mut j0 = 0;
        while j0 <= i0 {
            let jb = SYRK_BLOCK.min(m - j0);
            gemm(
                ib,
                n,
                jb,
                1.0,
                &a[i0 * n..],
                n as isize,
                1,
                &a[j0 * n..],
                1,
                n as isize,
                0.0,
                &mut c[i0 * m + j0..],
                m as isize,
                1,
            );
            j0 += jb;
        }
        i0 += ib;
    }
}

/// In-place Cholesky `a = l l'` of a row-major symmetric positive definite
/// matrix; only the lower triangle is read and written. Errors with the
/// pivot index on a non-positive pivot.
pub(crate) fn cholesky_lower(a: &mut [f64], n: usize) -> Result<(), usize> {
    let mut k0 = 0;
    while k0 < n {
        let kb = CHOL_BLOCK.min(n - k0);
        // Unblocked factorization of the diagonal block.
        for j in k0..k0 + kb {
            let mut pivot = a[j * n + j];
            for s in k0..j {
                pivot -= a[j * n + s] * a[j * n + s];
            }
            if pivot <= 0.0 || !pivot.is_finite() {
                return Err(j);
            }
            let ljj = pivot.sqrt();
            a[j * n + j] = ljj;
            for i in j + 1..k0 + kb {
                let mut v = a[i * n + j];
                for s in k0..j {
                    v -= a[i * n + s] * a[j * n + s];
                }
                a[i * n + j] = v / ljj;
            }
        }
        let below = k0 + kb;
        if below < n {
            // Panel solve: rows below the diagonal block against L11'.
            for i in below..n {
                for j in k0..k0 + kb {
                    let mut v = a[i * n + j];
                    for s in k0..j {
                        v -= a[i * n + s] * a[j * n + s];
                    }
                    a[i * n + j] = v / a[j * n + j];
                }
            }
            // Trailing update: A22 -= L21 L21', lower blocks only. L21 is
            // copied out first so the dgemm operands don't alias the
            // destination.
            let rows_below = n - below;
            let l21: Vec<f64> = {
                let mut buf = vec![0.0; rows_below * kb];
                for i in 0..rows_below {
                    buf[i * kb..(i + 1) * kb]
                        .copy_from_slice(&a[(below + i) * n + k0..(below + i) * n + k0 + kb]);
                }
                buf
            };
            let mut i0 = 0;
            while i0 < rows_below {
                let ib = SYRK_BLOCK.min(rows_below - i0);
                let mut j0 = 0;
                while j0 <= i0 {
                    let jb = SYRK_BLOCK.min(rows_below - j0);
                    gemm(
                        ib,
                        kb,
                        jb,
                        -1.0,
                        &l21[i0 * kb..],
                        kb as isize,
                        1,
                        &l21[j0 * kb..],
                        1,
                        kb as isize,
                        1.0,
                        &mut a[(below + i0) * n + below + j0..],
                        n as isize,
                        1,
                    );
                    j0 += jb;
                }
                i0 += ib;
            }
        }
        k0 += kb;
    }
    Ok(())
}

/// Solve `l l' x = b` in place given the lower Cholesky factor.
pub(crate) fn cholesky_solve(l: &[f64], n: usize, x: &mut [f64]) {
    debug_assert_eq!(x.len(), n);
    // Forward: L y = b.
    for i in 0..n {
        let mut v = x[i];
        let row = &l[i * n..i * n + i];
        v -= dot(row, &x[..i]);
        x[i] = v / l[i * n + i];
    }
    // Backward: L' x = y.
    for i in (0..n).rev() {
        let mut v = x[i];
        for j in i + 1..n {
            v -= l[j * n + i] * x[j];
        }
        x[i] = v / l[i * n + i];
    }
}
