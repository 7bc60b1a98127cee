//! Dense row-major matrices with a deterministic SVD / eigendecomposition
//! kernel (one-sided Jacobi), Moore-Penrose pseudo-inverse, and the
//! inverse-weighted norm used for pseudo-count bonuses.

use thiserror::Error;

/// Weights below this floor are clamped before inversion in
/// [`weighted_norm_sq`].
pub const WEIGHT_CLAMP: f64 = 1e-12;

/// Relative rank tolerance: singular values below `RANK_TOL * sigma_max`
/// are treated as zero.
pub const RANK_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatrixError {
    #[error("shape mismatch: ({0}x{1}) vs ({2}x{3})")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("data length {got} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, got: usize },
    #[error("non-finite entry at index {0}")]
    NonFinite(usize),
    #[error("SVD did not converge after {sweeps} sweeps (residual {residual:.3e})")]
    SvdNotConverged { sweeps: usize, residual: f64 },
    #[error("matrix is not square: {0}x{1}")]
    NotSquare(usize, usize),
    #[error("complex-dominant spectrum (imaginary residual {0:.3e})")]
    ComplexSpectrum(f64),
    #[error("eigenvector residual {0:.3e} exceeds tolerance")]
    EigResidual(f64),
    #[error("requested k={k} exceeds available rank {rank}")]
    RankExceeded { k: usize, rank: usize },
    #[error("parse error: {0}")]
    Parse(String),
}

/// Dense real matrix, row-major. Entries are validated finite on
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, MatrixError> {
        if data.len() != rows * cols {
            return Err(MatrixError::BadLength { rows, cols, got: data.len() });
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(MatrixError::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    /// Internal constructor for results of arithmetic on already-valid
    /// matrices.
    pub(crate) fn from_parts(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_parts(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self, MatrixError> {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(MatrixError::ShapeMismatch(r, c, r, row.len()));
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix, MatrixError> {
        if self.cols != other.rows {
            return Err(MatrixError::ShapeMismatch(self.rows, self.cols, other.rows, other.cols));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let arow = self.row(i);
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &aik) in arow.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let brow = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += aik * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>, MatrixError> {
        if self.cols != x.len() {
            return Err(MatrixError::ShapeMismatch(self.rows, self.cols, x.len(), 1));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix, MatrixError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MatrixError::ShapeMismatch(self.rows, self.cols, other.rows, other.cols));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix::from_parts(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix, MatrixError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(MatrixError::ShapeMismatch(self.rows, self.cols, other.rows, other.cols));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Matrix::from_parts(self.rows, self.cols, data))
    }

    pub fn scale(&self, c: f64) -> Matrix {
        Matrix::from_parts(self.rows, self.cols, self.data.iter().map(|x| x * c).collect())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, x| m.max(x.abs()))
    }

    /// Keep the listed rows and columns, in order.
    pub fn submatrix(&self, keep_rows: &[usize], keep_cols: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(keep_rows.len(), keep_cols.len());
        for (ii, &i) in keep_rows.iter().enumerate() {
            for (jj, &j) in keep_cols.iter().enumerate() {
                out.set(ii, jj, self.get(i, j));
            }
        }
        out
    }

    /// Plain-text encoding: first line "rows cols", then one line per row of
    /// space-separated decimals with 17 significant digits (round-trips f64
    /// exactly).
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.rows, self.cols);
        for i in 0..self.rows {
            let row: Vec<String> = self.row(i).iter().map(|x| format!("{x:.16e}")).collect();
            s.push_str(&row.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Matrix, MatrixError> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| MatrixError::Parse("empty input".into()))?;
        let mut it = header.split_whitespace();
        let rows: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| MatrixError::Parse("bad header".into()))?;
        let cols: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| MatrixError::Parse("bad header".into()))?;
        let mut data = Vec::with_capacity(rows * cols);
        for line in lines.take(rows) {
            for tok in line.split_whitespace() {
                let v: f64 =
                    tok.parse().map_err(|_| MatrixError::Parse(format!("bad number {tok:?}")))?;
                data.push(v);
            }
        }
        Matrix::new(rows, cols, data)
    }
}

/// `x' diag(w)^{-1} x` with weights clamped below [`WEIGHT_CLAMP`].
pub fn weighted_norm_sq(x: &[f64], diag_weights: &[f64]) -> Result<f64, MatrixError> {
    if x.len() != diag_weights.len() {
        return Err(MatrixError::ShapeMismatch(x.len(), 1, diag_weights.len(), 1));
    }
    Ok(x.iter().zip(diag_weights).map(|(xi, wi)| xi * xi / wi.max(WEIGHT_CLAMP)).sum())
}

/// Singular value decomposition `a = u * diag(sigma) * v'` with
/// orthonormal `u`, `v` and `sigma` sorted nonincreasing.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Matrix,
    pub sigma: Vec<f64>,
    pub v: Matrix,
    pub rank_tolerance: f64,
}

impl SvdResult {
    /// Number of singular values above the rank tolerance.
    pub fn rank(&self) -> usize {
        self.sigma.iter().filter(|s| **s > self.rank_tolerance).count()
    }

    pub fn reconstruct(&self) -> Matrix {
        let m = self.u.rows();
        let n = self.v.rows();
        let r = self.sigma.len();
        let mut out = Matrix::zeros(m, n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for t in 0..r {
                    acc += self.u.get(i, t) * self.sigma[t] * self.v.get(j, t);
                }
                out.set(i, j, acc);
            }
        }
        out
    }
}

/// One-sided Jacobi SVD. Deterministic: fixed sweep order, sign
/// canonicalization (largest-magnitude entry of each left vector is
/// nonnegative), ties in sigma broken by original column index.
pub fn svd(a: &Matrix, top_k: Option<usize>) -> Result<SvdResult, MatrixError> {
    let transposed = a.rows() < a.cols();
    let work = if transposed { a.transpose() } else { a.clone() };
    let m = work.rows();
    let n = work.cols();

    // column-major copy of the working matrix
    let mut b: Vec<Vec<f64>> = (0..n).map(|j| work.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    // columns below this norm are numerically null: rotating them only
    // chases cancellation noise, so they are frozen
    let null_floor_sq = {
        let fro = work.frobenius_norm();
        (1e-15 * fro) * (1e-15 * fro)
    };

    let mut residual = 0.0f64;
    let mut converged = n < 2;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut worst = 0.0f64;
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let mut alpha = 0.0;
                let mut beta = 0.0;
                let mut gamma = 0.0;
                for i in 0..m {
                    alpha += b[p][i] * b[p][i];
                    beta += b[q][i] * b[q][i];
                    gamma += b[p][i] * b[q][i];
                }
                let denom = (alpha * beta).sqrt();
                if denom <= 0.0 || alpha <= null_floor_sq || beta <= null_floor_sq {
                    continue;
                }
                let rel = gamma.abs() / denom;
                worst = worst.max(rel);
                if rel <= JACOBI_REL_TOL {
                    continue;
                }
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let bp = b[p][i];
                    let bq = b[q][i];
                    b[p][i] = c * bp - s * bq;
                    b[q][i] = s * bp + c * bq;
                }
                for i in 0..n {
                    let vp = v[p][i];
                    let vq = v[q][i];
                    v[p][i] = c * vp - s * vq;
                    v[q][i] = s * vp + c * vq;
                }
            }
        }
        residual = worst;
        converged = worst <= JACOBI_REL_TOL;
    }
    if !converged {
        return Err(MatrixError::SvdNotConverged { sweeps: JACOBI_MAX_SWEEPS, residual });
    }

    let norms: Vec<f64> = b.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let sigma_max = order.first().map(|&i| norms[i]).unwrap_or(0.0);
    let rank_tolerance = RANK_TOL * sigma_max;

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut v_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &j in &order {
        sigma.push(norms[j]);
        v_cols.push(v[j].clone());
        if norms[j] > rank_tolerance && norms[j] > 0.0 {
            u_cols.push(b[j].iter().map(|x| x / norms[j]).collect());
        } else {
            u_cols.push(Vec::new()); // filled by basis completion below
        }
    }
    complete_basis(&mut u_cols, m);

    // sign canonicalization: largest-magnitude entry of each u column >= 0
    for t in 0..n {
        let col = &u_cols[t];
        let mut best = 0usize;
        for i in 1..m {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            for x in u_cols[t].iter_mut() {
                *x = -*x;
            }
            for x in v_cols[t].iter_mut() {
                *x = -*x;
            }
        }
    }

    let r = match top_k {
        Some(k) => {
            if k > n {
                return Err(MatrixError::RankExceeded { k, rank: n });
            }
            k
        }
        None => n,
    };
    let pack = |cols: &[Vec<f64>], dim: usize| {
        let mut mtx = Matrix::zeros(dim, r);
        for (t, col) in cols.iter().take(r).enumerate() {
            for i in 0..dim {
                mtx.set(i, t, col[i]);
            }
        }
        mtx
    };
    let u = pack(&u_cols, m);
    let v_m = pack(&v_cols, n);
    sigma.truncate(r);

    if transposed {
        Ok(SvdResult { u: v_m, sigma, v: u, rank_tolerance })
    } else {
        Ok(SvdResult { u, sigma, v: v_m, rank_tolerance })
    }
}

/// Fill empty slots with unit vectors orthogonal to all present columns
/// (deterministic scan over the canonical basis).
fn complete_basis(cols: &mut [Vec<f64>], dim: usize) {
    let empties: Vec<usize> = (0..cols.len()).filter(|&i| cols[i].is_empty()).collect();
    for slot in empties {
        // deterministic: orthogonalize every canonical vector against the
        // present columns and keep the one with the largest residual
        let mut best: Option<(f64, Vec<f64>)> = None;
        for canonical in 0..dim {
            let mut cand = vec![0.0; dim];
            cand[canonical] = 1.0;
            // two rounds of Gram-Schmidt for numerical hygiene
            for _ in 0..2 {
                for other in cols.iter() {
                    if other.is_empty() {
                        continue;
                    }
                    let dot: f64 = cand.iter().zip(other).map(|(a, b)| a * b).sum();
                    for (c, o) in cand.iter_mut().zip(other) {
                        *c -= dot * o;
                    }
                }
            }
            let norm = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if best.as_ref().map_or(true, |(n, _)| norm > *n) {
                best = Some((norm, cand));
            }
        }
        let (norm, mut cand) = best.expect("dim > 0");
        assert!(norm > 1e-6, "basis completion found no independent direction");
        for c in cand.iter_mut() {
            *c /= norm;
        }
        cols[slot] = cand;
    }
}

/// Eigendecomposition with real eigenvalues sorted descending.
#[derive(Debug, Clone)]
pub struct EigResult {
    pub vectors: Matrix,
    pub values: Vec<f64>,
}

/// Real eigendecomposition. Symmetric input uses cyclic Jacobi; general
/// input uses Hessenberg QR for the values (failing on complex pairs) and
/// SVD null spaces for the vectors.
pub fn eig_real(a: &Matrix) -> Result<EigResult, MatrixError> {
    if a.rows() != a.cols() {
        return Err(MatrixError::NotSquare(a.rows(), a.cols()));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(EigResult { vectors: Matrix::zeros(0, 0), values: vec![] });
    }
    let scale = a.max_abs().max(1.0);
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            asym = asym.max((a.get(i, j) - a.get(j, i)).abs());
        }
    }
    let res = if asym <= 1e-12 * scale { eig_symmetric(a)? } else { eig_general(a)? };
    // residual check against the stated contract
    let mut worst = 0.0f64;
    for t in 0..n {
        let col = res.vectors.column(t);
        let av = a.matvec(&col)?;
        for i in 0..n {
            worst = worst.max((av[i] - res.values[t] * col[i]).abs());
        }
    }
    if worst > 1e-8 * scale {
        return Err(MatrixError::EigResidual(worst));
    }
    Ok(res)
}

fn eig_symmetric(a: &Matrix) -> Result<EigResult, MatrixError> {
    let n = a.rows();
    let mut m: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    let mut vecs: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut e = vec![0.0; n];
            e[i] = 1.0;
            e
        })
        .collect();
    let scale = a.frobenius_norm().max(1e-300);
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m[p][q] * m[p][q];
            }
        }
        if off.sqrt() <= JACOBI_REL_TOL * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                if m[p][q].abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * m[p][q]);
                let t = theta.signum() / (theta.abs() + (1.0 + theta * theta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                // rows/cols p and q of the symmetric matrix
                for i in 0..n {
                    let mip = m[i][p];
                    let miq = m[i][q];
                    m[i][p] = c * mip - s * miq;
                    m[i][q] = s * mip + c * miq;
                }
                for i in 0..n {
                    let mpi = m[p][i];
                    let mqi = m[q][i];
                    m[p][i] = c * mpi - s * mqi;
                    m[q][i] = s * mpi + c * mqi;
                }
                for i in 0..n {
                    let vip = vecs[i][p];
                    let viq = vecs[i][q];
                    vecs[i][p] = c * vip - s * viq;
                    vecs[i][q] = s * vip + c * viq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let diag: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    order.sort_by(|&i, &j| diag[j].partial_cmp(&diag[i]).unwrap().then(i.cmp(&j)));
    let values: Vec<f64> = order.iter().map(|&i| diag[i]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (t, &j) in order.iter().enumerate() {
        let mut col: Vec<f64> = (0..n).map(|i| vecs[i][j]).collect();
        canonical_sign(&mut col);
        for i in 0..n {
            vectors.set(i, t, col[i]);
        }
    }
    Ok(EigResult { vectors, values })
}

fn canonical_sign(col: &mut [f64]) {
    let mut best = 0usize;
    for i in 1..col.len() {
        if col[i].abs() > col[best].abs() {
            best = i;
        }
    }
    if col[best] < 0.0 {
        for x in col.iter_mut() {
            *x = -*x;
        }
    }
}

/// Eigenvalues of a general real matrix via shifted Hessenberg QR; fails
/// when a complex pair is detected. Vectors via SVD null spaces.
fn eig_general(a: &Matrix) -> Result<EigResult, MatrixError> {
    let n = a.rows();
    let scale = a.max_abs().max(1.0);
    let mut h = hessenberg(a);
    let mut values = Vec::with_capacity(n);
    let mut hi = n; // active block is h[0..hi, 0..hi]
    let mut iters = 0usize;
    while hi > 0 {
        if hi == 1 {
            values.push(h[0][0]);
            hi = 0;
            continue;
        }
        // deflate tiny subdiagonals
        let mut deflated = false;
        for i in (1..hi).rev() {
            if h[i][i - 1].abs() <= 1e-14 * (h[i][i].abs() + h[i - 1][i - 1].abs() + scale * 1e-30) {
                h[i][i - 1] = 0.0;
                if i == hi - 1 {
                    values.push(h[hi - 1][hi - 1]);
                    hi -= 1;
                    deflated = true;
                    break;
                }
            }
        }
        if deflated {
            iters = 0;
            continue;
        }
        if hi == 2 || h[hi - 1][hi - 2].abs() <= 1e-14 * scale {
            // handled above; fall through to 2x2 resolution when the block is 2x2
        }
        if hi >= 2 {
            // try to resolve the trailing 2x2 block directly
            let a11 = h[hi - 2][hi - 2];
            let a12 = h[hi - 2][hi - 1];
            let a21 = h[hi - 1][hi - 2];
            let a22 = h[hi - 1][hi - 1];
            let tr = a11 + a22;
            let det = a11 * a22 - a12 * a21;
            let disc = tr * tr / 4.0 - det;
            if hi == 2 {
                if disc < 0.0 {
                    return Err(MatrixError::ComplexSpectrum((-disc).sqrt()));
                }
                let sq = disc.sqrt();
                values.push(tr / 2.0 + sq);
                values.push(tr / 2.0 - sq);
                hi = 0;
                continue;
            }
            // shifted QR step on the active block
            let shift = if disc >= 0.0 {
                let sq = disc.sqrt();
                let l1 = tr / 2.0 + sq;
                let l2 = tr / 2.0 - sq;
                if (l1 - a22).abs() < (l2 - a22).abs() {
                    l1
                } else {
                    l2
                }
            } else {
                a22
            };
            qr_step(&mut h, hi, shift);
            iters += 1;
            if iters > 30 * n {
                return Err(MatrixError::ComplexSpectrum(h[hi - 1][hi - 2].abs()));
            }
        }
    }
    values.sort_by(|x, y| y.partial_cmp(x).unwrap());

    // eigenvectors: smallest singular direction of (a - lambda I)
    let mut vectors = Matrix::zeros(n, n);
    for (t, &lam) in values.iter().enumerate() {
        let mut shifted = a.clone();
        for i in 0..n {
            shifted.set(i, i, shifted.get(i, i) - lam);
        }
        let dec = svd(&shifted, None)?;
        let mut col = dec.v.column(n - 1);
        canonical_sign(&mut col);
        for i in 0..n {
            vectors.set(i, t, col[i]);
        }
    }
    Ok(EigResult { vectors, values })
}

fn hessenberg(a: &Matrix) -> Vec<Vec<f64>> {
    let n = a.rows();
    let mut h: Vec<Vec<f64>> = (0..n).map(|i| a.row(i).to_vec()).collect();
    for k in 0..n.saturating_sub(2) {
        let mut norm_sq = 0.0;
        for i in (k + 1)..n {
            norm_sq += h[i][k] * h[i][k];
        }
        if norm_sq <= 1e-300 {
            continue;
        }
        let alpha = -h[k + 1][k].signum() * norm_sq.sqrt();
        let mut v = vec![0.0; n];
        v[k + 1] = h[k + 1][k] - alpha;
        for i in (k + 2)..n {
            v[i] = h[i][k];
        }
        let vnorm_sq: f64 = v.iter().map(|x| x * x).sum();
        if vnorm_sq <= 1e-300 {
            continue;
        }
        // H <- (I - 2vv'/v'v) H (I - 2vv'/v'v)
        for j in 0..n {
            let dot: f64 = (0..n).map(|i| v[i] * h[i][j]).sum();
            let f = 2.0 * dot / vnorm_sq;
            for i in 0..n {
                h[i][j] -= f * v[i];
            }
        }
        for i in 0..n {
            let dot: f64 = (0..n).map(|j| h[i][j] * v[j]).sum();
            let f = 2.0 * dot / vnorm_sq;
            for j in 0..n {
                h[i][j] -= f * v[j];
            }
        }
    }
    h
}

/// Explicit shifted QR step via Givens rotations on the leading
/// `m x m` Hessenberg block.
fn qr_step(h: &mut [Vec<f64>], m: usize, shift: f64) {
    for i in 0..m {
        h[i][i] -= shift;
    }
    let mut rots = Vec::with_capacity(m.saturating_sub(1));
    for i in 0..m - 1 {
        let x = h[i][i];
        let y = h[i + 1][i];
        let r = (x * x + y * y).sqrt();
        let (c, s) = if r <= 1e-300 { (1.0, 0.0) } else { (x / r, y / r) };
        rots.push((c, s));
        for j in i..m {
            let hi = h[i][j];
            let hj = h[i + 1][j];
            h[i][j] = c * hi + s * hj;
            h[i + 1][j] = -s * hi + c * hj;
        }
    }
    for (i, (c, s)) in rots.iter().enumerate() {
        for r in 0..(i + 2).min(m) {
            let hi = h[r][i];
            let hj = h[r][i + 1];
            h[r][i] = c * hi + s * hj;
            h[r][i + 1] = -s * hi + c * hj;
        }
    }
    for i in 0..m {
        h[i][i] += shift;
    }
}

/// Principal angles (radians, ascending) between the column spans of `a`
/// and `b` (both orthonormalized internally via SVD).
pub fn principal_angles(a: &Matrix, b: &Matrix) -> Result<Vec<f64>, MatrixError> {
    let qa = orthonormal_basis(a)?;
    let qb = orthonormal_basis(b)?;
    let cross = qa.transpose().matmul(&qb)?;
    let dec = svd(&cross, None)?;
    let mut angles: Vec<f64> =
        dec.sigma.iter().map(|s| s.clamp(-1.0, 1.0).acos()).collect();
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    Ok(angles)
}

/// Orthonormal basis of the column span (left singular vectors above the
/// rank tolerance).
pub fn orthonormal_basis(a: &Matrix) -> Result<Matrix, MatrixError> {
    let dec = svd(a, None)?;
    let r = dec.rank().max(1);
    let mut out = Matrix::zeros(a.rows(), r);
    for t in 0..r {
        for i in 0..a.rows() {
            out.set(i, t, dec.u.get(i, t));
        }
    }
    Ok(out)
}

/// Moore-Penrose pseudo-inverse via SVD. `rel_tol` is relative to the
/// largest singular value; pass [`RANK_TOL`] for the default.
pub fn pinv(a: &Matrix, rel_tol: f64) -> Result<Matrix, MatrixError> {
    let dec = svd(a, None)?;
    let smax = dec.sigma.first().copied().unwrap_or(0.0);
    let cut = rel_tol * smax;
    let r = dec.sigma.len();
    let mut out = Matrix::zeros(a.cols(), a.rows());
    for t in 0..r {
        if dec.sigma[t] <= cut || dec.sigma[t] == 0.0 {
            continue;
        }
        let inv = 1.0 / dec.sigma[t];
        for i in 0..a.cols() {
            let vi = dec.v.get(i, t) * inv;
            if vi == 0.0 {
                continue;
            }
            for j in 0..a.rows() {
                let x = out.get(i, j) + vi * dec.u.get(j, t);
                out.set(i, j, x);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> Matrix {
        let data: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::new(m, n, data).unwrap()
    }

    fn assert_orthonormal(m: &Matrix, tol: f64) {
        let gram = m.transpose().matmul(m).unwrap();
        let eye = Matrix::identity(m.cols());
        assert!(gram.sub(&eye).unwrap().frobenius_norm() <= tol, "gram deviates: {gram:?}");
    }

    #[test]
    fn construction_rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(MatrixError::NonFinite(1))
        ));
        assert!(matches!(
            Matrix::new(2, 2, vec![0.0; 3]),
            Err(MatrixError::BadLength { .. })
        ));
    }

    #[test]
    fn svd_identity() {
        let dec = svd(&Matrix::identity(3), None).unwrap();
        assert_eq!(dec.sigma, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn svd_diagonal() {
        let dec = svd(&Matrix::diag(&[0.8, 0.2]), None).unwrap();
        assert!((dec.sigma[0] - 0.8).abs() < 1e-14);
        assert!((dec.sigma[1] - 0.2).abs() < 1e-14);
        // u and v are signed permutations of the identity
        for t in 0..2 {
            for i in 0..2 {
                let u = dec.u.get(i, t).abs();
                assert!(u < 1e-12 || (u - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn svd_reconstructs_random_6x6() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_matrix(&mut rng, 6, 6);
        let dec = svd(&a, None).unwrap();
        let resid = dec.reconstruct().sub(&a).unwrap().frobenius_norm();
        assert!(resid <= 1e-8 * a.frobenius_norm().max(1.0), "residual {resid}");
        assert_orthonormal(&dec.u, 1e-10);
        assert_orthonormal(&dec.v, 1e-10);
    }

    #[test]
    fn svd_wide_and_rank_deficient() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_matrix(&mut rng, 3, 5);
        let dec = svd(&a, None).unwrap();
        assert_eq!(dec.u.rows(), 3);
        assert_eq!(dec.v.rows(), 5);
        assert_eq!(dec.sigma.len(), 3);
        let resid = dec.reconstruct().sub(&a).unwrap().frobenius_norm();
        assert!(resid <= 1e-9);

        let z = Matrix::zeros(4, 4);
        let dz = svd(&z, None).unwrap();
        assert!(dz.sigma.iter().all(|s| *s == 0.0));
        assert_orthonormal(&dz.u, 1e-12);
    }

    #[test]
    fn svd_top_k_truncates() {
        let dec = svd(&Matrix::diag(&[3.0, 2.0, 1.0]), Some(2)).unwrap();
        assert_eq!(dec.sigma.len(), 2);
        assert_eq!(dec.u.cols(), 2);
        assert_eq!(dec.v.cols(), 2);
        assert!((dec.sigma[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn svd_deterministic_bit_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_matrix(&mut rng, 8, 8);
        let d1 = svd(&a, None).unwrap();
        let d2 = svd(&a, None).unwrap();
        assert_eq!(d1.u.data(), d2.u.data());
        assert_eq!(d1.sigma, d2.sigma);
        assert_eq!(d1.v.data(), d2.v.data());
    }

    #[test]
    fn svd_sign_convention() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..20 {
            let a = random_matrix(&mut rng, 5, 4);
            let dec = svd(&a, None).unwrap();
            for t in 0..dec.u.cols() {
                let col = dec.u.column(t);
                let best = col.iter().cloned().fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
                assert!(best >= 0.0, "column {t} max-magnitude entry negative");
            }
        }
    }

    #[test]
    fn svd_matches_eig_of_gram_and_reconstructs_100_seeds() {
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = rng.gen_range(1..=20);
            let n = rng.gen_range(1..=20);
            let a = random_matrix(&mut rng, m, n);
            let dec = svd(&a, None).unwrap();
            let resid = dec.reconstruct().sub(&a).unwrap().frobenius_norm();
            assert!(resid <= 1e-8 * a.frobenius_norm().max(1.0), "seed {seed} residual {resid}");
            for w in dec.sigma.windows(2) {
                assert!(w[0] >= w[1]);
            }
            let gram = a.transpose().matmul(&a).unwrap();
            let eig = eig_real(&gram).unwrap();
            for (s, lam) in dec.sigma.iter().zip(&eig.values) {
                assert!((s - lam.max(0.0).sqrt()).abs() <= 1e-7, "seed {seed}: {s} vs {lam}");
            }
        }
    }

    #[test]
    fn eig_two_state_chain_by_hand() {
        let a = Matrix::from_rows(&[&[0.9, 0.1], &[0.1, 0.9]]).unwrap();
        let e = eig_real(&a).unwrap();
        assert!((e.values[0] - 1.0).abs() < 1e-12);
        assert!((e.values[1] - 0.8).abs() < 1e-12);
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        for i in 0..2 {
            assert!((e.vectors.get(i, 0).abs() - inv_sqrt2).abs() < 1e-10);
        }
    }

    #[test]
    fn eig_identity_and_diag() {
        let e = eig_real(&Matrix::identity(2)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0]);
        let e = eig_real(&Matrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 2.0, 1.0]);
        for t in 0..3 {
            assert!((e.vectors.get(t, t).abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eig_nonsymmetric_real_spectrum() {
        // upper-triangular: spectrum on the diagonal
        let a = Matrix::from_rows(&[&[2.0, 1.0, 0.5], &[0.0, 1.0, 0.3], &[0.0, 0.0, 0.5]]).unwrap();
        let e = eig_real(&a).unwrap();
        assert!((e.values[0] - 2.0).abs() < 1e-9);
        assert!((e.values[1] - 1.0).abs() < 1e-9);
        assert!((e.values[2] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn eig_rejects_rotation_spectrum() {
        // rotation by 90 degrees has eigenvalues +-i
        let a = Matrix::from_rows(&[&[0.0, -1.0], &[1.0, 0.0]]).unwrap();
        assert!(matches!(eig_real(&a), Err(MatrixError::ComplexSpectrum(_))));
    }

    #[test]
    fn pinv_cases() {
        let p = pinv(&Matrix::diag(&[2.0, 0.0]), RANK_TOL).unwrap();
        assert!((p.get(0, 0) - 0.5).abs() < 1e-14);
        assert!(p.get(1, 1).abs() < 1e-14);

        let p = pinv(&Matrix::identity(4), RANK_TOL).unwrap();
        assert!(p.sub(&Matrix::identity(4)).unwrap().frobenius_norm() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_matrix(&mut rng, 5, 3);
        let p = pinv(&a, RANK_TOL).unwrap();
        let apa = a.matmul(&p).unwrap().matmul(&a).unwrap();
        let pap = p.matmul(&a).unwrap().matmul(&p).unwrap();
        assert!(apa.sub(&a).unwrap().frobenius_norm() <= 1e-8);
        assert!(pap.sub(&p).unwrap().frobenius_norm() <= 1e-8);
    }

    #[test]
    fn weighted_norm_cases() {
        assert_eq!(weighted_norm_sq(&[1.0, 1.0], &[1.0, 1.0]).unwrap(), 2.0);
        assert_eq!(weighted_norm_sq(&[2.0, 0.0], &[4.0, 1.0]).unwrap(), 1.0);
        // clamp floor applied to the zero weight
        let v = weighted_norm_sq(&[1.0, 1.0], &[0.0, 1.0]).unwrap();
        assert_eq!(v, 1e12 + 1.0);
        assert!(weighted_norm_sq(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn text_roundtrip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = random_matrix(&mut rng, 4, 7);
        let b = Matrix::from_text(&a.to_text()).unwrap();
        assert_eq!(a.data(), b.data());
        assert_eq!((a.rows(), a.cols()), (b.rows(), b.cols()));
    }
}
