//! Dense complex matrix utilities: permanents, Haar-random unitaries,
//! vectorization and spectral tools.

use nalgebra::linalg::Schur;
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::OccupationVector;

pub type CMatrix = DMatrix<Complex64>;
pub type CVector = DVector<Complex64>;

pub const ZERO: Complex64 = Complex64::new(0.0, 0.0);
pub const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// Largest matrix accepted by [`permanent`].
pub const PERMANENT_MAX_SIZE: usize = 30;

/// Unitarity / contraction tolerance for interferometer matrices.
pub const UNITARITY_TOL: f64 = 1e-12;

/// Eigenpair residual tolerance, relative to the eigenvector norm.
pub const EIGEN_RESIDUAL_TOL: f64 = 1e-10;

/// Matrices with more rows than this use shifted power iteration in
/// [`eig_principal`] instead of a dense Schur decomposition.
pub const DENSE_EIGEN_MAX: usize = 4096;

/// Permanent by Ryser's formula, visiting column subsets in Gray-code order.
///
/// `O(2^n n)` time. The summation order is fixed, so results are
/// reproducible bit-for-bit on a given platform.
pub fn permanent(a: &CMatrix) -> Result<Complex64> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch(format!(
            "permanent of a {}x{} matrix",
            a.nrows(),
            a.ncols()
        )));
    }
    let n = a.nrows();
    if n > PERMANENT_MAX_SIZE {
        return Err(Error::TooLarge(format!("permanent of size {n} (cap {PERMANENT_MAX_SIZE})")));
    }
    if n == 0 {
        return Ok(ONE);
    }
    let mut row_sums = vec![ZERO; n];
    let mut total = ZERO;
    let mut gray: u64 = 0;
    for k in 1u64..(1u64 << n) {
        let j = k.trailing_zeros() as usize;
        gray ^= 1 << j;
        if gray & (1 << j) != 0 {
            for (i, s) in row_sums.iter_mut().enumerate() {
                *s += a[(i, j)];
            }
        } else {
            for (i, s) in row_sums.iter_mut().enumerate() {
                *s -= a[(i, j)];
            }
        }
        let prod = row_sums.iter().fold(ONE, |acc, s| acc * s);
        if gray.count_ones() % 2 == 0 {
            total += prod;
        } else {
            total -= prod;
        }
    }
    Ok(if n % 2 == 0 { total } else { -total })
}

/// Repeats row `k` of `a` `row_occ[k]` times and column `k` `col_occ[k]` times.
pub fn submatrix_by_multiplicity(
    a: &CMatrix,
    row_occ: &OccupationVector,
    col_occ: &OccupationVector,
) -> Result<CMatrix> {
    if row_occ.modes() != a.nrows() || col_occ.modes() != a.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "occupations of length {}/{} for a {}x{} matrix",
            row_occ.modes(),
            col_occ.modes(),
            a.nrows(),
            a.ncols()
        )));
    }
    if row_occ.total() != col_occ.total() {
        return Err(Error::InvalidArgument(format!(
            "row occupation {} and column occupation {} carry different photon numbers",
            row_occ, col_occ
        )));
    }
    let rows = expand(row_occ);
    let cols = expand(col_occ);
    Ok(CMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])]))
}

fn expand(occ: &OccupationVector) -> Vec<usize> {
    occ.as_slice().iter().enumerate().flat_map(|(k, &n)| std::iter::repeat_n(k, n)).collect()
}

/// An `M x M` transfer matrix with its external/looped split.
///
/// External modes come first; the last `n_looped` modes feed back.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryInterferometer {
    matrix: CMatrix,
    n_looped: usize,
    lossy: bool,
}

impl UnitaryInterferometer {
    /// Wraps a unitary matrix, checking `U†U = I`.
    pub fn new(matrix: CMatrix, n_looped: usize) -> Result<Self> {
        Self::check_split(&matrix, n_looped)?;
        let dev = max_abs(&(matrix.adjoint() * &matrix - CMatrix::identity(matrix.nrows(), matrix.ncols())));
        if dev > UNITARITY_TOL * (matrix.nrows() as f64).max(1.0) {
            return Err(Error::InvalidArgument(format!("matrix is not unitary (max |U†U - I| = {dev:.3e})")));
        }
        Ok(Self { matrix, n_looped, lossy: false })
    }

    /// Wraps a contraction (all singular values at most one), as produced by
    /// absorbing amplitude losses into a unitary.
    pub fn new_lossy(matrix: CMatrix, n_looped: usize) -> Result<Self> {
        Self::check_split(&matrix, n_looped)?;
        let smax = matrix.clone().svd(false, false).singular_values.max();
        if smax > 1.0 + UNITARITY_TOL {
            return Err(Error::InvalidArgument(format!("matrix is not a contraction (largest singular value {smax})")));
        }
        Ok(Self { matrix, n_looped, lossy: true })
    }

    fn check_split(matrix: &CMatrix, n_looped: usize) -> Result<()> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "transfer matrix must be square and non-empty, got {}x{}",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        if n_looped >= matrix.nrows() {
            return Err(Error::InvalidArgument(format!(
                "{} looped modes out of {} leaves no external mode",
                n_looped,
                matrix.nrows()
            )));
        }
        if matrix.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidArgument("matrix has non-finite entries".into()));
        }
        Ok(())
    }

    pub fn with_looped(self, n_looped: usize) -> Result<Self> {
        Self::check_split(&self.matrix, n_looped)?;
        Ok(Self { n_looped, ..self })
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn modes(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn n_looped(&self) -> usize {
        self.n_looped
    }

    pub fn n_external(&self) -> usize {
        self.modes() - self.n_looped
    }

    pub fn is_lossy(&self) -> bool {
        self.lossy
    }

    pub fn block_ee(&self) -> CMatrix {
        let e = self.n_external();
        self.matrix.view((0, 0), (e, e)).into_owned()
    }

    pub fn block_el(&self) -> CMatrix {
        let (e, l) = (self.n_external(), self.n_looped);
        self.matrix.view((0, e), (e, l)).into_owned()
    }

    pub fn block_le(&self) -> CMatrix {
        let (e, l) = (self.n_external(), self.n_looped);
        self.matrix.view((e, 0), (l, e)).into_owned()
    }

    pub fn block_ll(&self) -> CMatrix {
        let (e, l) = (self.n_external(), self.n_looped);
        self.matrix.view((e, e), (l, l)).into_owned()
    }

    /// Absorbs per-mode amplitude transmissions: `T_out · U · T_in`.
    pub fn with_losses(&self, t_in: &[f64], t_out: &[f64]) -> Result<Self> {
        let m = self.modes();
        if t_in.len() != m || t_out.len() != m {
            return Err(Error::DimensionMismatch(format!(
                "transmission arrays of length {}/{} for {} modes",
                t_in.len(),
                t_out.len(),
                m
            )));
        }
        for &t in t_in.iter().chain(t_out) {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::InvalidArgument(format!("amplitude transmission {t} outside [0, 1]")));
            }
        }
        let lossy = CMatrix::from_fn(m, m, |i, j| self.matrix[(i, j)] * t_out[i] * t_in[j]);
        Self::new_lossy(lossy, self.n_looped)
    }
}

/// Haar-random unitary: QR of a complex Ginibre matrix with the phases of
/// `R`'s diagonal moved into `Q`. Deterministic for a fixed seed.
pub fn haar_random_unitary(modes: usize, seed: u64) -> UnitaryInterferometer {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    haar_unitary_with(modes, &mut rng)
}

pub(crate) fn haar_unitary_with<R: rand::Rng>(modes: usize, rng: &mut R) -> UnitaryInterferometer {
    assert!(modes >= 1, "Haar unitary needs at least one mode");
    let scale = std::f64::consts::FRAC_1_SQRT_2;
    let g = CMatrix::from_fn(modes, modes, |_, _| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        Complex64::new(re * scale, im * scale)
    });
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..modes {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { ONE };
        for i in 0..modes {
            q[(i, j)] *= phase;
        }
    }
    UnitaryInterferometer { matrix: q, n_looped: 0, lossy: false }
}

/// Column-stacking vectorization.
pub fn vec(a: &CMatrix) -> CVector {
    // nalgebra storage is column-major
    CVector::from_column_slice(a.as_slice())
}

pub fn unvec(v: &CVector, rows: usize, cols: usize) -> Result<CMatrix> {
    if v.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!("vector of length {} into {rows}x{cols}", v.len())));
    }
    Ok(CMatrix::from_column_slice(rows, cols, v.as_slice()))
}

/// Largest entry modulus.
pub fn max_abs(a: &CMatrix) -> f64 {
    a.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// All eigenvalues of a square matrix via complex Schur decomposition.
pub fn eigenvalues(a: &CMatrix) -> Result<Vec<Complex64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch("eigenvalues of a non-square matrix".into()));
    }
    let n = a.nrows();
    if n == 0 {
        return Ok(Vec::new());
    }
    if n == 1 {
        return Ok(vec![a[(0, 0)]]);
    }
    let schur = Schur::try_new(a.clone(), f64::EPSILON, 1000 * n).ok_or(Error::NonConvergence {
        iterations: 1000 * n,
        residual: f64::NAN,
    })?;
    let (_, t) = schur.unpack();
    Ok((0..n).map(|i| t[(i, i)]).collect())
}

/// Largest eigenvalue modulus.
pub fn spectral_radius(a: &CMatrix) -> Result<f64> {
    Ok(eigenvalues(a)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
}

/// Eigenpair whose eigenvalue lies closest to 1.
///
/// Dense Schur plus inverse iteration up to [`DENSE_EIGEN_MAX`] rows, shifted
/// power iteration above. The returned vector has unit 2-norm and satisfies
/// `‖Av − λv‖ ≤ 1e-10`.
pub fn eig_principal(a: &CMatrix) -> Result<(Complex64, CVector)> {
    if !a.is_square() || a.nrows() == 0 {
        return Err(Error::DimensionMismatch("eigenpair of a non-square or empty matrix".into()));
    }
    if a.nrows() > DENSE_EIGEN_MAX {
        return shifted_power_iteration(a, 0.5, 200_000);
    }
    let lambda = eigenvalues(a)?
        .into_iter()
        .min_by(|x, y| (x - ONE).norm().total_cmp(&(y - ONE).norm()))
        .expect("non-empty spectrum");
    inverse_iteration(a, lambda)
}

/// Eigenvector for an eigenvalue estimate by inverse iteration, refining the
/// eigenvalue by Rayleigh quotients.
pub fn inverse_iteration(a: &CMatrix, lambda: Complex64) -> Result<(Complex64, CVector)> {
    let n = a.nrows();
    let scale = max_abs(a).max(1.0);
    let shift = lambda + Complex64::new(1e-11 * scale, 1e-11 * scale);
    let shifted = a - CMatrix::identity(n, n) * shift;
    let lu = shifted.lu();
    let mut v = CVector::from_fn(n, |i, _| Complex64::new(1.0 + (i as f64).sin() * 0.1, 0.0));
    v.normalize_mut();
    let mut best = (lambda, v.clone(), f64::INFINITY);
    for _ in 0..8 {
        let Some(w) = lu.solve(&v) else {
            return Err(Error::Singular("inverse iteration system".into()));
        };
        let norm = w.norm();
        if !norm.is_finite() || norm == 0.0 {
            break;
        }
        v = w / Complex64::new(norm, 0.0);
        let av = a * &v;
        let mu = v.dotc(&av);
        let residual = (&av - &v * mu).norm();
        if residual < best.2 {
            best = (mu, v.clone(), residual);
        }
        if residual <= EIGEN_RESIDUAL_TOL * 1e-2 {
            break;
        }
    }
    if best.2 > EIGEN_RESIDUAL_TOL {
        return Err(Error::NonConvergence { iterations: 8, residual: best.2 });
    }
    Ok((best.0, best.1))
}

/// Outcome of [`arnoldi_leading`].
#[derive(Debug, Clone)]
pub struct ArnoldiResult {
    pub value: Complex64,
    pub vector: CVector,
    /// Ritz values of the final cycle, by descending modulus.
    pub ritz: Vec<Complex64>,
    pub residual: f64,
    pub restarts: usize,
}

/// Largest-modulus eigenpair of an operator known only through its action,
/// by explicitly restarted Arnoldi with twice-iterated Gram-Schmidt.
/// Converges when the Ritz residual drops below `tol · |λ|`.
pub fn arnoldi_leading(
    op: &(dyn Fn(&CVector) -> CVector + Sync),
    start: &CVector,
    krylov_dim: usize,
    tol: f64,
    max_restarts: usize,
) -> Result<ArnoldiResult> {
    let n = start.len();
    if n == 0 || start.norm() == 0.0 {
        return Err(Error::InvalidArgument("Arnoldi needs a non-zero start vector".into()));
    }
    let m = krylov_dim.clamp(1, n);
    let mut v0 = start.normalize();
    let mut last_residual = f64::INFINITY;
    for restart in 0..max_restarts {
        let mut basis = vec![v0.clone()];
        let mut h = CMatrix::zeros(m + 1, m);
        let mut k = m;
        for j in 0..m {
            let mut w = op(&basis[j]);
            let scale = w.norm();
            for _ in 0..2 {
                for (i, b) in basis.iter().enumerate() {
                    let c = b.dotc(&w);
                    h[(i, j)] += c;
                    w -= b * c;
                }
            }
            let beta = w.norm();
            h[(j + 1, j)] = Complex64::new(beta, 0.0);
            if beta <= 1e-13 * scale.max(f64::MIN_POSITIVE) {
                k = j + 1;
                break;
            }
            basis.push(w / Complex64::new(beta, 0.0));
        }
        let hk = h.view((0, 0), (k, k)).into_owned();
        let mut ritz = eigenvalues(&hk)?;
        ritz.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
        let (theta, y) = inverse_iteration(&hk, ritz[0])?;
        let residual = if basis.len() > k { h[(k, k - 1)].norm() * y[k - 1].norm() } else { 0.0 };
        let mut x = CVector::zeros(n);
        for (i, b) in basis.iter().take(k).enumerate() {
            x += b * y[i];
        }
        x.normalize_mut();
        last_residual = residual;
        if residual <= tol * theta.norm().max(f64::MIN_POSITIVE) {
            return Ok(ArnoldiResult { value: theta, vector: x, ritz, residual, restarts: restart });
        }
        v0 = x;
    }
    Err(Error::NonConvergence { iterations: max_restarts, residual: last_residual })
}

/// Power iteration on `(A + sI)/(1 + s)`, which damps eigenvalues on the unit
/// circle other than 1.
pub fn shifted_power_iteration(a: &CMatrix, shift: f64, max_iter: usize) -> Result<(Complex64, CVector)> {
    let n = a.nrows();
    let mut v = CVector::from_element(n, Complex64::new(1.0 / (n as f64).sqrt(), 0.0));
    let s = Complex64::new(shift, 0.0);
    let mut residual = f64::INFINITY;
    for it in 0..max_iter {
        let av = a * &v;
        let mu = v.dotc(&av);
        residual = (&av - &v * mu).norm();
        if residual <= EIGEN_RESIDUAL_TOL {
            return Ok((mu, v));
        }
        let mut w = (av + &v * s) / (ONE + s);
        let norm = w.norm();
        if norm == 0.0 {
            return Err(Error::NonConvergence { iterations: it, residual });
        }
        w /= Complex64::new(norm, 0.0);
        v = w;
    }
    Err(Error::NonConvergence { iterations: max_iter, residual })
}

/// Eigendecomposition of a Hermitian matrix (the argument is symmetrized
/// first). Eigenvalues ascend.
pub fn hermitian_eigh(a: &CMatrix) -> (Vec<f64>, CMatrix) {
    let h = (a + a.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = h.symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMatrix::from_fn(a.nrows(), order.len(), |r, c| eig.eigenvectors[(r, order[c])]);
    (values, vectors)
}

/// Applies a real function to the spectrum of a Hermitian matrix.
pub fn hermitian_fn(a: &CMatrix, f: impl Fn(f64) -> f64) -> CMatrix {
    let (vals, vecs) = hermitian_eigh(a);
    let d = CMatrix::from_diagonal(&CVector::from_iterator(vals.len(), vals.iter().map(|&x| Complex64::new(f(x), 0.0))));
    &vecs * d * vecs.adjoint()
}

/// Matrix serialization: `{rows, cols, re, im}` with row-major entry order.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixFile {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl MatrixFile {
    pub fn from_matrix(a: &CMatrix) -> Self {
        let mut re = Vec::with_capacity(a.len());
        let mut im = Vec::with_capacity(a.len());
        for i in 0..a.nrows() {
            for j in 0..a.ncols() {
                re.push(a[(i, j)].re);
                im.push(a[(i, j)].im);
            }
        }
        Self { rows: a.nrows(), cols: a.ncols(), re, im }
    }

    pub fn to_matrix(&self) -> Result<CMatrix> {
        let n = self.rows * self.cols;
        if self.re.len() != n || self.im.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "matrix file declares {}x{} but has {} real / {} imaginary entries",
                self.rows,
                self.cols,
                self.re.len(),
                self.im.len()
            )));
        }
        let m = CMatrix::from_fn(self.rows, self.cols, |i, j| {
            let k = i * self.cols + j;
            Complex64::new(self.re[k], self.im[k])
        });
        if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::InvalidArgument("matrix file has non-finite entries".into()));
        }
        Ok(m)
    }
}

pub fn matrix_to_json(a: &CMatrix) -> String {
    serde_json::to_string_pretty(&MatrixFile::from_matrix(a)).expect("matrix serializes")
}

pub fn matrix_from_json(text: &str) -> Result<CMatrix> {
    serde_json::from_str::<MatrixFile>(text)?.to_matrix()
}

/// Parses a matrix from CSV rows of complex entries written as `re+imj`
/// (also `re-imj`, `re`, `imj`; `i` is accepted for `j`).
pub fn matrix_from_csv(text: &str) -> Result<CMatrix> {
    let rows: Vec<Vec<Complex64>> = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.split(',').map(parse_complex).collect::<Result<Vec<_>>>())
        .collect::<Result<_>>()?;
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::DimensionMismatch("ragged CSV matrix".into()));
    }
    Ok(CMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

pub fn parse_complex(s: &str) -> Result<Complex64> {
    let t: String = s.chars().filter(|c| !c.is_whitespace()).collect();
    let bad = || Error::Config(format!("cannot parse complex number {s:?}"));
    if t.is_empty() {
        return Err(bad());
    }
    let Some(body) = t.strip_suffix('j').or_else(|| t.strip_suffix('i')) else {
        return t.parse::<f64>().map(|re| Complex64::new(re, 0.0)).map_err(|_| bad());
    };
    // split at the last sign that is not part of an exponent
    let bytes = body.as_bytes();
    let split = (1..bytes.len())
        .rev()
        .find(|&k| (bytes[k] == b'+' || bytes[k] == b'-') && !matches!(bytes[k - 1], b'e' | b'E'));
    let (re, im) = match split {
        Some(k) => (&body[..k], &body[k..]),
        None => ("0", body),
    };
    let im = match im {
        "+" | "" => "1",
        "-" => "-1",
        x => x,
    };
    let re: f64 = re.parse().map_err(|_| bad())?;
    let im: f64 = im.trim_start_matches('+').parse().map_err(|_| bad())?;
    Ok(Complex64::new(re, im))
}

/// Formats like C's `%.12e` (`-1.250000000000e-03`).
pub fn fmt_sci(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.12e}");
    let (mant, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    format!("{mant}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
}

pub fn matrix_to_csv(a: &CMatrix) -> String {
    let mut out = String::new();
    for i in 0..a.nrows() {
        let row: Vec<String> = (0..a.ncols())
            .map(|j| {
                let z = a[(i, j)];
                format!("{}{}{}j", fmt_sci(z.re), if z.im.is_sign_negative() { "" } else { "+" }, fmt_sci(z.im))
            })
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}
