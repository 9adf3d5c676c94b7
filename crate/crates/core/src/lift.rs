//! Fock-space representation of a linear-optical transfer matrix.
//!
//! A creation operator transforms as `a_k† → Σ_l U[l,k] a_l†`, so the
//! single-photon amplitude from input mode `k` to output mode `l` is `U[l,k]`
//! and the `n`-photon block is
//!
//! ```text
//! Ũ⁽ⁿ⁾[i, j] = perm(U[i rows, j cols]) / sqrt(i! j!)
//! ```
//!
//! with `i` the output and `j` the input occupation. The map `U ↦ Ũ` is a
//! homomorphism: `Ũ(AB) = Ũ(A) Ũ(B)`. Different photon-number sectors never
//! mix.
//!
//! Whole blocks come from permanents. Individual columns are built instead by
//! applying the transformed creation operators `b_k† = Σ_l U[l,k] a_l†` to
//! the vacuum, which is exact and polynomial in the photon number.

use std::sync::{Arc, OnceLock};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fock::{FockBasis, OccupationVector};
use crate::matrixkit::{permanent, submatrix_by_multiplicity, CMatrix, CVector, ZERO};

#[derive(Debug)]
pub struct LiftedUnitary {
    basis: Arc<FockBasis>,
    source: CMatrix,
    blocks: Vec<OnceLock<CMatrix>>,
    raise: Vec<OnceLock<Vec<usize>>>,
}

impl Clone for LiftedUnitary {
    fn clone(&self) -> Self {
        let blocks = self
            .blocks
            .iter()
            .map(|b| {
                let cell = OnceLock::new();
                if let Some(m) = b.get() {
                    let _ = cell.set(m.clone());
                }
                cell
            })
            .collect();
        let raise = (0..self.raise.len()).map(|_| OnceLock::new()).collect();
        Self { basis: self.basis.clone(), source: self.source.clone(), blocks, raise }
    }
}

/// Lifts an `M x M` matrix (unitary or a lossy contraction) to the Fock space
/// of `basis`. Sector blocks are computed on first use.
pub fn lift(u: &CMatrix, basis: Arc<FockBasis>) -> Result<LiftedUnitary> {
    if !u.is_square() || u.nrows() != basis.modes() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} matrix lifted to a {}-mode basis",
            u.nrows(),
            u.ncols(),
            basis.modes()
        )));
    }
    let blocks = (0..=basis.n_max()).map(|_| OnceLock::new()).collect();
    let raise = (0..basis.n_max()).map(|_| OnceLock::new()).collect();
    Ok(LiftedUnitary { basis, source: u.clone(), blocks, raise })
}

impl LiftedUnitary {
    pub fn basis(&self) -> &Arc<FockBasis> {
        &self.basis
    }

    pub fn source(&self) -> &CMatrix {
        &self.source
    }

    /// The `n`-photon block, indexed by within-sector rank.
    pub fn block(&self, n: usize) -> &CMatrix {
        self.blocks[n].get_or_init(|| self.compute_block(n))
    }

    fn compute_block(&self, n: usize) -> CMatrix {
        let states = self.basis.sector(n);
        let s = states.len();
        let norms: Vec<f64> = states.iter().map(|o| o.factorial_product().sqrt()).collect();
        let entries: Vec<Complex64> = (0..s * s)
            .into_par_iter()
            .map(|k| {
                let (i, j) = (k / s, k % s);
                let sub = submatrix_by_multiplicity(&self.source, &states[i], &states[j])
                    .expect("sector states share a photon number");
                let p = permanent(&sub).expect("sector size is below the permanent cap");
                p / (norms[i] * norms[j])
            })
            .collect();
        CMatrix::from_row_slice(s, s, &entries)
    }

    /// Selected columns (by within-sector rank) of the `n`-photon block.
    /// Uses the cached block when present and the creation-operator
    /// expansion otherwise.
    pub fn columns(&self, n: usize, ranks: &[usize]) -> CMatrix {
        if let Some(b) = self.blocks[n].get() {
            return b.select_columns(ranks);
        }
        let states = self.basis.sector(n);
        let cols: Vec<CVector> = ranks
            .par_iter()
            .map(|&r| self.apply_to_state(&states[r]).expect("state lies in the basis"))
            .collect();
        CMatrix::from_columns(&cols)
    }

    /// `Ũ|occ⟩` as a vector over the sector holding `|occ|` photons.
    pub fn apply_to_state(&self, occ: &OccupationVector) -> Result<CVector> {
        if occ.modes() != self.basis.modes() || occ.total() > self.basis.n_max() {
            return Err(Error::OutOfBasis { state: occ.as_slice().to_vec(), n_max: self.basis.n_max() });
        }
        let mut v = CVector::from_element(1, Complex64::new(1.0, 0.0));
        let mut n = 0;
        for k in 0..occ.modes() {
            for _ in 0..occ[k] {
                v = self.create(k, &v, n);
                n += 1;
            }
        }
        Ok(v / Complex64::new(occ.factorial_product().sqrt(), 0.0))
    }

    /// `b_k† v` for `v` over sector `n`; the result lies in sector `n + 1`.
    pub fn create(&self, k: usize, v: &CVector, n: usize) -> CVector {
        let m = self.basis.modes();
        let table = self.raise_table(n);
        let states = self.basis.sector(n);
        let mut out = CVector::zeros(self.basis.sector(n + 1).len());
        for (i, c) in v.iter().enumerate() {
            if *c == ZERO {
                continue;
            }
            for l in 0..m {
                let u = self.source[(l, k)];
                if u != ZERO {
                    out[table[i * m + l]] += c * u * ((states[i][l] + 1) as f64).sqrt();
                }
            }
        }
        out
    }

    /// Rank in sector `n + 1` of each sector-`n` state with one photon added
    /// to mode `l`, flattened as `[i * modes + l]`.
    fn raise_table(&self, n: usize) -> &[usize] {
        self.raise[n].get_or_init(|| {
            let m = self.basis.modes();
            let off = self.basis.sector_offset(n + 1);
            let mut t = Vec::with_capacity(self.basis.sector(n).len() * m);
            for s in self.basis.sector(n) {
                for l in 0..m {
                    let mut up = s.as_slice().to_vec();
                    up[l] += 1;
                    t.push(self.basis.index_of(&OccupationVector::new(up)).expect("n < n_max") - off);
                }
            }
            t
        })
    }

    /// Forces every block.
    pub fn materialize(&self) {
        (0..=self.basis.n_max()).for_each(|n| {
            self.block(n);
        });
    }

    /// `⟨row|Ũ|col⟩` for global basis indices.
    pub fn element(&self, row: usize, col: usize) -> Complex64 {
        let n = self.basis.photons_at(row);
        if self.basis.photons_at(col) != n {
            return ZERO;
        }
        let off = self.basis.sector_offset(n);
        self.block(n)[(row - off, col - off)]
    }

    /// The full block-diagonal matrix.
    pub fn to_matrix(&self) -> CMatrix {
        let d = self.basis.dim();
        let mut out = CMatrix::zeros(d, d);
        for n in 0..=self.basis.n_max() {
            let r = self.basis.sector_range(n);
            out.view_mut((r.start, r.start), (r.len(), r.len())).copy_from(self.block(n));
        }
        out
    }

    /// Block-wise `Ũ ψ`.
    pub fn apply_pure(&self, state: &CVector) -> Result<CVector> {
        let d = self.basis.dim();
        if state.len() != d {
            return Err(Error::DimensionMismatch(format!("state of length {} for basis of size {d}", state.len())));
        }
        let mut out = CVector::zeros(d);
        for n in 0..=self.basis.n_max() {
            let r = self.basis.sector_range(n);
            let seg = self.block(n) * state.rows(r.start, r.len());
            out.rows_mut(r.start, r.len()).copy_from(&seg);
        }
        Ok(out)
    }

    /// Block-wise `Ũ ρ Ũ†` for a matrix over the basis.
    pub fn conjugate(&self, rho: &CMatrix) -> Result<CMatrix> {
        let d = self.basis.dim();
        if rho.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!("{:?} matrix for basis of size {d}", rho.shape())));
        }
        let n_max = self.basis.n_max();
        let mut out = CMatrix::zeros(d, d);
        for a in 0..=n_max {
            let ra = self.basis.sector_range(a);
            for b in 0..=n_max {
                let rb = self.basis.sector_range(b);
                let blk = rho.view((ra.start, rb.start), (ra.len(), rb.len()));
                if blk.iter().all(|z| *z == ZERO) {
                    continue;
                }
                let res = self.block(a) * blk * self.block(b).adjoint();
                out.view_mut((ra.start, rb.start), (ra.len(), rb.len())).copy_from(&res);
            }
        }
        Ok(out)
    }
}
