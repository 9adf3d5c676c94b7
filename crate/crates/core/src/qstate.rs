//! Density matrices and photon-number distributions over truncated Fock
//! spaces.
//!
//! Entry `(a, b)` of a density matrix couples the sectors holding
//! `photons_at(a)` and `photons_at(b)` photons; off-diagonal sector blocks are
//! coherences.

use std::ops::Range;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{FockBasis, OccupationVector, TensorIndexMap};
use crate::matrixkit::{fmt_sci, hermitian_eigh, hermitian_fn, max_abs, CMatrix, CVector, ONE, ZERO};

pub const HERMITIAN_TOL: f64 = 1e-10;
pub const TRACE_TOL: f64 = 1e-10;
/// Smallest eigenvalue accepted as numerically non-negative.
pub const PSD_TOL: f64 = -1e-8;
pub const DISTRIBUTION_TOL: f64 = 1e-9;
/// Population allowed to fall outside a truncation before it is an error.
pub const LEAK_TOL: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct DensityMatrix {
    basis: Arc<FockBasis>,
    entries: CMatrix,
}

impl DensityMatrix {
    /// Validated construction: Hermitian, unit trace, numerically PSD.
    pub fn new(basis: Arc<FockBasis>, entries: CMatrix) -> Result<Self> {
        let rho = Self::from_raw(basis, entries)?;
        rho.validate()?;
        Ok(rho)
    }

    /// Construction with shape checks only.
    pub fn from_raw(basis: Arc<FockBasis>, entries: CMatrix) -> Result<Self> {
        let d = basis.dim();
        if entries.shape() != (d, d) {
            return Err(Error::DimensionMismatch(format!(
                "{:?} matrix for a basis of dimension {d}",
                entries.shape()
            )));
        }
        Ok(Self { basis, entries })
    }

    pub fn validate(&self) -> Result<()> {
        let herm = max_abs(&(&self.entries - self.entries.adjoint()));
        if herm > HERMITIAN_TOL {
            return Err(Error::InvalidState(format!("not Hermitian (deviation {herm:.3e})")));
        }
        let tr = self.trace();
        if (tr - 1.0).abs() > TRACE_TOL {
            return Err(Error::InvalidState(format!("trace is {tr}")));
        }
        let min = self.min_eigenvalue();
        if min < PSD_TOL {
            return Err(Error::InvalidState(format!("smallest eigenvalue {min:.3e}")));
        }
        Ok(())
    }

    pub fn pure(basis: Arc<FockBasis>, psi: &CVector) -> Result<Self> {
        let norm = psi.norm();
        if psi.len() != basis.dim() || norm == 0.0 {
            return Err(Error::InvalidArgument("state vector is empty or has the wrong length".into()));
        }
        let psi = psi / Complex64::new(norm, 0.0);
        Self::from_raw(basis, &psi * psi.adjoint())
    }

    pub fn vacuum(basis: Arc<FockBasis>) -> Self {
        let mut m = CMatrix::zeros(basis.dim(), basis.dim());
        m[(0, 0)] = ONE;
        Self { basis, entries: m }
    }

    pub fn basis(&self) -> &Arc<FockBasis> {
        &self.basis
    }

    pub fn entries(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_entries(self) -> CMatrix {
        self.entries
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace().re
    }

    pub fn purity(&self) -> f64 {
        self.entries.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        hermitian_eigh(&self.entries).0.first().copied().unwrap_or(0.0)
    }

    /// Diagonal weight per photon-number sector.
    pub fn sector_weights(&self) -> Vec<f64> {
        (0..=self.basis.n_max())
            .map(|n| self.basis.sector_range(n).map(|i| self.entries[(i, i)].re).sum())
            .collect()
    }

    /// Largest sector whose weight exceeds `tol`.
    pub fn max_populated_sector(&self, tol: f64) -> usize {
        self.sector_weights().iter().rposition(|&w| w > tol).unwrap_or(0)
    }

    /// Same state re-expressed over a basis with a different truncation.
    /// Dropped weight above `LEAK_TOL` is an error.
    pub fn retruncate(&self, n_max: usize) -> Result<Self> {
        if n_max == self.basis.n_max() {
            return Ok(self.clone());
        }
        let target = Arc::new(FockBasis::new(self.basis.modes(), n_max)?);
        let keep = target.dim().min(self.dim());
        let dropped: f64 = self.sector_weights().iter().skip(n_max + 1).sum();
        if dropped > LEAK_TOL {
            return Err(Error::TruncationOverflow {
                n_max,
                required: self.max_populated_sector(LEAK_TOL),
                leaked: dropped,
            });
        }
        let mut m = CMatrix::zeros(target.dim(), target.dim());
        m.view_mut((0, 0), (keep, keep)).copy_from(&self.entries.view((0, 0), (keep, keep)));
        Ok(Self { basis: target, entries: m })
    }

    /// Reduced state on the contiguous mode block `keep`, which must start
    /// at mode 0 or end at the last mode. An empty block yields the 1x1
    /// trace over a zero-mode basis.
    pub fn partial_trace(&self, keep: Range<usize>) -> Result<Self> {
        let m = self.basis.modes();
        if keep.start > keep.end || keep.end > m || (keep.start != 0 && keep.end != m) {
            return Err(Error::Unsupported(format!(
                "partial trace keeping modes {keep:?} of {m}: only leading or trailing blocks are supported"
            )));
        }
        if keep.len() == m {
            return Ok(self.clone());
        }
        let n_max = self.basis.n_max();
        let kept = Arc::new(FockBasis::new(keep.len(), n_max)?);
        let traced = FockBasis::new(m - keep.len(), n_max)?;
        let keep_leading = keep.start == 0;
        // group joint indices by the traced subsystem's state
        let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); traced.dim()];
        for (j, s) in self.basis.iter().enumerate() {
            let (a, b) = s.split_at(if keep_leading { keep.len() } else { m - keep.len() });
            let (k, t) = if keep_leading { (a, b) } else { (b, a) };
            groups[traced.index_of(&t)?].push((kept.index_of(&k)?, j));
        }
        let mut out = CMatrix::zeros(kept.dim(), kept.dim());
        for g in &groups {
            for &(ka, ja) in g {
                for &(kb, jb) in g {
                    out[(ka, kb)] += self.entries[(ja, jb)];
                }
            }
        }
        Ok(Self { basis: kept, entries: out })
    }

    pub fn to_file(&self) -> DensityMatrixFile {
        let d = self.dim();
        DensityMatrixFile {
            modes: self.basis.modes(),
            n_max: self.basis.n_max(),
            re: (0..d).map(|i| (0..d).map(|j| self.entries[(i, j)].re).collect()).collect(),
            im: (0..d).map(|i| (0..d).map(|j| self.entries[(i, j)].im).collect()).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("density matrix serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<DensityMatrixFile>(text)?.to_density_matrix()
    }
}

/// Density-matrix serialization: nested row-major `re` and `im` arrays.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensityMatrixFile {
    pub modes: usize,
    pub n_max: usize,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

impl DensityMatrixFile {
    pub fn to_density_matrix(&self) -> Result<DensityMatrix> {
        let basis = Arc::new(FockBasis::new(self.modes, self.n_max)?);
        let d = basis.dim();
        let shape_ok = |rows: &Vec<Vec<f64>>| rows.len() == d && rows.iter().all(|r| r.len() == d);
        if !shape_ok(&self.re) || !shape_ok(&self.im) {
            return Err(Error::DimensionMismatch(format!(
                "density matrix file must be {d}x{d} for {} modes and n_max {}",
                self.modes, self.n_max
            )));
        }
        let m = CMatrix::from_fn(d, d, |i, j| Complex64::new(self.re[i][j], self.im[i][j]));
        DensityMatrix::new(basis, m)
    }
}

pub fn fock_state_dm(basis: Arc<FockBasis>, occ: &OccupationVector) -> Result<DensityMatrix> {
    let i = basis.index_of(occ)?;
    let mut m = CMatrix::zeros(basis.dim(), basis.dim());
    m[(i, i)] = ONE;
    DensityMatrix::from_raw(basis, m)
}

/// `ρ_A ⊗ ρ_B` over `joint`, with A on the leading modes. Products landing
/// beyond the joint truncation are dropped if their total diagonal weight is
/// below `LEAK_TOL` and reported as truncation overflow otherwise.
pub fn tensor_product(a: &DensityMatrix, b: &DensityMatrix, joint: Arc<FockBasis>) -> Result<DensityMatrix> {
    let map = TensorIndexMap::new(a.basis(), b.basis(), &joint)?;
    let (wa, wb) = (a.sector_weights(), b.sector_weights());
    let mut leaked = 0.0;
    for (na, x) in wa.iter().enumerate() {
        for (nb, y) in wb.iter().enumerate() {
            if na + nb > joint.n_max() {
                leaked += x * y;
            }
        }
    }
    if leaked > LEAK_TOL {
        return Err(Error::TruncationOverflow {
            n_max: joint.n_max(),
            required: a.max_populated_sector(LEAK_TOL) + b.max_populated_sector(LEAK_TOL),
            leaked,
        });
    }
    let pairs: Vec<(usize, usize, usize)> = map.iter().collect();
    let mut out = CMatrix::zeros(joint.dim(), joint.dim());
    for &(ia, ib, j) in &pairs {
        for &(ia2, ib2, j2) in &pairs {
            let x = a.entries[(ia, ia2)];
            if x == ZERO {
                continue;
            }
            out[(j, j2)] = x * b.entries[(ib, ib2)];
        }
    }
    DensityMatrix::from_raw(joint, out)
}

fn check_same_basis(a: &FockBasis, b: &FockBasis) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch(format!(
            "bases differ: {} modes / n_max {} vs {} modes / n_max {}",
            a.modes(),
            a.n_max(),
            b.modes(),
            b.n_max()
        )));
    }
    Ok(())
}

/// `½‖ρ − σ‖₁`.
pub fn trace_distance(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    check_same_basis(rho.basis(), sigma.basis())?;
    let (vals, _) = hermitian_eigh(&(&rho.entries - &sigma.entries));
    Ok((0.5 * vals.iter().map(|v| v.abs()).sum::<f64>()).clamp(0.0, 1.0))
}

/// `(Tr √(√ρ σ √ρ))²`, with negative eigenvalues clipped at 0.
pub fn uhlmann_fidelity(rho: &DensityMatrix, sigma: &DensityMatrix) -> Result<f64> {
    check_same_basis(rho.basis(), sigma.basis())?;
    let s = hermitian_fn(&rho.entries, |x| x.max(0.0).sqrt());
    let (vals, _) = hermitian_eigh(&(&s * &sigma.entries * &s));
    let root: f64 = vals.iter().map(|v| v.max(0.0).sqrt()).sum();
    Ok((root * root).clamp(0.0, 1.0))
}

#[derive(Debug, Clone)]
pub struct ProbabilityDistribution {
    basis: Arc<FockBasis>,
    probabilities: Vec<f64>,
}

impl ProbabilityDistribution {
    pub fn new(basis: Arc<FockBasis>, probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.len() != basis.dim() {
            return Err(Error::DimensionMismatch(format!(
                "{} probabilities for a basis of dimension {}",
                probabilities.len(),
                basis.dim()
            )));
        }
        if probabilities.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::InvalidState("negative or non-finite probability".into()));
        }
        let total: f64 = probabilities.iter().sum();
        if (total - 1.0).abs() > DISTRIBUTION_TOL {
            return Err(Error::InvalidState(format!("probabilities sum to {total}")));
        }
        Ok(Self { basis, probabilities })
    }

    pub fn basis(&self) -> &Arc<FockBasis> {
        &self.basis
    }

    pub fn probabilities(&self) -> &[f64] {
        &self.probabilities
    }

    pub fn probability(&self, occ: &OccupationVector) -> Result<f64> {
        Ok(self.probabilities[self.basis.index_of(occ)?])
    }

    /// Marginal over a leading or trailing block of modes.
    /// Marginal on the contiguous mode block `keep`.
    pub fn marginal(&self, keep: Range<usize>) -> Result<Self> {
        let m = self.basis.modes();
        if keep.start > keep.end || keep.end > m {
            return Err(Error::InvalidArgument(format!("marginal over modes {keep:?} of {m}")));
        }
        let kept = Arc::new(FockBasis::new(keep.len(), self.basis.n_max())?);
        let mut p = vec![0.0; kept.dim()];
        for (i, s) in self.basis.iter().enumerate() {
            let sub = OccupationVector::new(s.as_slice()[keep.clone()].to_vec());
            p[kept.index_of(&sub)?] += self.probabilities[i];
        }
        Ok(Self { basis: kept, probabilities: p })
    }

    /// Same distribution over a basis with a different truncation. Dropped
    /// probability above `LEAK_TOL` is an error.
    pub fn retruncate(&self, n_max: usize) -> Result<Self> {
        let target = Arc::new(FockBasis::new(self.basis.modes(), n_max)?);
        let keep = target.dim().min(self.basis.dim());
        let dropped: f64 = self.probabilities[keep..].iter().sum();
        if dropped > LEAK_TOL {
            let required = self.basis.photons_at(self.probabilities.iter().rposition(|&p| p > LEAK_TOL).unwrap_or(0));
            return Err(Error::TruncationOverflow { n_max, required, leaked: dropped });
        }
        let mut p = vec![0.0; target.dim()];
        p[..keep].copy_from_slice(&self.probabilities[..keep]);
        Ok(Self { basis: target, probabilities: p })
    }

    /// Draws `shots` outcomes by inverse-CDF sampling; counts are aligned
    /// with the basis order.
    pub fn sample(&self, shots: usize, seed: u64) -> Result<Vec<usize>> {
        if shots == 0 {
            return Err(Error::InvalidArgument("shots must be at least 1".into()));
        }
        let mut cdf = Vec::with_capacity(self.probabilities.len());
        let mut acc = 0.0;
        for p in &self.probabilities {
            acc += p;
            cdf.push(acc);
        }
        let last = cdf.iter().rposition(|_| true).expect("non-empty basis");
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut counts = vec![0; cdf.len()];
        for _ in 0..shots {
            let u: f64 = rng.random::<f64>() * acc;
            let k = cdf.partition_point(|&c| c <= u).min(last);
            counts[k] += 1;
        }
        Ok(counts)
    }

    /// CSV rows `occupation;probability`, occupations comma-separated.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("occupation;probability\n");
        for (s, p) in self.basis.iter().zip(&self.probabilities) {
            out.push_str(&format!("{};{}\n", occupation_label(s), fmt_sci(*p)));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line.starts_with("occupation") {
                continue;
            }
            let (occ, p) = line
                .split_once(';')
                .ok_or_else(|| Error::Config(format!("malformed distribution row {line:?}")))?;
            let occ: Vec<usize> = occ
                .split(',')
                .map(|x| x.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad occupation in {line:?}")))?;
            let p: f64 = p.trim().parse().map_err(|_| Error::Config(format!("bad probability in {line:?}")))?;
            rows.push((OccupationVector::new(occ), p));
        }
        let modes = rows.first().map(|(o, _)| o.modes()).ok_or_else(|| Error::Config("empty distribution".into()))?;
        let n_max = rows.iter().map(|(o, _)| o.total()).max().unwrap_or(0);
        let basis = Arc::new(FockBasis::new(modes, n_max)?);
        let mut p = vec![0.0; basis.dim()];
        for (o, x) in rows {
            p[basis.index_of(&o)?] = x;
        }
        Self::new(basis, p)
    }
}

pub fn occupation_label(s: &OccupationVector) -> String {
    s.as_slice().iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

/// `Σ √(p_i q_i)`.
pub fn classical_fidelity(p: &ProbabilityDistribution, q: &ProbabilityDistribution) -> Result<f64> {
    check_same_basis(p.basis(), q.basis())?;
    let f: f64 = p.probabilities.iter().zip(&q.probabilities).map(|(a, b)| (a * b).sqrt()).sum();
    Ok(f.clamp(0.0, 1.0))
}

/// `½ Σ |p_i − q_i|`.
pub fn total_variation(p: &ProbabilityDistribution, q: &ProbabilityDistribution) -> Result<f64> {
    check_same_basis(p.basis(), q.basis())?;
    Ok(0.5 * p.probabilities.iter().zip(&q.probabilities).map(|(a, b)| (a - b).abs()).sum::<f64>())
}

/// Real diagonal of `ρ`. Entries in `[-1e-8, 0)` are clipped; the result is
/// renormalized when its sum has drifted by at most `DISTRIBUTION_TOL`.
pub fn diagonal_distribution(rho: &DensityMatrix) -> Result<ProbabilityDistribution> {
    let mut p: Vec<f64> = (0..rho.dim()).map(|i| rho.entries[(i, i)].re).collect();
    if let Some(bad) = p.iter().position(|&x| x < PSD_TOL) {
        return Err(Error::InvalidState(format!("diagonal entry {bad} is {:.3e}", p[bad])));
    }
    p.iter_mut().for_each(|x| *x = x.max(0.0));
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() <= DISTRIBUTION_TOL {
        p.iter_mut().for_each(|x| *x /= total);
    }
    ProbabilityDistribution::new(rho.basis.clone(), p)
}

/// Hilbert–Schmidt random density matrix `G G† / Tr(G G†)` from a complex
/// Ginibre matrix `G`.
pub fn random_density_matrix(basis: Arc<FockBasis>, seed: u64) -> DensityMatrix {
    random_density_matrix_with(basis, &mut ChaCha20Rng::seed_from_u64(seed))
}

pub fn random_density_matrix_with<R: Rng>(basis: Arc<FockBasis>, rng: &mut R) -> DensityMatrix {
    let d = basis.dim();
    let g = CMatrix::from_fn(d, d, |_, _| {
        Complex64::new(rng.sample::<f64, _>(StandardNormal), rng.sample::<f64, _>(StandardNormal))
    });
    let m = &g * g.adjoint();
    let tr = m.trace().re;
    DensityMatrix { basis, entries: m / Complex64::new(tr, 0.0) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn basis(m: usize, n: usize) -> Arc<FockBasis> {
        Arc::new(FockBasis::new(m, n).unwrap())
    }

    fn occ(v: &[usize]) -> OccupationVector {
        OccupationVector::new(v.to_vec())
    }

    #[test]
    fn fock_projectors() {
        let b = basis(2, 2);
        let vac = fock_state_dm(b.clone(), &occ(&[0, 0])).unwrap();
        assert_eq!(vac.entries()[(0, 0)], ONE);
        assert!((vac.trace() - 1.0).abs() < 1e-15 && (vac.purity() - 1.0).abs() < 1e-15);
        let rho = fock_state_dm(b.clone(), &occ(&[1, 1])).unwrap();
        let i = b.index_of(&occ(&[1, 1])).unwrap();
        assert_eq!(i, 4);
        assert_eq!(rho.entries()[(i, i)], ONE);
        assert_eq!(rho.entries().iter().filter(|z| **z != ZERO).count(), 1);
        assert!(fock_state_dm(b, &occ(&[2, 1])).is_err());
    }

    #[test]
    fn validation_rejects_bad_states() {
        let b = basis(1, 1);
        let half = CMatrix::from_diagonal(&CVector::from_vec(vec![ONE * 0.5, ONE * 0.4]));
        assert!(DensityMatrix::new(b.clone(), half).is_err());
        let neg = CMatrix::from_diagonal(&CVector::from_vec(vec![ONE * 1.2, ONE * -0.2]));
        assert!(DensityMatrix::new(b.clone(), neg).is_err());
        let mut nh = CMatrix::identity(2, 2) * Complex64::new(0.5, 0.0);
        nh[(0, 1)] = Complex64::new(0.1, 0.0);
        assert!(DensityMatrix::new(b.clone(), nh).is_err());
        assert!(DensityMatrix::new(b, CMatrix::identity(3, 3)).is_err());
    }

    #[test]
    fn tensor_product_examples() {
        let (a, bb, joint) = (basis(1, 1), basis(2, 1), basis(3, 2));
        let vac = tensor_product(&DensityMatrix::vacuum(a.clone()), &DensityMatrix::vacuum(bb.clone()), joint.clone())
            .unwrap();
        assert_eq!(vac.entries()[(0, 0)], ONE);
        assert!((vac.trace() - 1.0).abs() < 1e-15);
        let one = fock_state_dm(a.clone(), &occ(&[1])).unwrap();
        let zo = fock_state_dm(bb.clone(), &occ(&[0, 1])).unwrap();
        let prod = tensor_product(&one, &zo, joint.clone()).unwrap();
        let j = joint.index_of(&occ(&[1, 0, 1])).unwrap();
        assert_eq!(j, 4 + 3);
        assert_eq!(prod.entries()[(j, j)], ONE);
        assert!((prod.trace() - 1.0).abs() < 1e-15);
        // both photons need n_max 2; a 1-photon joint basis must refuse
        assert!(matches!(
            tensor_product(&one, &zo, basis(3, 1)),
            Err(Error::TruncationOverflow { required: 2, .. })
        ));
    }

    #[test]
    fn partial_trace_examples() {
        let b = basis(2, 1);
        let rho = random_density_matrix(b.clone(), 1);
        let all = rho.partial_trace(0..0).unwrap();
        assert_eq!(all.dim(), 1);
        assert!((all.entries()[(0, 0)] - ONE).norm() < 1e-14);
        // (|0,1⟩ + |1,0⟩)/√2 keeps diag(1/2, 1/2) on one mode
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let mut psi = CVector::zeros(b.dim());
        psi[b.index_of(&occ(&[0, 1])).unwrap()] = ONE * h;
        psi[b.index_of(&occ(&[1, 0])).unwrap()] = ONE * h;
        let ent = DensityMatrix::pure(b.clone(), &psi).unwrap();
        for keep in [0..1, 1..2] {
            let red = ent.partial_trace(keep).unwrap();
            assert_eq!(red.dim(), 2);
            assert!((red.entries()[(0, 0)].re - 0.5).abs() < 1e-15);
            assert!((red.entries()[(1, 1)].re - 0.5).abs() < 1e-15);
            assert!(red.entries()[(0, 1)].norm() < 1e-15);
        }
        assert!(basis(3, 1).dim() == 4);
        let rho3 = random_density_matrix(basis(3, 1), 2);
        assert!(rho3.partial_trace(1..2).is_err());
        assert!(rho3.partial_trace(0..4).is_err());
    }

    #[test]
    fn metrics_basic() {
        let b = basis(1, 2);
        let rho = random_density_matrix(b.clone(), 3);
        assert!(trace_distance(&rho, &rho).unwrap() < 1e-14);
        assert!((uhlmann_fidelity(&rho, &rho).unwrap() - 1.0).abs() < 1e-10);
        let p0 = fock_state_dm(b.clone(), &occ(&[0])).unwrap();
        let p1 = fock_state_dm(b.clone(), &occ(&[1])).unwrap();
        assert!((trace_distance(&p0, &p1).unwrap() - 1.0).abs() < 1e-14);
        assert!(uhlmann_fidelity(&p0, &p1).unwrap() < 1e-14);
        assert!(trace_distance(&p0, &random_density_matrix(basis(2, 2), 0)).is_err());
    }

    #[test]
    fn two_level_metrics_match_closed_forms() {
        // commuting qubit-like states: D = |p - q|, F = (√(pq) + √((1-p)(1-q)))²
        let b = basis(1, 1);
        let diag = |p: f64| {
            DensityMatrix::new(b.clone(), CMatrix::from_diagonal(&CVector::from_vec(vec![ONE * p, ONE * (1.0 - p)])))
                .unwrap()
        };
        let (p, q) = (0.8, 0.3);
        assert!((trace_distance(&diag(p), &diag(q)).unwrap() - 0.5).abs() < 1e-14);
        let f = ((p * q).sqrt() + ((1.0 - p) * (1.0 - q)).sqrt()).powi(2);
        assert!((uhlmann_fidelity(&diag(p), &diag(q)).unwrap() - f).abs() < 1e-12);
        // pure states: D = √(1 - |⟨ψ|φ⟩|²), F = |⟨ψ|φ⟩|²
        let psi = CVector::from_vec(vec![ONE, Complex64::new(0.0, 1.0)]).normalize();
        let phi = CVector::from_vec(vec![Complex64::new(0.6, 0.0), Complex64::new(0.0, 0.8)]);
        let ov = psi.dotc(&phi).norm_sqr();
        let (rp, rf) = (DensityMatrix::pure(b.clone(), &psi).unwrap(), DensityMatrix::pure(b, &phi).unwrap());
        assert!((trace_distance(&rp, &rf).unwrap() - (1.0 - ov).sqrt()).abs() < 1e-12);
        assert!((uhlmann_fidelity(&rp, &rf).unwrap() - ov).abs() < 1e-7);
    }

    #[test]
    fn diagonal_distributions() {
        let b = basis(2, 2);
        let p = diagonal_distribution(&fock_state_dm(b.clone(), &occ(&[2, 0])).unwrap()).unwrap();
        assert_eq!(p.probability(&occ(&[2, 0])).unwrap(), 1.0);
        assert!((p.probabilities().iter().sum::<f64>() - 1.0).abs() < 1e-15);
        let mixed = DensityMatrix::new(basis(1, 1), CMatrix::identity(2, 2) * Complex64::new(0.5, 0.0)).unwrap();
        assert_eq!(diagonal_distribution(&mixed).unwrap().probabilities(), &[0.5, 0.5]);
        let bad = DensityMatrix::from_raw(
            basis(1, 1),
            CMatrix::from_diagonal(&CVector::from_vec(vec![ONE * 1.1, ONE * -0.1])),
        )
        .unwrap();
        assert!(diagonal_distribution(&bad).is_err());
    }

    #[test]
    fn sampling() {
        let b = basis(1, 2);
        let one_hot = ProbabilityDistribution::new(b.clone(), vec![0.0, 1.0, 0.0]).unwrap();
        assert_eq!(one_hot.sample(100, 5).unwrap(), vec![0, 100, 0]);
        let p = ProbabilityDistribution::new(b, vec![0.2, 0.5, 0.3]).unwrap();
        let shots = 100_000;
        let c1 = p.sample(shots, 42).unwrap();
        assert_eq!(c1, p.sample(shots, 42).unwrap());
        assert_ne!(c1, p.sample(shots, 43).unwrap());
        assert_eq!(c1.iter().sum::<usize>(), shots);
        for (k, &pk) in p.probabilities().iter().enumerate() {
            let sigma = (shots as f64 * pk * (1.0 - pk)).sqrt();
            assert!((c1[k] as f64 - shots as f64 * pk).abs() < 4.0 * sigma);
        }
        assert!(one_hot.sample(0, 1).is_err());
    }

    #[test]
    fn marginals_and_fidelities() {
        let b = basis(2, 1);
        let p = ProbabilityDistribution::new(b.clone(), vec![0.5, 0.2, 0.3]).unwrap();
        // order: (0,0), (0,1), (1,0)
        let m0 = p.marginal(0..1).unwrap();
        assert!((m0.probabilities()[0] - 0.7).abs() < 1e-15 && (m0.probabilities()[1] - 0.3).abs() < 1e-15);
        let three = ProbabilityDistribution::new(basis(3, 1), vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        // order: (0,0,0), (0,0,1), (0,1,0), (1,0,0)
        let mid = three.marginal(1..2).unwrap();
        assert!((mid.probabilities()[0] - 0.7).abs() < 1e-15 && (mid.probabilities()[1] - 0.3).abs() < 1e-15);
        let wide = three.retruncate(3).unwrap();
        assert_eq!(wide.retruncate(1).unwrap().probabilities(), three.probabilities());
        assert!(matches!(three.retruncate(0), Err(Error::TruncationOverflow { .. })));
        let q = ProbabilityDistribution::new(b, vec![0.5, 0.3, 0.2]).unwrap();
        assert!((total_variation(&p, &q).unwrap() - 0.1).abs() < 1e-15);
        assert!((classical_fidelity(&p, &p).unwrap() - 1.0).abs() < 1e-15);
        let f = 0.5 + 2.0 * (0.06f64).sqrt();
        assert!((classical_fidelity(&p, &q).unwrap() - f).abs() < 1e-15);
    }

    #[test]
    fn serialization_round_trips() {
        let rho = random_density_matrix(basis(2, 2), 9);
        let back = DensityMatrix::from_json(&rho.to_json()).unwrap();
        assert_eq!(back.entries(), rho.entries());
        assert!(DensityMatrix::from_json(r#"{"modes":1,"n_max":1,"re":[[1]],"im":[[0]]}"#).is_err());
        let p = diagonal_distribution(&rho).unwrap();
        let csv = p.to_csv();
        assert!(csv.lines().nth(2).unwrap().starts_with("0,1;"));
        let q = ProbabilityDistribution::from_csv(&csv).unwrap();
        assert!(total_variation(&p, &q).unwrap() < 1e-12);
    }

    #[test]
    fn retruncation() {
        let b = basis(1, 3);
        let rho = fock_state_dm(b.clone(), &occ(&[1])).unwrap();
        let small = rho.retruncate(1).unwrap();
        assert_eq!(small.dim(), 2);
        assert_eq!(small.retruncate(3).unwrap().entries(), rho.entries());
        assert!(fock_state_dm(b, &occ(&[2])).unwrap().retruncate(1).is_err());
    }

    fn pair_strategy() -> impl Strategy<Value = (usize, usize, usize, u64)> {
        (1usize..=2, 1usize..=2, 1usize..=3, any::<u64>())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn trace_of_product_recovers_factor((ma, mb, n, seed) in pair_strategy()) {
            let (a, b) = (basis(ma, n), basis(mb, n));
            let ra = random_density_matrix(a, seed);
            let rb = random_density_matrix(b, seed ^ 0x9e37);
            // the joint truncation must hold every populated pair
            let joint = basis(ma + mb, 2 * n);
            let prod = tensor_product(&ra, &rb, joint).unwrap();
            prop_assert!((prod.trace() - 1.0).abs() < 1e-12);
            prop_assert!(max_abs(&(prod.entries() - prod.entries().adjoint())) < 1e-14);
            let back = prod.partial_trace(0..ma).unwrap().retruncate(n).unwrap();
            prop_assert!(max_abs(&(back.entries() - ra.entries())) < 1e-12);
            let back_b = prod.partial_trace(ma..ma + mb).unwrap().retruncate(n).unwrap();
            prop_assert!(max_abs(&(back_b.entries() - rb.entries())) < 1e-12);
        }

        #[test]
        fn partial_trace_preserves_state_properties((m, _k, n, seed) in pair_strategy()) {
            let rho = random_density_matrix(basis(m + 1, n), seed);
            for keep in [0..m, m..m + 1] {
                let red = rho.partial_trace(keep).unwrap();
                prop_assert!(red.validate().is_ok());
            }
        }

        #[test]
        fn partial_trace_contracts_trace_distance((m, _k, n, seed) in pair_strategy()) {
            let b = basis(m + 1, n);
            let rho = random_density_matrix(b.clone(), seed);
            let sigma = random_density_matrix(b, seed.wrapping_add(1));
            let d = trace_distance(&rho, &sigma).unwrap();
            for keep in [0..m, m..m + 1] {
                let dr = trace_distance(&rho.partial_trace(keep.clone()).unwrap(), &sigma.partial_trace(keep).unwrap()).unwrap();
                prop_assert!(dr <= d + 1e-10);
            }
        }

        #[test]
        fn metrics_stay_in_unit_interval(seed in any::<u64>()) {
            let b = basis(2, 2);
            let rho = random_density_matrix(b.clone(), seed);
            let sigma = random_density_matrix(b, !seed);
            for x in [trace_distance(&rho, &sigma).unwrap(), uhlmann_fidelity(&rho, &sigma).unwrap()] {
                prop_assert!((0.0..=1.0).contains(&x));
            }
        }
    }
}
