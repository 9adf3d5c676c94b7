//! Quantum channels on the looped modes as Kraus sets.
//!
//! All operators act on one basis (input and output truncation coincide).
//! `valid_max_photons` is the largest input photon number on which
//! `Σ K†K = I` holds; higher sectors may leak weight out of the truncation.
//! An operator whose photon-number shift (`|out| − |in|`) is definite is
//! stored as one block per input sector, which keeps application cheap and
//! lets the superoperator split into coherence-order blocks.

use std::sync::Arc;

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fock::{binomial, FockBasis, OccupationVector, TensorIndexMap};
use crate::lift::LiftedUnitary;
use crate::matrixkit::{
    arnoldi_leading, eigenvalues, hermitian_eigh, inverse_iteration, max_abs, unvec, vec, CMatrix, CVector, ONE,
    ZERO,
};
use crate::qstate::{DensityMatrix, LEAK_TOL};

/// Eigenvalues of the environment state below this are dropped.
pub const EIGEN_CUTOFF: f64 = 1e-12;
/// Largest basis dimension for which a dense superoperator is built.
pub const SUPEROPERATOR_MAX_DIM: usize = 64;
/// Spectral gap below which the fixed point is reported as non-unique.
pub const UNIQUENESS_GAP: f64 = 1e-8;

const KRAUS_CHUNK: usize = 16;
const ZERO_SQR: f64 = 1e-30;

#[derive(Debug, Clone)]
enum KrausData {
    Dense(CMatrix),
    /// `blocks[n]` maps sector `n` to sector `n + shift`; `None` when zero
    /// or when the target sector is outside the truncation.
    Sectored(Vec<Option<CMatrix>>),
}

#[derive(Debug, Clone)]
pub struct KrausOperator {
    shift: Option<i64>,
    data: KrausData,
}

impl KrausOperator {
    pub fn shift(&self) -> Option<i64> {
        self.shift
    }

    /// Block from sector `n` to sector `n + shift`, for sectored operators.
    pub fn block(&self, n: usize) -> Option<&CMatrix> {
        match &self.data {
            KrausData::Sectored(b) => b.get(n).and_then(Option::as_ref),
            KrausData::Dense(_) => None,
        }
    }

    pub fn to_dense(&self, basis: &FockBasis) -> CMatrix {
        match &self.data {
            KrausData::Dense(k) => k.clone(),
            KrausData::Sectored(blocks) => {
                let d = basis.dim();
                let mut k = CMatrix::zeros(d, d);
                for (n, b) in blocks.iter().enumerate() {
                    if let Some(b) = b {
                        let t = (n as i64 + self.shift.unwrap_or(0)) as usize;
                        k.view_mut((basis.sector_offset(t), basis.sector_offset(n)), b.shape()).copy_from(b);
                    }
                }
                k
            }
        }
    }

    fn is_zero(&self) -> bool {
        match &self.data {
            KrausData::Dense(k) => is_zero(k),
            KrausData::Sectored(b) => b.iter().flatten().all(is_zero),
        }
    }

    /// `K ρ K†` added into `out`.
    fn accumulate(&self, basis: &FockBasis, rho: &CMatrix, out: &mut CMatrix) {
        match &self.data {
            KrausData::Dense(k) => *out += k * rho * k.adjoint(),
            KrausData::Sectored(blocks) => {
                let s = self.shift.unwrap_or(0);
                let d = rho.ncols();
                let left: Vec<Option<(usize, CMatrix)>> = blocks
                    .iter()
                    .enumerate()
                    .map(|(n, b)| {
                        b.as_ref().map(|b| {
                            let r = basis.sector_range(n);
                            (basis.sector_offset((n as i64 + s) as usize), b * rho.view((r.start, 0), (r.len(), d)))
                        })
                    })
                    .collect();
                for (ta, kr) in left.iter().flatten() {
                    for (nb, bb) in blocks.iter().enumerate() {
                        let Some(bb) = bb else { continue };
                        let rb = basis.sector_range(nb);
                        let tb = basis.sector_offset((nb as i64 + s) as usize);
                        let blk = kr.columns(rb.start, rb.len()) * bb.adjoint();
                        let mut dst = out.view_mut((*ta, tb), blk.shape());
                        dst += &blk;
                    }
                }
            }
        }
    }

    fn restrict(&self, n_max: usize, d: usize) -> KrausOperator {
        let data = match &self.data {
            KrausData::Dense(k) => KrausData::Dense(k.view((0, 0), (d, d)).into_owned()),
            KrausData::Sectored(blocks) => {
                let s = self.shift.unwrap_or(0);
                KrausData::Sectored(
                    blocks
                        .iter()
                        .take(n_max + 1)
                        .enumerate()
                        .map(|(n, b)| b.clone().filter(|_| n as i64 + s <= n_max as i64))
                        .collect(),
                )
            }
        };
        KrausOperator { shift: self.shift, data }
    }
}

fn is_zero(k: &CMatrix) -> bool {
    k.iter().all(|z| z.norm_sqr() < ZERO_SQR)
}

/// Splits a dense operator with a definite shift into sector blocks,
/// refusing operators with weight off the shifted block diagonal.
fn sectorize(basis: &FockBasis, k: &CMatrix, shift: i64) -> Result<Vec<Option<CMatrix>>> {
    let n_max = basis.n_max() as i64;
    let mut blocks = Vec::with_capacity(basis.n_max() + 1);
    let mut kept = 0.0;
    for n in 0..=n_max {
        let t = n + shift;
        if !(0..=n_max).contains(&t) {
            blocks.push(None);
            continue;
        }
        let rs = basis.sector_range(t as usize);
        let cs = basis.sector_range(n as usize);
        let b = k.view((rs.start, cs.start), (rs.len(), cs.len())).into_owned();
        kept += b.norm_squared();
        blocks.push((!is_zero(&b)).then_some(b));
    }
    let off = k.norm_squared() - kept;
    if off > 1e-24 * k.norm_squared().max(1.0) {
        return Err(Error::InvalidArgument(format!("Kraus operator has weight {off:e} outside its photon shift {shift}")));
    }
    Ok(blocks)
}

#[derive(Debug, Clone)]
pub struct QuantumChannel {
    basis: Arc<FockBasis>,
    ops: Vec<KrausOperator>,
    valid_max_photons: usize,
}

impl QuantumChannel {
    /// Channel from dense operators. An operator with a definite shift must
    /// vanish outside the corresponding sector blocks.
    pub fn new(
        basis: Arc<FockBasis>,
        kraus: Vec<CMatrix>,
        shifts: Vec<Option<i64>>,
        valid_max_photons: usize,
    ) -> Result<Self> {
        let d = basis.dim();
        if kraus.is_empty() || kraus.len() != shifts.len() {
            return Err(Error::InvalidArgument("a channel needs one shift entry per Kraus operator".into()));
        }
        if let Some(k) = kraus.iter().find(|k| k.shape() != (d, d)) {
            return Err(Error::DimensionMismatch(format!("{:?} Kraus operator on a {d}-dimensional basis", k.shape())));
        }
        let ops = kraus
            .into_iter()
            .zip(shifts)
            .map(|(k, s)| {
                Ok(match s {
                    Some(s) => KrausOperator { shift: Some(s), data: KrausData::Sectored(sectorize(&basis, &k, s)?) },
                    None => KrausOperator { shift: None, data: KrausData::Dense(k) },
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_operators(basis, ops, valid_max_photons)
    }

    fn from_operators(basis: Arc<FockBasis>, ops: Vec<KrausOperator>, valid_max_photons: usize) -> Result<Self> {
        let ops: Vec<KrausOperator> = ops.into_iter().filter(|k| !k.is_zero()).collect();
        if ops.is_empty() {
            return Err(Error::InvalidState("channel has no non-zero Kraus operator".into()));
        }
        let valid_max_photons = valid_max_photons.min(basis.n_max());
        Ok(Self { basis, ops, valid_max_photons })
    }

    pub fn identity(basis: Arc<FockBasis>) -> Self {
        let blocks = (0..=basis.n_max()).map(|n| {
            let s = basis.sector_range(n).len();
            Some(CMatrix::identity(s, s))
        });
        let n = basis.n_max();
        let op = KrausOperator { shift: Some(0), data: KrausData::Sectored(blocks.collect()) };
        Self { basis, ops: vec![op], valid_max_photons: n }
    }

    pub fn basis(&self) -> &Arc<FockBasis> {
        &self.basis
    }

    pub fn operators(&self) -> &[KrausOperator] {
        &self.ops
    }

    /// Every Kraus operator as a dense matrix over the basis.
    pub fn kraus_dense(&self) -> Vec<CMatrix> {
        self.ops.iter().map(|k| k.to_dense(&self.basis)).collect()
    }

    pub fn shifts(&self) -> Vec<Option<i64>> {
        self.ops.iter().map(|k| k.shift).collect()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn valid_max_photons(&self) -> usize {
        self.valid_max_photons
    }

    pub fn has_definite_shifts(&self) -> bool {
        self.ops.iter().all(|k| k.shift.is_some())
    }

    /// Largest photon-number increase any operator can produce.
    pub fn photon_gain(&self) -> usize {
        if !self.has_definite_shifts() {
            return self.basis.n_max();
        }
        self.ops.iter().map(|k| k.shift.unwrap_or(0).max(0) as usize).max().unwrap_or(0)
    }

    /// `max |Σ K†K − I|` over the sectors up to `max_photons`.
    pub fn completeness_deviation(&self, max_photons: usize) -> f64 {
        let d = self.basis.dim();
        let mut sum = CMatrix::zeros(d, d);
        for k in &self.ops {
            match &k.data {
                KrausData::Dense(m) => sum += m.adjoint() * m,
                KrausData::Sectored(blocks) => {
                    // shifted blocks map distinct sectors to distinct sectors
                    for (n, b) in blocks.iter().enumerate() {
                        if let Some(b) = b {
                            let o = self.basis.sector_offset(n);
                            let mut dst = sum.view_mut((o, o), (b.ncols(), b.ncols()));
                            dst += b.adjoint() * b;
                        }
                    }
                }
            }
        }
        let end = self.basis.sector_range(max_photons.min(self.basis.n_max())).end;
        let id = CMatrix::identity(end, end);
        max_abs(&(sum.view((0, 0), (end, end)) - id))
    }

    /// `Σ K ρ K†` after checking that `ρ` carries no more than `LEAK_TOL`
    /// weight above the validity bound.
    pub fn apply(&self, rho: &DensityMatrix) -> Result<DensityMatrix> {
        if **rho.basis() != *self.basis {
            return Err(Error::DimensionMismatch("state and channel bases differ".into()));
        }
        let beyond: f64 = rho.sector_weights().iter().skip(self.valid_max_photons + 1).sum();
        if beyond > LEAK_TOL {
            return Err(Error::TruncationOverflow {
                n_max: self.valid_max_photons,
                required: rho.max_populated_sector(LEAK_TOL),
                leaked: beyond,
            });
        }
        DensityMatrix::from_raw(self.basis.clone(), self.apply_unchecked(rho.entries()))
    }

    /// `Σ K ρ K†` for any square matrix. Partial sums over fixed chunks are
    /// added in order, so the result does not depend on the thread count.
    pub fn apply_unchecked(&self, rho: &CMatrix) -> CMatrix {
        let partial: Vec<CMatrix> = self
            .ops
            .par_chunks(KRAUS_CHUNK)
            .map(|chunk| {
                let mut acc = CMatrix::zeros(rho.nrows(), rho.ncols());
                for k in chunk {
                    k.accumulate(&self.basis, rho, &mut acc);
                }
                acc
            })
            .collect();
        let mut out = CMatrix::zeros(rho.nrows(), rho.ncols());
        for p in partial {
            out += p;
        }
        out
    }

    /// `outer ∘ inner`: operators `K_i^outer K_j^inner`.
    pub fn compose(outer: &QuantumChannel, inner: &QuantumChannel) -> Result<QuantumChannel> {
        if outer.basis != inner.basis {
            return Err(Error::DimensionMismatch("composed channels act on different bases".into()));
        }
        let b = &inner.basis;
        let n_max = b.n_max() as i64;
        let mut ops = Vec::with_capacity(outer.len() * inner.len());
        for ko in &outer.ops {
            for ki in &inner.ops {
                let data = match (&ko.data, &ki.data) {
                    (KrausData::Sectored(bo), KrausData::Sectored(bi)) => {
                        let si = ki.shift.unwrap_or(0);
                        let blocks = bi
                            .iter()
                            .map(|blk| blk.as_ref())
                            .enumerate()
                            .map(|(n, blk)| {
                                let mid = n as i64 + si;
                                let blk = blk?;
                                if !(0..=n_max).contains(&mid) {
                                    return None;
                                }
                                bo[mid as usize].as_ref().map(|o| o * blk)
                            })
                            .collect();
                        KrausData::Sectored(blocks)
                    }
                    _ => KrausData::Dense(ko.to_dense(b) * ki.to_dense(b)),
                };
                ops.push(KrausOperator { shift: ko.shift.zip(ki.shift).map(|(a, c)| a + c), data });
            }
        }
        let valid = inner.valid_max_photons.min(outer.valid_max_photons.saturating_sub(inner.photon_gain()));
        Self::from_operators(inner.basis.clone(), ops, valid)
            .map_err(|_| Error::InvalidState("composition annihilates every state".into()))
    }

    /// The same channel on the sectors up to `n_max`. Outputs above the new
    /// truncation are discarded, so completeness survives only up to
    /// `n_max − photon_gain`.
    pub fn restrict(&self, n_max: usize) -> Result<QuantumChannel> {
        if n_max >= self.basis.n_max() {
            return Ok(self.clone());
        }
        let basis = Arc::new(FockBasis::new(self.basis.modes(), n_max)?);
        let d = basis.dim();
        let ops = self.ops.iter().map(|k| k.restrict(n_max, d)).collect();
        let valid = self.valid_max_photons.min(n_max.saturating_sub(self.photon_gain()));
        Self::from_operators(basis, ops, valid)
            .map_err(|_| Error::InvalidState("restriction removes every Kraus operator".into()))
    }

    /// Dense `G = Σ conj(K) ⊗ K` acting on column-stacked `vec(ρ)`.
    pub fn to_superoperator(&self) -> Result<Superoperator> {
        let d = self.basis.dim();
        if d > SUPEROPERATOR_MAX_DIM {
            return Err(Error::TooLarge(format!(
                "dense superoperator of a {d}-dimensional channel (limit {SUPEROPERATOR_MAX_DIM})"
            )));
        }
        let mut g = CMatrix::zeros(d * d, d * d);
        for k in self.kraus_dense() {
            g += k.conjugate().kronecker(&k);
        }
        Ok(Superoperator { matrix: g, dim: d })
    }
}

#[derive(Debug, Clone)]
pub struct Superoperator {
    matrix: CMatrix,
    dim: usize,
}

impl Superoperator {
    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn apply(&self, rho: &CMatrix) -> Result<CMatrix> {
        if rho.shape() != (self.dim, self.dim) {
            return Err(Error::DimensionMismatch(format!("{:?} matrix for superoperator on {}", rho.shape(), self.dim)));
        }
        unvec(&(&self.matrix * vec(rho)), self.dim, self.dim)
    }
}

/// The loop channel of one interferometer pass: inject `ρ_ext` on the
/// external modes, apply `Ũ`, trace out the external outputs.
///
/// `lifted` acts on all modes with the looped modes last; its truncation is
/// the truncation of the loop basis. For `ρ_ext = Σ λ_j |ψ_j⟩⟨ψ_j|` the
/// operators are `K_{j,m}[l', l] = √λ_j ⟨m, l'|Ũ|ψ_j, l⟩` over external
/// outputs `m`. Completeness holds for loop inputs with at most
/// `n_max − N_env` photons, `N_env` the top populated sector of `ρ_ext`.
///
/// Columns `Ũ|ψ_j, l⟩` are built by creation operators, each loop state
/// from its parent with one photon fewer.
pub fn loop_channel(lifted: &LiftedUnitary, rho_ext: &DensityMatrix, n_looped: usize) -> Result<QuantumChannel> {
    let pass = Pass::new(lifted, rho_ext, n_looped)?;
    let (joint, loop_basis) = (&pass.joint, &pass.loop_basis);
    let n_max = joint.n_max();
    let d_loop = loop_basis.dim();
    let mut ops = Vec::new();
    for comp in &pass.components {
        let columns = pass.columns(lifted, comp)?;
        let definite = (columns.len() == 1).then(|| columns[0].0);
        let scale = Complex64::new(comp.weight.sqrt(), 0.0);
        let mut sectored: Vec<Vec<Option<CMatrix>>> = vec![vec![None; n_max + 1]; pass.ext_full.dim()];
        let mut dense: Vec<Option<CMatrix>> = vec![None; pass.ext_full.dim()];
        for (p, w) in &columns {
            for (li, col) in w.iter().enumerate() {
                let Some(col) = col else { continue };
                let nl = loop_basis.photons_at(li);
                let off = joint.sector_offset(p + nl);
                for (r, z) in col.iter().enumerate() {
                    if z.norm_sqr() < ZERO_SQR {
                        continue;
                    }
                    let (ie, lo) = pass.split[off + r];
                    let val = z * scale;
                    if definite.is_some() {
                        let target = loop_basis.photons_at(lo);
                        let blk = sectored[ie][nl].get_or_insert_with(|| {
                            CMatrix::zeros(loop_basis.sector(target).len(), loop_basis.sector(nl).len())
                        });
                        blk[(lo - loop_basis.sector_offset(target), li - loop_basis.sector_offset(nl))] += val;
                    } else {
                        dense[ie].get_or_insert_with(|| CMatrix::zeros(d_loop, d_loop))[(lo, li)] += val;
                    }
                }
            }
        }
        for (ie, m) in pass.ext_full.iter().enumerate() {
            match definite {
                Some(p) => {
                    let blocks = std::mem::take(&mut sectored[ie]);
                    if blocks.iter().any(Option::is_some) {
                        let shift = p as i64 - m.total() as i64;
                        ops.push(KrausOperator { shift: Some(shift), data: KrausData::Sectored(blocks) });
                    }
                }
                None => {
                    if let Some(k) = dense[ie].take() {
                        ops.push(KrausOperator { shift: None, data: KrausData::Dense(k) });
                    }
                }
            }
        }
    }
    QuantumChannel::from_operators(pass.loop_basis.clone(), ops, n_max - pass.n_env)
}

/// The map from the loop state entering a pass to the state of the external
/// outputs: `ρ_loop ↦ Tr_L[Ũ (ρ_ext ⊗ ρ_loop) Ũ†]`, with operators
/// `D_{j,l'}[m, l] = √λ_j ⟨m, l'|Ũ|ψ_j, l⟩`.
#[derive(Debug, Clone)]
pub struct DetectionMap {
    loop_basis: Arc<FockBasis>,
    ext_basis: Arc<FockBasis>,
    ops: Vec<CMatrix>,
    valid_max_photons: usize,
}

impl DetectionMap {
    pub fn new(lifted: &LiftedUnitary, rho_ext: &DensityMatrix, n_looped: usize) -> Result<Self> {
        let pass = Pass::new(lifted, rho_ext, n_looped)?;
        let (joint, loop_basis) = (&pass.joint, &pass.loop_basis);
        let mut ops = Vec::new();
        for comp in &pass.components {
            let scale = Complex64::new(comp.weight.sqrt(), 0.0);
            let mut per_out: Vec<Option<CMatrix>> = vec![None; loop_basis.dim()];
            for (p, w) in pass.columns(lifted, comp)? {
                for (li, col) in w.iter().enumerate() {
                    let Some(col) = col else { continue };
                    let off = joint.sector_offset(p + loop_basis.photons_at(li));
                    for (r, z) in col.iter().enumerate() {
                        if z.norm_sqr() < ZERO_SQR {
                            continue;
                        }
                        let (ie, lo) = pass.split[off + r];
                        per_out[lo].get_or_insert_with(|| CMatrix::zeros(pass.ext_full.dim(), loop_basis.dim()))
                            [(ie, li)] += z * scale;
                    }
                }
            }
            ops.extend(per_out.into_iter().flatten());
        }
        let valid_max_photons = joint.n_max() - pass.n_env;
        Ok(Self { loop_basis: pass.loop_basis, ext_basis: Arc::new(pass.ext_full), ops, valid_max_photons })
    }

    pub fn loop_basis(&self) -> &Arc<FockBasis> {
        &self.loop_basis
    }

    pub fn ext_basis(&self) -> &Arc<FockBasis> {
        &self.ext_basis
    }

    pub fn operators(&self) -> &[CMatrix] {
        &self.ops
    }

    pub fn valid_max_photons(&self) -> usize {
        self.valid_max_photons
    }

    /// State of the external outputs; same validity check as
    /// [`QuantumChannel::apply`].
    pub fn apply(&self, rho_loop: &DensityMatrix) -> Result<DensityMatrix> {
        if **rho_loop.basis() != *self.loop_basis {
            return Err(Error::DimensionMismatch("loop state and detection map bases differ".into()));
        }
        let beyond: f64 = rho_loop.sector_weights().iter().skip(self.valid_max_photons + 1).sum();
        if beyond > LEAK_TOL {
            return Err(Error::TruncationOverflow {
                n_max: self.valid_max_photons,
                required: rho_loop.max_populated_sector(LEAK_TOL),
                leaked: beyond,
            });
        }
        let d = self.ext_basis.dim();
        let rho = rho_loop.entries();
        let partial: Vec<CMatrix> = self
            .ops
            .par_chunks(KRAUS_CHUNK)
            .map(|chunk| {
                let mut acc = CMatrix::zeros(d, d);
                for k in chunk {
                    acc += k * rho * k.adjoint();
                }
                acc
            })
            .collect();
        let mut out = CMatrix::zeros(d, d);
        for p in partial {
            out += p;
        }
        DensityMatrix::from_raw(self.ext_basis.clone(), out)
    }
}

/// Shared bookkeeping of one interferometer pass with the environment
/// decomposed into pure components.
struct Pass {
    joint: Arc<FockBasis>,
    ext_full: FockBasis,
    loop_basis: Arc<FockBasis>,
    /// joint index → (external index, loop index)
    split: Vec<(usize, usize)>,
    /// loop index → (index with one photon fewer, mode that gains it)
    parents: Vec<Option<(usize, usize)>>,
    components: Vec<EnvComponent>,
    n_env: usize,
}

impl Pass {
    fn new(lifted: &LiftedUnitary, rho_ext: &DensityMatrix, n_looped: usize) -> Result<Self> {
        let joint = lifted.basis().clone();
        let m_total = joint.modes();
        if n_looped >= m_total {
            return Err(Error::InvalidArgument(format!("{n_looped} looped modes out of {m_total}")));
        }
        let n_ext = m_total - n_looped;
        if rho_ext.basis().modes() != n_ext {
            return Err(Error::DimensionMismatch(format!(
                "environment state has {} modes, interferometer has {n_ext} external modes",
                rho_ext.basis().modes()
            )));
        }
        let n_max = joint.n_max();
        let ext_full = FockBasis::new(n_ext, n_max)?;
        let loop_basis = Arc::new(FockBasis::new(n_looped, n_max)?);
        let map = TensorIndexMap::new(&ext_full, &loop_basis, &joint)?;
        let mut split = vec![(0, 0); joint.dim()];
        for (ie, il, j) in map.iter() {
            split[j] = (ie, il);
        }
        let components = environment_components(rho_ext)?;
        let n_env = components.iter().flat_map(|c| c.amplitudes.iter().map(|(o, _)| o.total())).max().unwrap_or(0);
        if n_env > n_max {
            return Err(Error::TruncationOverflow {
                n_max,
                required: n_env,
                leaked: rho_ext.sector_weights()[n_max + 1..].iter().sum(),
            });
        }
        let parents = loop_basis
            .iter()
            .map(|l| {
                let k = (0..n_looped).find(|&k| l[k] > 0)?;
                let mut p = l.as_slice().to_vec();
                p[k] -= 1;
                Some((loop_basis.index_of(&OccupationVector::new(p)).expect("parent lies in the basis"), k))
            })
            .collect();
        Ok(Self { joint, ext_full, loop_basis, split, parents, components, n_env })
    }

    /// `Ũ|ψ_p, l⟩` for every loop state `l`, grouped by the photon number
    /// `p` of the component's parts; each vector lives on joint sector
    /// `p + |l|` and is `None` beyond the truncation.
    fn columns(&self, lifted: &LiftedUnitary, comp: &EnvComponent) -> Result<Vec<(usize, Vec<Option<CVector>>)>> {
        let n_looped = self.loop_basis.modes();
        let n_ext = self.joint.modes() - n_looped;
        let loop_vac = OccupationVector::vacuum(n_looped);
        let mut by_photons: Vec<(usize, CVector)> = Vec::new();
        for (occ, c) in &comp.amplitudes {
            let p = occ.total();
            let v = lifted.apply_to_state(&occ.concat(&loop_vac))? * *c;
            match by_photons.iter_mut().find(|(q, _)| *q == p) {
                Some((_, acc)) => *acc += v,
                None => by_photons.push((p, v)),
            }
        }
        let d_loop = self.loop_basis.dim();
        Ok(by_photons
            .into_iter()
            .map(|(p, base)| {
                let mut w: Vec<Option<CVector>> = vec![None; d_loop];
                for li in 0..d_loop {
                    let nl = self.loop_basis.photons_at(li);
                    if p + nl > self.joint.n_max() {
                        break;
                    }
                    w[li] = Some(match self.parents[li] {
                        None => base.clone(),
                        Some((parent, k)) => {
                            let lk = self.loop_basis.state(li)[k] as f64;
                            let v = w[parent].as_ref().expect("parents precede children");
                            lifted.create(n_ext + k, v, p + nl - 1) / Complex64::new(lk.sqrt(), 0.0)
                        }
                    });
                }
                (p, w)
            })
            .collect())
    }
}

struct EnvComponent {
    weight: f64,
    amplitudes: Vec<(OccupationVector, Complex64)>,
}

/// Spectral decomposition of `ρ_ext`, done per sector when `ρ_ext` has no
/// coherences between photon numbers so that every component has a definite
/// photon number.
fn environment_components(rho: &DensityMatrix) -> Result<Vec<EnvComponent>> {
    let b = rho.basis();
    let e = rho.entries();
    let sector_diagonal = (0..e.nrows())
        .all(|i| (0..e.ncols()).all(|j| b.photons_at(i) == b.photons_at(j) || e[(i, j)] == ZERO));
    let ranges: Vec<std::ops::Range<usize>> = if sector_diagonal {
        (0..=b.n_max()).map(|n| b.sector_range(n)).collect()
    } else {
        vec![0..b.dim()]
    };
    let mut out = Vec::new();
    for r in ranges {
        let blk = e.view((r.start, r.start), (r.len(), r.len())).into_owned();
        if blk.iter().all(|z| *z == ZERO) {
            continue;
        }
        let (vals, vecs) = hermitian_eigh(&blk);
        for (k, &lam) in vals.iter().enumerate() {
            if lam < EIGEN_CUTOFF {
                continue;
            }
            let amplitudes: Vec<(OccupationVector, Complex64)> = (0..r.len())
                .filter(|&i| vecs[(i, k)] != ZERO)
                .map(|i| (b.state(r.start + i).clone(), vecs[(i, k)]))
                .collect();
            out.push(EnvComponent { weight: lam, amplitudes });
        }
    }
    if out.is_empty() {
        return Err(Error::InvalidState("environment state has no eigenvalue above the cutoff".into()));
    }
    Ok(out)
}

/// Beam-splitter loss with the same power transmission on every mode.
pub fn loss_channel(transmission: f64, modes: usize, n_max: usize) -> Result<QuantumChannel> {
    loss_channel_per_mode(&vec![transmission; modes], n_max)
}

/// Beam-splitter loss with power transmission `t[i]` on mode `i`. Operators
/// are indexed by the lost photons `r`: `|n − r⟩⟨n|` with amplitude
/// `Π √(C(n_i, r_i) t_i^(n_i − r_i) (1 − t_i)^r_i)`.
pub fn loss_channel_per_mode(transmissions: &[f64], n_max: usize) -> Result<QuantumChannel> {
    if let Some(t) = transmissions.iter().find(|t| !(0.0..=1.0).contains(*t)) {
        return Err(Error::InvalidArgument(format!("transmission {t} outside [0, 1]")));
    }
    let basis = Arc::new(FockBasis::new(transmissions.len(), n_max)?);
    let amp = |n: usize, r: usize, t: f64| {
        (binomial(n, r) as f64 * t.powi((n - r) as i32) * (1.0 - t).powi(r as i32)).sqrt()
    };
    let mut ops = Vec::new();
    for lost in basis.iter() {
        let r = lost.total();
        let mut blocks = vec![None; n_max + 1];
        for (n, slot) in blocks.iter_mut().enumerate().skip(r) {
            let mut k = CMatrix::zeros(basis.sector(n - r).len(), basis.sector(n).len());
            for (col, s) in basis.sector(n).iter().enumerate() {
                if !s.dominates(lost) {
                    continue;
                }
                let a: f64 = (0..s.modes()).map(|q| amp(s[q], lost[q], transmissions[q])).product();
                if a == 0.0 {
                    continue;
                }
                let kept = OccupationVector::new((0..s.modes()).map(|q| s[q] - lost[q]).collect());
                k[(basis.rank_in_sector(&kept)?, col)] = Complex64::new(a, 0.0);
            }
            if !is_zero(&k) {
                *slot = Some(k);
            }
        }
        ops.push(KrausOperator { shift: Some(-(r as i64)), data: KrausData::Sectored(blocks) });
    }
    QuantumChannel::from_operators(basis, ops, n_max)
}

/// Index set of one coherence order `q`: the sector pairs `(a, b)` with
/// `a − b = q`, each stored column-major as one contiguous run.
#[derive(Debug, Clone)]
pub struct CoherenceLayout {
    q: i64,
    /// `(row sector, column sector, offset)`
    parts: Vec<(usize, usize, usize)>,
    /// Part index by column sector.
    by_column: Vec<Option<usize>>,
    len: usize,
}

impl CoherenceLayout {
    pub fn new(basis: &FockBasis, q: i64) -> Self {
        let n = basis.n_max() as i64;
        let mut parts = Vec::new();
        let mut by_column = vec![None; basis.n_max() + 1];
        let mut len = 0;
        for b in 0..=n {
            let a = b + q;
            if !(0..=n).contains(&a) {
                continue;
            }
            by_column[b as usize] = Some(parts.len());
            parts.push((a as usize, b as usize, len));
            len += basis.sector(a as usize).len() * basis.sector(b as usize).len();
        }
        Self { q, parts, by_column, len }
    }

    pub fn order(&self) -> i64 {
        self.q
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Matrix index `(row, column)` of every layout position.
    pub fn indices(&self, basis: &FockBasis) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len);
        for &(a, b, _) in &self.parts {
            let (ra, rb) = (basis.sector_range(a), basis.sector_range(b));
            for j in rb {
                for i in ra.clone() {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// The order-`q` part of a matrix.
    pub fn gather(&self, basis: &FockBasis, m: &CMatrix) -> CVector {
        CVector::from_iterator(self.len, self.indices(basis).into_iter().map(|(i, j)| m[(i, j)]))
    }

    /// A matrix holding `x` on the order-`q` entries and zero elsewhere.
    pub fn scatter(&self, basis: &FockBasis, x: &CVector) -> CMatrix {
        let d = basis.dim();
        let mut m = CMatrix::zeros(d, d);
        for (p, (i, j)) in self.indices(basis).into_iter().enumerate() {
            m[(i, j)] = x[p];
        }
        m
    }

    /// The superoperator of `channel` applied to an order-`q` vector.
    /// Requires definite shifts, under which orders never mix.
    pub fn apply(&self, channel: &QuantumChannel, x: &CVector) -> CVector {
        let basis = &channel.basis;
        let size = |n: usize| basis.sector(n).len();
        let n_max = basis.n_max() as i64;
        let partial: Vec<CVector> = channel
            .ops
            .par_chunks(KRAUS_CHUNK)
            .map(|chunk| {
                let mut y = CVector::zeros(self.len);
                for k in chunk {
                    let s = k.shift.expect("coherence layouts need definite shifts");
                    for &(a, b, off) in &self.parts {
                        let (ta, tb) = (a as i64 + s, b as i64 + s);
                        if !(0..=n_max).contains(&ta) || !(0..=n_max).contains(&tb) {
                            continue;
                        }
                        let (Some(ka), Some(kb)) = (k.block(a), k.block(b)) else { continue };
                        let xm = x.rows(off, size(a) * size(b));
                        let xm = xm.reshape_generic(nalgebra::Dyn(size(a)), nalgebra::Dyn(size(b)));
                        let out = ka * xm * kb.adjoint();
                        let p = self.by_column[tb as usize].expect("shifted pair stays in the layout");
                        let toff = self.parts[p].2;
                        let mut dst = y.rows_mut(toff, out.len());
                        dst += CVector::from_column_slice(out.as_slice());
                    }
                }
                y
            })
            .collect();
        let mut y = CVector::zeros(self.len);
        for p in partial {
            y += p;
        }
        y
    }
}

/// Restriction of the superoperator to coherence order `q`, with the matrix
/// index of each row. Requires definite shifts.
pub fn coherence_block(channel: &QuantumChannel, q: i64) -> (Vec<(usize, usize)>, CMatrix) {
    let layout = CoherenceLayout::new(&channel.basis, q);
    let g = dense_layout_operator(&layout, &[channel]);
    (layout.indices(&channel.basis), g)
}

/// The layout operator of a chain (applied first to last) as a dense matrix.
fn dense_layout_operator(layout: &CoherenceLayout, chain: &[&QuantumChannel]) -> CMatrix {
    let n = layout.len();
    let cols: Vec<CVector> = (0..n)
        .into_par_iter()
        .map(|c| {
            let mut x = CVector::zeros(n);
            x[c] = ONE;
            for ch in chain {
                x = layout.apply(ch, &x);
            }
            x
        })
        .collect();
    if cols.is_empty() {
        return CMatrix::zeros(0, 0);
    }
    CMatrix::from_columns(&cols)
}

/// Eigen-solver used for a fixed point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectralMethod {
    /// Dense eigen-decomposition of every coherence-order block.
    DenseBlocks,
    /// Dense eigen-decomposition of the whole superoperator.
    DenseSuperoperator,
    /// Matrix-free Arnoldi on the superoperator.
    Krylov,
}

#[derive(Debug, Clone)]
pub struct StationaryOptions {
    /// Measure the gap against all coherence orders rather than order zero.
    pub full_spectrum: bool,
    /// Largest order-zero block (or superoperator) solved densely.
    pub dense_max: usize,
    pub krylov_dim: usize,
    pub max_restarts: usize,
    /// Relative Arnoldi residual for the fixed point.
    pub tol: f64,
}

impl Default for StationaryOptions {
    fn default() -> Self {
        Self { full_spectrum: true, dense_max: 200, krylov_dim: 40, max_restarts: 500, tol: 1e-13 }
    }
}

/// Fixed point of a channel with its spectral diagnostics.
#[derive(Debug, Clone)]
pub struct StationaryState {
    pub state: DensityMatrix,
    /// Leading eigenvalue; `1 − |λ|` is the weight leaking out of the truncation per pass.
    pub eigenvalue: Complex64,
    /// Largest eigenvalue modulus after the leading one.
    pub second_modulus: f64,
    pub gap: f64,
    pub method: SpectralMethod,
}

impl StationaryState {
    pub fn leak(&self) -> f64 {
        1.0 - self.eigenvalue.norm()
    }
}

/// The unique fixed point of `channel`, restricted to its valid subspace.
pub fn stationary_state(channel: &QuantumChannel) -> Result<StationaryState> {
    stationary_chain(&[channel], &StationaryOptions::default())
}

/// Input photon bound up to which applying `chain[0]`, then `chain[1]`, ...
/// is complete.
pub fn chain_valid_max_photons(chain: &[&QuantumChannel]) -> usize {
    let mut valid = usize::MAX;
    let mut gain = 0;
    for ch in chain {
        valid = valid.min(ch.valid_max_photons.saturating_sub(gain));
        gain += ch.photon_gain();
    }
    valid
}

/// Fixed point of the composition that applies `chain[0]` first, restricted
/// to the chain's valid subspace.
///
/// With definite shifts the fixed point lies in coherence order zero and the
/// composite Kraus set is never formed. Dense solves measure the gap against
/// every order when `full_spectrum` is set. Arnoldi measures it against
/// orders zero and one: the order-`q` spectrum of a pass is bounded by the
/// `|q|`-th power of the order-one spectral radius, and the second modulus
/// of order zero is found by deflating the fixed point. Fails with
/// [`Error::NonUniqueStationary`] when the two leading moduli are closer
/// than `UNIQUENESS_GAP`.
pub fn stationary_chain(chain: &[&QuantumChannel], opts: &StationaryOptions) -> Result<StationaryState> {
    let first = chain.first().ok_or_else(|| Error::InvalidArgument("empty channel chain".into()))?;
    if chain.iter().any(|c| c.basis != first.basis) {
        return Err(Error::DimensionMismatch("chained channels act on different bases".into()));
    }
    let n_valid = chain_valid_max_photons(chain);
    let owned: Vec<QuantumChannel> = chain.iter().map(|c| c.restrict(n_valid)).collect::<Result<_>>()?;
    let chain: Vec<&QuantumChannel> = owned.iter().collect();
    let basis = chain[0].basis.clone();
    let d = basis.dim();

    let (lead, second, rho, method) = if chain.iter().all(|c| c.has_definite_shifts()) {
        let l0 = CoherenceLayout::new(&basis, 0);
        if l0.len() <= opts.dense_max {
            let g0 = dense_layout_operator(&l0, &chain);
            let (lead, mut second) = leading_pair(&eigenvalues(&g0)?);
            if opts.full_spectrum {
                // order −q has the conjugate spectrum of order q
                let others: Vec<f64> = (1..=basis.n_max() as i64)
                    .into_par_iter()
                    .map(|q| {
                        let g = dense_layout_operator(&CoherenceLayout::new(&basis, q), &chain);
                        Ok(eigenvalues(&g)?.iter().map(|z| z.norm()).fold(0.0, f64::max))
                    })
                    .collect::<Result<_>>()?;
                second = others.into_iter().fold(second, f64::max);
            }
            let (lam, v) = inverse_iteration(&g0, lead)?;
            (lam, second, l0.scatter(&basis, &v), SpectralMethod::DenseBlocks)
        } else {
            let op = |x: &CVector| chain.iter().fold(x.clone(), |acc, ch| l0.apply(ch, &acc));
            let start = l0.gather(&basis, &CMatrix::identity(d, d));
            let (lead, v, mut second) = krylov_leading_pair(&op, &start, opts)?;
            if opts.full_spectrum && basis.n_max() > 0 {
                let l1 = CoherenceLayout::new(&basis, 1);
                let op1 = |x: &CVector| chain.iter().fold(x.clone(), |acc, ch| l1.apply(ch, &acc));
                let start1 = CVector::from_fn(l1.len(), |i, _| Complex64::new(1.0, (i % 7) as f64 * 0.1));
                let r1 = arnoldi_leading(&op1, &start1, opts.krylov_dim, 1e-8, opts.max_restarts)?;
                second = second.max(r1.value.norm());
            }
            (lead, second, l0.scatter(&basis, &v), SpectralMethod::Krylov)
        }
    } else if d * d <= opts.dense_max {
        let mut g = chain[0].to_superoperator()?.matrix;
        for ch in &chain[1..] {
            g = ch.to_superoperator()?.matrix * g;
        }
        let (lead, second) = leading_pair(&eigenvalues(&g)?);
        let (lam, v) = inverse_iteration(&g, lead)?;
        (lam, second, unvec(&v, d, d)?, SpectralMethod::DenseSuperoperator)
    } else {
        let op = |x: &CVector| {
            let mut m = unvec(x, d, d).expect("square vector");
            for ch in &chain {
                m = ch.apply_unchecked(&m);
            }
            vec(&m)
        };
        let (lead, v, second) = krylov_leading_pair(&op, &vec(&CMatrix::identity(d, d)), opts)?;
        (lead, second, unvec(&v, d, d)?, SpectralMethod::Krylov)
    };
    let gap = lead.norm() - second;
    if gap < UNIQUENESS_GAP {
        return Err(Error::NonUniqueStationary { gap });
    }
    Ok(StationaryState { state: normalize_fixed_point(basis, rho)?, eigenvalue: lead, second_modulus: second, gap, method })
}

/// Leading eigenpair by Arnoldi, then the next modulus from the operator
/// with the leading direction deflated.
fn krylov_leading_pair(
    op: &(dyn Fn(&CVector) -> CVector + Sync),
    start: &CVector,
    opts: &StationaryOptions,
) -> Result<(Complex64, CVector, f64)> {
    let lead = arnoldi_leading(op, start, opts.krylov_dim, opts.tol, opts.max_restarts)?;
    let x = lead.vector.clone();
    let deflated = |v: &CVector| {
        let p = v - &x * x.dotc(v);
        let w = op(&p);
        &w - &x * x.dotc(&w)
    };
    let n = start.len();
    if n < 2 {
        return Ok((lead.value, lead.vector, 0.0));
    }
    let mut s = CVector::from_fn(n, |i, _| Complex64::new(((i * 7919) % 101) as f64 / 101.0 - 0.5, 0.0));
    s -= &x * x.dotc(&s);
    let second = arnoldi_leading(&deflated, &s, opts.krylov_dim, 1e-8, opts.max_restarts)?;
    Ok((lead.value, lead.vector, second.value.norm()))
}

/// Leading eigenvalue (largest modulus) and the next modulus.
fn leading_pair(vals: &[Complex64]) -> (Complex64, f64) {
    let mut sorted: Vec<Complex64> = vals.to_vec();
    sorted.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
    (sorted[0], sorted.get(1).map_or(0.0, |z| z.norm()))
}

/// Fixes the phase and scale of an eigenvector so it is a trace-one
/// Hermitian matrix.
fn normalize_fixed_point(basis: Arc<FockBasis>, rho: CMatrix) -> Result<DensityMatrix> {
    let tr = rho.trace();
    if tr.norm() < 1e-300 {
        return Err(Error::InvalidState("fixed point has zero trace".into()));
    }
    let rho = rho / tr;
    let rho = (&rho + rho.adjoint()) * Complex64::new(0.5, 0.0);
    let dm = DensityMatrix::from_raw(basis, rho)?;
    dm.validate()?;
    Ok(dm)
}

/// Repeated application of `channel` from `start` until successive iterates
/// differ by less than `tol` in max norm.
pub fn iterate_to_fixed_point(
    channel: &QuantumChannel,
    start: &DensityMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<(DensityMatrix, usize)> {
    let mut rho = start.entries().clone();
    for it in 1..=max_iter {
        let next = channel.apply_unchecked(&rho);
        let tr = next.trace();
        let next = next / tr;
        let delta = max_abs(&(&next - &rho));
        rho = next;
        if delta < tol {
            return Ok((DensityMatrix::from_raw(channel.basis.clone(), rho)?, it));
        }
    }
    Err(Error::NonConvergence { iterations: max_iter, residual: f64::NAN })
}

/// `vec(I)` as a column-stacked vector.
pub fn vec_identity(d: usize) -> CVector {
    let mut v = CVector::zeros(d * d);
    for i in 0..d {
        v[i + d * i] = ONE;
    }
    v
}
