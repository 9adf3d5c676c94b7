//! Normally ordered correlation tensors
//! `C^(k,l)[i₁..i_k, j₁..j_l] = ⟨a†_{i₁}…a†_{i_k} a_{j₁}…a_{j_l}⟩`, their
//! transformation under an interferometer and their stationary values in the
//! looped modes.
//!
//! Entries are stored flat, row-major over `(i₁..i_k, j₁..j_l)`. Under
//! `a_i → Σ_j U_ij a_j` every creation index contracts with `V = U*` and every
//! annihilation index with `V* = U`.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evolve::Experiment;
use crate::fock::OccupationVector;
use crate::matrixkit::{spectral_radius, CMatrix, UnitaryInterferometer, ONE, ZERO};
use crate::qstate::DensityMatrix;

/// Stationary tensors need `r(U_LL) < 1 − SPECTRAL_MARGIN`.
pub const SPECTRAL_MARGIN: f64 = 1e-10;
/// Largest Kronecker system solved densely.
pub const TENSOR_SYSTEM_MAX_DIM: usize = 4096;
pub const TENSOR_RESIDUAL_TOL: f64 = 1e-9;
/// Most negative photon-number variance accepted as rounding.
pub const VARIANCE_TOL: f64 = -1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationTensor {
    k: usize,
    l: usize,
    modes: usize,
    entries: Vec<Complex64>,
}

impl CorrelationTensor {
    pub fn new(k: usize, l: usize, modes: usize, entries: Vec<Complex64>) -> Result<Self> {
        let len = modes.pow((k + l) as u32);
        if entries.len() != len {
            return Err(Error::DimensionMismatch(format!(
                "{} entries for a ({k},{l}) tensor over {modes} modes",
                entries.len()
            )));
        }
        Ok(Self { k, l, modes, entries })
    }

    pub fn zeros(k: usize, l: usize, modes: usize) -> Self {
        Self { k, l, modes, entries: vec![ZERO; modes.pow((k + l) as u32)] }
    }

    /// The order-(0,0) tensor `⟨1⟩`.
    pub fn unit(modes: usize) -> Self {
        Self { k: 0, l: 0, modes, entries: vec![ONE] }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn rank(&self) -> usize {
        self.k + self.l
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[Complex64] {
        &self.entries
    }

    pub fn flat_index(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.rank());
        index.iter().fold(0, |acc, &i| acc * self.modes + i)
    }

    pub fn multi_index(&self, flat: usize) -> Vec<usize> {
        decode(flat, self.modes, self.rank())
    }

    pub fn get(&self, index: &[usize]) -> Complex64 {
        self.entries[self.flat_index(index)]
    }

    /// Entry whose creation and annihilation indices have the given
    /// per-mode multiplicities.
    pub fn by_counts(&self, creation: &OccupationVector, annihilation: &OccupationVector) -> Result<Complex64> {
        if creation.modes() != self.modes
            || annihilation.modes() != self.modes
            || creation.total() != self.k
            || annihilation.total() != self.l
        {
            return Err(Error::DimensionMismatch(format!(
                "counts {creation}/{annihilation} for a ({},{}) tensor over {} modes",
                self.k, self.l, self.modes
            )));
        }
        let index: Vec<usize> = expand(creation).into_iter().chain(expand(annihilation)).collect();
        Ok(self.get(&index))
    }

    /// `C^(l,k)[j⃗, i⃗] = conj(C^(k,l)[i⃗, j⃗])`.
    pub fn adjoint(&self) -> Self {
        let mut out = Self::zeros(self.l, self.k, self.modes);
        for (flat, z) in self.entries.iter().enumerate() {
            let idx = self.multi_index(flat);
            let swapped: Vec<usize> = idx[self.k..].iter().chain(&idx[..self.k]).copied().collect();
            let f = out.flat_index(&swapped);
            out.entries[f] = z.conj();
        }
        out
    }

    /// Block with every index in `modes`, relabelled from zero.
    pub fn restrict(&self, modes: Range<usize>) -> Result<Self> {
        if modes.end > self.modes {
            return Err(Error::DimensionMismatch(format!("modes {modes:?} of a {}-mode tensor", self.modes)));
        }
        let n = modes.len();
        let mut out = Self::zeros(self.k, self.l, n);
        for flat in 0..out.len() {
            let idx: Vec<usize> = out.multi_index(flat).into_iter().map(|i| i + modes.start).collect();
            out.entries[flat] = self.get(&idx);
        }
        Ok(out)
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        if (self.k, self.l, self.modes) != (other.k, other.l, other.modes) {
            return Err(Error::DimensionMismatch(format!(
                "({},{}) over {} vs ({},{}) over {}",
                self.k, self.l, self.modes, other.k, other.l, other.modes
            )));
        }
        Ok(self.entries.iter().zip(&other.entries).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max))
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn to_file(&self) -> TensorFile {
        TensorFile {
            k: self.k,
            l: self.l,
            modes: self.modes,
            re: self.entries.iter().map(|z| z.re).collect(),
            im: self.entries.iter().map(|z| z.im).collect(),
        }
    }
}

/// Serialized tensor: flat row-major entries over `(i₁..i_k, j₁..j_l)`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorFile {
    pub k: usize,
    pub l: usize,
    pub modes: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl TensorFile {
    pub fn to_tensor(&self) -> Result<CorrelationTensor> {
        if self.re.len() != self.im.len() {
            return Err(Error::DimensionMismatch("re and im arrays differ in length".into()));
        }
        let entries = self.re.iter().zip(&self.im).map(|(&r, &i)| Complex64::new(r, i)).collect();
        CorrelationTensor::new(self.k, self.l, self.modes, entries)
    }
}

fn decode(mut flat: usize, modes: usize, rank: usize) -> Vec<usize> {
    let mut idx = vec![0; rank];
    for slot in idx.iter_mut().rev() {
        *slot = flat % modes;
        flat /= modes;
    }
    idx
}

/// Sorted index tuple with the given multiplicities.
fn expand(counts: &OccupationVector) -> Vec<usize> {
    counts.as_slice().iter().enumerate().flat_map(|(i, &c)| std::iter::repeat_n(i, c)).collect()
}

fn counts(index: &[usize], modes: usize) -> Vec<usize> {
    let mut c = vec![0; modes];
    index.iter().for_each(|&i| c[i] += 1);
    c
}

/// `Π n_i! / (n_i − a_i)!`, zero unless `n ≥ a` componentwise.
pub fn falling_factorial(n: &[usize], a: &[usize]) -> f64 {
    n.iter()
        .zip(a)
        .map(|(&n, &a)| if a > n { 0.0 } else { (n - a + 1..=n).map(|x| x as f64).product::<f64>() })
        .product()
}

/// Tensors over one mode set, keyed by `(k, l)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSet {
    modes: usize,
    tensors: BTreeMap<(usize, usize), CorrelationTensor>,
}

impl TensorSet {
    /// A set holding only `C^(0,0) = 1`.
    pub fn new(modes: usize) -> Self {
        let mut tensors = BTreeMap::new();
        tensors.insert((0, 0), CorrelationTensor::unit(modes));
        Self { modes, tensors }
    }

    /// All tensors of `rho` with `k, l ≤ rank_cap`. The state is padded to
    /// the needed truncation, which is exact.
    pub fn from_state(rho: &DensityMatrix, rank_cap: usize) -> Result<Self> {
        let rho = if rho.basis().n_max() < rank_cap { rho.retruncate(rank_cap)? } else { rho.clone() };
        let mut set = Self::new(rho.basis().modes());
        let mut cache = HashMap::new();
        for k in 0..=rank_cap {
            for l in 0..=rank_cap {
                set.insert(expectations_cached(&rho, k, l, &mut cache)?)?;
            }
        }
        Ok(set)
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn insert(&mut self, t: CorrelationTensor) -> Result<()> {
        if t.modes != self.modes {
            return Err(Error::DimensionMismatch(format!("{}-mode tensor in a {}-mode set", t.modes, self.modes)));
        }
        self.tensors.insert((t.k, t.l), t);
        Ok(())
    }

    pub fn get(&self, k: usize, l: usize) -> Option<&CorrelationTensor> {
        self.tensors.get(&(k, l))
    }

    pub fn require(&self, k: usize, l: usize) -> Result<&CorrelationTensor> {
        self.get(k, l)
            .ok_or_else(|| Error::InvalidArgument(format!("tensor ({k},{l}) missing from a {}-mode set", self.modes)))
    }

    pub fn keys(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.tensors.keys().copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &CorrelationTensor> {
        self.tensors.values()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Largest `max(k, l)` present.
    pub fn rank_cap(&self) -> usize {
        self.keys().map(|(k, l)| k.max(l)).max().unwrap_or(0)
    }

    /// Entry of the moment `⟨a†^c a^a⟩` by per-mode multiplicities.
    pub fn moment(&self, creation: &OccupationVector, annihilation: &OccupationVector) -> Option<Complex64> {
        self.get(creation.total(), annihilation.total())?.by_counts(creation, annihilation).ok()
    }

    pub fn transform(&self, u: &CMatrix) -> Result<Self> {
        let mut out = Self { modes: u.nrows(), tensors: BTreeMap::new() };
        for t in self.iter() {
            out.insert(transform(t, u)?)?;
        }
        Ok(out)
    }

    /// Largest entrywise deviation over the keys of `self`.
    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        let mut worst: f64 = 0.0;
        for t in self.iter() {
            let o = other.require(t.k, t.l)?;
            worst = worst.max(t.max_abs_diff(o)?);
        }
        Ok(worst)
    }

    pub fn to_json(&self) -> String {
        let file = TensorSetFile { modes: self.modes, tensors: self.iter().map(CorrelationTensor::to_file).collect() };
        serde_json::to_string_pretty(&file).expect("tensor sets serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: TensorSetFile = serde_json::from_str(text)?;
        let mut set = Self { modes: file.modes, tensors: BTreeMap::new() };
        for t in &file.tensors {
            set.insert(t.to_tensor()?)?;
        }
        Ok(set)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorSetFile {
    pub modes: usize,
    pub tensors: Vec<TensorFile>,
}

/// `⟨a†^c a^a⟩ = Σ_{n ≥ a} ρ_{n,m} √(n!/(n−a)!) √(m!/(m−c)!)` with
/// `m = n − a + c`; terms with `m` outside the truncation vanish exactly.
pub fn moment(rho: &DensityMatrix, creation: &OccupationVector, annihilation: &OccupationVector) -> Result<Complex64> {
    let basis = rho.basis();
    if creation.modes() != basis.modes() || annihilation.modes() != basis.modes() {
        return Err(Error::DimensionMismatch(format!("moment counts over {} modes", creation.modes())));
    }
    let (c, a) = (creation.as_slice(), annihilation.as_slice());
    let mut sum = ZERO;
    for (i, n) in basis.iter().enumerate() {
        if !n.dominates(annihilation) || n.total() - a.iter().sum::<usize>() + creation.total() > basis.n_max() {
            continue;
        }
        let m: Vec<usize> = n.as_slice().iter().zip(a).zip(c).map(|((n, a), c)| n - a + c).collect();
        let w = (falling_factorial(n.as_slice(), a) * falling_factorial(&m, c)).sqrt();
        let j = basis.index_of(&OccupationVector::new(m))?;
        sum += rho.entries()[(i, j)] * w;
    }
    Ok(sum)
}

/// `Tr(ρ a†^{i⃗} a^{j⃗})` for every index tuple, by ladder action in the
/// truncated basis.
pub fn expectations_from_dm(rho: &DensityMatrix, k: usize, l: usize) -> Result<CorrelationTensor> {
    expectations_cached(rho, k, l, &mut HashMap::new())
}

type MomentCache = HashMap<(Vec<usize>, Vec<usize>), Complex64>;

fn expectations_cached(rho: &DensityMatrix, k: usize, l: usize, cache: &mut MomentCache) -> Result<CorrelationTensor> {
    let n_max = rho.basis().n_max();
    if k > n_max || l > n_max {
        return Err(Error::InvalidArgument(format!("tensor rank ({k},{l}) exceeds the truncation at {n_max} photons")));
    }
    let modes = rho.basis().modes();
    let mut t = CorrelationTensor::zeros(k, l, modes);
    for flat in 0..t.len() {
        let idx = t.multi_index(flat);
        let key = (counts(&idx[..k], modes), counts(&idx[k..], modes));
        let value = match cache.get(&key) {
            Some(v) => *v,
            None => {
                let v = moment(rho, &OccupationVector::new(key.0.clone()), &OccupationVector::new(key.1.clone()))?;
                cache.insert(key, v);
                v
            }
        };
        t.entries[flat] = value;
    }
    Ok(t)
}

/// Contracts each creation axis with `create` and each annihilation axis
/// with `annihilate`; both are `out × in` over the tensor's modes.
pub fn contract(c: &CorrelationTensor, create: &CMatrix, annihilate: &CMatrix) -> Result<CorrelationTensor> {
    if create.ncols() != c.modes || annihilate.ncols() != c.modes || create.nrows() != annihilate.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "contraction by {:?}/{:?} of a {}-mode tensor",
            create.shape(),
            annihilate.shape(),
            c.modes
        )));
    }
    let out_modes = create.nrows();
    let mut shape = vec![c.modes; c.rank()];
    let mut data = c.entries.clone();
    for axis in 0..c.rank() {
        let m = if axis < c.k { create } else { annihilate };
        let pre: usize = shape[..axis].iter().product();
        let post: usize = shape[axis + 1..].iter().product();
        let din = shape[axis];
        let mut out = vec![ZERO; pre * out_modes * post];
        for p in 0..pre {
            for o in 0..out_modes {
                let dst = (p * out_modes + o) * post;
                for i in 0..din {
                    let w = m[(o, i)];
                    if w == ZERO {
                        continue;
                    }
                    let src = (p * din + i) * post;
                    for s in 0..post {
                        out[dst + s] += w * data[src + s];
                    }
                }
            }
        }
        shape[axis] = out_modes;
        data = out;
    }
    CorrelationTensor::new(c.k, c.l, out_modes, data)
}

/// `V^{⊗k} C (V†)^{⊗l}` with `V = U*`.
pub fn transform(c: &CorrelationTensor, u: &CMatrix) -> Result<CorrelationTensor> {
    contract(c, &u.map(|z| z.conj()), u)
}

/// Refuses interferometers whose loop-to-loop block is not a strict
/// contraction.
pub fn check_spectral_radius(m: &UnitaryInterferometer) -> Result<f64> {
    let r = if m.n_looped() == 0 { 0.0 } else { spectral_radius(&m.block_ll())? };
    if r >= 1.0 - SPECTRAL_MARGIN {
        return Err(Error::SpectralRadius { radius: r });
    }
    Ok(r)
}

/// `C_L^(1) = (I − U_LL)^{-1} U_LE C_E^(1)` for the order-(0,1) tensor.
pub fn stationary_first_order(m: &UnitaryInterferometer, c_ext: &CorrelationTensor) -> Result<CorrelationTensor> {
    let (e, nl) = (m.n_external(), m.n_looped());
    if (c_ext.k, c_ext.l, c_ext.modes) != (0, 1, e) {
        return Err(Error::DimensionMismatch(format!(
            "first-order input must be (0,1) over {e} modes, got ({},{}) over {}",
            c_ext.k, c_ext.l, c_ext.modes
        )));
    }
    let a = CMatrix::identity(nl, nl) - m.block_ll();
    let rhs = m.block_le() * CMatrix::from_column_slice(e, 1, &c_ext.entries);
    let x = a.clone().lu().solve(&rhs).ok_or_else(|| Error::Singular("I − U_LL".into()))?;
    check_residual(&a, &x, &rhs)?;
    CorrelationTensor::new(0, 1, nl, x.as_slice().to_vec())
}

fn check_residual(a: &CMatrix, x: &CMatrix, rhs: &CMatrix) -> Result<()> {
    let r = (a * x - rhs).iter().map(|z| z.norm()).fold(0.0, f64::max);
    let scale = rhs.iter().map(|z| z.norm()).fold(1.0, f64::max);
    if !(r <= TENSOR_RESIDUAL_TOL * scale) {
        return Err(Error::Singular(format!("stationarity residual {r:.3e}")));
    }
    Ok(())
}

/// Input tensor of one pass over all modes (externals first) for the
/// product state `ρ_E ⊗ ρ_L`: index tuples split across E and L factor into
/// an E moment times an L moment. With `skip_pure_loop` the all-L block is
/// left at zero.
pub fn assemble_input(
    k: usize,
    l: usize,
    external: &TensorSet,
    looped: &TensorSet,
    skip_pure_loop: bool,
) -> Result<CorrelationTensor> {
    let e = external.modes();
    let modes = e + looped.modes();
    let mut out = CorrelationTensor::zeros(k, l, modes);
    let mut e_idx = Vec::with_capacity(k + l);
    let mut l_idx = Vec::with_capacity(k + l);
    for flat in 0..out.len() {
        let idx = out.multi_index(flat);
        e_idx.clear();
        l_idx.clear();
        let (mut ke, mut le) = (0, 0);
        // creation indices of each factor precede its annihilation indices
        for (pos, &i) in idx.iter().enumerate() {
            if i < e {
                e_idx.push(i);
                if pos < k {
                    ke += 1;
                } else {
                    le += 1;
                }
            } else {
                l_idx.push(i - e);
            }
        }
        if skip_pure_loop && e_idx.is_empty() {
            continue;
        }
        let ce = external.require(ke, le)?.get(&e_idx);
        if ce == ZERO {
            continue;
        }
        out.entries[flat] = ce * looped.require(k - ke, l - le)?.get(&l_idx);
    }
    Ok(out)
}

/// Rows `rows` of `M^{*}` and `M` for contracting a pass onto those outputs.
fn output_rows(m: &CMatrix, rows: Range<usize>) -> (CMatrix, CMatrix) {
    let u = m.rows(rows.start, rows.len()).into_owned();
    (u.map(|z| z.conj()), u)
}

/// Order-(k,l) tensor on output modes `rows` after one pass of `m` fed with
/// `external ⊗ looped`.
pub fn pass_tensor(
    m: &UnitaryInterferometer,
    k: usize,
    l: usize,
    external: &TensorSet,
    looped: &TensorSet,
    rows: Range<usize>,
) -> Result<CorrelationTensor> {
    check_split(m, external, looped)?;
    let input = assemble_input(k, l, external, looped, false)?;
    let (v, u) = output_rows(m.matrix(), rows);
    contract(&input, &v, &u)
}

/// Tensors on the detected outputs for every key in `keys`.
pub fn detected_tensors(
    m: &UnitaryInterferometer,
    external: &TensorSet,
    looped: &TensorSet,
    keys: &[(usize, usize)],
) -> Result<TensorSet> {
    let mut out = TensorSet::new(m.n_external());
    for &(k, l) in keys {
        out.insert(pass_tensor(m, k, l, external, looped, 0..m.n_external())?)?;
    }
    Ok(out)
}

fn check_split(m: &UnitaryInterferometer, external: &TensorSet, looped: &TensorSet) -> Result<()> {
    if external.modes() != m.n_external() || looped.modes() != m.n_looped() {
        return Err(Error::DimensionMismatch(format!(
            "tensor sets over {}+{} modes for a {}+{} split",
            external.modes(),
            looped.modes(),
            m.n_external(),
            m.n_looped()
        )));
    }
    Ok(())
}

/// Stationary `C_LL^(k,l)` from `vec C = [⊗_k V_LL ⊗_l V_LL*] vec C + vec S`,
/// with the source `S` built from `external` and the lower orders in
/// `looped`.
pub fn stationary_order(
    m: &UnitaryInterferometer,
    k: usize,
    l: usize,
    external: &TensorSet,
    looped: &TensorSet,
) -> Result<CorrelationTensor> {
    check_split(m, external, looped)?;
    check_spectral_radius(m)?;
    let (e, nl) = (m.n_external(), m.n_looped());
    let dim = nl.pow((k + l) as u32);
    if dim > TENSOR_SYSTEM_MAX_DIM {
        return Err(Error::TooLarge(format!("order ({k},{l}) over {nl} looped modes needs a {dim}-dimensional system")));
    }
    let input = assemble_input(k, l, external, looped, true)?;
    let (v, u) = output_rows(m.matrix(), e..e + nl);
    let source = contract(&input, &v, &u)?;

    let u_ll = m.block_ll();
    let v_ll = u_ll.map(|z| z.conj());
    let mut a = DMatrix::from_element(1, 1, ONE);
    for axis in 0..k + l {
        a = a.kronecker(if axis < k { &v_ll } else { &u_ll });
    }
    let system = CMatrix::identity(dim, dim) - a;
    let rhs = CMatrix::from_column_slice(dim, 1, &source.entries);
    let x = system.clone().lu().solve(&rhs).ok_or_else(|| Error::Singular(format!("order ({k},{l}) system")))?;
    check_residual(&system, &x, &rhs)?;
    CorrelationTensor::new(k, l, nl, x.as_slice().to_vec())
}

/// Stationary looped tensors for all `k, l ≤ rank_cap`, order by order:
/// `(n, m)` for `m ≤ n` is solved and `(m, n)` follows by conjugation.
pub fn recursive_stationary(m: &UnitaryInterferometer, rho_ext: &DensityMatrix, rank_cap: usize) -> Result<TensorSet> {
    if rank_cap == 0 {
        return Err(Error::InvalidArgument("rank cap must be at least 1".into()));
    }
    check_spectral_radius(m)?;
    let external = TensorSet::from_state(rho_ext, rank_cap)?;
    let mut looped = TensorSet::new(m.n_looped());
    for n in 1..=rank_cap {
        for k2 in 0..=n {
            let t = stationary_order(m, n, k2, &external, &looped)?;
            if k2 != n {
                looped.insert(t.adjoint())?;
            }
            looped.insert(t)?;
        }
    }
    Ok(looped)
}

/// Stationary looped tensors of an experiment, losses absorbed into
/// `T_out · U · T_in`.
pub fn stationary_tensors(exp: &Experiment, rank_cap: usize) -> Result<TensorSet> {
    recursive_stationary(&exp.effective_transfer_matrix()?, exp.rho_ext(), rank_cap)
}

/// Three-sigma photon ceiling `⌈Σ_i n_i + 3σ_i⌉` from `⟨a†_i a_i⟩` and
/// `⟨a†_i a†_i a_i a_i⟩`.
pub fn estimate_n_max(c11: &CorrelationTensor, c22: &CorrelationTensor) -> Result<usize> {
    if (c11.k, c11.l, c22.k, c22.l) != (1, 1, 2, 2) || c11.modes != c22.modes {
        return Err(Error::DimensionMismatch("estimate_n_max needs (1,1) and (2,2) tensors over one mode set".into()));
    }
    let mut total = 0.0;
    for i in 0..c11.modes {
        let n = c11.get(&[i, i]).re;
        let var = c22.get(&[i, i, i, i]).re + n - n * n;
        if var < VARIANCE_TOL {
            return Err(Error::InvalidState(format!("photon-number variance {var:.3e} in mode {i}")));
        }
        total += n + 3.0 * var.max(0.0).sqrt();
    }
    Ok((total - 1e-9).ceil().max(0.0) as usize)
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use proptest::prelude::*;

    use super::*;
    use crate::channels::{loss_channel_per_mode, StationaryOptions};
    use crate::evolve::{stationary_loop_state, Losses};
    use crate::fock::FockBasis;
    use crate::lift::lift;
    use crate::matrixkit::haar_random_unitary;
    use crate::qstate::{fock_state_dm, random_density_matrix};

    fn basis(modes: usize, n: usize) -> Arc<FockBasis> {
        Arc::new(FockBasis::new(modes, n).unwrap())
    }

    fn fock(occ: &[usize], n_max: usize) -> DensityMatrix {
        fock_state_dm(basis(occ.len(), n_max), &OccupationVector::new(occ.to_vec())).unwrap()
    }

    /// Dense annihilation operator of `mode` in the truncated basis.
    fn ladder(b: &FockBasis, mode: usize) -> CMatrix {
        let mut a = CMatrix::zeros(b.dim(), b.dim());
        for (j, s) in b.iter().enumerate() {
            if s[mode] > 0 {
                let mut t = s.as_slice().to_vec();
                t[mode] -= 1;
                let i = b.index_of(&OccupationVector::new(t)).unwrap();
                a[(i, j)] = Complex64::new((s[mode] as f64).sqrt(), 0.0);
            }
        }
        a
    }

    /// `Tr(ρ (a_{i⃗})† a_{j⃗})` from dense operator products; annihilators
    /// never leave the truncated space, so this is exact.
    fn dense_moment(rho: &DensityMatrix, i: &[usize], j: &[usize]) -> Complex64 {
        let b = rho.basis();
        let ops: Vec<CMatrix> = (0..b.modes()).map(|m| ladder(b, m)).collect();
        let word = |idx: &[usize]| idx.iter().fold(CMatrix::identity(b.dim(), b.dim()), |acc, &m| acc * &ops[m]);
        (rho.entries() * word(i).adjoint() * word(j)).trace()
    }

    fn stationary_dm(exp: &Experiment) -> DensityMatrix {
        stationary_loop_state(exp, &StationaryOptions::default()).unwrap().stationary.state
    }

    #[test]
    fn vacuum_tensors_vanish() {
        let set = TensorSet::from_state(&DensityMatrix::vacuum(basis(2, 2)), 2).unwrap();
        for t in set.iter().filter(|t| t.rank() > 0) {
            assert_eq!(t.max_abs(), 0.0);
        }
        assert_eq!(set.require(0, 0).unwrap().get(&[]), ONE);
    }

    #[test]
    fn single_photon_moments() {
        let rho = fock(&[1], 1);
        assert!((expectations_from_dm(&rho, 1, 1).unwrap().get(&[0, 0]) - ONE).norm() < 1e-15);
        assert_eq!(expectations_from_dm(&rho, 0, 1).unwrap().get(&[0]), ZERO);
        assert!(expectations_from_dm(&rho, 2, 0).is_err());
    }

    #[test]
    fn diagonal_moments_are_falling_factorials() {
        let p = [0.4, 0.3, 0.2, 0.1];
        let rho = DensityMatrix::new(
            basis(1, 3),
            CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(4, p.iter().map(|&x| Complex64::new(x, 0.0)))),
        )
        .unwrap();
        for n in 0..=3usize {
            let expected: f64 = (n..4).map(|m| p[m] * (m - n + 1..=m).map(|x| x as f64).product::<f64>()).sum();
            let c = expectations_from_dm(&rho, n, n).unwrap();
            assert!((c.get(&vec![0; 2 * n]).re - expected).abs() < 1e-14);
        }
    }

    #[test]
    fn ladder_action_matches_dense_operators() {
        let rho = random_density_matrix(basis(2, 3), 11);
        for k in 0..=2 {
            for l in 0..=2 {
                let t = expectations_from_dm(&rho, k, l).unwrap();
                for flat in 0..t.len() {
                    let idx = t.multi_index(flat);
                    let d = dense_moment(&rho, &idx[..k], &idx[k..]);
                    assert!((t.entries()[flat] - d).norm() < 1e-12, "({k},{l}) {idx:?}");
                }
                let adj = expectations_from_dm(&rho, l, k).unwrap();
                assert!(t.adjoint().max_abs_diff(&adj).unwrap() < 1e-13);
            }
        }
    }

    #[test]
    fn transform_low_rank_cases() {
        let rho = random_density_matrix(basis(2, 2), 3);
        let c = expectations_from_dm(&rho, 1, 1).unwrap();
        assert_eq!(transform(&c, &CMatrix::identity(2, 2)).unwrap(), c);

        let u = haar_random_unitary(2, 4).matrix().clone();
        let v = u.map(|z| z.conj());
        let direct = &v * CMatrix::from_row_slice(2, 2, c.entries()) * v.adjoint();
        let t = transform(&c, &u).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((t.get(&[i, j]) - direct[(i, j)]).norm() < 1e-14);
            }
        }
        let c1 = expectations_from_dm(&rho, 0, 1).unwrap();
        let direct1 = &u * CMatrix::from_column_slice(2, 1, c1.entries());
        let t1 = transform(&c1, &u).unwrap();
        assert!((t1.get(&[1]) - direct1[1]).norm() < 1e-14);
    }

    #[test]
    fn transform_matches_evolved_state() {
        let b = basis(3, 3);
        let rho = random_density_matrix(b.clone(), 21);
        let u = haar_random_unitary(3, 22).matrix().clone();
        let evolved = DensityMatrix::new(b.clone(), lift(&u, b).unwrap().conjugate(rho.entries()).unwrap()).unwrap();
        for (k, l) in [(2, 1), (1, 2), (2, 2), (0, 3)] {
            let via_tensor = transform(&expectations_from_dm(&rho, k, l).unwrap(), &u).unwrap();
            let via_state = expectations_from_dm(&evolved, k, l).unwrap();
            assert!(via_tensor.max_abs_diff(&via_state).unwrap() < 1e-12, "({k},{l})");
        }
    }

    #[test]
    fn lossy_transform_matches_channel_route() {
        let b = basis(2, 3);
        let rho = random_density_matrix(b.clone(), 31);
        let u = haar_random_unitary(2, 32).matrix().clone();
        let (t_in, t_out) = ([0.9, 0.7], [0.8, 0.95]);
        let power = |t: &[f64; 2]| t.iter().map(|x| x * x).collect::<Vec<_>>();
        let mut r = loss_channel_per_mode(&power(&t_in), 3).unwrap().apply(&rho).unwrap();
        r = DensityMatrix::new(b.clone(), lift(&u, b).unwrap().conjugate(r.entries()).unwrap()).unwrap();
        r = loss_channel_per_mode(&power(&t_out), 3).unwrap().apply(&r).unwrap();
        let m = CMatrix::from_fn(2, 2, |i, j| u[(i, j)] * t_out[i] * t_in[j]);
        for (k, l) in [(0, 1), (1, 0), (1, 1), (2, 0), (0, 2), (2, 1), (1, 2), (2, 2)] {
            let via_tensor = transform(&expectations_from_dm(&rho, k, l).unwrap(), &m).unwrap();
            let via_channel = expectations_from_dm(&r, k, l).unwrap();
            assert!(via_tensor.max_abs_diff(&via_channel).unwrap() < 1e-8, "({k},{l})");
        }
    }

    #[test]
    fn first_order_cases() {
        let u = haar_random_unitary(2, 5).with_looped(1).unwrap();
        let fock_in = TensorSet::from_state(&fock(&[1], 1), 1).unwrap();
        let c = stationary_first_order(&u, fock_in.require(0, 1).unwrap()).unwrap();
        assert_eq!(c.max_abs(), 0.0);

        let ce = CorrelationTensor::new(0, 1, 1, vec![Complex64::new(0.3, -0.2)]).unwrap();
        let c = stationary_first_order(&u, &ce).unwrap();
        let (t, r) = (u.matrix()[(1, 0)], u.matrix()[(1, 1)]);
        assert!((c.get(&[0]) - t * ce.get(&[0]) / (ONE - r)).norm() < 1e-14);

        // two loops: 500 steps of c ← U_LL c + U_LE c_E
        let m = (haar_random_unitary(4, 6).matrix() * Complex64::new(0.8, 0.0)).clone();
        let m = UnitaryInterferometer::new_lossy(m, 2).unwrap();
        let ce = CorrelationTensor::new(0, 1, 2, vec![Complex64::new(0.5, 0.1), Complex64::new(-0.2, 0.4)]).unwrap();
        let ce_col = CMatrix::from_column_slice(2, 1, ce.entries());
        let mut x = CMatrix::zeros(2, 1);
        for _ in 0..500 {
            x = m.block_ll() * &x + m.block_le() * &ce_col;
        }
        let c = stationary_first_order(&m, &ce).unwrap();
        assert!((c.get(&[0]) - x[0]).norm() < 1e-12 && (c.get(&[1]) - x[1]).norm() < 1e-12);
    }

    #[test]
    fn rank_one_cap_reduces_to_first_order() {
        let u = haar_random_unitary(3, 8).with_looped(1).unwrap();
        let rho = random_density_matrix(basis(2, 1), 9);
        let set = recursive_stationary(&u, &rho, 1).unwrap();
        let direct = stationary_first_order(&u, &expectations_from_dm(&rho, 0, 1).unwrap()).unwrap();
        assert!(set.require(0, 1).unwrap().max_abs_diff(&direct).unwrap() < 1e-14);
        assert!(set.require(1, 0).unwrap().max_abs_diff(&direct.adjoint()).unwrap() < 1e-14);
    }

    #[test]
    fn second_order_photon_number_matches_superoperator() {
        let exp = Experiment::new(haar_random_unitary(2, 12).with_looped(1).unwrap(), fock(&[1], 1), 1).unwrap();
        let set = stationary_tensors(&exp, 1).unwrap();
        let truth = expectations_from_dm(&stationary_dm(&exp), 1, 1).unwrap();
        let c11 = set.require(1, 1).unwrap();
        assert!(c11.max_abs_diff(&truth).unwrap() < 1e-8);
        assert!(c11.get(&[0, 0]).im.abs() < 1e-12);
    }

    #[test]
    fn second_order_is_hermitian() {
        let u = haar_random_unitary(4, 13).with_looped(2).unwrap();
        let set = recursive_stationary(&u, &random_density_matrix(basis(2, 2), 14), 1).unwrap();
        let c = set.require(1, 1).unwrap();
        assert!(c.max_abs_diff(&c.adjoint()).unwrap() < 1e-10);
    }

    #[test]
    fn vacuum_input_has_vanishing_stationary_tensors() {
        let u = haar_random_unitary(3, 15).with_looped(2).unwrap();
        let set = recursive_stationary(&u, &DensityMatrix::vacuum(basis(1, 1)), 3).unwrap();
        assert!(set.iter().filter(|t| t.rank() > 0).all(|t| t.max_abs() == 0.0));
    }

    #[test]
    fn recursive_tensors_match_superoperator_to_rank_four() {
        // an input with coherences between photon numbers exercises the
        // factorized E/L cross terms
        let rho = random_density_matrix(basis(1, 1), 16);
        let exp = Experiment::new(haar_random_unitary(2, 17).with_looped(1).unwrap(), rho, 1).unwrap();
        let set = stationary_tensors(&exp, 4).unwrap();
        let truth = TensorSet::from_state(&stationary_dm(&exp), 4).unwrap();
        assert!(set.max_abs_diff(&truth).unwrap() < 1e-7);
    }

    #[test]
    fn lossy_recursive_tensors_match_superoperator() {
        let exp = Experiment::new(haar_random_unitary(2, 18).with_looped(1).unwrap(), fock(&[2], 2), 1)
            .unwrap()
            .with_losses(Losses { t_in: vec![0.8, 0.9], t_out: vec![0.95, 0.85], loop_t: 0.9 })
            .unwrap();
        let set = stationary_tensors(&exp, 3).unwrap();
        let truth = TensorSet::from_state(&stationary_dm(&exp), 3).unwrap();
        assert!(set.max_abs_diff(&truth).unwrap() < 1e-7);
    }

    #[test]
    fn two_loop_tensors_match_superoperator() {
        let rho = random_density_matrix(basis(1, 1), 19);
        let exp = Experiment::new(haar_random_unitary(3, 1010).with_looped(2).unwrap(), rho, 1).unwrap();
        let set = stationary_tensors(&exp, 2).unwrap();
        let truth = TensorSet::from_state(&stationary_dm(&exp), 2).unwrap();
        assert!(set.max_abs_diff(&truth).unwrap() < 1e-7);
    }

    #[test]
    fn stationary_tensors_are_fixed_by_one_pass() {
        let m = haar_random_unitary(4, 20).with_looped(2).unwrap();
        let rho = random_density_matrix(basis(2, 2), 21);
        let looped = recursive_stationary(&m, &rho, 2).unwrap();
        let external = TensorSet::from_state(&rho, 2).unwrap();
        for c in looped.iter() {
            let again = pass_tensor(&m, c.k(), c.l(), &external, &looped, 2..4).unwrap();
            assert!(again.max_abs_diff(c).unwrap() < 1e-9, "({},{})", c.k(), c.l());
        }
    }

    #[test]
    fn unitary_loop_block_is_refused() {
        let mut u = CMatrix::identity(3, 3);
        u[(2, 2)] = Complex64::new(0.0, 1.0);
        let m = UnitaryInterferometer::new(u, 1).unwrap();
        let err = recursive_stationary(&m, &fock(&[1, 1], 2), 2).unwrap_err();
        assert!(matches!(err, Error::SpectralRadius { radius } if (radius - 1.0).abs() < 1e-12));
    }

    #[test]
    fn oversized_systems_are_refused() {
        let m = haar_random_unitary(5, 2).with_looped(4).unwrap();
        let err = stationary_order(&m, 3, 4, &TensorSet::new(1), &TensorSet::new(4)).unwrap_err();
        assert!(matches!(err, Error::TooLarge(_)));
    }

    #[test]
    fn three_sigma_ceiling() {
        let vac = TensorSet::from_state(&DensityMatrix::vacuum(basis(2, 1)), 2).unwrap();
        assert_eq!(estimate_n_max(vac.require(1, 1).unwrap(), vac.require(2, 2).unwrap()).unwrap(), 0);
        let one = TensorSet::from_state(&fock(&[1], 1), 2).unwrap();
        assert_eq!(estimate_n_max(one.require(1, 1).unwrap(), one.require(2, 2).unwrap()).unwrap(), 1);

        let exp = Experiment::new(haar_random_unitary(2, 12).with_looped(1).unwrap(), fock(&[1], 1), 1).unwrap();
        let set = stationary_tensors(&exp, 2).unwrap();
        let est = estimate_n_max(set.require(1, 1).unwrap(), set.require(2, 2).unwrap()).unwrap();
        let w = stationary_dm(&exp).sector_weights();
        let mean: f64 = w.iter().enumerate().map(|(n, p)| n as f64 * p).sum();
        let var: f64 = w.iter().enumerate().map(|(n, p)| (n as f64 - mean).powi(2) * p).sum();
        assert_eq!(est, (mean + 3.0 * var.sqrt() - 1e-9).ceil() as usize);
        let tail: f64 = w.iter().skip(est + 1).sum();
        assert!(tail < 1.0 / 9.0);
    }

    #[test]
    fn inconsistent_moments_are_rejected() {
        let c11 = CorrelationTensor::new(1, 1, 1, vec![Complex64::new(1.0, 0.0)]).unwrap();
        let c22 = CorrelationTensor::new(2, 2, 1, vec![Complex64::new(-0.5, 0.0)]).unwrap();
        assert!(matches!(estimate_n_max(&c11, &c22), Err(Error::InvalidState(_))));
    }

    #[test]
    fn json_round_trip() {
        let set = TensorSet::from_state(&random_density_matrix(basis(2, 2), 23), 2).unwrap();
        assert_eq!(TensorSet::from_json(&set.to_json()).unwrap(), set);
    }

    proptest! {
        #[test]
        fn transform_preserves_group_symmetry(seed in 0u64..500) {
            let rho = random_density_matrix(basis(3, 2), seed);
            let u = haar_random_unitary(3, seed + 1).matrix().clone();
            let t = transform(&expectations_from_dm(&rho, 2, 2).unwrap(), &u).unwrap();
            for flat in 0..t.len() {
                let idx = t.multi_index(flat);
                let swapped = [idx[1], idx[0], idx[3], idx[2]];
                prop_assert!((t.get(&idx) - t.get(&swapped)).norm() < 1e-13);
            }
            let adj = transform(&expectations_from_dm(&rho, 2, 2).unwrap().adjoint(), &u).unwrap();
            prop_assert!(t.adjoint().max_abs_diff(&adj).unwrap() < 1e-13);
        }
    }
}
