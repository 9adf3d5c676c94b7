//! Fock basis enumeration and indexing.
//!
//! States of `M` modes holding `0..=n_max` photons are numbered by increasing
//! total photon number, and lexicographically (ascending) inside each sector:
//!
//! ```text
//! M = 3, n = 2:  (0,0,2) (0,1,1) (0,2,0) (1,0,1) (1,1,0) (2,0,0)
//! ```
//!
//! All indices are 0-based.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest basis [`FockBasis::new`] will enumerate.
pub const MAX_BASIS_DIM: usize = 2_000_000;

/// Photon counts per mode.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OccupationVector(Vec<usize>);

impl OccupationVector {
    pub fn new(occupations: Vec<usize>) -> Self {
        Self(occupations)
    }

    pub fn vacuum(modes: usize) -> Self {
        Self(vec![0; modes])
    }

    /// Single photon in `mode`.
    pub fn unit(modes: usize, mode: usize) -> Self {
        let mut occ = vec![0; modes];
        occ[mode] = 1;
        Self(occ)
    }

    pub fn modes(&self) -> usize {
        self.0.len()
    }

    pub fn total(&self) -> usize {
        self.0.iter().sum()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<usize> {
        self.0
    }

    /// `prod_k n_k!`
    pub fn factorial_product(&self) -> f64 {
        self.0.iter().map(|&n| factorial(n)).product()
    }

    /// Concatenation `self ⊗ other`, with `self` in the leading modes.
    pub fn concat(&self, other: &OccupationVector) -> OccupationVector {
        let mut occ = Vec::with_capacity(self.0.len() + other.0.len());
        occ.extend_from_slice(&self.0);
        occ.extend_from_slice(&other.0);
        OccupationVector(occ)
    }

    /// Splits into the leading `at` modes and the rest.
    pub fn split_at(&self, at: usize) -> (OccupationVector, OccupationVector) {
        let (a, b) = self.0.split_at(at);
        (OccupationVector(a.to_vec()), OccupationVector(b.to_vec()))
    }

    /// Componentwise `self >= other`.
    pub fn dominates(&self, other: &OccupationVector) -> bool {
        self.0.len() == other.0.len() && self.0.iter().zip(&other.0).all(|(a, b)| a >= b)
    }
}

impl std::ops::Index<usize> for OccupationVector {
    type Output = usize;
    fn index(&self, i: usize) -> &usize {
        &self.0[i]
    }
}

impl From<Vec<usize>> for OccupationVector {
    fn from(v: Vec<usize>) -> Self {
        Self(v)
    }
}

impl fmt::Display for OccupationVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "|")?;
        for (i, n) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{n}")?;
        }
        write!(f, "⟩")
    }
}

pub fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// `binom(n, k)` as an exact integer.
pub fn binomial(n: usize, k: usize) -> usize {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as usize
}

/// Number of states with `n` photons in `modes` modes: `binom(M+n-1, n)`.
/// Zero modes hold only the vacuum.
pub fn sector_size(modes: usize, n: usize) -> usize {
    if modes == 0 {
        return usize::from(n == 0);
    }
    binomial(modes + n - 1, n)
}

/// Dimension of the truncated space: `binom(M+n_max, n_max)`.
pub fn total_size(modes: usize, n_max: usize) -> usize {
    binomial(modes + n_max, n_max)
}

/// Iterates all occupation vectors of a sector in ascending lexicographic order.
///
/// The successor of a composition moves one photon out of the last nonzero mode
/// into the mode just before it, gathering everything after that into the last
/// mode.
#[derive(Debug, Clone)]
pub struct SectorIter {
    current: Option<Vec<usize>>,
}

impl SectorIter {
    pub fn new(modes: usize, n: usize) -> Self {
        if modes == 0 {
            return Self { current: (n == 0).then(Vec::new) };
        }
        let mut first = vec![0; modes];
        first[modes - 1] = n;
        Self { current: Some(first) }
    }
}

impl Iterator for SectorIter {
    type Item = OccupationVector;

    fn next(&mut self) -> Option<OccupationVector> {
        let cur = self.current.take()?;
        let m = cur.len();
        if m == 0 {
            return Some(OccupationVector(cur));
        }
        let mut after = 0;
        for j in (0..m - 1).rev() {
            after += cur[j + 1];
            if after > 0 {
                let mut next = cur.clone();
                next[j] += 1;
                next[j + 1..].iter_mut().for_each(|x| *x = 0);
                next[m - 1] = after - 1;
                self.current = Some(next);
                break;
            }
        }
        Some(OccupationVector(cur))
    }
}

/// All occupation vectors with `n` photons in `modes` modes, ascending.
pub fn enumerate_sector(modes: usize, n: usize) -> Vec<OccupationVector> {
    SectorIter::new(modes, n).collect()
}

/// Truncated Fock basis over `modes` modes with `0..=n_max` photons.
#[derive(Debug, Clone)]
pub struct FockBasis {
    modes: usize,
    n_max: usize,
    sectors: Vec<Vec<OccupationVector>>,
    offsets: Vec<usize>,
    lookup: HashMap<OccupationVector, usize>,
}

impl PartialEq for FockBasis {
    fn eq(&self, other: &Self) -> bool {
        self.modes == other.modes && self.n_max == other.n_max
    }
}

impl Eq for FockBasis {}

impl FockBasis {
    pub fn new(modes: usize, n_max: usize) -> Result<Self> {
        if total_size(modes, n_max) > MAX_BASIS_DIM {
            return Err(Error::TooLarge(format!(
                "Fock basis with {modes} modes and {n_max} photons has {} states (limit {MAX_BASIS_DIM})",
                total_size(modes, n_max)
            )));
        }
        let sectors: Vec<Vec<OccupationVector>> = (0..=n_max).map(|n| enumerate_sector(modes, n)).collect();
        let mut offsets = Vec::with_capacity(n_max + 2);
        let mut acc = 0;
        for s in &sectors {
            offsets.push(acc);
            acc += s.len();
        }
        offsets.push(acc);
        let lookup = sectors
            .iter()
            .flatten()
            .enumerate()
            .map(|(i, occ)| (occ.clone(), i))
            .collect();
        Ok(Self { modes, n_max, sectors, offsets, lookup })
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    pub fn n_max(&self) -> usize {
        self.n_max
    }

    pub fn dim(&self) -> usize {
        self.offsets[self.n_max + 1]
    }

    pub fn sector(&self, n: usize) -> &[OccupationVector] {
        &self.sectors[n]
    }

    /// Global index of the first state with `n` photons.
    pub fn sector_offset(&self, n: usize) -> usize {
        self.offsets[n]
    }

    /// Global index range of sector `n`.
    pub fn sector_range(&self, n: usize) -> std::ops::Range<usize> {
        self.offsets[n]..self.offsets[n + 1]
    }

    pub fn state(&self, index: usize) -> &OccupationVector {
        let n = self.photons_at(index);
        &self.sectors[n][index - self.offsets[n]]
    }

    /// Photon number of the state at a global index.
    pub fn photons_at(&self, index: usize) -> usize {
        debug_assert!(index < self.dim());
        self.offsets.partition_point(|&o| o <= index) - 1
    }

    pub fn iter(&self) -> impl Iterator<Item = &OccupationVector> {
        self.sectors.iter().flatten()
    }

    pub fn index_of(&self, state: &OccupationVector) -> Result<usize> {
        if state.modes() != self.modes {
            return Err(Error::DimensionMismatch(format!(
                "state {state} has {} modes, basis has {}",
                state.modes(),
                self.modes
            )));
        }
        self.lookup.get(state).copied().ok_or_else(|| Error::OutOfBasis {
            state: state.as_slice().to_vec(),
            n_max: self.n_max,
        })
    }

    pub fn rank_in_sector(&self, state: &OccupationVector) -> Result<usize> {
        let idx = self.index_of(state)?;
        Ok(idx - self.offsets[state.total()])
    }

    pub fn contains(&self, state: &OccupationVector) -> bool {
        self.lookup.contains_key(state)
    }
}

/// Index map from pairs of subsystem states to the joint basis.
///
/// Subsystem A occupies the leading modes of the joint basis. Pairs whose
/// concatenation exceeds the joint truncation map to `None`.
#[derive(Debug, Clone)]
pub struct TensorIndexMap {
    dim_a: usize,
    dim_b: usize,
    joint: Vec<Option<usize>>,
}

impl TensorIndexMap {
    pub fn new(a: &FockBasis, b: &FockBasis, joint: &FockBasis) -> Result<Self> {
        if joint.modes() != a.modes() + b.modes() {
            return Err(Error::DimensionMismatch(format!(
                "joint basis has {} modes, subsystems have {} + {}",
                joint.modes(),
                a.modes(),
                b.modes()
            )));
        }
        let mut map = Vec::with_capacity(a.dim() * b.dim());
        for sa in a.iter() {
            for sb in b.iter() {
                let cat = sa.concat(sb);
                map.push(joint.lookup.get(&cat).copied());
            }
        }
        Ok(Self { dim_a: a.dim(), dim_b: b.dim(), joint: map })
    }

    pub fn get(&self, index_a: usize, index_b: usize) -> Option<usize> {
        self.joint[index_a * self.dim_b + index_b]
    }

    /// Like [`get`](Self::get) but reports pairs beyond the joint truncation.
    pub fn joint_index(&self, a: &FockBasis, b: &FockBasis, ia: usize, ib: usize) -> Result<usize> {
        self.get(ia, ib).ok_or_else(|| Error::OutOfBasis {
            state: a.state(ia).concat(b.state(ib)).into_inner(),
            n_max: a.n_max().max(b.n_max()),
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dim_a, self.dim_b)
    }

    /// All mapped `(index_a, index_b, index_joint)` triples.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        self.joint
            .iter()
            .enumerate()
            .filter_map(move |(k, j)| j.map(|j| (k / self.dim_b, k % self.dim_b, j)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn occ(v: &[usize]) -> OccupationVector {
        OccupationVector::new(v.to_vec())
    }

    // brute-force enumeration of all length-m tuples summing to n
    fn brute_sector(m: usize, n: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut cur = vec![0; m];
        fn rec(pos: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
            if pos == cur.len() - 1 {
                cur[pos] = left;
                out.push(cur.clone());
                return;
            }
            for k in 0..=left {
                cur[pos] = k;
                rec(pos + 1, left - k, cur, out);
            }
        }
        rec(0, n, &mut cur, &mut out);
        out.sort();
        out
    }

    #[test]
    fn sector_sizes() {
        assert_eq!(sector_size(3, 2), 6);
        assert_eq!(sector_size(5, 0), 1);
        assert_eq!(brute_sector(4, 3).len(), 20);
        assert_eq!(sector_size(4, 3), 20);
        assert_eq!(sector_size(0, 2), 0);
        assert_eq!(sector_size(0, 0), 1);
        assert_eq!(total_size(0, 3), 1);
    }

    #[test]
    fn total_sizes() {
        assert_eq!(total_size(3, 2), 10);
        assert_eq!(total_size(1, 5), 6);
        assert_eq!(total_size(2, 1), 3);
        for m in 1..=6 {
            for n in 0..=6 {
                let sum: usize = (0..=n).map(|k| sector_size(m, k)).sum();
                assert_eq!(sum, total_size(m, n));
            }
        }
    }

    #[test]
    fn enumeration_order_matches_listing() {
        let s = enumerate_sector(3, 2);
        let expect = [[0, 0, 2], [0, 1, 1], [0, 2, 0], [1, 0, 1], [1, 1, 0], [2, 0, 0]];
        assert_eq!(s, expect.iter().map(|v| occ(v)).collect::<Vec<_>>());
        assert_eq!(enumerate_sector(1, 4), vec![occ(&[4])]);
        assert_eq!(enumerate_sector(2, 2), vec![occ(&[0, 2]), occ(&[1, 1]), occ(&[2, 0])]);
    }

    #[test]
    fn enumeration_matches_brute_force() {
        for m in 1..=5 {
            for n in 0..=5 {
                let got: Vec<Vec<usize>> =
                    enumerate_sector(m, n).into_iter().map(|o| o.into_inner()).collect();
                assert_eq!(got, brute_sector(m, n), "m={m} n={n}");
            }
        }
    }

    #[test]
    fn zero_mode_basis_is_vacuum_only() {
        let b = FockBasis::new(0, 3).unwrap();
        assert_eq!(b.dim(), 1);
        assert_eq!(b.photons_at(0), 0);
        assert_eq!(b.index_of(&occ(&[])).unwrap(), 0);
        let joint = FockBasis::new(2, 3).unwrap();
        let a = FockBasis::new(2, 3).unwrap();
        let map = TensorIndexMap::new(&a, &b, &joint).unwrap();
        assert!(map.iter().all(|(ia, ib, j)| ia == j && ib == 0));
    }

    #[test]
    fn indices() {
        let b = FockBasis::new(3, 2).unwrap();
        assert_eq!(b.rank_in_sector(&occ(&[1, 0, 1])).unwrap(), 3);
        assert_eq!(b.index_of(&occ(&[0, 0, 0])).unwrap(), 0);
        assert_eq!(b.index_of(&occ(&[2, 0, 0])).unwrap(), 9);
        assert!(matches!(b.index_of(&occ(&[2, 1, 0])), Err(Error::OutOfBasis { .. })));
        assert!(b.index_of(&occ(&[1, 0])).is_err());
    }

    #[test]
    fn round_trip() {
        for m in 1..=4 {
            for n_max in 0..=4 {
                let b = FockBasis::new(m, n_max).unwrap();
                for (k, s) in b.iter().enumerate() {
                    assert_eq!(b.index_of(s).unwrap(), k);
                    assert_eq!(b.state(k), s);
                    assert_eq!(b.photons_at(k), s.total());
                }
            }
        }
    }

    #[test]
    fn tensor_map_examples() {
        let a = FockBasis::new(1, 2).unwrap();
        let bb = FockBasis::new(2, 2).unwrap();
        let j = FockBasis::new(3, 2).unwrap();
        let map = TensorIndexMap::new(&a, &bb, &j).unwrap();
        let ia = a.index_of(&occ(&[1])).unwrap();
        let ib = bb.index_of(&occ(&[0, 1])).unwrap();
        let joint = map.get(ia, ib).unwrap();
        assert_eq!(j.state(joint), &occ(&[1, 0, 1]));
        assert_eq!(j.rank_in_sector(j.state(joint)).unwrap(), 3);
        assert_eq!(map.get(0, 0), Some(0));

        let a2 = FockBasis::new(2, 2).unwrap();
        let b2 = FockBasis::new(1, 2).unwrap();
        let map2 = TensorIndexMap::new(&a2, &b2, &j).unwrap();
        let idx = map2.get(a2.index_of(&occ(&[0, 1])).unwrap(), b2.index_of(&occ(&[1])).unwrap()).unwrap();
        assert_eq!(j.state(idx), &occ(&[0, 1, 1]));
        assert_eq!(j.rank_in_sector(j.state(idx)).unwrap(), 1);

        // (2) ⊗ (1,0) has 3 photons: beyond the joint truncation
        let i2 = a.index_of(&occ(&[2])).unwrap();
        let i10 = bb.index_of(&occ(&[1, 0])).unwrap();
        assert!(map.get(i2, i10).is_none());
        assert!(map.joint_index(&a, &bb, i2, i10).is_err());
    }

    #[test]
    fn tensor_map_is_injective_and_covers_joint() {
        let a = FockBasis::new(2, 3).unwrap();
        let b = FockBasis::new(2, 3).unwrap();
        let j = FockBasis::new(4, 3).unwrap();
        let map = TensorIndexMap::new(&a, &b, &j).unwrap();
        let mut seen = vec![false; j.dim()];
        for (_, _, k) in map.iter() {
            assert!(!seen[k]);
            seen[k] = true;
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn occupation_json() {
        let o = occ(&[1, 0, 2]);
        assert_eq!(serde_json::to_string(&o).unwrap(), "[1,0,2]");
        let back: OccupationVector = serde_json::from_str("[1,0,2]").unwrap();
        assert_eq!(back, o);
    }
}
