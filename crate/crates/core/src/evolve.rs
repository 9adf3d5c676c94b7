//! Evolution of a looped interferometer: spatiotemporal unfolding, partial
//! density-matrix evolution, Kraus iteration, and the stationary regime.
//!
//! One iteration is one pass: the external input `ρ_ext` and the looped
//! state enter the interferometer together, the external outputs are
//! detected and the looped outputs are fed back. Iteration `i` detects the
//! state produced by the `i`-th pass.
//!
//! Losses are per-mode amplitude transmissions `t_in`, `t_out` at the
//! interferometer ports and a power transmission `loop_T` on the feedback
//! line. The looped outputs pass `t_out`, the line and `t_in` before the
//! next pass, so each looped mode sees one loss of power transmission
//! `t_out² · loop_T · t_in²` applied to the state entering a pass.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channels::{
    iterate_to_fixed_point, loop_channel, loss_channel_per_mode, stationary_chain, DetectionMap, QuantumChannel,
    StationaryOptions, StationaryState, EIGEN_CUTOFF,
};
use crate::error::{Error, Result};
use crate::fock::{total_size, FockBasis, OccupationVector};
use crate::lift::{lift, LiftedUnitary};
use crate::matrixkit::{haar_random_unitary, matrix_from_csv, matrix_from_json, CMatrix, UnitaryInterferometer};
use crate::qstate::{
    diagonal_distribution, fock_state_dm, tensor_product, uhlmann_fidelity, DensityMatrix, ProbabilityDistribution,
    LEAK_TOL,
};

/// Largest joint basis the unfolding oracle will enumerate.
pub const UNFOLD_MAX_DIM: usize = 100_000;
/// Per-pass leak targeted when the stationary truncation is chosen automatically.
pub const STATIONARY_LEAK_TARGET: f64 = 1e-11;
/// Truncation ceiling for the automatic stationary search.
pub const STATIONARY_MAX_N: usize = 80;

/// Experiment description as read from JSON (`"schema": 1`).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    #[serde(rename = "M")]
    pub modes: usize,
    #[serde(rename = "L")]
    pub looped: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    pub iterations: usize,
    pub input: InputSpec,
    pub unitary: UnitarySpec,
    #[serde(default)]
    pub losses: LossSpec,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum InputSpec {
    /// Fock state on the external modes.
    Fock { occupation: Vec<usize> },
    /// Density-matrix JSON file over the external modes.
    Dm { path: PathBuf },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase", deny_unknown_fields)]
pub enum UnitarySpec {
    /// Matrix JSON (`rows`, `cols`, `re`, `im`) or CSV of complex entries.
    File { path: PathBuf },
    Haar { seed: u64 },
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_in: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_out: Option<Vec<f64>>,
    #[serde(default, rename = "loop_T", skip_serializing_if = "Option::is_none")]
    pub loop_t: Option<f64>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if cfg.schema != 1 {
            return Err(Error::Config(format!("unsupported schema {}", cfg.schema)));
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Loads referenced files (relative to `base_dir`) and checks every
    /// invariant. Any failure is reported as [`Error::Config`].
    pub fn resolve(&self, base_dir: &Path) -> Result<Experiment> {
        self.resolve_inner(base_dir).map_err(|e| match e {
            Error::Config(_) => e,
            other => Error::Config(other.to_string()),
        })
    }

    fn resolve_inner(&self, base_dir: &Path) -> Result<Experiment> {
        let (m, l) = (self.modes, self.looped);
        if l >= m {
            return Err(Error::Config(format!("L = {l} must be below M = {m}")));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        let matrix = match &self.unitary {
            UnitarySpec::Haar { seed } => haar_random_unitary(m, *seed).matrix().clone(),
            UnitarySpec::File { path } => {
                let text = std::fs::read_to_string(base_dir.join(path))?;
                if path.extension().is_some_and(|e| e == "csv") {
                    matrix_from_csv(&text)?
                } else {
                    matrix_from_json(&text)?
                }
            }
        };
        if matrix.shape() != (m, m) {
            return Err(Error::Config(format!("unitary is {:?}, expected {m}x{m}", matrix.shape())));
        }
        let u = UnitaryInterferometer::new(matrix, l)?;
        let rho_ext = match &self.input {
            InputSpec::Fock { occupation } => {
                if occupation.len() != m - l {
                    return Err(Error::Config(format!(
                        "input occupation has {} entries for {} external modes",
                        occupation.len(),
                        m - l
                    )));
                }
                let occ = OccupationVector::new(occupation.clone());
                fock_state_dm(Arc::new(FockBasis::new(m - l, occ.total())?), &occ)?
            }
            InputSpec::Dm { path } => DensityMatrix::from_json(&std::fs::read_to_string(base_dir.join(path))?)?,
        };
        let losses = Losses {
            t_in: self.losses.t_in.clone().unwrap_or_else(|| vec![1.0; m]),
            t_out: self.losses.t_out.clone().unwrap_or_else(|| vec![1.0; m]),
            loop_t: self.losses.loop_t.unwrap_or(1.0),
        };
        let mut exp = Experiment::new(u, rho_ext, self.iterations)?.with_losses(losses)?;
        if let Some(n) = self.n_max {
            exp = exp.with_n_max(n)?;
        }
        Ok(exp.with_seed(self.seed))
    }
}

/// Reads a config file; relative paths inside resolve against its directory.
pub fn load_experiment(path: &Path) -> Result<(ExperimentConfig, Experiment)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let cfg = ExperimentConfig::from_json(&text)?;
    let exp = cfg.resolve(path.parent().unwrap_or(Path::new(".")))?;
    Ok((cfg, exp))
}

/// Amplitude transmissions per port and the power transmission of the line.
#[derive(Debug, Clone, PartialEq)]
pub struct Losses {
    pub t_in: Vec<f64>,
    pub t_out: Vec<f64>,
    pub loop_t: f64,
}

impl Losses {
    pub fn lossless(modes: usize) -> Self {
        Self { t_in: vec![1.0; modes], t_out: vec![1.0; modes], loop_t: 1.0 }
    }

    pub fn is_lossless(&self) -> bool {
        self.t_in.iter().chain(&self.t_out).all(|&t| t == 1.0) && self.loop_t == 1.0
    }

    /// Power transmission seen by each looped mode between two passes.
    pub fn loop_power(&self, n_ext: usize) -> Vec<f64> {
        (n_ext..self.t_in.len()).map(|j| self.t_out[j].powi(2) * self.loop_t * self.t_in[j].powi(2)).collect()
    }

    fn check(&self, modes: usize) -> Result<()> {
        if self.t_in.len() != modes || self.t_out.len() != modes {
            return Err(Error::DimensionMismatch(format!(
                "loss arrays of length {}/{} for {modes} modes",
                self.t_in.len(),
                self.t_out.len()
            )));
        }
        let all = self.t_in.iter().chain(&self.t_out).chain(std::iter::once(&self.loop_t));
        if let Some(t) = all.into_iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::InvalidArgument(format!("transmission {t} outside [0, 1]")));
        }
        Ok(())
    }
}

/// A resolved experiment: interferometer, per-iteration external input,
/// iteration count, losses and truncation.
#[derive(Debug, Clone)]
pub struct Experiment {
    interferometer: UnitaryInterferometer,
    rho_ext: DensityMatrix,
    iterations: usize,
    losses: Losses,
    n_max: Option<usize>,
    seed: u64,
}

impl Experiment {
    pub fn new(interferometer: UnitaryInterferometer, rho_ext: DensityMatrix, iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        if rho_ext.basis().modes() != interferometer.n_external() {
            return Err(Error::DimensionMismatch(format!(
                "input state over {} modes for {} external modes",
                rho_ext.basis().modes(),
                interferometer.n_external()
            )));
        }
        let losses = Losses::lossless(interferometer.modes());
        Ok(Self { interferometer, rho_ext, iterations, losses, n_max: None, seed: 0 })
    }

    pub fn with_losses(mut self, losses: Losses) -> Result<Self> {
        losses.check(self.interferometer.modes())?;
        self.losses = losses;
        Ok(self)
    }

    /// Overrides the default truncation `k · N_env`. A value below the
    /// default is accepted; the evolution then fails with
    /// [`Error::TruncationOverflow`] if more than `LEAK_TOL` is cut off.
    pub fn with_n_max(mut self, n_max: usize) -> Result<Self> {
        if n_max < self.n_env() {
            return Err(Error::TruncationOverflow { n_max, required: self.n_env(), leaked: 1.0 });
        }
        self.n_max = Some(n_max);
        Ok(self)
    }

    pub fn with_iterations(mut self, iterations: usize) -> Result<Self> {
        if iterations == 0 {
            return Err(Error::InvalidArgument("iterations must be at least 1".into()));
        }
        self.iterations = iterations;
        Ok(self)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// The same experiment with another interferometer of the same shape.
    pub fn with_interferometer(&self, u: UnitaryInterferometer) -> Result<Self> {
        if u.modes() != self.modes() || u.n_looped() != self.n_looped() {
            return Err(Error::DimensionMismatch("replacement interferometer has a different mode split".into()));
        }
        Ok(Self { interferometer: u, ..self.clone() })
    }

    pub fn interferometer(&self) -> &UnitaryInterferometer {
        &self.interferometer
    }

    pub fn rho_ext(&self) -> &DensityMatrix {
        &self.rho_ext
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn losses(&self) -> &Losses {
        &self.losses
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn modes(&self) -> usize {
        self.interferometer.modes()
    }

    pub fn n_looped(&self) -> usize {
        self.interferometer.n_looped()
    }

    pub fn n_external(&self) -> usize {
        self.interferometer.n_external()
    }

    /// Top populated photon sector of the external input.
    pub fn n_env(&self) -> usize {
        self.rho_ext.max_populated_sector(EIGEN_CUTOFF)
    }

    /// Explicit truncation, or `k · N_env`.
    pub fn n_max(&self) -> usize {
        self.n_max.unwrap_or(self.iterations * self.n_env())
    }

    pub fn explicit_n_max(&self) -> Option<usize> {
        self.n_max
    }

    /// External input after the input-port losses, over `n_max` photons.
    pub fn effective_input(&self, n_max: usize) -> Result<DensityMatrix> {
        let e = self.n_external();
        let rho = self.rho_ext.retruncate(n_max.max(self.n_env()))?;
        let t: Vec<f64> = self.losses.t_in[..e].iter().map(|t| t * t).collect();
        let rho = if t.iter().all(|&x| x == 1.0) { rho } else { loss_channel_per_mode(&t, rho.basis().n_max())?.apply(&rho)? };
        rho.retruncate(n_max)
    }

    /// Loss on the looped modes between passes, if any.
    pub fn loop_loss(&self, n_max: usize) -> Result<Option<QuantumChannel>> {
        let t = self.losses.loop_power(self.n_external());
        if t.iter().all(|&x| x == 1.0) {
            return Ok(None);
        }
        loss_channel_per_mode(&t, n_max).map(Some)
    }

    /// Loss on the detected modes, if any.
    pub fn output_loss(&self, n_max: usize) -> Result<Option<QuantumChannel>> {
        let t: Vec<f64> = self.losses.t_out[..self.n_external()].iter().map(|t| t * t).collect();
        if t.iter().all(|&x| x == 1.0) {
            return Ok(None);
        }
        loss_channel_per_mode(&t, n_max).map(Some)
    }

    /// `T_out · U · T_in` with the whole line loss placed on the looped inputs.
    pub fn effective_transfer_matrix(&self) -> Result<UnitaryInterferometer> {
        let m = self.modes();
        let e = self.n_external();
        let mut t_in = self.losses.t_in.clone();
        let mut t_out = self.losses.t_out.clone();
        for (j, tau) in self.losses.loop_power(e).into_iter().enumerate() {
            t_in[e + j] = tau.sqrt();
            t_out[e + j] = 1.0;
        }
        debug_assert_eq!(t_in.len(), m);
        self.interferometer.with_losses(&t_in, &t_out)
    }
}

/// Per-seed derivation for independent samples: stream `index` of a
/// ChaCha20 generator keyed by `master`.
pub fn sample_seed(master: u64, index: u64) -> u64 {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream(index);
    rng.next_u64()
}

/// Output of an evolution run; index `i` holds iteration `i + 1`.
#[derive(Debug, Clone)]
pub struct EvolutionTrace {
    /// State of the detected modes after each pass.
    pub detected: Vec<DensityMatrix>,
    pub distributions: Vec<ProbabilityDistribution>,
    /// Looped state after each pass, when requested.
    pub loop_states: Option<Vec<DensityMatrix>>,
}

impl EvolutionTrace {
    pub fn final_state(&self) -> &DensityMatrix {
        self.detected.last().expect("at least one iteration")
    }

    pub fn final_distribution(&self) -> &ProbabilityDistribution {
        self.distributions.last().expect("at least one iteration")
    }
}

fn lifted_for(exp: &Experiment, n_max: usize) -> Result<LiftedUnitary> {
    lift(exp.interferometer.matrix(), Arc::new(FockBasis::new(exp.modes(), n_max)?))
}

fn detect(det: DensityMatrix, out_loss: &Option<QuantumChannel>) -> Result<(DensityMatrix, ProbabilityDistribution)> {
    let det = match out_loss {
        Some(ch) => ch.apply(&det)?,
        None => det,
    };
    let p = diagonal_distribution(&det)?;
    Ok((det, p))
}

/// Partial density-matrix evolution: each pass forms `ρ_ext ⊗ ρ_loop`,
/// conjugates with `Ũ` and traces out either side.
pub fn evolve_pdm(exp: &Experiment, keep_loop_states: bool) -> Result<EvolutionTrace> {
    let n = exp.n_max();
    let lifted = lifted_for(exp, n)?;
    let joint = lifted.basis().clone();
    let (e, m) = (exp.n_external(), exp.modes());
    let ext = exp.effective_input(n)?;
    let loop_loss = exp.loop_loss(n)?;
    let out_loss = exp.output_loss(n)?;
    let mut rho_loop = DensityMatrix::vacuum(Arc::new(FockBasis::new(exp.n_looped(), n)?));
    let mut trace = EvolutionTrace { detected: Vec::new(), distributions: Vec::new(), loop_states: None };
    let mut loops = Vec::new();
    for _ in 0..exp.iterations {
        if let Some(ch) = &loop_loss {
            rho_loop = ch.apply(&rho_loop)?;
        }
        let rin = tensor_product(&ext, &rho_loop, joint.clone())?;
        let rout = DensityMatrix::from_raw(joint.clone(), lifted.conjugate(rin.entries())?)?;
        rho_loop = rout.partial_trace(e..m)?;
        let (det, p) = detect(rout.partial_trace(0..e)?, &out_loss)?;
        trace.detected.push(det);
        trace.distributions.push(p);
        if keep_loop_states {
            loops.push(rho_loop.clone());
        }
    }
    trace.loop_states = keep_loop_states.then_some(loops);
    Ok(trace)
}

/// Kraus evolution: the looped state advances by the loop channel and each
/// pass is read out by the detection map.
pub fn evolve_kraus(exp: &Experiment, keep_loop_states: bool) -> Result<EvolutionTrace> {
    let n = exp.n_max();
    let lifted = lifted_for(exp, n)?;
    let ext = exp.effective_input(n)?;
    let channel = loop_channel(&lifted, &ext, exp.n_looped())?;
    let detection = DetectionMap::new(&lifted, &ext, exp.n_looped())?;
    let loop_loss = exp.loop_loss(n)?;
    let out_loss = exp.output_loss(n)?;
    let mut rho_loop = DensityMatrix::vacuum(channel.basis().clone());
    let mut trace = EvolutionTrace { detected: Vec::new(), distributions: Vec::new(), loop_states: None };
    let mut loops = Vec::new();
    for _ in 0..exp.iterations {
        if let Some(ch) = &loop_loss {
            rho_loop = ch.apply(&rho_loop)?;
        }
        let (det, p) = detect(detection.apply(&rho_loop)?, &out_loss)?;
        rho_loop = channel.apply(&rho_loop)?;
        trace.detected.push(det);
        trace.distributions.push(p);
        if keep_loop_states {
            loops.push(rho_loop.clone());
        }
    }
    trace.loop_states = keep_loop_states.then_some(loops);
    Ok(trace)
}

/// Occupation of a Fock-state density matrix, if it is one.
fn fock_occupation(rho: &DensityMatrix) -> Option<OccupationVector> {
    let e = rho.entries();
    let i = (0..rho.dim()).find(|&i| (e[(i, i)].re - 1.0).abs() < 1e-12)?;
    let rest: f64 = e.iter().map(|z| z.norm()).sum::<f64>() - e[(i, i)].norm();
    (rest < 1e-12).then(|| rho.basis().state(i).clone())
}

/// Time-unrolled transfer matrix over `(M − L)·k + L` modes and its input.
///
/// Pass `t` couples the external block `t` with the `L` looped modes, which
/// are the last modes and carry the state from one pass to the next.
pub fn unfold(exp: &Experiment) -> Result<(CMatrix, OccupationVector)> {
    if !exp.losses.is_lossless() {
        return Err(Error::Unsupported("unfolding covers lossless interferometers only".into()));
    }
    let occ = fock_occupation(&exp.rho_ext)
        .ok_or_else(|| Error::Unsupported("unfolding needs a Fock-state input".into()))?;
    let (e, l, k) = (exp.n_external(), exp.n_looped(), exp.iterations);
    let size = e * k + l;
    let u = exp.interferometer.matrix();
    let mut total = CMatrix::identity(size, size);
    for t in 0..k {
        let idx: Vec<usize> = (t * e..(t + 1) * e).chain(e * k..e * k + l).collect();
        let mut w = CMatrix::identity(size, size);
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                w[(ia, ib)] = u[(a, b)];
            }
        }
        total = w * total;
    }
    let mut input = Vec::with_capacity(size);
    for _ in 0..k {
        input.extend_from_slice(occ.as_slice());
    }
    input.resize(size, 0);
    Ok((total, OccupationVector::new(input)))
}

/// Exact output distribution of the unfolded interferometer.
#[derive(Debug, Clone)]
pub struct UnfoldedDistribution {
    /// Over all `(M − L)·k` detected spatiotemporal modes.
    pub joint: ProbabilityDistribution,
    /// Marginal of each pass's detected block, truncated at the experiment's `n_max`.
    pub per_iteration: Vec<ProbabilityDistribution>,
}

pub fn unfolded_distribution(exp: &Experiment) -> Result<UnfoldedDistribution> {
    let (u, input) = unfold(exp)?;
    let modes = u.nrows();
    let n = input.total();
    let size = total_size(modes, n);
    if size > UNFOLD_MAX_DIM {
        return Err(Error::TooLarge(format!("unfolded basis of {size} states (limit {UNFOLD_MAX_DIM})")));
    }
    let basis = Arc::new(FockBasis::new(modes, n)?);
    let lifted = lift(&u, basis.clone())?;
    let amp = lifted.apply_to_state(&input)?;
    let off = basis.sector_offset(n);
    let mut p = vec![0.0; basis.dim()];
    for (i, z) in amp.iter().enumerate() {
        p[off + i] = z.norm_sqr();
    }
    let full = ProbabilityDistribution::new(basis, p)?;
    let e = exp.n_external();
    let k = exp.iterations;
    let joint = full.marginal(0..e * k)?;
    let per_iteration = (0..k)
        .map(|t| full.marginal(t * e..(t + 1) * e)?.retruncate(exp.n_max()))
        .collect::<Result<_>>()?;
    Ok(UnfoldedDistribution { joint, per_iteration })
}

/// Everything describing one pass at a fixed truncation.
#[derive(Debug, Clone)]
pub struct LoopModel {
    pub lifted: LiftedUnitary,
    pub input: DensityMatrix,
    pub channel: QuantumChannel,
    pub loop_loss: Option<QuantumChannel>,
}

impl LoopModel {
    pub fn new(exp: &Experiment, n_max: usize) -> Result<Self> {
        let lifted = lifted_for(exp, n_max)?;
        let input = exp.effective_input(n_max)?;
        let channel = loop_channel(&lifted, &input, exp.n_looped())?;
        let loop_loss = exp.loop_loss(n_max)?;
        Ok(Self { lifted, input, channel, loop_loss })
    }

    /// The channels of one pass, first applied first.
    pub fn chain(&self) -> Vec<&QuantumChannel> {
        self.loop_loss.iter().chain(std::iter::once(&self.channel)).collect()
    }

    /// One full pass on a looped state of any truncation up to the model's.
    pub fn step(&self, rho: &DensityMatrix) -> Result<DensityMatrix> {
        let mut r = rho.retruncate(self.channel.basis().n_max())?;
        for ch in self.chain() {
            r = ch.apply(&r)?;
        }
        Ok(r)
    }
}

/// Stationary looped state with the truncation it was computed at.
#[derive(Debug, Clone)]
pub struct LoopStationary {
    pub stationary: StationaryState,
    /// Truncation of the pass model; the state itself lives on the valid
    /// subspace below it.
    pub n_max: usize,
}

/// Stationary looped state. With an explicit `n_max` that truncation is
/// used and a per-pass leak above `LEAK_TOL` is an error; otherwise the
/// truncation grows until the leak drops below `STATIONARY_LEAK_TARGET`.
pub fn stationary_loop_state(exp: &Experiment, opts: &StationaryOptions) -> Result<LoopStationary> {
    let step = exp.n_env().max(1) * 2;
    let (mut n, fixed) = match exp.n_max {
        Some(n) => (n, true),
        None => ((4 * exp.n_env()).max(4), false),
    };
    let mut previous: Option<(usize, f64)> = None;
    loop {
        let model = LoopModel::new(exp, n)?;
        let st = stationary_chain(&model.chain(), opts)?;
        let leak = st.leak();
        if fixed {
            if leak > LEAK_TOL {
                return Err(Error::TruncationOverflow { n_max: n, required: n + step, leaked: leak });
            }
            return Ok(LoopStationary { stationary: st, n_max: n });
        }
        if leak <= STATIONARY_LEAK_TARGET {
            return Ok(LoopStationary { stationary: st, n_max: n });
        }
        // the leak falls at least geometrically in n, so three quarters of
        // the geometric extrapolation rarely overshoots
        let mut next = n + step;
        if let Some((n0, l0)) = previous {
            if leak < l0 {
                let rate = (leak / l0).ln() / (n - n0) as f64;
                let more = (0.75 * (STATIONARY_LEAK_TARGET / leak).ln() / rate).ceil() as usize;
                next = next.max(n + more.div_ceil(step) * step);
            }
        }
        if n >= STATIONARY_MAX_N {
            return Err(Error::TruncationOverflow { n_max: n, required: next, leaked: leak });
        }
        previous = Some((n, leak));
        n = next.min(STATIONARY_MAX_N);
    }
}

/// Stationary state by repeated application of the pass at the truncation
/// chosen by [`stationary_loop_state`].
pub fn stationary_by_iteration(exp: &Experiment, n_max: usize, tol: f64, max_iter: usize) -> Result<DensityMatrix> {
    let model = LoopModel::new(exp, n_max)?;
    let valid = crate::channels::chain_valid_max_photons(&model.chain());
    let chain: Vec<QuantumChannel> = model.chain().iter().map(|c| c.restrict(valid)).collect::<Result<_>>()?;
    let composed = chain[1..].iter().try_fold(chain[0].clone(), |acc, c| QuantumChannel::compose(c, &acc))?;
    let start = DensityMatrix::vacuum(composed.basis().clone());
    Ok(iterate_to_fixed_point(&composed, &start, tol, max_iter)?.0)
}

/// Detected-mode state produced by one pass fed with the looped state `rho_loop`.
pub fn detect_from_loop(exp: &Experiment, rho_loop: &DensityMatrix) -> Result<DensityMatrix> {
    let n = rho_loop.basis().n_max() + exp.n_env();
    let lifted = lifted_for(exp, n)?;
    let ext = exp.effective_input(n)?;
    let mut r = rho_loop.retruncate(n)?;
    if let Some(ch) = exp.loop_loss(n)? {
        r = ch.apply(&r)?;
    }
    let det = DetectionMap::new(&lifted, &ext, exp.n_looped())?.apply(&r)?;
    Ok(detect(det, &exp.output_loss(n)?)?.0)
}

/// Number of passes after which the looped state is within `tolerance`
/// infidelity of the stationary state.
pub fn stabilization_time(exp: &Experiment, tolerance: f64, max_iterations: usize) -> Result<usize> {
    let ls = stationary_loop_state(exp, &StationaryOptions::default())?;
    let target = &ls.stationary.state;
    let model = LoopModel::new(exp, ls.n_max)?;
    let n_valid = target.basis().n_max();
    let chain: Vec<QuantumChannel> = model.chain().iter().map(|c| c.restrict(n_valid)).collect::<Result<_>>()?;
    let mut rho = DensityMatrix::vacuum(target.basis().clone());
    for i in 1..=max_iterations {
        let mut m = rho.into_entries();
        for ch in &chain {
            m = ch.apply_unchecked(&m);
        }
        rho = DensityMatrix::from_raw(target.basis().clone(), m)?;
        if 1.0 - uhlmann_fidelity(&rho, target)? < tolerance {
            return Ok(i);
        }
    }
    Err(Error::NonConvergence { iterations: max_iterations, residual: 1.0 - uhlmann_fidelity(&rho, target)? })
}

/// Summary of a Monte Carlo run over Haar-random interferometers.
#[derive(Debug, Clone)]
pub struct StabilizationSample {
    pub seed: u64,
    /// `None` when the sample had no unique fixed point or did not settle.
    pub tau: Option<usize>,
}

/// Stabilization times for `samples` Haar-random interferometers with the
/// mode split of `exp`; sample `i` uses seed `sample_seed(seed, i)`.
pub fn stabilization_samples(
    exp: &Experiment,
    samples: usize,
    seed: u64,
    tolerance: f64,
    max_iterations: usize,
) -> Result<Vec<StabilizationSample>> {
    (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let s = sample_seed(seed, i);
            let u = haar_random_unitary(exp.modes(), s).with_looped(exp.n_looped())?;
            let tau = match stabilization_time(&exp.with_interferometer(u)?, tolerance, max_iterations) {
                Ok(t) => Some(t),
                Err(Error::NonUniqueStationary { .. } | Error::NonConvergence { .. }) => None,
                Err(e) => return Err(e),
            };
            Ok(StabilizationSample { seed: s, tau })
        })
        .collect()
}

/// Mean stationary looped state over Haar-random interferometers.
#[derive(Debug, Clone)]
pub struct AverageStationary {
    pub state: DensityMatrix,
    pub used: usize,
    /// Samples without a unique fixed point.
    pub skipped: usize,
}

/// `(1/n) Σ ρ_stat` over samples with seeds `sample_seed(seed, i)`. States
/// are padded to a common truncation and summed in sample order.
pub fn average_stationary(exp: &Experiment, samples: usize, seed: u64) -> Result<AverageStationary> {
    let states: Vec<Option<DensityMatrix>> = (0..samples as u64)
        .into_par_iter()
        .map(|i| {
            let u = haar_random_unitary(exp.modes(), sample_seed(seed, i)).with_looped(exp.n_looped())?;
            match stationary_loop_state(&exp.with_interferometer(u)?, &StationaryOptions::default()) {
                Ok(ls) => Ok(Some(ls.stationary.state)),
                Err(Error::NonUniqueStationary { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let used: Vec<&DensityMatrix> = states.iter().flatten().collect();
    if used.is_empty() {
        return Err(Error::InvalidState("no sample has a unique stationary state".into()));
    }
    let n = used.iter().map(|s| s.basis().n_max()).max().unwrap_or(0);
    let basis = Arc::new(FockBasis::new(exp.n_looped(), n)?);
    let mut sum = CMatrix::zeros(basis.dim(), basis.dim());
    for s in &used {
        sum += s.retruncate(n)?.entries();
    }
    sum /= num_complex::Complex64::new(used.len() as f64, 0.0);
    let state = DensityMatrix::new(basis, sum)?;
    Ok(AverageStationary { state, used: used.len(), skipped: samples - used.len() })
}
