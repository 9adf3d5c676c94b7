use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Serialize;

use loopsampler::channels::StationaryOptions;
use loopsampler::evolve::{
    detect_from_loop, evolve_kraus, evolve_pdm, load_experiment, stabilization_samples, stationary_by_iteration,
    stationary_loop_state, unfolded_distribution, Experiment,
};
use loopsampler::fock::FockBasis;
use loopsampler::matrixkit::{fmt_sci, spectral_radius};
use loopsampler::qstate::{
    classical_fidelity, diagonal_distribution, occupation_label, uhlmann_fidelity, DensityMatrix,
    ProbabilityDistribution,
};
use loopsampler::reconstruct::{
    build_moment_system, reconstruct_analytic, reconstruct_convex, ConvexReport, CONVEX_MAX_ITERATIONS, CONVEX_TOL,
};
use loopsampler::tensors::{detected_tensors, recursive_stationary, stationary_tensors, TensorSet};
use loopsampler::Error;

use crate::error::CliError;
use crate::output::{Artifacts, Run};
use crate::{Command, Common, EvolveMethod, ReconstructMethod, StationaryMethod};

/// Convergence target for the power-iteration stationary method.
const ITERATE_TOL: f64 = 1e-13;
const ITERATE_MAX: usize = 1_000_000;

pub fn run(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Evolve { common, method } => evolve(common, *method),
        Command::Stationary { common, method, rank_cap } => stationary(common, *method, *rank_cap),
        Command::Stabilization { common, samples, seed, tolerance, max_iterations } => {
            stabilization(common, *samples, *seed, *tolerance, *max_iterations)
        }
        Command::Reconstruct { common, method, rank_cap } => reconstruct(common, *method, *rank_cap),
        Command::Sample { common, shots, seed, iteration } => sample(common, *shots, *seed, *iteration),
    }
}

fn load(name: &'static str, common: &Common) -> Result<(Run, Experiment), CliError> {
    let run = Run::new(name, &common.config)?;
    let (_, exp) = load_experiment(&common.config)?;
    Ok((run, exp))
}

fn evolve(common: &Common, method: EvolveMethod) -> Result<(), CliError> {
    let (run, exp) = load("evolve", common)?;
    let mut out = Artifacts::default();
    let (distributions, detected) = match method {
        EvolveMethod::Unfold => (unfolded_distribution(&exp)?.per_iteration, None),
        EvolveMethod::Pdm | EvolveMethod::Kraus => {
            let trace = if matches!(method, EvolveMethod::Pdm) { evolve_pdm(&exp, false)? } else { evolve_kraus(&exp, false)? };
            let last = trace.final_state().clone();
            (trace.distributions, Some(last))
        }
    };
    for (i, p) in distributions.iter().enumerate() {
        out.add(format!("distribution_iter{:03}.csv", i + 1), p.to_csv());
    }
    if let Some(rho) = detected {
        out.add("detected_state.json", rho.to_json());
    }
    run.commit(&common.out, exp.seed(), out)?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct StationaryDiagnostics {
    method: &'static str,
    /// Spectral radius of the loop-to-loop block of `T_out · U · T_in`.
    spectral_radius_ll: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    superoperator: Option<SuperoperatorDiagnostics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rank_cap: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reconstruction_min_eigenvalue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    reconstruction_projected: Option<bool>,
}

#[derive(Debug, Serialize)]
struct SuperoperatorDiagnostics {
    n_max: usize,
    leading_eigenvalue_re: f64,
    leading_eigenvalue_im: f64,
    second_modulus: f64,
    gap: f64,
    eigen_method: String,
}

fn stationary(common: &Common, method: StationaryMethod, rank_cap: usize) -> Result<(), CliError> {
    let (run, exp) = load("stationary", common)?;
    let radius = spectral_radius(&exp.effective_transfer_matrix()?.block_ll())?;
    let mut out = Artifacts::default();
    let mut diag = StationaryDiagnostics {
        method: "",
        spectral_radius_ll: radius,
        superoperator: None,
        rank_cap: None,
        reconstruction_min_eigenvalue: None,
        reconstruction_projected: None,
    };
    let state = match method {
        StationaryMethod::Superop | StationaryMethod::Iterate => {
            let ls = stationary_loop_state(&exp, &StationaryOptions::default())?;
            let st = &ls.stationary;
            diag.superoperator = Some(SuperoperatorDiagnostics {
                n_max: ls.n_max,
                leading_eigenvalue_re: st.eigenvalue.re,
                leading_eigenvalue_im: st.eigenvalue.im,
                second_modulus: st.second_modulus,
                gap: st.gap,
                eigen_method: format!("{:?}", st.method),
            });
            if matches!(method, StationaryMethod::Superop) {
                diag.method = "superop";
                st.state.clone()
            } else {
                diag.method = "iterate";
                stationary_by_iteration(&exp, ls.n_max, ITERATE_TOL, ITERATE_MAX)?
            }
        }
        StationaryMethod::Tensors => {
            diag.method = "tensors";
            diag.rank_cap = Some(rank_cap);
            let tensors = stationary_tensors(&exp, rank_cap).map_err(degenerate_message)?;
            let basis = Arc::new(FockBasis::new(exp.n_looped(), rank_cap)?);
            let system = build_moment_system(basis, &tensors).map_err(CliError::reconstruction)?;
            let r = reconstruct_analytic(&system).map_err(CliError::reconstruction)?;
            diag.reconstruction_min_eigenvalue = Some(r.min_eigenvalue);
            diag.reconstruction_projected = Some(r.projected);
            out.add("stationary_tensors.json", tensors.to_json());
            r.state
        }
    };
    let detected = detect_from_loop(&exp, &state)?;
    out.add("stationary_state.json", state.to_json());
    out.add("stationary_distribution.csv", diagonal_distribution(&detected)?.to_csv());
    out.add_json("diagnostics.json", &diag);
    run.commit(&common.out, exp.seed(), out)?;
    Ok(())
}

fn degenerate_message(e: Error) -> CliError {
    let mut err = CliError::from(e);
    if err.kind == "degenerate" && !err.message.starts_with("non-unique") {
        err.message = format!("non-unique stationary state: {}", err.message);
    }
    err
}

#[derive(Debug, Serialize)]
struct StabilizationSummary {
    samples: usize,
    seed: u64,
    tolerance: f64,
    settled: usize,
    /// Samples without a unique fixed point or not settled within the iteration limit.
    unsettled: usize,
    median: Option<f64>,
    q1: Option<f64>,
    q3: Option<f64>,
    iqr: Option<f64>,
    mean: Option<f64>,
    max: Option<usize>,
}

/// Linear-interpolation quantile of sorted data.
fn quantile(sorted: &[usize], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    Some(sorted[lo] as f64 + (pos - lo as f64) * (sorted[hi] as f64 - sorted[lo] as f64))
}

fn stabilization(
    common: &Common,
    samples: usize,
    seed: Option<u64>,
    tolerance: f64,
    max_iterations: usize,
) -> Result<(), CliError> {
    let (run, exp) = load("stabilization", common)?;
    if samples == 0 {
        return Err(CliError::config("--samples must be at least 1"));
    }
    let seed = seed.unwrap_or(exp.seed());
    let results = stabilization_samples(&exp, samples, seed, tolerance, max_iterations)?;
    let mut taus: Vec<usize> = results.iter().filter_map(|s| s.tau).collect();
    taus.sort_unstable();
    let mut histogram = BTreeMap::new();
    for &t in &taus {
        *histogram.entry(t).or_insert(0usize) += 1;
    }
    let mut csv = String::from("tau;count\n");
    for (t, c) in &histogram {
        csv.push_str(&format!("{t};{c}\n"));
    }
    let (q1, median, q3) = (quantile(&taus, 0.25), quantile(&taus, 0.5), quantile(&taus, 0.75));
    let summary = StabilizationSummary {
        samples,
        seed,
        tolerance,
        settled: taus.len(),
        unsettled: samples - taus.len(),
        median,
        q1,
        q3,
        iqr: q1.zip(q3).map(|(a, b)| b - a),
        mean: (!taus.is_empty()).then(|| taus.iter().sum::<usize>() as f64 / taus.len() as f64),
        max: taus.last().copied(),
    };
    let mut out = Artifacts::default();
    out.add("stabilization_histogram.csv", csv);
    out.add_json("stabilization_summary.json", &summary);
    run.commit(&common.out, seed, out)?;
    Ok(())
}

/// Tensors of order at most `rank` in both indices.
fn up_to_rank(tensors: &TensorSet, rank: usize) -> Result<TensorSet, Error> {
    let mut out = TensorSet::new(tensors.modes());
    for t in tensors.iter().filter(|t| t.k().max(t.l()) <= rank && t.rank() > 0) {
        out.insert(t.clone())?;
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ReconstructReport {
    method: &'static str,
    rank_cap: usize,
    detected_modes: usize,
    basis_n_max: usize,
    /// False when the superoperator reference was too large to compute.
    compared_to_truth: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    fidelity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    classical_fidelity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    min_eigenvalue: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    projected: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    convex: Option<ConvexReport>,
}

fn reconstruct(common: &Common, method: ReconstructMethod, rank_cap: usize) -> Result<(), CliError> {
    let (run, exp) = load("reconstruct", common)?;
    if rank_cap == 0 {
        return Err(CliError::config("--rank-cap must be at least 1"));
    }
    let meff = exp.effective_transfer_matrix()?;
    let looped = recursive_stationary(&meff, exp.rho_ext(), rank_cap).map_err(degenerate_message)?;
    let external = TensorSet::from_state(exp.rho_ext(), rank_cap)?;
    let keys: Vec<(usize, usize)> =
        (0..=rank_cap).flat_map(|k| (0..=rank_cap).map(move |l| (k, l))).filter(|&kl| kl != (0, 0)).collect();
    let moments = detected_tensors(&meff, &external, &looped, &keys)?;

    let truth = match stationary_loop_state(&exp, &StationaryOptions::default())
        .and_then(|ls| detect_from_loop(&exp, &ls.stationary.state))
    {
        Ok(rho) => Some(rho),
        Err(Error::TooLarge(_)) => None,
        Err(e) => return Err(e.into()),
    };
    let e = exp.n_external();
    // the analytic route inverts on the basis its moments determine; the
    // convex route fits the reference basis when there is one
    let basis_n = |rank: usize| match (method, &truth) {
        (ReconstructMethod::Convex, Some(t)) => t.basis().n_max().max(rank),
        _ => rank,
    };
    let solve = |rank: usize| -> Result<(DensityMatrix, ReconstructReport), CliError> {
        let basis = Arc::new(FockBasis::new(e, basis_n(rank))?);
        let system = build_moment_system(basis, &up_to_rank(&moments, rank)?).map_err(CliError::reconstruction)?;
        let mut report = ReconstructReport {
            method: "",
            rank_cap: rank,
            detected_modes: e,
            basis_n_max: basis_n(rank),
            compared_to_truth: truth.is_some(),
            fidelity: None,
            classical_fidelity: None,
            min_eigenvalue: None,
            projected: None,
            convex: None,
        };
        let state = match method {
            ReconstructMethod::Analytic => {
                let r = reconstruct_analytic(&system).map_err(CliError::reconstruction)?;
                report.method = "analytic";
                report.min_eigenvalue = Some(r.min_eigenvalue);
                report.projected = Some(r.projected);
                r.state
            }
            ReconstructMethod::Convex => {
                let r = reconstruct_convex(&system, CONVEX_MAX_ITERATIONS, CONVEX_TOL)
                    .map_err(CliError::reconstruction)?;
                report.method = "convex";
                report.convex = Some(r.report);
                r.state
            }
        };
        if let Some(t) = &truth {
            let (f, cf) = compare(&state, t)?;
            report.fidelity = Some(f);
            report.classical_fidelity = Some(cf);
        }
        Ok((state, report))
    };

    let mut out = Artifacts::default();
    if truth.is_some() {
        let mut sweep = String::from("rank;fidelity;classical_fidelity\n");
        for rank in 1..rank_cap {
            let (_, r) = solve(rank)?;
            sweep.push_str(&format!(
                "{rank};{};{}\n",
                fmt_sci(r.fidelity.unwrap_or(f64::NAN)),
                fmt_sci(r.classical_fidelity.unwrap_or(f64::NAN))
            ));
        }
        let (state, report) = solve(rank_cap)?;
        sweep.push_str(&format!(
            "{rank_cap};{};{}\n",
            fmt_sci(report.fidelity.unwrap_or(f64::NAN)),
            fmt_sci(report.classical_fidelity.unwrap_or(f64::NAN))
        ));
        out.add("fidelity_sweep.csv", sweep);
        finish(&mut out, &state, &report)?;
    } else {
        let (state, report) = solve(rank_cap)?;
        finish(&mut out, &state, &report)?;
    }
    out.add("detected_tensors.json", moments.to_json());
    run.commit(&common.out, exp.seed(), out)?;
    Ok(())
}

fn finish(out: &mut Artifacts, state: &DensityMatrix, report: &ReconstructReport) -> Result<(), CliError> {
    out.add("reconstructed_state.json", state.to_json());
    out.add("reconstructed_distribution.csv", diagonal_distribution(state)?.to_csv());
    out.add_json("reconstruction_report.json", report);
    Ok(())
}

/// Uhlmann and classical fidelity on a common truncation.
fn compare(state: &DensityMatrix, truth: &DensityMatrix) -> Result<(f64, f64), Error> {
    let n = state.basis().n_max().max(truth.basis().n_max());
    let (a, b) = (state.retruncate(n)?, truth.retruncate(n)?);
    Ok((uhlmann_fidelity(&a, &b)?, classical_fidelity(&diagonal_distribution(&a)?, &diagonal_distribution(&b)?)?))
}

fn sample(common: &Common, shots: usize, seed: Option<u64>, iteration: Option<usize>) -> Result<(), CliError> {
    let (run, exp) = load("sample", common)?;
    let seed = seed.unwrap_or(exp.seed());
    let dist: ProbabilityDistribution = match iteration {
        Some(0) => return Err(CliError::config("--iteration counts passes from 1")),
        Some(k) => evolve_pdm(&exp.with_iterations(k)?, false)?.distributions.swap_remove(k - 1),
        None => {
            let ls = stationary_loop_state(&exp, &StationaryOptions::default())?;
            diagonal_distribution(&detect_from_loop(&exp, &ls.stationary.state)?)?
        }
    };
    let counts = dist.sample(shots, seed).map_err(|e| CliError::config(e.to_string()))?;
    let mut csv = String::from("occupation;count\n");
    for (s, c) in dist.basis().iter().zip(&counts) {
        csv.push_str(&format!("{};{c}\n", occupation_label(s)));
    }
    let mut out = Artifacts::default();
    out.add("counts.csv", csv);
    out.add("distribution.csv", dist.to_csv());
    run.commit(&common.out, seed, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[], 0.5), None);
        assert_eq!(quantile(&[4], 0.25), Some(4.0));
        assert_eq!(quantile(&[1, 2, 3, 10], 0.5), Some(2.5));
        assert_eq!(quantile(&[1, 2, 3, 10], 0.75), Some(4.75));
    }

    #[test]
    fn rank_filter_keeps_lower_orders() {
        let rho = loopsampler::qstate::random_density_matrix(Arc::new(FockBasis::new(1, 3).unwrap()), 2);
        let all = TensorSet::from_state(&rho, 3).unwrap();
        let low = up_to_rank(&all, 1).unwrap();
        assert_eq!(low.keys().collect::<Vec<_>>(), vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }
}
