//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use loopsampler::evolve::Experiment;
use loopsampler::fock::{FockBasis, OccupationVector};
use loopsampler::matrixkit::haar_random_unitary;
use loopsampler::qstate::fock_state_dm;

/// Haar interferometer on `modes` modes with `looped` loops, one photon in
/// every external mode.
pub fn haar_experiment(modes: usize, looped: usize, seed: u64) -> Experiment {
    let e = modes - looped;
    let occ = OccupationVector::new(vec![1; e]);
    let rho = fock_state_dm(Arc::new(FockBasis::new(e, e).expect("small basis")), &occ).expect("occupation fits");
    let u = haar_random_unitary(modes, seed).with_looped(looped).expect("looped < modes");
    Experiment::new(u, rho, 1).expect("valid experiment")
}
