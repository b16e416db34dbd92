//! Side-by-side comparison of the three certifiers on a plane grid, with
//! optional simulation ground truth.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::Result;
use crate::geometry::{in_polytope, LyapunovFunction, PlaneSpec, RegionEstimate};
use crate::screening::{certify_energy, certify_geometry, certify_vmin, EnergyBaseline};
use crate::simulate::{simulate_outcome, FacetCrossing, Outcome, SimOptions};
use crate::system::System;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonSample {
    pub c1: f64,
    pub c2: f64,
    pub inside_polytope: bool,
    pub energy: bool,
    pub vmin: bool,
    pub geometry: bool,
    /// Simulated outcome; present for every sample inside the polytope when
    /// simulation is enabled.
    pub simulated: Option<Outcome>,
    #[serde(skip)]
    pub crossings: Vec<FacetCrossing>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ComparisonSummary {
    pub samples: usize,
    pub inside_polytope: usize,
    pub energy: usize,
    pub vmin: usize,
    pub geometry: usize,
    pub simulated_stable: Option<usize>,
    /// Samples certified by an inner method but not by the next one out
    /// (energy ⊆ V_min ⊆ geometry).
    pub nesting_violations: usize,
    /// Geometry-certified samples whose simulation did not converge.
    pub unsound: Option<usize>,
}

impl ComparisonSummary {
    /// `energy ≤ V_min ≤ geometry ≤ simulated-stable`, with the last link
    /// skipped when simulation is off.
    pub fn ordered(&self) -> bool {
        self.energy <= self.vmin
            && self.vmin <= self.geometry
            && self.simulated_stable.map_or(true, |s| self.geometry <= s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonDataset {
    pub grid_hash: String,
    pub resolution: usize,
    pub summary: ComparisonSummary,
    pub samples: Vec<ComparisonSample>,
}

pub struct CompareConfig {
    pub plane: PlaneSpec,
    pub resolution: usize,
    /// Simulation horizon and options; `None` skips ground truth.
    pub simulate: Option<(f64, SimOptions)>,
}

pub fn compare(
    sys: &System,
    lf: &LyapunovFunction,
    region: &RegionEstimate,
    baseline: &EnergyBaseline,
    config: &CompareConfig,
) -> Result<ComparisonDataset> {
    let states = config.plane.states(&sys.grid, &sys.sep.angles, config.resolution)?;
    let samples = states
        .par_iter()
        .map(|(c1, c2, x)| -> Result<ComparisonSample> {
            let inside = in_polytope(&sys.ssm, x);
            let (simulated, crossings) = match (&config.simulate, inside) {
                (Some((horizon, opts)), true) => {
                    let s = simulate_outcome(sys, x, *horizon, opts)?;
                    (Some(s.outcome), s.crossings)
                }
                _ => (None, Vec::new()),
            };
            Ok(ComparisonSample {
                c1: *c1,
                c2: *c2,
                inside_polytope: inside,
                energy: certify_energy(sys, baseline, x).certified(),
                vmin: certify_vmin(lf, region, x).certified(),
                geometry: certify_geometry(lf, region, x).certified(),
                simulated,
                crossings,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let count = |f: &dyn Fn(&ComparisonSample) -> bool| samples.iter().filter(|s| f(s)).count();
    let simulating = config.simulate.is_some();
    let summary = ComparisonSummary {
        samples: samples.len(),
        inside_polytope: count(&|s| s.inside_polytope),
        energy: count(&|s| s.energy),
        vmin: count(&|s| s.vmin),
        geometry: count(&|s| s.geometry),
        simulated_stable: simulating.then(|| count(&|s| s.simulated == Some(Outcome::Converged))),
        nesting_violations: count(&|s| (s.energy && !s.vmin) || (s.vmin && !s.geometry)),
        unsound: simulating.then(|| count(&|s| s.geometry && s.simulated != Some(Outcome::Converged))),
    };
    Ok(ComparisonDataset { grid_hash: sys.grid_hash.clone(), resolution: config.resolution, summary, samples })
}
