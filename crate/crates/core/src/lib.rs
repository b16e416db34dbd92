//! Transient-stability certification for structure-preserving swing models.
//!
//! A grid description is turned into a Lur'e state-space form around its
//! stable equilibrium, an LMI certificate yields a Lyapunov function, and
//! the minima of that function over the flow-out facets of the polytope
//! `|δ_kj| ≤ π` give a region estimate used to screen fault-cleared states.
//! A variable-step simulator provides ground truth.

pub mod compare;
pub mod equilibrium;
pub mod error;
pub mod geometry;
pub mod grid;
mod halton;
pub mod lmi;
pub mod ode;
pub mod screening;
mod simplex;
pub mod simulate;
pub mod state_space;
pub mod system;

pub use compare::{compare, CompareConfig, ComparisonDataset, ComparisonSummary};
pub use equilibrium::{solve_sep, EquilibriumPoint};
pub use error::{Error, Result};
pub use geometry::{
    build_region_estimate, facet_minimum, in_polytope, FacetMinimum, GeometryOptions, LyapunovFunction, PlaneSpec,
    RegionEstimate,
};
pub use grid::{parse_grid, GridModel};
pub use lmi::{adapt_certificate, solve_lmi, verify_certificate, CertificateFile, LyapunovCertificate, SolverOptions};
pub use screening::{EnergyBaseline, Method, ScreenOptions, Screener, ScreeningReport, Status, Verdict};
pub use simulate::{integrate, simulate_outcome, Outcome, SimOptions, Trajectory};
pub use state_space::StateSpaceMatrices;
pub use system::System;
