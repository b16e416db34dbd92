//! Lyapunov function evaluation, the polytope `|δ_kj + δ*_kj| ≤ π`, and
//! flow-out facet minima.
//!
//! Facets are indexed by `(edge, sign)`; the facet with sign `σ` is
//! `δ_kj = σπ - δ*_kj`, and a point on it flows out of the polytope when
//! `σ δ̇_kj ≥ 0`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::halton::halton;
use crate::lmi::{assemble_lmi, LyapunovCertificate};
use crate::simplex::nelder_mead;
use crate::state_space::StateSpaceMatrices;

/// Lur'e potential of one edge, `∫_0^u (sin(δ*+t) - sin δ*) dt`.
///
/// Written as `cos δ*(1 - cos u) - sin δ*(u - sin u)` and evaluated without
/// cancellation near `u = 0`.
pub fn potential(u: f64, sep: f64) -> f64 {
    let one_minus_cos = 2.0 * (0.5 * u).sin().powi(2);
    let u_minus_sin = if u.abs() < 1e-2 {
        let u2 = u * u;
        u * u2 / 6.0 * (1.0 - u2 / 20.0 * (1.0 - u2 / 42.0))
    } else {
        u - u.sin()
    };
    sep.cos() * one_minus_cos - sep.sin() * u_minus_sin
}

/// Sector term `g = (u - F) F`, non-negative on the polytope.
pub fn sector_term(u: f64, sep: f64) -> f64 {
    let f = (sep + u).sin() - sep.sin();
    (u - f) * f
}

/// `V` and `V̇` for a fixed certificate.
#[derive(Clone, Debug)]
pub struct LyapunovFunction {
    pub ssm: StateSpaceMatrices,
    pub cert: LyapunovCertificate,
    /// Rows of `W` with `-M = WᵀW`, split at the state/nonlinearity boundary.
    factor_x: DMatrix<f64>,
    factor_f: DMatrix<f64>,
    velocity: Vec<usize>,
    angle: Vec<usize>,
    q22: Option<Cholesky<f64, Dyn>>,
}

impl LyapunovFunction {
    pub fn new(ssm: &StateSpaceMatrices, cert: &LyapunovCertificate) -> Result<Self> {
        let m = assemble_lmi(ssm, &cert.q, &cert.k, &cert.h)?;
        let eig = SymmetricEigen::new(-m);
        let scale = eig.eigenvalues.amax().max(1.0);
        let lowest = eig.eigenvalues.min();
        if lowest < -1e-6 * scale {
            return Err(Error::FactorizationUnavailable { max_eigenvalue: -lowest });
        }
        let root = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        let w = DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
        let dim = ssm.dim();
        let layout = ssm.layout;
        let velocity: Vec<usize> = (0..layout.m).map(|k| layout.velocity_index(k)).collect();
        let angle: Vec<usize> = layout.angle_indices().collect();
        let q22 = DMatrix::from_fn(velocity.len(), velocity.len(), |r, c| cert.q[(velocity[r], velocity[c])]);
        Ok(LyapunovFunction {
            ssm: ssm.clone(),
            cert: cert.clone(),
            factor_x: w.columns(0, dim).into_owned(),
            factor_f: w.columns(dim, ssm.n_edges()).into_owned(),
            velocity,
            angle,
            q22: Cholesky::new(q22),
        })
    }

    pub fn dim(&self) -> usize {
        self.ssm.dim()
    }

    /// `V(x) - V(0)`.
    pub fn value(&self, x: &[f64]) -> f64 {
        let xv = DVector::from_column_slice(x);
        let quad = 0.5 * xv.dot(&(&self.cert.q * &xv));
        let lure: f64 = self
            .ssm
            .edge_deviation(x)
            .iter()
            .zip(&self.ssm.sep_edges)
            .zip(&self.cert.k)
            .map(|((u, s), k)| k * potential(*u, *s))
            .sum();
        quad + lure
    }

    /// `Qx + CᵀK F`.
    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        let kf: Vec<f64> = self.ssm.nonlinearity(x).iter().zip(&self.cert.k).map(|(f, k)| f * k).collect();
        let g = &self.cert.q * xv + self.ssm.c.transpose() * DVector::from_vec(kf);
        g.as_slice().to_vec()
    }

    /// `V̇ = -½‖Xx - YF‖² - Σ H_kj g_kj`, through the factorization of the
    /// negated LMI block.
    pub fn derivative(&self, x: &[f64]) -> f64 {
        let f = self.ssm.nonlinearity(x);
        let r = &self.factor_x * DVector::from_column_slice(x) - &self.factor_f * DVector::from_vec(f);
        let sector: f64 = self
            .ssm
            .edge_deviation(x)
            .iter()
            .zip(&self.ssm.sep_edges)
            .zip(&self.cert.h)
            .map(|((u, s), h)| h * sector_term(*u, *s))
            .sum();
        -0.5 * r.norm_squared() - sector
    }

    /// `∇V · f(x)`, the chain-rule definition of `V̇`.
    pub fn derivative_direct(&self, x: &[f64]) -> f64 {
        self.gradient(x).iter().zip(self.ssm.vector_field(x)).map(|(g, f)| g * f).sum()
    }

    /// Builds a state from bus angle deviations and generator velocities.
    fn state(&self, theta: &[f64], omega: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for (k, &i) in self.angle.iter().enumerate() {
            x[i] = theta[k];
        }
        for (k, &i) in self.velocity.iter().enumerate() {
            x[i] = omega[k];
        }
        x
    }

    /// Unconstrained velocity minimizer of `V` for fixed angles, `-Q22⁻¹ Q2a θ`.
    fn best_velocity(&self, chol: &Cholesky<f64, Dyn>, theta: &[f64]) -> DVector<f64> {
        let r = DVector::from_fn(self.velocity.len(), |row, _| {
            self.angle.iter().zip(theta).map(|(&j, t)| self.cert.q[(self.velocity[row], j)] * t).sum::<f64>()
        });
        -chol.solve(&r)
    }
}

pub fn eval_v(lf: &LyapunovFunction, x: &[f64]) -> f64 {
    lf.value(x)
}

pub fn eval_vdot(lf: &LyapunovFunction, x: &[f64]) -> f64 {
    lf.derivative(x)
}

/// True iff `|δ_kj + δ*_kj| ≤ π` for every edge.
pub fn in_polytope(ssm: &StateSpaceMatrices, x: &[f64]) -> bool {
    ssm.edge_angles(x).iter().zip(&ssm.sep_edges).all(|(d, s)| (d + s).abs() <= PI)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FacetStatus {
    Interior,
    FlowIn,
    FlowOut,
}

pub const FACET_TOLERANCE: f64 = 1e-9;

/// Position of `x` relative to facet `(edge, sign)`. Points off the facet
/// (by more than [`FACET_TOLERANCE`]) are `Interior`; on it, a rate within
/// the same tolerance of zero counts as flowing out.
pub fn classify_facet(ssm: &StateSpaceMatrices, edge: usize, sign: i8, x: &[f64]) -> FacetStatus {
    let sigma = f64::from(sign.signum());
    let d = ssm.edge_angles(x)[edge];
    if (d + ssm.sep_edges[edge] - sigma * PI).abs() > FACET_TOLERANCE {
        return FacetStatus::Interior;
    }
    if sigma * ssm.edge_rates(x)[edge] >= -FACET_TOLERANCE {
        FacetStatus::FlowOut
    } else {
        FacetStatus::FlowIn
    }
}

/// Edge deviation `u = δ - δ*` on facet `(edge, sign)`.
fn facet_deviation(ssm: &StateSpaceMatrices, edge: usize, sign: i8) -> f64 {
    f64::from(sign) * PI - 2.0 * ssm.sep_edges[edge]
}

#[derive(Clone, Debug)]
pub struct GeometryOptions {
    /// Feasible multistart seeds per facet.
    pub seeds: usize,
    pub max_evals: usize,
    pub velocity_box: f64,
    /// Samples per sublevel patch in the closedness check.
    pub patch_density: usize,
}

impl Default for GeometryOptions {
    fn default() -> Self {
        GeometryOptions { seeds: 32, max_evals: 4000, velocity_box: 10.0, patch_density: 10_000 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacetMinimum {
    pub edge: usize,
    pub sign: i8,
    pub value: f64,
    pub argmin: Vec<f64>,
    /// Set when the minimizer's velocities leave the configured box.
    pub outside_velocity_box: bool,
}

/// Angle parametrization of one facet: the `to` bus of the edge is pinned
/// at zero deviation, the `from` bus at the facet deviation, and the
/// remaining buses are free.
struct FacetChart {
    edge: usize,
    sign: i8,
    pinned: (usize, usize),
    target: f64,
    free: Vec<usize>,
    n: usize,
}

impl FacetChart {
    fn new(lf: &LyapunovFunction, edge: usize, sign: i8) -> Self {
        let line = lf.ssm.incidence.row(edge);
        let from = (0..line.len()).find(|&k| line[k] > 0.0).expect("edge tail");
        let to = (0..line.len()).find(|&k| line[k] < 0.0).expect("edge head");
        let n = lf.ssm.layout.n;
        FacetChart {
            edge,
            sign,
            pinned: (from, to),
            target: facet_deviation(&lf.ssm, edge, sign),
            free: (0..n).filter(|&k| k != from && k != to).collect(),
            n,
        }
    }

    fn angles(&self, free: &[f64]) -> Vec<f64> {
        let mut theta = vec![0.0; self.n];
        theta[self.pinned.0] = self.target;
        for (k, v) in self.free.iter().zip(free) {
            theta[*k] = *v;
        }
        theta
    }

    /// Deterministic seeds mixing the two pinned values with Halton noise.
    fn seed(&self, index: usize) -> Vec<f64> {
        let h = halton(index, self.free.len() + 1);
        let spread = if index % 2 == 0 { 0.5 * PI } else { PI };
        (0..self.free.len()).map(|k| h[0] * self.target + (h[k + 1] - 0.5) * spread).collect()
    }

    /// Other edges stay inside the polytope.
    fn admissible(&self, ssm: &StateSpaceMatrices, theta: &[f64]) -> bool {
        let u = ssm.incidence.clone() * DVector::from_column_slice(theta);
        (0..u.len()).all(|p| p == self.edge || (u[p] + 2.0 * ssm.sep_edges[p]).abs() <= PI)
    }
}

/// Velocities minimizing `V` over `{a · ω ≥ b}` for fixed angles, where the
/// half-space encodes flow-out of the facet. `None` when no velocity works.
fn constrained_velocity(
    lf: &LyapunovFunction,
    chol: &Cholesky<f64, Dyn>,
    chart: &FacetChart,
    theta: &[f64],
) -> Option<DVector<f64>> {
    let m = lf.velocity.len();
    let sigma = f64::from(chart.sign);
    let zero = vec![0.0; m];
    let rate0 = lf.ssm.edge_rates(&lf.state(theta, &zero))[chart.edge];
    let a = DVector::from_fn(m, |k, _| sigma * lf.ssm.incidence[(chart.edge, k)]);
    let b = -sigma * rate0;
    let free = lf.best_velocity(chol, theta);
    if a.norm() == 0.0 {
        return (b <= 0.0).then_some(free);
    }
    let slack = a.dot(&free) - b;
    if slack >= 0.0 {
        return Some(free);
    }
    let qa = chol.solve(&a);
    Some(free - qa * (slack / a.dot(&chol.solve(&a))))
}

/// Minimum of `V` over the flow-out part of facet `(edge, sign)`, with the
/// remaining polytope inequalities enforced.
pub fn facet_minimum(lf: &LyapunovFunction, edge: usize, sign: i8, opts: &GeometryOptions) -> Result<FacetMinimum> {
    let chol = lf.q22.as_ref().ok_or(Error::UnboundedBelow { edge, sign })?;
    let chart = FacetChart::new(lf, edge, sign);
    let objective = |free: &[f64]| -> f64 {
        let theta = chart.angles(free);
        if !chart.admissible(&lf.ssm, &theta) {
            return f64::INFINITY;
        }
        match constrained_velocity(lf, chol, &chart, &theta) {
            Some(w) => lf.value(&lf.state(&theta, w.as_slice())),
            None => f64::INFINITY,
        }
    };

    let mut best: Option<(Vec<f64>, f64)> = None;
    if chart.free.is_empty() {
        let v = objective(&[]);
        if v.is_finite() {
            best = Some((vec![], v));
        }
    } else {
        let mut used = 0;
        for index in 0..opts.seeds * 16 {
            if used == opts.seeds {
                break;
            }
            let start = chart.seed(index);
            if !objective(&start).is_finite() {
                continue;
            }
            used += 1;
            let mut run = nelder_mead(objective, &start, 0.3, opts.max_evals, 1e-14);
            let again = nelder_mead(objective, &run.point, 0.05, opts.max_evals, 1e-14);
            if again.value <= run.value {
                run = again;
            }
            if best.as_ref().map_or(true, |b| run.value < b.1) {
                best = Some((run.point, run.value));
            }
        }
    }
    let (free, value) = best.ok_or(Error::NoFeasibleStart { edge, sign })?;
    let theta = chart.angles(&free);
    let omega = constrained_velocity(lf, chol, &chart, &theta).expect("feasible argmin");
    let argmin = lf.state(&theta, omega.as_slice());
    Ok(FacetMinimum {
        edge,
        sign,
        value,
        outside_velocity_box: omega.amax() >= opts.velocity_box,
        argmin,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionEstimate {
    pub grid_hash: String,
    /// Ordered by edge, then sign `+1` before `-1`.
    pub facets: Vec<FacetMinimum>,
    pub v_min: f64,
    pub closed: bool,
    pub closedness_violations: usize,
}

impl RegionEstimate {
    pub fn facet(&self, edge: usize, sign: i8) -> &FacetMinimum {
        &self.facets[2 * edge + usize::from(sign < 0)]
    }

    /// `min_e V^{σ_e}_e` for a sign pattern over edges.
    pub fn threshold(&self, signature: &[i8]) -> f64 {
        signature.iter().enumerate().map(|(e, s)| self.facet(e, *s).value).fold(f64::INFINITY, f64::min)
    }

    pub fn check_hash(&self, hash: &str) -> Result<()> {
        if self.grid_hash == hash {
            Ok(())
        } else {
            Err(Error::GridMismatch { expected: self.grid_hash.clone(), actual: hash.to_string() })
        }
    }
}

pub fn global_flow_out_min(region: &RegionEstimate) -> f64 {
    region.facets.iter().map(|f| f.value).fold(f64::INFINITY, f64::min)
}

/// Sign of `δ̇_kj` per edge, with zero mapped to `+1`.
pub fn signature(ssm: &StateSpaceMatrices, x: &[f64]) -> Vec<i8> {
    ssm.edge_rates(x).iter().map(|r| if *r < 0.0 { -1 } else { 1 }).collect()
}

/// Counts sampled points of the patches `{V = V^σ_e, sign δ̇_e = σ}` that
/// sit on another edge's facet while flowing out of the polytope.
pub fn closedness_violations(lf: &LyapunovFunction, facets: &[FacetMinimum], opts: &GeometryOptions) -> usize {
    let Some(chol) = lf.q22.as_ref() else { return usize::MAX };
    let ne = lf.ssm.n_edges();
    if ne < 2 {
        return 0;
    }
    let m = lf.velocity.len();
    let per_facet = (opts.patch_density / (2 * (ne - 1))).max(1);
    let directions = m.max(1) * 4;
    let angle_samples = (per_facet / (2 * directions)).max(1);
    let charts: Vec<FacetChart> =
        (0..ne).flat_map(|p| [1i8, -1].map(|s| FacetChart::new(lf, p, s))).collect();

    facets
        .par_iter()
        .map(|patch| {
            let level = patch.value;
            let sigma = patch.sign;
            let mut count = 0;
            for chart in charts.iter().filter(|c| c.edge != patch.edge) {
                for i in 0..angle_samples {
                    let theta = chart.angles(&chart.seed(i));
                    if !chart.admissible(&lf.ssm, &theta) {
                        continue;
                    }
                    let centre = lf.best_velocity(chol, &theta);
                    let base = lf.value(&lf.state(&theta, centre.as_slice()));
                    if base > level {
                        continue;
                    }
                    for j in 0..directions {
                        let h = halton(j, m);
                        let d = DVector::from_fn(m, |k, _| 2.0 * h[k] - 1.0 + if k == 0 { 1e-3 } else { 0.0 });
                        let curvature = 0.5 * d.dot(&(chol.l() * chol.l().transpose() * &d));
                        let t = ((level - base) / curvature).sqrt();
                        for w in [&centre + &d * t, &centre - &d * t] {
                            let x = lf.state(&theta, w.as_slice());
                            let rates = lf.ssm.edge_rates(&x);
                            let on_patch = (if rates[patch.edge] < 0.0 { -1 } else { 1 }) == sigma;
                            if on_patch && f64::from(chart.sign) * rates[chart.edge] >= 0.0 {
                                count += 1;
                            }
                        }
                    }
                }
            }
            count
        })
        .sum()
}

/// Computes all `2|E|` facet minima and the closedness verdict.
pub fn build_region_estimate(lf: &LyapunovFunction, grid_hash: &str, opts: &GeometryOptions) -> Result<RegionEstimate> {
    let pairs: Vec<(usize, i8)> = (0..lf.ssm.n_edges()).flat_map(|e| [(e, 1i8), (e, -1)]).collect();
    let facets = pairs
        .par_iter()
        .map(|&(e, s)| facet_minimum(lf, e, s, opts))
        .collect::<Result<Vec<_>>>()?;
    let violations = closedness_violations(lf, &facets, opts);
    let v_min = facets.iter().map(|f| f.value).fold(f64::INFINITY, f64::min);
    Ok(RegionEstimate { grid_hash: grid_hash.to_string(), facets, v_min, closed: violations == 0, closedness_violations: violations })
}

/// Two-coordinate slice of state space; all other coordinates sit at the
/// equilibrium. Written as `delta:<bus>=lo:hi,omega:<bus>=lo:hi` with
/// absolute angles for `delta` axes.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneSpec {
    pub axes: [Axis; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub kind: AxisKind,
    pub bus: i64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AxisKind {
    Delta,
    Omega,
}

impl std::str::FromStr for PlaneSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("plane spec `{s}`, expected delta:<bus>=lo:hi,omega:<bus>=lo:hi"));
        let axes: Vec<Axis> = s
            .split(',')
            .map(|part| {
                let (head, range) = part.trim().split_once('=').ok_or_else(bad)?;
                let (kind, bus) = head.split_once(':').ok_or_else(bad)?;
                let kind = match kind {
                    "delta" => AxisKind::Delta,
                    "omega" => AxisKind::Omega,
                    _ => return Err(bad()),
                };
                let bus = bus.parse().map_err(|_| bad())?;
                let (lo, hi) = range.split_once(':').ok_or_else(bad)?;
                let lo: f64 = parse_angle(lo).ok_or_else(bad)?;
                let hi: f64 = parse_angle(hi).ok_or_else(bad)?;
                if !(lo < hi) {
                    return Err(bad());
                }
                Ok(Axis { kind, bus, lo, hi })
            })
            .collect::<Result<_>>()?;
        let axes: [Axis; 2] = axes.try_into().map_err(|_| bad())?;
        if axes[0].kind == axes[1].kind && axes[0].bus == axes[1].bus {
            return Err(bad());
        }
        Ok(PlaneSpec { axes })
    }
}

/// Accepts plain numbers and multiples of `pi` such as `-7pi/6` or `pi`.
fn parse_angle(s: &str) -> Option<f64> {
    let s = s.trim();
    if let Ok(v) = s.parse() {
        return Some(v);
    }
    let (num, den) = match s.split_once('/') {
        Some((n, d)) => (n, d.parse::<f64>().ok()?),
        None => (s, 1.0),
    };
    let coef = num.strip_suffix("pi")?;
    let coef = match coef {
        "" | "+" => 1.0,
        "-" => -1.0,
        c => c.parse().ok()?,
    };
    Some(coef * PI / den)
}

impl PlaneSpec {
    /// State coordinate and offset for each axis; `delta` axes are absolute
    /// angles, converted to deviations from `sep_angles`.
    pub fn coordinates(&self, grid: &crate::grid::GridModel, sep_angles: &[f64]) -> Result<[(usize, f64); 2]> {
        let layout = crate::state_space::Layout { n: grid.n(), m: grid.n_gen() };
        let mut out = [(0, 0.0); 2];
        for (slot, axis) in out.iter_mut().zip(&self.axes) {
            let k = grid.bus_index(axis.bus).ok_or(Error::UnknownBus(axis.bus))?;
            *slot = match axis.kind {
                AxisKind::Delta => (layout.angle_index(k), sep_angles[k]),
                AxisKind::Omega if k < layout.m => (layout.velocity_index(k), 0.0),
                AxisKind::Omega => {
                    return Err(Error::InvalidArgument(format!("bus {} has no velocity state", axis.bus)))
                }
            };
        }
        Ok(out)
    }

    /// Row-major grid of `(c1, c2, state)` with `resolution` points per axis,
    /// endpoints included (a single point sits at the lower corner).
    pub fn states(
        &self,
        grid: &crate::grid::GridModel,
        sep_angles: &[f64],
        resolution: usize,
    ) -> Result<Vec<(f64, f64, Vec<f64>)>> {
        if resolution == 0 {
            return Err(Error::InvalidArgument("resolution must be positive".into()));
        }
        let coords = self.coordinates(grid, sep_angles)?;
        let dim = grid.state_dim();
        let at = |axis: &Axis, i: usize| {
            if resolution == 1 {
                axis.lo
            } else {
                axis.lo + (axis.hi - axis.lo) * i as f64 / (resolution - 1) as f64
            }
        };
        let mut out = Vec::with_capacity(resolution * resolution);
        for j in 0..resolution {
            let c2 = at(&self.axes[1], j);
            for i in 0..resolution {
                let c1 = at(&self.axes[0], i);
                let mut x = vec![0.0; dim];
                x[coords[0].0] = c1 - coords[0].1;
                x[coords[1].0] = c2 - coords[1].1;
                out.push((c1, c2, x));
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::grid::fixtures::*;
    use crate::lmi::{solve_lmi, tests::system, SolverOptions};
    use proptest::prelude::*;

    fn build(g: &crate::grid::GridModel) -> LyapunovFunction {
        let ssm = system(g);
        let cert = solve_lmi(&ssm, &SolverOptions::default()).unwrap();
        LyapunovFunction::new(&ssm, &cert).unwrap()
    }

    pub(crate) fn two_bus_function() -> &'static LyapunovFunction {
        static CELL: std::sync::OnceLock<LyapunovFunction> = std::sync::OnceLock::new();
        CELL.get_or_init(|| build(&two_bus()))
    }

    pub(crate) fn three_bus_function() -> &'static LyapunovFunction {
        static CELL: std::sync::OnceLock<LyapunovFunction> = std::sync::OnceLock::new();
        CELL.get_or_init(|| build(&three_bus()))
    }

    #[test]
    fn potential_matches_direct_formula() {
        for &(u, s) in &[(0.3f64, 0.5f64), (-2.0, 0.2), (1e-4, 0.7), (3.0, -0.4)] {
            let direct = -(s + u).cos() - (s + u) * s.sin() + s.cos() + s * s.sin();
            assert!((potential(u, s) - direct).abs() < 1e-12);
        }
        assert_eq!(potential(0.0, 0.4), 0.0);
    }

    #[test]
    fn value_and_gradient_vanish_at_equilibrium() {
        let lf = three_bus_function();
        assert_eq!(lf.value(&[0.0; 5]), 0.0);
        assert!(lf.gradient(&[0.0; 5]).iter().all(|g| g.abs() < 1e-12));
        assert!(lf.derivative(&[0.0; 5]).abs() < 1e-15);
    }

    #[test]
    fn two_bus_facet_points() {
        let lf = two_bus_function();
        let opts = GeometryOptions::default();
        let plus = facet_minimum(&lf, 0, 1, &opts).unwrap();
        let minus = facet_minimum(&lf, 0, -1, &opts).unwrap();
        let sep = PI / 6.0;
        let (e_plus, e_minus) = (lf.ssm.edge_angles(&plus.argmin)[0], lf.ssm.edge_angles(&minus.argmin)[0]);
        assert!((e_plus - 5.0 * PI / 6.0).abs() < 1e-12, "{e_plus}");
        assert!((e_minus + 7.0 * PI / 6.0).abs() < 1e-12, "{e_minus}");
        assert!(plus.argmin[1].abs() < 1e-9 && minus.argmin[1].abs() < 1e-9);
        assert!((lf.value(&plus.argmin) - plus.value).abs() < 1e-14);
        assert!(minus.value > plus.value);
        assert_eq!(classify_facet(&lf.ssm, 0, 1, &plus.argmin), FacetStatus::FlowOut);
        // Lur'e part at the facet point, with zero velocity
        let q = &lf.cert.q;
        let u = 5.0 * PI / 6.0 - sep;
        let expected = 0.125 * u * u * (q[(0, 0)] - 2.0 * q[(0, 2)] + q[(2, 2)]) + lf.cert.k[0] * potential(u, sep);
        assert!((plus.value - expected).abs() < 1e-12);
    }

    #[test]
    fn facet_classification() {
        let lf = two_bus_function();
        let x = [5.0 * PI / 6.0 - PI / 6.0, 0.5, 0.0];
        assert_eq!(classify_facet(&lf.ssm, 0, 1, &x), FacetStatus::FlowOut);
        let x = [5.0 * PI / 6.0 - PI / 6.0, -0.5, 0.0];
        assert_eq!(classify_facet(&lf.ssm, 0, 1, &x), FacetStatus::FlowIn);
        assert_eq!(classify_facet(&lf.ssm, 0, -1, &x), FacetStatus::Interior);
        assert!(in_polytope(&lf.ssm, &[0.0, 9.0, 0.0]));
        assert!(!in_polytope(&lf.ssm, &[PI - PI / 6.0, 0.0, 0.0]));
    }

    #[test]
    fn two_bus_region_closed() {
        let lf = two_bus_function();
        let r = build_region_estimate(&lf, "h", &GeometryOptions::default()).unwrap();
        assert_eq!(r.facets.len(), 2);
        assert!(r.closed);
        assert_eq!(r.v_min, r.facet(0, 1).value);
        assert!(global_flow_out_min(&r) <= r.facet(0, -1).value);
    }

    #[test]
    fn plane_spec_parsing() {
        let p: PlaneSpec = "delta:1=-7pi/6:5pi/6,omega:1=-3:3".parse().unwrap();
        assert_eq!(p.axes[0].kind, AxisKind::Delta);
        assert!((p.axes[0].lo + 7.0 * PI / 6.0).abs() < 1e-15);
        assert_eq!(p.axes[1].hi, 3.0);
        assert!("delta:1=0:1".parse::<PlaneSpec>().is_err());
        assert!("delta:1=1:0,omega:1=0:1".parse::<PlaneSpec>().is_err());
        let g = two_bus();
        let states = p.states(&g, &[PI / 6.0, 0.0], 3).unwrap();
        assert_eq!(states.len(), 9);
        // centre of the 3x3 grid: δ = -π/6, ω = 0
        assert!((states[4].0 + PI / 6.0).abs() < 1e-15);
        assert!((states[4].2[0] + PI / 3.0).abs() < 1e-15);
        assert_eq!(states[4].2[1], 0.0);
    }

    proptest! {
        #[test]
        fn shift_invariance(x in proptest::collection::vec(-3.0f64..3.0, 5), c in -4.0f64..4.0) {
            let lf = three_bus_function();
            let s = lf.ssm.layout.shift_pattern();
            let y: Vec<f64> = x.iter().zip(s.iter()).map(|(v, s)| v + c * s).collect();
            prop_assert!((lf.value(&x) - lf.value(&y)).abs() < 1e-8 * (1.0 + lf.value(&x).abs()));
        }

        #[test]
        fn factored_derivative_matches_chain_rule(x in proptest::collection::vec(-2.5f64..2.5, 5)) {
            let lf = three_bus_function();
            let a = lf.derivative(&x);
            let b = lf.derivative_direct(&x);
            prop_assert!((a - b).abs() <= 1e-8 * (1.0 + b.abs()), "{} vs {}", a, b);
        }

        #[test]
        fn sector_bound_in_polytope(u in -4.0f64..4.0, s in -1.4f64..1.4) {
            if (u + 2.0 * s).abs() <= PI {
                prop_assert!(sector_term(u, s) >= -1e-15);
            }
        }
    }
}
