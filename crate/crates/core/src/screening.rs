//! Certification of fault-cleared states: the geometry-based rule, the
//! single-threshold `V_min` rule, and a closest-UEP energy baseline.

use std::f64::consts::PI;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::equilibrium::{solve_sep_with, NewtonOptions};
use crate::error::{Error, Result};
use crate::geometry::{in_polytope, signature, LyapunovFunction, RegionEstimate};
use crate::simulate::{energy, simulate_outcome, Outcome, SimOptions, SimulationSummary};
use crate::system::System;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Geometry,
    Vmin,
    Energy,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "geometry" => Ok(Method::Geometry),
            "vmin" => Ok(Method::Vmin),
            "energy" => Ok(Method::Energy),
            other => Err(Error::InvalidArgument(format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Status {
    CertifiedStable,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub method: Method,
    pub status: Status,
    /// `threshold - value`, positive iff certified (for states inside P).
    pub margin: f64,
    pub value: f64,
    pub threshold: f64,
    pub inside_polytope: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub signature: Option<Vec<i8>>,
    /// Edges whose rate was exactly zero and were given sign `+`.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub zero_rate_edges: Vec<usize>,
    /// Geometry verdict delegated to `V_min` because the region is not closed.
    #[serde(skip_serializing_if = "std::ops::Not::not", default)]
    pub downgraded: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flag: Option<String>,
}

impl Verdict {
    pub fn certified(&self) -> bool {
        self.status == Status::CertifiedStable
    }

    fn new(method: Method, value: f64, threshold: f64, inside: bool) -> Self {
        let status = if inside && value < threshold { Status::CertifiedStable } else { Status::Inconclusive };
        Verdict {
            method,
            status,
            margin: threshold - value,
            value,
            threshold,
            inside_polytope: inside,
            signature: None,
            zero_rate_edges: Vec::new(),
            downgraded: false,
            flag: None,
        }
    }
}

pub fn certify_vmin(lf: &LyapunovFunction, region: &RegionEstimate, x0: &[f64]) -> Verdict {
    Verdict::new(Method::Vmin, lf.value(x0), region.v_min, in_polytope(&lf.ssm, x0))
}

/// Threshold `min_e V^{σ_e}_e` selected by the sign pattern of `δ̇` at `x0`.
pub fn certify_geometry(lf: &LyapunovFunction, region: &RegionEstimate, x0: &[f64]) -> Verdict {
    let sig = signature(&lf.ssm, x0);
    let zero_rate_edges: Vec<usize> =
        lf.ssm.edge_rates(x0).iter().enumerate().filter(|(_, r)| **r == 0.0).map(|(e, _)| e).collect();
    let mut verdict = if region.closed {
        let mut v = Verdict::new(Method::Geometry, lf.value(x0), region.threshold(&sig), in_polytope(&lf.ssm, x0));
        v.method = Method::Geometry;
        v
    } else {
        let mut v = certify_vmin(lf, region, x0);
        v.method = Method::Geometry;
        v.downgraded = true;
        v
    };
    verdict.signature = Some(sig);
    verdict.zero_rate_edges = zero_rate_edges;
    verdict
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Uep {
    /// Bus angles in internal order, last bus at zero.
    pub angles: Vec<f64>,
    pub edge_differences: Vec<f64>,
    /// Baseline energy at the UEP with zero velocities.
    pub energy: f64,
}

pub const UEP_EDGE_LIMIT: usize = 6;

/// Multistart Newton from every pattern of edge targets in
/// `{δ*, π - δ*, -π - δ*}`, mapped to bus angles by least squares.
pub fn find_ueps(sys: &System) -> Result<Vec<Uep>> {
    let g = &sys.grid;
    let ne = g.n_edges();
    if ne > UEP_EDGE_LIMIT {
        return Err(Error::ScaleGuard { edges: ne, limit: UEP_EDGE_LIMIT });
    }
    let sep = &sys.sep.edge_differences;
    let pinv = sys
        .ssm
        .incidence
        .clone()
        .pseudo_inverse(1e-12)
        .map_err(|e| Error::InvalidGrid(e.to_string()))?;
    let opts = NewtonOptions { max_iterations: 60, ..Default::default() };
    let mut found: Vec<Uep> = Vec::new();
    for code in 0..3usize.pow(ne as u32) {
        let mut c = code;
        let target = DVector::from_fn(ne, |e, _| {
            let choice = c % 3;
            c /= 3;
            match choice {
                0 => sep[e],
                1 => PI - sep[e],
                _ => -PI - sep[e],
            }
        });
        let guess = &pinv * target;
        let Ok(root) = solve_sep_with(g, guess.as_slice(), g.n() - 1, &opts) else { continue };
        let diffs = &root.edge_differences;
        let is_sep_copy = diffs.iter().zip(sep).all(|(d, s)| {
            let r = (d - s) / (2.0 * PI);
            (r - r.round()).abs() * 2.0 * PI < 1e-6
        });
        if is_sep_copy {
            continue;
        }
        if found.iter().any(|u| u.edge_differences.iter().zip(diffs).all(|(a, b)| (a - b).abs() < 1e-6)) {
            continue;
        }
        let x = sys.ssm.layout.from_absolute(&root.angles, &vec![0.0; g.n_gen()], &sys.sep);
        found.push(Uep { energy: energy(sys, &x), angles: root.angles, edge_differences: diffs.clone() });
    }
    found.sort_by(|a, b| a.energy.total_cmp(&b.energy));
    Ok(found)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyBaseline {
    pub ueps: Vec<Uep>,
    /// Smallest UEP energy, `None` when no UEP was found.
    pub threshold: Option<f64>,
}

impl EnergyBaseline {
    pub fn new(sys: &System) -> Result<Self> {
        let ueps = find_ueps(sys)?;
        let threshold = ueps.first().map(|u| u.energy);
        Ok(EnergyBaseline { ueps, threshold })
    }
}

/// Closest-UEP rule `W(x0) < min W(UEP)`, restricted to the polytope so the
/// sublevel component around the equilibrium is selected.
pub fn certify_energy(sys: &System, baseline: &EnergyBaseline, x0: &[f64]) -> Verdict {
    let value = energy(sys, x0);
    let inside = in_polytope(&sys.ssm, x0);
    match baseline.threshold {
        Some(t) => Verdict::new(Method::Energy, value, t, inside),
        None => {
            let mut v = Verdict::new(Method::Energy, value, f64::NEG_INFINITY, inside);
            v.flag = Some("no UEPs found".into());
            v
        }
    }
}

/// Immutable inputs shared by all screening workers.
pub struct Screener<'a> {
    pub sys: &'a System,
    pub lf: &'a LyapunovFunction,
    pub region: &'a RegionEstimate,
    pub baseline: Option<&'a EnergyBaseline>,
}

#[derive(Clone, Debug)]
pub struct ScreenOptions {
    pub methods: Vec<Method>,
    /// Horizon and options for the simulation cross-check, if enabled.
    pub simulate: Option<(f64, SimOptions)>,
}

impl Default for ScreenOptions {
    fn default() -> Self {
        ScreenOptions { methods: vec![Method::Geometry, Method::Vmin, Method::Energy], simulate: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScreenRow {
    pub index: usize,
    pub verdicts: Vec<Verdict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    pub certified: usize,
    /// Certified states that diverged in simulation.
    pub unsound: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScreeningReport {
    pub grid_hash: String,
    pub region_closed: bool,
    pub total: usize,
    pub errors: usize,
    pub summary: Vec<MethodSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub simulated_converged: Option<usize>,
    pub rows: Vec<ScreenRow>,
}

impl Screener<'_> {
    pub fn verdict(&self, method: Method, x0: &[f64]) -> Verdict {
        match method {
            Method::Geometry => certify_geometry(self.lf, self.region, x0),
            Method::Vmin => certify_vmin(self.lf, self.region, x0),
            Method::Energy => match self.baseline {
                Some(b) => certify_energy(self.sys, b, x0),
                None => {
                    let mut v = Verdict::new(Method::Energy, energy(self.sys, x0), f64::NEG_INFINITY, false);
                    v.flag = Some("energy baseline not computed".into());
                    v
                }
            },
        }
    }

    fn row(&self, index: usize, x0: &[f64], opts: &ScreenOptions) -> ScreenRow {
        if x0.len() != self.sys.dim() || x0.iter().any(|v| !v.is_finite()) {
            return ScreenRow {
                index,
                verdicts: Vec::new(),
                simulation: None,
                error: Some(format!("state must have {} finite entries", self.sys.dim())),
            };
        }
        let verdicts = opts.methods.iter().map(|m| self.verdict(*m, x0)).collect();
        let (simulation, error) = match &opts.simulate {
            Some((horizon, sim)) => match simulate_outcome(self.sys, x0, *horizon, sim) {
                Ok(s) => (Some(s), None),
                Err(e) => (None, Some(e.to_string())),
            },
            None => (None, None),
        };
        ScreenRow { index, verdicts, simulation, error }
    }

    /// Screens every state; rows keep input order.
    pub fn screen_batch(&self, states: &[Vec<f64>], opts: &ScreenOptions) -> ScreeningReport {
        let rows: Vec<ScreenRow> = states.par_iter().enumerate().map(|(i, x)| self.row(i, x, opts)).collect();
        let summary = opts
            .methods
            .iter()
            .enumerate()
            .map(|(k, &method)| {
                let certified = rows.iter().filter(|r| r.verdicts.get(k).is_some_and(Verdict::certified));
                let unsound = certified
                    .clone()
                    .filter(|r| r.simulation.as_ref().is_some_and(|s| s.outcome == Outcome::Diverged))
                    .count();
                MethodSummary { method, certified: certified.count(), unsound }
            })
            .collect();
        let simulated_converged = opts.simulate.as_ref().map(|_| {
            rows.iter().filter(|r| r.simulation.as_ref().is_some_and(|s| s.outcome == Outcome::Converged)).count()
        });
        ScreeningReport {
            grid_hash: self.sys.grid_hash.clone(),
            region_closed: self.region.closed,
            total: rows.len(),
            errors: rows.iter().filter(|r| r.error.is_some()).count(),
            summary,
            simulated_converged,
            rows,
        }
    }
}

/// Region labels, innermost first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionLabel {
    Vmin,
    Geometry,
    Polytope,
    Outside,
}

impl RegionLabel {
    pub fn as_str(&self) -> &'static str {
        match self {
            RegionLabel::Vmin => "vmin",
            RegionLabel::Geometry => "geometry",
            RegionLabel::Polytope => "polytope",
            RegionLabel::Outside => "outside",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlaneSample {
    pub c1: f64,
    pub c2: f64,
    pub label: RegionLabel,
}

/// Labels a plane grid by the innermost estimate containing each point.
pub fn sample_region_boundary(
    sys: &System,
    lf: &LyapunovFunction,
    region: &RegionEstimate,
    plane: &crate::geometry::PlaneSpec,
    resolution: usize,
) -> Result<Vec<PlaneSample>> {
    let states = plane.states(&sys.grid, &sys.sep.angles, resolution)?;
    Ok(states
        .par_iter()
        .map(|(c1, c2, x)| {
            let label = if !in_polytope(&sys.ssm, x) {
                RegionLabel::Outside
            } else if certify_vmin(lf, region, x).certified() {
                RegionLabel::Vmin
            } else if certify_geometry(lf, region, x).certified() {
                RegionLabel::Geometry
            } else {
                RegionLabel::Polytope
            };
            PlaneSample { c1: *c1, c2: *c2, label }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_region_estimate, GeometryOptions};
    use crate::grid::fixtures::*;
    use crate::grid::GridModel;
    use crate::lmi::{solve_lmi, SolverOptions};

    struct Fixture {
        sys: System,
        lf: LyapunovFunction,
        region: RegionEstimate,
        baseline: EnergyBaseline,
    }

    fn fixture(g: GridModel) -> Fixture {
        let sys = System::new(g).unwrap();
        let cert = solve_lmi(&sys.ssm, &SolverOptions::default()).unwrap();
        let lf = LyapunovFunction::new(&sys.ssm, &cert).unwrap();
        let region = build_region_estimate(&lf, &sys.grid_hash, &GeometryOptions::default()).unwrap();
        let baseline = EnergyBaseline::new(&sys).unwrap();
        Fixture { sys, lf, region, baseline }
    }

    fn two() -> &'static Fixture {
        static CELL: std::sync::OnceLock<Fixture> = std::sync::OnceLock::new();
        CELL.get_or_init(|| fixture(two_bus()))
    }

    #[test]
    fn open_region_downgrades_to_vmin() {
        let f = fixture(three_bus());
        assert!(!f.region.closed);
        for x in [[0.1, 0.2, 0.3, -0.2, 0.0], [1.0, -0.5, 1.5, 0.5, 0.2], [0.0; 5]] {
            let g = certify_geometry(&f.lf, &f.region, &x);
            let v = certify_vmin(&f.lf, &f.region, &x);
            assert!(g.downgraded);
            assert_eq!((g.status, g.threshold), (v.status, v.threshold));
        }
    }

    #[test]
    fn sublevel_below_global_minimum_is_certified() {
        use rand::{Rng, SeedableRng};
        let f = two();
        let floor = crate::geometry::global_flow_out_min(&f.region);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut inside = 0;
        for _ in 0..10_000 {
            let x = [rng.gen_range(-3.7..2.7), rng.gen_range(-3.0..3.0), 0.0];
            if !in_polytope(&f.sys.ssm, &x) {
                continue;
            }
            if f.lf.value(&x) < floor {
                inside += 1;
                assert!(certify_geometry(&f.lf, &f.region, &x).certified(), "{x:?}");
            }
            if certify_vmin(&f.lf, &f.region, &x).certified() {
                assert!(certify_geometry(&f.lf, &f.region, &x).certified(), "{x:?}");
            }
        }
        assert!(inside > 100);
    }

    #[test]
    fn two_bus_ueps() {
        let f = two();
        let diffs: Vec<f64> = f.baseline.ueps.iter().map(|u| u.edge_differences[0]).collect();
        assert_eq!(diffs.len(), 2, "{diffs:?}");
        assert!((diffs[0] - 5.0 * PI / 6.0).abs() < 1e-9);
        assert!((diffs[1] + 7.0 * PI / 6.0).abs() < 1e-9);
        let expected = -0.4 * (2.0 * PI / 3.0) + 0.8 * 3f64.sqrt();
        assert!((f.baseline.threshold.unwrap() - expected).abs() < 1e-9);
    }

    #[test]
    fn equilibrium_certified_by_all() {
        let f = two();
        let s = Screener { sys: &f.sys, lf: &f.lf, region: &f.region, baseline: Some(&f.baseline) };
        for m in [Method::Geometry, Method::Vmin, Method::Energy] {
            let v = s.verdict(m, &[0.0; 3]);
            assert!(v.certified(), "{v:?}");
            assert_eq!(v.margin, v.threshold);
        }
        let g = certify_geometry(&f.lf, &f.region, &[0.0; 3]);
        assert_eq!(g.zero_rate_edges, vec![0]);
    }

    #[test]
    fn outside_polytope_inconclusive() {
        let f = two();
        // actual angle π
        let x = [PI - PI / 6.0, 0.0, 0.0];
        assert_eq!(certify_geometry(&f.lf, &f.region, &x).status, Status::Inconclusive);
        assert_eq!(certify_vmin(&f.lf, &f.region, &x).status, Status::Inconclusive);
    }

    #[test]
    fn geometry_only_point_on_negative_ray() {
        let f = two();
        let (lo, hi) = (f.region.facet(0, 1).value, f.region.facet(0, -1).value);
        assert!(hi > lo);
        // bisect along ω < 0 for V = (lo + hi) / 2
        let target = 0.5 * (lo + hi);
        let (mut a, mut b) = (0.0, -20.0);
        for _ in 0..80 {
            let mid = 0.5 * (a + b);
            if f.lf.value(&[0.0, mid, 0.0]) < target {
                a = mid;
            } else {
                b = mid;
            }
        }
        let x = [0.0, a, 0.0];
        assert!(certify_geometry(&f.lf, &f.region, &x).certified());
        assert!(!certify_vmin(&f.lf, &f.region, &x).certified());
    }

    #[test]
    fn vmin_boundary_is_strict() {
        let f = two();
        let argmin = f.region.facet(0, 1).argmin.clone();
        let v = certify_vmin(&f.lf, &f.region, &argmin);
        assert_eq!(v.status, Status::Inconclusive);
    }

    #[test]
    fn batch_matches_singletons() {
        let f = two();
        let s = Screener { sys: &f.sys, lf: &f.lf, region: &f.region, baseline: Some(&f.baseline) };
        let states = vec![vec![0.0; 3], vec![PI, 0.0, 0.0], vec![0.3, -1.2, 0.0], vec![1.0]];
        let report = s.screen_batch(&states, &ScreenOptions::default());
        assert_eq!(report.total, 4);
        assert_eq!(report.errors, 1);
        for (row, x) in report.rows.iter().zip(&states).take(3) {
            assert_eq!(row.verdicts[0], certify_geometry(&f.lf, &f.region, x));
            assert_eq!(row.verdicts[1], certify_vmin(&f.lf, &f.region, x));
        }
        assert!(s.screen_batch(&[], &ScreenOptions::default()).rows.is_empty());
    }

    #[test]
    fn scale_guard() {
        // complete graph on 5 buses has 10 edges
        let mut buses = String::new();
        for id in 1..=5 {
            if id == 1 {
                buses.push_str(r#"{"id":1,"kind":"generator","m":1,"d":1,"P":0}"#);
            } else {
                buses.push_str(&format!(r#",{{"id":{id},"kind":"load","d":1,"P":0}}"#));
            }
        }
        let mut lines = Vec::new();
        for i in 1..=5 {
            for j in i + 1..=5 {
                lines.push(format!(r#"{{"from":{i},"to":{j},"B":1}}"#));
            }
        }
        let text = format!(r#"{{"buses":[{buses}],"lines":[{}]}}"#, lines.join(","));
        let sys = System::new(crate::grid::parse_grid(&text).unwrap()).unwrap();
        assert!(matches!(find_ueps(&sys), Err(Error::ScaleGuard { edges: 10, .. })));
    }

    #[test]
    fn symmetric_ueps_for_zero_injection() {
        let text = r#"{"buses":[
            {"id":1,"kind":"generator","m":1,"d":1,"P":0},
            {"id":2,"kind":"generator","m":1,"d":1,"P":0},
            {"id":3,"kind":"generator","m":1,"d":1,"P":0}],
            "lines":[{"from":1,"to":2,"B":1},{"from":2,"to":3,"B":1},{"from":1,"to":3,"B":1}]}"#;
        let sys = System::new(crate::grid::parse_grid(text).unwrap()).unwrap();
        let ueps = find_ueps(&sys).unwrap();
        assert!(!ueps.is_empty());
        let wraps = |a: f64, b: f64| {
            let r = (a - b) / (2.0 * PI);
            (r - r.round()).abs() < 1e-6
        };
        // relabelling buses maps the UEP set onto itself (modulo 2π per edge)
        for u in &ueps {
            for perm in [[1, 0, 2], [0, 2, 1], [2, 1, 0], [1, 2, 0], [2, 0, 1]] {
                let theta: Vec<f64> = perm.iter().map(|&k| u.angles[k]).collect();
                let d = sys.grid.edge_differences(&theta);
                let matched =
                    ueps.iter().any(|v| v.edge_differences.iter().zip(&d).all(|(a, b)| wraps(*a, *b)));
                assert!(matched, "{:?} relabelled {d:?} missing", u.edge_differences);
            }
        }
    }
}
