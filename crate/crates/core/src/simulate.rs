//! Time-domain ground truth for the swing equations
//! `m_k δ̈_k + d_k δ̇_k = -Σ_j a_kj (sin δ_kj - sin δ*_kj)` on generators and
//! `d_k δ̇_k = -Σ_j a_kj (sin δ_kj - sin δ*_kj)` on loads.

use std::f64::consts::PI;
use std::ops::ControlFlow;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::LyapunovFunction;
use crate::ode::{dopri5, OdeOptions};
use crate::system::System;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    Converged,
    Diverged,
    Undecided,
}

#[derive(Clone, Debug)]
pub struct SimOptions {
    pub rtol: f64,
    pub atol: f64,
    pub sample_dt: f64,
    pub tol_angle: f64,
    pub tol_velocity: f64,
    pub hold: f64,
    pub divergence: f64,
    /// Stop as soon as the outcome is decided.
    pub early_stop: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            rtol: 1e-8,
            atol: 1e-10,
            sample_dt: 0.01,
            tol_angle: 1e-4,
            tol_velocity: 1e-5,
            hold: 5.0,
            divergence: 3.0 * PI,
            early_stop: false,
        }
    }
}

/// A facet of the polytope crossed outward between two samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FacetCrossing {
    pub time: f64,
    pub edge: usize,
    pub sign: i8,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    /// Deviation states `x(t)` on the uniform sample grid.
    pub states: Vec<Vec<f64>>,
    /// Angle rates of every bus (generators then loads) at each sample.
    pub bus_rates: Vec<Vec<f64>>,
    pub v_values: Option<Vec<f64>>,
    pub outcome: Outcome,
    pub crossings: Vec<FacetCrossing>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SimulationSummary {
    pub outcome: Outcome,
    pub end_time: f64,
    pub crossings: Vec<FacetCrossing>,
}

/// Flat swing-equation right-hand side in deviation coordinates.
struct Swing {
    n: usize,
    m: usize,
    edges: Vec<(usize, usize, f64, f64)>,
    inertia: Vec<f64>,
    damping: Vec<f64>,
    acc: Vec<f64>,
}

impl Swing {
    fn new(sys: &System) -> Self {
        let g = &sys.grid;
        let edges = g
            .lines()
            .iter()
            .zip(&sys.sep.edge_differences)
            .map(|(l, d)| (l.from, l.to, l.coupling, *d))
            .collect();
        Swing {
            n: g.n(),
            m: g.n_gen(),
            edges,
            inertia: g.buses()[..g.n_gen()].iter().map(|b| b.inertia.unwrap_or(1.0)).collect(),
            damping: g.buses().iter().map(|b| b.damping).collect(),
            acc: vec![0.0; g.n()],
        }
    }

    /// State layout `[θ_gen, ω, θ_load]` (deviations), as elsewhere.
    fn angle(&self, y: &[f64], k: usize) -> f64 {
        if k < self.m {
            y[k]
        } else {
            y[k + self.m]
        }
    }

    fn rhs(&mut self, y: &[f64], dy: &mut [f64]) {
        self.acc.iter_mut().for_each(|a| *a = 0.0);
        for &(i, j, a, sep) in &self.edges {
            let d = sep + self.angle(y, i) - self.angle(y, j);
            let flow = a * (d.sin() - sep.sin());
            self.acc[i] -= flow;
            self.acc[j] += flow;
        }
        let m = self.m;
        for k in 0..m {
            dy[k] = y[m + k];
            dy[m + k] = (self.acc[k] - self.damping[k] * y[m + k]) / self.inertia[k];
        }
        for k in m..self.n {
            dy[k + m] = self.acc[k] / self.damping[k];
        }
    }
}

/// Sample bookkeeping shared by the recording and summary paths.
struct Monitor<'a> {
    opts: &'a SimOptions,
    /// `(from, to)` state indices and `2δ*` per edge.
    edges: Vec<(usize, usize, f64)>,
    dev: Vec<f64>,
    settled_since: Option<f64>,
    crossings: Vec<FacetCrossing>,
    was_inside: bool,
    outcome: Outcome,
}

impl<'a> Monitor<'a> {
    fn new(sys: &'a System, opts: &'a SimOptions, x0: &[f64]) -> Self {
        let layout = sys.ssm.layout;
        let edges = sys
            .grid
            .lines()
            .iter()
            .zip(&sys.ssm.sep_edges)
            .map(|(l, s)| (layout.angle_index(l.from), layout.angle_index(l.to), 2.0 * s))
            .collect::<Vec<_>>();
        Monitor {
            opts,
            dev: vec![0.0; edges.len()],
            edges,
            settled_since: None,
            crossings: Vec::new(),
            was_inside: crate::geometry::in_polytope(&sys.ssm, x0),
            outcome: Outcome::Undecided,
        }
    }

    /// Returns `Break` once the outcome is decided and early stopping is on.
    fn observe(&mut self, t: f64, x: &[f64], rates: &[f64]) -> ControlFlow<()> {
        let mut outside = None;
        for (e, &(i, j, twice)) in self.edges.iter().enumerate() {
            let u = x[i] - x[j];
            self.dev[e] = u;
            if outside.is_none() && (u + twice).abs() > PI {
                outside = Some((e, u));
            }
        }
        let inside = outside.is_none();
        if let (true, Some((edge, u))) = (self.was_inside, outside) {
            self.crossings.push(FacetCrossing { time: t, edge, sign: if u > 0.0 { 1 } else { -1 } });
        }
        let dev = &self.dev;
        self.was_inside = inside;
        if dev.iter().any(|u| u.abs() > self.opts.divergence) {
            self.outcome = Outcome::Diverged;
            return if self.opts.early_stop { ControlFlow::Break(()) } else { ControlFlow::Continue(()) };
        }
        let settled = settled_at(dev, rates, self.opts.tol_angle, self.opts.tol_velocity);
        if let Some(slipped) = settled {
            let since = *self.settled_since.get_or_insert(t);
            if t - since >= self.opts.hold - 1e-9 && self.outcome != Outcome::Diverged {
                self.outcome = if slipped { Outcome::Diverged } else { Outcome::Converged };
                if self.opts.early_stop {
                    return ControlFlow::Break(());
                }
            }
        } else {
            self.settled_since = None;
            if self.outcome == Outcome::Converged {
                self.outcome = Outcome::Undecided;
            }
        }
        ControlFlow::Continue(())
    }
}

/// `Some(slipped)` when velocities are small and every edge deviation is
/// within `tol_angle` of a multiple of `2π`; `slipped` marks a nonzero
/// multiple, i.e. a shifted copy of the equilibrium.
fn settled_at(dev: &[f64], rates: &[f64], tol_angle: f64, tol_velocity: f64) -> Option<bool> {
    if rates.iter().any(|r| r.abs() > tol_velocity) {
        return None;
    }
    let mut slipped = false;
    for u in dev {
        let turns = (u / (2.0 * PI)).round();
        if (u - turns * 2.0 * PI).abs() > tol_angle {
            return None;
        }
        slipped |= turns != 0.0;
    }
    Some(slipped)
}

fn bus_rates(m: usize, n: usize, dx: &[f64], out: &mut [f64]) {
    for k in 0..n {
        out[k] = if k < m { dx[k] } else { dx[k + m] };
    }
}

fn run<R>(sys: &System, x0: &[f64], horizon: f64, opts: &SimOptions, mut record: R) -> Result<(Outcome, f64, Vec<FacetCrossing>)>
where
    R: FnMut(f64, &[f64], &[f64]),
{
    let dim = sys.dim();
    if x0.len() != dim {
        return Err(Error::DimensionMismatch(format!("state has {} entries, expected {dim}", x0.len())));
    }
    if !(horizon > 0.0) {
        return Err(Error::InvalidArgument("horizon must be positive".into()));
    }
    let (n, m) = (sys.grid.n(), sys.grid.n_gen());
    // The dynamics only see angle differences; integrate with the last bus
    // gauged to zero and restore the shift on output.
    let pattern = sys.ssm.layout.shift_pattern();
    let shift = x0[sys.ssm.layout.angle_index(n - 1)];
    let x0: Vec<f64> = x0.iter().zip(pattern.iter()).map(|(v, s)| v - shift * s).collect();
    let mut restored = vec![0.0; dim];
    let mut record = |t: f64, x: &[f64], r: &[f64]| {
        for i in 0..dim {
            restored[i] = x[i] + shift * pattern[i];
        }
        record(t, &restored, r)
    };
    let x0 = x0.as_slice();
    let mut swing = Swing::new(sys);
    let mut rhs_buf = vec![0.0; dim];
    let mut rates = vec![0.0; n];
    let mut monitor = Monitor::new(sys, opts, x0);

    swing.rhs(x0, &mut rhs_buf);
    bus_rates(m, n, &rhs_buf, &mut rates);
    record(0.0, x0, &rates);
    let mut flow = monitor.observe(0.0, x0, &rates);

    let mut next = 1usize;
    let mut sample = vec![0.0; dim];
    let ode = OdeOptions { rtol: opts.rtol, atol: opts.atol, ..Default::default() };
    let mut rhs_swing = Swing::new(sys);
    if flow.is_continue() {
        dopri5(
            |_, y, dy| rhs_swing.rhs(y, dy),
            0.0,
            x0,
            horizon,
            &ode,
            |step| {
                loop {
                    let t = next as f64 * opts.sample_dt;
                    if t > step.t1 + 1e-12 || t > horizon + 1e-12 {
                        break;
                    }
                    step.interpolate(t.min(step.t1), &mut sample);
                    swing.rhs(&sample, &mut rhs_buf);
                    bus_rates(m, n, &rhs_buf, &mut rates);
                    record(t, &sample, &rates);
                    next += 1;
                    flow = monitor.observe(t, &sample, &rates);
                    if flow.is_break() {
                        return flow;
                    }
                }
                ControlFlow::Continue(())
            },
        )?;
    }
    let end = (next - 1) as f64 * opts.sample_dt;
    Ok((monitor.outcome, end, monitor.crossings))
}

/// Integrates from `x0` over `[0, horizon]`, recording samples every
/// `opts.sample_dt`.
pub fn integrate(sys: &System, x0: &[f64], horizon: f64, opts: &SimOptions) -> Result<Trajectory> {
    let mut times = Vec::new();
    let mut states = Vec::new();
    let mut rates_log = Vec::new();
    let (outcome, _, crossings) = run(sys, x0, horizon, opts, |t, x, r| {
        times.push(t);
        states.push(x.to_vec());
        rates_log.push(r.to_vec());
    })?;
    Ok(Trajectory { times, states, bus_rates: rates_log, v_values: None, outcome, crossings })
}

/// Outcome only, without storing samples; stops once decided.
pub fn simulate_outcome(sys: &System, x0: &[f64], horizon: f64, opts: &SimOptions) -> Result<SimulationSummary> {
    let opts = SimOptions { early_stop: true, ..opts.clone() };
    let (outcome, end_time, crossings) = run(sys, x0, horizon, &opts, |_, _, _| {})?;
    Ok(SimulationSummary { outcome, end_time, crossings })
}

impl Trajectory {
    pub fn attach_values(&mut self, lf: &LyapunovFunction) {
        self.v_values = Some(self.states.iter().map(|x| lf.value(x)).collect());
    }
}

/// Classifies a recorded trajectory. `Converged` requires the settling
/// condition to hold over the final `hold` seconds. Settling onto a copy of
/// the equilibrium shifted by a multiple of `2π` on some edge (a pole slip)
/// counts as `Diverged`, as does any deviation beyond `3π`.
pub fn classify_outcome(sys: &System, traj: &Trajectory, tol_angle: f64, tol_velocity: f64, hold: f64) -> Outcome {
    let ssm = &sys.ssm;
    let mut settled_since: Option<(f64, bool)> = None;
    for ((t, x), r) in traj.times.iter().zip(&traj.states).zip(&traj.bus_rates) {
        let dev = ssm.edge_deviation(x);
        if dev.iter().any(|u| u.abs() > 3.0 * PI) {
            return Outcome::Diverged;
        }
        match settled_at(&dev, r, tol_angle, tol_velocity) {
            Some(slipped) => {
                let entry = settled_since.get_or_insert((*t, slipped));
                if entry.1 != slipped {
                    *entry = (*t, slipped);
                }
            }
            None => settled_since = None,
        }
    }
    match (settled_since, traj.times.last()) {
        (Some((since, slipped)), Some(end)) if end - since >= hold - 1e-9 => {
            if slipped {
                Outcome::Diverged
            } else {
                Outcome::Converged
            }
        }
        _ => Outcome::Undecided,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DecayCheck {
    /// Largest `V(x_{t+1}) - V(x_t)` over consecutive samples inside the
    /// polytope; `-∞` when no such pair exists.
    pub max_violation: f64,
    pub pairs: usize,
}

impl DecayCheck {
    pub fn is_empty(&self) -> bool {
        self.pairs == 0
    }
}

pub fn check_decay(lf: &LyapunovFunction, traj: &Trajectory) -> DecayCheck {
    let mut worst = f64::NEG_INFINITY;
    let mut pairs = 0;
    let mut prev: Option<f64> = None;
    for x in &traj.states {
        let current = crate::geometry::in_polytope(&lf.ssm, x).then(|| lf.value(x));
        if let (Some(a), Some(b)) = (prev, current) {
            worst = worst.max(b - a);
            pairs += 1;
        }
        prev = current;
    }
    DecayCheck { max_violation: worst, pairs }
}

/// Baseline energy `W = ½Σ m ω² - Σ P_k θ_k - Σ a (cos δ - cos δ*)` at a
/// deviation state.
pub fn energy(sys: &System, x: &[f64]) -> f64 {
    let layout = sys.ssm.layout;
    let kinetic: f64 = sys.grid.buses()[..layout.m]
        .iter()
        .enumerate()
        .map(|(k, b)| 0.5 * b.inertia.unwrap_or(1.0) * x[layout.velocity_index(k)].powi(2))
        .sum();
    let work: f64 = sys.grid.buses().iter().enumerate().map(|(k, b)| b.injection * x[layout.angle_index(k)]).sum();
    let coupling: f64 = sys
        .ssm
        .edge_angles(x)
        .iter()
        .zip(&sys.ssm.sep_edges)
        .zip(sys.grid.lines())
        .map(|((d, s), l)| l.coupling * (d.cos() - s.cos()))
        .sum();
    kinetic - work - coupling
}
