//! Stable equilibrium of the lossless power-flow equations
//! `Σ_j a_kj sin(δ_k - δ_j) = P_k`.

use std::f64::consts::FRAC_PI_2;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridModel;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    /// Bus angles in internal bus order, gauge-fixed so the last bus is at 0.
    pub angles: Vec<f64>,
    /// `δ*_kj` in canonical edge order.
    pub edge_differences: Vec<f64>,
    /// Infinity norm of the power-flow residual at `angles`.
    pub residual_norm: f64,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct NewtonOptions {
    pub tolerance: f64,
    pub max_iterations: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        NewtonOptions { tolerance: 1e-10, max_iterations: 50, max_halvings: 10 }
    }
}

/// Component `k` is `Σ_{j∈N_k} a_kj sin(δ_k - δ_j) - P_k`.
pub fn sep_residual(g: &GridModel, angles: &[f64]) -> Vec<f64> {
    let mut r: Vec<f64> = g.buses().iter().map(|b| -b.injection).collect();
    for l in g.lines() {
        let flow = l.coupling * (angles[l.from] - angles[l.to]).sin();
        r[l.from] += flow;
        r[l.to] -= flow;
    }
    r
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// Weighted Laplacian with weights `a_kj cos δ_kj`.
fn jacobian(g: &GridModel, angles: &[f64]) -> DMatrix<f64> {
    let n = g.n();
    let mut j = DMatrix::zeros(n, n);
    for l in g.lines() {
        let w = l.coupling * (angles[l.from] - angles[l.to]).cos();
        j[(l.from, l.from)] += w;
        j[(l.to, l.to)] += w;
        j[(l.from, l.to)] -= w;
        j[(l.to, l.from)] -= w;
    }
    j
}

/// Solves for the equilibrium reached by Newton's method from `guess`,
/// using the last bus as angle reference.
pub fn solve_sep(g: &GridModel, guess: &[f64]) -> Result<EquilibriumPoint> {
    solve_sep_with(g, guess, g.n() - 1, &NewtonOptions::default())
}

/// Damped Newton on the power-flow equations with bus `reference` held
/// fixed. The returned angles are re-gauged so the last bus sits at zero.
pub fn solve_sep_with(
    g: &GridModel,
    guess: &[f64],
    reference: usize,
    opts: &NewtonOptions,
) -> Result<EquilibriumPoint> {
    let n = g.n();
    if guess.len() != n {
        return Err(Error::DimensionMismatch(format!("guess has {} entries, grid has {n} buses", guess.len())));
    }
    if reference >= n {
        return Err(Error::DimensionMismatch(format!("reference bus {reference} out of range")));
    }
    let free: Vec<usize> = (0..n).filter(|&k| k != reference).collect();
    let mut angles = guess.to_vec();
    let shift = angles[reference];
    angles.iter_mut().for_each(|a| *a -= shift);

    let mut residual = sep_residual(g, &angles);
    let mut norm = inf_norm(&residual);
    let mut iterations = 0;
    while norm > opts.tolerance {
        if iterations == opts.max_iterations {
            return Err(Error::NonConvergence { iterations, residual: norm });
        }
        iterations += 1;
        let full = jacobian(g, &angles);
        let jac = DMatrix::from_fn(free.len(), free.len(), |r, c| full[(free[r], free[c])]);
        let rhs = DVector::from_iterator(free.len(), free.iter().map(|&k| -residual[k]));
        let step = jac
            .lu()
            .solve(&rhs)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .ok_or(Error::SingularJacobian { iteration: iterations })?;

        let mut scale = 1.0;
        let mut trial = angles.clone();
        for _ in 0..=opts.max_halvings {
            trial.copy_from_slice(&angles);
            for (i, &k) in free.iter().enumerate() {
                trial[k] += scale * step[i];
            }
            let r = sep_residual(g, &trial);
            let trial_norm = inf_norm(&r);
            if trial_norm < norm || scale < 0.5f64.powi(opts.max_halvings as i32) * 1.5 {
                residual = r;
                norm = trial_norm;
                break;
            }
            scale *= 0.5;
        }
        angles.copy_from_slice(&trial);
    }

    let last = angles[n - 1];
    angles.iter_mut().for_each(|a| *a -= last);
    let edge_differences = g.edge_differences(&angles);
    Ok(EquilibriumPoint { residual_norm: inf_norm(&sep_residual(g, &angles)), angles, edge_differences, iterations })
}

/// True iff every `|δ*_kj| < π/2 - margin`.
pub fn check_security(e: &EquilibriumPoint, margin: f64) -> bool {
    e.edge_differences.iter().all(|d| d.abs() < FRAC_PI_2 - margin)
}

impl EquilibriumPoint {
    pub fn max_edge_difference(&self) -> f64 {
        inf_norm(&self.edge_differences)
    }
}
