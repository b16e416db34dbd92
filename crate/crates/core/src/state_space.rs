//! Compact Lur'e form `ẋ = A x - B F(C x)` of the structure-preserving swing
//! equations.
//!
//! The state is `x = [x1, x2, x3]` with generator angle deviations `x1`,
//! generator velocities `x2` and load angle deviations `x3`, so its
//! dimension is `n + m`.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::equilibrium::EquilibriumPoint;
use crate::grid::GridModel;

/// Index bookkeeping for the `[x1, x2, x3]` state layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Layout {
    pub n: usize,
    pub m: usize,
}

impl Layout {
    pub fn dim(&self) -> usize {
        self.n + self.m
    }

    /// State index holding the angle deviation of internal bus `k`.
    pub fn angle_index(&self, k: usize) -> usize {
        if k < self.m {
            k
        } else {
            k + self.m
        }
    }

    pub fn velocity_index(&self, k: usize) -> usize {
        debug_assert!(k < self.m);
        self.m + k
    }

    pub fn angle_indices(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).map(|k| self.angle_index(k))
    }

    /// The uniform-shift pattern `s = (1_m, 0_m, 1_{n-m})`.
    pub fn shift_pattern(&self) -> DVector<f64> {
        let mut s = DVector::zeros(self.dim());
        for i in self.angle_indices() {
            s[i] = 1.0;
        }
        s
    }

    /// Angle deviations of all buses, in internal bus order.
    pub fn angle_deviations(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n).map(|k| x[self.angle_index(k)]).collect()
    }

    /// Builds a state from absolute bus angles and generator velocities,
    /// both in internal bus order.
    pub fn from_absolute(&self, angles: &[f64], velocities: &[f64], sep: &EquilibriumPoint) -> Vec<f64> {
        let mut x = vec![0.0; self.dim()];
        for k in 0..self.n {
            x[self.angle_index(k)] = angles[k] - sep.angles[k];
        }
        for k in 0..self.m {
            x[self.velocity_index(k)] = velocities[k];
        }
        x
    }

    /// Inverse of [`Layout::from_absolute`].
    pub fn to_absolute(&self, x: &[f64], sep: &EquilibriumPoint) -> (Vec<f64>, Vec<f64>) {
        let angles = (0..self.n).map(|k| x[self.angle_index(k)] + sep.angles[k]).collect();
        let velocities = (0..self.m).map(|k| x[self.velocity_index(k)]).collect();
        (angles, velocities)
    }
}

#[derive(Clone, Debug)]
pub struct StateSpaceMatrices {
    pub layout: Layout,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// `diag(a_kj)`.
    pub s: DMatrix<f64>,
    pub incidence: DMatrix<f64>,
    pub m1: DMatrix<f64>,
    pub d1: DMatrix<f64>,
    pub d2: DMatrix<f64>,
    /// Generator selector `[I_m 0]` (`m x n`).
    pub s1: DMatrix<f64>,
    /// Load selector `[0 I_{n-m}]` (`(n-m) x n`).
    pub s2: DMatrix<f64>,
    /// Equilibrium edge differences `δ*_kj`.
    pub sep_edges: Vec<f64>,
}

impl StateSpaceMatrices {
    pub fn build(g: &GridModel, e: &EquilibriumPoint) -> Self {
        let (n, m) = (g.n(), g.n_gen());
        let layout = Layout { n, m };
        let dim = layout.dim();
        let ne = g.n_edges();
        let incidence = g.incidence_matrix();
        let s = DMatrix::from_diagonal(&DVector::from_iterator(ne, g.lines().iter().map(|l| l.coupling)));
        let inertia: Vec<f64> = g.buses()[..m].iter().map(|b| b.inertia.unwrap_or(1.0)).collect();
        let m1 = DMatrix::from_diagonal(&DVector::from_vec(inertia.clone()));
        let d1 = DMatrix::from_diagonal(&DVector::from_iterator(m, g.buses()[..m].iter().map(|b| b.damping)));
        let d2 = DMatrix::from_diagonal(&DVector::from_iterator(n - m, g.buses()[m..].iter().map(|b| b.damping)));
        let s1 = DMatrix::from_fn(m, n, |r, c| if r == c { 1.0 } else { 0.0 });
        let s2 = DMatrix::from_fn(n - m, n, |r, c| if c == r + m { 1.0 } else { 0.0 });

        let mut a = DMatrix::zeros(dim, dim);
        for k in 0..m {
            a[(k, m + k)] = 1.0;
            a[(m + k, m + k)] = -d1[(k, k)] / m1[(k, k)];
        }

        // Coupling into the generator velocity rows and the load angle rows.
        let ets = incidence.transpose() * &s;
        let mut b = DMatrix::zeros(dim, ne);
        for k in 0..m {
            for col in 0..ne {
                b[(m + k, col)] = ets[(k, col)] / m1[(k, k)];
            }
        }
        for k in m..n {
            for col in 0..ne {
                b[(m + k, col)] = ets[(k, col)] / d2[(k - m, k - m)];
            }
        }

        let mut c = DMatrix::zeros(ne, dim);
        for row in 0..ne {
            for k in 0..n {
                c[(row, layout.angle_index(k))] = incidence[(row, k)];
            }
        }

        StateSpaceMatrices {
            layout,
            a,
            b,
            c,
            s,
            incidence,
            m1,
            d1,
            d2,
            s1,
            s2,
            sep_edges: e.edge_differences.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.layout.dim()
    }

    pub fn n_edges(&self) -> usize {
        self.sep_edges.len()
    }

    /// `C x`: edge angle deviations `δ_kj - δ*_kj`.
    pub fn edge_deviation(&self, x: &[f64]) -> Vec<f64> {
        self.c
            .row_iter()
            .map(|row| row.iter().zip(x).map(|(c, v)| c * v).sum())
            .collect()
    }

    /// Actual edge angles `δ_kj = δ*_kj + (C x)_kj`.
    pub fn edge_angles(&self, x: &[f64]) -> Vec<f64> {
        self.edge_deviation(x).iter().zip(&self.sep_edges).map(|(u, s)| u + s).collect()
    }

    /// `F(C x)` with components `sin δ_kj - sin δ*_kj`.
    pub fn nonlinearity(&self, x: &[f64]) -> Vec<f64> {
        self.edge_angles(x).iter().zip(&self.sep_edges).map(|(d, s)| d.sin() - s.sin()).collect()
    }

    pub fn vector_field(&self, x: &[f64]) -> Vec<f64> {
        let xv = DVector::from_column_slice(x);
        let f = DVector::from_vec(self.nonlinearity(x));
        let dx = &self.a * xv - &self.b * f;
        dx.as_slice().to_vec()
    }

    /// Frequency differences `δ̇_kj = C ẋ`.
    pub fn edge_rates(&self, x: &[f64]) -> Vec<f64> {
        self.edge_deviation(&self.vector_field(x))
    }

    pub fn dump(&self) -> MatrixDump {
        MatrixDump {
            n: self.layout.n,
            m: self.layout.m,
            edges: self.n_edges(),
            a: rows(&self.a),
            b: rows(&self.b),
            c: rows(&self.c),
            s: rows(&self.s),
            incidence: rows(&self.incidence),
        }
    }
}

pub(crate) fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub(crate) fn from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let ncols = rows.first().map_or(0, |r| r.len());
    DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c])
}

/// Matrices rendered as nested rows for debugging output.
#[derive(Clone, Debug, Serialize)]
pub struct MatrixDump {
    pub n: usize,
    pub m: usize,
    pub edges: usize,
    pub a: Vec<Vec<f64>>,
    pub b: Vec<Vec<f64>>,
    pub c: Vec<Vec<f64>>,
    pub s: Vec<Vec<f64>>,
    pub incidence: Vec<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::equilibrium::solve_sep;
    use crate::grid::fixtures::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn system(g: &GridModel) -> (EquilibriumPoint, StateSpaceMatrices) {
        let e = solve_sep(g, &vec![0.0; g.n()]).unwrap();
        let ssm = StateSpaceMatrices::build(g, &e);
        (e, ssm)
    }

    #[test]
    fn two_bus_blocks() {
        let (_, ssm) = system(&two_bus());
        let expected_a = DMatrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(ssm.a, expected_a);
        assert_eq!(ssm.c.as_slice(), &[1.0, 0.0, -1.0]);
        assert_eq!(ssm.b.shape(), (3, 1));
        assert_eq!(ssm.b.as_slice(), &[0.0, 0.8, -0.8]);
        let s = ssm.layout.shift_pattern();
        assert!((&ssm.c * &s).iter().all(|v| *v == 0.0));
        assert!((&ssm.a * &s).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn nonlinearity_values() {
        let (_, ssm) = system(&two_bus());
        assert!(ssm.nonlinearity(&[0.0; 3]).iter().all(|v| v.abs() < 1e-16));
        // actual angle 5π/6 is a UEP: sin(5π/6) = sin(π/6)
        let f = ssm.nonlinearity(&[5.0 * PI / 6.0 - PI / 6.0, 0.0, 0.0]);
        assert!(f[0].abs() < 1e-15);
    }

    #[test]
    fn two_bus_vector_field_hand_check() {
        let (_, ssm) = system(&two_bus());
        let dx = ssm.vector_field(&[0.0, 1.0, 0.0]);
        assert_eq!(dx, vec![1.0, -1.0, 0.0]);
        assert!(ssm.vector_field(&[0.0; 3]).iter().all(|v| v.abs() < 1e-16));
    }

    proptest! {
        #[test]
        fn nonlinearity_matches_trig(x in proptest::collection::vec(-4.0f64..4.0, 5)) {
            let g = three_bus();
            let (e, ssm) = system(&g);
            let f = ssm.nonlinearity(&x);
            // x = [x1(2), x2(2), x3(1)]
            let theta = [x[0] + e.angles[0], x[1] + e.angles[1], x[4] + e.angles[2]];
            for (row, l) in g.lines().iter().enumerate() {
                let d = theta[l.from] - theta[l.to];
                let sep = e.angles[l.from] - e.angles[l.to];
                prop_assert!((f[row] - (d.sin() - sep.sin())).abs() <= 1e-15);
            }
        }

        #[test]
        fn shift_leaves_field_unchanged(x in proptest::collection::vec(-3.0f64..3.0, 5), c in -5.0f64..5.0) {
            let (_, ssm) = system(&three_bus());
            let s = ssm.layout.shift_pattern();
            let y: Vec<f64> = x.iter().zip(s.iter()).map(|(v, s)| v + c * s).collect();
            let (fx, fy) = (ssm.vector_field(&x), ssm.vector_field(&y));
            for (a, b) in fx.iter().zip(&fy) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
