//! Lyapunov certificates `(Q, K, H)` from the quadratic-plus-Lur'e family.
//!
//! For `V(x) = ½ xᵀQx - Σ K_kj (cos δ_kj + δ_kj sin δ*_kj)` the derivative
//! along `ẋ = Ax - BF(Cx)` is `½ zᵀ N z - (Cx - F)ᵀ H F` with `z = [x; F]`.
//! The certificate condition is `M ⪯ 0` where
//!
//! ```text
//! M = [ AᵀQ + QA          R             ]
//!     [ Rᵀ       -2H - (KCB + BᵀCᵀK)    ],   R = QB - CᵀH - (KCA)ᵀ
//! ```
//!
//! (`M` and `N` are congruent through `diag(I, -I)`.) The `KCB` term vanishes
//! for grids without load buses and is kept here because load angles enter
//! both `C` and the rows of `B`.
//!
//! Angle directions `v` satisfy `A v = 0`, so `vᵀ M v = 0` and feasibility
//! forces the corresponding columns of `M` to vanish. The solver imposes
//! those columns, together with `Q s = 0` for the shift pattern `s`, as exact
//! linear equalities and runs alternating projections on the remaining
//! reduced blocks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state_space::{from_rows, rows, StateSpaceMatrices};

#[derive(Clone, Debug, PartialEq)]
pub struct LyapunovCertificate {
    pub q: DMatrix<f64>,
    pub k: Vec<f64>,
    pub h: Vec<f64>,
    /// Largest eigenvalue of the assembled LMI block.
    pub lmi_residual: f64,
    /// Smallest eigenvalue reached over all slack blocks.
    pub slack: f64,
}

#[derive(Clone, Debug)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub q_floor: f64,
    pub diag_floor: f64,
    /// Alternating-projection iterations per feasibility test.
    pub max_iter: usize,
    /// Bisection steps used to push the slack upward.
    pub bisection_steps: usize,
    /// Fractional reductions of `V(x0)` tried by [`adapt_certificate`].
    pub adapt_weights: Vec<f64>,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-7,
            q_floor: 1e-6,
            diag_floor: 1e-6,
            max_iter: 3000,
            bisection_steps: 24,
            adapt_weights: vec![0.1, 0.25, 0.5, 0.75],
        }
    }
}

/// `R = QB - CᵀH - (KCA)ᵀ`.
pub fn r_block(ssm: &StateSpaceMatrices, q: &DMatrix<f64>, k: &[f64], h: &[f64]) -> DMatrix<f64> {
    let kd = DMatrix::from_diagonal(&DVector::from_column_slice(k));
    let hd = DMatrix::from_diagonal(&DVector::from_column_slice(h));
    q * &ssm.b - ssm.c.transpose() * hd - (kd * &ssm.c * &ssm.a).transpose()
}

/// Assembles the symmetric `(n+m+|E|)`-square LMI block.
pub fn assemble_lmi(ssm: &StateSpaceMatrices, q: &DMatrix<f64>, k: &[f64], h: &[f64]) -> Result<DMatrix<f64>> {
    let (dim, ne) = (ssm.dim(), ssm.n_edges());
    if q.shape() != (dim, dim) || k.len() != ne || h.len() != ne {
        return Err(Error::DimensionMismatch(format!(
            "Q is {:?}, K has {}, H has {}; expected {dim}x{dim} and {ne}",
            q.shape(),
            k.len(),
            h.len()
        )));
    }
    let p = ssm.a.transpose() * q + q * &ssm.a;
    let r = r_block(ssm, q, k, h);
    let kd = DMatrix::from_diagonal(&DVector::from_column_slice(k));
    let kcb = &kd * &ssm.c * &ssm.b;
    let mut w = -(kcb.clone() + kcb.transpose());
    for i in 0..ne {
        w[(i, i)] -= 2.0 * h[i];
    }
    let mut m = DMatrix::zeros(dim + ne, dim + ne);
    m.view_mut((0, 0), (dim, dim)).copy_from(&p);
    m.view_mut((0, dim), (dim, ne)).copy_from(&r);
    m.view_mut((dim, 0), (ne, dim)).copy_from(&r.transpose());
    m.view_mut((dim, dim), (ne, ne)).copy_from(&w);
    // exact symmetry
    for i in 0..dim + ne {
        for j in 0..i {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    Ok(m)
}

fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Orthonormal basis of the complement of the shift pattern.
pub(crate) fn shift_complement(ssm: &StateSpaceMatrices) -> DMatrix<f64> {
    let s = ssm.layout.shift_pattern();
    let s = &s / s.norm();
    let proj = DMatrix::identity(ssm.dim(), ssm.dim()) - &s * s.transpose();
    let eig = SymmetricEigen::new(proj);
    let cols: Vec<DVector<f64>> = eig
        .eigenvalues
        .iter()
        .zip(eig.eigenvectors.column_iter())
        .filter(|(l, _)| **l > 0.5)
        .map(|(_, v)| v.into_owned())
        .collect();
    DMatrix::from_columns(&cols)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Verification {
    pub residual: f64,
    pub min_k: f64,
    pub min_h: f64,
    /// Smallest eigenvalue of `Q` on the complement of the shift pattern.
    pub q_complement_min: f64,
    pub q_asymmetry: f64,
}

impl Verification {
    pub fn passes(&self, opts: &SolverOptions) -> bool {
        self.residual <= opts.tolerance
            && self.min_k >= opts.diag_floor
            && self.min_h >= opts.diag_floor
            && self.q_complement_min >= opts.q_floor
            && self.q_asymmetry == 0.0
    }
}

pub fn verify_certificate(ssm: &StateSpaceMatrices, cert: &LyapunovCertificate) -> Result<Verification> {
    let m = assemble_lmi(ssm, &cert.q, &cert.k, &cert.h)?;
    let ps = shift_complement(ssm);
    let qc = ps.transpose() * &cert.q * &ps;
    Ok(Verification {
        residual: max_eigenvalue(&m),
        min_k: cert.k.iter().copied().fold(f64::INFINITY, f64::min),
        min_h: cert.h.iter().copied().fold(f64::INFINITY, f64::min),
        q_complement_min: min_eigenvalue(&(0.5 * (&qc + qc.transpose()))),
        q_asymmetry: (&cert.q - cert.q.transpose()).amax(),
    })
}

/// Linear constraint `ℓ(Q, K) <= bound` on the certificate, where `ℓ` is
/// the normalized Lyapunov value at a fixed state: `½ x0ᵀQx0 + Σ K_e c_e`.
#[derive(Clone, Debug)]
pub(crate) struct ValueBound {
    pub x0: Vec<f64>,
    pub potential: Vec<f64>,
    pub bound: f64,
}

/// Affine parametrization of certificates satisfying all equality
/// constraints, plus the slack blocks alternating projections act on.
struct Parametrization {
    dim: usize,
    ne: usize,
    /// Columns span the feasible subspace of packed `(Q, K, H)`.
    basis: DMatrix<f64>,
    /// Particular point with `trace(Q) = dim`.
    w0: DVector<f64>,
    /// Basis of directions keeping the trace fixed.
    z: DMatrix<f64>,
    /// Pseudo-inverse of the slack map restricted to `z`.
    pinv: DMatrix<f64>,
    /// Slack map `w ↦ vec(L(w))`, with constant `l0`.
    g: DMatrix<f64>,
    l0: DVector<f64>,
    blocks: Vec<Block>,
}

#[derive(Clone, Copy, Debug)]
struct Block {
    offset: usize,
    size: usize,
    /// Blocks whose required level is 0 rather than the common slack level.
    fixed_level: bool,
}

fn packed_len(dim: usize, ne: usize) -> usize {
    dim * (dim + 1) / 2 + 2 * ne
}

fn unpack(z: &[f64], dim: usize, ne: usize) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let mut q = DMatrix::zeros(dim, dim);
    let mut idx = 0;
    for i in 0..dim {
        for j in i..dim {
            q[(i, j)] = z[idx];
            q[(j, i)] = z[idx];
            idx += 1;
        }
    }
    let k = z[idx..idx + ne].to_vec();
    let h = z[idx + ne..idx + 2 * ne].to_vec();
    (q, k, h)
}

/// Null space of `rows` (as columns), via a square-padded SVD.
fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let cols = a.ncols();
    let mut padded = DMatrix::zeros(a.nrows().max(cols), cols);
    padded.view_mut((0, 0), a.shape()).copy_from(a);
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let smax = svd.singular_values.max();
    let tol = 1e-10 * smax.max(1.0);
    let basis: Vec<DVector<f64>> = svd
        .singular_values
        .iter()
        .zip(v_t.row_iter())
        .filter(|(s, _)| **s <= tol)
        .map(|(_, r)| r.transpose().into_owned())
        .collect();
    if basis.is_empty() {
        DMatrix::zeros(cols, 0)
    } else {
        DMatrix::from_columns(&basis)
    }
}

fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    svd.pseudo_inverse(1e-12 * smax.max(1e-300)).expect("pseudo-inverse")
}

impl Parametrization {
    fn new(ssm: &StateSpaceMatrices, bound: Option<&ValueBound>) -> Result<Self> {
        let (dim, ne) = (ssm.dim(), ssm.n_edges());
        let nz = packed_len(dim, ne);
        let s = ssm.layout.shift_pattern();
        let angle: Vec<usize> = ssm.layout.angle_indices().collect();
        let lmi_of = |z: &[f64]| {
            let (q, k, h) = unpack(z, dim, ne);
            (assemble_lmi(ssm, &q, &k, &h).expect("dimensions"), q)
        };

        // Equality constraints, evaluated column by column on unit vectors.
        let rows_per = angle.len() * (dim + ne) + dim;
        let mut eq = DMatrix::zeros(rows_per, nz);
        let mut unit = vec![0.0; nz];
        for col in 0..nz {
            unit[col] = 1.0;
            let (m, q) = lmi_of(&unit);
            let mut r = 0;
            for &i in &angle {
                for row in 0..dim + ne {
                    eq[(r, col)] = m[(row, i)];
                    r += 1;
                }
            }
            let qs = &q * &s;
            for v in qs.iter() {
                eq[(r, col)] = *v;
                r += 1;
            }
            unit[col] = 0.0;
        }
        let basis = null_space(&eq);
        let p = basis.ncols();
        if p == 0 {
            return Err(Error::Infeasible { best_residual: f64::INFINITY });
        }

        let ps = shift_complement(ssm);
        let reduced: Vec<usize> = (0..dim)
            .filter(|i| !angle.contains(i))
            .chain(dim..dim + ne)
            .collect();
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut push = |size: usize, fixed: bool| {
            blocks.push(Block { offset, size, fixed_level: fixed });
            offset += size * size;
        };
        push(reduced.len(), false);
        push(dim - 1, false);
        for _ in 0..2 * ne {
            push(1, false);
        }
        if bound.is_some() {
            push(1, true);
        }
        let total = offset;

        let slack_of = |z: &[f64], with_const: bool| -> DVector<f64> {
            let (q, k, h) = unpack(z, dim, ne);
            let m = assemble_lmi(ssm, &q, &k, &h).expect("dimensions");
            let mut out = DVector::zeros(total);
            let mut o = 0;
            for &i in &reduced {
                for &j in &reduced {
                    out[o] = -m[(i, j)];
                    o += 1;
                }
            }
            let qc = ps.transpose() * &q * &ps;
            for v in qc.iter() {
                out[o] = *v;
                o += 1;
            }
            for v in k.iter().chain(&h) {
                out[o] = *v;
                o += 1;
            }
            if let Some(b) = bound {
                let xv = DVector::from_column_slice(&b.x0);
                let value = 0.5 * xv.dot(&(&q * &xv))
                    + k.iter().zip(&b.potential).map(|(k, c)| k * c).sum::<f64>();
                out[o] = if with_const { b.bound - value } else { -value };
            }
            out
        };

        let zero = vec![0.0; nz];
        let l0 = slack_of(&zero, true);
        let mut g = DMatrix::zeros(total, p);
        let mut trace = DVector::zeros(p);
        for c in 0..p {
            let zc: Vec<f64> = basis.column(c).iter().copied().collect();
            g.set_column(c, &slack_of(&zc, false));
            let (q, _, _) = unpack(&zc, dim, ne);
            trace[c] = q.trace();
        }
        let tn = trace.norm();
        if tn < 1e-12 {
            return Err(Error::Infeasible { best_residual: f64::INFINITY });
        }
        let w0 = &trace * (dim as f64 / (tn * tn));
        let t_hat = &trace / tn;
        let proj = DMatrix::identity(p, p) - &t_hat * t_hat.transpose();
        let z = null_space(&(DMatrix::identity(p, p) - proj));
        let pinv = pseudo_inverse(&(&g * &z));
        Ok(Parametrization { dim, ne, basis, w0, z, pinv, g, l0, blocks })
    }

    fn slack(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.g * w + &self.l0
    }

    fn block_matrix(&self, l: &DVector<f64>, b: &Block) -> DMatrix<f64> {
        let m = DMatrix::from_column_slice(b.size, b.size, &l.as_slice()[b.offset..b.offset + b.size * b.size]);
        0.5 * (&m + m.transpose())
    }

    /// Minimum over blocks of `λ_min(block) - required level`.
    fn margin(&self, l: &DVector<f64>, level: f64) -> f64 {
        self.blocks
            .iter()
            .map(|b| {
                let req = if b.fixed_level { 0.0 } else { level };
                min_eigenvalue(&self.block_matrix(l, b)) - req
            })
            .fold(f64::INFINITY, f64::min)
    }

    /// Projection of slack values onto `{block ⪰ target}` per block.
    fn project_cone(&self, l: &DVector<f64>, target: f64) -> DVector<f64> {
        let mut out = l.clone();
        for b in &self.blocks {
            // bound blocks only need to stay non-negative; aim slightly inside
            let t = if b.fixed_level { 0.5 * target } else { target };
            let eig = SymmetricEigen::new(self.block_matrix(l, b));
            let clipped = eig.eigenvalues.map(|v| v.max(t));
            let m = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
            out.as_mut_slice()[b.offset..b.offset + b.size * b.size].copy_from_slice(m.as_slice());
        }
        out
    }

    fn project_affine(&self, y: &DVector<f64>) -> DVector<f64> {
        let rhs = y - &self.l0 - &self.g * &self.w0;
        &self.w0 + &self.z * (&self.pinv * rhs)
    }

    /// Alternating projections until every block clears `level`.
    fn feasible_at(&self, start: &DVector<f64>, level: f64, max_iter: usize) -> (DVector<f64>, f64) {
        let target = level * 1.05 + 1e-9;
        let mut w = self.project_affine(&self.slack(start));
        let mut best = (w.clone(), f64::NEG_INFINITY);
        for _ in 0..max_iter {
            let l = self.slack(&w);
            let margin = self.margin(&l, level);
            if margin > best.1 {
                best = (w.clone(), margin);
            }
            if margin >= 0.0 {
                return best;
            }
            w = self.project_affine(&self.project_cone(&l, target));
        }
        best
    }

    fn certificate(&self, ssm: &StateSpaceMatrices, w: &DVector<f64>, slack: f64) -> Result<LyapunovCertificate> {
        let zv = &self.basis * w;
        let (q, k, h) = unpack(zv.as_slice(), self.dim, self.ne);
        let lmi_residual = max_eigenvalue(&assemble_lmi(ssm, &q, &k, &h)?);
        Ok(LyapunovCertificate { q, k, h, lmi_residual, slack })
    }
}

fn solve_with(ssm: &StateSpaceMatrices, opts: &SolverOptions, bound: Option<&ValueBound>) -> Result<LyapunovCertificate> {
    let par = Parametrization::new(ssm, bound)?;
    let floor = opts.q_floor.max(opts.diag_floor);
    let start = par.w0.clone();
    let (mut w, margin) = par.feasible_at(&start, floor, opts.max_iter);
    if margin < 0.0 {
        return Err(Error::Infeasible { best_residual: -margin });
    }
    // Bisection on the common slack level; `hi` bounds λ_min of the Q block
    // since trace(Q) = n + m and Q s = 0.
    let mut lo = floor;
    let mut hi = par.dim as f64 / (par.dim as f64 - 1.0);
    for _ in 0..opts.bisection_steps {
        let mid = 0.5 * (lo + hi);
        let (cand, m) = par.feasible_at(&w, mid, opts.max_iter);
        if m >= 0.0 {
            lo = mid;
            w = cand;
        } else {
            hi = mid;
        }
    }
    let l = par.slack(&w);
    let cert = par.certificate(ssm, &w, par.margin(&l, 0.0))?;
    let check = verify_certificate(ssm, &cert)?;
    if !check.passes(opts) {
        return Err(Error::Infeasible { best_residual: check.residual.max(-check.q_complement_min) });
    }
    Ok(cert)
}

/// Finds a certificate maximizing the smallest eigenvalue over all slack
/// blocks (reduced LMI, `Q` on the shift complement, diagonals of `K` and
/// `H`) under the normalization `trace(Q) = n + m`.
pub fn solve_lmi(ssm: &StateSpaceMatrices, opts: &SolverOptions) -> Result<LyapunovCertificate> {
    solve_with(ssm, opts, None)
}

pub(crate) fn solve_lmi_bounded(
    ssm: &StateSpaceMatrices,
    opts: &SolverOptions,
    bound: &ValueBound,
) -> Result<LyapunovCertificate> {
    solve_with(ssm, opts, Some(bound))
}

/// Result of [`adapt_certificate`].
#[derive(Clone, Debug)]
pub struct Adapted {
    pub cert: LyapunovCertificate,
    pub region: crate::geometry::RegionEstimate,
    /// Relative geometry margin `1 - V(x0)/threshold` before and after.
    pub margin_before: f64,
    pub margin_after: f64,
    pub adapted: bool,
    /// Why the input certificate was kept, when it was.
    pub note: Option<String>,
}

fn relative_margin(
    lf: &crate::geometry::LyapunovFunction,
    region: &crate::geometry::RegionEstimate,
    x0: &[f64],
) -> f64 {
    let v = crate::screening::certify_geometry(lf, region, x0);
    if !v.inside_polytope {
        f64::NEG_INFINITY
    } else {
        1.0 - v.value / v.threshold
    }
}

/// Re-solves the LMI with the extra constraint `V(x0) ≤ (1 - β) V_base(x0)`
/// for each weight `β` in `opts.adapt_weights`, keeping the certificate with
/// the best relative margin at `x0`. Falls back to `cert` when nothing
/// improves on it.
pub fn adapt_certificate(
    sys: &crate::system::System,
    cert: &LyapunovCertificate,
    x0: &[f64],
    opts: &SolverOptions,
    geometry: &crate::geometry::GeometryOptions,
) -> Result<Adapted> {
    use crate::geometry::{build_region_estimate, potential, LyapunovFunction};
    let ssm = &sys.ssm;
    if x0.len() != ssm.dim() {
        return Err(Error::DimensionMismatch(format!("state has {} entries, expected {}", x0.len(), ssm.dim())));
    }
    let base_lf = LyapunovFunction::new(ssm, cert)?;
    let base_region = build_region_estimate(&base_lf, &sys.grid_hash, geometry)?;
    let before = relative_margin(&base_lf, &base_region, x0);
    let mut best = Adapted {
        cert: cert.clone(),
        region: base_region,
        margin_before: before,
        margin_after: before,
        adapted: false,
        note: Some("no weight improved the margin".into()),
    };
    let base_value = base_lf.value(x0);
    if !(base_value > 0.0) {
        best.note = Some("V(x0) is already zero".into());
        return Ok(best);
    }
    let potentials: Vec<f64> =
        ssm.edge_deviation(x0).iter().zip(&ssm.sep_edges).map(|(u, s)| potential(*u, *s)).collect();
    let mut any_feasible = false;
    for &beta in &opts.adapt_weights {
        let bound = ValueBound { x0: x0.to_vec(), potential: potentials.clone(), bound: (1.0 - beta) * base_value };
        let Ok(candidate) = solve_lmi_bounded(ssm, opts, &bound) else { continue };
        any_feasible = true;
        let Ok(lf) = LyapunovFunction::new(ssm, &candidate) else { continue };
        let Ok(region) = build_region_estimate(&lf, &sys.grid_hash, geometry) else { continue };
        let margin = relative_margin(&lf, &region, x0);
        if margin > best.margin_after {
            best = Adapted {
                cert: candidate,
                region,
                margin_before: before,
                margin_after: margin,
                adapted: true,
                note: None,
            };
        }
    }
    if !any_feasible {
        best.note = Some("all bias weights infeasible".into());
    }
    Ok(best)
}

/// Certificate with its grid hash and solver options, as written by `certify`.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct CertificateFile {
    pub grid_hash: String,
    pub tolerance: f64,
    pub q_floor: f64,
    pub diag_floor: f64,
    pub max_iter: usize,
    pub residual: f64,
    pub slack: f64,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<f64>,
    pub h: Vec<f64>,
}

impl CertificateFile {
    pub fn new(cert: &LyapunovCertificate, grid_hash: String, opts: &SolverOptions) -> Self {
        CertificateFile {
            grid_hash,
            tolerance: opts.tolerance,
            q_floor: opts.q_floor,
            diag_floor: opts.diag_floor,
            max_iter: opts.max_iter,
            residual: cert.lmi_residual,
            slack: cert.slack,
            q: rows(&cert.q),
            k: cert.k.clone(),
            h: cert.h.clone(),
        }
    }

    /// Recovers the certificate, rejecting files produced for another grid.
    pub fn certificate(&self, grid_hash: &str) -> Result<LyapunovCertificate> {
        if self.grid_hash != grid_hash {
            return Err(Error::GridMismatch { expected: self.grid_hash.clone(), actual: grid_hash.to_string() });
        }
        Ok(LyapunovCertificate {
            q: from_rows(&self.q),
            k: self.k.clone(),
            h: self.h.clone(),
            lmi_residual: self.residual,
            slack: self.slack,
        })
    }
}
