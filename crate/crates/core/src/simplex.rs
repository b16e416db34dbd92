//! Derivative-free Nelder–Mead minimization used for facet minima.
//! Infeasible points are reported as `f64::INFINITY` by the objective.

pub(crate) struct Minimum {
    pub point: Vec<f64>,
    pub value: f64,
}

pub(crate) fn nelder_mead<F>(f: F, start: &[f64], step: f64, max_evals: usize, ftol: f64) -> Minimum
where
    F: Fn(&[f64]) -> f64,
{
    let n = start.len();
    if n == 0 {
        return Minimum { point: vec![], value: f(start) };
    }
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((start.to_vec(), f(start)));
    for i in 0..n {
        let mut p = start.to_vec();
        p[i] += step;
        let mut v = f(&p);
        if !v.is_finite() {
            p[i] = start[i] - step;
            v = f(&p);
        }
        simplex.push((p, v));
    }
    let mut evals = n + 1;
    let centroid = |s: &[(Vec<f64>, f64)]| {
        let mut c = vec![0.0; n];
        for (p, _) in &s[..n] {
            for (ci, pi) in c.iter_mut().zip(p) {
                *ci += pi / n as f64;
            }
        }
        c
    };
    let along = |c: &[f64], w: &[f64], t: f64| -> Vec<f64> { c.iter().zip(w).map(|(c, w)| c + t * (w - c)).collect() };

    while evals < max_evals {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let (best, worst) = (simplex[0].1, simplex[n].1);
        let size = simplex[1..]
            .iter()
            .map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
            .fold(0.0, f64::max);
        if worst.is_finite() && (worst - best).abs() <= ftol * (1.0 + best.abs()) && size < 1e-10 {
            break;
        }
        if size < 1e-14 {
            break;
        }
        let c = centroid(&simplex);
        let w = simplex[n].0.clone();
        let xr = along(&c, &w, -1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < simplex[0].1 {
            let xe = along(&c, &w, -2.0);
            let fe = f(&xe);
            evals += 1;
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < worst {
            let p = along(&c, &w, -0.5);
            let v = f(&p);
            (p, v)
        } else {
            let p = along(&c, &w, 0.5);
            let v = f(&p);
            (p, v)
        };
        evals += 1;
        if fc < fr.min(worst) {
            simplex[n] = (xc, fc);
            continue;
        }
        // shrink toward the best vertex
        let b = simplex[0].0.clone();
        for entry in simplex.iter_mut().skip(1) {
            let p = along(&b, &entry.0, 0.5);
            let v = f(&p);
            *entry = (p, v);
        }
        evals += n;
    }
    simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (point, value) = simplex.swap_remove(0);
    Minimum { point, value }
}
