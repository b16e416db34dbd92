//! Dormand–Prince 5(4) with step-size control and continuous output.

use std::ops::ControlFlow;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_max: f64,
    pub h_min: f64,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        OdeOptions { rtol: 1e-8, atol: 1e-10, h_max: 0.5, h_min: 1e-12, max_steps: 5_000_000 }
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// One accepted step with its continuous extension.
pub struct Step<'a> {
    pub t0: f64,
    pub t1: f64,
    pub y1: &'a [f64],
    /// Derivative at `t1`.
    pub f1: &'a [f64],
    rcont: &'a [Vec<f64>; 5],
}

impl Step<'_> {
    /// Fourth-order interpolant at `t ∈ [t0, t1]`.
    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        let theta = (t - self.t0) / (self.t1 - self.t0);
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = self.rcont;
        for i in 0..out.len() {
            out[i] = r1[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])));
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OdeStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
    pub t_end: f64,
}

/// Integrates `y' = f(t, y)` from `t0` to `t_end`, calling `observer` after
/// every accepted step. The observer may stop the integration early.
pub fn dopri5<F, O>(mut f: F, t0: f64, y0: &[f64], t_end: f64, opts: &OdeOptions, mut observer: O) -> Result<OdeStats>
where
    F: FnMut(f64, &[f64], &mut [f64]),
    O: FnMut(&Step<'_>) -> ControlFlow<()>,
{
    let n = y0.len();
    let mut y = y0.to_vec();
    let mut y_new = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    let mut k: [Vec<f64>; 7] = std::array::from_fn(|_| vec![0.0; n]);
    let mut rcont: [Vec<f64>; 5] = std::array::from_fn(|_| vec![0.0; n]);
    let mut stats = OdeStats { t_end: t0, ..Default::default() };
    let mut t = t0;
    f(t, &y, &mut k[0]);
    stats.evaluations += 1;
    if t_end <= t0 {
        return Ok(stats);
    }

    let scale = |a: f64, b: f64| opts.atol + opts.rtol * a.abs().max(b.abs());
    let mut h = {
        let d0 = (y.iter().map(|v| (v / scale(*v, *v)).powi(2)).sum::<f64>() / n as f64).sqrt();
        let d1 = (k[0].iter().zip(&y).map(|(f, v)| (f / scale(*v, *v)).powi(2)).sum::<f64>() / n as f64).sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        for i in 0..n {
            tmp[i] = y[i] + h0 * k[0][i];
        }
        f(t + h0, &tmp, &mut k[1]);
        stats.evaluations += 1;
        let d2 = (k[1].iter().zip(&k[0]).zip(&y).map(|((a, b), v)| ((a - b) / scale(*v, *v)).powi(2)).sum::<f64>()
            / n as f64)
            .sqrt()
            / h0;
        let dm = d1.max(d2);
        let h1 = if dm <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / dm).powf(0.2) };
        (100.0 * h0).min(h1).min(opts.h_max)
    };

    let mut last_rejected = false;
    loop {
        if stats.accepted + stats.rejected >= opts.max_steps {
            return Err(Error::StepUnderflow { time: t });
        }
        if h < opts.h_min {
            return Err(Error::StepUnderflow { time: t });
        }
        let last = t + h >= t_end;
        if last {
            h = t_end - t;
        }
        macro_rules! stage {
            ($dst:expr, $c:expr, [$(($a:expr, $j:expr)),*]) => {{
                for i in 0..n {
                    tmp[i] = y[i] + h * (0.0 $(+ $a * k[$j][i])*);
                }
                f(t + $c * h, &tmp, &mut k[$dst]);
            }};
        }
        stage!(1, C2, [(A21, 0)]);
        stage!(2, C3, [(A31, 0), (A32, 1)]);
        stage!(3, C4, [(A41, 0), (A42, 1), (A43, 2)]);
        stage!(4, C5, [(A51, 0), (A52, 1), (A53, 2), (A54, 3)]);
        for i in 0..n {
            y_new[i] = y[i] + h * (A61 * k[0][i] + A62 * k[1][i] + A63 * k[2][i] + A64 * k[3][i] + A65 * k[4][i]);
        }
        f(t + h, &y_new, &mut k[5]);
        for i in 0..n {
            y_new[i] = y[i] + h * (A71 * k[0][i] + A73 * k[2][i] + A74 * k[3][i] + A75 * k[4][i] + A76 * k[5][i]);
        }
        f(t + h, &y_new, &mut k[6]);
        stats.evaluations += 6;

        let mut err = 0.0;
        for i in 0..n {
            let e = h * (E1 * k[0][i] + E3 * k[2][i] + E4 * k[3][i] + E5 * k[4][i] + E6 * k[5][i] + E7 * k[6][i]);
            err += (e / scale(y[i], y_new[i])).powi(2);
        }
        let err = (err / n as f64).sqrt();

        if err <= 1.0 {
            for i in 0..n {
                let dy = y_new[i] - y[i];
                let bspl = h * k[0][i] - dy;
                rcont[0][i] = y[i];
                rcont[1][i] = dy;
                rcont[2][i] = bspl;
                rcont[3][i] = dy - h * k[6][i] - bspl;
                rcont[4][i] = h
                    * (D1 * k[0][i] + D3 * k[2][i] + D4 * k[3][i] + D5 * k[4][i] + D6 * k[5][i] + D7 * k[6][i]);
            }
            let t_new = if last { t_end } else { t + h };
            stats.accepted += 1;
            let flow = observer(&Step { t0: t, t1: t_new, y1: &y_new, f1: &k[6], rcont: &rcont });
            t = t_new;
            stats.t_end = t;
            std::mem::swap(&mut y, &mut y_new);
            k.swap(0, 6);
            if last || flow.is_break() {
                return Ok(stats);
            }
            let mut fac = 0.9 * err.max(1e-10).powf(-0.2);
            fac = fac.clamp(0.2, 10.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h = (h * fac).min(opts.h_max);
            last_rejected = false;
        } else {
            stats.rejected += 1;
            h *= (0.9 * err.powf(-0.2)).max(0.2);
            last_rejected = true;
        }
    }
}
