//! End-to-end acceptance suite. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any criterion fails.

use std::f64::consts::PI;
use std::time::{Duration, Instant};

use gridcert_core::geometry::potential;
use gridcert_core::lmi::verify_certificate;
use gridcert_core::screening::certify_geometry;
use gridcert_core::simulate::check_decay;
use gridcert_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TWO_BUS: &str = include_str!("../../../grids/two_bus.json");
const THREE_BUS: &str = include_str!("../../../grids/three_bus.json");
const THREE_BUS_PATH: &str = include_str!("../../../grids/three_bus_path.json");

type Outcome = std::result::Result<String, String>;

struct Fixture {
    sys: System,
    cert: LyapunovCertificate,
    lf: LyapunovFunction,
}

impl Fixture {
    fn new(text: &str) -> Self {
        let sys = System::new(parse_grid(text).unwrap()).unwrap();
        let cert = solve_lmi(&sys.ssm, &SolverOptions::default()).unwrap();
        let lf = LyapunovFunction::new(&sys.ssm, &cert).unwrap();
        Fixture { sys, cert, lf }
    }
}

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(elapsed: Duration, limit: f64) -> bool {
    elapsed.as_secs_f64() < limit
}

/// Uniform random state inside the polytope, by rejection from a box.
fn random_inside(rng: &mut ChaCha8Rng, sys: &System, angle: f64, velocity: f64) -> Vec<f64> {
    let layout = sys.ssm.layout;
    loop {
        let mut x = vec![0.0; sys.dim()];
        for k in 0..layout.n {
            x[layout.angle_index(k)] = rng.gen_range(-angle..angle);
        }
        for k in 0..layout.m {
            x[layout.velocity_index(k)] = rng.gen_range(-velocity..velocity);
        }
        if in_polytope(&sys.ssm, &x) {
            return x;
        }
    }
}

fn direct_value(ssm: &StateSpaceMatrices, cert: &LyapunovCertificate, x: &[f64]) -> f64 {
    let xv = nalgebra::DVector::from_column_slice(x);
    let quad = 0.5 * xv.dot(&(&cert.q * &xv));
    let u = ssm.edge_deviation(x);
    quad + u.iter().zip(&ssm.sep_edges).zip(cert.k.iter()).map(|((u, s), k)| k * potential(*u, *s)).sum::<f64>()
}

fn sep_angle() -> Outcome {
    let t = Instant::now();
    let g = parse_grid(TWO_BUS).map_err(|e| e.to_string())?;
    let sep = solve_sep(&g, &vec![0.0; g.n()]).map_err(|e| e.to_string())?;
    let err = (sep.edge_differences[0] - PI / 6.0).abs();
    let elapsed = t.elapsed();
    check(err <= 1e-9 && within(elapsed, 1.0), format!("|δ* - π/6| = {err:.1e}, {elapsed:.2?}"))
}

fn facet_argmins() -> Outcome {
    let t = Instant::now();
    let f = Fixture::new(TWO_BUS);
    let region = build_region_estimate(&f.lf, &f.sys.grid_hash, &GeometryOptions::default()).unwrap();
    let ssm = &f.sys.ssm;
    let mut worst: f64 = 0.0;
    for (sign, target) in [(1i8, 5.0 * PI / 6.0), (-1, -7.0 * PI / 6.0)] {
        let m = region.facet(0, sign);
        let angle = ssm.edge_angles(&m.argmin)[0];
        let velocity = m.argmin[ssm.layout.velocity_index(0)];
        worst = worst.max((angle - target).abs()).max(velocity.abs());
    }
    let elapsed = t.elapsed();
    check(
        worst <= 1e-6 && within(elapsed, 10.0),
        format!("max argmin error {worst:.1e}, V+ = {:.4}, V- = {:.4}, {elapsed:.2?}", region.facet(0, 1).value, region.facet(0, -1).value),
    )
}

fn two_bus_comparison() -> (ComparisonDataset, Duration) {
    let t = Instant::now();
    let f = Fixture::new(TWO_BUS);
    let region = build_region_estimate(&f.lf, &f.sys.grid_hash, &GeometryOptions::default()).unwrap();
    let baseline = EnergyBaseline::new(&f.sys).unwrap();
    let config = CompareConfig {
        plane: "delta:1=-7pi/6:5pi/6,omega:1=-3:3".parse().unwrap(),
        resolution: 400,
        simulate: Some((100.0, SimOptions::default())),
    };
    let data = compare(&f.sys, &f.lf, &region, &baseline, &config).unwrap();
    (data, t.elapsed())
}

fn nesting(data: &ComparisonDataset, elapsed: Duration) -> Outcome {
    let s = &data.summary;
    let vmin_gap = data.samples.iter().filter(|x| x.vmin && !x.energy).count();
    let geometry_gap = data.samples.iter().filter(|x| x.geometry && !x.vmin).count();
    check(
        s.nesting_violations == 0 && vmin_gap >= 1 && geometry_gap >= 1 && s.ordered() && within(elapsed, 120.0),
        format!(
            "energy {} ⊂ vmin {} ⊂ geometry {} ≤ stable {:?}, gaps {vmin_gap}/{geometry_gap}, violations {}, {elapsed:.1?}",
            s.energy, s.vmin, s.geometry, s.simulated_stable, s.nesting_violations
        ),
    )
}

fn soundness(data: &ComparisonDataset) -> Outcome {
    let certified: Vec<_> = data.samples.iter().filter(|s| s.geometry).collect();
    let unsound = certified.iter().filter(|s| s.simulated != Some(simulate::Outcome::Converged)).count();
    let crossing = certified.iter().filter(|s| !s.crossings.is_empty()).count();
    check(
        !certified.is_empty() && unsound == 0 && crossing == 0,
        format!("{} certified, {unsound} not converged, {crossing} with facet crossings", certified.len()),
    )
}

fn lyapunov_decay() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = f64::NEG_INFINITY;
    let mut pairs = 0;
    let mut detected = 0;
    let mut rejected = 0;
    for text in [TWO_BUS, THREE_BUS] {
        let f = Fixture::new(text);
        let ssm = &f.sys.ssm;
        // a sign-flipped Q, and one angle coupled to one velocity
        let mut flipped = f.cert.clone();
        flipped.q = -flipped.q;
        let mut coupled = f.cert.clone();
        let (a, v) = (ssm.layout.angle_index(0), ssm.layout.velocity_index(0));
        let bump = 2.0 * coupled.q.norm();
        coupled.q[(a, v)] += bump;
        coupled.q[(v, a)] += bump;
        let corrupted = [flipped, coupled];
        for bad in &corrupted {
            if !verify_certificate(ssm, bad).unwrap().passes(&SolverOptions::default()) {
                rejected += 1;
            }
        }
        let mut bad_increase = [f64::NEG_INFINITY; 2];
        for _ in 0..100 {
            let x0 = random_inside(&mut rng, &f.sys, 2.0, 2.0);
            let traj = integrate(&f.sys, &x0, 20.0, &SimOptions::default()).unwrap();
            let d = check_decay(&f.lf, &traj);
            worst = worst.max(d.max_violation);
            pairs += d.pairs;
            for w in traj.states.windows(2) {
                if in_polytope(ssm, &w[0]) && in_polytope(ssm, &w[1]) {
                    for (inc, bad) in bad_increase.iter_mut().zip(&corrupted) {
                        *inc = inc.max(direct_value(ssm, bad, &w[1]) - direct_value(ssm, bad, &w[0]));
                    }
                }
            }
        }
        detected += bad_increase.iter().filter(|inc| **inc > 1e-6).count();
    }
    check(
        worst <= 1e-6 && pairs > 0 && detected == 4 && rejected == 4,
        format!("max V increase {worst:.2e} over {pairs} pairs, corrupted certificates detected {detected}/4, rejected {rejected}/4"),
    )
}

fn blend(a: &[f64], b: &[f64], w: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(a, b)| w * a + (1.0 - w) * b).collect()
}

fn lmi_validity() -> Outcome {
    let opts = SolverOptions::default();
    let mut worst: f64 = f64::NEG_INFINITY;
    let mut failures = Vec::new();
    for (name, text) in [("2-bus", TWO_BUS), ("3-bus", THREE_BUS), ("3-bus path", THREE_BUS_PATH)] {
        let f = Fixture::new(text);
        let ssm = &f.sys.ssm;
        let other = solve_lmi(ssm, &SolverOptions { q_floor: 1e-2, diag_floor: 1e-2, ..opts.clone() }).unwrap();
        let mut certs = vec![f.cert.clone(), other.clone()];
        for w in [0.25, 0.5, 0.75] {
            certs.push(LyapunovCertificate {
                q: &f.cert.q * w + &other.q * (1.0 - w),
                k: blend(&f.cert.k, &other.k, w),
                h: blend(&f.cert.h, &other.h, w),
                lmi_residual: 0.0,
                slack: 0.0,
            });
        }
        for c in &certs {
            let v = verify_certificate(ssm, c).unwrap();
            worst = worst.max(v.residual);
            let ok = v.residual <= 1e-7 && v.min_k >= 1e-6 && v.min_h >= 1e-6 && v.q_complement_min >= 1e-6;
            if !ok {
                failures.push(format!("{name}: {v:?}"));
            }
        }
    }
    check(failures.is_empty(), format!("15 certificates, max residual {worst:.2e} {}", failures.join("; ")))
}

fn sector_bound() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut violations = 0;
    let mut samples = 0;
    for text in [TWO_BUS, THREE_BUS] {
        let sys = System::new(parse_grid(text).unwrap()).unwrap();
        for _ in 0..50_000 {
            let x = random_inside(&mut rng, &sys, 2.0 * PI, 1.0);
            let u = sys.ssm.edge_deviation(&x);
            let f = sys.ssm.nonlinearity(&x);
            for (u, f) in u.iter().zip(&f) {
                let p = u * f;
                if p < -1e-15 || p > u * u * (1.0 + 1e-12) + 1e-15 {
                    violations += 1;
                }
            }
            samples += 1;
        }
    }
    check(violations == 0, format!("{samples} samples, {violations} violations"))
}

fn vdot_consistency() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let opts = SimOptions { rtol: 1e-12, atol: 1e-16, ..SimOptions::default() };
    let mut worst: f64 = 0.0;
    let mut compared = 0;
    for text in [TWO_BUS, THREE_BUS] {
        let f = Fixture::new(text);
        for _ in 0..10 {
            let x0 = random_inside(&mut rng, &f.sys, 1.5, 1.5);
            let traj = integrate(&f.sys, &x0, 10.0, &opts).unwrap();
            let h = traj.times[1] - traj.times[0];
            let v: Vec<f64> = traj.states.iter().map(|x| f.lf.value(x)).collect();
            for i in 2..v.len() - 2 {
                let fd = (v[i - 2] - 8.0 * v[i - 1] + 8.0 * v[i + 1] - v[i + 2]) / (12.0 * h);
                if fd.abs() > 1e-8 && traj.states[i - 2..=i + 2].iter().all(|x| in_polytope(&f.sys.ssm, x)) {
                    let exact = f.lf.derivative(&traj.states[i]);
                    worst = worst.max((exact - fd).abs() / fd.abs());
                    compared += 1;
                }
            }
        }
    }
    check(worst <= 1e-5 && compared > 0, format!("{compared} points, max relative error {worst:.2e}"))
}

/// Dense-grid minimum of V over one flow-out facet, refined by repeatedly
/// zooming in on the best grid points.
fn brute_facet(lf: &LyapunovFunction, grid: &GridModel, edge: usize, sign: i8) -> f64 {
    let ssm = &lf.ssm;
    let layout = ssm.layout;
    let line = &grid.lines()[edge];
    let facet = sign as f64 * PI - 2.0 * ssm.sep_edges[edge];
    let free: Vec<usize> = (0..layout.n).filter(|&k| k != line.from && k != line.to).collect();
    let dims = free.len() + layout.m;
    let mut lo: Vec<f64> = free.iter().map(|_| -2.0 * PI).chain((0..layout.m).map(|_| -10.0)).collect();
    let mut hi: Vec<f64> = lo.iter().map(|v| -v).collect();
    let state = |p: &[f64]| {
        let mut x = vec![0.0; layout.dim()];
        x[layout.angle_index(line.from)] = facet;
        for (i, &k) in free.iter().enumerate() {
            x[layout.angle_index(k)] = p[i];
        }
        for k in 0..layout.m {
            x[layout.velocity_index(k)] = p[free.len() + k];
        }
        x
    };
    let feasible = |x: &[f64]| {
        let angles = ssm.edge_angles(x);
        let others = angles.iter().enumerate().all(|(p, a)| p == edge || a.abs() <= PI);
        others && sign as f64 * ssm.edge_rates(x)[edge] >= -1e-9
    };
    let points: usize = if dims == 1 { 2001 } else { 81 };
    let mut best = f64::INFINITY;
    let mut centre = vec![0.0; dims];
    for _ in 0..12 {
        let mut p = vec![0.0; dims];
        let total = points.pow(dims as u32);
        for idx in 0..total {
            let mut r = idx;
            for d in 0..dims {
                let j = r % points;
                r /= points;
                p[d] = lo[d] + (hi[d] - lo[d]) * j as f64 / (points - 1) as f64;
            }
            let x = state(&p);
            if feasible(&x) {
                let v = lf.value(&x);
                if v < best {
                    best = v;
                    centre.copy_from_slice(&p);
                }
            }
        }
        for d in 0..dims {
            let cell = (hi[d] - lo[d]) / (points - 1) as f64;
            lo[d] = centre[d] - 4.0 * cell;
            hi[d] = centre[d] + 4.0 * cell;
        }
    }
    best
}

fn facet_oracle() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for text in [TWO_BUS, THREE_BUS_PATH] {
        let f = Fixture::new(text);
        for e in 0..f.sys.ssm.n_edges() {
            for sign in [1i8, -1] {
                let m = facet_minimum(&f.lf, e, sign, &GeometryOptions::default()).unwrap();
                let brute = brute_facet(&f.lf, &f.sys.grid, e, sign);
                worst = worst.max((m.value - brute).abs());
                count += 1;
            }
        }
    }
    check(worst <= 1e-4, format!("{count} facets, max |multistart - brute force| {worst:.2e}"))
}

fn three_bus_screening() -> Outcome {
    let t = Instant::now();
    let f = Fixture::new(THREE_BUS);
    let region = build_region_estimate(&f.lf, &f.sys.grid_hash, &GeometryOptions::default()).unwrap();
    let baseline = EnergyBaseline::new(&f.sys).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let layout = f.sys.ssm.layout;
    let states: Vec<Vec<f64>> = (0..500)
        .map(|_| {
            let mut x = vec![0.0; f.sys.dim()];
            for k in 0..layout.n {
                x[layout.angle_index(k)] = rng.gen_range(-1.5..1.5);
            }
            for k in 0..layout.m {
                x[layout.velocity_index(k)] = rng.gen_range(-2.0..2.0);
            }
            x
        })
        .collect();
    let screener = Screener { sys: &f.sys, lf: &f.lf, region: &region, baseline: Some(&baseline) };
    let opts = ScreenOptions { simulate: Some((100.0, SimOptions::default())), ..Default::default() };
    let report = screener.screen_batch(&states, &opts);
    let unsound: usize = report.summary.iter().map(|s| s.unsound).sum();
    let dominance = states
        .iter()
        .filter(|x| gridcert_core::screening::certify_vmin(&f.lf, &region, x).certified())
        .filter(|x| !certify_geometry(&f.lf, &region, x).certified())
        .count();
    let counts: Vec<String> = report.summary.iter().map(|s| format!("{:?} {}", s.method, s.certified)).collect();
    let elapsed = t.elapsed();
    check(
        unsound == 0 && dominance == 0 && report.errors == 0 && within(elapsed, 300.0),
        format!(
            "{} certified, converged {:?}, unsound {unsound}, dominance violations {dominance}, region closed {}, {elapsed:.1?}",
            counts.join(", "),
            report.simulated_converged,
            report.region_closed
        ),
    )
}

fn main() {
    let mut failed = 0;
    let mut report = |id: u32, name: &str, outcome: Outcome| {
        let (tag, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} criterion {id:>2} {name}: {detail}");
    };
    report(1, "two-bus equilibrium", sep_angle());
    report(2, "facet argmins at the UEPs", facet_argmins());
    let (data, elapsed) = two_bus_comparison();
    report(3, "nested certified sets", nesting(&data, elapsed));
    report(4, "soundness against simulation", soundness(&data));
    report(5, "Lyapunov decay", lyapunov_decay());
    report(6, "LMI validity and cone property", lmi_validity());
    report(7, "sector bound", sector_bound());
    report(8, "V-dot consistency", vdot_consistency());
    report(9, "facet minima against brute force", facet_oracle());
    report(10, "three-bus screening", three_bus_screening());
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
