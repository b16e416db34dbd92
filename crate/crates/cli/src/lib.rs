//! Command-line front end. Every subcommand loads its inputs, calls into
//! `gridcert-core` and writes the result; numerical work stays in the core.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use gridcert_core::equilibrium::{check_security, solve_sep};
use gridcert_core::error::Error as CoreError;
use gridcert_core::screening::sample_region_boundary;
use gridcert_core::*;
use serde::Serialize;

#[derive(Parser, Debug)]
#[command(name = "gridcert", version, about = "Transient stability certificates for swing-equation grids")]
struct Cli {
    /// Grid description (JSON).
    #[arg(long, global = true)]
    grid: Option<PathBuf>,
    /// Adjust the injection of this bus id so that injections balance.
    #[arg(long, global = true, value_name = "BUS")]
    rebalance_slack: Option<i64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Solve the stable equilibrium and print a report.
    Equilibrium {
        /// JSON array of starting angles, internal bus order.
        #[arg(long)]
        guess: Option<PathBuf>,
        /// Security margin below π/2 for the reported check.
        #[arg(long, default_value_t = 0.0)]
        margin: f64,
    },
    /// Solve the LMI and write a certificate.
    Certify {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long)]
        q_floor: Option<f64>,
        #[arg(long)]
        diag_floor: Option<f64>,
        #[arg(long)]
        max_iter: Option<usize>,
        /// Also write the state-space matrices here.
        #[arg(long)]
        dump_matrices: Option<PathBuf>,
        /// Bias the certificate towards this state (CSV file or inline values).
        #[arg(long)]
        adapt_state: Option<String>,
    },
    /// Label a plane slice by the innermost region estimate.
    Region {
        #[arg(long)]
        cert: PathBuf,
        /// e.g. `delta:1=-7pi/6:5pi/6,omega:1=-3:3`
        #[arg(long)]
        plane: String,
        #[arg(long, default_value_t = 200)]
        res: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Screen a batch of states.
    Screen {
        #[arg(long)]
        cert: PathBuf,
        /// CSV with columns delta_<id> for every bus and omega_<id> for every generator.
        #[arg(long)]
        states: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "geometry,vmin,energy")]
        methods: Vec<Method>,
        /// Cross-check every state by simulation.
        #[arg(long)]
        simulate: bool,
        #[arg(long, default_value_t = 100.0)]
        horizon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Integrate one trajectory.
    Simulate {
        /// CSV file (first row is used) or inline comma-separated values.
        #[arg(long)]
        state: String,
        #[arg(long = "T", default_value_t = 20.0)]
        horizon: f64,
        /// Adds a V column when given.
        #[arg(long)]
        cert: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run all certifiers plus simulation on a plane slice.
    Compare {
        /// Certificate to use; solved with default options when omitted.
        #[arg(long)]
        cert: Option<PathBuf>,
        #[arg(long)]
        plane: String,
        #[arg(long, default_value_t = 400)]
        res: usize,
        #[arg(long, default_value_t = 100.0)]
        horizon: f64,
        /// Skip the simulation ground truth.
        #[arg(long)]
        no_simulate: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Numerical(_) => 2,
        }
    }
}

impl From<CoreError> for Failure {
    fn from(e: CoreError) -> Self {
        use CoreError::*;
        match e {
            NonConvergence { .. }
            | SingularJacobian { .. }
            | Infeasible { .. }
            | FactorizationUnavailable { .. }
            | UnboundedBelow { .. }
            | NoFeasibleStart { .. }
            | ScaleGuard { .. }
            | StepUnderflow { .. }
            | Insecure { .. } => Failure::Numerical(e.to_string()),
            _ => Failure::Usage(e.to_string()),
        }
    }
}

fn usage(msg: impl std::fmt::Display) -> Failure {
    Failure::Usage(msg.to_string())
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            match &f {
                Failure::Usage(m) => eprintln!("error: {m}"),
                Failure::Numerical(m) => eprintln!("numerical failure: {m}"),
            }
            f.code()
        }
    }
}

fn read(path: &Path) -> Outcome<String> {
    fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s
}

fn load_grid(cli: &Cli) -> Outcome<GridModel> {
    let path = cli.grid.as_deref().ok_or_else(|| usage("--grid is required"))?;
    let grid = parse_grid(&read(path)?)?;
    let grid = match cli.rebalance_slack {
        Some(bus) => grid.rebalanced(bus)?,
        None => grid,
    };
    if let Some(v) = grid.validate().violations.first() {
        return Err(usage(format!("invalid grid: {v}")));
    }
    Ok(grid)
}

fn load_certificate(path: &Path, sys: &System) -> Outcome<LyapunovCertificate> {
    let file: CertificateFile =
        serde_json::from_str(&read(path)?).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    Ok(file.certificate(&sys.grid_hash)?)
}

fn region_for(sys: &System, cert: &LyapunovCertificate) -> Outcome<(LyapunovFunction, RegionEstimate)> {
    let lf = LyapunovFunction::new(&sys.ssm, cert)?;
    let region = build_region_estimate(&lf, &sys.grid_hash, &GeometryOptions::default())?;
    Ok((lf, region))
}

fn column_names(grid: &GridModel) -> (Vec<String>, Vec<String>) {
    let angles = grid.buses().iter().map(|b| format!("delta_{}", b.id)).collect();
    let velocities = grid.buses()[..grid.n_gen()].iter().map(|b| format!("omega_{}", b.id)).collect();
    (angles, velocities)
}

/// Converts absolute angles and velocities (internal order) into a
/// deviation state.
fn to_state(sys: &System, values: &[f64]) -> Outcome<Vec<f64>> {
    let (n, m) = (sys.grid.n(), sys.grid.n_gen());
    if values.len() != n + m {
        return Err(usage(format!("expected {} values ({n} angles, {m} velocities), got {}", n + m, values.len())));
    }
    Ok(sys.ssm.layout.from_absolute(&values[..n], &values[n..], &sys.sep))
}

fn read_states(sys: &System, text: &str) -> Outcome<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(text.as_bytes());
    let header = reader.headers().map_err(usage)?.clone();
    let (angles, velocities) = column_names(&sys.grid);
    let columns: Vec<usize> = angles
        .iter()
        .chain(&velocities)
        .map(|name| header.iter().position(|h| h == name).ok_or_else(|| usage(format!("states CSV lacks column {name}"))))
        .collect::<Outcome<_>>()?;
    let mut out = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(usage)?;
        let values = columns
            .iter()
            .map(|&c| {
                record
                    .get(c)
                    .and_then(|v| v.parse::<f64>().ok())
                    .ok_or_else(|| usage(format!("row {}: bad value in column {}", row + 1, &header[c])))
            })
            .collect::<Outcome<Vec<f64>>>()?;
        out.push(to_state(sys, &values)?);
    }
    Ok(out)
}

fn parse_state(sys: &System, arg: &str) -> Outcome<Vec<f64>> {
    let path = Path::new(arg);
    if path.is_file() {
        let states = read_states(sys, &read(path)?)?;
        return states.into_iter().next().ok_or_else(|| usage(format!("{arg}: no rows")));
    }
    let values = arg
        .split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| usage(format!("{arg}: not a file or a list of numbers"))))
        .collect::<Outcome<Vec<f64>>>()?;
    to_state(sys, &values)
}

#[derive(Serialize)]
struct BusAngle {
    id: i64,
    angle: f64,
}

#[derive(Serialize)]
struct EdgeAngle {
    from: i64,
    to: i64,
    difference: f64,
}

#[derive(Serialize)]
struct EquilibriumReport {
    grid_hash: String,
    buses: Vec<BusAngle>,
    edges: Vec<EdgeAngle>,
    residual_norm: f64,
    iterations: usize,
    margin: f64,
    secure: bool,
}

#[derive(Serialize)]
struct CertifySummary<'a> {
    grid_hash: &'a str,
    residual: f64,
    slack: f64,
    adapted: Option<bool>,
    margin_before: Option<f64>,
    margin_after: Option<f64>,
    note: Option<String>,
}

fn execute(cli: &Cli) -> Outcome {
    let grid = load_grid(cli)?;
    match &cli.command {
        Command::Equilibrium { guess, margin } => {
            let start = match guess {
                Some(p) => serde_json::from_str::<Vec<f64>>(&read(p)?).map_err(|e| usage(format!("{}: {e}", p.display())))?,
                None => vec![0.0; grid.n()],
            };
            let sep = solve_sep(&grid, &start)?;
            let buses = grid.buses();
            let report = EquilibriumReport {
                grid_hash: grid.content_hash(),
                buses: buses.iter().zip(&sep.angles).map(|(b, a)| BusAngle { id: b.id, angle: *a }).collect(),
                edges: grid
                    .lines()
                    .iter()
                    .zip(&sep.edge_differences)
                    .map(|(l, d)| EdgeAngle { from: buses[l.from].id, to: buses[l.to].id, difference: *d })
                    .collect(),
                residual_norm: sep.residual_norm,
                iterations: sep.iterations,
                margin: *margin,
                secure: check_security(&sep, *margin),
            };
            print!("{}", to_json(&report));
        }
        Command::Certify { out, tol, q_floor, diag_floor, max_iter, dump_matrices, adapt_state } => {
            let sys = System::new(grid)?;
            let mut opts = SolverOptions::default();
            for (value, name) in [(tol, "--tol"), (q_floor, "--q-floor"), (diag_floor, "--diag-floor")] {
                if let Some(v) = value {
                    if !(*v > 0.0) {
                        return Err(usage(format!("{name} must be positive")));
                    }
                }
            }
            opts.tolerance = tol.unwrap_or(opts.tolerance);
            opts.q_floor = q_floor.unwrap_or(opts.q_floor);
            opts.diag_floor = diag_floor.unwrap_or(opts.diag_floor);
            opts.max_iter = max_iter.unwrap_or(opts.max_iter);
            if opts.max_iter == 0 {
                return Err(usage("--max-iter must be positive"));
            }
            if let Some(path) = dump_matrices {
                write(path, &to_json(&sys.ssm.dump()))?;
            }
            let mut cert = solve_lmi(&sys.ssm, &opts)?;
            let mut summary = CertifySummary {
                grid_hash: &sys.grid_hash,
                residual: 0.0,
                slack: 0.0,
                adapted: None,
                margin_before: None,
                margin_after: None,
                note: None,
            };
            if let Some(arg) = adapt_state {
                let x0 = parse_state(&sys, arg)?;
                let a = adapt_certificate(&sys, &cert, &x0, &opts, &GeometryOptions::default())?;
                summary.adapted = Some(a.adapted);
                summary.margin_before = Some(a.margin_before);
                summary.margin_after = Some(a.margin_after);
                summary.note = a.note;
                cert = a.cert;
            }
            summary.residual = cert.lmi_residual;
            summary.slack = cert.slack;
            write(out, &to_json(&CertificateFile::new(&cert, sys.grid_hash.clone(), &opts)))?;
            print!("{}", to_json(&summary));
        }
        Command::Region { cert, plane, res, out } => {
            let sys = System::new(grid)?;
            let plane: PlaneSpec = plane.parse()?;
            let cert = load_certificate(cert, &sys)?;
            let (lf, region) = region_for(&sys, &cert)?;
            let samples = sample_region_boundary(&sys, &lf, &region, &plane, *res)?;
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["coord1", "coord2", "label"]).map_err(usage)?;
            for s in &samples {
                w.write_record([s.c1.to_string(), s.c2.to_string(), s.label.as_str().to_string()]).map_err(usage)?;
            }
            let bytes = w.into_inner().map_err(usage)?;
            write(out, &String::from_utf8(bytes).expect("csv is utf-8"))?;
        }
        Command::Screen { cert, states, methods, simulate, horizon, out } => {
            let sys = System::new(grid)?;
            let cert = load_certificate(cert, &sys)?;
            let states = read_states(&sys, &read(states)?)?;
            let (lf, region) = region_for(&sys, &cert)?;
            let baseline = if methods.contains(&Method::Energy) { Some(EnergyBaseline::new(&sys)?) } else { None };
            let screener = Screener { sys: &sys, lf: &lf, region: &region, baseline: baseline.as_ref() };
            let opts = ScreenOptions {
                methods: methods.clone(),
                simulate: simulate.then(|| (*horizon, SimOptions::default())),
            };
            let report = screener.screen_batch(&states, &opts);
            write(out, &to_json(&report))?;
        }
        Command::Simulate { state, horizon, cert, out } => {
            let sys = System::new(grid)?;
            if !(*horizon > 0.0) {
                return Err(usage("--T must be positive"));
            }
            let x0 = parse_state(&sys, state)?;
            let mut traj = integrate(&sys, &x0, *horizon, &SimOptions::default())?;
            if let Some(path) = cert {
                let cert = load_certificate(path, &sys)?;
                traj.attach_values(&LyapunovFunction::new(&sys.ssm, &cert)?);
            }
            let (angles, velocities) = column_names(&sys.grid);
            let mut w = csv::Writer::from_writer(Vec::new());
            let mut header = vec!["t".to_string()];
            header.extend(angles);
            header.extend(velocities);
            if traj.v_values.is_some() {
                header.push("V".into());
            }
            w.write_record(&header).map_err(usage)?;
            for (i, (t, x)) in traj.times.iter().zip(&traj.states).enumerate() {
                let (a, v) = sys.ssm.layout.to_absolute(x, &sys.sep);
                let mut row = vec![t.to_string()];
                row.extend(a.iter().chain(&v).map(f64::to_string));
                if let Some(values) = &traj.v_values {
                    row.push(values[i].to_string());
                }
                w.write_record(&row).map_err(usage)?;
            }
            let bytes = w.into_inner().map_err(usage)?;
            write(out, &String::from_utf8(bytes).expect("csv is utf-8"))?;
            println!("outcome: {:?}, crossings: {}", traj.outcome, traj.crossings.len());
        }
        Command::Compare { cert, plane, res, horizon, no_simulate, out } => {
            let sys = System::new(grid)?;
            let plane: PlaneSpec = plane.parse()?;
            let cert = match cert {
                Some(p) => load_certificate(p, &sys)?,
                None => solve_lmi(&sys.ssm, &SolverOptions::default())?,
            };
            let (lf, region) = region_for(&sys, &cert)?;
            let baseline = EnergyBaseline::new(&sys)?;
            let config = CompareConfig {
                plane,
                resolution: *res,
                simulate: (!no_simulate).then(|| (*horizon, SimOptions::default())),
            };
            let data = compare(&sys, &lf, &region, &baseline, &config)?;
            write(out, &to_json(&data))?;
            print!("{}", to_json(&data.summary));
        }
    }
    Ok(())
}
