//! Command-line front end: certification, bisection, sweeps, inequality
//! batteries and simulation, all emitting CSV.

pub mod output;
pub mod spec_file;

use clap::{Args, Parser, Subcommand, ValueEnum};
use delaycert::gamma::{certify_gamma, max_scale_bisect, region_sweep_gamma, CertifyOptions, GammaDelaySystem, GammaProp};
use delaycert::ineq::run_battery;
use delaycert::poisson::{certify_poisson, lambda_scan, PoissonDelaySystem, PoissonVariant};
use delaycert::sim::{decay_metric, simulate_gamma, simulate_poisson, InitialHistory, SimOptions};
use delaycert::{SolveOptions, Status};
use output::{fmt_g, Table};
use spec_file::{System, DISCRETE_EXAMPLE, TWO_CARS};
use std::ffi::OsString;
use std::path::PathBuf;
use std::str::FromStr;

/// Relative gap below which a battery instance counts as a violation.
pub const GAP_TOL: f64 = 1e-7;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Spec(String),
    #[error(transparent)]
    Core(#[from] delaycert::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Parser)]
#[command(name = "delaycert", version, about = "Stability certificates for linear systems with gamma- or Poisson-distributed delay")]
pub struct Cli {
    /// Write CSV here instead of stdout (relative paths honour DELAYCERT_OUT_DIR).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Solve one LMI and print verdict and margin.
    Certify(CertifyArgs),
    /// Largest certified T at fixed h, by bisection.
    MaxScale(MaxScaleArgs),
    /// Verdict grid over (T, h).
    Region(RegionArgs),
    /// Verdicts over a grid of Poisson rates.
    LambdaScan(LambdaScanArgs),
    /// Randomized battery over every inequality; exits 1 on a violation.
    VerifyInequalities(VerifyArgs),
    /// Simulate the system and emit the trajectory.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PropArg {
    #[value(name = "1")]
    P1,
    #[value(name = "2")]
    P2,
    #[value(name = "3")]
    P3,
    #[value(name = "remark7")]
    Remark7,
}

impl PropArg {
    fn gamma(self) -> Result<GammaProp, CliError> {
        match self {
            PropArg::P1 => Ok(GammaProp::Prop1),
            PropArg::P2 => Ok(GammaProp::Prop2),
            _ => Err(CliError::Usage("--prop 3/remark7 applies to Poisson systems only".into())),
        }
    }

    fn poisson(self) -> Result<PoissonVariant, CliError> {
        match self {
            PropArg::P3 => Ok(PoissonVariant::Prop3),
            PropArg::Remark7 => Ok(PoissonVariant::Remark7),
            _ => Err(CliError::Usage("--prop 1/2 applies to gamma systems only".into())),
        }
    }
}

/// `lo:hi:steps`, `steps` equispaced points including both ends.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl FromStr for Grid {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split(':').collect();
        let [lo, hi, steps] = parts[..] else {
            return Err(format!("expected lo:hi:steps, got {s:?}"));
        };
        let num = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"));
        let (lo, hi) = (num(lo)?, num(hi)?);
        let steps: usize = steps.trim().parse().map_err(|e| format!("{steps:?}: {e}"))?;
        if steps == 0 || !lo.is_finite() || !hi.is_finite() || hi < lo || (steps == 1 && hi != lo) {
            return Err(format!("invalid grid {s:?}"));
        }
        Ok(Grid { lo, hi, steps })
    }
}

impl Grid {
    pub fn points(&self) -> Vec<f64> {
        if self.steps == 1 {
            return vec![self.lo];
        }
        let d = (self.hi - self.lo) / (self.steps - 1) as f64;
        (0..self.steps).map(|i| if i + 1 == self.steps { self.hi } else { self.lo + d * i as f64 }).collect()
    }
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    /// Margin a certificate must exceed.
    #[arg(long, default_value_t = 1e-10)]
    pub margin_tol: f64,
    /// Newton-step budget per solve.
    #[arg(long, default_value_t = 500)]
    pub max_iters: usize,
    /// Keep the common kernel of A and A1 instead of projecting it out.
    #[arg(long)]
    pub no_reduce: bool,
}

impl SolveArgs {
    fn solve(&self) -> Result<SolveOptions, CliError> {
        if !(self.margin_tol > 0.0) {
            return Err(CliError::Usage("--margin-tol must be positive".into()));
        }
        Ok(SolveOptions { max_iters: self.max_iters, margin_tol: self.margin_tol, ..SolveOptions::default() })
    }

    fn certify(&self) -> Result<CertifyOptions, CliError> {
        Ok(CertifyOptions { solve: self.solve()?, reduce_neutral: !self.no_reduce })
    }
}

#[derive(Debug, Args)]
pub struct CertifyArgs {
    /// System spec (JSON); defaults to the built-in two-cars system, or the
    /// built-in discrete example for --prop 3/remark7.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub prop: Option<PropArg>,
    #[arg(long = "T")]
    pub t: Option<f64>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[command(flatten)]
    pub solve: SolveArgs,
}

#[derive(Debug, Args)]
pub struct MaxScaleArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "1")]
    pub prop: PropArg,
    /// Delay values (comma separated).
    #[arg(long, value_delimiter = ',', conflicts_with = "h_grid")]
    pub h: Vec<f64>,
    #[arg(long = "h-grid")]
    pub h_grid: Option<Grid>,
    #[arg(long = "T-lo", default_value_t = 1e-4)]
    pub t_lo: f64,
    #[arg(long = "T-hi", default_value_t = 1.0)]
    pub t_hi: f64,
    /// Bisection tolerance on T.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    #[command(flatten)]
    pub solve: SolveArgs,
}

#[derive(Debug, Args)]
pub struct RegionArgs {
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "1")]
    pub prop: PropArg,
    #[arg(long = "T-grid", default_value = "0.02:0.4:20")]
    pub t_grid: Grid,
    #[arg(long = "h-grid", default_value = "0:0.4:20")]
    pub h_grid: Grid,
    #[command(flatten)]
    pub solve: SolveArgs,
}

#[derive(Debug, Args)]
pub struct LambdaScanArgs {
    /// Defaults to the built-in discrete example.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Variant to scan; both when omitted.
    #[arg(long, value_enum)]
    pub prop: Option<PropArg>,
    #[arg(long = "lambda-grid", default_value = "0.05:3:60")]
    pub lambda_grid: Grid,
    /// Override the spec's integer delay.
    #[arg(long)]
    pub h: Option<u32>,
    #[command(flatten)]
    pub solve: SolveArgs,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Instances per inequality.
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Defaults to the built-in two-cars system.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Constant initial function (comma separated); alternating ±1 by default.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub phi: Vec<f64>,
    #[arg(long, default_value_t = 0.01)]
    pub dt: f64,
    /// Final time (continuous) or step count (discrete); 200 / 500 by default.
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long, default_value_t = 1e-12)]
    pub tail_eps: f64,
    /// Emit every k-th sample.
    #[arg(long, default_value_t = 1)]
    pub stride: usize,
    #[arg(long = "T")]
    pub t: Option<f64>,
    #[arg(long)]
    pub h: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
}

/// Parse `argv` (including the program name), run, and return the exit code:
/// 0 completed, 1 infeasible or violation found, 2 usage or input error.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cli: &Cli) -> Result<i32, CliError> {
    let out = cli.out.as_deref();
    match &cli.command {
        Command::Certify(a) => certify(a, out),
        Command::MaxScale(a) => max_scale(a, out),
        Command::Region(a) => region(a, out),
        Command::LambdaScan(a) => scan(a, out),
        Command::VerifyInequalities(a) => verify(a, out),
        Command::Simulate(a) => simulate(a, out),
    }
}

fn header(cols: &[&str]) -> Vec<String> {
    cols.iter().map(|s| s.to_string()).collect()
}

fn gamma_system(spec: Option<&std::path::Path>) -> Result<GammaDelaySystem, CliError> {
    match spec_file::load(spec, TWO_CARS)? {
        System::Gamma(s) => Ok(s),
        System::Poisson(_) => Err(CliError::Usage("this command needs a gamma-distributed system".into())),
    }
}

fn poisson_system(spec: Option<&std::path::Path>) -> Result<PoissonDelaySystem, CliError> {
    match spec_file::load(spec, DISCRETE_EXAMPLE)? {
        System::Poisson(s) => Ok(s),
        System::Gamma(_) => Err(CliError::Usage("this command needs a Poisson-distributed system".into())),
    }
}

fn integer_delay(h: f64) -> Result<u32, CliError> {
    if h >= 0.0 && h.fract() == 0.0 && h <= f64::from(u32::MAX) {
        Ok(h as u32)
    } else {
        Err(CliError::Usage(format!("discrete delay must be a non-negative integer, got {h}")))
    }
}

fn override_gamma(sys: GammaDelaySystem, t: Option<f64>, h: Option<f64>) -> Result<GammaDelaySystem, CliError> {
    let (t, h) = (t.unwrap_or(sys.t), h.unwrap_or(sys.h));
    Ok(sys.with_params(t, h)?)
}

fn override_poisson(sys: PoissonDelaySystem, lambda: Option<f64>, h: Option<f64>) -> Result<PoissonDelaySystem, CliError> {
    let h = h.map(integer_delay).transpose()?.unwrap_or(sys.h);
    Ok(PoissonDelaySystem::new(sys.a, sys.a1, lambda.unwrap_or(sys.lambda), h)?)
}

fn load_any(spec: Option<&std::path::Path>, prefer_poisson: bool) -> Result<System, CliError> {
    spec_file::load(spec, if prefer_poisson { DISCRETE_EXAMPLE } else { TWO_CARS })
}

fn status_code(s: Status) -> i32 {
    if s == Status::Infeasible {
        1
    } else {
        0
    }
}

fn certify(a: &CertifyArgs, out: Option<&std::path::Path>) -> Result<i32, CliError> {
    let prefer_poisson = matches!(a.prop, Some(PropArg::P3 | PropArg::Remark7));
    let sys = load_any(a.spec.as_deref(), prefer_poisson)?;
    let hdr = header(&["prop", "verdict", "margin", "upper_bound"]);
    let (label, result) = match sys {
        System::Gamma(s) => {
            if a.lambda.is_some() {
                return Err(CliError::Usage("--lambda applies to Poisson systems only".into()));
            }
            let prop = a.prop.unwrap_or(PropArg::P1).gamma()?;
            let s = override_gamma(s, a.t, a.h)?;
            let c = certify_gamma(&s, prop, &a.solve.certify()?)?;
            if c.neutral_dim > 0 {
                log::info!("projected out a {}-dimensional common kernel of A and A1", c.neutral_dim);
            }
            (prop.label(), c.result)
        }
        System::Poisson(s) => {
            if a.t.is_some() {
                return Err(CliError::Usage("--T applies to gamma systems only".into()));
            }
            let variant = a.prop.unwrap_or(PropArg::P3).poisson()?;
            let s = override_poisson(s, a.lambda, a.h)?;
            (variant.label(), certify_poisson(&s, variant, &a.solve.solve()?)?)
        }
    };
    match &result.note {
        Some(note) if result.status != Status::Feasible => log::warn!("{note}"),
        Some(note) => log::info!("{note}"),
        None => {}
    }
    let mut t = Table::create(out, &hdr)?;
    t.row(&[label.to_string(), result.status.to_string(), fmt_g(result.margin), fmt_g(result.upper_bound)])?;
    t.finish()?;
    Ok(status_code(result.status))
}

fn max_scale(a: &MaxScaleArgs, out: Option<&std::path::Path>) -> Result<i32, CliError> {
    let sys = gamma_system(a.spec.as_deref())?;
    let prop = a.prop.gamma()?;
    let hs = match (&a.h_grid, a.h.is_empty()) {
        (Some(g), _) => g.points(),
        (None, false) => a.h.clone(),
        (None, true) => vec![sys.h],
    };
    let opts = a.solve.certify()?;
    let mut t = Table::create(out, &header(&["h", "prop", "max_T", "solves"]))?;
    for h in hs {
        let r = max_scale_bisect(&sys, h, prop, (a.t_lo, a.t_hi), a.tol, &opts)?;
        for d in &r.diagnostics {
            log::warn!("{d}");
        }
        let max_t = r.max_t.map(fmt_g).unwrap_or_default();
        t.row(&[fmt_g(h), prop.label().into(), max_t, r.solves.to_string()])?;
    }
    t.finish()?;
    Ok(0)
}

fn region(a: &RegionArgs, out: Option<&std::path::Path>) -> Result<i32, CliError> {
    let sys = gamma_system(a.spec.as_deref())?;
    let prop = a.prop.gamma()?;
    let cells = region_sweep_gamma(&sys, &a.t_grid.points(), &a.h_grid.points(), prop, &a.solve.certify()?)?;
    let mut t = Table::create(out, &header(&["T", "h", "prop", "verdict", "margin"]))?;
    for c in cells {
        t.row(&[fmt_g(c.t), fmt_g(c.h), prop.label().into(), c.status.to_string(), fmt_g(c.margin)])?;
    }
    t.finish()?;
    Ok(0)
}

fn scan(a: &LambdaScanArgs, out: Option<&std::path::Path>) -> Result<i32, CliError> {
    let mut sys = poisson_system(a.spec.as_deref())?;
    if let Some(h) = a.h {
        sys = PoissonDelaySystem::new(sys.a, sys.a1, sys.lambda, h)?;
    }
    let variants = match a.prop {
        Some(p) => vec![p.poisson()?],
        None => vec![PoissonVariant::Prop3, PoissonVariant::Remark7],
    };
    let lambdas = a.lambda_grid.points();
    let opts = a.solve.solve()?;
    let mut t = Table::create(out, &header(&["lambda", "h", "variant", "verdict", "margin"]))?;
    // λ-major so each λ's variants sit on adjacent rows
    let per: Vec<Vec<_>> = variants.iter().map(|&v| lambda_scan(&sys, &lambdas, v, &opts)).collect::<Result<_, _>>()?;
    for i in 0..lambdas.len() {
        for cells in &per {
            let c = &cells[i];
            t.row(&[fmt_g(c.lambda), c.h.to_string(), c.variant.label().into(), c.status.to_string(), fmt_g(c.margin)])?;
        }
    }
    t.finish()?;
    Ok(0)
}

fn verify(a: &VerifyArgs, out: Option<&std::path::Path>) -> Result<i32, CliError> {
    if a.trials == 0 {
        return Err(CliError::Usage("--trials must be positive".into()));
    }
    let rows = run_battery(a.trials, a.seed)?;
    let mut t = Table::create(out, &header(&["theorem", "seed", "lhs", "rhs_jensen", "rhs_extra", "gap"]))?;
    let mut violations = 0usize;
    for r in &rows {
        let p = &r.report;
        let bad = p.relative_gap() < -GAP_TOL || p.rhs_extra < -1e-12 * p.lhs.abs().max(1.0);
        if bad {
            violations += 1;
            log::error!("{} seed {}: gap {} (lhs {})", r.theorem.name(), r.seed, p.gap, p.lhs);
        }
        t.row(&[r.theorem.name().into(), r.seed.to_string(), fmt_g(p.lhs), fmt_g(p.rhs_jensen), fmt_g(p.rhs_extra), fmt_g(p.gap)])?;
    }
    t.finish()?;
    eprintln!("{} instances, {violations} violations", rows.len());
    Ok(if violations > 0 { 1 } else { 0 })
}

fn simulate(a: &SimulateArgs, out: Option<&std::path::Path>) -> Result<i32, CliError> {
    let sys = load_any(a.spec.as_deref(), false)?;
    let n = sys.dim();
    let phi = if a.phi.is_empty() {
        (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()
    } else if a.phi.len() == n {
        a.phi.clone()
    } else {
        return Err(CliError::Usage(format!("--phi has {} entries, system has {n} states", a.phi.len())));
    };
    if a.stride == 0 {
        return Err(CliError::Usage("--stride must be positive".into()));
    }
    let phi = InitialHistory::Constant(phi);
    let (traj, axis) = match sys {
        System::Gamma(s) => {
            let s = override_gamma(s, a.t, a.h)?;
            let opts = SimOptions { dt: a.dt, horizon: a.horizon.unwrap_or(200.0), tail_eps: a.tail_eps };
            (simulate_gamma(&s, &phi, &opts)?, "t")
        }
        System::Poisson(s) => {
            let s = override_poisson(s, a.lambda, a.h)?;
            let opts = SimOptions { horizon: a.horizon.unwrap_or(500.0), tail_eps: a.tail_eps, ..SimOptions::default() };
            (simulate_poisson(&s, &phi, &opts)?, "k")
        }
    };
    for w in &traj.warnings {
        log::warn!("{w}");
    }
    let mut hdr = vec![axis.to_string()];
    hdr.extend((1..=n).map(|i| format!("x{i}")));
    hdr.push("norm".into());
    let mut t = Table::create(out, &hdr)?;
    let norms = traj.norms();
    for k in (0..traj.x.len()).step_by(a.stride) {
        let mut row = vec![if axis == "k" { k.to_string() } else { fmt_g(traj.times[k]) }];
        row.extend(traj.x[k].iter().map(|v| fmt_g(*v)));
        row.push(fmt_g(norms[k]));
        t.row(&row)?;
    }
    t.finish()?;
    let d = decay_metric(&traj, 1e-3);
    eprintln!("initial norm {}, terminal-window max {}, decayed (1e-3): {}", fmt_g(d.initial_norm), fmt_g(d.terminal_max), d.decayed);
    Ok(0)
}
