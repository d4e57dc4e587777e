//! Pipeline behind the `stoch-turnpike` binary: configuration loading, the
//! solve / certify / simulate / diagnose stages and their JSON and CSV output.

use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use stoch_turnpike::dissipativity::{certify, certify_with, find_stilde, verify_dissipation_chain, DissipativityCertificate, ResidualReport};
use stoch_turnpike::model::{validate, ProblemSpec, ValidationReport};
use stoch_turnpike::riccati::{riccati_backward, solve_dare};
use stoch_turnpike::simulate::{
    mean_and_stderr, overtaking_gap, write_paths_csv, EnsembleSpec, EnsembleSummary, GapCurve, Path as SimPath,
};
use stoch_turnpike::stationary::build_stationary_pair;
use stoch_turnpike::turnpike::{
    attach_probability_counts, empirical_exceedance, figure1, moment_turnpike, optimal_trajectory, Figure1,
    MidHorizonProximity, TurnpikeReport,
};
use stoch_turnpike::{
    AffineControl, Error, Matrix, Perturbation, Problem, RiccatiSolution, Schedule, StationaryPair, SymMatrix,
};

pub const DEFAULT_SEED: u64 = 42;
pub const SEED_ENV: &str = "TURNPIKE_SEED";
pub const DEFAULT_HORIZONS: [usize; 5] = [5, 10, 20, 40, 80];
pub const DEFAULT_EPS: [f64; 4] = [0.5, 1.0, 2.0, 5.0];
pub const DEFAULT_ETA: [f64; 3] = [0.1, 0.25, 0.5];
pub const DEFAULT_ENSEMBLE: usize = 10_000;
pub const PAPER_HORIZONS: [usize; 3] = [10, 20, 40];
/// Factor applied to the ensemble size when an empirical count falls below
/// its bound.
pub const RERUN_FACTOR: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Core(#[from] Error),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 1,
            CliError::Core(e) => match e {
                Error::CertificateNotFound { .. } => 3,
                Error::NoConvergence { .. } | Error::Inconclusive { .. } => 4,
                Error::BoundViolated(_) => 5,
                _ => 2,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            1 => "io",
            3 => "certificate_not_found",
            4 => "no_convergence",
            5 => "bound_violated",
            _ => "config",
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({ "error": self.kind(), "exit_code": self.exit_code(), "message": self.to_string() })
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "stoch-turnpike", version, about = "Stochastic LQ optimal control: Riccati, dissipativity and turnpike diagnostics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub overrides: Overrides,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Algebraic and finite-horizon Riccati solutions.
    Solve,
    /// Dissipativity certificate and dissipation-chain residuals.
    Certify,
    /// Monte Carlo ensembles and the shared-noise realization.
    Simulate,
    /// Turnpike bounds on exact moments and on an ensemble.
    Diagnose,
    /// Full pipeline on the built-in scalar example.
    PaperExample,
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct Overrides {
    /// Experiment or bare problem JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of Monte Carlo paths.
    #[arg(long, global = true)]
    pub ensemble: Option<usize>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub horizons: Option<Vec<usize>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub eps: Option<Vec<f64>>,
    #[arg(long, global = true, value_delimiter = ',')]
    pub eta: Option<Vec<f64>>,
    /// Most paths written to each path CSV.
    #[arg(long, global = true)]
    pub max_csv_paths: Option<usize>,
}

/// Experiment file. A file holding only the problem fields is accepted too.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub problem: Option<ProblemSpec>,
    /// Problem JSON, relative to the config file.
    #[serde(default)]
    pub problem_path: Option<PathBuf>,
    #[serde(default)]
    pub horizons: Option<Vec<usize>>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub ensemble: Option<usize>,
    #[serde(default)]
    pub eps: Option<Vec<f64>>,
    #[serde(default)]
    pub eta: Option<Vec<f64>>,
    #[serde(default, rename = "S_tilde")]
    pub stilde: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub gamma: Option<f64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub max_csv_paths: Option<usize>,
}

/// Fully resolved settings of one run.
#[derive(Debug, Clone)]
pub struct Settings {
    pub problem: Problem,
    pub horizons: Vec<usize>,
    pub seed: u64,
    pub ensemble: usize,
    pub eps: Vec<f64>,
    pub eta: Vec<f64>,
    pub stilde: Option<SymMatrix>,
    pub gamma: Option<f64>,
    pub out_dir: PathBuf,
    pub max_csv_paths: usize,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// Reads an experiment config, falling back to a bare problem file.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let is_bare_problem = value.get("A").is_some();
    let mut config = if is_bare_problem {
        let problem: ProblemSpec =
            serde_json::from_value(value).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        ExperimentConfig { problem: Some(problem), ..Default::default() }
    } else {
        serde_json::from_value::<ExperimentConfig>(value)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?
    };
    if let Some(rel) = config.problem_path.take() {
        let resolved = if rel.is_absolute() { rel } else { path.parent().unwrap_or(Path::new(".")).join(rel) };
        if config.problem.is_some() {
            return Err(CliError::Config("give either problem or problem_path, not both".into()));
        }
        config.problem = Some(read_json(&resolved)?);
    }
    Ok(config)
}

fn positive(name: &str, values: &[f64]) -> CliResult<()> {
    if values.is_empty() || values.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(CliError::Config(format!("{name} must be a nonempty list of positive numbers")));
    }
    Ok(())
}

/// Merges flags, environment and config file. Seed precedence: `--seed`,
/// then the environment, then the config, then [`DEFAULT_SEED`].
pub fn resolve(command: Command, overrides: &Overrides, env_seed: Option<String>) -> CliResult<Settings> {
    let config = match (&overrides.config, command) {
        (Some(path), _) => load_config(path)?,
        (None, Command::PaperExample) => ExperimentConfig::default(),
        (None, _) => return Err(CliError::Config("--config is required".into())),
    };
    let paper = command == Command::PaperExample;
    let problem = match (&config.problem, paper) {
        (Some(spec), _) => Problem::from_spec(spec).map_err(|e| CliError::Config(format!("problem: {e}")))?,
        (None, true) => Problem::scalar_example(),
        (None, false) => return Err(CliError::Config("config has no problem".into())),
    };
    let env_seed = match env_seed {
        Some(s) => Some(s.trim().parse::<u64>().map_err(|e| CliError::Config(format!("{SEED_ENV}: {e}")))?),
        None => None,
    };
    let seed = overrides.seed.or(env_seed).or(config.seed).unwrap_or(DEFAULT_SEED);
    let default_horizons = if paper { PAPER_HORIZONS.to_vec() } else { DEFAULT_HORIZONS.to_vec() };
    let mut horizons = overrides.horizons.clone().or(config.horizons.clone()).unwrap_or(default_horizons);
    if horizons.is_empty() || horizons.contains(&0) {
        return Err(CliError::Config("horizons must be a nonempty list of integers >= 1".into()));
    }
    horizons.sort_unstable();
    horizons.dedup();
    let ensemble = overrides.ensemble.or(config.ensemble).unwrap_or(DEFAULT_ENSEMBLE);
    if ensemble == 0 {
        return Err(CliError::Config("ensemble must be at least 1".into()));
    }
    let eps = overrides.eps.clone().or(config.eps.clone()).unwrap_or(DEFAULT_EPS.to_vec());
    let eta = overrides.eta.clone().or(config.eta.clone()).unwrap_or(DEFAULT_ETA.to_vec());
    positive("eps", &eps)?;
    positive("eta", &eta)?;
    let stilde = match &config.stilde {
        Some(rows) => Some(SymMatrix::from_rows(rows).map_err(|e| CliError::Config(format!("S_tilde: {e}")))?),
        None => None,
    };
    if let Some(g) = config.gamma {
        if !(g > 0.0 && g <= 1.0) {
            return Err(CliError::Config("gamma must lie in (0, 1]".into()));
        }
        if stilde.is_none() {
            return Err(CliError::Config("gamma override requires S_tilde".into()));
        }
    }
    let out_dir = overrides.out.clone().or(config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out"));
    Ok(Settings {
        problem,
        horizons,
        seed,
        ensemble,
        eps,
        eta,
        stilde,
        gamma: config.gamma,
        out_dir,
        max_csv_paths: overrides.max_csv_paths.or(config.max_csv_paths).unwrap_or(1000),
    })
}

fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> CliResult<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Config(format!("serialize {name}: {e}")))?;
    text.push('\n');
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

fn write_text(dir: &Path, name: &str, text: &str) -> CliResult<PathBuf> {
    ensure_dir(dir)?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}

/// First and last gains of the finite-horizon schedule, and its distance from
/// the steady gain.
#[derive(Debug, Clone, Serialize)]
pub struct ScheduleSummary {
    pub horizon: usize,
    #[serde(rename = "K_first")]
    pub k_first: Matrix,
    #[serde(rename = "K_last")]
    pub k_last: Matrix,
    #[serde(rename = "P_first")]
    pub p_first: SymMatrix,
    /// `max |K_N(0) − K|`
    pub first_gain_gap: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveOutput {
    pub validation: ValidationReport,
    pub riccati: RiccatiSolution,
    /// `tr(PΣ_W)`
    pub stationary_cost: f64,
    pub schedules: Vec<ScheduleSummary>,
    #[serde(skip)]
    pub pair: StationaryPair,
}

pub fn run_solve(s: &Settings) -> CliResult<SolveOutput> {
    let p = &s.problem;
    let validation = validate(&p.system, &p.cost)?;
    let riccati = solve_dare(&p.system, &p.cost)?;
    let pair = build_stationary_pair(&p.system, &riccati)?;
    let mut schedules = Vec::with_capacity(s.horizons.len());
    for &n in &s.horizons {
        let sched = riccati_backward(&p.system, &p.cost, n, &SymMatrix::zeros(p.system.n()))?;
        let gains = sched.gains();
        schedules.push(ScheduleSummary {
            horizon: n,
            k_first: gains[0].clone(),
            k_last: gains[n - 1].clone(),
            p_first: sched.costs_to_go()[0].clone(),
            first_gain_gap: (&gains[0] - &riccati.k).max_abs(),
        });
    }
    Ok(SolveOutput { stationary_cost: riccati.stationary_cost(&p.system), validation, riccati, schedules, pair })
}

fn write_solve(s: &Settings, out: &SolveOutput) -> CliResult<()> {
    write_json(&s.out_dir, "riccati.json", out)?;
    write_json(&s.out_dir, "stationary.json", &out.pair)?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct HorizonResiduals {
    pub horizon: usize,
    pub residuals: ResidualReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct CertifyOutput {
    pub certificate: DissipativityCertificate,
    /// Dissipation-chain residuals along the finite-horizon optimal control.
    pub chain: Vec<HorizonResiduals>,
}

pub fn run_certify(s: &Settings, solved: &SolveOutput) -> CliResult<CertifyOutput> {
    let p = &s.problem;
    let certificate = match &s.stilde {
        Some(st) => certify_with(&p.system, &p.cost, &solved.riccati, st.clone(), s.gamma)?,
        None => certify(&p.system, &p.cost, &solved.riccati)?,
    };
    let mut chain = Vec::with_capacity(s.horizons.len());
    for &n in &s.horizons {
        let traj = optimal_trajectory(&p.system, &p.cost, &solved.pair, &p.init, n)?;
        chain.push(HorizonResiduals { horizon: n, residuals: verify_dissipation_chain(&p.cost, &solved.riccati, &certificate, &traj) });
    }
    Ok(CertifyOutput { certificate, chain })
}

fn finite_horizon_control(s: &Settings, n: usize) -> CliResult<AffineControl> {
    let p = &s.problem;
    Ok(AffineControl::from_schedule(&riccati_backward(&p.system, &p.cost, n, &SymMatrix::zeros(p.system.n()))?))
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateOutput {
    pub ensembles: Vec<EnsembleSummary>,
    pub figure1: Vec<MidHorizonProximity>,
    #[serde(skip)]
    pub figure1_data: Option<Figure1>,
}

pub fn run_simulate(s: &Settings, solved: &SolveOutput) -> CliResult<SimulateOutput> {
    let p = &s.problem;
    let mut ensembles = Vec::with_capacity(s.horizons.len());
    for &n in &s.horizons {
        let control = finite_horizon_control(s, n)?;
        let spec = EnsembleSpec {
            sys: &p.system,
            cost: &p.cost,
            control: &control,
            pair: &solved.pair,
            init: &p.init,
            horizon: n,
            seed: s.seed,
        };
        let k = &solved.riccati.k;
        let stats = spec.map(s.ensemble, |path| (path.total_cost(), path.replay_residual(&p.system, k)))?;
        let totals: Vec<f64> = stats.iter().map(|t| t.0).collect();
        let (mean, se) = if totals.len() >= 2 { mean_and_stderr(&totals)? } else { (totals[0], f64::NAN) };
        let traj = optimal_trajectory(&p.system, &p.cost, &solved.pair, &p.init, n)?;
        let exact: f64 = (0..n).map(|k| stoch_turnpike::model::stage_cost(&p.cost, &traj.state_control(k))).sum();
        ensembles.push(EnsembleSummary {
            seed: s.seed,
            paths: s.ensemble,
            horizon: n,
            empirical_cost: mean,
            standard_error: se,
            exact_cost: exact,
            z_score: if se > 0.0 { (mean - exact) / se } else { 0.0 },
            max_replay_residual: stats.iter().map(|t| t.1).fold(0.0, f64::max),
        });
        let shown: Vec<SimPath> = (0..s.ensemble.min(s.max_csv_paths)).map(|i| spec.path(i)).collect::<Result<_, _>>()?;
        ensure_dir(&s.out_dir)?;
        let path = s.out_dir.join(format!("paths_N{n}.csv"));
        let file = fs::File::create(&path).map_err(io_err(&path))?;
        write_paths_csv(&mut BufWriter::new(file), &shown).map_err(io_err(&path))?;
    }
    let fig = figure1(&p.system, &p.cost, &solved.pair, &p.init, &s.horizons, s.seed)?;
    Ok(SimulateOutput { ensembles, figure1: fig.metrics.clone(), figure1_data: Some(fig) })
}

fn write_simulate(s: &Settings, out: &SimulateOutput) -> CliResult<()> {
    write_json(&s.out_dir, "ensemble_summary.json", out)?;
    if let Some(fig) = &out.figure1_data {
        write_text(&s.out_dir, "figure1.csv", &fig.to_csv())?;
    }
    Ok(())
}

/// Record of an empirical count below its bound and the larger re-run.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalRerun {
    pub horizon: usize,
    pub first_paths: usize,
    pub rerun_paths: usize,
    pub resolved: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseOutput {
    /// The `(ε, η)` grid is a joint sweep; the bounds hold for each pair.
    pub sweep: &'static str,
    pub reports: Vec<TurnpikeReport>,
    pub reruns: Vec<EmpiricalRerun>,
}

fn empirical_ok(report: &TurnpikeReport) -> bool {
    report.probability_counts.iter().all(|c| c.empirical_holds().unwrap_or(true))
}

pub fn run_diagnose(s: &Settings, solved: &SolveOutput, cert: &DissipativityCertificate) -> CliResult<DiagnoseOutput> {
    let p = &s.problem;
    let mut reports = Vec::with_capacity(s.horizons.len());
    let mut reruns = Vec::new();
    for &n in &s.horizons {
        let traj = optimal_trajectory(&p.system, &p.cost, &solved.pair, &p.init, n)?;
        let mut report = moment_turnpike(&p.system, &p.cost, &solved.riccati, cert, &solved.pair, &traj, &s.eps)?;
        let control = traj.control().clone();
        let spec = EnsembleSpec {
            sys: &p.system,
            cost: &p.cost,
            control: &control,
            pair: &solved.pair,
            init: &p.init,
            horizon: n,
            seed: s.seed,
        };
        report.exceedance = Some(empirical_exceedance(&spec, s.ensemble, cert, &s.eps)?);
        attach_probability_counts(&mut report, &s.eps, &s.eta)?;
        if !empirical_ok(&report) {
            let more = s.ensemble * RERUN_FACTOR;
            report.exceedance = Some(empirical_exceedance(&spec, more, cert, &s.eps)?);
            attach_probability_counts(&mut report, &s.eps, &s.eta)?;
            let resolved = empirical_ok(&report);
            reruns.push(EmpiricalRerun { horizon: n, first_paths: s.ensemble, rerun_paths: more, resolved });
            if !resolved {
                return Err(Error::BoundViolated(format!(
                    "empirical probability count below its bound at N = {n} with {more} paths"
                ))
                .into());
            }
        }
        reports.push(report);
    }
    Ok(DiagnoseOutput { sweep: "joint eps x eta grid", reports, reruns })
}

fn write_diagnose(s: &Settings, out: &DiagnoseOutput) -> CliResult<()> {
    write_json(&s.out_dir, "turnpike_report.json", out)?;
    for r in &out.reports {
        write_text(&s.out_dir, &format!("turnpike_N{}.csv", r.horizon), &r.to_csv())?;
    }
    Ok(())
}

/// Named perturbation of the steady optimal feedback.
#[derive(Debug, Clone, Serialize)]
pub struct NamedPerturbation {
    pub name: String,
    pub perturbation: Perturbation,
}

/// Ten nonzero perturbations: impulses, decaying and persistent offsets,
/// state and stationary-state feedback.
pub fn standard_perturbations(n: usize, l: usize) -> Vec<NamedPerturbation> {
    let ones = vec![1.0; l];
    let scaled = |c: f64| ones.iter().map(|v| v * c).collect::<Vec<f64>>();
    let gain = |c: f64| Matrix::new(l, n, vec![c; l * n]).expect("finite entries");
    let mut out = vec![
        ("impulse_0.5_at_0", Perturbation::offset_only(scaled(0.5), n, Schedule::Impulse(0))),
        ("impulse_-1_at_0", Perturbation::offset_only(scaled(-1.0), n, Schedule::Impulse(0))),
        ("impulse_2_at_3", Perturbation::offset_only(scaled(2.0), n, Schedule::Impulse(3))),
        ("geometric_offset_1_0.5", Perturbation::offset_only(scaled(1.0), n, Schedule::Geometric(0.5))),
        ("geometric_offset_-0.3_0.9", Perturbation::offset_only(scaled(-0.3), n, Schedule::Geometric(0.9))),
        ("constant_offset_0.1", Perturbation::offset_only(scaled(0.1), n, Schedule::Constant)),
        ("state_feedback_0.05", Perturbation::state_feedback(gain(0.05), Schedule::Constant)),
        ("state_feedback_-0.2_decaying", Perturbation::state_feedback(gain(-0.2), Schedule::Geometric(0.7))),
        ("state_feedback_0.3_at_1", Perturbation::state_feedback(gain(0.3), Schedule::Impulse(1))),
    ];
    let mut mixed = Perturbation::state_feedback(gain(0.1), Schedule::Geometric(0.8));
    mixed.stationary_gain = gain(-0.1);
    mixed.offset = scaled(0.2);
    out.push(("mixed_0.8", mixed));
    out.into_iter().map(|(name, perturbation)| NamedPerturbation { name: name.into(), perturbation }).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct OvertakingEntry {
    pub name: String,
    pub curve: GapCurve,
}

pub fn run_overtaking(s: &Settings, solved: &SolveOutput, grid: &[usize]) -> CliResult<Vec<OvertakingEntry>> {
    let p = &s.problem;
    standard_perturbations(p.system.n(), p.system.l())
        .into_iter()
        .map(|np| {
            let curve = overtaking_gap(&p.system, &p.cost, &solved.riccati, &solved.pair, &np.perturbation, &p.init, grid)?;
            Ok(OvertakingEntry { name: np.name, curve })
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct PaperExampleSummary {
    #[serde(rename = "K")]
    pub k: f64,
    #[serde(rename = "P")]
    pub p: f64,
    #[serde(rename = "Sigma_s")]
    pub sigma_s: f64,
    pub stationary_cost: f64,
    pub gamma: f64,
    pub all_bounds_hold: bool,
    pub figure1: Vec<MidHorizonProximity>,
}

/// Everything one run produced, for callers that want values rather than files.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub solve: Option<SolveOutput>,
    pub certify: Option<CertifyOutput>,
    pub simulate: Option<SimulateOutput>,
    pub diagnose: Option<DiagnoseOutput>,
    pub overtaking: Option<Vec<OvertakingEntry>>,
    pub summary: Option<PaperExampleSummary>,
}

pub fn run(command: Command, s: &Settings) -> CliResult<RunOutput> {
    let mut out = RunOutput::default();
    let needs_cert = matches!(command, Command::Certify | Command::Diagnose | Command::PaperExample);
    if needs_cert && s.stilde.is_none() {
        // An infeasible storage family is the more specific diagnosis than a
        // Riccati failure on the same data.
        find_stilde(&s.problem.system, &s.problem.cost)?;
    }
    let solved = run_solve(s)?;
    write_solve(s, &solved)?;
    let cert = if needs_cert {
        let c = run_certify(s, &solved)?;
        write_json(&s.out_dir, "certificate.json", &c)?;
        Some(c)
    } else {
        None
    };
    if matches!(command, Command::Simulate | Command::PaperExample) {
        let sim = run_simulate(s, &solved)?;
        write_simulate(s, &sim)?;
        out.simulate = Some(sim);
    }
    if matches!(command, Command::Diagnose | Command::PaperExample) {
        let c = cert.as_ref().expect("certificate computed");
        let d = run_diagnose(s, &solved, &c.certificate)?;
        write_diagnose(s, &d)?;
        out.diagnose = Some(d);
    }
    if command == Command::PaperExample {
        let grid: Vec<usize> = (1..=4 * s.horizons.last().copied().unwrap_or(40)).collect();
        let gaps = run_overtaking(s, &solved, &grid)?;
        write_json(&s.out_dir, "overtaking.json", &gaps)?;
        let c = cert.as_ref().expect("certificate computed");
        let summary = PaperExampleSummary {
            k: solved.riccati.k[(0, 0)],
            p: solved.riccati.p[(0, 0)],
            sigma_s: solved.pair.cov[(0, 0)],
            stationary_cost: solved.stationary_cost,
            gamma: c.certificate.gamma,
            all_bounds_hold: out.diagnose.as_ref().is_some_and(|d| d.reports.iter().all(TurnpikeReport::all_exact_bounds_hold)),
            figure1: out.simulate.as_ref().map(|x| x.figure1.clone()).unwrap_or_default(),
        };
        write_json(&s.out_dir, "paper_example.json", &summary)?;
        out.overtaking = Some(gaps);
        out.summary = Some(summary);
    }
    out.solve = Some(solved);
    out.certify = cert;
    Ok(out)
}

/// Short human summary printed after a successful run.
pub fn describe(s: &Settings, out: &RunOutput) -> String {
    let mut lines = vec![format!("output directory: {}", s.out_dir.display())];
    if let Some(sol) = &out.solve {
        lines.push(format!(
            "DARE converged in {} iterations, residual {:.3e}, tr(P Sigma_W) = {:.6}",
            sol.riccati.iterations, sol.riccati.residual, sol.stationary_cost
        ));
    }
    if let Some(c) = &out.certify {
        let worst = c.chain.iter().map(|h| h.residuals.max()).fold(0.0, f64::max);
        lines.push(format!(
            "certificate: gamma = {:.6}, lambda_min(H) >= {:.3e}, chain residual {:.3e}",
            c.certificate.gamma, c.certificate.lambda_min_h_lower, worst
        ));
    }
    if let Some(sim) = &out.simulate {
        for e in &sim.ensembles {
            lines.push(format!(
                "N = {}: empirical J_N = {:.4} +- {:.4}, exact {:.4}",
                e.horizon, e.empirical_cost, e.standard_error, e.exact_cost
            ));
        }
    }
    if let Some(d) = &out.diagnose {
        for r in &d.reports {
            lines.push(format!("N = {}: delta = {:.4}, C = {:.4}, all bounds hold", r.horizon, r.delta, r.c));
        }
    }
    if let Some(sum) = &out.summary {
        lines.push(format!("K = {:.6}, Sigma_s = {:.6}", sum.k, sum.sigma_s));
    }
    lines.join("\n")
}
