//! Subcommand bodies: each builds a channel from the configuration, runs one
//! computation and writes a CSV (plus an SVG when plotting is on).

use std::fmt;
use std::path::{Path, PathBuf};

use qfibound::aqec::{aqec_trajectory, AqecOptions, AqecPath};
use qfibound::asymptotics::{branch_trajectory, closed_form_reference, fit_power_law, leading_expansion, tail_window};
use qfibound::bound::{integrate_bound, BoundTrajectory, IntegrationOptions, SolverOptions};
use qfibound::channel::{build_channel, ModelConfig, ModelKind, NoiseKind, ParametricChannel};
use qfibound::dynamics::{oracle_trajectory, ControlSchedule};
use qfibound::operator::{OperatorMatrix, C64};
use qfibound::qec::{qec_qfi_trajectory, qec_signal, CodePath};
use qfibound::span::{classify, Regime};

use crate::config::{ConfigError, RunConfig};
use crate::output::{svg_path_for, Cell, Chart, Series, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Classify,
    Bound,
    Asymptote,
    Oracle,
    Qec,
    Aqec,
    ReproduceFig2,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Classify => "classify",
            Command::Bound => "bound",
            Command::Asymptote => "asymptote",
            Command::Oracle => "oracle",
            Command::Qec => "qec",
            Command::Aqec => "aqec",
            Command::ReproduceFig2 => "reproduce-fig2",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub out_dir: PathBuf,
    pub plot: bool,
    /// Code parameter of the `aqec` subcommand.
    pub epsilon_code: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("."), plot: false, epsilon_code: 0.1 }
    }
}

#[derive(Debug)]
pub enum RunError {
    Config(ConfigError),
    Output { path: PathBuf, message: String },
    Numerical(qfibound::Error),
}

impl RunError {
    /// 2 for configuration and output-path problems, 1 for numerical failures.
    pub fn exit_code(&self) -> u8 {
        match self {
            RunError::Config(_) | RunError::Output { .. } => 2,
            RunError::Numerical(qfibound::Error::InvalidConfig(_)) => 2,
            RunError::Numerical(_) => 1,
        }
    }
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "config error: {e}"),
            RunError::Output { path, message } => write!(f, "cannot write {}: {message}", path.display()),
            RunError::Numerical(qfibound::Error::InvalidConfig(m)) => write!(f, "config error: {m}"),
            RunError::Numerical(e) => write!(f, "numerical failure: {e}"),
        }
    }
}

impl std::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

impl From<qfibound::Error> for RunError {
    fn from(e: qfibound::Error) -> Self {
        RunError::Numerical(e)
    }
}

/// Files written and one-line findings for the terminal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
    pub warnings: Vec<String>,
}

pub fn run(command: Command, cfg: &RunConfig, opts: &RunOptions) -> Result<Report, RunError> {
    let mut report = Report::default();
    match command {
        Command::ReproduceFig2 => reproduce_fig2(cfg, opts, &mut report)?,
        _ => {
            let channel = build_channel(&cfg.model)?;
            let (table, chart) = match command {
                Command::Classify => run_classify(&channel, cfg, &mut report)?,
                Command::Bound => run_bound(&channel, cfg, &mut report)?,
                Command::Asymptote => run_asymptote(&channel, cfg, &mut report)?,
                Command::Oracle => run_oracle(&channel, cfg, &mut report)?,
                Command::Qec => run_qec(&channel, cfg, &mut report)?,
                Command::Aqec => run_aqec(&channel, cfg, opts.epsilon_code, &mut report)?,
                Command::ReproduceFig2 => unreachable!(),
            };
            let name = cfg.output.csv_path.clone().unwrap_or_else(|| format!("{}.csv", command.name()));
            let path = resolve(&opts.out_dir, &name);
            emit(&table, &chart, &path, opts.plot || cfg.output.plot, &mut report)?;
        }
    }
    Ok(report)
}

fn resolve(out_dir: &Path, name: &str) -> PathBuf {
    let p = Path::new(name);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        out_dir.join(p)
    }
}

fn emit(table: &Table, chart: &Chart, path: &Path, plot: bool, report: &mut Report) -> Result<(), RunError> {
    let fail = |path: &Path, e: std::io::Error| RunError::Output { path: path.to_path_buf(), message: e.to_string() };
    table.write(path).map_err(|e| fail(path, e))?;
    report.files.push(path.to_path_buf());
    if plot {
        let svg = svg_path_for(path);
        chart.write(&svg).map_err(|e| fail(&svg, e))?;
        report.files.push(svg);
    }
    Ok(())
}

fn integration_options(cfg: &RunConfig, checkpoints: Vec<f64>) -> IntegrationOptions {
    IntegrationOptions {
        dt: Some(cfg.dt()),
        q_switch: cfg.solver.q_switch,
        solver: SolverOptions { gap: cfg.solver.sdp_gap, ..SolverOptions::default() },
        checkpoints,
        oracle_seed: cfg.output.seed,
        ..IntegrationOptions::default()
    }
}

fn series(name: &str, x: &[f64], y: &[f64]) -> Series {
    Series { name: name.to_string(), x: x.to_vec(), y: y.to_vec() }
}

fn chart(title: String, x_label: &str, y_label: &str, log_log: bool, series: Vec<Series>) -> Chart {
    Chart { title, x_label: x_label.into(), y_label: y_label.into(), log_log, series }
}

fn ratio(a: f64, b: f64) -> f64 {
    if b != 0.0 {
        a / b
    } else {
        f64::NAN
    }
}

fn run_classify(channel: &ParametricChannel, cfg: &RunConfig, report: &mut Report) -> Result<(Table, Chart), RunError> {
    let times = cfg.sample_times();
    let span = classify(channel, cfg.omega(), &times, cfg.transient_cutoff(), cfg.solver.span_tol)?;
    let mut table = Table::new(&["t", "in_span", "residual"]);
    for p in &span.points {
        table.push(vec![p.t.into(), p.in_span.into(), p.residual_norm.into()]);
    }
    report.summary.push(format!("overall_regime = {}", span.overall_regime));
    report.summary.push(format!("in-span fraction past t = {}: {:.6}", span.transient_cutoff, span.in_span_fraction));
    let residual: Vec<f64> = span.points.iter().map(|p| p.residual_norm).collect();
    let c = chart(format!("{}: residual of H' outside the Lindblad span", channel.label), "t", "residual", false, vec![series("residual", &times, &residual)]);
    Ok((table, c))
}

fn bound_trajectory(channel: &ParametricChannel, cfg: &RunConfig, checkpoints: Vec<f64>) -> Result<BoundTrajectory, RunError> {
    Ok(integrate_bound(channel, cfg.omega(), cfg.grid.t_max, &integration_options(cfg, checkpoints))?)
}

fn run_bound(channel: &ParametricChannel, cfg: &RunConfig, report: &mut Report) -> Result<(Table, Chart), RunError> {
    let traj = bound_trajectory(channel, cfg, Vec::new())?;
    let mut table = Table::new(&["t", "Q_bound", "rhs", "s_opt", "u_opt", "solver_status"]);
    for p in &traj.points {
        table.push(vec![p.t.into(), p.q.into(), p.rhs.into(), p.s.into(), p.u.into(), p.status.label().into()]);
    }
    let t_max = cfg.grid.t_max;
    let q = traj.final_q();
    report.summary.push(format!("Q_bound({t_max}) = {q:.10e}; Q/T^3 = {:.6}; Q/T^4 = {:.6}", q / t_max.powi(3), q / t_max.powi(4)));
    if let Ok(fit) = fit_power_law(&traj.times(), &traj.q_values(), tail_window(t_max)) {
        report.summary.push(format!("tail exponent on [{}, {}]: {:.4} ± {:.4}", fit.window.0, fit.window.1, fit.exponent, fit.stderr));
    }
    if traj.fallback_count() > 0 {
        report.warnings.push(format!("{} steps used the derivative-free fallback", traj.fallback_count()));
    }
    let c = chart(format!("{}: integrated bound", channel.label), "t", "Q_bound", true, vec![series("Q_bound", &traj.times(), &traj.q_values())]);
    Ok((table, c))
}

fn regime_of(channel: &ParametricChannel, cfg: &RunConfig) -> Result<Regime, RunError> {
    Ok(classify(channel, cfg.omega(), &cfg.sample_times(), cfg.transient_cutoff(), cfg.solver.span_tol)?.overall_regime)
}

/// Closed form when the model is a catalog entry with a single noise kind.
fn closed_form(model: &ModelConfig, t: f64) -> f64 {
    match (model.model, model.noise.as_slice()) {
        (ModelKind::Ac | ModelKind::Rf, [n]) => {
            closed_form_reference(model.model, n.kind, model.b, model.omega, n.epsilon, t).unwrap_or(f64::NAN)
        }
        _ => f64::NAN,
    }
}

fn run_asymptote(channel: &ParametricChannel, cfg: &RunConfig, report: &mut Report) -> Result<(Table, Chart), RunError> {
    let regime = regime_of(channel, cfg)?;
    if regime == Regime::Mixed {
        return Err(qfibound::Error::InvalidConfig("the channel is neither DHLS nor DHNLS on the grid; no asymptotic branch".into()).into());
    }
    let times: Vec<f64> = cfg.sample_times().into_iter().filter(|&t| t > 0.0).collect();
    let branch = branch_trajectory(channel, cfg.omega(), &times, regime)?;
    let mut table = Table::new(&["T", "branch_value", "closed_form", "ratio"]);
    let mut closed = Vec::with_capacity(times.len());
    for (&t, &b) in times.iter().zip(&branch) {
        let c = closed_form(&cfg.model, t);
        closed.push(c);
        table.push(vec![t.into(), b.into(), c.into(), ratio(b, c).into()]);
    }
    report.summary.push(format!("regime = {regime}"));
    if let (Some(&t), Some(&b), Some(&c)) = (times.last(), branch.last(), closed.last()) {
        report.summary.push(format!("branch({t}) = {b:.10e}; closed form = {c:.10e}; ratio = {:.6}", ratio(b, c)));
    }
    let c = chart(
        format!("{}: asymptotic branch ({regime})", channel.label),
        "T",
        "Q",
        true,
        vec![series("branch", &times, &branch), series("closed form", &times, &closed)],
    );
    Ok((table, c))
}

/// Equal superposition of the probe basis states.
fn plus_state(dim: usize) -> OperatorMatrix {
    OperatorMatrix::from_fn(dim, |_, _| C64::new(1.0 / dim as f64, 0.0))
}

/// Largest propagation step of the `oracle` subcommand.
const ORACLE_MAX_STEP: f64 = 1e-2;

fn run_oracle(channel: &ParametricChannel, cfg: &RunConfig, report: &mut Report) -> Result<(Table, Chart), RunError> {
    let times = cfg.sample_times();
    let dt = cfg.dt().min(ORACLE_MAX_STEP);
    let samples = oracle_trajectory(channel, cfg.omega(), &plus_state(channel.dim), &ControlSchedule::none(), dt, &times)?;
    let mut table = Table::new(&["t", "qfi", "trace_err", "min_eig"]);
    for s in &samples {
        table.push(vec![s.t.into(), s.qfi.into(), s.trace_err.into(), s.min_eig.into()]);
    }
    if let Some(last) = samples.last() {
        report.summary.push(format!("free-evolution QFI({}) = {:.10e}", last.t, last.qfi));
    }
    let ts: Vec<f64> = samples.iter().map(|s| s.t).collect();
    let qs: Vec<f64> = samples.iter().map(|s| s.qfi).collect();
    let c = chart(format!("{}: free evolution from |+>", channel.label), "t", "QFI", false, vec![series("QFI", &ts, &qs)]);
    Ok((table, c))
}

const PROTOCOL_HEADER: [&str; 6] = ["t", "logical_signal", "eps_L", "qfi_running", "bound_running", "ratio"];

fn protocol_chart(title: String, times: &[f64], qfi: &[f64], bound: &[f64]) -> Chart {
    chart(title, "t", "Q", true, vec![series("bound", times, bound), series("protocol", times, qfi)])
}

fn run_qec(channel: &ParametricChannel, cfg: &RunConfig, report: &mut Report) -> Result<(Table, Chart), RunError> {
    let times = cfg.sample_times();
    let path = CodePath::Optimal { channel: channel.clone(), omega: cfg.omega() };
    let qfi = qec_qfi_trajectory(channel, cfg.omega(), &times, &path)?;
    let traj = bound_trajectory(channel, cfg, times.clone())?;
    let mut table = Table::new(&PROTOCOL_HEADER);
    let mut bound = Vec::with_capacity(times.len());
    for (&t, &q) in times.iter().zip(&qfi) {
        let b = traj.q_at(t);
        bound.push(b);
        table.push(vec![t.into(), qec_signal(channel, cfg.omega(), t, &path)?.into(), 0.0.into(), q.into(), b.into(), ratio(q, b).into()]);
    }
    if let (Some(&q), Some(&b)) = (qfi.last(), bound.last()) {
        report.summary.push(format!("QEC QFI({}) = {q:.10e}; bound = {b:.10e}; ratio = {:.6}", cfg.grid.t_max, ratio(q, b)));
    }
    Ok((table, protocol_chart(format!("{}: exact error correction", channel.label), &times, &qfi, &bound)))
}

/// The `bound_running` column holds the constrained (DHLS) branch ∫4 min‖α‖ dt: the
/// signal-to-dephasing integral is a long-time rate formula and is compared with
/// the branch it approaches, not with the short-time coherent cap.
fn run_aqec(channel: &ParametricChannel, cfg: &RunConfig, epsilon_code: f64, report: &mut Report) -> Result<(Table, Chart), RunError> {
    let times = cfg.sample_times();
    let run = aqec_trajectory(channel, cfg.omega(), &times, &AqecPath::Optimal, epsilon_code, &AqecOptions::default())?;
    let branch = branch_trajectory(channel, cfg.omega(), &times, Regime::Dhls)?;
    let mut table = Table::new(&PROTOCOL_HEADER);
    let qfi: Vec<f64> = run.samples.iter().map(|s| s.qfi).collect();
    for (s, &b) in run.samples.iter().zip(&branch) {
        table.push(vec![s.t.into(), s.signal.into(), s.eps_l.into(), s.qfi.into(), b.into(), ratio(s.qfi, b).into()]);
    }
    report.warnings.extend(run.warnings);
    if let (Some(&q), Some(&b)) = (qfi.last(), branch.last()) {
        report.summary.push(format!(
            "AQEC (epsilon_code = {epsilon_code}) QFI({}) = {q:.10e}; DHLS branch = {b:.10e}; ratio = {:.6}",
            cfg.grid.t_max,
            ratio(q, b)
        ));
    }
    Ok((table, protocol_chart(format!("{}: approximate error correction", channel.label), &times, &qfi, &branch)))
}

/// Final time of the default reproduce-fig2 run: long enough for the last-decade fit to sit in the asymptotic regime.
pub const FIG2_T_MAX: f64 = 2000.0;

pub fn fig2_defaults() -> RunConfig {
    let mut cfg = RunConfig::catalog(ModelKind::Ac, NoiseKind::DephasingX);
    cfg.grid.t_max = FIG2_T_MAX;
    cfg
}

struct Panel {
    file: &'static str,
    model: ModelKind,
    noise: NoiseKind,
}

const PANELS: [Panel; 4] = [
    Panel { file: "fig2a_main.csv", model: ModelKind::Ac, noise: NoiseKind::DephasingX },
    Panel { file: "fig2a_inset.csv", model: ModelKind::Ac, noise: NoiseKind::SpontaneousEmission },
    Panel { file: "fig2b_main.csv", model: ModelKind::Rf, noise: NoiseKind::DephasingX },
    Panel { file: "fig2b_inset.csv", model: ModelKind::Rf, noise: NoiseKind::SpontaneousEmission },
];

/// Bound trajectories and asymptotes for (AC, RF) × (dephasing_x, spontaneous emission).
/// B, ω and ε come from the configuration's model section (first noise entry); the
/// model and noise kinds there are ignored.
fn reproduce_fig2(cfg: &RunConfig, opts: &RunOptions, report: &mut Report) -> Result<(), RunError> {
    let epsilon = cfg.model.noise.first().map_or(0.1, |n| n.epsilon);
    let t_max = cfg.grid.t_max;
    let mut summary = Table::new(&[
        "panel",
        "model",
        "noise",
        "regime",
        "tail_exponent",
        "stderr",
        "fit_lo",
        "fit_hi",
        "coefficient",
        "closed_form_coefficient",
    ]);
    for panel in &PANELS {
        let model = ModelConfig::catalog(panel.model, cfg.model.b, cfg.model.omega, &[(panel.noise, epsilon)]);
        let channel = build_channel(&model)?;
        let panel_cfg = RunConfig { model: model.clone(), ..cfg.clone() };
        let regime = regime_of(&channel, &panel_cfg)?;
        let n = leading_expansion(&channel, cfg.omega())?.n as i32;
        let power = match regime {
            Regime::Dhnls => 2 * n + 2,
            _ => 2 * n + 1,
        };
        let traj = bound_trajectory(&channel, &panel_cfg, Vec::new())?;
        let mut table = Table::new(&["t", "Q_bound", "asymptote", "ratio"]);
        let mut asym = Vec::with_capacity(traj.points.len());
        for p in &traj.points {
            let a = closed_form(&model, p.t);
            asym.push(a);
            table.push(vec![p.t.into(), p.q.into(), a.into(), ratio(p.q, a).into()]);
        }
        let fit = fit_power_law(&traj.times(), &traj.q_values(), tail_window(t_max))?;
        let coefficient = traj.final_q() / t_max.powi(power);
        let closed_coefficient = closed_form(&model, 1.0);
        let label = panel.file.trim_end_matches(".csv");
        summary.push(vec![
            Cell::from(label),
            Cell::from(channel.label.as_str()),
            Cell::from(panel.noise.name()),
            Cell::from(regime.label()),
            fit.exponent.into(),
            fit.stderr.into(),
            fit.window.0.into(),
            fit.window.1.into(),
            coefficient.into(),
            closed_coefficient.into(),
        ]);
        report.summary.push(format!(
            "{label} ({} + {}, {regime}): tail exponent {:.4} ± {:.4}; Q/T^{power} = {coefficient:.6} (closed form {closed_coefficient:.6})",
            channel.label,
            panel.noise.name(),
            fit.exponent,
            fit.stderr
        ));
        let c = chart(
            format!("{} + {}: bound and asymptote", channel.label, panel.noise.name()),
            "T",
            "Q",
            true,
            vec![series("bound", &traj.times(), &traj.q_values()), series("asymptote", &traj.times(), &asym)],
        );
        emit(&table, &c, &opts.out_dir.join(panel.file), opts.plot || cfg.output.plot, report)?;
    }
    let path = opts.out_dir.join("fig2_exponents.csv");
    summary.write(&path).map_err(|e| RunError::Output { path: path.clone(), message: e.to_string() })?;
    report.files.push(path);
    Ok(())
}
