//! Run configuration and the command implementations behind the
//! `vfharmonic` binary. Each command reads one section of a [`RunConfig`],
//! writes its artifacts to the output directory and returns a printable
//! summary. Failures carry the process exit code.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::harmonic_model::{AfmLppSystem, ModelFile};
use crate::phase::{FrequencyProfile, PhaseFunction, PseudoPeriodEvaluator};
use crate::pmsm::{
    control_references, equilibrium_fixed_point, harmonic_spectrum, pmsm_augmented_system, scale_to_level, simulate_closed_loop, Controller,
    OutputSpec, PmsmParams, ReferenceStep, Scenario, SimulationOptions, TorqueDisturbance,
};
use crate::synthesis::{synthesize_state_feedback, SynthesisFile, SynthesisOptions};
use crate::toeplitz::Symbol;

pub const RUN_CONFIG_VERSION: u32 = 1;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_INFEASIBLE: i32 = 2;
pub const EXIT_MISSING_ARTIFACT: i32 = 3;
pub const EXIT_DIVERGENCE: i32 = 4;

/// A failed command: message plus process exit code.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError { code: EXIT_CONFIG, message: message.into() }
    }

    pub fn missing(message: impl Into<String>) -> Self {
        CliError { code: EXIT_MISSING_ARTIFACT, message: message.into() }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Infeasible(_) | Error::PosdefCheckFailed { .. } | Error::VerificationFailed(_) => EXIT_INFEASIBLE,
            Error::FixedPointDiverged { .. }
            | Error::IntegrationBlewUp { .. }
            | Error::SolverFailure(_)
            | Error::QuadratureFailure { .. }
            | Error::SingularFrequencyOperator { .. } => EXIT_DIVERGENCE,
            _ => EXIT_CONFIG,
        };
        CliError { code, message: e.to_string() }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Top-level configuration file. Only the section of the command being run
/// has to be present.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Output directory, relative to the working directory.
    #[serde(default)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub epsilon: Option<EpsilonConfig>,
    #[serde(default)]
    pub synthesis: Option<SynthesisConfig>,
    #[serde(default)]
    pub simulation: Option<SimulationConfig>,
    #[serde(default)]
    pub equilibrium: Option<EquilibriumConfig>,
    /// Directory of the file the config was read from; relative artifact
    /// paths inside sections resolve against it.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpsilonConfig {
    pub profile: FrequencyProfile,
    #[serde(default)]
    pub theta0: f64,
    pub domain: (f64, f64),
    /// Evaluation times: `samples` evenly spaced points of `[t_start, t_end]`.
    pub t_start: f64,
    pub t_end: f64,
    pub samples: usize,
    #[serde(default = "default_window_samples")]
    pub window_samples: usize,
}

fn default_window_samples() -> usize {
    256
}

/// Plant handed to the synthesis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelConfig {
    /// PMSM with integral forwarding on the regulated outputs.
    Pmsm {
        #[serde(default)]
        params: PmsmParams,
        #[serde(default)]
        output: OutputSpec,
    },
    /// dx/dt = (a0 + ω a1) x + (b0 + ω b1) u with constant scalar coefficients.
    Scalar {
        a0: f64,
        #[serde(default)]
        a1: f64,
        b0: f64,
        #[serde(default)]
        b1: f64,
    },
    /// A model file written by the library.
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisConfig {
    pub model: ModelConfig,
    #[serde(default = "default_order")]
    pub order: usize,
    pub omega_range: (f64, f64),
    /// 𝓠 = q_weight·I and 𝓡 = r_weight·I.
    pub q_weight: f64,
    pub r_weight: f64,
    #[serde(default)]
    pub options: SynthesisOptions,
    /// Gain file name inside the output directory.
    #[serde(default)]
    pub gain_file: Option<PathBuf>,
}

fn default_order() -> usize {
    3
}

/// Which load the reference construction assumes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feedforward {
    /// Only the DC part of the load; ripple is left to the controller.
    #[default]
    Dc,
    /// The full periodic load.
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    #[serde(default)]
    pub params: PmsmParams,
    #[serde(default)]
    pub output: OutputSpec,
    pub omega_range: (f64, f64),
    /// Defaults to the file the `synthesize` command writes for the same flags.
    #[serde(default)]
    pub gain_file: Option<PathBuf>,
    pub load: TorqueDisturbance,
    #[serde(default)]
    pub feedforward: Feedforward,
    pub schedule: Vec<ReferenceStep>,
    #[serde(default)]
    pub initial_error: [f64; 4],
    /// When set, the initial error (integrators included) is a seeded random
    /// direction scaled to this fraction of L_max; overrides `initial_error`.
    #[serde(default)]
    pub random_start_level: Option<f64>,
    #[serde(default)]
    pub theta0: f64,
    pub t_end: f64,
    #[serde(default)]
    pub options: SimulationOptions,
    #[serde(default = "default_k_max")]
    pub spectrum_k_max: usize,
    #[serde(default = "default_stride")]
    pub spectrum_stride: usize,
}

fn default_k_max() -> usize {
    10
}

fn default_stride() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EquilibriumConfig {
    #[serde(default)]
    pub params: PmsmParams,
    pub omega_ref0: f64,
    pub load: TorqueDisturbance,
    #[serde(default = "default_k_eq")]
    pub k_eq: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Phase samples per revolution in the reference file.
    #[serde(default = "default_ref_samples")]
    pub samples: usize,
}

fn default_k_eq() -> usize {
    4
}

fn default_tol() -> f64 {
    1e-10
}

fn default_ref_samples() -> usize {
    360
}

/// Command-line flags that override the file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub order: Option<usize>,
    pub seed: Option<u64>,
    pub no_mitigation: bool,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::config(format!("invalid config: {e}")))?;
        if cfg.version != RUN_CONFIG_VERSION {
            return Err(CliError::config(format!("config version {} is not supported (expected {RUN_CONFIG_VERSION})", cfg.version)));
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    fn out_dir(&self, ov: &Overrides) -> CliResult<PathBuf> {
        let dir = ov.out.clone().or_else(|| self.out.clone()).unwrap_or_else(|| PathBuf::from("out"));
        std::fs::create_dir_all(&dir).map_err(|e| CliError::config(format!("cannot create output directory {}: {e}", dir.display())))?;
        Ok(dir)
    }

    fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn seed(&self, ov: &Overrides) -> u64 {
        ov.seed.or(self.seed).unwrap_or(0)
    }
}

fn section<'a, T>(s: &'a Option<T>, name: &str) -> CliResult<&'a T> {
    s.as_ref().ok_or_else(|| CliError::config(format!("config has no [{name}] section")))
}

fn io_err(path: &Path) -> impl Fn(Error) -> CliError + '_ {
    move |e| CliError::config(format!("cannot write {}: {e}", path.display()))
}

fn default_gain_name(no_mitigation: bool) -> &'static str {
    if no_mitigation {
        "gain_no_mitigation.json"
    } else {
        "gain.json"
    }
}

fn range_check(r: (f64, f64)) -> CliResult<()> {
    if !(r.0 > 0.0 && r.1 > r.0) {
        return Err(CliError::config(format!("omega_range must satisfy 0 < min < max, got [{}, {}]", r.0, r.1)));
    }
    Ok(())
}

/// ε table: t, ω, θ, T, ε, ω̇, ω̇/ω.
pub fn cmd_epsilon(cfg: &RunConfig, ov: &Overrides) -> CliResult<String> {
    let ec = section(&cfg.epsilon, "epsilon")?;
    if ec.samples == 0 || !(ec.t_end >= ec.t_start) {
        return Err(CliError::config("epsilon needs samples > 0 and t_end >= t_start"));
    }
    let pf = PhaseFunction::new(ec.profile.clone(), ec.theta0, ec.domain)?;
    let ev = PseudoPeriodEvaluator::new(pf);
    let dir = cfg.out_dir(ov)?;
    let path = dir.join("epsilon.csv");
    let mut w = csv::Writer::from_path(&path).map_err(|e| io_err(&path)(e.into()))?;
    let write = |w: &mut csv::Writer<std::fs::File>, row: &[String]| w.write_record(row).map_err(|e| io_err(&path)(e.into()));
    write(&mut w, &["t", "omega", "theta", "T", "epsilon", "omega_dot", "omega_dot_over_omega"].map(String::from))?;
    let mut eps_max: f64 = 0.0;
    for i in 0..ec.samples {
        let t = if ec.samples == 1 { ec.t_start } else { ec.t_start + (ec.t_end - ec.t_start) * i as f64 / (ec.samples - 1) as f64 };
        let pf = &ev.phase;
        let (om, th, od) = (pf.omega(t)?, pf.theta(t)?, pf.omega_dot(t)?);
        let period = ev.pseudo_period(t)?.period;
        let eps = ev.epsilon(t, ec.window_samples)?;
        eps_max = eps_max.max(eps);
        write(&mut w, &[t, om, th, period, eps, od, od / om].map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| io_err(&path)(e.into()))?;
    Ok(format!("wrote {} ({} rows), max epsilon {eps_max:.6e}\n", path.display(), ec.samples))
}

/// Plant and its weights for a synthesis section.
fn synthesis_model(cfg: &RunConfig, sc: &SynthesisConfig, ov: &Overrides) -> CliResult<(AfmLppSystem, String)> {
    let order = ov.order.unwrap_or(sc.order);
    range_check(sc.omega_range)?;
    match &sc.model {
        ModelConfig::Pmsm { params, output } => {
            let output = if ov.no_mitigation { OutputSpec::without_mitigation() } else { output.clone() };
            let aug = pmsm_augmented_system(params, order, sc.omega_range, &output)?;
            let label = format!("pmsm, N = {order}, {} regulated outputs", output.rows());
            Ok((aug.system().clone(), label))
        }
        ModelConfig::Scalar { a0, a1, b0, b1 } => {
            let s = |v: f64| Symbol::constant_real(&DMatrix::from_element(1, 1, v));
            let sys = AfmLppSystem::new(s(*a0), s(*a1), s(*b0), s(*b1), order, sc.omega_range)?;
            Ok((sys, format!("scalar, N = {order}")))
        }
        ModelConfig::File { path } => {
            let path = cfg.resolve(path);
            let file = ModelFile::load(&path).map_err(|e| CliError::missing(format!("cannot load model {}: {e}", path.display())))?;
            let sys = match file.augmented()? {
                Some(aug) => aug.system().clone(),
                None => file.base_system()?,
            };
            if ov.order.is_some() && sys.order() != order {
                return Err(CliError::config(format!("model file has order {}, --order {order} cannot change it", sys.order())));
            }
            Ok((sys, format!("model file {}", path.display())))
        }
    }
}

#[derive(Clone, Debug, Serialize)]
struct SynthesisReport<'a> {
    model: &'a str,
    wall_seconds: f64,
    cost: f64,
    status: String,
    backend: &'a str,
    iterations: usize,
    config_hash: &'a str,
}

pub fn cmd_synthesize(cfg: &RunConfig, ov: &Overrides) -> CliResult<String> {
    let sc = section(&cfg.synthesis, "synthesis")?;
    let (sys, label) = synthesis_model(cfg, sc, ov)?;
    let q = Symbol::identity(sys.n()).scale(Complex64::new(sc.q_weight, 0.0));
    let r = Symbol::identity(sys.m()).scale(Complex64::new(sc.r_weight, 0.0));
    let dir = cfg.out_dir(ov)?;
    let started = Instant::now();
    let res = synthesize_state_feedback(&sys, &q, &r, &sc.options).map_err(|e| match e {
        Error::Infeasible(msg) => CliError { code: EXIT_INFEASIBLE, message: format!("synthesis infeasible: {msg}") },
        other => other.into(),
    })?;
    let wall = started.elapsed().as_secs_f64();
    let file = res.to_file();
    let gain_path = dir.join(sc.gain_file.clone().unwrap_or_else(|| PathBuf::from(default_gain_name(ov.no_mitigation))));
    file.save(&gain_path).map_err(io_err(&gain_path))?;
    let report = SynthesisReport {
        model: &label,
        wall_seconds: wall,
        cost: file.cost,
        status: format!("{:?}", file.status),
        backend: &file.backend,
        iterations: file.iterations,
        config_hash: &file.config_hash,
    };
    let report_path = dir.join("synthesis_report.json");
    std::fs::write(&report_path, serde_json::to_string_pretty(&report).map_err(Error::from)?).map_err(|e| io_err(&report_path)(e.into()))?;

    let mut out = String::new();
    let _ = writeln!(out, "model: {label}");
    let _ = writeln!(out, "status {:?} ({} backend, {} iterations), wall time {wall:.2} s", file.status, file.backend, file.iterations);
    let _ = writeln!(out, "cost {:.6e}, gamma {:.3e}, min eig S {:.3e}", file.cost, file.gamma, file.s_min_eig);
    for v in &file.vertices {
        let _ = writeln!(out, "vertex omega = {:>8.3}: LMI max eig {:.3e}, closed-loop max eig {:.3e}", v.omega, v.lmi_max_eig, v.closed_loop_max_eig);
    }
    let _ = writeln!(out, "wrote {}", gain_path.display());
    Ok(out)
}

/// Summary of a closed-loop run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    /// |Ω̄ − ω_ref0| / ω_ref0 over the last window.
    pub speed_error: f64,
    /// |I_a,k| / |I_a,p| for each regulated harmonic k.
    pub targeted: Vec<(u32, f64)>,
    /// |I_d,0| / |I_q,0| over the last window.
    pub d_axis_ratio: f64,
    pub max_level_ratio: Option<f64>,
    pub omega_min: f64,
    pub omega_max: f64,
}

pub fn cmd_simulate(cfg: &RunConfig, ov: &Overrides) -> CliResult<String> {
    let sc = section(&cfg.simulation, "simulation")?;
    range_check(sc.omega_range)?;
    if sc.schedule.is_empty() {
        return Err(CliError::config("simulation schedule is empty"));
    }
    let dir = cfg.out_dir(ov)?;
    let gain_path = match &sc.gain_file {
        Some(p) => cfg.resolve(p),
        None => dir.join(default_gain_name(ov.no_mitigation)),
    };
    if !gain_path.is_file() {
        return Err(CliError::missing(format!("gain file {} not found; run `synthesize` first", gain_path.display())));
    }
    let file = SynthesisFile::load(&gain_path).map_err(|e| CliError::missing(format!("cannot load gain {}: {e}", gain_path.display())))?;
    let output = if ov.no_mitigation { OutputSpec::without_mitigation() } else { sc.output.clone() };
    let ctl = Controller::from_synthesis(&file, output.clone(), sc.omega_range)?;

    let mut scenario = Scenario {
        params: sc.params,
        load: sc.load.clone(),
        feedforward_load: match sc.feedforward {
            Feedforward::Dc => sc.load.dc(),
            Feedforward::Full => sc.load.clone(),
        },
        schedule: sc.schedule.clone(),
        initial_error: sc.initial_error,
        z0: Vec::new(),
        theta0: sc.theta0,
        t_end: sc.t_end,
    };
    if let Some(level) = sc.random_start_level {
        let l = ctl.lyapunov.as_ref().ok_or_else(|| CliError::config("gain file carries no Lyapunov certificate"))?;
        let lmax = l.level_max(sc.schedule[0].omega_ref0, sc.omega_range);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed(ov));
        let dir: Vec<f64> = (0..4 + output.rows()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = scale_to_level(l, &dir, level * lmax);
        scenario.initial_error = [e[0], e[1], e[2], e[3]];
        scenario.z0 = e[4..].to_vec();
    }
    let tr = simulate_closed_loop(&scenario, &ctl, &sc.options)?;
    let sp = harmonic_spectrum(&tr, sc.spectrum_k_max, sc.spectrum_stride)?;
    let trace_path = dir.join("trace.csv");
    let spectra_path = dir.join("spectra.csv");
    tr.write_csv(&trace_path).map_err(io_err(&trace_path))?;
    sp.write_csv(&spectra_path).map_err(io_err(&spectra_path))?;

    let last = |name: &str, k: usize| sp.last(name, k).unwrap_or(f64::NAN);
    let p = sc.params.p as usize;
    let fund = if p <= sc.spectrum_k_max { last("i_a", p) } else { f64::NAN };
    let omega_ref = sc.schedule.iter().rev().find(|s| s.t <= sc.t_end).unwrap_or(&sc.schedule[0]).omega_ref0;
    let (omega_min, omega_max) = tr.omega_extremes();
    let summary = SimulationSummary {
        speed_error: (last("omega_m", 0) - omega_ref).abs() / omega_ref,
        targeted: output.harmonics.iter().filter(|&&k| (k as usize) <= sc.spectrum_k_max).map(|&k| (k, last("i_a", k as usize) / fund)).collect(),
        d_axis_ratio: last("i_d", 0) / last("i_q", 0),
        max_level_ratio: Some(tr.max_level_ratio()).filter(|r| r.is_finite()),
        omega_min,
        omega_max,
    };
    let summary_path = dir.join("summary.json");
    std::fs::write(&summary_path, serde_json::to_string_pretty(&summary).map_err(Error::from)?).map_err(|e| io_err(&summary_path)(e.into()))?;

    let mut out = String::new();
    let _ = writeln!(out, "simulated {:.3} s, {} records", sc.t_end, tr.len());
    let _ = writeln!(out, "speed tracking error {:.3e} (relative), omega_m in [{omega_min:.3}, {omega_max:.3}]", summary.speed_error);
    let _ = writeln!(out, "|I_d0|/|I_q0| = {:.3e}", summary.d_axis_ratio);
    for (k, r) in &summary.targeted {
        let _ = writeln!(out, "|I_a,{k}|/|I_a,{p}| = {r:.3e}");
    }
    if !output.harmonics.contains(&2) && 2 <= sc.spectrum_k_max {
        let _ = writeln!(out, "|I_a,2|/|I_a,{p}| = {:.3e} (not regulated)", last("i_a", 2) / fund);
    }
    match summary.max_level_ratio {
        Some(r) => {
            let _ = writeln!(out, "max V/L_max = {r:.4}");
        }
        None => {
            let _ = writeln!(out, "max V/L_max unavailable");
        }
    }
    let _ = writeln!(out, "wrote {} and {}", trace_path.display(), spectra_path.display());
    Ok(out)
}

pub fn cmd_equilibrium(cfg: &RunConfig, ov: &Overrides) -> CliResult<String> {
    let ec = section(&cfg.equilibrium, "equilibrium")?;
    if ec.samples == 0 {
        return Err(CliError::config("equilibrium samples must be positive"));
    }
    let eq = equilibrium_fixed_point(&ec.params, ec.omega_ref0, &ec.load, ec.k_eq, ec.tol)?;
    let dir = cfg.out_dir(ov)?;
    let refs = control_references(&eq);
    let ref_path = dir.join("reference.csv");
    refs.write_csv(&ref_path, ec.samples).map_err(io_err(&ref_path))?;
    let eq_path = dir.join("equilibrium.json");
    std::fs::write(&eq_path, serde_json::to_string_pretty(&eq).map_err(Error::from)?).map_err(|e| io_err(&eq_path)(e.into()))?;

    let mut out = String::new();
    let _ = writeln!(out, "{:>4}  {:>14}  {:>14}  {:>12}", "k", "Re Omega_k", "Im Omega_k", "|Omega_k|");
    for k in -(ec.k_eq as i64)..=ec.k_eq as i64 {
        let o = eq.omega_k(k) + Complex64::new(0.0, 0.0);
        let _ = writeln!(out, "{k:>4}  {:>14.6e}  {:>14.6e}  {:>12.6e}", o.re, o.im, o.norm());
    }
    let _ = writeln!(out, "I_q0 = {:.6} A", eq.iq0);
    let _ = writeln!(out, "residual {:.3e} after {} iterations", eq.residual, eq.iterations);
    let _ = writeln!(out, "wrote {} and {}", ref_path.display(), eq_path.display());
    Ok(out)
}
