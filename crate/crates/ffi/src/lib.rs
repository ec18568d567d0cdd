//! C interface to `vfharmonic`.
//!
//! Every function returns a [`VfhStatus`]. On failure a message is stored
//! per thread and can be read with [`vfh_last_error`]. Objects are opaque
//! handles created by `*_new`/`*_load` functions and released with the
//! matching `*_free`; freeing NULL is a no-op.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use num_complex::Complex64;
use vfharmonic::cli::{self, Overrides, RunConfig};
use vfharmonic::phase::{FrequencyProfile, PhaseFunction, PseudoPeriodEvaluator};
use vfharmonic::pmsm::{equilibrium_fixed_point, Controller, EquilibriumResult, OutputSpec, PmsmParams, TorqueDisturbance};
use vfharmonic::synthesis::SynthesisFile;
use vfharmonic::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VfhStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Config = 3,
    Infeasible = 4,
    MissingArtifact = 5,
    Divergence = 6,
    Numerical = 7,
    Io = 8,
    Panic = 9,
}

/// Machine constants, SI units.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VfhPmsmParams {
    pub r: f64,
    pub l: f64,
    pub psi_f: f64,
    pub j: f64,
    pub b_f: f64,
    pub p: u32,
}

/// Load-torque harmonic W_k = re + j·im for k > 0.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VfhTorqueHarmonic {
    pub k: u32,
    pub re: f64,
    pub im: f64,
}

/// Frequency profile with its pseudo-period evaluator.
pub struct VfhPhase(PseudoPeriodEvaluator);

pub struct VfhEquilibrium(EquilibriumResult);

/// Stored periodic gain with its output map and Lyapunov certificate.
pub struct VfhController(Controller);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> VfhStatus {
    match e {
        Error::Infeasible(_) | Error::PosdefCheckFailed { .. } | Error::VerificationFailed(_) => VfhStatus::Infeasible,
        Error::FixedPointDiverged { .. } | Error::IntegrationBlewUp { .. } => VfhStatus::Divergence,
        Error::SolverFailure(_) | Error::QuadratureFailure { .. } | Error::SingularFrequencyOperator { .. } | Error::NotHermitian { .. } => {
            VfhStatus::Numerical
        }
        Error::Io(_) => VfhStatus::Io,
        Error::Config(_) | Error::Format(_) | Error::Json(_) | Error::Csv(_) => VfhStatus::Config,
        _ => VfhStatus::InvalidArgument,
    }
}

struct Fail(VfhStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null() -> Fail {
    Fail(VfhStatus::NullPointer, "null pointer argument".into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> VfhStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            VfhStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            VfhStatus::Panic
        }
    }
}

unsafe fn out_ref<'a, T>(p: *mut T) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(null)
}

unsafe fn in_ref<'a, T>(p: *const T) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(null)
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null());
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail(VfhStatus::InvalidArgument, "string is not UTF-8".into()))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null());
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn boxed<T>(v: T) -> *mut T {
    Box::into_raw(Box::new(v))
}

unsafe fn free<T>(p: *mut T) {
    if !p.is_null() {
        drop(Box::from_raw(p));
    }
}

/// Library version, a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn vfh_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, empty after a success.
/// Valid until the next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn vfh_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

fn new_phase(profile: FrequencyProfile, theta0: f64, t_min: f64, t_max: f64, out: *mut *mut VfhPhase) -> VfhStatus {
    guard(|| unsafe {
        let out = out_ref(out)?;
        let pf = PhaseFunction::new(profile, theta0, (t_min, t_max))?;
        *out = boxed(VfhPhase(PseudoPeriodEvaluator::new(pf)));
        Ok(())
    })
}

/// ω(t) = omega0 + a·t on [t_min, t_max].
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn vfh_phase_new_ramp(omega0: f64, a: f64, theta0: f64, t_min: f64, t_max: f64, out: *mut *mut VfhPhase) -> VfhStatus {
    new_phase(FrequencyProfile::Ramp { omega0, a }, theta0, t_min, t_max, out)
}

/// ω(t) = (1/omega0 − K t)⁻¹ with K set by `eps_bar`.
///
/// # Safety
/// `out` must be a valid pointer to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn vfh_phase_new_blowup(omega0: f64, eps_bar: f64, theta0: f64, t_min: f64, t_max: f64, out: *mut *mut VfhPhase) -> VfhStatus {
    new_phase(FrequencyProfile::Blowup { omega0, eps_bar }, theta0, t_min, t_max, out)
}

/// Any profile given as a TOML table, e.g. `kind = "sampled"`,
/// `t = [...]`, `omega = [...]`.
///
/// # Safety
/// `profile_toml` must be a NUL-terminated string, `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn vfh_phase_new_toml(profile_toml: *const c_char, theta0: f64, t_min: f64, t_max: f64, out: *mut *mut VfhPhase) -> VfhStatus {
    let text = match guard_value(|| str_arg(profile_toml).map(str::to_owned)) {
        Ok(t) => t,
        Err(s) => return s,
    };
    let profile: FrequencyProfile = match toml::from_str(&text) {
        Ok(p) => p,
        Err(e) => {
            set_error(&format!("invalid profile: {e}"));
            return VfhStatus::Config;
        }
    };
    new_phase(profile, theta0, t_min, t_max, out)
}

fn guard_value<T>(f: impl FnOnce() -> Result<T, Fail>) -> Result<T, VfhStatus> {
    let mut slot = None;
    let status = guard(|| {
        slot = Some(f()?);
        Ok(())
    });
    slot.ok_or(status)
}

/// ω(t) and θ(t). Either output may be NULL.
///
/// # Safety
/// `h` must be a live handle; outputs NULL or valid.
#[no_mangle]
pub unsafe extern "C" fn vfh_phase_eval(h: *const VfhPhase, t: f64, omega: *mut f64, theta: *mut f64) -> VfhStatus {
    guard(|| {
        let pf = &in_ref(h)?.0.phase;
        let (w, th) = (pf.omega(t)?, pf.theta(t)?);
        if let Some(o) = omega.as_mut() {
            *o = w;
        }
        if let Some(o) = theta.as_mut() {
            *o = th;
        }
        Ok(())
    })
}

/// Pseudo-period T(t).
///
/// # Safety
/// `h` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vfh_phase_pseudo_period(h: *const VfhPhase, t: f64, out: *mut f64) -> VfhStatus {
    guard(|| {
        let v = in_ref(h)?.0.pseudo_period(t)?.period;
        *out_ref(out)? = v;
        Ok(())
    })
}

/// Validity criterion ε(t), scanning the window with `samples` points (at least 64).
///
/// # Safety
/// `h` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vfh_phase_epsilon(h: *const VfhPhase, t: f64, samples: usize, out: *mut f64) -> VfhStatus {
    guard(|| {
        let v = in_ref(h)?.0.epsilon(t, samples)?;
        *out_ref(out)? = v;
        Ok(())
    })
}

/// # Safety
/// `h` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vfh_phase_free(h: *mut VfhPhase) {
    free(h)
}

impl From<PmsmParams> for VfhPmsmParams {
    fn from(p: PmsmParams) -> Self {
        VfhPmsmParams { r: p.r, l: p.l, psi_f: p.psi_f, j: p.j, b_f: p.b_f, p: p.p }
    }
}

impl From<VfhPmsmParams> for PmsmParams {
    fn from(p: VfhPmsmParams) -> Self {
        PmsmParams { r: p.r, l: p.l, psi_f: p.psi_f, j: p.j, b_f: p.b_f, p: p.p }
    }
}

/// Reference machine constants.
#[no_mangle]
pub extern "C" fn vfh_pmsm_params_default() -> VfhPmsmParams {
    PmsmParams::default().into()
}

/// Phase-periodic equilibrium for load W₀ plus `n_harmonics` harmonics.
///
/// # Safety
/// `params` and `out` valid; `harmonics` valid for `n_harmonics` entries.
#[no_mangle]
pub unsafe extern "C" fn vfh_equilibrium_new(
    params: *const VfhPmsmParams,
    omega_ref0: f64,
    w0: f64,
    harmonics: *const VfhTorqueHarmonic,
    n_harmonics: usize,
    k_eq: usize,
    tol: f64,
    out: *mut *mut VfhEquilibrium,
) -> VfhStatus {
    guard(|| {
        let params: PmsmParams = (*in_ref(params)?).into();
        let out = out_ref(out)?;
        let load = slice_arg(harmonics, n_harmonics)?
            .iter()
            .fold(TorqueDisturbance::constant(w0), |acc, h| acc.with_harmonic(h.k, Complex64::new(h.re, h.im)));
        *out = boxed(VfhEquilibrium(equilibrium_fixed_point(&params, omega_ref0, &load, k_eq, tol)?));
        Ok(())
    })
}

/// DC q-axis current of the equilibrium, A.
///
/// # Safety
/// `h` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vfh_equilibrium_iq0(h: *const VfhEquilibrium, out: *mut f64) -> VfhStatus {
    guard(|| {
        *out_ref(out)? = in_ref(h)?.0.iq0;
        Ok(())
    })
}

/// Speed phasor Ω_k; zero beyond the computed band.
///
/// # Safety
/// `h` must be a live handle, `re` and `im` valid.
#[no_mangle]
pub unsafe extern "C" fn vfh_equilibrium_omega_k(h: *const VfhEquilibrium, k: i64, re: *mut f64, im: *mut f64) -> VfhStatus {
    guard(|| {
        let w = in_ref(h)?.0.omega_k(k);
        *out_ref(re)? = w.re;
        *out_ref(im)? = w.im;
        Ok(())
    })
}

/// # Safety
/// `h` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vfh_equilibrium_free(h: *mut VfhEquilibrium) {
    free(h)
}

/// Loads a gain file written by the synthesis for the output map given by
/// `q_axis` and the `n_harmonics` mitigated harmonics.
///
/// # Safety
/// `gain_path` NUL-terminated, `harmonics` valid for `n_harmonics`, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vfh_controller_load(
    gain_path: *const c_char,
    q_axis: bool,
    harmonics: *const u32,
    n_harmonics: usize,
    omega_min: f64,
    omega_max: f64,
    out: *mut *mut VfhController,
) -> VfhStatus {
    guard(|| {
        let path = PathBuf::from(str_arg(gain_path)?);
        let out = out_ref(out)?;
        let spec = OutputSpec { q_axis, harmonics: slice_arg(harmonics, n_harmonics)?.to_vec() };
        let file = SynthesisFile::load(&path).map_err(|e| match e {
            Error::Io(io) => Fail(VfhStatus::MissingArtifact, format!("{}: {io}", path.display())),
            other => other.into(),
        })?;
        *out = boxed(VfhController(Controller::from_synthesis(&file, spec, (omega_min, omega_max))?));
        Ok(())
    })
}

/// Gain dimensions: 3 inputs by 4 + outputs columns.
///
/// # Safety
/// `h` must be a live handle, `rows` and `cols` valid.
#[no_mangle]
pub unsafe extern "C" fn vfh_controller_dims(h: *const VfhController, rows: *mut usize, cols: *mut usize) -> VfhStatus {
    guard(|| {
        let g = &in_ref(h)?.0.gain;
        *out_ref(rows)? = g.rows();
        *out_ref(cols)? = g.cols();
        Ok(())
    })
}

/// K(θ), row-major, into `buf` of length `len` ≥ rows·cols.
///
/// # Safety
/// `h` must be a live handle and `buf` valid for `len` doubles.
#[no_mangle]
pub unsafe extern "C" fn vfh_controller_gain(h: *const VfhController, theta: f64, buf: *mut f64, len: usize) -> VfhStatus {
    guard(|| {
        let g = &in_ref(h)?.0.gain;
        let (r, c) = (g.rows(), g.cols());
        if len < r * c {
            return Err(Fail(VfhStatus::InvalidArgument, format!("buffer holds {len} values, gain needs {}", r * c)));
        }
        if buf.is_null() {
            return Err(null());
        }
        let k = g.eval_real(theta);
        let dst = std::slice::from_raw_parts_mut(buf, r * c);
        for i in 0..r {
            for j in 0..c {
                dst[i * c + j] = k[(i, j)];
            }
        }
        Ok(())
    })
}

/// Largest certified Lyapunov level keeping the speed inside the synthesis
/// interval around `omega_ref0`.
///
/// # Safety
/// `h` must be a live handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn vfh_controller_level_max(h: *const VfhController, omega_ref0: f64, out: *mut f64) -> VfhStatus {
    guard(|| {
        let ctl = &in_ref(h)?.0;
        let l = ctl.lyapunov.as_ref().ok_or_else(|| Fail(VfhStatus::MissingArtifact, "gain file carries no certificate".into()))?;
        *out_ref(out)? = l.level_max(omega_ref0, ctl.omega_range);
        Ok(())
    })
}

/// # Safety
/// `h` must be NULL or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn vfh_controller_free(h: *mut VfhController) {
    free(h)
}

/// Runs one command of the command-line tool (`epsilon`, `synthesize`,
/// `simulate` or `equilibrium`) on a config file. `out_dir` may be NULL.
/// The printed summary is available through [`vfh_last_error`] on success
/// as well.
///
/// # Safety
/// `command` and `config_path` NUL-terminated; `out_dir` NULL or NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vfh_run(command: *const c_char, config_path: *const c_char, out_dir: *const c_char, no_mitigation: bool) -> VfhStatus {
    let mut summary = String::new();
    let status = guard(|| {
        let cmd = match str_arg(command)? {
            "epsilon" => cli::cmd_epsilon,
            "synthesize" => cli::cmd_synthesize,
            "simulate" => cli::cmd_simulate,
            "equilibrium" => cli::cmd_equilibrium,
            other => return Err(Fail(VfhStatus::InvalidArgument, format!("unknown command {other:?}"))),
        };
        let out = if out_dir.is_null() { None } else { Some(PathBuf::from(str_arg(out_dir)?)) };
        let ov = Overrides { out, no_mitigation, ..Default::default() };
        let run = RunConfig::load(&PathBuf::from(str_arg(config_path)?)).and_then(|cfg| cmd(&cfg, &ov));
        match run {
            Ok(text) => {
                summary = text;
                Ok(())
            }
            Err(e) => Err(Fail(status_of_exit(e.code), e.message)),
        }
    });
    if status == VfhStatus::Ok {
        set_error(&summary);
    }
    status
}

fn status_of_exit(code: i32) -> VfhStatus {
    match code {
        cli::EXIT_OK => VfhStatus::Ok,
        cli::EXIT_INFEASIBLE => VfhStatus::Infeasible,
        cli::EXIT_MISSING_ARTIFACT => VfhStatus::MissingArtifact,
        cli::EXIT_DIVERGENCE => VfhStatus::Divergence,
        _ => VfhStatus::Config,
    }
}
