//! Frequency profiles, the phase function θ(t) = θ₀ + ∫ω, its inverse, the
//! pseudo-period T(t) and the validity criterion ε(t).

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{golden_max, newton_bracketed};

const TWO_PI: f64 = 2.0 * PI;

/// Instantaneous frequency law ω(t) in rad/s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FrequencyProfile {
    Constant { omega0: f64 },
    /// ω(t) = ω₀ + a·t
    Ramp { omega0: f64, a: f64 },
    /// ω(t) = (1/ω₀ − K t)⁻¹ with K derived from `eps_bar`, see [`blowup_profile`].
    Blowup { omega0: f64, eps_bar: f64 },
    /// Piecewise-linear interpolation of the samples; `t` strictly increasing.
    Sampled { t: Vec<f64>, omega: Vec<f64> },
    /// Piece `i` is active on `[start_i, start_{i+1})` and is evaluated in local
    /// time `t - start_i`. The first piece also covers earlier times and the
    /// last one later times.
    Composite { pieces: Vec<Piece> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Piece {
    pub start: f64,
    pub profile: FrequencyProfile,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Law {
    /// ω = w0 + a s
    Affine { w0: f64, a: f64 },
    /// ω = w0 / (1 − k w0 s)
    Hyper { w0: f64, k: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Segment {
    start: f64,
    theta_start: f64,
    law: Law,
}

impl Law {
    fn omega(&self, s: f64) -> f64 {
        match *self {
            Law::Affine { w0, a } => w0 + a * s,
            Law::Hyper { w0, k } => w0 / (1.0 - k * w0 * s),
        }
    }

    fn omega_dot(&self, s: f64) -> f64 {
        match *self {
            Law::Affine { a, .. } => a,
            Law::Hyper { k, .. } => {
                let w = self.omega(s);
                k * w * w
            }
        }
    }

    fn increment(&self, s: f64) -> f64 {
        match *self {
            Law::Affine { w0, a } => w0 * s + 0.5 * a * s * s,
            Law::Hyper { w0, k } => {
                if k == 0.0 {
                    w0 * s
                } else {
                    -(-k * w0 * s).ln_1p() / k
                }
            }
        }
    }

    fn rebased(&self, ds: f64) -> Law {
        match *self {
            Law::Affine { a, .. } => Law::Affine { w0: self.omega(ds), a },
            Law::Hyper { k, .. } => Law::Hyper { w0: self.omega(ds), k },
        }
    }
}

/// The constant K of the blow-up profile for a target level `eps_bar`.
pub fn blowup_rate_constant(eps_bar: f64) -> f64 {
    (1.0 - (1.0 + eps_bar).powi(-2)) / (4.0 * PI)
}

fn compile(profile: &FrequencyProfile, offset: f64, out: &mut Vec<(f64, Law)>) -> Result<()> {
    match profile {
        FrequencyProfile::Constant { omega0 } => out.push((offset, Law::Affine { w0: *omega0, a: 0.0 })),
        FrequencyProfile::Ramp { omega0, a } => out.push((offset, Law::Affine { w0: *omega0, a: *a })),
        FrequencyProfile::Blowup { omega0, eps_bar } => {
            if !(*eps_bar >= 0.0) {
                return Err(Error::Config(format!("blowup eps_bar must be nonnegative, got {eps_bar}")));
            }
            out.push((offset, Law::Hyper { w0: *omega0, k: blowup_rate_constant(*eps_bar) }))
        }
        FrequencyProfile::Sampled { t, omega } => {
            if t.len() != omega.len() || t.len() < 2 {
                return Err(Error::Config("sampled profile needs at least two (t, omega) pairs of equal length".into()));
            }
            for i in 0..t.len() - 1 {
                let dt = t[i + 1] - t[i];
                if !(dt > 0.0) {
                    return Err(Error::Config("sampled profile times must be strictly increasing".into()));
                }
                out.push((offset + t[i], Law::Affine { w0: omega[i], a: (omega[i + 1] - omega[i]) / dt }));
            }
        }
        FrequencyProfile::Composite { pieces } => {
            if pieces.is_empty() {
                return Err(Error::Config("composite profile without pieces".into()));
            }
            for (i, piece) in pieces.iter().enumerate() {
                let lo = piece.start + offset;
                let hi = pieces.get(i + 1).map(|p| p.start + offset).unwrap_or(f64::INFINITY);
                if hi <= lo {
                    return Err(Error::Config("composite piece starts must be strictly increasing".into()));
                }
                let mut local = Vec::new();
                compile(&piece.profile, lo, &mut local)?;
                // keep the part of the piece inside [lo, hi)
                let first = local.partition_point(|(s, _)| *s <= lo).saturating_sub(1);
                for (s, law) in local.into_iter().skip(first) {
                    if s >= hi {
                        break;
                    }
                    if i > 0 && s < lo {
                        out.push((lo, law.rebased(lo - s)));
                    } else {
                        out.push((s, law));
                    }
                }
            }
        }
    }
    Ok(())
}

/// Sample grid extents (absolute time) that must contain the active part of
/// every sampled piece.
fn sampled_extents(profile: &FrequencyProfile, offset: f64, active: (f64, f64), out: &mut Vec<(f64, f64, f64, f64)>) {
    match profile {
        FrequencyProfile::Sampled { t, .. } => {
            if let (Some(a), Some(b)) = (t.first(), t.last()) {
                out.push((active.0, active.1, offset + a, offset + b));
            }
        }
        FrequencyProfile::Composite { pieces } => {
            for (i, piece) in pieces.iter().enumerate() {
                let lo = if i == 0 { active.0 } else { (piece.start + offset).max(active.0) };
                let hi = pieces.get(i + 1).map(|p| p.start + offset).unwrap_or(f64::INFINITY).min(active.1);
                if lo < hi {
                    sampled_extents(&piece.profile, piece.start + offset, (lo, hi), out);
                }
            }
        }
        _ => {}
    }
}

/// θ(t) together with ω(t), ω̇(t) and the inverse p(φ) on a closed domain.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseFunction {
    profile: FrequencyProfile,
    theta0: f64,
    domain: (f64, f64),
    segments: Vec<Segment>,
}

impl PhaseFunction {
    pub fn new(profile: FrequencyProfile, theta0: f64, domain: (f64, f64)) -> Result<Self> {
        let (lo, hi) = domain;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("invalid domain [{lo}, {hi}]")));
        }
        let mut raw = Vec::new();
        compile(&profile, 0.0, &mut raw)?;
        let mut extents = Vec::new();
        sampled_extents(&profile, 0.0, domain, &mut extents);
        for (a, b, ga, gb) in extents {
            if a < ga - 1e-12 * (1.0 + ga.abs()) || b > gb + 1e-12 * (1.0 + gb.abs()) {
                return Err(Error::DomainExceeded { value: if a < ga { a } else { b }, lo: ga, hi: gb });
            }
        }
        // accumulate θ at segment starts
        let mut segments: Vec<Segment> = Vec::with_capacity(raw.len());
        let mut theta = 0.0;
        for (i, (start, law)) in raw.iter().enumerate() {
            if i > 0 {
                let (prev_start, prev_law) = raw[i - 1];
                theta += prev_law.increment(start - prev_start);
            }
            segments.push(Segment { start: *start, theta_start: theta, law: *law });
        }
        let mut pf = PhaseFunction { profile, theta0, domain, segments };
        // positivity on the active part of every segment (laws are monotone)
        for i in 0..pf.segments.len() {
            let a = if i == 0 { lo } else { pf.segments[i].start.max(lo) };
            let b = pf.segments.get(i + 1).map(|s| s.start).unwrap_or(f64::INFINITY).min(hi);
            if a > b {
                continue;
            }
            let seg = pf.segments[i];
            for t in [a, b] {
                let s = t - seg.start;
                let w = seg.law.omega(s);
                let pole_ok = match seg.law {
                    Law::Hyper { w0, k } => 1.0 - k * w0 * s > 0.0,
                    Law::Affine { .. } => true,
                };
                if !(w > 0.0) || !pole_ok || !w.is_finite() {
                    return Err(Error::NonPositiveFrequency { t, omega: w });
                }
            }
        }
        let shift = theta0 - pf.raw_theta(0.0);
        for seg in &mut pf.segments {
            seg.theta_start += shift;
        }
        Ok(pf)
    }

    fn segment(&self, t: f64) -> &Segment {
        let idx = self.segments.partition_point(|s| s.start <= t).saturating_sub(1);
        &self.segments[idx]
    }

    fn raw_theta(&self, t: f64) -> f64 {
        let seg = self.segment(t);
        seg.theta_start + seg.law.increment(t - seg.start)
    }

    fn check(&self, t: f64) -> Result<()> {
        let (lo, hi) = self.domain;
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        if t < lo - slack || t > hi + slack || t.is_nan() {
            return Err(Error::DomainExceeded { value: t, lo, hi });
        }
        Ok(())
    }

    pub fn profile(&self) -> &FrequencyProfile {
        &self.profile
    }

    pub fn theta0(&self) -> f64 {
        self.theta0
    }

    pub fn domain(&self) -> (f64, f64) {
        self.domain
    }

    pub fn omega(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.omega_unchecked(t))
    }

    pub fn omega_dot(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        let seg = self.segment(t);
        Ok(seg.law.omega_dot(t - seg.start))
    }

    pub fn theta(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.theta_unchecked(t))
    }

    /// ω without the domain check; callers must have validated `t`.
    pub(crate) fn omega_unchecked(&self, t: f64) -> f64 {
        let seg = self.segment(t);
        seg.law.omega(t - seg.start)
    }

    pub(crate) fn theta_unchecked(&self, t: f64) -> f64 {
        self.raw_theta(t)
    }

    /// Inverse phase map p(φ).
    pub fn time_of_phase(&self, phi: f64) -> Result<f64> {
        let (lo, hi) = self.domain;
        let (th_lo, th_hi) = (self.theta_unchecked(lo), self.theta_unchecked(hi));
        let slack = 1e-12 * (1.0 + phi.abs());
        if phi < th_lo - slack || phi > th_hi + slack || phi.is_nan() {
            return Err(Error::DomainExceeded { value: phi, lo: th_lo, hi: th_hi });
        }
        if phi <= th_lo {
            return Ok(lo);
        }
        if phi >= th_hi {
            return Ok(hi);
        }
        // narrow the bracket to one segment before iterating
        let idx = self
            .segments
            .partition_point(|s| s.start <= hi && s.theta_start <= phi)
            .saturating_sub(1);
        let a = self.segments[idx].start.max(lo);
        let b = self.segments.get(idx + 1).map(|s| s.start).unwrap_or(hi).min(hi);
        let (a, b) = if a < b && self.theta_unchecked(a) <= phi && self.theta_unchecked(b) >= phi { (a, b) } else { (lo, hi) };
        let guess = a + (phi - self.theta_unchecked(a)) / self.omega_unchecked(a);
        Ok(newton_bracketed(
            |t| self.theta_unchecked(t) - phi,
            |t| self.omega_unchecked(t),
            a,
            b,
            guess,
            1e-13 * (1.0 + phi.abs()),
        ))
    }
}

/// Pseudo-period T(t) and its rate Ṫ(t).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PseudoPeriod {
    pub period: f64,
    pub rate: f64,
}

/// Solves θ(t) − θ(t − T) = 2π for the trailing window length.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPeriodEvaluator {
    pub phase: PhaseFunction,
    /// Phase residual tolerance relative to 2π.
    pub tol: f64,
}

impl PseudoPeriodEvaluator {
    pub fn new(phase: PhaseFunction) -> Self {
        PseudoPeriodEvaluator { phase, tol: 1e-13 }
    }

    pub fn pseudo_period(&self, t: f64) -> Result<PseudoPeriod> {
        let pf = &self.phase;
        pf.check(t)?;
        let t_min = pf.domain.0;
        let theta_t = pf.theta_unchecked(t);
        let g = |big_t: f64| theta_t - pf.theta_unchecked(t - big_t) - TWO_PI;
        let hi = t - t_min;
        if !(hi > 0.0) || g(hi) < -self.tol * TWO_PI {
            return Err(Error::InsufficientHistory { t, t_min });
        }
        let w = pf.omega_unchecked(t);
        let period = newton_bracketed(g, |big_t| pf.omega_unchecked(t - big_t), 0.0, hi, TWO_PI / w, self.tol * TWO_PI);
        let rate = 1.0 - w / pf.omega_unchecked(t - period);
        Ok(PseudoPeriod { period, rate })
    }

    /// sup over the trailing window of |ω(t) − ω(τ)| / ω(τ): a uniform scan of
    /// `samples` points followed by golden-section refinement around the best
    /// point.
    pub fn epsilon(&self, t: f64, samples: usize) -> Result<f64> {
        if samples < 64 {
            return Err(Error::Config(format!("epsilon needs at least 64 samples, got {samples}")));
        }
        let big_t = self.pseudo_period(t)?.period;
        let pf = &self.phase;
        let w = pf.omega_unchecked(t);
        let dev = |tau: f64| (w - pf.omega_unchecked(tau)).abs() / pf.omega_unchecked(tau);
        let h = big_t / (samples - 1) as f64;
        let start = t - big_t;
        let mut best = (0usize, dev(start));
        for i in 1..samples {
            let tau = if i == samples - 1 { t } else { start + h * i as f64 };
            let v = dev(tau);
            if v > best.1 {
                best = (i, v);
            }
        }
        let a = start + h * best.0.saturating_sub(1) as f64;
        let b = (start + h * (best.0 + 1) as f64).min(t);
        let (_, refined) = golden_max(dev, a, b, 1e-12 * (1.0 + t.abs()));
        Ok(best.1.max(refined))
    }
}

pub fn build_phase_function(profile: FrequencyProfile, theta0: f64, domain: (f64, f64)) -> Result<PhaseFunction> {
    PhaseFunction::new(profile, theta0, domain)
}

pub fn phase_to_time(phase: &PhaseFunction, phi: f64) -> Result<f64> {
    phase.time_of_phase(phi)
}

pub fn pseudo_period(evaluator: &PseudoPeriodEvaluator, t: f64) -> Result<PseudoPeriod> {
    evaluator.pseudo_period(t)
}

pub fn epsilon_criterion(evaluator: &PseudoPeriodEvaluator, t: f64, samples: usize) -> Result<f64> {
    evaluator.epsilon(t, samples)
}

/// ε for the ramp ω(t) = ω₀ + a t, valid while the whole window stays on the ramp.
pub fn closed_form_ramp_epsilon(omega0: f64, a: f64, t: f64) -> Result<f64> {
    let w = omega0 + a * t;
    let x = 4.0 * PI * a / (w * w);
    if !(w > 0.0) || x >= 1.0 {
        return Err(Error::InvalidRegime(format!("omega(t)^2 = {} must exceed 4 pi a = {}", w * w, 4.0 * PI * a)));
    }
    Ok((1.0 - x).powf(-0.5) - 1.0)
}

/// Largest ramp rate keeping ε at `eps_bar` for the current frequency.
pub fn max_frequency_rate(omega: f64, eps_bar: f64) -> Result<f64> {
    if !(eps_bar > 0.0) {
        return Err(Error::InvalidRegime(format!("eps_bar must be positive, got {eps_bar}")));
    }
    Ok(omega * omega / (4.0 * PI) * (1.0 - (1.0 + eps_bar).powi(-2)))
}

/// The hyperbolic profile ω̇ = Kω² together with its finite blow-up time.
#[derive(Clone, Debug, PartialEq)]
pub struct BlowupProfile {
    pub profile: FrequencyProfile,
    pub k: f64,
    pub blowup_time: f64,
    /// Largest usable time; kept strictly below the blow-up time.
    pub t_max: f64,
}

impl BlowupProfile {
    /// The criterion actually realized along the profile. It is constant in
    /// time and equals exp(2πK) − 1, which matches `eps_bar` to first order.
    pub fn realized_epsilon(&self) -> f64 {
        (TWO_PI * self.k).exp_m1()
    }
}

pub fn blowup_profile(omega0: f64, eps_bar: f64) -> Result<BlowupProfile> {
    if !(eps_bar > 0.0) || !(omega0 > 0.0) {
        return Err(Error::InvalidRegime(format!("need omega0 > 0 and eps_bar > 0, got {omega0}, {eps_bar}")));
    }
    let k = blowup_rate_constant(eps_bar);
    let blowup_time = 1.0 / (k * omega0);
    Ok(BlowupProfile {
        profile: FrequencyProfile::Blowup { omega0, eps_bar },
        k,
        blowup_time,
        t_max: blowup_time * (1.0 - 1e-6),
    })
}
