//! Sliding Fourier decomposition over a trailing window, for fixed and
//! phase-varying fundamentals.
//!
//! Signals are real vector-valued functions of time, passed as closures that
//! fill an output slice. Phasors are stored component-major with harmonic
//! index `k = -N..=N` ascending, matching the Toeplitz operator layout.

use std::f64::consts::PI;
use std::num::NonZeroUsize;
use std::path::Path;

use gauss_quad::legendre::GaussLegendre;
use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::numerics::{fd_weights, stencil_start, CMatrix, CVector};
use crate::phase::PseudoPeriodEvaluator;
use crate::toeplitz::Symbol;

const NODES_PER_PANEL: usize = 8;
const QUAD_TOL: f64 = 1e-10;
const MAX_DOUBLINGS: usize = 6;

/// Phasors X_k of an `n`-component signal at one instant.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasorSequence {
    dim: usize,
    order: usize,
    real: bool,
    data: CVector,
}

impl PhasorSequence {
    pub fn zeros(dim: usize, order: usize) -> Self {
        PhasorSequence { dim, order, real: true, data: CVector::zeros(dim * (2 * order + 1)) }
    }

    /// Wraps a flat harmonic vector. The real flag is derived from the data.
    pub fn from_vector(dim: usize, order: usize, data: CVector) -> Result<Self> {
        if data.len() != dim * (2 * order + 1) {
            return Err(Error::DimensionMismatch(format!("{} phasors for n = {dim}, N = {order}", data.len())));
        }
        let mut s = PhasorSequence { dim, order, real: false, data };
        s.real = s.conjugate_symmetry_residual() <= 1e-12 * (1.0 + s.data.camax());
        Ok(s)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// Whether the sequence came from a real signal (X_{-k} = conj X_k).
    pub fn is_real(&self) -> bool {
        self.real
    }

    fn index(&self, component: usize, k: i64) -> usize {
        assert!(component < self.dim && k.unsigned_abs() as usize <= self.order, "phasor index out of range");
        component * (2 * self.order + 1) + (k + self.order as i64) as usize
    }

    pub fn get(&self, component: usize, k: i64) -> Complex64 {
        self.data[self.index(component, k)]
    }

    pub fn set(&mut self, component: usize, k: i64, v: Complex64) {
        let i = self.index(component, k);
        self.data[i] = v;
    }

    pub fn as_vector(&self) -> &CVector {
        &self.data
    }

    pub fn into_vector(self) -> CVector {
        self.data
    }

    /// The n-vector X_k.
    pub fn harmonic(&self, k: i64) -> CVector {
        CVector::from_fn(self.dim, |i, _| self.get(i, k))
    }

    pub fn conjugate_symmetry_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for k in 0..=self.order as i64 {
                worst = worst.max((self.get(i, -k) - self.get(i, k).conj()).norm());
            }
        }
        worst
    }

    /// Σ_k X_k e^{jkθ}, real part.
    pub fn synthesize(&self, theta: f64) -> DVector<f64> {
        let mut out = DVector::zeros(self.dim);
        for k in -(self.order as i64)..=(self.order as i64) {
            let e = Complex64::from_polar(1.0, k as f64 * theta);
            for i in 0..self.dim {
                out[i] += (self.get(i, k) * e).re;
            }
        }
        out
    }

    /// Scalar symbol with coefficient `h` equal to X_h of one component.
    pub fn to_scalar_symbol(&self, component: usize) -> Symbol {
        let mut s = Symbol::zeros(1, 1);
        for k in -(self.order as i64)..=(self.order as i64) {
            s.insert(k, CMatrix::from_element(1, 1, self.get(component, k)));
        }
        s
    }
}

/// Which variable the window integral is discretized in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum QuadraturePath {
    /// Integrate over τ with the ω(τ) weight.
    #[default]
    Time,
    /// Integrate over φ, evaluating the signal at p(φ).
    Phase,
}

fn gl_rule() -> Vec<(f64, f64)> {
    GaussLegendre::new(NonZeroUsize::new(NODES_PER_PANEL).unwrap()).as_node_weight_pairs().to_vec()
}

/// Sums `weight · x(τ) · e^{-jkθ}` for k = 0..=N over every node produced by
/// `nodes`, then fills negative harmonics by conjugation.
fn accumulate<X, I>(x: &X, dim: usize, order: usize, nodes: I) -> PhasorSequence
where
    X: Fn(f64, &mut [f64]) + ?Sized,
    I: Iterator<Item = (f64, f64, f64)>,
{
    let mut seq = PhasorSequence::zeros(dim, order);
    let mut buf = vec![0.0; dim];
    let width = 2 * order + 1;
    for (tau, theta, w) in nodes {
        x(tau, &mut buf);
        for k in 0..=order {
            let e = Complex64::from_polar(w, -(k as f64) * theta);
            for (i, v) in buf.iter().enumerate() {
                seq.data[i * width + order + k] += e * v;
            }
        }
    }
    for i in 0..dim {
        for k in 1..=order {
            seq.data[i * width + order - k] = seq.data[i * width + order + k].conj();
        }
    }
    seq
}

fn adaptive<F: FnMut(usize) -> Result<PhasorSequence>>(order: usize, mut eval: F) -> Result<PhasorSequence> {
    let mut panels = NODES_PER_PANEL * (order + 1);
    let mut prev = eval(panels)?;
    let mut change = f64::INFINITY;
    for _ in 0..MAX_DOUBLINGS {
        panels *= 2;
        let next = eval(panels)?;
        change = (&next.data - &prev.data).camax();
        if change <= QUAD_TOL * next.data.camax().max(1.0) {
            return Ok(next);
        }
        prev = next;
    }
    Err(Error::QuadratureFailure { change })
}

/// Phasors over the fixed window [t − T0, t] with θ = 2πτ/T0.
pub fn sfd_fixed<X>(x: &X, dim: usize, period: f64, order: usize, t: f64) -> Result<PhasorSequence>
where
    X: Fn(f64, &mut [f64]) + ?Sized,
{
    if !(period > 0.0) {
        return Err(Error::InvalidRegime(format!("period must be positive, got {period}")));
    }
    let rule = gl_rule();
    let w0 = 2.0 * PI / period;
    adaptive(order, |panels| {
        let h = period / panels as f64;
        let a0 = t - period;
        let nodes = (0..panels).flat_map(|p| {
            let a = a0 + p as f64 * h;
            rule.iter().map(move |&(xi, wi)| {
                let tau = a + 0.5 * h * (xi + 1.0);
                (tau, w0 * tau, 0.5 * h * wi / period)
            })
        });
        Ok(accumulate(x, dim, order, nodes))
    })
}

/// Phasors over the pseudo-period window of the evaluator's phase function.
pub fn sfd_variable<X>(x: &X, dim: usize, evaluator: &PseudoPeriodEvaluator, order: usize, t: f64) -> Result<PhasorSequence>
where
    X: Fn(f64, &mut [f64]) + ?Sized,
{
    sfd_variable_with(x, dim, evaluator, order, t, QuadraturePath::Time)
}

pub fn sfd_variable_with<X>(
    x: &X,
    dim: usize,
    evaluator: &PseudoPeriodEvaluator,
    order: usize,
    t: f64,
    path: QuadraturePath,
) -> Result<PhasorSequence>
where
    X: Fn(f64, &mut [f64]) + ?Sized,
{
    let pf = &evaluator.phase;
    let period = evaluator.pseudo_period(t)?.period;
    let theta_t = pf.theta(t)?;
    let rule = gl_rule();
    adaptive(order, |panels| {
        let dphi = 2.0 * PI / panels as f64;
        let phi0 = theta_t - 2.0 * PI;
        match path {
            QuadraturePath::Time => {
                // panel edges equally spaced in phase keep the oscillation per panel fixed
                let mut edges = Vec::with_capacity(panels + 1);
                edges.push(t - period);
                for p in 1..panels {
                    edges.push(pf.time_of_phase(phi0 + p as f64 * dphi)?);
                }
                edges.push(t);
                let nodes = edges.windows(2).flat_map(|e| {
                    let (a, h) = (e[0], e[1] - e[0]);
                    rule.iter().map(move |&(xi, wi)| {
                        let tau = a + 0.5 * h * (xi + 1.0);
                        (tau, pf.theta_unchecked(tau), 0.5 * h * wi * pf.omega_unchecked(tau) / (2.0 * PI))
                    })
                });
                Ok(accumulate(x, dim, order, nodes))
            }
            QuadraturePath::Phase => {
                let mut nodes = Vec::with_capacity(panels * rule.len());
                for p in 0..panels {
                    let a = phi0 + p as f64 * dphi;
                    for &(xi, wi) in &rule {
                        let phi = a + 0.5 * dphi * (xi + 1.0);
                        nodes.push((pf.time_of_phase(phi)?, phi, 0.5 * dphi * wi / (2.0 * PI)));
                    }
                }
                Ok(accumulate(x, dim, order, nodes.into_iter()))
            }
        }
    })
}

/// Phasor sequences sampled on a time grid together with θ and ω there.
#[derive(Clone, Debug, PartialEq)]
pub struct PhasorTrajectory {
    pub times: Vec<f64>,
    pub theta: Vec<f64>,
    pub omega: Vec<f64>,
    pub phasors: Vec<PhasorSequence>,
}

impl PhasorTrajectory {
    pub fn from_signal<X>(x: &X, dim: usize, evaluator: &PseudoPeriodEvaluator, order: usize, times: &[f64]) -> Result<Self>
    where
        X: Fn(f64, &mut [f64]) + ?Sized,
    {
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidRegime("trajectory times must be strictly increasing".into()));
        }
        let mut traj = PhasorTrajectory { times: times.to_vec(), theta: Vec::new(), omega: Vec::new(), phasors: Vec::new() };
        for &t in times {
            traj.theta.push(evaluator.phase.theta(t)?);
            traj.omega.push(evaluator.phase.omega(t)?);
            traj.phasors.push(sfd_variable(x, dim, evaluator, order, t)?);
        }
        Ok(traj)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.phasors.first().map_or(0, |p| p.dim)
    }

    pub fn order(&self) -> usize {
        self.phasors.first().map_or(0, |p| p.order)
    }

    fn derivative_with(&self, i: usize, points: usize, rows: &[usize]) -> CVector {
        let start = stencil_start(i, points, self.len());
        let w = fd_weights(self.times[i], &self.times[start..start + points]);
        CVector::from_fn(rows.len(), |r, _| {
            w.iter().enumerate().map(|(j, wj)| self.phasors[start + j].data[rows[r]] * *wj).sum()
        })
    }

    fn check_length(&self) -> Result<()> {
        if self.len() < 5 {
            return Err(Error::InvalidRegime(format!("need at least 5 grid points, got {}", self.len())));
        }
        Ok(())
    }

    /// Time derivative of every phasor at grid index `i`, five-point stencil.
    pub fn derivative(&self, i: usize) -> Result<CVector> {
        self.check_length()?;
        let rows: Vec<usize> = (0..self.phasors[i].data.len()).collect();
        Ok(self.derivative_with(i, 5, &rows))
    }

    /// Ẋ_0 at grid index `i` with an error estimate from a stencil of
    /// different order.
    pub fn dc_derivative(&self, i: usize) -> Result<(CVector, f64)> {
        self.check_length()?;
        let (order, width) = (self.order(), 2 * self.order() + 1);
        let rows: Vec<usize> = (0..self.dim()).map(|c| c * width + order).collect();
        let d5 = self.derivative_with(i, 5, &rows);
        let other = if self.len() >= 7 { self.derivative_with(i, 7, &rows) } else { self.derivative_with(i, 3, &rows) };
        let err = (&d5 - other).norm();
        Ok((d5, err))
    }

    fn locate(&self, t: f64) -> Result<usize> {
        let i = self.times.partition_point(|&s| s < t);
        let candidates = [i.saturating_sub(1), i.min(self.len().saturating_sub(1))];
        candidates
            .into_iter()
            .find(|&j| j < self.len() && (self.times[j] - t).abs() <= 1e-12 * (1.0 + t.abs()))
            .ok_or_else(|| Error::InvalidRegime(format!("t = {t} is not a node of the trajectory grid")))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let (n, order) = (self.dim(), self.order() as i64);
        let mut header = vec!["t".to_string(), "theta".into(), "omega".into()];
        for i in 0..n {
            for k in -order..=order {
                header.push(format!("re_x{i}_k{k}"));
                header.push(format!("im_x{i}_k{k}"));
            }
        }
        w.write_record(&header)?;
        for j in 0..self.len() {
            let mut row = vec![format!("{:e}", self.times[j]), format!("{:e}", self.theta[j]), format!("{:e}", self.omega[j])];
            for z in self.phasors[j].data.iter() {
                row.push(format!("{:e}", z.re));
                row.push(format!("{:e}", z.im));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let last = header.iter().next_back().ok_or_else(|| Error::Format("empty header".into()))?;
        let parse_dims = || -> Option<(usize, usize)> {
            let rest = last.strip_prefix("im_x")?;
            let (i, k) = rest.split_once("_k")?;
            Some((i.parse::<usize>().ok()? + 1, k.parse().ok()?))
        };
        let (n, order) = parse_dims().ok_or_else(|| Error::Format(format!("unrecognized phasor column {last:?}")))?;
        if header.len() != 3 + 2 * n * (2 * order + 1) {
            return Err(Error::Format("column count disagrees with header dimensions".into()));
        }
        let mut traj = PhasorTrajectory { times: Vec::new(), theta: Vec::new(), omega: Vec::new(), phasors: Vec::new() };
        for rec in r.records() {
            let rec = rec?;
            let vals: Vec<f64> = rec
                .iter()
                .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("bad number {s:?}: {e}"))))
                .collect::<Result<_>>()?;
            traj.times.push(vals[0]);
            traj.theta.push(vals[1]);
            traj.omega.push(vals[2]);
            let data = CVector::from_iterator(n * (2 * order + 1), vals[3..].chunks(2).map(|c| Complex64::new(c[0], c[1])));
            traj.phasors.push(PhasorSequence::from_vector(n, order, data)?);
        }
        Ok(traj)
    }
}

/// Signal value at grid time `t`: Σ X_k e^{jkθ} + (π/ω)·Ẋ_0.
pub fn reconstruct(traj: &PhasorTrajectory, t: f64) -> Result<DVector<f64>> {
    let i = traj.locate(t)?;
    let (d, err) = traj.dc_derivative(i)?;
    let seq = &traj.phasors[i];
    let tolerance = 1e-6 * seq.data.norm().max(f64::MIN_POSITIVE);
    if err > tolerance {
        return Err(Error::GridTooCoarse { estimate: err, tolerance });
    }
    let mut x = seq.synthesize(traj.theta[i]);
    let factor = PI / traj.omega[i];
    for c in 0..seq.dim {
        x[c] += factor * d[c].re;
    }
    Ok(x)
}

/// max over grid times and harmonics of ‖Ẋ_k − Ẋ_0 e^{-jkθ}‖ / max(1, ‖Ẋ_0‖).
pub fn coincidence_residual(traj: &PhasorTrajectory) -> Result<f64> {
    let (n, order) = (traj.dim(), traj.order());
    let width = 2 * order + 1;
    let mut worst: f64 = 0.0;
    for i in 0..traj.len() {
        let d = traj.derivative(i)?;
        let d0 = CVector::from_fn(n, |c, _| d[c * width + order]);
        let scale = d0.norm().max(1.0);
        for k in -(order as i64)..=(order as i64) {
            let rot = Complex64::from_polar(1.0, -(k as f64) * traj.theta[i]);
            let diff = CVector::from_fn(n, |c, _| d[c * width + (k + order as i64) as usize] - d0[c] * rot);
            worst = worst.max(diff.norm() / scale);
        }
    }
    Ok(worst)
}

/// ∫₀¹ (1 − s) e^{−jus} ds and ∫₀¹ s e^{−jus} ds.
fn filon_weights(u: f64) -> (Complex64, Complex64) {
    if u.abs() < 1e-2 {
        let (u2, u3, u4) = (u * u, u * u * u, u * u * u * u);
        let a = Complex64::new(1.0 - u2 / 6.0 + u4 / 120.0, -u / 2.0 + u3 / 24.0);
        let b = Complex64::new(0.5 - u2 / 8.0 + u4 / 144.0, -u / 3.0 + u3 / 30.0);
        return (a - b, b);
    }
    let c = Complex64::new(0.0, -u);
    let e = c.exp();
    let a = (e - 1.0) / c;
    let b = e * (1.0 / c - 1.0 / (c * c)) + 1.0 / (c * c);
    (a - b, b)
}

/// Adds (1/2π)∫ x(φ) e^{−jkφ} dφ over [θa, θb] for k = 0..=N, with x linear
/// in φ between the end values.
fn add_interval(acc: &mut [Complex64], order: usize, (ta, xa): (f64, &[f64]), (tb, xb): (f64, &[f64]), sign: f64) {
    let d = tb - ta;
    let scale = sign * d / (2.0 * PI);
    let step = Complex64::from_polar(1.0, -ta);
    let mut rot = Complex64::new(1.0, 0.0);
    for k in 0..=order {
        let (wa, wb) = filon_weights(k as f64 * d);
        let (wa, wb) = (rot * wa * scale, rot * wb * scale);
        for (i, (a, b)) in xa.iter().zip(xb).enumerate() {
            acc[i * (order + 1) + k] += wa * a + wb * b;
        }
        rot *= step;
    }
}

/// Sliding phasors of a sampled signal over the windows [θ_i − 2π, θ_i] for
/// each requested sample index `i` (ascending). The signal is taken linear
/// in phase between samples; `signal(j, out)` fills sample `j`.
///
/// Windows that start before the first sample yield `WindowUnavailable`.
pub fn sfd_sampled<X>(times: &[f64], theta: &[f64], dim: usize, signal: X, order: usize, at: &[usize]) -> Result<Vec<PhasorSequence>>
where
    X: Fn(usize, &mut [f64]),
{
    if times.len() != theta.len() {
        return Err(Error::DimensionMismatch(format!("{} times and {} phases", times.len(), theta.len())));
    }
    if theta.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidRegime("sampled phase must be strictly increasing".into()));
    }
    if at.windows(2).any(|w| w[1] < w[0]) || at.last().is_some_and(|&i| i >= theta.len()) {
        return Err(Error::InvalidRegime("window indices must be ascending and inside the trace".into()));
    }
    let width = order + 1;
    let mut acc = vec![Complex64::new(0.0, 0.0); dim * width];
    let fetch = |j: usize| {
        let mut v = vec![0.0; dim];
        signal(j, &mut v);
        v
    };
    let (mut lo, mut hi) = (0usize, 0usize);
    let mut xs_lo = fetch(0);
    let mut xs_lo1 = if theta.len() > 1 { fetch(1) } else { xs_lo.clone() };
    let mut x_hi = xs_lo.clone();
    let mut out = Vec::with_capacity(at.len());
    for &n in at {
        let start = theta[n] - 2.0 * PI;
        if theta[0] > start + 1e-12 * (1.0 + start.abs()) {
            return Err(Error::WindowUnavailable { t: times[n] });
        }
        while hi < n {
            let next = fetch(hi + 1);
            add_interval(&mut acc, order, (theta[hi], &x_hi), (theta[hi + 1], &next), 1.0);
            x_hi = next;
            hi += 1;
        }
        // drop intervals lying entirely before the window
        while lo + 1 < hi && theta[lo + 1] <= start {
            add_interval(&mut acc, order, (theta[lo], &xs_lo), (theta[lo + 1], &xs_lo1), -1.0);
            lo += 1;
            xs_lo = std::mem::take(&mut xs_lo1);
            xs_lo1 = fetch(lo + 1);
        }
        let mut window = acc.clone();
        if start > theta[lo] {
            let s = (start - theta[lo]) / (theta[lo + 1] - theta[lo]);
            let mid: Vec<f64> = xs_lo.iter().zip(&xs_lo1).map(|(a, b)| a + s * (b - a)).collect();
            add_interval(&mut window, order, (theta[lo], &xs_lo), (start, &mid), -1.0);
        }
        let mut seq = PhasorSequence::zeros(dim, order);
        for i in 0..dim {
            for k in 0..=order {
                let v = window[i * width + k];
                seq.data[i * (2 * order + 1) + order + k] = v;
                seq.data[i * (2 * order + 1) + order - k] = v.conj();
            }
        }
        out.push(seq);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::max_abs;
    use crate::phase::{FrequencyProfile, PhaseFunction};
    use crate::toeplitz::{toeplitz_from_symbol, Symbol};
    use proptest::prelude::*;

    fn ramp(w0: f64, a: f64) -> PseudoPeriodEvaluator {
        PseudoPeriodEvaluator::new(PhaseFunction::new(FrequencyProfile::Ramp { omega0: w0, a }, 0.0, (-1.0, 5.0)).unwrap())
    }

    fn constant(w: f64) -> PseudoPeriodEvaluator {
        PseudoPeriodEvaluator::new(PhaseFunction::new(FrequencyProfile::Constant { omega0: w }, 0.3, (-2.0, 2.0)).unwrap())
    }

    #[test]
    fn fixed_window_cosine() {
        let t0 = 0.1;
        let w0 = 2.0 * PI / t0;
        let x = |t: f64, o: &mut [f64]| o[0] = 3.0 * (2.0 * w0 * t + 0.4).cos() + 1.5;
        let s = sfd_fixed(&x, 1, t0, 4, 0.37).unwrap();
        assert!((s.get(0, 0) - Complex64::new(1.5, 0.0)).norm() < 1e-12);
        assert!((s.get(0, 2) - Complex64::from_polar(1.5, 0.4)).norm() < 1e-12);
        assert!((s.get(0, -2) - Complex64::from_polar(1.5, -0.4)).norm() < 1e-12);
        assert!(s.get(0, 1).norm() < 1e-12 && s.get(0, 3).norm() < 1e-12);
        assert!(s.is_real());
    }

    #[test]
    fn variable_matches_fixed_for_constant_frequency() {
        let ev = constant(40.0);
        let x = |t: f64, o: &mut [f64]| {
            o[0] = (t * 3.0).sin() + t * t;
            o[1] = (40.0 * t + 0.3).cos();
        };
        let a = sfd_variable(&x, 2, &ev, 3, 0.5).unwrap();
        // fixed-window phase differs from θ by θ0 = 0.3: rotate
        let b = sfd_fixed(&x, 2, 2.0 * PI / 40.0, 3, 0.5).unwrap();
        for i in 0..2 {
            for k in -3i64..=3 {
                let rotated = b.get(i, k) * Complex64::from_polar(1.0, -(k as f64) * 0.3);
                assert!((a.get(i, k) - rotated).norm() < 1e-12);
            }
        }
        assert!((a.get(1, 1) - Complex64::new(0.5, 0.0)).norm() < 1e-12);
    }

    #[test]
    fn function_of_phase_has_exact_phasors() {
        // x = f(θ) has X_k equal to the Fourier coefficients of f for any ω(t)
        let ev = ramp(50.0, 5.0);
        let pf = ev.phase.clone();
        let x = move |t: f64, o: &mut [f64]| {
            let th = pf.theta_unchecked(t);
            o[0] = 2.0 + (2.0 * th).cos() - 0.5 * (3.0 * th).sin();
        };
        for path in [QuadraturePath::Time, QuadraturePath::Phase] {
            let s = sfd_variable_with(&x, 1, &ev, 4, 1.0, path).unwrap();
            assert!((s.get(0, 0) - Complex64::new(2.0, 0.0)).norm() < 1e-11);
            assert!((s.get(0, 2) - Complex64::new(0.5, 0.0)).norm() < 1e-11);
            assert!((s.get(0, 3) - Complex64::new(0.0, 0.25)).norm() < 1e-11);
            assert!(s.get(0, 1).norm() < 1e-11 && s.get(0, 4).norm() < 1e-11);
        }
    }

    #[test]
    fn time_and_phase_paths_agree() {
        let ev = ramp(30.0, 8.0);
        let x = |t: f64, o: &mut [f64]| o[0] = (7.0 * t).exp().recip() + (25.0 * t).sin();
        let a = sfd_variable_with(&x, 1, &ev, 5, 0.8, QuadraturePath::Time).unwrap();
        let b = sfd_variable_with(&x, 1, &ev, 5, 0.8, QuadraturePath::Phase).unwrap();
        assert!((a.as_vector() - b.as_vector()).camax() < 1e-11);
    }

    #[test]
    fn window_before_domain_is_rejected() {
        let ev = ramp(30.0, 8.0);
        let x = |_t: f64, o: &mut [f64]| o[0] = 1.0;
        assert!(matches!(sfd_variable(&x, 1, &ev, 2, -0.99), Err(Error::InsufficientHistory { .. })));
    }

    #[test]
    fn product_rule_with_toeplitz() {
        // F(A x) = T(A) F(x) when x is band-limited in phase
        let ev = ramp(40.0, 6.0);
        let order = 6;
        let a_sym = Symbol::from_real_fn(2, 2, 2, |th| {
            nalgebra::DMatrix::from_row_slice(2, 2, &[1.0 + th.cos(), (2.0 * th).sin(), 0.5, -2.0 + 0.3 * th.sin()])
        });
        let pf = ev.phase.clone();
        let xf = move |t: f64, o: &mut [f64]| {
            let th = pf.theta_unchecked(t);
            o[0] = (th + 0.2).cos() + 0.1;
            o[1] = (3.0 * th).sin() - (2.0 * th).cos();
        };
        let pf2 = ev.phase.clone();
        let a2 = a_sym.clone();
        let ax = move |t: f64, o: &mut [f64]| {
            let mut v = [0.0; 2];
            xf(t, &mut v);
            let m = a2.eval_real(pf2.theta_unchecked(t));
            o[0] = m[(0, 0)] * v[0] + m[(0, 1)] * v[1];
            o[1] = m[(1, 0)] * v[0] + m[(1, 1)] * v[1];
        };
        let t = 1.3;
        let pf3 = ev.phase.clone();
        let xs = sfd_variable(
            &move |t: f64, o: &mut [f64]| {
                let th = pf3.theta_unchecked(t);
                o[0] = (th + 0.2).cos() + 0.1;
                o[1] = (3.0 * th).sin() - (2.0 * th).cos();
            },
            2,
            &ev,
            order,
            t,
        )
        .unwrap();
        let lhs = sfd_variable(&ax, 2, &ev, order, t).unwrap();
        let rhs = toeplitz_from_symbol(a_sym, order).unwrap().matrix() * xs.as_vector();
        assert!((lhs.as_vector() - rhs).camax() < 1e-11);
    }

    fn test_signal(t: f64, o: &mut [f64]) {
        o[0] = (37.0 * t).sin() + 0.3 * t;
        o[1] = (4.0 * t).cos() * (60.0 * t + 1.0).sin();
    }

    #[test]
    fn roundtrip_reconstruction() {
        let ev = ramp(50.0, 5.0);
        let pf = ev.phase.clone();
        let x = move |t: f64, o: &mut [f64]| {
            let th = pf.theta_unchecked(t);
            o[0] = th.sin() + 0.3 * (2.0 * th).cos();
        };
        let h = 1e-3;
        let times: Vec<f64> = (0..11).map(|i| 1.0 + i as f64 * h).collect();
        for order in [2, 5] {
            let traj = PhasorTrajectory::from_signal(&x, 1, &ev, order, &times).unwrap();
            for &t in &times {
                let r = reconstruct(&traj, t).unwrap();
                let mut exact = [0.0];
                x(t, &mut exact);
                assert!((r[0] - exact[0]).abs() < 1e-6, "N={order} t={t}");
            }
        }
    }

    #[test]
    fn reconstruction_of_window_jump() {
        // a signal that is not periodic in phase: the DC derivative term
        // restores the endpoint value, leaving a slowly decaying Gibbs term
        let ev = ramp(50.0, 5.0);
        let h = 1e-4;
        let times: Vec<f64> = (0..11).map(|i| 1.0 + i as f64 * h).collect();
        let mut errs = Vec::new();
        for order in [8, 32] {
            let traj = PhasorTrajectory::from_signal(&test_signal, 2, &ev, order, &times).unwrap();
            let r = reconstruct(&traj, times[5]).unwrap();
            let mut exact = [0.0; 2];
            test_signal(times[5], &mut exact);
            errs.push((r[0] - exact[0]).abs().max((r[1] - exact[1]).abs()));
        }
        assert!(errs[1] < 0.5 * errs[0], "{errs:?}");
    }

    #[test]
    fn coarse_grid_is_reported() {
        let ev = ramp(50.0, 5.0);
        let times: Vec<f64> = (0..7).map(|i| 1.0 + i as f64 * 0.05).collect();
        let traj = PhasorTrajectory::from_signal(&test_signal, 2, &ev, 4, &times).unwrap();
        assert!(matches!(reconstruct(&traj, 1.15), Err(Error::GridTooCoarse { .. })));
        assert!(reconstruct(&traj, 1.151).is_err());
    }

    #[test]
    fn coincidence_condition_holds() {
        let ev = ramp(50.0, 5.0);
        let times: Vec<f64> = (0..9).map(|i| 1.0 + i as f64 * 5e-5).collect();
        let traj = PhasorTrajectory::from_signal(&test_signal, 2, &ev, 5, &times).unwrap();
        let r = coincidence_residual(&traj).unwrap();
        assert!(r < 1e-6, "{r}");
    }

    #[test]
    fn csv_round_trip_is_bit_stable() {
        let ev = ramp(50.0, 5.0);
        let times: Vec<f64> = (0..3).map(|i| 1.0 + i as f64 * 1e-3).collect();
        let traj = PhasorTrajectory::from_signal(&test_signal, 2, &ev, 3, &times).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("traj.csv");
        traj.write_csv(&p).unwrap();
        let back = PhasorTrajectory::read_csv(&p).unwrap();
        assert_eq!(traj, back);
        let p2 = dir.path().join("again.csv");
        back.write_csv(&p2).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn scalar_symbol_from_phasors() {
        let ev = constant(10.0);
        let pf = ev.phase.clone();
        let x = move |t: f64, o: &mut [f64]| o[0] = 1.0 + (pf.theta_unchecked(t)).cos();
        let s = sfd_variable(&x, 1, &ev, 2, 0.0).unwrap().to_scalar_symbol(0);
        let t = toeplitz_from_symbol(s, 2).unwrap();
        assert!((t.matrix()[(1, 0)] - Complex64::new(0.5, 0.0)).norm() < 1e-12);
        assert!(max_abs(t.matrix()) < 1.0 + 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn linearity(a in -3.0f64..3.0, b in -3.0f64..3.0, t in 0.0f64..3.0) {
            let ev = ramp(50.0, 5.0);
            let f = |t: f64, o: &mut [f64]| o[0] = (41.0 * t).cos() + t;
            let g = |t: f64, o: &mut [f64]| o[0] = (t * 9.0).sin().powi(3);
            let comb = |t: f64, o: &mut [f64]| {
                let (mut u, mut v) = ([0.0], [0.0]);
                f(t, &mut u);
                g(t, &mut v);
                o[0] = a * u[0] + b * v[0];
            };
            let sf = sfd_variable(&f, 1, &ev, 4, t).unwrap();
            let sg = sfd_variable(&g, 1, &ev, 4, t).unwrap();
            let sc = sfd_variable(&comb, 1, &ev, 4, t).unwrap();
            let lin = sf.as_vector() * Complex64::new(a, 0.0) + sg.as_vector() * Complex64::new(b, 0.0);
            prop_assert!((sc.as_vector() - lin).camax() <= 1e-12 * (1.0 + sc.as_vector().camax()));
        }

        #[test]
        fn conjugate_symmetry(t in 0.0f64..3.0, w in 20.0f64..80.0) {
            let ev = ramp(w, 2.0);
            let s = sfd_variable(&test_signal, 2, &ev, 6, t).unwrap();
            prop_assert!(s.conjugate_symmetry_residual() <= 1e-12);
            prop_assert!(s.is_real());
        }
    }
    #[test]
    fn sampled_windows_match_quadrature() {
        let ev = ramp(30.0, 4.0);
        let x = |t: f64, o: &mut [f64]| {
            let th = ev.phase.theta(t).unwrap();
            o[0] = 2.0 + (3.0 * th + 0.2).cos() + 0.1 * t;
            o[1] = (th).sin() * (1.0 + 0.2 * t);
        };
        let dt = 1e-4;
        let times: Vec<f64> = (0..6000).map(|i| i as f64 * dt).collect();
        let theta: Vec<f64> = times.iter().map(|&t| ev.phase.theta(t).unwrap()).collect();
        let samples: Vec<[f64; 2]> = times
            .iter()
            .map(|&t| {
                let mut o = [0.0; 2];
                x(t, &mut o);
                o
            })
            .collect();
        let at = [2500, 4000, 5999];
        let got = sfd_sampled(&times, &theta, 2, |j, o: &mut [f64]| o.copy_from_slice(&samples[j]), 4, &at).unwrap();
        for (g, &i) in got.iter().zip(&at) {
            let want = sfd_variable(&x, 2, &ev, 4, times[i]).unwrap();
            assert!((g.as_vector() - want.as_vector()).camax() < 1e-5, "{}", (g.as_vector() - want.as_vector()).camax());
        }
        let err = sfd_sampled(&times, &theta, 2, |j, o: &mut [f64]| o.copy_from_slice(&samples[j]), 4, &[100]).unwrap_err();
        assert!(matches!(err, Error::WindowUnavailable { .. }));
    }

    #[test]
    fn filon_weights_branches_agree() {
        for u in [0.0099999, 0.0100001] {
            let (a, b) = filon_weights(u);
            let (c, d) = filon_weights(u * (1.0 + 1e-9));
            assert!((a - c).norm() < 1e-9 && (b - d).norm() < 1e-9);
        }
        let (a, b) = filon_weights(0.0);
        assert!((a - 0.5).norm() < 1e-15 && (b - 0.5).norm() < 1e-15);
    }

}
