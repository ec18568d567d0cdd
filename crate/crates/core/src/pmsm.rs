//! Surface-mounted PMSM under variable speed: phase-periodic model and its
//! harmonic operators, generalized Park transforms, regulated outputs,
//! the phase-periodic equilibrium, the admissible Lyapunov level and
//! closed-loop simulation with sliding harmonic spectra.
//!
//! The phase variable θ is the mechanical rotor angle; the electrical angle
//! is pθ. State x = (i_a, i_b, i_c, ω_m), input u = v_abc, disturbance Γ_L.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harmonic_model::{augment_with_forwarding, retained_indices, AfmLppSystem, AugmentedSystem};
use crate::numerics::{hermitian_extreme_eigs, rk4_step, CMatrix, CVector};
use crate::sfd::sfd_sampled;
use crate::synthesis::{PeriodicGain, SynthesisFile};
use crate::toeplitz::{Symbol, ToeplitzBlockOperator};

const TWO_PI_3: f64 = 2.0 * PI / 3.0;

/// Machine constants.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PmsmParams {
    /// Stator phase resistance, Ω.
    pub r: f64,
    /// Phase inductance, H.
    pub l: f64,
    /// Permanent-magnet flux linkage, Wb.
    pub psi_f: f64,
    /// Rotor inertia, kg·m².
    pub j: f64,
    /// Viscous friction, N·m·s/rad.
    pub b_f: f64,
    /// Pole pairs.
    pub p: u32,
}

impl Default for PmsmParams {
    fn default() -> Self {
        PmsmParams { r: 0.5, l: 1.5e-3, psi_f: 0.14, j: 0.03, b_f: 0.02, p: 4 }
    }
}

impl PmsmParams {
    pub fn validate(&self) -> Result<()> {
        let named = [("r", self.r), ("l", self.l), ("psi_f", self.psi_f), ("j", self.j), ("b_f", self.b_f)];
        for (name, v) in named {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("PMSM parameter {name} must be positive, got {v}")));
            }
        }
        if self.p == 0 {
            return Err(Error::Config("PMSM needs at least one pole pair".into()));
        }
        Ok(())
    }

    fn pf(&self) -> f64 {
        self.p as f64
    }
}

/// Φ_abc(pθ) = (sin pθ, sin(pθ − 2π/3), sin(pθ + 2π/3)).
pub fn back_emf(p: u32, theta: f64) -> [f64; 3] {
    let e = p as f64 * theta;
    [e.sin(), (e - TWO_PI_3).sin(), (e + TWO_PI_3).sin()]
}

/// (A(θ), B_u, B_w).
pub fn pmsm_state_matrices(params: &PmsmParams, theta: f64) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let phi = back_emf(params.p, theta);
    let pp = params.pf() * params.psi_f;
    let mut a = DMatrix::zeros(4, 4);
    for i in 0..3 {
        a[(i, i)] = -params.r / params.l;
        a[(i, 3)] = pp / params.l * phi[i];
        a[(3, i)] = -pp / params.j * phi[i];
    }
    a[(3, 3)] = -params.b_f / params.j;
    let mut bu = DMatrix::zeros(4, 3);
    for i in 0..3 {
        bu[(i, i)] = 1.0 / params.l;
    }
    let mut bw = DMatrix::zeros(4, 1);
    bw[(3, 0)] = -1.0 / params.j;
    (a, bu, bw)
}

/// Right-hand side of the plant at phase θ.
pub fn pmsm_rhs(params: &PmsmParams, theta: f64, x: &[f64; 4], v: &[f64; 3], load: f64) -> [f64; 4] {
    let phi = back_emf(params.p, theta);
    let pp = params.pf() * params.psi_f;
    let w = x[3];
    let mut dx = [0.0; 4];
    let mut torque = 0.0;
    for i in 0..3 {
        dx[i] = (-params.r * x[i] + pp * w * phi[i] + v[i]) / params.l;
        torque += phi[i] * x[i];
    }
    dx[3] = (-pp * torque - params.b_f * w - load) / params.j;
    dx
}

/// Generalized Park transform T_k(θ), a 2×3 matrix with the 2/3 scaling.
pub fn park_transform(k: i64, theta: f64) -> DMatrix<f64> {
    let e = k as f64 * theta;
    let mut t = DMatrix::zeros(2, 3);
    for (c, off) in [0.0, -TWO_PI_3, TWO_PI_3].into_iter().enumerate() {
        t[(0, c)] = 2.0 / 3.0 * (e + off).cos();
        t[(1, c)] = -2.0 / 3.0 * (e + off).sin();
    }
    t
}

/// Zero-common-mode right inverse of T_k(θ).
pub fn inverse_park(k: i64, theta: f64) -> DMatrix<f64> {
    park_transform(k, theta).transpose() * 1.5
}

fn dq_to_abc(p: u32, theta: f64, dq: [f64; 2]) -> [f64; 3] {
    let e = p as f64 * theta;
    let mut out = [0.0; 3];
    for (c, off) in [0.0, -TWO_PI_3, TWO_PI_3].into_iter().enumerate() {
        out[c] = (e + off).cos() * dq[0] - (e + off).sin() * dq[1];
    }
    out
}

fn abc_to_dq(p: u32, theta: f64, abc: &[f64]) -> [f64; 2] {
    let e = p as f64 * theta;
    let mut out = [0.0; 2];
    for (c, off) in [0.0, -TWO_PI_3, TWO_PI_3].into_iter().enumerate() {
        out[0] += 2.0 / 3.0 * (e + off).cos() * abc[c];
        out[1] -= 2.0 / 3.0 * (e + off).sin() * abc[c];
    }
    out
}

/// Harmonic operators of the PMSM as an AFM-LPP system (𝓐₀ = 𝓐, 𝓑₀ = 𝓑_u,
/// 𝓐₁ = 𝓑₁ = 0) together with 𝓑_w.
#[derive(Clone, Debug)]
pub struct PmsmHarmonicModel {
    pub system: AfmLppSystem,
    pub bw: ToeplitzBlockOperator,
}

pub fn pmsm_state_symbol(params: &PmsmParams) -> Symbol {
    Symbol::from_real_fn(4, 4, params.p as usize, |th| pmsm_state_matrices(params, th).0)
}

pub fn pmsm_harmonic_operators(params: &PmsmParams, order: usize, omega_range: (f64, f64)) -> Result<PmsmHarmonicModel> {
    params.validate()?;
    if order < params.p as usize {
        return Err(Error::TruncationTooSmall { order, required: params.p as usize });
    }
    let (_, bu, bw) = pmsm_state_matrices(params, 0.0);
    let system = AfmLppSystem::new(
        pmsm_state_symbol(params),
        Symbol::zeros(4, 4),
        Symbol::constant_real(&bu),
        Symbol::zeros(4, 3),
        order,
        omega_range,
    )?;
    let bw = ToeplitzBlockOperator::from_symbol(Symbol::constant_real(&bw), order)?;
    Ok(PmsmHarmonicModel { system, bw })
}

/// Rows of the regulated output C(θ): speed, d-axis current, optionally the
/// q-axis current, then both rows of T_k(θ) for every mitigated harmonic k.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSpec {
    #[serde(default)]
    pub q_axis: bool,
    pub harmonics: Vec<u32>,
}

impl Default for OutputSpec {
    fn default() -> Self {
        OutputSpec { q_axis: false, harmonics: vec![0, 2, 6, 8] }
    }
}

impl OutputSpec {
    /// Speed and d-axis regulation only.
    pub fn without_mitigation() -> Self {
        OutputSpec { q_axis: false, harmonics: Vec::new() }
    }

    pub fn rows(&self) -> usize {
        2 + self.q_axis as usize + 2 * self.harmonics.len()
    }

    /// Largest harmonic present in C(θ).
    pub fn band(&self, p: u32) -> usize {
        self.harmonics.iter().copied().chain([p]).max().unwrap_or(p) as usize
    }

    fn fill(&self, p: u32, theta: f64, c: &mut DMatrix<f64>) {
        c.fill(0.0);
        c[(0, 3)] = 1.0;
        let tp = park_transform(p as i64, theta);
        let mut row = 1;
        for col in 0..3 {
            c[(row, col)] = tp[(0, col)];
        }
        row += 1;
        if self.q_axis {
            for col in 0..3 {
                c[(row, col)] = tp[(1, col)];
            }
            row += 1;
        }
        for &k in &self.harmonics {
            let t = park_transform(k as i64, theta);
            for r in 0..2 {
                for col in 0..3 {
                    c[(row + r, col)] = t[(r, col)];
                }
            }
            row += 2;
        }
    }
}

/// C(θ), `rows × 4`.
pub fn output_matrix(p: u32, spec: &OutputSpec, theta: f64) -> DMatrix<f64> {
    let mut c = DMatrix::zeros(spec.rows(), 4);
    spec.fill(p, theta, &mut c);
    c
}

pub fn output_symbol(p: u32, spec: &OutputSpec) -> Symbol {
    Symbol::from_real_fn(spec.rows(), 4, spec.band(p), |th| output_matrix(p, spec, th))
}

/// Harmonic model augmented with ż = ω(C(θ)e) integrators (J = 0, L = I).
///
/// Speed and integrator states keep harmonics |k| ≤ `order`; the currents
/// keep |k| ≤ `order + spec.band(p)`. With a single truncation order the
/// harmonics that the output map and the pole-pair coupling pull in from
/// beyond the edge are lost, which leaves marginal modes at jmω in the
/// augmented model that no gain can move.
pub fn pmsm_augmented_system(params: &PmsmParams, order: usize, omega_range: (f64, f64), spec: &OutputSpec) -> Result<AugmentedSystem> {
    let band = spec.band(params.p);
    let full = order + band;
    let model = pmsm_harmonic_operators(params, full, omega_range)?;
    let q = spec.rows();
    let aug = augment_with_forwarding(&model.system, Symbol::zeros(q, q), Symbol::identity(q), output_symbol(params.p, spec))?;
    aug.with_component_orders(pmsm_component_orders(order, band, q))
}

/// Per-component truncation orders of the augmented PMSM state.
pub fn pmsm_component_orders(order: usize, band: usize, q: usize) -> Vec<usize> {
    let mut o = vec![order + band; 3];
    o.extend(std::iter::repeat_n(order, 1 + q));
    o
}

/// Phase-periodic load torque Γ_L(θ) = W₀ + Σ_k 2 Re(W_k e^{jkθ}).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorqueDisturbance {
    pub w0: f64,
    #[serde(default)]
    pub harmonics: Vec<TorqueHarmonic>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TorqueHarmonic {
    pub k: u32,
    pub re: f64,
    #[serde(default)]
    pub im: f64,
}

impl TorqueDisturbance {
    pub fn constant(w0: f64) -> Self {
        TorqueDisturbance { w0, harmonics: Vec::new() }
    }

    pub fn with_harmonic(mut self, k: u32, w: Complex64) -> Self {
        self.harmonics.push(TorqueHarmonic { k, re: w.re, im: w.im });
        self
    }

    /// W_k with W_{−k} = conj(W_k).
    pub fn coeff(&self, k: i64) -> Complex64 {
        if k == 0 {
            return Complex64::new(self.w0, 0.0);
        }
        let w: Complex64 = self
            .harmonics
            .iter()
            .filter(|h| h.k as i64 == k.abs())
            .map(|h| Complex64::new(h.re, h.im))
            .sum();
        if k > 0 {
            w
        } else {
            w.conj()
        }
    }

    pub fn eval(&self, theta: f64) -> f64 {
        self.w0 + self.harmonics.iter().map(|h| 2.0 * (Complex64::new(h.re, h.im) * Complex64::from_polar(1.0, h.k as f64 * theta)).re).sum::<f64>()
    }

    /// The DC part only.
    pub fn dc(&self) -> Self {
        TorqueDisturbance::constant(self.w0)
    }
}

/// H(jkω) = −1/(B_f/J + jkω).
pub fn mechanical_response(params: &PmsmParams, k: i64, omega: f64) -> Complex64 {
    -1.0 / Complex64::new(params.b_f / params.j, k as f64 * omega)
}

/// Phase-periodic equilibrium of the speed loop and the currents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumResult {
    pub params: PmsmParams,
    pub omega_ref0: f64,
    pub k_eq: usize,
    /// Ω_k for k = −K_eq..=K_eq.
    pub omegas: Vec<Complex64>,
    pub iq0: f64,
    pub iterations: usize,
    /// Largest defect of the harmonic recursion at the returned Ω.
    pub residual: f64,
}

impl EquilibriumResult {
    pub fn omega_k(&self, k: i64) -> Complex64 {
        if k.unsigned_abs() as usize > self.k_eq {
            return Complex64::new(0.0, 0.0);
        }
        self.omegas[(k + self.k_eq as i64) as usize]
    }

    /// ω_m^ref(θ) = Σ Ω_k e^{jkθ}.
    pub fn omega_m_ref(&self, theta: f64) -> f64 {
        let mut w = self.omega_k(0).re;
        for k in 1..=self.k_eq as i64 {
            w += 2.0 * (self.omega_k(k) * Complex64::from_polar(1.0, k as f64 * theta)).re;
        }
        w
    }

    pub fn i_dq_ref(&self) -> [f64; 2] {
        [0.0, self.iq0]
    }

    /// ω_m^ref as a symbol of band K_eq.
    pub fn omega_symbol(&self) -> Symbol {
        let coeffs: Vec<(i64, Complex64)> = (-(self.k_eq as i64)..=self.k_eq as i64).map(|k| (k, self.omega_k(k))).collect();
        Symbol::scalar(&coeffs)
    }
}

fn recursion_rhs(params: &PmsmParams, w: &TorqueDisturbance, omegas: &[Complex64], k_eq: i64, k: i64) -> Complex64 {
    let at = |i: i64| if i.abs() <= k_eq { omegas[(i + k_eq) as usize] } else { Complex64::new(0.0, 0.0) };
    let mut sum = Complex64::new(0.0, 0.0);
    for p in -k_eq..=k_eq {
        if p == 0 || p == k || (k - p).abs() > k_eq {
            continue;
        }
        sum += at(k - p) * at(p) * Complex64::new(0.0, p as f64);
    }
    mechanical_response(params, k, omegas[k_eq as usize].re) * (w.coeff(k) / params.j + sum)
}

/// Fixed-point iteration of Ω_k = H(jkω₀)(W_k/J + Σ_{p≠k} Ω_{k−p}Ω_p jp) from
/// Ω ≡ 0, with Ω₀ = ω₀ and I_q0 from the DC torque balance.
pub fn equilibrium_fixed_point(params: &PmsmParams, omega_ref0: f64, w: &TorqueDisturbance, k_eq: usize, tol: f64) -> Result<EquilibriumResult> {
    params.validate()?;
    if !(omega_ref0 > 0.0) {
        return Err(Error::InvalidRegime(format!("reference speed must be positive, got {omega_ref0}")));
    }
    const MAX_ITER: usize = 200;
    let ke = k_eq as i64;
    let mut omegas = vec![Complex64::new(0.0, 0.0); 2 * k_eq + 1];
    omegas[k_eq] = Complex64::new(omega_ref0, 0.0);
    let mut last_change = f64::INFINITY;
    let mut growth = 0;
    for it in 1..=MAX_ITER {
        let mut next = omegas.clone();
        for k in 1..=ke {
            let v = recursion_rhs(params, w, &omegas, ke, k);
            next[(k + ke) as usize] = v;
            next[(ke - k) as usize] = v.conj();
        }
        let change = next.iter().zip(&omegas).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        omegas = next;
        if !change.is_finite() {
            return Err(Error::FixedPointDiverged { iterations: it, residual: change });
        }
        if change < tol {
            let residual = (1..=ke).map(|k| (omegas[(k + ke) as usize] - recursion_rhs(params, w, &omegas, ke, k)).norm()).fold(0.0, f64::max);
            let iq0 = 2.0 / (3.0 * params.pf() * params.psi_f) * (w.w0 + params.b_f * omega_ref0);
            return Ok(EquilibriumResult { params: *params, omega_ref0, k_eq, omegas, iq0, iterations: it, residual });
        }
        growth = if change > last_change { growth + 1 } else { 0 };
        if growth >= 5 {
            return Err(Error::FixedPointDiverged { iterations: it, residual: change });
        }
        last_change = change;
    }
    Err(Error::FixedPointDiverged { iterations: MAX_ITER, residual: last_change })
}

/// Time-domain reference trajectories derived from an equilibrium.
#[derive(Clone, Debug, PartialEq)]
pub struct ControlReferences {
    pub eq: EquilibriumResult,
}

pub fn control_references(eq: &EquilibriumResult) -> ControlReferences {
    ControlReferences { eq: eq.clone() }
}

impl ControlReferences {
    fn params(&self) -> &PmsmParams {
        &self.eq.params
    }

    /// (v_d, v_q) from the electrical equilibrium with i_d = 0.
    pub fn v_dq(&self, theta: f64) -> [f64; 2] {
        let p = self.params();
        let w = self.eq.omega_m_ref(theta);
        let iq = self.eq.iq0;
        [-w * p.pf() * p.l * iq, p.r * iq + w * p.pf() * p.psi_f]
    }

    pub fn v_abc(&self, theta: f64) -> [f64; 3] {
        dq_to_abc(self.params().p, theta, self.v_dq(theta))
    }

    pub fn i_abc(&self, theta: f64) -> [f64; 3] {
        dq_to_abc(self.params().p, theta, self.eq.i_dq_ref())
    }

    pub fn x_ref(&self, theta: f64) -> [f64; 4] {
        let i = self.i_abc(theta);
        [i[0], i[1], i[2], self.eq.omega_m_ref(theta)]
    }

    pub fn u_ref(&self, theta: f64) -> [f64; 3] {
        self.v_abc(theta)
    }

    /// Largest Fourier coefficient of ω^ref·dx^ref/dθ − A x^ref − B_u u^ref − B_w Γ_L,
    /// the phase-domain equilibrium defect. Exact: every signal involved is
    /// band-limited and the products are formed on symbols.
    pub fn harmonic_residual(&self, load: &TorqueDisturbance) -> Result<f64> {
        let p = self.params();
        let kx = p.p as usize;
        let ku = p.p as usize + self.eq.k_eq;
        let x = Symbol::from_real_fn(4, 1, kx.max(self.eq.k_eq), |th| DMatrix::from_row_slice(4, 1, &self.x_ref(th)));
        let u = Symbol::from_real_fn(3, 1, ku, |th| DMatrix::from_row_slice(3, 1, &self.u_ref(th)));
        let wl: Vec<(i64, Complex64)> = load.harmonics.iter().flat_map(|h| [h.k as i64, -(h.k as i64)]).chain([0]).map(|k| (k, load.coeff(k))).collect();
        let (_, bu, bw) = pmsm_state_matrices(p, 0.0);
        let lhs = x.derivative().scale(Complex64::new(1.0, 0.0)).kron_scalar_mul(&self.eq.omega_symbol())?;
        let rhs = pmsm_state_symbol(p)
            .mul(&x)?
            .add(&Symbol::constant_real(&bu).mul(&u)?)?
            .add(&Symbol::constant_real(&bw).mul(&Symbol::scalar(&wl))?)?;
        let r = lhs.add(&rhs.scale(Complex64::new(-1.0, 0.0)))?;
        Ok(r.harmonics().map(|(_, m)| m.iter().map(|z| z.norm()).fold(0.0, f64::max)).fold(0.0, f64::max))
    }

    /// (θ, x^ref, u^ref) on `samples` phases of one revolution.
    pub fn write_csv(&self, path: &Path, samples: usize) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["theta", "i_a", "i_b", "i_c", "omega_m", "v_a", "v_b", "v_c", "v_d", "v_q"])?;
        for s in 0..samples {
            let th = 2.0 * PI * s as f64 / samples as f64;
            let x = self.x_ref(th);
            let u = self.u_ref(th);
            let vdq = self.v_dq(th);
            let row: Vec<String> = [th].iter().chain(&x).chain(&u).chain(&vdq).map(|v| v.to_string()).collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

trait ScalarMul {
    fn kron_scalar_mul(&self, s: &Symbol) -> Result<Symbol>;
}

impl ScalarMul for Symbol {
    /// Entrywise product with a scalar symbol.
    fn kron_scalar_mul(&self, s: &Symbol) -> Result<Symbol> {
        s.kron_identity(self.rows()).mul(self)
    }
}

/// Zero-order Fourier coefficient of the speed entry s₄₄ of 𝓢.
pub fn s44_zero(s: &ToeplitzBlockOperator) -> f64 {
    match s.symbol() {
        Some(sym) => sym.coeff(0)[(3, 3)].re,
        None => {
            let k = 2 * s.order() + 1;
            let i = 3 * k + s.order();
            s.matrix()[(i, i)].re
        }
    }
}

/// L_max = δ²/S₄₄,₀ with δ the distance from ω₀ to the nearer bound.
pub fn lyapunov_level_max(s: &ToeplitzBlockOperator, omega_ref0: f64, omega_min: f64, omega_max: f64) -> Result<f64> {
    if !(omega_min < omega_ref0 && omega_ref0 < omega_max) {
        return Err(Error::InvalidRegime(format!("reference {omega_ref0} outside ({omega_min}, {omega_max})")));
    }
    let s44 = s44_zero(s);
    if !(s44 > 0.0) {
        return Err(Error::NonPositiveS44(s44));
    }
    let delta = (omega_min - omega_ref0).abs().min((omega_max - omega_ref0).abs());
    Ok(delta * delta / s44)
}

/// Lyapunov certificate 𝓟 = 𝓢⁻¹ on the augmented harmonic state.
#[derive(Clone, Debug)]
pub struct LyapunovData {
    /// 𝓟 on the retained harmonics.
    pub p: CMatrix,
    pub order: usize,
    pub s44_0: f64,
    /// Positions of the retained harmonics in the full component-major layout.
    pub retained: Vec<usize>,
    n: usize,
}

impl LyapunovData {
    /// `orders` gives the truncation order of each state component (empty
    /// means `s.order()` everywhere).
    pub fn from_s(s: &ToeplitzBlockOperator, orders: &[usize]) -> Result<Self> {
        let order = s.order();
        let n = s.block_dims().0;
        let orders = if orders.is_empty() { vec![order; n] } else { orders.to_vec() };
        if orders.len() != n || orders.iter().any(|&o| o > order) {
            return Err(Error::DimensionMismatch(format!("component orders {orders:?} for {n} components of order {order}")));
        }
        let retained = retained_indices(&orders, order);
        let sr = CMatrix::from_fn(retained.len(), retained.len(), |a, b| s.matrix()[(retained[a], retained[b])]);
        let lo = hermitian_extreme_eigs(&sr).0;
        let chol = nalgebra::Cholesky::new(sr).ok_or(Error::PosdefCheckFailed { min_eig: lo, threshold: 0.0 })?;
        Ok(LyapunovData { p: chol.inverse(), order, s44_0: s44_zero(s), retained, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// V for an error that was constant over the last window: only the DC
    /// phasors are nonzero.
    pub fn value_of_constant(&self, e: &[f64]) -> f64 {
        let k = 2 * self.order + 1;
        let idx: Vec<usize> = (0..e.len()).map(|i| self.retained.partition_point(|&r| r < i * k + self.order)).collect();
        let mut v = 0.0;
        for (a, &ia) in idx.iter().enumerate() {
            for (b, &ib) in idx.iter().enumerate() {
                v += e[a] * e[b] * self.p[(ia, ib)].re;
            }
        }
        v
    }

    pub fn value(&self, phasors: &crate::sfd::PhasorSequence) -> f64 {
        let full = phasors.as_vector();
        let x = CVector::from_iterator(self.retained.len(), self.retained.iter().map(|&i| full[i]));
        (x.adjoint() * &self.p * x)[(0, 0)].re
    }

    pub fn level_max(&self, omega_ref0: f64, range: (f64, f64)) -> f64 {
        let delta = (range.0 - omega_ref0).abs().min((range.1 - omega_ref0).abs());
        delta * delta / self.s44_0
    }
}

/// Step of the DC speed reference at time `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceStep {
    pub t: f64,
    pub omega_ref0: f64,
}

/// Closed-loop scenario: the plant sees `load`, the references are built
/// from `feedforward_load`.
#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub params: PmsmParams,
    pub load: TorqueDisturbance,
    pub feedforward_load: TorqueDisturbance,
    pub schedule: Vec<ReferenceStep>,
    /// x(t₀) − x^ref(θ₀).
    pub initial_error: [f64; 4],
    /// z(t₀); empty means zero.
    pub z0: Vec<f64>,
    pub theta0: f64,
    pub t_end: f64,
}

#[derive(Clone, Debug)]
pub struct Controller {
    /// [K_x K_z], 3 × (4 + q).
    pub gain: PeriodicGain,
    pub output: OutputSpec,
    pub lyapunov: Option<LyapunovData>,
    pub omega_range: (f64, f64),
}

impl Controller {
    /// Controller from a stored PMSM synthesis with output map `output`.
    pub fn from_synthesis(file: &SynthesisFile, output: OutputSpec, omega_range: (f64, f64)) -> Result<Self> {
        let gain = file.gain()?;
        if gain.symbol.cols() != 4 + output.rows() || gain.symbol.rows() != 3 {
            return Err(Error::DimensionMismatch(format!(
                "gain is {}x{}, output map needs 3x{}",
                gain.symbol.rows(),
                gain.symbol.cols(),
                4 + output.rows()
            )));
        }
        let lyapunov = LyapunovData::from_s(&file.s_operator()?, &file.component_orders)?;
        Ok(Controller { gain, output, lyapunov: Some(lyapunov), omega_range })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationOptions {
    pub dt: f64,
    /// Record every this many steps.
    pub record_stride: usize,
    /// Evaluate V every this many records.
    pub v_stride: usize,
    pub k_eq: usize,
    pub eq_tol: f64,
    pub blowup_norm: f64,
}

impl Default for SimulationOptions {
    fn default() -> Self {
        SimulationOptions { dt: 2e-5, record_stride: 1, v_stride: 10, k_eq: 4, eq_tol: 1e-10, blowup_norm: 1e6 }
    }
}

/// Real-coefficient form K(θ) = K₀ + Σ_{h>0} (2Re K_h cos hθ − 2Im K_h sin hθ).
#[derive(Clone, Debug)]
struct FastGain {
    rows: usize,
    cols: usize,
    /// (h, cos coefficients, sin coefficients), row-major.
    terms: Vec<(usize, Vec<f64>, Vec<f64>)>,
}

impl FastGain {
    fn new(g: &PeriodicGain) -> Result<Self> {
        let (rows, cols) = (g.rows(), g.cols());
        let scale = g.symbol.harmonics().map(|(_, m)| m.iter().map(|z| z.norm()).fold(0.0, f64::max)).fold(0.0, f64::max);
        let mut terms = Vec::new();
        for h in 0..=g.symbol.band() as i64 {
            let kp = g.symbol.coeff(h);
            let km = g.symbol.coeff(-h);
            if (&kp - km.map(|z| z.conj())).iter().any(|z| z.norm() > 1e-9 * scale.max(1e-300)) {
                return Err(Error::InvalidRegime(format!("gain harmonic {h} is not conjugate-symmetric, K(θ) would be complex")));
            }
            let f = if h == 0 { 1.0 } else { 2.0 };
            let c: Vec<f64> = (0..rows * cols).map(|i| f * kp[(i / cols, i % cols)].re).collect();
            let s: Vec<f64> = (0..rows * cols).map(|i| -f * kp[(i / cols, i % cols)].im).collect();
            if c.iter().chain(&s).any(|v| *v != 0.0) {
                terms.push((h as usize, c, s));
            }
        }
        Ok(FastGain { rows, cols, terms })
    }

    /// out −= K(θ) x
    fn apply_sub(&self, theta: f64, x: &[f64], out: &mut [f64]) {
        for (h, c, s) in &self.terms {
            let (sn, cs) = (*h as f64 * theta).sin_cos();
            for r in 0..self.rows {
                let mut acc = 0.0;
                for j in 0..self.cols {
                    acc += (c[r * self.cols + j] * cs + s[r * self.cols + j] * sn) * x[j];
                }
                out[r] -= acc;
            }
        }
    }
}

/// Sampled closed-loop trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopTrace {
    pub p: u32,
    pub t: Vec<f64>,
    pub theta: Vec<f64>,
    /// (i_a, i_b, i_c, ω_m)
    pub x: Vec<[f64; 4]>,
    pub z: Vec<Vec<f64>>,
    pub v: Vec<[f64; 3]>,
    pub x_ref: Vec<[f64; 4]>,
    pub omega_ref0: Vec<f64>,
    pub load: Vec<f64>,
    /// V(Ẽ), NaN where not evaluated.
    pub lyapunov: Vec<f64>,
    /// NaN without a certificate.
    pub l_max: Vec<f64>,
}

impl ClosedLoopTrace {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn q(&self) -> usize {
        self.z.first().map_or(0, |z| z.len())
    }

    pub fn i_dq(&self, i: usize) -> [f64; 2] {
        abc_to_dq(self.p, self.theta[i], &self.x[i][..3])
    }

    /// Largest V/L_max over evaluated samples.
    pub fn max_level_ratio(&self) -> f64 {
        self.lyapunov.iter().zip(&self.l_max).filter(|(v, l)| v.is_finite() && l.is_finite()).map(|(v, l)| v / l).fold(f64::NAN, f64::max)
    }

    pub fn omega_extremes(&self) -> (f64, f64) {
        self.x.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x[3]), hi.max(x[3])))
    }

    fn header(q: usize) -> Vec<String> {
        let mut h: Vec<String> = ["t", "theta", "i_a", "i_b", "i_c", "omega_m"].iter().map(|s| s.to_string()).collect();
        h.extend((0..q).map(|i| format!("z_{i}")));
        h.extend(
            ["v_a", "v_b", "v_c", "i_d", "i_q", "i_a_ref", "i_b_ref", "i_c_ref", "omega_m_ref", "omega_ref0", "gamma_l", "V", "L_max"]
                .iter()
                .map(|s| s.to_string()),
        );
        h
    }

    /// One row per record; floats in shortest round-trip form.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(Self::header(self.q()))?;
        for i in 0..self.len() {
            let dq = self.i_dq(i);
            let mut row: Vec<f64> = vec![self.t[i], self.theta[i]];
            row.extend(self.x[i]);
            row.extend(&self.z[i]);
            row.extend(self.v[i]);
            row.extend(dq);
            row.extend(self.x_ref[i]);
            row.extend([self.omega_ref0[i], self.load[i], self.lyapunov[i], self.l_max[i]]);
            w.write_record(row.iter().map(|v| v.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path, p: u32) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let q = header.iter().filter(|h| h.starts_with("z_")).count();
        if header.iter().collect::<Vec<_>>() != Self::header(q) {
            return Err(Error::Format("unexpected trace columns".into()));
        }
        let mut tr = ClosedLoopTrace {
            p,
            t: Vec::new(),
            theta: Vec::new(),
            x: Vec::new(),
            z: Vec::new(),
            v: Vec::new(),
            x_ref: Vec::new(),
            omega_ref0: Vec::new(),
            load: Vec::new(),
            lyapunov: Vec::new(),
            l_max: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec?;
            let v: Vec<f64> = rec.iter().map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))).collect::<Result<_>>()?;
            tr.t.push(v[0]);
            tr.theta.push(v[1]);
            tr.x.push([v[2], v[3], v[4], v[5]]);
            tr.z.push(v[6..6 + q].to_vec());
            let o = 6 + q;
            tr.v.push([v[o], v[o + 1], v[o + 2]]);
            tr.x_ref.push([v[o + 5], v[o + 6], v[o + 7], v[o + 8]]);
            tr.omega_ref0.push(v[o + 9]);
            tr.load.push(v[o + 10]);
            tr.lyapunov.push(v[o + 11]);
            tr.l_max.push(v[o + 12]);
        }
        Ok(tr)
    }
}

struct ActiveReference {
    start: f64,
    omega_ref0: f64,
    refs: ControlReferences,
}

/// Integrates plant, integrators ż = ω_m C(θ)(x − x^ref) and the law
/// u = u^ref − K_x(θ)(x − x^ref) − K_z(θ)z with ω = ω_m and θ̇ = ω_m.
pub fn simulate_closed_loop(scenario: &Scenario, controller: &Controller, opts: &SimulationOptions) -> Result<ClosedLoopTrace> {
    let params = scenario.params;
    params.validate()?;
    let q = controller.output.rows();
    if controller.gain.rows() != 3 || controller.gain.cols() != 4 + q {
        return Err(Error::DimensionMismatch(format!(
            "gain is {}x{}, expected 3x{} for {q} regulated outputs",
            controller.gain.rows(),
            controller.gain.cols(),
            4 + q
        )));
    }
    if scenario.schedule.is_empty() {
        return Err(Error::Config("reference schedule is empty".into()));
    }
    if scenario.schedule.windows(2).any(|w| !(w[1].t > w[0].t)) {
        return Err(Error::Config("reference step times must be strictly increasing".into()));
    }
    if !(opts.dt > 0.0) || opts.record_stride == 0 || opts.v_stride == 0 {
        return Err(Error::Config("dt and strides must be positive".into()));
    }
    if !scenario.z0.is_empty() && scenario.z0.len() != q {
        return Err(Error::DimensionMismatch(format!("z0 has {} entries, expected {q}", scenario.z0.len())));
    }
    let mut active = Vec::new();
    for step in &scenario.schedule {
        let eq = equilibrium_fixed_point(&params, step.omega_ref0, &scenario.feedforward_load, opts.k_eq, opts.eq_tol)?;
        active.push(ActiveReference { start: step.t, omega_ref0: step.omega_ref0, refs: control_references(&eq) });
    }
    let pick = |t: f64| {
        let i = active.partition_point(|a| a.start <= t).saturating_sub(1);
        &active[i]
    };
    let gain = FastGain::new(&controller.gain)?;
    let spec = controller.output.clone();
    let nz = 4 + q;

    let t0 = scenario.schedule[0].t;
    let xr0 = pick(t0).refs.x_ref(scenario.theta0);
    let mut y = vec![0.0; 5 + q];
    for i in 0..4 {
        y[i] = xr0[i] + scenario.initial_error[i];
    }
    y[4] = scenario.theta0;
    if !scenario.z0.is_empty() {
        y[5..].copy_from_slice(&scenario.z0);
    }

    let control = |t: f64, y: &[f64], e: &mut [f64], v: &mut [f64; 3]| {
        let a = pick(t);
        let th = y[4];
        let xr = a.refs.x_ref(th);
        for i in 0..4 {
            e[i] = y[i] - xr[i];
        }
        e[4..nz].copy_from_slice(&y[5..5 + q]);
        *v = a.refs.u_ref(th);
        gain.apply_sub(th, &e[..nz], v);
        xr
    };
    let rhs = |t: f64, y: &[f64], dy: &mut [f64]| {
        let mut e = [0.0; 64];
        let mut v = [0.0; 3];
        control(t, y, &mut e, &mut v);
        let th = y[4];
        let x = [y[0], y[1], y[2], y[3]];
        let dx = pmsm_rhs(&params, th, &x, &v, scenario.load.eval(th));
        dy[..4].copy_from_slice(&dx);
        dy[4] = y[3];
        let mut c = DMatrix::zeros(q, 4);
        spec.fill(params.p, th, &mut c);
        for r in 0..q {
            dy[5 + r] = y[3] * (0..4).map(|j| c[(r, j)] * e[j]).sum::<f64>();
        }
    };
    if nz > 64 {
        return Err(Error::Config(format!("{q} regulated outputs exceed the simulator limit")));
    }

    let steps = ((scenario.t_end - t0) / opts.dt).round().max(0.0) as usize;
    let cap = steps / opts.record_stride + 1;
    let mut tr = ClosedLoopTrace {
        p: params.p,
        t: Vec::with_capacity(cap),
        theta: Vec::with_capacity(cap),
        x: Vec::with_capacity(cap),
        z: Vec::with_capacity(cap),
        v: Vec::with_capacity(cap),
        x_ref: Vec::with_capacity(cap),
        omega_ref0: Vec::with_capacity(cap),
        load: Vec::with_capacity(cap),
        lyapunov: Vec::new(),
        l_max: Vec::with_capacity(cap),
    };
    let record = |t: f64, y: &[f64], tr: &mut ClosedLoopTrace| {
        let mut e = [0.0; 64];
        let mut v = [0.0; 3];
        let xr = control(t, y, &mut e, &mut v);
        let a = pick(t);
        tr.t.push(t);
        tr.theta.push(y[4]);
        tr.x.push([y[0], y[1], y[2], y[3]]);
        tr.z.push(y[5..].to_vec());
        tr.v.push(v);
        tr.x_ref.push(xr);
        tr.omega_ref0.push(a.omega_ref0);
        tr.load.push(scenario.load.eval(y[4]));
        tr.l_max.push(match &controller.lyapunov {
            Some(l) => l.level_max(a.omega_ref0, controller.omega_range),
            None => f64::NAN,
        });
    };
    record(t0, &y, &mut tr);
    let mut work: [Vec<f64>; 5] = Default::default();
    for s in 1..=steps {
        let t = t0 + (s - 1) as f64 * opts.dt;
        rk4_step(&rhs, t, &mut y, opts.dt, &mut work);
        let norm = y.iter().enumerate().filter(|(i, _)| *i != 4).map(|(_, v)| v * v).sum::<f64>().sqrt();
        if !(norm <= opts.blowup_norm) {
            return Err(Error::IntegrationBlewUp { t: t + opts.dt, norm });
        }
        if s % opts.record_stride == 0 {
            record(t0 + s as f64 * opts.dt, &y, &mut tr);
        }
    }
    tr.lyapunov = vec![f64::NAN; tr.len()];
    if let Some(l) = &controller.lyapunov {
        fill_lyapunov(&mut tr, l, opts.v_stride);
    }
    Ok(tr)
}

/// V(Ẽ) from sliding phasors of (x − x^ref, z) on every `stride`-th record
/// after the first full window. Left NaN where the phase is not increasing.
fn fill_lyapunov(tr: &mut ClosedLoopTrace, l: &LyapunovData, stride: usize) {
    if tr.len() < 2 || tr.theta.windows(2).any(|w| !(w[1] > w[0])) || l.dim() != 4 + tr.q() {
        return;
    }
    let first = tr.theta.partition_point(|&th| th < tr.theta[0] + 2.0 * PI);
    let at: Vec<usize> = (first..tr.len()).step_by(stride).collect();
    let q = tr.q();
    let signal = |j: usize, out: &mut [f64]| {
        for (i, o) in out[..4].iter_mut().enumerate() {
            *o = tr.x[j][i] - tr.x_ref[j][i];
        }
        out[4..4 + q].copy_from_slice(&tr.z[j]);
    };
    if let Ok(ph) = sfd_sampled(&tr.t, &tr.theta, 4 + q, signal, l.order, &at) {
        for (i, seq) in at.iter().zip(&ph) {
            tr.lyapunov[*i] = l.value(seq);
        }
    }
}

/// Sliding harmonic magnitudes |X_k|, k = 0..=k_max, of i_a, i_d, i_q, ω_m,
/// Γ_L and v_a along a trace.
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonicSpectra {
    pub k_max: usize,
    pub times: Vec<f64>,
    pub names: Vec<String>,
    /// magnitudes[signal][sample][k]
    pub magnitudes: Vec<Vec<Vec<f64>>>,
}

pub const SPECTRUM_SIGNALS: [&str; 6] = ["i_a", "i_d", "i_q", "omega_m", "gamma_l", "v_a"];

impl HarmonicSpectra {
    pub fn signal(&self, name: &str) -> Option<&Vec<Vec<f64>>> {
        self.names.iter().position(|n| n == name).map(|i| &self.magnitudes[i])
    }

    /// |X_k| of `name` at the last sample.
    pub fn last(&self, name: &str, k: usize) -> Option<f64> {
        self.signal(name).and_then(|s| s.last()).map(|row| row[k])
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string()];
        for n in &self.names {
            header.extend((0..=self.k_max).map(|k| format!("{n}_k{k}")));
        }
        w.write_record(&header)?;
        for (i, t) in self.times.iter().enumerate() {
            let mut row = vec![t.to_string()];
            for s in &self.magnitudes {
                row.extend(s[i].iter().map(|v| v.to_string()));
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        let cols: Vec<&str> = header.iter().skip(1).collect();
        let k_max = cols.iter().filter_map(|c| c.rsplit_once("_k")).filter_map(|(_, k)| k.parse::<usize>().ok()).max().unwrap_or(0);
        let mut names: Vec<String> = Vec::new();
        for c in &cols {
            let (n, _) = c.rsplit_once("_k").ok_or_else(|| Error::Format(format!("bad spectrum column {c:?}")))?;
            if names.last().map(|s| s.as_str()) != Some(n) {
                names.push(n.to_string());
            }
        }
        if cols.len() != names.len() * (k_max + 1) {
            return Err(Error::Format("spectrum columns are not rectangular".into()));
        }
        let mut out = HarmonicSpectra { k_max, times: Vec::new(), names: names.clone(), magnitudes: vec![Vec::new(); names.len()] };
        for rec in r.records() {
            let rec = rec?;
            let v: Vec<f64> = rec.iter().map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("bad number {s:?}: {e}")))).collect::<Result<_>>()?;
            out.times.push(v[0]);
            for (i, chunk) in v[1..].chunks(k_max + 1).enumerate() {
                out.magnitudes[i].push(chunk.to_vec());
            }
        }
        Ok(out)
    }
}

/// Sliding spectra on every `stride`-th record after the first full window.
pub fn harmonic_spectrum(tr: &ClosedLoopTrace, k_max: usize, stride: usize) -> Result<HarmonicSpectra> {
    if tr.is_empty() {
        return Err(Error::WindowUnavailable { t: f64::NAN });
    }
    let first = tr.theta.partition_point(|&th| th < tr.theta[0] + 2.0 * PI);
    if first >= tr.len() {
        return Err(Error::WindowUnavailable { t: *tr.t.last().unwrap() });
    }
    let at: Vec<usize> = (first..tr.len()).step_by(stride.max(1)).collect();
    let signal = |j: usize, out: &mut [f64]| {
        let dq = tr.i_dq(j);
        out.copy_from_slice(&[tr.x[j][0], dq[0], dq[1], tr.x[j][3], tr.load[j], tr.v[j][0]]);
    };
    let ph = sfd_sampled(&tr.t, &tr.theta, SPECTRUM_SIGNALS.len(), signal, k_max, &at)?;
    let mut magnitudes = vec![Vec::with_capacity(at.len()); SPECTRUM_SIGNALS.len()];
    for seq in &ph {
        for (s, m) in magnitudes.iter_mut().enumerate() {
            m.push((0..=k_max).map(|k| seq.get(s, k as i64).norm()).collect());
        }
    }
    Ok(HarmonicSpectra { k_max, times: at.iter().map(|&i| tr.t[i]).collect(), names: SPECTRUM_SIGNALS.iter().map(|s| s.to_string()).collect(), magnitudes })
}

/// Floquet exponents of ẋ = A(ωt)x at constant ω from the monodromy matrix,
/// imaginary parts folded into (−ω/2, ω/2].
pub fn floquet_exponents(params: &PmsmParams, omega: f64, steps: usize) -> Vec<Complex64> {
    let period = 2.0 * PI / omega;
    let h = period / steps as f64;
    let f = |t: f64, y: &[f64], dy: &mut [f64]| {
        let (a, _, _) = pmsm_state_matrices(params, omega * t);
        for c in 0..4 {
            for r in 0..4 {
                dy[c * 4 + r] = (0..4).map(|k| a[(r, k)] * y[c * 4 + k]).sum();
            }
        }
    };
    let mut y: Vec<f64> = DMatrix::<f64>::identity(4, 4).as_slice().to_vec();
    let mut work: [Vec<f64>; 5] = Default::default();
    for s in 0..steps {
        rk4_step(&f, s as f64 * h, &mut y, h, &mut work);
    }
    let m = DMatrix::from_column_slice(4, 4, &y);
    m.complex_eigenvalues().iter().map(|l| fold(l.ln() / period, omega)).collect()
}

fn fold(z: Complex64, omega: f64) -> Complex64 {
    let im = z.im - omega * ((z.im / omega) + 0.5).floor();
    let im = if im <= -0.5 * omega { im + omega } else { im };
    Complex64::new(z.re, im)
}

/// Eigenvalues of the truncated 𝓐 − ω𝓝 with imaginary parts folded like the
/// Floquet exponents.
pub fn harmonic_exponents(params: &PmsmParams, order: usize, omega: f64) -> Result<Vec<Complex64>> {
    let model = pmsm_harmonic_operators(params, order, (0.5 * omega, 2.0 * omega))?;
    let a = model.system.vertex_state(omega);
    let ev = a.schur().eigenvalues().ok_or_else(|| Error::SolverFailure("Schur decomposition did not converge".into()))?;
    Ok(ev.iter().map(|&l| fold(l, omega)).collect())
}

/// Largest distance from each Floquet exponent to the nearest folded
/// harmonic eigenvalue.
pub fn floquet_mismatch(params: &PmsmParams, order: usize, omega: f64) -> Result<f64> {
    let fl = floquet_exponents(params, omega, 4000);
    let hm = harmonic_exponents(params, order, omega)?;
    Ok(fl.iter().map(|f| hm.iter().map(|h| (f - h).norm()).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max))
}

/// Default weights 𝓠 = q·I on the augmented state and 𝓡 = r·I on the input.
pub fn pmsm_weights(n_aug: usize, q: f64, r: f64) -> (Symbol, Symbol) {
    (Symbol::identity(n_aug).scale(Complex64::new(q, 0.0)), Symbol::identity(3).scale(Complex64::new(r, 0.0)))
}

/// V of a constant initial error in direction `dir` scaled to `level`.
pub fn scale_to_level(l: &LyapunovData, dir: &[f64], level: f64) -> Vec<f64> {
    let v = l.value_of_constant(dir);
    let s = (level / v).sqrt();
    dir.iter().map(|d| d * s).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::max_abs;
    use proptest::prelude::*;

    fn reference_machine() -> PmsmParams {
        PmsmParams::default()
    }

    #[test]
    fn back_emf_at_zero() {
        let phi = back_emf(4, 0.0);
        assert_eq!(phi[0], 0.0);
        assert!((phi[1] + 3f64.sqrt() / 2.0).abs() < 1e-15);
        assert!((phi[2] - 3f64.sqrt() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn state_matrix_entries() {
        let (a, bu, bw) = pmsm_state_matrices(&reference_machine(), 0.3);
        assert!((a[(0, 0)] + 333.3333333333333).abs() < 1e-9);
        assert_eq!(bu[(1, 1)], 1.0 / 1.5e-3);
        assert_eq!(bw[(3, 0)], -1.0 / 0.03);
        let (a2, _, _) = pmsm_state_matrices(&reference_machine(), 0.3 + 2.0 * PI / 4.0);
        assert!((a - a2).amax() < 1e-9);
    }

    #[test]
    fn park_rows_and_common_mode() {
        let t = park_transform(4, 0.0);
        assert!((t[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
        assert!((t[(0, 1)] + 1.0 / 3.0).abs() < 1e-15 && (t[(0, 2)] + 1.0 / 3.0).abs() < 1e-15);
        for th in [0.1, 1.0, 2.5] {
            for k in [0, 2, 4, 6] {
                let s = park_transform(k, th) * nalgebra::DVector::from_element(3, 1.7);
                if k != 0 {
                    assert!(s.amax() < 1e-14);
                }
            }
            let tinv = park_transform(4, th) * inverse_park(4, th);
            assert!((tinv - DMatrix::identity(2, 2)).amax() < 1e-14);
        }
    }

    #[test]
    fn park_of_rotating_currents_is_constant() {
        let (id, iq) = (0.3, 2.0);
        for s in 0..50 {
            let th = s as f64 * 0.13;
            let i = dq_to_abc(4, th, [id, iq]);
            let dq = park_transform(4, th) * nalgebra::DVector::from_column_slice(&i);
            assert!((dq[0] - id).abs() < 1e-13 && (dq[1] - iq).abs() < 1e-13);
        }
    }

    #[test]
    fn harmonic_operator_structure() {
        let p = reference_machine();
        let m = pmsm_harmonic_operators(&p, 8, (10.0, 200.0)).unwrap();
        assert_eq!(m.system.a0().matrix().nrows(), 4 * 17);
        let sym = m.system.symbols()[0];
        let harmonics: Vec<i64> = sym.harmonics().filter(|(_, c)| max_abs(c) > 0.0).map(|(h, _)| h).collect();
        assert_eq!(harmonics, vec![-4, 0, 4]);
        // Φ_a entry at (0, 3): coefficient −j/2 at +p, +j/2 at −p, scaled by pψ/L
        let scale = 4.0 * 0.14 / 1.5e-3;
        assert!((sym.coeff(4)[(0, 3)] - Complex64::new(0.0, -0.5 * scale)).norm() < 1e-9);
        assert!((sym.coeff(-4)[(0, 3)] - Complex64::new(0.0, 0.5 * scale)).norm() < 1e-9);
        assert!(matches!(pmsm_harmonic_operators(&p, 3, (10.0, 200.0)), Err(Error::TruncationTooSmall { order: 3, required: 4 })));
    }

    #[test]
    fn output_rows() {
        let spec = OutputSpec::default();
        assert_eq!(spec.rows(), 10);
        let c = output_matrix(4, &spec, 0.77);
        assert_eq!(c.row(0).iter().cloned().collect::<Vec<_>>(), vec![0.0, 0.0, 0.0, 1.0]);
        // the T_0 rows do not depend on θ
        assert!((c.rows(2, 2) - output_matrix(4, &spec, 2.0).rows(2, 2)).amax() < 1e-15);
        assert_eq!(output_symbol(4, &spec).band(), 8);
        assert_eq!(OutputSpec { q_axis: true, ..OutputSpec::default() }.rows(), 11);
        assert_eq!(output_symbol(4, &OutputSpec::without_mitigation()).band(), 4);
    }

    #[test]
    fn equilibrium_without_ripple() {
        let eq = equilibrium_fixed_point(&reference_machine(), 100.0, &TorqueDisturbance::constant(1.0), 4, 1e-10).unwrap();
        assert!((eq.iq0 - 2.0 / (3.0 * 4.0 * 0.14) * 3.0).abs() < 1e-12);
        assert!((eq.iq0 - 3.571).abs() < 1e-3);
        for k in 1..=4 {
            assert_eq!(eq.omega_k(k), Complex64::new(0.0, 0.0));
        }
        let refs = control_references(&eq);
        let vq = refs.v_dq(0.4)[1];
        assert!((vq - (0.5 * eq.iq0 + 100.0 * 4.0 * 0.14)).abs() < 1e-12);
        assert!((vq - 57.79).abs() < 5e-3);
    }

    #[test]
    fn equilibrium_diverges_for_light_rotor_and_large_ripple() {
        let params = PmsmParams { j: 1e-4, b_f: 1e-6, ..reference_machine() };
        let w = TorqueDisturbance::constant(0.0).with_harmonic(1, Complex64::new(50.0, 0.0));
        let err = equilibrium_fixed_point(&params, 1.0, &w, 4, 1e-10).unwrap_err();
        assert!(matches!(err, Error::FixedPointDiverged { .. }), "{err:?}");
    }

    #[test]
    fn equilibrium_with_second_harmonic() {
        let p = reference_machine();
        let w = TorqueDisturbance::constant(1.0).with_harmonic(2, Complex64::new(0.5, 0.0));
        let eq = equilibrium_fixed_point(&p, 100.0, &w, 4, 1e-10).unwrap();
        let first = mechanical_response(&p, 2, 100.0) * 0.5 / p.j;
        assert!((first.norm() - 0.0833).abs() < 1e-4);
        assert!((eq.omega_k(2) - first).norm() / first.norm() < 1e-4);
        assert!(eq.iterations <= 20);
        assert!(eq.residual < 1e-10);
        assert_eq!(eq.omega_k(-2), eq.omega_k(2).conj());
        let res = control_references(&eq).harmonic_residual(&w).unwrap();
        // products landing beyond K_eq are truncated
        assert!(res < 1e-4, "residual {res}");
    }

    #[test]
    fn level_max_basics() {
        let s = ToeplitzBlockOperator::identity(5, 2);
        assert!((lyapunov_level_max(&s, 105.0, 10.0, 200.0).unwrap() - 95.0 * 95.0).abs() < 1e-9);
        assert!((lyapunov_level_max(&s, 50.0, 10.0, 200.0).unwrap() - 1600.0).abs() < 1e-9);
        let bad = ToeplitzBlockOperator::from_symbol(Symbol::identity(5).scale(Complex64::new(-1.0, 0.0)), 2).unwrap();
        assert!(matches!(lyapunov_level_max(&bad, 50.0, 10.0, 200.0), Err(Error::NonPositiveS44(_))));
    }

    #[test]
    fn floquet_matches_harmonic_spectrum() {
        let err = floquet_mismatch(&reference_machine(), 8, 100.0).unwrap();
        assert!(err < 1e-3, "mismatch {err}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn energy_is_nonincreasing(i0 in prop::array::uniform3(-5.0f64..5.0), w0 in 1.0f64..100.0, th0 in 0.0f64..6.0) {
            let p = reference_machine();
            let energy = |x: &[f64]| 0.5 * p.l * (x[0] * x[0] + x[1] * x[1] + x[2] * x[2]) + 0.5 * p.j * x[3] * x[3];
            let f = |_t: f64, y: &[f64], dy: &mut [f64]| {
                let dx = pmsm_rhs(&p, y[4], &[y[0], y[1], y[2], y[3]], &[0.0; 3], 0.0);
                dy[..4].copy_from_slice(&dx);
                dy[4] = y[3];
            };
            let mut y = vec![i0[0], i0[1], i0[2], w0, th0];
            let mut work: [Vec<f64>; 5] = Default::default();
            let mut e = energy(&y);
            for s in 0..2000 {
                rk4_step(&f, s as f64 * 2e-5, &mut y, 2e-5, &mut work);
                let en = energy(&y);
                prop_assert!(en <= e * (1.0 + 1e-9));
                e = en;
            }
        }

        #[test]
        fn matrices_are_phase_periodic(th in -10.0f64..10.0) {
            let p = reference_machine();
            let (a, _, _) = pmsm_state_matrices(&p, th);
            let (b, _, _) = pmsm_state_matrices(&p, th + 2.0 * PI);
            prop_assert!((a - b).amax() < 1e-9);
            let c = output_matrix(4, &OutputSpec::default(), th) - output_matrix(4, &OutputSpec::default(), th + 2.0 * PI);
            prop_assert!(c.amax() < 1e-12);
        }
    }

    fn zero_controller(q: usize, lyap: Option<LyapunovData>) -> Controller {
        let spec = if q == 0 { OutputSpec::without_mitigation() } else { OutputSpec::default() };
        Controller { gain: PeriodicGain::from_symbol(Symbol::zeros(3, 4 + spec.rows())), output: spec, lyapunov: lyap, omega_range: (10.0, 200.0) }
    }

    fn scenario(load: TorqueDisturbance, t_end: f64) -> Scenario {
        Scenario {
            params: reference_machine(),
            feedforward_load: load.clone(),
            load,
            schedule: vec![ReferenceStep { t: 0.0, omega_ref0: 100.0 }],
            initial_error: [0.0; 4],
            z0: Vec::new(),
            theta0: 0.0,
            t_end,
        }
    }

    #[test]
    fn equilibrium_start_stays_put() {
        let sc = scenario(TorqueDisturbance::constant(1.0), 0.2);
        let tr = simulate_closed_loop(&sc, &zero_controller(0, None), &SimulationOptions::default()).unwrap();
        let last = tr.len() - 1;
        let drift = (0..4).map(|i| (tr.x[last][i] - tr.x_ref[last][i]).abs()).fold(0.0, f64::max);
        assert!(drift < 1e-8 * 0.2, "drift {drift}");
        assert!(tr.z[last].iter().all(|z| z.abs() < 1e-8));
    }

    #[test]
    fn open_loop_voltage_drive_settles_at_iq0() {
        let mut sc = scenario(TorqueDisturbance::constant(1.0), 6.0);
        sc.initial_error = [1.0, -0.5, -0.5, -5.0];
        let opts = SimulationOptions { dt: 5e-5, ..SimulationOptions::default() };
        let tr = simulate_closed_loop(&sc, &zero_controller(0, None), &opts).unwrap();
        let iq = tr.i_dq(tr.len() - 1)[1];
        let eq = equilibrium_fixed_point(&reference_machine(), 100.0, &TorqueDisturbance::constant(1.0), 4, 1e-10).unwrap();
        assert!((iq - eq.iq0).abs() / eq.iq0 < 1e-3, "iq {iq} vs {}", eq.iq0);
    }

    #[test]
    fn spectrum_of_steady_state() {
        let sc = scenario(TorqueDisturbance::constant(1.0), 0.2);
        let tr = simulate_closed_loop(&sc, &zero_controller(0, None), &SimulationOptions::default()).unwrap();
        let sp = harmonic_spectrum(&tr, 8, 100).unwrap();
        let ia = sp.signal("i_a").unwrap().last().unwrap();
        // i_a = −i_q sin(4θ): one line at k = 4 of size i_q/2
        assert!((ia[4] / (0.5 * 3.5714285714) - 1.0).abs() < 1e-5, "{ia:?}");
        assert!(ia.iter().enumerate().filter(|(k, _)| *k != 4).all(|(_, v)| *v < 1e-6));
        let w = sp.signal("omega_m").unwrap().last().unwrap();
        assert!((w[0] - 100.0).abs() < 1e-6);
        let dir = tempfile::tempdir().unwrap();
        sp.write_csv(&dir.path().join("s.csv")).unwrap();
        assert_eq!(HarmonicSpectra::read_csv(&dir.path().join("s.csv")).unwrap(), sp);
    }

    #[test]
    fn trace_csv_roundtrip() {
        let s = ToeplitzBlockOperator::identity(14, 2);
        let sc = scenario(TorqueDisturbance::constant(1.0).with_harmonic(2, Complex64::new(0.2, 0.1)), 0.1);
        let ctl = zero_controller(10, Some(LyapunovData::from_s(&s, &[]).unwrap()));
        let opts = SimulationOptions { record_stride: 20, v_stride: 3, ..SimulationOptions::default() };
        let tr = simulate_closed_loop(&sc, &ctl, &opts).unwrap();
        assert!(tr.lyapunov.iter().any(|v| v.is_finite()));
        assert!(tr.l_max.iter().all(|v| (*v - 90.0 * 90.0).abs() < 1e-9));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.csv");
        tr.write_csv(&path).unwrap();
        let back = ClosedLoopTrace::read_csv(&path, 4).unwrap();
        assert_eq!(back.t, tr.t);
        assert_eq!(back.x, tr.x);
        assert_eq!(back.z, tr.z);
        assert_eq!(back.l_max, tr.l_max);
        assert!(back.lyapunov.iter().zip(&tr.lyapunov).all(|(a, b)| a == b || (a.is_nan() && b.is_nan())));
    }

    #[test]
    fn constant_error_level() {
        let s = ToeplitzBlockOperator::identity(4, 2).scale(Complex64::new(0.5, 0.0));
        let l = LyapunovData::from_s(&s, &[]).unwrap();
        assert!((l.value_of_constant(&[1.0, 0.0, 0.0, 1.0]) - 4.0).abs() < 1e-12);
        let e = scale_to_level(&l, &[1.0, 2.0, 0.0, 0.0], 3.0);
        assert!((l.value_of_constant(&e) - 3.0).abs() < 1e-12);
    }
}
