//! Harmonic-domain models of affinely frequency-modulated phase-periodic
//! systems
//!
//! ```text
//! ẋ = (A0(θ) + ω A1(θ)) x + (B0(θ) + ω B1(θ)) u
//! ```
//!
//! their exact and parameter-varying phasor dynamics, and forwarding
//! augmentations.

use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{CMatrix, CVector};
use crate::phase::PseudoPeriodEvaluator;
use crate::sfd::PhasorSequence;
use crate::toeplitz::{delta_omega_operator, g_operator_at, HarmonicDerivativeOperator, Symbol, SymbolData, ToeplitzBlockOperator};

pub const MODEL_FILE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct AfmLppSystem {
    a0: ToeplitzBlockOperator,
    a1: ToeplitzBlockOperator,
    b0: ToeplitzBlockOperator,
    b1: ToeplitzBlockOperator,
    order: usize,
    /// Per-component truncation orders, each ≤ `order`.
    component_orders: Vec<usize>,
    omega_range: (f64, f64),
}

impl AfmLppSystem {
    pub fn new(a0: Symbol, a1: Symbol, b0: Symbol, b1: Symbol, order: usize, omega_range: (f64, f64)) -> Result<Self> {
        let n = a0.rows();
        let m = b0.cols();
        if a0.cols() != n || (a1.rows(), a1.cols()) != (n, n) || b0.rows() != n || (b1.rows(), b1.cols()) != (n, m) {
            return Err(Error::DimensionMismatch(format!(
                "A0 {}x{}, A1 {}x{}, B0 {}x{}, B1 {}x{}",
                a0.rows(),
                a0.cols(),
                a1.rows(),
                a1.cols(),
                b0.rows(),
                b0.cols(),
                b1.rows(),
                b1.cols()
            )));
        }
        let (lo, hi) = omega_range;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::InvalidRegime(format!("frequency interval [{lo}, {hi}] must satisfy 0 < lo < hi")));
        }
        Ok(AfmLppSystem {
            a0: ToeplitzBlockOperator::from_symbol(a0, order)?,
            a1: ToeplitzBlockOperator::from_symbol(a1, order)?,
            b0: ToeplitzBlockOperator::from_symbol(b0, order)?,
            b1: ToeplitzBlockOperator::from_symbol(b1, order)?,
            order,
            component_orders: vec![order; n],
            omega_range,
        })
    }

    /// Truncates state component `i` at harmonic `orders[i]` instead of the
    /// common order. Inputs keep the full order.
    pub fn with_component_orders(mut self, orders: Vec<usize>) -> Result<Self> {
        if orders.len() != self.n() {
            return Err(Error::DimensionMismatch(format!("{} component orders for n = {}", orders.len(), self.n())));
        }
        if let Some(o) = orders.iter().find(|&&o| o > self.order) {
            return Err(Error::Config(format!("component order {o} exceeds the truncation order {}", self.order)));
        }
        self.component_orders = orders;
        Ok(self)
    }

    pub fn component_orders(&self) -> &[usize] {
        &self.component_orders
    }

    /// Indices of the retained state harmonics in the stacked vector.
    pub fn retained_indices(&self) -> Vec<usize> {
        retained_indices(&self.component_orders, self.order)
    }

    /// Constant-coefficient system ẋ = A x + B u.
    pub fn lti(a: &DMatrix<f64>, b: &DMatrix<f64>, order: usize, omega_range: (f64, f64)) -> Result<Self> {
        let (n, m) = (a.nrows(), b.ncols());
        AfmLppSystem::new(Symbol::constant_real(a), Symbol::zeros(n, n), Symbol::constant_real(b), Symbol::zeros(n, m), order, omega_range)
    }

    pub fn n(&self) -> usize {
        self.a0.block_dims().0
    }

    pub fn m(&self) -> usize {
        self.b0.block_dims().1
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn omega_range(&self) -> (f64, f64) {
        self.omega_range
    }

    pub fn a0(&self) -> &ToeplitzBlockOperator {
        &self.a0
    }

    pub fn a1(&self) -> &ToeplitzBlockOperator {
        &self.a1
    }

    pub fn b0(&self) -> &ToeplitzBlockOperator {
        &self.b0
    }

    pub fn b1(&self) -> &ToeplitzBlockOperator {
        &self.b1
    }

    /// Symbols A0, A1, B0, B1 in that order.
    pub fn symbols(&self) -> [&Symbol; 4] {
        [&self.a0, &self.a1, &self.b0, &self.b1].map(|op| op.symbol().expect("system operators keep their symbols"))
    }

    pub fn derivative_operator(&self) -> HarmonicDerivativeOperator {
        HarmonicDerivativeOperator::new(self.n(), self.order)
    }

    /// State operator with 𝓖 = I: 𝓐0 + ω(𝓐1 − 𝓝).
    pub fn vertex_state(&self, omega: f64) -> CMatrix {
        let mut a = self.a0.matrix() + self.a1.matrix() * Complex64::new(omega, 0.0);
        for (i, d) in self.derivative_operator().diagonal().into_iter().enumerate() {
            a[(i, i)] -= d * omega;
        }
        a
    }

    /// Input operator with 𝓖 = I: 𝓑0 + ω𝓑1.
    pub fn vertex_input(&self, omega: f64) -> CMatrix {
        self.b0.matrix() + self.b1.matrix() * Complex64::new(omega, 0.0)
    }

    /// 𝓐0 X + 𝓑0 U, the part of the right-hand side that 𝓖 multiplies.
    pub fn forcing(&self, x: &PhasorSequence, u: &PhasorSequence) -> Result<CVector> {
        self.check(x, u)?;
        Ok(self.a0.matrix() * x.as_vector() + self.b0.matrix() * u.as_vector())
    }

    fn check(&self, x: &PhasorSequence, u: &PhasorSequence) -> Result<()> {
        if x.dim() != self.n() || u.dim() != self.m() || x.order() != self.order || u.order() != self.order {
            return Err(Error::DimensionMismatch(format!(
                "system n={}, m={}, N={} but X is {}@{} and U is {}@{}",
                self.n(),
                self.m(),
                self.order,
                x.dim(),
                x.order(),
                u.dim(),
                u.order()
            )));
        }
        Ok(())
    }

    fn frequency_part(&self, x: &PhasorSequence, u: &PhasorSequence, omega: f64) -> CVector {
        let mut v = self.a1.matrix() * x.as_vector() + self.b1.matrix() * u.as_vector();
        for (i, d) in self.derivative_operator().diagonal().into_iter().enumerate() {
            v[i] -= d * x.as_vector()[i];
        }
        v * Complex64::new(omega, 0.0)
    }

    fn wrap(&self, v: CVector) -> Result<PhasorSequence> {
        PhasorSequence::from_vector(self.n(), self.order, v)
    }
}

/// Indices `i(2N+1) + k + N` with |k| ≤ orders[i].
pub fn retained_indices(orders: &[usize], order: usize) -> Vec<usize> {
    let k2 = 2 * order + 1;
    let mut out = Vec::new();
    for (i, &o) in orders.iter().enumerate() {
        out.extend((order - o..=order + o).map(|j| i * k2 + j));
    }
    out
}

/// Applies 𝓖 (scalar blocks, expanded as I ⊗ 𝓖, or full n×n blocks).
fn apply_g(g: &ToeplitzBlockOperator, v: &CVector, n: usize) -> Result<CVector> {
    let k = 2 * g.order() + 1;
    if v.len() != n * k {
        return Err(Error::DimensionMismatch("frequency operator order differs from the system".into()));
    }
    match g.block_dims() {
        (1, 1) => {
            let mut out = CVector::zeros(v.len());
            for c in 0..n {
                let seg = g.matrix() * v.rows(c * k, k);
                out.rows_mut(c * k, k).copy_from(&seg);
            }
            Ok(out)
        }
        (a, b) if a == n && b == n => Ok(g.matrix() * v),
        (a, b) => Err(Error::DimensionMismatch(format!("frequency operator has {a}x{b} blocks for n = {n}"))),
    }
}

/// Ẋ = 𝓖(𝓐0X + 𝓑0U) + ω(𝓐1X + 𝓑1U − 𝓝X).
pub fn exact_rhs(sys: &AfmLppSystem, x: &PhasorSequence, u: &PhasorSequence, omega_now: f64, g: &ToeplitzBlockOperator) -> Result<PhasorSequence> {
    let f = sys.forcing(x, u)?;
    let v = apply_g(g, &f, sys.n())? + sys.frequency_part(x, u, omega_now);
    sys.wrap(v)
}

/// Ẋ = (𝓐0 + ω𝓐1 − ω𝓝)X + (𝓑0 + ω𝓑1)U.
pub fn pv_rhs(sys: &AfmLppSystem, x: &PhasorSequence, u: &PhasorSequence, omega_now: f64) -> Result<PhasorSequence> {
    let v = sys.forcing(x, u)? + sys.frequency_part(x, u, omega_now);
    sys.wrap(v)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorBudget {
    pub t: f64,
    pub epsilon: f64,
    /// ‖(I ⊗ Δ_ω) 𝓕‖.
    pub error_norm: f64,
    /// ε(t)·‖𝓕‖.
    pub bound: f64,
    /// ‖𝓕‖ with 𝓕 = 𝓐0X + 𝓑0U.
    pub reference_norm: f64,
    /// ‖exact_rhs − pv_rhs‖, i.e. ‖(𝓖 − I)𝓕‖ with the truncated 𝓖.
    pub rhs_gap: f64,
}

impl ErrorBudget {
    /// error_norm / bound (0 when both vanish).
    pub fn ratio(&self) -> f64 {
        if self.bound > 0.0 {
            self.error_norm / self.bound
        } else if self.error_norm > 0.0 {
            f64::INFINITY
        } else {
            0.0
        }
    }
}

/// Relative slack allowed on the bound for truncation effects.
pub const ERROR_BUDGET_SLACK: f64 = 0.02;

pub fn error_budget(
    sys: &AfmLppSystem,
    x: &PhasorSequence,
    u: &PhasorSequence,
    evaluator: &PseudoPeriodEvaluator,
    t: f64,
) -> Result<ErrorBudget> {
    let f = sys.forcing(x, u)?;
    let delta = delta_omega_operator(evaluator, t, sys.order)?;
    let e = apply_g(&delta, &f, sys.n())?;
    let g = g_operator_at(evaluator, t, sys.order, 1)?;
    let gap = apply_g(&g, &f, sys.n())? - &f;
    let epsilon = evaluator.epsilon(t, 256)?;
    let reference_norm = f.norm();
    let budget = ErrorBudget { t, epsilon, error_norm: e.norm(), bound: epsilon * reference_norm, reference_norm, rhs_gap: gap.norm() };
    if budget.error_norm > budget.bound * (1.0 + ERROR_BUDGET_SLACK) + 1e-14 * reference_norm {
        return Err(Error::VerificationFailed(format!(
            "PV error {:e} exceeds bound {:e} at t = {t}",
            budget.error_norm, budget.bound
        )));
    }
    Ok(budget)
}

/// Base system stacked with forwarding states ż = ω(J z + L C x).
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedSystem {
    pub base: AfmLppSystem,
    pub j: Symbol,
    pub l: Symbol,
    pub c: Symbol,
    system: AfmLppSystem,
}

impl AugmentedSystem {
    /// Number of forwarding states.
    pub fn q(&self) -> usize {
        self.j.rows()
    }

    /// The augmented AFM-LPP system on (X, Z), with
    /// Ã0 = [[A0, 0], [0, 0]], Ã1 = [[A1, 0], [LC, J]], B̃i = [[Bi], [0]].
    pub fn system(&self) -> &AfmLppSystem {
        &self.system
    }

    /// Sets the truncation order of every augmented state component.
    pub fn with_component_orders(mut self, orders: Vec<usize>) -> Result<Self> {
        let n = self.base.n();
        if orders.len() != n + self.q() {
            return Err(Error::DimensionMismatch(format!("{} component orders for {} states", orders.len(), n + self.q())));
        }
        self.base = self.base.with_component_orders(orders[..n].to_vec())?;
        self.system = self.system.with_component_orders(orders)?;
        Ok(self)
    }

    /// [[𝓖𝓐0 + ω𝓐1, 0], [ω𝓛𝓒, ω𝓙]]; `g = None` means 𝓖 = I.
    pub fn a_tilde(&self, omega: f64, g: Option<&ToeplitzBlockOperator>) -> Result<CMatrix> {
        let w = Complex64::new(omega, 0.0);
        let mut a = self.system.a1.matrix() * w;
        let n = self.base.n();
        let k = 2 * self.base.order + 1;
        let ga0 = match g {
            None => self.base.a0.matrix().clone(),
            Some(g) => {
                let mut out = CMatrix::zeros(n * k, n * k);
                for col in 0..n * k {
                    let v = apply_g(g, &self.base.a0.matrix().column(col).into_owned(), n)?;
                    out.set_column(col, &v);
                }
                out
            }
        };
        let mut top = a.view_mut((0, 0), (n * k, n * k));
        top += ga0;
        Ok(a)
    }

    /// [[𝓖𝓑0 + ω𝓑1], [0]].
    pub fn b_tilde(&self, omega: f64, g: Option<&ToeplitzBlockOperator>) -> Result<CMatrix> {
        let n = self.base.n();
        let k = 2 * self.base.order + 1;
        let mut b = self.system.b1.matrix() * Complex64::new(omega, 0.0);
        for col in 0..b.ncols() {
            let b0 = self.base.b0.matrix().column(col).into_owned();
            let v = match g {
                None => b0,
                Some(g) => apply_g(g, &b0, n)?,
            };
            let mut dst = b.view_mut((0, col), (n * k, 1));
            dst += v;
        }
        Ok(b)
    }
}

pub fn augment_with_forwarding(sys: &AfmLppSystem, j: Symbol, l: Symbol, c: Symbol) -> Result<AugmentedSystem> {
    let (n, m) = (sys.n(), sys.m());
    let q = j.rows();
    if j.cols() != q || l.rows() != q || l.cols() != c.rows() || c.cols() != n {
        return Err(Error::DimensionMismatch(format!(
            "forwarding J {}x{}, L {}x{}, C {}x{} for n = {n}",
            j.rows(),
            j.cols(),
            l.rows(),
            l.cols(),
            c.rows(),
            c.cols()
        )));
    }
    let [a0, a1, b0, b1] = sys.symbols();
    let mut ta0 = Symbol::zeros(n + q, n + q);
    ta0.set_block(0, 0, a0);
    let mut ta1 = Symbol::zeros(n + q, n + q);
    ta1.set_block(0, 0, a1);
    ta1.set_block(n, 0, &l.mul(&c)?);
    ta1.set_block(n, n, &j);
    let mut tb0 = Symbol::zeros(n + q, m);
    tb0.set_block(0, 0, b0);
    let mut tb1 = Symbol::zeros(n + q, m);
    tb1.set_block(0, 0, b1);
    let mut orders = sys.component_orders.clone();
    orders.extend(std::iter::repeat_n(sys.order, q));
    let system = AfmLppSystem::new(ta0, ta1, tb0, tb1, sys.order, sys.omega_range)?.with_component_orders(orders)?;
    Ok(AugmentedSystem { base: sys.clone(), j, l, c, system })
}

/// Phase-domain resonators for the given harmonics acting on `channels`
/// error signals: J = diag([[0, hI], [−hI, 0]]), L = stacked [I; 0].
pub fn oscillator_bank(harmonics: &[i64], channels: usize) -> Result<(Symbol, Symbol)> {
    for (i, h) in harmonics.iter().enumerate() {
        if *h < 1 {
            return Err(Error::InvalidRegime(format!("oscillator harmonic must be positive, got {h}")));
        }
        if harmonics[..i].contains(h) {
            return Err(Error::DuplicateHarmonic(*h));
        }
    }
    let q = 2 * channels * harmonics.len();
    let mut j = DMatrix::zeros(q, q);
    let mut l = DMatrix::zeros(q, channels);
    for (i, &h) in harmonics.iter().enumerate() {
        let o = 2 * channels * i;
        for c in 0..channels {
            j[(o + c, o + channels + c)] = h as f64;
            j[(o + channels + c, o + c)] = -(h as f64);
            l[(o + c, c)] = 1.0;
        }
    }
    Ok((Symbol::constant_real(&j), Symbol::constant_real(&l)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForwardingData {
    pub j: SymbolData,
    pub l: SymbolData,
    pub c: SymbolData,
}

/// Versioned model file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub version: u32,
    pub order: usize,
    pub omega_min: f64,
    pub omega_max: f64,
    pub a0: SymbolData,
    pub a1: SymbolData,
    pub b0: SymbolData,
    pub b1: SymbolData,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forwarding: Option<ForwardingData>,
    /// Truncation order per state component of the described system
    /// (augmented when forwarding is present); absent means uniform.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub component_orders: Option<Vec<usize>>,
}

impl ModelFile {
    pub fn from_system(sys: &AfmLppSystem) -> Self {
        let [a0, a1, b0, b1] = sys.symbols();
        ModelFile {
            version: MODEL_FILE_VERSION,
            order: sys.order,
            omega_min: sys.omega_range.0,
            omega_max: sys.omega_range.1,
            a0: a0.into(),
            a1: a1.into(),
            b0: b0.into(),
            b1: b1.into(),
            forwarding: None,
            component_orders: (sys.component_orders.iter().any(|&o| o != sys.order)).then(|| sys.component_orders.clone()),
        }
    }

    pub fn from_augmented(aug: &AugmentedSystem) -> Self {
        let mut f = ModelFile::from_system(&aug.base);
        f.forwarding = Some(ForwardingData { j: (&aug.j).into(), l: (&aug.l).into(), c: (&aug.c).into() });
        let sys = aug.system();
        f.component_orders = (sys.component_orders.iter().any(|&o| o != sys.order)).then(|| sys.component_orders.clone());
        f
    }

    pub fn base_system(&self) -> Result<AfmLppSystem> {
        if self.version != MODEL_FILE_VERSION {
            return Err(Error::Format(format!("unsupported model file version {}", self.version)));
        }
        let sys = AfmLppSystem::new(
            Symbol::try_from(&self.a0)?,
            Symbol::try_from(&self.a1)?,
            Symbol::try_from(&self.b0)?,
            Symbol::try_from(&self.b1)?,
            self.order,
            (self.omega_min, self.omega_max),
        )?;
        match &self.component_orders {
            Some(o) if o.len() >= sys.n() => {
                let n = sys.n();
                sys.with_component_orders(o[..n].to_vec())
            }
            Some(o) => Err(Error::Format(format!("{} component orders for n = {}", o.len(), sys.n()))),
            None => Ok(sys),
        }
    }

    pub fn augmented(&self) -> Result<Option<AugmentedSystem>> {
        let base = self.base_system()?;
        self.forwarding
            .as_ref()
            .map(|f| {
                let aug = augment_with_forwarding(&base, Symbol::try_from(&f.j)?, Symbol::try_from(&f.l)?, Symbol::try_from(&f.c)?)?;
                match &self.component_orders {
                    Some(o) => aug.with_component_orders(o.clone()),
                    None => Ok(aug),
                }
            })
            .transpose()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::max_abs;
    use crate::phase::{blowup_profile, FrequencyProfile, PhaseFunction};
    use crate::toeplitz::ToeplitzBlockOperator;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn scalar_decay(order: usize) -> AfmLppSystem {
        AfmLppSystem::lti(&DMatrix::from_element(1, 1, -1.0), &DMatrix::from_element(1, 1, 1.0), order, (1.0, 100.0)).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, dim: usize, order: usize) -> PhasorSequence {
        let mut s = PhasorSequence::zeros(dim, order);
        for i in 0..dim {
            s.set(i, 0, c(rng.gen_range(-1.0..1.0), 0.0));
            for k in 1..=order as i64 {
                let z = c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                s.set(i, k, z);
                s.set(i, -k, z.conj());
            }
        }
        s
    }

    fn ripple_system(order: usize) -> AfmLppSystem {
        let a0 = Symbol::from_real_fn(2, 2, 2, |th| DMatrix::from_row_slice(2, 2, &[-1.0 + 0.5 * th.cos(), 2.0, -(2.0 * th).sin(), -3.0]));
        let a1 = Symbol::from_real_fn(2, 2, 1, |th| DMatrix::from_row_slice(2, 2, &[0.0, 0.01 * th.sin(), 0.0, 0.0]));
        let b0 = Symbol::from_real_fn(2, 1, 1, |th| DMatrix::from_row_slice(2, 1, &[1.0, th.cos()]));
        AfmLppSystem::new(a0, a1, b0, Symbol::zeros(2, 1), order, (10.0, 100.0)).unwrap()
    }

    #[test]
    fn scalar_decay_componentwise() {
        let order = 4;
        let sys = scalar_decay(order);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_seq(&mut rng, 1, order);
        let u = PhasorSequence::zeros(1, order);
        let w = 37.0;
        let g = ToeplitzBlockOperator::identity(1, order);
        let d = exact_rhs(&sys, &x, &u, w, &g).unwrap();
        for k in -(order as i64)..=order as i64 {
            let expected = -x.get(0, k) - c(0.0, k as f64 * w) * x.get(0, k);
            assert!((d.get(0, k) - expected).norm() < 1e-14);
        }
        let p = pv_rhs(&sys, &x, &u, w).unwrap();
        assert_eq!(p.as_vector(), d.as_vector());
    }

    #[test]
    fn zero_state_zero_rate() {
        let sys = ripple_system(3);
        let x = PhasorSequence::zeros(2, 3);
        let u = PhasorSequence::zeros(1, 3);
        let g = ToeplitzBlockOperator::identity(1, 3);
        assert_eq!(exact_rhs(&sys, &x, &u, 20.0, &g).unwrap().as_vector().norm(), 0.0);
        assert_eq!(pv_rhs(&sys, &x, &u, 20.0).unwrap().as_vector().norm(), 0.0);
    }

    #[test]
    fn dimension_errors() {
        let sys = ripple_system(3);
        let x = PhasorSequence::zeros(3, 3);
        let u = PhasorSequence::zeros(1, 3);
        assert!(matches!(pv_rhs(&sys, &x, &u, 20.0), Err(Error::DimensionMismatch(_))));
        let bad = AfmLppSystem::new(Symbol::zeros(2, 2), Symbol::zeros(2, 3), Symbol::zeros(2, 1), Symbol::zeros(2, 1), 2, (1.0, 2.0));
        assert!(matches!(bad, Err(Error::DimensionMismatch(_))));
        let bad_range = AfmLppSystem::lti(&DMatrix::zeros(1, 1), &DMatrix::zeros(1, 1), 2, (3.0, 2.0));
        assert!(bad_range.is_err());
    }

    #[test]
    fn constant_frequency_budget_is_zero() {
        let ev = PseudoPeriodEvaluator::new(PhaseFunction::new(FrequencyProfile::Constant { omega0: 30.0 }, 0.0, (-1.0, 2.0)).unwrap());
        let sys = ripple_system(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (x, u) = (random_seq(&mut rng, 2, 4), random_seq(&mut rng, 1, 4));
        let b = error_budget(&sys, &x, &u, &ev, 1.0).unwrap();
        assert!(b.error_norm < 1e-12 && b.bound == 0.0 && b.rhs_gap < 1e-12);
    }

    #[test]
    fn ramp_budget_ratio_at_order_30() {
        let ev = PseudoPeriodEvaluator::new(PhaseFunction::new(FrequencyProfile::Ramp { omega0: 50.0, a: 5.0 }, 0.0, (-1.0, 2.0)).unwrap());
        let sys = scalar_decay(30);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (x, u) = (random_seq(&mut rng, 1, 30), random_seq(&mut rng, 1, 30));
        let b = error_budget(&sys, &x, &u, &ev, 0.5).unwrap();
        assert!(b.ratio() <= 1.0 + 1e-2, "{}", b.ratio());
        assert!(b.rhs_gap <= b.bound * 1.02);
        // scaling the forcing scales both norms
        let x10 = PhasorSequence::from_vector(1, 30, x.as_vector() * c(10.0, 0.0)).unwrap();
        let u10 = PhasorSequence::from_vector(1, 30, u.as_vector() * c(10.0, 0.0)).unwrap();
        let b10 = error_budget(&sys, &x10, &u10, &ev, 0.5).unwrap();
        assert!((b10.error_norm / b.error_norm - 10.0).abs() < 1e-9);
        assert!((b10.ratio() - b.ratio()).abs() < 1e-9);
    }

    #[test]
    fn constant_frequency_exact_equals_lti_form() {
        let sys = ripple_system(5);
        let w = 42.0;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (x, u) = (random_seq(&mut rng, 2, 5), random_seq(&mut rng, 1, 5));
        let lti = sys.vertex_state(w) * x.as_vector() + sys.vertex_input(w) * u.as_vector();
        let ex = exact_rhs(&sys, &x, &u, w, &ToeplitzBlockOperator::identity(1, 5)).unwrap();
        assert!((ex.as_vector() - lti).camax() < 1e-13);
    }

    #[test]
    fn pure_integral_action() {
        let order = 3;
        let sys = ripple_system(order);
        let aug = augment_with_forwarding(&sys, Symbol::zeros(2, 2), Symbol::identity(2), Symbol::identity(2)).unwrap();
        assert_eq!(aug.q(), 2);
        let w = 15.0;
        let a = aug.a_tilde(w, None).unwrap();
        let k = 2 * order + 1;
        // Z rows: ω X, X columns; Z columns: zero
        let zx = a.view((2 * k, 0), (2 * k, 2 * k)).into_owned();
        assert!(max_abs(&(zx - CMatrix::identity(2 * k, 2 * k) * c(w, 0.0))) < 1e-14);
        assert!(max_abs(&a.view((0, 2 * k), (4 * k, 2 * k)).into_owned()) == 0.0);
        let b = aug.b_tilde(w, None).unwrap();
        assert!(max_abs(&b.view((2 * k, 0), (2 * k, k)).into_owned()) == 0.0);
        // full state operator includes −ω𝓝 on Z
        let full = aug.system().vertex_state(w);
        assert!((full[(2 * k, 2 * k)] - c(0.0, 3.0 * w)).norm() < 1e-14);
    }

    #[test]
    fn empty_forwarding_is_identity() {
        let sys = ripple_system(3);
        let aug = augment_with_forwarding(&sys, Symbol::zeros(0, 0), Symbol::zeros(0, 0), Symbol::zeros(0, 2)).unwrap();
        assert_eq!(aug.system(), &sys);
    }

    #[test]
    fn exact_g_enters_only_plant_rows() {
        let order = 4;
        let sys = ripple_system(order);
        let ev = PseudoPeriodEvaluator::new(PhaseFunction::new(FrequencyProfile::Ramp { omega0: 40.0, a: 30.0 }, 0.0, (-1.0, 2.0)).unwrap());
        let g = g_operator_at(&ev, 0.5, order, 1).unwrap();
        let aug = augment_with_forwarding(&sys, Symbol::zeros(1, 1), Symbol::identity(1), Symbol::constant_real(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]))).unwrap();
        let w = ev.phase.omega(0.5).unwrap();
        let with_g = aug.a_tilde(w, Some(&g)).unwrap();
        let without = aug.a_tilde(w, None).unwrap();
        let k = 2 * order + 1;
        assert_eq!(with_g.view((2 * k, 0), (k, 3 * k)), without.view((2 * k, 0), (k, 3 * k)));
        assert!(max_abs(&(with_g - without)) > 1e-6);
    }

    #[test]
    fn oscillator_bank_structure() {
        let (j, l) = oscillator_bank(&[1], 1).unwrap();
        assert_eq!(j.coeff(0), CMatrix::from_row_slice(2, 2, &[c(0.0, 0.0), c(1.0, 0.0), c(-1.0, 0.0), c(0.0, 0.0)]));
        assert_eq!(l.coeff(0), CMatrix::from_row_slice(2, 1, &[c(1.0, 0.0), c(0.0, 0.0)]));
        let (j, l) = oscillator_bank(&[], 1).unwrap();
        assert_eq!((j.rows(), l.rows()), (0, 0));
        assert!(matches!(oscillator_bank(&[2, 3, 2], 1), Err(Error::DuplicateHarmonic(2))));
        let w0 = 50.0;
        let (j, _) = oscillator_bank(&[2, 5], 1).unwrap();
        let eig = (j.eval_real(0.0) * w0).complex_eigenvalues();
        let mut ims: Vec<f64> = eig.iter().map(|z| z.im.abs()).collect();
        ims.sort_by(f64::total_cmp);
        assert!(eig.iter().all(|z| z.re.abs() < 1e-12));
        assert!((ims[0] - 100.0).abs() < 1e-9 && (ims[3] - 250.0).abs() < 1e-9);
    }

    #[test]
    fn oscillator_harmonic_realization() {
        // with a single channel and h: Z-dynamics ω([[−N, hI], [−hI, −N]]Z + [I; 0]E)
        let order = 2;
        let sys = AfmLppSystem::lti(&DMatrix::from_element(1, 1, -1.0), &DMatrix::from_element(1, 1, 1.0), order, (1.0, 10.0)).unwrap();
        let (j, l) = oscillator_bank(&[3], 1).unwrap();
        let aug = augment_with_forwarding(&sys, j, l, Symbol::identity(1)).unwrap();
        let a = aug.system().vertex_state(2.0);
        let k = 2 * order + 1;
        assert_eq!(a[(k, 2 * k)], c(6.0, 0.0));
        assert_eq!(a[(2 * k, k)], c(-6.0, 0.0));
        assert_eq!(a[(k, 0)], c(2.0, 0.0));
        assert_eq!(a[(2 * k, 0)], c(0.0, 0.0));
    }

    #[test]
    fn model_file_round_trip() {
        let sys = ripple_system(3);
        let aug = augment_with_forwarding(&sys, Symbol::zeros(1, 1), Symbol::identity(1), Symbol::constant_real(&DMatrix::from_row_slice(1, 2, &[0.0, 1.0]))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("model.json");
        ModelFile::from_augmented(&aug).save(&p).unwrap();
        let back = ModelFile::load(&p).unwrap();
        assert_eq!(back.base_system().unwrap(), sys);
        assert_eq!(back.augmented().unwrap().unwrap(), aug);
        let mut old = back.clone();
        old.version = 99;
        assert!(matches!(old.base_system(), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn pv_error_bound_holds(seed in 0u64..10_000, t in 0.0f64..1.5, blow in proptest::bool::ANY) {
            let ev = if blow {
                let bp = blowup_profile(10.0, 0.05).unwrap();
                let dom = (-1.5, bp.t_max);
                PseudoPeriodEvaluator::new(PhaseFunction::new(bp.profile, 0.0, dom).unwrap())
            } else {
                PseudoPeriodEvaluator::new(PhaseFunction::new(FrequencyProfile::Ramp { omega0: 30.0, a: 40.0 }, 0.0, (-0.5, 3.0)).unwrap())
            };
            let t = t.min(ev.phase.domain().1 - 1e-3);
            let order = 6;
            let sys = ripple_system(order);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (x, u) = (random_seq(&mut rng, 2, order), random_seq(&mut rng, 1, order));
            let w = ev.phase.omega(t).unwrap();
            let g = g_operator_at(&ev, t, order, 1).unwrap();
            let ex = exact_rhs(&sys, &x, &u, w, &g).unwrap();
            let pv = pv_rhs(&sys, &x, &u, w).unwrap();
            let b = error_budget(&sys, &x, &u, &ev, t).unwrap();
            let gap = (ex.as_vector() - pv.as_vector()).norm();
            prop_assert!(gap <= b.bound * (1.0 + ERROR_BUDGET_SLACK));
            prop_assert!(b.error_norm <= b.bound * (1.0 + ERROR_BUDGET_SLACK));
        }

        #[test]
        fn vertex_operators_are_affine(lambda in 0.0f64..1.0) {
            let sys = ripple_system(3);
            let aug = augment_with_forwarding(&sys, Symbol::zeros(1, 1), Symbol::identity(1), Symbol::constant_real(&DMatrix::from_row_slice(1, 2, &[1.0, 0.0]))).unwrap();
            let (lo, hi) = sys.omega_range();
            let mid = lambda * lo + (1.0 - lambda) * hi;
            let a_mid = aug.a_tilde(mid, None).unwrap();
            let a_mix = aug.a_tilde(lo, None).unwrap() * c(lambda, 0.0) + aug.a_tilde(hi, None).unwrap() * c(1.0 - lambda, 0.0);
            prop_assert!(max_abs(&(a_mid - a_mix)) < 1e-9);
            let b_mid = aug.b_tilde(mid, None).unwrap();
            let b_mix = aug.b_tilde(lo, None).unwrap() * c(lambda, 0.0) + aug.b_tilde(hi, None).unwrap() * c(1.0 - lambda, 0.0);
            prop_assert!(max_abs(&(b_mid - b_mix)) < 1e-9);
        }
    }
}
