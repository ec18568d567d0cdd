//! Truncated block-Toeplitz operators of phase-periodic matrix functions.
//!
//! Harmonic vectors are stored component-major: component `i`, harmonic `k`
//! sits at index `i * (2N + 1) + (k + N)`. Block `(i, j)` of the operator of
//! A(θ) = Σ A_h e^{jhθ} carries the coefficient `A_{k-l}[i, j]` at row `k`,
//! column `l`, so that the phasors of A·x are `T(A)` times the phasors of x.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{hermitian_asymmetry, max_abs, CMatrix, J};
use crate::phase::PseudoPeriodEvaluator;
use crate::sfd::sfd_variable;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

/// Fourier coefficients {A_h} of a phase-periodic `rows × cols` matrix function.
#[derive(Clone, Debug, PartialEq)]
pub struct Symbol {
    rows: usize,
    cols: usize,
    coeffs: BTreeMap<i64, CMatrix>,
}

impl Symbol {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Symbol { rows, cols, coeffs: BTreeMap::new() }
    }

    pub fn constant(m: CMatrix) -> Self {
        let mut s = Symbol::zeros(m.nrows(), m.ncols());
        s.insert(0, m);
        s
    }

    pub fn constant_real(m: &DMatrix<f64>) -> Self {
        Symbol::constant(m.map(|x| Complex64::new(x, 0.0)))
    }

    pub fn identity(n: usize) -> Self {
        Symbol::constant(CMatrix::identity(n, n))
    }

    /// Scalar symbol from `(h, c_h)` pairs.
    pub fn scalar(coeffs: &[(i64, Complex64)]) -> Self {
        let mut s = Symbol::zeros(1, 1);
        for &(h, c) in coeffs {
            s.add_coeff(h, &CMatrix::from_element(1, 1, c));
        }
        s
    }

    /// Coefficients of a band-limited function sampled on a uniform phase
    /// grid. Exact whenever the true band does not exceed `band`.
    pub fn from_fn<F: Fn(f64) -> CMatrix>(rows: usize, cols: usize, band: usize, f: F) -> Self {
        let m = 4 * band + 4;
        let samples: Vec<CMatrix> = (0..m).map(|i| f(2.0 * std::f64::consts::PI * i as f64 / m as f64)).collect();
        let mut s = Symbol::zeros(rows, cols);
        let scale = samples.iter().map(max_abs).fold(0.0, f64::max);
        for h in -(band as i64)..=(band as i64) {
            let mut c = CMatrix::zeros(rows, cols);
            for (i, v) in samples.iter().enumerate() {
                let ang = -2.0 * std::f64::consts::PI * (h as f64) * i as f64 / m as f64;
                c += v * Complex64::from_polar(1.0 / m as f64, ang);
            }
            c.apply(|z| {
                if z.re.abs() <= 1e-14 * scale {
                    z.re = 0.0;
                }
                if z.im.abs() <= 1e-14 * scale {
                    z.im = 0.0;
                }
            });
            s.insert(h, c);
        }
        s
    }

    pub fn from_real_fn<F: Fn(f64) -> DMatrix<f64>>(rows: usize, cols: usize, band: usize, f: F) -> Self {
        Symbol::from_fn(rows, cols, band, |th| f(th).map(|x| Complex64::new(x, 0.0)))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Largest |h| with a nonzero coefficient.
    pub fn band(&self) -> usize {
        self.coeffs.keys().map(|h| h.unsigned_abs() as usize).max().unwrap_or(0)
    }

    pub fn get(&self, h: i64) -> Option<&CMatrix> {
        self.coeffs.get(&h)
    }

    pub fn coeff(&self, h: i64) -> CMatrix {
        self.coeffs.get(&h).cloned().unwrap_or_else(|| CMatrix::zeros(self.rows, self.cols))
    }

    pub fn harmonics(&self) -> impl Iterator<Item = (i64, &CMatrix)> {
        self.coeffs.iter().map(|(h, m)| (*h, m))
    }

    /// Sets coefficient `h`, dropping it when identically zero.
    pub fn insert(&mut self, h: i64, m: CMatrix) {
        assert_eq!((m.nrows(), m.ncols()), (self.rows, self.cols), "coefficient shape");
        if m.iter().all(|z| *z == ZERO) {
            self.coeffs.remove(&h);
        } else {
            self.coeffs.insert(h, m);
        }
    }

    pub fn add_coeff(&mut self, h: i64, m: &CMatrix) {
        let sum = self.coeff(h) + m;
        self.insert(h, sum);
    }

    /// Places `block` with its top-left corner at `(r0, c0)`.
    pub fn set_block(&mut self, r0: usize, c0: usize, block: &Symbol) {
        let mut hs: Vec<i64> = self.coeffs.keys().cloned().collect();
        hs.extend(block.coeffs.keys());
        hs.sort();
        hs.dedup();
        for h in hs {
            let mut c = self.coeff(h);
            c.view_mut((r0, c0), (block.rows, block.cols)).copy_from(&block.coeff(h));
            self.insert(h, c);
        }
    }

    pub fn eval(&self, theta: f64) -> CMatrix {
        let mut out = CMatrix::zeros(self.rows, self.cols);
        for (h, c) in &self.coeffs {
            out += c * Complex64::from_polar(1.0, *h as f64 * theta);
        }
        out
    }

    /// Real part of [`Symbol::eval`]; meaningful for real symbols.
    pub fn eval_real(&self, theta: f64) -> DMatrix<f64> {
        self.eval(theta).map(|z| z.re)
    }

    /// Pointwise conjugate transpose A*(θ).
    pub fn adjoint(&self) -> Symbol {
        let mut s = Symbol::zeros(self.cols, self.rows);
        for (h, c) in &self.coeffs {
            s.insert(-h, c.adjoint());
        }
        s
    }

    /// Pointwise product, i.e. convolution of the coefficient sequences.
    pub fn mul(&self, other: &Symbol) -> Result<Symbol> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch(format!("symbol product {}x{} * {}x{}", self.rows, self.cols, other.rows, other.cols)));
        }
        let mut s = Symbol::zeros(self.rows, other.cols);
        for (ha, a) in &self.coeffs {
            for (hb, b) in &other.coeffs {
                s.add_coeff(ha + hb, &(a * b));
            }
        }
        Ok(s)
    }

    pub fn add(&self, other: &Symbol) -> Result<Symbol> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::DimensionMismatch("symbol sum".into()));
        }
        let mut s = self.clone();
        for (h, c) in &other.coeffs {
            s.add_coeff(*h, c);
        }
        Ok(s)
    }

    pub fn scale(&self, a: Complex64) -> Symbol {
        let mut s = Symbol::zeros(self.rows, self.cols);
        for (h, c) in &self.coeffs {
            s.insert(*h, c * a);
        }
        s
    }

    /// dA/dθ.
    pub fn derivative(&self) -> Symbol {
        let mut s = Symbol::zeros(self.rows, self.cols);
        for (h, c) in &self.coeffs {
            s.insert(*h, c * (J * *h as f64));
        }
        s
    }

    /// A(θ) is real for every θ: A_{-h} = conj(A_h).
    pub fn is_real(&self, tol: f64) -> bool {
        let hs: Vec<i64> = self.coeffs.keys().cloned().collect();
        hs.iter().all(|h| {
            let d = self.coeff(*h) - self.coeff(-h).map(|z| z.conj());
            max_abs(&d) <= tol
        })
    }

    /// A(θ) is Hermitian for every θ: A_{-h} = A_h^*.
    pub fn is_hermitian(&self, tol: f64) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let hs: Vec<i64> = self.coeffs.keys().cloned().collect();
        hs.iter().all(|h| max_abs(&(self.coeff(*h) - self.coeff(-h).adjoint())) <= tol)
    }

    /// Greatest common divisor of all nonzero harmonics (0 for a constant).
    pub fn harmonic_gcd(&self) -> u64 {
        self.coeffs.keys().fold(0u64, |g, h| gcd(g, h.unsigned_abs()))
    }

    /// I_n ⊗ A for a scalar symbol.
    pub fn kron_identity(&self, n: usize) -> Symbol {
        assert!(self.rows == 1 && self.cols == 1, "kron_identity needs a scalar symbol");
        let mut s = Symbol::zeros(n, n);
        for (h, c) in &self.coeffs {
            s.insert(*h, CMatrix::identity(n, n) * c[(0, 0)]);
        }
        s
    }
}

pub(crate) fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Multiplication mode for [`toeplitz_product`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProductMode {
    /// Product of the realized (truncated) matrices.
    Truncated,
    /// Exact convolution of the symbols, realized afterwards.
    Oversampled,
}

/// Truncated block-Toeplitz operator with its realized dense matrix. The
/// symbol is absent when the matrix came from an operation that leaves the
/// Toeplitz class (truncated products, inverses).
#[derive(Clone, Debug, PartialEq)]
pub struct ToeplitzBlockOperator {
    n: usize,
    m: usize,
    order: usize,
    symbol: Option<Symbol>,
    matrix: CMatrix,
}

fn realize(symbol: &Symbol, order: usize) -> CMatrix {
    let k = 2 * order + 1;
    let mut mat = CMatrix::zeros(symbol.rows * k, symbol.cols * k);
    for (h, c) in symbol.harmonics() {
        if h.unsigned_abs() as usize >= k {
            continue;
        }
        for r in 0..k {
            let col = r as i64 - h;
            if col < 0 || col >= k as i64 {
                continue;
            }
            let col = col as usize;
            for i in 0..symbol.rows {
                for j in 0..symbol.cols {
                    mat[(i * k + r, j * k + col)] = c[(i, j)];
                }
            }
        }
    }
    mat
}

impl ToeplitzBlockOperator {
    pub fn from_symbol(symbol: Symbol, order: usize) -> Result<Self> {
        let band = symbol.band();
        if band > 2 * order {
            return Err(Error::BandExceedsTruncation { band, limit: 2 * order });
        }
        Ok(Self::from_symbol_clipped(symbol, order))
    }

    /// Like [`Self::from_symbol`] but silently dropping harmonics beyond 2N.
    pub fn from_symbol_clipped(symbol: Symbol, order: usize) -> Self {
        let matrix = realize(&symbol, order);
        ToeplitzBlockOperator { n: symbol.rows, m: symbol.cols, order, symbol: Some(symbol), matrix }
    }

    /// Wraps a dense matrix of compatible size (no symbol attached).
    pub fn from_matrix(n: usize, m: usize, order: usize, matrix: CMatrix) -> Result<Self> {
        let k = 2 * order + 1;
        if matrix.nrows() != n * k || matrix.ncols() != m * k {
            return Err(Error::DimensionMismatch(format!(
                "matrix {}x{} does not fit {}x{} blocks of order {}",
                matrix.nrows(),
                matrix.ncols(),
                n,
                m,
                order
            )));
        }
        Ok(ToeplitzBlockOperator { n, m, order, symbol: None, matrix })
    }

    pub fn identity(n: usize, order: usize) -> Self {
        Self::from_symbol_clipped(Symbol::identity(n), order)
    }

    pub fn zeros(n: usize, m: usize, order: usize) -> Self {
        Self::from_symbol_clipped(Symbol::zeros(n, m), order)
    }

    pub fn block_dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn symbol(&self) -> Option<&Symbol> {
        self.symbol.as_ref()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> CMatrix {
        self.matrix
    }

    /// Dense `(2N+1) × (2N+1)` block `(i, j)`.
    pub fn block(&self, i: usize, j: usize) -> CMatrix {
        let k = 2 * self.order + 1;
        self.matrix.view((i * k, j * k), (k, k)).into_owned()
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.n == self.m && hermitian_asymmetry(&self.matrix) <= tol * (1.0 + max_abs(&self.matrix))
    }

    pub fn adjoint(&self) -> Self {
        ToeplitzBlockOperator {
            n: self.m,
            m: self.n,
            order: self.order,
            symbol: self.symbol.as_ref().map(Symbol::adjoint),
            matrix: self.matrix.adjoint(),
        }
    }

    pub fn scale(&self, a: Complex64) -> Self {
        ToeplitzBlockOperator {
            n: self.n,
            m: self.m,
            order: self.order,
            symbol: self.symbol.as_ref().map(|s| s.scale(a)),
            matrix: &self.matrix * a,
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        if (self.n, self.m, self.order) != (other.n, other.m, other.order) {
            return Err(Error::DimensionMismatch("operator sum".into()));
        }
        let symbol = match (&self.symbol, &other.symbol) {
            (Some(a), Some(b)) => Some(a.add(b)?),
            _ => None,
        };
        Ok(ToeplitzBlockOperator { n: self.n, m: self.m, order: self.order, symbol, matrix: &self.matrix + &other.matrix })
    }

    /// Expands a scalar (1×1 block) operator to I_n ⊗ A.
    pub fn kron_identity(&self, n: usize) -> Result<Self> {
        if self.n != 1 || self.m != 1 {
            return Err(Error::DimensionMismatch("kron_identity needs a scalar operator".into()));
        }
        let k = 2 * self.order + 1;
        let mut matrix = CMatrix::zeros(n * k, n * k);
        for i in 0..n {
            matrix.view_mut((i * k, i * k), (k, k)).copy_from(&self.matrix);
        }
        Ok(ToeplitzBlockOperator { n, m: n, order: self.order, symbol: self.symbol.as_ref().map(|s| s.kron_identity(n)), matrix })
    }

    pub fn operator_norm(&self) -> f64 {
        operator_norm(self)
    }

    /// Largest spread of the entries along any block diagonal, restricted to
    /// rows and columns with |k| ≤ `central`. Zero for exact Toeplitz blocks.
    pub fn diagonal_spread(&self, central: usize) -> f64 {
        let k = 2 * self.order + 1;
        let lo = self.order - central.min(self.order);
        let hi = self.order + central.min(self.order);
        let mut worst: f64 = 0.0;
        for i in 0..self.n {
            for j in 0..self.m {
                for d in -(k as i64 - 1)..=(k as i64 - 1) {
                    let mut first: Option<Complex64> = None;
                    for r in lo..=hi {
                        let c = r as i64 - d;
                        if c < lo as i64 || c > hi as i64 {
                            continue;
                        }
                        let v = self.matrix[(i * k + r, j * k + c as usize)];
                        match first {
                            None => first = Some(v),
                            Some(f) => worst = worst.max((v - f).norm()),
                        }
                    }
                }
            }
        }
        worst
    }
}

pub fn toeplitz_from_symbol(symbol: Symbol, order: usize) -> Result<ToeplitzBlockOperator> {
    ToeplitzBlockOperator::from_symbol(symbol, order)
}

pub fn toeplitz_product(a: &ToeplitzBlockOperator, b: &ToeplitzBlockOperator, mode: ProductMode) -> Result<ToeplitzBlockOperator> {
    if a.m != b.n || a.order != b.order {
        return Err(Error::DimensionMismatch(format!(
            "product of {}x{} (N={}) and {}x{} (N={})",
            a.n, a.m, a.order, b.n, b.m, b.order
        )));
    }
    match mode {
        ProductMode::Truncated => Ok(ToeplitzBlockOperator { n: a.n, m: b.m, order: a.order, symbol: None, matrix: &a.matrix * &b.matrix }),
        ProductMode::Oversampled => {
            let (sa, sb) = match (&a.symbol, &b.symbol) {
                (Some(sa), Some(sb)) => (sa, sb),
                _ => return Err(Error::InvalidRegime("oversampled product needs both symbols".into())),
            };
            Ok(ToeplitzBlockOperator::from_symbol_clipped(sa.mul(sb)?, a.order))
        }
    }
}

/// Largest singular value of the realized matrix. It never exceeds the L∞
/// norm of the symbol and approaches it as N grows.
pub fn operator_norm(a: &ToeplitzBlockOperator) -> f64 {
    if a.matrix.is_empty() {
        return 0.0;
    }
    a.matrix.clone().singular_values().iter().cloned().fold(0.0, f64::max)
}

/// 𝓝 = I_n ⊗ diag(jk), k = −N..N.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HarmonicDerivativeOperator {
    pub n: usize,
    pub order: usize,
}

impl HarmonicDerivativeOperator {
    pub fn new(n: usize, order: usize) -> Self {
        HarmonicDerivativeOperator { n, order }
    }

    /// Diagonal entries jk in storage order.
    pub fn diagonal(&self) -> Vec<Complex64> {
        let k = 2 * self.order + 1;
        (0..self.n * k).map(|idx| J * ((idx % k) as f64 - self.order as f64)).collect()
    }

    pub fn matrix(&self) -> CMatrix {
        CMatrix::from_diagonal(&nalgebra::DVector::from_vec(self.diagonal()))
    }
}

/// 𝓖 = ω(t)·T(ω)⁻¹ for the scalar window symbol of ω. The truncated matrix
/// is inverted (not the symbol of 1/ω).
pub fn g_operator(omega_now: f64, omega_window_symbol: &Symbol, order: usize) -> Result<ToeplitzBlockOperator> {
    if omega_window_symbol.rows() != 1 || omega_window_symbol.cols() != 1 {
        return Err(Error::DimensionMismatch("frequency symbol must be scalar".into()));
    }
    let t = ToeplitzBlockOperator::from_symbol_clipped(omega_window_symbol.clone(), order);
    let herm = (t.matrix() + t.matrix().adjoint()) * Complex64::new(0.5, 0.0);
    let eig = herm.clone().symmetric_eigenvalues();
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition < 1e12) {
        return Err(Error::SingularFrequencyOperator { condition });
    }
    let inv = herm.cholesky().ok_or(Error::SingularFrequencyOperator { condition })?.inverse();
    ToeplitzBlockOperator::from_matrix(1, 1, order, inv * Complex64::new(omega_now, 0.0))
}

/// Window symbol of ω at time `t`: its phasors of order `band`.
pub fn omega_window_symbol(evaluator: &PseudoPeriodEvaluator, t: f64, band: usize) -> Result<Symbol> {
    let pf = &evaluator.phase;
    let seq = sfd_variable(&|tau: f64, out: &mut [f64]| out[0] = pf.omega_unchecked(tau), 1, evaluator, band, t)?;
    Ok(seq.to_scalar_symbol(0))
}

/// 𝓖 at time `t` expanded to I_n ⊗ 𝓖.
pub fn g_operator_at(evaluator: &PseudoPeriodEvaluator, t: f64, order: usize, n: usize) -> Result<ToeplitzBlockOperator> {
    let sym = omega_window_symbol(evaluator, t, 2 * order)?;
    let w = evaluator.phase.omega(t)?;
    g_operator(w, &sym, order)?.kron_identity(n)
}

/// Δ_ω(t) = T(δ_ω(·, t)) with δ_ω(τ, t) = (ω(t) − ω(τ))/ω(τ) over the window.
pub fn delta_omega_operator(evaluator: &PseudoPeriodEvaluator, t: f64, order: usize) -> Result<ToeplitzBlockOperator> {
    let pf = &evaluator.phase;
    let w = pf.omega(t)?;
    let seq = sfd_variable(
        &|tau: f64, out: &mut [f64]| {
            let wt = pf.omega_unchecked(tau);
            out[0] = (w - wt) / wt;
        },
        1,
        evaluator,
        2 * order,
        t,
    )?;
    Ok(ToeplitzBlockOperator::from_symbol_clipped(seq.to_scalar_symbol(0), order))
}

/// Tr₀: trace of the realized matrix divided by 2N+1.
pub fn average_trace(m: &ToeplitzBlockOperator) -> Result<f64> {
    let asym = hermitian_asymmetry(&m.matrix);
    if m.n != m.m || asym > 1e-9 * (1.0 + max_abs(&m.matrix)) {
        return Err(Error::NotHermitian { asymmetry: asym });
    }
    Ok(m.matrix.trace().re / (2 * m.order + 1) as f64)
}

/// One Fourier coefficient in file form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoeffData {
    pub h: i64,
    pub re: Vec<Vec<f64>>,
    pub im: Vec<Vec<f64>>,
}

/// File form of a symbol: `(rows, cols, [(h, re, im)])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymbolData {
    pub rows: usize,
    pub cols: usize,
    pub coeffs: Vec<CoeffData>,
}

impl From<&Symbol> for SymbolData {
    fn from(s: &Symbol) -> Self {
        let coeffs = s
            .harmonics()
            .map(|(h, c)| CoeffData {
                h,
                re: (0..s.rows).map(|i| (0..s.cols).map(|j| c[(i, j)].re).collect()).collect(),
                im: (0..s.rows).map(|i| (0..s.cols).map(|j| c[(i, j)].im).collect()).collect(),
            })
            .collect();
        SymbolData { rows: s.rows, cols: s.cols, coeffs }
    }
}

impl TryFrom<&SymbolData> for Symbol {
    type Error = Error;
    fn try_from(d: &SymbolData) -> Result<Symbol> {
        let mut s = Symbol::zeros(d.rows, d.cols);
        for c in &d.coeffs {
            if c.re.len() != d.rows || c.im.len() != d.rows || c.re.iter().chain(&c.im).any(|r| r.len() != d.cols) {
                return Err(Error::Format(format!("coefficient {} has the wrong shape", c.h)));
            }
            let m = CMatrix::from_fn(d.rows, d.cols, |i, j| Complex64::new(c.re[i][j], c.im[i][j]));
            s.add_coeff(c.h, &m);
        }
        Ok(s)
    }
}

/// File form of an operator: `(n, m, N, symbol)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatorData {
    pub n: usize,
    pub m: usize,
    pub order: usize,
    pub symbol: SymbolData,
}

impl ToeplitzBlockOperator {
    pub fn to_data(&self) -> Result<OperatorData> {
        let s = self.symbol.as_ref().ok_or_else(|| Error::Format("operator has no symbol to serialize".into()))?;
        Ok(OperatorData { n: self.n, m: self.m, order: self.order, symbol: s.into() })
    }

    pub fn from_data(d: &OperatorData) -> Result<Self> {
        let s = Symbol::try_from(&d.symbol)?;
        if (s.rows(), s.cols()) != (d.n, d.m) {
            return Err(Error::Format("operator block dims disagree with symbol".into()));
        }
        ToeplitzBlockOperator::from_symbol(s, d.order)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(&self.to_data()?)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let d: OperatorData = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        Self::from_data(&d)
    }

    /// Realized matrix as CSV rows of `re,im` pairs, for debugging.
    pub fn write_matrix_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
        for r in 0..self.matrix.nrows() {
            let row: Vec<String> = (0..self.matrix.ncols())
                .flat_map(|c| {
                    let z = self.matrix[(r, c)];
                    [format!("{:e}", z.re), format!("{:e}", z.im)]
                })
                .collect();
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phase::{FrequencyProfile, PhaseFunction};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn sin_h(p: i64) -> Symbol {
        Symbol::scalar(&[(p, c(0.0, -0.5)), (-p, c(0.0, 0.5))])
    }

    fn cos_h(p: i64) -> Symbol {
        Symbol::scalar(&[(p, c(0.5, 0.0)), (-p, c(0.5, 0.0))])
    }

    fn random_symbol(rng: &mut ChaCha8Rng, rows: usize, cols: usize, band: i64) -> Symbol {
        let mut s = Symbol::zeros(rows, cols);
        for h in -band..=band {
            s.insert(h, CMatrix::from_fn(rows, cols, |_, _| c(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))));
        }
        s
    }

    #[test]
    fn sin_has_two_diagonals() {
        let t = toeplitz_from_symbol(sin_h(4), 4).unwrap();
        let m = t.matrix();
        for r in 0..9 {
            for col in 0..9 {
                let d = r as i64 - col as i64;
                let expected = match d {
                    4 => c(0.0, -0.5),
                    -4 => c(0.0, 0.5),
                    _ => c(0.0, 0.0),
                };
                assert_eq!(m[(r, col)], expected, "entry ({r},{col})");
            }
        }
    }

    #[test]
    fn identity_symbol_is_identity() {
        let t = ToeplitzBlockOperator::identity(3, 2);
        assert_eq!(t.matrix(), &CMatrix::identity(15, 15));
    }

    #[test]
    fn cos_is_hermitian() {
        let t = toeplitz_from_symbol(cos_h(1), 3).unwrap();
        assert!(t.is_hermitian(1e-15));
        assert_eq!(t.matrix()[(1, 0)], c(0.5, 0.0));
        assert_eq!(t.matrix()[(0, 1)], c(0.5, 0.0));
        assert!(!toeplitz_from_symbol(sin_h(1), 3).unwrap().matrix()[(1, 0)].im.is_nan());
    }

    #[test]
    fn band_limit_enforced() {
        assert!(matches!(toeplitz_from_symbol(cos_h(5), 2), Err(Error::BandExceedsTruncation { band: 5, limit: 4 })));
    }

    #[test]
    fn sin_cos_product_is_half_sin2() {
        let n = 6;
        let a = toeplitz_from_symbol(sin_h(1), n).unwrap();
        let b = toeplitz_from_symbol(cos_h(1), n).unwrap();
        let p = toeplitz_product(&a, &b, ProductMode::Oversampled).unwrap();
        let expected = toeplitz_from_symbol(sin_h(2).scale(c(0.5, 0.0)), n).unwrap();
        assert!(max_abs(&(p.matrix() - expected.matrix())) < 1e-15);
    }

    #[test]
    fn product_with_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = ToeplitzBlockOperator::from_symbol(random_symbol(&mut rng, 2, 3, 2), 3).unwrap();
        let p = toeplitz_product(&a, &ToeplitzBlockOperator::identity(3, 3), ProductMode::Truncated).unwrap();
        assert!(max_abs(&(p.matrix() - a.matrix())) < 1e-15);
    }

    #[test]
    fn truncated_and_oversampled_agree_centrally() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (n, ba, bb) = (6usize, 2i64, 3i64);
        let a = ToeplitzBlockOperator::from_symbol(random_symbol(&mut rng, 2, 2, ba), n).unwrap();
        let b = ToeplitzBlockOperator::from_symbol(random_symbol(&mut rng, 2, 2, bb), n).unwrap();
        let t = toeplitz_product(&a, &b, ProductMode::Truncated).unwrap();
        let o = toeplitz_product(&a, &b, ProductMode::Oversampled).unwrap();
        let k = 2 * n + 1;
        let mut differs_at_edge = false;
        for i in 0..2 {
            for j in 0..2 {
                for r in 0..k {
                    for col in 0..k {
                        let d = (t.matrix()[(i * k + r, j * k + col)] - o.matrix()[(i * k + r, j * k + col)]).norm();
                        let kr = r as i64 - n as i64;
                        let kc = col as i64 - n as i64;
                        if kr.abs() <= n as i64 - ba || kc.abs() <= n as i64 - bb {
                            assert!(d < 1e-14, "central entry differs by {d}");
                        } else if d > 1e-12 {
                            differs_at_edge = true;
                        }
                    }
                }
            }
        }
        assert!(differs_at_edge);
    }

    #[test]
    fn norms() {
        assert!((ToeplitzBlockOperator::identity(2, 3).operator_norm() - 1.0).abs() < 1e-14);
        let s = toeplitz_from_symbol(sin_h(1), 20).unwrap();
        let nrm = s.operator_norm();
        assert!(nrm > 0.99 && nrm <= 1.0 + 1e-14, "{nrm}");
        let scaled = s.scale(c(0.0, -3.0)).operator_norm();
        assert!((scaled - 3.0 * nrm).abs() < 1e-12);
        // norm grows with N towards the L∞ norm
        let n5 = toeplitz_from_symbol(sin_h(1), 5).unwrap().operator_norm();
        assert!(n5 <= nrm + 1e-15);
    }

    #[test]
    fn derivative_operator_is_anti_hermitian() {
        let nmat = HarmonicDerivativeOperator::new(2, 3).matrix();
        assert!(max_abs(&(nmat.adjoint() + &nmat)) == 0.0);
        assert_eq!(nmat[(0, 0)], c(0.0, -3.0));
        assert_eq!(nmat[(13, 13)], c(0.0, 3.0));
    }

    #[test]
    fn derivative_commutator_is_toeplitz_of_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = random_symbol(&mut rng, 2, 2, 2);
        let n = 4;
        let t = ToeplitzBlockOperator::from_symbol(s.clone(), n).unwrap();
        let nm = HarmonicDerivativeOperator::new(2, n).matrix();
        let comm = &nm * t.matrix() - t.matrix() * &nm;
        let d = ToeplitzBlockOperator::from_symbol(s.derivative(), n).unwrap();
        assert!(max_abs(&(comm - d.matrix())) < 1e-13);
    }

    #[test]
    fn g_operator_constant_is_identity() {
        let g = g_operator(5.0, &Symbol::scalar(&[(0, c(5.0, 0.0))]), 4).unwrap();
        assert!(max_abs(&(g.matrix() - CMatrix::identity(9, 9))) < 1e-14);
    }

    #[test]
    fn g_operator_small_ripple_neumann() {
        // ω = w(1 + 0.01 cos θ) with ω(t) = w: G = (I + 0.01 T(cos))⁻¹
        let w = 10.0;
        let sym = Symbol::scalar(&[(0, c(w, 0.0)), (1, c(0.005 * w, 0.0)), (-1, c(0.005 * w, 0.0))]);
        let n = 5;
        let g = g_operator(w, &sym, n).unwrap();
        let tc = toeplitz_from_symbol(cos_h(1), n).unwrap();
        let second = tc.matrix() * tc.matrix() * c(1e-4, 0.0);
        let approx = CMatrix::identity(11, 11) - tc.matrix() * c(0.01, 0.0) + second;
        assert!(max_abs(&(g.matrix() - approx)) < 2e-6);
        let first_only = CMatrix::identity(11, 11) - tc.matrix() * c(0.01, 0.0);
        assert!(max_abs(&(g.matrix() - first_only)) < 2e-4);
    }

    #[test]
    fn g_operator_commutes_with_scalar_symbols_centrally() {
        let w = 10.0;
        let sym = Symbol::scalar(&[(0, c(w, 0.0)), (1, c(0.3, 0.1)), (-1, c(0.3, -0.1))]);
        let n = 24;
        let g = g_operator(w, &sym, n).unwrap();
        let a = toeplitz_from_symbol(cos_h(2), n).unwrap();
        let comm = g.matrix() * a.matrix() - a.matrix() * g.matrix();
        let central = 6;
        let lo = n - central;
        let block = comm.view((lo, lo), (2 * central + 1, 2 * central + 1));
        let worst = block.iter().fold(0.0f64, |m, z| m.max(z.norm()));
        assert!(worst < 1e-10, "{worst}");
    }

    #[test]
    fn singular_frequency_detected() {
        let sym = Symbol::scalar(&[(0, c(1.0, 0.0)), (1, c(0.5, 0.0)), (-1, c(0.5, 0.0))]);
        // 1 + cos θ vanishes at θ = π; high orders get ill-conditioned but stay PD
        assert!(g_operator(1.0, &sym, 2).is_ok());
        let neg = Symbol::scalar(&[(0, c(0.0, 0.0)), (1, c(0.5, 0.0)), (-1, c(0.5, 0.0))]);
        assert!(matches!(g_operator(1.0, &neg, 2), Err(Error::SingularFrequencyOperator { .. })));
    }

    fn ramp_evaluator(w0: f64, a: f64) -> PseudoPeriodEvaluator {
        PseudoPeriodEvaluator::new(PhaseFunction::new(FrequencyProfile::Ramp { omega0: w0, a }, 0.0, (-1.0, 5.0)).unwrap())
    }

    #[test]
    fn delta_zero_for_constant() {
        let ev = PseudoPeriodEvaluator::new(PhaseFunction::new(FrequencyProfile::Constant { omega0: 20.0 }, 0.0, (-1.0, 1.0)).unwrap());
        let d = delta_omega_operator(&ev, 0.5, 4).unwrap();
        assert!(max_abs(d.matrix()) < 1e-13);
    }

    #[test]
    fn delta_norm_bounded_by_epsilon() {
        let ev = ramp_evaluator(50.0, 5.0);
        let eps = ev.epsilon(0.0, 256).unwrap();
        let mut last = 0.0;
        for n in [5, 15, 30] {
            let nrm = delta_omega_operator(&ev, 0.0, n).unwrap().operator_norm();
            assert!(nrm <= eps * (1.0 + 1e-9), "N={n}: {nrm} > {eps}");
            assert!(nrm >= last - 1e-12);
            last = nrm;
        }
        // finite sections of the sawtooth-like symbol approach ε slowly
        assert!(last > 0.9 * eps, "{last} vs {eps}");
    }

    #[test]
    fn delta_matches_inverse_frequency_operator_centrally() {
        let ev = ramp_evaluator(50.0, 5.0);
        let n = 6;
        let big = 60;
        let d = delta_omega_operator(&ev, 0.0, n).unwrap();
        let g = g_operator_at(&ev, 0.0, big, 1).unwrap();
        let k = 2 * n + 1;
        let off = big - n;
        let central = g.matrix().view((off, off), (k, k)).into_owned() - CMatrix::identity(k, k);
        let err = max_abs(&(central - d.matrix()));
        assert!(err < 1e-5, "{err}");
        // with the Toeplitz operator of 1/ω the identity is exact
        let pf = ev.phase.clone();
        let inv = sfd_variable(&|tau: f64, o: &mut [f64]| o[0] = 1.0 / pf.omega_unchecked(tau), 1, &ev, 2 * n, 0.0).unwrap();
        let w = ev.phase.omega(0.0).unwrap();
        let t_inv = ToeplitzBlockOperator::from_symbol_clipped(inv.to_scalar_symbol(0), n);
        let direct = t_inv.matrix() * c(w, 0.0) - CMatrix::identity(k, k);
        assert!(max_abs(&(direct - d.matrix())) < 1e-12);
    }

    #[test]
    fn average_trace_values() {
        assert_eq!(average_trace(&ToeplitzBlockOperator::identity(3, 4)).unwrap(), 3.0);
        assert!(average_trace(&toeplitz_from_symbol(cos_h(1), 4).unwrap()).unwrap().abs() < 1e-15);
        let two_plus_cos = Symbol::scalar(&[(0, c(2.0, 0.0))]).add(&cos_h(1)).unwrap();
        assert!((average_trace(&toeplitz_from_symbol(two_plus_cos, 4).unwrap()).unwrap() - 2.0).abs() < 1e-15);
        assert!(matches!(average_trace(&toeplitz_from_symbol(sin_h(1).scale(c(0.0, 1.0)), 3).unwrap()), Err(Error::NotHermitian { .. })));
    }

    #[test]
    fn symbol_from_fn_recovers_coefficients() {
        let s = Symbol::from_real_fn(1, 1, 3, |th| DMatrix::from_element(1, 1, 0.2 + (3.0 * th).sin()));
        assert!((s.coeff(0)[(0, 0)] - c(0.2, 0.0)).norm() < 1e-14);
        assert!((s.coeff(3)[(0, 0)] - c(0.0, -0.5)).norm() < 1e-14);
        assert!(s.get(1).is_none());
        assert!(s.is_real(1e-14));
    }

    #[test]
    fn operator_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = ToeplitzBlockOperator::from_symbol(random_symbol(&mut rng, 2, 3, 2), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("op.json");
        a.save_json(&path).unwrap();
        let b = ToeplitzBlockOperator::load_json(&path).unwrap();
        assert_eq!(a, b);
        a.write_matrix_csv(&dir.path().join("op.csv")).unwrap();
    }

    proptest! {
        #[test]
        fn realized_blocks_are_toeplitz(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = ToeplitzBlockOperator::from_symbol(random_symbol(&mut rng, 2, 2, 3), 4).unwrap();
            prop_assert_eq!(a.diagonal_spread(4), 0.0);
        }

        #[test]
        fn adjoint_matches_pointwise_adjoint(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = random_symbol(&mut rng, 2, 3, 2);
            let a = ToeplitzBlockOperator::from_symbol(s.clone(), 3).unwrap();
            let b = ToeplitzBlockOperator::from_symbol(s.adjoint(), 3).unwrap();
            prop_assert!(max_abs(&(a.matrix().adjoint() - b.matrix())) == 0.0);
        }

        #[test]
        fn oversampled_product_is_exact(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sa = random_symbol(&mut rng, 2, 2, 2);
            let sb = random_symbol(&mut rng, 2, 1, 3);
            let n = 4;
            let a = ToeplitzBlockOperator::from_symbol(sa.clone(), n).unwrap();
            let b = ToeplitzBlockOperator::from_symbol(sb.clone(), n).unwrap();
            let p = toeplitz_product(&a, &b, ProductMode::Oversampled).unwrap();
            let direct = ToeplitzBlockOperator::from_symbol(sa.mul(&sb).unwrap(), n).unwrap();
            prop_assert!(max_abs(&(p.matrix() - direct.matrix())) <= 1e-14);
        }

        #[test]
        fn scalar_symbols_commute_centrally(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 10;
            let a = ToeplitzBlockOperator::from_symbol(random_symbol(&mut rng, 1, 1, 2), n).unwrap().kron_identity(2).unwrap();
            let b = ToeplitzBlockOperator::from_symbol(random_symbol(&mut rng, 1, 1, 3), n).unwrap().kron_identity(2).unwrap();
            let comm = toeplitz_product(&a, &b, ProductMode::Truncated).unwrap().matrix()
                - toeplitz_product(&b, &a, ProductMode::Truncated).unwrap().matrix();
            let k = 2 * n + 1;
            let mut worst: f64 = 0.0;
            for blk in 0..2 {
                for r in 5..=15 {
                    for col in 5..=15 {
                        worst = worst.max(comm[(blk * k + r, blk * k + col)].norm());
                    }
                }
            }
            prop_assert!(worst < 1e-10);
        }
    }
}
