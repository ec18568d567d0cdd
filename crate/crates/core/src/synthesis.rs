//! Harmonic Lyapunov feasibility and guaranteed-cost state-feedback
//! synthesis over truncated Toeplitz operators.
//!
//! Decision operators are Toeplitz by construction: every scalar decision
//! variable is one real or imaginary part of one Fourier coefficient entry,
//! so the realized matrices repeat along their block diagonals exactly.
//! When every data symbol is real in the phase domain the complex LMIs are
//! conjugated to real symmetric ones of the same size with the basis
//! `(X_0, √2 Re X_k, √2 Im X_k)`; otherwise the doubled real embedding is
//! used. If all data harmonics are multiples of `d`, the decision harmonics
//! are restricted to multiples of `d` and every LMI separates into `d`
//! independent cones.

use std::f64::consts::FRAC_1_SQRT_2;
use std::path::Path;
use std::time::Instant;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::harmonic_model::{retained_indices, AfmLppSystem, ModelFile};
use crate::numerics::{hermitian_asymmetry, hermitian_extreme_eigs, max_abs, CMatrix, J};
use crate::sdp::{default_backend, LmiBlock, SdpBackend, SdpProblem, SdpSolution, SdpStatus, SymTerm};
use crate::toeplitz::{gcd, Symbol, SymbolData, ToeplitzBlockOperator};

pub const SYNTHESIS_FILE_VERSION: u32 = 1;

type Triplets = Vec<(usize, usize, Complex64)>;

const ONE: Complex64 = Complex64::new(1.0, 0.0);

/// One scalar decision variable: a unit perturbation of selected symbol
/// entries `(h, row, col, coefficient)`.
#[derive(Clone, Debug)]
struct Param {
    entries: Vec<(i64, usize, usize, Complex64)>,
}

impl Param {
    fn one(entries: Vec<(i64, usize, usize, Complex64)>) -> Self {
        let mut e = entries;
        e.sort_by_key(|a| (a.0, a.1, a.2));
        e.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1 && a.2 == b.2);
        Param { entries: e }
    }

    /// Realized sparse matrix of the unit perturbation.
    fn realize(&self, order: usize) -> Triplets {
        let k = 2 * order + 1;
        let mut out = Vec::new();
        for &(h, a, b, c) in &self.entries {
            for r in 0..k {
                let col = r as i64 - h;
                if col >= 0 && (col as usize) < k {
                    out.push((a * k + r, b * k + col as usize, c));
                }
            }
        }
        out
    }
}

/// Parameters of a Hermitian Toeplitz operator with the given nonnegative
/// harmonics.
fn hermitian_params(n: usize, harmonics: &[i64], real: bool) -> Vec<Param> {
    let mut out = Vec::new();
    for &h in harmonics {
        if h == 0 {
            for a in 0..n {
                for b in a..n {
                    out.push(Param::one(vec![(0, a, b, ONE), (0, b, a, ONE)]));
                    if !real && a < b {
                        out.push(Param::one(vec![(0, a, b, J), (0, b, a, -J)]));
                    }
                }
            }
        } else if real {
            // S_h complex symmetric, S_{-h} = conj(S_h)
            for a in 0..n {
                for b in a..n {
                    out.push(Param::one(vec![(h, a, b, ONE), (h, b, a, ONE), (-h, a, b, ONE), (-h, b, a, ONE)]));
                    out.push(Param::one(vec![(h, a, b, J), (h, b, a, J), (-h, a, b, -J), (-h, b, a, -J)]));
                }
            }
        } else {
            for a in 0..n {
                for b in 0..n {
                    out.push(Param::one(vec![(h, a, b, ONE), (-h, b, a, ONE)]));
                    out.push(Param::one(vec![(h, a, b, J), (-h, b, a, -J)]));
                }
            }
        }
    }
    out
}

/// Drops parameters that touch no retained entry: harmonic h links row
/// component a and column component b only if |h| ≤ orders a + b.
fn prune(params: Vec<Param>, row_orders: &[usize], col_orders: &[usize]) -> Vec<Param> {
    params
        .into_iter()
        .filter(|p| p.entries.iter().any(|&(h, a, b, _)| h.unsigned_abs() as usize <= row_orders[a] + col_orders[b]))
        .collect()
}

/// Parameters of a general `rows × cols` Toeplitz operator.
fn general_params(rows: usize, cols: usize, harmonics: &[i64], real: bool) -> Vec<Param> {
    let mut out = Vec::new();
    for &h in harmonics {
        for a in 0..rows {
            for b in 0..cols {
                if h == 0 {
                    out.push(Param::one(vec![(0, a, b, ONE)]));
                    if !real {
                        out.push(Param::one(vec![(0, a, b, J)]));
                    }
                } else if real {
                    out.push(Param::one(vec![(h, a, b, ONE), (-h, a, b, ONE)]));
                    out.push(Param::one(vec![(h, a, b, J), (-h, a, b, -J)]));
                } else {
                    for s in [h, -h] {
                        out.push(Param::one(vec![(s, a, b, ONE)]));
                        out.push(Param::one(vec![(s, a, b, J)]));
                    }
                }
            }
        }
    }
    out
}

fn symbol_from(params: &[Param], values: &[f64], rows: usize, cols: usize) -> Symbol {
    let mut s = Symbol::zeros(rows, cols);
    for (p, &v) in params.iter().zip(values) {
        for &(h, a, b, c) in &p.entries {
            let mut m = CMatrix::zeros(rows, cols);
            m[(a, b)] = c * v;
            s.add_coeff(h, &m);
        }
    }
    s
}

/// Nonnegative decision harmonics: multiples of `d` up to `band`.
fn decision_harmonics(band: usize, d: u64) -> Vec<i64> {
    if d == 0 {
        return vec![0];
    }
    (0..=band as i64).filter(|h| h % d as i64 == 0).collect()
}

/// Column-wise nonzeros of a dense matrix.
fn column_lists(m: &CMatrix) -> Vec<Vec<(usize, Complex64)>> {
    let tol = 1e-15 * max_abs(m).max(1e-300);
    (0..m.ncols())
        .map(|c| m.column(c).iter().enumerate().filter(|(_, v)| v.norm() > tol).map(|(r, v)| (r, *v)).collect())
        .collect()
}

/// Entries of `scale · A E` placed at `(row_off, col_off)`.
fn left_mul(a_cols: &[Vec<(usize, Complex64)>], e: &Triplets, row_off: usize, col_off: usize, scale: Complex64, out: &mut Triplets) {
    for &(r, c, v) in e {
        for &(i, a) in &a_cols[r] {
            out.push((row_off + i, col_off + c, scale * a * v));
        }
    }
}

fn compress(t: &mut Triplets) {
    t.sort_by_key(|a| (a.1, a.0));
    let mut out: Triplets = Vec::with_capacity(t.len());
    for &(r, c, v) in t.iter() {
        match out.last_mut() {
            Some(l) if l.0 == r && l.1 == c => l.2 += v,
            _ => out.push((r, c, v)),
        }
    }
    out.retain(|e| e.2.norm() > 0.0);
    *t = out;
}

/// Maps complex Hermitian LMIs `P̃ + P̃*` (rows made of harmonic vectors of
/// a common order) to real symmetric ones.
#[derive(Clone, Debug)]
struct RealMap {
    order: usize,
    dim: usize,
    real: bool,
    /// Real index → index in the restricted block (`usize::MAX`: dropped),
    /// present when some component is truncated below `order`.
    keep: Option<Vec<usize>>,
    kept: usize,
}

impl RealMap {
    /// Layout of consecutive components, each with `2·order + 1` harmonics
    /// of which |k| ≤ `comps[i]` are kept.
    fn new(order: usize, comps: &[usize], real: bool) -> Self {
        let k2 = 2 * order + 1;
        let dim = comps.len() * k2;
        let full = if real { dim } else { 2 * dim };
        if comps.iter().all(|&c| c == order) {
            return RealMap { order, dim, real, keep: None, kept: full };
        }
        let mut keep = vec![usize::MAX; full];
        let mut next = 0;
        for (p, slot) in keep.iter_mut().enumerate() {
            let g = p % dim;
            let k = if real { (g % k2).div_ceil(2) } else { (g % k2).abs_diff(order) };
            if k <= comps[g / k2] {
                *slot = next;
                next += 1;
            }
        }
        RealMap { order, dim, real, keep: Some(keep), kept: next }
    }

    #[cfg(test)]
    fn uniform(order: usize, dim: usize, real: bool) -> Self {
        RealMap::new(order, &vec![order; dim / (2 * order + 1)], real)
    }

    fn real_dim(&self) -> usize {
        self.kept
    }

    /// Nonzeros of row `g` of the unitary basis change.
    fn weights(&self, g: usize) -> ([(usize, Complex64); 2], usize) {
        let k2 = 2 * self.order + 1;
        let k = (g % k2) as i64 - self.order as i64;
        let base = g - (g % k2);
        let s = FRAC_1_SQRT_2;
        match k {
            0 => ([(base, ONE), (0, ONE)], 1),
            k if k > 0 => {
                let k = k as usize;
                ([(base + 2 * k - 1, Complex64::new(s, 0.0)), (base + 2 * k, Complex64::new(0.0, s))], 2)
            }
            k => {
                let k = k.unsigned_abs() as usize;
                ([(base + 2 * k - 1, Complex64::new(s, 0.0)), (base + 2 * k, Complex64::new(0.0, -s))], 2)
            }
        }
    }

    fn map(&self, t: &Triplets) -> SymTerm {
        let mut out = SymTerm::new();
        if self.real {
            for &(r, c, v) in t {
                let (wr, nr) = self.weights(r);
                let (wc, nc) = self.weights(c);
                for &(p, a) in &wr[..nr] {
                    for &(q, b) in &wc[..nc] {
                        let val = (a.conj() * v * b).re;
                        if val.abs() > 1e-300 {
                            out.add_half(p, q, val);
                        }
                    }
                }
            }
        } else {
            let d = self.dim;
            for &(r, c, v) in t {
                out.add_half(r, c, v.re);
                out.add_half(r + d, c + d, v.re);
                out.add_half(r, c + d, -v.im);
                out.add_half(r + d, c, v.im);
            }
        }
        out.compress();
        if let Some(keep) = &self.keep {
            let mut r = SymTerm::new();
            for &(a, b, v) in &out.entries {
                if keep[a] != usize::MAX && keep[b] != usize::MAX {
                    r.add_half(keep[a], keep[b], v);
                }
            }
            r.compress();
            return r;
        }
        out
    }

    /// Dense complex Hermitian value back from the real block value.
    #[cfg(test)]
    fn complex_of(&self, m: &DMatrix<f64>) -> CMatrix {
        if self.real {
            let mut w = CMatrix::zeros(self.dim, self.dim);
            for g in 0..self.dim {
                let (ws, n) = self.weights(g);
                for &(p, a) in &ws[..n] {
                    w[(g, p)] = a;
                }
            }
            let mc = m.map(|x| Complex64::new(x, 0.0));
            &w * mc * w.adjoint()
        } else {
            let d = self.dim;
            let re = m.view((0, 0), (d, d));
            let im = m.view((d, 0), (d, d));
            CMatrix::from_fn(d, d, |r, c| Complex64::new(re[(r, c)], im[(r, c)]))
        }
    }
}

/// `[[Re H, −Im H], [Im H, Re H]]`: real symmetric of doubled size whose
/// spectrum is that of `H` with doubled multiplicity.
pub fn complex_to_real_embedding(h: &CMatrix) -> Result<DMatrix<f64>> {
    if h.nrows() != h.ncols() {
        return Err(Error::NotHermitian { asymmetry: f64::INFINITY });
    }
    let asym = hermitian_asymmetry(h);
    if asym > 1e-10 * (1.0 + max_abs(h)) {
        return Err(Error::NotHermitian { asymmetry: asym });
    }
    let n = h.nrows();
    let mut out = DMatrix::zeros(2 * n, 2 * n);
    for r in 0..n {
        for c in 0..n {
            let v = h[(r, c)];
            out[(r, c)] = v.re;
            out[(r + n, c + n)] = v.re;
            out[(r, c + n)] = -v.im;
            out[(r + n, c)] = v.im;
        }
    }
    Ok(out)
}

/// Fourier coefficients of a phase-periodic gain K(θ) = Σ K_h e^{jhθ}.
#[derive(Clone, Debug, PartialEq)]
pub struct PeriodicGain {
    pub symbol: Symbol,
    pub band: usize,
    /// Largest spread of the realized diagonals over the central band,
    /// relative to the largest entry. Zero for an exactly Toeplitz gain.
    pub toeplitz_residual: f64,
}

impl PeriodicGain {
    pub fn from_symbol(symbol: Symbol) -> Self {
        let band = symbol.band();
        PeriodicGain { symbol, band, toeplitz_residual: 0.0 }
    }

    pub fn rows(&self) -> usize {
        self.symbol.rows()
    }

    pub fn cols(&self) -> usize {
        self.symbol.cols()
    }

    pub fn eval(&self, theta: f64) -> CMatrix {
        self.symbol.eval(theta)
    }

    /// Real part of K(θ); exact when K_{−h} = conj(K_h).
    pub fn eval_real(&self, theta: f64) -> DMatrix<f64> {
        self.symbol.eval_real(theta)
    }

    /// Columns `c0..c0+len` of the gain as a gain of its own.
    pub fn columns(&self, c0: usize, len: usize) -> PeriodicGain {
        let mut s = Symbol::zeros(self.rows(), len);
        for (h, m) in self.symbol.harmonics() {
            s.insert(h, m.columns(c0, len).into_owned());
        }
        PeriodicGain { symbol: s, band: self.band, toeplitz_residual: self.toeplitz_residual }
    }
}

/// Reads K_h off the central rows of each block of a realized operator,
/// averaging each diagonal over the central band, and symmetrizes
/// `K_{−h} = conj(K_h)` when the operator commutes with conjugate reversal.
pub fn reconstruct_periodic_gain(k: &ToeplitzBlockOperator) -> PeriodicGain {
    reconstruct_gain_with_orders(k, None)
}

/// As [`reconstruct_periodic_gain`] for an operator whose column component
/// `j` only carries harmonics |k| ≤ `col_orders[j]`.
fn reconstruct_gain_with_orders(k: &ToeplitzBlockOperator, col_orders: Option<&[usize]>) -> PeriodicGain {
    let (rows, cols) = k.block_dims();
    let order = k.order() as i64;
    let k2 = (2 * order + 1) as usize;
    let mat = k.matrix();
    let central = order / 2;
    let scale = max_abs(mat).max(1e-300);
    let mut symbol = Symbol::zeros(rows, cols);
    let mut spread: f64 = 0.0;
    for h in -order..=order {
        let mut coeff = CMatrix::zeros(rows, cols);
        for j in 0..cols {
            let oj = col_orders.map_or(order, |o| o[j] as i64);
            // rows r (harmonic index) with |r| <= central and r - h in range
            let mut idx: Vec<i64> = (-central..=central).filter(|r| (r - h).abs() <= oj).collect();
            if idx.is_empty() {
                let r = if h > 0 { h - oj } else { h + oj };
                if r.abs() > order {
                    continue;
                }
                idx.push(r);
            }
            for i in 0..rows {
                let vals: Vec<Complex64> = idx
                    .iter()
                    .map(|r| mat[(i * k2 + (r + order) as usize, j * k2 + (r - h + order) as usize)])
                    .collect();
                let mean = vals.iter().sum::<Complex64>() / vals.len() as f64;
                for v in &vals {
                    spread = spread.max((v - mean).norm() / scale);
                }
                coeff[(i, j)] = mean;
            }
        }
        symbol.insert(h, coeff);
    }
    let realish = (-order..=order).all(|h| {
        let d = symbol.coeff(h) - symbol.coeff(-h).map(|z| z.conj());
        max_abs(&d) <= 1e-6 * scale
    });
    if realish {
        let mut sym = Symbol::zeros(rows, cols);
        for h in -order..=order {
            let avg = (symbol.coeff(h) + symbol.coeff(-h).map(|z| z.conj())) * Complex64::new(0.5, 0.0);
            sym.insert(h, avg);
        }
        symbol = sym;
    }
    let band = symbol.band();
    PeriodicGain { symbol, band, toeplitz_residual: spread }
}

/// Shared description of the data of a harmonic LMI problem.
struct Setup {
    n: usize,
    order: usize,
    real: bool,
    d: u64,
    /// Truncation order per state component.
    orders: Vec<usize>,
}

impl Setup {
    fn retained(&self) -> Vec<usize> {
        retained_indices(&self.orders, self.order)
    }

    fn is_uniform(&self) -> bool {
        self.orders.iter().all(|&o| o == self.order)
    }
}

/// Zeroes the state rows (and, for square operators, columns) outside the
/// retained harmonics so that products stay within the truncated space.
fn mask_state(m: &CMatrix, keep: &[usize], square: bool) -> CMatrix {
    let mut flag = vec![false; m.nrows()];
    for &i in keep {
        flag[i] = true;
    }
    let mut out = m.clone();
    for (r, _) in flag.iter().enumerate().filter(|(_, f)| !**f) {
        out.row_mut(r).fill(Complex64::new(0.0, 0.0));
    }
    if square {
        for (c, _) in flag.iter().enumerate().filter(|(_, f)| !**f) {
            out.column_mut(c).fill(Complex64::new(0.0, 0.0));
        }
    }
    out
}

fn select(m: &CMatrix, rows: &[usize], cols: &[usize]) -> CMatrix {
    CMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

fn setup_from_symbols(symbols: &[&Symbol], n: usize, order: usize) -> Setup {
    let tol = 1e-12 * symbols.iter().map(|s| s.harmonics().map(|(_, m)| max_abs(m)).fold(0.0, f64::max)).fold(1.0, f64::max);
    let real = symbols.iter().all(|s| s.is_real(tol));
    let d = symbols.iter().fold(0u64, |g, s| gcd(g, s.harmonic_gcd()));
    Setup { n, order, real, d, orders: vec![order; n] }
}

fn solve_problem(p: &SdpProblem, backend: &dyn SdpBackend) -> Result<SdpSolution> {
    let sol = p.solve_with(backend)?;
    match sol.status {
        s if s.is_solved() => Ok(sol),
        SdpStatus::Infeasible => {
            let cert: Vec<String> = sol.duals.iter().map(|x| format!("{:.3e}", x.trace())).collect();
            Err(Error::Infeasible(format!(
                "{} backend found a dual certificate (block traces [{}])",
                sol.backend,
                cert.join(", ")
            )))
        }
        s => Err(Error::SolverFailure(format!(
            "{} backend stopped with {:?} after {} iterations (gap {:.2e}, residuals {:.2e}/{:.2e})",
            sol.backend, s, sol.iterations, sol.gap, sol.primal_residual, sol.dual_residual
        ))),
    }
}

/// Result of a harmonic Lyapunov feasibility problem.
#[derive(Clone, Debug)]
pub struct LyapunovCertificate {
    pub p: ToeplitzBlockOperator,
    /// Largest eigenvalue of 𝓟𝓐(ω_i) + 𝓐(ω_i)*𝓟 per vertex.
    pub vertex_max_eigs: Vec<f64>,
    pub min_eig: f64,
}

/// Core Lyapunov solve on realized vertex operators `𝓐(ω_i)` (each already
/// containing −ω_i𝓝). Finds Toeplitz Hermitian 𝓟 ⪰ γ'I with every vertex
/// inequality ⪯ −γ'I, γ' = max(γ, 1), minimizing Tr₀(𝓟).
fn lyapunov_core(vertices: &[CMatrix], setup: &Setup, band: usize, gamma: f64, backend: &dyn SdpBackend) -> Result<LyapunovCertificate> {
    let (n, order) = (setup.n, setup.order);
    let params = prune(hermitian_params(n, &decision_harmonics(band.min(2 * order), setup.d), setup.real), &setup.orders, &setup.orders);
    let map = RealMap::new(order, &setup.orders, setup.real);
    let rdim = map.real_dim();
    let keep = setup.retained();
    let vertices: Vec<CMatrix> = vertices.iter().map(|a| if setup.is_uniform() { a.clone() } else { mask_state(a, &keep, true) }).collect();
    let mut prob = SdpProblem::new(params.len());
    for (i, p) in params.iter().enumerate() {
        prob.objective[i] = p.entries.iter().filter(|e| e.0 == 0 && e.1 == e.2).map(|e| e.3.re).sum();
    }
    let realized: Vec<Triplets> = params.iter().map(|p| p.realize(order)).collect();
    let half_identity = |scale: f64| {
        let mut t = SymTerm::new();
        for r in 0..rdim {
            t.add_half(r, r, 0.5 * scale);
        }
        t
    };
    for a in &vertices {
        // −(𝓟𝓐 + 𝓐*𝓟) − I ⪰ 0 written as P̃ = −𝓐*E
        let a_adj_cols = column_lists(&a.adjoint());
        let mut blk = LmiBlock::new(rdim);
        blk.constant = half_identity(-1.0);
        for (i, e) in realized.iter().enumerate() {
            let mut t = Triplets::new();
            left_mul(&a_adj_cols, e, 0, 0, -ONE, &mut t);
            compress(&mut t);
            blk.terms.push((i, map.map(&t)));
        }
        prob.blocks.push(blk);
    }
    let mut pos = LmiBlock::new(rdim);
    pos.constant = half_identity(-1.0);
    for (i, e) in realized.iter().enumerate() {
        let t: Triplets = e.iter().map(|&(r, c, v)| (r, c, v * 0.5)).collect();
        pos.terms.push((i, map.map(&t)));
    }
    prob.blocks.push(pos);
    let sol = solve_problem(&prob, backend)?;
    let scale = gamma.max(1.0);
    let y: Vec<f64> = sol.y.iter().map(|v| v * scale).collect();
    let p_sym = symbol_from(&params, &y, n, n);
    let p = ToeplitzBlockOperator::from_symbol_clipped(p_sym, order);
    let pr = select(p.matrix(), &keep, &keep);
    let vertex_max_eigs = vertices
        .iter()
        .map(|a| {
            let l = &pr * select(a, &keep, &keep);
            hermitian_extreme_eigs(&(&l + l.adjoint())).1
        })
        .collect();
    let min_eig = hermitian_extreme_eigs(&pr).0;
    Ok(LyapunovCertificate { p, vertex_max_eigs, min_eig })
}

/// Toeplitz Hermitian 𝓟 ≻ γI with 𝓟(𝓐₀ + ω_i(𝓐₁ − 𝓝)) + (·)* ⪯ −γI at
/// ω_i ∈ {ω_min, ω_max}.
pub fn vertex_lyapunov_feasibility(a0: &Symbol, a1: &Symbol, omega_min: f64, omega_max: f64, order: usize, gamma: f64) -> Result<LyapunovCertificate> {
    let backend = default_backend()?;
    vertex_lyapunov_feasibility_with(a0, a1, omega_min, omega_max, order, gamma, backend.as_ref())
}

pub fn vertex_lyapunov_feasibility_with(
    a0: &Symbol,
    a1: &Symbol,
    omega_min: f64,
    omega_max: f64,
    order: usize,
    gamma: f64,
    backend: &dyn SdpBackend,
) -> Result<LyapunovCertificate> {
    let n = a0.rows();
    let sys = AfmLppSystem::new(a0.clone(), a1.clone(), Symbol::zeros(n, 1), Symbol::zeros(n, 1), order, (omega_min, omega_max))?;
    let setup = setup_from_symbols(&[a0, a1], n, order);
    let vertices = [sys.vertex_state(omega_min), sys.vertex_state(omega_max)];
    lyapunov_core(&vertices, &setup, order, gamma, backend)
}

/// Synthesis options beyond the model and weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisOptions {
    /// Strictness margin; default 1e-6 times the largest vertex entry.
    pub gamma: Option<f64>,
    /// Harmonic band of 𝓢 (default: the truncation order).
    pub s_band: Option<usize>,
    /// Harmonic band of 𝓨 (default: the truncation order).
    pub y_band: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VertexResidual {
    pub omega: f64,
    /// λmax(Ξ + 𝓨*𝓡𝓨 + 𝓢𝓠𝓢), expected ≤ −γ.
    pub lmi_max_eig: f64,
    /// λmax(𝓟𝓐_cl + 𝓐_cl*𝓟) with 𝓟 = 𝓢⁻¹ and 𝓐_cl = 𝓐 − 𝓑𝓚.
    pub closed_loop_max_eig: f64,
}

#[derive(Clone, Debug)]
pub struct SynthesisResult {
    pub s: ToeplitzBlockOperator,
    pub y: ToeplitzBlockOperator,
    pub m: ToeplitzBlockOperator,
    /// Realized 𝓨𝓢⁻¹ (not Toeplitz in general).
    pub k: ToeplitzBlockOperator,
    pub gain: PeriodicGain,
    pub cost: f64,
    pub gamma: f64,
    pub s_min_eig: f64,
    pub vertices: Vec<VertexResidual>,
    pub status: SdpStatus,
    pub backend: String,
    pub iterations: usize,
    pub solve_seconds: f64,
    pub config_hash: String,
    /// Truncation order per augmented state component.
    pub component_orders: Vec<usize>,
}

fn sqrt_hermitian(m: &CMatrix) -> Result<CMatrix> {
    let asym = hermitian_asymmetry(m);
    if asym > 1e-10 * (1.0 + max_abs(m)) {
        return Err(Error::NotHermitian { asymmetry: asym });
    }
    let eig = ((m + m.adjoint()) * Complex64::new(0.5, 0.0)).symmetric_eigen();
    let lmin = eig.eigenvalues.min();
    if lmin <= 0.0 {
        return Err(Error::PosdefCheckFailed { min_eig: lmin, threshold: 0.0 });
    }
    let d = CMatrix::from_diagonal(&eig.eigenvalues.map(|l| Complex64::new(l.sqrt(), 0.0)));
    Ok(&eig.eigenvectors * d * eig.eigenvectors.adjoint())
}

fn config_hash(sys: &AfmLppSystem, q: &Symbol, r: &Symbol, opts: &SynthesisOptions) -> String {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&ModelFile::from_system(sys)).unwrap_or_default());
    h.update(serde_json::to_vec(&SymbolData::from(q)).unwrap_or_default());
    h.update(serde_json::to_vec(&SymbolData::from(r)).unwrap_or_default());
    h.update(serde_json::to_vec(opts).unwrap_or_default());
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Guaranteed-cost state feedback: minimizes Tr₀(𝓜) subject to the vertex
/// LMIs in (𝓢, 𝓨) and [[𝓜, I], [I, 𝓢]] ⪰ γI; returns 𝓚 = 𝓨𝓢⁻¹ for the
/// law U = −𝓚X. Pass `aug.system()` for a system with forwarding states.
pub fn synthesize_state_feedback(sys: &AfmLppSystem, q: &Symbol, r: &Symbol, opts: &SynthesisOptions) -> Result<SynthesisResult> {
    let backend = default_backend()?;
    synthesize_state_feedback_with(sys, q, r, opts, backend.as_ref())
}

pub fn synthesize_state_feedback_with(
    sys: &AfmLppSystem,
    q: &Symbol,
    r: &Symbol,
    opts: &SynthesisOptions,
    backend: &dyn SdpBackend,
) -> Result<SynthesisResult> {
    let (n, m, order) = (sys.n(), sys.m(), sys.order());
    if (q.rows(), q.cols()) != (n, n) || (r.rows(), r.cols()) != (m, m) {
        return Err(Error::DimensionMismatch(format!(
            "weights Q {}x{} and R {}x{} for n = {n}, m = {m}",
            q.rows(),
            q.cols(),
            r.rows(),
            r.cols()
        )));
    }
    if !q.is_hermitian(1e-12) || !r.is_hermitian(1e-12) {
        return Err(Error::NotHermitian { asymmetry: f64::NAN });
    }
    let started = Instant::now();
    let k2 = 2 * order + 1;
    let (dn, dm) = (n * k2, m * k2);
    let [a0, a1, b0, b1] = sys.symbols();
    let mut setup = setup_from_symbols(&[a0, a1, b0, b1, q, r], n, order);
    setup.orders = sys.component_orders().to_vec();
    let keep = setup.retained();
    let (wmin, wmax) = sys.omega_range();
    let omegas = [wmin, wmax];
    let a_v: Vec<CMatrix> = omegas.iter().map(|&w| mask_state(&sys.vertex_state(w), &keep, true)).collect();
    let b_v: Vec<CMatrix> = omegas.iter().map(|&w| mask_state(&sys.vertex_input(w), &keep, false)).collect();
    let gamma = opts.gamma.unwrap_or_else(|| {
        1e-6 * a_v.iter().chain(&b_v).map(max_abs).fold(0.0, f64::max).max(1e-300)
    });
    let q_op = ToeplitzBlockOperator::from_symbol(q.clone(), order)?;
    let r_op = ToeplitzBlockOperator::from_symbol(r.clone(), order)?;
    let q_half = {
        let half = sqrt_hermitian(&select(q_op.matrix(), &keep, &keep))?;
        let mut full = CMatrix::zeros(dn, dn);
        for (a, &i) in keep.iter().enumerate() {
            for (b, &j) in keep.iter().enumerate() {
                full[(i, j)] = half[(a, b)];
            }
        }
        full
    };
    let r_half = sqrt_hermitian(r_op.matrix())?;

    let s_band = opts.s_band.unwrap_or(order).min(2 * order);
    let y_band = opts.y_band.unwrap_or(order).min(2 * order);
    let inputs = vec![order; m];
    let s_params = prune(hermitian_params(n, &decision_harmonics(s_band, setup.d), setup.real), &setup.orders, &setup.orders);
    let y_params = prune(general_params(m, n, &decision_harmonics(y_band, setup.d), setup.real), &inputs, &setup.orders);
    let m_params = hermitian_params(n, &[0], setup.real);
    let (ns, ny, nm) = (s_params.len(), y_params.len(), m_params.len());
    let mut prob = SdpProblem::new(ns + ny + nm);
    for (i, p) in m_params.iter().enumerate() {
        prob.objective[ns + ny + i] = p.entries.iter().filter(|e| e.1 == e.2).map(|e| e.3.re).sum();
    }
    let s_real: Vec<Triplets> = s_params.iter().map(|p| p.realize(order)).collect();
    let y_real: Vec<Triplets> = y_params.iter().map(|p| p.realize(order)).collect();
    let m_real: Vec<Triplets> = m_params.iter().map(|p| p.realize(order)).collect();

    // vertex LMIs: [[−Ξ − γI, ·, ·], [𝓡½𝓨, I, 0], [𝓠½𝓢, 0, I]] ⪰ 0
    let vdim = 2 * dn + dm;
    let vcomps: Vec<usize> = setup.orders.iter().copied().chain(std::iter::repeat_n(order, m)).chain(setup.orders.iter().copied()).collect();
    let vmap = RealMap::new(order, &vcomps, setup.real);
    let q_cols = column_lists(&q_half);
    let r_cols = column_lists(&r_half);
    for (a, b) in a_v.iter().zip(&b_v) {
        let a_cols = column_lists(a);
        let b_cols = column_lists(b);
        let mut blk = LmiBlock::new(vmap.real_dim());
        let mut c: Triplets = (0..dn).map(|i| (i, i, Complex64::new(-0.5 * gamma, 0.0))).collect();
        c.extend((dn..vdim).map(|i| (i, i, Complex64::new(0.5, 0.0))));
        blk.constant = vmap.map(&c);
        for (i, e) in s_real.iter().enumerate() {
            let mut t = Triplets::new();
            left_mul(&a_cols, e, 0, 0, -ONE, &mut t);
            left_mul(&q_cols, e, dn + dm, 0, ONE, &mut t);
            compress(&mut t);
            blk.terms.push((i, vmap.map(&t)));
        }
        for (i, e) in y_real.iter().enumerate() {
            let mut t = Triplets::new();
            left_mul(&b_cols, e, 0, 0, ONE, &mut t);
            left_mul(&r_cols, e, dn, 0, ONE, &mut t);
            compress(&mut t);
            blk.terms.push((ns + i, vmap.map(&t)));
        }
        prob.blocks.push(blk);
    }
    // coupling [[𝓜, I], [I, 𝓢]] − γI ⪰ 0
    let ccomps: Vec<usize> = setup.orders.iter().chain(&setup.orders).copied().collect();
    let cmap = RealMap::new(order, &ccomps, setup.real);
    let mut cpl = LmiBlock::new(cmap.real_dim());
    let mut c: Triplets = (0..2 * dn).map(|i| (i, i, Complex64::new(-0.5 * gamma, 0.0))).collect();
    c.extend((0..dn).map(|i| (dn + i, i, ONE)));
    cpl.constant = cmap.map(&c);
    for (i, e) in s_real.iter().enumerate() {
        let t: Triplets = e.iter().map(|&(r, c, v)| (dn + r, dn + c, v * 0.5)).collect();
        cpl.terms.push((i, cmap.map(&t)));
    }
    for (i, e) in m_real.iter().enumerate() {
        let t: Triplets = e.iter().map(|&(r, c, v)| (r, c, v * 0.5)).collect();
        cpl.terms.push((ns + ny + i, cmap.map(&t)));
    }
    prob.blocks.push(cpl);

    let sol = match prob.solve_with(backend) {
        Ok(s) if s.status.is_solved() => s,
        Ok(s) => return Err(classify_failure(&s, &a_v, &b_v, &setup, backend)),
        Err(e) => return Err(e),
    };

    let s_sym = symbol_from(&s_params, &sol.y[..ns], n, n);
    let y_sym = symbol_from(&y_params, &sol.y[ns..ns + ny], m, n);
    let m_sym = symbol_from(&m_params, &sol.y[ns + ny..], n, n);
    let s_op = ToeplitzBlockOperator::from_symbol_clipped(s_sym, order);
    let y_op = ToeplitzBlockOperator::from_symbol_clipped(y_sym, order);
    let m_op = ToeplitzBlockOperator::from_symbol_clipped(m_sym, order);
    let all_inputs: Vec<usize> = (0..dm).collect();
    let s_r = select(s_op.matrix(), &keep, &keep);
    let y_r = select(y_op.matrix(), &all_inputs, &keep);
    let s_min_eig = hermitian_extreme_eigs(&s_r).0;
    if s_min_eig < 0.5 * gamma {
        return Err(Error::PosdefCheckFailed { min_eig: s_min_eig, threshold: 0.5 * gamma });
    }
    let s_chol = nalgebra::Cholesky::new(s_r.clone()).ok_or(Error::PosdefCheckFailed { min_eig: s_min_eig, threshold: 0.5 * gamma })?;
    let p_mat = s_chol.inverse();
    let k_r = &y_r * &p_mat;
    let mut k_mat = CMatrix::zeros(dm, dn);
    for (a, &j) in keep.iter().enumerate() {
        k_mat.set_column(j, &k_r.column(a));
    }
    let k_op = ToeplitzBlockOperator::from_matrix(m, n, order, k_mat)?;
    let gain = reconstruct_gain_with_orders(&k_op, (!setup.is_uniform()).then_some(&setup.orders[..]));

    let q_r = select(q_op.matrix(), &keep, &keep);
    let sqs = &s_r * q_r * &s_r;
    let yry = y_r.adjoint() * r_op.matrix() * &y_r;
    let mut vertices = Vec::new();
    for ((a, b), &w) in a_v.iter().zip(&b_v).zip(&omegas) {
        let (a, b) = (select(a, &keep, &keep), select(b, &keep, &all_inputs));
        let asb = &a * &s_r - &b * &y_r;
        let xi = &asb + asb.adjoint();
        let lmi_max_eig = hermitian_extreme_eigs(&(&xi + &yry + &sqs)).1;
        let acl = a - b * &k_r;
        let l = &p_mat * acl;
        let closed_loop_max_eig = hermitian_extreme_eigs(&(&l + l.adjoint())).1;
        vertices.push(VertexResidual { omega: w, lmi_max_eig, closed_loop_max_eig });
    }
    let cost = m_op.matrix().trace().re / k2 as f64;
    Ok(SynthesisResult {
        s: s_op,
        y: y_op,
        m: m_op,
        k: k_op,
        gain,
        cost,
        gamma,
        s_min_eig,
        vertices,
        status: sol.status,
        backend: sol.backend.to_string(),
        iterations: sol.iterations,
        solve_seconds: started.elapsed().as_secs_f64(),
        config_hash: config_hash(sys, q, r, opts),
        component_orders: setup.orders.clone(),
    })
}

/// After a failed solve, decides between infeasibility of the stabilization
/// LMI alone and a numerical failure.
fn classify_failure(sol: &SdpSolution, a_v: &[CMatrix], b_v: &[CMatrix], setup: &Setup, backend: &dyn SdpBackend) -> Error {
    if sol.status == SdpStatus::Infeasible {
        return Error::Infeasible(format!("{} backend returned a dual certificate for the synthesis LMIs", sol.backend));
    }
    // Ξ(ω_i) ⪯ −I with 𝓢 ⪰ I, no cost: feasible iff some gain stabilizes
    let n = setup.n;
    let order = setup.order;
    let dn = n * (2 * order + 1);
    let m = b_v[0].ncols() / (2 * order + 1);
    let s_params = prune(hermitian_params(n, &decision_harmonics(order, setup.d), setup.real), &setup.orders, &setup.orders);
    let y_params = prune(general_params(m, n, &decision_harmonics(order, setup.d), setup.real), &vec![order; m], &setup.orders);
    let ns = s_params.len();
    let mut prob = SdpProblem::new(ns + y_params.len());
    let map = RealMap::new(order, &setup.orders, setup.real);
    let id = |s: f64| map.map(&(0..dn).map(|i| (i, i, Complex64::new(0.5 * s, 0.0))).collect());
    let _ = m;
    let s_real: Vec<Triplets> = s_params.iter().map(|p| p.realize(order)).collect();
    for (a, b) in a_v.iter().zip(b_v) {
        let (a_cols, b_cols) = (column_lists(a), column_lists(b));
        let mut blk = LmiBlock::new(map.real_dim());
        blk.constant = id(-1.0);
        for (i, e) in s_real.iter().enumerate() {
            let mut t = Triplets::new();
            left_mul(&a_cols, e, 0, 0, -ONE, &mut t);
            compress(&mut t);
            blk.terms.push((i, map.map(&t)));
        }
        for (i, p) in y_params.iter().enumerate() {
            let mut t = Triplets::new();
            left_mul(&b_cols, &p.realize(order), 0, 0, ONE, &mut t);
            compress(&mut t);
            blk.terms.push((ns + i, map.map(&t)));
        }
        prob.blocks.push(blk);
    }
    let mut pos = LmiBlock::new(map.real_dim());
    pos.constant = id(-1.0);
    for (i, e) in s_real.iter().enumerate() {
        let t: Triplets = e.iter().map(|&(r, c, v)| (r, c, v * 0.5)).collect();
        pos.terms.push((i, map.map(&t)));
    }
    prob.blocks.push(pos);
    match prob.solve_with(backend) {
        Ok(s) if s.status == SdpStatus::Infeasible => {
            Error::Infeasible(format!("no Toeplitz gain stabilizes both vertices ({} backend certificate)", s.backend))
        }
        _ => Error::SolverFailure(format!(
            "{} backend stopped with {:?} after {} iterations (gap {:.2e}, residuals {:.2e}/{:.2e})",
            sol.backend, sol.status, sol.iterations, sol.gap, sol.primal_residual, sol.dual_residual
        )),
    }
}

/// Outcome of [`verify_vertex_closed_loop`].
#[derive(Clone, Debug)]
pub struct VerificationReport {
    pub omegas: [f64; 2],
    /// Largest eigenvalue of the fresh vertex Lyapunov inequalities.
    pub vertex_max_eigs: Vec<f64>,
    /// Largest eigenvalue of ω_i P'(θ) + P(θ)A_cl(θ, ω_i) + (·)* on the grid,
    /// per vertex, with the maximizing phase.
    pub grid_max_eigs: Vec<(f64, f64)>,
    pub lyapunov: LyapunovCertificate,
    /// Closed-loop state symbol parts: A_cl(θ, ω) = a0 + ω a1.
    pub closed_loop: (Symbol, Symbol),
}

/// Closed-loop symbols A0 − B0K and A1 − B1K for the law u = −K(θ)x.
pub fn closed_loop_symbols(sys: &AfmLppSystem, gain: &PeriodicGain) -> Result<(Symbol, Symbol)> {
    let [a0, a1, b0, b1] = sys.symbols();
    let c0 = a0.add(&b0.mul(&gain.symbol)?.scale(-ONE))?;
    let c1 = a1.add(&b1.mul(&gain.symbol)?.scale(-ONE))?;
    Ok((c0, c1))
}

/// Re-certifies a fixed gain: a fresh vertex Lyapunov solve on the
/// closed-loop operators realized from the gain symbol, followed by a check
/// of the phase-domain inequality ω P'(θ) + P(θ)A_cl(θ, ω) + (·)* ≺ 0 at
/// both vertices on `grid` phases.
pub fn verify_vertex_closed_loop(sys: &AfmLppSystem, gain: &PeriodicGain, omega_min: f64, omega_max: f64, gamma: f64, grid: usize) -> Result<VerificationReport> {
    verify_vertex_closed_loop_banded(sys, gain, omega_min, omega_max, gamma, grid, sys.order())
}

/// As [`verify_vertex_closed_loop`] with the harmonics of P(θ) limited to
/// |k| ≤ `p_band`. A band well below the truncation order keeps the
/// truncated inequality close to the phase-domain one.
pub fn verify_vertex_closed_loop_banded(
    sys: &AfmLppSystem,
    gain: &PeriodicGain,
    omega_min: f64,
    omega_max: f64,
    gamma: f64,
    grid: usize,
    p_band: usize,
) -> Result<VerificationReport> {
    let backend = default_backend()?;
    let (c0, c1) = closed_loop_symbols(sys, gain)?;
    let order = sys.order();
    let n = sys.n();
    let c0t = ToeplitzBlockOperator::from_symbol_clipped(c0.clone(), order);
    let c1t = ToeplitzBlockOperator::from_symbol_clipped(c1.clone(), order);
    let mut setup = setup_from_symbols(&[&c0, &c1], n, order);
    setup.orders = sys.component_orders().to_vec();
    let omegas = [omega_min, omega_max];
    let deriv = sys.derivative_operator().diagonal();
    let vertices: Vec<CMatrix> = omegas
        .iter()
        .map(|&w| {
            let mut a = c0t.matrix() + c1t.matrix() * Complex64::new(w, 0.0);
            for (i, d) in deriv.iter().enumerate() {
                a[(i, i)] -= d * w;
            }
            a
        })
        .collect();
    let lyap = match lyapunov_core(&vertices, &setup, p_band, gamma, backend.as_ref()) {
        Ok(l) => l,
        Err(Error::Infeasible(msg)) => {
            return Err(Error::VerificationFailed(format!("closed loop admits no vertex Lyapunov certificate: {msg}")))
        }
        Err(e) => return Err(e),
    };
    for (w, e) in omegas.iter().zip(&lyap.vertex_max_eigs) {
        if *e >= 0.0 {
            return Err(Error::VerificationFailed(format!("vertex ω = {w}: Lyapunov eigenvalue {e:.3e} ≥ 0")));
        }
    }
    let p_sym = lyap.p.symbol().cloned().expect("Lyapunov operator carries its symbol");
    let dp = p_sym.derivative();
    let mut grid_max_eigs = Vec::new();
    for &w in &omegas {
        let mut worst = (f64::NEG_INFINITY, 0.0);
        for g in 0..grid.max(1) {
            let th = 2.0 * std::f64::consts::PI * g as f64 / grid.max(1) as f64;
            let p = p_sym.eval(th);
            let a = c0.eval(th) + c1.eval(th) * Complex64::new(w, 0.0);
            let pa = &p * a;
            let l = dp.eval(th) * Complex64::new(w, 0.0) + &pa + pa.adjoint();
            let e = hermitian_extreme_eigs(&l).1;
            if e > worst.0 {
                worst = (e, th);
            }
        }
        if worst.0 >= 0.0 {
            return Err(Error::VerificationFailed(format!(
                "vertex ω = {w}: phase-domain Lyapunov inequality fails at θ = {:.4} (eigenvalue {:.3e})",
                worst.1, worst.0
            )));
        }
        grid_max_eigs.push(worst);
    }
    Ok(VerificationReport { omegas, vertex_max_eigs: lyap.vertex_max_eigs.clone(), grid_max_eigs, lyapunov: lyap, closed_loop: (c0, c1) })
}

/// File form of a [`SynthesisResult`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthesisFile {
    pub version: u32,
    pub config_hash: String,
    pub order: usize,
    pub n: usize,
    pub m: usize,
    pub gamma: f64,
    pub cost: f64,
    pub status: SdpStatus,
    pub backend: String,
    pub iterations: usize,
    pub s_min_eig: f64,
    pub vertices: Vec<VertexResidual>,
    pub gain: SymbolData,
    pub gain_toeplitz_residual: f64,
    pub s: SymbolData,
    pub y: SymbolData,
    pub m_symbol: SymbolData,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub component_orders: Vec<usize>,
}

impl SynthesisResult {
    pub fn to_file(&self) -> SynthesisFile {
        let sym = |op: &ToeplitzBlockOperator| SymbolData::from(op.symbol().expect("decision operators carry symbols"));
        let (n, m) = (self.s.block_dims().0, self.y.block_dims().0);
        SynthesisFile {
            version: SYNTHESIS_FILE_VERSION,
            config_hash: self.config_hash.clone(),
            order: self.s.order(),
            n,
            m,
            gamma: self.gamma,
            cost: self.cost,
            status: self.status,
            backend: self.backend.clone(),
            iterations: self.iterations,
            s_min_eig: self.s_min_eig,
            vertices: self.vertices.clone(),
            gain: SymbolData::from(&self.gain.symbol),
            gain_toeplitz_residual: self.gain.toeplitz_residual,
            s: sym(&self.s),
            y: sym(&self.y),
            m_symbol: sym(&self.m),
            component_orders: if self.component_orders.iter().all(|&o| o == self.s.order()) { Vec::new() } else { self.component_orders.clone() },
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_file().save(path)
    }
}

impl SynthesisFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f: SynthesisFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if f.version != SYNTHESIS_FILE_VERSION {
            return Err(Error::Format(format!("synthesis file version {} (expected {SYNTHESIS_FILE_VERSION})", f.version)));
        }
        Ok(f)
    }

    pub fn gain(&self) -> Result<PeriodicGain> {
        let symbol = Symbol::try_from(&self.gain)?;
        let band = symbol.band();
        Ok(PeriodicGain { symbol, band, toeplitz_residual: self.gain_toeplitz_residual })
    }

    pub fn s_symbol(&self) -> Result<Symbol> {
        Symbol::try_from(&self.s)
    }

    /// 𝓢 at the stored truncation order.
    pub fn s_operator(&self) -> Result<ToeplitzBlockOperator> {
        Ok(ToeplitzBlockOperator::from_symbol_clipped(self.s_symbol()?, self.order))
    }
}
