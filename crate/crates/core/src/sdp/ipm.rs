//! Infeasible primal-dual interior-point method with the HKM search
//! direction and Mehrotra predictor-corrector steps.
//!
//! The Schur complement `H_ij = Σ_b tr(F_i X F_j Z⁻¹)` is formed from the
//! low-rank factors `F = U Vᵀ + V Uᵀ` of the constraint matrices, where `V`
//! selects the columns touched by `P`. For Toeplitz-parametrized LMIs each
//! decision variable touches a few columns, so one product
//! `Z⁻¹ F_j X = [Z⁻¹U | Z⁻¹V][VᵀX; UᵀX]` per variable dominates the cost.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use super::{SdpBackend, SdpProblem, SdpSolution, SdpStatus, SymTerm};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct IpmSettings {
    /// Relative tolerance on gap and on both infeasibilities.
    pub tol: f64,
    pub max_iter: usize,
    /// Fraction of the distance to the cone boundary taken per step.
    pub step_fraction: f64,
    /// Print one line per iteration to stderr.
    pub verbose: bool,
}

impl Default for IpmSettings {
    fn default() -> Self {
        let verbose = std::env::var_os("VFHARMONIC_SDP_VERBOSE").is_some_and(|v| !v.is_empty() && v != "0");
        Self { tol: 1e-8, max_iter: 100, step_fraction: 0.98, verbose }
    }
}

#[derive(Debug, Clone, Default)]
pub struct InteriorPointBackend {
    pub settings: IpmSettings,
}

struct VarPart {
    /// index into the active variable list
    var: usize,
    term: SymTerm,
    cols: Vec<usize>,
    /// `u[l]`: nonzeros `(row, value)` of the `U` column paired with `cols[l]`
    u: Vec<Vec<(usize, f64)>>,
}

struct Block {
    n: usize,
    c0: DMatrix<f64>,
    parts: Vec<VarPart>,
}

fn frob_sym(t: &SymTerm) -> f64 {
    let mut map: std::collections::HashMap<(usize, usize), f64> = Default::default();
    for &(r, c, v) in &t.entries {
        *map.entry((r, c)).or_default() += v;
        *map.entry((c, r)).or_default() += v;
    }
    map.values().map(|v| v * v).sum::<f64>().sqrt()
}

fn var_part(var: usize, term: SymTerm) -> VarPart {
    let mut cols: Vec<usize> = Vec::new();
    let mut u: Vec<Vec<(usize, f64)>> = Vec::new();
    // entries are compressed, hence sorted by column
    for &(r, c, v) in &term.entries {
        if cols.last() != Some(&c) {
            cols.push(c);
            u.push(Vec::new());
        }
        u.last_mut().unwrap().push((r, v));
    }
    VarPart { var, term, cols, u }
}

fn sym(m: DMatrix<f64>) -> DMatrix<f64> {
    let t = m.transpose();
    (m + t) * 0.5
}

fn dot(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Largest `α` with `M + α D ⪰ 0`, given the Cholesky factor of `M`.
fn max_step(chol: &Cholesky<f64, Dyn>, d: &DMatrix<f64>) -> f64 {
    let l = chol.l();
    let a = l.solve_lower_triangular(d).expect("nonsingular factor");
    let m = l.solve_lower_triangular(&a.transpose()).expect("nonsingular factor");
    let lmin = sym(m).symmetric_eigenvalues().min();
    if lmin >= 0.0 {
        f64::INFINITY
    } else {
        -1.0 / lmin
    }
}

fn factor_regularized(h: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(h.clone()) {
        return Some(c);
    }
    let scale = h.diagonal().amax().max(1e-300);
    let mut reg = 1e-14 * scale;
    for _ in 0..8 {
        let mut hr = h.clone();
        for i in 0..hr.nrows() {
            hr[(i, i)] += reg;
        }
        if let Some(c) = Cholesky::new(hr) {
            return Some(c);
        }
        reg *= 100.0;
    }
    None
}

#[derive(Clone)]
struct State {
    x: Vec<DMatrix<f64>>,
    z: Vec<DMatrix<f64>>,
    y: DVector<f64>,
}

impl InteriorPointBackend {
    pub fn new(settings: IpmSettings) -> Self {
        Self { settings }
    }

    fn schur(&self, blocks: &[Block], x: &[DMatrix<f64>], zinv: &[DMatrix<f64>], m: usize) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(m, m);
        for (b, blk) in blocks.iter().enumerate() {
            let (xb, zi) = (&x[b], &zinv[b]);
            let n = blk.n;
            for q in 0..blk.parts.len() {
                let pq = &blk.parts[q];
                let k = pq.cols.len();
                let mut left = DMatrix::zeros(n, 2 * k);
                // columns of the transposed right factor; X is symmetric
                let mut right_t = DMatrix::zeros(n, 2 * k);
                for (l, &col) in pq.cols.iter().enumerate() {
                    left.column_mut(k + l).copy_from(&zi.column(col));
                    right_t.column_mut(l).copy_from(&xb.column(col));
                    for &(r, v) in &pq.u[l] {
                        left.column_mut(l).axpy(v, &zi.column(r), 1.0);
                        right_t.column_mut(k + l).axpy(v, &xb.column(r), 1.0);
                    }
                }
                let g = left * right_t.transpose();
                for pp in &blk.parts[..=q] {
                    let mut val = 0.0;
                    for (l, &col) in pp.cols.iter().enumerate() {
                        for &(r, v) in &pp.u[l] {
                            val += v * (g[(col, r)] + g[(r, col)]);
                        }
                    }
                    h[(pp.var, pq.var)] += val;
                    if pp.var != pq.var {
                        h[(pq.var, pp.var)] += val;
                    }
                }
            }
        }
        h
    }

    fn run(&self, blocks: &[Block], c: &DVector<f64>) -> (SdpStatus, State, usize, [f64; 3]) {
        let s = &self.settings;
        let m = c.len();
        let ntot: usize = blocks.iter().map(|b| b.n).sum::<usize>().max(1);
        let cnorm = c.norm();
        let c0norm = blocks.iter().map(|b| b.c0.norm_squared()).sum::<f64>().sqrt();
        let mut st = State { x: Vec::new(), z: Vec::new(), y: DVector::zeros(m) };
        for blk in blocks {
            let n = blk.n as f64;
            let fmax = blk.parts.iter().map(|p| frob_sym(&p.term)).fold(0.0, f64::max);
            let cmax = blk.parts.iter().map(|p| c[p.var].abs()).fold(0.0, f64::max);
            let xi = 10f64.max(n.sqrt()).max(n * (1.0 + cmax) / (1.0 + fmax));
            let eta = 10f64.max(n.sqrt()).max(fmax).max(blk.c0.norm());
            st.x.push(DMatrix::identity(blk.n, blk.n) * xi);
            st.z.push(DMatrix::identity(blk.n, blk.n) * eta);
        }
        let mut history: Vec<f64> = Vec::new();
        let mut last = [f64::INFINITY; 3];
        // best iterate so far, returned when the tail of the run stalls
        let mut best: Option<(f64, State, usize, [f64; 3])> = None;
        // A stalled run still yields a usable point when y is feasible to
        // tolerance and the multiplier residual and gap are small.
        let near = |w: f64, l: &[f64; 3]| w < 1e-6 || (l[1] < s.tol && l[0].max(l[2]) < 1e-5);
        let fallback = |best: Option<(f64, State, usize, [f64; 3])>, status, st, iter, last| match best {
            Some((w, b, i, l)) if near(w, &l) => (SdpStatus::NearOptimal, b, i, l),
            _ => (status, st, iter, last),
        };
        for iter in 0..s.max_iter {
            // residuals at the current point
            let mut rd = Vec::with_capacity(blocks.len());
            let mut rp = c.clone();
            let mut xz = 0.0;
            let mut dobj = 0.0;
            for (b, blk) in blocks.iter().enumerate() {
                let mut f = blk.c0.clone();
                for p in &blk.parts {
                    p.term.accumulate(&mut f, st.y[p.var]);
                    rp[p.var] -= p.term.inner(&st.x[b]);
                }
                rd.push(f - &st.z[b]);
                xz += dot(&st.x[b], &st.z[b]);
                dobj -= dot(&blk.c0, &st.x[b]);
            }
            let mu = xz / ntot as f64;
            let pobj = c.dot(&st.y);
            let pinf = rp.norm() / (1.0 + cnorm);
            let dinf = rd.iter().map(|r| r.norm_squared()).sum::<f64>().sqrt() / (1.0 + c0norm);
            let gap = (pobj - dobj).abs() / (1.0 + pobj.abs() + dobj.abs());
            last = [pinf, dinf, gap];
            if s.verbose {
                eprintln!("ipm {iter:3} pobj {pobj:+.8e} dobj {dobj:+.8e} pinf {pinf:.2e} dinf {dinf:.2e} gap {gap:.2e} mu {mu:.2e}");
            }
            if pinf < s.tol && dinf < s.tol && gap < s.tol {
                return (SdpStatus::Optimal, st, iter, last);
            }
            // Farkas certificate: X ⪰ 0, ⟨F_i, X⟩ = 0, ⟨F_0, X⟩ < 0
            if dobj > 0.0 {
                let ax = (&rp - c).norm();
                if ax / dobj < s.tol && dinf > s.tol {
                    return (SdpStatus::Infeasible, st, iter, last);
                }
            }
            if pobj < -1e12 * (1.0 + dobj.abs().min(1e12)) {
                return (SdpStatus::Unbounded, st, iter, last);
            }
            let worst = pinf.max(dinf).max(gap);
            if best.as_ref().is_none_or(|b| worst < b.0) {
                best = Some((worst, st.clone(), iter, last));
            }
            history.push(worst);
            if history.len() > 15 {
                let before = history[history.len() - 11];
                if worst > 0.5 * before {
                    return fallback(best, SdpStatus::NumericalFailure, st, iter, last);
                }
            }

            let mut zinv = Vec::with_capacity(blocks.len());
            let mut xchol = Vec::with_capacity(blocks.len());
            let mut zchol = Vec::with_capacity(blocks.len());
            for b in 0..blocks.len() {
                let (Some(zc), Some(xc)) = (Cholesky::new(st.z[b].clone()), Cholesky::new(st.x[b].clone())) else {
                    return fallback(best, SdpStatus::NumericalFailure, st, iter, last);
                };
                zinv.push(zc.inverse());
                zchol.push(zc);
                xchol.push(xc);
            }
            let h = self.schur(blocks, &st.x, &zinv, m);
            let Some(hc) = factor_regularized(&h) else {
                return fallback(best, SdpStatus::NumericalFailure, st, iter, last);
            };
            let xrz: Vec<DMatrix<f64>> =
                (0..blocks.len()).map(|b| sym(&st.x[b] * &rd[b] * &zinv[b])).collect();

            let direction = |w: &[DMatrix<f64>]| {
                let mut rhs = -&rp;
                for (b, blk) in blocks.iter().enumerate() {
                    let wb = &w[b] - &xrz[b];
                    for p in &blk.parts {
                        rhs[p.var] += p.term.inner(&wb);
                    }
                }
                let mut dy = hc.solve(&rhs);
                // the Schur matrix is badly conditioned near the optimum
                for _ in 0..2 {
                    let r = &rhs - &h * &dy;
                    dy += hc.solve(&r);
                }
                let mut dx = Vec::with_capacity(blocks.len());
                let mut dz = Vec::with_capacity(blocks.len());
                for (b, blk) in blocks.iter().enumerate() {
                    let mut d = rd[b].clone();
                    for p in &blk.parts {
                        p.term.accumulate(&mut d, dy[p.var]);
                    }
                    dx.push(&w[b] - sym(&st.x[b] * &d * &zinv[b]));
                    dz.push(d);
                }
                (dy, dx, dz)
            };
            let steps = |dx: &[DMatrix<f64>], dz: &[DMatrix<f64>]| {
                let mut ap = f64::INFINITY;
                let mut ad = f64::INFINITY;
                for b in 0..blocks.len() {
                    ap = ap.min(max_step(&xchol[b], &dx[b]));
                    ad = ad.min(max_step(&zchol[b], &dz[b]));
                }
                (ap, ad)
            };

            // predictor
            let w_aff: Vec<DMatrix<f64>> = st.x.iter().map(|x| -x).collect();
            let (_, dxa, dza) = direction(&w_aff);
            let (apa, ada) = steps(&dxa, &dza);
            let (apa, ada) = (apa.min(1.0), ada.min(1.0));
            let mut xz_aff = 0.0;
            for b in 0..blocks.len() {
                xz_aff += dot(&(&st.x[b] + &dxa[b] * apa), &(&st.z[b] + &dza[b] * ada));
            }
            let sigma = ((xz_aff / ntot as f64) / mu).clamp(0.0, 1.0).powi(3);

            // corrector
            let w: Vec<DMatrix<f64>> = (0..blocks.len())
                .map(|b| &zinv[b] * (sigma * mu) - &st.x[b] - sym(&dxa[b] * &dza[b] * &zinv[b]))
                .collect();
            let (dy, dx, dz) = direction(&w);
            let (ap, ad) = steps(&dx, &dz);
            let ap = (s.step_fraction * ap).min(1.0);
            let ad = (s.step_fraction * ad).min(1.0);
            for b in 0..blocks.len() {
                st.x[b] = sym(&st.x[b] + &dx[b] * ap);
                st.z[b] = sym(&st.z[b] + &dz[b] * ad);
            }
            st.y += dy * ad;
        }
        fallback(best, SdpStatus::MaxIterations, st, s.max_iter, last)
    }
}

impl SdpBackend for InteriorPointBackend {
    fn name(&self) -> &'static str {
        "ipm"
    }

    fn solve_split(&self, problem: &SdpProblem) -> Result<SdpSolution> {
        problem.validate()?;
        let nv = problem.num_vars;
        // block scaling: largest data matrix of each block gets unit norm
        let mut beta = Vec::with_capacity(problem.blocks.len());
        let mut merged = Vec::with_capacity(problem.blocks.len());
        for raw in &problem.blocks {
            let blk = raw.merged();
            let big = std::iter::once(frob_sym(&blk.constant))
                .chain(blk.terms.iter().map(|(_, t)| frob_sym(t)))
                .fold(0.0, f64::max);
            beta.push(if big > 0.0 { 1.0 / big } else { 1.0 });
            merged.push(blk);
        }
        // variable scaling
        let mut vnorm = vec![0.0f64; nv];
        for (blk, b) in merged.iter().zip(&beta) {
            for (i, t) in &blk.terms {
                vnorm[*i] += (b * frob_sym(t)).powi(2);
            }
        }
        let mut active = vec![usize::MAX; nv];
        let mut scale = Vec::new();
        let mut count = 0;
        for i in 0..nv {
            if vnorm[i] > 0.0 {
                active[i] = count;
                scale.push(1.0 / vnorm[i].sqrt());
                count += 1;
            } else if problem.objective[i] != 0.0 {
                return Ok(SdpSolution {
                    status: SdpStatus::Unbounded,
                    y: vec![0.0; nv],
                    duals: problem.blocks.iter().map(|b| DMatrix::zeros(b.dim, b.dim)).collect(),
                    primal_objective: f64::NEG_INFINITY,
                    dual_objective: f64::NAN,
                    iterations: 0,
                    primal_residual: f64::NAN,
                    dual_residual: f64::NAN,
                    gap: f64::NAN,
                    backend: self.name(),
                });
            }
        }
        let mut c = DVector::zeros(count);
        for i in 0..nv {
            if active[i] != usize::MAX {
                c[active[i]] = problem.objective[i] * scale[active[i]];
            }
        }
        let cscale = c.amax().max(1e-300);
        let cscale = if c.amax() > 0.0 { cscale } else { 1.0 };
        c /= cscale;
        let blocks: Vec<Block> = merged
            .into_iter()
            .zip(&beta)
            .map(|(blk, &b)| {
                let mut c0 = blk.constant.to_dense(blk.dim);
                c0 *= b;
                let parts = blk
                    .terms
                    .into_iter()
                    .map(|(i, mut t)| {
                        let a = active[i];
                        for e in &mut t.entries {
                            e.2 *= b * scale[a];
                        }
                        var_part(a, t)
                    })
                    .collect();
                Block { n: blk.dim, c0, parts }
            })
            .collect();
        if count == 0 {
            // nothing to optimize: feasibility of the constant blocks
            let ok = blocks.iter().all(|b| b.n == 0 || b.c0.symmetric_eigenvalues().min() >= -self.settings.tol);
            return Ok(SdpSolution {
                status: if ok { SdpStatus::Optimal } else { SdpStatus::Infeasible },
                y: vec![0.0; nv],
                duals: blocks.iter().map(|b| DMatrix::zeros(b.n, b.n)).collect(),
                primal_objective: 0.0,
                dual_objective: 0.0,
                iterations: 0,
                primal_residual: 0.0,
                dual_residual: 0.0,
                gap: 0.0,
                backend: self.name(),
            });
        }

        if self.settings.verbose {
            let dims: Vec<usize> = blocks.iter().map(|b| b.n).collect();
            eprintln!("ipm: {count} variables, blocks {dims:?}");
        }
        let (status, st, iterations, [pinf, dinf, gap]) = self.run(&blocks, &c);
        if !st.y.iter().all(|v| v.is_finite()) {
            return Err(Error::SolverFailure("interior-point iterates became non-finite".into()));
        }
        let mut y = vec![0.0; nv];
        for i in 0..nv {
            if active[i] != usize::MAX {
                y[i] = st.y[active[i]] * scale[active[i]];
            }
        }
        let mut dual_objective = 0.0;
        let duals: Vec<DMatrix<f64>> = st
            .x
            .iter()
            .zip(&beta)
            .zip(&blocks)
            .map(|((x, &b), blk)| {
                dual_objective -= dot(&blk.c0, x) * cscale;
                x * (b * cscale)
            })
            .collect();
        let primal_objective = problem.objective.iter().zip(&y).map(|(a, b)| a * b).sum();
        Ok(SdpSolution {
            status,
            y,
            duals,
            primal_objective,
            dual_objective,
            iterations,
            primal_residual: pinf,
            dual_residual: dinf,
            gap,
            backend: self.name(),
        })
    }
}
