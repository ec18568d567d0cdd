//! Adapter to the Clarabel conic solver. Each block becomes one
//! `PSDTriangleConeT` with slack `svec(F_0) - Σ y_i (−svec F_i)`, where
//! `svec` stacks the upper triangle column by column and scales
//! off-diagonal entries by √2.

use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, SolverStatus, SupportedConeT,
};
use nalgebra::DMatrix;

use super::{SdpBackend, SdpProblem, SdpSolution, SdpStatus};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct ClarabelBackend {
    pub tol: f64,
    pub max_iter: u32,
}

impl Default for ClarabelBackend {
    fn default() -> Self {
        Self { tol: 1e-8, max_iter: 200 }
    }
}

fn svec_index(r: usize, c: usize) -> (usize, f64) {
    let (r, c) = if r <= c { (r, c) } else { (c, r) };
    let k = c * (c + 1) / 2 + r;
    (k, if r == c { 1.0 } else { std::f64::consts::SQRT_2 })
}

fn unsvec(n: usize, v: &[f64]) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for c in 0..n {
        for r in 0..=c {
            if r == c {
                m[(r, c)] = v[k];
            } else {
                m[(r, c)] = v[k] * std::f64::consts::FRAC_1_SQRT_2;
                m[(c, r)] = m[(r, c)];
            }
            k += 1;
        }
    }
    m
}

impl SdpBackend for ClarabelBackend {
    fn name(&self) -> &'static str {
        "clarabel"
    }

    fn solve_split(&self, problem: &SdpProblem) -> Result<SdpSolution> {
        problem.validate()?;
        let nv = problem.num_vars;
        let mut rows = Vec::new();
        let mut cols = Vec::new();
        let mut vals = Vec::new();
        let mut b = Vec::new();
        let mut cones = Vec::new();
        let mut offset = 0;
        for blk in &problem.blocks {
            let len = blk.dim * (blk.dim + 1) / 2;
            let mut bb = vec![0.0; len];
            // F = P + Pᵀ: entry (r, c) of P lands on svec position of (r, c),
            // doubled on the diagonal
            for &(r, c, v) in &blk.constant.entries {
                let (k, s) = svec_index(r, c);
                bb[k] += if r == c { 2.0 * v } else { s * v };
            }
            for (i, t) in &blk.terms {
                for &(r, c, v) in &t.entries {
                    let (k, s) = svec_index(r, c);
                    rows.push(offset + k);
                    cols.push(*i);
                    vals.push(-(if r == c { 2.0 * v } else { s * v }));
                }
            }
            b.extend(bb);
            cones.push(SupportedConeT::PSDTriangleConeT(blk.dim));
            offset += len;
        }
        let a = CscMatrix::new_from_triplets(offset, nv, rows, cols, vals);
        let p = CscMatrix::zeros((nv, nv));
        let settings = DefaultSettings {
            verbose: false,
            max_iter: self.max_iter,
            tol_gap_abs: self.tol,
            tol_gap_rel: self.tol,
            tol_feas: self.tol,
            ..DefaultSettings::default()
        };
        let mut solver = DefaultSolver::new(&p, &problem.objective, &a, &b, &cones, settings)
            .map_err(|e| Error::SolverFailure(format!("clarabel setup: {e}")))?;
        solver.solve();
        let sol = &solver.solution;
        let status = match sol.status {
            SolverStatus::Solved => SdpStatus::Optimal,
            SolverStatus::AlmostSolved => SdpStatus::NearOptimal,
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => SdpStatus::Infeasible,
            SolverStatus::DualInfeasible | SolverStatus::AlmostDualInfeasible => SdpStatus::Unbounded,
            SolverStatus::MaxIterations => SdpStatus::MaxIterations,
            _ => SdpStatus::NumericalFailure,
        };
        let mut duals = Vec::new();
        let mut off = 0;
        for blk in &problem.blocks {
            let len = blk.dim * (blk.dim + 1) / 2;
            duals.push(unsvec(blk.dim, &sol.z[off..off + len]));
            off += len;
        }
        Ok(SdpSolution {
            status,
            y: sol.x.clone(),
            duals,
            primal_objective: sol.obj_val,
            dual_objective: sol.obj_val_dual,
            iterations: sol.iterations as usize,
            primal_residual: sol.r_prim,
            dual_residual: sol.r_dual,
            gap: (sol.obj_val - sol.obj_val_dual).abs() / (1.0 + sol.obj_val.abs() + sol.obj_val_dual.abs()),
            backend: self.name(),
        })
    }
}
