//! Real semidefinite programs in the dual (LMI) form
//!
//! ```text
//! minimize    cᵀy
//! subject to  F_b0 + Σ_i y_i F_bi ⪰ 0   for every block b
//! ```
//!
//! Every matrix `F` is stored as a sparse real triplet list `P` with
//! `F = P + Pᵀ`, which keeps the low-rank structure of Toeplitz-parametrized
//! LMIs visible to the solver. Blocks are split into their connected
//! components before solving.

mod clarabel_backend;
mod ipm;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use clarabel_backend::ClarabelBackend;
pub use ipm::{InteriorPointBackend, IpmSettings};

/// Environment variable selecting the backend: `ipm` (default) or `clarabel`.
pub const BACKEND_ENV: &str = "VFHARMONIC_SDP_BACKEND";

/// Sparse real matrix `P` standing for the symmetric matrix `P + Pᵀ`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SymTerm {
    pub entries: Vec<(usize, usize, f64)>,
}

impl SymTerm {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds `v` to entry `(r, c)` of the symmetric matrix (and to `(c, r)`).
    pub fn add_sym(&mut self, r: usize, c: usize, v: f64) {
        if v == 0.0 {
            return;
        }
        if r == c {
            self.entries.push((r, r, 0.5 * v));
        } else {
            self.entries.push((r, c, v));
        }
    }

    /// Adds `v` to entry `(r, c)` of `P` only.
    pub fn add_half(&mut self, r: usize, c: usize, v: f64) {
        if v != 0.0 {
            self.entries.push((r, c, v));
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Sums duplicate entries and drops exact zeros.
    pub fn compress(&mut self) {
        self.entries.sort_by_key(|a| (a.1, a.0));
        let mut out: Vec<(usize, usize, f64)> = Vec::with_capacity(self.entries.len());
        for &(r, c, v) in &self.entries {
            match out.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += v,
                _ => out.push((r, c, v)),
            }
        }
        out.retain(|e| e.2 != 0.0);
        self.entries = out;
    }

    /// Dense symmetric matrix `P + Pᵀ`.
    pub fn to_dense(&self, n: usize) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(n, n);
        self.accumulate(&mut m, 1.0);
        m
    }

    pub(crate) fn accumulate(&self, m: &mut DMatrix<f64>, scale: f64) {
        for &(r, c, v) in &self.entries {
            m[(r, c)] += scale * v;
            m[(c, r)] += scale * v;
        }
    }

    /// `⟨P + Pᵀ, W⟩` for symmetric `W`.
    pub(crate) fn inner(&self, w: &DMatrix<f64>) -> f64 {
        2.0 * self.entries.iter().map(|&(r, c, v)| v * w[(r, c)]).sum::<f64>()
    }

    fn max_index(&self) -> Option<usize> {
        self.entries.iter().map(|&(r, c, _)| r.max(c)).max()
    }
}

/// One LMI `F_0 + Σ y_i F_i ⪰ 0`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LmiBlock {
    pub dim: usize,
    pub constant: SymTerm,
    /// `(variable index, F_i)` pairs; a variable may appear more than once.
    pub terms: Vec<(usize, SymTerm)>,
}

impl LmiBlock {
    pub fn new(dim: usize) -> Self {
        Self { dim, constant: SymTerm::new(), terms: Vec::new() }
    }

    /// Dense value of the block at `y`.
    pub fn evaluate(&self, y: &[f64]) -> DMatrix<f64> {
        let mut m = self.constant.to_dense(self.dim);
        for (i, t) in &self.terms {
            t.accumulate(&mut m, y[*i]);
        }
        m
    }

    fn merged(&self) -> LmiBlock {
        let mut by_var: std::collections::BTreeMap<usize, SymTerm> = Default::default();
        for (i, t) in &self.terms {
            by_var.entry(*i).or_default().entries.extend_from_slice(&t.entries);
        }
        let mut constant = self.constant.clone();
        constant.compress();
        let terms = by_var
            .into_iter()
            .filter_map(|(i, mut t)| {
                t.compress();
                (!t.is_empty()).then_some((i, t))
            })
            .collect();
        LmiBlock { dim: self.dim, constant, terms }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SdpProblem {
    pub num_vars: usize,
    pub objective: Vec<f64>,
    pub blocks: Vec<LmiBlock>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SdpStatus {
    Optimal,
    /// Stopped at a reduced accuracy (about 1e-6) after stalling.
    NearOptimal,
    /// The LMI set is empty; the block duals hold a certificate.
    Infeasible,
    /// The objective is unbounded below on the LMI set.
    Unbounded,
    MaxIterations,
    NumericalFailure,
}

impl SdpStatus {
    pub fn is_solved(self) -> bool {
        matches!(self, SdpStatus::Optimal | SdpStatus::NearOptimal)
    }
}

#[derive(Debug, Clone)]
pub struct SdpSolution {
    pub status: SdpStatus,
    pub y: Vec<f64>,
    /// Dual matrices, one per original block.
    pub duals: Vec<DMatrix<f64>>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
    /// Relative equality residual of the dual matrices.
    pub primal_residual: f64,
    /// Relative residual of the LMI slack.
    pub dual_residual: f64,
    pub gap: f64,
    pub backend: &'static str,
}

/// A conic backend for problems already split into connected blocks.
pub trait SdpBackend: Send + Sync {
    fn name(&self) -> &'static str;
    fn solve_split(&self, problem: &SdpProblem) -> Result<SdpSolution>;
}

/// Backend chosen by [`BACKEND_ENV`].
pub fn default_backend() -> Result<Box<dyn SdpBackend>> {
    match std::env::var(BACKEND_ENV) {
        Err(_) => Ok(Box::new(InteriorPointBackend::default())),
        Ok(v) => match v.trim().to_ascii_lowercase().as_str() {
            "" | "ipm" => Ok(Box::new(InteriorPointBackend::default())),
            "clarabel" => Ok(Box::new(ClarabelBackend::default())),
            other => Err(Error::Config(format!("unknown SDP backend {other:?} in {BACKEND_ENV}"))),
        },
    }
}

impl SdpProblem {
    pub fn new(num_vars: usize) -> Self {
        Self { num_vars, objective: vec![0.0; num_vars], blocks: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.objective.len() != self.num_vars {
            return Err(Error::DimensionMismatch(format!(
                "objective has {} entries for {} variables",
                self.objective.len(),
                self.num_vars
            )));
        }
        for (b, blk) in self.blocks.iter().enumerate() {
            let too_big = |t: &SymTerm| t.max_index().is_some_and(|m| m >= blk.dim);
            if too_big(&blk.constant) || blk.terms.iter().any(|(_, t)| too_big(t)) {
                return Err(Error::DimensionMismatch(format!("block {b} has an entry outside its dimension")));
            }
            if let Some((i, _)) = blk.terms.iter().find(|(i, _)| *i >= self.num_vars) {
                return Err(Error::DimensionMismatch(format!("block {b} uses variable {i}")));
            }
        }
        Ok(())
    }

    /// Smallest eigenvalue over all blocks at `y`.
    pub fn min_eigenvalue(&self, y: &[f64]) -> f64 {
        self.blocks
            .iter()
            .filter(|b| b.dim > 0)
            .map(|b| b.evaluate(y).symmetric_eigenvalues().min())
            .fold(f64::INFINITY, f64::min)
    }

    /// Splits every block into the connected components of its sparsity
    /// graph. Returns the split problem and, for each new block, the original
    /// block index and the original row of each local row.
    pub fn split(&self) -> (SdpProblem, Vec<(usize, Vec<usize>)>) {
        let mut out = SdpProblem { num_vars: self.num_vars, objective: self.objective.clone(), blocks: Vec::new() };
        let mut map = Vec::new();
        for (b, raw) in self.blocks.iter().enumerate() {
            let blk = raw.merged();
            let mut parent: Vec<usize> = (0..blk.dim).collect();
            fn find(p: &mut [usize], mut x: usize) -> usize {
                while p[x] != x {
                    p[x] = p[p[x]];
                    x = p[x];
                }
                x
            }
            let all = std::iter::once(&blk.constant).chain(blk.terms.iter().map(|(_, t)| t));
            for t in all {
                for &(r, c, _) in &t.entries {
                    let (a, bb) = (find(&mut parent, r), find(&mut parent, c));
                    if a != bb {
                        parent[a.max(bb)] = a.min(bb);
                    }
                }
            }
            let mut comp_of_root: std::collections::BTreeMap<usize, usize> = Default::default();
            let mut comp = vec![0usize; blk.dim];
            let mut local = vec![0usize; blk.dim];
            let mut rows: Vec<Vec<usize>> = Vec::new();
            for r in 0..blk.dim {
                let root = find(&mut parent, r);
                let k = *comp_of_root.entry(root).or_insert_with(|| {
                    rows.push(Vec::new());
                    rows.len() - 1
                });
                comp[r] = k;
                local[r] = rows[k].len();
                rows[k].push(r);
            }
            let mut parts: Vec<LmiBlock> = rows.iter().map(|r| LmiBlock::new(r.len())).collect();
            for &(r, c, v) in &blk.constant.entries {
                parts[comp[r]].constant.entries.push((local[r], local[c], v));
            }
            for (i, t) in &blk.terms {
                let mut per: std::collections::BTreeMap<usize, SymTerm> = Default::default();
                for &(r, c, v) in &t.entries {
                    per.entry(comp[r]).or_default().entries.push((local[r], local[c], v));
                }
                for (k, t) in per {
                    parts[k].terms.push((*i, t));
                }
            }
            for (k, p) in parts.into_iter().enumerate() {
                out.blocks.push(p);
                map.push((b, rows[k].clone()));
            }
        }
        (out, map)
    }

    /// Solves with the given backend after splitting blocks.
    pub fn solve_with(&self, backend: &dyn SdpBackend) -> Result<SdpSolution> {
        self.validate()?;
        let (split, map) = self.split();
        let mut sol = backend.solve_split(&split)?;
        let mut duals: Vec<DMatrix<f64>> = self.blocks.iter().map(|b| DMatrix::zeros(b.dim, b.dim)).collect();
        for (k, (b, rows)) in map.iter().enumerate() {
            if let Some(x) = sol.duals.get(k) {
                for (i, &ri) in rows.iter().enumerate() {
                    for (j, &rj) in rows.iter().enumerate() {
                        duals[*b][(ri, rj)] = x[(i, j)];
                    }
                }
            }
        }
        sol.duals = duals;
        Ok(sol)
    }

    /// Solves with the backend selected by [`BACKEND_ENV`].
    pub fn solve(&self) -> Result<SdpSolution> {
        let backend = default_backend()?;
        self.solve_with(backend.as_ref())
    }
}
