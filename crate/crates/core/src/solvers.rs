//! Lifted fixed-margin convex programs, their solvers, and KKT certification
//! of arbitrary candidates (including gradient-descent-trained networks).
//!
//! A lifted problem has variables `ζ ∈ ℝ^{B·D}` split into `B` blocks of size
//! `D`; row `n` is `Φ_n = y_n Σ_{b ∈ B_n} e_b ⊗ x_n`, so `⟨ζ, Φ_n⟩` is the
//! signed margin of sample `n`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gating::{relu_gates, GlobalContext};
use crate::linalg;
use crate::models::{
    w_to_zeta, GatedModel, LinearModel, Model, ShallowGln, ZetaKind, ZetaParam,
};
use crate::nnls;
use crate::norms::QuadFormM;
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LiftFamily {
    Gln,
    Frelu,
    Shallow,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    GroupLasso,
    QuadM,
    PlainL2,
}

impl ObjectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            ObjectiveKind::GroupLasso => "group_lasso",
            ObjectiveKind::QuadM => "quad_m",
            ObjectiveKind::PlainL2 => "plain_l2",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftedProblem {
    pub family: LiftFamily,
    pub objective: ObjectiveKind,
    pub units: usize,
    /// Local contexts per unit (GLN); 1 otherwise.
    pub contexts: usize,
    pub dim: usize,
    pub blocks: usize,
    /// Group `g` owns blocks `groups[g]`.
    pub groups: Vec<Vec<usize>>,
    /// Kept rows: inputs, labels, selected blocks and original sample index.
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub row_blocks: Vec<Vec<usize>>,
    pub rows: Vec<usize>,
    /// Samples dropped because no block is selected (FReLU rows with every gate closed).
    pub excluded: Vec<usize>,
    /// Shallow family: the context owning each block.
    pub keys: Vec<GlobalContext>,
    block_rows: Vec<Vec<usize>>,
}

/// Which lift to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LiftSpec {
    Gln { contexts: usize },
    Frelu,
    Shallow,
    Plain,
}

impl LiftSpec {
    pub fn family(self) -> LiftFamily {
        match self {
            LiftSpec::Gln { .. } => LiftFamily::Gln,
            LiftSpec::Frelu => LiftFamily::Frelu,
            LiftSpec::Shallow => LiftFamily::Shallow,
            LiftSpec::Plain => LiftFamily::Plain,
        }
    }
}

pub fn lift(ds: &Dataset, spec: LiftSpec) -> Result<LiftedProblem> {
    let d = ds.dim();
    let family = spec.family();
    let units = match family {
        LiftFamily::Plain | LiftFamily::Shallow => 1,
        _ => ds
            .context(0)
            .ok_or(Error::MissingContexts)?
            .len(),
    };
    let mut keys = Vec::new();
    let (contexts, blocks, groups): (usize, usize, Vec<Vec<usize>>) = match spec {
        LiftSpec::Gln { contexts } => (
            contexts,
            units * contexts,
            (0..units).map(|h| (h * contexts..(h + 1) * contexts).collect()).collect(),
        ),
        LiftSpec::Frelu => (1, units, (0..units).map(|h| vec![h]).collect()),
        LiftSpec::Shallow => {
            keys = ds.contexts().ok_or(Error::MissingContexts)?.to_vec();
            keys.sort();
            keys.dedup();
            (1, keys.len(), (0..keys.len()).map(|k| vec![k]).collect())
        }
        LiftSpec::Plain => (1, 1, vec![vec![0]]),
    };
    let mut p = LiftedProblem {
        family,
        objective: match family {
            LiftFamily::Gln | LiftFamily::Frelu => ObjectiveKind::GroupLasso,
            _ => ObjectiveKind::PlainL2,
        },
        units,
        contexts,
        dim: d,
        blocks,
        groups,
        x: Vec::with_capacity(ds.inputs().len()),
        y: Vec::with_capacity(ds.len()),
        row_blocks: Vec::with_capacity(ds.len()),
        rows: Vec::with_capacity(ds.len()),
        excluded: Vec::new(),
        keys,
        block_rows: vec![Vec::new(); blocks],
    };
    for n in 0..ds.len() {
        let sel: Vec<usize> = match spec {
            LiftSpec::Plain => vec![0],
            LiftSpec::Shallow => {
                let g = ds.context(n).ok_or(Error::MissingContexts)?;
                vec![p.keys.binary_search(g).expect("key collected above")]
            }
            LiftSpec::Gln { contexts } => {
                let g = ds.context(n).ok_or(Error::MissingContexts)?;
                if g.len() != units || g.0.iter().any(|&c| c == 0 || c as usize > contexts) {
                    return Err(Error::ContextOutOfRange(g.label()));
                }
                (0..units).map(|h| h * contexts + g.get(h) as usize - 1).collect()
            }
            LiftSpec::Frelu => {
                let g = ds.context(n).ok_or(Error::MissingContexts)?;
                if g.len() != units || g.0.iter().any(|&c| c > 1) {
                    return Err(Error::ContextOutOfRange(g.label()));
                }
                (0..units).filter(|&h| g.get(h) == 1).collect()
            }
        };
        if sel.is_empty() {
            p.excluded.push(n);
            continue;
        }
        let row = p.rows.len();
        for &b in &sel {
            p.block_rows[b].push(row);
        }
        p.x.extend_from_slice(ds.x(n));
        p.y.push(ds.y(n));
        p.row_blocks.push(sel);
        p.rows.push(n);
    }
    if !p.excluded.is_empty() {
        eprintln!(
            "warning: {} rows have no open gates; their margin constraints cannot be met and are excluded",
            p.excluded.len()
        );
    }
    Ok(p)
}

impl LiftedProblem {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_vars(&self) -> usize {
        self.blocks * self.dim
    }

    pub fn with_objective(mut self, objective: ObjectiveKind) -> Result<Self> {
        if objective == ObjectiveKind::QuadM && self.family != LiftFamily::Gln {
            return Err(Error::Config("the M quadratic form needs a GLN lift".into()));
        }
        self.objective = objective;
        Ok(self)
    }

    fn xr(&self, n: usize) -> &[f64] {
        &self.x[n * self.dim..(n + 1) * self.dim]
    }

    fn block<'a>(&self, v: &'a [f64], b: usize) -> &'a [f64] {
        &v[b * self.dim..(b + 1) * self.dim]
    }

    /// `Φ ζ`, the signed margins.
    pub fn apply(&self, zeta: &[f64]) -> Vec<f64> {
        par::map_range(self.n_rows(), |n| {
            let x = self.xr(n);
            self.y[n]
                * self.row_blocks[n]
                    .iter()
                    .map(|&b| linalg::dot(self.block(zeta, b), x))
                    .sum::<f64>()
        })
    }

    /// `Φᵀ λ`, with block `b` additionally scaled by `weights[b]` when given.
    pub fn adjoint_weighted(&self, lambda: &[f64], weights: Option<&[f64]>) -> Vec<f64> {
        let mut out = vec![0.0; self.n_vars()];
        par::for_each_chunk(&mut out, self.dim, |b, chunk| {
            for &n in &self.block_rows[b] {
                let c = lambda[n] * self.y[n];
                if c != 0.0 {
                    linalg::axpy(c, self.xr(n), chunk);
                }
            }
            if let Some(w) = weights {
                linalg::scale(w[b], chunk);
            }
        });
        out
    }

    pub fn adjoint(&self, lambda: &[f64]) -> Vec<f64> {
        self.adjoint_weighted(lambda, None)
    }

    /// `y_n y_m ⟨x_n, x_m⟩`
    fn signed_input_gram(&self) -> DMatrix<f64> {
        let n = self.n_rows();
        let rows = par::map_range(n, |i| {
            (0..n)
                .map(|j| self.y[i] * self.y[j] * linalg::dot(self.xr(i), self.xr(j)))
                .collect::<Vec<_>>()
        });
        DMatrix::from_fn(n, n, |i, j| rows[i][j])
    }

    fn shared_weight(&self, i: usize, j: usize, w2: Option<&[f64]>) -> f64 {
        let (a, b) = (&self.row_blocks[i], &self.row_blocks[j]);
        let mut s = 0.0;
        // both lists are sorted
        let (mut p, mut q) = (0, 0);
        while p < a.len() && q < b.len() {
            match a[p].cmp(&b[q]) {
                std::cmp::Ordering::Less => p += 1,
                std::cmp::Ordering::Greater => q += 1,
                std::cmp::Ordering::Equal => {
                    s += w2.map_or(1.0, |w| w[a[p]]);
                    p += 1;
                    q += 1;
                }
            }
        }
        s
    }

    /// `ΦΦᵀ`, or with block weights `w`, `Φ diag(w²) Φᵀ`.
    pub fn gram(&self, weights: Option<&[f64]>) -> DMatrix<f64> {
        let w2: Option<Vec<f64>> = weights.map(|w| w.iter().map(|v| v * v).collect());
        let mut g = self.signed_input_gram();
        for i in 0..self.n_rows() {
            for j in 0..self.n_rows() {
                g[(i, j)] *= self.shared_weight(i, j, w2.as_deref());
            }
        }
        g
    }

    /// `Φ Q⁺ Φᵀ` with `Q = C^{H−2} M`, from the one-hot row structure.
    pub fn quad_m_kernel(&self) -> DMatrix<f64> {
        let (h, c) = (self.units as f64, self.contexts as f64);
        let s = c.powi(1 - self.units as i32);
        let mut g = self.signed_input_gram();
        for i in 0..self.n_rows() {
            for j in 0..self.n_rows() {
                let agree = self.shared_weight(i, j, None);
                g[(i, j)] *= s * (agree - (h - 1.0) / c);
            }
        }
        g
    }

    /// Plain-text dump: dimensions, objective, groups, then `row col value` triplets.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# lifted margin problem");
        let _ = writeln!(out, "family {:?}", self.family);
        let _ = writeln!(out, "objective {}", self.objective.name());
        let _ = writeln!(out, "rows {}", self.n_rows());
        let _ = writeln!(out, "cols {}", self.n_vars());
        let _ = writeln!(out, "block_size {}", self.dim);
        for (g, blocks) in self.groups.iter().enumerate() {
            let cols: Vec<String> = blocks
                .iter()
                .map(|b| format!("{}..{}", b * self.dim, (b + 1) * self.dim))
                .collect();
            let _ = writeln!(out, "group {g} {}", cols.join(" "));
        }
        if !self.excluded.is_empty() {
            let ex: Vec<String> = self.excluded.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "excluded {}", ex.join(" "));
        }
        let _ = writeln!(out, "triplets");
        for n in 0..self.n_rows() {
            for &b in &self.row_blocks[n] {
                for (k, &v) in self.xr(n).iter().enumerate() {
                    if v != 0.0 {
                        let _ = writeln!(out, "{n} {} {:e}", b * self.dim + k, self.y[n] * v);
                    }
                }
            }
        }
        out
    }

    /// Wraps a solution vector as a model of the matching family.
    pub fn to_model(&self, zeta: &[f64]) -> Result<Model> {
        Ok(match self.family {
            LiftFamily::Gln => Model::Zeta(ZetaParam::gln(self.units, self.contexts, self.dim, zeta.to_vec())?),
            LiftFamily::Frelu => Model::Zeta(ZetaParam::frelu(self.units, self.dim, zeta.to_vec())?),
            LiftFamily::Shallow => Model::Shallow(ShallowGln::new(
                self.dim,
                self.keys
                    .iter()
                    .enumerate()
                    .map(|(k, g)| (g.clone(), self.block(zeta, k).to_vec()))
                    .collect(),
            )?),
            LiftFamily::Plain => Model::Linear(LinearModel { beta: zeta.to_vec() }),
        })
    }

    fn group_norms(&self, zeta: &[f64]) -> Vec<f64> {
        self.groups
            .iter()
            .map(|bs| {
                bs.iter()
                    .map(|&b| {
                        let v = self.block(zeta, b);
                        linalg::dot(v, v)
                    })
                    .sum::<f64>()
                    .sqrt()
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverResult {
    pub status: SolverStatus,
    pub objective_kind: ObjectiveKind,
    pub objective: f64,
    /// Dual objective at the returned multipliers (quadratic objectives).
    pub dual_objective: Option<f64>,
    /// `max(0, 1 − min_n ⟨ζ, Φ_n⟩)`
    pub primal_residual: f64,
    pub stationarity_residual: f64,
    /// `Σ_n λ_n |⟨ζ, Φ_n⟩ − 1| / Σ_n λ_n`
    pub complementarity: f64,
    pub iterations: usize,
    /// Original sample index of every dual entry.
    pub rows: Vec<usize>,
    pub lambda: Vec<f64>,
    pub zeta: Vec<f64>,
    pub excluded: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-6, max_iter: 50_000 }
    }
}

fn complementarity(lambda: &[f64], margins: &[f64]) -> f64 {
    let total: f64 = lambda.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    lambda.iter().zip(margins).map(|(l, m)| l * (m - 1.0).abs()).sum::<f64>() / total
}

fn primal_residual(margins: &[f64]) -> f64 {
    margins.iter().fold(0.0_f64, |r, &m| r.max(1.0 - m))
}

fn infeasible_result(p: &LiftedProblem, iterations: usize) -> SolverResult {
    SolverResult {
        status: SolverStatus::Infeasible,
        objective_kind: p.objective,
        objective: f64::NAN,
        dual_objective: None,
        primal_residual: f64::INFINITY,
        stationarity_residual: f64::NAN,
        complementarity: f64::NAN,
        iterations,
        rows: p.rows.clone(),
        lambda: vec![0.0; p.n_rows()],
        zeta: vec![0.0; p.n_vars()],
        excluded: p.excluded.clone(),
    }
}

/// Distance from `Φᵀλ` to the subdifferential of `Σ_g ‖ζ_g‖` at `ζ`.
fn group_stationarity(p: &LiftedProblem, zeta: &[f64], grad: &[f64]) -> f64 {
    let norms = p.group_norms(zeta);
    p.groups
        .iter()
        .zip(&norms)
        .map(|(bs, &nz)| {
            if nz > 0.0 {
                let mut s = 0.0;
                for &b in bs {
                    for (g, z) in p.block(grad, b).iter().zip(p.block(zeta, b)) {
                        s += (g - z / nz).powi(2);
                    }
                }
                s.sqrt()
            } else {
                let ng: f64 = bs
                    .iter()
                    .map(|&b| {
                        let v = p.block(grad, b);
                        linalg::dot(v, v)
                    })
                    .sum::<f64>()
                    .sqrt();
                (ng - 1.0).max(0.0)
            }
        })
        .fold(0.0, f64::max)
}

fn group_soft_threshold(p: &LiftedProblem, v: &mut [f64], thresh: f64) {
    let norms = p.group_norms(v);
    for (bs, &n) in p.groups.iter().zip(&norms) {
        let f = if n <= thresh { 0.0 } else { 1.0 - thresh / n };
        for &b in bs {
            linalg::scale(f, &mut v[b * p.dim..(b + 1) * p.dim]);
        }
    }
}

/// Iterations to wait after the first penalty change; the wait grows by a quarter each time.
const RHO_GAP_START: usize = 50;

fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `min Σ_g ‖ζ_g‖₂ s.t. Φζ ≥ 1` by ADMM.
///
/// Splitting: `v = ζ`, `Φ̃v = s`, `s ≥ b̃`, where `Φ̃ = DΦ` has unit rows and
/// `b̃ = D1`. The `v` step solves `(I + Φ̃ᵀΦ̃)v = r` through a Cholesky factor
/// of the `N × N` matrix `I + Φ̃Φ̃ᵀ`, which does not depend on `ρ`.
pub fn solve_group_lasso_margin(p: &LiftedProblem, opts: &SolverOptions) -> Result<SolverResult> {
    let n = p.n_rows();
    let nv = p.n_vars();
    if n == 0 {
        let mut r = infeasible_result(p, 0);
        r.status = SolverStatus::Optimal;
        r.objective = 0.0;
        r.primal_residual = 0.0;
        r.stationarity_residual = 0.0;
        r.complementarity = 0.0;
        return Ok(r);
    }
    let gram = p.gram(None);
    let row_norm: Vec<f64> = (0..n).map(|i| gram[(i, i)].sqrt()).collect();
    if row_norm.iter().any(|&r| r == 0.0) {
        return Ok(infeasible_result(p, 0));
    }
    let dsc: Vec<f64> = row_norm.iter().map(|r| 1.0 / r).collect();
    let gt = DMatrix::from_fn(n, n, |i, j| dsc[i] * gram[(i, j)] * dsc[j]);
    let chol = (DMatrix::identity(n, n) + &gt)
        .cholesky()
        .ok_or_else(|| Error::InvalidShape("I + ΦΦᵀ is not positive definite".into()))?;
    let bt = DVector::from_column_slice(&dsc);
    let fwd = |z: &[f64]| -> DVector<f64> {
        let m = p.apply(z);
        DVector::from_iterator(n, m.iter().zip(&dsc).map(|(a, d)| a * d))
    };
    let bwd = |w: &DVector<f64>| -> Vec<f64> {
        let scaled: Vec<f64> = w.iter().zip(&dsc).map(|(a, d)| a * d).collect();
        p.adjoint(&scaled)
    };

    let mut rho = 1.0;
    // a penalty that keeps moving can trap ADMM in a cycle, so each change
    // waits longer than the one before
    let mut rho_gap = RHO_GAP_START;
    let mut next_rho_update = 0;
    let mut zeta = vec![0.0; nv];
    let mut s = bt.clone();
    let mut u1 = vec![0.0; nv];
    let mut u2 = DVector::zeros(n);
    let mut lam_anchor = DVector::zeros(n);
    let check_every = 10;
    let mut status = SolverStatus::MaxIter;
    let mut iterations = opts.max_iter;
    let mut last = (f64::INFINITY, f64::INFINITY, f64::INFINITY);

    for it in 0..opts.max_iter {
        let a = sub(&zeta, &u1);
        let t = &s - &u2;
        let phi_a = fwd(&a);
        let w = chol.solve(&(&phi_a + &gt * &t));
        let tw = &t - &w;
        let mut v = bwd(&tw);
        for (vi, ai) in v.iter_mut().zip(&a) {
            *vi += ai;
        }
        let phi_v = &phi_a + &gt * &tw;

        let zeta_prev = std::mem::take(&mut zeta);
        zeta = v.iter().zip(&u1).map(|(x, y)| x + y).collect();
        group_soft_threshold(p, &mut zeta, 1.0 / rho);
        let s_prev = s.clone();
        s = DVector::from_fn(n, |i, _| bt[i].max(phi_v[i] + u2[i]));
        for i in 0..nv {
            u1[i] += v[i] - zeta[i];
        }
        u2 += &phi_v - &s;

        if it % check_every != check_every - 1 {
            continue;
        }
        // multipliers of the original constraints Φζ ≥ 1
        let lam_t = u2.map(|v| (-rho * v).max(0.0));
        let lambda: Vec<f64> = lam_t.iter().zip(&dsc).map(|(l, d)| l * d).collect();
        let margins = p.apply(&zeta);
        let grad = p.adjoint(&lambda);
        let pr = primal_residual(&margins);
        let st = group_stationarity(p, &zeta, &grad);
        let cs = complementarity(&lambda, &margins);
        last = (pr, st, cs);
        if pr <= opts.tol && st <= opts.tol && cs <= opts.tol {
            status = SolverStatus::Optimal;
            iterations = it + 1;
            break;
        }
        // Farkas certificate: μ ≥ 0, Φ̃ᵀμ = 0, b̃ᵀμ > 0
        let delta = &lam_t - &lam_anchor;
        let big = delta.amax();
        if big > 1e-12 * (1.0 + lam_t.amax()) {
            let d = &delta / big;
            let ascent = bt.dot(&d);
            if d.min() >= -1e-6 && ascent > 0.0 {
                let proj = linalg::norm2(&bwd(&d));
                if proj <= 1e-6 * ascent {
                    status = SolverStatus::Infeasible;
                    iterations = it + 1;
                    break;
                }
            }
        }
        lam_anchor = lam_t;

        // residual balancing
        let r_prim = (linalg::norm2(&sub(&v, &zeta)).powi(2) + (&phi_v - &s).norm_squared()).sqrt();
        let r_dual = rho
            * (linalg::norm2(&sub(&zeta, &zeta_prev)).powi(2) + (&s - &s_prev).norm_squared()).sqrt();
        let prim_scale = linalg::norm2(&zeta).max(s.norm()).max(1e-12);
        let dual_scale = (rho * (linalg::norm2(&u1).powi(2) + u2.norm_squared()).sqrt()).max(1e-12);
        let (rp, rd) = (r_prim / prim_scale, r_dual / dual_scale);
        if it < next_rho_update {
            continue;
        }
        let factor = if rp > 10.0 * rd {
            2.0
        } else if rd > 10.0 * rp {
            0.5
        } else {
            continue;
        };
        rho *= factor;
        linalg::scale(1.0 / factor, &mut u1);
        u2 /= factor;
        next_rho_update = it + rho_gap;
        rho_gap += rho_gap / 4;
    }
    if status == SolverStatus::Infeasible {
        return Ok(infeasible_result(p, iterations));
    }
    let lambda: Vec<f64> = u2
        .iter()
        .zip(&dsc)
        .map(|(v, d)| (-rho * v).max(0.0) * d)
        .collect();
    let (mut zeta, mut lambda) = (zeta, lambda);
    if status == SolverStatus::MaxIter {
        // slow on badly conditioned rows; finish by reweighting from here
        let (z, l, r, extra) = reweighted_polish(p, zeta, lambda, opts);
        (zeta, lambda, last) = (z, l, r);
        iterations += extra;
        if last.0 <= opts.tol && last.1 <= opts.tol && last.2 <= opts.tol {
            status = SolverStatus::Optimal;
        }
    }
    let objective = p.group_norms(&zeta).iter().sum();
    Ok(SolverResult {
        status,
        objective_kind: ObjectiveKind::GroupLasso,
        objective,
        dual_objective: Some(lambda.iter().sum()),
        primal_residual: last.0,
        stationarity_residual: last.1,
        complementarity: last.2,
        iterations,
        rows: p.rows.clone(),
        lambda,
        zeta,
        excluded: p.excluded.clone(),
    })
}

const POLISH_ROUNDS: usize = 2000;

/// Group-lasso KKT residuals `(primal, stationarity, complementarity)`.
fn group_lasso_residuals(p: &LiftedProblem, zeta: &[f64], lambda: &[f64]) -> (f64, f64, f64) {
    let margins = p.apply(zeta);
    let grad = p.adjoint(lambda);
    (
        primal_residual(&margins),
        group_stationarity(p, zeta, &grad),
        complementarity(lambda, &margins),
    )
}

/// Majorize-minimize on `(Σ‖ζ_g‖)² ≤ Σ‖ζ_g‖²/t_g · Σt_g`: each round solves
/// the weighted quadratic margin problem exactly through its NNQP dual and
/// sets `t_g = ‖ζ_g‖`. At the fixed point the dual weights are the group-lasso
/// multipliers. Keeps the best point seen, starting from `(zeta, lambda)`.
fn reweighted_polish(
    p: &LiftedProblem,
    zeta: Vec<f64>,
    lambda: Vec<f64>,
    opts: &SolverOptions,
) -> (Vec<f64>, Vec<f64>, (f64, f64, f64), usize) {
    let score = |r: &(f64, f64, f64)| r.0.max(r.1).max(r.2);
    let mut best_res = group_lasso_residuals(p, &zeta, &lambda);
    let mut best = (zeta.clone(), lambda);
    let ones = vec![1.0; p.n_rows()];
    let mut cur = zeta;
    let mut warm: Option<Vec<f64>> = None;
    let mut rounds = 0;
    while rounds < POLISH_ROUNDS && score(&best_res) > opts.tol {
        rounds += 1;
        let norms = p.group_norms(&cur);
        let top = norms.iter().fold(0.0_f64, |m, v| m.max(*v));
        if !(top > 0.0) {
            break;
        }
        // a floor lets groups that were cut to zero come back
        let t: Vec<f64> = norms.iter().map(|v| v.max(1e-10 * top)).collect();
        let mut block_w = vec![0.0; p.n_vars() / p.dim];
        for (bs, &tg) in p.groups.iter().zip(&t) {
            for &b in bs {
                block_w[b] = tg.sqrt();
            }
        }
        let k = p.gram(Some(&block_w));
        let sol = match &warm {
            Some(w) => nnls::nnls_gram(&k, &ones, Some(w), opts.tol * 1e-2, 20 * ones.len() + 100),
            None => nnls::solve_nnqp(&k, &ones, opts.tol * 1e-2, opts.max_iter),
        };
        if sol.unbounded {
            break;
        }
        let mut z = p.adjoint(&sol.x);
        for (bs, &tg) in p.groups.iter().zip(&t) {
            for &b in bs {
                linalg::scale(tg, &mut z[b * p.dim..(b + 1) * p.dim]);
            }
        }
        let res = group_lasso_residuals(p, &z, &sol.x);
        if score(&res) < score(&best_res) {
            best_res = res;
            best = (z.clone(), sol.x.clone());
        }
        warm = Some(sol.x);
        cur = z;
    }
    (best.0, best.1, best_res, rounds)
}

/// `min ½ζᵀQζ s.t. Φζ ≥ 1` through its nonnegative dual
/// `max 1ᵀλ − ½λᵀKλ`, `K = ΦQ⁺Φᵀ`, with `Q = C^{H−2}M` or the identity.
///
/// The dual is solved by accelerated projected gradient and finished with an
/// active-set polish; the primal is `ζ = Q⁺Φᵀλ`, which has no gauge component.
pub fn solve_quad_margin(p: &LiftedProblem, opts: &SolverOptions) -> Result<SolverResult> {
    let n = p.n_rows();
    let quad = match p.objective {
        ObjectiveKind::QuadM => Some(QuadFormM::new(p.units, p.contexts, p.dim)),
        ObjectiveKind::PlainL2 => None,
        ObjectiveKind::GroupLasso => {
            return Err(Error::Config("solve_quad_margin needs a quadratic objective".into()))
        }
    };
    let k = match quad {
        Some(_) => p.quad_m_kernel(),
        None => p.gram(None),
    };
    if (0..n).any(|i| k[(i, i)] <= 0.0) {
        return Ok(infeasible_result(p, 0));
    }
    let ones = vec![1.0; n];
    let sol = nnls::solve_nnqp(&k, &ones, opts.tol, opts.max_iter);
    if sol.unbounded {
        return Ok(infeasible_result(p, sol.iterations));
    }
    let lambda = sol.x;
    let raw = p.adjoint(&lambda);
    let (zeta, objective) = match quad {
        Some(q) => {
            let z = q.pinv_apply(&raw);
            let v = 0.5 * q.value(&z);
            (z, v)
        }
        None => {
            let v = 0.5 * linalg::dot(&raw, &raw);
            (raw, v)
        }
    };
    let margins = p.apply(&zeta);
    let kl = &k * DVector::from_column_slice(&lambda);
    let dual_objective = lambda.iter().sum::<f64>() - 0.5 * kl.dot(&DVector::from_column_slice(&lambda));
    let pr = primal_residual(&margins);
    let st = nnls::kkt_violation(&k, &ones, &lambda);
    let cs = complementarity(&lambda, &margins);
    let ok = pr <= opts.tol && cs <= opts.tol && st <= opts.tol;
    Ok(SolverResult {
        status: if ok { SolverStatus::Optimal } else { SolverStatus::MaxIter },
        objective_kind: p.objective,
        objective,
        dual_objective: Some(dual_objective),
        primal_residual: pr,
        stationarity_residual: st,
        complementarity: cs,
        iterations: sol.iterations,
        rows: p.rows.clone(),
        lambda,
        zeta,
        excluded: p.excluded.clone(),
    })
}

/// Dispatches on the problem's objective kind.
pub fn solve(p: &LiftedProblem, opts: &SolverOptions) -> Result<SolverResult> {
    match p.objective {
        ObjectiveKind::GroupLasso => solve_group_lasso_margin(p, opts),
        _ => solve_quad_margin(p, opts),
    }
}

/// `α = max_γ m_γ^{−1/ν}` for per-context minimum margins `m_γ`.
pub fn normalization_scale(min_margins: &[f64], degree: u32) -> Result<f64> {
    let worst = min_margins.iter().copied().fold(f64::INFINITY, f64::min);
    if !(worst > 0.0) {
        return Err(Error::NotSeparated(if worst.is_finite() { worst } else { 0.0 }));
    }
    Ok(min_margins
        .iter()
        .map(|m| m.powf(-1.0 / degree as f64))
        .fold(0.0, f64::max))
}

/// Per-sample global contexts used for certification: the dataset's for
/// gated families, the network's own gates for ReLU nets, and a single
/// shared context for linear models.
fn certification_contexts(model: &Model, ds: &Dataset) -> Result<Vec<GlobalContext>> {
    match model {
        Model::Relu(net) => (0..ds.len()).map(|n| relu_gates(net, ds.x(n))).collect(),
        Model::Linear(_) => Ok(vec![GlobalContext(vec![1]); ds.len()]),
        _ => Ok(ds.contexts().ok_or(Error::MissingContexts)?.to_vec()),
    }
}

fn per_context_minima(ctx: &[GlobalContext], margins: &[f64]) -> BTreeMap<GlobalContext, f64> {
    let mut mins: BTreeMap<GlobalContext, f64> = BTreeMap::new();
    for (g, &m) in ctx.iter().zip(margins) {
        let e = mins.entry(g.clone()).or_insert(f64::INFINITY);
        *e = e.min(m);
    }
    mins
}

/// Scales the candidate so that every context's minimum margin is ≥ 1 with
/// equality in at least one. Returns the scaled model and `α`.
pub fn margin_normalize(model: &Model, ds: &Dataset) -> Result<(Model, f64)> {
    let ctx = certification_contexts(model, ds)?;
    let scored = match model {
        Model::Relu(_) | Model::Linear(_) => ds.clone().without_contexts(),
        _ => ds.clone(),
    };
    let margins: Vec<f64> = model
        .scores(&scored)?
        .iter()
        .enumerate()
        .map(|(n, f)| ds.y(n) * f)
        .collect();
    let mins: Vec<f64> = per_context_minima(&ctx, &margins).into_values().collect();
    let alpha = normalization_scale(&mins, model.degree())?;
    let mut out = model.clone();
    linalg::scale(alpha, out.params_mut());
    Ok((out, alpha))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CertifyOptions {
    /// Relative tolerance for membership in a context's minimum-margin set.
    pub margin_tol: f64,
    /// Multipliers above this count as active.
    pub dual_tol: f64,
    pub max_iter: usize,
}

impl Default for CertifyOptions {
    fn default() -> Self {
        Self { margin_tol: 1e-4, dual_tol: 1e-8, max_iter: 20_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    /// Scale applied by margin normalization.
    pub alpha: f64,
    /// Support set of each context, keyed by context label.
    pub supports: BTreeMap<String, Vec<usize>>,
    pub lambda: BTreeMap<usize, f64>,
    pub active_duals: usize,
    /// `‖ζ̂ − stationarity expression‖ / ‖ζ̂‖`
    pub residual: f64,
    /// `max_n λ_n (margin_n − m_γ(n))` over the supports.
    pub complementarity: f64,
    pub min_margin: f64,
}

/// Certifies stationarity of a candidate for its family's margin problem.
///
/// Two-layer GLNs and ζ parameterizations are checked against
/// `ζ_{hc} = ‖ζ_h‖ Σ_{n: γ_h = c} λ_n y_n x_n`; ReLU nets through their
/// frozen-gate ζ; shallow and linear models against `β_γ = Σ λ_n y_n x_n`.
pub fn kkt_certify(candidate: &Model, ds: &Dataset, opts: &CertifyOptions) -> Result<KktReport> {
    if opts.margin_tol < 0.0 || ds.is_empty() {
        return Err(Error::EmptySupport);
    }
    let (scaled, alpha) = margin_normalize(candidate, ds)?;
    let ctx = certification_contexts(&scaled, ds)?;
    let annotated = ds.clone().with_contexts(ctx.clone())?;

    // lift and target vector in lifted coordinates, plus block weights
    let (problem, target, weights): (LiftedProblem, Vec<f64>, Option<Vec<f64>>) = match &scaled {
        Model::Gln(m) => {
            let z = w_to_zeta(m);
            let p = lift(&annotated, LiftSpec::Gln { contexts: z.contexts })?;
            let w = group_block_weights(&p, &z.values);
            (p, z.values, Some(w))
        }
        Model::Zeta(z) => {
            let spec = match z.kind {
                ZetaKind::Gln => LiftSpec::Gln { contexts: z.contexts },
                ZetaKind::Frelu => LiftSpec::Frelu,
            };
            let p = lift(&annotated, spec)?;
            let w = group_block_weights(&p, &z.values);
            (p, z.values.clone(), Some(w))
        }
        Model::Relu(net) => {
            let z = net.freeze();
            let p = lift(&annotated, LiftSpec::Frelu)?;
            let w = group_block_weights(&p, &z.values);
            (p, z.values, Some(w))
        }
        Model::Shallow(s) => {
            let p = lift(&annotated, LiftSpec::Shallow)?;
            let mut t = vec![0.0; p.n_vars()];
            for (k, g) in p.keys.iter().enumerate() {
                if let Some(b) = s.beta(g) {
                    t[k * p.dim..(k + 1) * p.dim].copy_from_slice(b);
                }
            }
            (p, t, None)
        }
        Model::Linear(l) => (lift(&annotated, LiftSpec::Plain)?, l.beta.clone(), None),
    };

    let margins_all = problem.apply(&target);
    // margins on the candidate's own scale: Φ applied to the lifted target
    let row_ctx: Vec<&GlobalContext> = problem.rows.iter().map(|&n| &ctx[n]).collect();
    let mut mins: BTreeMap<&GlobalContext, f64> = BTreeMap::new();
    for (g, &m) in row_ctx.iter().zip(&margins_all) {
        let e = mins.entry(*g).or_insert(f64::INFINITY);
        *e = e.min(m);
    }
    let mut supports: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut support_rows = Vec::new();
    for (i, (g, &m)) in row_ctx.iter().zip(&margins_all).enumerate() {
        let mg = mins[g];
        if m - mg <= opts.margin_tol * mg.abs() {
            supports.entry(g.label()).or_default().push(problem.rows[i]);
            support_rows.push(i);
        }
    }
    if support_rows.is_empty() {
        return Err(Error::EmptySupport);
    }
    let min_margin = mins.values().copied().fold(f64::INFINITY, f64::min);

    // Gram form of min ‖Aλ − ζ̂‖ over λ ≥ 0 supported on the supports
    let full_gram = problem.gram(weights.as_deref());
    let ks = support_rows.len();
    let g = DMatrix::from_fn(ks, ks, |a, b| full_gram[(support_rows[a], support_rows[b])]);
    let weighted_target: Vec<f64> = match &weights {
        Some(w) => target
            .chunks(problem.dim)
            .zip(w)
            .flat_map(|(c, &wb)| c.iter().map(move |v| v * wb))
            .collect(),
        None => target.clone(),
    };
    let cw = problem.apply(&weighted_target);
    let c: Vec<f64> = support_rows.iter().map(|&i| cw[i]).collect();
    let sol = nnls::solve_nnqp(&g, &c, 1e-12, opts.max_iter);

    let mut lam_rows = vec![0.0; problem.n_rows()];
    for (k, &i) in support_rows.iter().enumerate() {
        lam_rows[i] = sol.x[k];
    }
    let fitted = problem.adjoint_weighted(&lam_rows, weights.as_deref());
    let tnorm = linalg::norm2(&target);
    let residual = if tnorm == 0.0 {
        0.0
    } else {
        linalg::norm2(&sub(&fitted, &target)) / tnorm
    };
    let mut complementarity = 0.0_f64;
    let mut lambda = BTreeMap::new();
    let mut active = 0;
    for &i in &support_rows {
        let l = lam_rows[i];
        lambda.insert(problem.rows[i], l);
        if l > opts.dual_tol {
            active += 1;
        }
        complementarity = complementarity.max(l * (margins_all[i] - mins[row_ctx[i]]));
    }
    Ok(KktReport {
        alpha,
        supports,
        lambda,
        active_duals: active,
        residual,
        complementarity,
        min_margin,
    })
}

/// Block weights `‖ζ_g‖` for every block of group `g`.
fn group_block_weights(p: &LiftedProblem, zeta: &[f64]) -> Vec<f64> {
    let norms = p.group_norms(zeta);
    let mut w = vec![0.0; p.blocks];
    for (bs, &n) in p.groups.iter().zip(&norms) {
        for &b in bs {
            w[b] = n;
        }
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::TwoLayerGln;

    fn two_points() -> Dataset {
        Dataset::new(2, vec![1.0, 0.0, -1.0, 0.0], vec![1.0, -1.0]).unwrap()
    }

    #[test]
    fn gln_lift_row() {
        let ds = Dataset::new(1, vec![3.0], vec![1.0])
            .unwrap()
            .with_contexts(vec![GlobalContext(vec![1, 2])])
            .unwrap();
        let p = lift(&ds, LiftSpec::Gln { contexts: 2 }).unwrap();
        assert_eq!(p.row_blocks[0], vec![0, 3]);
        let m = TwoLayerGln::new(2, 2, 1, vec![2.0, 3.0, 5.0, 7.0], vec![1.0, -1.0]).unwrap();
        let z = w_to_zeta(&m);
        assert_eq!(p.apply(&z.values), vec![m.score(&[3.0], ds.context(0)).unwrap()]);
    }

    #[test]
    fn plain_two_point_svm() {
        let p = lift(&two_points(), LiftSpec::Plain).unwrap();
        let r = solve_quad_margin(&p, &SolverOptions { tol: 1e-10, max_iter: 10_000 }).unwrap();
        assert_eq!(r.status, SolverStatus::Optimal);
        assert!((r.zeta[0] - 1.0).abs() < 1e-10 && r.zeta[1].abs() < 1e-10);
        assert!((r.lambda[0] - 0.5).abs() < 1e-10 && (r.lambda[1] - 0.5).abs() < 1e-10);
        let g = solve_group_lasso_margin(&p, &SolverOptions { tol: 1e-8, max_iter: 50_000 }).unwrap();
        assert_eq!(g.status, SolverStatus::Optimal);
        assert!((g.objective - 1.0).abs() < 1e-6);
    }

    #[test]
    fn group_lasso_single_sample() {
        let ds = Dataset::new(2, vec![2.0, 0.0], vec![1.0])
            .unwrap()
            .with_contexts(vec![GlobalContext(vec![1, 1])])
            .unwrap();
        let p = lift(&ds, LiftSpec::Gln { contexts: 2 }).unwrap();
        let r = solve_group_lasso_margin(&p, &SolverOptions { tol: 1e-9, max_iter: 50_000 }).unwrap();
        assert_eq!(r.status, SolverStatus::Optimal);
        assert!((r.objective - 0.5).abs() < 1e-7, "{r:?}");
    }

    #[test]
    fn contradictory_rows_are_infeasible() {
        let ds = Dataset::new(2, vec![1.0, 0.5, 1.0, 0.5], vec![1.0, -1.0])
            .unwrap()
            .with_contexts(vec![GlobalContext(vec![1, 2]); 2])
            .unwrap();
        let p = lift(&ds, LiftSpec::Gln { contexts: 2 }).unwrap();
        let r = solve_group_lasso_margin(&p, &SolverOptions::default()).unwrap();
        assert_eq!(r.status, SolverStatus::Infeasible);
        let q = p.with_objective(ObjectiveKind::QuadM).unwrap();
        assert_eq!(solve_quad_margin(&q, &SolverOptions::default()).unwrap().status, SolverStatus::Infeasible);
    }

    #[test]
    fn normalization_examples() {
        assert_eq!(normalization_scale(&[4.0], 2).unwrap(), 0.5);
        assert_eq!(normalization_scale(&[1.0], 2).unwrap(), 1.0);
        assert_eq!(normalization_scale(&[4.0, 9.0], 2).unwrap(), 0.5);
        assert!(matches!(normalization_scale(&[1.0, -0.1], 1), Err(Error::NotSeparated(_))));
    }

    #[test]
    fn certify_two_point_svm() {
        let m = Model::Linear(LinearModel { beta: vec![3.0, 0.0] });
        let r = kkt_certify(&m, &two_points(), &CertifyOptions::default()).unwrap();
        assert!((r.alpha - 1.0 / 3.0).abs() < 1e-15);
        assert!(r.residual < 1e-12);
        assert!((r.lambda[&0] - 0.5).abs() < 1e-10 && (r.lambda[&1] - 0.5).abs() < 1e-10);
    }

    #[test]
    fn frelu_rows_without_gates_are_excluded() {
        let ds = Dataset::new(1, vec![1.0, 2.0], vec![1.0, 1.0])
            .unwrap()
            .with_contexts(vec![GlobalContext(vec![1, 0]), GlobalContext(vec![0, 0])])
            .unwrap();
        let p = lift(&ds, LiftSpec::Frelu).unwrap();
        assert_eq!(p.row_blocks, vec![vec![0]]);
        assert_eq!(p.excluded, vec![1]);
    }
}
