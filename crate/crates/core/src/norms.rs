//! The GLN norm, the FReLU norm, the `‖β‖²` quadratic form in ζ, and the
//! architectural (equivariance) constraints on predictor tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gating::GlobalContext;
use crate::linalg;
use crate::models::{BetaTable, ZetaKind, ZetaParam};

/// The matrix `Q = C^{H−2} M` with
/// `M[(h,c,d),(h',c',d')] = δ_dd' (1 + C δ_hh' δ_cc' − δ_hh')`, never materialized.
///
/// Per input coordinate its spectrum is `H·C` on the all-ones direction, `C`
/// on directions with zero row sums and `0` on the gauge directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuadFormM {
    pub units: usize,
    pub contexts: usize,
    pub dim: usize,
}

impl QuadFormM {
    pub fn new(units: usize, contexts: usize, dim: usize) -> Self {
        Self { units, contexts, dim }
    }

    pub fn len(&self) -> usize {
        self.units * self.contexts * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn c_pow(&self, e: i32) -> f64 {
        (self.contexts as f64).powi(e)
    }

    /// Global mean and per-unit means of coordinate `d`.
    fn means(&self, v: &[f64], d: usize) -> (f64, Vec<f64>) {
        let (h_n, c_n, d_n) = (self.units, self.contexts, self.dim);
        let mut rows = vec![0.0; h_n];
        for (h, r) in rows.iter_mut().enumerate() {
            *r = (0..c_n).map(|c| v[(h * c_n + c) * d_n + d]).sum::<f64>() / c_n as f64;
        }
        let global = rows.iter().sum::<f64>() / h_n as f64;
        (global, rows)
    }

    /// `C^{H−2} ζᵀMζ`
    pub fn value(&self, zeta: &[f64]) -> f64 {
        assert_eq!(zeta.len(), self.len());
        let (h_n, c_n, d_n) = (self.units, self.contexts, self.dim);
        let mut total = 0.0;
        for d in 0..d_n {
            let mut all = 0.0;
            let mut sq = 0.0;
            let mut rows = 0.0;
            for h in 0..h_n {
                let mut row = 0.0;
                for c in 0..c_n {
                    let z = zeta[(h * c_n + c) * d_n + d];
                    row += z;
                    sq += z * z;
                }
                all += row;
                rows += row * row;
            }
            total += all * all + c_n as f64 * sq - rows;
        }
        self.c_pow(self.units as i32 - 2) * total
    }

    /// `Q v`
    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        let (h_n, c_n, d_n) = (self.units, self.contexts, self.dim);
        let s = self.c_pow(h_n as i32 - 2);
        let mut out = vec![0.0; v.len()];
        for d in 0..d_n {
            let (g, rows) = self.means(v, d);
            let all = g * (h_n * c_n) as f64;
            for h in 0..h_n {
                let row = rows[h] * c_n as f64;
                for c in 0..c_n {
                    let i = (h * c_n + c) * d_n + d;
                    out[i] = s * (all + c_n as f64 * v[i] - row);
                }
            }
        }
        out
    }

    /// `Q⁺ v = C^{1−H} [P_rowzero v + P_ones v / H]`
    pub fn pinv_apply(&self, v: &[f64]) -> Vec<f64> {
        let (h_n, c_n, d_n) = (self.units, self.contexts, self.dim);
        let s = self.c_pow(1 - h_n as i32);
        let mut out = vec![0.0; v.len()];
        for d in 0..d_n {
            let (g, rows) = self.means(v, d);
            for h in 0..h_n {
                for c in 0..c_n {
                    let i = (h * c_n + c) * d_n + d;
                    out[i] = s * (v[i] - rows[h] + g / h_n as f64);
                }
            }
        }
        out
    }

    /// Orthogonal projection onto the gauge directions (block-constant per
    /// unit, zero-sum across units).
    pub fn gauge_project(&self, v: &[f64]) -> Vec<f64> {
        let (h_n, c_n, d_n) = (self.units, self.contexts, self.dim);
        let mut out = vec![0.0; v.len()];
        for d in 0..d_n {
            let (g, rows) = self.means(v, d);
            for h in 0..h_n {
                for c in 0..c_n {
                    out[(h * c_n + c) * d_n + d] = rows[h] - g;
                }
            }
        }
        out
    }
}

/// `‖β‖₂² = Σ_γ ‖β_γ‖²` of a GLN ζ, via the quadratic form.
pub fn l2_norm_beta(zeta: &ZetaParam) -> Result<f64> {
    if zeta.kind != ZetaKind::Gln {
        return Err(Error::InvalidShape("l2_norm_beta needs a GLN ζ".into()));
    }
    Ok(QuadFormM::new(zeta.units, zeta.contexts, zeta.dim).value(&zeta.values))
}

/// `Σ_h ‖ζ_h‖₂`
pub fn frelu_norm(zeta: &ZetaParam) -> f64 {
    zeta.group_norm()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormReport {
    pub value: f64,
    pub alpha: Option<f64>,
    pub residual: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClosedNorm {
    pub value: f64,
    pub alpha: f64,
}

fn table_2x2(beta: &BetaTable) -> Result<[&[f64]; 4]> {
    if beta.units != 2 || beta.contexts != 2 {
        return Err(Error::InvalidShape(format!(
            "closed form needs H=C=2, got H={} C={}",
            beta.units, beta.contexts
        )));
    }
    let at = |a, b| beta.get(&GlobalContext(vec![a, b]));
    Ok([at(1, 1), at(1, 2), at(2, 1), at(2, 2)])
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `√((‖β₁₁−β₁₂‖ + ‖β₁₁−β₂₁‖)² + ‖β₁₂+β₂₁‖²)` and its interpolation weight.
pub fn gln_norm_closed_2x2(beta: &BetaTable) -> Result<ClosedNorm> {
    let [b11, b12, b21, _] = table_2x2(beta)?;
    let p = diff_norm(b11, b12);
    let q = diff_norm(b11, b21);
    let s: f64 = b12.iter().zip(b21).map(|(x, y)| (x + y) * (x + y)).sum();
    let alpha = if p + q == 0.0 { 0.5 } else { q / (p + q) };
    Ok(ClosedNorm {
        value: ((p + q) * (p + q) + s).sqrt(),
        alpha,
    })
}

/// `√(‖β‖² + ½ Σ_ij ‖β_ij − β_īj‖·‖β_ij − β_ij̄‖)`, equal to the closed form on
/// equivariant tables.
pub fn gln_norm_closed_2x2_pairwise(beta: &BetaTable) -> Result<f64> {
    let t = table_2x2(beta)?;
    // index (i, j) -> slot: (1,1)=0 (1,2)=1 (2,1)=2 (2,2)=3
    let slot = |i: usize, j: usize| (i - 1) * 2 + (j - 1);
    let mut cross = 0.0;
    for i in 1..=2 {
        for j in 1..=2 {
            let here = t[slot(i, j)];
            cross += diff_norm(here, t[slot(3 - i, j)]) * diff_norm(here, t[slot(i, 3 - j)]);
        }
    }
    Ok((beta.l2_squared() + 0.5 * cross).sqrt())
}

/// `(Aᵀβ)_{hc} = Σ_{γ: γ_h = c} β_γ`
fn adjoint(beta: &BetaTable) -> Vec<f64> {
    let (h_n, c_n, d_n) = (beta.units, beta.contexts, beta.dim);
    let mut out = vec![0.0; h_n * c_n * d_n];
    for i in 0..beta.len() {
        let g = beta.context_at(i);
        for h in 0..h_n {
            let start = (h * c_n + g.get(h) as usize - 1) * d_n;
            linalg::axpy(1.0, beta.at(i), &mut out[start..start + d_n]);
        }
    }
    out
}

/// Minimum-‖ζ‖₂ decomposition `β_γ = Σ_h ζ_{hγ_h}` (exact when β is equivariant).
pub fn min_norm_decomposition(beta: &BetaTable) -> ZetaParam {
    let q = QuadFormM::new(beta.units, beta.contexts, beta.dim);
    let values = q.pinv_apply(&adjoint(beta));
    ZetaParam::gln(beta.units, beta.contexts, beta.dim, values).expect("shape by construction")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivarianceReport {
    pub max_violation: f64,
    pub pairs_checked: usize,
    pub passes: bool,
}

/// Checks `β_{γ[h→c]} − β_γ = β_{γ[h→c, h'→c']} − β_{γ[h'→c']}` for every
/// `γ`, unit pair `h ≠ h'` and replacement contexts. These elementary
/// relations generate every pair-of-pairs constraint.
pub fn check_equivariance(beta: &BetaTable, tol: f64) -> EquivarianceReport {
    let (h_n, c_n, d_n) = (beta.units, beta.contexts, beta.dim);
    let mut worst = 0.0_f64;
    let mut pairs = 0;
    let mut diff = vec![0.0; d_n];
    for i in 0..beta.len() {
        let g = beta.context_at(i);
        for h in 0..h_n {
            for c in 1..=c_n as u32 {
                if c == g.get(h) {
                    continue;
                }
                for h2 in h + 1..h_n {
                    for c2 in 1..=c_n as u32 {
                        if c2 == g.get(h2) {
                            continue;
                        }
                        let mut a = g.clone();
                        a.0[h] = c;
                        let mut ab = a.clone();
                        ab.0[h2] = c2;
                        let mut b = g.clone();
                        b.0[h2] = c2;
                        let (ba, b0, bab, bb) = (beta.get(&a), beta.at(i), beta.get(&ab), beta.get(&b));
                        for k in 0..d_n {
                            diff[k] = (ba[k] - b0[k]) - (bab[k] - bb[k]);
                        }
                        worst = worst.max(linalg::norm2(&diff));
                        pairs += 1;
                    }
                }
            }
        }
    }
    EquivarianceReport {
        max_violation: worst,
        pairs_checked: pairs,
        passes: worst <= tol,
    }
}

/// Fills a full table from the free set `{γ : at most one γ_h ≠ 1}` via
/// `β_γ = β_1 + Σ_h (β_{1[h→γ_h]} − β_1)`.
pub fn complete_predictors(
    units: usize,
    contexts: usize,
    free: &[(GlobalContext, Vec<f64>)],
) -> Result<BetaTable> {
    let want = (contexts - 1) * units + 1;
    if free.len() != want {
        return Err(Error::InvalidShape(format!(
            "free set has {} predictors, expected {want}",
            free.len()
        )));
    }
    let dim = free[0].1.len();
    let anchor_key = GlobalContext(vec![1; units]);
    let mut anchor = None;
    // single[h][c-2]
    let mut single: Vec<Vec<Option<&[f64]>>> = vec![vec![None; contexts - 1]; units];
    for (g, b) in free {
        if g.len() != units || g.0.iter().any(|&v| v == 0 || v as usize > contexts) {
            return Err(Error::ContextOutOfRange(g.label()));
        }
        if b.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: b.len() });
        }
        let moved: Vec<usize> = (0..units).filter(|&h| g.get(h) != 1).collect();
        match moved.as_slice() {
            [] => anchor = Some(b.as_slice()),
            [h] => single[*h][g.get(*h) as usize - 2] = Some(b.as_slice()),
            _ => return Err(Error::ContextOutOfRange(format!("{} is not in the free set", g.label()))),
        }
    }
    let anchor = anchor.ok_or_else(|| Error::ContextOutOfRange(anchor_key.label()))?;
    if single.iter().flatten().any(|s| s.is_none()) {
        return Err(Error::InvalidShape("free set has duplicates".into()));
    }
    let mut table = BetaTable::zeros(units, contexts, dim)?;
    for i in 0..table.len() {
        let g = table.context_at(i);
        let out = table.at_mut(i);
        out.copy_from_slice(anchor);
        for h in 0..units {
            let c = g.get(h);
            if c != 1 {
                let s = single[h][c as usize - 2].expect("checked");
                for k in 0..dim {
                    out[k] += s[k] - anchor[k];
                }
            }
        }
    }
    Ok(table)
}

fn block_soft_threshold(v: &mut [f64], block: usize, thresh: f64) {
    for chunk in v.chunks_mut(block) {
        let n = linalg::norm2(chunk);
        let f = if n <= thresh { 0.0 } else { 1.0 - thresh / n };
        linalg::scale(f, chunk);
    }
}

/// `min Σ_h ‖ζ_h‖₂ s.t. β_γ = Σ_h ζ_{hγ_h}` by ADMM over the affine solution set.
///
/// The solution set is the min-norm decomposition plus the gauge directions,
/// so the projection step is closed form.
pub fn gln_norm_variational(beta: &BetaTable, tol: f64) -> Result<(NormReport, ZetaParam)> {
    let scale = (0..beta.len()).map(|i| linalg::norm2(beta.at(i))).fold(0.0, f64::max);
    let eq = check_equivariance(beta, 1e-8 * scale.max(1.0));
    if !eq.passes {
        return Err(Error::NotEquivariant(eq.max_violation));
    }
    let q = QuadFormM::new(beta.units, beta.contexts, beta.dim);
    let base = min_norm_decomposition(beta);
    let block = beta.contexts * beta.dim;
    let alpha = if beta.units == 2 && beta.contexts == 2 {
        Some(gln_norm_closed_2x2(beta)?.alpha)
    } else {
        None
    };
    if scale == 0.0 {
        let report = NormReport { value: 0.0, alpha, residual: 0.0, iterations: 0 };
        return Ok((report, base));
    }
    let z0 = &base.values;
    let n = z0.len();
    let mut z = z0.clone();
    let mut u = vec![0.0; n];
    let mut zeta = z0.clone();
    let mut rho = 1.0 / scale;
    let mut residual = f64::INFINITY;
    let max_iter = 500_000;
    let mut iterations = max_iter;
    let abs_tol = tol * scale;
    for it in 0..max_iter {
        let shift: Vec<f64> = (0..n).map(|i| z[i] - u[i] - z0[i]).collect();
        let g = q.gauge_project(&shift);
        for i in 0..n {
            zeta[i] = z0[i] + g[i];
        }
        let z_old = z.clone();
        for i in 0..n {
            z[i] = zeta[i] + u[i];
        }
        block_soft_threshold(&mut z, block, 1.0 / rho);
        let mut r2 = 0.0;
        let mut s2 = 0.0;
        for i in 0..n {
            let r = zeta[i] - z[i];
            u[i] += r;
            r2 += r * r;
            s2 += (z[i] - z_old[i]).powi(2);
        }
        let (r, s) = (r2.sqrt(), rho * s2.sqrt());
        // dual residual is in gradient units (≈1); primal in β units
        residual = (r / scale).max(s);
        if residual <= tol && it > 0 {
            iterations = it + 1;
            break;
        }
        if it % 20 == 19 {
            if r / abs_tol > 10.0 * s / tol {
                rho *= 2.0;
                u.iter_mut().for_each(|v| *v *= 0.5);
            } else if s / tol > 10.0 * r / abs_tol {
                rho *= 0.5;
                u.iter_mut().for_each(|v| *v *= 2.0);
            }
        }
    }
    let zeta = ZetaParam::gln(beta.units, beta.contexts, beta.dim, zeta)?;
    let report = NormReport {
        value: zeta.group_norm(),
        alpha,
        residual,
        iterations,
    };
    Ok((report, zeta))
}
