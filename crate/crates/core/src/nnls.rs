//! Lawson–Hanson active-set solver for nonnegative quadratic programs in Gram form:
//! `min ½ xᵀGx − cᵀx  s.t. x ≥ 0`, with `G` symmetric positive semidefinite.
//!
//! With `G = AᵀA` and `c = Aᵀb` this is ordinary NNLS.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct NnlsResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// A nonnegative ascent direction `d` with `Gd ≈ 0` and `cᵀd > 0` was found.
    pub unbounded: bool,
}

fn solve_sub(g: &DMatrix<f64>, c: &[f64], idx: &[usize]) -> Vec<f64> {
    let k = idx.len();
    let sub = DMatrix::from_fn(k, k, |i, j| g[(idx[i], idx[j])]);
    let rhs = DVector::from_iterator(k, idx.iter().map(|&i| c[i]));
    if let Some(ch) = sub.clone().cholesky() {
        let s = ch.solve(&rhs);
        if s.iter().all(|v| v.is_finite()) {
            return s.iter().copied().collect();
        }
    }
    // rank-deficient passive set: minimum-norm least-squares solution
    let svd = sub.svd(true, true);
    let eps = 1e-13 * svd.singular_values.max().max(1e-300);
    match svd.solve(&rhs, eps) {
        Ok(s) => s.iter().copied().collect(),
        Err(_) => vec![0.0; k],
    }
}

/// Negative gradient `c − Gx`.
pub fn gradient_gap(g: &DMatrix<f64>, c: &[f64], x: &[f64]) -> Vec<f64> {
    let n = c.len();
    (0..n)
        .map(|i| c[i] - (0..n).map(|j| g[(i, j)] * x[j]).sum::<f64>())
        .collect()
}

/// `init` seeds the passive set with its positive entries.
pub fn nnls_gram(g: &DMatrix<f64>, c: &[f64], init: Option<&[f64]>, tol: f64, max_iter: usize) -> NnlsResult {
    let n = c.len();
    assert_eq!(g.nrows(), n);
    let mut x: Vec<f64> = match init {
        Some(v) => v.iter().map(|&t| if t > 0.0 { t } else { 0.0 }).collect(),
        None => vec![0.0; n],
    };
    let mut passive: Vec<bool> = x.iter().map(|&t| t > 0.0).collect();
    let scale = c.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    let mut iterations = 0;
    let mut pending_inner = passive.iter().any(|&p| p);
    let mut last_added: Option<usize> = None;
    let mut blocked = vec![false; n];

    loop {
        if iterations >= max_iter {
            return NnlsResult { x, iterations, converged: false, unbounded: false };
        }
        if !pending_inner {
            let w = gradient_gap(g, c, &x);
            let pick = (0..n)
                .filter(|&i| !passive[i] && !blocked[i])
                .max_by(|&a, &b| w[a].total_cmp(&w[b]));
            match pick {
                Some(j) if w[j] > tol * scale => {
                    passive[j] = true;
                    last_added = Some(j);
                }
                _ => return NnlsResult { x, iterations, converged: true, unbounded: false },
            }
        }
        pending_inner = false;
        let started_by = last_added;
        // inner loop keeps x feasible while moving toward the passive-set optimum
        loop {
            iterations += 1;
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            if idx.is_empty() {
                break;
            }
            let s = solve_sub(g, c, &idx);
            if s.iter().all(|&v| v > 0.0) {
                for (k, &i) in idx.iter().enumerate() {
                    x[i] = s[k];
                }
                if started_by.is_some_and(|j| !blocked[j]) {
                    blocked.iter_mut().for_each(|b| *b = false);
                }
                break;
            }
            if let Some(j) = last_added.take() {
                let k = idx.iter().position(|&i| i == j).expect("just added");
                if s[k] <= 0.0 && x[j] == 0.0 {
                    // no progress possible along j: degenerate step
                    passive[j] = false;
                    blocked[j] = true;
                    continue;
                }
            }
            let mut alpha = f64::INFINITY;
            for (k, &i) in idx.iter().enumerate() {
                if s[k] <= 0.0 {
                    let denom = x[i] - s[k];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            for (k, &i) in idx.iter().enumerate() {
                x[i] += alpha * (s[k] - x[i]);
                if x[i] <= 1e-15 * scale || s[k] <= 0.0 && x[i] <= 0.0 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if iterations >= max_iter {
                break;
            }
        }
    }
}

/// Largest eigenvalue of a PSD matrix by power iteration.
pub fn spectral_bound(g: &DMatrix<f64>) -> f64 {
    let n = g.nrows();
    if n == 0 {
        return 0.0;
    }
    let mut v = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    let mut est = 0.0;
    for _ in 0..200 {
        let w = g * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = w.dot(&v);
        v = w / norm;
        if (next - est).abs() <= 1e-9 * next.abs() {
            est = next;
            break;
        }
        est = next;
    }
    // power iteration underestimates; pad and fall back on the trace bound
    (est * 1.05).min(g.trace()).max(est)
}

/// Largest violation of the optimality conditions, relative to `max |c|`.
pub fn kkt_violation(g: &DMatrix<f64>, c: &[f64], x: &[f64]) -> f64 {
    let scale = c.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-300);
    gradient_gap(g, c, x)
        .iter()
        .zip(x)
        .map(|(&w, &xi)| if xi > 0.0 { w.abs() } else { w.max(0.0) })
        .fold(0.0, f64::max)
        / scale
}

/// Outcome of [`nnqp_apg`].
#[derive(Debug, Clone)]
pub struct ApgResult {
    pub x: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub unbounded: bool,
}

/// Accelerated projected gradient with adaptive restart, from `x0`.
///
/// Every ten iterations the step taken over that window is tested as a
/// certificate of unboundedness.
pub fn nnqp_apg(g: &DMatrix<f64>, c: &[f64], x0: &[f64], tol: f64, max_iter: usize) -> ApgResult {
    let n = c.len();
    let lip = spectral_bound(g);
    if n == 0 || lip == 0.0 {
        let unbounded = c.iter().any(|&v| v > 0.0);
        return ApgResult { x: x0.to_vec(), iterations: 0, converged: !unbounded, unbounded };
    }
    let step = 1.0 / lip;
    let cv = DVector::from_column_slice(c);
    let mut x = DVector::from_column_slice(x0);
    let mut y = x.clone();
    let mut anchor = x.clone();
    let mut t = 1.0_f64;
    for it in 0..max_iter {
        let grad = &cv - g * &y;
        let next = (&y + grad * step).map(|v| v.max(0.0));
        // restart when the momentum step points uphill
        if (&y - &next).dot(&(&next - &x)) > 0.0 {
            t = 1.0;
            y = next.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &next + (&next - &x) * ((t - 1.0) / t_next);
            t = t_next;
        }
        x = next;
        if it % 10 == 9 {
            if kkt_violation(g, c, x.as_slice()) <= tol {
                return ApgResult { x: x.iter().copied().collect(), iterations: it + 1, converged: true, unbounded: false };
            }
            let delta = &x - &anchor;
            let big = delta.amax();
            if big > 0.0 {
                let d = delta / big;
                let ascent = cv.dot(&d);
                if d.min() >= -1e-9 && ascent > 0.0 && (g * &d).amax() <= 1e-9 * lip {
                    return ApgResult { x: x.iter().copied().collect(), iterations: it + 1, converged: false, unbounded: true };
                }
            }
            anchor = x.clone();
        }
    }
    ApgResult { x: x.iter().copied().collect(), iterations: max_iter, converged: false, unbounded: false }
}

/// First-order warm start followed by an active-set polish; returns the
/// better of the two points.
pub fn solve_nnqp(g: &DMatrix<f64>, c: &[f64], tol: f64, max_iter: usize) -> NnlsResult {
    let n = c.len();
    let apg = nnqp_apg(g, c, &vec![0.0; n], tol.max(1e-6), max_iter);
    if apg.unbounded {
        return NnlsResult { x: apg.x, iterations: apg.iterations, converged: false, unbounded: true };
    }
    let (warm, apg_iters) = (apg.x, apg.iterations);
    let thresh = 1e-9 * warm.iter().fold(0.0_f64, |m, v| m.max(*v));
    let seeded: Vec<f64> = warm.iter().map(|&v| if v > thresh { v } else { 0.0 }).collect();
    let polished = nnls_gram(g, c, Some(&seeded), tol, 20 * n + 100);
    let (va, vb) = (kkt_violation(g, c, &warm), kkt_violation(g, c, &polished.x));
    let iterations = apg_iters + polished.iterations;
    if vb <= va {
        NnlsResult { x: polished.x, iterations, converged: vb <= tol, unbounded: false }
    } else {
        NnlsResult { x: warm, iterations, converged: va <= tol, unbounded: false }
    }
}
