//! Independent oracles, random instance generators, and the numeric
//! acceptance checks shared by the integration tests and the acceptance
//! harness.
#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use glnbias::data::{gen_synthetic, Dataset};
use glnbias::gating::{relu_gates, sample_contexts, ContextSource, GlobalContext};
use glnbias::models::{
    BetaTable, GatedModel, LinearModel, LossKind, Model, ReluNet, ShallowGln, TwoLayerGln, ZetaParam,
};
use glnbias::norms::{
    check_equivariance, complete_predictors, gln_norm_closed_2x2, gln_norm_closed_2x2_pairwise,
    gln_norm_variational, l2_norm_beta,
};
use glnbias::solvers::{
    kkt_certify, lift, solve_group_lasso_margin, solve_quad_margin, CertifyOptions, LiftSpec,
    SolverOptions, SolverStatus,
};
use glnbias::trainer::{init_model, train, InitSpec, TrainConfig};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Outcome of one acceptance check.
pub struct Check {
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(pass: bool, detail: String) -> Self {
        Self { pass, detail }
    }
}

// ---------------------------------------------------------------------------
// brute-force oracles

/// `min ‖u‖² s.t. Bu ≥ 1` by enumerating every candidate active set `S` and
/// taking `u = B_S⁺ 1`. The optimum is the minimum-norm solution of its own
/// active equalities, so the smallest feasible candidate is optimal.
/// Returns `None` when no candidate is feasible.
pub fn min_norm_margin(b: &DMatrix<f64>) -> Option<(f64, DVector<f64>)> {
    let n = b.nrows();
    assert!(n <= 12, "enumeration is exponential");
    let mut best: Option<(f64, DVector<f64>)> = None;
    for mask in 1u32..(1 << n) {
        let idx: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
        let bs = DMatrix::from_fn(idx.len(), b.ncols(), |i, j| b[(idx[i], j)]);
        let ones = DVector::from_element(idx.len(), 1.0);
        let pinv = match bs.clone().pseudo_inverse(1e-12) {
            Ok(p) => p,
            Err(_) => continue,
        };
        let u = pinv * &ones;
        if (&bs * &u - &ones).amax() > 1e-9 {
            continue;
        }
        if (b * &u).min() < 1.0 - 1e-9 {
            continue;
        }
        let v = u.norm_squared();
        if best.as_ref().map_or(true, |(bv, _)| v < *bv) {
            best = Some((v, u));
        }
    }
    best
}

/// `min Σ_g ‖ζ_g‖₂ s.t. Aζ ≥ 1` for at most two groups of columns.
///
/// Uses `(Σ_g ‖ζ_g‖)² = min_{η ∈ simplex} Σ_g ‖ζ_g‖²/η_g`: for fixed `η` the
/// inner problem is a weighted minimum-norm margin problem (solved by
/// enumeration), and the outer function is convex in `η`, so golden-section
/// search over the simplex edge finds it.
pub fn group_lasso_oracle(a: &DMatrix<f64>, groups: &[Vec<usize>]) -> Option<f64> {
    let inner = |eta: &[f64]| -> f64 {
        let mut b = a.clone();
        for (g, cols) in groups.iter().enumerate() {
            let s = eta[g].max(0.0).sqrt();
            for &c in cols {
                b.column_mut(c).scale_mut(s);
            }
        }
        min_norm_margin(&b).map_or(f64::INFINITY, |(v, _)| v)
    };
    let value = match groups.len() {
        1 => inner(&[1.0]),
        2 => {
            let f = |t: f64| inner(&[t, 1.0 - t]);
            let ratio = (5f64.sqrt() - 1.0) / 2.0;
            let (mut lo, mut hi) = (0.0_f64, 1.0_f64);
            let mut x1 = hi - ratio * (hi - lo);
            let mut x2 = lo + ratio * (hi - lo);
            let (mut f1, mut f2) = (f(x1), f(x2));
            while hi - lo > 1e-11 {
                if f1 <= f2 {
                    hi = x2;
                    x2 = x1;
                    f2 = f1;
                    x1 = hi - ratio * (hi - lo);
                    f1 = f(x1);
                } else {
                    lo = x1;
                    x1 = x2;
                    f1 = f2;
                    x2 = lo + ratio * (hi - lo);
                    f2 = f(x2);
                }
            }
            // the optimum may sit on an endpoint of the edge
            [f1, f2, f(0.0), f(1.0)].into_iter().fold(f64::INFINITY, f64::min)
        }
        _ => panic!("oracle handles at most two groups"),
    };
    value.is_finite().then(|| value.sqrt())
}

// ---------------------------------------------------------------------------
// random instances

pub struct GlnInstance {
    pub ds: Dataset,
    pub units: usize,
    pub contexts: usize,
    /// Signed constraint matrix built directly from the definition.
    pub a: DMatrix<f64>,
    pub groups: Vec<Vec<usize>>,
}

/// `N ≤ 6`, `D ≤ 3`, `H ≤ 2`, `C = 2`.
pub fn tiny_gln_instance(r: &mut ChaCha8Rng) -> GlnInstance {
    let n = r.gen_range(1..=6);
    let d = r.gen_range(1..=3);
    let h = r.gen_range(1..=2);
    let c = 2;
    let x = gaussian(r, n * d);
    let y: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let ctx: Vec<GlobalContext> = (0..n)
        .map(|_| GlobalContext((0..h).map(|_| r.gen_range(1..=c as u32)).collect()))
        .collect();
    // column (h, c, d) ↦ (h·C + c − 1)·D + d
    let a = DMatrix::from_fn(n, h * c * d, |i, col| {
        let (blk, k) = (col / d, col % d);
        let (u, cc) = (blk / c, blk % c);
        if ctx[i].get(u) as usize == cc + 1 {
            y[i] * x[i * d + k]
        } else {
            0.0
        }
    });
    let groups = (0..h).map(|u| (u * c * d..(u + 1) * c * d).collect()).collect();
    let ds = Dataset::new(d, x, y).unwrap().with_contexts(ctx).unwrap();
    GlnInstance { ds, units: h, contexts: c, a, groups }
}

pub fn tiny_plain_instance(r: &mut ChaCha8Rng) -> (Dataset, DMatrix<f64>) {
    let n = r.gen_range(1..=6);
    let d = r.gen_range(1..=3);
    let x = gaussian(r, n * d);
    let y: Vec<f64> = (0..n).map(|_| if r.gen_bool(0.5) { 1.0 } else { -1.0 }).collect();
    let a = DMatrix::from_fn(n, d, |i, k| y[i] * x[i * d + k]);
    (Dataset::new(d, x, y).unwrap(), a)
}

pub fn random_gln(r: &mut ChaCha8Rng, h: usize, c: usize, d: usize) -> TwoLayerGln {
    TwoLayerGln::new(h, c, d, gaussian(r, h * c * d), gaussian(r, h)).unwrap()
}

pub fn random_zeta(r: &mut ChaCha8Rng, h: usize, c: usize, d: usize) -> ZetaParam {
    ZetaParam::gln(h, c, d, gaussian(r, h * c * d)).unwrap()
}

/// `Σ_γ ‖Σ_h ζ_{hγ_h}‖²` straight from the definition.
pub fn brute_l2_beta(z: &ZetaParam) -> f64 {
    let (h, c, d) = (z.units, z.contexts, z.dim);
    let total = c.pow(h as u32);
    let mut sum = 0.0;
    for mut idx in 0..total {
        let mut beta = vec![0.0; d];
        for u in 0..h {
            let cc = idx % c;
            idx /= c;
            for k in 0..d {
                beta[k] += z.values[(u * c + cc) * d + k];
            }
        }
        sum += beta.iter().map(|v| v * v).sum::<f64>();
    }
    sum
}

pub fn random_contexts(r: &mut ChaCha8Rng, n: usize, h: usize, c: u32, base: u32) -> Vec<GlobalContext> {
    (0..n)
        .map(|_| GlobalContext((0..h).map(|_| r.gen_range(base..base + c)).collect()))
        .collect()
}

/// A ReLU network and inputs whose pre-activations all stay away from zero.
pub fn relu_with_clear_gates(r: &mut ChaCha8Rng, hidden: usize, dim: usize, n: usize) -> (ReluNet, Dataset) {
    let net = ReluNet::new(hidden, dim, gaussian(r, hidden * dim), gaussian(r, hidden)).unwrap();
    let mut x = Vec::new();
    while x.len() < n * dim {
        let cand = gaussian(r, dim);
        let clear = (0..hidden).all(|h| {
            let pre: f64 = net.unit(h).iter().zip(&cand).map(|(a, b)| a * b).sum();
            pre.abs() > 1e-2
        });
        if clear {
            x.extend(cand);
        }
    }
    let y = (0..n).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    (net, Dataset::new(dim, x, y).unwrap())
}

/// Central differences of the summed loss.
pub fn fd_gradient(model: &Model, ds: &Dataset, loss: LossKind) -> Vec<f64> {
    let p = model.params().len();
    let mut out = vec![0.0; p];
    let mut m = model.clone();
    for i in 0..p {
        let w = model.params()[i];
        let h = 1e-5 * w.abs().max(1.0);
        m.params_mut()[i] = w + h;
        let up = m.loss_and_grad(ds, loss).unwrap().0;
        m.params_mut()[i] = w - h;
        let down = m.loss_and_grad(ds, loss).unwrap().0;
        m.params_mut()[i] = w;
        out[i] = (up - down) / (2.0 * h);
    }
    out
}

pub fn grad_rel_error(model: &Model, ds: &Dataset, loss: LossKind) -> f64 {
    let g = model.loss_and_grad(ds, loss).unwrap().1;
    let fd = fd_gradient(model, ds, loss);
    let diff: f64 = g.iter().zip(&fd).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
    let scale = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

/// One instance of every model family with a dataset it can score.
pub fn gradient_cases(seed: u64) -> Vec<(Model, Dataset)> {
    let mut r = rng(seed);
    let n = 7;
    let d = 3;
    let x = gaussian(&mut r, n * d);
    let y: Vec<f64> = (0..n).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
    let plain = Dataset::new(d, x, y).unwrap();
    let gln_ctx = random_contexts(&mut r, n, 3, 2, 1);
    let gln_ds = plain.clone().with_contexts(gln_ctx.clone()).unwrap();
    let gate_ds = plain.clone().with_contexts(random_contexts(&mut r, n, 3, 2, 0)).unwrap();
    let mut keys = gln_ctx.clone();
    keys.sort();
    keys.dedup();
    let shallow = ShallowGln::new(d, keys.iter().map(|k| (k.clone(), gaussian(&mut r, d))).collect()).unwrap();
    let (net, relu_ds) = relu_with_clear_gates(&mut r, 4, d, n);
    vec![
        (Model::Gln(random_gln(&mut r, 3, 2, d)), gln_ds.clone()),
        (Model::Zeta(random_zeta(&mut r, 3, 2, d)), gln_ds),
        (Model::Zeta(ZetaParam::frelu(3, d, gaussian(&mut r, 3 * d)).unwrap()), gate_ds),
        (Model::Shallow(shallow), plain.clone().with_contexts(gln_ctx).unwrap()),
        (Model::Relu(net), relu_ds),
        (Model::Linear(LinearModel { beta: gaussian(&mut r, d) }), plain),
    ]
}

// ---------------------------------------------------------------------------
// numeric acceptance checks

/// Group-lasso solver against the brute-force oracle on tiny instances.
pub fn criterion_1() -> Check {
    let mut r = rng(101);
    let opts = SolverOptions { tol: 1e-8, max_iter: 400_000 };
    let (mut worst, mut feasible, mut mismatches) = (0.0_f64, 0, Vec::new());
    for t in 0..50 {
        let inst = tiny_gln_instance(&mut r);
        let p = lift(&inst.ds, LiftSpec::Gln { contexts: inst.contexts }).unwrap();
        let res = solve_group_lasso_margin(&p, &opts).unwrap();
        match group_lasso_oracle(&inst.a, &inst.groups) {
            Some(v) => {
                feasible += 1;
                let e = if res.status == SolverStatus::Infeasible { f64::INFINITY } else { rel_diff(res.objective, v) };
                worst = worst.max(e);
                if e > 1e-4 {
                    mismatches.push(format!("#{t}: solver {} ({:?}) vs oracle {v}", res.objective, res.status));
                }
            }
            None => {
                if res.status != SolverStatus::Infeasible {
                    mismatches.push(format!("#{t}: oracle infeasible, solver {:?}", res.status));
                }
            }
        }
    }
    Check::new(
        mismatches.is_empty(),
        format!("{feasible}/50 feasible, worst relative gap {worst:.2e} {}", mismatches.join("; ")),
    )
}

/// Quadratic solver against support enumeration, plus the two-point SVM.
pub fn criterion_2() -> Check {
    let mut r = rng(202);
    let opts = SolverOptions { tol: 1e-12, max_iter: 200_000 };
    let (mut worst, mut feasible, mut mismatches) = (0.0_f64, 0, Vec::new());
    for t in 0..50 {
        let (ds, a) = tiny_plain_instance(&mut r);
        let p = lift(&ds, LiftSpec::Plain).unwrap();
        let res = solve_quad_margin(&p, &opts).unwrap();
        match min_norm_margin(&a) {
            Some((v, u)) => {
                feasible += 1;
                let beta_err = res.zeta.iter().zip(u.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
                    / u.amax().max(1.0);
                let e = rel_diff(res.objective, 0.5 * v).max(beta_err);
                worst = worst.max(e);
                if res.status == SolverStatus::Infeasible || e > 1e-6 {
                    mismatches.push(format!("#{t}: objective {} vs {}", res.objective, 0.5 * v));
                }
            }
            None => {
                if res.status != SolverStatus::Infeasible {
                    mismatches.push(format!("#{t}: oracle infeasible, solver {:?}", res.status));
                }
            }
        }
    }
    let two = Dataset::new(2, vec![1.0, 0.0, -1.0, 0.0], vec![1.0, -1.0]).unwrap();
    let res = solve_quad_margin(&lift(&two, LiftSpec::Plain).unwrap(), &opts).unwrap();
    let analytic = [(res.zeta[0], 1.0), (res.zeta[1], 0.0), (res.lambda[0], 0.5), (res.lambda[1], 0.5)];
    let two_err = analytic.iter().map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    if two_err > 1e-8 {
        mismatches.push(format!("two-point SVM off by {two_err:.2e}"));
    }
    Check::new(
        mismatches.is_empty(),
        format!(
            "{feasible}/50 feasible, worst error {worst:.2e}, two-point error {two_err:.2e} {}",
            mismatches.join("; ")
        ),
    )
}

/// Closed forms, the variational norm and `‖β‖²` on random tables.
pub fn criterion_3() -> Check {
    let mut r = rng(303);
    let (mut e21, mut sqrt2, mut l2) = (0.0_f64, 0.0_f64, 0.0_f64);
    for _ in 0..200 {
        let d = r.gen_range(1..=5);
        let z = random_zeta(&mut r, 2, 2, d);
        let t = BetaTable::from_zeta(&z).unwrap();
        let closed = gln_norm_closed_2x2(&t).unwrap().value;
        let pairwise = gln_norm_closed_2x2_pairwise(&t).unwrap();
        e21 = e21.max(rel_diff(closed * closed, pairwise * pairwise));
        let (v, _) = gln_norm_variational(&t, 1e-12).unwrap();
        sqrt2 = sqrt2.max(rel_diff(closed, 2f64.sqrt() * v.value));
    }
    let shapes: Vec<(usize, usize)> = (1..=8)
        .flat_map(|h| (2..=16usize).map(move |c| (h, c)))
        .filter(|&(h, c)| c.pow(h as u32) <= 256)
        .collect();
    for &(h, c) in &shapes {
        for _ in 0..3 {
            let d = r.gen_range(1..=3);
            let z = random_zeta(&mut r, h, c, d);
            l2 = l2.max(rel_diff(l2_norm_beta(&z).unwrap(), brute_l2_beta(&z)));
        }
    }
    Check::new(
        e21 <= 1e-8 && sqrt2 <= 1e-6 && l2 <= 1e-9,
        format!(
            "pairwise vs closed {e21:.2e}, closed vs √2·variational {sqrt2:.2e}, ‖β‖² over {} shapes {l2:.2e}",
            shapes.len()
        ),
    )
}

/// Equivariance of GLN tables and of completed free sets.
pub fn criterion_4() -> Check {
    let mut r = rng(404);
    let mut gln_worst = 0.0_f64;
    for _ in 0..100 {
        let h = r.gen_range(1..=4);
        let c = [2, 3, 4][r.gen_range(0..3)];
        let d = r.gen_range(1..=4);
        let t = BetaTable::from_gln(&random_gln(&mut r, h, c, d)).unwrap();
        gln_worst = gln_worst.max(check_equivariance(&t, 1e-10).max_violation);
    }
    let mut comp_worst = 0.0_f64;
    for _ in 0..100 {
        let h = r.gen_range(1..=3);
        let c = r.gen_range(2..=4usize);
        let d = r.gen_range(1..=4);
        let mut free = vec![(GlobalContext(vec![1; h]), gaussian(&mut r, d))];
        for u in 0..h {
            for cc in 2..=c as u32 {
                let mut g = vec![1; h];
                g[u] = cc;
                free.push((GlobalContext(g), gaussian(&mut r, d)));
            }
        }
        let t = complete_predictors(h, c, &free).unwrap();
        comp_worst = comp_worst.max(check_equivariance(&t, 1e-12).max_violation);
    }
    Check::new(
        gln_worst <= 1e-10 && comp_worst <= 1e-12,
        format!("GLN tables worst violation {gln_worst:.2e}, completed tables {comp_worst:.2e}"),
    )
}

pub struct TrendRun {
    pub residual_early: f64,
    pub residual_late: f64,
    pub gap_early: f64,
    pub gap_late: f64,
}

/// The toy run behind criterion 5: `H=4, C=2, D=2, N=40`, exponential loss.
pub fn trend_run() -> TrendRun {
    let ds = gen_synthetic(40, 2, 0.1, 7).dataset;
    let cf = sample_contexts(2, 4, 2, Some(&ds), true, 11).unwrap();
    let ds = ContextSource::Halfspaces(cf).annotate(&ds).unwrap();
    let init = init_model(InitSpec::Gln { units: 4, contexts: 2, dim: 2 }, 5).unwrap();
    let cfg = TrainConfig {
        loss: LossKind::Exponential,
        snapshot_every: 400,
        ..TrainConfig::default()
    };
    let traj = train(init, &ds, &cfg).unwrap();
    let at = |step: usize| traj.snapshots.iter().find(|s| s.step == step).expect("snapshot");
    let residual = |step: usize| {
        let m = at(step).weights.as_ref().unwrap();
        kkt_certify(m, &ds, &CertifyOptions::default()).unwrap().residual
    };
    TrendRun {
        residual_early: residual(400),
        residual_late: residual(3200),
        gap_early: at(400).balance_gap.unwrap(),
        gap_late: at(3200).balance_gap.unwrap(),
    }
}

pub fn criterion_5() -> Check {
    let t = trend_run();
    Check::new(
        t.residual_late < t.residual_early && t.gap_late < t.gap_early,
        format!(
            "KKT residual {:.3e} → {:.3e}, balance gap {:.3e} → {:.3e} (steps 400 → 3200)",
            t.residual_early, t.residual_late, t.gap_early, t.gap_late
        ),
    )
}

pub fn criterion_6() -> Check {
    let mut worst = 0.0_f64;
    let mut names = Vec::new();
    for seed in 0..3 {
        for (m, ds) in gradient_cases(600 + seed) {
            for loss in [LossKind::Exponential, LossKind::Logistic] {
                worst = worst.max(grad_rel_error(&m, &ds, loss));
            }
            if seed == 0 {
                names.push(m.family());
            }
        }
    }
    Check::new(worst < 1e-6, format!("worst relative error {worst:.2e} over {}", names.join(", ")))
}

pub fn criterion_9() -> Check {
    let mut r = rng(909);
    let (h, d) = (16, 6);
    let net = ReluNet::new(h, d, gaussian(&mut r, h * d), gaussian(&mut r, h)).unwrap();
    let frozen = Model::Zeta(net.freeze());
    let mut worst = 0.0_f64;
    for _ in 0..1000 {
        let x = gaussian(&mut r, d);
        let g = relu_gates(&net, &x).unwrap();
        let a = net.score(&x, None).unwrap();
        let b = frozen.score(&x, Some(&g)).unwrap();
        worst = worst.max((a - b).abs() / a.abs().max(1.0));
    }
    Check::new(worst <= 1e-10, format!("max deviation {worst:.2e} on 1000 inputs"))
}
