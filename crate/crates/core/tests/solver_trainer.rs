//! Solver optimality, duality, certification, and training-dynamics invariants.

mod common;

use glnbias::data::{gen_synthetic, Dataset};
use glnbias::gating::{sample_contexts, ContextSource, GlobalContext};
use glnbias::models::{GatedModel, LinearModel, LossKind, Model};
use glnbias::solvers::{
    kkt_certify, lift, margin_normalize, solve, solve_group_lasso_margin, solve_quad_margin,
    CertifyOptions, LiftSpec, ObjectiveKind, SolverOptions, SolverStatus,
};
use glnbias::trainer::{direction_metrics, init_model, train, InitSpec, TrainConfig};
use proptest::prelude::*;

/// Separable data with random contexts, so every lift is feasible.
fn separable_gln(seed: u64, n: usize, h: usize) -> Dataset {
    let mut r = common::rng(seed);
    let ds = gen_synthetic(n, 3, 0.2, seed).dataset;
    ds.with_contexts(common::random_contexts(&mut r, n, h, 2, 1)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn group_lasso_matches_oracle(seed in any::<u64>()) {
        let inst = common::tiny_gln_instance(&mut common::rng(seed));
        let p = lift(&inst.ds, LiftSpec::Gln { contexts: 2 }).unwrap();
        let res = solve_group_lasso_margin(&p, &SolverOptions { tol: 1e-8, max_iter: 400_000 }).unwrap();
        match common::group_lasso_oracle(&inst.a, &inst.groups) {
            Some(v) => {
                prop_assert_eq!(res.status, SolverStatus::Optimal);
                prop_assert!(common::rel_diff(res.objective, v) <= 1e-4, "{} vs {v}", res.objective);
            }
            None => prop_assert_eq!(res.status, SolverStatus::Infeasible),
        }
    }

    #[test]
    fn quadratic_solutions_have_no_duality_gap(seed in any::<u64>(), h in 1usize..4) {
        let ds = separable_gln(seed, 12, h);
        let opts = SolverOptions { tol: 1e-9, max_iter: 100_000 };
        for objective in [ObjectiveKind::QuadM, ObjectiveKind::PlainL2] {
            let p = lift(&ds, LiftSpec::Gln { contexts: 2 }).unwrap().with_objective(objective).unwrap();
            let res = solve_quad_margin(&p, &opts).unwrap();
            prop_assert_eq!(res.status, SolverStatus::Optimal);
            let dual = res.dual_objective.unwrap();
            prop_assert!((res.objective - dual).abs() <= 1e-6 * (1.0 + res.objective), "{} vs {dual}", res.objective);
        }
    }

    #[test]
    fn optimal_solutions_certify(seed in any::<u64>(), h in 1usize..4) {
        let tol = 1e-7;
        let opts = SolverOptions { tol, max_iter: 400_000 };
        let ds = separable_gln(seed, 14, h);
        let gates: Vec<GlobalContext> = ds.contexts().unwrap().iter()
            .map(|g| GlobalContext(g.0.iter().map(|&c| c - 1).collect())).collect();
        let frelu_ds = ds.clone().without_contexts().with_contexts(gates).unwrap();
        let cases = [
            (ds.clone(), LiftSpec::Gln { contexts: 2 }),
            (frelu_ds, LiftSpec::Frelu),
            (ds.clone(), LiftSpec::Shallow),
            (ds.clone().without_contexts(), LiftSpec::Plain),
        ];
        for (data, spec) in cases {
            let p = lift(&data, spec).unwrap();
            let res = solve(&p, &opts).unwrap();
            if res.status != SolverStatus::Optimal {
                continue;
            }
            let model = p.to_model(&res.zeta).unwrap();
            let kept = data.select(&p.rows);
            let rep = kkt_certify(&model, &kept, &CertifyOptions::default()).unwrap();
            prop_assert!(rep.residual <= 10.0 * tol, "{spec:?}: residual {:e}", rep.residual);
        }
    }

    #[test]
    fn normalization_sets_min_margin_to_one(seed in any::<u64>(), a in 0.1f64..10.0) {
        let ds = gen_synthetic(10, 3, 0.3, seed);
        let m = Model::Linear(LinearModel { beta: ds.witness.iter().map(|w| w * a).collect() });
        let (scaled, _) = margin_normalize(&m, &ds.dataset).unwrap();
        let min = (0..ds.dataset.len())
            .map(|n| ds.dataset.y(n) * scaled.score(ds.dataset.x(n), None).unwrap())
            .fold(f64::INFINITY, f64::min);
        prop_assert!((min - 1.0).abs() <= 1e-12);
    }
}

fn toy_run(loss: LossKind) -> (Dataset, glnbias::trainer::Trajectory) {
    let ds = gen_synthetic(40, 2, 0.1, 7).dataset;
    let cf = sample_contexts(2, 4, 2, Some(&ds), true, 11).unwrap();
    let ds = ContextSource::Halfspaces(cf).annotate(&ds).unwrap();
    let init = init_model(InitSpec::Gln { units: 4, contexts: 2, dim: 2 }, 5).unwrap();
    let cfg = TrainConfig { loss, snapshot_every: 50, ..TrainConfig::default() };
    let traj = train(init, &ds, &cfg).unwrap();
    (ds, traj)
}

#[test]
fn training_is_deterministic() {
    let (_, a) = toy_run(LossKind::Logistic);
    let (_, b) = toy_run(LossKind::Logistic);
    assert_eq!(a.snapshots, b.snapshots);
    assert_eq!(a.final_model, b.final_model);
}

#[test]
fn norm_grows_once_loss_is_small() {
    let (ds, traj) = toy_run(LossKind::Exponential);
    let threshold = 1.0 / ds.len() as f64;
    let late: Vec<_> = traj.snapshots.iter().skip_while(|s| s.loss >= threshold).collect();
    assert!(late.len() > 10, "loss never fell below 1/N");
    for w in late.windows(2) {
        assert!(w[1].weight_norm >= w[0].weight_norm, "norm shrank at step {}", w[1].step);
    }
}

#[test]
fn balance_gap_shrinks_late_in_training() {
    let (_, traj) = toy_run(LossKind::Exponential);
    let half = traj.snapshots.len() / 2;
    for w in traj.snapshots[half..].windows(2) {
        let (a, b) = (w[0].balance_gap.unwrap(), w[1].balance_gap.unwrap());
        assert!(b <= a + 1e-12, "gap grew at step {}: {a} → {b}", w[1].step);
    }
}

#[test]
fn kkt_residual_falls_during_training() {
    let t = common::trend_run();
    assert!(t.residual_late < t.residual_early, "{} → {}", t.residual_early, t.residual_late);
    assert!(t.gap_late < t.gap_early);
}

#[test]
fn direction_metrics_cover_every_snapshot() {
    let (_, traj) = toy_run(LossKind::Logistic);
    let rep = direction_metrics(&traj).unwrap();
    assert_eq!(rep.len(), traj.snapshots.len());
    assert!((rep.last().unwrap().cos_to_final - 1.0).abs() < 1e-12);
}

#[test]
fn opposite_duplicates_are_infeasible() {
    let ds = Dataset::new(2, vec![0.3, 1.0, 0.3, 1.0], vec![1.0, -1.0]).unwrap();
    let p = lift(&ds, LiftSpec::Plain).unwrap();
    assert_eq!(solve(&p, &SolverOptions::default()).unwrap().status, SolverStatus::Infeasible);
    let g = p.with_objective(ObjectiveKind::GroupLasso).unwrap();
    assert_eq!(solve(&g, &SolverOptions::default()).unwrap().status, SolverStatus::Infeasible);
}

#[test]
fn nearly_antiparallel_rows_reach_the_oracle() {
    // ADMM alone stalls on this instance; the optimum sits far from the origin
    let inst = common::tiny_gln_instance(&mut common::rng(2185413046912982281));
    let p = lift(&inst.ds, LiftSpec::Gln { contexts: 2 }).unwrap();
    let res = solve_group_lasso_margin(&p, &SolverOptions { tol: 1e-8, max_iter: 400_000 }).unwrap();
    let want = common::group_lasso_oracle(&inst.a, &inst.groups).unwrap();
    assert_eq!(res.status, SolverStatus::Optimal);
    assert!(common::rel_diff(res.objective, want) <= 1e-6, "{} vs {want}", res.objective);
}
