//! Experiment grid: per-cell train/solve/certify pipelines and CSV bundles.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    baseline_inconsistency, comparison_csv, error_rate_scores, fmt_opt, fmt_sci,
    inconsistency_scores, mean_std, ComparisonRow, SCHEMA_LINE,
};
use crate::data::{gen_synthetic, make_binary_task, Dataset, RawMnist};
use crate::error::{Error, Result};
use crate::gating::{sample_contexts, ContextFunction, ContextSource, GlobalContext};
use crate::models::{GatedModel, LossKind, Model, ReluNet};
use crate::par;
use crate::solvers::{
    kkt_certify, lift, solve, CertifyOptions, LiftSpec, ObjectiveKind, SolverOptions, SolverResult,
    SolverStatus,
};
use crate::trainer::{direction_metrics, init_model, train, trajectory_csv, InitSpec, TrainConfig};

/// Validation size of the full-scale grid.
pub const FULL_N_VAL: usize = 12_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "gd-gln")]
    GdGln,
    #[serde(rename = "svm-gln")]
    SvmGln,
    #[serde(rename = "svm-l2")]
    SvmL2,
    #[serde(rename = "shallow")]
    Shallow,
    #[serde(rename = "gd-relu")]
    GdRelu,
    #[serde(rename = "svm-rc")]
    SvmRc,
    #[serde(rename = "svm-lc")]
    SvmLc,
    #[serde(rename = "svm-hl")]
    SvmHl,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::GdGln,
        Variant::SvmGln,
        Variant::SvmL2,
        Variant::Shallow,
        Variant::GdRelu,
        Variant::SvmRc,
        Variant::SvmLc,
        Variant::SvmHl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::GdGln => "gd-gln",
            Variant::SvmGln => "svm-gln",
            Variant::SvmL2 => "svm-l2",
            Variant::Shallow => "shallow",
            Variant::GdRelu => "gd-relu",
            Variant::SvmRc => "svm-rc",
            Variant::SvmLc => "svm-lc",
            Variant::SvmHl => "svm-hl",
        }
    }

    pub fn is_gradient_descent(self) -> bool {
        matches!(self, Variant::GdGln | Variant::GdRelu)
    }

    /// Network depth for the best-per-depth summary.
    pub fn depth(self) -> usize {
        if self == Variant::Shallow {
            1
        } else {
            2
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "mnist-binary")]
    MnistBinary,
    #[serde(rename = "synthetic")]
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub task: Task,
    #[serde(default = "default_n_train")]
    pub n_train: Vec<usize>,
    #[serde(default = "default_n_val")]
    pub n_val: usize,
    #[serde(default)]
    pub split_seed: u64,
    #[serde(default = "default_synthetic_dim")]
    pub synthetic_dim: usize,
    #[serde(default = "default_synthetic_margin")]
    pub synthetic_margin: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default = "default_units")]
    pub units: Vec<usize>,
    #[serde(default = "default_contexts")]
    pub contexts: Vec<usize>,
    #[serde(default = "default_seeds")]
    pub seeds: u64,
    #[serde(default = "default_true")]
    pub median: bool,
    pub variants: Vec<Variant>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default = "default_schedule")]
    pub schedule: Vec<(usize, f64)>,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default = "default_loss")]
    pub loss: LossKind,
    #[serde(default = "default_snapshot")]
    pub snapshot_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSection {
    #[serde(default = "default_solver_tol")]
    pub tol: f64,
    #[serde(default = "default_solver_iter")]
    pub max_iter: usize,
    #[serde(default = "default_margin_tol")]
    pub margin_tol: f64,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            tol: default_solver_tol(),
            max_iter: default_solver_iter(),
            margin_tol: default_margin_tol(),
        }
    }
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            schedule: default_schedule(),
            momentum: 0.0,
            loss: default_loss(),
            snapshot_every: default_snapshot(),
        }
    }
}

fn default_n_train() -> Vec<usize> {
    vec![500, 1000, 2000]
}
fn default_n_val() -> usize {
    FULL_N_VAL
}
fn default_synthetic_dim() -> usize {
    5
}
fn default_synthetic_margin() -> f64 {
    0.1
}
fn default_units() -> Vec<usize> {
    vec![10, 20, 50, 100]
}
fn default_contexts() -> Vec<usize> {
    vec![2, 4]
}
fn default_seeds() -> u64 {
    3
}
fn default_true() -> bool {
    true
}
fn default_schedule() -> Vec<(usize, f64)> {
    TrainConfig::default().schedule
}
fn default_loss() -> LossKind {
    LossKind::Logistic
}
fn default_snapshot() -> usize {
    100
}
fn default_solver_tol() -> f64 {
    1e-4
}
fn default_solver_iter() -> usize {
    20_000
}
fn default_margin_tol() -> f64 {
    1e-4
}

/// Whole experiment, read from a TOML file with `[data]`, `[grid]`,
/// `[training]` and `[solver]` sections. Unknown keys are errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    pub data: DataSection,
    pub grid: GridSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub solver: SolverSection,
}

fn default_name() -> String {
    "experiment".into()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.variants.is_empty() {
            return Err(Error::Config("no variants requested".into()));
        }
        if self.grid.seeds == 0 {
            return Err(Error::Config("seeds must be at least 1".into()));
        }
        if self.grid.units.is_empty() || self.grid.units.contains(&0) {
            return Err(Error::Config("units must be a nonempty list of positive counts".into()));
        }
        for &c in &self.grid.contexts {
            if c < 2 || !c.is_power_of_two() {
                return Err(Error::ContextsNotPowerOfTwo(c));
            }
        }
        if self.data.n_train.is_empty() || self.data.n_train.contains(&0) {
            return Err(Error::Config("n_train must be a nonempty list of positive counts".into()));
        }
        self.train_config(0).validate()?;
        if !(self.solver.tol > 0.0) || self.solver.max_iter == 0 {
            return Err(Error::Config("solver tol and max_iter must be positive".into()));
        }
        Ok(())
    }

    fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            schedule: self.training.schedule.clone(),
            momentum: self.training.momentum,
            loss: self.training.loss,
            seed,
            snapshot_every: self.training.snapshot_every,
            keep_weights: true,
        }
    }

    fn wants(&self, v: Variant) -> bool {
        self.grid.variants.contains(&v)
    }

    fn uses_gln_grid(&self) -> bool {
        self.grid
            .variants
            .iter()
            .any(|v| matches!(v, Variant::GdGln | Variant::SvmGln | Variant::SvmL2 | Variant::Shallow))
    }
}

/// Grid coordinates of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    pub n_train: usize,
    pub units: usize,
    pub contexts: usize,
    pub seed: u64,
}

impl CellKey {
    pub fn tag(&self) -> String {
        format!("n{}-h{}-c{}-s{}", self.n_train, self.units, self.contexts, self.seed)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantOutcome {
    pub variant: Variant,
    pub status: String,
    pub train_error: Option<f64>,
    pub val_error: Option<f64>,
    pub objective: Option<f64>,
    pub kkt_residual: Option<f64>,
    pub iterations: usize,
    #[serde(skip)]
    pub val_scores: Option<Vec<f64>>,
    #[serde(skip)]
    pub trajectory_csv: Option<String>,
}

impl VariantOutcome {
    fn missing(variant: Variant, status: impl Into<String>) -> Self {
        Self {
            variant,
            status: status.into(),
            train_error: None,
            val_error: None,
            objective: None,
            kkt_residual: None,
            iterations: 0,
            val_scores: None,
            trajectory_csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub key: CellKey,
    pub outcomes: Vec<VariantOutcome>,
}

impl CellResult {
    pub fn get(&self, v: Variant) -> Option<&VariantOutcome> {
        self.outcomes.iter().find(|o| o.variant == v)
    }
}

/// SplitMix64 over the parts, for independent per-purpose seeds.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h = 0x9E37_79B9_7F4A_7C15_u64;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const TAG_CONTEXTS: u64 = 1;
const TAG_INIT_GLN: u64 = 2;
const TAG_INIT_RELU: u64 = 3;
const TAG_RANDOM_GATES: u64 = 4;

struct Split {
    train: Dataset,
    val: Dataset,
}

fn load_split(cfg: &ExperimentConfig, raw: Option<&RawMnist>, n_train: usize) -> Result<Split> {
    match cfg.data.task {
        Task::MnistBinary => {
            let raw = raw.ok_or_else(|| Error::Config("MNIST files are required for the mnist-binary task".into()))?;
            let (train, val) = make_binary_task(raw, n_train, cfg.data.n_val, cfg.data.split_seed)?;
            Ok(Split { train, val })
        }
        Task::Synthetic => {
            let s = gen_synthetic(
                n_train + cfg.data.n_val,
                cfg.data.synthetic_dim,
                cfg.data.synthetic_margin,
                cfg.data.split_seed,
            );
            let idx: Vec<usize> = (0..n_train + cfg.data.n_val).collect();
            Ok(Split {
                train: s.dataset.select(&idx[..n_train]),
                val: s.dataset.select(&idx[n_train..]),
            })
        }
    }
}

fn solver_status(r: &SolverResult) -> &'static str {
    match r.status {
        SolverStatus::Optimal => "optimal",
        SolverStatus::MaxIter => "max_iter",
        SolverStatus::Infeasible => "infeasible",
    }
}

/// Scores of `model` on a dataset that already carries the model's contexts.
fn evaluate(model: &Model, train: &Dataset, val: &Dataset) -> Result<(f64, f64, Vec<f64>)> {
    let tr = model.scores(train)?;
    let va = model.scores(val)?;
    Ok((
        error_rate_scores(&tr, train.labels()),
        error_rate_scores(&va, val.labels()),
        va,
    ))
}

fn solved_outcome(
    variant: Variant,
    result: Result<SolverResult>,
    to_model: impl FnOnce(&SolverResult) -> Result<Model>,
    train: &Dataset,
    val: &Dataset,
) -> Result<VariantOutcome> {
    let r = result?;
    if r.status == SolverStatus::Infeasible {
        let mut o = VariantOutcome::missing(variant, "infeasible");
        o.iterations = r.iterations;
        return Ok(o);
    }
    let model = to_model(&r)?;
    let (tr, va, scores) = evaluate(&model, train, val)?;
    Ok(VariantOutcome {
        variant,
        status: solver_status(&r).into(),
        train_error: Some(tr),
        val_error: Some(va),
        objective: Some(r.objective),
        kkt_residual: None,
        iterations: r.iterations,
        val_scores: Some(scores),
        trajectory_csv: None,
    })
}

fn gd_outcome(
    variant: Variant,
    init: Model,
    train_ds: &Dataset,
    val_ds: &Dataset,
    tc: &TrainConfig,
    certify: &CertifyOptions,
) -> Result<(VariantOutcome, Option<Model>)> {
    let traj = match train(init, train_ds, tc) {
        Ok(t) => t,
        Err(Error::Diverged { .. }) => return Ok((VariantOutcome::missing(variant, "diverged"), None)),
        Err(e) => return Err(e),
    };
    // a single snapshot carries no direction information
    let reports = if traj.snapshots.len() >= 2 { Some(direction_metrics(&traj)?) } else { None };
    let model = traj.final_model;
    let (tr, va, scores) = evaluate(&model, train_ds, val_ds)?;
    let kkt = match kkt_certify(&model, train_ds, certify) {
        Ok(r) => Some(r.residual),
        Err(Error::NotSeparated(_)) => None,
        Err(e) => return Err(e),
    };
    let outcome = VariantOutcome {
        variant,
        status: "trained".into(),
        train_error: Some(tr),
        val_error: Some(va),
        objective: traj.snapshots.last().map(|s| s.loss),
        kkt_residual: kkt,
        iterations: tc.total_steps(),
        val_scores: Some(scores),
        trajectory_csv: reports.as_deref().map(trajectory_csv),
    };
    Ok((outcome, Some(model)))
}

/// Turns `1..=2` local contexts of a two-context function into `{0, 1}` gates.
fn as_gates(ds: &Dataset) -> Result<Dataset> {
    let ctx = ds.contexts().ok_or(Error::MissingContexts)?;
    let gates = ctx
        .iter()
        .map(|g| GlobalContext(g.0.iter().map(|&c| c - 1).collect()))
        .collect();
    ds.clone().without_contexts().with_contexts(gates)
}

fn hidden_dataset(net: &ReluNet, ds: &Dataset) -> Result<Dataset> {
    let rows = par::map_range(ds.len(), |n| net.hidden_activations(ds.x(n)));
    Dataset::new(net.hidden(), rows.concat(), ds.labels().to_vec())
}

/// Runs every requested variant on one grid cell.
pub fn run_cell(cfg: &ExperimentConfig, split: &Dataset, val: &Dataset, key: CellKey) -> Result<CellResult> {
    let d = split.dim();
    let sopts = SolverOptions { tol: cfg.solver.tol, max_iter: cfg.solver.max_iter };
    let copts = CertifyOptions { margin_tol: cfg.solver.margin_tol, ..CertifyOptions::default() };
    let tc = cfg.train_config(key.seed);
    let mut outcomes = Vec::new();

    if cfg.uses_gln_grid() {
        let cf = sample_contexts(
            d,
            key.units,
            key.contexts,
            Some(split),
            cfg.grid.median,
            derive_seed(&[TAG_CONTEXTS, key.seed, key.units as u64, key.contexts as u64, key.n_train as u64]),
        )?;
        let source = ContextSource::Halfspaces(cf.clone());
        let tr = source.annotate(split)?;
        let va = source.annotate(val)?;
        let gln_lift = if cfg.wants(Variant::SvmGln) || cfg.wants(Variant::SvmL2) {
            Some(lift(&tr, LiftSpec::Gln { contexts: key.contexts })?)
        } else {
            None
        };
        for &v in &cfg.grid.variants {
            let o = match v {
                Variant::GdGln => {
                    let init = init_model(
                        InitSpec::Gln { units: key.units, contexts: key.contexts, dim: d },
                        derive_seed(&[TAG_INIT_GLN, key.seed, key.units as u64, key.contexts as u64]),
                    )?;
                    gd_outcome(v, init, &tr, &va, &tc, &copts)?.0
                }
                Variant::SvmGln => {
                    let p = gln_lift.clone().expect("built above");
                    solved_outcome(v, solve(&p, &sopts), |r| p.to_model(&r.zeta), &tr, &va)?
                }
                Variant::SvmL2 => {
                    let p = gln_lift.clone().expect("built above").with_objective(ObjectiveKind::QuadM)?;
                    solved_outcome(v, solve(&p, &sopts), |r| p.to_model(&r.zeta), &tr, &va)?
                }
                Variant::Shallow => {
                    // a single unit reusing the first unit's hyperplanes
                    let k = cf.gates_per_unit();
                    let one = ContextFunction {
                        units: 1,
                        contexts: cf.contexts,
                        dim: d,
                        gates: cf.gates[..k].to_vec(),
                    };
                    let src = ContextSource::Halfspaces(one);
                    let (str_, sva) = (src.annotate(split)?, src.annotate(val)?);
                    let p = lift(&str_, LiftSpec::Shallow)?;
                    solved_outcome(v, solve(&p, &sopts), |r| p.to_model(&r.zeta), &str_, &sva)?
                }
                _ => continue,
            };
            outcomes.push(o);
        }
    }

    let relu_variants = [Variant::GdRelu, Variant::SvmRc, Variant::SvmLc, Variant::SvmHl];
    if relu_variants.iter().any(|&v| cfg.wants(v)) {
        let mut relu_tc = tc.clone();
        relu_tc.seed = key.seed;
        let needs_net = cfg.wants(Variant::GdRelu) || cfg.wants(Variant::SvmLc) || cfg.wants(Variant::SvmHl);
        let (gd, net) = if needs_net {
            let init = init_model(
                InitSpec::Relu { hidden: key.units, dim: d },
                derive_seed(&[TAG_INIT_RELU, key.seed, key.units as u64]),
            )?;
            let plain_tr = split.clone().without_contexts();
            let plain_va = val.clone().without_contexts();
            let (o, m) = gd_outcome(Variant::GdRelu, init, &plain_tr, &plain_va, &relu_tc, &copts)?;
            let net = match m {
                Some(Model::Relu(n)) => Some(n),
                _ => None,
            };
            (Some(o), net)
        } else {
            (None, None)
        };
        for &v in &cfg.grid.variants {
            let o = match v {
                Variant::GdRelu => gd.clone().expect("trained above"),
                Variant::SvmRc => {
                    let cf = sample_contexts(
                        d,
                        key.units,
                        2,
                        Some(split),
                        true,
                        derive_seed(&[TAG_RANDOM_GATES, key.seed, key.units as u64, key.n_train as u64]),
                    )?;
                    let src = ContextSource::Halfspaces(cf);
                    let tr = as_gates(&src.annotate(split)?)?;
                    let va = as_gates(&src.annotate(val)?)?;
                    let p = lift(&tr, LiftSpec::Frelu)?;
                    solved_outcome(v, solve(&p, &sopts), |r| p.to_model(&r.zeta), &tr, &va)?
                }
                Variant::SvmLc => match &net {
                    Some(net) => {
                        let src = ContextSource::ReluGates(net.clone());
                        let tr = src.annotate(split)?;
                        let va = src.annotate(val)?;
                        let p = lift(&tr, LiftSpec::Frelu)?;
                        solved_outcome(v, solve(&p, &sopts), |r| p.to_model(&r.zeta), &tr, &va)?
                    }
                    None => VariantOutcome::missing(v, "no-network"),
                },
                Variant::SvmHl => match &net {
                    Some(net) => {
                        let htr = hidden_dataset(net, split)?;
                        let p = lift(&htr, LiftSpec::Plain)?;
                        let plain_tr = split.clone().without_contexts();
                        let plain_va = val.clone().without_contexts();
                        solved_outcome(
                            v,
                            solve(&p, &sopts),
                            |r| Ok(Model::Relu(net.with_readout(r.zeta.clone())?)),
                            &plain_tr,
                            &plain_va,
                        )?
                    }
                    None => VariantOutcome::missing(v, "no-network"),
                },
                _ => continue,
            };
            outcomes.push(o);
        }
    }
    // keep the configured variant order
    outcomes.sort_by_key(|o| cfg.grid.variants.iter().position(|&v| v == o.variant));
    Ok(CellResult { key, outcomes })
}

/// All cells of the grid, in a fixed order.
pub fn grid_cells(cfg: &ExperimentConfig) -> Vec<CellKey> {
    let contexts: Vec<usize> = if cfg.uses_gln_grid() { cfg.grid.contexts.clone() } else { vec![2] };
    let mut cells = Vec::new();
    for &n_train in &cfg.data.n_train {
        for &units in &cfg.grid.units {
            for &c in &contexts {
                for seed in 0..cfg.grid.seeds {
                    cells.push(CellKey { n_train, units, contexts: c, seed });
                }
            }
        }
    }
    cells
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub cells: Vec<CellResult>,
    pub comparisons: Vec<ComparisonRow>,
}

/// One comparison row per unordered pair of variants in every cell.
pub fn comparison_rows(cfg: &ExperimentConfig, cells: &[CellResult]) -> Vec<ComparisonRow> {
    let mut rows = Vec::new();
    for cell in cells {
        let vs = &cfg.grid.variants;
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                let (a, b) = match (cell.get(vs[i]), cell.get(vs[j])) {
                    (Some(a), Some(b)) => (a, b),
                    _ => continue,
                };
                let inconsistency = match (&a.val_scores, &b.val_scores) {
                    (Some(x), Some(y)) => Some(inconsistency_scores(x, y)),
                    _ => None,
                };
                rows.push(ComparisonRow {
                    n_train: cell.key.n_train,
                    units: cell.key.units,
                    contexts: cell.key.contexts,
                    seed: cell.key.seed,
                    median: cfg.grid.median,
                    momentum: cfg.training.momentum,
                    variant_a: a.variant.to_string(),
                    variant_b: b.variant.to_string(),
                    error_a: a.val_error,
                    error_b: b.val_error,
                    inconsistency,
                    baseline_inconsistency: a.val_error.map(baseline_inconsistency),
                    kkt_residual: if a.variant.is_gradient_descent() { a.kkt_residual } else { None },
                });
            }
        }
    }
    rows
}

pub fn run_experiment(cfg: &ExperimentConfig, raw: Option<&RawMnist>) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut splits = Vec::new();
    for &n in &cfg.data.n_train {
        splits.push((n, load_split(cfg, raw, n)?));
    }
    let cells = grid_cells(cfg);
    let results = par::map_slice(&cells, |key| {
        let split = &splits.iter().find(|s| s.0 == key.n_train).expect("split loaded").1;
        run_cell(cfg, &split.train, &split.val, *key)
    });
    let cells = results.into_iter().collect::<Result<Vec<_>>>()?;
    let comparisons = comparison_rows(cfg, &cells);
    Ok(ExperimentOutput { cells, comparisons })
}

pub const CELLS_HEADER: &str =
    "n_train,units,contexts,seed,variant,status,train_error,val_error,objective,kkt_residual,iterations";

pub fn cells_csv(cells: &[CellResult]) -> String {
    let mut out = format!("{SCHEMA_LINE}\n{CELLS_HEADER}\n");
    for c in cells {
        for o in &c.outcomes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                c.key.n_train,
                c.key.units,
                c.key.contexts,
                c.key.seed,
                o.variant,
                o.status,
                fmt_opt(o.train_error),
                fmt_opt(o.val_error),
                fmt_sci(o.objective),
                fmt_sci(o.kkt_residual),
                o.iterations
            ));
        }
    }
    out
}

/// Writes `config.toml`, `cells.csv`, `comparisons.csv` and one trajectory
/// CSV per gradient-descent run.
pub fn write_bundle(cfg: &ExperimentConfig, out: &ExperimentOutput, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("trajectories"))?;
    fs::write(dir.join("config.toml"), cfg.to_toml())?;
    fs::write(dir.join("cells.csv"), cells_csv(&out.cells))?;
    fs::write(dir.join("comparisons.csv"), comparison_csv(&out.comparisons))?;
    for c in &out.cells {
        for o in &c.outcomes {
            if let Some(t) = &o.trajectory_csv {
                fs::write(
                    dir.join("trajectories").join(format!("{}-{}.csv", c.key.tag(), o.variant)),
                    t,
                )?;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Figure {
    Fig2,
    Fig3,
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fig2" => Ok(Figure::Fig2),
            "fig3" => Ok(Figure::Fig3),
            other => Err(Error::Config(format!("unknown figure `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Paper,
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Scale::Desk),
            "paper" => Ok(Scale::Paper),
            other => Err(Error::Config(format!("unknown scale `{other}`"))),
        }
    }
}

/// Grid for a figure. The validation set is capped by what the data file
/// holds beyond the largest training set.
pub fn figure_config(fig: Figure, scale: Scale, available: usize) -> ExperimentConfig {
    let (n_train, units, contexts, seeds) = match scale {
        Scale::Desk => (vec![500], vec![10, 20], vec![2], 2),
        Scale::Paper => (vec![500, 1000, 2000], vec![10, 20, 50, 100], vec![2, 4], 3),
    };
    let largest = *n_train.iter().max().expect("nonempty");
    let n_val = FULL_N_VAL.min(available.saturating_sub(largest));
    let (variants, momentum, contexts) = match fig {
        Figure::Fig2 => (
            vec![Variant::GdGln, Variant::SvmGln, Variant::SvmL2, Variant::Shallow],
            0.0,
            contexts,
        ),
        Figure::Fig3 => (
            vec![Variant::GdRelu, Variant::SvmRc, Variant::SvmLc, Variant::SvmHl],
            0.9,
            vec![2],
        ),
    };
    ExperimentConfig {
        name: format!("{}-{}", fig_name(fig), scale_name(scale)),
        data: DataSection {
            task: Task::MnistBinary,
            n_train,
            n_val,
            split_seed: 0,
            synthetic_dim: default_synthetic_dim(),
            synthetic_margin: default_synthetic_margin(),
        },
        grid: GridSection { units, contexts, seeds, median: true, variants },
        training: TrainingSection { momentum, ..TrainingSection::default() },
        solver: SolverSection::default(),
    }
}

fn fig_name(f: Figure) -> &'static str {
    match f {
        Figure::Fig2 => "fig2",
        Figure::Fig3 => "fig3",
    }
}

fn scale_name(s: Scale) -> &'static str {
    match s {
        Scale::Desk => "desk",
        Scale::Paper => "paper",
    }
}

fn gd_variant(cfg: &ExperimentConfig) -> Option<Variant> {
    cfg.grid.variants.iter().copied().find(|v| v.is_gradient_descent())
}

/// Panel a: one row per cell, one error column per variant.
pub fn panel_a(cfg: &ExperimentConfig, cells: &[CellResult]) -> String {
    let mut out = format!("{SCHEMA_LINE}\nn_train,units,contexts,seed");
    for v in &cfg.grid.variants {
        out.push_str(&format!(",error_{v}"));
    }
    out.push('\n');
    for c in cells {
        out.push_str(&format!("{},{},{},{}", c.key.n_train, c.key.units, c.key.contexts, c.key.seed));
        for &v in &cfg.grid.variants {
            out.push_str(&format!(",{}", fmt_opt(c.get(v).and_then(|o| o.val_error))));
        }
        out.push('\n');
    }
    out
}

/// Panel b: inconsistency of every convex variant with the gradient-descent
/// run, against the `2p(1−p)` baseline at the run's error `p`.
pub fn panel_b(cfg: &ExperimentConfig, rows: &[ComparisonRow]) -> String {
    let mut out = format!("{SCHEMA_LINE}\nn_train,units,contexts,seed,gd_variant,svm_variant,err,inconsistency,baseline\n");
    let gd = gd_variant(cfg).map(|v| v.to_string());
    for r in rows {
        if Some(&r.variant_a) != gd.as_ref() {
            continue;
        }
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.n_train,
            r.units,
            r.contexts,
            r.seed,
            r.variant_a,
            r.variant_b,
            fmt_opt(r.error_a),
            fmt_opt(r.inconsistency),
            fmt_opt(r.baseline_inconsistency)
        ));
    }
    out
}

type ArchKey = (usize, usize, usize);

fn seed_means(cells: &[CellResult], v: Variant) -> Vec<(ArchKey, f64, f64, usize)> {
    let mut keys: Vec<ArchKey> = cells.iter().map(|c| (c.key.n_train, c.key.units, c.key.contexts)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .filter_map(|k| {
            let errs: Vec<f64> = cells
                .iter()
                .filter(|c| (c.key.n_train, c.key.units, c.key.contexts) == k)
                .filter_map(|c| c.get(v).and_then(|o| o.val_error))
                .collect();
            mean_std(&errs).map(|(m, s)| (k, m, s, errs.len()))
        })
        .collect()
}

/// Panel c: best seed-averaged error of every variant per training-set size,
/// with its depth and the architecture that attains it.
pub fn panel_c(cfg: &ExperimentConfig, cells: &[CellResult]) -> String {
    let mut out = format!("{SCHEMA_LINE}\nn_train,variant,depth,best_mean_error,std_error,units,contexts\n");
    for &n in &cfg.data.n_train {
        for &v in &cfg.grid.variants {
            let best = seed_means(cells, v)
                .into_iter()
                .filter(|(k, ..)| k.0 == n)
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            if let Some(((_, h, c), m, s, _)) = best {
                out.push_str(&format!("{n},{v},{},{:.6},{:.6},{h},{c}\n", v.depth(), m, s));
            }
        }
    }
    out
}

/// Panel d: seed-averaged error against the number of hidden units.
pub fn panel_d(cfg: &ExperimentConfig, cells: &[CellResult]) -> String {
    let mut out = format!("{SCHEMA_LINE}\nn_train,units,contexts");
    for v in &cfg.grid.variants {
        out.push_str(&format!(",mean_{v},std_{v}"));
    }
    out.push('\n');
    let stats: Vec<Vec<(ArchKey, f64, f64, usize)>> =
        cfg.grid.variants.iter().map(|&v| seed_means(cells, v)).collect();
    let mut keys: Vec<ArchKey> = cells.iter().map(|c| (c.key.n_train, c.key.units, c.key.contexts)).collect();
    keys.sort();
    keys.dedup();
    for k in keys {
        out.push_str(&format!("{},{},{}", k.0, k.1, k.2));
        for s in &stats {
            match s.iter().find(|e| e.0 == k) {
                Some(e) => out.push_str(&format!(",{:.6},{:.6}", e.1, e.2)),
                None => out.push_str(",,"),
            }
        }
        out.push('\n');
    }
    out
}

/// Runs a figure's grid and writes the bundle plus `panel_{a,b,c,d}.csv`.
pub fn reproduce(fig: Figure, scale: Scale, raw: &RawMnist, dir: &Path) -> Result<ExperimentOutput> {
    let cfg = figure_config(fig, scale, raw.len());
    if cfg.data.n_val < FULL_N_VAL {
        eprintln!(
            "warning: data file holds {} digits; validating on {} instead of {FULL_N_VAL}",
            raw.len(),
            cfg.data.n_val
        );
    }
    let out = run_experiment(&cfg, Some(raw))?;
    write_bundle(&cfg, &out, dir)?;
    fs::write(dir.join("panel_a.csv"), panel_a(&cfg, &out.cells))?;
    fs::write(dir.join("panel_b.csv"), panel_b(&cfg, &out.comparisons))?;
    fs::write(dir.join("panel_c.csv"), panel_c(&cfg, &out.cells))?;
    fs::write(dir.join("panel_d.csv"), panel_d(&cfg, &out.cells))?;
    Ok(out)
}
