//! Command-line harness: ingest data, train, solve, certify, measure norms,
//! compare predictors and reproduce the experiment grids.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use glnbias::analysis::{baseline_inconsistency, error_rate_scores, inconsistency_scores};
use glnbias::data::{gen_synthetic, make_binary_task, Dataset, RawMnist};
use glnbias::experiment::{self, ExperimentConfig, Figure, Scale};
use glnbias::gating::{sample_contexts, ContextFunction, ContextSource};
use glnbias::models::{BetaTable, GatedModel, LossKind, Model};
use glnbias::norms::{check_equivariance, gln_norm_closed_2x2, gln_norm_variational};
use glnbias::solvers::{
    kkt_certify, lift, solve, CertifyOptions, LiftSpec, ObjectiveKind, SolverOptions,
};
use glnbias::trainer::{direction_metrics, init_model, train, trajectory_csv, InitSpec, TrainConfig};
use glnbias::{par, Error, Result};

#[derive(Parser)]
#[command(name = "glnbias", version, about = "Implicit-bias experiments for gated linear and ReLU networks")]
struct Cli {
    /// Run everything on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load IDX files and export the binary task as CSV.
    Ingest(IngestArgs),
    /// Full-batch gradient descent on a GLN or ReLU network.
    Train(TrainArgs),
    /// Solve a fixed-margin convex program.
    Solve(SolveArgs),
    /// Margin-normalize a checkpoint and check its KKT conditions.
    Certify(CertifyArgs),
    /// GLN norm of a predictor table.
    Norms(NormsArgs),
    /// Error and inconsistency of two checkpoints on the validation split.
    Compare(CompareArgs),
    /// Run a figure's grid and write its CSV bundle.
    Reproduce(ReproduceArgs),
    /// Run an experiment described by a TOML file.
    Run(RunArgs),
}

#[derive(Clone, Copy, ValueEnum, Serialize, Deserialize, PartialEq, Eq, Debug)]
#[serde(rename_all = "kebab-case")]
enum TaskArg {
    MnistBinary,
    Synthetic,
}

#[derive(Args, Clone, Serialize, Deserialize, Debug)]
struct DataArgs {
    #[arg(long, value_enum, default_value = "mnist-binary")]
    task: TaskArg,
    /// IDX image file (optionally gzipped).
    #[arg(long)]
    images: Option<PathBuf>,
    /// IDX label file (optionally gzipped).
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Directory holding train-images-idx3-ubyte[.gz] and train-labels-idx1-ubyte[.gz].
    #[arg(long, env = "MNIST_DIR", default_value = "data/mnist")]
    mnist_dir: PathBuf,
    #[arg(long, default_value_t = 500)]
    n_train: usize,
    #[arg(long, default_value_t = 1000)]
    n_val: usize,
    #[arg(long, default_value_t = 0)]
    split_seed: u64,
    #[arg(long, default_value_t = 5)]
    synthetic_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    synthetic_margin: f64,
}

fn find_idx(dir: &Path, stem: &str) -> Result<PathBuf> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(Error::Config(format!(
        "{stem} not found in {}; pass --images/--labels or set MNIST_DIR",
        dir.display()
    )))
}

impl DataArgs {
    fn raw(&self) -> Result<RawMnist> {
        let images = match &self.images {
            Some(p) => p.clone(),
            None => find_idx(&self.mnist_dir, "train-images-idx3-ubyte")?,
        };
        let labels = match &self.labels {
            Some(p) => p.clone(),
            None => find_idx(&self.mnist_dir, "train-labels-idx1-ubyte")?,
        };
        RawMnist::load(&images, &labels)
    }

    fn split(&self) -> Result<(Dataset, Dataset)> {
        match self.task {
            TaskArg::MnistBinary => make_binary_task(&self.raw()?, self.n_train, self.n_val, self.split_seed),
            TaskArg::Synthetic => {
                let s = gen_synthetic(
                    self.n_train + self.n_val,
                    self.synthetic_dim,
                    self.synthetic_margin,
                    self.split_seed,
                );
                let idx: Vec<usize> = (0..self.n_train + self.n_val).collect();
                Ok((s.dataset.select(&idx[..self.n_train]), s.dataset.select(&idx[self.n_train..])))
            }
        }
    }
}

#[derive(Args)]
struct IngestArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Training split CSV.
    #[arg(long)]
    out: PathBuf,
    /// Validation split CSV.
    #[arg(long)]
    val_out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum FamilyArg {
    Gln,
    Relu,
}

#[derive(Args, Clone, Serialize, Deserialize, Debug)]
struct ContextArgs {
    #[arg(long, default_value_t = 10)]
    units: usize,
    #[arg(long, default_value_t = 2)]
    contexts: usize,
    #[arg(long, default_value_t = 0)]
    context_seed: u64,
    /// Keep the sampled cutoffs instead of splitting the training data in half.
    #[arg(long)]
    no_median: bool,
}

impl ContextArgs {
    fn sample(&self, train: &Dataset) -> Result<ContextFunction> {
        sample_contexts(
            train.dim(),
            self.units,
            self.contexts,
            Some(train),
            !self.no_median,
            self.context_seed,
        )
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    ctx: ContextArgs,
    #[arg(long, value_enum, default_value = "gln")]
    family: FamilyArg,
    /// Comma-separated `steps:rate` phases.
    #[arg(long, default_value = "1600:0.04,1600:0.01")]
    schedule: String,
    #[arg(long, default_value_t = 0.0)]
    momentum: f64,
    #[arg(long, default_value = "logistic")]
    loss: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    snapshot_every: usize,
    /// Checkpoint JSON.
    #[arg(long)]
    out: PathBuf,
    /// Trajectory CSV.
    #[arg(long)]
    trajectory: Option<PathBuf>,
}

/// A trained or solved model together with how it assigns contexts.
#[derive(Serialize, Deserialize)]
struct Checkpoint {
    schema: u32,
    loss: Option<LossKind>,
    contexts: ContextSource,
    model: Model,
}

impl Checkpoint {
    fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }

    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    fn scores(&self, ds: &Dataset) -> Result<Vec<f64>> {
        self.model.scores(&self.contexts.annotate(ds)?)
    }
}

fn parse_schedule(s: &str) -> Result<Vec<(usize, f64)>> {
    s.split(',')
        .map(|phase| {
            let (steps, rate) = phase
                .split_once(':')
                .ok_or_else(|| Error::Parse(format!("phase `{phase}` is not steps:rate")))?;
            let steps = steps.trim().parse().map_err(|_| Error::Parse(format!("bad step count `{steps}`")))?;
            let rate = rate.trim().parse().map_err(|_| Error::Parse(format!("bad rate `{rate}`")))?;
            Ok((steps, rate))
        })
        .collect()
}

fn cmd_ingest(a: IngestArgs) -> Result<()> {
    let (train, val) = a.data.split()?;
    train.write_csv(fs::File::create(&a.out)?)?;
    if let Some(p) = &a.val_out {
        val.write_csv(fs::File::create(p)?)?;
    }
    let pos = train.labels().iter().filter(|&&y| y > 0.0).count();
    println!(
        "train: {} rows, dim {}, {} positive; val: {} rows",
        train.len(),
        train.dim(),
        pos,
        val.len()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let (train_ds, _) = a.data.split()?;
    let cfg = TrainConfig {
        schedule: parse_schedule(&a.schedule)?,
        momentum: a.momentum,
        loss: a.loss.parse()?,
        seed: a.seed,
        snapshot_every: a.snapshot_every,
        keep_weights: true,
    };
    let (spec, source) = match a.family {
        FamilyArg::Gln => (
            InitSpec::Gln { units: a.ctx.units, contexts: a.ctx.contexts, dim: train_ds.dim() },
            ContextSource::Halfspaces(a.ctx.sample(&train_ds)?),
        ),
        FamilyArg::Relu => (InitSpec::Relu { hidden: a.ctx.units, dim: train_ds.dim() }, ContextSource::None),
    };
    let ds = source.annotate(&train_ds)?;
    let traj = train(init_model(spec, a.seed)?, &ds, &cfg)?;
    if let Some(p) = &a.trajectory {
        fs::write(p, trajectory_csv(&direction_metrics(&traj)?))?;
    }
    let last = traj.snapshots.last().expect("at least one step");
    println!("step {} loss {:.6e} min margin {:.6e}", last.step, last.loss, last.min_margin);
    Checkpoint { schema: 1, loss: Some(cfg.loss), contexts: source, model: traj.final_model }.write(&a.out)
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum LiftArg {
    Gln,
    Frelu,
    Shallow,
    Plain,
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum ObjectiveArg {
    GroupLasso,
    QuadM,
    PlainL2,
}

#[derive(Args)]
struct SolveArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    ctx: ContextArgs,
    #[arg(long, value_enum, default_value = "gln")]
    lift: LiftArg,
    /// Defaults to group lasso for gln/frelu and plain L2 otherwise.
    #[arg(long, value_enum)]
    objective: Option<ObjectiveArg>,
    /// Take contexts from this checkpoint (frelu: its ReLU gates).
    #[arg(long)]
    from: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long, default_value_t = 50_000)]
    max_iter: usize,
    /// Write the lifted problem as text.
    #[arg(long)]
    dump: Option<PathBuf>,
    /// SolverResult JSON.
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint of the solution.
    #[arg(long)]
    model_out: Option<PathBuf>,
}

fn cmd_solve(a: SolveArgs) -> Result<()> {
    let (train_ds, _) = a.data.split()?;
    let source = match (&a.from, a.lift) {
        (Some(p), LiftArg::Frelu) => match Checkpoint::read(p)?.model {
            Model::Relu(net) => ContextSource::ReluGates(net),
            _ => return Err(Error::Config("frelu contexts need a ReLU checkpoint".into())),
        },
        (Some(p), _) => Checkpoint::read(p)?.contexts,
        (None, LiftArg::Plain) => ContextSource::None,
        (None, LiftArg::Frelu) => {
            let cf = sample_contexts(train_ds.dim(), a.ctx.units, 2, Some(&train_ds), !a.ctx.no_median, a.ctx.context_seed)?;
            ContextSource::Halfspaces(cf)
        }
        (None, LiftArg::Shallow) => {
            let mut cf = a.ctx.sample(&train_ds)?;
            cf.gates.truncate(cf.gates_per_unit());
            cf.units = 1;
            ContextSource::Halfspaces(cf)
        }
        (None, LiftArg::Gln) => ContextSource::Halfspaces(a.ctx.sample(&train_ds)?),
    };
    let mut ds = source.annotate(&train_ds)?;
    if a.lift == LiftArg::Frelu && matches!(source, ContextSource::Halfspaces(_)) {
        // halfspace contexts are 1-based; frozen gates are 0/1
        let gates = ds.contexts().expect("annotated").iter().map(|g| {
            glnbias::gating::GlobalContext(g.0.iter().map(|&c| c - 1).collect())
        });
        ds = ds.clone().without_contexts().with_contexts(gates.collect())?;
    }
    let spec = match a.lift {
        LiftArg::Gln => LiftSpec::Gln { contexts: a.ctx.contexts },
        LiftArg::Frelu => LiftSpec::Frelu,
        LiftArg::Shallow => LiftSpec::Shallow,
        LiftArg::Plain => LiftSpec::Plain,
    };
    let mut p = lift(&ds, spec)?;
    if let Some(o) = a.objective {
        p = p.with_objective(match o {
            ObjectiveArg::GroupLasso => ObjectiveKind::GroupLasso,
            ObjectiveArg::QuadM => ObjectiveKind::QuadM,
            ObjectiveArg::PlainL2 => ObjectiveKind::PlainL2,
        })?;
    }
    if let Some(path) = &a.dump {
        fs::write(path, p.to_text())?;
    }
    let r = solve(&p, &SolverOptions { tol: a.tol, max_iter: a.max_iter })?;
    fs::write(&a.out, serde_json::to_string_pretty(&r)?)?;
    println!(
        "{:?}: objective {:.6e}, primal residual {:.2e}, {} iterations",
        r.status, r.objective, r.primal_residual, r.iterations
    );
    if let Some(path) = &a.model_out {
        let model = p.to_model(&r.zeta)?;
        let contexts = match (a.lift, source) {
            (LiftArg::Frelu, ContextSource::Halfspaces(_)) => {
                eprintln!("warning: checkpoint of a random-gate solution keeps no gate source");
                ContextSource::None
            }
            (_, s) => s,
        };
        Checkpoint { schema: 1, loss: None, contexts, model }.write(path)?;
    }
    Ok(())
}

#[derive(Args)]
struct CertifyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 1e-4)]
    margin_tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_certify(a: CertifyArgs) -> Result<()> {
    let (train_ds, _) = a.data.split()?;
    let ck = Checkpoint::read(&a.checkpoint)?;
    let ds = ck.contexts.annotate(&train_ds)?;
    let opts = CertifyOptions { margin_tol: a.margin_tol, ..CertifyOptions::default() };
    let report = kkt_certify(&ck.model, &ds, &opts)?;
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => fs::write(p, json)?,
        None => println!("{json}"),
    }
    eprintln!("residual {:.6e}, alpha {:.6e}", report.residual, report.alpha);
    Ok(())
}

#[derive(Args)]
struct NormsArgs {
    /// BetaTable CSV.
    #[arg(long, conflicts_with = "checkpoint")]
    beta: Option<PathBuf>,
    /// Number of contexts per unit of the table.
    #[arg(long, default_value_t = 2)]
    contexts: usize,
    /// GLN checkpoint to tabulate instead of a CSV.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
}

#[derive(Serialize)]
struct NormsOutput {
    value: f64,
    alpha: Option<f64>,
    residual: f64,
    iterations: usize,
    closed_form: Option<f64>,
    equivariance_violation: f64,
}

fn cmd_norms(a: NormsArgs) -> Result<()> {
    let table = match (&a.beta, &a.checkpoint) {
        (Some(p), _) => BetaTable::from_csv(&fs::read_to_string(p)?, a.contexts)?,
        (None, Some(p)) => match Checkpoint::read(p)?.model {
            Model::Gln(m) => BetaTable::from_gln(&m)?,
            Model::Zeta(z) => BetaTable::from_zeta(&z)?,
            other => return Err(Error::Config(format!("no predictor table for a {} model", other.family()))),
        },
        (None, None) => return Err(Error::Config("pass --beta or --checkpoint".into())),
    };
    let eq = check_equivariance(&table, 0.0);
    let (report, _) = gln_norm_variational(&table, a.tol)?;
    let closed = if table.units == 2 && table.contexts == 2 {
        Some(gln_norm_closed_2x2(&table)?.value)
    } else {
        None
    };
    let out = NormsOutput {
        value: report.value,
        alpha: report.alpha,
        residual: report.residual,
        iterations: report.iterations,
        closed_form: closed,
        equivariance_violation: eq.max_violation,
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    a: PathBuf,
    #[arg(long)]
    b: PathBuf,
}

#[derive(Serialize)]
struct CompareOutput {
    error_a: f64,
    error_b: f64,
    inconsistency: f64,
    baseline_inconsistency: f64,
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let (_, val) = a.data.split()?;
    let sa = Checkpoint::read(&a.a)?.scores(&val)?;
    let sb = Checkpoint::read(&a.b)?.scores(&val)?;
    let error_a = error_rate_scores(&sa, val.labels());
    let out = CompareOutput {
        error_a,
        error_b: error_rate_scores(&sb, val.labels()),
        inconsistency: inconsistency_scores(&sa, &sb),
        baseline_inconsistency: baseline_inconsistency(error_a),
    };
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}

#[derive(Clone, Copy, ValueEnum)]
enum FigureArg {
    Fig2,
    Fig3,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Args)]
struct ReproduceArgs {
    #[arg(value_enum)]
    figure: FigureArg,
    #[arg(long, value_enum, default_value = "desk")]
    scale: ScaleArg,
    #[command(flatten)]
    data: DataArgs,
    /// Output directory for the CSV bundle.
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

fn cmd_reproduce(a: ReproduceArgs) -> Result<()> {
    let fig = match a.figure {
        FigureArg::Fig2 => Figure::Fig2,
        FigureArg::Fig3 => Figure::Fig3,
    };
    let scale = match a.scale {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Paper => Scale::Paper,
    };
    let raw = a.data.raw()?;
    let out = experiment::reproduce(fig, scale, &raw, &a.out)?;
    println!(
        "{} cells, {} comparison rows written to {}",
        out.cells.len(),
        out.comparisons.len(),
        a.out.display()
    );
    Ok(())
}

#[derive(Args)]
struct RunArgs {
    /// Experiment TOML.
    config: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = ExperimentConfig::from_toml(&fs::read_to_string(&a.config)?)?;
    let raw = match cfg.data.task {
        experiment::Task::MnistBinary => Some(a.data.raw()?),
        experiment::Task::Synthetic => None,
    };
    let out = experiment::run_experiment(&cfg, raw.as_ref())?;
    experiment::write_bundle(&cfg, &out, &a.out)?;
    println!("{} cells written to {}", out.cells.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.sequential {
        par::set_parallel(false);
    }
    let result = match cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Train(a) => cmd_train(a),
        Command::Solve(a) => cmd_solve(a),
        Command::Certify(a) => cmd_certify(a),
        Command::Norms(a) => cmd_norms(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Reproduce(a) => cmd_reproduce(a),
        Command::Run(a) => cmd_run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
