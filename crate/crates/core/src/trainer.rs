//! Full-batch gradient descent with momentum, snapshots and directional diagnostics.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, CompensatedSum};
use crate::models::{GatedModel, LossKind, Model, ReluNet, TwoLayerGln};

/// Loss above which a run counts as diverged.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// `(steps, learning rate)` phases run back to back.
    pub schedule: Vec<(usize, f64)>,
    pub momentum: f64,
    pub loss: LossKind,
    pub seed: u64,
    pub snapshot_every: usize,
    /// Keep full weights in every snapshot (needed for certification).
    pub keep_weights: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            schedule: vec![(1600, 0.04), (1600, 0.01)],
            momentum: 0.0,
            loss: LossKind::Logistic,
            seed: 0,
            snapshot_every: 100,
            keep_weights: true,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.schedule.iter().map(|p| p.0).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        for &(steps, lr) in &self.schedule {
            if steps == 0 || !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("bad schedule phase ({steps}, {lr})")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if self.snapshot_every == 0 {
            return Err(Error::Config("snapshot_every must be positive".into()));
        }
        Ok(())
    }
}

/// Which family to initialize, with its shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum InitSpec {
    Gln { units: usize, contexts: usize, dim: usize },
    Relu { hidden: usize, dim: usize },
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Semi-orthogonal `rows × cols` matrix (row-major): orthonormal rows when
/// `rows ≤ cols`, orthonormal columns otherwise.
pub fn semi_orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (tall_r, tall_c) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    let a = DMatrix::from_column_slice(tall_r, tall_c, &gaussian(rng, tall_r * tall_c));
    let qr = a.qr();
    let mut q = qr.q();
    let r = qr.r();
    // make the factorization unique
    for j in 0..tall_c {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[i * cols + j] = if rows >= cols { q[(i, j)] } else { q[(j, i)] };
        }
    }
    out
}

pub fn init_model(spec: InitSpec, seed: u64) -> Result<Model> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match spec {
        InitSpec::Gln { units, contexts, dim } => {
            if units == 0 || contexts == 0 || dim == 0 {
                return Err(Error::InvalidShape("GLN shapes must be positive".into()));
            }
            let w1 = semi_orthogonal(units * contexts, dim, &mut rng);
            let mut w2 = gaussian(&mut rng, units);
            let n = linalg::norm2(&w2);
            linalg::scale(1.0 / n, &mut w2);
            Ok(Model::Gln(TwoLayerGln::new(units, contexts, dim, w1, w2)?))
        }
        InitSpec::Relu { hidden, dim } => {
            if hidden == 0 || dim == 0 {
                return Err(Error::InvalidShape("ReLU shapes must be positive".into()));
            }
            let sw = (2.0 / dim as f64).sqrt();
            let sa = (2.0 / hidden as f64).sqrt();
            let w = gaussian(&mut rng, hidden * dim).into_iter().map(|v| v * sw).collect();
            let a = gaussian(&mut rng, hidden).into_iter().map(|v| v * sa).collect();
            Ok(Model::Relu(ReluNet::new(hidden, dim, w, a)?))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub step: usize,
    /// Mean training loss at this step.
    pub loss: f64,
    /// Raw minimum margin `min_n y_n f(x_n)`.
    pub min_margin: f64,
    pub weight_norm: f64,
    pub balance_gap: Option<f64>,
    pub weights: Option<Model>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub degree: u32,
    pub snapshots: Vec<Snapshot>,
    pub final_model: Model,
}

fn mean_loss_and_margin(model: &Model, ds: &Dataset, loss: LossKind) -> Result<(f64, f64)> {
    let scores = model.scores(ds)?;
    let mut acc = CompensatedSum::default();
    let mut min_margin = f64::INFINITY;
    for (n, f) in scores.iter().enumerate() {
        let u = ds.y(n) * f;
        acc.add(loss.value(u));
        min_margin = min_margin.min(u);
    }
    Ok((acc.value() / ds.len() as f64, min_margin))
}

/// Full-batch descent on the mean loss: `v ← m·v − lr·∇L`, `w ← w + v`.
///
/// `ds` must already carry contexts for gated families.
pub fn train(mut model: Model, ds: &Dataset, config: &TrainConfig) -> Result<Trajectory> {
    config.validate()?;
    model.check_dataset(ds)?;
    if ds.is_empty() {
        return Err(Error::InsufficientSamples { requested: 1, available: 0 });
    }
    let inv_n = 1.0 / ds.len() as f64;
    let total = config.total_steps();
    let mut velocity = vec![0.0; model.params().len()];
    let mut snapshots = Vec::new();
    let mut step = 0;
    for &(steps, lr) in &config.schedule {
        for _ in 0..steps {
            let (value, grad) = model.loss_and_grad(ds, config.loss)?;
            let value = value * inv_n;
            if !value.is_finite() || value > DIVERGENCE_LIMIT {
                return Err(Error::Diverged { step, loss: value });
            }
            for ((w, v), g) in model.params_mut().iter_mut().zip(&mut velocity).zip(&grad) {
                *v = config.momentum * *v - lr * g * inv_n;
                *w += *v;
            }
            step += 1;
            if step % config.snapshot_every == 0 || step == total {
                let (loss, min_margin) = mean_loss_and_margin(&model, ds, config.loss)?;
                if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                    return Err(Error::Diverged { step, loss });
                }
                snapshots.push(Snapshot {
                    step,
                    loss,
                    min_margin,
                    weight_norm: linalg::norm2(model.params()),
                    balance_gap: model.balance_gap(),
                    weights: config.keep_weights.then(|| model.clone()),
                });
            }
        }
    }
    Ok(Trajectory {
        degree: model.degree(),
        snapshots,
        final_model: model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionReport {
    pub step: usize,
    pub loss: f64,
    /// `min_n y_n f_ŵ(x_n)` for the unit-norm direction `ŵ`.
    pub min_margin: f64,
    pub weight_norm: f64,
    pub cos_to_final: f64,
    pub balance_gap: Option<f64>,
}

pub fn direction_metrics(traj: &Trajectory) -> Result<Vec<DirectionReport>> {
    if traj.snapshots.len() < 2 {
        return Err(Error::InsufficientSamples {
            requested: 2,
            available: traj.snapshots.len(),
        });
    }
    let last = traj.snapshots.last().expect("nonempty");
    let final_w = last
        .weights
        .as_ref()
        .ok_or_else(|| Error::Config("trajectory was recorded without weights".into()))?;
    if last.weight_norm == 0.0 {
        return Err(Error::ZeroNormSnapshot(last.step));
    }
    traj.snapshots
        .iter()
        .map(|s| {
            let w = s
                .weights
                .as_ref()
                .ok_or_else(|| Error::Config("trajectory was recorded without weights".into()))?;
            let cos = linalg::cosine(w.params(), final_w.params())
                .ok_or(Error::ZeroNormSnapshot(s.step))?;
            Ok(DirectionReport {
                step: s.step,
                loss: s.loss,
                min_margin: s.min_margin / s.weight_norm.powi(traj.degree as i32),
                weight_norm: s.weight_norm,
                cos_to_final: cos,
                balance_gap: s.balance_gap,
            })
        })
        .collect()
}

pub const TRAJECTORY_HEADER: &str = "step,loss,min_margin,weight_norm,cos_to_final,balance_gap";

pub fn trajectory_csv(reports: &[DirectionReport]) -> String {
    let mut out = format!("# schema=1\n{TRAJECTORY_HEADER}\n");
    for r in reports {
        let gap = r.balance_gap.map(|g| format!("{g:.10e}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{:.10e},{:.10e},{:.10e},{:.12},{}\n",
            r.step, r.loss, r.min_margin, r.weight_norm, r.cos_to_final, gap
        ));
    }
    out
}
