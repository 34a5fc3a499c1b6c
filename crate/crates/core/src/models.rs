//! Two-layer GLNs, shallow GLNs, ReLU networks, ζ-parameterized GLNs and
//! FReLUs, plus exact loss gradients.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::gating::GlobalContext;
use crate::linalg::{self, CompensatedSum};
use crate::par;

/// Largest number of global contexts a [`BetaTable`] will materialize.
pub const BETA_TABLE_CAP: usize = 4096;

/// Exponential-like losses on the signed margin `u = y·f(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Exponential,
    Logistic,
}

impl LossKind {
    pub fn value(self, u: f64) -> f64 {
        match self {
            LossKind::Exponential => (-u).exp(),
            LossKind::Logistic => {
                if u > 0.0 {
                    (-u).exp().ln_1p()
                } else {
                    -u + u.exp().ln_1p()
                }
            }
        }
    }

    /// dℓ/du
    pub fn derivative(self, u: f64) -> f64 {
        match self {
            LossKind::Exponential => -(-u).exp(),
            LossKind::Logistic => {
                if u > 0.0 {
                    let e = (-u).exp();
                    -e / (1.0 + e)
                } else {
                    -1.0 / (1.0 + u.exp())
                }
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Exponential => "exponential",
            LossKind::Logistic => "logistic",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(LossKind::Exponential),
            "logistic" | "cross-entropy" => Ok(LossKind::Logistic),
            other => Err(Error::UnknownLoss(other.to_string())),
        }
    }
}

/// Common surface of every model family.
pub trait GatedModel {
    fn dim(&self) -> usize;

    /// Whether scoring needs a global context.
    fn needs_contexts(&self) -> bool;

    /// Homogeneity degree of the score in the parameters.
    fn degree(&self) -> u32;

    fn params(&self) -> &[f64];

    fn params_mut(&mut self) -> &mut [f64];

    fn score(&self, x: &[f64], ctx: Option<&GlobalContext>) -> Result<f64>;

    /// Σ_n ℓ(y_n f(x_n; γ_n)) and its exact gradient with respect to [`params`](Self::params).
    fn loss_and_grad(&self, ds: &Dataset, loss: LossKind) -> Result<(f64, Vec<f64>)>;

    fn scores(&self, ds: &Dataset) -> Result<Vec<f64>>
    where
        Self: Sync,
    {
        self.check_dataset(ds)?;
        par::map_range(ds.len(), |n| self.score(ds.x(n), ds.context(n)))
            .into_iter()
            .collect()
    }

    fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        if ds.dim() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: ds.dim(),
            });
        }
        if self.needs_contexts() && ds.contexts().is_none() {
            return Err(Error::MissingContexts);
        }
        Ok(())
    }
}

/// Loss and `dL/df_n` given the raw scores.
fn loss_terms(ds: &Dataset, scores: &[f64], loss: LossKind) -> (f64, Vec<f64>) {
    let mut total = CompensatedSum::default();
    let mut coef = Vec::with_capacity(scores.len());
    for (n, &f) in scores.iter().enumerate() {
        let y = ds.y(n);
        total.add(loss.value(y * f));
        coef.push(loss.derivative(y * f) * y);
    }
    (total.value(), coef)
}

fn check_contexts(ds: &Dataset, units: usize, range: std::ops::RangeInclusive<u32>) -> Result<&[GlobalContext]> {
    let ctx = ds.contexts().ok_or(Error::MissingContexts)?;
    for g in ctx {
        if g.len() != units || g.0.iter().any(|v| !range.contains(v)) {
            return Err(Error::ContextOutOfRange(g.label()));
        }
    }
    Ok(ctx)
}

fn check_context(g: &GlobalContext, units: usize, range: std::ops::RangeInclusive<u32>) -> Result<()> {
    if g.len() != units || g.0.iter().any(|v| !range.contains(v)) {
        return Err(Error::ContextOutOfRange(g.label()));
    }
    Ok(())
}

fn check_dim(expected: usize, x: &[f64]) -> Result<()> {
    if x.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: x.len(),
        });
    }
    Ok(())
}

/// Two-layer GLN: `w1 ∈ ℝ^{H×C×D}`, `w2 ∈ ℝ^H`, `β_γ = Σ_h w2_h w1[h, γ_h]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoLayerGln {
    units: usize,
    contexts: usize,
    dim: usize,
    /// `[w1 (H·C·D) | w2 (H)]`
    params: Vec<f64>,
}

impl TwoLayerGln {
    pub fn new(units: usize, contexts: usize, dim: usize, w1: Vec<f64>, w2: Vec<f64>) -> Result<Self> {
        if w1.len() != units * contexts * dim || w2.len() != units {
            return Err(Error::InvalidShape(format!(
                "w1 has {} entries and w2 {} for H={units} C={contexts} D={dim}",
                w1.len(),
                w2.len()
            )));
        }
        if w1.iter().chain(&w2).any(|v| !v.is_finite()) {
            return Err(Error::InvalidShape("non-finite weight".into()));
        }
        let mut params = w1;
        params.extend(w2);
        Ok(Self {
            units,
            contexts,
            dim,
            params,
        })
    }

    pub fn zeros(units: usize, contexts: usize, dim: usize) -> Self {
        Self {
            units,
            contexts,
            dim,
            params: vec![0.0; units * contexts * dim + units],
        }
    }

    pub fn units(&self) -> usize {
        self.units
    }

    pub fn contexts(&self) -> usize {
        self.contexts
    }

    fn w1_len(&self) -> usize {
        self.units * self.contexts * self.dim
    }

    pub fn w1(&self) -> &[f64] {
        &self.params[..self.w1_len()]
    }

    pub fn w1_mut(&mut self) -> &mut [f64] {
        let l = self.w1_len();
        &mut self.params[..l]
    }

    pub fn w2(&self) -> &[f64] {
        &self.params[self.w1_len()..]
    }

    pub fn w2_mut(&mut self) -> &mut [f64] {
        let l = self.w1_len();
        &mut self.params[l..]
    }

    /// All `C × D` first-layer weights of unit `h`.
    pub fn unit_block(&self, h: usize) -> &[f64] {
        let s = self.contexts * self.dim;
        &self.params[h * s..(h + 1) * s]
    }

    /// `w1[h, c]` for a 1-based local context `c`.
    pub fn w1_row(&self, h: usize, c: u32) -> &[f64] {
        let start = (h * self.contexts + (c as usize - 1)) * self.dim;
        &self.params[start..start + self.dim]
    }

    pub fn beta(&self, ctx: &GlobalContext) -> Result<Vec<f64>> {
        check_context(ctx, self.units, 1..=self.contexts as u32)?;
        let mut beta = vec![0.0; self.dim];
        for h in 0..self.units {
            linalg::axpy(self.w2()[h], self.w1_row(h, ctx.get(h)), &mut beta);
        }
        Ok(beta)
    }

    /// `max_h | |w2_h| − ‖w1[h]‖₂ |`
    pub fn balance_gap(&self) -> f64 {
        (0..self.units)
            .map(|h| (self.w2()[h].abs() - linalg::norm2(self.unit_block(h))).abs())
            .fold(0.0, f64::max)
    }
}

impl GatedModel for TwoLayerGln {
    fn dim(&self) -> usize {
        self.dim
    }

    fn needs_contexts(&self) -> bool {
        true
    }

    fn degree(&self) -> u32 {
        2
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn score(&self, x: &[f64], ctx: Option<&GlobalContext>) -> Result<f64> {
        check_dim(self.dim, x)?;
        let ctx = ctx.ok_or(Error::MissingContexts)?;
        check_context(ctx, self.units, 1..=self.contexts as u32)?;
        let w2 = self.w2();
        Ok((0..self.units)
            .map(|h| w2[h] * linalg::dot(self.w1_row(h, ctx.get(h)), x))
            .sum())
    }

    fn loss_and_grad(&self, ds: &Dataset, loss: LossKind) -> Result<(f64, Vec<f64>)> {
        self.check_dataset(ds)?;
        let ctx = check_contexts(ds, self.units, 1..=self.contexts as u32)?;
        let (h_n, c_n, d) = (self.units, self.contexts, self.dim);
        let n = ds.len();
        // a[n, h] = <w1[h, γ_h], x_n>
        let mut act = vec![0.0; n * h_n];
        par::for_each_chunk(&mut act, h_n, |i, row| {
            let x = ds.x(i);
            for (h, a) in row.iter_mut().enumerate() {
                *a = linalg::dot(self.w1_row(h, ctx[i].get(h)), x);
            }
        });
        let w2 = self.w2();
        let scores: Vec<f64> = act
            .chunks(h_n)
            .map(|row| row.iter().zip(w2).map(|(a, w)| a * w).sum())
            .collect();
        let (value, coef) = loss_terms(ds, &scores, loss);

        let mut grad = vec![0.0; self.params.len()];
        let (g1, g2) = grad.split_at_mut(h_n * c_n * d);
        par::for_each_chunk(g1, d, |blk, out| {
            let (h, c) = (blk / c_n, (blk % c_n) as u32 + 1);
            for i in 0..n {
                if ctx[i].get(h) == c {
                    linalg::axpy(w2[h] * coef[i], ds.x(i), out);
                }
            }
        });
        par::for_each_chunk(g2, 1, |h, out| {
            out[0] = (0..n).map(|i| coef[i] * act[i * h_n + h]).sum();
        });
        Ok((value, grad))
    }
}

/// Whether a ζ tensor parameterizes a GLN or a FReLU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZetaKind {
    /// `H × C × D`, `β_γ = Σ_h ζ[h, γ_h]`
    Gln,
    /// `H × D`, `β_γ = Σ_{h: γ_h = 1} ζ[h]`
    Frelu,
}

/// The degree-1 parameterization `ζ_{hc} = w2_h · w1[h, c]` (or a FReLU's ζ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZetaParam {
    pub kind: ZetaKind,
    pub units: usize,
    /// `C` for GLNs, 1 for FReLUs.
    pub contexts: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl ZetaParam {
    pub fn gln(units: usize, contexts: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != units * contexts * dim {
            return Err(Error::InvalidShape(format!("ζ has {} entries", values.len())));
        }
        Ok(Self {
            kind: ZetaKind::Gln,
            units,
            contexts,
            dim,
            values,
        })
    }

    pub fn frelu(units: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != units * dim {
            return Err(Error::InvalidShape(format!("ζ has {} entries", values.len())));
        }
        Ok(Self {
            kind: ZetaKind::Frelu,
            units,
            contexts: 1,
            dim,
            values,
        })
    }

    /// All entries of unit `h` (`C × D` for GLNs, `D` for FReLUs).
    pub fn unit(&self, h: usize) -> &[f64] {
        let s = self.contexts * self.dim;
        &self.values[h * s..(h + 1) * s]
    }

    fn row(&self, h: usize, local: u32) -> Option<&[f64]> {
        match self.kind {
            ZetaKind::Gln => {
                let start = (h * self.contexts + local as usize - 1) * self.dim;
                Some(&self.values[start..start + self.dim])
            }
            ZetaKind::Frelu => (local == 1).then(|| self.unit(h)),
        }
    }

    fn context_range(&self) -> std::ops::RangeInclusive<u32> {
        match self.kind {
            ZetaKind::Gln => 1..=self.contexts as u32,
            ZetaKind::Frelu => 0..=1,
        }
    }

    pub fn beta(&self, ctx: &GlobalContext) -> Result<Vec<f64>> {
        check_context(ctx, self.units, self.context_range())?;
        let mut beta = vec![0.0; self.dim];
        for h in 0..self.units {
            if let Some(r) = self.row(h, ctx.get(h)) {
                linalg::axpy(1.0, r, &mut beta);
            }
        }
        Ok(beta)
    }

    /// `Σ_h ‖ζ_h‖₂`
    pub fn group_norm(&self) -> f64 {
        (0..self.units).map(|h| linalg::norm2(self.unit(h))).sum()
    }
}

impl GatedModel for ZetaParam {
    fn dim(&self) -> usize {
        self.dim
    }

    fn needs_contexts(&self) -> bool {
        true
    }

    fn degree(&self) -> u32 {
        1
    }

    fn params(&self) -> &[f64] {
        &self.values
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn score(&self, x: &[f64], ctx: Option<&GlobalContext>) -> Result<f64> {
        check_dim(self.dim, x)?;
        let ctx = ctx.ok_or(Error::MissingContexts)?;
        check_context(ctx, self.units, self.context_range())?;
        Ok((0..self.units)
            .filter_map(|h| self.row(h, ctx.get(h)).map(|r| linalg::dot(r, x)))
            .sum())
    }

    fn loss_and_grad(&self, ds: &Dataset, loss: LossKind) -> Result<(f64, Vec<f64>)> {
        self.check_dataset(ds)?;
        let ctx = check_contexts(ds, self.units, self.context_range())?;
        let scores = par::map_range(ds.len(), |i| {
            (0..self.units)
                .filter_map(|h| self.row(h, ctx[i].get(h)).map(|r| linalg::dot(r, ds.x(i))))
                .sum::<f64>()
        });
        let (value, coef) = loss_terms(ds, &scores, loss);
        let mut grad = vec![0.0; self.values.len()];
        let (c_n, kind) = (self.contexts, self.kind);
        par::for_each_chunk(&mut grad, self.dim, |blk, out| {
            let (h, local) = match kind {
                ZetaKind::Gln => (blk / c_n, (blk % c_n) as u32 + 1),
                ZetaKind::Frelu => (blk, 1),
            };
            for i in 0..ds.len() {
                if ctx[i].get(h) == local {
                    linalg::axpy(coef[i], ds.x(i), out);
                }
            }
        });
        Ok((value, grad))
    }
}

/// `ζ_h = w2_h · w1[h]`
pub fn w_to_zeta(model: &TwoLayerGln) -> ZetaParam {
    let s = model.contexts * model.dim;
    let mut values = Vec::with_capacity(model.units * s);
    for h in 0..model.units {
        let w2 = model.w2()[h];
        values.extend(model.unit_block(h).iter().map(|v| w2 * v));
    }
    ZetaParam {
        kind: ZetaKind::Gln,
        units: model.units,
        contexts: model.contexts,
        dim: model.dim,
        values,
    }
}

/// Balanced factorization `w1[h] = ζ_h / √‖ζ_h‖`, `w2_h = √‖ζ_h‖`.
pub fn zeta_to_w(zeta: &ZetaParam) -> Result<TwoLayerGln> {
    if zeta.kind != ZetaKind::Gln {
        return Err(Error::InvalidShape("zeta_to_w needs a GLN ζ".into()));
    }
    if zeta.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidShape("non-finite ζ".into()));
    }
    let mut w1 = Vec::with_capacity(zeta.values.len());
    let mut w2 = Vec::with_capacity(zeta.units);
    for h in 0..zeta.units {
        let block = zeta.unit(h);
        let root = linalg::norm2(block).sqrt();
        if root == 0.0 {
            w1.extend(std::iter::repeat(0.0).take(block.len()));
            w2.push(0.0);
        } else {
            w1.extend(block.iter().map(|v| v / root));
            w2.push(root);
        }
    }
    TwoLayerGln::new(zeta.units, zeta.contexts, zeta.dim, w1, w2)
}

/// One independent linear predictor per reachable global context.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShallowGln {
    dim: usize,
    /// Sorted.
    keys: Vec<GlobalContext>,
    params: Vec<f64>,
}

impl ShallowGln {
    pub fn new(dim: usize, mut table: Vec<(GlobalContext, Vec<f64>)>) -> Result<Self> {
        table.sort_by(|a, b| a.0.cmp(&b.0));
        if table.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::InvalidShape("duplicate context in shallow table".into()));
        }
        let mut keys = Vec::with_capacity(table.len());
        let mut params = Vec::with_capacity(table.len() * dim);
        for (k, b) in table {
            check_dim(dim, &b)?;
            keys.push(k);
            params.extend(b);
        }
        Ok(Self { dim, keys, params })
    }

    /// Zero predictors for every context observed in `ds`.
    pub fn zeros_for(ds: &Dataset) -> Result<Self> {
        let mut keys: Vec<GlobalContext> = ds.contexts().ok_or(Error::MissingContexts)?.to_vec();
        keys.sort();
        keys.dedup();
        let params = vec![0.0; keys.len() * ds.dim()];
        Ok(Self {
            dim: ds.dim(),
            keys,
            params,
        })
    }

    pub fn keys(&self) -> &[GlobalContext] {
        &self.keys
    }

    fn slot(&self, ctx: &GlobalContext) -> Option<usize> {
        self.keys.binary_search(ctx).ok()
    }

    /// `None` for contexts never seen in training.
    pub fn beta(&self, ctx: &GlobalContext) -> Option<&[f64]> {
        self.slot(ctx).map(|k| &self.params[k * self.dim..(k + 1) * self.dim])
    }

    pub fn set_beta(&mut self, ctx: &GlobalContext, beta: &[f64]) -> Result<()> {
        check_dim(self.dim, beta)?;
        let k = self
            .slot(ctx)
            .ok_or_else(|| Error::ContextOutOfRange(ctx.label()))?;
        self.params[k * self.dim..(k + 1) * self.dim].copy_from_slice(beta);
        Ok(())
    }
}

impl GatedModel for ShallowGln {
    fn dim(&self) -> usize {
        self.dim
    }

    fn needs_contexts(&self) -> bool {
        true
    }

    fn degree(&self) -> u32 {
        1
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Unseen contexts score 0.
    fn score(&self, x: &[f64], ctx: Option<&GlobalContext>) -> Result<f64> {
        check_dim(self.dim, x)?;
        let ctx = ctx.ok_or(Error::MissingContexts)?;
        Ok(self.beta(ctx).map_or(0.0, |b| linalg::dot(b, x)))
    }

    fn loss_and_grad(&self, ds: &Dataset, loss: LossKind) -> Result<(f64, Vec<f64>)> {
        self.check_dataset(ds)?;
        let ctx = ds.contexts().ok_or(Error::MissingContexts)?;
        let slots: Vec<Option<usize>> = ctx.iter().map(|g| self.slot(g)).collect();
        let scores: Vec<f64> = (0..ds.len())
            .map(|i| {
                slots[i].map_or(0.0, |k| {
                    linalg::dot(&self.params[k * self.dim..(k + 1) * self.dim], ds.x(i))
                })
            })
            .collect();
        let (value, coef) = loss_terms(ds, &scores, loss);
        let mut grad = vec![0.0; self.params.len()];
        par::for_each_chunk(&mut grad, self.dim, |k, out| {
            for i in 0..ds.len() {
                if slots[i] == Some(k) {
                    linalg::axpy(coef[i], ds.x(i), out);
                }
            }
        });
        Ok((value, grad))
    }
}

/// Two-layer ReLU network `f(x) = Σ_h a_h max(<w_h, x>, 0)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReluNet {
    hidden: usize,
    dim: usize,
    /// `[w (H·D) | readout (H)]`
    params: Vec<f64>,
}

impl ReluNet {
    pub fn new(hidden: usize, dim: usize, w: Vec<f64>, readout: Vec<f64>) -> Result<Self> {
        if w.len() != hidden * dim || readout.len() != hidden {
            return Err(Error::InvalidShape(format!(
                "ReLU weights {}+{} for H={hidden} D={dim}",
                w.len(),
                readout.len()
            )));
        }
        if w.iter().chain(&readout).any(|v| !v.is_finite()) {
            return Err(Error::InvalidShape("non-finite weight".into()));
        }
        let mut params = w;
        params.extend(readout);
        Ok(Self { hidden, dim, params })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn unit(&self, h: usize) -> &[f64] {
        &self.params[h * self.dim..(h + 1) * self.dim]
    }

    pub fn readout(&self) -> &[f64] {
        &self.params[self.hidden * self.dim..]
    }

    /// Hidden activations `max(<w_h, x>, 0)`.
    pub fn hidden_activations(&self, x: &[f64]) -> Vec<f64> {
        (0..self.hidden)
            .map(|h| linalg::dot(self.unit(h), x).max(0.0))
            .collect()
    }

    /// Same first layer with a different readout.
    pub fn with_readout(&self, readout: Vec<f64>) -> Result<Self> {
        ReluNet::new(
            self.hidden,
            self.dim,
            self.params[..self.hidden * self.dim].to_vec(),
            readout,
        )
    }

    /// FReLU snapshot `ζ_h = a_h w_h`; with the current gates it reproduces the net.
    pub fn freeze(&self) -> ZetaParam {
        let mut values = Vec::with_capacity(self.hidden * self.dim);
        for h in 0..self.hidden {
            let a = self.readout()[h];
            values.extend(self.unit(h).iter().map(|v| a * v));
        }
        ZetaParam::frelu(self.hidden, self.dim, values).expect("shape by construction")
    }

    pub fn balance_gap(&self) -> f64 {
        (0..self.hidden)
            .map(|h| (self.readout()[h].abs() - linalg::norm2(self.unit(h))).abs())
            .fold(0.0, f64::max)
    }
}

impl GatedModel for ReluNet {
    fn dim(&self) -> usize {
        self.dim
    }

    fn needs_contexts(&self) -> bool {
        false
    }

    fn degree(&self) -> u32 {
        2
    }

    fn params(&self) -> &[f64] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn score(&self, x: &[f64], _ctx: Option<&GlobalContext>) -> Result<f64> {
        check_dim(self.dim, x)?;
        let a = self.readout();
        Ok((0..self.hidden)
            .map(|h| a[h] * linalg::dot(self.unit(h), x).max(0.0))
            .sum())
    }

    fn loss_and_grad(&self, ds: &Dataset, loss: LossKind) -> Result<(f64, Vec<f64>)> {
        self.check_dataset(ds)?;
        let (h_n, d, n) = (self.hidden, self.dim, ds.len());
        let mut pre = vec![0.0; n * h_n];
        par::for_each_chunk(&mut pre, h_n, |i, row| {
            for (h, p) in row.iter_mut().enumerate() {
                *p = linalg::dot(self.unit(h), ds.x(i));
            }
        });
        let a = self.readout();
        let scores: Vec<f64> = pre
            .chunks(h_n)
            .map(|row| row.iter().zip(a).map(|(p, ah)| ah * p.max(0.0)).sum())
            .collect();
        let (value, coef) = loss_terms(ds, &scores, loss);
        let mut grad = vec![0.0; self.params.len()];
        let (gw, ga) = grad.split_at_mut(h_n * d);
        par::for_each_chunk(gw, d, |h, out| {
            for i in 0..n {
                if pre[i * h_n + h] > 0.0 {
                    linalg::axpy(a[h] * coef[i], ds.x(i), out);
                }
            }
        });
        par::for_each_chunk(ga, 1, |h, out| {
            out[0] = (0..n).map(|i| coef[i] * pre[i * h_n + h].max(0.0)).sum();
        });
        Ok((value, grad))
    }
}

/// A single linear predictor `f(x) = <β, x>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub beta: Vec<f64>,
}

impl GatedModel for LinearModel {
    fn dim(&self) -> usize {
        self.beta.len()
    }

    fn needs_contexts(&self) -> bool {
        false
    }

    fn degree(&self) -> u32 {
        1
    }

    fn params(&self) -> &[f64] {
        &self.beta
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.beta
    }

    fn score(&self, x: &[f64], _ctx: Option<&GlobalContext>) -> Result<f64> {
        check_dim(self.beta.len(), x)?;
        Ok(linalg::dot(&self.beta, x))
    }

    fn loss_and_grad(&self, ds: &Dataset, loss: LossKind) -> Result<(f64, Vec<f64>)> {
        self.check_dataset(ds)?;
        let scores: Vec<f64> = (0..ds.len()).map(|i| linalg::dot(&self.beta, ds.x(i))).collect();
        let (value, coef) = loss_terms(ds, &scores, loss);
        let mut grad = vec![0.0; self.beta.len()];
        for (i, c) in coef.iter().enumerate() {
            linalg::axpy(*c, ds.x(i), &mut grad);
        }
        Ok((value, grad))
    }
}

/// Any model family, for checkpoints and trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum Model {
    Gln(TwoLayerGln),
    Zeta(ZetaParam),
    Shallow(ShallowGln),
    Relu(ReluNet),
    Linear(LinearModel),
}

macro_rules! delegate {
    ($self:ident, $m:ident => $e:expr) => {
        match $self {
            Model::Gln($m) => $e,
            Model::Zeta($m) => $e,
            Model::Shallow($m) => $e,
            Model::Relu($m) => $e,
            Model::Linear($m) => $e,
        }
    };
}

impl Model {
    pub fn family(&self) -> &'static str {
        match self {
            Model::Gln(_) => "gln",
            Model::Zeta(z) if z.kind == ZetaKind::Frelu => "frelu",
            Model::Zeta(_) => "gln-zeta",
            Model::Shallow(_) => "shallow",
            Model::Relu(_) => "relu",
            Model::Linear(_) => "linear",
        }
    }

    /// Balancedness gap for two-layer families.
    pub fn balance_gap(&self) -> Option<f64> {
        match self {
            Model::Gln(m) => Some(m.balance_gap()),
            Model::Relu(m) => Some(m.balance_gap()),
            _ => None,
        }
    }
}

impl GatedModel for Model {
    fn dim(&self) -> usize {
        delegate!(self, m => m.dim())
    }

    fn needs_contexts(&self) -> bool {
        delegate!(self, m => m.needs_contexts())
    }

    fn degree(&self) -> u32 {
        delegate!(self, m => m.degree())
    }

    fn params(&self) -> &[f64] {
        delegate!(self, m => m.params())
    }

    fn params_mut(&mut self) -> &mut [f64] {
        delegate!(self, m => m.params_mut())
    }

    fn score(&self, x: &[f64], ctx: Option<&GlobalContext>) -> Result<f64> {
        delegate!(self, m => m.score(x, ctx))
    }

    fn loss_and_grad(&self, ds: &Dataset, loss: LossKind) -> Result<(f64, Vec<f64>)> {
        delegate!(self, m => m.loss_and_grad(ds, loss))
    }
}

/// Dense table of `β_γ` over all `C^H` global contexts of a two-layer GLN.
///
/// Index of `γ` is `Σ_h (γ_h − 1) C^h`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetaTable {
    pub units: usize,
    pub contexts: usize,
    pub dim: usize,
    pub betas: Vec<f64>,
}

pub fn context_count(units: usize, contexts: usize) -> Option<usize> {
    contexts.checked_pow(units as u32)
}

impl BetaTable {
    pub fn zeros(units: usize, contexts: usize, dim: usize) -> Result<Self> {
        let n = context_count(units, contexts)
            .filter(|&n| n <= BETA_TABLE_CAP)
            .ok_or(Error::TableTooLarge(contexts.saturating_pow(units as u32)))?;
        Ok(Self {
            units,
            contexts,
            dim,
            betas: vec![0.0; n * dim],
        })
    }

    pub fn len(&self) -> usize {
        self.betas.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.betas.is_empty()
    }

    pub fn index(&self, ctx: &GlobalContext) -> usize {
        let mut idx = 0;
        let mut radix = 1;
        for h in 0..self.units {
            idx += (ctx.get(h) as usize - 1) * radix;
            radix *= self.contexts;
        }
        idx
    }

    pub fn context_at(&self, mut idx: usize) -> GlobalContext {
        let mut v = Vec::with_capacity(self.units);
        for _ in 0..self.units {
            v.push((idx % self.contexts) as u32 + 1);
            idx /= self.contexts;
        }
        GlobalContext(v)
    }

    pub fn at(&self, idx: usize) -> &[f64] {
        &self.betas[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn at_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.betas[idx * self.dim..(idx + 1) * self.dim]
    }

    pub fn get(&self, ctx: &GlobalContext) -> &[f64] {
        self.at(self.index(ctx))
    }

    fn from_fn(units: usize, contexts: usize, dim: usize, f: impl Fn(&GlobalContext) -> Vec<f64>) -> Result<Self> {
        let mut t = Self::zeros(units, contexts, dim)?;
        for i in 0..t.len() {
            let g = t.context_at(i);
            t.at_mut(i).copy_from_slice(&f(&g));
        }
        Ok(t)
    }

    pub fn from_gln(model: &TwoLayerGln) -> Result<Self> {
        Self::from_fn(model.units, model.contexts, model.dim, |g| {
            model.beta(g).expect("in range")
        })
    }

    pub fn from_zeta(zeta: &ZetaParam) -> Result<Self> {
        if zeta.kind != ZetaKind::Gln {
            return Err(Error::InvalidShape("BetaTable needs a GLN ζ".into()));
        }
        Self::from_fn(zeta.units, zeta.contexts, zeta.dim, |g| {
            zeta.beta(g).expect("in range")
        })
    }

    /// `Σ_γ ‖β_γ‖²`
    pub fn l2_squared(&self) -> f64 {
        linalg::dot(&self.betas, &self.betas)
    }

    /// CSV `gamma_tuple,beta_0..beta_{D-1}`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gamma_tuple");
        for j in 0..self.dim {
            out.push_str(&format!(",beta_{j}"));
        }
        out.push('\n');
        for i in 0..self.len() {
            out.push_str(&self.context_at(i).label());
            for v in self.at(i) {
                out.push_str(&format!(",{v:.16e}"));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, contexts: usize) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let mut fields = line.split(',');
            let ctx = GlobalContext::parse_label(fields.next().unwrap_or(""))?;
            let beta = fields
                .map(|f| f.trim().parse::<f64>().map_err(|e| Error::Parse(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            rows.push((ctx, beta));
        }
        let (first, _) = rows.first().ok_or_else(|| Error::Parse("empty table".into()))?;
        let units = first.len();
        let dim = rows[0].1.len();
        let mut t = Self::zeros(units, contexts, dim)?;
        if rows.len() != t.len() {
            return Err(Error::Parse(format!("expected {} rows, found {}", t.len(), rows.len())));
        }
        for (ctx, beta) in rows {
            check_context(&ctx, units, 1..=contexts as u32)?;
            check_dim(dim, &beta)?;
            let i = t.index(&ctx);
            t.at_mut(i).copy_from_slice(&beta);
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example_gln() -> TwoLayerGln {
        // w1 = [[2,3],[5,7]] with D = 1, w2 = (1, −1)
        TwoLayerGln::new(2, 2, 1, vec![2.0, 3.0, 5.0, 7.0], vec![1.0, -1.0]).unwrap()
    }

    #[test]
    fn beta_hand_example() {
        let m = example_gln();
        let g = GlobalContext(vec![1, 2]);
        assert_eq!(m.beta(&g).unwrap(), vec![-5.0]);
        assert_eq!(m.score(&[3.0], Some(&g)).unwrap(), -15.0);
        assert!(matches!(
            m.beta(&GlobalContext(vec![1, 3])),
            Err(Error::ContextOutOfRange(_))
        ));
    }

    #[test]
    fn zero_readout_annihilates() {
        let mut m = example_gln();
        m.w2_mut().iter_mut().for_each(|v| *v = 0.0);
        let t = BetaTable::from_gln(&m).unwrap();
        assert!(t.betas.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn quadratic_homogeneity() {
        let m = example_gln();
        let mut scaled = m.clone();
        scaled.params_mut().iter_mut().for_each(|v| *v *= 3.0);
        let g = GlobalContext(vec![2, 1]);
        let a = m.score(&[1.5], Some(&g)).unwrap();
        let b = scaled.score(&[1.5], Some(&g)).unwrap();
        assert!((b - 9.0 * a).abs() < 1e-12);
    }

    #[test]
    fn loss_values_at_zero_margin() {
        assert_eq!(LossKind::Exponential.value(0.0), 1.0);
        assert_eq!(LossKind::Exponential.derivative(0.0), -1.0);
        assert!((LossKind::Logistic.value(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(LossKind::Logistic.derivative(0.0), -0.5);
        // no overflow in the tails
        assert!(LossKind::Logistic.value(-800.0).is_finite());
        assert!(LossKind::Logistic.value(800.0) >= 0.0);
        assert!("hinge".parse::<LossKind>().is_err());
    }

    #[test]
    fn zeta_round_trip_and_balance() {
        // ζ_1 with norm 4
        let z = ZetaParam::gln(2, 2, 2, vec![0.0, 4.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let w = zeta_to_w(&z).unwrap();
        assert_eq!(w.w2()[0], 2.0);
        assert!((linalg::norm2(w.unit_block(0)) - 2.0).abs() < 1e-15);
        assert_eq!(w.w2()[1], 0.0);
        assert!(w.unit_block(1).iter().all(|&v| v == 0.0));
        assert!(w.balance_gap() < 1e-15);
        let back = w_to_zeta(&w);
        for (a, b) in back.values.iter().zip(&z.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn frelu_closed_gates_score_zero() {
        let z = ZetaParam::frelu(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(z.score(&[5.0, -1.0], Some(&GlobalContext(vec![0, 0]))).unwrap(), 0.0);
        assert_eq!(z.score(&[1.0, 1.0], Some(&GlobalContext(vec![0, 1]))).unwrap(), 7.0);
    }

    #[test]
    fn beta_table_csv_round_trip() {
        let t = BetaTable::from_gln(&example_gln()).unwrap();
        let back = BetaTable::from_csv(&t.to_csv(), 2).unwrap();
        assert_eq!(t, back);
        assert!(matches!(BetaTable::zeros(13, 2, 1), Err(Error::TableTooLarge(_))));
    }

    #[test]
    fn gln_requires_contexts() {
        let ds = Dataset::new(1, vec![1.0], vec![1.0]).unwrap();
        assert!(matches!(
            example_gln().loss_and_grad(&ds, LossKind::Logistic),
            Err(Error::MissingContexts)
        ));
    }
}
