//! Halfspace context functions and ReLU-derived gates.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::linalg;
use crate::models::ReluNet;
use crate::par;

/// Standard deviation of sampled hyperplane normals.
pub const NORMAL_STD: f64 = 36.0;
/// Standard deviation of sampled cutoffs.
pub const CUTOFF_STD: f64 = 9.0;

/// Fires iff `normal·x − cutoff ≥ 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HalfspaceGate {
    pub normal: Vec<f64>,
    pub cutoff: f64,
}

impl HalfspaceGate {
    pub fn fires(&self, x: &[f64]) -> bool {
        linalg::dot(&self.normal, x) - self.cutoff >= 0.0
    }
}

/// Per-unit local contexts, one entry per hidden unit.
///
/// For gated linear networks the entries are 1-based context indices in
/// `1..=C`; for frozen-gate ReLU networks they are gate values in `{0, 1}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GlobalContext(pub Vec<u32>);

impl GlobalContext {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, h: usize) -> u32 {
        self.0[h]
    }

    /// `1-2-1` style label used in CSV files.
    pub fn label(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(|v| v.to_string()).collect();
        parts.join("-")
    }

    pub fn parse_label(s: &str) -> Result<Self> {
        s.split('-')
            .map(|p| {
                p.trim()
                    .parse::<u32>()
                    .map_err(|e| Error::Parse(format!("context `{s}`: {e}")))
            })
            .collect::<Result<Vec<_>>>()
            .map(GlobalContext)
    }
}

/// A bank of halfspace gates; unit `h` owns `log2(C)` gates whose joint
/// pattern selects one of its `C` local contexts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextFunction {
    pub units: usize,
    pub contexts: usize,
    pub dim: usize,
    /// `units × gates_per_unit`, unit-major.
    pub gates: Vec<HalfspaceGate>,
}

fn gates_for(contexts: usize) -> Result<usize> {
    if contexts < 2 || !contexts.is_power_of_two() {
        return Err(Error::ContextsNotPowerOfTwo(contexts));
    }
    Ok(contexts.trailing_zeros() as usize)
}

/// Midpoint between the ⌈N/2⌉-th and (⌈N/2⌉+1)-th order statistics.
pub fn median_cutoff(projections: &[f64]) -> f64 {
    let mut sorted = projections.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len();
    if n == 0 {
        return 0.0;
    }
    let k = n.div_ceil(2);
    if k >= n {
        return sorted[n - 1];
    }
    0.5 * (sorted[k - 1] + sorted[k])
}

/// Samples normals from N(0, 36²) and cutoffs from N(0, 9²). With `median`,
/// each cutoff is moved so the gate splits `data` in half.
pub fn sample_contexts(
    dim: usize,
    units: usize,
    contexts: usize,
    data: Option<&Dataset>,
    median: bool,
    seed: u64,
) -> Result<ContextFunction> {
    let per_unit = gates_for(contexts)?;
    if median && data.is_none() {
        return Err(Error::MedianWithoutData);
    }
    if let Some(ds) = data {
        if ds.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: ds.dim(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal_dist = Normal::new(0.0, NORMAL_STD).expect("valid std");
    let cutoff_dist = Normal::new(0.0, CUTOFF_STD).expect("valid std");
    let mut gates = Vec::with_capacity(units * per_unit);
    for _ in 0..units * per_unit {
        let mut normal: Vec<f64> = (0..dim).map(|_| rng.sample(normal_dist)).collect();
        if normal.iter().all(|&v| v == 0.0) {
            normal[0] = 1.0;
        }
        let cutoff = rng.sample(cutoff_dist);
        gates.push(HalfspaceGate { normal, cutoff });
    }
    if median {
        let ds = data.expect("checked above");
        let cutoffs = par::map_slice(&gates, |g| {
            let proj: Vec<f64> = (0..ds.len()).map(|n| linalg::dot(&g.normal, ds.x(n))).collect();
            median_cutoff(&proj)
        });
        for (g, c) in gates.iter_mut().zip(cutoffs) {
            g.cutoff = c;
        }
    }
    Ok(ContextFunction {
        units,
        contexts,
        dim,
        gates,
    })
}

impl ContextFunction {
    pub fn gates_per_unit(&self) -> usize {
        self.contexts.trailing_zeros() as usize
    }

    /// Local context of unit `h`: `1 + Σ_k 2^k · gate_k`.
    pub fn local_context(&self, h: usize, x: &[f64]) -> u32 {
        let k = self.gates_per_unit();
        let mut idx = 1u32;
        for (bit, g) in self.gates[h * k..(h + 1) * k].iter().enumerate() {
            if g.fires(x) {
                idx += 1 << bit;
            }
        }
        idx
    }

    pub fn assign(&self, x: &[f64]) -> Result<GlobalContext> {
        if x.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        Ok(GlobalContext(
            (0..self.units).map(|h| self.local_context(h, x)).collect(),
        ))
    }

    /// Plain-text form: one line per gate, `unit_index, cutoff, normal…`,
    /// 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "# units={} contexts={} dim={}\n",
            self.units, self.contexts, self.dim
        );
        let k = self.gates_per_unit();
        for (i, g) in self.gates.iter().enumerate() {
            let _ = write!(out, "{}, {:.16e}", i / k, g.cutoff);
            for v in &g.normal {
                let _ = write!(out, ", {v:.16e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, HalfspaceGate)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() < 3 {
                return Err(Error::Parse(format!("line {}: too few fields", lineno + 1)));
            }
            let bad = |e: &dyn std::fmt::Display| Error::Parse(format!("line {}: {e}", lineno + 1));
            let unit: usize = fields[0].parse().map_err(|e| bad(&e))?;
            let cutoff: f64 = fields[1].parse().map_err(|e| bad(&e))?;
            let normal = fields[2..]
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| bad(&e)))
                .collect::<Result<Vec<_>>>()?;
            rows.push((unit, HalfspaceGate { normal, cutoff }));
        }
        let units = rows.iter().map(|r| r.0 + 1).max().unwrap_or(0);
        if units == 0 {
            return Err(Error::Parse("no gates".into()));
        }
        let per_unit = rows.len() / units;
        if per_unit * units != rows.len() || (0..units).any(|h| rows.iter().filter(|r| r.0 == h).count() != per_unit) {
            return Err(Error::Parse("units have differing gate counts".into()));
        }
        let dim = rows[0].1.normal.len();
        if rows.iter().any(|r| r.1.normal.len() != dim) {
            return Err(Error::Parse("gates have differing dimensions".into()));
        }
        rows.sort_by_key(|r| r.0);
        Ok(Self {
            units,
            contexts: 1 << per_unit,
            dim,
            gates: rows.into_iter().map(|r| r.1).collect(),
        })
    }
}

/// Gate `h` is open iff the pre-activation of hidden unit `h` is strictly positive.
pub fn relu_gates(net: &ReluNet, x: &[f64]) -> Result<GlobalContext> {
    if x.len() != net.dim() {
        return Err(Error::DimensionMismatch {
            expected: net.dim(),
            got: x.len(),
        });
    }
    Ok(GlobalContext(
        (0..net.hidden())
            .map(|h| u32::from(linalg::dot(net.unit(h), x) > 0.0))
            .collect(),
    ))
}

/// Where a model gets its per-input contexts from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ContextSource {
    /// No contexts (plain linear models, ReLU networks).
    None,
    Halfspaces(ContextFunction),
    /// Gates frozen from a ReLU network's first layer.
    ReluGates(ReluNet),
}

impl ContextSource {
    pub fn assign(&self, x: &[f64]) -> Result<Option<GlobalContext>> {
        match self {
            ContextSource::None => Ok(None),
            ContextSource::Halfspaces(cf) => cf.assign(x).map(Some),
            ContextSource::ReluGates(net) => relu_gates(net, x).map(Some),
        }
    }

    /// Returns the dataset with a context attached to every sample.
    pub fn annotate(&self, ds: &Dataset) -> Result<Dataset> {
        if matches!(self, ContextSource::None) {
            return Ok(ds.clone().without_contexts());
        }
        let ctx = par::map_range(ds.len(), |n| self.assign(ds.x(n)));
        let ctx = ctx
            .into_iter()
            .map(|c| c.map(|c| c.expect("source has contexts")))
            .collect::<Result<Vec<_>>>()?;
        ds.clone().with_contexts(ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_gate(normal: Vec<f64>, cutoff: f64) -> ContextFunction {
        ContextFunction {
            units: 1,
            contexts: 2,
            dim: normal.len(),
            gates: vec![HalfspaceGate { normal, cutoff }],
        }
    }

    #[test]
    fn gate_fires_on_nonnegative_side() {
        let cf = one_gate(vec![1.0, 0.0], 0.5);
        assert_eq!(cf.assign(&[1.0, 0.0]).unwrap(), GlobalContext(vec![2]));
        assert_eq!(cf.assign(&[0.0, 0.0]).unwrap(), GlobalContext(vec![1]));
        // boundary: 0.5 − 0.5 = 0 fires
        assert_eq!(cf.assign(&[0.5, 3.0]).unwrap(), GlobalContext(vec![2]));
        assert!(matches!(
            cf.assign(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn median_of_four() {
        let c = median_cutoff(&[4.0, 1.0, 3.0, 2.0]);
        assert_eq!(c, 2.5);
        let above = [1.0, 2.0, 3.0, 4.0].iter().filter(|&&p| p - c >= 0.0).count();
        assert_eq!(above, 2);
    }

    #[test]
    fn composed_gates_cover_all_regions() {
        let cf = sample_contexts(3, 5, 4, None, false, 11).unwrap();
        assert_eq!(cf.gates.len(), 10);
        assert_eq!(cf.gates_per_unit(), 2);
        let cf2 = sample_contexts(3, 5, 2, None, false, 11).unwrap();
        assert_eq!(cf2.gates.len(), 5);
        let g = cf.assign(&[0.3, -1.0, 2.0]).unwrap();
        assert!(g.0.iter().all(|&c| (1..=4).contains(&c)));
    }

    #[test]
    fn encoding_is_binary() {
        let cf = ContextFunction {
            units: 1,
            contexts: 4,
            dim: 2,
            gates: vec![
                HalfspaceGate { normal: vec![1.0, 0.0], cutoff: 0.0 },
                HalfspaceGate { normal: vec![0.0, 1.0], cutoff: 0.0 },
            ],
        };
        assert_eq!(cf.assign(&[-1.0, -1.0]).unwrap().0, vec![1]);
        assert_eq!(cf.assign(&[1.0, -1.0]).unwrap().0, vec![2]);
        assert_eq!(cf.assign(&[-1.0, 1.0]).unwrap().0, vec![3]);
        assert_eq!(cf.assign(&[1.0, 1.0]).unwrap().0, vec![4]);
    }

    #[test]
    fn sampling_errors_and_determinism() {
        assert!(matches!(
            sample_contexts(2, 1, 3, None, false, 0),
            Err(Error::ContextsNotPowerOfTwo(3))
        ));
        assert!(matches!(
            sample_contexts(2, 1, 2, None, true, 0),
            Err(Error::MedianWithoutData)
        ));
        let a = sample_contexts(4, 3, 2, None, false, 5).unwrap();
        let b = sample_contexts(4, 3, 2, None, false, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn median_gates_balance_even_data() {
        let s = crate::data::gen_synthetic(40, 3, 0.1, 2);
        let cf = sample_contexts(3, 6, 2, Some(&s.dataset), true, 9).unwrap();
        for g in &cf.gates {
            let on = (0..40).filter(|&n| g.fires(s.dataset.x(n))).count();
            assert_eq!(on, 20);
        }
    }

    #[test]
    fn text_round_trip() {
        let cf = sample_contexts(3, 2, 4, None, false, 1).unwrap();
        let back = ContextFunction::from_text(&cf.to_text()).unwrap();
        assert_eq!(cf, back);
    }

    #[test]
    fn relu_gate_is_strict() {
        let net = ReluNet::new(1, 2, vec![1.0, 0.0], vec![1.0]).unwrap();
        assert_eq!(relu_gates(&net, &[2.0, 0.0]).unwrap().0, vec![1]);
        assert_eq!(relu_gates(&net, &[-2.0, 0.0]).unwrap().0, vec![0]);
        assert_eq!(relu_gates(&net, &[0.0, 5.0]).unwrap().0, vec![0]);
    }
}
