//! Gradient defenses: dual gradient pruning, top-k pruning, Gaussian
//! noise, per-user error feedback, and the aligned-DGP (ADGP) protocol.
//!
//! All pruning is per tensor: each weight matrix and bias vector is
//! sorted and pruned independently, which also removes the label-leaking
//! last-layer rows. Removal counts use floor; ties break toward the
//! lower flat index so replays are exact.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{DgpError, Result};
use crate::model::GradientSet;
use crate::numerics::{Rng, Tensor};

/// Dual gradient pruning configuration: remove the top `k1` and bottom
/// `k2` fractions (by magnitude) of each tensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub k1: f64,
    pub k2: f64,
}

impl DgpConfig {
    pub fn new(k1: f64, k2: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&k1) || !(0.0..1.0).contains(&k2) {
            return Err(DgpError::InvalidConfig(format!(
                "k1 and k2 must be in [0,1), got k1={k1}, k2={k2}"
            )));
        }
        if k1 + k2 >= 1.0 {
            return Err(DgpError::InvalidConfig(format!(
                "k1 + k2 must be < 1 (retained band would be empty), got {}",
                k1 + k2
            )));
        }
        Ok(DgpConfig { k1, k2 })
    }

    /// The privacy/accuracy trade-off ratio `p = k1/k2`.
    pub fn p(&self) -> Result<f64> {
        if self.k2 <= 0.0 {
            return Err(DgpError::InvalidConfig("p = k1/k2 requires k2 > 0".into()));
        }
        Ok(self.k1 / self.k2)
    }
}

/// One pruned tensor: strictly increasing in-range indices plus values,
/// no explicit zeros stored by the pruners. Values stay f64 internally;
/// the 32-bit wire width only enters byte accounting and file dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseTensor {
    pub shape: Vec<usize>,
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseTensor {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn dense_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn densify(&self) -> Tensor {
        let mut t = Tensor::zeros(self.shape.clone());
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            t.data_mut()[i as usize] = v;
        }
        t
    }
}

/// Pruned gradient set plus any per-tensor warnings raised while pruning.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SparseGradient {
    tensors: BTreeMap<String, SparseTensor>,
    warnings: Vec<String>,
}

impl SparseGradient {
    pub fn insert(&mut self, id: impl Into<String>, tensor: SparseTensor) {
        self.tensors.insert(id.into(), tensor);
    }

    pub fn get(&self, id: &str) -> Option<&SparseTensor> {
        self.tensors.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &SparseTensor)> {
        self.tensors.iter()
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn push_warning(&mut self, w: String) {
        self.warnings.push(w);
    }

    pub fn total_nnz(&self) -> usize {
        self.tensors.values().map(SparseTensor::nnz).sum()
    }

    pub fn densify(&self) -> GradientSet {
        let mut out = GradientSet::new();
        for (id, t) in &self.tensors {
            out.insert(id.clone(), t.densify());
        }
        out
    }

    /// Every entry of a dense gradient set as an explicit sparse one.
    pub fn from_dense(grads: &GradientSet) -> SparseGradient {
        let mut out = SparseGradient::default();
        for (id, t) in grads.iter() {
            out.insert(
                id.clone(),
                SparseTensor {
                    shape: t.shape().to_vec(),
                    indices: (0..t.len() as u32).collect(),
                    values: t.data().to_vec(),
                },
            );
        }
        out
    }

    /// Binary wire encoding: per tensor, id bytes (u16 length prefix),
    /// u32 LE entry count, then (u32 LE index, f32 LE value) pairs.
    pub fn encode_wire(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for (id, t) in &self.tensors {
            buf.extend_from_slice(&(id.len() as u16).to_le_bytes());
            buf.extend_from_slice(id.as_bytes());
            buf.extend_from_slice(&(t.nnz() as u32).to_le_bytes());
            for (&i, &v) in t.indices.iter().zip(&t.values) {
                buf.extend_from_slice(&i.to_le_bytes());
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        buf
    }
}

/// Per-user accumulated error-feedback residual; shapes mirror the
/// gradient set, initialized to zero at round 0.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorState {
    residual: GradientSet,
}

impl ErrorState {
    pub fn zeros_like(grads: &GradientSet) -> Self {
        ErrorState { residual: grads.zeros_like() }
    }

    pub fn residual(&self) -> &GradientSet {
        &self.residual
    }

    pub fn norm_sq(&self) -> f64 {
        self.residual.norm_sq()
    }
}

/// Per-tensor bitmask over flat parameter indices; the binary location
/// matrix broadcast by the ADGP leader.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationSet {
    masks: BTreeMap<String, (usize, Vec<u64>)>,
}

impl LocationSet {
    pub fn empty() -> Self {
        LocationSet { masks: BTreeMap::new() }
    }

    pub fn insert_tensor(&mut self, id: impl Into<String>, len: usize, indices: &[u32]) {
        let words = vec![0u64; len.div_ceil(64)];
        let mut entry = (len, words);
        for &i in indices {
            entry.1[i as usize / 64] |= 1 << (i as usize % 64);
        }
        self.masks.insert(id.into(), entry);
    }

    pub fn contains(&self, id: &str, index: u32) -> bool {
        self.masks
            .get(id)
            .map(|(_, words)| words[index as usize / 64] & (1 << (index as usize % 64)) != 0)
            .unwrap_or(false)
    }

    pub fn popcount(&self) -> usize {
        self.masks
            .values()
            .map(|(_, words)| words.iter().map(|w| w.count_ones() as usize).sum::<usize>())
            .sum()
    }

    pub fn popcount_tensor(&self, id: &str) -> usize {
        self.masks
            .get(id)
            .map(|(_, words)| words.iter().map(|w| w.count_ones() as usize).sum())
            .unwrap_or(0)
    }

    /// Bytes needed to transmit the bitmask itself.
    pub fn bitmask_bytes(&self) -> usize {
        self.masks.values().map(|(len, _)| len.div_ceil(8)).sum()
    }
}

/// Flat indices sorted by descending |value|, ties toward lower index.
fn order_desc_by_magnitude(values: &[f64]) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    idx.sort_by(|&a, &b| {
        let (ma, mb) = (values[a as usize].abs(), values[b as usize].abs());
        mb.partial_cmp(&ma).unwrap().then(a.cmp(&b))
    });
    idx
}

/// Dual gradient pruning: per tensor, remove the `floor(k1*n)` largest
/// and `floor(k2*n)` smallest magnitudes; retain the middle band.
pub fn dgp_prune(grads: &GradientSet, cfg: &DgpConfig) -> SparseGradient {
    let mut out = SparseGradient::default();
    for (id, t) in grads.iter() {
        let n = t.len();
        let n_top = (cfg.k1 * n as f64).floor() as usize;
        let n_bot = (cfg.k2 * n as f64).floor() as usize;
        if n_top + n_bot >= n {
            out.push_warning(format!(
                "tensor {id}: removal counts {n_top}+{n_bot} cover all {n} entries; transmitting nothing"
            ));
            out.insert(
                id.clone(),
                SparseTensor { shape: t.shape().to_vec(), indices: Vec::new(), values: Vec::new() },
            );
            continue;
        }
        let order = order_desc_by_magnitude(t.data());
        // Remove the top band first, then the bottom band from what is left.
        let mut band: Vec<u32> = order[n_top..].to_vec();
        band.sort_by(|&a, &b| {
            let (ma, mb) = (t.data()[a as usize].abs(), t.data()[b as usize].abs());
            ma.partial_cmp(&mb).unwrap().then(a.cmp(&b))
        });
        let mut retained: Vec<u32> = band[n_bot..].to_vec();
        retained.sort_unstable();
        let values = retained.iter().map(|&i| t.data()[i as usize]).collect();
        out.insert(
            id.clone(),
            SparseTensor { shape: t.shape().to_vec(), indices: retained, values },
        );
    }
    out
}

/// Top-k pruning: keep the `ceil(k*n)` largest magnitudes per tensor.
pub fn topk_prune(grads: &GradientSet, k: f64) -> Result<SparseGradient> {
    if k <= 0.0 || k > 1.0 {
        return Err(DgpError::InvalidConfig(format!("top-k fraction must be in (0,1], got {k}")));
    }
    let mut out = SparseGradient::default();
    for (id, t) in grads.iter() {
        let n = t.len();
        let keep = ((k * n as f64).ceil() as usize).min(n);
        let order = order_desc_by_magnitude(t.data());
        let mut retained: Vec<u32> = order[..keep].to_vec();
        retained.sort_unstable();
        let values = retained.iter().map(|&i| t.data()[i as usize]).collect();
        out.insert(
            id.clone(),
            SparseTensor { shape: t.shape().to_vec(), indices: retained, values },
        );
    }
    Ok(out)
}

/// Gaussian mechanism: `grads + N(0, std^2)` per element.
pub fn dp_noise(grads: &GradientSet, std: f64, rng: &mut Rng) -> Result<GradientSet> {
    if std < 0.0 {
        return Err(DgpError::InvalidArgument(format!("noise std must be >= 0, got {std}")));
    }
    let mut out = GradientSet::new();
    for (id, t) in grads.iter() {
        let mut noisy = t.clone();
        for v in noisy.data_mut() {
            *v += std * rng.normal();
        }
        out.insert(id.clone(), noisy);
    }
    Ok(out)
}

/// Pruning rule applied inside an error-feedback round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneRule {
    Identity,
    TopK(f64),
    Dgp(DgpConfig),
}

impl PruneRule {
    pub fn apply(&self, grads: &GradientSet) -> Result<SparseGradient> {
        match self {
            PruneRule::Identity => Ok(SparseGradient::from_dense(grads)),
            PruneRule::TopK(k) => topk_prune(grads, *k),
            PruneRule::Dgp(cfg) => Ok(dgp_prune(grads, cfg)),
        }
    }
}

/// One error-feedback round: `P = grad + e`, `wire = defense(P)`,
/// `e' = P - densify(wire)` exactly.
pub fn ef_round(
    user_grad: &GradientSet,
    state: &ErrorState,
    defense: &PruneRule,
) -> Result<(SparseGradient, ErrorState)> {
    let compensated = user_grad.add(state.residual())?;
    let wire = defense.apply(&compensated)?;
    let residual = compensated.sub(&wire.densify())?;
    Ok((wire, ErrorState { residual }))
}

/// One ADGP round over all users.
///
/// A leader chosen uniformly from `users` publishes the top-`2k` location
/// set of its own error-compensated gradient. Every user then removes its
/// own top-`k1` entries and transmits the `floor(k*n)` largest remaining
/// entries whose locations lie in the broadcast set. Error states update
/// against what was actually transmitted.
pub fn adgp_round(
    users: &[(GradientSet, ErrorState)],
    k: f64,
    cfg: &DgpConfig,
    rng: &mut Rng,
) -> Result<(Vec<SparseGradient>, Vec<ErrorState>, LocationSet)> {
    if users.is_empty() {
        return Err(DgpError::InvalidArgument("ADGP needs at least one user".into()));
    }
    if cfg.k1 >= k {
        return Err(DgpError::InvalidConfig(format!(
            "ADGP requires k1 < k, got k1={} k={k}",
            cfg.k1
        )));
    }
    if 2.0 * k > 1.0 {
        return Err(DgpError::InvalidConfig(format!("ADGP requires 2k <= 1, got k={k}")));
    }

    let compensated: Vec<GradientSet> = users
        .iter()
        .map(|(g, e)| g.add(e.residual()))
        .collect::<Result<_>>()?;

    let leader = rng.gen_range(users.len());
    let mut location_set = LocationSet::empty();
    for (id, t) in compensated[leader].iter() {
        let n = t.len();
        let take = (2.0 * k * n as f64).floor() as usize;
        let order = order_desc_by_magnitude(t.data());
        location_set.insert_tensor(id.clone(), n, &order[..take.min(n)]);
    }

    let mut wires = Vec::with_capacity(users.len());
    let mut states = Vec::with_capacity(users.len());
    for p in &compensated {
        let mut wire = SparseGradient::default();
        for (id, t) in p.iter() {
            let n = t.len();
            let n_top = (cfg.k1 * n as f64).floor() as usize;
            let budget = (k * n as f64).floor() as usize;
            let order = order_desc_by_magnitude(t.data());
            let mut retained: Vec<u32> = order[n_top..]
                .iter()
                .filter(|&&i| location_set.contains(id, i))
                .take(budget)
                .copied()
                .collect();
            retained.sort_unstable();
            let values = retained.iter().map(|&i| t.data()[i as usize]).collect();
            wire.insert(
                id.clone(),
                SparseTensor { shape: t.shape().to_vec(), indices: retained, values },
            );
        }
        let residual = p.sub(&wire.densify())?;
        states.push(ErrorState { residual });
        wires.push(wire);
    }
    Ok((wires, states, location_set))
}
