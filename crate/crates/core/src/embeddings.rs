//! Embedding storage and the gradient-descent kernel that fits shared
//! interaction embeddings against item embeddings.
//!
//! The per-partition objective is
//!
//! ```text
//!   Σ_pos softplus(-s_pos·v_i) + Σ_neg softplus(-s_neg·v_i)
//! + λ_bpr Σ_records Σ_negatives softplus(-(s·v_i - s·v_j))
//! + λ_s (|s_pos|² + |s_neg|²) + λ_v Σ_touched |v|²
//! ```
//!
//! where `softplus(-x) = -ln σ(x)`.

use std::collections::BTreeSet;

use rand::distributions::Uniform;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttrSet, Dataset, InteractionRecord, ItemId};
use crate::error::EmbeddingError;
use crate::seed::mix_seed;

pub type DenseVector = Vec<f64>;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// The item embedding matrix V (n × d), shared by every tree of a forest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbeddingTable {
    dim: usize,
    data: Vec<f64>,
    pub frozen: bool,
}

impl ItemEmbeddingTable {
    pub fn zeros(items: usize, dim: usize) -> Self {
        ItemEmbeddingTable {
            dim,
            data: vec![0.0; items * dim],
            frozen: false,
        }
    }

    /// Entries drawn uniformly from `[-scale, scale)`.
    pub fn random(items: usize, dim: usize, scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = if scale > 0.0 {
            let dist = Uniform::new(-scale, scale);
            (0..items * dim).map(|_| rng.sample(dist)).collect()
        } else {
            vec![0.0; items * dim]
        };
        ItemEmbeddingTable {
            dim,
            data,
            frozen: false,
        }
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let dim = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == dim), "ragged embedding rows");
        ItemEmbeddingTable {
            dim,
            data: rows.into_iter().flatten().collect(),
            frozen: false,
        }
    }

    pub fn from_raw(items: usize, dim: usize, data: Vec<f64>, frozen: bool) -> Self {
        assert_eq!(data.len(), items * dim);
        ItemEmbeddingTable { dim, data, frozen }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, item: ItemId) -> &[f64] {
        let i = item as usize * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn row_mut(&mut self, item: ItemId) -> &mut [f64] {
        let i = item as usize * self.dim;
        &mut self.data[i..i + self.dim]
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }

    fn check_item(&self, item: ItemId) -> Result<(), EmbeddingError> {
        if (item as usize) < self.len() {
            Ok(())
        } else {
            Err(EmbeddingError::UnknownItem {
                item,
                rows: self.len(),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub epochs_search: usize,
    pub epochs_commit: usize,
    pub negatives_per_positive: usize,
    pub lambda_bpr: f64,
    pub lambda_s: f64,
    pub lambda_v: f64,
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 0.05,
            epochs_search: 20,
            epochs_commit: 100,
            negatives_per_positive: 5,
            lambda_bpr: 1e-3,
            lambda_s: 1e-2,
            lambda_v: 1e-4,
            init_scale: 0.01,
            seed: 0,
        }
    }
}

impl OptimizerConfig {
    pub fn penalties(&self) -> Penalties {
        Penalties {
            lambda_bpr: self.lambda_bpr,
            lambda_s: self.lambda_s,
            lambda_v: self.lambda_v,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Penalties {
    pub lambda_bpr: f64,
    pub lambda_s: f64,
    pub lambda_v: f64,
}

/// Sampled negatives D^neg for one interaction.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegativeSampleSet(pub Vec<ItemId>);

/// `Σ_records -ln σ(s·v_i)`; zero for an empty subset.
pub fn ce_loss<'a>(
    s: &[f64],
    table: &ItemEmbeddingTable,
    items: impl IntoIterator<Item = &'a ItemId>,
) -> Result<f64, EmbeddingError> {
    let mut total = 0.0;
    for &item in items {
        table.check_item(item)?;
        total += softplus(-dot(s, table.row(item)));
    }
    finite(total, "cross-entropy loss")
}

/// `Σ_negatives -ln σ(s·v_target - s·v_neg)`; zero without negatives.
pub fn bpr_loss(
    s: &[f64],
    table: &ItemEmbeddingTable,
    target: ItemId,
    negatives: &NegativeSampleSet,
) -> Result<f64, EmbeddingError> {
    table.check_item(target)?;
    let pos = dot(s, table.row(target));
    let mut total = 0.0;
    for &neg in &negatives.0 {
        if neg == target {
            return Err(EmbeddingError::TargetInNegatives { item: target });
        }
        table.check_item(neg)?;
        total += softplus(-(pos - dot(s, table.row(neg))));
    }
    finite(total, "BPR loss")
}

fn finite(x: f64, context: &'static str) -> Result<f64, EmbeddingError> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(EmbeddingError::NonFinite { context })
    }
}

/// One cross-entropy term and its gradients with respect to `s` and `v`.
pub fn ce_term_grad(s: &[f64], v: &[f64]) -> (f64, DenseVector, DenseVector) {
    let z = dot(s, v);
    let g = -sigmoid(-z);
    (
        softplus(-z),
        v.iter().map(|x| g * x).collect(),
        s.iter().map(|x| g * x).collect(),
    )
}

/// One BPR term and its gradients with respect to `s`, `v_target`, `v_neg`.
pub fn bpr_term_grad(
    s: &[f64],
    v_target: &[f64],
    v_neg: &[f64],
) -> (f64, DenseVector, DenseVector, DenseVector) {
    let margin = dot(s, v_target) - dot(s, v_neg);
    let g = -sigmoid(-margin);
    (
        softplus(-margin),
        v_target.iter().zip(v_neg).map(|(a, b)| g * (a - b)).collect(),
        s.iter().map(|x| g * x).collect(),
        s.iter().map(|x| -g * x).collect(),
    )
}

/// Draw up to `k` items the record's user never interacted with, uniformly
/// without replacement. Deterministic under `seed`.
pub fn sample_negatives(
    dataset: &Dataset,
    record: &InteractionRecord,
    k: usize,
    seed: u64,
) -> NegativeSampleSet {
    let history: BTreeSet<ItemId> = dataset
        .interactions
        .iter()
        .filter(|r| r.user == record.user)
        .map(|r| r.item)
        .collect();
    sample_from_history(&history, dataset.num_items(), record, k, seed)
}

fn sample_from_history(
    history: &BTreeSet<ItemId>,
    n_items: usize,
    record: &InteractionRecord,
    k: usize,
    seed: u64,
) -> NegativeSampleSet {
    if k == 0 {
        return NegativeSampleSet::default();
    }
    let available: Vec<ItemId> = (0..n_items as ItemId)
        .filter(|i| !history.contains(i) && *i != record.item)
        .collect();
    let take = k.min(available.len());
    let stream = (u64::from(record.user) << 32) | u64::from(record.item);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, stream));
    let picked = rand::seq::index::sample(&mut rng, available.len(), take);
    NegativeSampleSet(picked.into_iter().map(|i| available[i]).collect())
}

/// A training interaction as the tree builder sees it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub item: ItemId,
    pub mentions: AttrSet,
    pub negatives: Vec<ItemId>,
}

/// Attach sampled negatives to the selected records of `dataset`.
pub fn build_examples(
    dataset: &Dataset,
    record_indices: &[usize],
    negatives_per_positive: usize,
    seed: u64,
) -> Vec<TrainingExample> {
    let histories = dataset.user_histories();
    record_indices
        .iter()
        .map(|&idx| {
            let rec = &dataset.interactions[idx];
            let negs = sample_from_history(
                &histories[rec.user as usize],
                dataset.num_items(),
                rec,
                negatives_per_positive,
                seed,
            );
            TrainingExample {
                item: rec.item,
                mentions: rec.mentions.clone(),
                negatives: negs.0,
            }
        })
        .collect()
}

/// Parameters of one partition fit: the two interaction embeddings and the
/// touched item rows (laid out in [`PartitionProblem::touched_items`] order).
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionParams {
    pub s_pos: DenseVector,
    pub s_neg: DenseVector,
    pub rows: Vec<f64>,
}

impl PartitionParams {
    fn axpy(&mut self, step: f64, grad: &PartitionParams, rows_too: bool) {
        for (p, g) in self.s_pos.iter_mut().zip(&grad.s_pos) {
            *p -= step * g;
        }
        for (p, g) in self.s_neg.iter_mut().zip(&grad.s_neg) {
            *p -= step * g;
        }
        if rows_too {
            for (p, g) in self.rows.iter_mut().zip(&grad.rows) {
                *p -= step * g;
            }
        }
    }
}

/// The split objective restricted to one (positive, negative) partition pair.
pub struct PartitionProblem<'a> {
    examples: &'a [TrainingExample],
    pos: &'a [usize],
    neg: &'a [usize],
    penalties: Penalties,
    dim: usize,
    touched: Vec<ItemId>,
    slot: Vec<u32>,
}

const NO_SLOT: u32 = u32::MAX;

impl<'a> PartitionProblem<'a> {
    pub fn new(
        examples: &'a [TrainingExample],
        pos: &'a [usize],
        neg: &'a [usize],
        n_items: usize,
        dim: usize,
        penalties: Penalties,
    ) -> Self {
        let mut slot = vec![NO_SLOT; n_items];
        let mut touched = Vec::new();
        for &idx in pos.iter().chain(neg) {
            let ex = &examples[idx];
            for item in std::iter::once(ex.item).chain(ex.negatives.iter().copied()) {
                if slot[item as usize] == NO_SLOT {
                    slot[item as usize] = 0;
                    touched.push(item);
                }
            }
        }
        touched.sort_unstable();
        for (k, &item) in touched.iter().enumerate() {
            slot[item as usize] = k as u32;
        }
        PartitionProblem {
            examples,
            pos,
            neg,
            penalties,
            dim,
            touched,
            slot,
        }
    }

    /// Items whose embeddings appear in the objective, ascending.
    pub fn touched_items(&self) -> &[ItemId] {
        &self.touched
    }

    /// Starting point: zero interaction embeddings, rows copied from `table`.
    pub fn initial_params(&self, table: &ItemEmbeddingTable) -> PartitionParams {
        let mut rows = Vec::with_capacity(self.touched.len() * self.dim);
        for &item in &self.touched {
            rows.extend_from_slice(table.row(item));
        }
        PartitionParams {
            s_pos: vec![0.0; self.dim],
            s_neg: vec![0.0; self.dim],
            rows,
        }
    }

    fn row<'p>(&self, params: &'p PartitionParams, item: ItemId) -> &'p [f64] {
        let k = self.slot[item as usize] as usize * self.dim;
        &params.rows[k..k + self.dim]
    }

    pub fn objective(&self, params: &PartitionParams) -> f64 {
        self.evaluate(params, None)
    }

    /// Objective value and its full gradient.
    pub fn gradient(&self, params: &PartitionParams) -> (f64, PartitionParams) {
        let mut grad = PartitionParams {
            s_pos: vec![0.0; self.dim],
            s_neg: vec![0.0; self.dim],
            rows: vec![0.0; params.rows.len()],
        };
        let value = self.evaluate(params, Some(&mut grad));
        (value, grad)
    }

    fn evaluate(&self, params: &PartitionParams, mut grad: Option<&mut PartitionParams>) -> f64 {
        let d = self.dim;
        let lb = self.penalties.lambda_bpr;
        // Each side is summed on its own so that swapping the two sides
        // gives a bitwise identical total.
        let mut sides = [0.0; 2];
        for positive in [true, false] {
            let mut total = 0.0;
            let (side, s) = if positive {
                (self.pos, &params.s_pos)
            } else {
                (self.neg, &params.s_neg)
            };
            let mut ds = vec![0.0; d];
            for &idx in side {
                let ex = &self.examples[idx];
                let vi = self.row(params, ex.item);
                let zi = dot(s, vi);
                total += softplus(-zi);
                let g_ce = -sigmoid(-zi);
                let mut g_vi = g_ce;
                for &j in &ex.negatives {
                    let vj = self.row(params, j);
                    let margin = zi - dot(s, vj);
                    total += lb * softplus(-margin);
                    if let Some(grad) = grad.as_deref_mut() {
                        let g = -lb * sigmoid(-margin);
                        g_vi += g;
                        for k in 0..d {
                            ds[k] -= g * vj[k];
                        }
                        let sj = self.slot[j as usize] as usize * d;
                        for k in 0..d {
                            grad.rows[sj + k] -= g * s[k];
                        }
                    }
                }
                if let Some(grad) = grad.as_deref_mut() {
                    for k in 0..d {
                        ds[k] += g_vi * vi[k];
                    }
                    let si = self.slot[ex.item as usize] as usize * d;
                    for k in 0..d {
                        grad.rows[si + k] += g_vi * s[k];
                    }
                }
            }
            total += self.penalties.lambda_s * dot(s, s);
            sides[usize::from(!positive)] = total;
            if let Some(grad) = grad.as_deref_mut() {
                let target = if positive {
                    &mut grad.s_pos
                } else {
                    &mut grad.s_neg
                };
                for k in 0..d {
                    target[k] = ds[k] + 2.0 * self.penalties.lambda_s * s[k];
                }
            }
        }
        let total = (sides[0] + sides[1]) + self.penalties.lambda_v * dot(&params.rows, &params.rows);
        if let Some(grad) = grad {
            for (g, v) in grad.rows.iter_mut().zip(&params.rows) {
                *g += 2.0 * self.penalties.lambda_v * v;
            }
        }
        total
    }
}

/// Whether a fit may move item embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ItemUpdate {
    Frozen,
    Trainable,
}

/// Result of [`fit_partition_embeddings`].
#[derive(Clone, Debug, PartialEq)]
pub struct PartitionFit {
    pub s_pos: DenseVector,
    pub s_neg: DenseVector,
    pub objective: f64,
    pub initial_objective: f64,
    /// Updated rows for touched items; empty when item embeddings were frozen.
    pub item_rows: Vec<(ItemId, DenseVector)>,
}

impl PartitionFit {
    /// Write updated item rows back into the table (no-op for a frozen table).
    pub fn apply_to(&self, table: &mut ItemEmbeddingTable) {
        if table.frozen {
            return;
        }
        for (item, row) in &self.item_rows {
            table.row_mut(*item).copy_from_slice(row);
        }
    }
}

/// Full-batch gradient descent on the partition objective for `epochs`
/// steps. Interaction embeddings start at zero; the best iterate seen is
/// returned, so the objective never exceeds its starting value.
pub fn fit_partition_embeddings(
    examples: &[TrainingExample],
    pos: &[usize],
    neg: &[usize],
    table: &ItemEmbeddingTable,
    config: &OptimizerConfig,
    epochs: usize,
    update: ItemUpdate,
) -> Result<PartitionFit, EmbeddingError> {
    let dim = table.dim();
    if pos.is_empty() && neg.is_empty() {
        return Ok(PartitionFit {
            s_pos: vec![0.0; dim],
            s_neg: vec![0.0; dim],
            objective: 0.0,
            initial_objective: 0.0,
            item_rows: Vec::new(),
        });
    }
    for &idx in pos.iter().chain(neg) {
        let ex = &examples[idx];
        table.check_item(ex.item)?;
        for &j in &ex.negatives {
            table.check_item(j)?;
        }
    }
    let train_rows = update == ItemUpdate::Trainable && !table.frozen;
    let problem = PartitionProblem::new(examples, pos, neg, table.len(), dim, config.penalties());
    let mut params = problem.initial_params(table);

    let mut best: Option<(f64, PartitionParams)> = None;
    let mut initial = f64::NAN;
    for epoch in 0..=epochs {
        let (value, grad) = if epoch < epochs {
            problem.gradient(&params)
        } else {
            (problem.objective(&params), params.clone())
        };
        if !value.is_finite() {
            return Err(EmbeddingError::Diverged { epoch });
        }
        if epoch == 0 {
            initial = value;
        }
        if best.as_ref().is_none_or(|(b, _)| value < *b) {
            best = Some((value, params.clone()));
        }
        if epoch < epochs {
            params.axpy(config.learning_rate, &grad, train_rows);
        }
    }
    let (objective, params) = best.expect("at least one evaluation");
    let item_rows = if train_rows {
        problem
            .touched
            .iter()
            .enumerate()
            .map(|(k, &item)| (item, params.rows[k * dim..(k + 1) * dim].to_vec()))
            .collect()
    } else {
        Vec::new()
    };
    Ok(PartitionFit {
        s_pos: params.s_pos,
        s_neg: params.s_neg,
        objective,
        initial_objective: initial,
        item_rows,
    })
}
