//! User-item interaction trees.
//!
//! A tree partitions interaction records by attribute mentions. Every node
//! keeps the interaction embedding fitted when its partition was formed, the
//! number of records it holds, and the items those records reference.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttrId, ItemId};
use crate::embeddings::{
    fit_partition_embeddings, DenseVector, ItemEmbeddingTable, ItemUpdate, OptimizerConfig,
    PartitionFit, TrainingExample,
};
use crate::error::{EmbeddingError, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeConfig {
    pub max_depth: usize,
    /// Gini threshold γ; nodes with a larger index are not split.
    pub gamma: f64,
    pub min_node: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        TreeConfig {
            max_depth: 7,
            gamma: 0.996,
            min_node: 2,
        }
    }
}

pub type NodeId = usize;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub id: NodeId,
    pub depth: usize,
    pub split_attribute: Option<AttrId>,
    /// (positive branch, negative branch).
    pub children: Option<(NodeId, NodeId)>,
    pub embedding: DenseVector,
    pub interaction_count: usize,
    /// Sorted, distinct.
    pub candidate_items: Vec<ItemId>,
    pub gini: f64,
}

impl TreeNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_none()
    }
}

/// Nodes are stored in creation order; node 0 is the root.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionTree {
    pub nodes: Vec<TreeNode>,
    pub attribute_pool: Vec<AttrId>,
    pub max_depth: usize,
}

impl InteractionTree {
    pub fn root(&self) -> &TreeNode {
        &self.nodes[0]
    }

    pub fn node(&self, id: NodeId) -> &TreeNode {
        &self.nodes[id]
    }

    pub fn leaves(&self) -> impl Iterator<Item = &TreeNode> {
        self.nodes.iter().filter(|n| n.is_leaf())
    }

    /// Child of an internal node on the branch matching `answer`.
    pub fn child(&self, id: NodeId, answer: bool) -> Option<NodeId> {
        self.nodes[id]
            .children
            .map(|(pos, neg)| if answer { pos } else { neg })
    }

    /// Descend from the root following recorded answers; stop at the first
    /// node whose split attribute is unanswered, or at a leaf.
    pub fn traverse_known(&self, answers: &BTreeMap<AttrId, bool>) -> &TreeNode {
        self.node(self.descend_from(0, answers))
    }

    /// Same stop rule as [`Self::traverse_known`], starting at `start`.
    pub fn descend_from(&self, start: NodeId, answers: &BTreeMap<AttrId, bool>) -> NodeId {
        let mut id = start;
        loop {
            let node = &self.nodes[id];
            let Some(attr) = node.split_attribute else {
                return id;
            };
            match answers.get(&attr) {
                Some(&yes) => id = self.child(id, yes).expect("internal node has children"),
                None => return id,
            }
        }
    }

    pub fn depth(&self) -> usize {
        self.nodes.iter().map(|n| n.depth).max().unwrap_or(0)
    }
}

/// Split `records` (indices into `examples`) by the mention bit of `attr`.
pub fn partition_by_attribute(
    examples: &[TrainingExample],
    records: &[usize],
    attr: AttrId,
) -> (Vec<usize>, Vec<usize>) {
    records
        .iter()
        .partition(|&&idx| examples[idx].mentions.contains(attr))
}

/// Distinct items referenced by `records`, ascending.
pub fn node_candidates(examples: &[TrainingExample], records: &[usize]) -> Vec<ItemId> {
    records
        .iter()
        .map(|&i| examples[i].item)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// `1 - (|I_z| / |R_z|)²` for a node with `records` interactions over `items` distinct items.
pub fn gini_from_counts(items: usize, records: usize) -> f64 {
    let ratio = items as f64 / records as f64;
    1.0 - ratio * ratio
}

pub fn gini_index(examples: &[TrainingExample], records: &[usize]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::Invalid("gini index of an empty node".into()));
    }
    Ok(gini_from_counts(
        node_candidates(examples, records).len(),
        records.len(),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitCandidate {
    pub attribute: AttrId,
    pub objective: f64,
    pub s_pos: DenseVector,
    pub s_neg: DenseVector,
    pub pos_size: usize,
    pub neg_size: usize,
}

/// Fit both sides of the split on `attr` with item embeddings frozen and
/// the short search budget.
pub fn evaluate_split(
    examples: &[TrainingExample],
    records: &[usize],
    attr: AttrId,
    table: &ItemEmbeddingTable,
    config: &OptimizerConfig,
) -> Result<SplitCandidate, EmbeddingError> {
    let (pos, neg) = partition_by_attribute(examples, records, attr);
    let fit = fit_partition_embeddings(
        examples,
        &pos,
        &neg,
        table,
        config,
        config.epochs_search,
        ItemUpdate::Frozen,
    )?;
    Ok(SplitCandidate {
        attribute: attr,
        objective: fit.objective,
        s_pos: fit.s_pos,
        s_neg: fit.s_neg,
        pos_size: pos.len(),
        neg_size: neg.len(),
    })
}

/// Exhaustive search over `pool \ used_on_path` for the attribute with the
/// lowest split objective. Attributes leaving one side empty are skipped;
/// ties go to the lowest attribute index.
pub fn select_split(
    examples: &[TrainingExample],
    records: &[usize],
    pool: &[AttrId],
    used_on_path: &BTreeSet<AttrId>,
    table: &ItemEmbeddingTable,
    config: &OptimizerConfig,
) -> Result<Option<SplitCandidate>, EmbeddingError> {
    let mut attrs: Vec<AttrId> = pool
        .iter()
        .copied()
        .filter(|a| !used_on_path.contains(a))
        .filter(|&a| {
            let pos = records
                .iter()
                .filter(|&&i| examples[i].mentions.contains(a))
                .count();
            pos > 0 && pos < records.len()
        })
        .collect();
    attrs.sort_unstable();
    attrs.dedup();

    let candidates = attrs
        .par_iter()
        .map(|&a| evaluate_split(examples, records, a, table, config))
        .collect::<Result<Vec<_>, _>>()?;

    let mut best: Option<SplitCandidate> = None;
    for cand in candidates {
        if best.as_ref().is_none_or(|b| cand.objective < b.objective) {
            best = Some(cand);
        }
    }
    Ok(best)
}

/// One committed split, for training logs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub node: NodeId,
    pub depth: usize,
    pub attribute: AttrId,
    pub search_objective: f64,
    pub commit_objective: f64,
    pub pos_size: usize,
    pub neg_size: usize,
}

/// Why a node became a leaf.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    MaxDepth,
    Gini,
    MinNode,
    NoSplit,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildLog {
    pub root_objective: f64,
    pub splits: Vec<SplitRecord>,
    pub leaves: Vec<(NodeId, StopReason)>,
}

/// Item-embedding access during a build: mutable while V is trainable,
/// shared once it is frozen.
trait EmbeddingStore {
    fn table(&self) -> &ItemEmbeddingTable;
    fn absorb(&mut self, fit: &PartitionFit);
}

impl EmbeddingStore for &mut ItemEmbeddingTable {
    fn table(&self) -> &ItemEmbeddingTable {
        self
    }

    fn absorb(&mut self, fit: &PartitionFit) {
        fit.apply_to(self);
    }
}

struct FrozenStore<'a>(&'a ItemEmbeddingTable);

impl EmbeddingStore for FrozenStore<'_> {
    fn table(&self) -> &ItemEmbeddingTable {
        self.0
    }

    fn absorb(&mut self, _fit: &PartitionFit) {}
}

/// Grow a tree over all `examples`. When `table` is not frozen, every
/// committed fit (root and splits) also updates the item embeddings.
pub fn build_tree(
    examples: &[TrainingExample],
    pool: &[AttrId],
    table: &mut ItemEmbeddingTable,
    optimizer: &OptimizerConfig,
    config: &TreeConfig,
) -> Result<(InteractionTree, BuildLog)> {
    grow(examples, pool, table, optimizer, config)
}

/// [`build_tree`] against a frozen table, usable from several threads at once.
pub fn build_tree_frozen(
    examples: &[TrainingExample],
    pool: &[AttrId],
    table: &ItemEmbeddingTable,
    optimizer: &OptimizerConfig,
    config: &TreeConfig,
) -> Result<(InteractionTree, BuildLog)> {
    if !table.frozen {
        return Err(Error::Invalid(
            "build_tree_frozen requires a frozen embedding table".into(),
        ));
    }
    grow(examples, pool, FrozenStore(table), optimizer, config)
}

fn grow<S: EmbeddingStore>(
    examples: &[TrainingExample],
    pool: &[AttrId],
    mut store: S,
    optimizer: &OptimizerConfig,
    config: &TreeConfig,
) -> Result<(InteractionTree, BuildLog)> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot build a tree without records".into()));
    }
    let mut log = BuildLog::default();
    let all: Vec<usize> = (0..examples.len()).collect();
    let root_fit = fit_partition_embeddings(
        examples,
        &all,
        &[],
        store.table(),
        optimizer,
        optimizer.epochs_commit,
        ItemUpdate::Trainable,
    )?;
    store.absorb(&root_fit);
    log.root_objective = root_fit.objective;

    let mut nodes = vec![new_node(0, 0, root_fit.s_pos, examples, &all)];
    // (node id, records, attributes used on the path)
    let mut queue: VecDeque<(NodeId, Vec<usize>, BTreeSet<AttrId>)> = VecDeque::new();
    queue.push_back((0, all, BTreeSet::new()));

    while let Some((id, records, used)) = queue.pop_front() {
        let node = &nodes[id];
        let stop = if node.depth >= config.max_depth {
            Some(StopReason::MaxDepth)
        } else if node.gini > config.gamma {
            Some(StopReason::Gini)
        } else if records.len() < config.min_node {
            Some(StopReason::MinNode)
        } else {
            None
        };
        if let Some(reason) = stop {
            log.leaves.push((id, reason));
            continue;
        }
        let Some(best) = select_split(examples, &records, pool, &used, store.table(), optimizer)?
        else {
            log.leaves.push((id, StopReason::NoSplit));
            continue;
        };

        let (pos, neg) = partition_by_attribute(examples, &records, best.attribute);
        let fit = fit_partition_embeddings(
            examples,
            &pos,
            &neg,
            store.table(),
            optimizer,
            optimizer.epochs_commit,
            ItemUpdate::Trainable,
        )?;
        store.absorb(&fit);

        let depth = nodes[id].depth + 1;
        let pos_id = nodes.len();
        let neg_id = pos_id + 1;
        nodes.push(new_node(pos_id, depth, fit.s_pos, examples, &pos));
        nodes.push(new_node(neg_id, depth, fit.s_neg, examples, &neg));
        nodes[id].split_attribute = Some(best.attribute);
        nodes[id].children = Some((pos_id, neg_id));
        log.splits.push(SplitRecord {
            node: id,
            depth: depth - 1,
            attribute: best.attribute,
            search_objective: best.objective,
            commit_objective: fit.objective,
            pos_size: pos.len(),
            neg_size: neg.len(),
        });

        let mut child_used = used;
        child_used.insert(best.attribute);
        queue.push_back((pos_id, pos, child_used.clone()));
        queue.push_back((neg_id, neg, child_used));
    }

    let mut attribute_pool = pool.to_vec();
    attribute_pool.sort_unstable();
    attribute_pool.dedup();
    Ok((
        InteractionTree {
            nodes,
            attribute_pool,
            max_depth: config.max_depth,
        },
        log,
    ))
}

fn new_node(
    id: NodeId,
    depth: usize,
    embedding: DenseVector,
    examples: &[TrainingExample],
    records: &[usize],
) -> TreeNode {
    let candidate_items = node_candidates(examples, records);
    let gini = gini_from_counts(candidate_items.len(), records.len());
    TreeNode {
        id,
        depth,
        split_attribute: None,
        children: None,
        embedding,
        interaction_count: records.len(),
        candidate_items,
        gini,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AttrSet;

    fn ex(item: ItemId, attrs: &[AttrId], p: usize) -> TrainingExample {
        TrainingExample {
            item,
            mentions: AttrSet::from_indices(p, attrs.iter().copied()),
            negatives: vec![],
        }
    }

    #[test]
    fn partition_law() {
        let examples = vec![ex(0, &[1], 3), ex(1, &[], 3), ex(2, &[1, 2], 3)];
        let all = [0, 1, 2];
        assert_eq!(partition_by_attribute(&examples, &all, 1), (vec![0, 2], vec![1]));
        assert_eq!(partition_by_attribute(&examples, &all, 0), (vec![], vec![0, 1, 2]));
    }

    #[test]
    fn gini_arithmetic() {
        assert_eq!(gini_from_counts(5, 10), 0.75);
        assert_eq!(gini_from_counts(10, 10), 0.0);
        assert_eq!(gini_from_counts(1, 20), 0.9975);
        assert!(gini_from_counts(1, 20) > 0.996);
        let examples = vec![ex(0, &[], 1), ex(0, &[], 1), ex(1, &[], 1)];
        assert!((gini_index(&examples, &[0, 1, 2]).unwrap() - (1.0 - 4.0 / 9.0)).abs() < 1e-15);
        assert!(gini_index(&examples, &[]).is_err());
    }

    #[test]
    fn candidates_are_distinct_items() {
        let examples = vec![ex(0, &[], 1), ex(0, &[], 1), ex(1, &[], 1)];
        assert_eq!(node_candidates(&examples, &[0, 1, 2]), vec![0, 1]);
        assert_eq!(node_candidates(&examples, &[2]), vec![1]);
    }

    fn toy_table(n: usize) -> ItemEmbeddingTable {
        let mut t = ItemEmbeddingTable::random(n, 2, 0.5, 3);
        t.frozen = true;
        t
    }

    #[test]
    fn select_split_single_candidate_and_degenerate() {
        let examples = vec![ex(0, &[0], 2), ex(1, &[], 2), ex(1, &[0, 1], 2)];
        let table = toy_table(2);
        let cfg = OptimizerConfig::default();
        let used = BTreeSet::new();
        let best = select_split(&examples, &[0, 1, 2], &[0], &used, &table, &cfg)
            .unwrap()
            .unwrap();
        assert_eq!(best.attribute, 0);
        assert_eq!(best.pos_size + best.neg_size, 3);

        let same = vec![ex(0, &[0], 2), ex(1, &[0], 2)];
        assert!(select_split(&same, &[0, 1], &[0, 1], &used, &table, &cfg)
            .unwrap()
            .is_none());
        let used_0: BTreeSet<_> = [0].into();
        assert!(select_split(&examples, &[0, 1, 2], &[0], &used_0, &table, &cfg)
            .unwrap()
            .is_none());
    }

    #[test]
    fn empty_positive_side_matches_single_fit() {
        let examples = vec![ex(0, &[], 2), ex(1, &[], 2)];
        let table = toy_table(2);
        let cfg = OptimizerConfig::default();
        let cand = evaluate_split(&examples, &[0, 1], 0, &table, &cfg).unwrap();
        let single = fit_partition_embeddings(&examples, &[], &[0, 1], &table, &cfg, cfg.epochs_search, ItemUpdate::Frozen)
            .unwrap();
        assert_eq!(cand.objective, single.objective);
        assert_eq!(cand.pos_size, 0);
    }

    #[test]
    fn zero_depth_is_single_leaf() {
        let examples = vec![ex(0, &[0], 1), ex(1, &[], 1)];
        let mut table = ItemEmbeddingTable::random(2, 2, 0.01, 1);
        let cfg = TreeConfig {
            max_depth: 0,
            ..Default::default()
        };
        let (tree, log) = build_tree(&examples, &[0], &mut table, &OptimizerConfig::default(), &cfg).unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert!(tree.root().is_leaf());
        assert_eq!(log.leaves, vec![(0, StopReason::MaxDepth)]);
    }

    #[test]
    fn gini_stop() {
        // 20 records of one item: gini 0.9975 > 0.996
        let examples: Vec<_> = (0..20).map(|k| ex(0, if k % 2 == 0 { &[0] } else { &[] }, 1)).collect();
        let mut table = ItemEmbeddingTable::random(1, 2, 0.01, 1);
        let (tree, log) = build_tree(&examples, &[0], &mut table, &OptimizerConfig::default(), &TreeConfig::default())
            .unwrap();
        assert_eq!(tree.nodes.len(), 1);
        assert_eq!(log.leaves, vec![(0, StopReason::Gini)]);
    }

    #[test]
    fn traverse_stop_rule() {
        let e = vec![0.0];
        let node = |id, split: Option<AttrId>, children| TreeNode {
            id,
            depth: 0,
            split_attribute: split,
            children,
            embedding: e.clone(),
            interaction_count: 1,
            candidate_items: vec![0],
            gini: 0.0,
        };
        let tree = InteractionTree {
            nodes: vec![
                node(0, Some(2), Some((1, 2))),
                node(1, Some(5), Some((3, 4))),
                node(2, None, None),
                node(3, None, None),
                node(4, None, None),
            ],
            attribute_pool: vec![2, 5],
            max_depth: 2,
        };
        assert_eq!(tree.traverse_known(&BTreeMap::new()).id, 0);
        assert_eq!(tree.traverse_known(&[(2, true)].into()).id, 1);
        assert_eq!(tree.traverse_known(&[(2, true), (5, false)].into()).id, 4);
        assert_eq!(tree.traverse_known(&[(2, false)].into()).id, 2);
        // answers off the path do not matter
        assert_eq!(tree.traverse_known(&[(2, true), (7, true)].into()).id, 1);
    }

    #[test]
    fn frozen_build_requires_frozen_table() {
        let examples = vec![ex(0, &[0], 1)];
        let table = ItemEmbeddingTable::random(1, 2, 0.01, 1);
        assert!(build_tree_frozen(&examples, &[0], &table, &OptimizerConfig::default(), &TreeConfig::default()).is_err());
    }
}
