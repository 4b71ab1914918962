//! The conversation engine. A session walks one tree at a time, asking the
//! split attribute of its current node, recommends once the node is a leaf
//! or few enough candidates remain, and on rejection shifts its embedding
//! and moves to the closest unvisited tree.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttrId, ItemId};
use crate::embeddings::{dot, DenseVector};
use crate::error::PolicyError;
use crate::facttree::NodeId;
use crate::forest::InteractionForest;
use crate::seed::mix_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// List length K.
    pub k: usize,
    /// Turn budget T.
    pub max_turns: usize,
    /// Recommend early once at most this many candidates remain.
    pub eta: usize,
    pub alpha_p: f64,
    pub alpha_n: f64,
    pub exclude_rejected: bool,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            k: 10,
            max_turns: 10,
            eta: 10,
            alpha_p: 1e-3,
            alpha_n: 1e-2,
            exclude_rejected: true,
        }
    }
}

/// Component toggles for ablation runs. All on by default.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub use_candidates: bool,
    pub use_forest: bool,
    pub use_early_rec: bool,
    pub use_online_feedback: bool,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_candidates: true,
            use_forest: true,
            use_early_rec: true,
            use_online_feedback: true,
        }
    }
}

impl AblationFlags {
    pub const NAMES: &'static [&'static str] =
        &["candidates", "forest", "early_rec", "online_feedback"];

    /// Turn one component off by name. Accepts the canonical names and
    /// short forms such as `no-earlyrec`, `no-rf`, `no-onlinefeed`.
    pub fn disable(&mut self, name: &str) -> Result<(), String> {
        let key: String = name
            .trim()
            .to_ascii_lowercase()
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect();
        let key = key.strip_prefix("no").unwrap_or(&key);
        match key {
            "candidates" | "candidate" => self.use_candidates = false,
            "forest" | "rf" => self.use_forest = false,
            "earlyrec" => self.use_early_rec = false,
            "onlinefeedback" | "onlinefeed" => self.use_online_feedback = false,
            _ => {
                return Err(format!(
                    "unknown ablation `{name}` (expected one of {})",
                    Self::NAMES.join(", ")
                ))
            }
        }
        Ok(())
    }

    pub fn disabled(&self) -> Vec<&'static str> {
        let on = [
            self.use_candidates,
            self.use_forest,
            self.use_early_rec,
            self.use_online_feedback,
        ];
        Self::NAMES
            .iter()
            .zip(on)
            .filter(|(_, on)| !on)
            .map(|(n, _)| *n)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredItem {
    pub item: ItemId,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentAction {
    Ask { attribute: AttrId },
    Recommend { items: Vec<ScoredItem> },
}

impl AgentAction {
    pub fn is_recommend(&self) -> bool {
        matches!(self, AgentAction::Recommend { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UserFeedback {
    AnswerYes,
    AnswerNo,
    Accept,
    Reject,
}

impl fmt::Display for UserFeedback {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            UserFeedback::AnswerYes => "yes",
            UserFeedback::AnswerNo => "no",
            UserFeedback::Accept => "accept",
            UserFeedback::Reject => "reject",
        })
    }
}

impl FromStr for UserFeedback {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "yes" | "y" => Ok(UserFeedback::AnswerYes),
            "no" | "n" => Ok(UserFeedback::AnswerNo),
            "accept" | "a" => Ok(UserFeedback::Accept),
            "reject" | "r" => Ok(UserFeedback::Reject),
            other => Err(format!("unrecognised feedback `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Active,
    Succeeded,
    Failed,
}

/// One completed turn.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub turn: usize,
    /// Tree the action came from; `None` once every tree has been visited.
    pub tree: Option<usize>,
    pub node: Option<NodeId>,
    pub at_leaf: bool,
    pub action: AgentAction,
    pub feedback: UserFeedback,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionState {
    /// `None` in exhausted mode.
    pub current_tree: Option<usize>,
    pub current_node: NodeId,
    pub answers: BTreeMap<AttrId, bool>,
    /// Trees in visiting order.
    pub visited_trees: Vec<usize>,
    pub collected_embeddings: Vec<DenseVector>,
    pub delta: DenseVector,
    /// Previously rejected items in recommendation order.
    pub excluded_items: Vec<ItemId>,
    pub turn: usize,
    pub status: SessionStatus,
    /// Turn count charged to the outcome; set on termination.
    pub turns_used: Option<usize>,
}

pub struct Session {
    forest: Arc<InteractionForest>,
    config: PolicyConfig,
    flags: AblationFlags,
    rng: ChaCha8Rng,
    state: SessionState,
    excluded: BTreeSet<ItemId>,
    pending: Option<AgentAction>,
    history: Vec<TurnRecord>,
}

pub fn score_item(s: &[f64], forest: &InteractionForest, item: ItemId) -> f64 {
    dot(s, forest.items.row(item))
}

/// Rank `items` by score descending, ties to the lower item id.
pub fn rank_items(s: &[f64], forest: &InteractionForest, items: impl IntoIterator<Item = ItemId>) -> Vec<ScoredItem> {
    let mut scored: Vec<ScoredItem> = items
        .into_iter()
        .map(|item| ScoredItem {
            item,
            score: score_item(s, forest, item),
        })
        .collect();
    scored.sort_by(|a, b| match b.score.total_cmp(&a.score) {
        Ordering::Equal => a.item.cmp(&b.item),
        o => o,
    });
    scored
}

fn mean(vectors: &[&[f64]], dim: usize) -> DenseVector {
    let mut out = vec![0.0; dim];
    if vectors.is_empty() {
        return out;
    }
    for v in vectors {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    let n = vectors.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

impl Session {
    pub fn start(
        forest: Arc<InteractionForest>,
        config: PolicyConfig,
        flags: AblationFlags,
        seed: u64,
    ) -> Self {
        assert!(!forest.trees.is_empty(), "forest has no trees");
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5E55));
        let first = if flags.use_forest {
            rng.gen_range(0..forest.trees.len())
        } else {
            0
        };
        let dim = forest.dim();
        Session {
            state: SessionState {
                current_tree: Some(first),
                current_node: 0,
                answers: BTreeMap::new(),
                visited_trees: Vec::new(),
                collected_embeddings: Vec::new(),
                delta: vec![0.0; dim],
                excluded_items: Vec::new(),
                turn: 1,
                status: SessionStatus::Active,
                turns_used: None,
            },
            forest,
            config,
            flags,
            rng,
            excluded: BTreeSet::new(),
            pending: None,
            history: Vec::new(),
        }
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn status(&self) -> SessionStatus {
        self.state.status
    }

    pub fn turn(&self) -> usize {
        self.state.turn
    }

    pub fn history(&self) -> &[TurnRecord] {
        &self.history
    }

    pub fn config(&self) -> &PolicyConfig {
        &self.config
    }

    pub fn flags(&self) -> AblationFlags {
        self.flags
    }

    pub fn forest(&self) -> &Arc<InteractionForest> {
        &self.forest
    }

    pub fn pending(&self) -> Option<&AgentAction> {
        self.pending.as_ref()
    }

    pub fn is_excluded(&self, item: ItemId) -> bool {
        self.excluded.contains(&item)
    }

    /// Outcome turn count: acceptance turn on success, T on failure.
    pub fn turns_used(&self) -> Option<usize> {
        self.state.turns_used
    }

    fn at_leaf(&self) -> bool {
        match self.state.current_tree {
            Some(t) => self.forest.trees[t].node(self.state.current_node).is_leaf(),
            None => false,
        }
    }

    /// Node candidates of the current node minus excluded items.
    pub fn available_candidates(&self) -> Vec<ItemId> {
        match self.state.current_tree {
            Some(t) => self.forest.trees[t]
                .node(self.state.current_node)
                .candidate_items
                .iter()
                .copied()
                .filter(|i| !self.excluded.contains(i))
                .collect(),
            None => Vec::new(),
        }
    }

    /// Mean of the collected embeddings and the current node's embedding,
    /// plus the accumulated feedback offset.
    pub fn fused_embedding(&self) -> DenseVector {
        let mut parts: Vec<&[f64]> = self
            .state
            .collected_embeddings
            .iter()
            .map(|v| v.as_slice())
            .collect();
        if let Some(t) = self.state.current_tree {
            parts.push(&self.forest.trees[t].node(self.state.current_node).embedding);
        }
        let mut s = mean(&parts, self.forest.dim());
        for (x, d) in s.iter_mut().zip(&self.state.delta) {
            *x += d;
        }
        s
    }

    fn remaining_catalog(&self) -> impl Iterator<Item = ItemId> + '_ {
        (0..self.forest.num_items() as ItemId).filter(|i| !self.excluded.contains(i))
    }

    /// Top-K list: available node candidates first, then the best of the
    /// rest of the catalog. Without candidate filtering the whole remaining
    /// catalog is ranked together.
    pub fn assemble_recommendation(&self) -> Vec<ScoredItem> {
        let s = self.fused_embedding();
        let k = self.config.k;
        if !self.flags.use_candidates || self.state.current_tree.is_none() {
            let mut all = rank_items(&s, &self.forest, self.remaining_catalog());
            all.truncate(k);
            return all;
        }
        let avail = self.available_candidates();
        let mut list = rank_items(&s, &self.forest, avail.iter().copied());
        if list.len() >= k {
            list.truncate(k);
            return list;
        }
        let in_avail: BTreeSet<ItemId> = avail.into_iter().collect();
        let fill = rank_items(
            &s,
            &self.forest,
            self.remaining_catalog().filter(|i| !in_avail.contains(i)),
        );
        list.extend(fill.into_iter().take(k - list.len()));
        list
    }

    /// The action for the current turn, or `None` once the session is over.
    /// Repeated calls return the same pending action.
    pub fn current_action(&mut self) -> Option<AgentAction> {
        if self.state.status != SessionStatus::Active {
            return None;
        }
        if let Some(p) = &self.pending {
            return Some(p.clone());
        }
        let action = match self.state.current_tree {
            None => AgentAction::Recommend {
                items: self.assemble_recommendation(),
            },
            Some(t) => {
                let node = self.forest.trees[t].node(self.state.current_node);
                let early = self.flags.use_early_rec
                    && self.available_candidates().len() <= self.config.eta;
                match node.split_attribute {
                    Some(attribute) if !early => AgentAction::Ask { attribute },
                    _ => AgentAction::Recommend {
                        items: self.assemble_recommendation(),
                    },
                }
            }
        };
        if let AgentAction::Recommend { items } = &action {
            if items.is_empty() {
                self.finish(SessionStatus::Failed);
                return None;
            }
        }
        self.pending = Some(action.clone());
        Some(action)
    }

    /// Apply any user message. Out-of-order messages are rejected without
    /// changing state.
    pub fn respond(&mut self, feedback: UserFeedback) -> Result<SessionStatus, PolicyError> {
        match feedback {
            UserFeedback::AnswerYes => self.apply_answer(true),
            UserFeedback::AnswerNo => self.apply_answer(false),
            UserFeedback::Accept => self.apply_acceptance(),
            UserFeedback::Reject => self.apply_rejection(),
        }
    }

    fn record(&mut self, action: AgentAction, feedback: UserFeedback) {
        self.history.push(TurnRecord {
            turn: self.state.turn,
            tree: self.state.current_tree,
            node: self.state.current_tree.map(|_| self.state.current_node),
            at_leaf: self.at_leaf(),
            action,
            feedback,
        });
    }

    fn finish(&mut self, status: SessionStatus) {
        self.state.status = status;
        self.pending = None;
        self.state.turns_used = Some(match status {
            SessionStatus::Succeeded => self.state.turn,
            _ => self.config.max_turns,
        });
    }

    fn advance_turn(&mut self) {
        self.state.turn += 1;
        if self.state.turn > self.config.max_turns {
            self.finish(SessionStatus::Failed);
        }
    }

    fn check_active(&self) -> Result<(), PolicyError> {
        if self.state.status == SessionStatus::Active {
            Ok(())
        } else {
            Err(PolicyError::NotActive)
        }
    }

    pub fn apply_answer(&mut self, yes: bool) -> Result<SessionStatus, PolicyError> {
        self.check_active()?;
        let Some(AgentAction::Ask { attribute }) = self.pending.clone() else {
            return Err(PolicyError::NoPendingQuestion);
        };
        let feedback = if yes {
            UserFeedback::AnswerYes
        } else {
            UserFeedback::AnswerNo
        };
        self.record(AgentAction::Ask { attribute }, feedback);
        self.pending = None;
        self.state.answers.insert(attribute, yes);
        let t = self.state.current_tree.expect("questions only come from trees");
        let tree = &self.forest.trees[t];
        self.state.current_node = tree.descend_from(self.state.current_node, &self.state.answers);
        self.advance_turn();
        Ok(self.state.status)
    }

    pub fn apply_acceptance(&mut self) -> Result<SessionStatus, PolicyError> {
        self.check_active()?;
        let Some(action @ AgentAction::Recommend { .. }) = self.pending.clone() else {
            return Err(PolicyError::NoPendingRecommendation);
        };
        self.record(action, UserFeedback::Accept);
        self.finish(SessionStatus::Succeeded);
        Ok(self.state.status)
    }

    pub fn apply_rejection(&mut self) -> Result<SessionStatus, PolicyError> {
        self.check_active()?;
        let Some(AgentAction::Recommend { items }) = self.pending.clone() else {
            return Err(PolicyError::NoPendingRecommendation);
        };
        self.record(AgentAction::Recommend { items: items.clone() }, UserFeedback::Reject);
        self.pending = None;

        let s = self.fused_embedding();
        let rejected: BTreeSet<ItemId> = items.iter().map(|x| x.item).collect();
        if self.flags.use_online_feedback {
            let positives: Vec<ItemId> = rank_items(
                &s,
                &self.forest,
                self.remaining_catalog().filter(|i| !rejected.contains(i)),
            )
            .into_iter()
            .take(self.config.k)
            .map(|x| x.item)
            .collect();
            self.update_delta(&positives, &rejected);
        }
        if self.config.exclude_rejected {
            for x in &items {
                if self.excluded.insert(x.item) {
                    self.state.excluded_items.push(x.item);
                }
            }
        }

        if let Some(t) = self.state.current_tree {
            let node = self.forest.trees[t].node(self.state.current_node);
            self.state.collected_embeddings.push(node.embedding.clone());
            self.state.visited_trees.push(t);
            let next = if self.flags.use_forest {
                self.next_tree_after_rejection(&s)
            } else {
                None
            };
            self.state.current_tree = next;
            self.state.current_node = match next {
                Some(j) => self.forest.trees[j].descend_from(0, &self.state.answers),
                None => 0,
            };
        }
        self.advance_turn();
        Ok(self.state.status)
    }

    fn update_delta(&mut self, positives: &[ItemId], rejected: &BTreeSet<ItemId>) {
        let items = &self.forest.items;
        if !positives.is_empty() {
            let w = self.config.alpha_p / positives.len() as f64;
            for &i in positives {
                for (d, v) in self.state.delta.iter_mut().zip(items.row(i)) {
                    *d += w * v;
                }
            }
        }
        if !rejected.is_empty() {
            let w = self.config.alpha_n / rejected.len() as f64;
            for &i in rejected {
                for (d, v) in self.state.delta.iter_mut().zip(items.row(i)) {
                    *d -= w * v;
                }
            }
        }
    }

    fn unvisited(&self) -> Vec<usize> {
        (0..self.forest.trees.len())
            .filter(|j| !self.state.visited_trees.contains(j))
            .collect()
    }

    fn next_tree_after_rejection(&mut self, s: &[f64]) -> Option<usize> {
        let open = self.unvisited();
        if open.is_empty() {
            return None;
        }
        if self.flags.use_online_feedback {
            select_next_tree(&self.forest, &open, &self.state.answers, s)
        } else {
            Some(open[self.rng.gen_range(0..open.len())])
        }
    }

    /// Closest unvisited tree to the current fused embedding.
    pub fn select_next_tree(&self) -> Result<usize, PolicyError> {
        let open = self.unvisited();
        select_next_tree(&self.forest, &open, &self.state.answers, &self.fused_embedding())
            .ok_or(PolicyError::AllTreesVisited)
    }
}

/// Among `candidates`, the tree whose partial traversal under `answers`
/// ends at the embedding with the largest dot product with `s`. Ties go to
/// the lowest index.
pub fn select_next_tree(
    forest: &InteractionForest,
    candidates: &[usize],
    answers: &BTreeMap<AttrId, bool>,
    s: &[f64],
) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &j in candidates {
        let w = dot(&forest.trees[j].traverse_known(answers).embedding, s);
        match best {
            Some((_, bw)) if w <= bw => {}
            _ => best = Some((j, w)),
        }
    }
    best.map(|(j, _)| j)
}
