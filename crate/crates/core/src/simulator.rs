//! Rule-based simulated users. A user holds a target item and answers an
//! attribute question with yes iff the attribute belongs to both the
//! target's attribute set and the user's preferred set.

use std::io::{self, Write};
use std::sync::Arc;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AttrId, AttrSet, Dataset, ItemId, UserId};
use crate::embeddings::DenseVector;
use crate::forest::InteractionForest;
use crate::policy::{AblationFlags, AgentAction, PolicyConfig, Session, SessionStatus, TurnRecord, UserFeedback};
use crate::seed::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulatorMode {
    /// Preferred set taken from the interaction's recorded mentions.
    Recorded,
    /// Each attribute enters the preferred set independently with probability rho.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulatedUser {
    pub user: UserId,
    pub target: ItemId,
    pub item_attributes: AttrSet,
    pub preferred: AttrSet,
    pub mode: SimulatorMode,
}

impl SimulatedUser {
    pub fn oracle_answer(&self, attribute: AttrId) -> bool {
        self.item_attributes.contains(attribute) && self.preferred.contains(attribute)
    }

    pub fn oracle_feedback(&self, items: &[ItemId]) -> bool {
        items.contains(&self.target)
    }

    /// Attributes this user would affirm.
    pub fn yes_set(&self) -> AttrSet {
        self.item_attributes.intersection(&self.preferred)
    }
}

pub fn make_simulated_user(
    dataset: &Dataset,
    record: usize,
    mode: SimulatorMode,
    rho: f64,
    seed: u64,
) -> SimulatedUser {
    let r = &dataset.interactions[record];
    let item_attributes = dataset.item_attributes[r.item as usize].clone();
    let preferred = match mode {
        SimulatorMode::Recorded => {
            if r.mentions.is_empty() {
                warn!("record {record} (user {}, item {}) has no mentions", r.user, r.item);
            }
            r.mentions.clone()
        }
        SimulatorMode::Sampled => {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x05E7));
            let p = dataset.num_attributes();
            AttrSet::from_indices(p, (0..p).filter(|_| rng.gen_bool(rho)))
        }
    };
    SimulatedUser {
        user: r.user,
        target: r.item,
        item_attributes,
        preferred,
        mode,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    pub policy: PolicyConfig,
    pub flags: AblationFlags,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTrace {
    pub seed: u64,
    pub user: UserId,
    pub target: ItemId,
    pub steps: Vec<TurnRecord>,
    pub succeeded: bool,
    /// Acceptance turn, or T on failure.
    pub turns: usize,
    /// Questions answered yes.
    pub identified: usize,
    /// Attributes the user would affirm.
    pub mention_count: usize,
    pub trees_visited: Vec<usize>,
    pub final_delta: DenseVector,
}

impl EpisodeTrace {
    pub fn recommendations(&self) -> impl Iterator<Item = &TurnRecord> {
        self.steps.iter().filter(|s| s.action.is_recommend())
    }

    /// Trees that produced at least one action.
    pub fn trees_used(&self) -> Vec<usize> {
        let mut t: Vec<usize> = self.steps.iter().filter_map(|s| s.tree).collect();
        t.sort_unstable();
        t.dedup();
        t
    }
}

/// Drive one session with oracle answers until it ends.
pub fn run_episode(
    forest: &Arc<InteractionForest>,
    user: &SimulatedUser,
    config: &EpisodeConfig,
) -> EpisodeTrace {
    let mut session = Session::start(forest.clone(), config.policy.clone(), config.flags, config.seed);
    while let Some(action) = session.current_action() {
        let feedback = match &action {
            AgentAction::Ask { attribute } => {
                if user.oracle_answer(*attribute) {
                    UserFeedback::AnswerYes
                } else {
                    UserFeedback::AnswerNo
                }
            }
            AgentAction::Recommend { items } => {
                let ids: Vec<ItemId> = items.iter().map(|x| x.item).collect();
                if user.oracle_feedback(&ids) {
                    UserFeedback::Accept
                } else {
                    UserFeedback::Reject
                }
            }
        };
        session
            .respond(feedback)
            .expect("simulator replies to the pending action");
    }
    let state = session.state();
    EpisodeTrace {
        seed: config.seed,
        user: user.user,
        target: user.target,
        steps: session.history().to_vec(),
        succeeded: state.status == SessionStatus::Succeeded,
        turns: state.turns_used.unwrap_or(config.policy.max_turns),
        identified: state.answers.values().filter(|&&yes| yes).count(),
        mention_count: user.yes_set().count(),
        trees_visited: state.visited_trees.clone(),
        final_delta: state.delta.clone(),
    }
}

/// One JSON object per line.
pub fn write_traces_jsonl<W: Write>(traces: &[EpisodeTrace], mut out: W) -> io::Result<()> {
    for t in traces {
        serde_json::to_writer(&mut out, t)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_traces_jsonl(text: &str) -> serde_json::Result<Vec<EpisodeTrace>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(serde_json::from_str)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{AttributeVocabulary, InteractionRecord};

    fn tiny() -> Dataset {
        Dataset {
            num_users: 1,
            vocabulary: AttributeVocabulary::numbered(4),
            item_attributes: vec![AttrSet::from_indices(4, [0, 1, 3])],
            interactions: vec![InteractionRecord {
                user: 0,
                item: 0,
                mentions: AttrSet::from_indices(4, [1, 3]),
            }],
        }
    }

    #[test]
    fn recorded_yes_set_is_mentions() {
        let u = make_simulated_user(&tiny(), 0, SimulatorMode::Recorded, 0.5, 1);
        assert_eq!(u.yes_set().iter().collect::<Vec<_>>(), vec![1, 3]);
        assert!(!u.oracle_answer(0));
        assert!(!u.oracle_answer(2));
    }

    #[test]
    fn sampled_limits() {
        let all = make_simulated_user(&tiny(), 0, SimulatorMode::Sampled, 1.0, 1);
        assert_eq!(all.yes_set(), tiny().item_attributes[0]);
        let none = make_simulated_user(&tiny(), 0, SimulatorMode::Sampled, 0.0, 1);
        assert!((0..4).all(|a| !none.oracle_answer(a)));
    }

    #[test]
    fn feedback_is_containment() {
        let u = make_simulated_user(&tiny(), 0, SimulatorMode::Recorded, 0.5, 1);
        assert!(u.oracle_feedback(&[5, 6, 0]));
        assert!(u.oracle_feedback(&[0]));
        assert!(!u.oracle_feedback(&[5, 6]));
    }
}
