//! Conversational recommendation over forests of attribute-split
//! factorization trees.
//!
//! Training fits a shared item embedding table together with one embedding
//! per tree node; a session then descends the trees by asking attribute
//! questions and recommends top-K items scored against the node embeddings.

pub mod config;
pub mod corpus;
pub mod embeddings;
pub mod error;
pub mod eval;
pub mod facttree;
pub mod forest;
pub mod policy;
pub mod seed;
pub mod simulator;

pub use config::{ForestConfig, RunConfig};
pub use corpus::{
    generate_synthetic, load_dataset, split_by_user, AttrId, AttrSet, AttributeVocabulary,
    DataSplit, Dataset, InteractionRecord, ItemId, SyntheticSpec, UserId,
};
pub use error::{Error, Result};
pub use forest::{build_forest, load_model, save_model, train_forest, InteractionForest};
pub use policy::{AblationFlags, AgentAction, PolicyConfig, Session, SessionStatus, UserFeedback};
pub use seed::mix_seed;
pub use simulator::{EpisodeTrace, SimulatorMode};
