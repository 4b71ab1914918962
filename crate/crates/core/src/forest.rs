//! Forests of interaction trees over one shared item embedding table, and
//! the binary model file.
//!
//! Model file layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "FACTCRS\0"
//! version   u32      currently 1
//! length    u64      payload length in bytes
//! payload   sections, each: tag [u8; 4] | body length u64 | body
//!             CONF  run configuration in `key = value` form
//!             VOCB  attribute labels
//!             ITEM  item embedding table
//!             TREE  one per tree, in forest order
//! checksum  32 bytes SHA-256 of the payload
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::corpus::{AttrId, AttributeVocabulary, DataSplit, Dataset, ItemId};
use crate::embeddings::{build_examples, ItemEmbeddingTable, TrainingExample};
use crate::error::{Error, ModelError, Result};
use crate::facttree::{build_tree, build_tree_frozen, BuildLog, InteractionTree, TreeNode};
use crate::seed::mix_seed;

pub const MODEL_MAGIC: &[u8; 8] = b"FACTCRS\0";
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionForest {
    pub trees: Vec<InteractionTree>,
    pub items: ItemEmbeddingTable,
    pub vocabulary: AttributeVocabulary,
    pub config: RunConfig,
}

impl InteractionForest {
    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn dim(&self) -> usize {
        self.items.dim()
    }
}

/// Per-tree attribute pools and build logs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForestBuildLog {
    pub pools: Vec<Vec<AttrId>>,
    pub trees: Vec<BuildLog>,
}

/// Uniform `f_max`-subset of `0..p` for tree `tree`, sorted.
pub fn sample_pool(p: usize, f_max: usize, seed: u64, tree: usize) -> Vec<AttrId> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x9001 + tree as u64));
    let mut pool = rand::seq::index::sample(&mut rng, p, f_max.min(p)).into_vec();
    pool.sort_unstable();
    pool
}

/// Build `num_trees` trees. Tree 0 trains the shared item table; the table is
/// then frozen and the remaining trees are built against it in parallel.
/// With `joint_refinement`, every tree trains the table, sequentially.
pub fn build_forest(
    examples: &[TrainingExample],
    vocabulary: &AttributeVocabulary,
    n_items: usize,
    config: &RunConfig,
) -> Result<(InteractionForest, ForestBuildLog)> {
    if examples.is_empty() {
        return Err(Error::Invalid("cannot build a forest without training records".into()));
    }
    let p = vocabulary.len();
    let f_max = config.forest.resolved_f_max(p);
    let n_trees = config.forest.num_trees.max(1);
    let pools: Vec<Vec<AttrId>> = (0..n_trees)
        .map(|j| sample_pool(p, f_max, config.seed, j))
        .collect();

    let mut table = ItemEmbeddingTable::random(
        n_items,
        config.forest.dim,
        config.optimizer.init_scale,
        mix_seed(config.seed, 0x7AB1E),
    );

    let mut trees = Vec::with_capacity(n_trees);
    let mut logs = Vec::with_capacity(n_trees);
    let (first, first_log) = build_tree(examples, &pools[0], &mut table, &config.optimizer, &config.tree)?;
    trees.push(first);
    logs.push(first_log);

    if config.forest.joint_refinement {
        for pool in &pools[1..] {
            let (t, l) = build_tree(examples, pool, &mut table, &config.optimizer, &config.tree)?;
            trees.push(t);
            logs.push(l);
        }
        table.frozen = true;
    } else {
        table.frozen = true;
        let rest = pools[1..]
            .par_iter()
            .map(|pool| build_tree_frozen(examples, pool, &table, &config.optimizer, &config.tree))
            .collect::<Result<Vec<_>>>()?;
        for (t, l) in rest {
            trees.push(t);
            logs.push(l);
        }
    }

    let forest = InteractionForest {
        trees,
        items: table,
        vocabulary: vocabulary.clone(),
        config: config.clone(),
    };
    Ok((forest, ForestBuildLog { pools, trees: logs }))
}

/// Train on the records of the split's training users.
pub fn train_forest(
    dataset: &Dataset,
    split: &DataSplit,
    config: &RunConfig,
) -> Result<(InteractionForest, ForestBuildLog)> {
    let records = dataset.records_for_users(&split.train_users);
    let examples = build_examples(
        dataset,
        &records,
        config.optimizer.negatives_per_positive,
        config.seed,
    );
    build_forest(&examples, &dataset.vocabulary, dataset.num_items(), config)
}

// --- model file -----------------------------------------------------------

const NONE: u32 = u32::MAX;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len_u32(&mut self, v: usize) {
        self.u32(u32::try_from(v).expect("length fits in u32"));
    }
    fn opt(&mut self, v: Option<usize>) {
        self.u32(v.map_or(NONE, |x| x as u32));
    }
    fn bytes(&mut self, b: &[u8]) {
        self.len_u32(b.len());
        self.0.extend_from_slice(b);
    }
    fn section(&mut self, tag: &[u8; 4], body: Writer) {
        self.0.extend_from_slice(tag);
        self.u64(body.0.len() as u64);
        self.0.extend_from_slice(&body.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self.pos.checked_add(n).ok_or(ModelError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(ModelError::Truncated)?;
        self.pos = end;
        Ok(out)
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64, ModelError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn opt(&mut self) -> Result<Option<usize>, ModelError> {
        let v = self.u32()?;
        Ok((v != NONE).then_some(v as usize))
    }
    fn bytes(&mut self) -> Result<&'a [u8], ModelError> {
        let n = self.u32()? as usize;
        self.take(n)
    }
    fn string(&mut self) -> Result<String, ModelError> {
        String::from_utf8(self.bytes()?.to_vec())
            .map_err(|_| ModelError::Corrupt("invalid UTF-8".into()))
    }
}

fn encode_tree(tree: &InteractionTree) -> Writer {
    let mut w = Writer(Vec::new());
    w.len_u32(tree.attribute_pool.len());
    for &a in &tree.attribute_pool {
        w.len_u32(a);
    }
    w.len_u32(tree.max_depth);
    w.len_u32(tree.nodes.len());
    for node in &tree.nodes {
        w.len_u32(node.depth);
        w.opt(node.split_attribute);
        w.opt(node.children.map(|c| c.0));
        w.opt(node.children.map(|c| c.1));
        w.len_u32(node.embedding.len());
        for &x in &node.embedding {
            w.f64(x);
        }
        w.u64(node.interaction_count as u64);
        w.len_u32(node.candidate_items.len());
        for &i in &node.candidate_items {
            w.u32(i);
        }
        w.f64(node.gini);
    }
    w
}

fn decode_tree(r: &mut Reader<'_>) -> Result<InteractionTree, ModelError> {
    let pool_len = r.u32()? as usize;
    let attribute_pool = (0..pool_len)
        .map(|_| r.u32().map(|a| a as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let max_depth = r.u32()? as usize;
    let count = r.u32()? as usize;
    let mut nodes = Vec::with_capacity(count.min(1 << 20));
    for id in 0..count {
        let depth = r.u32()? as usize;
        let split_attribute = r.opt()?;
        let children = match (r.opt()?, r.opt()?) {
            (Some(a), Some(b)) => Some((a, b)),
            (None, None) => None,
            _ => return Err(ModelError::Corrupt(format!("node {id} has one child"))),
        };
        let dim = r.u32()? as usize;
        let embedding = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>, _>>()?;
        let interaction_count = r.u64()? as usize;
        let n_items = r.u32()? as usize;
        let candidate_items = (0..n_items)
            .map(|_| r.u32().map(|i| i as ItemId))
            .collect::<Result<Vec<_>, _>>()?;
        let gini = r.f64()?;
        nodes.push(TreeNode {
            id,
            depth,
            split_attribute,
            children,
            embedding,
            interaction_count,
            candidate_items,
            gini,
        });
    }
    for node in &nodes {
        if let Some((a, b)) = node.children {
            if a >= count || b >= count {
                return Err(ModelError::Corrupt(format!("node {} child out of range", node.id)));
            }
        }
        if node.children.is_some() != node.split_attribute.is_some() {
            return Err(ModelError::Corrupt(format!("node {} split/children mismatch", node.id)));
        }
    }
    if nodes.is_empty() {
        return Err(ModelError::Corrupt("tree without nodes".into()));
    }
    Ok(InteractionTree {
        nodes,
        attribute_pool,
        max_depth,
    })
}

/// Serialize a forest to the model file format.
pub fn encode_model(forest: &InteractionForest) -> Vec<u8> {
    let mut payload = Writer(Vec::new());

    let mut conf = Writer(Vec::new());
    conf.0.extend_from_slice(forest.config.to_text().as_bytes());
    payload.section(b"CONF", conf);

    let mut vocab = Writer(Vec::new());
    vocab.len_u32(forest.vocabulary.len());
    for name in forest.vocabulary.names() {
        vocab.bytes(name.as_bytes());
    }
    payload.section(b"VOCB", vocab);

    let mut items = Writer(Vec::new());
    items.len_u32(forest.items.len());
    items.len_u32(forest.items.dim());
    items.u8(forest.items.frozen as u8);
    for &x in forest.items.raw() {
        items.f64(x);
    }
    payload.section(b"ITEM", items);

    for tree in &forest.trees {
        payload.section(b"TREE", encode_tree(tree));
    }

    let mut out = Writer(Vec::with_capacity(payload.0.len() + 52));
    out.0.extend_from_slice(MODEL_MAGIC);
    out.u32(MODEL_VERSION);
    out.u64(payload.0.len() as u64);
    out.0.extend_from_slice(&payload.0);
    out.0.extend_from_slice(&Sha256::digest(&payload.0));
    out.0
}

pub fn decode_model(bytes: &[u8]) -> Result<InteractionForest, ModelError> {
    let mut r = Reader::new(bytes);
    let magic = r.take(8)?;
    if magic != MODEL_MAGIC {
        return Err(ModelError::VersionMismatch {
            found: format!("magic {}", String::from_utf8_lossy(magic).escape_debug()),
        });
    }
    let version = r.u32()?;
    if version != MODEL_VERSION {
        return Err(ModelError::VersionMismatch {
            found: format!("version {version}"),
        });
    }
    let len = usize::try_from(r.u64()?).map_err(|_| ModelError::Truncated)?;
    let payload = r.take(len)?;
    let checksum = r.take(32)?;
    if Sha256::digest(payload).as_slice() != checksum {
        return Err(ModelError::ChecksumMismatch);
    }
    if !r.done() {
        return Err(ModelError::Corrupt("trailing bytes after checksum".into()));
    }

    let mut config = None;
    let mut vocabulary = None;
    let mut items = None;
    let mut trees = Vec::new();
    let mut p = Reader::new(payload);
    while !p.done() {
        let tag: [u8; 4] = p.take(4)?.try_into().unwrap();
        let body_len = usize::try_from(p.u64()?).map_err(|_| ModelError::Truncated)?;
        let mut body = Reader::new(p.take(body_len)?);
        match &tag {
            b"CONF" => {
                let text = std::str::from_utf8(body.buf)
                    .map_err(|_| ModelError::Corrupt("config is not UTF-8".into()))?;
                config = Some(RunConfig::parse_text(text)?);
                body.pos = body.buf.len();
            }
            b"VOCB" => {
                let count = body.u32()? as usize;
                let names = (0..count)
                    .map(|_| body.string())
                    .collect::<Result<Vec<_>, _>>()?;
                vocabulary = Some(
                    AttributeVocabulary::new(names)
                        .map_err(|e| ModelError::Corrupt(e.to_string()))?,
                );
            }
            b"ITEM" => {
                let n = body.u32()? as usize;
                let d = body.u32()? as usize;
                let frozen = body.u8()? != 0;
                let data = (0..n * d).map(|_| body.f64()).collect::<Result<Vec<_>, _>>()?;
                items = Some(ItemEmbeddingTable::from_raw(n, d, data, frozen));
            }
            b"TREE" => trees.push(decode_tree(&mut body)?),
            other => {
                return Err(ModelError::Corrupt(format!(
                    "unknown section {}",
                    String::from_utf8_lossy(other)
                )))
            }
        }
        if !body.done() {
            return Err(ModelError::Corrupt(format!(
                "section {} has trailing bytes",
                String::from_utf8_lossy(&tag)
            )));
        }
    }
    let missing = |s: &str| ModelError::Corrupt(format!("missing {s} section"));
    Ok(InteractionForest {
        trees,
        items: items.ok_or_else(|| missing("ITEM"))?,
        vocabulary: vocabulary.ok_or_else(|| missing("VOCB"))?,
        config: config.ok_or_else(|| missing("CONF"))?,
    })
}

pub fn save_model(forest: &InteractionForest, path: &Path) -> Result<(), ModelError> {
    fs::write(path, encode_model(forest))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<InteractionForest, ModelError> {
    decode_model(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::AttrSet;
    use crate::facttree::TreeConfig;

    fn toy_examples() -> Vec<TrainingExample> {
        let p = 4;
        (0..24)
            .map(|k| TrainingExample {
                item: (k % 6) as ItemId,
                mentions: AttrSet::from_indices(p, (0..p).filter(|a| (k >> a) & 1 == 1)),
                negatives: vec![((k + 1) % 6) as ItemId],
            })
            .collect()
    }

    fn toy_config(trees: usize) -> RunConfig {
        let mut c = RunConfig::default();
        c.forest.num_trees = trees;
        c.forest.dim = 3;
        c.forest.f_max = Some(2);
        c.optimizer.epochs_commit = 10;
        c.optimizer.epochs_search = 5;
        c.tree = TreeConfig {
            max_depth: 2,
            ..Default::default()
        };
        c
    }

    #[test]
    fn pools_are_sorted_subsets() {
        let pool = sample_pool(8, 4, 1, 0);
        assert_eq!(pool.len(), 4);
        assert!(pool.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(sample_pool(8, 8, 1, 3), (0..8).collect::<Vec<_>>());
        assert_eq!(sample_pool(8, 4, 1, 2), sample_pool(8, 4, 1, 2));
    }

    #[test]
    fn single_tree_forest_matches_build_tree() {
        let examples = toy_examples();
        let vocab = AttributeVocabulary::numbered(4);
        let cfg = toy_config(1);
        let (forest, log) = build_forest(&examples, &vocab, 6, &cfg).unwrap();
        assert_eq!(forest.trees.len(), 1);
        assert!(forest.items.frozen);

        let mut table = ItemEmbeddingTable::random(6, 3, cfg.optimizer.init_scale, mix_seed(cfg.seed, 0x7AB1E));
        let (tree, _) = build_tree(&examples, &log.pools[0], &mut table, &cfg.optimizer, &cfg.tree).unwrap();
        assert_eq!(forest.trees[0], tree);
        assert_eq!(forest.items.raw(), table.raw());
    }

    #[test]
    fn model_roundtrip_is_bit_exact() {
        let examples = toy_examples();
        let vocab = AttributeVocabulary::numbered(4);
        let (forest, _) = build_forest(&examples, &vocab, 6, &toy_config(2)).unwrap();
        let bytes = encode_model(&forest);
        let back = decode_model(&bytes).unwrap();
        assert_eq!(back, forest);
        assert_eq!(encode_model(&back), bytes);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let examples = toy_examples();
        let vocab = AttributeVocabulary::numbered(4);
        let (forest, _) = build_forest(&examples, &vocab, 6, &toy_config(2)).unwrap();
        let bytes = encode_model(&forest);

        let mut bad_magic = bytes.clone();
        bad_magic[0] ^= 0xFF;
        assert!(matches!(decode_model(&bad_magic), Err(ModelError::VersionMismatch { .. })));

        let mut bad_version = bytes.clone();
        bad_version[8] = 9;
        assert!(matches!(decode_model(&bad_version), Err(ModelError::VersionMismatch { .. })));

        assert!(matches!(decode_model(&bytes[..bytes.len() - 40]), Err(ModelError::Truncated)));

        let mut flipped = bytes.clone();
        flipped[40] ^= 1;
        assert!(matches!(decode_model(&flipped), Err(ModelError::ChecksumMismatch)));
    }
}
