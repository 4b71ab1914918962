//! Corpus data model: attribute vocabulary, interaction records, TSV
//! ingestion, the planted-tree synthetic generator, and user-level splits.
//!
//! On-disk layout of a corpus directory:
//!
//! ```text
//! attributes.tsv    attr_id <TAB> label
//! items.tsv         item_id <TAB> comma-separated attr ids (the item's attribute set)
//! interactions.tsv  user_id <TAB> item_id <TAB> comma-separated attr ids (mentions)
//! ```
//!
//! Ids are dense non-negative integers starting at 0.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CorpusError;
use crate::seed::mix_seed;

pub type UserId = u32;
pub type ItemId = u32;
pub type AttrId = usize;

pub const ATTRIBUTES_FILE: &str = "attributes.tsv";
pub const ITEMS_FILE: &str = "items.tsv";
pub const INTERACTIONS_FILE: &str = "interactions.tsv";

/// Fixed-length bit set over attribute indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AttrSet {
    len: usize,
    words: Vec<u64>,
}

impl AttrSet {
    pub fn empty(len: usize) -> Self {
        AttrSet {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn from_indices(len: usize, indices: impl IntoIterator<Item = AttrId>) -> Self {
        let mut set = AttrSet::empty(len);
        for i in indices {
            set.insert(i);
        }
        set
    }

    /// Number of attribute slots (p), not the number of set bits.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn insert(&mut self, attr: AttrId) {
        assert!(attr < self.len, "attribute {attr} out of range {}", self.len);
        self.words[attr / 64] |= 1 << (attr % 64);
    }

    pub fn remove(&mut self, attr: AttrId) {
        if attr < self.len {
            self.words[attr / 64] &= !(1 << (attr % 64));
        }
    }

    pub fn contains(&self, attr: AttrId) -> bool {
        attr < self.len && self.words[attr / 64] & (1 << (attr % 64)) != 0
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = AttrId> + '_ {
        (0..self.len).filter(move |&a| self.contains(a))
    }

    pub fn is_subset(&self, other: &AttrSet) -> bool {
        self.words
            .iter()
            .zip(other.words.iter().chain(std::iter::repeat(&0)))
            .all(|(a, b)| a & !b == 0)
    }

    pub fn intersection(&self, other: &AttrSet) -> AttrSet {
        let words = self
            .words
            .iter()
            .zip(other.words.iter().chain(std::iter::repeat(&0)))
            .map(|(a, b)| a & b)
            .collect();
        AttrSet {
            len: self.len,
            words,
        }
    }

    fn to_field(&self) -> String {
        let mut out = String::new();
        for (k, a) in self.iter().enumerate() {
            if k > 0 {
                out.push(',');
            }
            let _ = write!(out, "{a}");
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeVocabulary {
    names: Vec<String>,
}

impl AttributeVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for name in &names {
            if !seen.insert(name.as_str()) {
                return Err(CorpusError::InvalidSpec(format!(
                    "duplicate attribute label `{name}`"
                )));
            }
        }
        Ok(AttributeVocabulary { names })
    }

    /// Vocabulary with generated labels `attr_0 .. attr_{p-1}`.
    pub fn numbered(p: usize) -> Self {
        AttributeVocabulary {
            names: (0..p).map(|i| format!("attr_{i}")).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn label(&self, attr: AttrId) -> Option<&str> {
        self.names.get(attr).map(String::as_str)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, label: &str) -> Option<AttrId> {
        self.names.iter().position(|n| n == label)
    }
}

/// One observed (user, item) pair and the attributes mentioned in it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: UserId,
    pub item: ItemId,
    pub mentions: AttrSet,
}

/// Warnings gathered while loading or validating a corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// Record indices whose mention vector is empty.
    pub empty_mentions: Vec<usize>,
    /// Record indices mentioning attributes outside the item's attribute set.
    pub mentions_outside_item: Vec<usize>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.empty_mentions.is_empty() && self.mentions_outside_item.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dataset {
    pub num_users: usize,
    pub vocabulary: AttributeVocabulary,
    /// F_i for every item; the item count n is this vector's length.
    pub item_attributes: Vec<AttrSet>,
    pub interactions: Vec<InteractionRecord>,
}

impl Dataset {
    pub fn num_items(&self) -> usize {
        self.item_attributes.len()
    }

    pub fn num_attributes(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn num_interactions(&self) -> usize {
        self.interactions.len()
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::default();
        for (idx, rec) in self.interactions.iter().enumerate() {
            if rec.mentions.is_empty() {
                report.empty_mentions.push(idx);
            }
            let item_attrs = &self.item_attributes[rec.item as usize];
            if !rec.mentions.is_subset(item_attrs) {
                report.mentions_outside_item.push(idx);
            }
        }
        report
    }

    /// Items each user interacted with, indexed by user id.
    pub fn user_histories(&self) -> Vec<BTreeSet<ItemId>> {
        let mut histories = vec![BTreeSet::new(); self.num_users];
        for rec in &self.interactions {
            histories[rec.user as usize].insert(rec.item);
        }
        histories
    }

    /// Indices of records whose user belongs to `users`.
    pub fn records_for_users(&self, users: &BTreeSet<UserId>) -> Vec<usize> {
        self.interactions
            .iter()
            .enumerate()
            .filter(|(_, r)| users.contains(&r.user))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<(), CorpusError> {
        fs::create_dir_all(dir)?;
        let mut attrs = String::new();
        for (i, name) in self.vocabulary.names().iter().enumerate() {
            let _ = writeln!(attrs, "{i}\t{name}");
        }
        fs::write(dir.join(ATTRIBUTES_FILE), attrs)?;

        let mut items = String::new();
        for (i, set) in self.item_attributes.iter().enumerate() {
            let _ = writeln!(items, "{i}\t{}", set.to_field());
        }
        fs::write(dir.join(ITEMS_FILE), items)?;

        let mut inter = String::new();
        for rec in &self.interactions {
            let _ = writeln!(
                inter,
                "{}\t{}\t{}",
                rec.user,
                rec.item,
                rec.mentions.to_field()
            );
        }
        fs::write(dir.join(INTERACTIONS_FILE), inter)?;
        Ok(())
    }
}

fn read_required(dir: &Path, name: &str) -> Result<String, CorpusError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(CorpusError::MissingFile(path));
    }
    Ok(fs::read_to_string(path)?)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn parse_id(field: &str, file: &str, line: usize, what: &str) -> Result<u64, CorpusError> {
    field.trim().parse::<u64>().map_err(|_| CorpusError::Malformed {
        file: file.to_string(),
        line,
        message: format!("invalid {what} `{field}`"),
    })
}

fn parse_attr_list(
    field: &str,
    p: usize,
    file: &str,
    line: usize,
) -> Result<AttrSet, CorpusError> {
    let mut set = AttrSet::empty(p);
    for tok in field.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let id = parse_id(tok, file, line, "attribute id")?;
        if id as usize >= p {
            return Err(CorpusError::UnknownId {
                kind: "attribute",
                id,
                file: file.to_string(),
                line,
            });
        }
        set.insert(id as usize);
    }
    Ok(set)
}

/// Load a corpus directory. Mentions outside F_i and empty mention vectors
/// are logged as warnings, not rejected.
pub fn load_dataset(dir: &Path) -> Result<(Dataset, ValidationReport), CorpusError> {
    let attrs_text = read_required(dir, ATTRIBUTES_FILE)?;
    let items_text = read_required(dir, ITEMS_FILE)?;
    let inter_text = read_required(dir, INTERACTIONS_FILE)?;

    let mut labels: Vec<Option<String>> = Vec::new();
    for (line, text) in data_lines(&attrs_text) {
        let (id, label) = text.split_once('\t').ok_or_else(|| CorpusError::Malformed {
            file: ATTRIBUTES_FILE.into(),
            line,
            message: "expected `attr_id<TAB>label`".into(),
        })?;
        let id = parse_id(id, ATTRIBUTES_FILE, line, "attribute id")? as usize;
        if labels.len() <= id {
            labels.resize(id + 1, None);
        }
        if labels[id].replace(label.to_string()).is_some() {
            return Err(CorpusError::Malformed {
                file: ATTRIBUTES_FILE.into(),
                line,
                message: format!("duplicate attribute id {id}"),
            });
        }
    }
    let names = labels
        .into_iter()
        .enumerate()
        .map(|(i, l)| {
            l.ok_or_else(|| CorpusError::Malformed {
                file: ATTRIBUTES_FILE.into(),
                line: 0,
                message: format!("attribute ids are not dense: {i} is missing"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let vocabulary = AttributeVocabulary::new(names)?;
    let p = vocabulary.len();

    let mut item_sets: Vec<Option<AttrSet>> = Vec::new();
    for (line, text) in data_lines(&items_text) {
        let (id, rest) = text.split_once('\t').unwrap_or((text, ""));
        let id = parse_id(id, ITEMS_FILE, line, "item id")? as usize;
        let set = parse_attr_list(rest, p, ITEMS_FILE, line)?;
        if item_sets.len() <= id {
            item_sets.resize(id + 1, None);
        }
        if item_sets[id].replace(set).is_some() {
            return Err(CorpusError::Malformed {
                file: ITEMS_FILE.into(),
                line,
                message: format!("duplicate item id {id}"),
            });
        }
    }
    let item_attributes = item_sets
        .into_iter()
        .enumerate()
        .map(|(i, s)| {
            s.ok_or_else(|| CorpusError::Malformed {
                file: ITEMS_FILE.into(),
                line: 0,
                message: format!("item ids are not dense: {i} is missing"),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    let n = item_attributes.len();

    let mut interactions = Vec::new();
    let mut max_user: Option<u32> = None;
    for (line, text) in data_lines(&inter_text) {
        let mut fields = text.splitn(3, '\t');
        let user = fields.next().unwrap_or("");
        let item = fields.next().ok_or_else(|| CorpusError::Malformed {
            file: INTERACTIONS_FILE.into(),
            line,
            message: "expected `user_id<TAB>item_id<TAB>attr_ids`".into(),
        })?;
        let mentions = fields.next().unwrap_or("");
        let user = parse_id(user, INTERACTIONS_FILE, line, "user id")?;
        let user = u32::try_from(user).map_err(|_| CorpusError::Malformed {
            file: INTERACTIONS_FILE.into(),
            line,
            message: format!("user id {user} too large"),
        })?;
        let item = parse_id(item, INTERACTIONS_FILE, line, "item id")?;
        if item as usize >= n {
            return Err(CorpusError::UnknownId {
                kind: "item",
                id: item,
                file: INTERACTIONS_FILE.into(),
                line,
            });
        }
        let mentions = parse_attr_list(mentions, p, INTERACTIONS_FILE, line)?;
        max_user = Some(max_user.map_or(user, |m| m.max(user)));
        interactions.push(InteractionRecord {
            user,
            item: item as ItemId,
            mentions,
        });
    }

    let dataset = Dataset {
        num_users: max_user.map_or(0, |m| m as usize + 1),
        vocabulary,
        item_attributes,
        interactions,
    };
    let report = dataset.validate();
    if !report.empty_mentions.is_empty() {
        warn!(
            "{} interaction(s) have no mentioned attributes",
            report.empty_mentions.len()
        );
    }
    if !report.mentions_outside_item.is_empty() {
        warn!(
            "{} interaction(s) mention attributes outside the item's attribute set",
            report.mentions_outside_item.len()
        );
    }
    Ok((dataset, report))
}

/// Parameters of the planted-tree synthetic corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub attributes: usize,
    pub interactions: usize,
    pub depth: usize,
    /// Probability of flipping each mention bit relative to F_i.
    pub noise: f64,
    /// Probability that a user picks an item from their home subtree.
    pub affinity: f64,
    /// Probability that an item carries each attribute the planted tree does not use.
    pub decoration_rate: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(users: usize, items: usize, attributes: usize, interactions: usize) -> Self {
        SyntheticSpec {
            users,
            items,
            attributes,
            interactions,
            depth: 3,
            noise: 0.0,
            affinity: 0.8,
            decoration_rate: 0.25,
            seed: 0,
        }
    }

    pub fn depth(mut self, depth: usize) -> Self {
        self.depth = depth;
        self
    }

    pub fn noise(mut self, noise: f64) -> Self {
        self.noise = noise;
        self
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn affinity(mut self, affinity: f64) -> Self {
        self.affinity = affinity;
        self
    }

    pub fn decoration_rate(mut self, rate: f64) -> Self {
        self.decoration_rate = rate;
        self
    }
}

/// Internal node of the hidden attribute tree. Items in the `yes` subtree
/// carry `attribute`; items in the `no` subtree do not.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedNode {
    pub attribute: AttrId,
    pub depth: usize,
}

/// Complete binary tree in heap order: node k has children 2k+1 (yes) and 2k+2 (no).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedTree {
    pub depth: usize,
    pub nodes: Vec<PlantedNode>,
    /// Leaf index (0..2^depth) of every item.
    pub item_leaf: Vec<usize>,
}

impl PlantedTree {
    pub fn root_attribute(&self) -> Option<AttrId> {
        self.nodes.first().map(|n| n.attribute)
    }

    pub fn attributes_used(&self) -> BTreeSet<AttrId> {
        self.nodes.iter().map(|n| n.attribute).collect()
    }

    /// Heap index of the subtree root at `level` on the path to `leaf`.
    fn ancestor(&self, leaf: usize, level: usize) -> usize {
        let mut node = 0;
        for l in 0..level {
            let bit = (leaf >> (self.depth - 1 - l)) & 1;
            node = 2 * node + 1 + bit;
        }
        node
    }

    /// F_i implied by a leaf: the attributes of every node where the path takes the yes branch.
    fn leaf_attributes(&self, leaf: usize) -> Vec<AttrId> {
        (0..self.depth)
            .filter(|&l| (leaf >> (self.depth - 1 - l)) & 1 == 0)
            .map(|l| self.nodes[self.ancestor(leaf, l)].attribute)
            .collect()
    }
}

/// Generate a corpus whose item attribute sets come from a hidden binary
/// attribute tree. Deterministic under `spec.seed`.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(Dataset, PlantedTree), CorpusError> {
    let SyntheticSpec {
        users: m,
        items: n,
        attributes: p,
        interactions: q,
        depth,
        ..
    } = *spec;
    if m == 0 || n == 0 || p == 0 {
        return Err(CorpusError::InvalidSpec("m, n and p must be at least 1".into()));
    }
    if depth > p {
        return Err(CorpusError::InvalidSpec(format!(
            "planted depth {depth} exceeds attribute count {p}"
        )));
    }
    if q > m * n {
        return Err(CorpusError::InvalidSpec(format!(
            "{q} interactions cannot be drawn without repeats from {m} users x {n} items"
        )));
    }
    for (name, v) in [
        ("noise", spec.noise),
        ("affinity", spec.affinity),
        ("decoration_rate", spec.decoration_rate),
    ] {
        if !(0.0..=1.0).contains(&v) {
            return Err(CorpusError::InvalidSpec(format!("{name} must be in [0, 1]")));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Attribute per internal node, in heap order, cycling through a random
    // permutation and skipping attributes already used on the ancestor path.
    let mut order: Vec<AttrId> = (0..p).collect();
    order.shuffle(&mut rng);
    let internal = (1usize << depth) - 1;
    let mut nodes: Vec<PlantedNode> = Vec::with_capacity(internal);
    let mut cursor = 0usize;
    for k in 0..internal {
        let node_depth = (usize::BITS - (k + 1).leading_zeros() - 1) as usize;
        let mut path = Vec::with_capacity(node_depth);
        let mut a = k;
        while a > 0 {
            a = (a - 1) / 2;
            path.push(nodes[a].attribute);
        }
        let attribute = loop {
            let cand = order[cursor % p];
            cursor += 1;
            if !path.contains(&cand) {
                break cand;
            }
        };
        nodes.push(PlantedNode {
            attribute,
            depth: node_depth,
        });
    }

    let leaves = 1usize << depth;
    let mut item_order: Vec<usize> = (0..n).collect();
    item_order.shuffle(&mut rng);
    let mut item_leaf = vec![0; n];
    for (k, &item) in item_order.iter().enumerate() {
        item_leaf[item] = k % leaves;
    }
    let planted = PlantedTree {
        depth,
        nodes,
        item_leaf,
    };

    let used = planted.attributes_used();
    let decorations: Vec<AttrId> = (0..p).filter(|a| !used.contains(a)).collect();
    let item_attributes: Vec<AttrSet> = (0..n)
        .map(|i| {
            let mut set = AttrSet::from_indices(p, planted.leaf_attributes(planted.item_leaf[i]));
            for &a in &decorations {
                if rng.gen::<f64>() < spec.decoration_rate {
                    set.insert(a);
                }
            }
            set
        })
        .collect();

    // Each user has a home subtree one level below the root; most of their
    // interactions fall inside it.
    let home_level = depth.min(1);
    let home: Vec<usize> = (0..m)
        .map(|_| rng.gen_range(0..(1usize << home_level)))
        .collect();
    let items_in_home = |h: usize| -> Vec<ItemId> {
        (0..n)
            .filter(|&i| planted.item_leaf[i] >> (depth - home_level) == h)
            .map(|i| i as ItemId)
            .collect()
    };
    let home_items: Vec<Vec<ItemId>> = (0..(1usize << home_level)).map(items_in_home).collect();

    let mut taken: Vec<BTreeSet<ItemId>> = vec![BTreeSet::new(); m];
    let mut pairs: Vec<(UserId, ItemId)> = Vec::with_capacity(q);
    for r in 0..q {
        let mut user = if r < m { r } else { rng.gen_range(0..m) };
        while taken[user].len() == n {
            user = (user + 1) % m;
        }
        let preferred: Vec<ItemId> = home_items[home[user]]
            .iter()
            .copied()
            .filter(|i| !taken[user].contains(i))
            .collect();
        let item = if !preferred.is_empty() && rng.gen::<f64>() < spec.affinity {
            preferred[rng.gen_range(0..preferred.len())]
        } else {
            let open: Vec<ItemId> = (0..n as ItemId)
                .filter(|i| !taken[user].contains(i))
                .collect();
            open[rng.gen_range(0..open.len())]
        };
        taken[user].insert(item);
        pairs.push((user as UserId, item));
    }
    pairs.sort_unstable();

    let interactions = pairs
        .into_iter()
        .map(|(user, item)| {
            let base = &item_attributes[item as usize];
            let mut mentions = base.clone();
            if spec.noise > 0.0 {
                for a in 0..p {
                    if rng.gen::<f64>() < spec.noise {
                        if mentions.contains(a) {
                            mentions.remove(a);
                        } else {
                            mentions.insert(a);
                        }
                    }
                }
            }
            InteractionRecord {
                user,
                item,
                mentions,
            }
        })
        .collect();

    let dataset = Dataset {
        num_users: m,
        vocabulary: AttributeVocabulary::numbered(p),
        item_attributes,
        interactions,
    };
    Ok((dataset, planted))
}

/// Disjoint train/validation/test user groups in an 8:1:1 ratio.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataSplit {
    pub train_users: BTreeSet<UserId>,
    pub validation_users: BTreeSet<UserId>,
    pub test_users: BTreeSet<UserId>,
    pub seed: u64,
}

pub fn split_by_user(dataset: &Dataset, seed: u64) -> Result<DataSplit, CorpusError> {
    let m = dataset.num_users;
    if m < 10 {
        return Err(CorpusError::TooFewUsers { users: m });
    }
    let mut users: Vec<UserId> = (0..m as UserId).collect();
    users.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x5011)));
    let n_train = m * 8 / 10;
    let n_val = m / 10;
    Ok(DataSplit {
        train_users: users[..n_train].iter().copied().collect(),
        validation_users: users[n_train..n_train + n_val].iter().copied().collect(),
        test_users: users[n_train + n_val..].iter().copied().collect(),
        seed,
    })
}
