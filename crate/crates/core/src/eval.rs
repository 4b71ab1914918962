//! Benchmark runner: one simulated episode per held-out interaction, then
//! success-rate / average-turn metrics and the per-turn, per-leaf and
//! per-mention-count breakdowns.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::corpus::{DataSplit, Dataset};
use crate::error::{Error, Result};
use crate::forest::InteractionForest;
use crate::policy::AblationFlags;
use crate::seed::mix_seed;
use crate::simulator::{make_simulated_user, run_episode, EpisodeConfig, EpisodeTrace};

/// Fraction of episodes that succeeded at turn `t` or earlier.
pub fn success_rate_at(traces: &[EpisodeTrace], t: usize) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::Invalid("no episodes".into()));
    }
    let hits = traces.iter().filter(|e| e.succeeded && e.turns <= t).count();
    Ok(hits as f64 / traces.len() as f64)
}

/// Mean turn count; failed episodes already carry T.
pub fn average_turns(traces: &[EpisodeTrace]) -> Result<f64> {
    if traces.is_empty() {
        return Err(Error::Invalid("no episodes".into()));
    }
    Ok(traces.iter().map(|e| e.turns as f64).sum::<f64>() / traces.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnStats {
    pub turn: usize,
    /// Episodes still running at the start of this turn.
    pub active: usize,
    pub recommendations: usize,
    pub successes: usize,
    pub rec_ratio: f64,
    pub success_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub value: usize,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub episodes: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MentionStats {
    pub succeeded: Option<MeanStd>,
    pub failed: Option<MeanStd>,
    pub all: Option<MeanStd>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalRate {
    pub min_mentions: usize,
    pub episodes: usize,
    pub success_rate: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub mention_count: usize,
    pub identified: usize,
    pub episodes: usize,
    pub success_rate: Option<f64>,
    /// More identified attributes than mentioned ones cannot occur.
    pub impossible: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub episodes: usize,
    pub max_turns: usize,
    /// Entry `t-1` is the success rate within `t` turns.
    pub success_rate: Vec<f64>,
    pub average_turns: f64,
    pub per_turn: Vec<TurnStats>,
    pub leaf_item_histogram: Vec<HistogramBin>,
    pub item_leaf_spread: Vec<HistogramBin>,
    pub mention_stats: MentionStats,
    pub sr_by_min_mentions: Vec<ConditionalRate>,
    pub identified_matrix: Vec<MatrixCell>,
    pub disabled_components: Vec<String>,
    pub config: String,
}

impl BenchmarkReport {
    pub fn final_success_rate(&self) -> f64 {
        self.success_rate.last().copied().unwrap_or(0.0)
    }
}

fn histogram(values: impl IntoIterator<Item = usize>) -> Vec<HistogramBin> {
    let mut bins: BTreeMap<usize, usize> = BTreeMap::new();
    for v in values {
        *bins.entry(v).or_default() += 1;
    }
    bins.into_iter()
        .map(|(value, count)| HistogramBin { value, count })
        .collect()
}

fn mean_std(values: &[usize]) -> Option<MeanStd> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    Some(MeanStd {
        episodes: values.len(),
        mean,
        std: var.sqrt(),
    })
}

/// Leaf sizes, and for every item the number of leaves holding it, summed
/// over the trees of the forest.
pub fn leaf_histograms(forest: &InteractionForest) -> (Vec<HistogramBin>, Vec<HistogramBin>) {
    let sizes = forest
        .trees
        .iter()
        .flat_map(|t| t.leaves().map(|l| l.candidate_items.len()));
    let spread = forest.trees.iter().flat_map(|t| {
        let mut per_item = vec![0usize; forest.num_items()];
        for leaf in t.leaves() {
            for &i in &leaf.candidate_items {
                per_item[i as usize] += 1;
            }
        }
        per_item
    });
    (histogram(sizes), histogram(spread))
}

/// Per-episode statistics that depend on traces alone.
pub fn analytics_report(traces: &[EpisodeTrace], max_turns: usize) -> Result<BenchmarkReport> {
    let success_rate = (1..=max_turns)
        .map(|t| success_rate_at(traces, t))
        .collect::<Result<Vec<_>>>()?;
    let average_turns = average_turns(traces)?;

    let per_turn = (1..=max_turns)
        .map(|turn| {
            let active = traces.iter().filter(|e| e.steps.len() >= turn).count();
            let recommendations = traces
                .iter()
                .filter(|e| e.steps.get(turn - 1).is_some_and(|s| s.action.is_recommend()))
                .count();
            let successes = traces.iter().filter(|e| e.succeeded && e.turns == turn).count();
            let ratio = |x: usize| if active == 0 { 0.0 } else { x as f64 / active as f64 };
            TurnStats {
                turn,
                active,
                recommendations,
                successes,
                rec_ratio: ratio(recommendations),
                success_ratio: ratio(successes),
            }
        })
        .collect();

    let counts = |pred: &dyn Fn(&EpisodeTrace) -> bool| -> Vec<usize> {
        traces.iter().filter(|e| pred(e)).map(|e| e.mention_count).collect()
    };
    let mention_stats = MentionStats {
        succeeded: mean_std(&counts(&|e| e.succeeded)),
        failed: mean_std(&counts(&|e| !e.succeeded)),
        all: mean_std(&counts(&|_| true)),
    };

    let sr_by_min_mentions = [3, 4, 5, 6]
        .into_iter()
        .map(|min| {
            let sel: Vec<&EpisodeTrace> = traces.iter().filter(|e| e.mention_count >= min).collect();
            let wins = sel.iter().filter(|e| e.succeeded).count();
            ConditionalRate {
                min_mentions: min,
                episodes: sel.len(),
                success_rate: (!sel.is_empty()).then(|| wins as f64 / sel.len() as f64),
            }
        })
        .collect();

    let max_pn = traces.iter().map(|e| e.mention_count).max().unwrap_or(0);
    let mut cells: BTreeMap<(usize, usize), (usize, usize)> = BTreeMap::new();
    for e in traces {
        let c = cells.entry((e.mention_count, e.identified)).or_default();
        c.0 += 1;
        c.1 += e.succeeded as usize;
    }
    let mut identified_matrix = Vec::new();
    for pn in 0..=max_pn {
        for pk in 0..=max_pn {
            let (episodes, wins) = cells.get(&(pn, pk)).copied().unwrap_or((0, 0));
            identified_matrix.push(MatrixCell {
                mention_count: pn,
                identified: pk,
                episodes,
                success_rate: (episodes > 0).then(|| wins as f64 / episodes as f64),
                impossible: pk > pn,
            });
        }
    }

    Ok(BenchmarkReport {
        episodes: traces.len(),
        max_turns,
        success_rate,
        average_turns,
        per_turn,
        leaf_item_histogram: Vec::new(),
        item_leaf_spread: Vec::new(),
        mention_stats,
        sr_by_min_mentions,
        identified_matrix,
        disabled_components: Vec::new(),
        config: String::new(),
    })
}

/// Run every test-user interaction as one episode.
pub fn run_benchmark(
    forest: &Arc<InteractionForest>,
    dataset: &Dataset,
    split: &DataSplit,
    flags: AblationFlags,
    config: &RunConfig,
) -> Result<(BenchmarkReport, Vec<EpisodeTrace>)> {
    if forest.vocabulary != dataset.vocabulary {
        return Err(Error::Invalid(
            "model vocabulary does not match the dataset's attributes".into(),
        ));
    }
    if forest.num_items() != dataset.num_items() {
        return Err(Error::Invalid(format!(
            "model has {} items, dataset has {}",
            forest.num_items(),
            dataset.num_items()
        )));
    }
    let records = dataset.records_for_users(&split.test_users);
    if records.is_empty() {
        return Err(Error::Invalid("no test interactions".into()));
    }
    let traces: Vec<EpisodeTrace> = records
        .par_iter()
        .enumerate()
        .map(|(k, &r)| {
            let seed = mix_seed(config.seed, k as u64);
            let user = make_simulated_user(dataset, r, config.simulator_mode, config.rho, seed);
            let ep = EpisodeConfig {
                policy: config.policy.clone(),
                flags,
                seed,
            };
            run_episode(forest, &user, &ep)
        })
        .collect();
    let mut report = analytics_report(&traces, config.policy.max_turns)?;
    let (leaves, spread) = leaf_histograms(forest);
    report.leaf_item_histogram = leaves;
    report.item_leaf_spread = spread;
    report.disabled_components = flags.disabled().into_iter().map(String::from).collect();
    report.config = config.to_text();
    Ok((report, traces))
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Write `report.json` and one CSV per table into `dir`.
pub fn write_report(report: &BenchmarkReport, dir: &Path) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report).map_err(std::io::Error::other)?,
    )?;

    let mut s = String::from("turn,success_rate\n");
    for (t, sr) in report.success_rate.iter().enumerate() {
        let _ = writeln!(s, "{},{}", t + 1, sr);
    }
    fs::write(dir.join("success_rate.csv"), s)?;

    let mut s = String::from("turn,active,recommendations,successes,rec_ratio,success_ratio\n");
    for r in &report.per_turn {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.turn, r.active, r.recommendations, r.successes, r.rec_ratio, r.success_ratio
        );
    }
    fs::write(dir.join("per_turn.csv"), s)?;

    for (name, bins) in [
        ("leaf_item_histogram.csv", &report.leaf_item_histogram),
        ("item_leaf_spread.csv", &report.item_leaf_spread),
    ] {
        let mut s = String::from("value,count\n");
        for b in bins {
            let _ = writeln!(s, "{},{}", b.value, b.count);
        }
        fs::write(dir.join(name), s)?;
    }

    let mut s = String::from("outcome,episodes,mean,std\n");
    for (name, m) in [
        ("succeeded", &report.mention_stats.succeeded),
        ("failed", &report.mention_stats.failed),
        ("all", &report.mention_stats.all),
    ] {
        match m {
            Some(m) => {
                let _ = writeln!(s, "{name},{},{},{}", m.episodes, m.mean, m.std);
            }
            None => {
                let _ = writeln!(s, "{name},0,,");
            }
        }
    }
    fs::write(dir.join("mention_stats.csv"), s)?;

    let mut s = String::from("min_mentions,episodes,success_rate\n");
    for r in &report.sr_by_min_mentions {
        let _ = writeln!(s, "{},{},{}", r.min_mentions, r.episodes, opt(r.success_rate));
    }
    fs::write(dir.join("sr_by_min_mentions.csv"), s)?;

    let mut s = String::from("mention_count,identified,episodes,success_rate,impossible\n");
    for c in &report.identified_matrix {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            c.mention_count,
            c.identified,
            c.episodes,
            opt(c.success_rate),
            c.impossible
        );
    }
    fs::write(dir.join("identified_matrix.csv"), s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(succeeded: bool, turns: usize, pn: usize, pk: usize) -> EpisodeTrace {
        EpisodeTrace {
            seed: 0,
            user: 0,
            target: 0,
            steps: Vec::new(),
            succeeded,
            turns,
            identified: pk,
            mention_count: pn,
            trees_visited: Vec::new(),
            final_delta: Vec::new(),
        }
    }

    #[test]
    fn metrics_on_three_episodes() {
        let t = vec![trace(true, 3, 2, 1), trace(false, 10, 4, 2), trace(true, 5, 3, 3)];
        assert!((success_rate_at(&t, 10).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(success_rate_at(&t, 1).unwrap(), 0.0);
        assert_eq!(average_turns(&t).unwrap(), 6.0);
        assert!(success_rate_at(&[], 1).is_err());
        assert!(average_turns(&[]).is_err());
    }

    #[test]
    fn extreme_averages() {
        let fails = vec![trace(false, 10, 0, 0); 4];
        assert_eq!(average_turns(&fails).unwrap(), 10.0);
        let ones = vec![trace(true, 1, 0, 0); 4];
        assert_eq!(average_turns(&ones).unwrap(), 1.0);
        assert_eq!(success_rate_at(&ones, 1).unwrap(), 1.0);
    }

    #[test]
    fn analytics_tables() {
        let t = vec![trace(true, 3, 2, 1), trace(false, 10, 4, 2), trace(true, 5, 3, 3)];
        let r = analytics_report(&t, 10).unwrap();
        assert!(r.success_rate.windows(2).all(|w| w[0] <= w[1]));
        let all = r.mention_stats.all.unwrap();
        assert_eq!(all.mean, 3.0);
        assert!((all.std - (2.0f64 / 3.0).sqrt()).abs() < 1e-12);
        assert_eq!(r.sr_by_min_mentions[0].episodes, 2);
        assert_eq!(r.sr_by_min_mentions[0].success_rate, Some(0.5));
        assert!(r.identified_matrix.iter().all(|c| !c.impossible || c.episodes == 0));

        let wins = vec![trace(true, 2, 1, 1)];
        assert_eq!(analytics_report(&wins, 10).unwrap().mention_stats.failed, None);
    }
}
