//! Co-occurrence scoring over click logs, outlier filtering, and top-t
//! related-note selection.
//!
//! Each (view A, click B) event by user i contributes 1/N_i to the directed
//! score s_{A->B}, where N_i is the number of distinct notes user i clicked
//! in the whole log window. The down-weighting keeps indiscriminate clickers
//! from dominating the pair set.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use thiserror::Error;

use crate::corpus::{BehaviorLog, Note};

#[derive(Debug, Error)]
pub enum PairsError {
    #[error("invalid mining config: {0}")]
    InvalidConfig(String),
    #[error("pair references unknown note id {0:?}")]
    DanglingId(String),
    #[error("pairs file line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Directed co-occurrence scores; absent pairs are implicitly zero.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CoScoreTable {
    scores: BTreeMap<(String, String), f64>,
}

impl CoScoreTable {
    pub fn get(&self, src: &str, dst: &str) -> f64 {
        self.scores
            .get(&(src.to_string(), dst.to_string()))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(String, String), &f64)> {
        self.scores.iter()
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PairMiningConfig {
    pub upper_bound: f64,
    pub lower_bound: f64,
    pub top_t: usize,
}

impl Default for PairMiningConfig {
    fn default() -> Self {
        Self {
            upper_bound: 30.0,
            lower_bound: 0.01,
            top_t: 10,
        }
    }
}

impl PairMiningConfig {
    pub fn validate(&self) -> Result<(), PairsError> {
        if !(self.lower_bound >= 0.0 && self.lower_bound < self.upper_bound) {
            return Err(PairsError::InvalidConfig(format!(
                "need 0 <= lower_bound < upper_bound, got lower_bound={} upper_bound={}",
                self.lower_bound, self.upper_bound
            )));
        }
        if self.top_t < 1 {
            return Err(PairsError::InvalidConfig("top_t must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelatedPair {
    pub src: String,
    pub dst: String,
    pub score: f64,
}

/// Mined related pairs, grouped by source (ascending), each group sorted by
/// descending score with ties broken by ascending destination id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelatedPairSet {
    pub pairs: Vec<RelatedPair>,
}

/// N_i: number of DISTINCT notes each user clicked anywhere in the window.
pub fn user_click_set_sizes(log: &BehaviorLog) -> BTreeMap<String, usize> {
    let mut sets: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for ev in &log.events {
        sets.entry(ev.user_id.as_str())
            .or_default()
            .insert(ev.clicked.as_str());
    }
    sets.into_iter()
        .map(|(u, s)| (u.to_string(), s.len()))
        .collect()
}

/// Accumulate 1/N_i per (viewed, clicked) event, in log order. Duplicate
/// events each contribute.
pub fn cooccurrence_scores(log: &BehaviorLog) -> CoScoreTable {
    let sizes = user_click_set_sizes(log);
    let mut scores: BTreeMap<(String, String), f64> = BTreeMap::new();
    for ev in &log.events {
        let n_i = sizes[&ev.user_id] as f64;
        let entry = scores
            .entry((ev.viewed.clone(), ev.clicked.clone()))
            .or_insert(0.0);
        *entry += 1.0 / n_i;
    }
    CoScoreTable { scores }
}

/// Drop scores outside [lower_bound, upper_bound] (bounds inclusive: only
/// strictly-outside scores are outliers), then keep the top_t per source.
pub fn mine_related_pairs(
    table: &CoScoreTable,
    cfg: &PairMiningConfig,
) -> Result<RelatedPairSet, PairsError> {
    cfg.validate()?;
    let mut by_src: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for ((src, dst), &s) in table.scores.iter() {
        if s < cfg.lower_bound || s > cfg.upper_bound {
            continue;
        }
        by_src.entry(src.as_str()).or_default().push((dst, s));
    }
    let mut pairs = Vec::new();
    for (src, mut group) in by_src {
        group.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        group.truncate(cfg.top_t);
        for (dst, score) in group {
            pairs.push(RelatedPair {
                src: src.to_string(),
                dst: dst.to_string(),
                score,
            });
        }
    }
    Ok(RelatedPairSet { pairs })
}

/// Resolve mined pairs to (note, related note) training examples, ordered by
/// source id then rank.
pub fn pairs_to_training_examples(
    set: &RelatedPairSet,
    notes: &[Note],
) -> Result<Vec<(Note, Note)>, PairsError> {
    let by_id: HashMap<&str, &Note> = notes.iter().map(|n| (n.id.as_str(), n)).collect();
    let mut out = Vec::with_capacity(set.pairs.len());
    for p in &set.pairs {
        let src = by_id
            .get(p.src.as_str())
            .ok_or_else(|| PairsError::DanglingId(p.src.clone()))?;
        let dst = by_id
            .get(p.dst.as_str())
            .ok_or_else(|| PairsError::DanglingId(p.dst.clone()))?;
        out.push(((*src).clone(), (*dst).clone()));
    }
    Ok(out)
}

/// Line format: `src<TAB>dst<TAB>score`, score printed in shortest
/// round-trippable form.
pub fn write_pairs(path: &Path, set: &RelatedPairSet) -> Result<(), PairsError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in &set.pairs {
        writeln!(w, "{}\t{}\t{}", p.src, p.dst, p.score)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pairs(path: &Path) -> Result<RelatedPairSet, PairsError> {
    let reader = BufReader::new(File::open(path)?);
    let mut pairs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let mut parts = line.split('\t');
        let err = |message: &str| PairsError::Malformed {
            line: i + 1,
            message: message.into(),
        };
        let src = parts.next().ok_or_else(|| err("missing src"))?.to_string();
        let dst = parts.next().ok_or_else(|| err("missing dst"))?.to_string();
        let score: f64 = parts
            .next()
            .ok_or_else(|| err("missing score"))?
            .parse()
            .map_err(|_| err("bad score"))?;
        pairs.push(RelatedPair { src, dst, score });
    }
    Ok(RelatedPairSet { pairs })
}
