//! Note and behavior-log data model, line-delimited storage, and
//! deterministic synthetic corpora for desk-scale experiments.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A user-generated post: the unit being ranked and generated for.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Note {
    pub id: String,
    pub title: String,
    pub hashtags: Vec<String>,
    pub category: String,
    pub content: String,
    pub exposure: u64,
}

/// Closed category set, in first-encounter order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CategorySet {
    names: Vec<String>,
}

impl CategorySet {
    pub fn from_notes(notes: &[Note]) -> Self {
        let mut names = Vec::new();
        let mut seen = HashSet::new();
        for n in notes {
            if seen.insert(n.category.clone()) {
                names.push(n.category.clone());
            }
        }
        Self { names }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.names.iter().any(|n| n == name)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickEvent {
    pub user_id: String,
    pub viewed: String,
    pub clicked: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorLog {
    pub events: Vec<ClickEvent>,
    pub window_label: String,
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("line {line}: malformed record: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate note id {id:?} on lines {first} and {second}")]
    DuplicateId {
        id: String,
        first: usize,
        second: usize,
    },
    #[error("event on line {line}: {message}")]
    BadEvent { line: usize, message: String },
    #[error("need n_notes >= n_categories, got {n_notes} notes for {n_categories} categories")]
    TooManyCategories { n_notes: usize, n_categories: usize },
    #[error("note list is empty")]
    NoNotes,
    #[error("vocabulary too small: need at least {need} words, got {got}")]
    VocabTooSmall { need: usize, got: usize },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Load a corpus from one JSON note per line. The category set is the set of
/// distinct categories encountered, in file order.
pub fn load_corpus(path: &Path) -> Result<(Vec<Note>, CategorySet), CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut notes = Vec::new();
    let mut first_line_of: BTreeMap<String, usize> = BTreeMap::new();
    let mut line_no = 0usize;
    for line in reader.lines() {
        line_no += 1;
        let line = line?;
        if line.trim().is_empty() {
            return Err(CorpusError::Malformed {
                line: line_no,
                message: "blank line".into(),
            });
        }
        let note: Note = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(&first) = first_line_of.get(&note.id) {
            return Err(CorpusError::DuplicateId {
                id: note.id,
                first,
                second: line_no,
            });
        }
        first_line_of.insert(note.id.clone(), line_no);
        notes.push(note);
    }
    if notes.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let cats = CategorySet::from_notes(&notes);
    Ok((notes, cats))
}

pub fn write_corpus(path: &Path, notes: &[Note]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for n in notes {
        serde_json::to_writer(&mut w, n).map_err(|e| CorpusError::Malformed {
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Load a behavior log from one JSON event per line and validate it against
/// the corpus (ids resolve, viewed != clicked).
pub fn load_log(path: &Path, notes: &[Note]) -> Result<BehaviorLog, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let ids: HashSet<&str> = notes.iter().map(|n| n.id.as_str()).collect();
    let mut events = Vec::new();
    let mut line_no = 0usize;
    for line in reader.lines() {
        line_no += 1;
        let line = line?;
        let ev: ClickEvent = serde_json::from_str(&line).map_err(|e| CorpusError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        validate_event(&ev, &ids).map_err(|message| CorpusError::BadEvent {
            line: line_no,
            message,
        })?;
        events.push(ev);
    }
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "log".into());
    Ok(BehaviorLog {
        events,
        window_label: label,
    })
}

fn validate_event(ev: &ClickEvent, ids: &HashSet<&str>) -> Result<(), String> {
    if ev.viewed == ev.clicked {
        return Err(format!("viewed == clicked ({})", ev.viewed));
    }
    if !ids.contains(ev.viewed.as_str()) {
        return Err(format!("unknown viewed note {:?}", ev.viewed));
    }
    if !ids.contains(ev.clicked.as_str()) {
        return Err(format!("unknown clicked note {:?}", ev.clicked));
    }
    Ok(())
}

pub fn write_log(path: &Path, log: &BehaviorLog) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for ev in &log.events {
        serde_json::to_writer(&mut w, ev).map_err(|e| CorpusError::Malformed {
            line: 0,
            message: e.to_string(),
        })?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Knobs for the synthetic corpus generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusGenConfig {
    pub seed: u64,
    pub n_notes: usize,
    pub n_categories: usize,
    pub title_words: (usize, usize),
    pub content_words: (usize, usize),
    pub hashtags_per_note: (usize, usize),
    /// Probability that a title/content word comes from the note's
    /// category-specific word block rather than the shared pool.
    pub category_word_frac: f64,
    /// Probability that a hashtag comes from the category block.
    pub hashtag_category_frac: f64,
    /// Pareto tail for exposures: scale * (1-u)^(-1/alpha).
    pub exposure_scale: f64,
    pub exposure_alpha: f64,
}

impl Default for CorpusGenConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_notes: 100,
            n_categories: 4,
            title_words: (2, 4),
            content_words: (4, 8),
            hashtags_per_note: (1, 3),
            category_word_frac: 0.7,
            hashtag_category_frac: 0.7,
            exposure_scale: 200.0,
            exposure_alpha: 0.35,
        }
    }
}

/// Deterministic word list: two-syllable words over a fixed consonant/vowel
/// grid. Category names use a disjoint consonant set, so content words and
/// category names never collide.
pub fn default_vocab(n_words: usize) -> Vec<String> {
    let cons = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t"];
    let vows = ["a", "e", "i", "o", "u"];
    let mut syllables = Vec::new();
    for c in cons {
        for v in vows {
            syllables.push(format!("{c}{v}"));
        }
    }
    let mut words = Vec::with_capacity(n_words);
    'outer: for a in 0..syllables.len() {
        for b in 0..syllables.len() {
            words.push(format!("{}{}", syllables[a], syllables[b]));
            if words.len() == n_words {
                break 'outer;
            }
        }
    }
    words
}

fn category_names(n: usize) -> Vec<String> {
    let cons = ["c", "h", "j", "q", "v", "w", "x", "z"];
    let vows = ["a", "e", "i", "o", "u"];
    let mut names = Vec::with_capacity(n);
    'outer: for a in cons {
        for va in vows {
            for b in cons {
                for vb in vows {
                    names.push(format!("{a}{va}{b}{vb}"));
                    if names.len() == n {
                        break 'outer;
                    }
                }
            }
        }
    }
    names
}

fn range_sample<R: Rng>(rng: &mut R, (lo, hi): (usize, usize)) -> usize {
    if hi <= lo {
        lo
    } else {
        rng.gen_range(lo..=hi)
    }
}

/// Generate a deterministic synthetic corpus. Same-category notes share a
/// vocabulary block (retrieval signal); exposures are heavy-tailed so both
/// low- and high-exposure strata are populated.
pub fn generate_synthetic_corpus(
    cfg: &CorpusGenConfig,
    vocab: &[String],
) -> Result<(Vec<Note>, CategorySet), CorpusError> {
    if cfg.n_categories > cfg.n_notes {
        return Err(CorpusError::TooManyCategories {
            n_notes: cfg.n_notes,
            n_categories: cfg.n_categories,
        });
    }
    // One block per category plus a shared pool at least as large.
    let need = cfg.n_categories * 4 + 8;
    if vocab.len() < need {
        return Err(CorpusError::VocabTooSmall {
            need,
            got: vocab.len(),
        });
    }
    let block = (vocab.len() / 2) / cfg.n_categories;
    let shared_start = block * cfg.n_categories;
    let names = category_names(cfg.n_categories);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let width = cfg.n_notes.to_string().len().max(3);

    let mut notes = Vec::with_capacity(cfg.n_notes);
    for i in 0..cfg.n_notes {
        let cat = i % cfg.n_categories;
        let word = |category_frac: f64, rng: &mut ChaCha8Rng| -> String {
            if rng.gen::<f64>() < category_frac {
                vocab[cat * block + rng.gen_range(0..block)].clone()
            } else {
                vocab[shared_start + rng.gen_range(0..vocab.len() - shared_start)].clone()
            }
        };
        let n_title = range_sample(&mut rng, cfg.title_words);
        let title: Vec<String> = (0..n_title)
            .map(|_| word(cfg.category_word_frac, &mut rng))
            .collect();
        let n_content = range_sample(&mut rng, cfg.content_words);
        let content: Vec<String> = (0..n_content)
            .map(|_| word(cfg.category_word_frac, &mut rng))
            .collect();
        let n_tags = range_sample(&mut rng, cfg.hashtags_per_note);
        let mut hashtags: Vec<String> = Vec::new();
        let mut guard = 0;
        while hashtags.len() < n_tags && guard < 100 {
            let w = word(cfg.hashtag_category_frac, &mut rng);
            if !hashtags.contains(&w) {
                hashtags.push(w);
            }
            guard += 1;
        }
        let u: f64 = rng.gen();
        let exposure = (cfg.exposure_scale * (1.0 - u).powf(-1.0 / cfg.exposure_alpha))
            .min(10_000_000.0) as u64;
        notes.push(Note {
            id: format!("note-{i:0width$}"),
            title: title.join(" "),
            hashtags,
            category: names[cat].clone(),
            content: content.join(" "),
            exposure,
        });
    }
    let cats = CategorySet::from_notes(&notes);
    Ok((notes, cats))
}

/// Knobs for the synthetic click-log generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogGenConfig {
    pub seed: u64,
    pub n_users: usize,
    pub n_events: usize,
    /// Probability a click lands on a note sharing the viewed note's
    /// category.
    pub same_category_bias: f64,
    /// Fraction of users who click indiscriminately and often (the users the
    /// 1/N weighting is meant to discount).
    pub active_user_frac: f64,
    /// How much more often an active user produces events.
    pub active_weight: f64,
}

impl Default for LogGenConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            n_users: 20,
            n_events: 1000,
            same_category_bias: 0.8,
            active_user_frac: 0.05,
            active_weight: 6.0,
        }
    }
}

/// Generate a deterministic synthetic behavior log over `notes`.
/// Clicks are biased toward same-category notes so mined pairs correlate
/// with category; active users click uniformly at random.
pub fn generate_synthetic_log(
    cfg: &LogGenConfig,
    notes: &[Note],
) -> Result<BehaviorLog, CorpusError> {
    if notes.is_empty() {
        return Err(CorpusError::NoNotes);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_active = ((cfg.n_users as f64) * cfg.active_user_frac).round() as usize;
    let weights: Vec<f64> = (0..cfg.n_users)
        .map(|u| if u < n_active { cfg.active_weight } else { 1.0 })
        .collect();
    let total_weight: f64 = weights.iter().sum();

    let mut by_category: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, n) in notes.iter().enumerate() {
        by_category.entry(n.category.as_str()).or_default().push(i);
    }
    let user_width = cfg.n_users.to_string().len().max(3);

    let mut events = Vec::with_capacity(cfg.n_events);
    for _ in 0..cfg.n_events {
        let mut pick = rng.gen::<f64>() * total_weight;
        let mut user = 0usize;
        for (u, w) in weights.iter().enumerate() {
            pick -= w;
            if pick <= 0.0 {
                user = u;
                break;
            }
        }
        let active = user < n_active;
        let viewed = rng.gen_range(0..notes.len());
        let same_cat = &by_category[notes[viewed].category.as_str()];
        let biased = !active && rng.gen::<f64>() < cfg.same_category_bias && same_cat.len() > 1;
        let clicked = loop {
            let c = if biased {
                same_cat[rng.gen_range(0..same_cat.len())]
            } else if notes.len() > 1 {
                rng.gen_range(0..notes.len())
            } else {
                return Err(CorpusError::NoNotes);
            };
            if c != viewed {
                break c;
            }
        };
        events.push(ClickEvent {
            user_id: format!("user-{user:0user_width$}"),
            viewed: notes[viewed].id.clone(),
            clicked: notes[clicked].id.clone(),
        });
    }
    Ok(BehaviorLog {
        events,
        window_label: format!("synthetic-{}", cfg.seed),
    })
}
