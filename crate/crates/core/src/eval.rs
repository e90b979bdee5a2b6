//! Retrieval and generation evaluation: recall@K over the note pool (with
//! exposure strata), category accuracy/illusory proportion, hashtag
//! BLEU4/ROUGE, and a word-overlap baseline for sanity comparisons.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;

use crate::corpus::{CategorySet, Note};
use crate::model::{self, ModelError, ModelParams};
use crate::pairs::RelatedPairSet;
use crate::prompt::{
    build_category_prompt, build_embedding_prompt, build_hashtag_prompt_with, decode_display,
    generation_prefix, TruncationConfig, EOS_ID,
};

/// Ground-truth notes below this exposure form the low stratum.
pub const LOW_EXPOSURE_THRESHOLD: u64 = 1_500;
/// Ground-truth notes above this exposure form the high stratum.
pub const HIGH_EXPOSURE_THRESHOLD: u64 = 75_000;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub target: String,
    pub ground_truth: String,
}

/// The first note of each mined pair is the target, the other the ground
/// truth.
pub fn eval_pairs_from(set: &RelatedPairSet) -> Vec<EvalPair> {
    set.pairs
        .iter()
        .map(|p| EvalPair {
            target: p.src.clone(),
            ground_truth: p.dst.clone(),
        })
        .collect()
}

/// One embedding per note via the category prompt truncated at the
/// compression slot. Output tokens sit after the slot, so under causal
/// masking they cannot reach the embedding and are not rendered.
pub fn embed_pool(
    params: &ModelParams<f32>,
    notes: &[Note],
    trunc: &TruncationConfig,
) -> Result<Vec<Vec<f32>>, ModelError> {
    notes
        .iter()
        .map(|n| {
            let ep = build_embedding_prompt(n, trunc);
            model::embed_tokens(params, &ep.token_ids, ep.compression_pos)
        })
        .collect()
}

fn cosine_f64(a: &[f32], b: &[f32]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for i in 0..a.len() {
        dot += a[i] as f64 * b[i] as f64;
        na += a[i] as f64 * a[i] as f64;
        nb += b[i] as f64 * b[i] as f64;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na.sqrt() * nb.sqrt())
}

/// Rank the pool (minus the excluded target) by descending cosine
/// similarity; ties break by ascending note id.
pub fn rank(
    target: &[f32],
    ids: &[String],
    vectors: &[Vec<f32>],
    exclude: &str,
) -> Vec<(String, f64)> {
    let mut scored: Vec<(String, f64)> = ids
        .iter()
        .zip(vectors.iter())
        .filter(|(id, _)| id.as_str() != exclude)
        .map(|(id, v)| (id.clone(), cosine_f64(target, v)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

/// Fraction of pairs whose ground truth appears in the target's top K.
pub fn recall_at_k(
    pairs: &[EvalPair],
    rankings: &BTreeMap<String, Vec<String>>,
    k: usize,
) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let hits = pairs
        .iter()
        .filter(|p| {
            rankings
                .get(&p.target)
                .map(|r| r.iter().take(k).any(|id| id == &p.ground_truth))
                .unwrap_or(false)
        })
        .count();
    hits as f64 / pairs.len() as f64
}

/// Recall per exposure stratum of the ground-truth note. Thresholds are
/// strict, so exposures of exactly 1,500 or 75,000 land in the middle band.
/// Empty strata are reported as absent, not zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StratumRecalls {
    pub low: Option<f64>,
    pub other: Option<f64>,
    pub high: Option<f64>,
}

pub fn stratified_recall(
    pairs: &[EvalPair],
    rankings: &BTreeMap<String, Vec<String>>,
    exposures: &BTreeMap<String, u64>,
    k: usize,
) -> StratumRecalls {
    let mut low = Vec::new();
    let mut other = Vec::new();
    let mut high = Vec::new();
    for p in pairs {
        let e = exposures[&p.ground_truth];
        if e < LOW_EXPOSURE_THRESHOLD {
            low.push(p.clone());
        } else if e > HIGH_EXPOSURE_THRESHOLD {
            high.push(p.clone());
        } else {
            other.push(p.clone());
        }
    }
    let part = |subset: Vec<EvalPair>| {
        if subset.is_empty() {
            None
        } else {
            Some(recall_at_k(&subset, rankings, k))
        }
    };
    StratumRecalls {
        low: part(low),
        other: part(other),
        high: part(high),
    }
}

/// Exact string match after whitespace trimming; illusory = fraction of
/// generated strings outside the closed category set.
pub fn category_metrics(
    generated: &[String],
    truth: &[String],
    cats: &CategorySet,
) -> (f64, f64) {
    assert_eq!(generated.len(), truth.len(), "aligned lists required");
    if generated.is_empty() {
        return (0.0, 0.0);
    }
    let n = generated.len() as f64;
    let mut correct = 0usize;
    let mut illusory = 0usize;
    for (g, t) in generated.iter().zip(truth) {
        let g = g.trim();
        if g == t.trim() {
            correct += 1;
        }
        if !cats.contains(g) {
            illusory += 1;
        }
    }
    (correct as f64 / n, illusory as f64 / n)
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut map: HashMap<&[String], usize> = HashMap::new();
    if tokens.len() >= n && n > 0 {
        for w in tokens.windows(n) {
            *map.entry(w).or_insert(0) += 1;
        }
    }
    map
}

fn clipped_overlap(cand: &[String], refr: &[String], n: usize) -> (usize, usize) {
    let cand_counts = ngram_counts(cand, n);
    let ref_counts = ngram_counts(refr, n);
    let total: usize = cand_counts.values().sum();
    let clipped: usize = cand_counts
        .iter()
        .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
        .sum();
    (clipped, total)
}

/// BLEU4: geometric mean of modified 1..4-gram precisions times the brevity
/// penalty. Any n-gram order with zero matches uses add-one smoothing
/// ((clipped+1)/(total+1)), which also covers candidates shorter than n.
pub fn bleu4(candidate: &[String], reference: &[String]) -> f64 {
    assert!(!reference.is_empty(), "reference must be nonempty");
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0f64;
    for n in 1..=4 {
        let (clipped, total) = clipped_overlap(candidate, reference, n);
        let p = if clipped > 0 {
            clipped as f64 / total as f64
        } else {
            (clipped + 1) as f64 / (total + 1) as f64
        };
        log_sum += p.ln();
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = if c >= r { 1.0 } else { (1.0 - r / c).exp() };
    bp * (log_sum / 4.0).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut dp = vec![0usize; (a.len() + 1) * (b.len() + 1)];
    let w = b.len() + 1;
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            dp[i * w + j] = if a[i - 1] == b[j - 1] {
                dp[(i - 1) * w + j - 1] + 1
            } else {
                dp[(i - 1) * w + j].max(dp[i * w + j - 1])
            };
        }
    }
    dp[a.len() * w + b.len()]
}

/// ROUGE-1/2 are clipped n-gram overlap F1; ROUGE-L is LCS F1. F1 is
/// computed as 2*overlap/(len_c + len_r), which is exact in rationals.
pub fn rouge(candidate: &[String], reference: &[String], variant: RougeVariant) -> f64 {
    assert!(!reference.is_empty(), "reference must be nonempty");
    if candidate.is_empty() {
        return 0.0;
    }
    let (overlap, cand_total, ref_total) = match variant {
        RougeVariant::One => {
            let (o, ct) = clipped_overlap(candidate, reference, 1);
            (o, ct, reference.len())
        }
        RougeVariant::Two => {
            let (o, ct) = clipped_overlap(candidate, reference, 2);
            (o, ct, reference.len().saturating_sub(1))
        }
        RougeVariant::L => (
            lcs_len(candidate, reference),
            candidate.len(),
            reference.len(),
        ),
    };
    if cand_total == 0 || ref_total == 0 || overlap == 0 {
        return 0.0;
    }
    2.0 * overlap as f64 / (cand_total + ref_total) as f64
}

/// Whitespace tokens with commas treated as separators; used for hashtag
/// text on both the candidate and reference side.
pub fn hashtag_tokens(text: &str) -> Vec<String> {
    text.replace(',', " ")
        .split_whitespace()
        .map(|s| s.to_string())
        .collect()
}

fn note_words(n: &Note) -> HashSet<String> {
    let mut words = HashSet::new();
    for chunk in [n.title.as_str(), n.content.as_str()] {
        for w in chunk.split_whitespace() {
            words.insert(w.to_string());
        }
    }
    for h in &n.hashtags {
        for w in h.split_whitespace() {
            words.insert(w.to_string());
        }
    }
    words
}

/// Rank the pool by distinct-word overlap with the target's text (title,
/// hashtags, content). Same exclusion and tie-break rules as `rank`.
pub fn lexical_baseline_rank(target: &Note, pool: &[Note]) -> Vec<(String, f64)> {
    let target_words = note_words(target);
    let mut scored: Vec<(String, f64)> = pool
        .iter()
        .filter(|n| n.id != target.id)
        .map(|n| {
            let overlap = note_words(n).intersection(&target_words).count();
            (n.id.clone(), overlap as f64)
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored
}

#[derive(Debug, Clone, Serialize)]
pub struct RetrievalReport {
    pub pool_size: usize,
    /// (K, recall) with K ascending.
    pub recalls: Vec<(usize, f64)>,
    pub strata: Vec<(usize, StratumRecalls)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct GenerationReport {
    pub category_accuracy: f64,
    pub illusory: f64,
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    pub rougel: f64,
    pub category_notes: usize,
    pub hashtag_notes: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub retrieval: Option<RetrievalReport>,
    pub lexical_baseline: Option<RetrievalReport>,
    pub generation: Option<GenerationReport>,
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub recall_ks: Vec<usize>,
    pub max_new_category: usize,
    pub max_new_hashtag: usize,
    pub lexical_baseline: bool,
    pub generation: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            recall_ks: vec![1, 10, 100],
            max_new_category: 24,
            max_new_hashtag: 64,
            lexical_baseline: true,
            generation: true,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("eval pair references unknown note id {0:?}")]
    UnknownId(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] crate::prompt::PromptError),
}

fn retrieval_report(
    pairs: &[EvalPair],
    rankings: &BTreeMap<String, Vec<String>>,
    exposures: &BTreeMap<String, u64>,
    pool_size: usize,
    ks: &[usize],
) -> RetrievalReport {
    let mut sorted_ks = ks.to_vec();
    sorted_ks.sort_unstable();
    sorted_ks.dedup();
    RetrievalReport {
        pool_size,
        recalls: sorted_ks
            .iter()
            .map(|&k| (k, recall_at_k(pairs, rankings, k)))
            .collect(),
        strata: sorted_ks
            .iter()
            .map(|&k| (k, stratified_recall(pairs, rankings, exposures, k)))
            .collect(),
    }
}

/// Full evaluation pass: embed the pool, rank every eval-pair target, and
/// (optionally) decode categories/hashtags for every note.
pub fn evaluate(
    params: &ModelParams<f32>,
    notes: &[Note],
    cats: &CategorySet,
    eval_pairs: Option<&[EvalPair]>,
    trunc: &TruncationConfig,
    opts: &EvalOptions,
) -> Result<EvalReport, EvalError> {
    let ids: Vec<String> = notes.iter().map(|n| n.id.clone()).collect();
    let id_set: HashSet<&str> = ids.iter().map(|s| s.as_str()).collect();

    let mut retrieval = None;
    let mut lexical = None;
    if let Some(pairs) = eval_pairs {
        for p in pairs {
            for id in [&p.target, &p.ground_truth] {
                if !id_set.contains(id.as_str()) {
                    return Err(EvalError::UnknownId(id.clone()));
                }
            }
        }
        let vectors = embed_pool(params, notes, trunc)?;
        let by_id: HashMap<&str, usize> =
            ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
        let exposures: BTreeMap<String, u64> =
            notes.iter().map(|n| (n.id.clone(), n.exposure)).collect();
        let mut rankings: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut lex_rankings: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for p in pairs {
            if rankings.contains_key(&p.target) {
                continue;
            }
            let idx = by_id[p.target.as_str()];
            let ranked = rank(&vectors[idx], &ids, &vectors, &p.target);
            rankings.insert(p.target.clone(), ranked.into_iter().map(|(id, _)| id).collect());
            if opts.lexical_baseline {
                let ranked = lexical_baseline_rank(&notes[idx], notes);
                lex_rankings
                    .insert(p.target.clone(), ranked.into_iter().map(|(id, _)| id).collect());
            }
        }
        retrieval = Some(retrieval_report(
            pairs,
            &rankings,
            &exposures,
            notes.len(),
            &opts.recall_ks,
        ));
        if opts.lexical_baseline {
            lexical = Some(retrieval_report(
                pairs,
                &lex_rankings,
                &exposures,
                notes.len(),
                &opts.recall_ks,
            ));
        }
    }

    let generation = if opts.generation {
        let mut generated = Vec::with_capacity(notes.len());
        let mut truth = Vec::with_capacity(notes.len());
        for n in notes {
            let sample = build_category_prompt(n, trunc);
            let prefix = generation_prefix(&sample);
            let out = model::greedy_decode(params, prefix, opts.max_new_category, EOS_ID)?;
            generated.push(decode_display(&out));
            truth.push(n.category.clone());
        }
        let (acc, ill) = category_metrics(&generated, &truth, cats);

        let mut bleu_sum = 0.0;
        let mut r1_sum = 0.0;
        let mut r2_sum = 0.0;
        let mut rl_sum = 0.0;
        let mut hashtag_notes = 0usize;
        for n in notes {
            if n.hashtags.is_empty() {
                continue;
            }
            let all: Vec<usize> = (0..n.hashtags.len()).collect();
            let sample = build_hashtag_prompt_with(n, trunc, &all)?;
            let prefix = generation_prefix(&sample);
            let out = model::greedy_decode(params, prefix, opts.max_new_hashtag, EOS_ID)?;
            let cand = hashtag_tokens(&decode_display(&out));
            let reference = hashtag_tokens(&n.hashtags.join(", "));
            bleu_sum += bleu4(&cand, &reference);
            r1_sum += rouge(&cand, &reference, RougeVariant::One);
            r2_sum += rouge(&cand, &reference, RougeVariant::Two);
            rl_sum += rouge(&cand, &reference, RougeVariant::L);
            hashtag_notes += 1;
        }
        let div = hashtag_notes.max(1) as f64;
        Some(GenerationReport {
            category_accuracy: acc,
            illusory: ill,
            bleu4: bleu_sum / div,
            rouge1: r1_sum / div,
            rouge2: r2_sum / div,
            rougel: rl_sum / div,
            category_notes: notes.len(),
            hashtag_notes,
        })
    } else {
        None
    };

    Ok(EvalReport {
        retrieval,
        lexical_baseline: lexical,
        generation,
    })
}

fn push_stratum_lines(out: &mut String, kind: &str, strata: &[(usize, StratumRecalls)]) {
    for (k, s) in strata {
        for (name, v) in [("low", s.low), ("other", s.other), ("high", s.high)] {
            if let Some(r) = v {
                out.push_str(&format!(
                    "{{\"kind\":\"{kind}_stratum\",\"k\":{k},\"stratum\":\"{name}\",\"recall\":{r}}}\n"
                ));
            }
        }
    }
}

/// Line-delimited machine-readable report.
pub fn report_jsonl(report: &EvalReport) -> String {
    let mut out = String::new();
    if let Some(r) = &report.retrieval {
        out.push_str(&format!(
            "{{\"kind\":\"pool\",\"size\":{}}}\n",
            r.pool_size
        ));
        for (k, v) in &r.recalls {
            out.push_str(&format!(
                "{{\"kind\":\"retrieval\",\"k\":{k},\"recall\":{v}}}\n"
            ));
        }
        push_stratum_lines(&mut out, "retrieval", &r.strata);
    }
    if let Some(r) = &report.lexical_baseline {
        for (k, v) in &r.recalls {
            out.push_str(&format!(
                "{{\"kind\":\"lexical\",\"k\":{k},\"recall\":{v}}}\n"
            ));
        }
    }
    if let Some(g) = &report.generation {
        out.push_str(&format!(
            "{{\"kind\":\"generation\",\"category_accuracy\":{},\"illusory\":{},\"bleu4\":{},\"rouge1\":{},\"rouge2\":{},\"rougel\":{},\"category_notes\":{},\"hashtag_notes\":{}}}\n",
            g.category_accuracy,
            g.illusory,
            g.bleu4,
            g.rouge1,
            g.rouge2,
            g.rougel,
            g.category_notes,
            g.hashtag_notes
        ));
    }
    out
}

/// Human-readable table.
pub fn render_text(report: &EvalReport) -> String {
    let mut out = String::new();
    if let Some(r) = &report.retrieval {
        out.push_str(&format!("retrieval (pool size {})\n", r.pool_size));
        out.push_str("  K        recall");
        if report.lexical_baseline.is_some() {
            out.push_str("   lexical");
        }
        out.push('\n');
        for (i, (k, v)) in r.recalls.iter().enumerate() {
            out.push_str(&format!("  {k:<8} {v:<8.4}"));
            if let Some(l) = &report.lexical_baseline {
                out.push_str(&format!(" {:<8.4}", l.recalls[i].1));
            }
            out.push('\n');
        }
        out.push_str("  exposure strata (low < 1500 < other < 75000 < high)\n");
        for (k, s) in &r.strata {
            let fmt = |v: Option<f64>| match v {
                Some(x) => format!("{x:.4}"),
                None => "absent".to_string(),
            };
            out.push_str(&format!(
                "  K={k:<6} low={} other={} high={}\n",
                fmt(s.low),
                fmt(s.other),
                fmt(s.high)
            ));
        }
    }
    if let Some(g) = &report.generation {
        out.push_str("generation\n");
        out.push_str(&format!(
            "  category accuracy {:.4}  illusory {:.4}  ({} notes)\n",
            g.category_accuracy, g.illusory, g.category_notes
        ));
        out.push_str(&format!(
            "  bleu4 {:.4}  rouge1 {:.4}  rouge2 {:.4}  rougeL {:.4}  ({} notes)\n",
            g.bleu4, g.rouge1, g.rouge2, g.rougel, g.hashtag_notes
        ));
    }
    out
}
