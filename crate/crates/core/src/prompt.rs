//! Note compression prompts over a byte-level tokenizer.
//!
//! Token ids 0..=255 are raw bytes; ids 256..=259 are reserved special
//! tokens that ordinary text can never produce. Every prompt carries the
//! position of the token immediately before the compression token (whose
//! hidden state becomes the note embedding) and the half-open span of the
//! output tokens the generation loss reads.

use std::ops::Range;

use rand::Rng;
use thiserror::Error;

use crate::corpus::Note;

pub const BOS_ID: u32 = 256;
pub const EMB_ID: u32 = 257;
pub const EOS_ID: u32 = 258;
pub const PAD_ID: u32 = 259;
/// 256 byte tokens + BOS/EMB/EOS + padding id.
pub const VOCAB_SIZE: u32 = 260;

/// Reserved ids for the sequence delimiters and the compression slot.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub bos_id: u32,
    pub emb_id: u32,
    pub eos_id: u32,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            bos_id: BOS_ID,
            emb_id: EMB_ID,
            eos_id: EOS_ID,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("note has no hashtags; route it to the category task")]
    NoHashtags,
    #[error("expected exactly one compression token, found {0}")]
    CompressionTokenCount(usize),
    #[error("compression token cannot be the first token")]
    CompressionTokenFirst,
    #[error("token id {0} is not plain text")]
    NotText(u32),
    #[error("token stream is not valid UTF-8")]
    InvalidUtf8,
    #[error("hashtag subset size {j} out of range 1..={len}")]
    SubsetOutOfRange { j: usize, len: usize },
}

/// Byte-level encoding: each UTF-8 byte maps to its own id.
pub fn tokenize(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Strict inverse of `tokenize`; rejects special ids.
pub fn detokenize(ids: &[u32]) -> Result<String, PromptError> {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id > 255 {
            return Err(PromptError::NotText(id));
        }
        bytes.push(id as u8);
    }
    String::from_utf8(bytes).map_err(|_| PromptError::InvalidUtf8)
}

/// Lossy rendering for audits: special ids appear as bracketed markers.
pub fn decode_display(ids: &[u32]) -> String {
    let mut out = String::new();
    let mut bytes = Vec::new();
    let flush = |bytes: &mut Vec<u8>, out: &mut String| {
        if !bytes.is_empty() {
            out.push_str(&String::from_utf8_lossy(bytes));
            bytes.clear();
        }
    };
    for &id in ids {
        match id {
            0..=255 => bytes.push(id as u8),
            BOS_ID => {
                flush(&mut bytes, &mut out);
                out.push_str("[BOS]");
            }
            EMB_ID => {
                flush(&mut bytes, &mut out);
                out.push_str("[EMB]");
            }
            EOS_ID => {
                flush(&mut bytes, &mut out);
                out.push_str("[EOS]");
            }
            PAD_ID => {
                flush(&mut bytes, &mut out);
                out.push_str("[PAD]");
            }
            other => {
                flush(&mut bytes, &mut out);
                out.push_str(&format!("[#{other}]"));
            }
        }
    }
    flush(&mut bytes, &mut out);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct TruncationConfig {
    pub max_title_tokens: usize,
    pub max_content_tokens: usize,
}

impl Default for TruncationConfig {
    fn default() -> Self {
        Self {
            max_title_tokens: 20,
            max_content_tokens: 80,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Category,
    Hashtag { j: usize },
}

/// A tokenized prompt plus the bookkeeping both losses need.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSample {
    pub token_ids: Vec<u32>,
    /// Index of the token immediately before the compression token.
    pub compression_pos: usize,
    /// Half-open range covering exactly the output tokens plus EOS.
    pub output_span: Range<usize>,
    pub task: TaskKind,
    pub note_id: String,
}

/// Prompt truncated at the compression slot, for embedding-only passes.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbedPrompt {
    pub token_ids: Vec<u32>,
    pub compression_pos: usize,
}

fn truncated(text: &str, max_tokens: usize) -> Vec<u32> {
    let mut ids = tokenize(text);
    ids.truncate(max_tokens);
    ids
}

const COMPRESSION_SENTENCE: &str = " The compression word is:\"";
const AFTER_EMB: &str = "\". ";

/// Instruction + input-note block + compression sentence, ending just before
/// the compression token.
fn category_prefix(note: &Note, trunc: &TruncationConfig) -> Vec<u32> {
    let mut ids = vec![BOS_ID];
    ids.extend(tokenize(
        "Extract the note information in json format, compress it into one word \
         for recommendation, and generate the category of the note. {'title': ",
    ));
    ids.extend(truncated(&note.title, trunc.max_title_tokens));
    ids.extend(tokenize(", 'topic': "));
    ids.extend(tokenize(&note.hashtags.join(", ")));
    ids.extend(tokenize(", 'content': "));
    ids.extend(truncated(&note.content, trunc.max_content_tokens));
    ids.extend(tokenize("}."));
    ids.extend(tokenize(COMPRESSION_SENTENCE));
    ids
}

/// Category-generation prompt: the input note carries title, hashtags and
/// content; the output is the category.
pub fn build_category_prompt(note: &Note, trunc: &TruncationConfig) -> PromptSample {
    let mut ids = category_prefix(note, trunc);
    let compression_pos = ids.len() - 1;
    ids.push(EMB_ID);
    ids.extend(tokenize(AFTER_EMB));
    ids.extend(tokenize("The category is: "));
    let start = ids.len();
    ids.extend(tokenize(&note.category));
    ids.push(EOS_ID);
    let end = ids.len();
    PromptSample {
        token_ids: ids,
        compression_pos,
        output_span: start..end,
        task: TaskKind::Category,
        note_id: note.id.clone(),
    }
}

/// Category prompt cut at the compression slot; output tokens are never
/// rendered. Used wherever only the embedding is needed.
pub fn build_embedding_prompt(note: &Note, trunc: &TruncationConfig) -> EmbedPrompt {
    let mut ids = category_prefix(note, trunc);
    let compression_pos = ids.len() - 1;
    ids.push(EMB_ID);
    EmbedPrompt {
        token_ids: ids,
        compression_pos,
    }
}

/// Hashtag-generation prompt with an explicit subset choice: `j` hashtags at
/// the given distinct indices, in the given order.
pub fn build_hashtag_prompt_with(
    note: &Note,
    trunc: &TruncationConfig,
    picks: &[usize],
) -> Result<PromptSample, PromptError> {
    if note.hashtags.is_empty() {
        return Err(PromptError::NoHashtags);
    }
    let j = picks.len();
    if j == 0 || j > note.hashtags.len() {
        return Err(PromptError::SubsetOutOfRange {
            j,
            len: note.hashtags.len(),
        });
    }
    let mut chosen = Vec::with_capacity(j);
    for &p in picks {
        if p >= note.hashtags.len() {
            return Err(PromptError::SubsetOutOfRange {
                j: p,
                len: note.hashtags.len(),
            });
        }
        chosen.push(note.hashtags[p].as_str());
    }

    let mut ids = vec![BOS_ID];
    ids.extend(tokenize(&format!(
        "Extract the note information in json format, compress it into one word \
         for recommendation, and generate {j} topics of the note. {{'title': "
    )));
    ids.extend(truncated(&note.title, trunc.max_title_tokens));
    ids.extend(tokenize(", 'content': "));
    ids.extend(truncated(&note.content, trunc.max_content_tokens));
    ids.extend(tokenize("}."));
    ids.extend(tokenize(COMPRESSION_SENTENCE));
    let compression_pos = ids.len() - 1;
    ids.push(EMB_ID);
    ids.extend(tokenize(AFTER_EMB));
    ids.extend(tokenize(&format!("The {j} topics are: ")));
    let start = ids.len();
    ids.extend(tokenize(&chosen.join(", ")));
    ids.push(EOS_ID);
    let end = ids.len();
    Ok(PromptSample {
        token_ids: ids,
        compression_pos,
        output_span: start..end,
        task: TaskKind::Hashtag { j },
        note_id: note.id.clone(),
    })
}

/// Hashtag-generation prompt; the input note carries title and content only.
/// `j` is drawn uniformly from 1..=len(hashtags) and that many distinct
/// hashtags are sampled without replacement.
pub fn build_hashtag_prompt<R: Rng>(
    note: &Note,
    trunc: &TruncationConfig,
    rng: &mut R,
) -> Result<PromptSample, PromptError> {
    if note.hashtags.is_empty() {
        return Err(PromptError::NoHashtags);
    }
    let len = note.hashtags.len();
    let j = rng.gen_range(1..=len);
    // partial Fisher-Yates: first j entries are a uniform ordered sample
    let mut idx: Vec<usize> = (0..len).collect();
    for i in 0..j {
        let swap = rng.gen_range(i..len);
        idx.swap(i, swap);
    }
    idx.truncate(j);
    build_hashtag_prompt_with(note, trunc, &idx)
}

/// Prefix ending exactly at the output-guidance boundary, i.e. everything
/// before the output span. Greedy decoding continues from here.
pub fn generation_prefix(sample: &PromptSample) -> &[u32] {
    &sample.token_ids[..sample.output_span.start]
}

/// Index of the token before the single compression token.
pub fn locate_compression_pos(token_ids: &[u32]) -> Result<usize, PromptError> {
    let positions: Vec<usize> = token_ids
        .iter()
        .enumerate()
        .filter(|(_, &id)| id == EMB_ID)
        .map(|(i, _)| i)
        .collect();
    match positions.as_slice() {
        [pos] => {
            if *pos == 0 {
                Err(PromptError::CompressionTokenFirst)
            } else {
                Ok(pos - 1)
            }
        }
        other => Err(PromptError::CompressionTokenCount(other.len())),
    }
}
