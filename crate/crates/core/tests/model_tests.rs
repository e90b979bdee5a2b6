//! Contracts of the decoder stack: shapes, determinism, causality, the
//! compression-slot embedding, and greedy decoding.

use noterec::model::{
    embed_tokens, forward, greedy_decode, note_embedding, DecodeState, ModelConfig, ModelError,
    ModelParams,
};
use noterec::prompt::{PromptSample, TaskKind, BOS_ID, EMB_ID, EOS_ID};

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 260,
        hidden_dim: 16,
        n_layers: 2,
        n_heads: 4,
        max_seq_len: 64,
        embed_dim: 8,
    }
}

fn ids(seq: &[u8]) -> Vec<u32> {
    let mut v = vec![BOS_ID];
    v.extend(seq.iter().map(|&b| u32::from(b)));
    v
}

#[test]
fn forward_shapes_match_config() {
    let cfg = tiny_cfg();
    let params: ModelParams<f32> = ModelParams::init(cfg, 1, 3.0);
    let input = ids(b"hello world");
    let trace = forward(&params, &input).unwrap();
    assert_eq!(trace.logits.len(), input.len() * cfg.vocab_size);
    assert_eq!(trace.hidden().len(), input.len() * cfg.hidden_dim);
}

#[test]
fn forward_is_deterministic() {
    let params: ModelParams<f32> = ModelParams::init(tiny_cfg(), 2, 3.0);
    let input = ids(b"same input twice");
    let a = forward(&params, &input).unwrap();
    let b = forward(&params, &input).unwrap();
    assert_eq!(a.logits, b.logits);
    assert_eq!(a.hidden(), b.hidden());
}

#[test]
fn causality_perturbation_leaves_prefix_unchanged() {
    let cfg = tiny_cfg();
    let params: ModelParams<f32> = ModelParams::init(cfg, 3, 3.0);
    let base = ids(b"abcdefghij");
    let mut changed = base.clone();
    let k = 6;
    changed[k] = u32::from(b'Z');
    let ta = forward(&params, &base).unwrap();
    let tb = forward(&params, &changed).unwrap();
    let h = cfg.hidden_dim;
    let v = cfg.vocab_size;
    assert_eq!(ta.hidden()[..k * h], tb.hidden()[..k * h]);
    assert_eq!(ta.logits[..k * v], tb.logits[..k * v]);
    // and positions at/after k do change
    assert_ne!(ta.logits[k * v..], tb.logits[k * v..]);
}

#[test]
fn attention_rows_sum_to_one() {
    let cfg = tiny_cfg();
    let params: ModelParams<f32> = ModelParams::init(cfg, 4, 3.0);
    let input = ids(b"attention probabilities");
    let trace = forward(&params, &input).unwrap();
    let seq = input.len();
    for lt in &trace.layers {
        for head in 0..cfg.n_heads {
            for i in 0..seq {
                let row = &lt.att[head * seq * seq + i * seq..head * seq * seq + (i + 1) * seq];
                let sum: f32 = row.iter().sum();
                assert!((sum - 1.0).abs() < 1e-6, "row sum {sum}");
                for (j, &p) in row.iter().enumerate() {
                    if j > i {
                        assert_eq!(p, 0.0, "causal mask leak at ({i},{j})");
                    }
                }
            }
        }
    }
}

fn sample_with_emb(cfg: &ModelConfig) -> PromptSample {
    // [BOS] 8 text bytes "[EMB] tail bytes, output, EOS
    let mut token_ids = vec![BOS_ID];
    token_ids.extend(b"context.".iter().map(|&b| u32::from(b)));
    let compression_pos = token_ids.len() - 1;
    token_ids.push(EMB_ID);
    token_ids.extend(b" out: ".iter().map(|&b| u32::from(b)));
    let start = token_ids.len();
    token_ids.extend(b"abc".iter().map(|&b| u32::from(b)));
    token_ids.push(EOS_ID);
    let end = token_ids.len();
    assert!(end <= cfg.max_seq_len);
    PromptSample {
        token_ids,
        compression_pos,
        output_span: start..end,
        task: TaskKind::Category,
        note_id: "test".into(),
    }
}

#[test]
fn embedding_has_config_dim_and_ignores_suffix() {
    let cfg = tiny_cfg();
    let params: ModelParams<f32> = ModelParams::init(cfg, 5, 3.0);
    let sample = sample_with_emb(&cfg);
    let emb = note_embedding(&params, &sample).unwrap();
    assert_eq!(emb.len(), cfg.embed_dim);

    // mutating tokens strictly after compression_pos leaves it unchanged
    let mut mutated = sample.clone();
    let last = mutated.token_ids.len() - 2;
    mutated.token_ids[last] = u32::from(b'X');
    let emb2 = note_embedding(&params, &mutated).unwrap();
    assert_eq!(emb, emb2);
}

#[test]
fn default_config_embedding_is_128_dimensional() {
    let cfg = ModelConfig::default();
    assert_eq!(cfg.embed_dim, 128);
    let params: ModelParams<f32> = ModelParams::init(cfg, 6, 3.0);
    let sample = sample_with_emb(&cfg);
    let emb = note_embedding(&params, &sample).unwrap();
    assert_eq!(emb.len(), 128);
}

#[test]
fn zero_projection_gives_zero_embedding() {
    let cfg = tiny_cfg();
    let mut params: ModelParams<f32> = ModelParams::init(cfg, 7, 3.0);
    params.w_embed_proj.fill(0.0);
    let sample = sample_with_emb(&cfg);
    let emb = note_embedding(&params, &sample).unwrap();
    assert!(emb.iter().all(|&v| v == 0.0));
}

#[test]
fn embed_tokens_matches_note_embedding() {
    let cfg = tiny_cfg();
    let params: ModelParams<f32> = ModelParams::init(cfg, 8, 3.0);
    let sample = sample_with_emb(&cfg);
    let a = note_embedding(&params, &sample).unwrap();
    let prefix = &sample.token_ids[..=sample.compression_pos + 1];
    let b = embed_tokens(&params, prefix, sample.compression_pos).unwrap();
    assert_eq!(a, b);
}

#[test]
fn incremental_decode_matches_batch_forward() {
    let cfg = tiny_cfg();
    let params: ModelParams<f32> = ModelParams::init(cfg, 9, 3.0);
    let input = ids(b"incremental equals batch");
    let trace = forward(&params, &input).unwrap();
    let mut state = DecodeState::new(&params);
    let mut last = Vec::new();
    for &t in &input {
        last = state.step(t).unwrap();
    }
    let v = cfg.vocab_size;
    let batch_last = &trace.logits[(input.len() - 1) * v..input.len() * v];
    assert_eq!(last.as_slice(), batch_last);
}

#[test]
fn greedy_uniform_logits_emit_token_zero() {
    let cfg = tiny_cfg();
    let mut params: ModelParams<f32> = ModelParams::init(cfg, 10, 3.0);
    for (_, t) in params.tensors_mut() {
        t.fill(0.0);
    }
    // all-zero parameters give identical logits everywhere; tie-break -> 0
    let out = greedy_decode(&params, &[BOS_ID], 5, EOS_ID).unwrap();
    assert_eq!(out, vec![0, 0, 0, 0, 0]);
}

#[test]
fn greedy_eos_first_gives_empty_generation() {
    let cfg = tiny_cfg();
    let mut params: ModelParams<f32> = ModelParams::init(cfg, 11, 3.0);
    for (_, t) in params.tensors_mut() {
        t.fill(0.0);
    }
    params.b_out[EOS_ID as usize] = 10.0;
    let out = greedy_decode(&params, &[BOS_ID], 5, EOS_ID).unwrap();
    assert!(out.is_empty());
}

#[test]
fn sequence_length_and_vocab_are_enforced() {
    let cfg = tiny_cfg();
    let params: ModelParams<f32> = ModelParams::init(cfg, 12, 3.0);
    let too_long = vec![65u32; cfg.max_seq_len + 1];
    assert!(matches!(
        forward(&params, &too_long),
        Err(ModelError::SequenceTooLong { .. })
    ));
    assert!(matches!(
        forward(&params, &[65, 700]),
        Err(ModelError::TokenOutOfRange { .. })
    ));
    assert!(matches!(
        forward::<f32>(&params, &[]),
        Err(ModelError::EmptySequence)
    ));
}

#[test]
fn params_stay_finite_and_counted() {
    let cfg = tiny_cfg();
    let params: ModelParams<f32> = ModelParams::init(cfg, 13, 3.0);
    assert!(params.all_finite());
    // tau is part of the learnable state
    assert_eq!(params.tau_value(), 3.0);
    let expected_tau_entry = params.tensors().iter().any(|(n, t)| n == "tau" && t.len() == 1);
    assert!(expected_tau_entry);
}
