//! Temporary diagnostics (deleted before finalizing).

use noterec::model::{ModelConfig, ModelParams};
use noterec::prompt::{PromptSample, TaskKind, BOS_ID};
use noterec::train::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        vocab_size: 64,
        hidden_dim: 8,
        n_layers: 1,
        n_heads: 2,
        max_seq_len: 32,
        embed_dim: 4,
    }
}

fn tiny_batch(seed: u64, n_pairs: usize, vocab: u32) -> TrainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for p in 0..2 * n_pairs {
        let mut ids = vec![BOS_ID.min(vocab - 4)];
        let body_len = 6 + (p % 3);
        for _ in 0..body_len {
            ids.push(rng.gen_range(0..vocab - 4));
        }
        let compression_pos = ids.len() - 1;
        ids.push(vocab - 3);
        ids.push(rng.gen_range(0..vocab - 4));
        let start = ids.len();
        for _ in 0..3 {
            ids.push(rng.gen_range(0..vocab - 4));
        }
        ids.push(vocab - 2);
        let end = ids.len();
        samples.push(PromptSample {
            token_ids: ids,
            compression_pos,
            output_span: start..end,
            task: TaskKind::Category,
            note_id: format!("s{p}"),
        });
    }
    TrainBatch {
        pairing: (0..2 * n_pairs).map(|i| i ^ 1).collect(),
        samples,
    }
}

#[test]
#[ignore]
fn probe_fd_convergence() {
    let cfg = tiny_model();
    let mut params: ModelParams<f64> = ModelParams::init(cfg, 17, 3.0);
    let batch = tiny_batch(17, 2, cfg.vocab_size as u32);
    let (_, grads) = batch_gradients(&params, &batch, 0.01, true).unwrap();
    // pos_embed is tensor index 1, element 49
    let ti = 1;
    let i = 49;
    let analytic = grads.tensors()[ti].1[i];
    println!("analytic = {analytic}");
    for &h in &[1e-3, 1e-4, 1e-5, 1e-6] {
        let orig = params.tensors()[ti].1[i];
        params.tensors_mut()[ti].1[i] = orig + h;
        let lp: f64 = batch_loss(&params, &batch, 0.01, true).unwrap();
        params.tensors_mut()[ti].1[i] = orig - h;
        let lm: f64 = batch_loss(&params, &batch, 0.01, true).unwrap();
        params.tensors_mut()[ti].1[i] = orig;
        let numeric = (lp - lm) / (2.0 * h);
        println!("h={h:>8}: numeric = {numeric}  diff = {}", numeric - analytic);
    }
}

#[test]
#[ignore]
fn probe_training_trajectory() {
    let vocab = noterec::corpus::default_vocab(120);
    let (notes, _) = noterec::corpus::generate_synthetic_corpus(
        &noterec::corpus::CorpusGenConfig {
            seed: 3,
            n_notes: 16,
            n_categories: 8,
            title_words: (1, 2),
            content_words: (2, 3),
            hashtags_per_note: (1, 2),
            ..Default::default()
        },
        &vocab,
    )
    .unwrap();
    let pairs: Vec<_> = (0..8)
        .map(|i| (notes[2 * i].clone(), notes[2 * i + 1].clone()))
        .collect();
    let model_cfg = ModelConfig {
        vocab_size: 260,
        hidden_dim: 16,
        n_layers: 2,
        n_heads: 2,
        max_seq_len: 320,
        embed_dim: 16,
    };
    let tau_init: f64 = std::env::var("PROBE_TAU").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let lr: f64 = std::env::var("PROBE_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let bp: usize = std::env::var("PROBE_B").ok().and_then(|v| v.parse().ok()).unwrap_or(4);
    let cfg = TrainConfig {
        batch_pairs: bp,
        alpha: std::env::var("PROBE_ALPHA").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0),
        hashtag_ratio: 0.4,
        tau_init,
        learning_rate: lr,
        warmup_steps: std::env::var("PROBE_WARMUP").ok().and_then(|v| v.parse().ok()).unwrap_or(0),
        steps: 500,
        seed: 11,
        optimizer: OptimizerKind::adam(),
        use_gcl: true,
    };
    let trunc = noterec::prompt::TruncationConfig {
        max_title_tokens: 8,
        max_content_tokens: 12,
    };
    let out = train(&pairs, model_cfg, &cfg, &trunc).unwrap();
    for m in out.metrics.iter().step_by(25) {
        println!(
            "step {:>4} l_cl {:>9.5} l_gen {:>9.5} total {:>9.5} tau {:>8.4}",
            m.step, m.l_cl, m.l_gen, m.total, m.tau
        );
    }
    let last = out.metrics.last().unwrap();
    println!("last: {last:?}");
}

#[test]
#[ignore]
fn probe_gemm_throughput() {
    use std::time::Instant;
    // S x H @ H x 4H, the dominant training shape
    let (m, k, n) = (280usize, 128usize, 512usize);
    let a: Vec<f32> = (0..m * k).map(|i| (i % 31) as f32 * 0.01).collect();
    let b: Vec<f32> = (0..k * n).map(|i| (i % 17) as f32 * 0.02).collect();
    let mut c = vec![0.0f32; m * n];
    let reps = 200;
    let t0 = Instant::now();
    for _ in 0..reps {
        noterec::model::math::gemm(&mut c, &a, &b, m, k, n);
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * reps) as f64;
    println!("gemm f32 {m}x{k}x{n}: {:.2} Gflop/s", flops / dt / 1e9);

    let a64: Vec<f64> = a.iter().map(|&x| x as f64).collect();
    let b64: Vec<f64> = b.iter().map(|&x| x as f64).collect();
    let mut c64 = vec![0.0f64; m * n];
    let t0 = Instant::now();
    for _ in 0..reps {
        noterec::model::math::gemm(&mut c64, &a64, &b64, m, k, n);
    }
    let dt = t0.elapsed().as_secs_f64();
    println!("gemm f64 {m}x{k}x{n}: {:.2} Gflop/s", flops / dt / 1e9);
}

fn smoke_corpus() -> (Vec<noterec::corpus::Note>, noterec::corpus::CategorySet) {
    let vocab = noterec::corpus::default_vocab(400);
    noterec::corpus::generate_synthetic_corpus(
        &noterec::corpus::CorpusGenConfig {
            seed: 77,
            n_notes: 64,
            n_categories: 32,
            title_words: (2, 3),
            content_words: (3, 5),
            hashtags_per_note: (2, 2),
            category_word_frac: 0.1,
            hashtag_category_frac: 0.0,
            ..Default::default()
        },
        &vocab,
    )
    .unwrap()
}

fn smoke_mined(notes: &[noterec::corpus::Note]) -> noterec::pairs::RelatedPairSet {
    let log = noterec::corpus::generate_synthetic_log(
        &noterec::corpus::LogGenConfig {
            seed: 78,
            n_users: 24,
            n_events: 3000,
            same_category_bias: 0.95,
            active_user_frac: 0.05,
            active_weight: 6.0,
        },
        notes,
    )
    .unwrap();
    let table = noterec::pairs::cooccurrence_scores(&log);
    noterec::pairs::mine_related_pairs(
        &table,
        &noterec::pairs::PairMiningConfig {
            top_t: 1,
            ..Default::default()
        },
    )
    .unwrap()
}

#[test]
#[ignore]
fn probe_smoke_mining_structure() {
    let (notes, _) = smoke_corpus();
    let mined = smoke_mined(&notes);
    println!("mined pairs: {}", mined.pairs.len());
    let by_cat: std::collections::BTreeMap<&str, Vec<&str>> = {
        let mut m: std::collections::BTreeMap<&str, Vec<&str>> = Default::default();
        for n in &notes {
            m.entry(n.category.as_str()).or_default().push(n.id.as_str());
        }
        m
    };
    let cat_of: std::collections::BTreeMap<&str, &str> =
        notes.iter().map(|n| (n.id.as_str(), n.category.as_str())).collect();
    let mut mutual = 0;
    let mut same_cat = 0;
    let set: std::collections::BTreeSet<(&str, &str)> = mined
        .pairs
        .iter()
        .map(|p| (p.src.as_str(), p.dst.as_str()))
        .collect();
    for p in &mined.pairs {
        if set.contains(&(p.dst.as_str(), p.src.as_str())) {
            mutual += 1;
        }
        if cat_of[p.src.as_str()] == cat_of[p.dst.as_str()] {
            same_cat += 1;
        }
    }
    println!("mutual: {mutual}, same-category: {same_cat}");
    let couples: Vec<_> = mined
        .pairs
        .iter()
        .filter(|p| p.src < p.dst)
        .collect();
    println!("src<dst pairs: {}", couples.len());
    let mut covered: std::collections::BTreeSet<&str> = Default::default();
    let mut disjoint = true;
    for p in &couples {
        if !covered.insert(p.src.as_str()) || !covered.insert(p.dst.as_str()) {
            disjoint = false;
        }
    }
    println!("couple coverage: {} notes, disjoint: {disjoint}", covered.len());
    println!("categories: {}", by_cat.len());
}

#[test]
#[ignore]
fn probe_smoke_end_to_end() {
    use std::time::Instant;
    let (notes, cats) = smoke_corpus();
    let mined = smoke_mined(&notes);
    let couples = noterec::pairs::RelatedPairSet {
        pairs: mined.pairs.iter().filter(|p| p.src < p.dst).cloned().collect(),
    };
    let examples = noterec::pairs::pairs_to_training_examples(&couples, &notes).unwrap();
    println!("training pairs: {}", examples.len());

    let steps: usize = std::env::var("PROBE_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(400);
    let tau: f64 = std::env::var("PROBE_TAU").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let lr: f64 = std::env::var("PROBE_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let alpha: f64 = std::env::var("PROBE_ALPHA").ok().and_then(|v| v.parse().ok()).unwrap_or(1.0);
    let bp: usize = std::env::var("PROBE_B").ok().and_then(|v| v.parse().ok()).unwrap_or(8);

    let model_cfg = noterec::model::ModelConfig::default();
    let cfg = TrainConfig {
        batch_pairs: bp,
        alpha,
        hashtag_ratio: std::env::var("PROBE_R").ok().and_then(|v| v.parse().ok()).unwrap_or(0.4),
        tau_init: tau,
        learning_rate: lr,
        warmup_steps: std::env::var("PROBE_WARMUP").ok().and_then(|v| v.parse().ok()).unwrap_or(0),
        steps,
        seed: 7,
        optimizer: std::env::var("PROBE_OPT").ok().map(|v| v.parse().unwrap()).unwrap_or(OptimizerKind::adam()),
        use_gcl: true,
    };
    let trunc = noterec::prompt::TruncationConfig::default();
    let t0 = Instant::now();
    let out = train(&examples, model_cfg, &cfg, &trunc).unwrap();
    println!("trained {} steps in {:.1}s", steps, t0.elapsed().as_secs_f64());
    for m in out.metrics.iter().step_by((steps / 12).max(1)) {
        println!(
            "step {:>4} l_cl {:>9.5} l_gen {:>9.5} total {:>9.5} tau {:>8.4}",
            m.step, m.l_cl, m.l_gen, m.total, m.tau
        );
    }
    let last = out.metrics.last().unwrap();
    println!("last: l_cl {:.5} l_gen {:.5} tau {:.4}", last.l_cl, last.l_gen, last.tau);

    let eval_pairs = noterec::eval::eval_pairs_from(&couples);
    let t0 = Instant::now();
    let report = noterec::eval::evaluate(
        &out.params,
        &notes,
        &cats,
        Some(&eval_pairs),
        &trunc,
        &noterec::eval::EvalOptions {
            recall_ks: vec![1, 10],
            ..Default::default()
        },
    )
    .unwrap();
    println!("eval took {:.1}s", t0.elapsed().as_secs_f64());
    println!("{}", noterec::eval::render_text(&report));
    // embedding geometry after training
    let embs = noterec::eval::embed_pool(&out.params, &notes, &trunc).unwrap();
    let cat_of: std::collections::BTreeMap<&str, &str> =
        notes.iter().map(|n| (n.id.as_str(), n.category.as_str())).collect();
    let mut couple_sims = Vec::new();
    let mut other_sims = Vec::new();
    for i in 0..embs.len() {
        for j in (i + 1)..embs.len() {
            let a: Vec<f64> = embs[i].iter().map(|&x| x as f64).collect();
            let b: Vec<f64> = embs[j].iter().map(|&x| x as f64).collect();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s = dot / (na.max(1e-30) * nb.max(1e-30));
            if cat_of[notes[i].id.as_str()] == cat_of[notes[j].id.as_str()] {
                couple_sims.push(s);
            } else {
                other_sims.push(s);
            }
        }
    }
    let stats = |v: &[f64]| {
        let mn = v.iter().cloned().fold(f64::INFINITY, f64::min);
        let mx = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        format!("min {mn:.4} mean {mean:.4} max {mx:.4}")
    };
    println!("couple sims: {}", stats(&couple_sims));
    println!("other  sims: {}", stats(&other_sims));
}

#[test]
#[ignore]
fn probe_init_embedding_geometry() {
    let (notes, _) = smoke_corpus();
    let model_cfg = noterec::model::ModelConfig::default();
    let params: ModelParams<f32> = ModelParams::init(model_cfg, 7, 1.0);
    let trunc = noterec::prompt::TruncationConfig::default();
    let embs = noterec::eval::embed_pool(&params, &notes[..16], &trunc).unwrap();
    let mut sims = Vec::new();
    for i in 0..embs.len() {
        for j in (i + 1)..embs.len() {
            let a: Vec<f64> = embs[i].iter().map(|&x| x as f64).collect();
            let b: Vec<f64> = embs[j].iter().map(|&x| x as f64).collect();
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            sims.push(dot / (na * nb));
        }
    }
    let mn = sims.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean: f64 = sims.iter().sum::<f64>() / sims.len() as f64;
    println!("init cos sims: min {mn:.6} mean {mean:.6} max {mx:.6}");
    let norm0: f64 = embs[0].iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    println!("embedding norm ~ {norm0:.4}");

    // gradient norms for one batch at init
    let mined = smoke_mined(&notes);
    let couples = noterec::pairs::RelatedPairSet {
        pairs: mined.pairs.iter().filter(|p| p.src < p.dst).cloned().collect(),
    };
    let examples = noterec::pairs::pairs_to_training_examples(&couples, &notes).unwrap();
    let cfg = TrainConfig {
        batch_pairs: 8,
        alpha: 1.0,
        tau_init: 1.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = assemble_batch(&examples, &cfg, &trunc, &mut rng).unwrap();
    let (m, grads) = batch_gradients(&params, &batch, 1.0, true).unwrap();
    println!("losses: l_cl {:.5} l_gen {:.5}", m.l_cl, m.l_gen);
    for (name, t) in grads.tensors() {
        let n2: f64 = t.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        if name.contains("layer1") || !name.contains("layer") {
            println!("  grad |{name}| = {n2:.6e}");
        }
    }
    // gcl-only gradient on the projection
    let (_, grads_gcl) = batch_gradients(&params, &batch, 0.0, true).unwrap();
    let n2: f64 = grads_gcl.w_embed_proj.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    println!("gcl-only |w_embed_proj| grad = {n2:.6e}");
    let emb_norm_grad: f64 = grads_gcl.tau.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    println!("gcl-only |tau| grad = {emb_norm_grad:.6e}");
}

#[test]
#[ignore]
fn probe_fixed_batch_descent() {
    let (notes, _) = smoke_corpus();
    let mined = smoke_mined(&notes);
    let couples = noterec::pairs::RelatedPairSet {
        pairs: mined.pairs.iter().filter(|p| p.src < p.dst).cloned().collect(),
    };
    let examples = noterec::pairs::pairs_to_training_examples(&couples, &notes).unwrap();
    let model_cfg = noterec::model::ModelConfig::default();
    let mut params: ModelParams<f32> = ModelParams::init(model_cfg, 7, 1.0);
    let cfg = TrainConfig {
        batch_pairs: 4,
        alpha: 0.0,
        tau_init: 1.0,
        ..Default::default()
    };
    let trunc = noterec::prompt::TruncationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = assemble_batch(&examples, &cfg, &trunc, &mut rng).unwrap();

    // plain SGD on one fixed batch, pure contrastive loss
    let lr: f32 = std::env::var("PROBE_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    for step in 0..60 {
        let (m, grads) = batch_gradients(&params, &batch, 0.0, true).unwrap();
        if step % 5 == 0 {
            println!("step {:>3} l_cl {:.6} tau {:.4}", step, m.l_cl, m.tau);
        }
        for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (pv, gv) in p.iter_mut().zip(g.iter()) {
                *pv -= lr * *gv;
            }
        }
    }
    let (m, _) = batch_gradients(&params, &batch, 0.0, true).unwrap();
    println!("final l_cl {:.6}", m.l_cl);
}

#[test]
#[ignore]
fn probe_interference() {
    let (notes, _) = smoke_corpus();
    let mined = smoke_mined(&notes);
    let couples = noterec::pairs::RelatedPairSet {
        pairs: mined.pairs.iter().filter(|p| p.src < p.dst).cloned().collect(),
    };
    let examples = noterec::pairs::pairs_to_training_examples(&couples, &notes).unwrap();
    let model_cfg = noterec::model::ModelConfig::default();
    let mut params: ModelParams<f32> = ModelParams::init(model_cfg, 7, 1.0);
    let trunc = noterec::prompt::TruncationConfig::default();

    // two disjoint fixed batches of 4 couples each
    let batch_a_pairs: Vec<(noterec::corpus::Note, noterec::corpus::Note)> =
        examples[0..4].to_vec();
    let batch_b_pairs: Vec<(noterec::corpus::Note, noterec::corpus::Note)> =
        examples[4..8].to_vec();
    let cfg = TrainConfig {
        batch_pairs: 4,
        alpha: 0.0,
        tau_init: 1.0,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch_a = assemble_batch(&batch_a_pairs, &cfg, &trunc, &mut rng).unwrap();
    let batch_b = assemble_batch(&batch_b_pairs, &cfg, &trunc, &mut rng).unwrap();

    let lr: f32 = 1e-3;
    let mut sgd = |params: &mut ModelParams<f32>, batch: &TrainBatch, steps: usize| {
        for _ in 0..steps {
            let (_, grads) = batch_gradients(params, batch, 0.0, true).unwrap();
            for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                for (pv, gv) in p.iter_mut().zip(g.iter()) {
                    *pv -= lr * *gv;
                }
            }
        }
    };
    let loss_of = |params: &ModelParams<f32>, batch: &TrainBatch| -> f64 {
        batch_loss(params, batch, 0.0, true).unwrap() as f64
    };

    println!("init:        loss_a {:.4} loss_b {:.4}", loss_of(&params, &batch_a), loss_of(&params, &batch_b));
    sgd(&mut params, &batch_a, 60);
    println!("after A x60: loss_a {:.4} loss_b {:.4}", loss_of(&params, &batch_a), loss_of(&params, &batch_b));
    sgd(&mut params, &batch_b, 60);
    println!("after B x60: loss_a {:.4} loss_b {:.4}", loss_of(&params, &batch_a), loss_of(&params, &batch_b));
    sgd(&mut params, &batch_a, 60);
    println!("after A x60: loss_a {:.4} loss_b {:.4}", loss_of(&params, &batch_a), loss_of(&params, &batch_b));
    // alternate single steps, like real training
    for _ in 0..60 {
        sgd(&mut params, &batch_a, 1);
        sgd(&mut params, &batch_b, 1);
    }
    println!("after 60 alternating: loss_a {:.4} loss_b {:.4}", loss_of(&params, &batch_a), loss_of(&params, &batch_b));
}

#[test]
#[ignore]
fn probe_projection_only_gcl() {
    let (notes, cats) = smoke_corpus();
    let mined = smoke_mined(&notes);
    let couples = noterec::pairs::RelatedPairSet {
        pairs: mined.pairs.iter().filter(|p| p.src < p.dst).cloned().collect(),
    };
    let examples = noterec::pairs::pairs_to_training_examples(&couples, &notes).unwrap();
    let model_cfg = noterec::model::ModelConfig::default();
    let mut params: ModelParams<f32> = ModelParams::init(model_cfg, 7, 1.0);
    let cfg = TrainConfig {
        batch_pairs: std::env::var("PROBE_B").ok().and_then(|v| v.parse().ok()).unwrap_or(8),
        alpha: 0.0,
        hashtag_ratio: 0.0,
        tau_init: 1.0,
        ..Default::default()
    };
    let trunc = noterec::prompt::TruncationConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let lr: f32 = std::env::var("PROBE_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(0.01);
    let steps: usize = std::env::var("PROBE_STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(300);
    for step in 0..steps {
        let batch = assemble_batch(&examples, &cfg, &trunc, &mut rng).unwrap();
        let (m, grads) = batch_gradients(&params, &batch, 0.0, true).unwrap();
        if step % 25 == 0 {
            println!("step {:>3} l_cl {:.5} tau {:.4}", step, m.l_cl, m.tau);
        }
        for ((name, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            if name == "w_embed_proj" || name == "tau" {
                for (pv, gv) in p.iter_mut().zip(g.iter()) {
                    *pv -= lr * *gv;
                }
            }
        }
    }
    let eval_pairs = noterec::eval::eval_pairs_from(&couples);
    let report = noterec::eval::evaluate(
        &params, &notes, &cats, Some(&eval_pairs), &trunc,
        &noterec::eval::EvalOptions { recall_ks: vec![1, 10], generation: false, ..Default::default() },
    )
    .unwrap();
    println!("{}", noterec::eval::render_text(&report));
}
