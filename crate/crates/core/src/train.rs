//! Contrastive + generation training over mined related-note pairs.
//!
//! One unified prompt per note feeds both losses in a single forward pass:
//! the note embedding is read at the compression position while the
//! generation loss reads the output span. The total objective is
//! `(L_cl + alpha * L_gen) / (1 + alpha)`.

use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Note;
use crate::model::backward::{backward_into, LossAdjoints};
use crate::model::math::{log_sum_exp, Real};
use crate::model::{forward, project_embedding, ForwardTrace, ModelConfig, ModelError, ModelParams};
use crate::prompt::{
    build_category_prompt, build_hashtag_prompt, PromptError, PromptSample, TruncationConfig,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("cosine similarity of a zero vector is undefined")]
    ZeroVector,
    #[error("batch must contain at least 2 notes, got {0}")]
    BatchTooSmall(usize),
    #[error("pairing is not a perfect matching: {0}")]
    BadPairing(String),
    #[error("output span is empty or out of bounds")]
    BadOutputSpan,
    #[error("no training pairs available")]
    NoPairs,
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd,
    Momentum { beta: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl std::fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            OptimizerKind::Sgd => write!(f, "sgd"),
            OptimizerKind::Momentum { beta } => write!(f, "momentum:{beta}"),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                write!(f, "adam:{beta1}:{beta2}:{eps}")
            }
        }
    }
}

impl FromStr for OptimizerKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let parts: Vec<&str> = s.split(':').collect();
        match parts[0] {
            "sgd" => Ok(OptimizerKind::Sgd),
            "momentum" => {
                let beta = parts
                    .get(1)
                    .map(|v| v.parse().map_err(|_| format!("bad momentum beta {v:?}")))
                    .transpose()?
                    .unwrap_or(0.9);
                Ok(OptimizerKind::Momentum { beta })
            }
            "adam" => {
                let mut kind = OptimizerKind::adam();
                if let OptimizerKind::Adam { beta1, beta2, eps } = &mut kind {
                    if let Some(v) = parts.get(1) {
                        *beta1 = v.parse().map_err(|_| format!("bad adam beta1 {v:?}"))?;
                    }
                    if let Some(v) = parts.get(2) {
                        *beta2 = v.parse().map_err(|_| format!("bad adam beta2 {v:?}"))?;
                    }
                    if let Some(v) = parts.get(3) {
                        *eps = v.parse().map_err(|_| format!("bad adam eps {v:?}"))?;
                    }
                }
                Ok(kind)
            }
            other => Err(format!(
                "unknown optimizer {other:?} (expected sgd, momentum[:beta], adam[:b1:b2:eps])"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// B related pairs per batch (2B notes).
    pub batch_pairs: usize,
    /// Weight of the generation loss in the mixture.
    pub alpha: f64,
    /// Fraction of batch notes assigned the hashtag task.
    pub hashtag_ratio: f64,
    pub tau_init: f64,
    pub learning_rate: f64,
    /// Linear learning-rate warmup over this many steps (0 = none).
    /// Full-size steps out of a fresh random init can slam all embeddings
    /// into one ray, a fixed point where cosine gradients vanish.
    pub warmup_steps: usize,
    pub steps: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    /// Ablation switch: with the contrastive objective disabled the model
    /// trains on the generation loss alone.
    pub use_gcl: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_pairs: 64,
            alpha: 0.01,
            hashtag_ratio: 0.40,
            tau_init: 3.0,
            learning_rate: 0.05,
            warmup_steps: 0,
            steps: 1000,
            seed: 42,
            optimizer: OptimizerKind::Sgd,
            use_gcl: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_pairs < 1 {
            return Err(TrainError::InvalidConfig("batch_pairs must be >= 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(TrainError::InvalidConfig("alpha must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.hashtag_ratio) {
            return Err(TrainError::InvalidConfig(
                "hashtag_ratio must lie in [0, 1]".into(),
            ));
        }
        if self.learning_rate <= 0.0 {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// sim(a, b) = a.b / (|a| |b|)
pub fn cosine_similarity<T: Real>(a: &[T], b: &[T]) -> Result<T, TrainError> {
    let na = crate::model::math::dot(a, a).sqrt();
    let nb = crate::model::math::dot(b, b).sqrt();
    if na == T::zero() || nb == T::zero() {
        return Err(TrainError::ZeroVector);
    }
    Ok(crate::model::math::dot(a, b) / (na * nb))
}

fn check_pairing(n: usize, pairing: &[usize]) -> Result<(), TrainError> {
    if pairing.len() != n {
        return Err(TrainError::BadPairing(format!(
            "pairing length {} for {} notes",
            pairing.len(),
            n
        )));
    }
    for (i, &p) in pairing.iter().enumerate() {
        if p >= n || p == i || pairing[p] != i {
            return Err(TrainError::BadPairing(format!(
                "slot {i} maps to {p}, which does not map back"
            )));
        }
    }
    Ok(())
}

struct GclForward<T> {
    sims: Vec<T>,
    norms: Vec<T>,
    lses: Vec<T>,
    scale: T,
    loss: T,
}

fn gcl_forward<T: Real>(
    embeddings: &[Vec<T>],
    pairing: &[usize],
    tau: T,
) -> Result<GclForward<T>, TrainError> {
    let n = embeddings.len();
    if n < 2 {
        return Err(TrainError::BatchTooSmall(n));
    }
    check_pairing(n, pairing)?;
    let mut norms = vec![T::zero(); n];
    for (i, e) in embeddings.iter().enumerate() {
        norms[i] = crate::model::math::dot(e, e).sqrt();
        if norms[i] == T::zero() {
            return Err(TrainError::ZeroVector);
        }
    }
    let mut sims = vec![T::zero(); n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let s = crate::model::math::dot(&embeddings[i], &embeddings[j]) / (norms[i] * norms[j]);
            sims[i * n + j] = s;
            sims[j * n + i] = s;
        }
    }
    let scale = tau.exp();
    let mut lses = vec![T::zero(); n];
    let mut loss = T::zero();
    let inv_n = T::one() / T::from_f64c(n as f64);
    for i in 0..n {
        let zs: Vec<T> = (0..n)
            .filter(|&j| j != i)
            .map(|j| sims[i * n + j] * scale)
            .collect();
        let lse = log_sum_exp(&zs);
        lses[i] = lse;
        loss = loss + (lse - sims[i * n + pairing[i]] * scale) * inv_n;
    }
    Ok(GclForward {
        sims,
        norms,
        lses,
        scale,
        loss,
    })
}

/// In-batch contrastive loss over compression-token embeddings: every note
/// is an anchor once, its mined partner is the positive, and all other
/// batch notes are negatives. Similarities are scaled by e^tau.
pub fn gcl_loss<T: Real>(
    embeddings: &[Vec<T>],
    pairing: &[usize],
    tau: T,
) -> Result<T, TrainError> {
    Ok(gcl_forward(embeddings, pairing, tau)?.loss)
}

pub struct GclGrad<T> {
    pub loss: T,
    pub d_embeddings: Vec<Vec<T>>,
    pub d_tau: T,
}

pub fn gcl_loss_and_grad<T: Real>(
    embeddings: &[Vec<T>],
    pairing: &[usize],
    tau: T,
) -> Result<GclGrad<T>, TrainError> {
    let fwd = gcl_forward(embeddings, pairing, tau)?;
    let n = embeddings.len();
    let dim = embeddings[0].len();
    let inv_n = T::one() / T::from_f64c(n as f64);

    // d loss / d sims[i][j] summed over the anchor-i terms.
    let mut d_sims = vec![T::zero(); n * n];
    let mut d_scale = T::zero();
    for i in 0..n {
        let pos = pairing[i];
        for j in 0..n {
            if j == i {
                continue;
            }
            let s = fwd.sims[i * n + j];
            let p = ((s * fwd.scale) - fwd.lses[i]).exp();
            let indicator = if j == pos { T::one() } else { T::zero() };
            d_sims[i * n + j] = d_sims[i * n + j] + (p - indicator) * fwd.scale * inv_n;
            d_scale = d_scale + (p * s) * inv_n;
        }
        d_scale = d_scale - fwd.sims[i * n + pos] * inv_n;
    }
    let d_tau = d_scale * fwd.scale;

    // Cosine backward for each ordered anchor/other term.
    let mut d_embeddings = vec![vec![T::zero(); dim]; n];
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let g = d_sims[i * n + j];
            if g == T::zero() {
                continue;
            }
            let s = fwd.sims[i * n + j];
            let inv_ninj = T::one() / (fwd.norms[i] * fwd.norms[j]);
            let inv_ni2 = T::one() / (fwd.norms[i] * fwd.norms[i]);
            let inv_nj2 = T::one() / (fwd.norms[j] * fwd.norms[j]);
            for k in 0..dim {
                d_embeddings[i][k] = d_embeddings[i][k]
                    + g * (embeddings[j][k] * inv_ninj - s * embeddings[i][k] * inv_ni2);
                d_embeddings[j][k] = d_embeddings[j][k]
                    + g * (embeddings[i][k] * inv_ninj - s * embeddings[j][k] * inv_nj2);
            }
        }
    }
    Ok(GclGrad {
        loss: fwd.loss,
        d_embeddings,
        d_tau,
    })
}

/// Mean negative log-likelihood over the output span, conditioned on
/// everything before it. Token t is predicted by the logits at t-1.
pub fn csft_loss<T: Real>(trace: &ForwardTrace<T>, sample: &PromptSample) -> Result<T, TrainError> {
    let span = sample.output_span.clone();
    let seq = trace.seq_len();
    let v = trace.logits.len() / seq;
    if span.is_empty() || span.start == 0 || span.end > seq {
        return Err(TrainError::BadOutputSpan);
    }
    let mut loss = T::zero();
    for t in span.clone() {
        let row = &trace.logits[(t - 1) * v..t * v];
        let lse = log_sum_exp(row);
        let target = sample.token_ids[t] as usize;
        loss = loss + (lse - row[target]);
    }
    Ok(loss / T::from_f64c(span.len() as f64))
}

/// Accumulate `upstream * d csft / d logits` into `d_logits`.
pub fn csft_grad_into<T: Real>(
    trace: &ForwardTrace<T>,
    sample: &PromptSample,
    upstream: T,
    d_logits: &mut [T],
) -> Result<(), TrainError> {
    let span = sample.output_span.clone();
    let seq = trace.seq_len();
    let v = trace.logits.len() / seq;
    if span.is_empty() || span.start == 0 || span.end > seq {
        return Err(TrainError::BadOutputSpan);
    }
    let inv_t = upstream / T::from_f64c(span.len() as f64);
    for t in span {
        let row = &trace.logits[(t - 1) * v..t * v];
        let lse = log_sum_exp(row);
        let target = sample.token_ids[t] as usize;
        let drow = &mut d_logits[(t - 1) * v..t * v];
        for j in 0..v {
            let p = (row[j] - lse).exp();
            let indicator = if j == target { T::one() } else { T::zero() };
            drow[j] = drow[j] + inv_t * (p - indicator);
        }
    }
    Ok(())
}

/// L = (L_cl + alpha * L_gen) / (1 + alpha)
pub fn total_loss<T: Real>(l_cl: T, l_gen: T, alpha: T) -> T {
    (l_cl + alpha * l_gen) / (T::one() + alpha)
}

/// One training batch: 2B prompt samples in pair order (2k and 2k+1 are a
/// mined related pair) plus the explicit pairing map.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub samples: Vec<PromptSample>,
    pub pairing: Vec<usize>,
}

/// Sample B pairs without note-id duplication inside the batch, assign
/// round(r * 2B) notes to the hashtag task (hashtag-less notes fall back to
/// the category task), and build the prompts.
pub fn assemble_batch<R: Rng>(
    pairs: &[(Note, Note)],
    cfg: &TrainConfig,
    trunc: &TruncationConfig,
    rng: &mut R,
) -> Result<TrainBatch, TrainError> {
    if pairs.is_empty() {
        return Err(TrainError::NoPairs);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let mut used = std::collections::HashSet::new();
    let mut picked: Vec<&(Note, Note)> = Vec::with_capacity(cfg.batch_pairs);
    for &idx in &order {
        if picked.len() == cfg.batch_pairs {
            break;
        }
        let (a, b) = &pairs[idx];
        if a.id == b.id || used.contains(&a.id) || used.contains(&b.id) {
            continue;
        }
        used.insert(a.id.clone());
        used.insert(b.id.clone());
        picked.push(&pairs[idx]);
    }
    if picked.is_empty() {
        return Err(TrainError::NoPairs);
    }
    if picked.len() < cfg.batch_pairs {
        log::warn!(
            "batch wants {} pairs but only {} satisfy in-batch id dedup; skipping the rest",
            cfg.batch_pairs,
            picked.len()
        );
    }

    let notes: Vec<&Note> = picked.iter().flat_map(|(a, b)| [a, b]).collect();
    let n = notes.len();
    let n_hashtag = (cfg.hashtag_ratio * n as f64).round() as usize;
    let mut slot_order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        slot_order.swap(i, j);
    }
    let mut is_hashtag = vec![false; n];
    let mut assigned = 0;
    for &slot in &slot_order {
        if assigned == n_hashtag {
            break;
        }
        if !notes[slot].hashtags.is_empty() {
            is_hashtag[slot] = true;
            assigned += 1;
        }
    }

    let mut samples = Vec::with_capacity(n);
    for (slot, note) in notes.iter().enumerate() {
        let sample = if is_hashtag[slot] {
            build_hashtag_prompt(note, trunc, rng)?
        } else {
            build_category_prompt(note, trunc)
        };
        samples.push(sample);
    }
    let pairing = (0..n).map(|i| i ^ 1).collect();
    Ok(TrainBatch { samples, pairing })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_cl: f64,
    pub l_gen: f64,
    pub total: f64,
    pub tau: f64,
}

/// Forward-only total loss of a batch. This is the scalar the finite
/// difference oracle probes; it never touches the backward pass.
pub fn batch_loss<T: Real>(
    params: &ModelParams<T>,
    batch: &TrainBatch,
    alpha: f64,
    use_gcl: bool,
) -> Result<T, TrainError> {
    let mut embeddings = Vec::with_capacity(batch.samples.len());
    let mut gen_sum = T::zero();
    for sample in &batch.samples {
        let trace = forward(params, &sample.token_ids)?;
        embeddings.push(project_embedding(params, &trace, sample.compression_pos));
        gen_sum = gen_sum + csft_loss(&trace, sample)?;
    }
    let l_gen = gen_sum / T::from_f64c(batch.samples.len() as f64);
    if !use_gcl {
        return Ok(l_gen);
    }
    let l_cl = gcl_loss(&embeddings, &batch.pairing, params.tau_value())?;
    Ok(total_loss(l_cl, l_gen, T::from_f64c(alpha)))
}

/// Losses plus analytic gradients of the total batch loss for every
/// parameter, including tau. Gradients accumulate in sample order.
pub fn batch_gradients<T: Real>(
    params: &ModelParams<T>,
    batch: &TrainBatch,
    alpha: f64,
    use_gcl: bool,
) -> Result<(StepMetrics, ModelParams<T>), TrainError> {
    let n = batch.samples.len();
    let mut traces = Vec::with_capacity(n);
    let mut embeddings = Vec::with_capacity(n);
    let mut csft_losses = Vec::with_capacity(n);
    for sample in &batch.samples {
        let trace = forward(params, &sample.token_ids)?;
        embeddings.push(project_embedding(params, &trace, sample.compression_pos));
        csft_losses.push(csft_loss(&trace, sample)?);
        traces.push(trace);
    }
    let l_gen = csft_losses.iter().copied().sum::<T>() / T::from_f64c(n as f64);

    let alpha_t = T::from_f64c(alpha);
    let (l_cl, total, gcl, gcl_scale, csft_scale) = if use_gcl {
        let gcl = gcl_loss_and_grad(&embeddings, &batch.pairing, params.tau_value())?;
        let total = total_loss(gcl.loss, l_gen, alpha_t);
        let gcl_scale = T::one() / (T::one() + alpha_t);
        let csft_scale = alpha_t / ((T::one() + alpha_t) * T::from_f64c(n as f64));
        (gcl.loss, total, Some(gcl), gcl_scale, csft_scale)
    } else {
        (
            T::zero(),
            l_gen,
            None,
            T::zero(),
            T::one() / T::from_f64c(n as f64),
        )
    };

    let mut grads = params.zeros_like();
    let vocab = params.cfg.vocab_size;
    for (i, sample) in batch.samples.iter().enumerate() {
        let mut adj = LossAdjoints::zeros(traces[i].seq_len(), vocab);
        if csft_scale != T::zero() {
            csft_grad_into(&traces[i], sample, csft_scale, &mut adj.d_logits)?;
        }
        if let Some(g) = &gcl {
            let scaled: Vec<T> = g.d_embeddings[i].iter().map(|&v| v * gcl_scale).collect();
            adj.d_embedding = Some((sample.compression_pos, scaled));
        }
        backward_into(params, &traces[i], &adj, &mut grads);
    }
    if let Some(g) = &gcl {
        grads.tau[0] = grads.tau[0] + g.d_tau * gcl_scale;
    }

    let metrics = StepMetrics {
        step: 0,
        l_cl: l_cl.to_f64c(),
        l_gen: l_gen.to_f64c(),
        total: total.to_f64c(),
        tau: params.tau_value().to_f64c(),
    };
    Ok((metrics, grads))
}

struct Optimizer<T> {
    kind: OptimizerKind,
    lr: f64,
    warmup: usize,
    m: Option<ModelParams<T>>,
    v: Option<ModelParams<T>>,
    t: usize,
}

impl<T: Real> Optimizer<T> {
    fn new(kind: OptimizerKind, lr: f64, warmup: usize, shape: &ModelParams<T>) -> Self {
        let needs_m = !matches!(kind, OptimizerKind::Sgd);
        let needs_v = matches!(kind, OptimizerKind::Adam { .. });
        Self {
            kind,
            lr,
            warmup,
            m: needs_m.then(|| shape.zeros_like()),
            v: needs_v.then(|| shape.zeros_like()),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ModelParams<T>, grads: &ModelParams<T>) {
        self.t += 1;
        let scale = if self.warmup > 0 && self.t <= self.warmup {
            self.t as f64 / self.warmup as f64
        } else {
            1.0
        };
        let lr = T::from_f64c(self.lr * scale);
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), (_, g)) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (pv, gv) in p.iter_mut().zip(g.iter()) {
                        *pv = *pv - lr * *gv;
                    }
                }
            }
            OptimizerKind::Momentum { beta } => {
                let beta = T::from_f64c(beta);
                let m = self.m.as_mut().unwrap();
                for (((_, p), (_, g)), (_, mv)) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut())
                {
                    for i in 0..p.len() {
                        mv[i] = beta * mv[i] + g[i];
                        p[i] = p[i] - lr * mv[i];
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let b1 = T::from_f64c(beta1);
                let b2 = T::from_f64c(beta2);
                let eps = T::from_f64c(eps);
                let bc1 = T::one() - T::from_f64c(beta1.powi(self.t as i32));
                let bc2 = T::one() - T::from_f64c(beta2.powi(self.t as i32));
                let m = self.m.as_mut().unwrap();
                let v = self.v.as_mut().unwrap();
                for ((((_, p), (_, g)), (_, mv)), (_, vv)) in params
                    .tensors_mut()
                    .into_iter()
                    .zip(grads.tensors())
                    .zip(m.tensors_mut())
                    .zip(v.tensors_mut())
                {
                    for i in 0..p.len() {
                        mv[i] = b1 * mv[i] + (T::one() - b1) * g[i];
                        vv[i] = b2 * vv[i] + (T::one() - b2) * g[i] * g[i];
                        let mhat = mv[i] / bc1;
                        let vhat = vv[i] / bc2;
                        p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

pub struct TrainOutput {
    pub params: ModelParams<f32>,
    pub metrics: Vec<StepMetrics>,
}

/// Run the full loop: assemble a batch, forward all 2B samples, combine the
/// contrastive and generation losses, update every parameter including tau.
/// Deterministic given the seed.
pub fn train(
    pairs: &[(Note, Note)],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    trunc: &TruncationConfig,
) -> Result<TrainOutput, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if pairs.is_empty() {
        return Err(TrainError::NoPairs);
    }
    let mut params = ModelParams::<f32>::init(model_cfg, cfg.seed, cfg.tau_init);
    // distinct stream from parameter init
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, cfg.warmup_steps, &params);
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = assemble_batch(pairs, cfg, trunc, &mut rng)?;
        let (mut step_metrics, grads) = batch_gradients(&params, &batch, cfg.alpha, cfg.use_gcl)?;
        step_metrics.step = step;
        if !step_metrics.total.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        opt.step(&mut params, &grads);
        metrics.push(step_metrics);
    }
    Ok(TrainOutput { params, metrics })
}

/// Line-delimited metrics records.
pub fn write_metrics(path: &std::path::Path, metrics: &[StepMetrics]) -> std::io::Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for m in metrics {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}
