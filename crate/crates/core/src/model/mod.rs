//! Small decoder-only autoregressive transformer with manual backprop.
//!
//! Pre-norm blocks, learned absolute position embeddings, GELU feed-forward.
//! The final-layer hidden state at the compression slot is projected by a
//! linear layer to the note-embedding space. All learnable state lives in
//! [`ModelParams`], including the contrastive temperature `tau`.

pub mod backward;
pub mod checkpoint;
pub mod math;

use math::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::prompt::PromptSample;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("sequence length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} outside vocabulary of size {vocab}")]
    TokenOutOfRange { id: u32, vocab: usize },
    #[error("empty token sequence")]
    EmptySequence,
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    /// Dimension of the note-embedding space.
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: crate::prompt::VOCAB_SIZE as usize,
            hidden_dim: 128,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 512,
            embed_dim: 128,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_dim == 0 || self.hidden_dim % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "hidden_dim {} not divisible by n_heads {}",
                self.hidden_dim, self.n_heads
            )));
        }
        if self.embed_dim == 0 {
            return Err(ModelError::InvalidConfig("embed_dim must be >= 1".into()));
        }
        if self.vocab_size == 0 || self.n_layers == 0 || self.max_seq_len == 0 {
            return Err(ModelError::InvalidConfig(
                "vocab_size, n_layers, max_seq_len must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.n_heads
    }

    pub fn ff_dim(&self) -> usize {
        4 * self.hidden_dim
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gain: Vec<T>,
    pub ln1_bias: Vec<T>,
    pub wq: Vec<T>,
    pub bq: Vec<T>,
    pub wk: Vec<T>,
    pub bk: Vec<T>,
    pub wv: Vec<T>,
    pub bv: Vec<T>,
    pub wo: Vec<T>,
    pub bo: Vec<T>,
    pub ln2_gain: Vec<T>,
    pub ln2_bias: Vec<T>,
    pub w_ff1: Vec<T>,
    pub b_ff1: Vec<T>,
    pub w_ff2: Vec<T>,
    pub b_ff2: Vec<T>,
}

/// All learnable tensors. Weight matrices are stored row-major as
/// `[in_dim][out_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub cfg: ModelConfig,
    pub tok_embed: Vec<T>,
    pub pos_embed: Vec<T>,
    pub layers: Vec<LayerParams<T>>,
    pub lnf_gain: Vec<T>,
    pub lnf_bias: Vec<T>,
    pub w_out: Vec<T>,
    pub b_out: Vec<T>,
    /// hidden_dim x embed_dim projection from the compression-slot hidden
    /// state to the note embedding. No bias.
    pub w_embed_proj: Vec<T>,
    /// Learnable contrastive temperature, stored as a 1-element tensor so it
    /// travels with the rest of the parameters.
    pub tau: Vec<T>,
}

const INIT_STD: f64 = 0.02;

impl<T: Real> ModelParams<T> {
    /// Scaled-normal init (std 0.02) for weights, zeros for biases, ones for
    /// norm gains. Deterministic per seed.
    pub fn init(cfg: ModelConfig, seed: u64, tau_init: f64) -> Self {
        cfg.validate().expect("valid model config");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f64, INIT_STD).unwrap();
        let mut randn = |len: usize| -> Vec<T> {
            (0..len)
                .map(|_| T::from_f64c(normal.sample(&mut rng)))
                .collect()
        };
        let h = cfg.hidden_dim;
        let f = cfg.ff_dim();
        let layers = (0..cfg.n_layers)
            .map(|_| LayerParams {
                ln1_gain: vec![T::one(); h],
                ln1_bias: vec![T::zero(); h],
                wq: randn(h * h),
                bq: vec![T::zero(); h],
                wk: randn(h * h),
                bk: vec![T::zero(); h],
                wv: randn(h * h),
                bv: vec![T::zero(); h],
                wo: randn(h * h),
                bo: vec![T::zero(); h],
                ln2_gain: vec![T::one(); h],
                ln2_bias: vec![T::zero(); h],
                w_ff1: randn(h * f),
                b_ff1: vec![T::zero(); f],
                w_ff2: randn(f * h),
                b_ff2: vec![T::zero(); h],
            })
            .collect();
        Self {
            tok_embed: randn(cfg.vocab_size * h),
            pos_embed: randn(cfg.max_seq_len * h),
            layers,
            lnf_gain: vec![T::one(); h],
            lnf_bias: vec![T::zero(); h],
            w_out: randn(h * cfg.vocab_size),
            b_out: vec![T::zero(); cfg.vocab_size],
            w_embed_proj: randn(h * cfg.embed_dim),
            tau: vec![T::from_f64c(tau_init)],
            cfg,
        }
    }

    /// Same shapes as `self`, all zeros. Used as a gradient accumulator and
    /// as optimizer state.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, t) in out.tensors_mut() {
            t.fill(T::zero());
        }
        out
    }

    pub fn tau_value(&self) -> T {
        self.tau[0]
    }

    /// Every tensor in the fixed checkpoint order.
    pub fn tensors(&self) -> Vec<(String, &Vec<T>)> {
        let mut out: Vec<(String, &Vec<T>)> = vec![
            ("tok_embed".into(), &self.tok_embed),
            ("pos_embed".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let named: [(&str, &Vec<T>); 16] = [
                ("ln1_gain", &l.ln1_gain),
                ("ln1_bias", &l.ln1_bias),
                ("wq", &l.wq),
                ("bq", &l.bq),
                ("wk", &l.wk),
                ("bk", &l.bk),
                ("wv", &l.wv),
                ("bv", &l.bv),
                ("wo", &l.wo),
                ("bo", &l.bo),
                ("ln2_gain", &l.ln2_gain),
                ("ln2_bias", &l.ln2_bias),
                ("w_ff1", &l.w_ff1),
                ("b_ff1", &l.b_ff1),
                ("w_ff2", &l.w_ff2),
                ("b_ff2", &l.b_ff2),
            ];
            for (n, t) in named {
                out.push((format!("layer{i}.{n}"), t));
            }
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        out.push(("w_out".into(), &self.w_out));
        out.push(("b_out".into(), &self.b_out));
        out.push(("w_embed_proj".into(), &self.w_embed_proj));
        out.push(("tau".into(), &self.tau));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut out: Vec<(String, &mut Vec<T>)> = vec![
            ("tok_embed".into(), &mut self.tok_embed),
            ("pos_embed".into(), &mut self.pos_embed),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let named: [(&str, &mut Vec<T>); 16] = [
                ("ln1_gain", &mut l.ln1_gain),
                ("ln1_bias", &mut l.ln1_bias),
                ("wq", &mut l.wq),
                ("bq", &mut l.bq),
                ("wk", &mut l.wk),
                ("bk", &mut l.bk),
                ("wv", &mut l.wv),
                ("bv", &mut l.bv),
                ("wo", &mut l.wo),
                ("bo", &mut l.bo),
                ("ln2_gain", &mut l.ln2_gain),
                ("ln2_bias", &mut l.ln2_bias),
                ("w_ff1", &mut l.w_ff1),
                ("b_ff1", &mut l.b_ff1),
                ("w_ff2", &mut l.w_ff2),
                ("b_ff2", &mut l.b_ff2),
            ];
            for (n, t) in named {
                out.push((format!("layer{i}.{n}"), t));
            }
        }
        out.push(("lnf_gain".into(), &mut self.lnf_gain));
        out.push(("lnf_bias".into(), &mut self.lnf_bias));
        out.push(("w_out".into(), &mut self.w_out));
        out.push(("b_out".into(), &mut self.b_out));
        out.push(("w_embed_proj".into(), &mut self.w_embed_proj));
        out.push(("tau".into(), &mut self.tau));
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.iter().all(|v| v.is_finite()))
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64c(x.to_f64c())).collect();
        ModelParams {
            cfg: self.cfg,
            tok_embed: conv(&self.tok_embed),
            pos_embed: conv(&self.pos_embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    ln1_gain: conv(&l.ln1_gain),
                    ln1_bias: conv(&l.ln1_bias),
                    wq: conv(&l.wq),
                    bq: conv(&l.bq),
                    wk: conv(&l.wk),
                    bk: conv(&l.bk),
                    wv: conv(&l.wv),
                    bv: conv(&l.bv),
                    wo: conv(&l.wo),
                    bo: conv(&l.bo),
                    ln2_gain: conv(&l.ln2_gain),
                    ln2_bias: conv(&l.ln2_bias),
                    w_ff1: conv(&l.w_ff1),
                    b_ff1: conv(&l.b_ff1),
                    w_ff2: conv(&l.w_ff2),
                    b_ff2: conv(&l.b_ff2),
                })
                .collect(),
            lnf_gain: conv(&self.lnf_gain),
            lnf_bias: conv(&self.lnf_bias),
            w_out: conv(&self.w_out),
            b_out: conv(&self.b_out),
            w_embed_proj: conv(&self.w_embed_proj),
            tau: conv(&self.tau),
        }
    }
}

#[derive(Debug, Clone)]
pub struct NormTrace<T> {
    pub xhat: Vec<T>,
    pub y: Vec<T>,
    pub inv_std: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace<T> {
    pub ln1: NormTrace<T>,
    /// Packed per head: `[n_heads][seq][head_dim]`.
    pub q: Vec<T>,
    pub k: Vec<T>,
    pub v: Vec<T>,
    /// Attention probabilities `[n_heads][seq][seq]`, zero above the diagonal.
    pub att: Vec<T>,
    /// Head outputs concatenated back to `[seq][hidden]`.
    pub ctx: Vec<T>,
    pub ln2: NormTrace<T>,
    pub ff_pre: Vec<T>,
    pub ff_act: Vec<T>,
}

/// Everything the backward pass needs, plus the outputs callers read.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    pub ids: Vec<u32>,
    pub layers: Vec<LayerTrace<T>>,
    pub lnf: NormTrace<T>,
    /// `[seq][vocab]` next-token logits.
    pub logits: Vec<T>,
}

impl<T: Real> ForwardTrace<T> {
    /// Final hidden states `[seq][hidden]` (after the final norm).
    pub fn hidden(&self) -> &[T] {
        &self.lnf.y
    }

    pub fn seq_len(&self) -> usize {
        self.ids.len()
    }
}

fn check_ids(cfg: &ModelConfig, ids: &[u32]) -> Result<(), ModelError> {
    if ids.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    if ids.len() > cfg.max_seq_len {
        return Err(ModelError::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    for &id in ids {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

/// Split `[seq][hidden]` into contiguous per-head blocks `[nh][seq][hd]`.
fn pack_heads<T: Real>(x: &[T], seq: usize, nh: usize, hd: usize) -> Vec<T> {
    let h = nh * hd;
    let mut out = vec![T::zero(); x.len()];
    for head in 0..nh {
        for s in 0..seq {
            let src = &x[s * h + head * hd..s * h + head * hd + hd];
            let dst = &mut out[head * seq * hd + s * hd..head * seq * hd + (s + 1) * hd];
            dst.copy_from_slice(src);
        }
    }
    out
}

fn unpack_heads<T: Real>(x: &[T], seq: usize, nh: usize, hd: usize) -> Vec<T> {
    let h = nh * hd;
    let mut out = vec![T::zero(); x.len()];
    for head in 0..nh {
        for s in 0..seq {
            let src = &x[head * seq * hd + s * hd..head * seq * hd + (s + 1) * hd];
            let dst = &mut out[s * h + head * hd..s * h + head * hd + hd];
            dst.copy_from_slice(src);
        }
    }
    out
}

fn layernorm_all<T: Real>(x: &[T], gain: &[T], bias: &[T], seq: usize, h: usize) -> NormTrace<T> {
    let mut y = vec![T::zero(); seq * h];
    let mut xhat = vec![T::zero(); seq * h];
    let mut inv_std = vec![T::zero(); seq];
    for s in 0..seq {
        inv_std[s] = math::layernorm_row(
            &x[s * h..(s + 1) * h],
            gain,
            bias,
            &mut y[s * h..(s + 1) * h],
            &mut xhat[s * h..(s + 1) * h],
        );
    }
    NormTrace { xhat, y, inv_std }
}

/// Full forward pass under strict causal masking.
pub fn forward<T: Real>(params: &ModelParams<T>, ids: &[u32]) -> Result<ForwardTrace<T>, ModelError> {
    let cfg = &params.cfg;
    check_ids(cfg, ids)?;
    let seq = ids.len();
    let h = cfg.hidden_dim;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let f = cfg.ff_dim();
    let scale = T::one() / T::from_f64c((hd as f64).sqrt());

    let mut x = vec![T::zero(); seq * h];
    for s in 0..seq {
        let tok = ids[s] as usize;
        for i in 0..h {
            x[s * h + i] = params.tok_embed[tok * h + i] + params.pos_embed[s * h + i];
        }
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let ln1 = layernorm_all(&x, &lp.ln1_gain, &lp.ln1_bias, seq, h);

        let mut q = vec![T::zero(); seq * h];
        let mut k = vec![T::zero(); seq * h];
        let mut v = vec![T::zero(); seq * h];
        math::gemm(&mut q, &ln1.y, &lp.wq, seq, h, h);
        math::add_bias(&mut q, &lp.bq, seq, h);
        math::gemm(&mut k, &ln1.y, &lp.wk, seq, h, h);
        math::add_bias(&mut k, &lp.bk, seq, h);
        math::gemm(&mut v, &ln1.y, &lp.wv, seq, h, h);
        math::add_bias(&mut v, &lp.bv, seq, h);

        let qp = pack_heads(&q, seq, nh, hd);
        let kp = pack_heads(&k, seq, nh, hd);
        let vp = pack_heads(&v, seq, nh, hd);

        let mut att = vec![T::zero(); nh * seq * seq];
        let mut ctxp = vec![T::zero(); seq * h];
        for head in 0..nh {
            let qh = &qp[head * seq * hd..(head + 1) * seq * hd];
            let kh = &kp[head * seq * hd..(head + 1) * seq * hd];
            let vh = &vp[head * seq * hd..(head + 1) * seq * hd];
            let ah = &mut att[head * seq * seq..(head + 1) * seq * seq];
            math::gemm_bt_acc(ah, qh, kh, seq, hd, seq);
            for i in 0..seq {
                let row = &mut ah[i * seq..(i + 1) * seq];
                for rv in row.iter_mut().take(i + 1) {
                    *rv = *rv * scale;
                }
                math::softmax_in_place(&mut row[..=i]);
                // causal mask: positions after i carry no probability
                for rv in row.iter_mut().skip(i + 1) {
                    *rv = T::zero();
                }
            }
            let ch = &mut ctxp[head * seq * hd..(head + 1) * seq * hd];
            math::gemm_acc(ch, ah, vh, seq, seq, hd);
        }
        let ctx = unpack_heads(&ctxp, seq, nh, hd);

        let mut attn_out = vec![T::zero(); seq * h];
        math::gemm(&mut attn_out, &ctx, &lp.wo, seq, h, h);
        math::add_bias(&mut attn_out, &lp.bo, seq, h);
        for i in 0..seq * h {
            x[i] = x[i] + attn_out[i];
        }

        let ln2 = layernorm_all(&x, &lp.ln2_gain, &lp.ln2_bias, seq, h);
        let mut ff_pre = vec![T::zero(); seq * f];
        math::gemm(&mut ff_pre, &ln2.y, &lp.w_ff1, seq, h, f);
        math::add_bias(&mut ff_pre, &lp.b_ff1, seq, f);
        let ff_act: Vec<T> = ff_pre.iter().map(|&u| math::gelu(u)).collect();
        let mut ff_out = vec![T::zero(); seq * h];
        math::gemm(&mut ff_out, &ff_act, &lp.w_ff2, seq, f, h);
        math::add_bias(&mut ff_out, &lp.b_ff2, seq, h);
        for i in 0..seq * h {
            x[i] = x[i] + ff_out[i];
        }

        layers.push(LayerTrace {
            ln1,
            q: qp,
            k: kp,
            v: vp,
            att,
            ctx,
            ln2,
            ff_pre,
            ff_act,
        });
    }

    let lnf = layernorm_all(&x, &params.lnf_gain, &params.lnf_bias, seq, h);
    let mut logits = vec![T::zero(); seq * cfg.vocab_size];
    math::gemm(&mut logits, &lnf.y, &params.w_out, seq, h, cfg.vocab_size);
    math::add_bias(&mut logits, &params.b_out, seq, cfg.vocab_size);

    Ok(ForwardTrace {
        ids: ids.to_vec(),
        layers,
        lnf,
        logits,
    })
}

/// Project the hidden state at `pos` into the note-embedding space.
/// The result is NOT normalized; cosine similarity normalizes later.
pub fn project_embedding<T: Real>(params: &ModelParams<T>, trace: &ForwardTrace<T>, pos: usize) -> Vec<T> {
    let h = params.cfg.hidden_dim;
    let d = params.cfg.embed_dim;
    let hid = &trace.hidden()[pos * h..(pos + 1) * h];
    let mut out = vec![T::zero(); d];
    for (i, &hv) in hid.iter().enumerate() {
        math::axpy(&mut out, hv, &params.w_embed_proj[i * d..(i + 1) * d]);
    }
    out
}

/// Embedding of a full prompt sample (forward + projection at the
/// compression slot).
pub fn note_embedding<T: Real>(
    params: &ModelParams<T>,
    sample: &PromptSample,
) -> Result<Vec<T>, ModelError> {
    let trace = forward(params, &sample.token_ids)?;
    Ok(project_embedding(params, &trace, sample.compression_pos))
}

/// Embedding from raw token ids and a compression position (used by the
/// eval-time prompts that stop at the compression slot).
pub fn embed_tokens<T: Real>(
    params: &ModelParams<T>,
    ids: &[u32],
    compression_pos: usize,
) -> Result<Vec<T>, ModelError> {
    let trace = forward(params, ids)?;
    Ok(project_embedding(params, &trace, compression_pos))
}

/// Incremental decoding state with per-layer K/V caches. Produces hidden
/// states bit-identical to the batch forward.
pub struct DecodeState<'a, T> {
    params: &'a ModelParams<T>,
    pos: usize,
    /// Per layer, unpacked `[pos][hidden]` rows appended as decoding advances.
    kcache: Vec<Vec<T>>,
    vcache: Vec<Vec<T>>,
}

impl<'a, T: Real> DecodeState<'a, T> {
    pub fn new(params: &'a ModelParams<T>) -> Self {
        Self {
            params,
            pos: 0,
            kcache: vec![Vec::new(); params.cfg.n_layers],
            vcache: vec![Vec::new(); params.cfg.n_layers],
        }
    }

    fn matvec(w: &[T], b: &[T], x: &[T], n_in: usize, n_out: usize) -> Vec<T> {
        let mut y = b.to_vec();
        for kk in 0..n_in {
            math::axpy(&mut y, x[kk], &w[kk * n_out..(kk + 1) * n_out]);
        }
        y
    }

    /// Feed one token; returns the logits row for the next-token distribution.
    pub fn step(&mut self, token: u32) -> Result<Vec<T>, ModelError> {
        let cfg = &self.params.cfg;
        check_ids(cfg, &[token])?;
        if self.pos >= cfg.max_seq_len {
            return Err(ModelError::SequenceTooLong {
                len: self.pos + 1,
                max: cfg.max_seq_len,
            });
        }
        let h = cfg.hidden_dim;
        let nh = cfg.n_heads;
        let hd = cfg.head_dim();
        let scale = T::one() / T::from_f64c((hd as f64).sqrt());
        let tok = token as usize;

        let mut x: Vec<T> = (0..h)
            .map(|i| self.params.tok_embed[tok * h + i] + self.params.pos_embed[self.pos * h + i])
            .collect();

        for (l, lp) in self.params.layers.iter().enumerate() {
            let mut n1 = vec![T::zero(); h];
            let mut xhat = vec![T::zero(); h];
            math::layernorm_row(&x, &lp.ln1_gain, &lp.ln1_bias, &mut n1, &mut xhat);
            let q = Self::matvec(&lp.wq, &lp.bq, &n1, h, h);
            let k = Self::matvec(&lp.wk, &lp.bk, &n1, h, h);
            let v = Self::matvec(&lp.wv, &lp.bv, &n1, h, h);
            self.kcache[l].extend_from_slice(&k);
            self.vcache[l].extend_from_slice(&v);
            let t_len = self.pos + 1;

            let mut ctx = vec![T::zero(); h];
            for head in 0..nh {
                let qh = &q[head * hd..(head + 1) * hd];
                let mut scores: Vec<T> = (0..t_len)
                    .map(|j| {
                        let kh = &self.kcache[l][j * h + head * hd..j * h + head * hd + hd];
                        math::dot(qh, kh) * scale
                    })
                    .collect();
                math::softmax_in_place(&mut scores);
                for (j, &a) in scores.iter().enumerate() {
                    let vh = &self.vcache[l][j * h + head * hd..j * h + head * hd + hd];
                    math::axpy(&mut ctx[head * hd..(head + 1) * hd], a, vh);
                }
            }
            let attn_out = Self::matvec(&lp.wo, &lp.bo, &ctx, h, h);
            for i in 0..h {
                x[i] = x[i] + attn_out[i];
            }

            let mut n2 = vec![T::zero(); h];
            let mut xhat2 = vec![T::zero(); h];
            math::layernorm_row(&x, &lp.ln2_gain, &lp.ln2_bias, &mut n2, &mut xhat2);
            let ff_pre = Self::matvec(&lp.w_ff1, &lp.b_ff1, &n2, h, cfg.ff_dim());
            let ff_act: Vec<T> = ff_pre.iter().map(|&u| math::gelu(u)).collect();
            let ff_out = Self::matvec(&lp.w_ff2, &lp.b_ff2, &ff_act, cfg.ff_dim(), h);
            for i in 0..h {
                x[i] = x[i] + ff_out[i];
            }
        }

        let mut hidden = vec![T::zero(); h];
        let mut xhatf = vec![T::zero(); h];
        math::layernorm_row(&x, &self.params.lnf_gain, &self.params.lnf_bias, &mut hidden, &mut xhatf);
        let logits = Self::matvec(&self.params.w_out, &self.params.b_out, &hidden, h, cfg.vocab_size);
        self.pos += 1;
        Ok(logits)
    }
}

/// Argmax with ties broken by the lowest token id.
pub(crate) fn argmax_lowest<T: Real>(row: &[T]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy continuation loop over a scripted logits source. Factored out so
/// the argmax/stop contract can be tested without a model.
pub(crate) fn greedy_loop<T: Real>(
    mut first: Vec<T>,
    mut next: impl FnMut(u32) -> Result<Vec<T>, ModelError>,
    max_new: usize,
    eos_id: u32,
) -> Result<Vec<u32>, ModelError> {
    let mut out = Vec::new();
    for _ in 0..max_new {
        let tok = argmax_lowest(&first);
        if tok == eos_id {
            break;
        }
        out.push(tok);
        first = next(tok)?;
    }
    Ok(out)
}

/// Greedy decoding: repeatedly append the argmax token until `eos_id` or
/// `max_new` tokens. Returns the generated tokens (without `eos_id`).
pub fn greedy_decode<T: Real>(
    params: &ModelParams<T>,
    prefix: &[u32],
    max_new: usize,
    eos_id: u32,
) -> Result<Vec<u32>, ModelError> {
    if prefix.is_empty() {
        return Err(ModelError::EmptySequence);
    }
    let mut state = DecodeState::new(params);
    let mut logits = Vec::new();
    for &t in prefix {
        logits = state.step(t)?;
    }
    greedy_loop(logits, |tok| state.step(tok), max_new, eos_id)
}
