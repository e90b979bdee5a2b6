//! Manual backward pass through the decoder stack.
//!
//! Gradients accumulate into a `ModelParams`-shaped container in a fixed
//! order, so batch reductions are bit-reproducible.

use super::math::{self, Real};
use super::{ForwardTrace, ModelParams};

/// Adjoints of the scalar loss with respect to the trace outputs.
pub struct LossAdjoints<T> {
    /// `[seq][vocab]`; rows that received no loss stay zero.
    pub d_logits: Vec<T>,
    /// Adjoint of the note embedding, applied at the compression position.
    pub d_embedding: Option<(usize, Vec<T>)>,
}

impl<T: Real> LossAdjoints<T> {
    pub fn zeros(seq: usize, vocab: usize) -> Self {
        Self {
            d_logits: vec![T::zero(); seq * vocab],
            d_embedding: None,
        }
    }
}

fn layernorm_backward_all<T: Real>(
    dy: &[T],
    trace: &super::NormTrace<T>,
    gain: &[T],
    dgain: &mut [T],
    dbias: &mut [T],
    seq: usize,
    h: usize,
) -> Vec<T> {
    let mut dx = vec![T::zero(); seq * h];
    for s in 0..seq {
        math::layernorm_row_backward(
            &dy[s * h..(s + 1) * h],
            &trace.xhat[s * h..(s + 1) * h],
            trace.inv_std[s],
            gain,
            &mut dx[s * h..(s + 1) * h],
            dgain,
            dbias,
        );
    }
    dx
}

/// Backpropagate `adjoints` through `trace`, accumulating into `grads`.
/// `grads` must have the same shapes as `params` (see `zeros_like`).
pub fn backward_into<T: Real>(
    params: &ModelParams<T>,
    trace: &ForwardTrace<T>,
    adjoints: &LossAdjoints<T>,
    grads: &mut ModelParams<T>,
) {
    let cfg = &params.cfg;
    let seq = trace.seq_len();
    let h = cfg.hidden_dim;
    let v = cfg.vocab_size;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let f = cfg.ff_dim();
    let scale = T::one() / T::from_f64c((hd as f64).sqrt());
    debug_assert_eq!(adjoints.d_logits.len(), seq * v);

    // Output head. Most rows of d_logits are zero (only output-span positions
    // carry loss), so walk the nonzero rows explicitly.
    let hidden = trace.hidden();
    let mut d_hidden = vec![T::zero(); seq * h];
    let w_out_t = math::transpose(&params.w_out, h, v);
    for s in 0..seq {
        let dl = &adjoints.d_logits[s * v..(s + 1) * v];
        if dl.iter().all(|&x| x == T::zero()) {
            continue;
        }
        let hid = &hidden[s * h..(s + 1) * h];
        for (kk, &hv) in hid.iter().enumerate() {
            math::axpy(&mut grads.w_out[kk * v..(kk + 1) * v], hv, dl);
        }
        for (j, &dv) in dl.iter().enumerate() {
            grads.b_out[j] = grads.b_out[j] + dv;
        }
        let dh = &mut d_hidden[s * h..(s + 1) * h];
        for (j, &dv) in dl.iter().enumerate() {
            if dv != T::zero() {
                math::axpy(dh, dv, &w_out_t[j * h..(j + 1) * h]);
            }
        }
    }

    // Note-embedding projection path.
    if let Some((pos, d_emb)) = &adjoints.d_embedding {
        let d = cfg.embed_dim;
        debug_assert_eq!(d_emb.len(), d);
        let hid = &hidden[pos * h..(pos + 1) * h];
        let dh = &mut d_hidden[pos * h..(pos + 1) * h];
        for kk in 0..h {
            math::axpy(&mut grads.w_embed_proj[kk * d..(kk + 1) * d], hid[kk], d_emb);
            dh[kk] = dh[kk] + math::dot(&params.w_embed_proj[kk * d..(kk + 1) * d], d_emb);
        }
    }

    // Final norm.
    let mut dx = layernorm_backward_all(
        &d_hidden,
        &trace.lnf,
        &params.lnf_gain,
        &mut grads.lnf_gain,
        &mut grads.lnf_bias,
        seq,
        h,
    );

    for (l, lp) in params.layers.iter().enumerate().rev() {
        let lt = &trace.layers[l];
        let gl = &mut grads.layers[l];

        // Feed-forward block: x_out = x_mid + ff(ln2(x_mid))
        let dff_out = &dx;
        math::gemm_at_acc(&mut gl.w_ff2, &lt.ff_act, dff_out, seq, f, h);
        math::bias_grad_acc(&mut gl.b_ff2, dff_out, seq, h);
        let mut dff_act = vec![T::zero(); seq * f];
        math::gemm_bt_acc(&mut dff_act, dff_out, &lp.w_ff2, seq, h, f);
        let mut dff_pre = dff_act;
        for (i, g) in dff_pre.iter_mut().enumerate() {
            *g = *g * math::gelu_deriv(lt.ff_pre[i]);
        }
        math::gemm_at_acc(&mut gl.w_ff1, &lt.ln2.y, &dff_pre, seq, h, f);
        math::bias_grad_acc(&mut gl.b_ff1, &dff_pre, seq, f);
        let mut dn2 = vec![T::zero(); seq * h];
        math::gemm_bt_acc(&mut dn2, &dff_pre, &lp.w_ff1, seq, f, h);
        let dln2 = layernorm_backward_all(
            &dn2,
            &lt.ln2,
            &lp.ln2_gain,
            &mut gl.ln2_gain,
            &mut gl.ln2_bias,
            seq,
            h,
        );
        let mut dx_mid = dx;
        for i in 0..seq * h {
            dx_mid[i] = dx_mid[i] + dln2[i];
        }

        // Attention block: x_mid = x_in + wo(ctx)
        let dattn_out = &dx_mid;
        math::gemm_at_acc(&mut gl.wo, &lt.ctx, dattn_out, seq, h, h);
        math::bias_grad_acc(&mut gl.bo, dattn_out, seq, h);
        let mut dctx = vec![T::zero(); seq * h];
        math::gemm_bt_acc(&mut dctx, dattn_out, &lp.wo, seq, h, h);
        let dctxp = super::pack_heads(&dctx, seq, nh, hd);

        let mut dqp = vec![T::zero(); seq * h];
        let mut dkp = vec![T::zero(); seq * h];
        let mut dvp = vec![T::zero(); seq * h];
        for head in 0..nh {
            let span = head * seq * hd..(head + 1) * seq * hd;
            let att = &lt.att[head * seq * seq..(head + 1) * seq * seq];
            let dch = &dctxp[span.clone()];
            let qh = &lt.q[span.clone()];
            let kh = &lt.k[span.clone()];
            let vh = &lt.v[span.clone()];

            // ctx = att @ v
            let mut datt = vec![T::zero(); seq * seq];
            math::gemm_bt_acc(&mut datt, dch, vh, seq, hd, seq);
            math::gemm_at_acc(&mut dvp[span.clone()], att, dch, seq, seq, hd);

            // softmax rows (entries past the diagonal are exactly zero and
            // contribute nothing), then undo the 1/sqrt(hd) scaling
            let mut dscores = vec![T::zero(); seq * seq];
            for i in 0..seq {
                let a = &att[i * seq..(i + 1) * seq];
                let da = &datt[i * seq..(i + 1) * seq];
                let inner = math::dot(a, da);
                let ds = &mut dscores[i * seq..(i + 1) * seq];
                for j in 0..seq {
                    ds[j] = a[j] * (da[j] - inner) * scale;
                }
            }

            // scores = q @ k^T
            math::gemm_acc(&mut dqp[span.clone()], &dscores, kh, seq, seq, hd);
            math::gemm_at_acc(&mut dkp[span.clone()], &dscores, qh, seq, seq, hd);
        }
        let dq = super::unpack_heads(&dqp, seq, nh, hd);
        let dk = super::unpack_heads(&dkp, seq, nh, hd);
        let dv = super::unpack_heads(&dvp, seq, nh, hd);

        math::gemm_at_acc(&mut gl.wq, &lt.ln1.y, &dq, seq, h, h);
        math::bias_grad_acc(&mut gl.bq, &dq, seq, h);
        math::gemm_at_acc(&mut gl.wk, &lt.ln1.y, &dk, seq, h, h);
        math::bias_grad_acc(&mut gl.bk, &dk, seq, h);
        math::gemm_at_acc(&mut gl.wv, &lt.ln1.y, &dv, seq, h, h);
        math::bias_grad_acc(&mut gl.bv, &dv, seq, h);

        let mut dn1 = vec![T::zero(); seq * h];
        math::gemm_bt_acc(&mut dn1, &dq, &lp.wq, seq, h, h);
        math::gemm_bt_acc(&mut dn1, &dk, &lp.wk, seq, h, h);
        math::gemm_bt_acc(&mut dn1, &dv, &lp.wv, seq, h, h);
        let dln1 = layernorm_backward_all(
            &dn1,
            &lt.ln1,
            &lp.ln1_gain,
            &mut gl.ln1_gain,
            &mut gl.ln1_bias,
            seq,
            h,
        );
        for i in 0..seq * h {
            dx_mid[i] = dx_mid[i] + dln1[i];
        }
        dx = dx_mid;
    }

    // Token and position embeddings.
    for s in 0..seq {
        let tok = trace.ids[s] as usize;
        let dr = &dx[s * h..(s + 1) * h];
        math::axpy(&mut grads.tok_embed[tok * h..(tok + 1) * h], T::one(), dr);
        math::axpy(&mut grads.pos_embed[s * h..(s + 1) * h], T::one(), dr);
    }
}
