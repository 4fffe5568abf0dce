//! Forward and backward passes through the bridged network.
//!
//! Per block the sublayer order is `SA → Tx-CA → Vid-CA → FFN`. The Vid-CA
//! sublayer runs only when a bridge is supplied and the video condition is
//! present. Backward propagates through frozen backbone sublayers to reach
//! earlier bridge parameters; backbone parameter gradients are materialized
//! only when an accumulator is passed in.

use crate::attention::{AttentionCache, Rope};
use crate::backbone::{preconditioning, timestep_embed, BackboneParams, LatentSequence, TextTokens};
use crate::bridge::{BridgeParams, VideoTokens};
use crate::error::{shape_err, Error, Result};
use crate::nn::{LayerNormCache, MlpCache};
use crate::tensor::{Matrix, Real};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sublayer {
    SelfAttn,
    TextCrossAttn,
    VideoCrossAttn,
    FeedForward,
}

#[derive(Debug, Clone)]
struct VideoCache<T> {
    video_in: Matrix<T>,
    adapter: MlpCache<T>,
    ln: LayerNormCache<T>,
    attn: AttentionCache<T>,
}

#[derive(Debug, Clone)]
struct BlockCache<T> {
    ln_sa: LayerNormCache<T>,
    sa: AttentionCache<T>,
    ln_tx: LayerNormCache<T>,
    tx: AttentionCache<T>,
    video: Option<VideoCache<T>>,
    ln_ffn: LayerNormCache<T>,
    ffn_in: Matrix<T>,
    ffn: MlpCache<T>,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T> {
    /// Preconditioned network input.
    a_t: Matrix<T>,
    k_out: T,
    t_emb: Matrix<T>,
    blocks: Vec<BlockCache<T>>,
    out_ln: LayerNormCache<T>,
    out_ln_y: Matrix<T>,
    text_present: bool,
    sublayers: Vec<(usize, Sublayer)>,
}

impl<T: Real> Trace<T> {
    /// `(block, sublayer)` in invocation order.
    pub fn sublayers(&self) -> &[(usize, Sublayer)] {
        &self.sublayers
    }

    /// Per-head attention probabilities of the video cross-attention in `block`.
    pub fn video_attention(&self, block: usize) -> Option<&[Matrix<T>]> {
        self.blocks
            .get(block)?
            .video
            .as_ref()
            .map(|v| v.attn.core().probs())
    }
}

fn add_row_broadcast<T: Real>(x: &mut Matrix<T>, row: &[T]) {
    for r in 0..x.rows() {
        for (v, &b) in x.row_mut(r).iter_mut().zip(row) {
            *v = *v + b;
        }
    }
}

fn active_video<'a, T: Real>(
    bridge: Option<&'a BridgeParams<T>>,
    video: Option<&'a VideoTokens<T>>,
) -> Option<(&'a BridgeParams<T>, &'a VideoTokens<T>)> {
    match (bridge, video) {
        (Some(b), Some(v)) if v.present => Some((b, v)),
        _ => None,
    }
}

#[allow(clippy::too_many_arguments)]
fn block_forward_cached<T: Real>(
    backbone: &BackboneParams<T>,
    video: Option<(&BridgeParams<T>, &VideoTokens<T>)>,
    idx: usize,
    x: &Matrix<T>,
    positions: &[i64],
    text: &TextTokens<T>,
    t_emb: &[T],
    trace: &mut Vec<(usize, Sublayer)>,
) -> Result<(Matrix<T>, BlockCache<T>)> {
    let blk = backbone
        .blocks
        .get(idx)
        .ok_or_else(|| shape_err!("no backbone block {idx}"))?;
    let rope_base = backbone.config.rope_base;
    if x.cols() != backbone.config.d_model {
        return Err(shape_err!(
            "latent width {} vs d_model {}",
            x.cols(),
            backbone.config.d_model
        ));
    }

    let t_row = blk.time.forward(&Matrix::from_vec(1, t_emb.len(), t_emb.to_vec())?)?;
    let mut h = x.clone();
    add_row_broadcast(&mut h, t_row.row(0));

    trace.push((idx, Sublayer::SelfAttn));
    let (n, ln_sa) = blk.norm_sa.forward(&h)?;
    let rope = Rope {
        q_positions: positions,
        k_positions: positions,
        base: rope_base,
    };
    let (y, sa) = blk.self_attn.forward(&n, &n, Some(rope))?;
    h.add_assign(&y)?;

    trace.push((idx, Sublayer::TextCrossAttn));
    let (n, ln_tx) = blk.norm_tx.forward(&h)?;
    let (y, tx) = blk.text_attn.forward(&n, backbone.text_kv(text)?, None)?;
    h.add_assign(&y)?;

    let video_cache = match video {
        Some((bridge, v)) => {
            trace.push((idx, Sublayer::VideoCrossAttn));
            let bb = bridge
                .blocks
                .get(idx)
                .ok_or_else(|| shape_err!("no bridge block {idx}"))?;
            let (delta, adapter) = bb.adapter.forward(&v.tokens)?;
            let adapted = v.tokens.add(&delta)?;
            let (n, ln) = bb.norm.forward(&h)?;
            let rope = Rope {
                q_positions: positions,
                k_positions: &v.positions,
                base: rope_base,
            };
            let (y, attn) = bb.attn.forward(&n, &adapted, Some(rope))?;
            h.add_assign(&y)?;
            Some(VideoCache {
                video_in: v.tokens.clone(),
                adapter,
                ln,
                attn,
            })
        }
        None => None,
    };

    trace.push((idx, Sublayer::FeedForward));
    let (ffn_in, ln_ffn) = blk.norm_ffn.forward(&h)?;
    let (y, ffn) = blk.ffn.forward(&ffn_in)?;
    h.add_assign(&y)?;

    Ok((
        h,
        BlockCache {
            ln_sa,
            sa,
            ln_tx,
            tx,
            video: video_cache,
            ln_ffn,
            ffn_in,
            ffn,
        },
    ))
}

/// One block forward, recording sublayer invocations into `trace`.
#[allow(clippy::too_many_arguments)]
pub fn block_forward<T: Real>(
    backbone: &BackboneParams<T>,
    bridge: Option<&BridgeParams<T>>,
    idx: usize,
    x: &Matrix<T>,
    positions: &[i64],
    text: &TextTokens<T>,
    video: Option<&VideoTokens<T>>,
    t_emb: &[T],
    trace: &mut Vec<(usize, Sublayer)>,
) -> Result<Matrix<T>> {
    let active = active_video(bridge, video);
    Ok(block_forward_cached(backbone, active, idx, x, positions, text, t_emb, trace)?.0)
}

/// Velocity prediction for `a_t` at time `t`, keeping the backward trace.
pub fn forward<T: Real>(
    backbone: &BackboneParams<T>,
    bridge: Option<&BridgeParams<T>>,
    a_t: &LatentSequence<T>,
    t: f64,
    text: &TextTokens<T>,
    video: Option<&VideoTokens<T>>,
) -> Result<(Matrix<T>, Trace<T>)> {
    let cfg = &backbone.config;
    if a_t.len() > cfg.s_a_max {
        return Err(shape_err!(
            "latent length {} exceeds s_a_max {}",
            a_t.len(),
            cfg.s_a_max
        ));
    }
    if let Some(b) = bridge {
        if b.blocks.len() != backbone.blocks.len() {
            return Err(shape_err!(
                "bridge has {} blocks, backbone {}",
                b.blocks.len(),
                backbone.blocks.len()
            ));
        }
    }
    let active = active_video(bridge, video);
    let t_emb: Vec<T> = timestep_embed(t, cfg.d_model)?;
    let (k_in, k_skip, k_out) = preconditioning(t, cfg.sigma_data)?;
    let x_in = a_t.tokens.scale(T::c(k_in));
    let mut h = backbone.in_proj.forward(&x_in)?;
    let mut blocks = Vec::with_capacity(backbone.blocks.len());
    let mut sublayers = Vec::with_capacity(4 * backbone.blocks.len());
    for idx in 0..backbone.blocks.len() {
        let (next, cache) = block_forward_cached(
            backbone,
            active,
            idx,
            &h,
            &a_t.positions,
            text,
            &t_emb,
            &mut sublayers,
        )?;
        h = next;
        blocks.push(cache);
    }
    let (out_ln_y, out_ln) = backbone.out_norm.forward(&h)?;
    let out = backbone
        .out_proj
        .forward(&out_ln_y)?
        .scale(T::c(k_out))
        .add(&a_t.tokens.scale(T::c(k_skip)))?;
    if !out.is_finite() {
        return Err(Error::Numeric("forward pass produced non-finite values".into()));
    }
    let trace = Trace {
        a_t: x_in,
        k_out: T::c(k_out),
        t_emb: Matrix::from_vec(1, t_emb.len(), t_emb)?,
        blocks,
        out_ln,
        out_ln_y,
        text_present: text.present,
        sublayers,
    };
    Ok((out, trace))
}

/// Accumulate `dL/dθ` for the bridge (and optionally the backbone) given
/// `dL/d(output)`. The video input is a constant: nothing flows into it.
pub fn backward<T: Real>(
    backbone: &BackboneParams<T>,
    bridge: Option<&BridgeParams<T>>,
    trace: &Trace<T>,
    d_out: &Matrix<T>,
    mut bridge_grad: Option<&mut BridgeParams<T>>,
    mut backbone_grad: Option<&mut BackboneParams<T>>,
) -> Result<()> {
    let dy = backbone.out_proj.backward(
        &trace.out_ln_y,
        &d_out.scale(trace.k_out),
        backbone_grad.as_deref_mut().map(|g| &mut g.out_proj),
    )?;
    let mut dh = backbone.out_norm.backward(
        &trace.out_ln,
        &dy,
        backbone_grad.as_deref_mut().map(|g| &mut g.out_norm),
    );

    for (idx, cache) in trace.blocks.iter().enumerate().rev() {
        let blk = &backbone.blocks[idx];
        let mut gblk = backbone_grad.as_deref_mut().map(|g| &mut g.blocks[idx]);

        // FFN
        let dn = blk
            .ffn
            .backward(
                &cache.ffn_in,
                &cache.ffn,
                &dh,
                gblk.as_deref_mut().map(|g| &mut g.ffn),
                true,
            )?
            .expect("dx requested");
        dh.add_assign(&blk.norm_ffn.backward(
            &cache.ln_ffn,
            &dn,
            gblk.as_deref_mut().map(|g| &mut g.norm_ffn),
        ))?;

        // Vid-CA
        if let Some(vc) = &cache.video {
            let bridge = bridge.ok_or_else(|| shape_err!("trace has video but no bridge given"))?;
            let bb = &bridge.blocks[idx];
            let mut gb = bridge_grad.as_deref_mut().map(|g| &mut g.blocks[idx]);
            let want = gb.is_some();
            let (dq_in, dkv_in) =
                bb.attn
                    .backward(&vc.attn, &dh, gb.as_deref_mut().map(|g| &mut g.attn), want)?;
            if let (Some(dadapted), Some(g)) = (dkv_in, gb.as_deref_mut()) {
                // Adapter input is detached video: only its parameters get gradients.
                bb.adapter.backward(
                    &vc.video_in,
                    &vc.adapter,
                    &dadapted,
                    Some(&mut g.adapter),
                    false,
                )?;
            }
            dh.add_assign(&bb.norm.backward(
                &vc.ln,
                &dq_in,
                gb.map(|g| &mut g.norm),
            ))?;
        }

        // Tx-CA
        let need_text = gblk.is_some() && !trace.text_present;
        let (dq_in, dkv) = blk.text_attn.backward(
            &cache.tx,
            &dh,
            gblk.as_deref_mut().map(|g| &mut g.text_attn),
            need_text,
        )?;
        dh.add_assign(&blk.norm_tx.backward(
            &cache.ln_tx,
            &dq_in,
            gblk.as_deref_mut().map(|g| &mut g.norm_tx),
        ))?;

        // SA
        let (dq_in, dkv_in) = blk.self_attn.backward(
            &cache.sa,
            &dh,
            gblk.as_deref_mut().map(|g| &mut g.self_attn),
            true,
        )?;
        let dn = dq_in.add(&dkv_in.expect("dkv requested"))?;
        dh.add_assign(&blk.norm_sa.backward(
            &cache.ln_sa,
            &dn,
            gblk.as_deref_mut().map(|g| &mut g.norm_sa),
        ))?;

        // time conditioning
        if let Some(g) = gblk {
            let dt = Matrix::from_vec(1, dh.cols(), dh.col_sums())?;
            blk.time.accumulate(&trace.t_emb, &dt, &mut g.time)?;
        }
        if let (Some(dnull), Some(g)) = (dkv, backbone_grad.as_deref_mut()) {
            g.null_text.add_assign(&dnull)?;
        }
    }

    if let Some(g) = backbone_grad {
        backbone.in_proj.accumulate(&trace.a_t, &dh, &mut g.in_proj)?;
    }
    Ok(())
}
