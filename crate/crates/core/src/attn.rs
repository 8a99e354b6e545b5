//! Decomposed temporal and spatial cross-modal attention blocks that update
//! the audio and visual streams bidirectionally.
//!
//! Shapes follow the stream contract throughout: visual `[T, HW, C]`, audio
//! `[T, C]`. Temporal attention treats time as the sequence axis with the
//! spatial position as batch (per-pixel score maps `[HW, T, T]`); spatial
//! attention treats the HW grid as the sequence axis per time step (score
//! maps `[T, HW, 1]`). Shape matching across the streams uses spatial mean
//! pooling (visual -> audio) and repetition via broadcast (audio -> visual).
//!
//! Every score map is produced by a multi-head projection; recorded maps are
//! head-averaged, which preserves their normalization.

use crate::config::{AttnOrder, StBavaConfig};
use crate::error::{Error, Result};
use crate::params::{LayerNormParams, Linear, ParamStore};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Element, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Query/key/value/output projections of one multi-head cross-attention.
#[derive(Clone, Debug)]
pub struct MhCrossAttnWeights {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MhCrossAttnWeights {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut SplitMix64,
        name: &str,
        channels: usize,
        heads: usize,
        trainable: bool,
    ) -> Self {
        MhCrossAttnWeights {
            q: Linear::init(store, rng, &format!("{name}.q"), channels, channels, trainable),
            k: Linear::init(store, rng, &format!("{name}.k"), channels, channels, trainable),
            v: Linear::init(store, rng, &format!("{name}.v"), channels, channels, trainable),
            o: Linear::init(store, rng, &format!("{name}.o"), channels, channels, trainable),
            heads,
        }
    }
}

pub fn linear_apply<E: Element>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    lin: Linear,
    x: NodeId,
) -> Result<NodeId> {
    let w = tape.param(store, lin.w)?;
    let b = tape.param(store, lin.b)?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

pub fn layer_norm_apply<E: Element>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    ln: LayerNormParams,
    x: NodeId,
) -> Result<NodeId> {
    let gamma = tape.param(store, ln.gamma)?;
    let beta = tape.param(store, ln.beta)?;
    tape.layer_norm(x, gamma, beta, E::from_f64(LN_EPS))
}

/// Standard batched attention: queries `[B, Lq, C]` against keys/values
/// `[B, Lk, C]`, softmax over the key axis. Returns the output `[B, Lq, C]`
/// and the per-head score map `[B, h, Lq, Lk]`.
pub fn batched_attention<E: Element>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    w: &MhCrossAttnWeights,
    q_in: NodeId,
    kv_in: NodeId,
    scale: E,
) -> Result<(NodeId, NodeId)> {
    let qd = tape.dims(q_in).to_vec();
    let kd = tape.dims(kv_in).to_vec();
    if qd.len() != 3 || kd.len() != 3 || qd[0] != kd[0] || qd[2] != kd[2] {
        return Err(Error::Shape {
            op: "batched_attention",
            lhs: qd,
            rhs: kd,
            detail: "expected [B, Lq, C] and [B, Lk, C]".into(),
        });
    }
    let (b, lq, c) = (qd[0], qd[1], qd[2]);
    let lk = kd[1];
    let h = w.heads;
    let d = c / h;

    let split = |tape: &mut Tape<E>, x: NodeId, l: usize| -> Result<NodeId> {
        let r = tape.reshape(x, &[b, l, h, d])?;
        tape.permute(r, &[0, 2, 1, 3]) // [B, h, L, d]
    };

    let q = linear_apply(tape, store, w.q, q_in)?;
    let q = split(tape, q, lq)?;
    let k = linear_apply(tape, store, w.k, kv_in)?;
    let k = split(tape, k, lk)?;
    let v = linear_apply(tape, store, w.v, kv_in)?;
    let v = split(tape, v, lk)?;

    let kt = tape.permute(k, &[0, 1, 3, 2])?; // [B, h, d, Lk]
    let scores = tape.matmul(q, kt)?; // [B, h, Lq, Lk]
    let alpha = tape.softmax_axis(scores, 3, scale)?;
    let ctx = tape.matmul(alpha, v)?; // [B, h, Lq, d]
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?; // [B, Lq, h, d]
    let ctx = tape.reshape(ctx, &[b, lq, c])?;
    let out = linear_apply(tape, store, w.o, ctx)?;
    Ok((out, alpha))
}

/// Temporal attention with the visual stream as query: per-pixel attention
/// over time against the (repeated) audio keys. Scores are `[h, HW, T, T]`;
/// the audio keys broadcast across the HW batch axis.
fn visual_temporal_attention<E: Element>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    w: &MhCrossAttnWeights,
    v_src: NodeId,
    a_kv: NodeId,
    scale: E,
) -> Result<(NodeId, NodeId)> {
    let vd = tape.dims(v_src).to_vec();
    let (t, hw, c) = (vd[0], vd[1], vd[2]);
    let h = w.heads;
    let d = c / h;

    let q = linear_apply(tape, store, w.q, v_src)?; // [T, HW, C]
    let q = tape.reshape(q, &[t, hw, h, d])?;
    let q = tape.permute(q, &[2, 1, 0, 3])?; // [h, HW, T, d]

    let to_heads = |tape: &mut Tape<E>, x: NodeId| -> Result<NodeId> {
        let r = tape.reshape(x, &[t, h, d])?;
        let p = tape.permute(r, &[1, 0, 2])?; // [h, T, d]
        tape.reshape(p, &[h, 1, t, d]) // singleton batch broadcasts over HW
    };
    let k = linear_apply(tape, store, w.k, a_kv)?;
    let k = to_heads(tape, k)?;
    let v = linear_apply(tape, store, w.v, a_kv)?;
    let v = to_heads(tape, v)?;

    let kt = tape.permute(k, &[0, 1, 3, 2])?; // [h, 1, d, T]
    let scores = tape.matmul(q, kt)?; // [h, HW, T, T]
    let alpha = tape.softmax_axis(scores, 3, scale)?;
    let ctx = tape.matmul(alpha, v)?; // [h, HW, T, d]
    let ctx = tape.permute(ctx, &[2, 1, 0, 3])?; // [T, HW, h, d]
    let ctx = tape.reshape(ctx, &[t, hw, c])?;
    let out = linear_apply(tape, store, w.o, ctx)?;
    Ok((out, alpha))
}

/// Spatial attention with the visual stream as query: every pixel scores the
/// single per-frame audio token, the map is normalized over HW, and the
/// projected audio value is injected at each pixel gated by `HW * alpha` so
/// a uniform map reduces to a plain broadcast.
fn visual_spatial_attention<E: Element>(
    tape: &mut Tape<E>,
    store: &ParamStore<E>,
    w: &MhCrossAttnWeights,
    v_src: NodeId,
    a_kv: NodeId,
    scale: E,
) -> Result<(NodeId, NodeId)> {
    let vd = tape.dims(v_src).to_vec();
    let (t, hw, c) = (vd[0], vd[1], vd[2]);
    let h = w.heads;
    let d = c / h;

    let q = linear_apply(tape, store, w.q, v_src)?;
    let q = tape.reshape(q, &[t, hw, h, d])?;
    let q = tape.permute(q, &[0, 2, 1, 3])?; // [T, h, HW, d]

    let k = linear_apply(tape, store, w.k, a_kv)?; // [T, C]
    let k = tape.reshape(k, &[t, h, 1, d])?;
    let v = linear_apply(tape, store, w.v, a_kv)?;
    let v = tape.reshape(v, &[t, h, 1, d])?;

    let kt = tape.permute(k, &[0, 1, 3, 2])?; // [T, h, d, 1]
    let scores = tape.matmul(q, kt)?; // [T, h, HW, 1]
    let alpha = tape.softmax_axis(scores, 2, scale)?; // normalized over HW
    let gated = tape.scale(alpha, E::from_f64(hw as f64))?;
    let ctx = tape.matmul(gated, v)?; // [T, h, HW, d]
    let ctx = tape.permute(ctx, &[0, 2, 1, 3])?; // [T, HW, h, d]
    let ctx = tape.reshape(ctx, &[t, hw, c])?;
    let out = linear_apply(tape, store, w.o, ctx)?;
    Ok((out, alpha))
}

/// Head-averaged detached copy of a score map.
fn head_mean<E: Element>(t: &Tensor<E>, axis: usize) -> Tensor<E> {
    let dims = t.dims();
    let n = dims[axis];
    let outer: usize = dims[..axis].iter().product();
    let inner: usize = dims[axis + 1..].iter().product();
    let inv = E::from_f64(1.0 / n as f64);
    let mut out_dims = dims.to_vec();
    out_dims.remove(axis);
    let mut out = vec![E::ZERO; outer * inner];
    for o in 0..outer {
        for r in 0..n {
            let src = &t.data()[(o * n + r) * inner..(o * n + r + 1) * inner];
            let dst = &mut out[o * inner..(o + 1) * inner];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s * inv;
            }
        }
    }
    Tensor::from_vec(out_dims, out).expect("head_mean shape bookkeeping")
}

/// Score maps captured from one block: the spatial map `[T, HW, 1]` and,
/// when temporal attention is enabled, the per-pixel temporal map
/// `[HW, T, T]` (both from the visual-query direction, head-averaged).
#[derive(Clone, Debug)]
pub struct BlockMaps<E: Element> {
    pub alpha_space: Tensor<E>,
    pub alpha_time: Option<Tensor<E>>,
}

/// Captured attention maps for one forward pass: the raw pre-module spatial
/// correspondence plus per-block maps.
#[derive(Clone, Debug)]
pub struct AttentionRecord<E: Element> {
    /// Softmax over HW of `V A^T / sqrt(C)` computed from the backbone
    /// embeddings before any block; `[T, HW, 1]`.
    pub pre_module: Tensor<E>,
    pub blocks: Vec<BlockMaps<E>>,
}

/// One bidirectional block: the audio stream is updated first (temporal and
/// spatial sub-attentions in the configured order), then the visual stream
/// attends to the already-updated audio.
#[derive(Clone, Debug)]
pub struct StBavaBlock {
    pub audio_temporal: Option<MhCrossAttnWeights>,
    pub audio_spatial: Option<MhCrossAttnWeights>,
    pub visual_temporal: Option<MhCrossAttnWeights>,
    pub visual_spatial: MhCrossAttnWeights,
    pub ln_audio_temporal: Option<LayerNormParams>,
    pub ln_audio_spatial: Option<LayerNormParams>,
    pub ln_visual_temporal: Option<LayerNormParams>,
    pub ln_visual_spatial: LayerNormParams,
}

impl StBavaBlock {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut SplitMix64,
        name: &str,
        cfg: &StBavaConfig,
    ) -> Self {
        let (c, h) = (cfg.channels, cfg.heads);
        let attn = |store: &mut ParamStore<E>, rng: &mut SplitMix64, tag: &str| {
            MhCrossAttnWeights::init(store, rng, &format!("{name}.{tag}"), c, h, true)
        };
        let ln = |store: &mut ParamStore<E>, tag: &str| {
            LayerNormParams::init(store, &format!("{name}.{tag}"), c, true)
        };
        let bidirectional = !cfg.no_bidirectional;
        let temporal = !cfg.no_temporal;
        StBavaBlock {
            audio_temporal: (bidirectional && temporal).then(|| attn(store, rng, "audio_temporal")),
            audio_spatial: bidirectional.then(|| attn(store, rng, "audio_spatial")),
            visual_temporal: temporal.then(|| attn(store, rng, "visual_temporal")),
            visual_spatial: attn(store, rng, "visual_spatial"),
            ln_audio_temporal: (bidirectional && temporal).then(|| ln(store, "ln_audio_temporal")),
            ln_audio_spatial: bidirectional.then(|| ln(store, "ln_audio_spatial")),
            ln_visual_temporal: temporal.then(|| ln(store, "ln_visual_temporal")),
            ln_visual_spatial: ln(store, "ln_visual_spatial"),
        }
    }

    /// `(V', A', maps)` for stream nodes `v: [T, HW, C]`, `a: [T, C]` and the
    /// initial audio feature `a0: [T, C]` acting as positional encoding.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        v: NodeId,
        a: NodeId,
        a0: NodeId,
        cfg: &StBavaConfig,
    ) -> Result<(NodeId, NodeId, BlockMaps<E>)> {
        let vd = tape.dims(v).to_vec();
        let ad = tape.dims(a).to_vec();
        if vd.len() != 3 || ad.len() != 2 || vd[0] != ad[0] || vd[2] != ad[1] || vd[2] != cfg.channels {
            return Err(Error::Shape {
                op: "stbava_block",
                lhs: vd,
                rhs: ad,
                detail: format!("expected V [T, HW, {0}] and A [T, {0}]", cfg.channels),
            });
        }
        let scale = E::from_f64(cfg.attn_scale());
        let mut v = v;
        let mut a = a;

        // audio-stream update (skipped entirely without bidirectional attention)
        if !cfg.no_bidirectional {
            let steps: [bool; 2] = match cfg.order {
                AttnOrder::TemporalFirst => [true, false],
                AttnOrder::SpatialFirst => [false, true],
            };
            for temporal_step in steps {
                if temporal_step {
                    let (Some(w), Some(ln)) = (&self.audio_temporal, &self.ln_audio_temporal) else {
                        continue;
                    };
                    let a_pe = tape.add(a, a0)?;
                    let a_src = layer_norm_apply(tape, store, *ln, a_pe)?;
                    let q = tape.reshape(a_src, &[1, ad[0], ad[1]])?;
                    let pooled = tape.mean_axis(v, 1)?; // [T, 1, C]
                    let pooled = tape.reshape(pooled, &[1, ad[0], ad[1]])?;
                    let (upd, _alpha) = batched_attention(tape, store, w, q, pooled, scale)?;
                    let upd = tape.reshape(upd, &ad)?;
                    a = tape.add(a, upd)?;
                } else if let (Some(w), Some(ln)) = (&self.audio_spatial, &self.ln_audio_spatial) {
                    let a_pe = tape.add(a, a0)?;
                    let a_src = layer_norm_apply(tape, store, *ln, a_pe)?;
                    let q = tape.reshape(a_src, &[ad[0], 1, ad[1]])?; // one token per frame
                    let (upd, _alpha) = batched_attention(tape, store, w, q, v, scale)?;
                    let upd = tape.reshape(upd, &ad)?;
                    a = tape.add(a, upd)?;
                }
            }
        }

        // visual-stream update against the (possibly updated) audio
        let mut alpha_space = None;
        let mut alpha_time = None;
        let steps: [bool; 2] = match cfg.order {
            AttnOrder::TemporalFirst => [true, false],
            AttnOrder::SpatialFirst => [false, true],
        };
        for temporal_step in steps {
            if temporal_step {
                let (Some(w), Some(ln)) = (&self.visual_temporal, &self.ln_visual_temporal) else {
                    continue;
                };
                let v_src = layer_norm_apply(tape, store, *ln, v)?;
                let a_kv = tape.add(a, a0)?;
                let (upd, alpha) = visual_temporal_attention(tape, store, w, v_src, a_kv, scale)?;
                alpha_time = Some(head_mean(&tape.tensor(alpha), 0)); // [HW, T, T]
                v = tape.add(v, upd)?;
            } else {
                let v_src = layer_norm_apply(tape, store, self.ln_visual_spatial, v)?;
                let a_kv = tape.add(a, a0)?;
                let (upd, alpha) =
                    visual_spatial_attention(tape, store, &self.visual_spatial, v_src, a_kv, scale)?;
                alpha_space = Some(head_mean(&tape.tensor(alpha), 1)); // [T, HW, 1]
                v = tape.add(v, upd)?;
            }
        }

        let maps = BlockMaps {
            alpha_space: alpha_space.expect("visual spatial attention always runs"),
            alpha_time,
        };
        Ok((v, a, maps))
    }
}

#[derive(Clone, Debug)]
pub struct StBavaStack {
    pub blocks: Vec<StBavaBlock>,
}

impl StBavaStack {
    pub fn init<E: Element>(store: &mut ParamStore<E>, rng: &mut SplitMix64, cfg: &StBavaConfig) -> Self {
        let blocks = (0..cfg.depth)
            .map(|i| StBavaBlock::init(store, rng, &format!("stbava.block{i}"), cfg))
            .collect();
        StBavaStack { blocks }
    }

    /// Applies the L blocks sequentially, threading the stack input `a` into
    /// every block as the positional encoding A0, and records all maps.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        v: NodeId,
        a: NodeId,
        cfg: &StBavaConfig,
    ) -> Result<(NodeId, NodeId, AttentionRecord<E>)> {
        let pre_module = raw_spatial_map(&tape.tensor(v), &tape.tensor(a), cfg.attn_scale());
        let a0 = a;
        let mut v = v;
        let mut a = a;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let (nv, na, maps) = block.forward(tape, store, v, a, a0, cfg)?;
            v = nv;
            a = na;
            blocks.push(maps);
        }
        Ok((v, a, AttentionRecord { pre_module, blocks }))
    }
}

/// Raw spatial correspondence `softmax_HW(V A^T * scale)` computed directly
/// from embedding values (no learned projections); `[T, HW, 1]`.
pub fn raw_spatial_map<E: Element>(v: &Tensor<E>, a: &Tensor<E>, scale: f64) -> Tensor<E> {
    let (t, hw, c) = (v.dims()[0], v.dims()[1], v.dims()[2]);
    let mut out = vec![E::ZERO; t * hw];
    for ti in 0..t {
        let arow = &a.data()[ti * c..(ti + 1) * c];
        let mut scores = vec![0.0f64; hw];
        for p in 0..hw {
            let vrow = &v.data()[(ti * hw + p) * c..(ti * hw + p + 1) * c];
            let mut s = 0.0;
            for (x, y) in vrow.iter().zip(arow) {
                s += x.to_f64() * y.to_f64();
            }
            scores[p] = s * scale;
        }
        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for s in scores.iter_mut() {
            *s = (*s - m).exp();
            denom += *s;
        }
        for p in 0..hw {
            out[ti * hw + p] = E::from_f64(scores[p] / denom);
        }
    }
    Tensor::from_vec(vec![t, hw, 1], out).expect("raw map shape")
}
