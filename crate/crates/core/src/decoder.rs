//! Two-way mask decoder.
//!
//! Per frame, the updated visual embedding is summed into the encoder
//! embedding as the dense prompt, the updated audio embedding joins a
//! learned mask token as the sparse prompt, and two rounds of
//! token-self / token-to-image / image-to-token attention update both sides.
//! Logits are the dot product of the 4x-upsampled, channel-reduced image
//! embedding with the hypernetwork-mapped mask token, resized to the input
//! resolution. The upscale runs in two x2 stages with a pointwise GELU
//! after each: without the nonlinearity the whole upscale-and-dot chain
//! collapses to a bilinear surface over the patch grid, which caps the
//! achievable boundary accuracy well below what the mask targets need.
//! The decoder runs independently per frame; all temporal mixing lives
//! upstream in the cross-modal stack.

use crate::attn::{batched_attention, layer_norm_apply, linear_apply, MhCrossAttnWeights};
use crate::config::StBavaConfig;
use crate::error::{Error, Result};
use crate::params::{LayerNormParams, Linear, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct TwoWayBlock {
    pub token_self: MhCrossAttnWeights,
    pub token_to_image: MhCrossAttnWeights,
    pub image_to_token: MhCrossAttnWeights,
    pub ln_token_self: LayerNormParams,
    pub ln_token_cross: LayerNormParams,
    pub ln_image_cross: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct DecoderWeights {
    pub mask_token: ParamId,
    pub blocks: Vec<TwoWayBlock>,
    /// First upscale stage projection `[C, C/4]`.
    pub upscale1: Linear,
    /// Second upscale stage projection `[C/4, C/8]`.
    pub upscale2: Linear,
    pub hyper1: Linear,
    pub hyper2: Linear,
    pub hyper3: Linear,
}

impl DecoderWeights {
    pub fn init<E: Element>(store: &mut ParamStore<E>, rng: &mut SplitMix64, cfg: &StBavaConfig) -> Self {
        let c = cfg.channels;
        let c8 = c / 8;
        let bound = (1.0 / c as f64).sqrt();
        let mask_token = store.add("decoder.mask_token", Tensor::uniform(&[c], bound, rng), true);
        let blocks = (0..2)
            .map(|i| {
                let name = format!("decoder.block{i}");
                TwoWayBlock {
                    token_self: MhCrossAttnWeights::init(store, rng, &format!("{name}.token_self"), c, 1, true),
                    token_to_image: MhCrossAttnWeights::init(store, rng, &format!("{name}.token_to_image"), c, 1, true),
                    image_to_token: MhCrossAttnWeights::init(store, rng, &format!("{name}.image_to_token"), c, 1, true),
                    ln_token_self: LayerNormParams::init(store, &format!("{name}.ln_token_self"), c, true),
                    ln_token_cross: LayerNormParams::init(store, &format!("{name}.ln_token_cross"), c, true),
                    ln_image_cross: LayerNormParams::init(store, &format!("{name}.ln_image_cross"), c, true),
                }
            })
            .collect();
        DecoderWeights {
            mask_token,
            blocks,
            upscale1: Linear::init(store, rng, "decoder.upscale1", c, c / 4, true),
            upscale2: Linear::init(store, rng, "decoder.upscale2", c / 4, c8, true),
            hyper1: Linear::init(store, rng, "decoder.hyper1", c, c, true),
            hyper2: Linear::init(store, rng, "decoder.hyper2", c, c, true),
            hyper3: Linear::init(store, rng, "decoder.hyper3", c, c8, true),
        }
    }

    /// Per-frame decode: `v_enc` and `v_aq` are `[HW, C]`, `a_vq` is `[C]`;
    /// returns `[H_i, W_i]` mask logits.
    pub fn decode_frame<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        v_enc: NodeId,
        v_aq: NodeId,
        a_vq: NodeId,
        cfg: &StBavaConfig,
    ) -> Result<NodeId> {
        let hw = cfg.hw();
        let c = cfg.channels;
        if tape.dims(v_enc) != [hw, c] || tape.dims(v_aq) != [hw, c] || tape.dims(a_vq) != [c] {
            return Err(Error::Shape {
                op: "decode_frame",
                lhs: tape.dims(v_enc).to_vec(),
                rhs: tape.dims(a_vq).to_vec(),
                detail: format!("expected v [{hw}, {c}] and a [{c}]"),
            });
        }
        let scale = E::from_f64(cfg.attn_scale());

        // dense prompt summed into the image embedding
        let mut image = tape.add(v_enc, v_aq)?;
        // sparse prompt: learned mask token + the audio token
        let mask_token = tape.param(store, self.mask_token)?;
        let mut tokens = tape.stack0(&[mask_token, a_vq])?; // [2, C]

        for block in &self.blocks {
            let src = layer_norm_apply(tape, store, block.ln_token_self, tokens)?;
            let src3 = tape.reshape(src, &[1, 2, c])?;
            let (upd, _) = batched_attention(tape, store, &block.token_self, src3, src3, scale)?;
            let upd = tape.reshape(upd, &[2, c])?;
            tokens = tape.add(tokens, upd)?;

            let src = layer_norm_apply(tape, store, block.ln_token_cross, tokens)?;
            let src3 = tape.reshape(src, &[1, 2, c])?;
            let image3 = tape.reshape(image, &[1, hw, c])?;
            let (upd, _) = batched_attention(tape, store, &block.token_to_image, src3, image3, scale)?;
            let upd = tape.reshape(upd, &[2, c])?;
            tokens = tape.add(tokens, upd)?;

            let src = layer_norm_apply(tape, store, block.ln_image_cross, image)?;
            let src3 = tape.reshape(src, &[1, hw, c])?;
            let tokens3 = tape.reshape(tokens, &[1, 2, c])?;
            let (upd, _) = batched_attention(tape, store, &block.image_to_token, src3, tokens3, scale)?;
            let upd = tape.reshape(upd, &[hw, c])?;
            image = tape.add(image, upd)?;
        }

        // 4x upscale with channel reduction to C/8, staged as two x2 steps
        // with a pointwise nonlinearity after each
        let grid = cfg.grid();
        let (c4, c8) = (c / 4, c / 8);
        let to_chw = |tape: &mut Tape<E>, x: NodeId, side: usize, ch: usize| -> Result<NodeId> {
            let hwc = tape.reshape(x, &[side, side, ch])?;
            let chw = tape.permute(hwc, &[2, 0, 1])?;
            tape.reshape(chw, &[1, ch, side, side])
        };
        let to_hwc = |tape: &mut Tape<E>, x: NodeId, side: usize, ch: usize| -> Result<NodeId> {
            let chw = tape.reshape(x, &[ch, side, side])?;
            let hwc = tape.permute(chw, &[1, 2, 0])?;
            tape.reshape(hwc, &[side * side, ch])
        };
        let stage1 = linear_apply(tape, store, self.upscale1, image)?; // [HW, C/4]
        let stage1 = to_chw(tape, stage1, grid, c4)?;
        let stage1 = tape.bilinear_upsample(stage1, 2)?; // [1, C/4, 2H, 2W]
        let stage1 = tape.gelu(stage1)?;
        let mid = to_hwc(tape, stage1, grid * 2, c4)?;
        let stage2 = linear_apply(tape, store, self.upscale2, mid)?; // [4HW, C/8]
        let stage2 = to_chw(tape, stage2, grid * 2, c8)?;
        let stage2 = tape.bilinear_upsample(stage2, 2)?; // [1, C/8, 4H, 4W]
        let up = tape.gelu(stage2)?;
        let up_side = grid * 4;

        // hypernetwork maps the mask token to per-channel weights
        let tok0 = tape.index_axis0(tokens, 0)?; // [C]
        let tok0 = tape.reshape(tok0, &[1, c])?;
        let h = linear_apply(tape, store, self.hyper1, tok0)?;
        let h = tape.gelu(h)?;
        let h = linear_apply(tape, store, self.hyper2, h)?;
        let h = tape.gelu(h)?;
        let hyper = linear_apply(tape, store, self.hyper3, h)?; // [1, C/8]

        // per-pixel dot product
        let flat = tape.reshape(up, &[c8, up_side * up_side])?;
        let flat = tape.permute(flat, &[1, 0])?; // [pixels, C/8]
        let hyper_col = tape.permute(hyper, &[1, 0])?; // [C/8, 1]
        let logits = tape.matmul(flat, hyper_col)?; // [pixels, 1]
        let logits = tape.reshape(logits, &[1, 1, up_side, up_side])?;

        // final resize to the input resolution
        let factor = cfg.image_size / up_side;
        if factor * up_side != cfg.image_size {
            return Err(Error::Config(format!(
                "upscaled grid {up_side} does not divide image size {}",
                cfg.image_size
            )));
        }
        let full = tape.bilinear_upsample(logits, factor)?;
        tape.reshape(full, &[cfg.image_size, cfg.image_size])
    }

    /// Maps `decode_frame` over the clip; no cross-frame state.
    pub fn decode_clip<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        v_enc: NodeId,
        v_aq: NodeId,
        a_vq: NodeId,
        cfg: &StBavaConfig,
    ) -> Result<NodeId> {
        let t_len = tape.dims(v_enc)[0];
        let mut frames = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let ve = tape.index_axis0(v_enc, t)?;
            let va = tape.index_axis0(v_aq, t)?;
            let aa = tape.index_axis0(a_vq, t)?;
            frames.push(self.decode_frame(tape, store, ve, va, aa, cfg)?);
        }
        tape.stack0(&frames)
    }
}
