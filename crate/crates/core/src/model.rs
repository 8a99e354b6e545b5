//! Full pipeline assembly: backbones -> cross-modal stack -> mask decoder,
//! with mean binary cross-entropy against the ground-truth masks.

use crate::attn::{AttentionRecord, StBavaStack};
use crate::backbones::{Adapter, ToyAudioEncoder, ToyImageEncoder};
use crate::config::StBavaConfig;
use crate::decoder::DecoderWeights;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::SplitMix64;
use crate::synth::ClipData;
use crate::tape::{NodeId, Tape};
use crate::tensor::Element;

const MODEL_SEED_TAG: u64 = 0x6D6F_64656C;

/// Wiring of the pipeline; all weights live in the accompanying
/// [`ParamStore`], so the model itself is cheap to share across threads.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: StBavaConfig,
    pub image_encoder: ToyImageEncoder,
    pub audio_encoder: ToyAudioEncoder,
    pub adapters: Option<Vec<Adapter>>,
    pub stack: StBavaStack,
    pub decoder: DecoderWeights,
}

impl Model {
    /// Deterministic construction from `cfg.seed`.
    pub fn build<E: Element>(cfg: &StBavaConfig) -> Result<(Model, ParamStore<E>)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::stream(cfg.seed, MODEL_SEED_TAG);
        let image_encoder = ToyImageEncoder::init(&mut store, &mut rng, cfg, cfg.unfreeze_encoders);
        let audio_encoder = ToyAudioEncoder::init(&mut store, &mut rng, cfg, cfg.unfreeze_encoders);
        let adapters = (!cfg.no_adapter).then(|| Adapter::init_all(&mut store, &mut rng, cfg));
        let stack = StBavaStack::init(&mut store, &mut rng, cfg);
        let decoder = DecoderWeights::init(&mut store, &mut rng, cfg);
        Ok((Model { cfg: cfg.clone(), image_encoder, audio_encoder, adapters, stack, decoder }, store))
    }
}

pub struct ForwardOutput<E: Element> {
    /// `[T, H_i, W_i]` mask logits.
    pub logits: NodeId,
    /// Scalar mean BCE loss against the clip masks.
    pub loss: NodeId,
    pub record: AttentionRecord<E>,
}

/// Whole-clip forward pass. `use_adapters` lets the staged training schedule
/// run the encoder adapter-free before the joint phase; it is a no-op when
/// the model has no adapters.
pub fn forward_clip<E: Element>(
    model: &Model,
    store: &ParamStore<E>,
    tape: &mut Tape<E>,
    clip: &ClipData<E>,
    use_adapters: bool,
) -> Result<ForwardOutput<E>> {
    let cfg = &model.cfg;
    if clip.frames.dims()[0] != cfg.frames {
        return Err(Error::Config(format!(
            "clip has {} frames, config expects {}",
            clip.frames.dims()[0],
            cfg.frames
        )));
    }
    let audio = model.audio_encoder.forward(tape, store, &clip.specs, cfg)?;
    let adapters = match (&model.adapters, use_adapters) {
        (Some(list), true) => Some((list.as_slice(), audio)),
        _ => None,
    };
    let v_enc = model.image_encoder.forward(tape, store, &clip.frames, adapters, cfg)?;
    let (v_aq, a_vq, record) = model.stack.forward(tape, store, v_enc, audio, cfg)?;
    let logits = model.decoder.decode_clip(tape, store, v_enc, v_aq, a_vq, cfg)?;
    let targets = tape.constant(&clip.masks)?;
    let loss = tape.bce_with_logits(logits, targets)?;
    Ok(ForwardOutput { logits, loss, record })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_clip, Mode};

    fn small_cfg() -> StBavaConfig {
        StBavaConfig {
            frames: 3,
            image_size: 32,
            spec_h: 24,
            spec_w: 16,
            channels: 16,
            heads: 2,
            depth: 2,
            audio_channels: 32,
            encoder_layers: 2,
            ..StBavaConfig::default()
        }
    }

    #[test]
    fn forward_produces_clip_logits_and_finite_loss() {
        let cfg = small_cfg();
        let (model, store) = Model::build::<f32>(&cfg).unwrap();
        let clip = generate_clip(Mode::Single, 3, &cfg).unwrap().convert::<f32>();
        let mut tape = Tape::new();
        let out = forward_clip(&model, &store, &mut tape, &clip, true).unwrap();
        assert_eq!(tape.dims(out.logits), &[3, 32, 32]);
        assert!(tape.value(out.loss)[0].is_finite());
        assert_eq!(out.record.blocks.len(), cfg.depth);
    }

    #[test]
    fn all_ablation_rows_run_with_finite_loss() {
        for (nt, nb, na) in [
            (false, false, false), // full
            (true, false, false),
            (false, true, false),
            (false, false, true),
            (true, true, true), // baseline: spatial audio-to-visual only
        ] {
            let cfg = StBavaConfig {
                no_temporal: nt,
                no_bidirectional: nb,
                no_adapter: na,
                ..small_cfg()
            };
            let (model, store) = Model::build::<f32>(&cfg).unwrap();
            let clip = generate_clip(Mode::Multi, 4, &cfg).unwrap().convert::<f32>();
            let mut tape = Tape::new();
            let out = forward_clip(&model, &store, &mut tape, &clip, true).unwrap();
            assert!(tape.value(out.loss)[0].is_finite(), "flags ({nt},{nb},{na})");
        }
    }

    #[test]
    fn ablations_shrink_the_trainable_parameter_count() {
        let full = Model::build::<f32>(&small_cfg()).unwrap().1.trainable_params();
        let wo_adapter = Model::build::<f32>(&StBavaConfig { no_adapter: true, ..small_cfg() })
            .unwrap()
            .1
            .trainable_params();
        let baseline = Model::build::<f32>(&StBavaConfig {
            no_temporal: true,
            no_bidirectional: true,
            no_adapter: true,
            ..small_cfg()
        })
        .unwrap()
        .1
        .trainable_params();
        assert!(full > wo_adapter, "full {full} vs w/o adapter {wo_adapter}");
        assert!(wo_adapter > baseline, "w/o adapter {wo_adapter} vs baseline {baseline}");
    }

    #[test]
    fn construction_is_deterministic_in_the_seed() {
        let cfg = small_cfg();
        let (_, s1) = Model::build::<f32>(&cfg).unwrap();
        let (_, s2) = Model::build::<f32>(&cfg).unwrap();
        for (a, b) in s1.iter().zip(s2.iter()) {
            assert_eq!(a.1.name, b.1.name);
            assert_eq!(a.1.tensor.data(), b.1.tensor.data());
        }
        let other = StBavaConfig { seed: 9, ..cfg };
        let (_, s3) = Model::build::<f32>(&other).unwrap();
        assert_ne!(s1.by_name("decoder.mask_token").unwrap().tensor.data(),
                   s3.by_name("decoder.mask_token").unwrap().tensor.data());
    }

    #[test]
    fn invalid_config_is_rejected_at_build() {
        let cfg = StBavaConfig { heads: 3, ..small_cfg() };
        assert!(matches!(Model::build::<f32>(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn frozen_fraction_is_reported_correctly() {
        let cfg = small_cfg();
        let (_, store) = Model::build::<f32>(&cfg).unwrap();
        let trainable = store.trainable_params();
        let total = store.total_params();
        assert!(trainable < total);
        // frozen default: backbone weights dominate the total
        assert!((trainable as f64) / (total as f64) < 0.9);
    }
}
