//! Toy stand-ins for the image and audio backbones, plus the per-layer
//! audio adapters that inject audio information into the image encoding.
//!
//! Both encoders are frozen by default (their parameters are registered as
//! non-trainable); the audio output linear stays trainable in every
//! configuration. Everything is strictly frame-local: frame t of any output
//! depends only on frame t of the inputs.

use crate::attn::{batched_attention, layer_norm_apply, linear_apply, MhCrossAttnWeights};
use crate::config::StBavaConfig;
use crate::error::{Error, Result};
use crate::params::{LayerNormParams, Linear, ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::tape::{NodeId, Tape};
use crate::tensor::{Element, Tensor};

/// One self-attention encoder layer (single head, pre-norm residual).
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn: MhCrossAttnWeights,
    pub ln: LayerNormParams,
}

#[derive(Clone, Debug)]
pub struct ToyImageEncoder {
    pub patch_embed: Linear,
    /// Learned absolute positional embedding `[HW, C]`, added once to the
    /// patch embeddings. Without it every attention stage is spatially
    /// content-blind and identically rendered objects stay indistinguishable.
    pub pos_embed: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl ToyImageEncoder {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut SplitMix64,
        cfg: &StBavaConfig,
        trainable: bool,
    ) -> Self {
        let in_dim = 3 * cfg.patch * cfg.patch;
        let patch_embed = Linear::init(store, rng, "image_encoder.patch_embed", in_dim, cfg.channels, trainable);
        let bound = (1.0 / cfg.channels as f64).sqrt();
        let pos_embed = store.add(
            "image_encoder.pos_embed",
            Tensor::uniform(&[cfg.hw(), cfg.channels], bound, rng),
            trainable,
        );
        let layers = (0..cfg.encoder_layers)
            .map(|j| EncoderLayer {
                attn: MhCrossAttnWeights::init(
                    store,
                    rng,
                    &format!("image_encoder.layer{j}.attn"),
                    cfg.channels,
                    1,
                    trainable,
                ),
                ln: LayerNormParams::init(store, &format!("image_encoder.layer{j}.ln"), cfg.channels, trainable),
            })
            .collect();
        ToyImageEncoder { patch_embed, pos_embed, layers }
    }

    /// Flattens `[T, 3, H, W]` frames into `[T, HW, 3 P^2]` patch vectors
    /// (channel-major within a patch). Runs outside the tape: pixels are
    /// constant inputs.
    pub fn patchify<E: Element>(frames: &Tensor<E>, cfg: &StBavaConfig) -> Result<Tensor<E>> {
        let d = frames.dims();
        if d.len() != 4 || d[1] != 3 || d[2] != cfg.image_size || d[3] != cfg.image_size {
            return Err(Error::Config(format!(
                "frames dims {d:?} do not match a [T, 3, {0}, {0}] clip",
                cfg.image_size
            )));
        }
        if cfg.image_size % cfg.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                cfg.image_size, cfg.patch
            )));
        }
        let (t_len, p, grid, size) = (d[0], cfg.patch, cfg.grid(), cfg.image_size);
        let mut out = vec![E::ZERO; t_len * grid * grid * 3 * p * p];
        let vec_len = 3 * p * p;
        for t in 0..t_len {
            for gy in 0..grid {
                for gx in 0..grid {
                    let pos = gy * grid + gx;
                    let base = (t * grid * grid + pos) * vec_len;
                    for c in 0..3 {
                        for py in 0..p {
                            for px in 0..p {
                                let src = ((t * 3 + c) * size + gy * p + py) * size + gx * p + px;
                                out[base + c * p * p + py * p + px] = frames.data()[src];
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_vec(vec![t_len, grid * grid, vec_len], out)
    }

    /// `[T, HW, C]` visual embedding. When adapters are supplied, adapter j's
    /// audio prompt is added to the input of layer j.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        frames: &Tensor<E>,
        adapters: Option<(&[Adapter], NodeId)>,
        cfg: &StBavaConfig,
    ) -> Result<NodeId> {
        if let Some((list, _)) = adapters {
            if list.len() != self.layers.len() {
                return Err(Error::Config(format!(
                    "{} adapters for {} encoder layers",
                    list.len(),
                    self.layers.len()
                )));
            }
        }
        let patches = Self::patchify(frames, cfg)?;
        let patches = tape.constant(&patches)?;
        let embedded = linear_apply(tape, store, self.patch_embed, patches)?;
        let pos = tape.param(store, self.pos_embed)?;
        let mut x = tape.add(embedded, pos)?; // broadcasts over the frame axis
        let scale = E::from_f64(cfg.attn_scale());
        for (j, layer) in self.layers.iter().enumerate() {
            if let Some((list, audio)) = adapters {
                let prompt = list[j].forward(tape, store, audio, cfg.hw())?;
                x = tape.add(x, prompt)?;
            }
            let src = layer_norm_apply(tape, store, layer.ln, x)?;
            let (upd, _alpha) = batched_attention(tape, store, &layer.attn, src, src, scale)?;
            x = tape.add(x, upd)?;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct ToyAudioEncoder {
    pub proj: Linear,
    pub mlp1: Linear,
    pub mlp2: Linear,
    /// Output linear into the shared channel width; always trainable.
    pub out: Linear,
}

impl ToyAudioEncoder {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut SplitMix64,
        cfg: &StBavaConfig,
        trainable: bool,
    ) -> Self {
        let in_dim = cfg.spec_h * cfg.spec_w;
        let ca = cfg.audio_channels;
        ToyAudioEncoder {
            proj: Linear::init(store, rng, "audio_encoder.proj", in_dim, ca, trainable),
            mlp1: Linear::init(store, rng, "audio_encoder.mlp1", ca, ca, trainable),
            mlp2: Linear::init(store, rng, "audio_encoder.mlp2", ca, ca, trainable),
            out: Linear::init(store, rng, "audio_encoder.out", ca, cfg.channels, true),
        }
    }

    /// `[T, C]` audio embedding; the caller keeps the returned node as the
    /// positional-encoding source A0 as well.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        specs: &Tensor<E>,
        cfg: &StBavaConfig,
    ) -> Result<NodeId> {
        let d = specs.dims();
        if d.len() != 3 || d[1] != cfg.spec_h || d[2] != cfg.spec_w {
            return Err(Error::Config(format!(
                "spectrogram dims {d:?} do not match [T, {}, {}]",
                cfg.spec_h, cfg.spec_w
            )));
        }
        let flat = Tensor::from_vec(vec![d[0], d[1] * d[2]], specs.data().to_vec())?;
        let x = tape.constant(&flat)?;
        let x = linear_apply(tape, store, self.proj, x)?;
        let h = linear_apply(tape, store, self.mlp1, x)?;
        let h = tape.gelu(h)?;
        let x = linear_apply(tape, store, self.mlp2, h)?;
        linear_apply(tape, store, self.out, x)
    }
}

/// Per-encoder-layer audio adapter: a two-layer bottleneck MLP
/// `[C -> C/4 -> C]` applied to the audio embedding, repeated over HW.
#[derive(Clone, Debug)]
pub struct Adapter {
    pub down: Linear,
    pub up: Linear,
}

impl Adapter {
    pub fn init<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut SplitMix64,
        name: &str,
        channels: usize,
    ) -> Self {
        let hidden = channels / 4;
        Adapter {
            down: Linear::init(store, rng, &format!("{name}.down"), channels, hidden, true),
            up: Linear::init(store, rng, &format!("{name}.up"), hidden, channels, true),
        }
    }

    pub fn init_all<E: Element>(
        store: &mut ParamStore<E>,
        rng: &mut SplitMix64,
        cfg: &StBavaConfig,
    ) -> Vec<Adapter> {
        (0..cfg.encoder_layers)
            .map(|j| Adapter::init(store, rng, &format!("adapter{j}"), cfg.channels))
            .collect()
    }

    /// `[T, HW, C]` audio prompt: MLP output repeated at every grid
    /// position. Frame-local by construction.
    pub fn forward<E: Element>(
        &self,
        tape: &mut Tape<E>,
        store: &ParamStore<E>,
        audio: NodeId,
        hw: usize,
    ) -> Result<NodeId> {
        let ad = tape.dims(audio).to_vec();
        let h = linear_apply(tape, store, self.down, audio)?;
        let h = tape.gelu(h)?;
        let p = linear_apply(tape, store, self.up, h)?; // [T, C]
        let p = tape.reshape(p, &[ad[0], 1, ad[1]])?;
        tape.repeat_axis(p, 1, hw)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamId;

    fn cfg() -> StBavaConfig {
        StBavaConfig::default()
    }

    fn small_cfg() -> StBavaConfig {
        StBavaConfig {
            frames: 3,
            image_size: 16,
            patch: 8,
            channels: 16,
            heads: 2,
            spec_h: 12,
            spec_w: 8,
            audio_channels: 24,
            encoder_layers: 2,
            ..StBavaConfig::default()
        }
    }

    fn build<E: Element>(
        c: &StBavaConfig,
        seed: u64,
    ) -> (ToyImageEncoder, ToyAudioEncoder, Vec<Adapter>, ParamStore<E>) {
        let mut store = ParamStore::new();
        let mut rng = SplitMix64::new(seed);
        let img = ToyImageEncoder::init(&mut store, &mut rng, c, c.unfreeze_encoders);
        let aud = ToyAudioEncoder::init(&mut store, &mut rng, c, c.unfreeze_encoders);
        let adapters = Adapter::init_all(&mut store, &mut rng, c);
        (img, aud, adapters, store)
    }

    fn rand_frames(c: &StBavaConfig, seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(&[c.frames, 3, c.image_size, c.image_size], |_| rng.next_f64())
    }

    fn rand_specs(c: &StBavaConfig, seed: u64) -> Tensor<f64> {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(&[c.frames, c.spec_h, c.spec_w], |_| rng.next_f64())
    }

    #[test]
    fn image_encoder_output_dims() {
        let c = cfg();
        let (img, _, _, store) = build::<f64>(&c, 1);
        let frames = rand_frames(&c, 2);
        let mut tape = Tape::new();
        let v = img.forward(&mut tape, &store, &frames, None, &c).unwrap();
        assert_eq!(tape.dims(v), &[5, 64, 64]); // 64x64 input, P=8 -> 64 positions
    }

    #[test]
    fn audio_encoder_output_dims_and_zero_input_rows() {
        let c = cfg();
        let (_, aud, _, store) = build::<f64>(&c, 3);
        let specs = Tensor::<f64>::zeros(&[5, 96, 64]);
        let mut tape = Tape::new();
        let a = aud.forward(&mut tape, &store, &specs, &c).unwrap();
        assert_eq!(tape.dims(a), &[5, 64]);
        // zero spectrogram: every row is the bias pathway, identical across t
        let data = tape.value(a);
        for t in 1..5 {
            assert_eq!(&data[t * 64..(t + 1) * 64], &data[..64]);
        }
        // and deterministic
        let mut tape2 = Tape::new();
        let a2 = aud.forward(&mut tape2, &store, &specs, &c).unwrap();
        assert_eq!(tape.value(a), tape2.value(a2));
    }

    #[test]
    fn zeroed_adapter_up_projection_matches_adapter_free_encoding() {
        let c = small_cfg();
        let (img, _, adapters, mut store) = build::<f64>(&c, 4);
        for id in store.ids().collect::<Vec<ParamId>>() {
            let name = store.entry(id).name.clone();
            if name.contains("adapter") && name.contains(".up.") {
                let dims = store.tensor(id).dims().to_vec();
                store.entry_mut(id).tensor = Tensor::zeros(&dims);
            }
        }
        let frames = rand_frames(&c, 5);
        let audio = Tensor::<f64>::from_fn(&[c.frames, c.channels], |i| (i as f64) * 0.01);
        let mut tape = Tape::new();
        let an = tape.constant(&audio).unwrap();
        let with = img.forward(&mut tape, &store, &frames, Some((&adapters, an)), &c).unwrap();
        let mut tape2 = Tape::new();
        let without = img.forward(&mut tape2, &store, &frames, None, &c).unwrap();
        for (a, b) in tape.value(with).iter().zip(tape2.value(without)) {
            assert!((a - b).abs() <= 1e-7);
        }
    }

    #[test]
    fn adapter_repeats_one_vector_over_all_positions() {
        let c = small_cfg();
        let (_, _, adapters, store) = build::<f64>(&c, 6);
        let audio = Tensor::<f64>::from_fn(&[c.frames, c.channels], |i| (i % 7) as f64 * 0.1);
        let mut tape = Tape::new();
        let an = tape.constant(&audio).unwrap();
        let p = adapters[0].forward(&mut tape, &store, an, c.hw()).unwrap();
        assert_eq!(tape.dims(p), &[c.frames, c.hw(), c.channels]);
        let data = tape.value(p);
        for t in 0..c.frames {
            let first = &data[t * c.hw() * c.channels..t * c.hw() * c.channels + c.channels];
            for pos in 1..c.hw() {
                let row = &data[(t * c.hw() + pos) * c.channels..(t * c.hw() + pos + 1) * c.channels];
                assert_eq!(row, first);
            }
        }
    }

    #[test]
    fn encoders_and_adapters_are_frame_local() {
        let c = small_cfg();
        let (img, aud, adapters, store) = build::<f64>(&c, 7);
        let frames = rand_frames(&c, 8);
        let specs = rand_specs(&c, 9);

        // perturb frame 2 only
        let mut frames2 = frames.clone();
        let fsz = 3 * c.image_size * c.image_size;
        for x in &mut frames2.data_mut()[2 * fsz..3 * fsz] {
            *x = 1.0 - *x;
        }
        let mut specs2 = specs.clone();
        let ssz = c.spec_h * c.spec_w;
        for x in &mut specs2.data_mut()[2 * ssz..3 * ssz] {
            *x += 0.5;
        }

        let run = |frames: &Tensor<f64>, specs: &Tensor<f64>| {
            let mut tape = Tape::new();
            let a = aud.forward(&mut tape, &store, specs, &c).unwrap();
            let v = img.forward(&mut tape, &store, frames, Some((&adapters, a)), &c).unwrap();
            (tape.tensor(v), tape.tensor(a))
        };
        let (v1, a1) = run(&frames, &specs);
        let (v2, a2) = run(&frames2, &specs2);

        let vrow = c.hw() * c.channels;
        for t in 0..2 {
            for i in 0..vrow {
                assert_eq!(v1.data()[t * vrow + i], v2.data()[t * vrow + i], "visual frame {t}");
            }
            for i in 0..c.channels {
                assert_eq!(a1.data()[t * c.channels + i], a2.data()[t * c.channels + i], "audio frame {t}");
            }
        }
        // the perturbed frame itself must move
        assert_ne!(
            &v1.data()[2 * vrow..3 * vrow],
            &v2.data()[2 * vrow..3 * vrow],
        );
    }

    #[test]
    fn frozen_flag_controls_trainability_except_audio_out() {
        let frozen = build::<f32>(&cfg(), 10).3;
        let unfrozen = build::<f32>(&StBavaConfig { unfreeze_encoders: true, ..cfg() }, 10).3;
        assert!(frozen.trainable_params() < unfrozen.trainable_params());
        assert_eq!(frozen.total_params(), unfrozen.total_params());
        // the audio output linear is trainable in both
        for store in [&frozen, &unfrozen] {
            let e = store.by_name("audio_encoder.out.w").unwrap();
            assert!(e.trainable);
        }
        // adapters always trainable
        assert!(frozen.by_name("adapter0.down.w").unwrap().trainable);
        // backbone weights frozen by default
        assert!(!frozen.by_name("image_encoder.patch_embed.w").unwrap().trainable);
        assert!(unfrozen.by_name("image_encoder.patch_embed.w").unwrap().trainable);
    }

    #[test]
    fn mismatched_input_dims_are_config_errors() {
        let c = small_cfg();
        let (img, aud, _, store) = build::<f64>(&c, 11);
        let bad_frames = Tensor::<f64>::zeros(&[c.frames, 3, 20, 20]);
        let mut tape = Tape::new();
        assert!(matches!(
            img.forward(&mut tape, &store, &bad_frames, None, &c),
            Err(Error::Config(_))
        ));
        let bad_specs = Tensor::<f64>::zeros(&[c.frames, 5, 5]);
        assert!(matches!(
            aud.forward(&mut tape, &store, &bad_specs, &c),
            Err(Error::Config(_))
        ));
    }
}
