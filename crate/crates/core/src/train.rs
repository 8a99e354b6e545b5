//! Training: Adam with bias correction, gradient clipping at global norm
//! 5.0, a deterministic per-epoch clip order derived from the seed, and
//! best-validation checkpointing.
//!
//! Checkpoint file layout: `u32` little-endian header length, a JSON header
//! (config echo, epoch, Adam step count, entry table), then concatenated
//! tensor containers. Save -> load -> save is byte-identical.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::StBavaConfig;
use crate::error::{Error, Result};
use crate::metrics::{assemble_report, binarize, sigmoid, EvalReport};
use crate::model::{forward_clip, Model};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::stbt::{decode_tensor, encode_tensor, StbtTensor};
use crate::synth::{load_split, ClipData, Manifest, Split};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP_NORM: f64 = 5.0;
/// Joint phase length of the staged (two-phase) schedule.
pub const TWO_PHASE_JOINT_EPOCHS: usize = 15;

/// First/second moment buffers, one pair per parameter (empty for frozen
/// parameters, which the optimizer never touches).
#[derive(Clone, Debug)]
pub struct AdamState<E: Element> {
    pub m: Vec<Vec<E>>,
    pub v: Vec<Vec<E>>,
    pub t: usize,
}

impl<E: Element> AdamState<E> {
    pub fn new(store: &ParamStore<E>) -> Self {
        let m = store
            .iter()
            .map(|(_, e)| if e.trainable { vec![E::ZERO; e.tensor.numel()] } else { Vec::new() })
            .collect::<Vec<_>>();
        AdamState { v: m.clone(), m, t: 0 }
    }
}

/// One bias-corrected Adam step over the trainable parameters listed in
/// `active` (gradients are read from each tensor's grad slot).
pub fn adam_step<E: Element>(
    store: &mut ParamStore<E>,
    state: &mut AdamState<E>,
    active: &[ParamId],
    lr: f64,
) {
    state.t += 1;
    let b1 = E::from_f64(ADAM_BETA1);
    let b2 = E::from_f64(ADAM_BETA2);
    let one = E::ONE;
    let eps = E::from_f64(ADAM_EPS);
    let corr1 = E::from_f64(1.0 / (1.0 - ADAM_BETA1.powi(state.t as i32)));
    let corr2 = E::from_f64(1.0 / (1.0 - ADAM_BETA2.powi(state.t as i32)));
    let lr = E::from_f64(lr);
    for &id in active {
        let idx = id.0;
        let entry = store.entry_mut(id);
        if !entry.trainable {
            continue;
        }
        let Some(grad) = entry.tensor.grad.take() else { continue };
        let m = &mut state.m[idx];
        let v = &mut state.v[idx];
        let data = entry.tensor.data_mut();
        for i in 0..data.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let mhat = m[i] * corr1;
            let vhat = v[i] * corr2;
            data[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
        entry.tensor.grad = Some(grad);
    }
}

/// Scales all gradients so their global L2 norm is at most `max_norm`.
pub fn clip_grad_norm<E: Element>(store: &mut ParamStore<E>, active: &[ParamId], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for &id in active {
        if let Some(g) = &store.entry(id).tensor.grad {
            for &x in g {
                sq += x.to_f64() * x.to_f64();
            }
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = E::from_f64(max_norm / norm);
        for &id in active {
            if let Some(g) = store.entry_mut(id).tensor.grad.as_mut() {
                for x in g.iter_mut() {
                    *x *= scale;
                }
            }
        }
    }
    norm
}

// ── Checkpoints ──────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct CheckpointEntry {
    name: String,
    kind: String, // "weight" | "adam_m" | "adam_v"
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: StBavaConfig,
    epoch: usize,
    adam_t: usize,
    entries: Vec<CheckpointEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &StBavaConfig,
    store: &ParamStore<f32>,
    adam: &AdamState<f32>,
    epoch: usize,
) -> Result<()> {
    let mut blob = Vec::new();
    let mut entries = Vec::new();
    let mut push = |name: String, kind: &str, dims: &[usize], data: &[f32], blob: &mut Vec<u8>| -> Result<()> {
        let t = StbtTensor {
            dims: dims.to_vec(),
            data: crate::stbt::StbtData::F32(data.to_vec()),
        };
        let bytes = encode_tensor(&t)?;
        entries.push(CheckpointEntry { name, kind: kind.to_string(), offset: blob.len(), len: bytes.len() });
        blob.extend_from_slice(&bytes);
        Ok(())
    };
    for (id, e) in store.iter() {
        push(e.name.clone(), "weight", e.tensor.dims(), e.tensor.data(), &mut blob)?;
        if e.trainable {
            push(e.name.clone(), "adam_m", e.tensor.dims(), &adam.m[id.0], &mut blob)?;
            push(e.name.clone(), "adam_v", e.tensor.dims(), &adam.v[id.0], &mut blob)?;
        }
    }
    let header = CheckpointHeader {
        version: 1,
        config: cfg.clone(),
        epoch,
        adam_t: adam.t,
        entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(4 + header_json.len() + blob.len());
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&blob);
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub struct LoadedCheckpoint {
    pub cfg: StBavaConfig,
    pub epoch: usize,
    pub model: Model,
    pub store: ParamStore<f32>,
    pub adam: AdamState<f32>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 4 {
        return Err(Error::Format { field: "header", detail: "checkpoint shorter than header length".into() });
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + hlen {
        return Err(Error::Format { field: "header", detail: "truncated checkpoint header".into() });
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[4..4 + hlen])?;
    if header.version != 1 {
        return Err(Error::Format {
            field: "version",
            detail: format!("unsupported checkpoint version {}", header.version),
        });
    }
    let blob = &bytes[4 + hlen..];
    let (model, mut store) = Model::build::<f32>(&header.config)?;
    let mut adam = AdamState::new(&store);
    adam.t = header.adam_t;
    for entry in &header.entries {
        if entry.offset + entry.len > blob.len() {
            return Err(Error::Format {
                field: "payload",
                detail: format!("entry `{}` extends past end of file", entry.name),
            });
        }
        let (tensor, _) = decode_tensor(&blob[entry.offset..entry.offset + entry.len])?;
        let tensor = tensor.to_f32()?;
        match entry.kind.as_str() {
            "weight" => store.load_named(&entry.name, tensor)?,
            kind @ ("adam_m" | "adam_v") => {
                let (id, _) = store
                    .iter()
                    .find(|(_, e)| e.name == entry.name)
                    .ok_or_else(|| Error::Validation(format!("unknown parameter `{}`", entry.name)))?;
                let buf = tensor.data().to_vec();
                if kind == "adam_m" {
                    adam.m[id.0] = buf;
                } else {
                    adam.v[id.0] = buf;
                }
            }
            other => {
                return Err(Error::Format {
                    field: "entries",
                    detail: format!("unknown entry kind `{other}`"),
                })
            }
        }
    }
    Ok(LoadedCheckpoint { cfg: header.config, epoch: header.epoch, model, store, adam })
}

// ── Evaluation ───────────────────────────────────────────────────────

/// Forward pass over clips, thresholded predictions, and a metrics report.
pub fn evaluate(
    model: &Model,
    store: &ParamStore<f32>,
    items: &[(String, ClipData<f32>)],
    threshold: f64,
    split: &str,
) -> Result<EvalReport> {
    let results: Vec<Result<(String, Tensor<f32>, Tensor<f32>)>> = items
        .par_iter()
        .map(|(id, clip)| {
            let mut tape = Tape::new();
            let out = forward_clip(model, store, &mut tape, clip, true)?;
            let pred = binarize(&sigmoid(&tape.tensor(out.logits)), threshold);
            Ok((id.clone(), pred, clip.masks.clone()))
        })
        .collect();
    let mut per_clip = Vec::with_capacity(results.len());
    for r in results {
        per_clip.push(r?);
    }
    assemble_report(per_clip, threshold, split)
}

// ── Training loop ────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub val_miou: f64,
    pub val_fscore: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_miou: f64,
    pub final_train_loss: f64,
    pub checkpoint: String,
    pub trainable_params: usize,
    pub total_params: usize,
    pub trainable_fraction: f64,
    pub log: String,
}

fn manifest_cfg(cfg: &StBavaConfig, manifest: &Manifest) -> StBavaConfig {
    StBavaConfig {
        frames: manifest.frames,
        image_size: manifest.image_size[0],
        spec_h: manifest.spec_size[0],
        spec_w: manifest.spec_size[1],
        ..cfg.clone()
    }
}

/// Deterministic training run over a dataset directory; returns the summary
/// after writing `checkpoint.stbk` (best validation mIoU) and
/// `train_log.jsonl` into `out_dir`.
pub fn train(cfg: &StBavaConfig, data_dir: &Path, out_dir: &Path) -> Result<TrainSummary> {
    let manifest = crate::synth::load_manifest(data_dir)?;
    let cfg = manifest_cfg(cfg, &manifest);
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;

    let load = |split: Split| -> Result<Vec<ClipData<f32>>> {
        Ok(load_split(data_dir, &manifest, split)?.iter().map(|c| c.convert::<f32>()).collect())
    };
    let train_clips = load(Split::Train)?;
    let val_clips: Vec<(String, ClipData<f32>)> = manifest
        .clips
        .iter()
        .filter(|c| c.split == Split::Val)
        .map(|c| Ok((c.id.clone(), crate::synth::load_clip(data_dir, c)?.convert::<f32>())))
        .collect::<Result<_>>()?;
    if train_clips.is_empty() {
        return Err(Error::Config("dataset has no training clips".into()));
    }

    let (model, mut store) = Model::build::<f32>(&cfg)?;
    let mut adam = AdamState::new(&store);

    let frozen_snapshot: Vec<(String, Vec<f32>)> = store
        .iter()
        .filter(|(_, e)| !e.trainable)
        .map(|(_, e)| (e.name.clone(), e.tensor.data().to_vec()))
        .collect();

    let joint_start = if cfg.two_phase { two_phase_joint_start(cfg.epochs) } else { 0 };

    let ckpt_path = out_dir.join("checkpoint.stbk");
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file =
        fs::File::create(&log_path).map_err(|e| Error::io(log_path.display().to_string(), e))?;

    let mut best_val = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut last_loss = f64::NAN;

    for epoch in 0..cfg.epochs {
        let use_adapters = epoch >= joint_start;
        let mut order: Vec<usize> = (0..train_clips.len()).collect();
        SplitMix64::stream(cfg.seed, 0xEB0C ^ epoch as u64).shuffle(&mut order);

        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch) {
            store.zero_grads();
            // per-clip forward/backward in parallel; reduction below is in
            // clip-index order so the result is thread-count independent
            let results: Vec<Result<(f64, Vec<(ParamId, Vec<f32>)>)>> = batch
                .par_iter()
                .map(|&idx| {
                    let mut tape = Tape::new();
                    let out = forward_clip(&model, &store, &mut tape, &train_clips[idx], use_adapters)?;
                    let loss = tape.value(out.loss)[0] as f64;
                    tape.backward(out.loss)?;
                    let grads = tape
                        .bindings()
                        .iter()
                        .filter_map(|&(pid, nid)| tape.grad(nid).map(|g| (pid, g.to_vec())))
                        .collect();
                    Ok((loss, grads))
                })
                .collect();

            let mut active: Vec<ParamId> = Vec::new();
            for r in results {
                let (loss, grads) = r?;
                epoch_loss += loss;
                for (pid, g) in grads {
                    if !store.entry(pid).trainable {
                        continue;
                    }
                    let slot = store.entry_mut(pid).tensor.grad_mut();
                    for (s, v) in slot.iter_mut().zip(&g) {
                        *s += *v;
                    }
                    if !active.contains(&pid) {
                        active.push(pid);
                    }
                }
            }
            let inv = 1.0 / batch.len() as f32;
            for &pid in &active {
                if let Some(g) = store.entry_mut(pid).tensor.grad.as_mut() {
                    for x in g.iter_mut() {
                        *x *= inv;
                    }
                }
            }
            clip_grad_norm(&mut store, &active, GRAD_CLIP_NORM);
            adam_step(&mut store, &mut adam, &active, cfg.lr);
        }
        last_loss = epoch_loss / train_clips.len() as f64;

        let val = evaluate(&model, &store, &val_clips, cfg.threshold, "val")?;
        let line = EpochLog { epoch, loss: last_loss, val_miou: val.miou, val_fscore: val.fscore };
        let json = serde_json::to_string(&line)?;
        writeln!(log_file, "{json}").map_err(|e| Error::io(log_path.display().to_string(), e))?;
        eprintln!("epoch {epoch}: loss {:.5} val mIoU {:.4} F {:.4}", last_loss, val.miou, val.fscore);

        if val.miou > best_val {
            best_val = val.miou;
            best_epoch = epoch;
            save_checkpoint(&ckpt_path, &cfg, &store, &adam, epoch)?;
        }
    }

    // frozen parameters must be bit-identical after the run
    for (name, before) in &frozen_snapshot {
        let after = store.by_name(name).expect("frozen entry").tensor.data();
        if before != after {
            return Err(Error::Validation(format!("frozen parameter `{name}` changed during training")));
        }
    }

    let trainable = store.trainable_params();
    let total = store.total_params();
    eprintln!(
        "trainable parameters: {trainable} of {total} ({:.2}%)",
        100.0 * trainable as f64 / total as f64
    );
    Ok(TrainSummary {
        epochs: cfg.epochs,
        best_epoch,
        best_val_miou: best_val,
        final_train_loss: last_loss,
        checkpoint: ckpt_path.display().to_string(),
        trainable_params: trainable,
        total_params: total,
        trainable_fraction: trainable as f64 / total as f64,
        log: log_path.display().to_string(),
    })
}

/// Evaluation entry point used by the CLI: loads a checkpoint and a dataset
/// split, runs the model, and assembles the report.
pub fn evaluate_checkpoint(ckpt: &Path, data_dir: &Path, split: Split, threshold: f64) -> Result<EvalReport> {
    let loaded = load_checkpoint(ckpt)?;
    let manifest = crate::synth::load_manifest(data_dir)?;
    let items: Vec<(String, ClipData<f32>)> = manifest
        .clips
        .iter()
        .filter(|c| c.split == split)
        .map(|c| Ok((c.id.clone(), crate::synth::load_clip(data_dir, c)?.convert::<f32>())))
        .collect::<Result<_>>()?;
    if items.is_empty() {
        return Err(Error::Config(format!("no clips in split {split:?}")));
    }
    let split_name = match split {
        Split::Train => "train",
        Split::Val => "val",
        Split::Test => "test",
    };
    evaluate(&loaded.model, &loaded.store, &items, threshold, split_name)
}

pub fn checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoint.stbk")
}

/// First epoch of the joint phase under the staged schedule: everything
/// before it trains without adapters; the joint phase lasts at most
/// [`TWO_PHASE_JOINT_EPOCHS`].
pub fn two_phase_joint_start(epochs: usize) -> usize {
    epochs.saturating_sub(TWO_PHASE_JOINT_EPOCHS)
}
