//! Command-line front end: dataset generation, training, evaluation,
//! gradient checking, and attention-map export.
//!
//! Reports go to stdout as JSON; progress and diagnostics go to stderr.
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use stbava::config::{AttnOrder, StBavaConfig};
use stbava::error::{Error, Result};
use stbava::gradcheck::pipeline_gradcheck;
use stbava::model::forward_clip;
use stbava::stbt::{write_pgm, write_tensor, StbtTensor};
use stbava::synth::{build_dataset, load_clip, load_manifest, Mode, Split};
use stbava::tape::Tape;
use stbava::tensor::Tensor;
use stbava::train::{evaluate_checkpoint, load_checkpoint, train};

#[derive(Parser)]
#[command(name = "stbava", version, about = "Audio-visual segmentation pipeline at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic audio-visual dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clips: usize,
        /// single | multi | temporal
        #[arg(long)]
        mode: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        /// Square frame side in pixels.
        #[arg(long, default_value_t = 64)]
        image_size: usize,
        /// Spectrogram size as HxW, e.g. 96x64.
        #[arg(long, default_value = "96x64")]
        spec_size: String,
    },
    /// Train on a generated dataset and keep the best-validation checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 30)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-4)]
        lr: f64,
        /// Number of cross-modal blocks L.
        #[arg(long, default_value_t = 5)]
        depth: usize,
        #[arg(long, default_value_t = 4)]
        heads: usize,
        #[arg(long, default_value_t = 64)]
        channels: usize,
        /// temporal-first | spatial-first
        #[arg(long, default_value = "temporal-first")]
        order: String,
        #[arg(long)]
        no_temporal: bool,
        #[arg(long)]
        no_bidirectional: bool,
        #[arg(long)]
        no_adapter: bool,
        #[arg(long)]
        unfreeze_encoders: bool,
        #[arg(long)]
        two_phase: bool,
        #[arg(long, default_value_t = 4)]
        batch: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// train | val | test
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
    },
    /// Compare reverse-mode gradients of the full pipeline against central
    /// differences (64-bit, reduced preset).
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Coordinates sampled per trainable tensor.
        #[arg(long, default_value_t = 32)]
        samples: usize,
    },
    /// Export the attention maps recorded for one clip.
    DumpAttn {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Clip id (e.g. clip_0003) or index into the manifest.
        #[arg(long)]
        clip: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write min-max scaled PGM images per map.
        #[arg(long)]
        pgm: bool,
    },
}

fn parse_spec_size(s: &str) -> Result<(usize, usize)> {
    let parts: Vec<&str> = s.split('x').collect();
    if parts.len() == 2 {
        if let (Ok(h), Ok(w)) = (parts[0].parse(), parts[1].parse()) {
            return Ok((h, w));
        }
    }
    Err(Error::Config(format!("spec size `{s}` is not of the form HxW")))
}

fn emit<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::GenData { out, clips, mode, seed, frames, image_size, spec_size } => {
            let mode: Mode = mode.parse()?;
            let (spec_h, spec_w) = parse_spec_size(&spec_size)?;
            let cfg = StBavaConfig { frames, image_size, spec_h, spec_w, seed, ..StBavaConfig::default() };
            let manifest = build_dataset(&out, clips, mode, seed, &cfg)?;
            emit(&manifest)?;
            Ok(true)
        }
        Command::Train {
            data,
            out,
            epochs,
            lr,
            depth,
            heads,
            channels,
            order,
            no_temporal,
            no_bidirectional,
            no_adapter,
            unfreeze_encoders,
            two_phase,
            batch,
            seed,
        } => {
            let order: AttnOrder = order.parse()?;
            let cfg = StBavaConfig {
                epochs,
                lr,
                depth,
                heads,
                channels,
                order,
                no_temporal,
                no_bidirectional,
                no_adapter,
                unfreeze_encoders,
                two_phase,
                batch,
                seed,
                ..StBavaConfig::default()
            };
            let summary = train(&cfg, &data, &out)?;
            emit(&summary)?;
            Ok(true)
        }
        Command::Eval { data, ckpt, split, threshold } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "val" => Split::Val,
                "test" => Split::Test,
                other => return Err(Error::Config(format!("unknown split `{other}`"))),
            };
            let report = evaluate_checkpoint(&ckpt, &data, split, threshold)?;
            emit(&report)?;
            Ok(true)
        }
        Command::Gradcheck { seed, tol, samples } => {
            let cfg = StBavaConfig { seed, ..StBavaConfig::gradcheck_reduced() };
            let report = pipeline_gradcheck(&cfg, tol, samples)?;
            emit(&report)?;
            Ok(report.pass)
        }
        Command::DumpAttn { ckpt, data, clip, out, pgm } => {
            dump_attn(&ckpt, &data, &clip, &out, pgm)?;
            Ok(true)
        }
    }
}

fn dump_attn(ckpt: &PathBuf, data: &PathBuf, clip: &str, out: &PathBuf, pgm: bool) -> Result<()> {
    let loaded = load_checkpoint(ckpt)?;
    let manifest = load_manifest(data)?;
    let entry = manifest
        .clips
        .iter()
        .enumerate()
        .find(|(i, c)| c.id == clip || i.to_string() == clip)
        .map(|(_, c)| c)
        .ok_or_else(|| Error::Config(format!("clip `{clip}` not found in manifest")))?;
    let clip_data = load_clip(data, entry)?.convert::<f32>();

    let mut tape = Tape::new();
    let fwd = forward_clip(&loaded.model, &loaded.store, &mut tape, &clip_data, true)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out.display().to_string(), e))?;

    let grid = loaded.cfg.grid();
    let mut written: Vec<String> = Vec::new();
    let mut save = |name: String, t: &Tensor<f32>, rows: usize, cols: usize| -> Result<()> {
        let path = out.join(format!("{name}.stbt"));
        write_tensor(&path, &StbtTensor::from_f32(t))?;
        written.push(path.display().to_string());
        if pgm {
            let p = out.join(format!("{name}.pgm"));
            write_pgm(&p, cols, rows, t.data())?;
            written.push(p.display().to_string());
        }
        Ok(())
    };

    let rec = &fwd.record;
    // spatial maps render as grid frames stacked vertically
    let t_len = rec.pre_module.dims()[0];
    save("pre_module".into(), &rec.pre_module, t_len * grid, grid)?;
    for (i, maps) in rec.blocks.iter().enumerate() {
        save(format!("block{i}_alpha_space"), &maps.alpha_space, t_len * grid, grid)?;
        if let Some(at) = &maps.alpha_time {
            let hw = at.dims()[0];
            save(format!("block{i}_alpha_time"), at, hw * t_len, t_len)?;
        }
    }
    drop(save);

    #[derive(serde::Serialize)]
    struct DumpReport {
        clip: String,
        maps: Vec<String>,
    }
    emit(&DumpReport { clip: entry.id.clone(), maps: written })
}

fn main() -> ExitCode {
    let cli = Cli::parse(); // usage errors exit with code 2
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
