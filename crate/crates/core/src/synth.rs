//! Synthetic audio-visual clip generation and the on-disk dataset layout.
//!
//! Three regimes:
//! - `single`: one object, sounding every second.
//! - `multi`: 2-3 objects with disjoint spectral signatures and independent
//!   per-second on/off schedules; silent seconds leave noise-only
//!   spectrograms and empty masks.
//! - `temporal`: two visually identical objects with the same signature and
//!   mirrored vertical velocities; exactly one sounds for the whole clip.
//!   The per-second amplitude is an affine function of the sounder's
//!   vertical position, i.e. `amp_t = amp_0 + slope * (y_t - y_0)`. A single
//!   (frame, spectrogram) pair is uninformative about which object sounds
//!   (the intercept is random and the two objects' velocity distributions
//!   are identical), while the amplitude trajectory over the clip matches
//!   exactly one object's motion. The sounder choice is an independent fair
//!   bit, so per-frame identification cannot beat chance.
//!
//! Generation is a pure function of (mode, seed, cfg); clip k of a dataset
//! uses the derived stream `clip_seed(seed, k)`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::StBavaConfig;
use crate::error::{Error, Result};
use crate::rng::{mix64, SplitMix64};
use crate::stbt::{read_tensor, write_tensor, StbtTensor};
use crate::tensor::{Element, Tensor};

pub const NOISE_LEVEL: f64 = 0.05;
const AMP_LO: f64 = 0.4;
const AMP_HI: f64 = 1.0;
/// Amplitude change per pixel of vertical displacement in temporal mode.
const AMP_SLOPE: f64 = 0.06;
/// Vertical speed magnitude shared by the mirrored pair in temporal mode.
const TEMPORAL_VY: f64 = 1.25;
const PLACEMENT_ATTEMPTS: usize = 16;

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Single,
    Multi,
    Temporal,
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Mode::Single),
            "multi" => Ok(Mode::Multi),
            "temporal" => Ok(Mode::Temporal),
            other => Err(Error::Config(format!(
                "unknown mode `{other}` (expected single, multi, or temporal)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Single => write!(f, "single"),
            Mode::Multi => write!(f, "multi"),
            Mode::Temporal => write!(f, "temporal"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ShapeKind {
    Disc { r: f64 },
    Rect { half_w: f64, half_h: f64 },
    Triangle { r: f64 },
}

impl ShapeKind {
    /// Point-in-shape test for an offset (dx, dy) from the center.
    pub fn contains(&self, dx: f64, dy: f64) -> bool {
        match *self {
            ShapeKind::Disc { r } => dx * dx + dy * dy <= r * r,
            ShapeKind::Rect { half_w, half_h } => dx.abs() <= half_w && dy.abs() <= half_h,
            ShapeKind::Triangle { r } => {
                // isoceles, apex up: (0,-r), (-0.9r, 0.8r), (0.9r, 0.8r)
                let a = (0.0, -r);
                let b = (-0.9 * r, 0.8 * r);
                let c = (0.9 * r, 0.8 * r);
                let sign = |p: (f64, f64), q: (f64, f64)| {
                    (q.0 - p.0) * (dy - p.1) - (q.1 - p.1) * (dx - p.0)
                };
                let (s1, s2, s3) = (sign(a, b), sign(b, c), sign(c, a));
                (s1 >= 0.0 && s2 >= 0.0 && s3 >= 0.0) || (s1 <= 0.0 && s2 <= 0.0 && s3 <= 0.0)
            }
        }
    }

    /// Half-size bound used for canvas-fit checks.
    pub fn extent(&self) -> f64 {
        match *self {
            ShapeKind::Disc { r } => r,
            ShapeKind::Rect { half_w, half_h } => half_w.max(half_h),
            ShapeKind::Triangle { r } => r,
        }
    }
}

#[derive(Clone, Debug)]
pub struct ObjectSpec {
    pub kind: ShapeKind,
    pub color: [f64; 3],
    /// Center at t = 0, in pixels (x, y).
    pub start: (f64, f64),
    /// Pixels per second.
    pub velocity: (f64, f64),
    /// Spectrogram frequency rows lit while the object sounds.
    pub freq_rows: Vec<usize>,
    /// Sounding at second t.
    pub schedule: Vec<bool>,
    /// Row intensity at second t (meaningful where schedule is true).
    pub amplitude: Vec<f64>,
}

impl ObjectSpec {
    pub fn center_at(&self, t: usize) -> (f64, f64) {
        (self.start.0 + self.velocity.0 * t as f64, self.start.1 + self.velocity.1 * t as f64)
    }
}

#[derive(Clone, Debug)]
pub struct ClipMeta {
    pub mode: Mode,
    pub seed: u64,
    pub objects: Vec<ObjectSpec>,
    /// Temporal mode only: index of the sounding object.
    pub sounder: Option<usize>,
}

/// One clip: T frames, T spectrograms, T ground-truth masks.
#[derive(Clone, Debug)]
pub struct AvClip {
    /// [T, 3, H, W] in [0, 1].
    pub frames: Tensor<f32>,
    /// [T, spec_h, spec_w], non-negative.
    pub specs: Tensor<f32>,
    /// [T, H, W] in {0, 1}.
    pub masks: Tensor<f32>,
    /// Present for generated clips, absent for clips loaded from disk.
    pub meta: Option<ClipMeta>,
}

/// Clip tensors widened to the model's element type.
pub struct ClipData<E: Element> {
    pub frames: Tensor<E>,
    pub specs: Tensor<E>,
    pub masks: Tensor<E>,
}

impl AvClip {
    pub fn convert<E: Element>(&self) -> ClipData<E> {
        ClipData {
            frames: self.frames.convert(),
            specs: self.specs.convert(),
            masks: self.masks.convert(),
        }
    }
}

/// Derived stream seed for clip `index` of a dataset seeded with `seed`.
pub fn clip_seed(seed: u64, index: u64) -> u64 {
    mix64(seed ^ mix64(index.wrapping_add(0x517C_C1B7_2722_0A95)))
}

struct Canvas {
    size: usize,
    frames_t: usize,
}

impl Canvas {
    fn radius_range(&self) -> (f64, f64) {
        let s = self.size as f64 / 64.0;
        ((6.0 * s).max(2.0), (14.0 * s).max(3.0))
    }

    fn fits(&self, obj_start: (f64, f64), velocity: (f64, f64), extent: f64) -> bool {
        let size = self.size as f64;
        for t in 0..self.frames_t {
            let cx = obj_start.0 + velocity.0 * t as f64;
            let cy = obj_start.1 + velocity.1 * t as f64;
            if cx - extent < 0.0 || cx + extent > size || cy - extent < 0.0 || cy + extent > size {
                return false;
            }
        }
        true
    }
}

fn draw_kind(rng: &mut SplitMix64, canvas: &Canvas) -> ShapeKind {
    let (lo, hi) = canvas.radius_range();
    match rng.below(3) {
        0 => ShapeKind::Disc { r: rng.uniform(lo, hi) },
        1 => ShapeKind::Rect { half_w: rng.uniform(lo, hi), half_h: rng.uniform(lo, hi) },
        _ => ShapeKind::Triangle { r: rng.uniform(lo, hi) },
    }
}

fn draw_color(rng: &mut SplitMix64) -> [f64; 3] {
    [rng.uniform(0.35, 1.0), rng.uniform(0.35, 1.0), rng.uniform(0.35, 1.0)]
}

/// Start + velocity with the whole trajectory on canvas; retries up to the
/// attempt budget, then errors.
fn place_free(rng: &mut SplitMix64, canvas: &Canvas, extent: f64, speed: f64) -> Result<((f64, f64), (f64, f64))> {
    let size = canvas.size as f64;
    for _ in 0..PLACEMENT_ATTEMPTS {
        let start = (rng.uniform(extent, size - extent), rng.uniform(extent, size - extent));
        let velocity = (rng.uniform(-speed, speed), rng.uniform(-speed, speed));
        if canvas.fits(start, velocity, extent) {
            return Ok((start, velocity));
        }
    }
    Err(Error::Generation(format!(
        "object with extent {extent:.1} does not fit a {}px canvas after {PLACEMENT_ATTEMPTS} attempts",
        canvas.size
    )))
}

/// Start for a fixed velocity, drawn from a velocity-independent safe box so
/// position at any frame carries no information about the velocity role.
fn place_boxed(
    rng: &mut SplitMix64,
    canvas: &Canvas,
    extent: f64,
    velocity: (f64, f64),
    vx_max: f64,
    vy_max: f64,
) -> Result<(f64, f64)> {
    let size = canvas.size as f64;
    let drift = (canvas.frames_t.saturating_sub(1)) as f64;
    let mx = extent + vx_max * drift;
    let my = extent + vy_max * drift;
    for _ in 0..PLACEMENT_ATTEMPTS {
        if mx >= size - mx || my >= size - my {
            break;
        }
        let start = (rng.uniform(mx, size - mx), rng.uniform(my, size - my));
        if canvas.fits(start, velocity, extent) {
            return Ok(start);
        }
    }
    Err(Error::Generation(format!(
        "temporal-mode object with extent {extent:.1} does not fit a {}px canvas after {PLACEMENT_ATTEMPTS} attempts",
        canvas.size
    )))
}

fn draw_rows(rng: &mut SplitMix64, spec_h: usize, used: &mut BTreeSet<usize>) -> Vec<usize> {
    let k = 3 + rng.below(3);
    let mut rows = Vec::with_capacity(k);
    while rows.len() < k {
        let r = rng.below(spec_h);
        if used.insert(r) {
            rows.push(r);
        }
    }
    rows.sort_unstable();
    rows
}

/// Deterministic clip generation under (mode, seed, cfg).
pub fn generate_clip(mode: Mode, seed: u64, cfg: &StBavaConfig) -> Result<AvClip> {
    let t_len = cfg.frames;
    let canvas = Canvas { size: cfg.image_size, frames_t: t_len };
    let mut rng = SplitMix64::stream(seed, mode as u64 + 1);
    let mut used_rows = BTreeSet::new();

    let (objects, sounder) = match mode {
        Mode::Single => {
            let kind = draw_kind(&mut rng, &canvas);
            let color = draw_color(&mut rng);
            let (start, velocity) = place_free(&mut rng, &canvas, kind.extent(), 2.0)?;
            let freq_rows = draw_rows(&mut rng, cfg.spec_h, &mut used_rows);
            let amplitude = (0..t_len).map(|_| rng.uniform(AMP_LO, AMP_HI)).collect();
            let obj = ObjectSpec {
                kind,
                color,
                start,
                velocity,
                freq_rows,
                schedule: vec![true; t_len],
                amplitude,
            };
            (vec![obj], None)
        }
        Mode::Multi => {
            let n = 2 + rng.below(2);
            let mut objects = Vec::with_capacity(n);
            for _ in 0..n {
                let kind = draw_kind(&mut rng, &canvas);
                let color = draw_color(&mut rng);
                let (start, velocity) = place_free(&mut rng, &canvas, kind.extent(), 2.0)?;
                let freq_rows = draw_rows(&mut rng, cfg.spec_h, &mut used_rows);
                let schedule: Vec<bool> = (0..t_len).map(|_| rng.bernoulli(0.65)).collect();
                let amplitude = (0..t_len).map(|_| rng.uniform(AMP_LO, AMP_HI)).collect();
                objects.push(ObjectSpec { kind, color, start, velocity, freq_rows, schedule, amplitude });
            }
            (objects, None)
        }
        Mode::Temporal => {
            let kind = draw_kind(&mut rng, &canvas);
            let color = draw_color(&mut rng);
            let vx_max = 1.5;
            let vy0 = if rng.flip() { TEMPORAL_VY } else { -TEMPORAL_VY };
            let velocities = [(rng.uniform(-vx_max, vx_max), vy0), (rng.uniform(-vx_max, vx_max), -vy0)];
            let extent = kind.extent();
            let starts = [
                place_boxed(&mut rng, &canvas, extent, velocities[0], vx_max, TEMPORAL_VY)?,
                place_boxed(&mut rng, &canvas, extent, velocities[1], vx_max, TEMPORAL_VY)?,
            ];
            let sounder = rng.below(2);
            let freq_rows = draw_rows(&mut rng, cfg.spec_h, &mut used_rows);
            // affine in the sounder's vertical position, centered on the
            // trajectory midpoint so the amplitude stays inside [0.4, 1.0]
            let amp_mid = rng.uniform(0.62, 0.78);
            let y0 = starts[sounder].1;
            let vy_s = velocities[sounder].1;
            let y_mid = y0 + vy_s * (t_len.saturating_sub(1)) as f64 / 2.0;
            let amps: Vec<f64> =
                (0..t_len).map(|t| amp_mid + AMP_SLOPE * ((y0 + vy_s * t as f64) - y_mid)).collect();

            let mut objects = Vec::with_capacity(2);
            for i in 0..2 {
                objects.push(ObjectSpec {
                    kind: kind.clone(),
                    color,
                    start: starts[i],
                    velocity: velocities[i],
                    freq_rows: freq_rows.clone(),
                    schedule: vec![i == sounder; t_len],
                    amplitude: if i == sounder { amps.clone() } else { vec![0.0; t_len] },
                });
            }
            (objects, Some(sounder))
        }
    };

    let clip = render_clip(&objects, mode, seed, sounder, cfg, &mut rng)?;
    Ok(clip)
}

fn render_clip(
    objects: &[ObjectSpec],
    mode: Mode,
    seed: u64,
    sounder: Option<usize>,
    cfg: &StBavaConfig,
    rng: &mut SplitMix64,
) -> Result<AvClip> {
    let (t_len, size) = (cfg.frames, cfg.image_size);
    let bg = [rng.uniform(0.05, 0.25), rng.uniform(0.05, 0.25), rng.uniform(0.05, 0.25)];

    let mut frames = vec![0f32; t_len * 3 * size * size];
    let mut masks = vec![0f32; t_len * size * size];
    for t in 0..t_len {
        let centers: Vec<(f64, f64)> = objects.iter().map(|o| o.center_at(t)).collect();
        for y in 0..size {
            for x in 0..size {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut color = bg;
                let mut masked = false;
                for (o, &(cx, cy)) in objects.iter().zip(&centers) {
                    if o.kind.contains(px - cx, py - cy) {
                        color = o.color; // later objects draw on top
                        if o.schedule[t] {
                            masked = true;
                        }
                    }
                }
                for c in 0..3 {
                    frames[((t * 3 + c) * size + y) * size + x] = color[c] as f32;
                }
                masks[(t * size + y) * size + x] = if masked { 1.0 } else { 0.0 };
            }
        }
    }

    let (sh, sw) = (cfg.spec_h, cfg.spec_w);
    let mut specs = vec![0f32; t_len * sh * sw];
    for t in 0..t_len {
        for o in objects {
            if !o.schedule[t] {
                continue;
            }
            let amp = o.amplitude[t] as f32;
            for &row in &o.freq_rows {
                let base = (t * sh + row) * sw;
                for v in &mut specs[base..base + sw] {
                    *v += amp;
                }
            }
        }
        // additive uniform noise on every bin
        let base = t * sh * sw;
        for v in &mut specs[base..base + sh * sw] {
            *v += rng.uniform(0.0, NOISE_LEVEL) as f32;
        }
    }

    Ok(AvClip {
        frames: Tensor::from_vec(vec![t_len, 3, size, size], frames)?,
        specs: Tensor::from_vec(vec![t_len, sh, sw], specs)?,
        masks: Tensor::from_vec(vec![t_len, size, size], masks)?,
        meta: Some(ClipMeta { mode, seed, objects: objects.to_vec(), sounder }),
    })
}

// ── Dataset on disk ─────────────────────────────────────────────────

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipPaths {
    pub frames: String,
    pub specs: String,
    pub masks: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestClip {
    pub id: String,
    pub split: Split,
    pub paths: ClipPaths,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub mode: Mode,
    pub seed: u64,
    pub frames: usize,
    pub image_size: [usize; 2],
    pub spec_size: [usize; 2],
    pub clips: Vec<ManifestClip>,
}

impl Manifest {
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.clips
            .iter()
            .enumerate()
            .filter(|(_, c)| c.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

/// 80/10/10 split by clip index.
pub fn split_for_index(index: usize, n_clips: usize) -> Split {
    let train_end = n_clips * 8 / 10;
    let val_end = n_clips * 9 / 10;
    if index < train_end {
        Split::Train
    } else if index < val_end {
        Split::Val
    } else {
        Split::Test
    }
}

/// Generates `n_clips` clips under `(mode, seed, cfg)` and writes
/// `clip_k/{frames,specs,masks}.stbt` plus `manifest.json`.
pub fn build_dataset(
    out_dir: &Path,
    n_clips: usize,
    mode: Mode,
    seed: u64,
    cfg: &StBavaConfig,
) -> Result<Manifest> {
    if n_clips == 0 {
        return Err(Error::Config("dataset must contain at least one clip".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir.display().to_string(), e))?;
    let mut clips = Vec::with_capacity(n_clips);
    for k in 0..n_clips {
        let clip = generate_clip(mode, clip_seed(seed, k as u64), cfg)?;
        let id = format!("clip_{k:04}");
        let dir = out_dir.join(&id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        write_tensor(&dir.join("frames.stbt"), &StbtTensor::from_f32(&clip.frames))?;
        write_tensor(&dir.join("specs.stbt"), &StbtTensor::from_f32(&clip.specs))?;
        write_tensor(&dir.join("masks.stbt"), &StbtTensor::from_binary(&clip.masks)?)?;
        clips.push(ManifestClip {
            split: split_for_index(k, n_clips),
            paths: ClipPaths {
                frames: format!("{id}/frames.stbt"),
                specs: format!("{id}/specs.stbt"),
                masks: format!("{id}/masks.stbt"),
            },
            id,
        });
    }
    let manifest = Manifest {
        version: 1,
        mode,
        seed,
        frames: cfg.frames,
        image_size: [cfg.image_size, cfg.image_size],
        spec_size: [cfg.spec_h, cfg.spec_w],
        clips,
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    let path = out_dir.join("manifest.json");
    fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.version != 1 {
        return Err(Error::Format {
            field: "version",
            detail: format!("unsupported manifest version {}", manifest.version),
        });
    }
    Ok(manifest)
}

pub fn load_clip(dir: &Path, entry: &ManifestClip) -> Result<AvClip> {
    let read = |rel: &str| -> Result<Tensor<f32>> { read_tensor(&dir.join(rel))?.to_f32() };
    Ok(AvClip {
        frames: read(&entry.paths.frames)?,
        specs: read(&entry.paths.specs)?,
        masks: read(&entry.paths.masks)?,
        meta: None,
    })
}

/// Convenience: load every clip of a split.
pub fn load_split(dir: &Path, manifest: &Manifest, split: Split) -> Result<Vec<AvClip>> {
    manifest
        .clips
        .iter()
        .filter(|c| c.split == split)
        .map(|c| load_clip(dir, c))
        .collect()
}

pub fn dataset_path(dir: &str) -> PathBuf {
    PathBuf::from(dir)
}
