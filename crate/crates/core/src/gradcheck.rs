//! Central-difference gradient oracle.
//!
//! The oracle never looks at the reverse-mode tape: it re-evaluates the
//! scalar objective at perturbed parameter values, in 64-bit precision, and
//! reports `(f(x+h) - f(x-h)) / 2h` per sampled coordinate. Comparisons
//! against tape gradients happen in the callers.

use serde::Serialize;

use crate::config::StBavaConfig;
use crate::error::{Error, Result};
use crate::model::{forward_clip, Model};
use crate::params::{ParamId, ParamStore};
use crate::rng::SplitMix64;
use crate::synth::{generate_clip, Mode};
use crate::tape::Tape;

pub const DEFAULT_H: f64 = 1e-4;

/// Relative error with a unit floor: |a-b| / max(1, |a|, |b|).
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1.0_f64.max(a.abs()).max(b.abs())
}

/// Central-difference estimates for up to `max_coords` coordinates of each
/// listed parameter (all coordinates when the tensor is small enough).
/// Coordinate choice is deterministic in `seed`.
///
/// `f` must be a deterministic scalar function of the store contents.
pub fn finite_diff_grad<F>(
    store: &mut ParamStore<f64>,
    ids: &[ParamId],
    mut f: F,
    h: f64,
    max_coords: usize,
    seed: u64,
) -> Result<Vec<(ParamId, Vec<(usize, f64)>)>>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let mut out = Vec::with_capacity(ids.len());
    for (k, &id) in ids.iter().enumerate() {
        let numel = store.tensor(id).numel();
        let coords = sample_coords(numel, max_coords, SplitMix64::stream(seed, k as u64));
        let mut estimates = Vec::with_capacity(coords.len());
        for coord in coords {
            let original = store.tensor(id).data()[coord];
            store.entry_mut(id).tensor.data_mut()[coord] = original + h;
            let fp = eval_finite(&mut f, store, id)?;
            store.entry_mut(id).tensor.data_mut()[coord] = original - h;
            let fm = eval_finite(&mut f, store, id)?;
            store.entry_mut(id).tensor.data_mut()[coord] = original;
            estimates.push((coord, (fp - fm) / (2.0 * h)));
        }
        out.push((id, estimates));
    }
    Ok(out)
}

fn eval_finite<F>(f: &mut F, store: &ParamStore<f64>, id: ParamId) -> Result<f64>
where
    F: FnMut(&ParamStore<f64>) -> Result<f64>,
{
    let v = f(store)?;
    if !v.is_finite() {
        return Err(Error::Oracle { param: store.entry(id).name.clone() });
    }
    Ok(v)
}

fn sample_coords(numel: usize, max_coords: usize, mut rng: SplitMix64) -> Vec<usize> {
    if numel <= max_coords {
        return (0..numel).collect();
    }
    let mut chosen = Vec::with_capacity(max_coords);
    while chosen.len() < max_coords {
        let c = rng.below(numel);
        if !chosen.contains(&c) {
            chosen.push(c);
        }
    }
    chosen.sort_unstable();
    chosen
}

#[derive(Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub pass: bool,
    pub tol: f64,
    pub coords_checked: usize,
    pub tensors_checked: usize,
    pub worst_param: String,
    pub worst_coord: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub elapsed_sec: f64,
}

/// Full-pipeline gradient check: every trainable tensor of a reduced but
/// fully-featured model, sampled coordinates, reverse mode vs central
/// differences at 64-bit precision.
pub fn pipeline_gradcheck(cfg: &StBavaConfig, tol: f64, samples: usize) -> Result<GradcheckReport> {
    cfg.validate()?;
    let started = std::time::Instant::now();
    let (model, mut store) = Model::build::<f64>(cfg)?;
    let clip = generate_clip(Mode::Single, cfg.seed, cfg)?;
    let clip64 = clip.convert::<f64>();

    // Reverse-mode reference gradients.
    store.zero_grads();
    let mut tape = Tape::new();
    let out = forward_clip(&model, &store, &mut tape, &clip64, true)?;
    tape.backward(out.loss)?;
    tape.apply_param_grads(&mut store);

    let ids: Vec<ParamId> = store.iter().filter(|(_, e)| e.trainable).map(|(id, _)| id).collect();
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.tensor(id).grad.clone().unwrap_or_else(|| vec![0.0; store.tensor(id).numel()]))
        .collect();

    let model_ref = &model;
    let clip_ref = &clip64;
    let estimates = finite_diff_grad(
        &mut store,
        &ids,
        |s| {
            let mut t = Tape::new();
            let o = forward_clip(model_ref, s, &mut t, clip_ref, true)?;
            Ok(t.value(o.loss)[0])
        },
        DEFAULT_H,
        samples,
        cfg.seed,
    )?;

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        pass: true,
        tol,
        coords_checked: 0,
        tensors_checked: ids.len(),
        worst_param: String::new(),
        worst_coord: 0,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        elapsed_sec: 0.0,
    };
    for ((id, coords), grads) in estimates.iter().zip(&analytic) {
        for &(coord, numeric) in coords {
            let a = grads[coord];
            let e = rel_err(a, numeric);
            report.coords_checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst_param = store.entry(*id).name.clone();
                report.worst_coord = coord;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    report.elapsed_sec = started.elapsed().as_secs_f64();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn quadratic_gradient() {
        // f(theta) = theta^2 at theta = 3 -> derivative 6
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.add("theta", Tensor::scalar(3.0), true);
        let est = finite_diff_grad(
            &mut store,
            &[id],
            |s| Ok(s.tensor(id).data()[0] * s.tensor(id).data()[0]),
            DEFAULT_H,
            32,
            0,
        )
        .unwrap();
        let (_, coords) = &est[0];
        assert_eq!(coords.len(), 1);
        assert!((coords[0].1 - 6.0).abs() <= 1e-6, "got {}", coords[0].1);
    }

    #[test]
    fn softmax_sum_is_conserved() {
        // f = sum(softmax(x)) is constant (= number of slices), so the
        // numeric gradient vanishes everywhere.
        let mut store: ParamStore<f64> = ParamStore::new();
        let mut rng = SplitMix64::new(5);
        let id = store.add("x", Tensor::uniform(&[4, 6], 2.0, &mut rng), true);
        let est = finite_diff_grad(
            &mut store,
            &[id],
            |s| {
                let mut t = Tape::new();
                let x = t.leaf(s.tensor(id), true)?;
                let sm = t.softmax_axis(x, 1, 1.0)?;
                let total = t.sum_all(sm)?;
                Ok(t.value(total)[0])
            },
            DEFAULT_H,
            24,
            0,
        )
        .unwrap();
        for &(_, g) in &est[0].1 {
            assert!(g.abs() <= 1e-7, "softmax sum gradient should vanish, got {g}");
        }
    }

    #[test]
    fn oracle_reports_nonfinite_objective() {
        let mut store: ParamStore<f64> = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0), true);
        let err = finite_diff_grad(&mut store, &[id], |_| Ok(f64::NAN), DEFAULT_H, 8, 0).unwrap_err();
        match err {
            Error::Oracle { param } => assert_eq!(param, "w"),
            other => panic!("expected oracle error, got {other}"),
        }
    }

    #[test]
    fn coordinate_sampling_is_deterministic_and_distinct() {
        let a = sample_coords(1000, 32, SplitMix64::stream(7, 0));
        let b = sample_coords(1000, 32, SplitMix64::stream(7, 0));
        assert_eq!(a, b);
        assert_eq!(a.len(), 32);
        let mut dedup = a.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 32);
        assert_eq!(sample_coords(10, 32, SplitMix64::stream(7, 1)), (0..10).collect::<Vec<_>>());
    }
}
