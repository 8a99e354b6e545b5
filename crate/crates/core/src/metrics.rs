//! Segmentation metrics: mean IoU (Jaccard) and the weighted F-score with
//! beta^2 = 0.3, plus report assembly.
//!
//! Conventions the formulas leave open, fixed here:
//! - a frame where prediction and ground truth are both empty scores
//!   IoU = 1 and F = 1 (correctly predicting silence is a success);
//! - an empty prediction against a nonempty ground truth (or the reverse)
//!   scores 0;
//! - per-frame values are averaged within a clip, clips are averaged
//!   unweighted into the aggregate.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_BETA2: f64 = 0.3;

/// Pixel-wise threshold: probability >= threshold maps to 1.
pub fn binarize(probs: &Tensor<f32>, threshold: f64) -> Tensor<f32> {
    probs.map(|v| if v as f64 >= threshold { 1.0 } else { 0.0 })
}

/// Logistic map from logits to probabilities.
pub fn sigmoid(logits: &Tensor<f32>) -> Tensor<f32> {
    probs_from(logits)
}

fn probs_from(logits: &Tensor<f32>) -> Tensor<f32> {
    logits.map(|v| 1.0 / (1.0 + (-v).exp()))
}

fn validate_binary_pair(op: &'static str, pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<()> {
    if pred.dims() != gt.dims() {
        return Err(Error::Shape {
            op,
            lhs: pred.dims().to_vec(),
            rhs: gt.dims().to_vec(),
            detail: "prediction and ground truth must have identical dims".into(),
        });
    }
    for t in [pred, gt] {
        if let Some(v) = t.data().iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(Error::Validation(format!("{op} input value {v} is not binary")));
        }
    }
    Ok(())
}

#[derive(Copy, Clone, Debug, Default)]
struct FrameCounts {
    tp: usize,
    fp: usize,
    fn_: usize,
}

fn frame_counts(pred: &[f32], gt: &[f32]) -> FrameCounts {
    let mut c = FrameCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == 1.0, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    c
}

fn frame_iou(c: FrameCounts) -> f64 {
    let union = c.tp + c.fp + c.fn_;
    if union == 0 {
        1.0
    } else {
        c.tp as f64 / union as f64
    }
}

fn frame_precision(c: FrameCounts) -> f64 {
    if c.tp + c.fp == 0 {
        if c.fn_ == 0 { 1.0 } else { 0.0 }
    } else {
        c.tp as f64 / (c.tp + c.fp) as f64
    }
}

fn frame_recall(c: FrameCounts) -> f64 {
    if c.tp + c.fn_ == 0 {
        if c.fp == 0 { 1.0 } else { 0.0 }
    } else {
        c.tp as f64 / (c.tp + c.fn_) as f64
    }
}

fn frame_fscore(c: FrameCounts, beta2: f64) -> f64 {
    if c.tp + c.fp + c.fn_ == 0 {
        return 1.0;
    }
    let p = frame_precision(c);
    let r = frame_recall(c);
    let denom = beta2 * p + r;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta2) * p * r / denom
    }
}

fn per_frame<'a>(
    t: &'a Tensor<f32>,
) -> impl Iterator<Item = &'a [f32]> {
    let frame = t.numel() / t.dims()[0];
    t.data().chunks(frame)
}

/// Per-frame IoU list for a `[T, H, W]` binary clip pair.
pub fn frame_ious(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<Vec<f64>> {
    validate_binary_pair("miou", pred, gt)?;
    Ok(per_frame(pred).zip(per_frame(gt)).map(|(p, g)| frame_iou(frame_counts(p, g))).collect())
}

/// Mean over frames of intersection-over-union.
pub fn miou(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<f64> {
    let ious = frame_ious(pred, gt)?;
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Mean over frames of the weighted F-measure
/// `(1 + b2) * P * R / (b2 * P + R)`.
pub fn fscore(pred: &Tensor<f32>, gt: &Tensor<f32>, beta2: f64) -> Result<f64> {
    validate_binary_pair("fscore", pred, gt)?;
    let vals: Vec<f64> =
        per_frame(pred).zip(per_frame(gt)).map(|(p, g)| frame_fscore(frame_counts(p, g), beta2)).collect();
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean per-frame precision / recall for a clip (same empty-frame
/// conventions as the F-score).
pub fn precision_recall(pred: &Tensor<f32>, gt: &Tensor<f32>) -> Result<(f64, f64)> {
    validate_binary_pair("precision_recall", pred, gt)?;
    let counts: Vec<FrameCounts> =
        per_frame(pred).zip(per_frame(gt)).map(|(p, g)| frame_counts(p, g)).collect();
    let n = counts.len() as f64;
    let p = counts.iter().map(|&c| frame_precision(c)).sum::<f64>() / n;
    let r = counts.iter().map(|&c| frame_recall(c)).sum::<f64>() / n;
    Ok((p, r))
}

#[derive(Clone, Debug, Serialize)]
pub struct ClipEval {
    pub id: String,
    pub miou: f64,
    pub fscore: f64,
    pub frame_ious: Vec<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalConfigEcho {
    pub split: String,
    pub threshold: f64,
    pub beta2: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub miou: f64,
    pub fscore: f64,
    pub precision: f64,
    pub recall: f64,
    pub clips: Vec<ClipEval>,
    pub config: EvalConfigEcho,
}

/// Unweighted mean over clips of per-clip metrics.
pub fn assemble_report(
    per_clip: Vec<(String, Tensor<f32>, Tensor<f32>)>,
    threshold: f64,
    split: &str,
) -> Result<EvalReport> {
    let mut clips = Vec::with_capacity(per_clip.len());
    let mut sums = (0.0, 0.0, 0.0, 0.0);
    for (id, pred, gt) in &per_clip {
        let ious = frame_ious(pred, gt)?;
        let m = ious.iter().sum::<f64>() / ious.len() as f64;
        let f = fscore(pred, gt, DEFAULT_BETA2)?;
        let (p, r) = precision_recall(pred, gt)?;
        sums.0 += m;
        sums.1 += f;
        sums.2 += p;
        sums.3 += r;
        clips.push(ClipEval { id: id.clone(), miou: m, fscore: f, frame_ious: ious });
    }
    let n = clips.len().max(1) as f64;
    Ok(EvalReport {
        miou: sums.0 / n,
        fscore: sums.1 / n,
        precision: sums.2 / n,
        recall: sums.3 / n,
        clips,
        config: EvalConfigEcho { split: split.to_string(), threshold, beta2: DEFAULT_BETA2 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn mask(dims: &[usize], ones: &[usize]) -> Tensor<f32> {
        let mut t = Tensor::zeros(dims);
        for &i in ones {
            t.data_mut()[i] = 1.0;
        }
        t
    }

    fn random_binary(dims: &[usize], seed: u64, p: f64) -> Tensor<f32> {
        let mut rng = SplitMix64::new(seed);
        Tensor::from_fn(dims, |_| if rng.bernoulli(p) { 1.0 } else { 0.0 })
    }

    /// Brute-force pixel-count oracle used to cross-check the metrics.
    fn oracle_frame(pred: &[f32], gt: &[f32], beta2: f64) -> (f64, f64) {
        let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
        for i in 0..pred.len() {
            if pred[i] == 1.0 && gt[i] == 1.0 {
                tp += 1;
            }
            if pred[i] == 1.0 && gt[i] == 0.0 {
                fp += 1;
            }
            if pred[i] == 0.0 && gt[i] == 1.0 {
                fn_ += 1;
            }
        }
        let iou = if tp + fp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fp + fn_) as f64 };
        let f = if tp + fp + fn_ == 0 {
            1.0
        } else {
            let p = if tp + fp == 0 { if fn_ == 0 { 1.0 } else { 0.0 } } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fn_ == 0 { if fp == 0 { 1.0 } else { 0.0 } } else { tp as f64 / (tp + fn_) as f64 };
            if beta2 * p + r == 0.0 { 0.0 } else { (1.0 + beta2) * p * r / (beta2 * p + r) }
        };
        (iou, f)
    }

    #[test]
    fn binarize_boundary_and_extremes() {
        let half = Tensor::<f32>::full(&[2, 2], 0.5);
        assert!(binarize(&half, 0.5).data().iter().all(|&v| v == 1.0)); // >= convention
        let zeros = Tensor::<f32>::zeros(&[2, 2]);
        assert!(binarize(&zeros, 0.5).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn binarize_matches_per_pixel_oracle() {
        let mut rng = SplitMix64::new(3);
        let probs = Tensor::<f32>::from_fn(&[8, 8], |_| rng.next_f64() as f32);
        let got = binarize(&probs, 0.37);
        for (i, &p) in probs.data().iter().enumerate() {
            let want = if p as f64 >= 0.37 { 1.0 } else { 0.0 };
            assert_eq!(got.data()[i], want);
        }
    }

    #[test]
    fn miou_identical_disjoint_half() {
        let a = mask(&[1, 4, 5], &[0, 1, 2, 3]);
        assert_eq!(miou(&a, &a).unwrap(), 1.0);
        let b = mask(&[1, 4, 5], &[10, 11]);
        assert_eq!(miou(&a, &b).unwrap(), 0.0);
        // prediction covers the left half of a 20-pixel ground truth
        let gt = mask(&[1, 4, 5], &(0..20).collect::<Vec<_>>());
        let pred = mask(&[1, 4, 5], &(0..10).collect::<Vec<_>>());
        assert_eq!(miou(&pred, &gt).unwrap(), 0.5);
    }

    #[test]
    fn empty_frame_conventions() {
        let empty = Tensor::<f32>::zeros(&[1, 3, 3]);
        let nonempty = mask(&[1, 3, 3], &[4]);
        assert_eq!(miou(&empty, &empty).unwrap(), 1.0);
        assert_eq!(fscore(&empty, &empty, DEFAULT_BETA2).unwrap(), 1.0);
        assert_eq!(miou(&empty, &nonempty).unwrap(), 0.0);
        assert_eq!(fscore(&empty, &nonempty, DEFAULT_BETA2).unwrap(), 0.0);
        assert_eq!(miou(&nonempty, &empty).unwrap(), 0.0);
        assert_eq!(fscore(&nonempty, &empty, DEFAULT_BETA2).unwrap(), 0.0);
    }

    #[test]
    fn fscore_worked_example() {
        // P = 1, R = 0.5, beta2 = 0.3 -> 1.3 * 0.5 / 0.8 = 0.8125
        // pred covers half the ground truth with no false positives
        let gt = mask(&[1, 2, 4], &[0, 1, 2, 3]);
        let pred = mask(&[1, 2, 4], &[0, 1]);
        assert!((fscore(&pred, &gt, 0.3).unwrap() - 0.8125).abs() < 1e-12);
        assert_eq!(fscore(&gt, &gt, 0.3).unwrap(), 1.0);
    }

    #[test]
    fn metrics_match_pixel_count_oracle_on_random_grids() {
        for seed in 0..200u64 {
            let pred = random_binary(&[1, 8, 8], seed * 2 + 1, 0.4);
            let gt = random_binary(&[1, 8, 8], seed * 2 + 2, 0.4);
            let (oi, of) = oracle_frame(pred.data(), gt.data(), DEFAULT_BETA2);
            assert!((miou(&pred, &gt).unwrap() - oi).abs() <= 1e-9);
            assert!((fscore(&pred, &gt, DEFAULT_BETA2).unwrap() - of).abs() <= 1e-9);
        }
    }

    #[test]
    fn pixel_permutation_invariance_and_monotonicity() {
        let mut rng = SplitMix64::new(77);
        let pred = random_binary(&[1, 6, 6], 100, 0.5);
        let gt = random_binary(&[1, 6, 6], 101, 0.5);
        let mut perm: Vec<usize> = (0..36).collect();
        rng.shuffle(&mut perm);
        let permute = |t: &Tensor<f32>| {
            Tensor::<f32>::from_fn(&[1, 6, 6], |i| t.data()[perm[i]])
        };
        let (pp, gg) = (permute(&pred), permute(&gt));
        assert!((miou(&pred, &gt).unwrap() - miou(&pp, &gg).unwrap()).abs() < 1e-12);
        assert!(
            (fscore(&pred, &gt, 0.3).unwrap() - fscore(&pp, &gg, 0.3).unwrap()).abs() < 1e-12
        );

        // adding a correct pixel never decreases the frame IoU
        if let Some(missing) = (0..36).find(|&i| gt.data()[i] == 1.0 && pred.data()[i] == 0.0) {
            let mut better = pred.clone();
            better.data_mut()[missing] = 1.0;
            assert!(miou(&better, &gt).unwrap() >= miou(&pred, &gt).unwrap());
        }
    }

    #[test]
    fn values_stay_in_unit_interval() {
        for seed in 0..50u64 {
            let pred = random_binary(&[2, 5, 5], seed, 0.3);
            let gt = random_binary(&[2, 5, 5], seed + 999, 0.6);
            for v in [
                miou(&pred, &gt).unwrap(),
                fscore(&pred, &gt, DEFAULT_BETA2).unwrap(),
            ] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn non_binary_inputs_are_rejected() {
        let bad = Tensor::<f32>::full(&[1, 2, 2], 0.5);
        let good = Tensor::<f32>::zeros(&[1, 2, 2]);
        assert!(matches!(miou(&bad, &good), Err(Error::Validation(_))));
        assert!(matches!(fscore(&good, &bad, 0.3), Err(Error::Validation(_))));
    }

    #[test]
    fn report_aggregates_unweighted() {
        let a_pred = mask(&[1, 2, 2], &[0]);
        let a_gt = mask(&[1, 2, 2], &[0]);
        let b_pred = mask(&[1, 2, 2], &[1]);
        let b_gt = mask(&[1, 2, 2], &[2]);
        let report = assemble_report(
            vec![
                ("a".into(), a_pred, a_gt),
                ("b".into(), b_pred, b_gt),
            ],
            0.5,
            "test",
        )
        .unwrap();
        assert_eq!(report.clips.len(), 2);
        assert!((report.miou - 0.5).abs() < 1e-12); // (1.0 + 0.0) / 2
        assert_eq!(report.config.split, "test");
    }
}
