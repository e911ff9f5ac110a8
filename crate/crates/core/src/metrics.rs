//! Tracking metrics and the evaluation protocol.
//!
//! Accuracy is quoted as the fraction of labeled frames whose predicted
//! centroid lands within 5, 10, or 15 pixels of the ground truth on a
//! 320x320 reference grid (inclusive thresholds), plus a mean normalized
//! distance that is grid-independent. Evaluation unrolls each sequence from
//! zero state across every frame — labeled or not — so the recurrent models
//! are measured on exactly the state they would have online.

use crate::confidence::{compute_roi, event_density, split_active, ConfidenceParams};
use crate::event::FramedSequence;
use crate::model::{Model, ModelError};
use crate::seed::{rng_for, tag};

/// Reference grid for pixel-threshold metrics.
pub const EVAL_GRID: usize = 320;

/// Euclidean distance between two normalized centroids on a pixel grid.
pub fn pixel_distance(
    pred: (f64, f64),
    truth: (f64, f64),
    grid_w: usize,
    grid_h: usize,
) -> f64 {
    let dx = (pred.0 - truth.0) * grid_w as f64;
    let dy = (pred.1 - truth.1) * grid_h as f64;
    (dx * dx + dy * dy).sqrt()
}

/// Euclidean distance in normalized units; ranges over [0, sqrt(2)].
pub fn norm_distance(pred: (f64, f64), truth: (f64, f64)) -> f64 {
    let dx = pred.0 - truth.0;
    let dy = pred.1 - truth.1;
    (dx * dx + dy * dy).sqrt()
}

/// One labeled frame's evaluation record.
#[derive(Debug, Clone)]
pub struct FrameEval {
    pub seq: usize,
    pub frame: usize,
    /// Frame position within its sequence, in [0, 1).
    pub pos: f64,
    /// Predicted centroid, normalized.
    pub pred: (f64, f64),
    /// Ground-truth centroid, normalized.
    pub truth: (f64, f64),
    /// Distance to ground truth on the reference grid, in pixels.
    pub dist_px: f64,
    pub norm: f64,
    /// Window sat entirely inside a fixation segment.
    pub fixation: bool,
    pub alpha: Option<f64>,
    /// Event density around the label (default ROI scaled to the sensor) —
    /// the label-side signal-quality score, for density-vs-hit analysis.
    pub density: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub n: usize,
    pub p5: f64,
    pub p10: f64,
    pub p15: f64,
    pub mean_norm: f64,
    pub mean_alpha: Option<f64>,
}

impl EvalSummary {
    pub fn empty() -> Self {
        EvalSummary { n: 0, p5: 0.0, p10: 0.0, p15: 0.0, mean_norm: 0.0, mean_alpha: None }
    }

    /// Comma-separated `n,p5,p10,p15,mean_norm` with full f64 precision.
    pub fn csv_fields(&self) -> String {
        format!("{},{},{},{},{}", self.n, self.p5, self.p10, self.p15, self.mean_norm)
    }
}

pub fn summarize<'a>(evals: impl IntoIterator<Item = &'a FrameEval>) -> EvalSummary {
    summarize_impl(evals, None)
}

/// Summary with the pixel thresholds applied on a `grid`-square raster
/// instead of the reference one; distances are recomputed from the stored
/// centroids, so the P-metrics are exact at any grid.
pub fn summarize_at<'a>(
    evals: impl IntoIterator<Item = &'a FrameEval>,
    grid: usize,
) -> EvalSummary {
    summarize_impl(evals, Some(grid))
}

fn summarize_impl<'a>(
    evals: impl IntoIterator<Item = &'a FrameEval>,
    grid: Option<usize>,
) -> EvalSummary {
    let mut n = 0usize;
    let mut within = [0usize; 3];
    let mut sum_norm = 0.0;
    let mut sum_alpha = 0.0;
    let mut n_alpha = 0usize;
    for e in evals {
        n += 1;
        let d = match grid {
            None => e.dist_px,
            Some(g) => pixel_distance(e.pred, e.truth, g, g),
        };
        for (slot, k) in within.iter_mut().zip([5.0, 10.0, 15.0]) {
            if d <= k {
                *slot += 1;
            }
        }
        sum_norm += e.norm;
        if let Some(a) = e.alpha {
            sum_alpha += a;
            n_alpha += 1;
        }
    }
    if n == 0 {
        return EvalSummary::empty();
    }
    EvalSummary {
        n,
        p5: within[0] as f64 / n as f64,
        p10: within[1] as f64 / n as f64,
        p15: within[2] as f64 / n as f64,
        mean_norm: sum_norm / n as f64,
        mean_alpha: (n_alpha > 0).then(|| sum_alpha / n_alpha as f64),
    }
}

/// Unroll `model` over one framed sequence from zero state and record every
/// labeled frame. `seq_idx` keys the sequence's private random stream (only
/// used when the model evaluates with stochastic sampling).
pub fn evaluate_sequence(
    model: &Model,
    fs: &FramedSequence,
    seq_idx: usize,
    seed: u64,
) -> Result<Vec<FrameEval>, ModelError> {
    let mut rng = rng_for(seed, &[tag::EVAL, seq_idx as u64]);
    let mut carried = model.zero_carried();
    let mut out = Vec::new();
    let total = fs.frames.len().max(1);
    for (i, frame) in fs.frames.iter().enumerate() {
        let (pred, alpha, next) =
            model.infer_frame(frame, &carried, model.cfg.eval_sampling, &mut rng)?;
        carried = next;
        if let Some(lbl) = &fs.labels[i] {
            let truth = (lbl.cx, lbl.cy);
            let p = ConfidenceParams::default().scaled_for_sensor(frame.width, frame.height);
            let roi = compute_roi(lbl.cx, lbl.cy, frame.width, frame.height, p.roi_h, p.roi_w);
            let (inside, _) = split_active(frame, &roi);
            out.push(FrameEval {
                seq: seq_idx,
                frame: i,
                pos: i as f64 / total as f64,
                pred,
                truth,
                dist_px: pixel_distance(pred, truth, EVAL_GRID, EVAL_GRID),
                norm: norm_distance(pred, truth),
                fixation: fs.fixation[i],
                alpha,
                density: event_density(inside, p.roi_h, p.roi_w, p.tau),
            });
        }
    }
    Ok(out)
}

/// Evaluate a set of sequences; `pairs` carries (sequence index, frames).
pub fn evaluate(
    model: &Model,
    pairs: &[(usize, &FramedSequence)],
    seed: u64,
) -> Result<Vec<FrameEval>, ModelError> {
    let mut all = Vec::new();
    for &(idx, fs) in pairs {
        all.extend(evaluate_sequence(model, fs, idx, seed)?);
    }
    Ok(all)
}
