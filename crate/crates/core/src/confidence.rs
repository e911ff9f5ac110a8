//! Per-frame confidence labels for the observation stream.
//!
//! A frame earns trust two ways: its active pixels concentrate inside a
//! region of interest around the true pupil center (signal-to-noise), and
//! that region is densely lit at all (event density). The label blends both:
//!
//!   snr     = sigmoid(inside / outside)            over active pixel counts
//!   density = clip(inside / (roi_h * roi_w * tau), 0, 1)
//!   alpha   = beta * snr + (1 - beta) * density
//!
//! Conventions that make the label total: an empty ROI gives snr = 0.5
//! (zero ratio), a lit ROI with silent surroundings gives snr = 1.0, and the
//! density denominator always uses the configured ROI size even when the ROI
//! is clipped at the sensor edge. The density division runs `inside / area /
//! tau` so a count exactly at the clip threshold lands on 1.0 despite `tau`
//! being inexact in binary.

use crate::event::{EventFrame, FramedSequence};

/// Reference sensor the default ROI is sized for.
pub const REFERENCE_WIDTH: usize = 160;
pub const REFERENCE_HEIGHT: usize = 120;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConfidenceParams {
    pub beta: f64,
    pub tau: f64,
    pub roi_h: usize,
    pub roi_w: usize,
}

impl Default for ConfidenceParams {
    fn default() -> Self {
        ConfidenceParams { beta: 0.1, tau: 0.1, roi_h: 40, roi_w: 70 }
    }
}

impl ConfidenceParams {
    /// Scale the ROI proportionally from the reference sensor to `w x h`.
    pub fn scaled_for_sensor(&self, width: usize, height: usize) -> Self {
        let roi_h = ((self.roi_h * height) as f64 / REFERENCE_HEIGHT as f64).round() as usize;
        let roi_w = ((self.roi_w * width) as f64 / REFERENCE_WIDTH as f64).round() as usize;
        ConfidenceParams { roi_h: roi_h.max(1), roi_w: roi_w.max(1), ..*self }
    }
}

/// Clipped half-open pixel rectangle: rows `top..bottom`, cols `left..right`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Roi {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Roi {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        y >= self.top && y < self.bottom && x >= self.left && x < self.right
    }
}

/// ROI centered on a normalized label, rounded to pixels, clipped to the
/// sensor. The configured size is preserved unless the sensor edge cuts it.
pub fn compute_roi(
    cx: f64,
    cy: f64,
    width: usize,
    height: usize,
    roi_h: usize,
    roi_w: usize,
) -> Roi {
    let top_raw = (cy * height as f64 - roi_h as f64 / 2.0).round() as i64;
    let left_raw = (cx * width as f64 - roi_w as f64 / 2.0).round() as i64;
    let top = top_raw.clamp(0, height as i64) as usize;
    let bottom = (top_raw + roi_h as i64).clamp(0, height as i64) as usize;
    let left = left_raw.clamp(0, width as i64) as usize;
    let right = (left_raw + roi_w as i64).clamp(0, width as i64) as usize;
    Roi { top, bottom, left, right }
}

/// Active-pixel counts inside and outside the ROI.
pub fn split_active(frame: &EventFrame, roi: &Roi) -> (u64, u64) {
    let mut inside = 0u64;
    let mut total = 0u64;
    for y in 0..frame.height {
        for x in 0..frame.width {
            if frame.is_active(x, y) {
                total += 1;
                if roi.contains(x, y) {
                    inside += 1;
                }
            }
        }
    }
    (inside, total - inside)
}

pub fn snr(inside: u64, outside: u64) -> f64 {
    if inside == 0 {
        0.5
    } else if outside == 0 {
        1.0
    } else {
        crate::tape::sigmoid_scalar(inside as f64 / outside as f64)
    }
}

pub fn event_density(inside: u64, roi_h: usize, roi_w: usize, tau: f64) -> f64 {
    let area = (roi_h * roi_w) as f64;
    (inside as f64 / area / tau).min(1.0)
}

/// The two ingredients of a confidence label plus their blend.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlphaParts {
    pub snr: f64,
    pub ed: f64,
    pub alpha: f64,
}

/// Confidence label for one frame, decomposed into its SNR and event-density
/// terms (`alpha = beta * snr + (1 - beta) * ed`).
pub fn alpha_parts(frame: &EventFrame, cx: f64, cy: f64, p: &ConfidenceParams) -> AlphaParts {
    let roi = compute_roi(cx, cy, frame.width, frame.height, p.roi_h, p.roi_w);
    let (inside, outside) = split_active(frame, &roi);
    let s = snr(inside, outside);
    let d = event_density(inside, p.roi_h, p.roi_w, p.tau);
    AlphaParts { snr: s, ed: d, alpha: p.beta * s + (1.0 - p.beta) * d }
}

/// Confidence label for one frame given its attached pupil-center label.
pub fn alpha_label(frame: &EventFrame, cx: f64, cy: f64, p: &ConfidenceParams) -> f64 {
    alpha_parts(frame, cx, cy, p).alpha
}

/// Label every frame that has an attached pupil-center label.
pub fn label_sequence(framed: &FramedSequence, p: &ConfidenceParams) -> Vec<Option<f64>> {
    framed
        .frames
        .iter()
        .zip(&framed.labels)
        .map(|(frame, label)| label.map(|l| alpha_label(frame, l.cx, l.cy, p)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::{build_frames, Event};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent reimplementation: per-pixel double loop, membership from
    /// scratch, no shared helpers beyond the formula text above.
    fn oracle_alpha(frame: &EventFrame, cx: f64, cy: f64, p: &ConfidenceParams) -> f64 {
        let h = frame.height as f64;
        let w = frame.width as f64;
        let top = (cy * h - p.roi_h as f64 / 2.0).round() as i64;
        let left = (cx * w - p.roi_w as f64 / 2.0).round() as i64;
        let bottom = top + p.roi_h as i64;
        let right = left + p.roi_w as i64;

        let mut inside = 0u64;
        let mut outside = 0u64;
        for y in 0..frame.height {
            for x in 0..frame.width {
                if frame.count_at(x, y) == 0 {
                    continue;
                }
                let yi = y as i64;
                let xi = x as i64;
                if yi >= top && yi < bottom && xi >= left && xi < right {
                    inside += 1;
                } else {
                    outside += 1;
                }
            }
        }

        let s = if inside == 0 {
            0.5
        } else if outside == 0 {
            1.0
        } else {
            let r = inside as f64 / outside as f64;
            1.0 / (1.0 + (-r).exp())
        };
        let d = (inside as f64 / ((p.roi_h * p.roi_w) as f64) / p.tau).min(1.0);
        p.beta * s + (1.0 - p.beta) * d
    }

    fn random_frame(rng: &mut ChaCha8Rng, width: usize, height: usize, n_events: usize) -> EventFrame {
        let mut events: Vec<Event> = (0..n_events)
            .map(|i| Event {
                t_us: i as u64,
                x: rng.random_range(0..width) as u16,
                y: rng.random_range(0..height) as u16,
                polarity: if rng.random::<bool>() { 1 } else { -1 },
            })
            .collect();
        if events.is_empty() {
            // build_frames needs at least one event; synthesize an empty one.
            return EventFrame::empty(width, height, 0, 1000);
        }
        events.sort_by_key(|e| e.t_us);
        build_frames(&events, width, height, 1_000_000).unwrap().remove(0)
    }

    #[test]
    fn matches_brute_force_oracle_bit_for_bit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let sensors = [(160usize, 120usize), (80, 60), (32, 24)];
        for trial in 0..100 {
            let (w, h) = sensors[trial % sensors.len()];
            let n = rng.random_range(0..400);
            let frame = random_frame(&mut rng, w, h, n);
            let cx: f64 = rng.random();
            let cy: f64 = rng.random();
            let p = ConfidenceParams::default().scaled_for_sensor(w, h);
            let got = alpha_label(&frame, cx, cy, &p);
            let want = oracle_alpha(&frame, cx, cy, &p);
            assert_eq!(
                got.to_bits(),
                want.to_bits(),
                "trial {trial}: {got} vs oracle {want}"
            );
        }
    }

    #[test]
    fn centered_roi_on_reference_sensor_matches_hand_bounds() {
        let roi = compute_roi(0.5, 0.5, 160, 120, 40, 70);
        assert_eq!(roi, Roi { top: 40, bottom: 80, left: 45, right: 115 });
    }

    #[test]
    fn corner_label_clips_roi_but_not_density_denominator() {
        let roi = compute_roi(0.0, 0.0, 160, 120, 40, 70);
        assert_eq!(roi, Roi { top: 0, bottom: 20, left: 0, right: 35 });
        // Density still normalizes by the configured 40x70 area.
        let d = event_density(140, 40, 70, 0.1);
        assert_eq!(d, 0.5);
    }

    #[test]
    fn empty_frame_gets_the_floor_confidence() {
        let frame = EventFrame::empty(160, 120, 0, 1000);
        let p = ConfidenceParams::default();
        let alpha = alpha_label(&frame, 0.5, 0.5, &p);
        assert_eq!(alpha, 0.05); // beta * 0.5 + (1 - beta) * 0 at beta = 0.1
    }

    #[test]
    fn density_saturates_exactly_at_threshold_count() {
        // 280 active pixels inside a 40x70 ROI at tau = 0.1 is the clip point.
        assert_eq!(event_density(280, 40, 70, 0.1), 1.0);
        assert_eq!(event_density(350, 40, 70, 0.1), 1.0);
        assert!(event_density(279, 40, 70, 0.1) < 1.0);
    }

    #[test]
    fn snr_saturations() {
        assert_eq!(snr(0, 100), 0.5);
        assert_eq!(snr(0, 0), 0.5);
        assert_eq!(snr(50, 0), 1.0);
        let mid = snr(10, 10); // sigmoid(1)
        assert!((mid - 0.731_058_578_630_004_9).abs() < 1e-15);
    }

    #[test]
    fn beta_extremes_select_one_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let frame = random_frame(&mut rng, 80, 60, 120);
        let base = ConfidenceParams::default().scaled_for_sensor(80, 60);
        let roi = compute_roi(0.4, 0.6, 80, 60, base.roi_h, base.roi_w);
        let (inside, outside) = split_active(&frame, &roi);

        let p_snr = ConfidenceParams { beta: 1.0, ..base };
        assert_eq!(alpha_label(&frame, 0.4, 0.6, &p_snr), snr(inside, outside));

        let p_den = ConfidenceParams { beta: 0.0, ..base };
        assert_eq!(
            alpha_label(&frame, 0.4, 0.6, &p_den),
            event_density(inside, base.roi_h, base.roi_w, base.tau)
        );
    }

    #[test]
    fn roi_scales_proportionally_with_sensor() {
        let p = ConfidenceParams::default().scaled_for_sensor(80, 60);
        assert_eq!((p.roi_h, p.roi_w), (20, 35));
        let p = ConfidenceParams::default().scaled_for_sensor(320, 320);
        assert_eq!((p.roi_h, p.roi_w), (107, 140));
    }

    #[test]
    fn labels_in_unit_interval_on_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let n = rng.random_range(0..600);
            let frame = random_frame(&mut rng, 64, 48, n);
            let p = ConfidenceParams::default().scaled_for_sensor(64, 48);
            let (cx, cy) = (rng.random(), rng.random());
            let a = alpha_label(&frame, cx, cy, &p);
            assert!((0.0..=1.0).contains(&a), "alpha out of range: {a}");
        }
    }
}
