//! Synthetic event-camera sequences of a moving pupil.
//!
//! The simulated eye alternates fixations (anchor + per-millisecond tremor)
//! with minimum-jerk saccades to random targets inside a safety margin. Every
//! millisecond tick emits boundary events on the pupil circle with expected
//! count proportional to `rate * circumference * displacement`, so motion
//! lights the boundary up and stillness goes nearly dark — which is exactly
//! the density contrast the confidence labels key on. Uniform sensor noise is
//! layered on top. Output timestamps are strictly increasing.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ConfigError, KvConfig};
use crate::event::{Event, EventSequence, Label, Segment, SegmentKind};
use crate::seed::{rng_for, tag};

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub n_sequences: usize,
    pub duration_us: u64,
    pub seed: u64,
    /// Frame window recorded in the dataset meta for downstream framing.
    pub window_us: u64,
    pub pupil_radius_px: f64,
    /// Fixation duration range in milliseconds (inclusive).
    pub fixation_ms: (u64, u64),
    /// Saccade duration range in milliseconds (inclusive).
    pub saccade_ms: (u64, u64),
    /// Tremor standard deviation in pixels, applied per tick during fixation.
    pub jitter_sigma_px: f64,
    /// Expected boundary events per (circumference px x displacement px).
    pub event_rate: f64,
    /// Uniform background noise over the whole sensor, events per second.
    pub noise_rate_hz: f64,
    /// The pupil center stays inside [margin, 1 - margin] in both axes.
    pub margin_frac: f64,
    /// Minimum saccade amplitude as a fraction of the smaller sensor side.
    pub min_saccade_frac: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 80,
            height: 60,
            n_sequences: 10,
            duration_us: 60_000_000,
            seed: 1,
            window_us: 50_000,
            pupil_radius_px: 6.0,
            fixation_ms: (300, 800),
            saccade_ms: (30, 70),
            jitter_sigma_px: 0.06,
            event_rate: 0.1,
            noise_rate_hz: 500.0,
            margin_frac: 0.15,
            min_saccade_frac: 0.2,
        }
    }
}

impl SynthConfig {
    pub fn from_kv(kv: &mut KvConfig) -> Result<Self, ConfigError> {
        let d = SynthConfig::default();
        Ok(SynthConfig {
            width: kv.get_usize("width", d.width)?,
            height: kv.get_usize("height", d.height)?,
            n_sequences: kv.get_usize("n_sequences", d.n_sequences)?,
            duration_us: (kv.get_f64("duration_s", d.duration_us as f64 / 1e6)? * 1e6) as u64,
            seed: kv.get_u64("seed", d.seed)?,
            window_us: kv.get_u64("window_us", d.window_us)?,
            pupil_radius_px: kv.get_f64("pupil_radius_px", d.pupil_radius_px)?,
            fixation_ms: (
                kv.get_u64("fixation_ms_min", d.fixation_ms.0)?,
                kv.get_u64("fixation_ms_max", d.fixation_ms.1)?,
            ),
            saccade_ms: (
                kv.get_u64("saccade_ms_min", d.saccade_ms.0)?,
                kv.get_u64("saccade_ms_max", d.saccade_ms.1)?,
            ),
            jitter_sigma_px: kv.get_f64("jitter_sigma_px", d.jitter_sigma_px)?,
            event_rate: kv.get_f64("event_rate", d.event_rate)?,
            noise_rate_hz: kv.get_f64("noise_rate_hz", d.noise_rate_hz)?,
            margin_frac: kv.get_f64("margin_frac", d.margin_frac)?,
            min_saccade_frac: kv.get_f64("min_saccade_frac", d.min_saccade_frac)?,
        })
    }

    pub fn to_pairs(&self, out: &mut BTreeMap<String, String>) {
        out.insert("width".into(), self.width.to_string());
        out.insert("height".into(), self.height.to_string());
        out.insert("n_sequences".into(), self.n_sequences.to_string());
        out.insert("duration_s".into(), (self.duration_us as f64 / 1e6).to_string());
        out.insert("seed".into(), self.seed.to_string());
        out.insert("window_us".into(), self.window_us.to_string());
        out.insert("pupil_radius_px".into(), self.pupil_radius_px.to_string());
        out.insert("fixation_ms_min".into(), self.fixation_ms.0.to_string());
        out.insert("fixation_ms_max".into(), self.fixation_ms.1.to_string());
        out.insert("saccade_ms_min".into(), self.saccade_ms.0.to_string());
        out.insert("saccade_ms_max".into(), self.saccade_ms.1.to_string());
        out.insert("jitter_sigma_px".into(), self.jitter_sigma_px.to_string());
        out.insert("event_rate".into(), self.event_rate.to_string());
        out.insert("noise_rate_hz".into(), self.noise_rate_hz.to_string());
        out.insert("margin_frac".into(), self.margin_frac.to_string());
        out.insert("min_saccade_frac".into(), self.min_saccade_frac.to_string());
    }
}

const TICK_US: u64 = 1000;

/// Minimum-jerk interpolation from 0 to 1 over normalized time `s` in [0,1].
fn min_jerk(s: f64) -> f64 {
    let s3 = s * s * s;
    s3 * (10.0 + s * (-15.0 + 6.0 * s))
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (TAU * u2).cos()
}

/// Knuth's multiplication method; fine for the small rates used here.
fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u32 {
    if lambda <= 0.0 {
        return 0;
    }
    let limit = (-lambda).exp();
    let mut k = 0u32;
    let mut p = 1.0;
    loop {
        p *= rng.random::<f64>();
        if p <= limit {
            return k;
        }
        k += 1;
    }
}

struct Motion {
    /// Pixel-space pupil center per tick, one entry per millisecond.
    centers: Vec<(f64, f64)>,
    segments: Vec<Segment>,
}

fn plan_motion(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Motion {
    let ticks = (cfg.duration_us / TICK_US) as usize;
    let w = cfg.width as f64;
    let h = cfg.height as f64;
    let mx = cfg.margin_frac * w;
    let my = cfg.margin_frac * h;
    let min_amp = cfg.min_saccade_frac * w.min(h);

    let mut anchor = (
        rng.random_range(mx..w - mx),
        rng.random_range(my..h - my),
    );
    let mut centers = Vec::with_capacity(ticks);
    let mut segments = Vec::new();
    let mut tick = 0usize;
    let mut fixating = true;

    while tick < ticks {
        if fixating {
            let dur = rng.random_range(cfg.fixation_ms.0..=cfg.fixation_ms.1) as usize;
            let end = (tick + dur).min(ticks);
            segments.push(Segment {
                t_start_us: tick as u64 * TICK_US,
                t_end_us: end as u64 * TICK_US,
                kind: SegmentKind::Fixation,
            });
            for _ in tick..end {
                let jx = cfg.jitter_sigma_px * normal(rng);
                let jy = cfg.jitter_sigma_px * normal(rng);
                centers.push((anchor.0 + jx, anchor.1 + jy));
            }
            tick = end;
        } else {
            let dur = rng.random_range(cfg.saccade_ms.0..=cfg.saccade_ms.1) as usize;
            let end = (tick + dur).min(ticks);
            let target = {
                let mut best = anchor;
                for _ in 0..100 {
                    let cand = (
                        rng.random_range(mx..w - mx),
                        rng.random_range(my..h - my),
                    );
                    let d = ((cand.0 - anchor.0).powi(2) + (cand.1 - anchor.1).powi(2)).sqrt();
                    if d >= min_amp {
                        best = cand;
                        break;
                    }
                }
                best
            };
            segments.push(Segment {
                t_start_us: tick as u64 * TICK_US,
                t_end_us: end as u64 * TICK_US,
                kind: SegmentKind::Saccade,
            });
            let n = (end - tick).max(1);
            for i in tick..end {
                let s = (i - tick + 1) as f64 / n as f64;
                let f = min_jerk(s);
                centers.push((
                    anchor.0 + (target.0 - anchor.0) * f,
                    anchor.1 + (target.1 - anchor.1) * f,
                ));
            }
            anchor = target;
            tick = end;
        }
        fixating = !fixating;
    }

    Motion { centers, segments }
}

/// Generate one sequence; `index` selects the per-sequence random stream.
pub fn generate_sequence(cfg: &SynthConfig, index: usize) -> EventSequence {
    let mut rng = rng_for(cfg.seed, &[tag::SYNTH, index as u64]);
    let motion = plan_motion(cfg, &mut rng);
    let circumference = TAU * cfg.pupil_radius_px;
    let noise_per_tick = cfg.noise_rate_hz / 1000.0;

    let mut events: Vec<Event> = Vec::new();
    let mut labels: Vec<Label> = Vec::with_capacity(motion.centers.len());
    let mut prev = motion.centers.first().copied().unwrap_or((0.0, 0.0));

    for (tick, &(cx, cy)) in motion.centers.iter().enumerate() {
        let t0 = tick as u64 * TICK_US;
        labels.push(Label {
            t_us: t0,
            cx: cx / cfg.width as f64,
            cy: cy / cfg.height as f64,
        });

        let disp = ((cx - prev.0).powi(2) + (cy - prev.1).powi(2)).sqrt();
        prev = (cx, cy);

        let boundary_n = poisson(&mut rng, cfg.event_rate * circumference * disp);
        for _ in 0..boundary_n {
            let theta = rng.random_range(0.0..TAU);
            let radius = cfg.pupil_radius_px + rng.random_range(-0.5..0.5);
            let ex = (cx + radius * theta.cos()).round();
            let ey = (cy + radius * theta.sin()).round();
            if ex < 0.0 || ey < 0.0 || ex >= cfg.width as f64 || ey >= cfg.height as f64 {
                continue;
            }
            events.push(Event {
                t_us: t0 + rng.random_range(0..TICK_US),
                x: ex as u16,
                y: ey as u16,
                polarity: if rng.random::<bool>() { 1 } else { -1 },
            });
        }

        let noise_n = poisson(&mut rng, noise_per_tick);
        for _ in 0..noise_n {
            events.push(Event {
                t_us: t0 + rng.random_range(0..TICK_US),
                x: rng.random_range(0..cfg.width) as u16,
                y: rng.random_range(0..cfg.height) as u16,
                polarity: if rng.random::<bool>() { 1 } else { -1 },
            });
        }
    }

    // Strictly increasing timestamps: stable sort, then nudge ties forward.
    events.sort_by_key(|e| e.t_us);
    let mut prev_t: Option<u64> = None;
    for e in events.iter_mut() {
        if let Some(p) = prev_t {
            if e.t_us <= p {
                e.t_us = p + 1;
            }
        }
        prev_t = Some(e.t_us);
    }

    EventSequence {
        seq_id: format!("seq_{index:03}"),
        width: cfg.width,
        height: cfg.height,
        events,
        labels,
        segments: motion.segments,
    }
}

pub fn generate_dataset(cfg: &SynthConfig) -> Vec<EventSequence> {
    (0..cfg.n_sequences).map(|i| generate_sequence(cfg, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short_cfg() -> SynthConfig {
        SynthConfig {
            duration_us: 3_000_000,
            n_sequences: 2,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic_per_seed_and_index() {
        let cfg = short_cfg();
        let a = generate_sequence(&cfg, 1);
        let b = generate_sequence(&cfg, 1);
        assert_eq!(a.events, b.events);
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.segments, b.segments);
        let c = generate_sequence(&cfg, 0);
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn timestamps_strictly_increase_and_coords_stay_in_bounds() {
        let cfg = short_cfg();
        let seq = generate_sequence(&cfg, 0);
        assert!(!seq.events.is_empty());
        let mut prev = None;
        for e in &seq.events {
            if let Some(p) = prev {
                assert!(e.t_us > p, "non-increasing timestamp {}", e.t_us);
            }
            prev = Some(e.t_us);
            assert!((e.x as usize) < cfg.width && (e.y as usize) < cfg.height);
        }
    }

    #[test]
    fn labels_tick_every_millisecond_and_respect_margins() {
        let cfg = short_cfg();
        let seq = generate_sequence(&cfg, 0);
        assert_eq!(seq.labels.len(), (cfg.duration_us / 1000) as usize);
        for (i, l) in seq.labels.iter().enumerate() {
            assert_eq!(l.t_us, i as u64 * 1000);
            assert!((0.0..=1.0).contains(&l.cx) && (0.0..=1.0).contains(&l.cy));
        }
        // Anchors sit inside the margin box; tremor may poke out marginally.
        let slack = 3.0 * cfg.jitter_sigma_px / cfg.width as f64;
        for l in &seq.labels {
            assert!(l.cx >= cfg.margin_frac - slack && l.cx <= 1.0 - cfg.margin_frac + slack);
        }
    }

    #[test]
    fn segments_tile_the_duration_and_alternate() {
        let cfg = short_cfg();
        let seq = generate_sequence(&cfg, 0);
        assert_eq!(seq.segments[0].t_start_us, 0);
        assert_eq!(seq.segments.last().unwrap().t_end_us, cfg.duration_us);
        for pair in seq.segments.windows(2) {
            assert_eq!(pair[0].t_end_us, pair[1].t_start_us);
            assert_ne!(pair[0].kind, pair[1].kind);
        }
        assert_eq!(seq.segments[0].kind, SegmentKind::Fixation);
    }

    #[test]
    fn noiseless_events_hug_the_pupil_boundary() {
        let cfg = SynthConfig {
            noise_rate_hz: 0.0,
            duration_us: 2_000_000,
            ..Default::default()
        };
        let seq = generate_sequence(&cfg, 3);
        for e in &seq.events {
            let tick = (e.t_us / 1000).min(seq.labels.len() as u64 - 1) as usize;
            let l = &seq.labels[tick];
            let cx = l.cx * cfg.width as f64;
            let cy = l.cy * cfg.height as f64;
            let d = ((e.x as f64 - cx).powi(2) + (e.y as f64 - cy).powi(2)).sqrt();
            assert!(
                (d - cfg.pupil_radius_px).abs() <= 1.5,
                "event at distance {d} from center (radius {})",
                cfg.pupil_radius_px
            );
        }
    }

    #[test]
    fn saccades_are_far_denser_than_fixations() {
        let cfg = SynthConfig {
            noise_rate_hz: 0.0,
            duration_us: 10_000_000,
            ..Default::default()
        };
        let seq = generate_sequence(&cfg, 0);
        let mut rates = [(0u64, 0u64), (0u64, 0u64)]; // (events, us) per kind
        for seg in &seq.segments {
            let n = seq
                .events
                .iter()
                .filter(|e| e.t_us >= seg.t_start_us && e.t_us < seg.t_end_us)
                .count() as u64;
            let slot = match seg.kind {
                SegmentKind::Fixation => &mut rates[0],
                SegmentKind::Saccade => &mut rates[1],
            };
            slot.0 += n;
            slot.1 += seg.t_end_us - seg.t_start_us;
        }
        let fix_rate = rates[0].0 as f64 / rates[0].1 as f64;
        let sac_rate = rates[1].0 as f64 / rates[1].1 as f64;
        assert!(
            sac_rate > 2.0 * fix_rate,
            "saccade rate {sac_rate:.6} not clearly above fixation rate {fix_rate:.6}"
        );
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let cfg = SynthConfig {
            duration_us: 500_000,
            n_sequences: 2,
            ..Default::default()
        };
        let seqs = generate_dataset(&cfg);
        let dir = std::env::temp_dir().join(format!("aissm_synth_rt_{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        crate::event::write_dataset(&dir, &seqs, cfg.window_us, crate::event::EventFormat::Csv)
            .unwrap();
        let ds = crate::event::load_dataset(&dir).unwrap();
        assert_eq!(ds.width, cfg.width);
        assert_eq!(ds.window_us, cfg.window_us);
        assert_eq!(ds.sequences.len(), 2);
        for (a, b) in ds.sequences.iter().zip(&seqs) {
            assert_eq!(a.events, b.events);
            assert_eq!(a.labels, b.labels);
            assert_eq!(a.segments, b.segments);
        }
        std::fs::remove_dir_all(&dir).unwrap();
    }
}
