//! Event streams, frame building, and the on-disk dataset layout.
//!
//! An event is `(t_us, x, y, polarity)`. Frames are fixed-duration windows
//! `[t0 + k*window, t0 + (k+1)*window)` over a sequence, holding per-pixel
//! event counts; the model consumes the binarized plane (polarity and counts
//! discarded), which is also what confidence labeling sums over. Labels are
//! normalized pupil-center coordinates; a frame's label is the latest one
//! strictly before the window's end.
//!
//! Two interchangeable event encodings exist: a text CSV (`t_us,x,y,p`) and
//! the packed little-endian `EVT1` binary. Both enforce timestamp order and
//! sensor bounds at parse time.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use thiserror::Error;

use crate::config::KvConfig;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} does not exist")]
    Missing { path: String },
    #[error("{file} line {line}: {msg}")]
    Malformed {
        file: String,
        line: usize,
        msg: String,
    },
    #[error("{file}: not an EVT1 file (bad magic)")]
    BadMagic { file: String },
    #[error("{file}: unsupported EVT1 version {version}")]
    BadVersion { file: String, version: u16 },
    #[error("{file}: truncated (expected {expected} more bytes)")]
    Truncated { file: String, expected: usize },
    #[error("dataset meta: {0}")]
    Meta(String),
    #[error("event out of sensor bounds: ({x},{y}) on {width}x{height}")]
    OutOfBounds { x: u16, y: u16, width: usize, height: usize },
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    if source.kind() == ErrorKind::NotFound {
        DataError::Missing { path: path.display().to_string() }
    } else {
        DataError::Io { path: path.display().to_string(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t_us: u64,
    pub x: u16,
    pub y: u16,
    /// +1 or -1; kept through I/O, ignored by the binarized frames.
    pub polarity: i8,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label {
    pub t_us: u64,
    /// Normalized pupil center, both in [0, 1].
    pub cx: f64,
    pub cy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Fixation,
    Saccade,
}

impl SegmentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SegmentKind::Fixation => "fixation",
            SegmentKind::Saccade => "saccade",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub t_start_us: u64,
    pub t_end_us: u64,
    pub kind: SegmentKind,
}

#[derive(Debug, Clone)]
pub struct EventSequence {
    pub seq_id: String,
    pub width: usize,
    pub height: usize,
    pub events: Vec<Event>,
    pub labels: Vec<Label>,
    pub segments: Vec<Segment>,
}

/// Per-pixel event counts for one time window.
#[derive(Debug, Clone)]
pub struct EventFrame {
    pub t_start_us: u64,
    pub t_end_us: u64,
    pub width: usize,
    pub height: usize,
    counts: Vec<u16>,
}

impl EventFrame {
    pub fn empty(width: usize, height: usize, t_start_us: u64, t_end_us: u64) -> Self {
        EventFrame {
            t_start_us,
            t_end_us,
            width,
            height,
            counts: vec![0; width * height],
        }
    }

    pub fn count_at(&self, x: usize, y: usize) -> u16 {
        self.counts[y * self.width + x]
    }

    pub fn is_active(&self, x: usize, y: usize) -> bool {
        self.counts[y * self.width + x] > 0
    }

    /// Number of pixels with at least one event.
    pub fn active_pixels(&self) -> u64 {
        self.counts.iter().filter(|&&c| c > 0).count() as u64
    }

    pub fn total_events(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }

    /// Binarized single-channel plane in row-major `[height, width]` order.
    pub fn binary_plane(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| if c > 0 { 1.0 } else { 0.0 }).collect()
    }

    /// Record one event at a pixel; counts saturate rather than wrap.
    pub fn bump(&mut self, x: u16, y: u16) {
        let i = y as usize * self.width + x as usize;
        self.counts[i] = self.counts[i].saturating_add(1);
    }
}

/// Map a normalized centroid onto a pixel grid.
pub fn scale_centroid(cx: f64, cy: f64, grid_w: usize, grid_h: usize) -> (f64, f64) {
    (cx * grid_w as f64, cy * grid_h as f64)
}

/// Partition events into contiguous windows starting at the first event's
/// timestamp. Every event lands in exactly one frame.
pub fn build_frames(
    events: &[Event],
    width: usize,
    height: usize,
    window_us: u64,
) -> Result<Vec<EventFrame>, DataError> {
    assert!(window_us > 0, "window_us must be positive");
    let Some(first) = events.first() else {
        return Ok(Vec::new());
    };
    let t0 = first.t_us;
    let last = events.last().expect("non-empty").t_us;
    let n = ((last - t0) / window_us + 1) as usize;
    let mut frames: Vec<EventFrame> = (0..n)
        .map(|k| {
            EventFrame::empty(
                width,
                height,
                t0 + k as u64 * window_us,
                t0 + (k as u64 + 1) * window_us,
            )
        })
        .collect();
    let mut prev_t = t0;
    for ev in events {
        if ev.t_us < prev_t {
            return Err(DataError::Malformed {
                file: "<events>".into(),
                line: 0,
                msg: "events not timestamp-sorted".into(),
            });
        }
        prev_t = ev.t_us;
        if (ev.x as usize) >= width || (ev.y as usize) >= height {
            return Err(DataError::OutOfBounds { x: ev.x, y: ev.y, width, height });
        }
        let k = ((ev.t_us - t0) / window_us) as usize;
        frames[k].bump(ev.x, ev.y);
    }
    Ok(frames)
}

/// Latest label strictly before `t_us`, if any.
pub fn label_before(labels: &[Label], t_us: u64) -> Option<&Label> {
    let idx = labels.partition_point(|l| l.t_us < t_us);
    idx.checked_sub(1).map(|i| &labels[i])
}

/// Frames plus the per-frame label and fixation tag used by training and
/// evaluation. A frame is fixation-tagged when its whole window lies inside
/// one fixation segment.
#[derive(Debug, Clone)]
pub struct FramedSequence {
    pub frames: Vec<EventFrame>,
    pub labels: Vec<Option<Label>>,
    pub fixation: Vec<bool>,
}

pub fn frame_sequence(seq: &EventSequence, window_us: u64) -> Result<FramedSequence, DataError> {
    let frames = build_frames(&seq.events, seq.width, seq.height, window_us)?;
    let labels: Vec<Option<Label>> = frames
        .iter()
        .map(|f| label_before(&seq.labels, f.t_end_us).copied())
        .collect();
    let fixation: Vec<bool> = frames
        .iter()
        .map(|f| {
            seq.segments.iter().any(|s| {
                s.kind == SegmentKind::Fixation
                    && s.t_start_us <= f.t_start_us
                    && f.t_end_us <= s.t_end_us
            })
        })
        .collect();
    Ok(FramedSequence { frames, labels, fixation })
}

// ---------------------------------------------------------------------------
// CSV codecs
// ---------------------------------------------------------------------------

const EVENTS_HEADER: &str = "t_us,x,y,p";
const LABELS_HEADER: &str = "t_us,cx,cy";
const SEGMENTS_HEADER: &str = "t_start_us,t_end_us,kind";

fn check_header(file: &str, line: Option<&str>, want: &str) -> Result<(), DataError> {
    match line {
        Some(l) if l.trim() == want => Ok(()),
        Some(l) => Err(DataError::Malformed {
            file: file.into(),
            line: 1,
            msg: format!("expected header `{want}`, got `{}`", l.trim()),
        }),
        None => Err(DataError::Malformed {
            file: file.into(),
            line: 1,
            msg: format!("empty file, expected header `{want}`"),
        }),
    }
}

fn field_err(file: &str, line: usize, msg: String) -> DataError {
    DataError::Malformed { file: file.into(), line, msg }
}

pub fn parse_events_csv(
    text: &str,
    width: usize,
    height: usize,
    file: &str,
) -> Result<Vec<Event>, DataError> {
    let mut lines = text.lines();
    check_header(file, lines.next(), EVENTS_HEADER)?;
    let mut out = Vec::new();
    let mut prev_t = 0u64;
    for (i, raw) in lines.enumerate() {
        let line_no = i + 2;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        let mut parts = l.split(',');
        let mut next = |name: &str| {
            parts
                .next()
                .map(str::trim)
                .ok_or_else(|| field_err(file, line_no, format!("missing field `{name}`")))
        };
        let t_us: u64 = next("t_us")?
            .parse()
            .map_err(|_| field_err(file, line_no, "bad t_us".into()))?;
        let x: u16 = next("x")?
            .parse()
            .map_err(|_| field_err(file, line_no, "bad x".into()))?;
        let y: u16 = next("y")?
            .parse()
            .map_err(|_| field_err(file, line_no, "bad y".into()))?;
        let p_raw = next("p")?;
        let polarity: i8 = match p_raw {
            "1" | "+1" => 1,
            "-1" => -1,
            other => {
                return Err(field_err(file, line_no, format!("polarity must be 1 or -1, got `{other}`")))
            }
        };
        if parts.next().is_some() {
            return Err(field_err(file, line_no, "too many fields".into()));
        }
        if (x as usize) >= width || (y as usize) >= height {
            return Err(field_err(
                file,
                line_no,
                format!("event ({x},{y}) outside {width}x{height} sensor"),
            ));
        }
        if t_us < prev_t {
            return Err(field_err(file, line_no, "events not timestamp-sorted".into()));
        }
        prev_t = t_us;
        out.push(Event { t_us, x, y, polarity });
    }
    Ok(out)
}

pub fn events_to_csv(events: &[Event]) -> String {
    let mut s = String::with_capacity(events.len() * 20 + 16);
    s.push_str(EVENTS_HEADER);
    s.push('\n');
    for e in events {
        s.push_str(&format!("{},{},{},{}\n", e.t_us, e.x, e.y, e.polarity));
    }
    s
}

pub fn parse_labels_csv(text: &str, file: &str) -> Result<Vec<Label>, DataError> {
    let mut lines = text.lines();
    check_header(file, lines.next(), LABELS_HEADER)?;
    let mut out: Vec<Label> = Vec::new();
    for (i, raw) in lines.enumerate() {
        let line_no = i + 2;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        let parts: Vec<&str> = l.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(field_err(file, line_no, format!("expected 3 fields, got {}", parts.len())));
        }
        let t_us: u64 = parts[0]
            .parse()
            .map_err(|_| field_err(file, line_no, "bad t_us".into()))?;
        let cx: f64 = parts[1]
            .parse()
            .map_err(|_| field_err(file, line_no, "bad cx".into()))?;
        let cy: f64 = parts[2]
            .parse()
            .map_err(|_| field_err(file, line_no, "bad cy".into()))?;
        if !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(field_err(file, line_no, format!("label ({cx},{cy}) outside [0,1]")));
        }
        if let Some(prev) = out.last() {
            if t_us < prev.t_us {
                return Err(field_err(file, line_no, "labels not timestamp-sorted".into()));
            }
        }
        out.push(Label { t_us, cx, cy });
    }
    Ok(out)
}

pub fn labels_to_csv(labels: &[Label]) -> String {
    let mut s = String::from(LABELS_HEADER);
    s.push('\n');
    for l in labels {
        // `{}` prints the shortest representation that round-trips exactly.
        s.push_str(&format!("{},{},{}\n", l.t_us, l.cx, l.cy));
    }
    s
}

pub fn parse_segments_csv(text: &str, file: &str) -> Result<Vec<Segment>, DataError> {
    let mut lines = text.lines();
    check_header(file, lines.next(), SEGMENTS_HEADER)?;
    let mut out: Vec<Segment> = Vec::new();
    for (i, raw) in lines.enumerate() {
        let line_no = i + 2;
        let l = raw.trim();
        if l.is_empty() {
            continue;
        }
        let parts: Vec<&str> = l.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(field_err(file, line_no, format!("expected 3 fields, got {}", parts.len())));
        }
        let t_start_us: u64 = parts[0]
            .parse()
            .map_err(|_| field_err(file, line_no, "bad t_start_us".into()))?;
        let t_end_us: u64 = parts[1]
            .parse()
            .map_err(|_| field_err(file, line_no, "bad t_end_us".into()))?;
        let kind = match parts[2] {
            "fixation" => SegmentKind::Fixation,
            "saccade" => SegmentKind::Saccade,
            other => {
                return Err(field_err(file, line_no, format!("unknown segment kind `{other}`")))
            }
        };
        if t_end_us <= t_start_us {
            return Err(field_err(file, line_no, "segment must have positive duration".into()));
        }
        out.push(Segment { t_start_us, t_end_us, kind });
    }
    Ok(out)
}

pub fn segments_to_csv(segments: &[Segment]) -> String {
    let mut s = String::from(SEGMENTS_HEADER);
    s.push('\n');
    for seg in segments {
        s.push_str(&format!("{},{},{}\n", seg.t_start_us, seg.t_end_us, seg.kind.as_str()));
    }
    s
}

// ---------------------------------------------------------------------------
// EVT1 binary codec
// ---------------------------------------------------------------------------

const EVT1_MAGIC: &[u8; 4] = b"EVT1";
const EVT1_VERSION: u16 = 1;
const EVT1_EVENT_BYTES: usize = 13; // u64 t + u16 x + u16 y + i8 p

/// Packed layout, all little-endian:
/// magic "EVT1", u16 version, u32 width, u32 height, u64 count,
/// then `count` records of (u64 t_us, u16 x, u16 y, i8 polarity).
pub fn events_to_evt1(events: &[Event], width: usize, height: usize) -> Vec<u8> {
    let mut buf = Vec::with_capacity(22 + events.len() * EVT1_EVENT_BYTES);
    buf.extend_from_slice(EVT1_MAGIC);
    buf.extend_from_slice(&EVT1_VERSION.to_le_bytes());
    buf.extend_from_slice(&(width as u32).to_le_bytes());
    buf.extend_from_slice(&(height as u32).to_le_bytes());
    buf.extend_from_slice(&(events.len() as u64).to_le_bytes());
    for e in events {
        buf.extend_from_slice(&e.t_us.to_le_bytes());
        buf.extend_from_slice(&e.x.to_le_bytes());
        buf.extend_from_slice(&e.y.to_le_bytes());
        buf.extend_from_slice(&(e.polarity as u8).to_le_bytes());
    }
    buf
}

/// Parse an EVT1 buffer, returning `(width, height, events)`.
pub fn parse_evt1(buf: &[u8], file: &str) -> Result<(usize, usize, Vec<Event>), DataError> {
    let need = |expected: usize| DataError::Truncated { file: file.into(), expected };
    if buf.len() < 4 {
        return Err(need(4 - buf.len()));
    }
    if &buf[0..4] != EVT1_MAGIC {
        return Err(DataError::BadMagic { file: file.into() });
    }
    if buf.len() < 22 {
        return Err(need(22 - buf.len()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != EVT1_VERSION {
        return Err(DataError::BadVersion { file: file.into(), version });
    }
    let width = u32::from_le_bytes(buf[6..10].try_into().unwrap()) as usize;
    let height = u32::from_le_bytes(buf[10..14].try_into().unwrap()) as usize;
    let count = u64::from_le_bytes(buf[14..22].try_into().unwrap()) as usize;
    let body = &buf[22..];
    let expected = count * EVT1_EVENT_BYTES;
    if body.len() < expected {
        return Err(need(expected - body.len()));
    }
    if body.len() > expected {
        return Err(DataError::Malformed {
            file: file.into(),
            line: 0,
            msg: format!("{} trailing bytes after {count} events", body.len() - expected),
        });
    }
    let mut out = Vec::with_capacity(count);
    let mut prev_t = 0u64;
    for (i, rec) in body.chunks_exact(EVT1_EVENT_BYTES).enumerate() {
        let t_us = u64::from_le_bytes(rec[0..8].try_into().unwrap());
        let x = u16::from_le_bytes(rec[8..10].try_into().unwrap());
        let y = u16::from_le_bytes(rec[10..12].try_into().unwrap());
        let polarity = rec[12] as i8;
        if polarity != 1 && polarity != -1 {
            return Err(DataError::Malformed {
                file: file.into(),
                line: i,
                msg: format!("record {i}: polarity must be 1 or -1, got {polarity}"),
            });
        }
        if (x as usize) >= width || (y as usize) >= height {
            return Err(DataError::Malformed {
                file: file.into(),
                line: i,
                msg: format!("record {i}: event ({x},{y}) outside {width}x{height} sensor"),
            });
        }
        if t_us < prev_t {
            return Err(DataError::Malformed {
                file: file.into(),
                line: i,
                msg: format!("record {i}: events not timestamp-sorted"),
            });
        }
        prev_t = t_us;
        out.push(Event { t_us, x, y, polarity });
    }
    Ok((width, height, out))
}

// ---------------------------------------------------------------------------
// Dataset layout
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventFormat {
    Csv,
    Evt1,
}

impl EventFormat {
    pub fn as_str(self) -> &'static str {
        match self {
            EventFormat::Csv => "csv",
            EventFormat::Evt1 => "evt1",
        }
    }
}

impl std::str::FromStr for EventFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(EventFormat::Csv),
            "evt1" => Ok(EventFormat::Evt1),
            other => Err(format!("unknown event format `{other}` (expected csv|evt1)")),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub width: usize,
    pub height: usize,
    /// Frame window the dataset was generated for; training and evaluation
    /// default to it.
    pub window_us: u64,
    pub sequences: Vec<EventSequence>,
}

impl Dataset {
    /// Deterministic split: the last fifth of sequences (at least one, when
    /// there are at least two) is validation.
    pub fn train_val_split(&self) -> (Vec<usize>, Vec<usize>) {
        let n = self.sequences.len();
        if n < 2 {
            return ((0..n).collect(), Vec::new());
        }
        let n_val = (n / 5).max(1);
        let split = n - n_val;
        ((0..split).collect(), (split..n).collect())
    }
}

fn seq_dir_name(i: usize) -> String {
    format!("seq_{i:03}")
}

/// Write one sequence under `dir/seq_xxx/`.
pub fn write_sequence(
    dir: &Path,
    index: usize,
    seq: &EventSequence,
    format: EventFormat,
) -> Result<(), DataError> {
    let sub = dir.join(seq_dir_name(index));
    fs::create_dir_all(&sub).map_err(|e| io_err(&sub, e))?;
    match format {
        EventFormat::Csv => {
            let p = sub.join("events.csv");
            fs::write(&p, events_to_csv(&seq.events)).map_err(|e| io_err(&p, e))?;
        }
        EventFormat::Evt1 => {
            let p = sub.join("events.evt1");
            fs::write(&p, events_to_evt1(&seq.events, seq.width, seq.height))
                .map_err(|e| io_err(&p, e))?;
        }
    }
    let p = sub.join("labels.csv");
    fs::write(&p, labels_to_csv(&seq.labels)).map_err(|e| io_err(&p, e))?;
    let p = sub.join("segments.csv");
    fs::write(&p, segments_to_csv(&seq.segments)).map_err(|e| io_err(&p, e))?;
    Ok(())
}

pub fn write_dataset_meta(
    dir: &Path,
    width: usize,
    height: usize,
    window_us: u64,
    n_sequences: usize,
    format: EventFormat,
) -> Result<(), DataError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let meta = format!(
        "event_format = {}\nheight = {height}\nn_sequences = {n_sequences}\nwidth = {width}\nwindow_us = {window_us}\n",
        format.as_str()
    );
    let p = dir.join("meta.txt");
    fs::write(&p, meta).map_err(|e| io_err(&p, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let meta_path = dir.join("meta.txt");
    let meta_text = fs::read_to_string(&meta_path).map_err(|e| io_err(&meta_path, e))?;
    let mut meta = KvConfig::parse(&meta_text).map_err(|e| DataError::Meta(e.to_string()))?;
    let width = meta
        .get_usize("width", 0)
        .map_err(|e| DataError::Meta(e.to_string()))?;
    let height = meta
        .get_usize("height", 0)
        .map_err(|e| DataError::Meta(e.to_string()))?;
    let window_us = meta
        .get_u64("window_us", 0)
        .map_err(|e| DataError::Meta(e.to_string()))?;
    let n = meta
        .get_usize("n_sequences", 0)
        .map_err(|e| DataError::Meta(e.to_string()))?;
    let format: EventFormat = meta
        .get_str("event_format", "csv")
        .parse()
        .map_err(DataError::Meta)?;
    meta.finish().map_err(|e| DataError::Meta(e.to_string()))?;
    if width == 0 || height == 0 || window_us == 0 || n == 0 {
        return Err(DataError::Meta(
            "width, height, window_us and n_sequences must all be positive".into(),
        ));
    }

    let mut sequences = Vec::with_capacity(n);
    for i in 0..n {
        let sub = dir.join(seq_dir_name(i));
        let events = match format {
            EventFormat::Csv => {
                let p = sub.join("events.csv");
                let text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
                parse_events_csv(&text, width, height, &p.display().to_string())?
            }
            EventFormat::Evt1 => {
                let p = sub.join("events.evt1");
                let buf = fs::read(&p).map_err(|e| io_err(&p, e))?;
                let (w, h, events) = parse_evt1(&buf, &p.display().to_string())?;
                if w != width || h != height {
                    return Err(DataError::Meta(format!(
                        "{}: sensor {w}x{h} does not match dataset meta {width}x{height}",
                        p.display()
                    )));
                }
                events
            }
        };
        let p = sub.join("labels.csv");
        let labels_text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        let labels = parse_labels_csv(&labels_text, &p.display().to_string())?;
        let p = sub.join("segments.csv");
        let segments_text = fs::read_to_string(&p).map_err(|e| io_err(&p, e))?;
        let segments = parse_segments_csv(&segments_text, &p.display().to_string())?;
        sequences.push(EventSequence {
            seq_id: seq_dir_name(i),
            width,
            height,
            events,
            labels,
            segments,
        });
    }
    Ok(Dataset { width, height, window_us, sequences })
}

/// Write a whole dataset (meta + all sequences).
pub fn write_dataset(
    dir: &Path,
    sequences: &[EventSequence],
    window_us: u64,
    format: EventFormat,
) -> Result<(), DataError> {
    let (w, h) = match sequences.first() {
        Some(s) => (s.width, s.height),
        None => return Err(DataError::Meta("refusing to write an empty dataset".into())),
    };
    write_dataset_meta(dir, w, h, window_us, sequences.len(), format)?;
    for (i, seq) in sequences.iter().enumerate() {
        write_sequence(dir, i, seq, format)?;
    }
    Ok(())
}

/// Group frame indices by which fixation/saccade segment covers them —
/// handy for reporting; unused windows (straddling a boundary) are skipped.
pub fn frames_by_segment(
    framed: &FramedSequence,
    segments: &[Segment],
) -> BTreeMap<usize, Vec<usize>> {
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (fi, frame) in framed.frames.iter().enumerate() {
        for (si, seg) in segments.iter().enumerate() {
            if seg.t_start_us <= frame.t_start_us && frame.t_end_us <= seg.t_end_us {
                out.entry(si).or_default().push(fi);
                break;
            }
        }
    }
    out
}
