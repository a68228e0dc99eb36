//! Gaze recordings, angular velocities and the two input scalings.
//!
//! A recording is a uniformly sampled sequence of yaw/pitch angles. It is
//! turned into forward-difference velocities (°/s) and then viewed twice:
//! a tanh-compressed "slow" view that keeps drift and tremor legible, and
//! a thresholded z-scored "fast" view that only keeps micro-saccades and
//! saccades.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Longest run of missing samples that is repaired by interpolation.
pub const MAX_INTERPOLATED_GAP_MS: f64 = 50.0;
/// Samples per network input window (one second at 1000 Hz).
pub const WINDOW_LEN: usize = 1000;

/// Grid of supported slow-scale factors.
pub const C_DOMAIN: [f64; 4] = [0.01, 0.02, 0.04, 0.06];
/// Grid of supported fast-movement thresholds in °/s.
pub const V_MIN_DOMAIN: [f64; 5] = [10.0, 20.0, 30.0, 40.0, 60.0];

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("line {line}: timestamp {t_ms} ms is not after the previous sample")]
    NonMonotonic { line: u64, t_ms: f64 },
    #[error("file mixes left and right eye samples; select one eye")]
    MixedEyes,
    #[error("sampling rate must be positive and finite, got {0}")]
    InvalidRate(f64),
    #[error("need at least 2 samples to form velocities, got {0}")]
    EmptySequence(usize),
    #[error("invalid transform config: {0}")]
    InvalidConfig(String),
    #[error("z-score statistics undefined for channel {channel}: {reason}")]
    StatisticsUndefined { channel: char, reason: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SignalError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Eye {
    #[serde(rename = "L")]
    Left,
    #[serde(rename = "R")]
    Right,
    #[default]
    #[serde(rename = "unspecified")]
    Unspecified,
}

impl Eye {
    fn parse(field: &str) -> Option<Eye> {
        match field {
            "L" | "l" => Some(Eye::Left),
            "R" | "r" => Some(Eye::Right),
            _ => None,
        }
    }

    fn code(self) -> &'static str {
        match self {
            Eye::Left => "L",
            Eye::Right => "R",
            Eye::Unspecified => "",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub t_ms: f64,
    pub x: f64,
    pub y: f64,
}

/// Uniformly sampled yaw/pitch angles (degrees) of one eye in one session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GazeRecording {
    pub samples: Vec<Sample>,
    pub rate: f64,
    pub eye: Eye,
    pub subject_id: String,
    pub session_id: String,
}

impl GazeRecording {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate
    }
}

/// How to read a gaze CSV: sampling rate, eye to keep, labels to attach.
#[derive(Debug, Clone)]
pub struct CsvFormat {
    pub rate: f64,
    pub eye: Option<Eye>,
    pub subject_id: String,
    pub session_id: String,
}

impl Default for CsvFormat {
    fn default() -> Self {
        Self {
            rate: 1000.0,
            eye: None,
            subject_id: String::new(),
            session_id: String::new(),
        }
    }
}

struct Row {
    line: u64,
    t: f64,
    x: f64,
    y: f64,
}

fn parse_field(record: &csv::StringRecord, idx: usize, name: &str, line: u64, allow_nan: bool) -> Result<f64> {
    let raw = record.get(idx).ok_or_else(|| SignalError::Parse {
        line,
        message: format!("missing column {name}"),
    })?;
    let v: f64 = raw.trim().parse().map_err(|_| SignalError::Parse {
        line,
        message: format!("{name}: cannot parse {raw:?} as a number"),
    })?;
    if v.is_infinite() || (v.is_nan() && !allow_nan) {
        return Err(SignalError::Parse {
            line,
            message: format!("{name}: {raw:?} is not finite"),
        });
    }
    Ok(v)
}

/// Reads a gaze CSV with header `t_ms,x_deg,y_deg[,eye]`.
///
/// Missing samples are `NaN`. Gaps of at most 50 ms are filled by linear
/// interpolation on the nominal sampling grid; longer gaps split the
/// recording, so the result is a list of contiguous segments (segments with
/// fewer than two samples are dropped).
pub fn parse_recording<R: Read>(reader: R, format: &CsvFormat) -> Result<Vec<GazeRecording>> {
    if !(format.rate.is_finite() && format.rate > 0.0) {
        return Err(SignalError::InvalidRate(format.rate));
    }
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ti), Some(xi), Some(yi)) = (col("t_ms"), col("x_deg"), col("y_deg")) else {
        return Err(SignalError::Parse {
            line: 1,
            message: format!(
                "header must contain t_ms,x_deg,y_deg; found {:?}",
                headers.iter().collect::<Vec<_>>()
            ),
        });
    };
    let eye_col = col("eye");

    let mut rows = Vec::new();
    let mut seen_eyes: Vec<Eye> = Vec::new();
    for record in rdr.records() {
        let record = record?;
        let line = record.position().map_or(0, |p| p.line());
        if let Some(ei) = eye_col {
            let raw = record.get(ei).unwrap_or("");
            let eye = Eye::parse(raw.trim()).ok_or_else(|| SignalError::Parse {
                line,
                message: format!("eye must be L or R, got {raw:?}"),
            })?;
            if !seen_eyes.contains(&eye) {
                seen_eyes.push(eye);
            }
            if format.eye.is_some_and(|want| want != eye) {
                continue;
            }
        }
        rows.push(Row {
            line,
            t: parse_field(&record, ti, "t_ms", line, false)?,
            x: parse_field(&record, xi, "x_deg", line, true)?,
            y: parse_field(&record, yi, "y_deg", line, true)?,
        });
    }
    let eye = match (format.eye, seen_eyes.as_slice()) {
        (Some(e), _) => e,
        (None, []) => Eye::Unspecified,
        (None, [e]) => *e,
        (None, _) => return Err(SignalError::MixedEyes),
    };
    for w in rows.windows(2) {
        if w[1].t <= w[0].t {
            return Err(SignalError::NonMonotonic {
                line: w[1].line,
                t_ms: w[1].t,
            });
        }
    }
    let segments = repair_gaps(&rows, 1000.0 / format.rate);
    Ok(segments
        .into_iter()
        .filter(|s| s.len() >= 2)
        .map(|samples| GazeRecording {
            samples,
            rate: format.rate,
            eye,
            subject_id: format.subject_id.clone(),
            session_id: format.session_id.clone(),
        })
        .collect())
}

fn repair_gaps(rows: &[Row], spacing: f64) -> Vec<Vec<Sample>> {
    let mut segments = Vec::new();
    let mut current: Vec<Sample> = Vec::new();
    let mut last_valid: Option<Sample> = None;
    for row in rows {
        if row.x.is_nan() || row.y.is_nan() {
            continue;
        }
        let s = Sample {
            t_ms: row.t,
            x: row.x,
            y: row.y,
        };
        if let Some(prev) = last_valid {
            let step = s.t_ms - prev.t_ms;
            let missing_ms = step - spacing;
            if missing_ms > MAX_INTERPOLATED_GAP_MS + 1e-9 {
                segments.push(std::mem::take(&mut current));
            } else if step > 1.5 * spacing {
                let n_missing = (step / spacing).round() as usize - 1;
                for k in 1..=n_missing {
                    let frac = k as f64 / (n_missing + 1) as f64;
                    current.push(Sample {
                        t_ms: prev.t_ms + k as f64 * spacing,
                        x: prev.x + frac * (s.x - prev.x),
                        y: prev.y + frac * (s.y - prev.y),
                    });
                }
            }
        }
        current.push(s);
        last_valid = Some(s);
    }
    if !current.is_empty() {
        segments.push(current);
    }
    segments
}

/// Writes recordings as gaze CSV. The eye column is emitted when any
/// recording has a known eye; rows of several recordings are interleaved by
/// sample index (one file per session, both eyes side by side).
pub fn write_recordings<W: Write>(writer: W, recordings: &[&GazeRecording]) -> Result<()> {
    let with_eye = recordings.iter().any(|r| r.eye != Eye::Unspecified);
    let mut w = csv::WriterBuilder::new().from_writer(writer);
    if with_eye {
        w.write_record(["t_ms", "x_deg", "y_deg", "eye"])?;
    } else {
        w.write_record(["t_ms", "x_deg", "y_deg"])?;
    }
    let n = recordings.iter().map(|r| r.len()).max().unwrap_or(0);
    for i in 0..n {
        for rec in recordings {
            let Some(s) = rec.samples.get(i) else { continue };
            let fmt = |v: f64| if v.is_nan() { "NaN".to_string() } else { format!("{v:.6}") };
            let t = format!("{:.3}", s.t_ms);
            if with_eye {
                w.write_record([t, fmt(s.x), fmt(s.y), rec.eye.code().to_string()])?;
            } else {
                w.write_record([t, fmt(s.x), fmt(s.y)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Angular velocities in °/s; `pairs[i] = r·(p[i+1] − p[i])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VelocitySequence {
    pub pairs: Vec<[f64; 2]>,
    pub rate: f64,
    pub eye: Eye,
    pub subject_id: String,
    pub session_id: String,
}

impl VelocitySequence {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The first `n` velocity pairs, keeping labels.
    pub fn truncated(&self, n: usize) -> VelocitySequence {
        VelocitySequence {
            pairs: self.pairs[..n.min(self.pairs.len())].to_vec(),
            ..self.clone_labels()
        }
    }

    /// Sub-sequence `[start, end)` keeping labels.
    pub fn slice(&self, start: usize, end: usize) -> VelocitySequence {
        let end = end.min(self.pairs.len());
        VelocitySequence {
            pairs: self.pairs[start.min(end)..end].to_vec(),
            ..self.clone_labels()
        }
    }

    fn clone_labels(&self) -> VelocitySequence {
        VelocitySequence {
            pairs: Vec::new(),
            rate: self.rate,
            eye: self.eye,
            subject_id: self.subject_id.clone(),
            session_id: self.session_id.clone(),
        }
    }
}

pub fn to_velocities(rec: &GazeRecording) -> Result<VelocitySequence> {
    if rec.samples.len() < 2 {
        return Err(SignalError::EmptySequence(rec.samples.len()));
    }
    let r = rec.rate;
    let pairs = rec
        .samples
        .windows(2)
        .map(|w| [r * (w[1].x - w[0].x), r * (w[1].y - w[0].y)])
        .collect();
    Ok(VelocitySequence {
        pairs,
        rate: rec.rate,
        eye: rec.eye,
        subject_id: rec.subject_id.clone(),
        session_id: rec.session_id.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformConfig {
    /// Slow-scale factor of `tanh(c·δ)`.
    pub c: f64,
    /// Fast-movement threshold in °/s.
    pub v_min: f64,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self { c: 0.02, v_min: 40.0 }
    }
}

impl TransformConfig {
    /// Checks `c` and `v_min` against the grid-search domains. With
    /// `allow_outside_grid` only positivity is enforced.
    pub fn validate(&self, allow_outside_grid: bool) -> Result<()> {
        if !(self.c.is_finite() && self.c > 0.0) || !(self.v_min.is_finite() && self.v_min >= 0.0) {
            return Err(SignalError::InvalidConfig(format!(
                "c={} v_min={} must be positive",
                self.c, self.v_min
            )));
        }
        if allow_outside_grid {
            return Ok(());
        }
        if !C_DOMAIN.contains(&self.c) {
            return Err(SignalError::InvalidConfig(format!("c={} not in {C_DOMAIN:?}", self.c)));
        }
        if !V_MIN_DOMAIN.contains(&self.v_min) {
            return Err(SignalError::InvalidConfig(format!("v_min={} not in {V_MIN_DOMAIN:?}", self.v_min)));
        }
        Ok(())
    }
}

/// Largest `f64` below 1.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// `tanh(c·δ)` per channel. Beyond `|c·δ| ≈ 19` the rounded `tanh` is
/// exactly ±1, so the result is pulled back to the nearest value inside
/// the open interval; this keeps the map odd and strictly bounded.
pub fn transform_slow(pairs: &[[f64; 2]], cfg: &TransformConfig) -> Vec<[f64; 2]> {
    let squash = |v: f64| (cfg.c * v).tanh().clamp(-BELOW_ONE, BELOW_ONE);
    pairs.iter().map(|&[dx, dy]| [squash(dx), squash(dy)]).collect()
}

/// Per-channel z-score parameters of the fast view.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub mean_x: f64,
    pub mean_y: f64,
    pub sd_x: f64,
    pub sd_y: f64,
}

impl ZScoreStats {
    pub fn z_x(&self, u: f64) -> f64 {
        (u - self.mean_x) / self.sd_x
    }

    pub fn z_y(&self, u: f64) -> f64 {
        (u - self.mean_y) / self.sd_y
    }

    /// The value every sub-threshold sample maps to.
    pub fn z_zero(&self) -> [f64; 2] {
        [self.z_x(0.0), self.z_y(0.0)]
    }
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// Whether `√(dx² + dy²) < v` holds exactly for these doubles, so the
/// fast-view truncation set has no rounding-dependent boundary.
pub fn speed_below(dx: f64, dy: f64, v: f64) -> bool {
    if v.is_nan() || v <= 0.0 {
        return false;
    }
    let (s, c) = (dx * dx + dy * dy, v * v);
    if s < c * (1.0 - 1e-12) {
        return true;
    }
    if s > c * (1.0 + 1e-12) || s.is_nan() {
        return false;
    }
    // near the circle: sign of dx² + dy² − v² as an exact expansion
    let (xh, xl) = two_prod(dx, dx);
    let (yh, yl) = two_prod(dy, dy);
    let (vh, vl) = two_prod(v, v);
    let mut expansion: Vec<f64> = Vec::with_capacity(6);
    for t in [xl, yl, -vl, xh, yh, -vh] {
        let mut q = t;
        let mut next = Vec::with_capacity(expansion.len() + 1);
        for &e in &expansion {
            let (hi, lo) = two_sum(q, e);
            next.push(lo);
            q = hi;
        }
        next.push(q);
        expansion = next;
    }
    expansion.iter().rev().find(|&&e| e != 0.0).is_some_and(|&e| e < 0.0)
}

/// Fits per-channel mean and population sd over the training samples whose
/// speed is at least `v_min`.
pub fn fit_zscore<'a>(train: impl IntoIterator<Item = &'a VelocitySequence>, cfg: &TransformConfig) -> Result<ZScoreStats> {
    let mut supra: Vec<[f64; 2]> = Vec::new();
    for seq in train {
        supra.extend(seq.pairs.iter().copied().filter(|p| !speed_below(p[0], p[1], cfg.v_min)));
    }
    if supra.len() < 2 {
        return Err(SignalError::StatisticsUndefined {
            channel: 'x',
            reason: format!("{} samples at or above v_min={}", supra.len(), cfg.v_min),
        });
    }
    let n = supra.len() as f64;
    let mean_x = supra.iter().map(|p| p[0]).sum::<f64>() / n;
    let mean_y = supra.iter().map(|p| p[1]).sum::<f64>() / n;
    let sd_x = (supra.iter().map(|p| (p[0] - mean_x).powi(2)).sum::<f64>() / n).sqrt();
    let sd_y = (supra.iter().map(|p| (p[1] - mean_y).powi(2)).sum::<f64>() / n).sqrt();
    for (channel, sd) in [('x', sd_x), ('y', sd_y)] {
        if !(sd > 0.0 && sd.is_finite()) {
            return Err(SignalError::StatisticsUndefined {
                channel,
                reason: format!("standard deviation {sd}"),
            });
        }
    }
    Ok(ZScoreStats {
        mean_x,
        mean_y,
        sd_x,
        sd_y,
    })
}

pub fn transform_fast(pairs: &[[f64; 2]], cfg: &TransformConfig, stats: &ZScoreStats) -> Vec<[f64; 2]> {
    let floor = stats.z_zero();
    pairs
        .iter()
        .map(|p| {
            if speed_below(p[0], p[1], cfg.v_min) {
                floor
            } else {
                [stats.z_x(p[0]), stats.z_y(p[1])]
            }
        })
        .collect()
}

/// Slow and fast views of the same velocity samples.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoScale {
    pub slow: Vec<[f64; 2]>,
    pub fast: Vec<[f64; 2]>,
}

impl TwoScale {
    pub fn new(v: &VelocitySequence, cfg: &TransformConfig, stats: &ZScoreStats) -> Self {
        Self {
            slow: transform_slow(&v.pairs, cfg),
            fast: transform_fast(&v.pairs, cfg, stats),
        }
    }

    pub fn len(&self) -> usize {
        self.slow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slow.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowOrigin {
    pub sequence: usize,
    pub start: usize,
}

/// One network input: `len × 2` slow and fast channels, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InputWindow {
    pub slow: Vec<f32>,
    pub fast: Vec<f32>,
    pub len: usize,
    pub label: Option<String>,
    pub origin: WindowOrigin,
}

pub fn window_count(n: usize, length: usize, stride: usize) -> usize {
    if n < length {
        0
    } else {
        (n - length) / stride + 1
    }
}

/// Cuts sliding windows of `length` samples every `stride` samples.
pub fn windows(views: &TwoScale, length: usize, stride: usize, label: Option<&str>, sequence: usize) -> Vec<InputWindow> {
    assert!(length >= 1 && stride >= 1, "window length and stride must be positive");
    let count = window_count(views.len(), length, stride);
    let flat = |v: &[[f64; 2]]| v.iter().flat_map(|p| [p[0] as f32, p[1] as f32]).collect::<Vec<f32>>();
    (0..count)
        .map(|i| {
            let start = i * stride;
            InputWindow {
                slow: flat(&views.slow[start..start + length]),
                fast: flat(&views.fast[start..start + length]),
                len: length,
                label: label.map(str::to_string),
                origin: WindowOrigin { sequence, start },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<Vec<GazeRecording>> {
        parse_recording(text.as_bytes(), &CsvFormat::default())
    }

    #[test]
    fn speed_threshold_is_exact_on_the_circle() {
        assert!(!speed_below(24.0, 32.0, 40.0));
        assert!(speed_below(24.0, 32.0f64.next_down(), 40.0));
        assert!(!speed_below(40.0, 0.0, 40.0));
        assert!(speed_below(0.0, 40.0f64.next_down(), 40.0));
        assert!(!speed_below(0.0, 0.0, 0.0));
        assert!(!speed_below(f64::NAN, 0.0, 40.0));
    }

    #[test]
    fn parses_three_rows() {
        let recs = parse("t_ms,x_deg,y_deg\n0,1.0,2.0\n1,1.1,2.0\n2,1.2,2.1\n").unwrap();
        assert_eq!(recs.len(), 1);
        let s = &recs[0].samples;
        assert_eq!(s.len(), 3);
        assert_eq!((s[2].t_ms, s[2].x, s[2].y), (2.0, 1.2, 2.1));
        assert_eq!(recs[0].eye, Eye::Unspecified);
    }

    #[test]
    fn short_nan_gap_is_interpolated() {
        let recs = parse("t_ms,x_deg,y_deg\n0,1.0,2.0\n1,NaN,NaN\n2,1.0,2.0\n").unwrap();
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].samples[1], Sample { t_ms: 1.0, x: 1.0, y: 2.0 });
    }

    #[test]
    fn long_nan_run_splits_recording() {
        let mut text = String::from("t_ms,x_deg,y_deg\n");
        for t in 0..100 {
            text.push_str(&format!("{t},0.5,0.5\n"));
        }
        for t in 100..300 {
            text.push_str(&format!("{t},NaN,0.5\n"));
        }
        for t in 300..400 {
            text.push_str(&format!("{t},0.7,0.5\n"));
        }
        let recs = parse(&text).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].len(), 100);
        assert_eq!(recs[1].samples[0].t_ms, 300.0);
    }

    #[test]
    fn fifty_ms_gap_is_repaired_fifty_one_is_not() {
        let build = |missing: usize| {
            let mut text = String::from("t_ms,x_deg,y_deg\n0,0,0\n");
            for t in 1..=missing {
                text.push_str(&format!("{t},NaN,NaN\n"));
            }
            text.push_str(&format!("{},1,1\n{},1,1\n", missing + 1, missing + 2));
            parse(&text).unwrap()
        };
        assert_eq!(build(50).len(), 1);
        // the first segment of the 51 ms case has a single sample and is dropped
        assert_eq!(build(51).len(), 1);
        assert_eq!(build(51)[0].samples[0].t_ms, 52.0);
    }

    #[test]
    fn malformed_row_reports_line() {
        let err = parse("t_ms,x_deg,y_deg\n0,1,2\n1,abc,2\n").unwrap_err();
        assert!(matches!(err, SignalError::Parse { line: 3, .. }), "{err}");
    }

    #[test]
    fn non_monotone_timestamps_rejected() {
        let err = parse("t_ms,x_deg,y_deg\n0,1,2\n2,1,2\n1,1,2\n").unwrap_err();
        assert!(matches!(err, SignalError::NonMonotonic { line: 4, .. }), "{err}");
    }

    #[test]
    fn eye_column_filtering() {
        let text = "t_ms,x_deg,y_deg,eye\n0,1,1,L\n0,2,2,R\n1,1,1,L\n1,2,2,R\n";
        assert!(matches!(parse(text).unwrap_err(), SignalError::MixedEyes));
        let fmt = CsvFormat {
            eye: Some(Eye::Right),
            ..CsvFormat::default()
        };
        let recs = parse_recording(text.as_bytes(), &fmt).unwrap();
        assert_eq!(recs[0].eye, Eye::Right);
        assert!(recs[0].samples.iter().all(|s| s.x == 2.0));
    }

    #[test]
    fn velocities_by_hand() {
        let rec = GazeRecording {
            samples: [0.0, 0.0001, 0.0003]
                .iter()
                .enumerate()
                .map(|(i, &x)| Sample { t_ms: i as f64, x, y: 0.0 })
                .collect(),
            rate: 1000.0,
            eye: Eye::Left,
            subject_id: "a".into(),
            session_id: "s".into(),
        };
        let v = to_velocities(&rec).unwrap();
        assert_eq!(v.len(), 2);
        assert!((v.pairs[0][0] - 0.1).abs() < 1e-12);
        assert!((v.pairs[1][0] - 0.2).abs() < 1e-12);
        assert_eq!(v.subject_id, "a");
    }

    #[test]
    fn velocity_of_constant_step_and_constant_gaze() {
        let mk = |step: f64| GazeRecording {
            samples: (0..5)
                .map(|i| Sample {
                    t_ms: i as f64,
                    x: step * i as f64,
                    y: 3.0,
                })
                .collect(),
            rate: 1000.0,
            eye: Eye::Unspecified,
            subject_id: String::new(),
            session_id: String::new(),
        };
        let v = to_velocities(&mk(0.03)).unwrap();
        assert!(v.pairs.iter().all(|p| (p[0] - 30.0).abs() < 1e-9 && p[1] == 0.0));
        assert!(to_velocities(&mk(0.0)).unwrap().pairs.iter().all(|p| *p == [0.0, 0.0]));
        let mut one = mk(0.0);
        one.samples.truncate(1);
        assert!(matches!(to_velocities(&one), Err(SignalError::EmptySequence(1))));
    }

    #[test]
    fn slow_transform_values() {
        let cfg = TransformConfig::default();
        let out = transform_slow(&[[0.0, 0.0], [25.0, 500.0]], &cfg);
        assert_eq!(out[0], [0.0, 0.0]);
        // tanh(0.5) and tanh(10) from their exponential definitions
        let tanh = |u: f64| (1.0 - (-2.0 * u).exp()) / (1.0 + (-2.0 * u).exp());
        assert!((out[1][0] - tanh(0.5)).abs() < 1e-12);
        assert!((out[1][0] - 0.46212).abs() < 1e-5);
        assert!((out[1][1] - tanh(10.0)).abs() < 1e-12);
        assert!(out[1][1] > 0.99999999 && out[1][1] < 1.0);
    }

    fn seq(pairs: Vec<[f64; 2]>) -> VelocitySequence {
        VelocitySequence {
            pairs,
            rate: 1000.0,
            eye: Eye::Unspecified,
            subject_id: String::new(),
            session_id: String::new(),
        }
    }

    #[test]
    fn zscore_uses_supra_threshold_samples_only() {
        let cfg = TransformConfig::default();
        let v = seq(vec![[40.0, 0.0], [60.0, 10.0], [1.0, 1.0], [-3.0, 2.0]]);
        let stats = fit_zscore([&v], &cfg).unwrap();
        assert_eq!(stats.mean_x, 50.0);
        assert_eq!(stats.sd_x, 10.0);
        assert_eq!(stats.mean_y, 5.0);
        assert_eq!(stats.sd_y, 5.0);
    }

    #[test]
    fn zscore_errors() {
        let cfg = TransformConfig::default();
        let slow = seq(vec![[1.0, 1.0], [2.0, 0.0]]);
        assert!(matches!(fit_zscore([&slow], &cfg), Err(SignalError::StatisticsUndefined { .. })));
        let constant_y = seq(vec![[50.0, 3.0], [70.0, 3.0]]);
        assert!(matches!(
            fit_zscore([&constant_y], &cfg),
            Err(SignalError::StatisticsUndefined { channel: 'y', .. })
        ));
    }

    #[test]
    fn fast_transform_cases() {
        let cfg = TransformConfig::default();
        let stats = ZScoreStats {
            mean_x: 50.0,
            mean_y: 2.0,
            sd_x: 10.0,
            sd_y: 4.0,
        };
        let out = transform_fast(&[[30.0, 20.0], [100.0, 0.0], [40.0, 0.0]], &cfg, &stats);
        // |(30, 20)| = √1300 ≈ 36.06 < 40
        assert_eq!(out[0], [-5.0, -0.5]);
        assert_eq!(out[1], [5.0, -0.5]);
        // exactly at the threshold is kept
        assert_eq!(out[2], [-1.0, -0.5]);
    }

    #[test]
    fn window_enumeration() {
        let views = |n: usize| TwoScale {
            slow: vec![[0.0, 0.0]; n],
            fast: vec![[0.0, 0.0]; n],
        };
        assert_eq!(windows(&views(1000), 1000, 1000, None, 0).len(), 1);
        assert_eq!(windows(&views(2500), 1000, 1000, None, 0).len(), 2);
        let w = windows(&views(1200), 1000, 50, Some("a"), 3);
        let starts: Vec<usize> = w.iter().map(|w| w.origin.start).collect();
        let mut expected = Vec::new();
        let mut s = 0;
        while s + 1000 <= 1200 {
            expected.push(s);
            s += 50;
        }
        assert_eq!(starts, expected);
        assert_eq!(starts, [0, 50, 100, 150, 200]);
        assert_eq!(w[0].origin.sequence, 3);
        assert!(windows(&views(999), 1000, 1, None, 0).is_empty());
    }

    #[test]
    fn config_domain_validation() {
        assert!(TransformConfig::default().validate(false).is_ok());
        let odd = TransformConfig { c: 0.03, v_min: 40.0 };
        assert!(odd.validate(false).is_err());
        assert!(odd.validate(true).is_ok());
        assert!(TransformConfig { c: 0.02, v_min: 50.0 }.validate(false).is_err());
    }
}
