//! Synthetic gaze generator with per-identity oculomotor parameters.
//!
//! A scanpath alternates fixations and saccades. Fixations carry a slow
//! drift random walk and occasional microsaccades; tremor and measurement
//! noise are laid over the whole recording. Saccades and microsaccades use a
//! raised-cosine velocity profile, whose position curve integrates in closed
//! form, so net displacements are exact.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::signal::{self, Eye, GazeRecording, Sample};

/// Saccade durations are clipped to this band (ms).
pub const SACCADE_DURATION_MS: (f64, f64) = (30.0, 80.0);
pub const SACCADE_PEAK_MAX: f64 = 500.0;
pub const MICROSACCADE_DURATION_MS: (f64, f64) = (6.0, 30.0);
pub const MICROSACCADE_PEAK: (f64, f64) = (15.0, 120.0);
pub const DRIFT_SPEED: (f64, f64) = (0.1, 0.4);
pub const TREMOR_FREQUENCY: (f64, f64) = (40.0, 100.0);
pub const TREMOR_VELOCITY_MAX: f64 = 0.3;
/// Smallest saccade amplitude (deg). Amplitudes are drawn from
/// `U[MIN, 2·mean − MIN]` so their mean is the identity's mean.
pub const SACCADE_AMPLITUDE_MIN: f64 = 2.0;
/// Saccade targets stay inside this radius (deg) around the screen centre.
const GAZE_RADIUS: f64 = 15.0;
/// Heading change of the drift random walk per sample (rad, sd).
const DRIFT_HEADING_SD: f64 = 0.05;
/// Per-event jitter of microsaccade peak velocity and duration.
const MICROSACCADE_JITTER: f64 = 0.2;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("population spec: {0}")]
    InvalidSpec(String),
    #[error("simulation config: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Write { path: PathBuf, source: signal::SignalError },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentityParams {
    pub fixation_mean_ms: f64,
    pub fixation_sd_ms: f64,
    /// Saccade duration `intercept + slope·amplitude` before clipping.
    pub saccade_duration_intercept_ms: f64,
    pub saccade_duration_slope_ms_per_deg: f64,
    pub saccade_amplitude_mean_deg: f64,
    /// Upper bound on saccade peak velocity (°/s); long saccades are
    /// stretched in time to respect it.
    pub saccade_peak_velocity: f64,
    pub microsaccade_rate_hz: f64,
    pub microsaccade_peak_velocity: f64,
    pub microsaccade_duration_ms: f64,
    pub drift_speed: f64,
    pub tremor_frequency_hz: f64,
    pub tremor_velocity_amplitude: f64,
    pub noise_sd_deg: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    fn within(&self, lo: f64, hi: f64) -> bool {
        self.lo.is_finite() && self.hi.is_finite() && lo <= self.lo && self.lo <= self.hi && self.hi <= hi
    }
}

/// Parameter ranges identities are drawn from.
///
/// Each parameter is `centre + separation·(u − ½)·width` with `u ~ U[0,1]`,
/// clipped to the range, so `separation = 1` draws uniformly over the range
/// and smaller values crowd identities toward the centre.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationSpec {
    pub fixation_mean_ms: Range,
    pub fixation_sd_ms: Range,
    pub saccade_duration_intercept_ms: Range,
    pub saccade_duration_slope_ms_per_deg: Range,
    pub saccade_amplitude_mean_deg: Range,
    pub saccade_peak_velocity: Range,
    pub microsaccade_rate_hz: Range,
    pub microsaccade_peak_velocity: Range,
    pub microsaccade_duration_ms: Range,
    pub drift_speed: Range,
    pub tremor_frequency_hz: Range,
    pub tremor_velocity_amplitude: Range,
    pub noise_sd_deg: Range,
    pub separation: f64,
}

impl Default for PopulationSpec {
    fn default() -> Self {
        Self {
            fixation_mean_ms: Range::new(200.0, 300.0),
            fixation_sd_ms: Range::new(30.0, 90.0),
            saccade_duration_intercept_ms: Range::new(20.0, 30.0),
            saccade_duration_slope_ms_per_deg: Range::new(2.0, 3.0),
            saccade_amplitude_mean_deg: Range::new(3.0, 7.0),
            saccade_peak_velocity: Range::new(350.0, 500.0),
            microsaccade_rate_hz: Range::new(0.5, 2.5),
            microsaccade_peak_velocity: Range::new(20.0, 100.0),
            microsaccade_duration_ms: Range::new(8.0, 25.0),
            drift_speed: Range::new(0.1, 0.4),
            tremor_frequency_hz: Range::new(40.0, 100.0),
            tremor_velocity_amplitude: Range::new(0.05, 0.3),
            noise_sd_deg: Range::new(0.0005, 0.002),
            separation: 1.0,
        }
    }
}

impl PopulationSpec {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, Range, f64, f64); 13] = [
            ("fixation_mean_ms", self.fixation_mean_ms, 150.0, 350.0),
            ("fixation_sd_ms", self.fixation_sd_ms, 1.0, 150.0),
            (
                "saccade_duration_intercept_ms",
                self.saccade_duration_intercept_ms,
                0.0,
                SACCADE_DURATION_MS.1,
            ),
            (
                "saccade_duration_slope_ms_per_deg",
                self.saccade_duration_slope_ms_per_deg,
                0.0,
                10.0,
            ),
            ("saccade_amplitude_mean_deg", self.saccade_amplitude_mean_deg, 2.5, 10.0),
            ("saccade_peak_velocity", self.saccade_peak_velocity, 100.0, SACCADE_PEAK_MAX),
            ("microsaccade_rate_hz", self.microsaccade_rate_hz, 0.0, 5.0),
            (
                "microsaccade_peak_velocity",
                self.microsaccade_peak_velocity,
                MICROSACCADE_PEAK.0,
                MICROSACCADE_PEAK.1,
            ),
            (
                "microsaccade_duration_ms",
                self.microsaccade_duration_ms,
                MICROSACCADE_DURATION_MS.0,
                MICROSACCADE_DURATION_MS.1,
            ),
            ("drift_speed", self.drift_speed, DRIFT_SPEED.0, DRIFT_SPEED.1),
            (
                "tremor_frequency_hz",
                self.tremor_frequency_hz,
                TREMOR_FREQUENCY.0,
                TREMOR_FREQUENCY.1,
            ),
            (
                "tremor_velocity_amplitude",
                self.tremor_velocity_amplitude,
                0.0,
                TREMOR_VELOCITY_MAX,
            ),
            ("noise_sd_deg", self.noise_sd_deg, 0.0, 0.01),
        ];
        for (name, range, lo, hi) in checks {
            if !range.within(lo, hi) {
                return Err(SimError::InvalidSpec(format!(
                    "{name} range [{}, {}] outside [{lo}, {hi}]",
                    range.lo, range.hi
                )));
            }
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return Err(SimError::InvalidSpec(format!("separation {} must be >= 0", self.separation)));
        }
        // the largest saccade must fit its peak-velocity cap within 80 ms
        let a_max = 2.0 * self.saccade_amplitude_mean_deg.hi - SACCADE_AMPLITUDE_MIN;
        let needed = 2.0 * a_max * 1000.0 / SACCADE_DURATION_MS.1;
        if needed > self.saccade_peak_velocity.lo {
            return Err(SimError::InvalidSpec(format!(
                "{a_max}° saccades need {needed:.0} °/s within 80 ms, above the lowest peak cap {}",
                self.saccade_peak_velocity.lo
            )));
        }
        Ok(())
    }
}

/// Draws one identity. Parameters are independent of each other.
pub fn sample_identity<R: Rng>(rng: &mut R, spec: &PopulationSpec) -> Result<IdentityParams> {
    spec.validate()?;
    let mut draw = |r: Range| {
        let centre = 0.5 * (r.lo + r.hi);
        let u: f64 = rng.random();
        (centre + spec.separation * (u - 0.5) * (r.hi - r.lo)).clamp(r.lo, r.hi)
    };
    Ok(IdentityParams {
        fixation_mean_ms: draw(spec.fixation_mean_ms),
        fixation_sd_ms: draw(spec.fixation_sd_ms),
        saccade_duration_intercept_ms: draw(spec.saccade_duration_intercept_ms),
        saccade_duration_slope_ms_per_deg: draw(spec.saccade_duration_slope_ms_per_deg),
        saccade_amplitude_mean_deg: draw(spec.saccade_amplitude_mean_deg),
        saccade_peak_velocity: draw(spec.saccade_peak_velocity),
        microsaccade_rate_hz: draw(spec.microsaccade_rate_hz),
        microsaccade_peak_velocity: draw(spec.microsaccade_peak_velocity),
        microsaccade_duration_ms: draw(spec.microsaccade_duration_ms),
        drift_speed: draw(spec.drift_speed),
        tremor_frequency_hz: draw(spec.tremor_frequency_hz),
        tremor_velocity_amplitude: draw(spec.tremor_velocity_amplitude),
        noise_sd_deg: draw(spec.noise_sd_deg),
    })
}

/// Normalized raised-cosine position curve: `s − sin(2πs)/(2π)` on `[0, 1]`.
/// Its derivative `1 − cos(2πs)` peaks at 2 in the middle.
fn raised_cosine_position(s: f64) -> f64 {
    s - (TAU * s).sin() / TAU
}

/// Displacements `A·u(k/n)` for `k = 1..=n`, along `heading`.
fn raised_cosine_path(amplitude: f64, n: usize, heading: f64) -> Vec<[f64; 2]> {
    let (sin, cos) = heading.sin_cos();
    (1..=n)
        .map(|k| {
            let d = amplitude * raised_cosine_position(k as f64 / n as f64);
            [d * cos, d * sin]
        })
        .collect()
}

/// Saccade duration (ms) before sampling: the main-sequence line, clipped to
/// 30–80 ms, then lengthened if the peak `2A/D` would exceed the cap.
pub fn saccade_duration_ms(p: &IdentityParams, amplitude_deg: f64) -> f64 {
    let (lo, hi) = SACCADE_DURATION_MS;
    let d = (p.saccade_duration_intercept_ms + p.saccade_duration_slope_ms_per_deg * amplitude_deg).clamp(lo, hi);
    let cap = p.saccade_peak_velocity.min(SACCADE_PEAK_MAX);
    d.max(2.0 * amplitude_deg * 1000.0 / cap).min(hi)
}

fn saccade_samples(p: &IdentityParams, amplitude_deg: f64, rate: f64) -> usize {
    if amplitude_deg <= 0.0 {
        return 0;
    }
    // rounding up keeps the sampled peak at or below the cap
    (saccade_duration_ms(p, amplitude_deg) * rate / 1000.0 - 1e-9).ceil().max(1.0) as usize
}

/// Displacements of one saccade relative to its starting point, one per
/// sample. The last entry is the full displacement. Direction is uniform.
pub fn synth_saccade_segment<R: Rng>(p: &IdentityParams, amplitude_deg: f64, rate: f64, rng: &mut R) -> Vec<[f64; 2]> {
    let heading = rng.random::<f64>() * TAU;
    raised_cosine_path(amplitude_deg, saccade_samples(p, amplitude_deg, rate), heading)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SegmentKind {
    Fixation,
    Saccade,
    Microsaccade,
}

/// Bookkeeping of generated events, in sample indices `[start, start+len)`.
/// Microsaccades are logged inside their fixation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

/// Drift plus microsaccades, without tremor or noise. Returns displacements
/// and the microsaccade intervals relative to the segment start.
fn fixation_path<R: Rng>(p: &IdentityParams, n: usize, rate: f64, rng: &mut R) -> (Vec<[f64; 2]>, Vec<Segment>) {
    let heading_noise = Normal::new(0.0, DRIFT_HEADING_SD).expect("finite sd");
    let step = p.drift_speed / rate;
    let mut heading = rng.random::<f64>() * TAU;
    let mut pos = [0.0f64; 2];
    let mut out = Vec::with_capacity(n);
    let mut events = Vec::new();
    let mut active: Option<(Vec<[f64; 2]>, usize)> = None;
    let start_prob = p.microsaccade_rate_hz / rate;
    let mut i = 0;
    while i < n {
        heading += heading_noise.sample(rng);
        pos[0] += step * heading.cos();
        pos[1] += step * heading.sin();
        if active.is_none() && rng.random::<f64>() < start_prob {
            let jitter = |rng: &mut R| 1.0 + MICROSACCADE_JITTER * (2.0 * rng.random::<f64>() - 1.0);
            let dur = (p.microsaccade_duration_ms * jitter(rng)).clamp(MICROSACCADE_DURATION_MS.0, MICROSACCADE_DURATION_MS.1);
            let peak = (p.microsaccade_peak_velocity * jitter(rng)).clamp(MICROSACCADE_PEAK.0, MICROSACCADE_PEAK.1);
            let len = ((dur * rate / 1000.0).round() as usize).max(1);
            if i + len <= n {
                // amplitude chosen so the continuous peak 2A/D equals `peak`
                let amplitude = peak * (len as f64 / rate) / 2.0;
                let path = raised_cosine_path(amplitude, len, rng.random::<f64>() * TAU);
                events.push(Segment {
                    kind: SegmentKind::Microsaccade,
                    start: i,
                    len,
                });
                active = Some((path, 0));
            }
        }
        let mut offset = [0.0, 0.0];
        if let Some((path, k)) = active.as_mut() {
            offset = path[*k];
            *k += 1;
            if *k == path.len() {
                // fold the completed jump into the running position
                pos[0] += offset[0];
                pos[1] += offset[1];
                offset = [0.0, 0.0];
                active = None;
            }
        }
        out.push([pos[0] + offset[0], pos[1] + offset[1]]);
        i += 1;
    }
    (out, events)
}

fn tremor<R: Rng>(p: &IdentityParams, rng: &mut R) -> impl Fn(f64) -> [f64; 2] {
    let amp = p.tremor_velocity_amplitude / (TAU * p.tremor_frequency_hz);
    let w = TAU * p.tremor_frequency_hz;
    let (px, py) = (rng.random::<f64>() * TAU, rng.random::<f64>() * TAU);
    move |t_s| [amp * (w * t_s + px).sin(), amp * (w * t_s + py).sin()]
}

fn add_tremor_and_noise<R: Rng>(path: &mut [[f64; 2]], p: &IdentityParams, rate: f64, rng: &mut R) {
    let tremor = tremor(p, rng);
    let noise = Normal::new(0.0, p.noise_sd_deg).expect("finite sd");
    for (i, q) in path.iter_mut().enumerate() {
        let tr = tremor(i as f64 / rate);
        q[0] += tr[0] + noise.sample(rng);
        q[1] += tr[1] + noise.sample(rng);
    }
}

/// Displacements of one fixation: drift walk, microsaccades, tremor and
/// white noise.
pub fn synth_fixation_segment<R: Rng>(p: &IdentityParams, duration_ms: f64, rate: f64, rng: &mut R) -> Vec<[f64; 2]> {
    let n = (duration_ms * rate / 1000.0).round() as usize;
    let (mut path, _) = fixation_path(p, n, rate, rng);
    add_tremor_and_noise(&mut path, p, rate, rng);
    path
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub rate: f64,
    pub duration_s: f64,
    pub identity_count: usize,
    pub sessions_per_identity: usize,
    pub seed: u64,
    /// Emit both eyes in each file (shared scanpath, independent tremor
    /// phase and noise).
    pub binocular: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rate: 1000.0,
            duration_s: 60.0,
            identity_count: 10,
            sessions_per_identity: 2,
            seed: 0,
            binocular: false,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rate.is_finite() && self.rate > 0.0) {
            return Err(SimError::InvalidConfig(format!("rate must be positive, got {}", self.rate)));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 1.0) {
            return Err(SimError::InvalidConfig(format!(
                "duration must exceed 1 s, got {}",
                self.duration_s
            )));
        }
        if self.identity_count == 0 || self.sessions_per_identity == 0 {
            return Err(SimError::InvalidConfig("need at least one identity and one session".into()));
        }
        Ok(())
    }

    pub fn sample_count(&self) -> usize {
        (self.duration_s * self.rate).round() as usize
    }
}

/// A generated session: one recording per eye plus the event log.
#[derive(Debug, Clone)]
pub struct Scanpath {
    pub recordings: Vec<GazeRecording>,
    pub segments: Vec<Segment>,
}

impl Scanpath {
    /// Fraction of samples spent in fixation according to the event log.
    pub fn fixation_fraction(&self) -> f64 {
        let total: usize = self
            .segments
            .iter()
            .filter(|s| s.kind != SegmentKind::Microsaccade)
            .map(|s| s.len)
            .sum();
        let fix: usize = self
            .segments
            .iter()
            .filter(|s| s.kind == SegmentKind::Fixation)
            .map(|s| s.len)
            .sum();
        fix as f64 / total.max(1) as f64
    }
}

fn saccade_heading<R: Rng>(pos: [f64; 2], amplitude: f64, rng: &mut R) -> f64 {
    let heading = rng.random::<f64>() * TAU;
    let end = [pos[0] + amplitude * heading.cos(), pos[1] + amplitude * heading.sin()];
    if end[0].hypot(end[1]) <= GAZE_RADIUS {
        heading
    } else {
        // head back toward the centre, within ±45°
        pos[1].atan2(pos[0]) + std::f64::consts::PI + (rng.random::<f64>() - 0.5) * std::f64::consts::FRAC_PI_2
    }
}

/// Generates one session. `eyes` lists the recordings to emit; they share the
/// fixation/saccade path and differ in tremor phase and noise.
pub fn simulate_scanpath(
    p: &IdentityParams,
    cfg: &SimConfig,
    seed: u64,
    eyes: &[Eye],
    subject_id: &str,
    session_id: &str,
) -> Result<Scanpath> {
    cfg.validate()?;
    let rate = cfg.rate;
    let total = cfg.sample_count();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fix_dist = Gamma::new(
        (p.fixation_mean_ms / p.fixation_sd_ms).powi(2),
        p.fixation_sd_ms.powi(2) / p.fixation_mean_ms,
    )
    .map_err(|e| SimError::InvalidSpec(format!("fixation duration: {e}")))?;
    let a_hi = 2.0 * p.saccade_amplitude_mean_deg - SACCADE_AMPLITUDE_MIN;

    let mut base: Vec<[f64; 2]> = Vec::with_capacity(total);
    let mut segments = Vec::new();
    let mut pos = [0.0f64; 2];
    while base.len() < total {
        let remaining = total - base.len();
        let fix_ms: f64 = fix_dist.sample(&mut rng);
        let n_fix = ((fix_ms * rate / 1000.0).round() as usize).clamp(1, remaining);
        let (fix, events) = fixation_path(p, n_fix, rate, &mut rng);
        let start = base.len();
        segments.push(Segment {
            kind: SegmentKind::Fixation,
            start,
            len: n_fix,
        });
        segments.extend(events.into_iter().map(|e| Segment {
            start: start + e.start,
            ..e
        }));
        base.extend(fix.iter().map(|d| [pos[0] + d[0], pos[1] + d[1]]));
        pos = *base.last().expect("non-empty fixation");
        if base.len() == total {
            break;
        }
        let amplitude = rng.random_range(SACCADE_AMPLITUDE_MIN..=a_hi.max(SACCADE_AMPLITUDE_MIN));
        let heading = saccade_heading(pos, amplitude, &mut rng);
        let n_sac = saccade_samples(p, amplitude, rate);
        let sac = raised_cosine_path(amplitude, n_sac, heading);
        let take = n_sac.min(total - base.len());
        segments.push(Segment {
            kind: SegmentKind::Saccade,
            start: base.len(),
            len: take,
        });
        base.extend(sac[..take].iter().map(|d| [pos[0] + d[0], pos[1] + d[1]]));
        pos = *base.last().expect("non-empty saccade");
    }

    let recordings = eyes
        .iter()
        .enumerate()
        .map(|(k, &eye)| {
            let mut eye_rng = ChaCha8Rng::seed_from_u64(seed);
            eye_rng.set_stream(1 + k as u64);
            let mut path = base.clone();
            add_tremor_and_noise(&mut path, p, rate, &mut eye_rng);
            GazeRecording {
                samples: path
                    .iter()
                    .enumerate()
                    .map(|(i, q)| Sample {
                        t_ms: i as f64 * 1000.0 / rate,
                        x: q[0],
                        y: q[1],
                    })
                    .collect(),
                rate,
                eye,
                subject_id: subject_id.to_string(),
                session_id: session_id.to_string(),
            }
        })
        .collect();
    Ok(Scanpath { recordings, segments })
}

/// SplitMix64 finalizer, used to derive independent child seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(seed) ^ a) ^ b)
}

pub fn subject_name(i: usize) -> String {
    format!("s{i:03}")
}

pub fn session_name(j: usize) -> String {
    format!("{}", j + 1)
}

pub fn file_name(subject: &str, session: &str) -> String {
    format!("{subject}_{session}.csv")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestIdentity {
    pub subject_id: String,
    pub seed: u64,
    pub params: IdentityParams,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecording {
    pub subject_id: String,
    pub session_id: String,
    pub file: String,
    pub seed: u64,
    pub eyes: Vec<Eye>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: SimConfig,
    pub population: PopulationSpec,
    pub identities: Vec<ManifestIdentity>,
    pub recordings: Vec<ManifestRecording>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// One generated session held in memory.
#[derive(Debug, Clone)]
pub struct Session {
    pub subject_id: String,
    pub session_id: String,
    pub seed: u64,
    pub recordings: Vec<GazeRecording>,
}

/// Generates every identity and session in memory. Identity `i` uses seed
/// `derive(seed, i, 0)`; its session `j` uses `derive(seed, i, j + 1)`.
pub fn generate_dataset(cfg: &SimConfig, spec: &PopulationSpec) -> Result<(Vec<ManifestIdentity>, Vec<Session>)> {
    cfg.validate()?;
    spec.validate()?;
    let eyes: &[Eye] = if cfg.binocular {
        &[Eye::Left, Eye::Right]
    } else {
        &[Eye::Unspecified]
    };
    let mut identities = Vec::with_capacity(cfg.identity_count);
    let mut sessions = Vec::new();
    for i in 0..cfg.identity_count {
        let id_seed = derive_seed(cfg.seed, i as u64, 0);
        let params = sample_identity(&mut ChaCha8Rng::seed_from_u64(id_seed), spec)?;
        let subject_id = subject_name(i);
        for j in 0..cfg.sessions_per_identity {
            let seed = derive_seed(cfg.seed, i as u64, j as u64 + 1);
            let session_id = session_name(j);
            let path = simulate_scanpath(&params, cfg, seed, eyes, &subject_id, &session_id)?;
            sessions.push(Session {
                subject_id: subject_id.clone(),
                session_id,
                seed,
                recordings: path.recordings,
            });
        }
        identities.push(ManifestIdentity {
            subject_id,
            seed: id_seed,
            params,
        });
    }
    Ok((identities, sessions))
}

/// Writes one gaze CSV per session plus `manifest.json` into `out_dir`.
pub fn make_dataset(cfg: &SimConfig, spec: &PopulationSpec, out_dir: &Path) -> Result<Manifest> {
    let (identities, sessions) = generate_dataset(cfg, spec)?;
    fs::create_dir_all(out_dir).map_err(|source| SimError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;
    let mut recordings = Vec::with_capacity(sessions.len());
    for s in &sessions {
        let file = file_name(&s.subject_id, &s.session_id);
        let path = out_dir.join(&file);
        let f = fs::File::create(&path).map_err(|source| SimError::Io {
            path: path.clone(),
            source,
        })?;
        let refs: Vec<&GazeRecording> = s.recordings.iter().collect();
        signal::write_recordings(std::io::BufWriter::new(f), &refs).map_err(|source| SimError::Write { path, source })?;
        recordings.push(ManifestRecording {
            subject_id: s.subject_id.clone(),
            session_id: s.session_id.clone(),
            file,
            seed: s.seed,
            eyes: s.recordings.iter().map(|r| r.eye).collect(),
        });
    }
    let manifest = Manifest {
        config: cfg.clone(),
        population: spec.clone(),
        identities,
        recordings,
    };
    let path = out_dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, json).map_err(|source| SimError::Io { path, source })?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|source| SimError::Io { path, source })?;
    Ok(serde_json::from_str(&text)?)
}
