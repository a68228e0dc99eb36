//! Evaluation: accuracy versus input duration, enrollment and matching,
//! ROC/AUC/EER, time to identification and binocular fusion.

use std::collections::BTreeSet;
use std::io::Write;

use log::warn;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{EmbeddingVector, Head, ModelBundle, ModelError};
use crate::signal::VelocitySequence;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cosine similarity undefined for a zero vector")]
    ZeroVector,
    #[error("embedding lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{0} score set is empty")]
    EmptyScores(&'static str),
    #[error("no enrollment windows for user {0:?}")]
    NoEnrollmentWindows(String),
    #[error("sequence has no label")]
    MissingLabel,
    #[error("label {0:?} is not a class of this model")]
    UnknownLabel(String),
    #[error("left and right eye sequences are not aligned: {0}")]
    Unaligned(String),
    #[error("protocol needs {needed} identities, have {available}")]
    InsufficientIdentities { needed: usize, available: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

pub const DEFAULT_DURATIONS: [f64; 7] = [1.0, 2.0, 5.0, 10.0, 20.0, 40.0, 90.0];

pub fn cosine(u: &EmbeddingVector, v: &EmbeddingVector) -> Result<f64> {
    if u.len() != v.len() {
        return Err(EvalError::LengthMismatch(u.len(), v.len()));
    }
    if u.norm == 0.0 || v.norm == 0.0 {
        return Err(EvalError::ZeroVector);
    }
    let dot: f64 = u.values.iter().zip(&v.values).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
    Ok((dot / (u.norm * v.norm)).clamp(-1.0, 1.0))
}

/// Window-level class probabilities of one labeled test sequence.
#[derive(Debug, Clone)]
pub struct SequenceScores {
    pub label: usize,
    pub starts: Vec<usize>,
    pub probs: Vec<Vec<f64>>,
    pub samples: usize,
    pub rate: f64,
    pub window_len: usize,
}

pub fn score_sequence(bundle: &ModelBundle, seq: &VelocitySequence, stride: usize, head: Head) -> Result<SequenceScores> {
    if seq.subject_id.is_empty() {
        return Err(EvalError::MissingLabel);
    }
    let label = bundle
        .label_index(&seq.subject_id)
        .ok_or_else(|| EvalError::UnknownLabel(seq.subject_id.clone()))?;
    let windows = bundle.windows_for(seq, stride, 0);
    let refs: Vec<_> = windows.iter().collect();
    let probs = bundle.predict(&refs, head)?;
    Ok(SequenceScores {
        label,
        starts: windows.iter().map(|w| w.origin.start).collect(),
        probs,
        samples: seq.len(),
        rate: seq.rate,
        window_len: bundle.config.window_len,
    })
}

/// Elementwise mean of two probability vectors.
pub fn binocular_fuse(left: &[f64], right: &[f64]) -> Result<Vec<f64>> {
    if left.len() != right.len() {
        return Err(EvalError::LengthMismatch(left.len(), right.len()));
    }
    Ok(left.iter().zip(right).map(|(a, b)| 0.5 * (a + b)).collect())
}

/// Fuses synchronized left/right window scores of the same sequence.
pub fn fuse_sequences(left: &SequenceScores, right: &SequenceScores) -> Result<SequenceScores> {
    if left.label != right.label || left.starts != right.starts {
        return Err(EvalError::Unaligned(format!(
            "labels {}/{}, {}/{} windows",
            left.label,
            right.label,
            left.starts.len(),
            right.starts.len()
        )));
    }
    let probs = left
        .probs
        .iter()
        .zip(&right.probs)
        .map(|(l, r)| binocular_fuse(l, r))
        .collect::<Result<_>>()?;
    Ok(SequenceScores { probs, ..left.clone() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationAccuracy {
    pub duration_s: f64,
    pub accuracy: f64,
    pub stderr: f64,
    pub sequences: usize,
}

fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate() {
        if v > p[best] {
            best = i;
        }
    }
    best
}

/// For each duration `d`, averages the probabilities of every window that
/// lies entirely within the first `d` seconds, takes the argmax and scores it
/// against the label. Mean and standard error are taken across sequences;
/// sequences shorter than `d` are left out of that duration.
pub fn accuracy_vs_duration(scores: &[SequenceScores], durations: &[f64]) -> Vec<DurationAccuracy> {
    durations
        .iter()
        .map(|&d| {
            let mut outcomes = Vec::new();
            let mut skipped = 0;
            for s in scores {
                let limit = (d * s.rate).round() as usize;
                if s.samples < limit || limit < s.window_len {
                    skipped += 1;
                    continue;
                }
                let mut sum = vec![0.0; s.probs.first().map_or(0, Vec::len)];
                let mut n = 0;
                for (start, p) in s.starts.iter().zip(&s.probs) {
                    if start + s.window_len <= limit {
                        for (a, b) in sum.iter_mut().zip(p) {
                            *a += b;
                        }
                        n += 1;
                    }
                }
                if n == 0 {
                    skipped += 1;
                    continue;
                }
                outcomes.push(if argmax(&sum) == s.label { 1.0 } else { 0.0 });
            }
            if skipped > 0 {
                warn!("{skipped} sequence(s) shorter than {d} s excluded");
            }
            let (accuracy, stderr) = mean_stderr(&outcomes);
            DurationAccuracy {
                duration_s: d,
                accuracy,
                stderr,
                sequences: outcomes.len(),
            }
        })
        .collect()
}

/// Mean and standard error of the mean (sample standard deviation / √n).
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

pub fn write_duration_csv<W: Write>(w: W, rows: &[DurationAccuracy]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["duration_s", "accuracy", "stderr", "sequences"])?;
    for r in rows {
        out.write_record([
            r.duration_s.to_string(),
            r.accuracy.to_string(),
            r.stderr.to_string(),
            r.sequences.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnrollmentTemplate {
    pub user_id: String,
    pub embeddings: Vec<EmbeddingVector>,
}

/// Embeds every enrollment window of `user_id` at `stride`.
pub fn enroll(bundle: &ModelBundle, user_id: &str, seqs: &[VelocitySequence], stride: usize) -> Result<EnrollmentTemplate> {
    let windows: Vec<_> = seqs
        .iter()
        .enumerate()
        .flat_map(|(i, s)| bundle.windows_for(s, stride, i))
        .collect();
    if windows.is_empty() {
        return Err(EvalError::NoEnrollmentWindows(user_id.to_string()));
    }
    let refs: Vec<_> = windows.iter().collect();
    Ok(EnrollmentTemplate {
        user_id: user_id.to_string(),
        embeddings: bundle.embed(&refs)?,
    })
}

/// Similarities of successive test windows against a template.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchTrace {
    /// Best similarity of each window to any enrollment embedding.
    pub per_window: Vec<f64>,
    /// Running maximum of `per_window`: the decision statistic after each
    /// window.
    pub running_max: Vec<f64>,
}

impl MatchTrace {
    pub fn final_score(&self) -> Option<f64> {
        self.running_max.last().copied()
    }
}

pub fn match_score(template: &EnrollmentTemplate, test: &[EmbeddingVector]) -> Result<MatchTrace> {
    let mut per_window = Vec::with_capacity(test.len());
    for t in test {
        let mut best = f64::NEG_INFINITY;
        for e in &template.embeddings {
            best = best.max(cosine(e, t)?);
        }
        per_window.push(best);
    }
    let mut running_max = Vec::with_capacity(per_window.len());
    let mut m = f64::NEG_INFINITY;
    for &s in &per_window {
        m = m.max(s);
        running_max.push(m);
    }
    Ok(MatchTrace { per_window, running_max })
}

/// Seconds until the running maximum first exceeds `threshold`: the end
/// time `(i·stride + len)/rate` of the deciding window `i`.
pub fn time_to_identification(trace: &MatchTrace, threshold: f64, stride: usize, window_len: usize, rate: f64) -> Option<f64> {
    trace
        .running_max
        .iter()
        .position(|&s| s > threshold)
        .map(|i| (i * stride + window_len) as f64 / rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    Confusion,
    Impostor,
    Verification,
}

impl Setting {
    pub fn name(self) -> &'static str {
        match self {
            Setting::Confusion => "confusion",
            Setting::Impostor => "impostor",
            Setting::Verification => "verification",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
    /// Raw counts `(false positives, true positives)` behind the rates.
    pub fp: usize,
    pub tp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub setting: Setting,
    pub genuine: usize,
    pub impostor: usize,
    /// Sorted by ascending threshold, starting at −∞ (where every score is
    /// accepted) and ending at the largest score (where none is).
    pub points: Vec<RocPoint>,
}

/// Threshold sweep over −∞ and every distinct score. A score is accepted
/// when it is strictly greater than the threshold.
pub fn roc(genuine: &[f64], impostor: &[f64], setting: Setting) -> Result<RocCurve> {
    if genuine.is_empty() {
        return Err(EvalError::EmptyScores("genuine"));
    }
    if impostor.is_empty() {
        return Err(EvalError::EmptyScores("impostor"));
    }
    let mut g = genuine.to_vec();
    let mut im = impostor.to_vec();
    g.sort_by(f64::total_cmp);
    im.sort_by(f64::total_cmp);
    let mut thresholds: Vec<f64> = g.iter().chain(&im).copied().collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let (ng, ni) = (g.len(), im.len());
    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 1.0,
        tpr: 1.0,
        fp: ni,
        tp: ng,
    }];
    let (mut gi, mut ii) = (0, 0);
    for &t in &thresholds {
        while gi < ng && g[gi] <= t {
            gi += 1;
        }
        while ii < ni && im[ii] <= t {
            ii += 1;
        }
        let (tp, fp) = (ng - gi, ni - ii);
        points.push(RocPoint {
            threshold: t,
            fpr: fp as f64 / ni as f64,
            tpr: tp as f64 / ng as f64,
            fp,
            tp,
        });
    }
    Ok(RocCurve {
        setting,
        genuine: ng,
        impostor: ni,
        points,
    })
}

/// Trapezoidal area under the curve, accumulated in integer counts so it
/// equals the tie-corrected probability that a genuine score beats an
/// impostor score.
pub fn auc(curve: &RocCurve) -> f64 {
    let twice: u128 = curve
        .points
        .windows(2)
        .map(|w| (w[0].fp - w[1].fp) as u128 * (w[0].tp + w[1].tp) as u128)
        .sum();
    twice as f64 / (2 * curve.genuine as u128 * curve.impostor as u128) as f64
}

/// Equal error rate: where `fpr = 1 − tpr`, interpolating linearly between
/// the two sweep points that bracket the crossing. Worked in integer counts
/// with one final division, so the result is the correctly rounded exact
/// value.
pub fn eer(curve: &RocCurve) -> f64 {
    let (g, i) = (curve.genuine as i128, curve.impostor as i128);
    // (fpr − fnr)·G·I
    let d = |p: &RocPoint| p.fp as i128 * g - (g - p.tp as i128) * i;
    for w in curve.points.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (da, db) = (d(a), d(b));
        if da == 0 {
            return a.fp as f64 / i as f64;
        }
        if db == 0 {
            return b.fp as f64 / i as f64;
        }
        if da > 0 && db < 0 {
            let (fa, fb) = (a.fp as i128, b.fp as i128);
            let num = fa * (da - db) + da * (fb - fa);
            return num as f64 / (i * (da - db)) as f64;
        }
    }
    // the sweep always runs from d = 1 down to d = −1
    unreachable!("ROC sweep without an fpr/fnr crossing")
}

pub fn write_roc_csv<W: Write>(w: W, curve: &RocCurve) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["setting", "threshold", "fpr", "tpr"])?;
    for p in &curve.points {
        out.write_record([
            curve.setting.name().to_string(),
            p.threshold.to_string(),
            p.fpr.to_string(),
            p.tpr.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a ROC CSV written by [`write_roc_csv`] back into a curve. Counts
/// are not stored, so they are recovered from the rates and the given score
/// set sizes.
pub fn read_roc_csv<R: std::io::Read>(r: R, genuine: usize, impostor: usize) -> Result<RocCurve> {
    let mut rdr = csv::Reader::from_reader(r);
    let mut points = Vec::new();
    let mut setting = Setting::Verification;
    for rec in rdr.records() {
        let rec = rec?;
        setting = match &rec[0] {
            "confusion" => Setting::Confusion,
            "impostor" => Setting::Impostor,
            _ => Setting::Verification,
        };
        let num = |i: usize| rec[i].parse::<f64>().unwrap_or(f64::NAN);
        let (fpr, tpr) = (num(2), num(3));
        points.push(RocPoint {
            threshold: num(1),
            fpr,
            tpr,
            fp: (fpr * impostor as f64).round() as usize,
            tp: (tpr * genuine as f64).round() as usize,
        });
    }
    Ok(RocCurve {
        setting,
        genuine,
        impostor,
        points,
    })
}

/// Identity counts of a resampling split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: usize,
    pub enrolled: usize,
    pub impostors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    pub train: Vec<String>,
    pub enrolled: Vec<String>,
    pub impostors: Vec<String>,
}

/// Draws disjoint train / enrolled / impostor identity sets.
pub fn resample_protocol<R: Rng>(identities: &[String], spec: SplitSpec, rng: &mut R) -> Result<Partition> {
    let unique: BTreeSet<&String> = identities.iter().collect();
    let needed = spec.train + spec.enrolled + spec.impostors;
    if unique.len() < needed {
        return Err(EvalError::InsufficientIdentities {
            needed,
            available: unique.len(),
        });
    }
    let mut ids: Vec<String> = unique.into_iter().cloned().collect();
    ids.shuffle(rng);
    let mut take = |n: usize| {
        let mut part: Vec<String> = ids.drain(..n).collect();
        part.sort();
        part
    };
    Ok(Partition {
        train: take(spec.train),
        enrolled: take(spec.enrolled),
        impostors: take(spec.impostors),
    })
}

/// One test stream's final score against one template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub test_user: String,
    pub template_user: String,
    pub stream: usize,
    pub score: f64,
    pub genuine: bool,
}

/// Scores of an identification run, split by setting.
#[derive(Debug, Clone, Default)]
pub struct IdentificationScores {
    pub genuine: Vec<f64>,
    /// Enrolled users matched against other enrolled users' templates.
    pub confusion: Vec<f64>,
    /// Non-enrolled users matched against every template.
    pub impostor: Vec<f64>,
    pub decisions: Vec<Decision>,
}

/// Embeddings of one test stream.
pub struct TestStream {
    pub user_id: String,
    pub embeddings: Vec<EmbeddingVector>,
}

/// Scores every test stream against every template by the stream's final
/// running-max similarity.
pub fn identification_scores(templates: &[EnrollmentTemplate], streams: &[TestStream]) -> Result<IdentificationScores> {
    let enrolled: BTreeSet<&str> = templates.iter().map(|t| t.user_id.as_str()).collect();
    let mut out = IdentificationScores::default();
    for (k, s) in streams.iter().enumerate() {
        let is_enrolled = enrolled.contains(s.user_id.as_str());
        for t in templates {
            let Some(score) = match_score(t, &s.embeddings)?.final_score() else {
                continue;
            };
            let genuine = t.user_id == s.user_id;
            if genuine {
                out.genuine.push(score);
            } else if is_enrolled {
                out.confusion.push(score);
            } else {
                out.impostor.push(score);
            }
            out.decisions.push(Decision {
                test_user: s.user_id.clone(),
                template_user: t.user_id.clone(),
                stream: k,
                score,
                genuine,
            });
        }
    }
    Ok(out)
}

pub fn write_embeddings_csv<W: Write>(w: W, rows: &[(String, usize, &EmbeddingVector)]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let dim = rows.first().map_or(0, |r| r.2.len());
    let mut header = vec!["user_id".to_string(), "window_start".to_string()];
    header.extend((0..dim).map(|i| format!("e{i}")));
    out.write_record(&header)?;
    for (user, start, e) in rows {
        let mut rec = vec![user.clone(), start.to_string()];
        rec.extend(e.values.iter().map(|v| v.to_string()));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn predicted_label(bundle: &ModelBundle, probs: &[f64]) -> String {
    bundle.labels[argmax(probs)].clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(v: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec())
    }

    #[test]
    fn cosine_hand_cases() {
        assert_eq!(cosine(&ev(&[1.0, 0.0]), &ev(&[1.0, 0.0])).unwrap(), 1.0);
        assert_eq!(cosine(&ev(&[1.0, 0.0]), &ev(&[0.0, 1.0])).unwrap(), 0.0);
        let c = cosine(&ev(&[1.0, 1.0]), &ev(&[1.0, 0.0])).unwrap();
        assert!((c - 0.5f64.sqrt()).abs() < 1e-12);
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(matches!(cosine(&ev(&[0.0, 0.0]), &ev(&[1.0, 0.0])), Err(EvalError::ZeroVector)));
    }

    #[test]
    fn roc_hand_cases() {
        let c = roc(&[0.9], &[0.1], Setting::Verification).unwrap();
        assert_eq!(auc(&c), 1.0);
        assert_eq!(eer(&c), 0.0);
        let c = roc(&[0.6, 0.4], &[0.5], Setting::Verification).unwrap();
        assert_eq!(auc(&c), 0.5);
        assert_eq!(eer(&c), 0.5);
        assert!(matches!(
            roc(&[], &[0.5], Setting::Impostor),
            Err(EvalError::EmptyScores("genuine"))
        ));
    }

    #[test]
    fn swapped_classes_complement_auc() {
        let g = [0.3, 0.8, 0.8, 0.1];
        let i = [0.2, 0.8, 0.5];
        let a = auc(&roc(&g, &i, Setting::Impostor).unwrap());
        let b = auc(&roc(&i, &g, Setting::Impostor).unwrap());
        assert!((a + b - 1.0).abs() < 1e-15);
    }

    #[test]
    fn fusion_cases() {
        assert_eq!(binocular_fuse(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), [0.5, 0.5]);
        assert_eq!(binocular_fuse(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), [0.3, 0.7]);
        assert!(binocular_fuse(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn time_to_identification_cases() {
        let trace = MatchTrace {
            per_window: vec![0.2, 0.9, 0.5],
            running_max: vec![0.2, 0.9, 0.9],
        };
        assert_eq!(time_to_identification(&trace, 1.0, 250, 1000, 1000.0), None);
        assert_eq!(time_to_identification(&trace, -1.0, 250, 1000, 1000.0), Some(1.0));
        assert_eq!(time_to_identification(&trace, 0.5, 250, 1000, 1000.0), Some(1.25));
    }

    #[test]
    fn duration_one_second_is_first_window() {
        let s = SequenceScores {
            label: 1,
            starts: vec![0, 250, 500],
            probs: vec![vec![0.4, 0.6], vec![0.9, 0.1], vec![0.9, 0.1]],
            samples: 1500,
            rate: 1000.0,
            window_len: 1000,
        };
        let rows = accuracy_vs_duration(&[s], &[1.0, 1.5, 2.0]);
        assert_eq!(rows[0].accuracy, 1.0);
        assert_eq!(rows[1].accuracy, 0.0);
        assert_eq!(rows[2].sequences, 0, "too short for 2 s");
    }

    #[test]
    fn partition_is_disjoint() {
        use rand::SeedableRng;
        let ids: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let spec = SplitSpec {
            train: 6,
            enrolled: 3,
            impostors: 1,
        };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let p = resample_protocol(&ids, spec, &mut rng).unwrap();
        assert_eq!((p.train.len(), p.enrolled.len(), p.impostors.len()), (6, 3, 1));
        let all: BTreeSet<_> = p.train.iter().chain(&p.enrolled).chain(&p.impostors).collect();
        assert_eq!(all.len(), 10);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        assert_eq!(resample_protocol(&ids, spec, &mut rng).unwrap(), p);
        let spec = SplitSpec { train: 9, ..spec };
        assert!(resample_protocol(&ids, spec, &mut rng).is_err());
    }

    #[test]
    fn match_score_self_and_orthogonal() {
        let template = EnrollmentTemplate {
            user_id: "a".into(),
            embeddings: vec![ev(&[1.0, 0.0, 0.0]), ev(&[0.0, 1.0, 0.0])],
        };
        let t = match_score(&template, &[ev(&[0.0, 0.0, 2.0]), ev(&[0.0, 3.0, 0.0])]).unwrap();
        assert_eq!(t.per_window, [0.0, 1.0]);
        assert_eq!(t.running_max, [0.0, 1.0]);
    }
}
