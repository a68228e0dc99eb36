//! Loading a directory of gaze CSVs as labeled velocity sequences.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::signal::{self, CsvFormat, Eye, SignalError, VelocitySequence};
use crate::sim;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Signal { path: PathBuf, source: SignalError },
    #[error("{0}")]
    Manifest(#[from] sim::SimError),
    #[error("{path}: file name must look like <subject>_<session>.csv")]
    Name { path: PathBuf },
    #[error("no gaze recordings found in {0} matching the selection")]
    Empty(PathBuf),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Which recordings to load. Empty lists select everything.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub sessions: Vec<String>,
    pub users: Vec<String>,
}

impl Selection {
    fn keeps(&self, subject: &str, session: &str) -> bool {
        (self.sessions.is_empty() || self.sessions.iter().any(|s| s == session))
            && (self.users.is_empty() || self.users.iter().any(|u| u == subject))
    }
}

fn split_name(path: &Path) -> Option<(String, String)> {
    let stem = path.file_stem()?.to_str()?;
    let (subject, session) = stem.rsplit_once('_')?;
    (!subject.is_empty() && !session.is_empty()).then(|| (subject.to_string(), session.to_string()))
}

/// Reads every `<subject>_<session>.csv` in `dir` (sorted by name). Files
/// with both eyes yield one sequence per eye; gaps that split a recording
/// yield one sequence per segment. The sampling rate comes from
/// `manifest.json` when present, otherwise `default_rate`.
pub fn load_dir(dir: &Path, default_rate: f64, sel: &Selection) -> Result<Vec<VelocitySequence>> {
    let io = |source| DataError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let rate = if dir.join(sim::MANIFEST_FILE).exists() {
        sim::read_manifest(dir)?.config.rate
    } else {
        default_rate
    };
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(io)?;
    files.retain(|p| p.extension().is_some_and(|e| e == "csv"));
    files.sort();
    let mut out = Vec::new();
    for path in files {
        let (subject, session) = split_name(&path).ok_or_else(|| DataError::Name { path: path.clone() })?;
        if !sel.keeps(&subject, &session) {
            continue;
        }
        out.extend(load_file(&path, rate, &subject, &session)?);
    }
    if out.is_empty() {
        return Err(DataError::Empty(dir.to_path_buf()));
    }
    Ok(out)
}

pub fn load_file(path: &Path, rate: f64, subject: &str, session: &str) -> Result<Vec<VelocitySequence>> {
    let err = |source| DataError::Signal {
        path: path.to_path_buf(),
        source,
    };
    let text = fs::read(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut fmt = CsvFormat {
        rate,
        eye: None,
        subject_id: subject.to_string(),
        session_id: session.to_string(),
    };
    let recordings = match signal::parse_recording(text.as_slice(), &fmt) {
        Err(SignalError::MixedEyes) => {
            let mut both = Vec::new();
            for eye in [Eye::Left, Eye::Right] {
                fmt.eye = Some(eye);
                both.extend(signal::parse_recording(text.as_slice(), &fmt).map_err(err)?);
            }
            both
        }
        other => other.map_err(err)?,
    };
    recordings.iter().map(|r| signal::to_velocities(r).map_err(err)).collect()
}

/// Cuts a sequence into consecutive non-overlapping pieces of `seconds`;
/// a trailing remainder shorter than that is dropped.
pub fn chunk(seq: &VelocitySequence, seconds: f64) -> Vec<VelocitySequence> {
    let n = (seconds * seq.rate).round() as usize;
    if n == 0 {
        return Vec::new();
    }
    (0..seq.len() / n).map(|k| seq.slice(k * n, (k + 1) * n)).collect()
}

/// Pairs left and right eye sequences recorded together, in input order.
/// Returns `None` when any sequence lacks an eye label or has no partner.
pub fn pair_eyes(seqs: &[VelocitySequence]) -> Option<Vec<(&VelocitySequence, &VelocitySequence)>> {
    let mut pairs = Vec::new();
    let lefts: Vec<&VelocitySequence> = seqs.iter().filter(|s| s.eye == Eye::Left).collect();
    let rights: Vec<&VelocitySequence> = seqs.iter().filter(|s| s.eye == Eye::Right).collect();
    if lefts.len() != rights.len() || lefts.len() * 2 != seqs.len() || lefts.is_empty() {
        return None;
    }
    for (l, r) in lefts.into_iter().zip(rights) {
        if l.subject_id != r.subject_id || l.session_id != r.session_id || l.len() != r.len() {
            return None;
        }
        pairs.push((l, r));
    }
    Some(pairs)
}
