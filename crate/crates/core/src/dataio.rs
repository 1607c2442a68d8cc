//! Trial container format, dataset manifests, and the deterministic
//! synthetic-EEG generator used for desk-scale training runs.
//!
//! Trial files are binary ("EEGT" magic, little-endian header, channel-major
//! doubles); manifests are line-oriented text so they stay diffable.

use crate::rng::{derive_seed, SplitMix64};
use crate::tensor::{Tensor, TensorError};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const TRIAL_MAGIC: [u8; 4] = *b"EEGT";
pub const TRIAL_VERSION: u32 = 1;
pub const MANIFEST_HEADER: &str = "eegt-manifest v1";

/// Frequency of the lateralized motif in synthetic trials (alpha band,
/// inside the 1-50 Hz passband).
pub const LATERAL_FREQ_HZ: f64 = 10.0;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: bad magic {got:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        got: [u8; 4],
        expected: [u8; 4],
    },
    #[error("{path}: format version {got}, expected {expected}")]
    VersionMismatch {
        path: PathBuf,
        got: u32,
        expected: u32,
    },
    #[error("{path}: payload length mismatch: {detail}")]
    LengthMismatch { path: PathBuf, detail: String },
    #[error("{path}: header field {field} is {header}, manifest declares {manifest}")]
    HeaderMismatch {
        path: PathBuf,
        field: &'static str,
        header: String,
        manifest: String,
    },
    #[error("manifest {path} line {line}: {detail}")]
    ManifestParse {
        path: PathBuf,
        line: usize,
        detail: String,
    },
    #[error("invalid trial header: {detail}")]
    InvalidHeader { detail: String },
    #[error("invalid synth config: {detail}")]
    InvalidConfig { detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Attended direction; class 0 is left, class 1 is right.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Label {
    Left,
    Right,
}

impl Label {
    pub fn class_index(self) -> usize {
        match self {
            Label::Left => 0,
            Label::Right => 1,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self, DataError> {
        match v {
            0 => Ok(Label::Left),
            1 => Ok(Label::Right),
            other => Err(DataError::InvalidHeader {
                detail: format!("label byte {other} (expected 0 or 1)"),
            }),
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "left" => Some(Label::Left),
            "right" => Some(Label::Right),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Left => "left",
            Label::Right => "right",
        })
    }
}

/// One trial: a channels × samples matrix plus its recording metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EegRecording {
    pub data: Tensor, // [channels × samples], channel-major
    pub fs: f64,
    pub label: Label,
    pub trial_id: u32,
    pub subject_id: u32,
}

impl EegRecording {
    pub fn new(
        data: Tensor,
        fs: f64,
        label: Label,
        trial_id: u32,
        subject_id: u32,
    ) -> Result<Self, DataError> {
        if data.rank() != 2 {
            return Err(DataError::InvalidHeader {
                detail: format!("trial data must be rank 2, got {:?}", data.shape()),
            });
        }
        if !(fs > 0.0) {
            return Err(DataError::InvalidHeader {
                detail: format!("sampling rate {fs} must be positive"),
            });
        }
        Ok(Self {
            data,
            fs,
            label,
            trial_id,
            subject_id,
        })
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn samples(&self) -> usize {
        self.data.shape()[1]
    }

    /// One channel's full time series.
    pub fn channel(&self, c: usize) -> &[f64] {
        self.data.row(c)
    }
}

// ---------------------------------------------------------------------------
// Trial file io
// ---------------------------------------------------------------------------

/// Writes one trial: magic, version, header fields, then channel-major
/// little-endian doubles.
pub fn write_trial(path: &Path, rec: &EegRecording) -> Result<(), DataError> {
    let file = std::fs::File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        w.write_all(&TRIAL_MAGIC)?;
        w.write_all(&TRIAL_VERSION.to_le_bytes())?;
        w.write_all(&(rec.channels() as u32).to_le_bytes())?;
        w.write_all(&(rec.samples() as u64).to_le_bytes())?;
        w.write_all(&rec.fs.to_le_bytes())?;
        w.write_all(&[rec.label.class_index() as u8])?;
        w.write_all(&rec.subject_id.to_le_bytes())?;
        w.write_all(&rec.trial_id.to_le_bytes())?;
        for &v in rec.data.data() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()
    })();
    res.map_err(io_err(path))
}

/// Reads a trial back; bit-exact inverse of [`write_trial`].
pub fn read_trial(path: &Path) -> Result<EegRecording, DataError> {
    let file = std::fs::File::open(path).map_err(io_err(path))?;
    let mut r = std::io::BufReader::new(file);
    let length_err = |detail: String| DataError::LengthMismatch {
        path: path.to_path_buf(),
        detail,
    };

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| length_err("file shorter than magic".into()))?;
    if magic != TRIAL_MAGIC {
        return Err(DataError::BadMagic {
            path: path.to_path_buf(),
            got: magic,
            expected: TRIAL_MAGIC,
        });
    }

    let mut u32buf = [0u8; 4];
    let mut u64buf = [0u8; 8];
    let mut read_u32 = |r: &mut dyn Read, what: &str| -> Result<u32, DataError> {
        r.read_exact(&mut u32buf)
            .map_err(|_| DataError::LengthMismatch {
                path: path.to_path_buf(),
                detail: format!("truncated header at {what}"),
            })?;
        Ok(u32::from_le_bytes(u32buf))
    };

    let version = read_u32(&mut r, "version")?;
    if version != TRIAL_VERSION {
        return Err(DataError::VersionMismatch {
            path: path.to_path_buf(),
            got: version,
            expected: TRIAL_VERSION,
        });
    }
    let channels = read_u32(&mut r, "channels")? as usize;
    r.read_exact(&mut u64buf)
        .map_err(|_| length_err("truncated header at samples".into()))?;
    let samples = u64::from_le_bytes(u64buf) as usize;
    r.read_exact(&mut u64buf)
        .map_err(|_| length_err("truncated header at fs".into()))?;
    let fs = f64::from_le_bytes(u64buf);
    let mut byte = [0u8; 1];
    r.read_exact(&mut byte)
        .map_err(|_| length_err("truncated header at label".into()))?;
    let label = Label::from_u8(byte[0])?;
    let subject_id = read_u32(&mut r, "subject_id")?;
    let trial_id = read_u32(&mut r, "trial_id")?;

    if channels == 0 || samples == 0 {
        return Err(DataError::InvalidHeader {
            detail: format!("{channels} channels x {samples} samples"),
        });
    }

    let count = channels * samples;
    let mut data = Vec::with_capacity(count);
    for i in 0..count {
        r.read_exact(&mut u64buf).map_err(|_| {
            length_err(format!("payload ended at value {i} of {count}"))
        })?;
        data.push(f64::from_le_bytes(u64buf));
    }
    if r.read(&mut byte).map_err(io_err(path))? != 0 {
        return Err(length_err(format!("trailing bytes after {count} values")));
    }

    EegRecording::new(Tensor::new(vec![channels, samples], data)?, fs, label, trial_id, subject_id)
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: String, // relative to the manifest's directory
    pub subject_id: u32,
    pub trial_id: u32,
    pub label: Label,
    pub fs: f64,
    pub channels: usize,
    pub samples: usize,
}

/// Ordered list of trials plus the directory their paths are relative to.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn trial_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn subject_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.entries.iter().map(|e| e.subject_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Writes `manifest.txt` under `self.root` and returns its path.
    pub fn save(&self) -> Result<PathBuf, DataError> {
        let path = self.root.join("manifest.txt");
        let mut out = String::new();
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{} {} {} {} {} {} {}\n",
                e.path, e.subject_id, e.trial_id, e.label, e.fs, e.channels, e.samples
            ));
        }
        std::fs::write(&path, out).map_err(io_err(&path))?;
        Ok(path)
    }

    /// Parses a manifest file; entry paths stay relative to its directory.
    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        let parse_err = |line: usize, detail: String| DataError::ManifestParse {
            path: path.to_path_buf(),
            line,
            detail,
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, header)) if header.trim() == MANIFEST_HEADER => {}
            Some((_, header)) => {
                return Err(parse_err(1, format!("bad header {header:?}")));
            }
            None => return Err(parse_err(1, "empty manifest".into())),
        }
        let mut entries = Vec::new();
        let mut seen = std::collections::HashSet::new();
        for (idx, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 7 {
                return Err(parse_err(idx + 1, format!("expected 7 fields, got {}", fields.len())));
            }
            let entry = ManifestEntry {
                path: fields[0].to_string(),
                subject_id: fields[1]
                    .parse()
                    .map_err(|_| parse_err(idx + 1, format!("bad subject_id {:?}", fields[1])))?,
                trial_id: fields[2]
                    .parse()
                    .map_err(|_| parse_err(idx + 1, format!("bad trial_id {:?}", fields[2])))?,
                label: Label::parse(fields[3])
                    .ok_or_else(|| parse_err(idx + 1, format!("bad label {:?}", fields[3])))?,
                fs: fields[4]
                    .parse()
                    .map_err(|_| parse_err(idx + 1, format!("bad fs {:?}", fields[4])))?,
                channels: fields[5]
                    .parse()
                    .map_err(|_| parse_err(idx + 1, format!("bad channels {:?}", fields[5])))?,
                samples: fields[6]
                    .parse()
                    .map_err(|_| parse_err(idx + 1, format!("bad samples {:?}", fields[6])))?,
            };
            if !seen.insert((entry.subject_id, entry.trial_id)) {
                return Err(parse_err(
                    idx + 1,
                    format!(
                        "duplicate (subject_id, trial_id) = ({}, {})",
                        entry.subject_id, entry.trial_id
                    ),
                ));
            }
            entries.push(entry);
        }
        Ok(Self {
            root: path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf(),
            entries,
        })
    }
}

/// Loads every trial in manifest order, checking each file's header against
/// its manifest line.
pub fn load_dataset(manifest: &DatasetManifest) -> Result<Vec<EegRecording>, DataError> {
    let mut out = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let path = manifest.trial_path(entry);
        let rec = read_trial(&path)?;
        let mismatch = |field: &'static str, header: String, manifest: String| {
            Err(DataError::HeaderMismatch {
                path: path.clone(),
                field,
                header,
                manifest,
            })
        };
        if rec.subject_id != entry.subject_id {
            return mismatch("subject_id", rec.subject_id.to_string(), entry.subject_id.to_string());
        }
        if rec.trial_id != entry.trial_id {
            return mismatch("trial_id", rec.trial_id.to_string(), entry.trial_id.to_string());
        }
        if rec.label != entry.label {
            return mismatch("label", rec.label.to_string(), entry.label.to_string());
        }
        if rec.fs != entry.fs {
            return mismatch("fs", rec.fs.to_string(), entry.fs.to_string());
        }
        if rec.channels() != entry.channels {
            return mismatch("channels", rec.channels().to_string(), entry.channels.to_string());
        }
        if rec.samples() != entry.samples {
            return mismatch("samples", rec.samples().to_string(), entry.samples.to_string());
        }
        out.push(rec);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

/// Synthetic dataset shape and the SNR of the lateralized component.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub subjects: usize,
    pub trials_per_subject: usize,
    pub trial_seconds: f64,
    pub channels: usize,
    pub fs: f64,
    pub snr_db: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 2,
            trials_per_subject: 4,
            trial_seconds: 10.0,
            channels: 64,
            fs: 128.0,
            snr_db: 6.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        let bad = |detail: String| DataError::InvalidConfig { detail };
        if self.subjects == 0 || self.trials_per_subject == 0 {
            return Err(bad("subject and trial counts must be >= 1".into()));
        }
        if self.channels < 2 {
            return Err(bad(format!(
                "need >= 2 channels for a lateralized signal, got {}",
                self.channels
            )));
        }
        if !(self.fs > 0.0) {
            return Err(bad(format!("fs {} must be positive", self.fs)));
        }
        if !(self.trial_seconds > 0.0) || (self.trial_seconds * self.fs).round() < 1.0 {
            return Err(bad(format!(
                "trial length {}s at {} Hz yields no samples",
                self.trial_seconds, self.fs
            )));
        }
        Ok(())
    }
}

/// Per-channel phase jitter half-width for the lateralized motif. A quarter
/// cycle keeps the boosted channels spectrally dominant after common-average
/// referencing: with tighter phases the motif becomes coherent across the
/// boosted half, re-referencing mirrors it into the other half, and
/// z-scoring then leaves the two classes nearly indistinguishable.
pub const PHASE_JITTER_RAD: f64 = std::f64::consts::FRAC_PI_2;

/// One synthetic trial: unit-variance Gaussian noise per channel plus a
/// 10 Hz sinusoid on the attended-side half of the channels (upper half for
/// left, lower half for right), with a small random phase per channel.
/// Pure function of (cfg.seed, subject, trial).
pub fn synth_trial(cfg: &SynthConfig, subject: u32, trial: u32) -> Result<EegRecording, DataError> {
    cfg.validate()?;
    let samples = (cfg.trial_seconds * cfg.fs).round() as usize;
    let c = cfg.channels;
    // labels alternate so counts per subject differ by at most one
    let label = if trial % 2 == 0 { Label::Left } else { Label::Right };
    let half = c / 2;
    let boosted = match label {
        Label::Left => half..c,
        Label::Right => 0..half,
    };
    // amplitude from snr: a^2/2 = 10^(snr/10) against unit noise power
    let amplitude = (2.0 * 10f64.powf(cfg.snr_db / 10.0)).sqrt();
    let mut rng = SplitMix64::new(derive_seed(
        cfg.seed,
        (subject as u64) << 32 | trial as u64,
    ));
    let mut data = Vec::with_capacity(c * samples);
    for ch in 0..c {
        let carries_signal = boosted.contains(&ch);
        let phase = rng.uniform(-PHASE_JITTER_RAD, PHASE_JITTER_RAD);
        let omega = 2.0 * std::f64::consts::PI * LATERAL_FREQ_HZ / cfg.fs;
        for n in 0..samples {
            let mut v = rng.gaussian();
            if carries_signal {
                v += amplitude * (omega * n as f64 + phase).sin();
            }
            data.push(v);
        }
    }
    let trial_id = subject * cfg.trials_per_subject as u32 + trial;
    EegRecording::new(
        Tensor::new(vec![c, samples], data)?,
        cfg.fs,
        label,
        trial_id,
        subject,
    )
}

/// Generates the full dataset under `out_dir` (trial files plus
/// `manifest.txt`) and returns the manifest. Byte-deterministic per seed.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: &Path) -> Result<DatasetManifest, DataError> {
    cfg.validate()?;
    let trials_dir = out_dir.join("trials");
    std::fs::create_dir_all(&trials_dir).map_err(io_err(&trials_dir))?;
    let mut entries = Vec::new();
    for s in 0..cfg.subjects as u32 {
        for t in 0..cfg.trials_per_subject as u32 {
            let rec = synth_trial(cfg, s, t)?;
            let rel = format!("trials/s{s:03}_t{t:03}.eegt");
            write_trial(&out_dir.join(&rel), &rec)?;
            entries.push(ManifestEntry {
                path: rel,
                subject_id: rec.subject_id,
                trial_id: rec.trial_id,
                label: rec.label,
                fs: rec.fs,
                channels: rec.channels(),
                samples: rec.samples(),
            });
        }
    }
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        entries,
    };
    manifest.save()?;
    Ok(manifest)
}
