//! The per-trial signal pipeline: common-average re-reference, FIR band-pass,
//! integer-factor downsampling, per-channel z-scoring, and sliding-window
//! extraction with leakage-safe pruning.
//!
//! Stage order is fixed (re-reference, filter, downsample, z-score, window);
//! every stage preserves the channel count.

use crate::dataio::{DataError, EegRecording, Label};
use crate::tensor::{Tensor, TensorError};
use rayon::prelude::*;
use std::collections::HashMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PreprocError {
    #[error("re-reference needs >= 2 channels, got {got}")]
    SingleChannel { got: usize },
    #[error("invalid band ({low}, {high}) Hz at fs {fs}: need 0 < low < high < fs/2")]
    InvalidBand { low: f64, high: f64, fs: f64 },
    #[error("tap count {taps} must be odd and >= 3")]
    BadTapCount { taps: usize },
    #[error("filter designed at {filter_fs} Hz cannot apply to a {rec_fs} Hz recording")]
    RateMismatch { filter_fs: f64, rec_fs: f64 },
    #[error("downsample {fs} -> {target_fs} Hz is not an integer factor")]
    NonIntegerFactor { fs: f64, target_fs: f64 },
    #[error("z-score: channel {channel} has zero variance")]
    DegenerateChannel { channel: usize },
    #[error("window of {window} samples does not fit a {samples}-sample trial")]
    WindowTooLong { window: usize, samples: usize },
    #[error("invalid windowing: {detail}")]
    InvalidWindowing { detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

// ---------------------------------------------------------------------------
// Common average reference
// ---------------------------------------------------------------------------

/// Subtracts the across-channel mean from every channel at each sample.
pub fn common_average_reference(rec: &EegRecording) -> Result<EegRecording, PreprocError> {
    let (c, s) = (rec.channels(), rec.samples());
    if c < 2 {
        return Err(PreprocError::SingleChannel { got: c });
    }
    let mut means = vec![0.0; s];
    for ch in 0..c {
        for (m, &v) in means.iter_mut().zip(rec.channel(ch)) {
            *m += v;
        }
    }
    let inv_c = 1.0 / c as f64;
    for m in &mut means {
        *m *= inv_c;
    }
    let mut data = Vec::with_capacity(c * s);
    for ch in 0..c {
        for (n, &v) in rec.channel(ch).iter().enumerate() {
            data.push(v - means[n]);
        }
    }
    Ok(EegRecording {
        data: Tensor::new(vec![c, s], data)?,
        ..rec.clone()
    })
}

// ---------------------------------------------------------------------------
// FIR design and application
// ---------------------------------------------------------------------------

/// Linear-phase band-pass filter: odd-length symmetric taps plus the rate
/// and band it was designed for.
#[derive(Debug, Clone, PartialEq)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub fs: f64,
    pub band: (f64, f64),
}

impl FirFilter {
    /// Group delay in samples, (len − 1)/2.
    pub fn delay(&self) -> usize {
        (self.taps.len() - 1) / 2
    }
}

/// Default tap count: the next odd integer >= fs, about one second of
/// impulse response — what a 1 Hz band edge needs for real attenuation.
pub fn default_taps(fs: f64) -> usize {
    let c = fs.ceil().max(3.0) as usize;
    if c % 2 == 0 {
        c + 1
    } else {
        c
    }
}

/// Hamming-windowed sinc lowpass, normalized to unit DC gain. Computed on
/// the left half and mirrored, so the taps are symmetric bit for bit.
fn hamming_lowpass(cutoff_hz: f64, fs: f64, taps: usize) -> Vec<f64> {
    let m = (taps - 1) / 2;
    let fc = cutoff_hz / fs; // cycles per sample
    let mut h = vec![0.0; taps];
    for n in 0..=m {
        let x = n as f64 - m as f64;
        let sinc = if x == 0.0 {
            2.0 * fc
        } else {
            (2.0 * std::f64::consts::PI * fc * x).sin() / (std::f64::consts::PI * x)
        };
        let w = 0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (taps - 1) as f64).cos();
        let v = sinc * w;
        h[n] = v;
        h[taps - 1 - n] = v;
    }
    let sum: f64 = h.iter().sum();
    for v in &mut h {
        *v /= sum;
    }
    h
}

/// Band-pass as the difference of two unit-gain Hamming-windowed lowpass
/// sincs. The sinc cutoffs sit inside the band by half the window's
/// transition width, which puts the stopband edge (not the -6 dB point) at
/// the stated band edges; with cutoffs at the edges themselves, a 1 Hz edge
/// and a one-second filter would leave 0.2 Hz only ~34 dB down.
pub fn design_bandpass(
    low_hz: f64,
    high_hz: f64,
    fs: f64,
    taps: usize,
) -> Result<FirFilter, PreprocError> {
    if !(low_hz > 0.0 && low_hz < high_hz && high_hz < fs / 2.0) {
        return Err(PreprocError::InvalidBand {
            low: low_hz,
            high: high_hz,
            fs,
        });
    }
    if taps % 2 == 0 || taps < 3 {
        return Err(PreprocError::BadTapCount { taps });
    }
    let inset = (1.65 * fs / taps as f64).min((high_hz - low_hz) / 4.0);
    let lp_high = hamming_lowpass(high_hz - inset, fs, taps);
    let lp_low = hamming_lowpass(low_hz + inset, fs, taps);
    let coeffs = lp_high
        .iter()
        .zip(&lp_low)
        .map(|(h, l)| h - l)
        .collect();
    Ok(FirFilter {
        taps: coeffs,
        fs,
        band: (low_hz, high_hz),
    })
}

/// Per-channel convolution with the group delay compensated: output sample
/// n is Σ_k taps[k]·x[n + delay − k] with zero padding at the edges, so the
/// output has the input's length and no net shift.
pub fn filter_apply(rec: &EegRecording, filt: &FirFilter) -> Result<EegRecording, PreprocError> {
    if rec.fs != filt.fs {
        return Err(PreprocError::RateMismatch {
            filter_fs: filt.fs,
            rec_fs: rec.fs,
        });
    }
    let (c, s) = (rec.channels(), rec.samples());
    let m = filt.delay();
    let taps = &filt.taps;
    let filtered: Vec<Vec<f64>> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let x = rec.channel(ch);
            let mut out = vec![0.0; s];
            for (n, o) in out.iter_mut().enumerate() {
                // x index n + m - k must land in [0, s)
                let k_lo = (n + m + 1).saturating_sub(s);
                let k_hi = (n + m).min(taps.len() - 1);
                let mut acc = 0.0;
                for k in k_lo..=k_hi {
                    acc += taps[k] * x[n + m - k];
                }
                *o = acc;
            }
            out
        })
        .collect();
    let mut data = Vec::with_capacity(c * s);
    for ch in filtered {
        data.extend(ch);
    }
    Ok(EegRecording {
        data: Tensor::new(vec![c, s], data)?,
        ..rec.clone()
    })
}

// ---------------------------------------------------------------------------
// Downsampling and z-scoring
// ---------------------------------------------------------------------------

/// Pure decimation: keeps every (fs/target_fs)-th sample starting at index 0.
/// The band limit applied beforehand is the anti-alias guard.
pub fn downsample(rec: &EegRecording, target_fs: f64) -> Result<EegRecording, PreprocError> {
    let ratio = rec.fs / target_fs;
    let factor = ratio.round();
    if !(target_fs > 0.0) || factor < 1.0 || (ratio - factor).abs() > 1e-9 {
        return Err(PreprocError::NonIntegerFactor {
            fs: rec.fs,
            target_fs,
        });
    }
    let factor = factor as usize;
    let (c, s) = (rec.channels(), rec.samples());
    let out_samples = s.div_ceil(factor);
    let mut data = Vec::with_capacity(c * out_samples);
    for ch in 0..c {
        let x = rec.channel(ch);
        data.extend(x.iter().step_by(factor));
    }
    Ok(EegRecording {
        data: Tensor::new(vec![c, out_samples], data)?,
        fs: target_fs,
        ..rec.clone()
    })
}

/// Standardizes each channel over the whole trial to mean 0, variance 1
/// (population statistics).
pub fn zscore(rec: &EegRecording) -> Result<EegRecording, PreprocError> {
    let (c, s) = (rec.channels(), rec.samples());
    let mut data = Vec::with_capacity(c * s);
    for ch in 0..c {
        let x = rec.channel(ch);
        let mean = x.iter().sum::<f64>() / s as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / s as f64;
        if var == 0.0 {
            return Err(PreprocError::DegenerateChannel { channel: ch });
        }
        let inv_std = 1.0 / var.sqrt();
        data.extend(x.iter().map(|v| (v - mean) * inv_std));
    }
    Ok(EegRecording {
        data: Tensor::new(vec![c, s], data)?,
        ..rec.clone()
    })
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

/// Parameters of the preprocessing pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocConfig {
    pub band_low_hz: f64,
    pub band_high_hz: f64,
    /// None selects [`default_taps`] for the recording's rate.
    pub taps: Option<usize>,
    pub target_fs: f64,
}

impl Default for PreprocConfig {
    fn default() -> Self {
        Self {
            band_low_hz: 1.0,
            band_high_hz: 50.0,
            taps: None,
            target_fs: 128.0,
        }
    }
}

/// Runs the fixed pipeline on one trial: re-reference, band-pass,
/// downsample, z-score.
pub fn preprocess_recording(
    rec: &EegRecording,
    cfg: &PreprocConfig,
) -> Result<EegRecording, PreprocError> {
    let taps = cfg.taps.unwrap_or_else(|| default_taps(rec.fs));
    let filt = design_bandpass(cfg.band_low_hz, cfg.band_high_hz, rec.fs, taps)?;
    let rec = common_average_reference(rec)?;
    let rec = filter_apply(&rec, &filt)?;
    let rec = downsample(&rec, cfg.target_fs)?;
    zscore(&rec)
}

// ---------------------------------------------------------------------------
// Windowing
// ---------------------------------------------------------------------------

/// One decision window: a `[T × C]` time-major slice of a trial plus its
/// provenance (trial and half-open sample interval after downsampling).
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub data: Tensor,
    pub label: Label,
    pub trial_id: u32,
    pub start_sample: usize,
    pub end_sample: usize,
}

impl Window {
    pub fn time_steps(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
}

/// A batch of windows with shared provenance semantics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WindowSet {
    pub windows: Vec<Window>,
}

impl WindowSet {
    pub fn new(windows: Vec<Window>) -> Self {
        Self { windows }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Window> {
        self.windows.iter()
    }

    /// Count of windows per class, indexed by `Label::class_index`.
    pub fn class_counts(&self) -> [usize; 2] {
        let mut counts = [0usize; 2];
        for w in &self.windows {
            counts[w.label.class_index()] += 1;
        }
        counts
    }
}

/// Window length in samples for a given duration: round(win_seconds·fs).
pub fn window_samples(win_seconds: f64, fs: f64) -> usize {
    (win_seconds * fs).round() as usize
}

/// Extracts windows starting at 0, hop, 2·hop, … while they fit:
/// count = floor((samples − T)/hop) + 1. Window data is time-major.
pub fn slide_windows(
    rec: &EegRecording,
    win_seconds: f64,
    hop_seconds: f64,
) -> Result<WindowSet, PreprocError> {
    if !(hop_seconds > 0.0) {
        return Err(PreprocError::InvalidWindowing {
            detail: format!("hop {hop_seconds}s must be positive"),
        });
    }
    let t = window_samples(win_seconds, rec.fs);
    if t < 1 {
        return Err(PreprocError::InvalidWindowing {
            detail: format!("window {win_seconds}s at {} Hz rounds to zero samples", rec.fs),
        });
    }
    let samples = rec.samples();
    if t > samples {
        return Err(PreprocError::WindowTooLong { window: t, samples });
    }
    let hop = ((hop_seconds * rec.fs).round() as usize).max(1);
    let c = rec.channels();
    let mut windows = Vec::with_capacity((samples - t) / hop + 1);
    let mut start = 0;
    while start + t <= samples {
        let mut data = Vec::with_capacity(t * c);
        for dt in 0..t {
            for ch in 0..c {
                data.push(rec.channel(ch)[start + dt]);
            }
        }
        windows.push(Window {
            data: Tensor::new(vec![t, c], data)?,
            label: rec.label,
            trial_id: rec.trial_id,
            start_sample: start,
            end_sample: start + t,
        });
        start += hop;
    }
    Ok(WindowSet::new(windows))
}

/// Removes every training window whose half-open sample interval intersects
/// a test window of the same trial. The test set is never modified.
///
/// Indexed by trial with interval starts sorted and prefix-maxed ends, so
/// each train window costs one binary search — structurally unlike the
/// quadratic oracle it is tested against.
pub fn prune_leaky(train: &WindowSet, test: &WindowSet) -> WindowSet {
    struct TrialIntervals {
        starts: Vec<usize>,
        prefix_max_end: Vec<usize>,
    }
    let mut by_trial: HashMap<u32, Vec<(usize, usize)>> = HashMap::new();
    for w in &test.windows {
        by_trial
            .entry(w.trial_id)
            .or_default()
            .push((w.start_sample, w.end_sample));
    }
    let index: HashMap<u32, TrialIntervals> = by_trial
        .into_iter()
        .map(|(trial, mut intervals)| {
            intervals.sort_unstable();
            let starts = intervals.iter().map(|&(s, _)| s).collect();
            let mut prefix_max_end = Vec::with_capacity(intervals.len());
            let mut max_end = 0;
            for &(_, e) in &intervals {
                max_end = max_end.max(e);
                prefix_max_end.push(max_end);
            }
            (trial, TrialIntervals { starts, prefix_max_end })
        })
        .collect();

    let survivors = train
        .windows
        .iter()
        .filter(|w| match index.get(&w.trial_id) {
            None => true,
            Some(ti) => {
                // overlap iff some test interval has start < w.end and end > w.start
                let candidates = ti.starts.partition_point(|&s| s < w.end_sample);
                candidates == 0 || ti.prefix_max_end[candidates - 1] <= w.start_sample
            }
        })
        .cloned()
        .collect();
    WindowSet::new(survivors)
}
