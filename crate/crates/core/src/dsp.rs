//! Small frequency-domain helpers: single-bin DFT evaluation, band power,
//! and peak location. Direct O(n) per bin — plenty at the signal lengths
//! these checks run on.

/// Magnitude of the DFT of `signal` evaluated at `freq_hz`.
///
/// Equivalent to the value of a zero-padded DFT at a bin centered on
/// `freq_hz`: both are the discrete-time Fourier transform sampled there.
pub fn dft_magnitude_at(signal: &[f64], fs: f64, freq_hz: f64) -> f64 {
    let w = -2.0 * std::f64::consts::PI * freq_hz / fs;
    let mut re = 0.0;
    let mut im = 0.0;
    for (n, &x) in signal.iter().enumerate() {
        let phase = w * n as f64;
        re += x * phase.cos();
        im += x * phase.sin();
    }
    (re * re + im * im).sqrt()
}

/// Attenuation of `freq_hz` relative to `ref_hz`, in dB, for a filter's taps.
pub fn attenuation_db(taps: &[f64], fs: f64, freq_hz: f64, ref_hz: f64) -> f64 {
    let g_ref = dft_magnitude_at(taps, fs, ref_hz);
    let g = dft_magnitude_at(taps, fs, freq_hz).max(1e-300);
    20.0 * (g_ref / g).log10()
}

/// Mean periodogram power over the natural DFT bins inside `[lo_hz, hi_hz]`.
pub fn bandpower(signal: &[f64], fs: f64, lo_hz: f64, hi_hz: f64) -> f64 {
    let n = signal.len();
    let df = fs / n as f64;
    let k_lo = (lo_hz / df).ceil() as usize;
    let k_hi = ((hi_hz / df).floor() as usize).min(n / 2);
    if k_hi < k_lo {
        return 0.0;
    }
    let mut total = 0.0;
    for k in k_lo..=k_hi {
        let m = dft_magnitude_at(signal, fs, k as f64 * df);
        total += m * m;
    }
    total / ((k_hi - k_lo + 1) * n * n) as f64
}

/// Frequency of the largest-magnitude natural DFT bin in (0, fs/2].
pub fn dft_peak_freq(signal: &[f64], fs: f64) -> f64 {
    let n = signal.len();
    let df = fs / n as f64;
    let mut best_k = 1;
    let mut best = f64::NEG_INFINITY;
    for k in 1..=n / 2 {
        let m = dft_magnitude_at(signal, fs, k as f64 * df);
        if m > best {
            best = m;
            best_k = k;
        }
    }
    best_k as f64 * df
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / fs).sin())
            .collect()
    }

    #[test]
    fn peak_finds_a_pure_tone() {
        let s = sine(10.0, 128.0, 512); // 0.25 Hz resolution
        let f = dft_peak_freq(&s, 128.0);
        assert!((f - 10.0).abs() <= 0.25, "peak at {f}");
    }

    #[test]
    fn bandpower_concentrates_at_tone() {
        let s = sine(10.0, 128.0, 1024);
        let in_band = bandpower(&s, 128.0, 8.0, 12.0);
        let out_band = bandpower(&s, 128.0, 20.0, 40.0);
        assert!(in_band > 100.0 * out_band, "{in_band} vs {out_band}");
    }

    #[test]
    fn magnitude_of_dc_signal() {
        let s = vec![1.0; 100];
        assert!((dft_magnitude_at(&s, 100.0, 0.0) - 100.0).abs() < 1e-9);
        assert!(dft_magnitude_at(&s, 100.0, 1.0) < 1e-9);
    }
}
