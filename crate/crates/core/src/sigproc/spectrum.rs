use std::f64::consts::PI;

use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::PulseTrace;

/// Heart-rate search band in BPM; the filter band expressed in beats.
pub const HR_BAND_BPM: (f64, f64) = (45.0, 150.0);
/// Summation limits of the SNR spectrum, BPM.
pub const SNR_RANGE_BPM: (f64, f64) = (30.0, 240.0);
/// Half-width of the SNR template around the fundamental, BPM.
pub const SNR_HALF_WIDTH_BPM: f64 = 6.0;
/// Reported when there is no power outside (or inside) the template.
pub const SNR_CAP_DB: f64 = 60.0;
/// Target spectral resolution after zero padding.
pub const BIN_BPM: f64 = 0.5;

/// One-sided power spectrum of a Hann-windowed, zero-padded trace.
#[derive(Clone, Debug)]
pub struct Spectrum {
    pub bin_hz: f64,
    pub power: Vec<f64>,
}

impl Spectrum {
    pub fn bin_bpm(&self) -> f64 {
        self.bin_hz * 60.0
    }

    pub fn freq_bpm(&self, k: usize) -> f64 {
        k as f64 * self.bin_bpm()
    }

    /// Bin indices whose frequency lies in `[lo, hi]` BPM.
    pub fn bins_in(&self, lo_bpm: f64, hi_bpm: f64) -> std::ops::RangeInclusive<usize> {
        let step = self.bin_bpm();
        let first = (lo_bpm / step - 1e-9).ceil().max(0.0) as usize;
        let last = ((hi_bpm / step + 1e-9).floor() as usize).min(self.power.len() - 1);
        first..=last
    }
}

pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// FFT length giving bins no wider than [`BIN_BPM`].
pub fn padded_len(n: usize, fs: f64) -> usize {
    let min_len = (60.0 * fs / BIN_BPM).ceil() as usize;
    n.max(min_len).next_power_of_two()
}

pub fn power_spectrum(samples: &[f64], fs: f64) -> Spectrum {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let nfft = padded_len(n, fs);
    let mut buf: Vec<Complex64> = samples
        .iter()
        .zip(hann(n))
        .map(|(x, w)| Complex64::new((x - mean) * w, 0.0))
        .collect();
    buf.resize(nfft, Complex64::new(0.0, 0.0));
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    Spectrum {
        bin_hz: fs / nfft as f64,
        power: buf[..=nfft / 2].iter().map(|c| c.norm_sqr()).collect(),
    }
}

fn require_two_seconds(trace: &PulseTrace) -> Result<()> {
    let needed = (2.0 * trace.fps).ceil() as usize;
    if trace.len() < needed {
        return Err(Error::TooShort {
            needed,
            got: trace.len(),
        });
    }
    Ok(())
}

/// Frequency (BPM) of the largest spectral bin inside `band`; ties go to the
/// lower frequency.
pub fn estimate_hr_in(trace: &PulseTrace, band: (f64, f64)) -> Result<f64> {
    require_two_seconds(trace)?;
    let nyquist_bpm = trace.fps * 30.0;
    let hi = band.1.min(nyquist_bpm);
    if band.0 > hi {
        return Err(Error::invalid(format!(
            "search band [{}, {}] BPM is empty below Nyquist {nyquist_bpm} BPM",
            band.0, band.1
        )));
    }
    let spec = power_spectrum(&trace.samples, trace.fps);
    let bins = spec.bins_in(band.0, hi);
    if bins.is_empty() {
        return Err(Error::invalid("search band contains no spectral bin"));
    }
    let mut best = *bins.start();
    for k in bins {
        if spec.power[k] > spec.power[best] {
            best = k;
        }
    }
    Ok(spec.freq_bpm(best))
}

pub fn estimate_hr(trace: &PulseTrace) -> Result<f64> {
    estimate_hr_in(trace, HR_BAND_BPM)
}

/// Binary template: fundamental ± 6 BPM and first harmonic ± 12 BPM.
pub fn in_snr_template(f_bpm: f64, gold_hr: f64) -> bool {
    (f_bpm - gold_hr).abs() <= SNR_HALF_WIDTH_BPM
        || (f_bpm - 2.0 * gold_hr).abs() <= 2.0 * SNR_HALF_WIDTH_BPM
}

/// Pulse signal-to-noise ratio in dB against a known heart rate.
pub fn snr(trace: &PulseTrace, gold_hr: f64) -> Result<f64> {
    if !(SNR_RANGE_BPM.0..=SNR_RANGE_BPM.1).contains(&gold_hr) {
        return Err(Error::invalid(format!(
            "reference heart rate {gold_hr} BPM outside [30, 240]"
        )));
    }
    require_two_seconds(trace)?;
    let spec = power_spectrum(&trace.samples, trace.fps);
    let (mut signal, mut noise) = (0.0, 0.0);
    for k in spec.bins_in(SNR_RANGE_BPM.0, SNR_RANGE_BPM.1) {
        if in_snr_template(spec.freq_bpm(k), gold_hr) {
            signal += spec.power[k];
        } else {
            noise += spec.power[k];
        }
    }
    Ok(ratio_db(signal, noise))
}

fn ratio_db(signal: f64, noise: f64) -> f64 {
    if noise <= 0.0 {
        return SNR_CAP_DB;
    }
    if signal <= 0.0 {
        return -SNR_CAP_DB;
    }
    (10.0 * (signal / noise).log10()).clamp(-SNR_CAP_DB, SNR_CAP_DB)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn tone(f_hz: f64, amp: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n)
            .map(|i| amp * (2.0 * PI * f_hz * i as f64 / fs).sin())
            .collect()
    }

    fn trace(samples: Vec<f64>) -> PulseTrace {
        PulseTrace::new(30.0, samples)
    }

    #[test]
    fn sine_heart_rates() {
        let hr = estimate_hr(&trace(tone(1.2, 1.0, 30.0, 360))).unwrap();
        assert!((hr - 72.0).abs() <= 0.5, "{hr}");
        let hr = estimate_hr(&trace(tone(2.0, 1.0, 30.0, 360))).unwrap();
        assert!((hr - 120.0).abs() <= 0.5, "{hr}");
        let mix: Vec<f64> = tone(1.2, 1.0, 30.0, 360)
            .iter()
            .zip(tone(2.0, 0.4, 30.0, 360))
            .map(|(a, b)| a + b)
            .collect();
        let hr = estimate_hr(&trace(mix)).unwrap();
        assert!((hr - 72.0).abs() <= 0.5, "{hr}");
    }

    #[test]
    fn resolution_is_half_bpm() {
        let spec = power_spectrum(&tone(1.0, 1.0, 30.0, 360), 30.0);
        assert!(spec.bin_bpm() <= 0.5);
    }

    #[test]
    fn hr_invariant_to_scale_and_sign() {
        let x = tone(1.37, 1.0, 30.0, 400);
        let base = estimate_hr(&trace(x.clone())).unwrap();
        for s in [-1.0, 0.01, 250.0] {
            let y = x.iter().map(|v| v * s).collect();
            assert_eq!(estimate_hr(&trace(y)).unwrap(), base);
        }
    }

    #[test]
    fn short_trace_rejected() {
        assert!(matches!(
            estimate_hr(&trace(vec![0.0; 50])),
            Err(Error::TooShort { needed: 60, got: 50 })
        ));
        assert!(estimate_hr_in(&PulseTrace::new(1.0, vec![0.0; 10]), (45.0, 150.0)).is_err());
    }

    #[test]
    fn snr_of_pure_tone_at_gold() {
        // a 12 s Hann main lobe is ±10 BPM wide and spills past the ±6 BPM
        // template, so a minute-long trace is needed to clear 30 dB
        let s = snr(&trace(tone(1.2, 1.0, 30.0, 1800)), 72.0).unwrap();
        assert!(s >= 30.0, "{s}");
    }

    #[test]
    fn snr_of_offset_tone() {
        let s = snr(&trace(tone(1.7, 1.0, 30.0, 360)), 72.0).unwrap();
        assert!(s < -10.0, "{s}");
    }

    #[test]
    fn snr_white_noise_matches_bandwidth_ratio() {
        let gold = 80.0;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut total = 0.0;
        for _ in 0..100 {
            let x: Vec<f64> = (0..360).map(|_| StandardNormal.sample(&mut rng)).collect();
            total += snr(&trace(x), gold).unwrap();
        }
        let mean = total / 100.0;
        // template covers 12 + 24 BPM of the 210 BPM summation range
        let expect = 10.0 * (36.0f64 / 174.0).log10();
        assert!((mean - expect).abs() < 2.0, "{mean} vs {expect}");
    }

    #[test]
    fn snr_scale_invariant_and_capped() {
        let x = tone(1.2, 1.0, 30.0, 360);
        let a = snr(&trace(x.clone()), 72.0).unwrap();
        let b = snr(&trace(x.iter().map(|v| v * 1e3).collect()), 72.0).unwrap();
        assert!((a - b).abs() < 1e-9);
        assert_eq!(ratio_db(1.0, 0.0), SNR_CAP_DB);
        assert!(snr(&trace(x), 20.0).is_err());
    }
}
