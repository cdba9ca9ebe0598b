//! Filtering, windowing, spectral heart-rate estimation and evaluation
//! metrics.

mod filter;
mod metrics;
mod spectrum;

use std::ops::Range;

use crate::error::{Error, Result};
use crate::PulseTrace;

pub use filter::{
    bandpass, bandpass_range, butter_bandpass, Biquad, Sos, FILTER_ORDER, PASS_HI_HZ, PASS_LO_HZ,
};
pub use metrics::{mae, pearson, rmse, Aggregate, HrWindow, MetricsReport};
pub(crate) use metrics::csv_err;
pub use spectrum::{
    estimate_hr, estimate_hr_in, hann, in_snr_template, padded_len, power_spectrum, snr, Spectrum,
    BIN_BPM, HR_BAND_BPM, SNR_CAP_DB, SNR_HALF_WIDTH_BPM, SNR_RANGE_BPM,
};

/// Evaluation window length in frames (12 s at 30 fps).
pub const EVAL_WINDOW: usize = 360;

/// Non-overlapping windows of `window` samples; the tail remainder is dropped.
pub fn split_windows(len: usize, window: usize) -> Result<Vec<Range<usize>>> {
    if window == 0 {
        return Err(Error::invalid("window length must be positive"));
    }
    if len < window {
        return Err(Error::TooShort {
            needed: window,
            got: len,
        });
    }
    Ok((0..len / window).map(|i| i * window..(i + 1) * window).collect())
}

/// Centered moving average over `2*(width/2)+1` samples. Near the edges the
/// window shrinks symmetrically, so linear trends are removed exactly.
pub fn moving_average(x: &[f64], width: usize) -> Vec<f64> {
    let n = x.len();
    let half = width / 2;
    let mut prefix = Vec::with_capacity(n + 1);
    prefix.push(0.0);
    for v in x {
        prefix.push(prefix.last().unwrap() + v);
    }
    (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            (prefix[i + h + 1] - prefix[i - h]) / (2 * h + 1) as f64
        })
        .collect()
}

/// Integrate a derivative trace back to a pulse: cumulative sum, subtract a
/// 1 s moving average, then band-pass. Traces too short for the filter are
/// returned detrended but unfiltered.
pub fn derivative_to_pulse(deriv: &PulseTrace) -> PulseTrace {
    let mut acc = 0.0;
    let integrated: Vec<f64> = deriv
        .samples
        .iter()
        .map(|d| {
            acc += d;
            acc
        })
        .collect();
    let width = (deriv.fps.round() as usize).max(1);
    let trend = moving_average(&integrated, width);
    let detrended = PulseTrace::new(
        deriv.fps,
        integrated.iter().zip(&trend).map(|(a, b)| a - b).collect(),
    );
    bandpass(&detrended).unwrap_or(detrended)
}
