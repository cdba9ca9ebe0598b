use crate::error::Result;
use crate::sigproc::{bandpass, hann};
use crate::PulseTrace;

use super::{mean, std, RgbTrace};

const SIGMA_FLOOR: f64 = 1e-9;

/// Chrominance projection with Hann-weighted half-overlap windows, before
/// the final band-pass. Inside each window Xs and Ys are band-passed before
/// the ratio is taken, so slow intensity ramps do not bias it. The sign is
/// flipped relative to the textbook `Xf - αYf` so that it agrees with POS.
pub fn chrom_raw(trace: &RgbTrace) -> Result<Vec<f64>> {
    let mut l = trace.require_window()?;
    l += l % 2;
    let n = trace.len();
    let l = l.min(n - n % 2).max(2);
    let step = l / 2;
    let win = hann(l);
    let mut out = vec![0.0; n];
    let mut xs = vec![0.0; l];
    let mut ys = vec![0.0; l];
    let mut start = 0;
    loop {
        let start_eff = start.min(n - l);
        let r = &trace.r[start_eff..start_eff + l];
        let g = &trace.g[start_eff..start_eff + l];
        let b = &trace.b[start_eff..start_eff + l];
        let (mr, mg, mb) = (mean(r), mean(g), mean(b));
        for k in 0..l {
            let (rn, gn, bn) = (r[k] / mr, g[k] / mg, b[k] / mb);
            xs[k] = 3.0 * rn - 2.0 * gn;
            ys[k] = 1.5 * rn + gn - 1.5 * bn;
        }
        let xf = bandpass(&PulseTrace::new(trace.fps, xs.clone()))?.samples;
        let yf = bandpass(&PulseTrace::new(trace.fps, ys.clone()))?.samples;
        let alpha = std(&xf) / std(&yf).max(SIGMA_FLOOR);
        let s: Vec<f64> = xf.iter().zip(&yf).map(|(x, y)| alpha * y - x).collect();
        let ms = mean(&s);
        for k in 0..l {
            out[start_eff + k] += (s[k] - ms) * win[k];
        }
        if start_eff + l >= n {
            break;
        }
        start += step;
    }
    Ok(out)
}

/// CHROM pulse estimate, band-passed to the heart-rate band.
pub fn chrom(trace: &RgbTrace) -> Result<PulseTrace> {
    let raw = chrom_raw(trace)?;
    bandpass(&PulseTrace::new(trace.fps, raw))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn flat(n: usize, f: impl Fn(usize) -> f64) -> RgbTrace {
        let v: Vec<f64> = (0..n).map(f).collect();
        RgbTrace::new(
            v.iter().map(|x| 0.6 * x).collect(),
            v.iter().map(|x| 0.45 * x).collect(),
            v.iter().map(|x| 0.3 * x).collect(),
            30.0,
        )
        .unwrap()
    }

    #[test]
    fn flicker_and_constant_give_zero() {
        let flick = flat(400, |t| 1.0 + 0.05 * (2.0 * PI * 1.1 * t as f64 / 30.0).sin());
        assert!(chrom_raw(&flick).unwrap().iter().all(|v| v.abs() < 1e-9));
        let constant = flat(400, |_| 1.0);
        assert!(chrom_raw(&constant).unwrap().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn covers_trailing_samples() {
        let tr = RgbTrace::new(
            (0..101).map(|t| 0.6 + 0.001 * (t as f64 * 0.8).sin()).collect(),
            (0..101).map(|t| 0.45 + 0.003 * (t as f64 * 0.8).sin()).collect(),
            vec![0.3; 101],
            30.0,
        )
        .unwrap();
        let raw = chrom_raw(&tr).unwrap();
        assert!(raw[95..].iter().any(|v| v.abs() > 0.0));
    }
}
