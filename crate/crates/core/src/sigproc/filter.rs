//! Butterworth band-pass design (bilinear transform) and zero-phase
//! forward-backward filtering with odd-extension padding.

use num_complex::Complex64;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::PulseTrace;

pub const PASS_LO_HZ: f64 = 0.75;
pub const PASS_HI_HZ: f64 = 2.5;
pub const FILTER_ORDER: usize = 2;

/// One biquad, `a0 = 1`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

/// Cascade of second-order sections.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

/// Digital Butterworth band-pass of the given prototype order, prewarped so
/// that the -3 dB edges land exactly on `lo_hz` and `hi_hz`.
pub fn butter_bandpass(order: usize, lo_hz: f64, hi_hz: f64, fs: f64) -> Result<Sos> {
    if order == 0 {
        return Err(Error::invalid("filter order must be ≥ 1"));
    }
    if !(0.0 < lo_hz && lo_hz < hi_hz) {
        return Err(Error::invalid(format!("bad band [{lo_hz}, {hi_hz}] Hz")));
    }
    if fs <= 2.0 * hi_hz {
        return Err(Error::invalid(format!(
            "sample rate {fs} Hz must exceed twice the upper cutoff {hi_hz} Hz"
        )));
    }
    let fs2 = 2.0 * fs;
    let w1 = fs2 * (PI * lo_hz / fs).tan();
    let w2 = fs2 * (PI * hi_hz / fs).tan();
    let bw = w2 - w1;
    let w0sq = w1 * w2;

    // analog low-pass prototype poles, then low-pass -> band-pass
    let mut analog = Vec::with_capacity(2 * order);
    for k in 0..order {
        let theta = PI * (2 * k + order + 1) as f64 / (2 * order) as f64;
        let p = Complex64::from_polar(1.0, theta) * bw;
        let disc = (p * p - 4.0 * w0sq).sqrt();
        analog.push((p + disc) / 2.0);
        analog.push((p - disc) / 2.0);
    }
    // bilinear: zeros at s = 0 map to z = 1, the `order` zeros at infinity to z = -1
    let mut gain = Complex64::new(bw.powi(order as i32), 0.0);
    gain *= Complex64::new(fs2.powi(order as i32), 0.0);
    for p in &analog {
        gain /= Complex64::new(fs2, 0.0) - p;
    }
    let digital: Vec<Complex64> = analog
        .iter()
        .map(|p| (Complex64::new(fs2, 0.0) + p) / (Complex64::new(fs2, 0.0) - p))
        .collect();

    // poles come in conjugate pairs; keep the upper half-plane representatives
    let mut upper: Vec<Complex64> = digital.iter().copied().filter(|p| p.im > 0.0).collect();
    upper.sort_by(|a, b| a.arg().partial_cmp(&b.arg()).expect("finite poles"));
    if upper.len() != order {
        return Err(Error::invalid("filter design produced real poles"));
    }
    let mut sections: Vec<Biquad> = upper
        .iter()
        .map(|p| Biquad {
            b: [1.0, 0.0, -1.0],
            a: [1.0, -2.0 * p.re, p.norm_sqr()],
        })
        .collect();
    let g = gain.re;
    for v in sections[0].b.iter_mut() {
        *v *= g;
    }
    Ok(Sos { sections })
}

impl Biquad {
    /// Steady-state transposed-direct-form state for a unit step input.
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        // (I - Aᵀ) z = b[1:] - a[1:]·b0
        let (r0, r1) = (b1 - a1 * b0, b2 - a2 * b0);
        let (m00, m01, m10, m11) = (1.0 + a1, -1.0, a2, 1.0);
        let det = m00 * m11 - m01 * m10;
        [(r0 * m11 - m01 * r1) / det, (m00 * r1 - m10 * r0) / det]
    }

    pub fn response(&self, omega: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -omega);
        let z2 = z1 * z1;
        (self.b[0] + self.b[1] * z1 + self.b[2] * z2) / (self.a[0] + self.a[1] * z1 + self.a[2] * z2)
    }
}

impl Sos {
    /// Complex response at `f_hz` for sample rate `fs`.
    pub fn response(&self, f_hz: f64, fs: f64) -> Complex64 {
        let omega = 2.0 * PI * f_hz / fs;
        self.sections
            .iter()
            .fold(Complex64::new(1.0, 0.0), |acc, s| acc * s.response(omega))
    }

    pub fn padlen(&self) -> usize {
        3 * (2 * self.sections.len() + 1)
    }

    fn initial_states(&self) -> Vec<[f64; 2]> {
        let mut scale = 1.0;
        self.sections
            .iter()
            .map(|s| {
                let z = s.step_state();
                let out = [z[0] * scale, z[1] * scale];
                scale *= s.b.iter().sum::<f64>() / s.a.iter().sum::<f64>();
                out
            })
            .collect()
    }

    /// Causal filtering starting from `x0`-scaled steady state.
    fn run(&self, x: &mut [f64]) {
        let zi = self.initial_states();
        let x0 = x[0];
        for (s, z) in self.sections.iter().zip(zi) {
            let (mut z0, mut z1) = (z[0] * x0, z[1] * x0);
            let [b0, b1, b2] = s.b;
            let [_, a1, a2] = s.a;
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z0;
                z0 = b1 * xin - a1 * y + z1;
                z1 = b2 * xin - a2 * y;
                *v = y;
            }
        }
    }

    /// Forward-backward filtering; zero phase, squared magnitude.
    pub fn filtfilt(&self, x: &[f64]) -> Result<Vec<f64>> {
        let pad = self.padlen();
        if x.len() <= pad + 3 {
            return Err(Error::TooShort {
                needed: pad + 4,
                got: x.len(),
            });
        }
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        self.run(&mut ext);
        ext.reverse();
        self.run(&mut ext);
        ext.reverse();
        Ok(ext[pad..pad + n].to_vec())
    }
}

/// Zero-phase band-pass between `lo_hz` and `hi_hz` with the default
/// second-order Butterworth prototype.
pub fn bandpass_range(trace: &PulseTrace, lo_hz: f64, hi_hz: f64) -> Result<PulseTrace> {
    let sos = butter_bandpass(FILTER_ORDER, lo_hz, hi_hz, trace.fps)?;
    Ok(PulseTrace::new(trace.fps, sos.filtfilt(&trace.samples)?))
}

/// Zero-phase band-pass over the heart-rate band 0.75–2.5 Hz.
pub fn bandpass(trace: &PulseTrace) -> Result<PulseTrace> {
    bandpass_range(trace, PASS_LO_HZ, PASS_HI_HZ)
}
