use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::sigproc::{bandpass, power_spectrum, HR_BAND_BPM};
use crate::PulseTrace;

use super::{mean, std, RgbTrace};

pub const ICA_MAX_ITER: usize = 200;
pub const ICA_TOL: f64 = 1e-6;
const INIT_SEED: u64 = 0x1CA;

#[derive(Clone, Debug)]
pub struct IcaResult {
    /// Selected component, oriented and band-passed.
    pub pulse: PulseTrace,
    /// Largest in-band spectral bin over total power, per unmixed component.
    pub ratios: [f64; 3],
    pub selected: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// (W Wᵀ)^{-1/2} W
fn sym_decorrelate(w: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = SymmetricEigen::new(w * w.transpose());
    let d = eig.eigenvalues.map(|v| 1.0 / v.max(1e-300).sqrt());
    eig.eigenvectors * Matrix3::from_diagonal(&d) * eig.eigenvectors.transpose() * w
}

fn band_ratio(x: &[f64], fs: f64) -> f64 {
    let sp = power_spectrum(x, fs);
    let total: f64 = sp.power.iter().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let peak = sp.power[sp.bins_in(HR_BAND_BPM.0, HR_BAND_BPM.1)]
        .iter()
        .cloned()
        .fold(0.0, f64::max);
    peak / total
}

/// Symmetric FastICA (tanh contrast) on the z-scored RGB channels. The
/// component with the most dominant in-band spectral peak is kept and oriented
/// to agree with the green chrominance `Gn - (Rn+Bn)/2`.
pub fn ica(trace: &RgbTrace) -> Result<IcaResult> {
    let n = trace.len();
    let needed = (3.0 * trace.fps).ceil() as usize;
    if n < needed {
        return Err(Error::TooShort { needed, got: n });
    }
    let mut x = DMatrix::<f64>::zeros(3, n);
    for (c, ch) in trace.channels().iter().enumerate() {
        let (m, s) = (mean(ch), std(ch));
        if !(s > 1e-12 * m.abs().max(1.0)) {
            return Err(Error::Degenerate(format!("channel {c} is constant")));
        }
        for (t, v) in ch.iter().enumerate() {
            x[(c, t)] = (v - m) / s;
        }
    }
    let cov: Matrix3<f64> = (&x * x.transpose() / n as f64).fixed_view::<3, 3>(0, 0).into();
    let eig = SymmetricEigen::new(cov);
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if lo <= 1e-10 * hi {
        return Err(Error::Degenerate("RGB channels are linearly dependent".into()));
    }
    let whiten = Matrix3::from_diagonal(&eig.eigenvalues.map(|v| 1.0 / v.sqrt()))
        * eig.eigenvectors.transpose();
    let z = DMatrix::from_column_slice(3, 3, whiten.as_slice()) * &x;

    let mut rng = ChaCha8Rng::seed_from_u64(INIT_SEED);
    let mut w = sym_decorrelate(&Matrix3::from_fn(|_, _| StandardNormal.sample(&mut rng)));
    let mut iterations = 0;
    let mut converged = false;
    let nf = n as f64;
    while iterations < ICA_MAX_ITER {
        iterations += 1;
        let mut next = Matrix3::zeros();
        for i in 0..3 {
            let mut ezg = [0.0; 3];
            let mut egp = 0.0;
            for t in 0..n {
                let zc = z.column(t);
                let u = w[(i, 0)] * zc[0] + w[(i, 1)] * zc[1] + w[(i, 2)] * zc[2];
                let g = u.tanh();
                egp += 1.0 - g * g;
                for k in 0..3 {
                    ezg[k] += zc[k] * g;
                }
            }
            for k in 0..3 {
                next[(i, k)] = ezg[k] / nf - egp / nf * w[(i, k)];
            }
        }
        let next = sym_decorrelate(&next);
        let change = (next * w.transpose())
            .diagonal()
            .iter()
            .map(|d| (d.abs() - 1.0).abs())
            .fold(0.0, f64::max);
        w = next;
        if change < ICA_TOL {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("FastICA stopped after {ICA_MAX_ITER} iterations without converging");
    }

    let s = DMatrix::from_column_slice(3, 3, w.as_slice()) * &z;
    let comps: Vec<Vec<f64>> = (0..3).map(|i| s.row(i).iter().copied().collect()).collect();
    let ratios = [
        band_ratio(&comps[0], trace.fps),
        band_ratio(&comps[1], trace.fps),
        band_ratio(&comps[2], trace.fps),
    ];
    let selected = (0..3)
        .max_by(|&a, &b| ratios[a].total_cmp(&ratios[b]).then(b.cmp(&a)))
        .unwrap();
    let pulse = bandpass(&PulseTrace::new(trace.fps, comps[selected].clone()))?;

    let (mr, mg, mb) = (mean(&trace.r), mean(&trace.g), mean(&trace.b));
    let chroma: Vec<f64> = (0..n)
        .map(|t| trace.g[t] / mg - 0.5 * (trace.r[t] / mr + trace.b[t] / mb))
        .collect();
    let reference = bandpass(&PulseTrace::new(trace.fps, chroma))?;
    let dot: f64 = pulse.samples.iter().zip(&reference.samples).map(|(a, b)| a * b).sum();
    let pulse = if dot < 0.0 {
        PulseTrace::new(trace.fps, pulse.samples.iter().map(|v| -v).collect())
    } else {
        pulse
    };
    Ok(IcaResult {
        pulse,
        ratios,
        selected,
        iterations,
        converged,
    })
}
