use crate::error::Result;
use crate::sigproc::bandpass;
use crate::PulseTrace;

use super::{mean, std, RgbTrace};

/// Floor on the std of the second projection before forming the ratio.
const SIGMA_FLOOR: f64 = 1e-9;

/// Plane-orthogonal-to-skin projection with stride-1 overlap-add, before the
/// final band-pass.
pub fn pos_raw(trace: &RgbTrace) -> Result<Vec<f64>> {
    let l = trace.require_window()?;
    let n = trace.len();
    let mut out = vec![0.0; n];
    let mut s1 = vec![0.0; l];
    let mut s2 = vec![0.0; l];
    for start in 0..=n - l {
        let r = &trace.r[start..start + l];
        let g = &trace.g[start..start + l];
        let b = &trace.b[start..start + l];
        let (mr, mg, mb) = (mean(r), mean(g), mean(b));
        for k in 0..l {
            let (rn, gn, bn) = (r[k] / mr, g[k] / mg, b[k] / mb);
            s1[k] = gn - bn;
            s2[k] = -2.0 * rn + gn + bn;
        }
        let alpha = std(&s1) / std(&s2).max(SIGMA_FLOOR);
        let h: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + alpha * b).collect();
        let mh = mean(&h);
        for (o, v) in out[start..start + l].iter_mut().zip(&h) {
            *o += v - mh;
        }
    }
    Ok(out)
}

/// POS pulse estimate, band-passed to the heart-rate band.
pub fn pos(trace: &RgbTrace) -> Result<PulseTrace> {
    let raw = pos_raw(trace)?;
    bandpass(&PulseTrace::new(trace.fps, raw))
}
