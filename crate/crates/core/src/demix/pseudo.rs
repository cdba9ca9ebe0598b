use crate::error::{Error, Result};
use crate::{FrameSequence, PulseTrace};

use super::{demix, mean, spatial_average, std, Method};

/// A pulse whose std falls below this is treated as carrying no signal.
pub const FLAT_LABEL_STD: f64 = 1e-9;

/// Derivative-domain training target aligned with the frame differences
/// (one sample shorter than the video).
#[derive(Clone, Debug)]
pub struct PseudoLabel {
    pub deriv: PulseTrace,
    pub source: Method,
}

/// First difference of `pulse`, standardized to zero mean and unit variance.
pub fn derivative_label(pulse: &PulseTrace) -> Result<PulseTrace> {
    if pulse.len() < 3 {
        return Err(Error::TooShort {
            needed: 3,
            got: pulse.len(),
        });
    }
    let s = std(&pulse.samples);
    if !(s >= FLAT_LABEL_STD) {
        return Err(Error::FlatLabel { std: s });
    }
    let d = pulse.diff();
    let (m, sd) = (mean(&d.samples), std(&d.samples));
    if !(sd >= FLAT_LABEL_STD) {
        return Err(Error::FlatLabel { std: sd });
    }
    Ok(PulseTrace::new(
        d.fps,
        d.samples.iter().map(|v| (v - m) / sd).collect(),
    ))
}

/// Pseudo label from the whole-frame colour average via the chosen demixer.
pub fn make_pseudo_labels(frames: &FrameSequence, method: Method) -> Result<PseudoLabel> {
    let trace = spatial_average(frames, None)?;
    let pulse = demix(&trace, method)?;
    Ok(PseudoLabel {
        deriv: derivative_label(&pulse)?,
        source: method,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_is_standardized_difference() {
        let p = PulseTrace::new(30.0, (0..100).map(|t| (t as f64 * 0.3).sin()).collect());
        let d = derivative_label(&p).unwrap();
        assert_eq!(d.len(), 99);
        assert!(mean(&d.samples).abs() < 1e-12);
        assert!((std(&d.samples) - 1.0).abs() < 1e-12);
        // same sign pattern as the raw difference
        let raw = p.diff();
        let agree = raw.samples.iter().zip(&d.samples).filter(|(a, b)| (**a > 0.0) == (**b > 0.0)).count();
        assert!(agree > 90);
    }

    #[test]
    fn flat_pulse_rejected() {
        let p = PulseTrace::new(30.0, vec![3.0; 50]);
        assert!(matches!(derivative_label(&p), Err(Error::FlatLabel { .. })));
    }

    #[test]
    fn flat_video_gives_flat_label_error() {
        let frames = FrameSequence::new(30.0, 4, 4, vec![120; 4 * 4 * 3 * 120]).unwrap();
        assert!(matches!(
            make_pseudo_labels(&frames, Method::Pos),
            Err(Error::FlatLabel { .. })
        ));
    }
}
