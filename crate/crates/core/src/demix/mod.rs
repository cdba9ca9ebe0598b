//! Unsupervised pulse extraction from spatially averaged RGB traces.
//!
//! All three demixers return band-passed traces whose sign follows the
//! reflectance convention of the renderer in [`crate::synth`]: the output
//! rises when the skin's green-dominant chrominance rises.

mod chrom;
mod ica;
mod pos;
mod pseudo;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{FrameSequence, PulseTrace};

pub use chrom::{chrom, chrom_raw};
pub use ica::{ica, IcaResult, ICA_MAX_ITER, ICA_TOL};
pub use pos::{pos, pos_raw};
pub use pseudo::{derivative_label, make_pseudo_labels, PseudoLabel, FLAT_LABEL_STD};

/// Sliding-window length used by POS and CHROM, seconds.
pub const WINDOW_SECONDS: f64 = 1.6;

/// Per-frame spatial means of the three colour channels.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbTrace {
    pub r: Vec<f64>,
    pub g: Vec<f64>,
    pub b: Vec<f64>,
    pub fps: f64,
}

impl RgbTrace {
    pub fn new(r: Vec<f64>, g: Vec<f64>, b: Vec<f64>, fps: f64) -> Result<Self> {
        if r.len() != g.len() || r.len() != b.len() {
            return Err(Error::invalid("RGB channels differ in length"));
        }
        if r.len() < 2 {
            return Err(Error::TooShort {
                needed: 2,
                got: r.len(),
            });
        }
        if !(fps > 0.0) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        Ok(RgbTrace { r, g, b, fps })
    }

    pub fn len(&self) -> usize {
        self.r.len()
    }

    pub fn is_empty(&self) -> bool {
        self.r.is_empty()
    }

    pub fn channels(&self) -> [&[f64]; 3] {
        [&self.r, &self.g, &self.b]
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> RgbTrace {
        RgbTrace {
            r: self.r[range.clone()].to_vec(),
            g: self.g[range.clone()].to_vec(),
            b: self.b[range].to_vec(),
            fps: self.fps,
        }
    }

    /// Multiply every channel by the same per-frame factor.
    pub fn scaled(&self, factor: &[f64]) -> RgbTrace {
        let s = |c: &[f64]| c.iter().zip(factor).map(|(v, f)| v * f).collect();
        RgbTrace {
            r: s(&self.r),
            g: s(&self.g),
            b: s(&self.b),
            fps: self.fps,
        }
    }

    pub fn window_len(&self) -> usize {
        (WINDOW_SECONDS * self.fps).round().max(2.0) as usize
    }

    fn require_window(&self) -> Result<usize> {
        let l = self.window_len();
        if self.len() < l {
            return Err(Error::TooShort {
                needed: l,
                got: self.len(),
            });
        }
        Ok(l)
    }
}

/// Which pulse source produced a label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Pos,
    Chrom,
    Ica,
    Gold,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" => Ok(Method::Pos),
            "chrom" => Ok(Method::Chrom),
            "ica" => Ok(Method::Ica),
            "gold" => Ok(Method::Gold),
            other => Err(Error::invalid(format!("unknown demixing method `{other}`"))),
        }
    }
}

/// Per-frame mean over the masked pixels (all pixels when `mask` is `None`).
/// The mask is row-major `height × width`.
pub fn spatial_average(frames: &FrameSequence, mask: Option<&[bool]>) -> Result<RgbTrace> {
    if frames.is_empty() {
        return Err(Error::invalid("no frames"));
    }
    let npix = frames.height() * frames.width();
    let selected: Vec<usize> = match mask {
        Some(m) => {
            if m.len() != npix {
                return Err(Error::invalid(format!(
                    "mask has {} pixels, frames have {npix}",
                    m.len()
                )));
            }
            let idx: Vec<usize> = (0..npix).filter(|&i| m[i]).collect();
            if idx.is_empty() {
                return Err(Error::invalid("skin mask selects no pixel"));
            }
            idx
        }
        None => (0..npix).collect(),
    };
    let n = frames.len();
    let (mut r, mut g, mut b) = (
        Vec::with_capacity(n),
        Vec::with_capacity(n),
        Vec::with_capacity(n),
    );
    let scale = 1.0 / (255.0 * selected.len() as f64);
    for t in 0..n {
        let f = frames.frame(t);
        let (mut sr, mut sg, mut sb) = (0u64, 0u64, 0u64);
        for &i in &selected {
            sr += f[3 * i] as u64;
            sg += f[3 * i + 1] as u64;
            sb += f[3 * i + 2] as u64;
        }
        r.push(sr as f64 * scale);
        g.push(sg as f64 * scale);
        b.push(sb as f64 * scale);
    }
    RgbTrace::new(r, g, b, frames.fps())
}

/// Run the chosen demixer. `Method::Gold` has no demixer and is rejected.
pub fn demix(trace: &RgbTrace, method: Method) -> Result<PulseTrace> {
    match method {
        Method::Pos => pos(trace),
        Method::Chrom => chrom(trace),
        Method::Ica => ica(trace).map(|r| r.pulse),
        Method::Gold => Err(Error::invalid("`gold` is a reference label, not a demixer")),
    }
}

pub(crate) fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

pub(crate) fn std(x: &[f64]) -> f64 {
    let m = mean(x);
    (x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64).sqrt()
}
