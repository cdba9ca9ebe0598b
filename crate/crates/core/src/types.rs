use std::ops::Range;

use crate::error::{Error, Result};

/// Time-ordered stack of 8-bit RGB frames.
///
/// Pixels are stored interleaved, `[frame][row][col][rgb]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    fps: f64,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl FrameSequence {
    pub fn new(fps: f64, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::invalid(format!("fps must be positive, got {fps}")));
        }
        if height == 0 || width == 0 {
            return Err(Error::invalid("frame size must be non-zero"));
        }
        let per = height * width * 3;
        if data.is_empty() || !data.len().is_multiple_of(per) {
            return Err(Error::invalid(format!(
                "{} bytes is not a whole number of {height}x{width} RGB frames",
                data.len()
            )));
        }
        Ok(FrameSequence {
            fps,
            height,
            width,
            data,
        })
    }

    /// Build from per-frame closures returning RGB in `[0, 1]`.
    pub fn from_fn(
        fps: f64,
        frames: usize,
        height: usize,
        width: usize,
        mut pixel: impl FnMut(usize, usize, usize) -> [f32; 3],
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(frames * height * width * 3);
        for t in 0..frames {
            for y in 0..height {
                for x in 0..width {
                    for v in pixel(t, y, x) {
                        data.push(quantize(v));
                    }
                }
            }
        }
        Self::new(fps, height, width, data)
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.frame_bytes()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn frame_bytes(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[u8] {
        let n = self.frame_bytes();
        &self.data[t * n..(t + 1) * n]
    }

    pub fn pixel(&self, t: usize, y: usize, x: usize) -> [f32; 3] {
        let i = t * self.frame_bytes() + (y * self.width + x) * 3;
        [
            self.data[i] as f32 / 255.0,
            self.data[i + 1] as f32 / 255.0,
            self.data[i + 2] as f32 / 255.0,
        ]
    }

    pub fn raw(&self) -> &[u8] {
        &self.data
    }

    pub fn slice(&self, range: Range<usize>) -> Result<Self> {
        if range.start >= range.end || range.end > self.len() {
            return Err(Error::invalid(format!(
                "frame range {range:?} outside 0..{}",
                self.len()
            )));
        }
        let n = self.frame_bytes();
        Self::new(
            self.fps,
            self.height,
            self.width,
            self.data[range.start * n..range.end * n].to_vec(),
        )
    }
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Uniformly sampled scalar series.
#[derive(Clone, Debug, PartialEq)]
pub struct PulseTrace {
    pub fps: f64,
    pub samples: Vec<f64>,
}

impl PulseTrace {
    pub fn new(fps: f64, samples: Vec<f64>) -> Self {
        PulseTrace { fps, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.fps
    }

    pub fn slice(&self, range: Range<usize>) -> PulseTrace {
        PulseTrace::new(self.fps, self.samples[range].to_vec())
    }

    /// First difference, one sample shorter.
    pub fn diff(&self) -> PulseTrace {
        PulseTrace::new(
            self.fps,
            self.samples.windows(2).map(|w| w[1] - w[0]).collect(),
        )
    }
}

/// Grouped skin-type class used for stratified evaluation.
#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub enum SkinType {
    #[serde(rename = "II")]
    II,
    #[serde(rename = "III")]
    III,
    #[serde(rename = "IV")]
    IV,
    #[serde(rename = "V+VI")]
    VVI,
}

impl SkinType {
    pub const ALL: [SkinType; 4] = [SkinType::II, SkinType::III, SkinType::IV, SkinType::VVI];

    pub fn label(self) -> &'static str {
        match self {
            SkinType::II => "II",
            SkinType::III => "III",
            SkinType::IV => "IV",
            SkinType::VVI => "V+VI",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        SkinType::ALL.into_iter().find(|t| t.label() == s)
    }
}

impl std::fmt::Display for SkinType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}
