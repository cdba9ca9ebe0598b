use std::ops::Range;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::{FrameSequence, PulseTrace};

use super::TsCanConfig;

/// Guard in the normalized frame difference.
pub const MOTION_EPS: f32 = 1e-7;

/// Per output index, the contributing input indices and their weights.
fn area_weights(from: usize, to: usize) -> Vec<Vec<(usize, f32)>> {
    let scale = from as f64 / to as f64;
    (0..to)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            let mut w = Vec::new();
            let mut k = lo.floor() as usize;
            while (k as f64) < hi && k < from {
                let overlap = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                if overlap > 0.0 {
                    w.push((k, (overlap / scale) as f32));
                }
                k += 1;
            }
            w
        })
        .collect()
}

/// Area-average one interleaved RGB8 frame down to `[3, size, size]` floats
/// in `[0, 1]`.
pub fn area_downsample(frame: &[u8], height: usize, width: usize, size: usize) -> Vec<f32> {
    let wy = area_weights(height, size);
    let wx = area_weights(width, size);
    // rows first: [size][width][3]
    let mut rows = vec![0.0f32; size * width * 3];
    for (i, ws) in wy.iter().enumerate() {
        let dst = &mut rows[i * width * 3..(i + 1) * width * 3];
        for &(y, w) in ws {
            let src = &frame[y * width * 3..(y + 1) * width * 3];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += w * s as f32;
            }
        }
    }
    let mut out = vec![0.0f32; 3 * size * size];
    for i in 0..size {
        for (j, ws) in wx.iter().enumerate() {
            let mut acc = [0.0f32; 3];
            for &(x, w) in ws {
                for c in 0..3 {
                    acc[c] += w * rows[(i * width + x) * 3 + c];
                }
            }
            for c in 0..3 {
                out[(c * size + i) * size + j] = acc[c] / 255.0;
            }
        }
    }
    out
}

/// A video downsampled once to network resolution; clips are cut from it on
/// demand.
#[derive(Clone, Debug)]
pub struct PreparedVideo {
    pub fps: f64,
    pub resolution: usize,
    frames: Vec<f32>,
}

fn standardize_in_place(x: &mut [f32]) {
    let n = x.len() as f64;
    let mean = x.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    let scale = if sd > 1e-7 { 1.0 / sd } else { 1.0 };
    for v in x.iter_mut() {
        *v = ((*v as f64 - mean) * scale) as f32;
    }
}

impl PreparedVideo {
    pub fn new(frames: &FrameSequence, resolution: usize) -> Result<Self> {
        if resolution == 0 {
            return Err(Error::invalid("resolution must be positive"));
        }
        let mut data = Vec::with_capacity(frames.len() * 3 * resolution * resolution);
        for t in 0..frames.len() {
            data.extend(area_downsample(frames.frame(t), frames.height(), frames.width(), resolution));
        }
        Ok(PreparedVideo {
            fps: frames.fps(),
            resolution,
            frames: data,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len() / self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    fn frame_len(&self) -> usize {
        3 * self.resolution * self.resolution
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.frames[t * n..(t + 1) * n]
    }

    /// Number of normalized-difference frames (one fewer than video frames).
    pub fn motion_len(&self) -> usize {
        self.len().saturating_sub(1)
    }

    /// Clip covering difference frames `start..start+window`, which reads
    /// video frames `start..=start+window`.
    pub fn clip(&self, start: usize, window: usize) -> Result<ClipInput> {
        if window == 0 || start + window > self.motion_len() {
            return Err(Error::TooShort {
                needed: start + window + 1,
                got: self.len(),
            });
        }
        let fl = self.frame_len();
        let mut motion = Vec::with_capacity(window * fl);
        let mut appearance = Vec::with_capacity(window * fl);
        for t in start..start + window {
            let (a, b) = (self.frame(t), self.frame(t + 1));
            motion.extend(a.iter().zip(b).map(|(x, y)| (y - x) / (y + x + MOTION_EPS)));
            appearance.extend_from_slice(a);
        }
        standardize_in_place(&mut motion);
        standardize_in_place(&mut appearance);
        let shape = vec![window, 3, self.resolution, self.resolution];
        Ok(ClipInput {
            start,
            motion: Tensor::new(shape.clone(), motion)?,
            appearance: Tensor::new(shape, appearance)?,
        })
    }

    /// Starts of the non-overlapping clips inside difference-frame `range`.
    pub fn clip_starts(&self, range: Range<usize>, window: usize) -> Vec<usize> {
        let end = range.end.min(self.motion_len());
        let mut starts = Vec::new();
        let mut s = range.start;
        while s + window <= end {
            starts.push(s);
            s += window;
        }
        starts
    }
}

/// One network input clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInput {
    /// First difference-frame index covered.
    pub start: usize,
    /// `[T, 3, R, R]` normalized frame differences, standardized per clip.
    pub motion: Tensor,
    /// `[T, 3, R, R]` raw frames, standardized per clip.
    pub appearance: Tensor,
}

/// Split a video into non-overlapping clips of `config.window_frames`.
pub fn preprocess(frames: &FrameSequence, config: &TsCanConfig) -> Result<Vec<ClipInput>> {
    config.validate()?;
    let t = config.window_frames;
    if frames.len() < t + 1 {
        return Err(Error::TooShort {
            needed: t + 1,
            got: frames.len(),
        });
    }
    let v = PreparedVideo::new(frames, config.input_resolution)?;
    v.clip_starts(0..v.motion_len(), t)
        .into_iter()
        .map(|s| v.clip(s, t))
        .collect()
}

/// Several clips stacked along the batch axis, with optional targets.
#[derive(Clone, Debug)]
pub struct ClipBatch {
    pub motion: Tensor,
    pub appearance: Tensor,
    /// `[clips, T]`.
    pub labels: Option<Tensor>,
    pub starts: Vec<usize>,
}

impl ClipBatch {
    /// `labels`, when given, is a derivative trace indexed by difference
    /// frame; each clip takes the samples it covers.
    pub fn stack(clips: &[ClipInput], labels: Option<&PulseTrace>) -> Result<Self> {
        Self::stack_from(clips, labels, 0)
    }

    /// As [`ClipBatch::stack`], with `labels.samples[0]` belonging to
    /// difference frame `offset`.
    pub fn stack_from(clips: &[ClipInput], labels: Option<&PulseTrace>, offset: usize) -> Result<Self> {
        let first = clips.first().ok_or_else(|| Error::invalid("no clips to stack"))?;
        let shape = first.motion.shape().to_vec();
        let t = shape[0];
        let mut motion = Vec::with_capacity(clips.len() * first.motion.len());
        let mut appearance = Vec::with_capacity(clips.len() * first.motion.len());
        for c in clips {
            if c.motion.shape() != shape.as_slice() {
                return Err(Error::invalid("clips differ in shape"));
            }
            motion.extend_from_slice(c.motion.data());
            appearance.extend_from_slice(c.appearance.data());
        }
        let mut bshape = shape.clone();
        bshape[0] = clips.len() * t;
        let labels = match labels {
            None => None,
            Some(l) => {
                let mut v = Vec::with_capacity(clips.len() * t);
                for c in clips {
                    if c.start < offset || c.start - offset + t > l.len() {
                        return Err(Error::invalid(format!(
                            "labels cover difference frames {offset}..{}, clip needs {}..{}",
                            offset + l.len(),
                            c.start,
                            c.start + t
                        )));
                    }
                    let s = c.start - offset;
                    v.extend(l.samples[s..s + t].iter().map(|&x| x as f32));
                }
                Some(Tensor::new(vec![clips.len(), t], v)?)
            }
        };
        Ok(ClipBatch {
            motion: Tensor::new(bshape.clone(), motion)?,
            appearance: Tensor::new(bshape, appearance)?,
            labels,
            starts: clips.iter().map(|c| c.start).collect(),
        })
    }

    pub fn clips(&self) -> usize {
        self.starts.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn area_downsample_preserves_mean_and_constants() {
        let frame: Vec<u8> = (0..64 * 64 * 3).map(|i| (i * 7 % 251) as u8).collect();
        let out = area_downsample(&frame, 64, 64, 36);
        for c in 0..3 {
            let src: f64 = frame.iter().skip(c).step_by(3).map(|&v| v as f64 / 255.0).sum::<f64>() / 4096.0;
            let dst: f64 = out[c * 1296..(c + 1) * 1296].iter().map(|&v| v as f64).sum::<f64>() / 1296.0;
            assert!((src - dst).abs() < 1e-5, "{src} {dst}");
        }
        let flat = vec![200u8; 10 * 6 * 3];
        assert!(area_downsample(&flat, 10, 6, 4).iter().all(|&v| (v - 200.0 / 255.0).abs() < 1e-6));
        // integer factor: plain block mean
        let f: Vec<u8> = (0..4 * 4).flat_map(|i| [i as u8 * 10, 0, 0]).collect();
        let o = area_downsample(&f, 4, 4, 2);
        assert!((o[0] - (0.0 + 10.0 + 40.0 + 50.0) / 4.0 / 255.0).abs() < 1e-6);
    }

    fn cfg() -> TsCanConfig {
        TsCanConfig {
            window_frames: 10,
            input_resolution: 8,
            ..Default::default()
        }
    }

    #[test]
    fn constant_video_has_zero_motion() {
        let frames = FrameSequence::new(30.0, 8, 8, vec![90; 8 * 8 * 3 * 21]).unwrap();
        let clips = preprocess(&frames, &cfg()).unwrap();
        assert_eq!(clips.len(), 2);
        assert!(clips.iter().all(|c| c.motion.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn brightness_step_shows_only_at_its_index() {
        let frames = FrameSequence::from_fn(30.0, 11, 8, 8, |t, y, _| {
            let base = 0.3 + 0.02 * y as f32;
            [base + if t >= 5 { 0.2 } else { 0.0 }; 3]
        })
        .unwrap();
        let v = PreparedVideo::new(&frames, 8).unwrap();
        let fl = 3 * 64;
        // raw differences before standardization
        for t in 0..10 {
            let nz = v.frame(t).iter().zip(v.frame(t + 1)).any(|(a, b)| (b - a).abs() > 0.0);
            assert_eq!(nz, t == 4, "t={t}");
        }
        let c = v.clip(0, 10).unwrap();
        let step = &c.motion.data()[4 * fl..5 * fl];
        let other = c.motion.data()[0];
        assert!(step.iter().all(|&x| x > other));
        assert!(c.motion.data()[..4 * fl].iter().all(|&x| x == other));
    }

    #[test]
    fn appearance_is_standardized() {
        let frames = FrameSequence::from_fn(30.0, 25, 16, 16, |t, y, x| {
            [(t as f32 * 0.03 + x as f32 * 0.02) % 1.0, y as f32 / 16.0, 0.4]
        })
        .unwrap();
        for c in preprocess(&frames, &cfg()).unwrap() {
            let d = c.appearance.data();
            let n = d.len() as f64;
            let m = d.iter().map(|&v| v as f64).sum::<f64>() / n;
            let s = (d.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
            assert!(m.abs() < 1e-5 && (s - 1.0).abs() < 1e-4, "{m} {s}");
        }
    }

    #[test]
    fn too_short_rejected_and_batch_labels_align() {
        let frames = FrameSequence::new(30.0, 8, 8, vec![1; 8 * 8 * 3 * 10]).unwrap();
        assert!(matches!(preprocess(&frames, &cfg()), Err(Error::TooShort { .. })));
        let frames = FrameSequence::new(30.0, 8, 8, vec![1; 8 * 8 * 3 * 31]).unwrap();
        let clips = preprocess(&frames, &cfg()).unwrap();
        let labels = PulseTrace::new(30.0, (0..30).map(|i| i as f64).collect());
        let b = ClipBatch::stack(&clips[1..], Some(&labels)).unwrap();
        assert_eq!(b.motion.shape(), &[20, 3, 8, 8]);
        let l = b.labels.unwrap();
        assert_eq!(l.shape(), &[2, 10]);
        assert_eq!(l.data()[0], 10.0);
        assert_eq!(l.data()[19], 29.0);
    }
}
