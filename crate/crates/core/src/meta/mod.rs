//! Pretraining, first-order MAML over per-subject tasks, test-time few-shot
//! adaptation, and the plain fine-tuning baseline.
//!
//! Frame bookkeeping: a clip starting at difference frame `d` reads video
//! frames `d..=d+T`. A task's support covers difference frames `0..K`, its
//! query `query_start..n-1`, so the two never share a scored sample.

mod train;

use std::ops::Range;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::demix::{demix, derivative_label, spatial_average, Method, RgbTrace};
use crate::error::{Error, Result};
use crate::sigproc::bandpass;
use crate::tscan::{ClipBatch, ClipInput, PreparedVideo, TsCanConfig};
use crate::{FrameSequence, PulseTrace, SkinType};

pub(crate) use train::adapt_rng;
pub use train::{
    fine_tune_baseline, initial_params, inner_adapt, mean_query_loss, meta_train, pretrain, test_adapt, Adapted,
    MetaTrainLog, Pretrained, TaskRecord,
};

/// Support lengths of the window study, in seconds.
pub const SUPPORT_PRESETS_S: [f64; 3] = [6.0, 12.0, 18.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    /// α
    pub inner_lr: f32,
    /// β
    pub outer_lr: f32,
    pub inner_steps: usize,
    pub epochs: usize,
    /// K, in difference frames.
    pub support_frames: usize,
    /// First scored difference frame; `None` means right after the support.
    pub query_start: Option<usize>,
    pub supervised: bool,
    pub freeze_motion: bool,
    pub pseudo_method: Method,
    pub first_order: bool,
    pub meta_batch: usize,
    /// Query clips drawn per task and epoch during meta-training; `None`
    /// uses every query clip.
    pub query_clips: Option<usize>,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        MetaConfig {
            inner_lr: 0.005,
            outer_lr: 0.001,
            inner_steps: 1,
            epochs: 10,
            support_frames: 540,
            query_start: None,
            supervised: false,
            freeze_motion: false,
            pseudo_method: Method::Pos,
            first_order: true,
            meta_batch: 4,
            query_clips: None,
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self, net: &TsCanConfig) -> Result<()> {
        if !(self.inner_lr >= 0.0 && self.outer_lr >= 0.0) {
            return Err(Error::invalid("learning rates must be non-negative"));
        }
        if self.inner_steps == 0 {
            return Err(Error::invalid("inner_steps must be at least 1"));
        }
        if self.meta_batch == 0 {
            return Err(Error::invalid("meta_batch must be at least 1"));
        }
        if self.support_frames == 0 || !self.support_frames.is_multiple_of(net.window_frames) {
            return Err(Error::invalid(format!(
                "support_frames ({}) must be a positive multiple of window_frames ({})",
                self.support_frames, net.window_frames
            )));
        }
        if self.query_start() < self.support_frames {
            return Err(Error::invalid("query_start lies inside the support"));
        }
        if !self.first_order {
            return Err(Error::invalid("only the first-order outer gradient is implemented"));
        }
        if self.pseudo_method == Method::Gold {
            return Err(Error::invalid("pseudo_method must be a demixer"));
        }
        if self.query_clips == Some(0) {
            return Err(Error::invalid("query_clips must be positive"));
        }
        Ok(())
    }

    pub fn query_start(&self) -> usize {
        self.query_start.unwrap_or(self.support_frames)
    }

    /// Support of `seconds` at `fps`. The scored query stays where it was
    /// unless the longer support would overlap it.
    pub fn with_support_seconds(&self, seconds: f64, fps: f64) -> Self {
        let k = (seconds * fps).round() as usize;
        MetaConfig {
            query_start: Some(self.query_start().max(k)),
            support_frames: k,
            ..self.clone()
        }
    }

    pub(crate) fn label_source(&self) -> LabelSource {
        if self.supervised {
            LabelSource::Gold
        } else {
            LabelSource::Pseudo(self.pseudo_method)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub batch_clips: usize,
    /// Clips drawn per subject and epoch; `None` uses all of them.
    pub clips_per_subject: Option<usize>,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 5,
            lr: 1e-3,
            batch_clips: 8,
            clips_per_subject: None,
            seed: 0,
        }
    }
}

/// Where a segment's targets come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelSource {
    Gold,
    Pseudo(Method),
}

/// A gold trace that counts how often it was read.
#[derive(Clone, Debug)]
pub struct TrackedGold {
    trace: PulseTrace,
    reads: Arc<AtomicUsize>,
}

impl TrackedGold {
    pub fn new(trace: PulseTrace) -> Self {
        TrackedGold {
            trace,
            reads: Arc::new(AtomicUsize::new(0)),
        }
    }

    pub fn read(&self) -> &PulseTrace {
        self.reads.fetch_add(1, Ordering::Relaxed);
        &self.trace
    }

    pub fn reads(&self) -> usize {
        self.reads.load(Ordering::Relaxed)
    }
}

/// One subject, prepared once for the network and the demixers.
#[derive(Clone, Debug)]
pub struct SubjectData {
    pub id: String,
    pub skin_type: Option<SkinType>,
    pub video: PreparedVideo,
    /// Whole-frame colour average.
    pub rgb: RgbTrace,
    pub gold: Option<TrackedGold>,
}

impl SubjectData {
    pub fn new(
        id: impl Into<String>,
        skin_type: Option<SkinType>,
        frames: &FrameSequence,
        gold: Option<PulseTrace>,
        net: &TsCanConfig,
    ) -> Result<Self> {
        let id = id.into();
        if let Some(g) = &gold {
            if g.len() != frames.len() {
                return Err(Error::invalid(format!(
                    "subject {id}: gold has {} samples, video {} frames",
                    g.len(),
                    frames.len()
                )));
            }
        }
        Ok(SubjectData {
            video: PreparedVideo::new(frames, net.input_resolution)?,
            rgb: spatial_average(frames, None)?,
            gold: gold.map(TrackedGold::new),
            skin_type,
            id,
        })
    }

    pub fn frames(&self) -> usize {
        self.video.len()
    }

    pub fn gold_reads(&self) -> usize {
        self.gold.as_ref().map_or(0, |g| g.reads())
    }

    fn gold(&self) -> Result<&PulseTrace> {
        self.gold
            .as_ref()
            .map(|g| g.read())
            .ok_or_else(|| Error::invalid(format!("subject {} has no gold labels", self.id)))
    }

    /// Derivative targets for difference frames `range`, computed only from
    /// video frames `range.start..=range.end`.
    pub fn labels(&self, range: Range<usize>, source: LabelSource) -> Result<PulseTrace> {
        let frames = range.start..range.end + 1;
        if frames.end > self.frames() {
            return Err(Error::TooShort {
                needed: frames.end,
                got: self.frames(),
            });
        }
        let pulse = match source {
            // same band as the demixer output
            LabelSource::Gold => bandpass(&self.gold()?.slice(frames))?,
            LabelSource::Pseudo(m) => demix(&self.rgb.slice(frames), m)?,
        };
        derivative_label(&pulse)
    }

    /// Clips and targets for difference frames `range` (trimmed to whole
    /// clips).
    pub fn segment(&self, range: Range<usize>, window: usize, source: LabelSource) -> Result<Segment> {
        let starts = self.video.clip_starts(range.clone(), window);
        let Some(&last) = starts.last() else {
            return Err(Error::TooShort {
                needed: range.start + window + 1,
                got: self.frames(),
            });
        };
        let range = range.start..last + window;
        let clips = starts
            .iter()
            .map(|&s| self.video.clip(s, window))
            .collect::<Result<Vec<_>>>()?;
        Ok(Segment {
            labels: self.labels(range.clone(), source)?,
            range,
            clips,
            source,
        })
    }
}

/// Clips of a contiguous run of difference frames with aligned targets.
#[derive(Clone, Debug)]
pub struct Segment {
    pub range: Range<usize>,
    pub clips: Vec<ClipInput>,
    /// `labels.samples[0]` belongs to difference frame `range.start`.
    pub labels: PulseTrace,
    pub source: LabelSource,
}

impl Segment {
    pub fn batch(&self) -> Result<ClipBatch> {
        ClipBatch::stack_from(&self.clips, Some(&self.labels), self.range.start)
    }

    /// Batch of the clips at `indices`.
    pub fn subset(&self, indices: &[usize]) -> Result<ClipBatch> {
        let clips: Vec<ClipInput> = indices.iter().map(|&i| self.clips[i].clone()).collect();
        ClipBatch::stack_from(&clips, Some(&self.labels), self.range.start)
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// One subject's support/query split.
#[derive(Clone, Debug)]
pub struct Task {
    pub subject: String,
    pub support: Segment,
    pub query: Segment,
}

impl Task {
    pub fn source(&self) -> LabelSource {
        self.support.source
    }
}

/// Build one task per subject. Subjects without at least one query clip
/// after the support are skipped with a warning.
pub fn make_tasks(subjects: &[SubjectData], net: &TsCanConfig, config: &MetaConfig) -> Result<Vec<Task>> {
    config.validate(net)?;
    let source = config.label_source();
    let t = net.window_frames;
    let k = config.support_frames;
    let q = config.query_start();
    let mut tasks = Vec::new();
    for s in subjects {
        let n = s.video.motion_len();
        if n < q + t {
            log::warn!(
                "subject {}: {} frames leave no query clip after {} support frames; skipped",
                s.id,
                s.frames(),
                k
            );
            continue;
        }
        tasks.push(Task {
            subject: s.id.clone(),
            support: s.segment(0..k, t, source)?,
            query: s.segment(q..n, t, source)?,
        });
    }
    Ok(tasks)
}
