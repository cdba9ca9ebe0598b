//! TS-CAN-lite: a two-branch convolutional network that maps short clips of
//! normalized frame differences to the per-frame derivative of the pulse.
//!
//! The appearance branch sees standardized raw frames and produces one
//! soft attention mask per stage; each mask gates the motion branch, whose
//! convolutions are preceded by temporal shifts. Clips are stacked along the
//! batch axis, and the shift never crosses a clip boundary.

mod preprocess;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{glorot_uniform, Bound, Grads, Graph, ModelParams, NodeId, Padding, Tensor};

pub use preprocess::{area_downsample, preprocess, ClipBatch, ClipInput, PreparedVideo, MOTION_EPS};

/// Name prefix of the motion-branch tensors.
pub const MOTION_PREFIX: &str = "motion.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsCanConfig {
    pub window_frames: usize,
    pub input_resolution: usize,
    /// Output channels of the two conv stages.
    pub channels: (usize, usize),
    pub hidden: usize,
    pub shift_fraction: f64,
    pub dropout: f32,
}

impl Default for TsCanConfig {
    fn default() -> Self {
        TsCanConfig {
            window_frames: 20,
            input_resolution: 36,
            channels: (16, 32),
            hidden: 32,
            shift_fraction: 0.25,
            dropout: 0.25,
        }
    }
}

impl TsCanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_frames < 2 {
            return Err(Error::invalid("window_frames must be at least 2"));
        }
        if !(self.shift_fraction > 0.0 && self.shift_fraction <= 0.5) {
            return Err(Error::invalid("shift_fraction must lie in (0, 1/2]"));
        }
        if self.input_resolution == 0 || !self.input_resolution.is_multiple_of(4) {
            return Err(Error::invalid(
                "input_resolution must be divisible by both pooling factors (4)",
            ));
        }
        if self.channels.0 == 0 || self.channels.1 == 0 || self.hidden == 0 {
            return Err(Error::invalid("layer widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must lie in [0, 1)"));
        }
        Ok(())
    }

    fn fold(&self, channels: usize) -> usize {
        (channels as f64 * self.shift_fraction).floor() as usize
    }

    fn flat_features(&self) -> usize {
        let r = self.input_resolution / 4;
        self.channels.1 * r * r
    }

    /// Expected `(name, shape)` of every tensor.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (c1, c2) = self.channels;
        let mut v = Vec::new();
        for branch in ["appearance", "motion"] {
            v.push((format!("{branch}.conv1.w"), vec![c1, 3, 3, 3]));
            v.push((format!("{branch}.conv1.b"), vec![c1]));
            v.push((format!("{branch}.conv2.w"), vec![c2, c1, 3, 3]));
            v.push((format!("{branch}.conv2.b"), vec![c2]));
        }
        v.push(("attention1.w".into(), vec![1, c1, 1, 1]));
        v.push(("attention1.b".into(), vec![1]));
        v.push(("attention2.w".into(), vec![1, c2, 1, 1]));
        v.push(("attention2.b".into(), vec![1]));
        v.push(("head.dense1.w".into(), vec![self.flat_features(), self.hidden]));
        v.push(("head.dense1.b".into(), vec![self.hidden]));
        v.push(("head.dense2.w".into(), vec![self.hidden, 1]));
        v.push(("head.dense2.b".into(), vec![1]));
        v
    }

    /// Reject parameter sets whose names or shapes do not fit this config.
    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let expected = self.param_shapes();
        if params.len() != expected.len() {
            return Err(Error::invalid(format!(
                "expected {} tensors, found {}",
                expected.len(),
                params.len()
            )));
        }
        for (name, shape) in expected {
            match params.get(&name) {
                None => return Err(Error::invalid(format!("missing tensor `{name}`"))),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::invalid(format!(
                        "`{name}` has shape {:?}, config needs {shape:?}",
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params<R: Rng>(config: &TsCanConfig, rng: &mut R) -> Result<ModelParams> {
    config.validate()?;
    let mut p = ModelParams::new();
    for (name, shape) in config.param_shapes() {
        let t = if name.ends_with(".b") {
            Tensor::zeros(&shape)
        } else if shape.len() == 4 {
            let k = shape[2] * shape[3];
            glorot_uniform(&shape, shape[1] * k, shape[0] * k, rng)
        } else {
            glorot_uniform(&shape, shape[0], shape[1], rng)
        };
        p.insert(name, t);
    }
    Ok(p)
}

/// Freeze every motion-branch tensor; later optimizer steps copy them
/// unchanged.
pub fn freeze_motion_branch(params: &ModelParams) -> ModelParams {
    let mut p = params.clone();
    p.freeze_prefix(MOTION_PREFIX);
    p
}

/// Inverted-dropout multiplier as a constant graph input.
fn dropout<R: Rng>(g: &mut Graph, x: NodeId, rate: f32, rng: Option<&mut R>) -> Result<NodeId> {
    let Some(rng) = rng else { return Ok(x) };
    if rate == 0.0 {
        return Ok(x);
    }
    let shape = g.value(x).shape().to_vec();
    let keep = 1.0 / (1.0 - rate);
    let n: usize = shape.iter().product();
    let mask: Vec<f32> = (0..n)
        .map(|_| if rng.random::<f32>() < rate { 0.0 } else { keep })
        .collect();
    let m = g.input(Tensor::new(shape, mask)?);
    g.mul(x, m)
}

fn attention(g: &mut Graph, p: &Bound, feat: NodeId, stage: usize) -> Result<NodeId> {
    let logits = g.conv2d(
        feat,
        p.id(&format!("attention{stage}.w")),
        Some(p.id(&format!("attention{stage}.b"))),
        1,
        Padding::Valid,
    )?;
    let s = g.sigmoid(logits);
    g.mask_normalize(s)
}

/// Nodes of interest from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `[clips, window_frames]` predicted derivative.
    pub output: NodeId,
    pub mask1: NodeId,
    pub mask2: NodeId,
}

/// Record the network on `g`. `motion` and `appearance` are
/// `[clips*T, 3, R, R]`. Dropout is active only when `rng` is given.
pub fn forward<R: Rng>(
    g: &mut Graph,
    p: &Bound,
    motion: NodeId,
    appearance: NodeId,
    config: &TsCanConfig,
    mut rng: Option<&mut R>,
) -> Result<Forward> {
    let t = config.window_frames;
    let ms = g.value(motion).shape().to_vec();
    let r = config.input_resolution;
    if ms.len() != 4 || ms[1] != 3 || ms[2] != r || ms[3] != r || !ms[0].is_multiple_of(t) {
        return Err(Error::invalid(format!(
            "input {ms:?} does not match [k*{t}, 3, {r}, {r}]"
        )));
    }
    if g.value(appearance).shape() != ms.as_slice() {
        return Err(Error::invalid("motion and appearance shapes differ"));
    }
    let clips = ms[0] / t;

    // stage 1
    let a = g.conv2d(appearance, p.id("appearance.conv1.w"), Some(p.id("appearance.conv1.b")), 1, Padding::Same)?;
    let a1 = g.tanh(a);
    let m = g.temporal_shift(motion, config.fold(3), t)?;
    let m = g.conv2d(m, p.id("motion.conv1.w"), Some(p.id("motion.conv1.b")), 1, Padding::Same)?;
    let m1 = g.tanh(m);
    let mask1 = attention(g, p, a1, 1)?;
    let gated = g.mul(m1, mask1)?;
    let mp = g.avg_pool2d(gated, 2)?;
    let mp = dropout(g, mp, config.dropout, rng.as_deref_mut())?;
    let ap = g.avg_pool2d(a1, 2)?;
    let ap = dropout(g, ap, config.dropout, rng.as_deref_mut())?;

    // stage 2
    let a = g.conv2d(ap, p.id("appearance.conv2.w"), Some(p.id("appearance.conv2.b")), 1, Padding::Same)?;
    let a2 = g.tanh(a);
    let m = g.temporal_shift(mp, config.fold(config.channels.0), t)?;
    let m = g.conv2d(m, p.id("motion.conv2.w"), Some(p.id("motion.conv2.b")), 1, Padding::Same)?;
    let m2 = g.tanh(m);
    let mask2 = attention(g, p, a2, 2)?;
    let gated = g.mul(m2, mask2)?;
    let mp = g.avg_pool2d(gated, 2)?;

    let flat = g.reshape(mp, &[clips * t, config.flat_features()])?;
    let flat = dropout(g, flat, config.dropout, rng.as_deref_mut())?;
    let h = g.dense(flat, p.id("head.dense1.w"), Some(p.id("head.dense1.b")))?;
    let h = g.tanh(h);
    let h = dropout(g, h, config.dropout, rng)?;
    let out = g.dense(h, p.id("head.dense2.w"), Some(p.id("head.dense2.b")))?;
    let output = g.reshape(out, &[clips, t])?;
    Ok(Forward { output, mask1, mask2 })
}

/// Per-clip standardized MSE between `pred` and `target`, both `[clips, T]`.
pub fn clip_loss(g: &mut Graph, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let ps = g.standardize(pred)?;
    let ts = g.standardize(target)?;
    g.mse_loss(ps, ts)
}

/// Loss and gradients of every trainable tensor on one labelled batch.
pub fn loss_and_grads<R: Rng>(
    params: &ModelParams,
    batch: &ClipBatch,
    config: &TsCanConfig,
    rng: Option<&mut R>,
) -> Result<(f32, Grads)> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("batch has no labels"))?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let motion = g.input(batch.motion.clone());
    let appearance = g.input(batch.appearance.clone());
    let fwd = forward(&mut g, &bound, motion, appearance, config, rng)?;
    let target = g.input(labels.clone());
    let loss = clip_loss(&mut g, fwd.output, target)?;
    let value = g.value(loss).item();
    let grads = g.backward(loss)?;
    Ok((value, params.collect_grads(&bound, grads)))
}

/// Loss without gradients (eval mode).
pub fn batch_loss(params: &ModelParams, batch: &ClipBatch, config: &TsCanConfig) -> Result<f32> {
    let labels = batch
        .labels
        .as_ref()
        .ok_or_else(|| Error::invalid("batch has no labels"))?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let motion = g.input(batch.motion.clone());
    let appearance = g.input(batch.appearance.clone());
    let fwd = forward::<rand_chacha::ChaCha8Rng>(&mut g, &bound, motion, appearance, config, None)?;
    let target = g.input(labels.clone());
    let loss = clip_loss(&mut g, fwd.output, target)?;
    Ok(g.value(loss).item())
}

/// Eval-mode prediction for every clip of the batch, `[clips][T]`.
pub fn predict(params: &ModelParams, batch: &ClipBatch, config: &TsCanConfig) -> Result<Vec<Vec<f32>>> {
    config.check_params(params)?;
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let motion = g.input(batch.motion.clone());
    let appearance = g.input(batch.appearance.clone());
    let fwd = forward::<rand_chacha::ChaCha8Rng>(&mut g, &bound, motion, appearance, config, None)?;
    let out = g.value(fwd.output);
    Ok(out.data().chunks(config.window_frames).map(|c| c.to_vec()).collect())
}

/// Eval-mode output for a single clip.
pub fn forward_clip(params: &ModelParams, clip: &ClipInput, config: &TsCanConfig) -> Result<Vec<f32>> {
    let batch = ClipBatch::stack(std::slice::from_ref(clip), None)?;
    Ok(predict(params, &batch, config)?.remove(0))
}
