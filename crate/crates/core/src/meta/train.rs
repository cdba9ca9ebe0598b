use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{optimizer_step, Grads, ModelParams, OptimizerState, ParamRole};
use crate::tscan::{batch_loss, freeze_motion_branch, init_params, loss_and_grads, ClipBatch, TsCanConfig};

use super::{LabelSource, MetaConfig, PretrainConfig, SubjectData, Task};

const PRETRAIN_STREAM: u64 = 1;
const META_STREAM: u64 = 2;
const ADAPT_STREAM: u64 = 3;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Dropout stream for adapting to one subject.
pub(crate) fn adapt_rng(seed: u64, id: &str) -> ChaCha8Rng {
    stream_rng(seed ^ id_hash(id), ADAPT_STREAM)
}

/// FNV-1a, for per-subject substreams that do not depend on subject order.
fn id_hash(id: &str) -> u64 {
    id.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

#[derive(Clone, Debug)]
pub struct Pretrained {
    pub params: ModelParams,
    /// Training loss of every optimizer step.
    pub losses: Vec<f32>,
    /// Mean training loss per epoch.
    pub epoch_losses: Vec<f32>,
}

/// Supervised training on every clip of every subject with Adam.
pub fn pretrain(subjects: &[SubjectData], net: &TsCanConfig, config: &PretrainConfig) -> Result<Pretrained> {
    net.validate()?;
    if config.batch_clips == 0 {
        return Err(Error::invalid("batch_clips must be positive"));
    }
    let mut rng = stream_rng(config.seed, PRETRAIN_STREAM);
    let params = init_params(net, &mut rng)?;
    pretrain_from(params, subjects, net, config, &mut rng)
}

/// The initialization `pretrain` starts from for this seed.
pub fn initial_params(net: &TsCanConfig, seed: u64) -> Result<ModelParams> {
    init_params(net, &mut stream_rng(seed, PRETRAIN_STREAM))
}

fn pretrain_from(
    mut params: ModelParams,
    subjects: &[SubjectData],
    net: &TsCanConfig,
    config: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Pretrained> {
    if subjects.is_empty() {
        return Err(Error::invalid("no pretraining subjects"));
    }
    let segments = subjects
        .iter()
        .map(|s| {
            if s.gold.is_none() {
                return Err(Error::invalid(format!("subject {} has no gold labels; pretraining needs them", s.id)));
            }
            s.segment(0..s.video.motion_len(), net.window_frames, LabelSource::Gold)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut opt = OptimizerState::adam(config.lr);
    let mut losses = Vec::new();
    let mut epoch_losses = Vec::new();
    for _ in 0..config.epochs {
        let mut order: Vec<(usize, usize)> = Vec::new();
        for (si, seg) in segments.iter().enumerate() {
            let mut idx: Vec<usize> = (0..seg.len()).collect();
            if let Some(k) = config.clips_per_subject {
                idx.shuffle(rng);
                idx.truncate(k);
            }
            order.extend(idx.into_iter().map(|c| (si, c)));
        }
        order.shuffle(rng);
        let mut sum = 0.0f64;
        let mut count = 0;
        for chunk in order.chunks(config.batch_clips) {
            let mut batch_losses = 0.0f64;
            let mut grads = Grads::default();
            // one forward per subject keeps label offsets simple
            let mut by_subject: Vec<(usize, Vec<usize>)> = Vec::new();
            for &(s, c) in chunk {
                match by_subject.iter_mut().find(|(k, _)| *k == s) {
                    Some((_, v)) => v.push(c),
                    None => by_subject.push((s, vec![c])),
                }
            }
            for (s, clips) in &by_subject {
                let batch = segments[*s].subset(clips)?;
                let (l, g) = loss_and_grads(&params, &batch, net, Some(&mut *rng))?;
                let w = clips.len() as f32 / chunk.len() as f32;
                let mut g = g;
                g.scale(w);
                grads.accumulate(&g);
                batch_losses += l as f64 * w as f64;
            }
            params = optimizer_step(&params, &grads, &mut opt)?;
            losses.push(batch_losses as f32);
            sum += batch_losses;
            count += 1;
        }
        let mean = if count > 0 { (sum / count as f64) as f32 } else { f32::NAN };
        log::info!("pretrain epoch {}: loss {mean:.4}", epoch_losses.len() + 1);
        epoch_losses.push(mean);
    }
    Ok(Pretrained {
        params: params.with_role(ParamRole::Global),
        losses,
        epoch_losses,
    })
}

/// `steps` plain SGD steps at `lr` on `support`.
fn sgd_steps<R: Rng>(
    theta: &ModelParams,
    support: &ClipBatch,
    steps: usize,
    lr: f32,
    net: &TsCanConfig,
    rng: &mut R,
) -> Result<(ModelParams, Option<f32>)> {
    let mut p = theta.clone();
    let mut first = None;
    if lr == 0.0 {
        return Ok((p, None));
    }
    let mut opt = OptimizerState::sgd(lr);
    for _ in 0..steps {
        let (l, g) = loss_and_grads(&p, support, net, Some(&mut *rng))?;
        first.get_or_insert(l);
        p = optimizer_step(&p, &g, &mut opt)?;
    }
    Ok((p, first))
}

fn apply_freeze(theta: &ModelParams, config: &MetaConfig) -> ModelParams {
    if config.freeze_motion {
        freeze_motion_branch(theta)
    } else {
        theta.clone()
    }
}

/// θᵢ = θ after `inner_steps` SGD steps at α on the support loss. `theta` is
/// left untouched.
pub fn inner_adapt<R: Rng>(
    theta: &ModelParams,
    support: &ClipBatch,
    net: &TsCanConfig,
    config: &MetaConfig,
    rng: &mut R,
) -> Result<ModelParams> {
    net.check_params(theta)?;
    let start = apply_freeze(theta, config);
    let (p, _) = sgd_steps(&start, support, config.inner_steps, config.inner_lr, net, rng)?;
    Ok(p.with_role(ParamRole::Personalized))
}

/// Plain SGD fine-tuning on a support batch.
pub fn fine_tune_baseline<R: Rng>(
    theta: &ModelParams,
    support: &ClipBatch,
    steps: usize,
    lr: f32,
    net: &TsCanConfig,
    rng: &mut R,
) -> Result<ModelParams> {
    net.check_params(theta)?;
    let (p, _) = sgd_steps(theta, support, steps, lr, net, rng)?;
    Ok(p.with_role(ParamRole::Personalized))
}

#[derive(Clone, Debug, Serialize)]
pub struct TaskRecord {
    pub epoch: usize,
    pub task: String,
    pub support_loss: f32,
    pub query_loss: f32,
}

#[derive(Clone, Debug, Default)]
pub struct MetaTrainLog {
    pub records: Vec<TaskRecord>,
    /// Mean query loss per epoch.
    pub epoch_query_loss: Vec<f32>,
}

impl MetaTrainLog {
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for r in &self.records {
            let line = serde_json::to_string(r).expect("record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }
}

/// First-order MAML. Each epoch shuffles the tasks into meta-batches; every
/// task adapts from θ, and its query gradient at θᵢ is averaged into one Adam
/// step on θ at β.
pub fn meta_train(
    tasks: &[Task],
    theta: &ModelParams,
    net: &TsCanConfig,
    config: &MetaConfig,
) -> Result<(ModelParams, MetaTrainLog)> {
    config.validate(net)?;
    if tasks.is_empty() {
        return Err(Error::invalid("meta-training needs at least one task"));
    }
    net.check_params(theta)?;
    let mut rng = stream_rng(config.seed, META_STREAM);
    let mut theta = apply_freeze(theta, config);
    let mut opt = OptimizerState::adam(config.outer_lr);
    let mut log = MetaTrainLog::default();
    let supports = tasks.iter().map(|t| t.support.batch()).collect::<Result<Vec<_>>>()?;
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..tasks.len()).collect();
        order.shuffle(&mut rng);
        let mut qsum = 0.0f64;
        for group in order.chunks(config.meta_batch) {
            let mut acc = Grads::default();
            for &ti in group {
                let task = &tasks[ti];
                let (theta_i, support_loss) =
                    sgd_steps(&theta, &supports[ti], config.inner_steps, config.inner_lr, net, &mut rng)?;
                let query = match config.query_clips {
                    Some(k) if k < task.query.len() => {
                        let mut idx: Vec<usize> = (0..task.query.len()).collect();
                        idx.shuffle(&mut rng);
                        idx.truncate(k);
                        idx.sort_unstable();
                        task.query.subset(&idx)?
                    }
                    _ => task.query.batch()?,
                };
                let (query_loss, g) = loss_and_grads(&theta_i, &query, net, Some(&mut rng))?;
                acc.accumulate(&g);
                let support_loss = match support_loss {
                    Some(l) => l,
                    None => batch_loss(&theta, &supports[ti], net)?,
                };
                qsum += query_loss as f64;
                log.records.push(TaskRecord {
                    epoch: epoch + 1,
                    task: task.subject.clone(),
                    support_loss,
                    query_loss,
                });
            }
            acc.scale(1.0 / group.len() as f32);
            theta = optimizer_step(&theta, &acc, &mut opt)?;
        }
        let mean = (qsum / tasks.len() as f64) as f32;
        log::info!("meta-train epoch {}: query loss {mean:.4}", epoch + 1);
        log.epoch_query_loss.push(mean);
    }
    Ok((theta.with_role(ParamRole::UpdatedGlobal), log))
}

/// Mean eval-mode query loss after adapting to each task's support. Dropout
/// during adaptation is seeded per task, so the value is reproducible.
pub fn mean_query_loss(tasks: &[Task], theta: &ModelParams, net: &TsCanConfig, config: &MetaConfig) -> Result<f32> {
    if tasks.is_empty() {
        return Err(Error::invalid("no tasks"));
    }
    let mut sum = 0.0f64;
    for t in tasks {
        let mut rng = adapt_rng(config.seed, &t.subject);
        let theta_i = inner_adapt(theta, &t.support.batch()?, net, config, &mut rng)?;
        sum += batch_loss(&theta_i, &t.query.batch()?, net)? as f64;
    }
    Ok((sum / tasks.len() as f64) as f32)
}

/// A test subject's personalized parameters and its split.
#[derive(Clone, Debug)]
pub struct Adapted {
    pub params: ModelParams,
    /// Difference frames used for adaptation.
    pub support: Range<usize>,
    /// First scored difference frame; everything before it is excluded.
    pub query_start: usize,
}

/// One inner adaptation on the subject's first `support_frames`, with the
/// given label source (`None` leaves θ̂ unadapted).
pub fn test_adapt(
    theta: &ModelParams,
    subject: &SubjectData,
    net: &TsCanConfig,
    config: &MetaConfig,
    source: Option<LabelSource>,
) -> Result<Adapted> {
    config.validate(net)?;
    let k = config.support_frames;
    let q = config.query_start();
    if subject.video.motion_len() < q + net.window_frames {
        return Err(Error::TooShort {
            needed: q + net.window_frames + 1,
            got: subject.frames(),
        });
    }
    let params = match source {
        None => theta.clone(),
        Some(src) => {
            let support = subject.segment(0..k, net.window_frames, src)?;
            let mut rng = adapt_rng(config.seed, &subject.id);
            inner_adapt(theta, &support.batch()?, net, config, &mut rng)?
        }
    };
    Ok(Adapted {
        params,
        support: 0..k,
        query_start: q,
    })
}
