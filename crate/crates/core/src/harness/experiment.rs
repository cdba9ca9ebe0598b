use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::demix::{demix, Method};
use crate::error::{Error, Result, StageExt};
use crate::meta::{
    adapt_rng, fine_tune_baseline, initial_params, make_tasks, meta_train, pretrain, test_adapt, LabelSource,
    MetaConfig, MetaTrainLog, PretrainConfig, Pretrained, SubjectData,
};
use crate::sigproc::{derivative_to_pulse, estimate_hr, snr, split_windows, HrWindow, MetricsReport, EVAL_WINDOW};
use crate::tensor::ModelParams;
use crate::tscan::{predict, ClipBatch, TsCanConfig};
use crate::PulseTrace;

use super::io::{load_dataset, Dataset};

/// Clips per forward pass at evaluation time.
const EVAL_CHUNK: usize = 16;

pub const METRICS_JSON: &str = "metrics.json";
pub const WINDOWS_CSV: &str = "windows.csv";
pub const BLAND_ALTMAN_CSV: &str = "bland_altman.csv";
pub const SKIN_TYPES_CSV: &str = "skin_types.csv";
pub const RUN_MANIFEST: &str = "run_manifest.json";
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    /// Pretrain, meta-train and adapt with gold labels.
    Supervised,
    /// Pretrain with gold; meta-train and adapt with pseudo labels.
    Unsupervised,
    /// Meta-train from a random initialization.
    NoPretrain,
    /// Pretrain, then plain SGD on each test support with gold labels.
    Finetune,
    PretrainedOnly,
    Pos,
    Chrom,
    Ica,
}

impl Mode {
    pub const ALL: [Mode; 8] = [
        Mode::Supervised,
        Mode::Unsupervised,
        Mode::NoPretrain,
        Mode::Finetune,
        Mode::PretrainedOnly,
        Mode::Pos,
        Mode::Chrom,
        Mode::Ica,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Unsupervised => "unsupervised",
            Mode::NoPretrain => "no-pretrain",
            Mode::Finetune => "finetune",
            Mode::PretrainedOnly => "pretrained-only",
            Mode::Pos => "pos",
            Mode::Chrom => "chrom",
            Mode::Ica => "ica",
        }
    }

    pub fn demixer(self) -> Option<Method> {
        match self {
            Mode::Pos => Some(Method::Pos),
            Mode::Chrom => Some(Method::Chrom),
            Mode::Ica => Some(Method::Ica),
            _ => None,
        }
    }

    pub fn needs_pretrain(self) -> bool {
        matches!(self, Mode::Supervised | Mode::Unsupervised | Mode::Finetune | Mode::PretrainedOnly)
    }

    pub fn needs_meta_train(self) -> bool {
        matches!(self, Mode::Supervised | Mode::Unsupervised | Mode::NoPretrain)
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode `{s}`")))
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn default_finetune_lr() -> f32 {
    MetaConfig::default().inner_lr
}

fn default_one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub pretrain_dataset: Option<PathBuf>,
    #[serde(default)]
    pub meta_train_dataset: Option<PathBuf>,
    pub test_dataset: PathBuf,
    pub mode: Mode,
    #[serde(default)]
    pub net: TsCanConfig,
    #[serde(default)]
    pub meta: MetaConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    /// Start from this checkpoint instead of pretraining.
    #[serde(default)]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default = "default_one")]
    pub finetune_steps: usize,
    #[serde(default = "default_finetune_lr")]
    pub finetune_lr: f32,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Permit meta-training and testing on the same dataset.
    #[serde(default)]
    pub allow_same_dataset: bool,
}

impl ExperimentSpec {
    pub fn new(mode: Mode, test_dataset: impl Into<PathBuf>, output_dir: impl Into<PathBuf>, seed: u64) -> Self {
        ExperimentSpec {
            pretrain_dataset: None,
            meta_train_dataset: None,
            test_dataset: test_dataset.into(),
            mode,
            net: TsCanConfig::default(),
            meta: MetaConfig::default(),
            pretrain: PretrainConfig::default(),
            init_checkpoint: None,
            finetune_steps: 1,
            finetune_lr: default_finetune_lr(),
            seed,
            output_dir: output_dir.into(),
            allow_same_dataset: false,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// The spec with its seed pushed into every sub-config.
    pub fn resolved(&self) -> Self {
        let mut s = self.clone();
        s.meta.seed = s.seed;
        s.pretrain.seed = s.seed;
        s
    }

    /// Checks that do not touch the file system.
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.meta.validate(&self.net)?;
        if self.mode.needs_pretrain() && self.init_checkpoint.is_none() && self.pretrain_dataset.is_none() {
            return Err(Error::invalid(format!("mode {} needs a pretrain dataset or an init checkpoint", self.mode)));
        }
        if self.mode.needs_meta_train() && self.meta_train_dataset.is_none() {
            return Err(Error::invalid(format!("mode {} needs a meta-train dataset", self.mode)));
        }
        if let Some(m) = &self.meta_train_dataset {
            if !self.allow_same_dataset && same_path(m, &self.test_dataset) {
                return Err(Error::invalid(
                    "meta-train and test datasets are the same; pass allow_same_dataset to override",
                ));
            }
        }
        Ok(())
    }
}

fn same_path(a: &Path, b: &Path) -> bool {
    match (a.canonicalize(), b.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => a == b,
    }
}

/// Subject ids shared by two sets.
pub fn shared_ids<'a>(a: &'a [SubjectData], b: &[SubjectData]) -> Vec<&'a str> {
    let ids: BTreeSet<&str> = b.iter().map(|s| s.id.as_str()).collect();
    a.iter().map(|s| s.id.as_str()).filter(|id| ids.contains(id)).collect()
}

/// Read every subject of a dataset into network-ready form.
pub fn load_subjects(ds: &Dataset, net: &TsCanConfig) -> Result<Vec<SubjectData>> {
    ds.subjects()
        .map(|s| {
            let frames = s.frames()?;
            let gold = s.gold()?;
            SubjectData::new(s.id(), s.entry.skin_type, &frames, gold, net)
        })
        .collect()
}

/// Difference frames scored for a subject: whole clips from `query_start`.
pub fn scored_span(subject: &SubjectData, query_start: usize, window: usize) -> Result<std::ops::Range<usize>> {
    let starts = subject.video.clip_starts(query_start..subject.video.motion_len(), window);
    match starts.last() {
        Some(&last) => Ok(query_start..last + window),
        None => Err(Error::TooShort {
            needed: query_start + window + 1,
            got: subject.frames(),
        }),
    }
}

/// Network pulse over `span`: clip outputs standardized one by one,
/// concatenated, then integrated.
pub fn network_pulse(
    params: &ModelParams,
    subject: &SubjectData,
    span: std::ops::Range<usize>,
    net: &TsCanConfig,
) -> Result<PulseTrace> {
    let t = net.window_frames;
    let starts = subject.video.clip_starts(span, t);
    let mut deriv = Vec::with_capacity(starts.len() * t);
    for chunk in starts.chunks(EVAL_CHUNK) {
        let clips = chunk
            .iter()
            .map(|&s| subject.video.clip(s, t))
            .collect::<Result<Vec<_>>>()?;
        let batch = ClipBatch::stack(&clips, None)?;
        for out in predict(params, &batch, net)? {
            let n = out.len() as f64;
            let m = out.iter().map(|&v| v as f64).sum::<f64>() / n;
            let sd = (out.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt();
            let sd = if sd > 1e-12 { sd } else { 1.0 };
            deriv.extend(out.iter().map(|&v| (v as f64 - m) / sd));
        }
    }
    Ok(derivative_to_pulse(&PulseTrace::new(subject.video.fps, deriv)))
}

/// Score a pulse that starts at difference frame `span.start` against gold
/// in 12 s windows.
pub fn score_windows(subject: &SubjectData, pulse: &PulseTrace, span: std::ops::Range<usize>) -> Result<Vec<HrWindow>> {
    let gold = subject
        .gold
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("subject {}: evaluation needs gold labels", subject.id)))?
        .read();
    let ranges = split_windows(span.len().min(pulse.len()), EVAL_WINDOW)
        .map_err(|e| Error::invalid(format!("subject {}: {e}", subject.id)))?;
    ranges
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let (a, b) = (span.start + r.start, span.start + r.end);
            let gold_hr = estimate_hr(&gold.slice(a..b))?;
            let seg = pulse.slice(r);
            Ok(HrWindow {
                subject: subject.id.clone(),
                skin_type: subject.skin_type,
                index: i,
                start: a,
                end: b,
                gold_hr,
                est_hr: estimate_hr(&seg)?,
                snr: snr(&seg, gold_hr)?,
            })
        })
        .collect()
}

pub fn evaluate_network(
    params: &ModelParams,
    subject: &SubjectData,
    query_start: usize,
    net: &TsCanConfig,
) -> Result<Vec<HrWindow>> {
    let span = scored_span(subject, query_start, net.window_frames)?;
    let pulse = network_pulse(params, subject, span.clone(), net)?;
    score_windows(subject, &pulse, span)
}

/// Demixer baseline on the same windows as the network: it only sees frames
/// from `query_start` on.
pub fn evaluate_demixer(
    subject: &SubjectData,
    method: Method,
    query_start: usize,
    window: usize,
) -> Result<Vec<HrWindow>> {
    let span = scored_span(subject, query_start, window)?;
    let pulse = demix(&subject.rgb.slice(span.start..subject.frames()), method)?;
    score_windows(subject, &pulse, span)
}

/// Result of one mode on the test set.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub mode: Mode,
    pub report: MetricsReport,
    /// Global parameters before per-subject adaptation.
    pub params: Option<ModelParams>,
    pub meta_log: Option<MetaTrainLog>,
}

/// Loaded subject sets for one spec; the pretrained model is computed once
/// and shared by every mode run on it.
pub struct Workbench {
    pub spec: ExperimentSpec,
    pub pretrain_set: Vec<SubjectData>,
    pub meta_set: Vec<SubjectData>,
    pub test_set: Vec<SubjectData>,
    pretrained: Option<Pretrained>,
}

impl Workbench {
    pub fn load(spec: &ExperimentSpec) -> Result<Self> {
        let spec = spec.resolved();
        spec.validate().stage("validate")?;
        let net = spec.net.clone();
        let load = |p: &Option<PathBuf>, needed: bool| -> Result<Vec<SubjectData>> {
            match p {
                Some(p) if needed => load_subjects(&load_dataset(p)?, &net),
                _ => Ok(Vec::new()),
            }
        };
        let m = spec.mode;
        let pretrain_needed = m.needs_pretrain() && spec.init_checkpoint.is_none();
        let pretrain_set = load(&spec.pretrain_dataset, pretrain_needed).stage("load")?;
        let meta_set = load(&spec.meta_train_dataset, m.needs_meta_train()).stage("load")?;
        let test_set = load(&Some(spec.test_dataset.clone()), true).stage("load")?;
        Self::from_subjects(spec, pretrain_set, meta_set, test_set)
    }

    pub fn from_subjects(
        spec: ExperimentSpec,
        pretrain_set: Vec<SubjectData>,
        meta_set: Vec<SubjectData>,
        test_set: Vec<SubjectData>,
    ) -> Result<Self> {
        let spec = spec.resolved();
        spec.net.validate().stage("validate")?;
        if !spec.allow_same_dataset {
            let shared = shared_ids(&meta_set, &test_set);
            if !shared.is_empty() {
                return Err(Error::invalid(format!(
                    "meta-train and test sets share subjects: {}",
                    shared.join(", ")
                ))
                .in_stage("validate"));
            }
        }
        if test_set.is_empty() {
            return Err(Error::invalid("test set is empty").in_stage("validate"));
        }
        let pretrained = match &spec.init_checkpoint {
            Some(p) => {
                let params = ModelParams::load(p).stage("load")?;
                spec.net.check_params(&params).stage("load")?;
                Some(Pretrained {
                    params,
                    losses: Vec::new(),
                    epoch_losses: Vec::new(),
                })
            }
            None => None,
        };
        Ok(Workbench {
            spec,
            pretrain_set,
            meta_set,
            test_set,
            pretrained,
        })
    }

    pub fn pretrained(&mut self) -> Result<&Pretrained> {
        if self.pretrained.is_none() {
            let p = pretrain(&self.pretrain_set, &self.spec.net, &self.spec.pretrain).stage("pretrain")?;
            self.pretrained = Some(p);
        }
        Ok(self.pretrained.as_ref().expect("set above"))
    }

    /// Run `mode` with `meta` (seed taken from the spec) on the test set.
    pub fn run(&mut self, mode: Mode, meta: &MetaConfig) -> Result<RunOutput> {
        let net = self.spec.net.clone();
        let meta = MetaConfig {
            seed: self.spec.seed,
            ..meta.clone()
        };
        meta.validate(&net).stage("validate")?;
        let q = meta.query_start();
        if let Some(method) = mode.demixer() {
            let windows = self
                .test_set
                .iter()
                .map(|s| evaluate_demixer(s, method, q, net.window_frames))
                .collect::<Result<Vec<_>>>()
                .stage("evaluate")?;
            let report = MetricsReport::from_windows(windows.concat()).stage("evaluate")?;
            return Ok(RunOutput {
                mode,
                report,
                params: None,
                meta_log: None,
            });
        }

        let start = match mode {
            Mode::NoPretrain => initial_params(&net, self.spec.seed).stage("meta-train")?,
            _ => self.pretrained()?.params.clone(),
        };
        let meta = match mode {
            Mode::Supervised => MetaConfig {
                supervised: true,
                ..meta
            },
            Mode::Unsupervised => MetaConfig {
                supervised: false,
                ..meta
            },
            _ => meta,
        };
        let (global, meta_log) = if mode.needs_meta_train() {
            let tasks = make_tasks(&self.meta_set, &net, &meta).stage("meta-train")?;
            let (p, log) = meta_train(&tasks, &start, &net, &meta).stage("meta-train")?;
            (p, Some(log))
        } else {
            (start, None)
        };

        let mut windows = Vec::new();
        for s in &self.test_set {
            let adapted = match mode {
                Mode::PretrainedOnly => global.clone(),
                Mode::Finetune => {
                    let support = s
                        .segment(0..meta.support_frames, net.window_frames, LabelSource::Gold)
                        .and_then(|seg| seg.batch())
                        .stage("adapt")?;
                    let mut rng = adapt_rng(meta.seed, &s.id);
                    fine_tune_baseline(&global, &support, self.spec.finetune_steps, self.spec.finetune_lr, &net, &mut rng)
                        .stage("adapt")?
                }
                _ => test_adapt(&global, s, &net, &meta, Some(meta.label_source())).stage("adapt")?.params,
            };
            windows.extend(evaluate_network(&adapted, s, q, &net).stage("evaluate")?);
        }
        let report = MetricsReport::from_windows(windows).stage("evaluate")?;
        Ok(RunOutput {
            mode,
            report,
            params: Some(global),
            meta_log,
        })
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Serialize)]
struct RunManifest<'a> {
    version: &'static str,
    mode: Mode,
    seed: u64,
    spec: &'a ExperimentSpec,
    pretrain_subjects: Vec<&'a str>,
    meta_train_subjects: Vec<&'a str>,
    test_subjects: Vec<&'a str>,
    pretrain_losses: Option<&'a [f32]>,
}

fn ids(set: &[SubjectData]) -> Vec<&str> {
    set.iter().map(|s| s.id.as_str()).collect()
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Write the artifacts of a finished run into `dir`.
pub fn write_run(dir: &Path, bench: &Workbench, out: &RunOutput) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    out.report.write_windows_csv(&dir.join(WINDOWS_CSV))?;
    out.report.write_bland_altman_csv(&dir.join(BLAND_ALTMAN_CSV))?;
    super::report::write_skin_type_csv(&dir.join(SKIN_TYPES_CSV), &out.report)?;
    if let Some(log) = &out.meta_log {
        log.write_jsonl(&dir.join("meta_train.jsonl"))?;
    }
    if let Some(p) = &out.params {
        p.save(&dir.join("global.pbparam"))?;
    }
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION"),
        mode: out.mode,
        seed: bench.spec.seed,
        spec: &bench.spec,
        pretrain_subjects: ids(&bench.pretrain_set),
        meta_train_subjects: ids(&bench.meta_set),
        test_subjects: ids(&bench.test_set),
        pretrain_losses: bench.pretrained.as_ref().map(|p| p.epoch_losses.as_slice()),
    };
    write_text(
        &dir.join(RUN_MANIFEST),
        &serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    // last, so a present metrics file means a complete run
    write_text(&dir.join(METRICS_JSON), &out.report.to_json())
}

/// Load, train, adapt, evaluate and write artifacts for `spec`. A failed run
/// leaves an `INCOMPLETE` marker next to whatever it managed to write.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<MetricsReport> {
    let dir = spec.output_dir.clone();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e)).stage("write")?;
    let marker = dir.join(INCOMPLETE_MARKER);
    write_text(&marker, "run did not finish\n").stage("write")?;
    let result = (|| {
        let mut bench = Workbench::load(spec)?;
        let out = bench.run(spec.mode, &bench.spec.meta.clone())?;
        write_run(&dir, &bench, &out).stage("write")?;
        Ok(out.report)
    })();
    match result {
        Ok(report) => {
            std::fs::remove_file(&marker).map_err(|e| Error::io(&marker, e)).stage("write")?;
            Ok(report)
        }
        Err(e) => {
            let _ = std::fs::write(&marker, format!("{e}\n"));
            Err(e)
        }
    }
}
