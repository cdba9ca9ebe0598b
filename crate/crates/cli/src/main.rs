use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rppg_core::demix::{demix, spatial_average, Method};
use rppg_core::harness::{
    compare, load_dataset, load_subjects, report, run_experiment, write_gold_csv, ExperimentSpec, Mode,
};
use rppg_core::meta::{make_tasks, meta_train, pretrain, test_adapt, LabelSource, SubjectData};
use rppg_core::sigproc::estimate_hr;
use rppg_core::synth::{generate_dataset, DomainKnobs};
use rppg_core::tensor::ModelParams;
use rppg_core::{Error, Result};

#[derive(Parser)]
#[command(name = "rppg", version, about = "Camera-based pulse measurement toolkit")]
struct Cli {
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Synth(SynthArgs),
    /// Supervised pretraining; writes a checkpoint.
    Pretrain(TrainArgs),
    /// Meta-train from a checkpoint or from scratch; writes a checkpoint.
    MetaTrain(TrainArgs),
    /// Adapt a checkpoint to every test subject's support segment.
    Adapt(TrainArgs),
    /// Run one experiment end to end and write its artifacts.
    Evaluate(SpecArgs),
    /// Extract pulse traces with a classical demixer.
    Demix(DemixArgs),
    /// Summarise run directories.
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Domain preset: A or B.
    #[arg(long, default_value = "A")]
    domain: String,
    #[arg(long, default_value_t = 10)]
    subjects: usize,
    /// Seconds per subject.
    #[arg(long, default_value_t = 60.0)]
    duration: f64,
    #[arg(long)]
    seed: u64,
    /// Drop noise, flicker, motion and highlights.
    #[arg(long)]
    clean: bool,
    /// Dataset name (defaults to the preset's).
    #[arg(long)]
    name: Option<String>,
}

/// Experiment settings. Values given on the command line override those of
/// `--spec`.
#[derive(Args, Default)]
struct SpecArgs {
    /// JSON experiment spec.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    pretrain_dataset: Option<PathBuf>,
    #[arg(long)]
    meta_train_dataset: Option<PathBuf>,
    #[arg(long)]
    test_dataset: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    init_checkpoint: Option<PathBuf>,
    #[arg(long)]
    allow_same_dataset: bool,

    #[arg(long)]
    input_resolution: Option<usize>,
    #[arg(long, value_parser = parse_pair)]
    channels: Option<(usize, usize)>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    dropout: Option<f32>,

    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    pretrain_lr: Option<f32>,

    #[arg(long)]
    inner_lr: Option<f32>,
    #[arg(long)]
    outer_lr: Option<f32>,
    #[arg(long)]
    inner_steps: Option<usize>,
    #[arg(long)]
    meta_epochs: Option<usize>,
    #[arg(long)]
    meta_batch: Option<usize>,
    /// Support length in seconds (6, 12 or 18 in the window study).
    #[arg(long)]
    support_seconds: Option<f64>,
    #[arg(long)]
    query_clips: Option<usize>,
    /// Use gold labels for meta-training and adaptation.
    #[arg(long)]
    supervised: bool,
    #[arg(long)]
    freeze_motion: bool,
    #[arg(long)]
    pseudo_method: Option<Method>,
    #[arg(long)]
    finetune_steps: Option<usize>,
    #[arg(long)]
    finetune_lr: Option<f32>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    spec: SpecArgs,
    /// Checkpoint (pretrain, meta-train) or directory (adapt) to write.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DemixArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "pos")]
    method: Method,
    /// Directory for one pulse CSV per subject.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// A run directory or a directory of runs.
    dir: PathBuf,
    /// Print per-mode deltas of this directory against `dir`.
    #[arg(long)]
    compare: Option<PathBuf>,
}

fn parse_pair(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected two comma-separated numbers")?;
    Ok((
        a.trim().parse().map_err(|e| format!("{e}"))?,
        b.trim().parse().map_err(|e| format!("{e}"))?,
    ))
}

impl SpecArgs {
    fn build(&self, default_mode: Mode) -> Result<ExperimentSpec> {
        let mut spec = match &self.spec {
            Some(p) => ExperimentSpec::from_json_file(p)?,
            None => {
                let seed = self
                    .seed
                    .ok_or_else(|| Error::invalid("a seed is required (--seed or --spec)"))?;
                ExperimentSpec::new(default_mode, PathBuf::new(), PathBuf::new(), seed)
            }
        };
        macro_rules! set {
            ($($field:ident).+ = $v:expr) => {
                if let Some(v) = $v.clone() {
                    spec.$($field).+ = v;
                }
            };
        }
        set!(mode = self.mode);
        set!(seed = self.seed);
        set!(test_dataset = self.test_dataset);
        set!(output_dir = self.output_dir);
        if self.pretrain_dataset.is_some() {
            spec.pretrain_dataset = self.pretrain_dataset.clone();
        }
        if self.meta_train_dataset.is_some() {
            spec.meta_train_dataset = self.meta_train_dataset.clone();
        }
        if self.init_checkpoint.is_some() {
            spec.init_checkpoint = self.init_checkpoint.clone();
        }
        spec.allow_same_dataset |= self.allow_same_dataset;
        set!(net.input_resolution = self.input_resolution);
        set!(net.channels = self.channels);
        set!(net.hidden = self.hidden);
        set!(net.dropout = self.dropout);
        set!(pretrain.epochs = self.pretrain_epochs);
        set!(pretrain.lr = self.pretrain_lr);
        set!(meta.inner_lr = self.inner_lr);
        set!(meta.outer_lr = self.outer_lr);
        set!(meta.inner_steps = self.inner_steps);
        set!(meta.epochs = self.meta_epochs);
        set!(meta.meta_batch = self.meta_batch);
        set!(meta.pseudo_method = self.pseudo_method);
        set!(finetune_steps = self.finetune_steps);
        set!(finetune_lr = self.finetune_lr);
        if self.query_clips.is_some() {
            spec.meta.query_clips = self.query_clips;
        }
        spec.meta.supervised |= self.supervised;
        spec.meta.freeze_motion |= self.freeze_motion;
        if let Some(s) = self.support_seconds {
            spec.meta = spec.meta.with_support_seconds(s, rppg_core::synth::DEFAULT_FPS);
        }
        Ok(spec.resolved())
    }
}

fn subjects(path: &Option<PathBuf>, what: &str, spec: &ExperimentSpec) -> Result<Vec<SubjectData>> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::invalid(format!("--{what} is required")))?;
    load_subjects(&load_dataset(p)?, &spec.net)
}

fn starting_point(spec: &ExperimentSpec) -> Result<ModelParams> {
    if let Some(p) = &spec.init_checkpoint {
        let params = ModelParams::load(p).map_err(|e| e.in_stage("load"))?;
        spec.net.check_params(&params).map_err(|e| e.in_stage("load"))?;
        return Ok(params);
    }
    let set = subjects(&spec.pretrain_dataset, "pretrain-dataset", spec).map_err(|e| e.in_stage("load"))?;
    pretrain(&set, &spec.net, &spec.pretrain)
        .map(|p| p.params)
        .map_err(|e| e.in_stage("pretrain"))
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let mut knobs = DomainKnobs::preset(&a.domain)?;
    if a.clean {
        knobs = knobs.clean();
    }
    if let Some(n) = &a.name {
        knobs.name = n.clone();
    }
    let m = generate_dataset(&a.out, &knobs, a.subjects, a.duration, a.seed)?;
    println!("wrote {} subjects to {}", m.subjects.len(), a.out.display());
    Ok(())
}

fn cmd_pretrain(a: &TrainArgs) -> Result<()> {
    let spec = a.spec.build(Mode::PretrainedOnly)?;
    spec.net.validate().map_err(|e| e.in_stage("validate"))?;
    let set = subjects(&spec.pretrain_dataset, "pretrain-dataset", &spec).map_err(|e| e.in_stage("load"))?;
    let p = pretrain(&set, &spec.net, &spec.pretrain).map_err(|e| e.in_stage("pretrain"))?;
    p.params.save(&a.out).map_err(|e| e.in_stage("write"))?;
    for (i, l) in p.epoch_losses.iter().enumerate() {
        println!("epoch {i}: loss {l:.4}");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_meta_train(a: &TrainArgs) -> Result<()> {
    let spec = a.spec.build(Mode::Unsupervised)?;
    spec.net.validate().map_err(|e| e.in_stage("validate"))?;
    spec.meta.validate(&spec.net).map_err(|e| e.in_stage("validate"))?;
    let set = subjects(&spec.meta_train_dataset, "meta-train-dataset", &spec).map_err(|e| e.in_stage("load"))?;
    let start = starting_point(&spec)?;
    let tasks = make_tasks(&set, &spec.net, &spec.meta).map_err(|e| e.in_stage("meta-train"))?;
    let (params, log) = meta_train(&tasks, &start, &spec.net, &spec.meta).map_err(|e| e.in_stage("meta-train"))?;
    params.save(&a.out).map_err(|e| e.in_stage("write"))?;
    log.write_jsonl(&a.out.with_extension("jsonl")).map_err(|e| e.in_stage("write"))?;
    for (i, l) in log.epoch_query_loss.iter().enumerate() {
        println!("epoch {i}: query loss {l:.4}");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn cmd_adapt(a: &TrainArgs) -> Result<()> {
    let spec = a.spec.build(Mode::Unsupervised)?;
    spec.meta.validate(&spec.net).map_err(|e| e.in_stage("validate"))?;
    let theta = starting_point(&spec)?;
    let test = subjects(&Some(spec.test_dataset.clone()), "test-dataset", &spec).map_err(|e| e.in_stage("load"))?;
    let source = if spec.meta.supervised {
        LabelSource::Gold
    } else {
        LabelSource::Pseudo(spec.meta.pseudo_method)
    };
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e).in_stage("write"))?;
    for s in &test {
        let adapted = test_adapt(&theta, s, &spec.net, &spec.meta, Some(source)).map_err(|e| e.in_stage("adapt"))?;
        let path = a.out.join(format!("{}.pbparam", s.id));
        adapted.params.save(&path).map_err(|e| e.in_stage("write"))?;
        println!(
            "{}: support frames {}..{}, scoring from {}",
            s.id, adapted.support.start, adapted.support.end, adapted.query_start
        );
    }
    Ok(())
}

fn cmd_evaluate(a: &SpecArgs) -> Result<()> {
    let spec = a.build(Mode::Unsupervised)?;
    if spec.output_dir.as_os_str().is_empty() {
        return Err(Error::invalid("--output-dir is required").in_stage("validate"));
    }
    run_experiment(&spec)?;
    print!("{}", report(&spec.output_dir).map_err(|e| e.in_stage("report"))?);
    Ok(())
}

fn cmd_demix(a: &DemixArgs) -> Result<()> {
    let ds = load_dataset(&a.dataset).map_err(|e| e.in_stage("load"))?;
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e).in_stage("write"))?;
    for s in ds.subjects() {
        let frames = s.frames().map_err(|e| e.in_stage("load"))?;
        let pulse = spatial_average(&frames, None)
            .and_then(|rgb| demix(&rgb, a.method))
            .map_err(|e| e.in_stage("demix"))?;
        write_gold_csv(&a.out.join(format!("{}.csv", s.id())), &pulse).map_err(|e| e.in_stage("write"))?;
        match estimate_hr(&pulse) {
            Ok(hr) => println!("{}: {hr:.1} BPM", s.id()),
            Err(e) => println!("{}: no heart rate ({e})", s.id()),
        }
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    print!("{}", report(&a.dir)?);
    if let Some(other) = &a.compare {
        println!();
        print!("{}", compare(&a.dir, other)?);
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    let (stage, result) = match &cli.command {
        Command::Synth(a) => ("synth", cmd_synth(a)),
        Command::Pretrain(a) => ("pretrain", cmd_pretrain(a)),
        Command::MetaTrain(a) => ("meta-train", cmd_meta_train(a)),
        Command::Adapt(a) => ("adapt", cmd_adapt(a)),
        Command::Evaluate(a) => ("evaluate", cmd_evaluate(a)),
        Command::Demix(a) => ("demix", cmd_demix(a)),
        Command::Report(a) => ("report", cmd_report(a)),
    };
    result.map_err(|e| e.in_stage(stage))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("rppg: {e}");
            ExitCode::FAILURE
        }
    }
}
