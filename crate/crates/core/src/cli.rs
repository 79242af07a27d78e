//! Command-line front end. [`run`] returns the process exit code: 0 on
//! success, 1 on validation errors, 2 on runtime failures. Every command
//! that gets past argument parsing writes `report.json` and `log.txt` to
//! its `--out` directory.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::backbone::DiTConfig;
use crate::data::corpus::{generate, DataConfig, Dataset};
use crate::data::io::{encode, read_dataset, write_dataset};
use crate::data::render::static_video;
use crate::diagnostics::gradcheck_suite;
use crate::error::{Error, Result};
use crate::eval::{
    edit_images, edit_videos, eval_pairs, evaluate_against, image_grid, json_digest, per_sample_csv, write_ppm,
    EvalConfig, FullEval, Report,
};
use crate::params::sha256_hex;
use crate::predict_update::AblationMode;
use crate::prompt::PromptTokens;
use crate::tensor::Tensor;
use crate::train::{
    attach_and_inherit, model_from_checkpoint, new_pretrain_session, pretrain_backbone, run_ablation, train_edit,
    zero_init_baseline, Checkpoint, Phase, Session, TrainConfig,
};

pub const CHECKPOINT_FILE: &str = "checkpoint.ive";
pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "log.txt";

#[derive(Parser, Debug)]
#[command(
    name = "spatialedit",
    version,
    about = "Train and evaluate the toy video editing model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// JSON file with configuration fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the report, log and artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainFlags {
    #[arg(long = "lr")]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    mode: Option<AblationMode>,
    #[arg(long)]
    log_every: Option<usize>,
    #[arg(long)]
    heldout_every: Option<usize>,
    #[arg(long)]
    max_pairs: Option<usize>,
}

#[derive(Args, Debug, Clone, Default)]
struct EvalFlags {
    #[arg(long)]
    sampler_steps: Option<usize>,
    /// Number of held-out pairs to score.
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    temporal_videos: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Training pairs.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        test_pairs: Option<usize>,
        #[arg(long)]
        clips: Option<usize>,
        #[arg(long)]
        heldout_clips: Option<usize>,
        #[arg(long)]
        tasks_per_scene: Option<usize>,
    },
    /// Pretrain the backbone on synthetic clips.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Dataset directory; generated from the seed when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// JSON file with backbone dimensions.
        #[arg(long)]
        model: Option<PathBuf>,
        /// Continue from a checkpoint with its recorded config; only
        /// `--steps` may be changed.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train the editing modules on a frozen pretrained backbone.
    TrainEdit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        /// Pretrained backbone checkpoint.
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Continue from a checkpoint with its recorded config; only
        /// `--epochs` may be changed.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Edit held-out pairs and dump a PPM grid.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        /// Trained editing checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Frames of the static source videos; 1 edits images.
        #[arg(long, default_value_t = 1)]
        frames: usize,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Score a trained checkpoint against its zero-init baseline.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write per-sample metrics as CSV.
        #[arg(long)]
        csv: bool,
        /// Also write a PPM grid of source, output and truth.
        #[arg(long)]
        dump: bool,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Train and score every ablation mode from one backbone.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
        #[arg(long)]
        backbone: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Comma-separated subset of modes.
        #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
        modes: Vec<AblationMode>,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Pretrain { .. } => "pretrain",
            Command::TrainEdit { .. } => "train-edit",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::Ablate { .. } => "ablate",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData { common, .. }
            | Command::Pretrain { common, .. }
            | Command::TrainEdit { common, .. }
            | Command::Sample { common, .. }
            | Command::Eval { common, .. }
            | Command::Gradcheck { common }
            | Command::Ablate { common, .. } => common,
        }
    }
}

fn parse_mode(s: &str) -> std::result::Result<AblationMode, String> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| format!("unknown mode {s:?}; expected full, no-text-gate, no-update or naive-parallel-2d"))
}

/// Lines echoed to stderr and kept for `log.txt`.
#[derive(Default)]
struct Log {
    lines: Vec<String>,
}

impl Log {
    fn line(&mut self, s: impl Into<String>) {
        let s = s.into();
        eprintln!("{s}");
        self.lines.push(s);
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let out = cli.command.common().out.clone();
    let mut log = Log::default();
    let (report, code) = match dispatch(&cli.command, &mut log) {
        Ok(rc) => rc,
        Err(e) => {
            let code = if e.is_validation() { 1 } else { 2 };
            log.line(format!("error: {e}"));
            let mut r = Report::new(cli.command.name(), String::new(), None);
            r.metrics = json!({ "error": e.to_string(), "exit_code": code });
            (r, code)
        }
    };
    match write_outputs(&out, &report, &log) {
        Ok(()) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if code == 0 {
                2
            } else {
                code
            }
        }
    }
}

fn write_outputs(out: &Path, report: &Report, log: &Log) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let rp = out.join(REPORT_FILE);
    fs::write(&rp, report.to_json()? + "\n").map_err(|e| Error::io(&rp, e))?;
    let lp = out.join(LOG_FILE);
    let mut text = log.lines.join("\n");
    text.push('\n');
    fs::write(&lp, text).map_err(|e| Error::io(&lp, e))
}

/// The report and exit code of a command that ran to completion.
fn dispatch(cmd: &Command, log: &mut Log) -> Result<(Report, i32)> {
    if let Command::Gradcheck { common } = cmd {
        return cmd_gradcheck(common, log);
    }
    let report = match cmd {
        Command::GenData {
            common,
            n,
            test_pairs,
            clips,
            heldout_clips,
            tasks_per_scene,
        } => {
            let mut o = Map::new();
            put(&mut o, "seed", common.seed);
            put(&mut o, "train_pairs", *n);
            put(&mut o, "test_pairs", *test_pairs);
            put(&mut o, "clips", *clips);
            put(&mut o, "heldout_clips", *heldout_clips);
            put(&mut o, "tasks_per_scene", *tasks_per_scene);
            let cfg: DataConfig = configure(DataConfig::default(), common.config.as_deref(), o)?;
            cmd_gen_data(common, &cfg, log)
        }
        Command::Pretrain {
            common,
            train,
            data,
            model,
            resume,
        } => {
            let cfg = train_config(TrainConfig::pretrain(), common, train)?;
            let dit: DiTConfig = match model {
                Some(p) => serde_json::from_slice(&read_file(p)?)
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
                None => DiTConfig::default(),
            };
            cmd_pretrain(cfg, dit, data.as_deref(), resume.as_deref(), train.steps, log)
        }
        Command::TrainEdit {
            common,
            train,
            backbone,
            data,
            resume,
        } => {
            let cfg = train_config(TrainConfig::edit(), common, train)?;
            cmd_train_edit(
                cfg,
                backbone.as_deref(),
                data.as_deref(),
                resume.as_deref(),
                train.epochs,
                log,
            )
        }
        Command::Sample {
            common,
            eval,
            checkpoint,
            data,
            frames,
            count,
        } => {
            let cfg = eval_config(common, eval)?;
            let ck = require(
                checkpoint.as_deref(),
                "sample needs --checkpoint <file> from train-edit (e.g. out/checkpoint.ive)",
            )?;
            cmd_sample(common, &cfg, ck, data.as_deref(), *frames, *count, log)
        }
        Command::Eval {
            common,
            eval,
            checkpoint,
            data,
            csv,
            dump,
        } => {
            let cfg = eval_config(common, eval)?;
            let ck = require(
                checkpoint.as_deref(),
                "eval needs --checkpoint <file> from train-edit (e.g. out/checkpoint.ive)",
            )?;
            cmd_eval(common, &cfg, ck, data.as_deref(), *csv, *dump, log)
        }
        Command::Gradcheck { .. } => unreachable!("handled above"),
        Command::Ablate {
            common,
            train,
            eval,
            backbone,
            data,
            modes,
        } => {
            let (tc, ec) = ablate_config(common, train, eval)?;
            let backbone = require(
                backbone.as_deref(),
                "ablate needs --backbone <file> from pretrain (e.g. out/checkpoint.ive)",
            )?;
            let modes = if modes.is_empty() {
                AblationMode::ALL.to_vec()
            } else {
                modes.clone()
            };
            cmd_ablate(common, tc, &ec, backbone, data.as_deref(), &modes, log)
        }
    }?;
    Ok((report, 0))
}

fn put<T: Serialize>(o: &mut Map<String, Value>, key: &str, v: Option<T>) {
    if let Some(v) = v {
        o.insert(key.to_string(), serde_json::to_value(v).expect("flag values serialize"));
    }
}

fn read_file(p: &Path) -> Result<Vec<u8>> {
    if !p.exists() {
        return Err(Error::Config(format!("{} does not exist", p.display())));
    }
    fs::read(p).map_err(|e| Error::io(p, e))
}

fn require<'a>(p: Option<&'a Path>, hint: &str) -> Result<&'a Path> {
    let p = p.ok_or_else(|| Error::Config(hint.to_string()))?;
    if !p.is_file() {
        return Err(Error::Config(format!("{} is not a file; {hint}", p.display())));
    }
    Ok(p)
}

/// Layers the config file and then the flag overrides onto `base`.
fn configure<T: Serialize + DeserializeOwned>(base: T, file: Option<&Path>, flags: Map<String, Value>) -> Result<T> {
    let mut v = serde_json::to_value(base)?;
    let obj = v.as_object_mut().expect("configs are JSON objects");
    if let Some(p) = file {
        let from_file: Value =
            serde_json::from_slice(&read_file(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let Value::Object(m) = from_file else {
            return Err(Error::Config(format!("{} must hold a JSON object", p.display())));
        };
        obj.extend(m);
    }
    obj.extend(flags);
    serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))
}

fn train_overrides(common: &Common, f: &TrainFlags, base: &TrainConfig) -> Map<String, Value> {
    let mut o = Map::new();
    put(&mut o, "seed", common.seed);
    put(&mut o, "learning_rate", f.learning_rate);
    put(&mut o, "batch_size", f.batch_size);
    put(&mut o, "epochs", f.epochs);
    put(&mut o, "steps", f.steps);
    if f.beta1.is_some() || f.beta2.is_some() {
        put(
            &mut o,
            "betas",
            Some((f.beta1.unwrap_or(base.betas.0), f.beta2.unwrap_or(base.betas.1))),
        );
    }
    put(&mut o, "eps", f.eps);
    put(&mut o, "ablation", f.mode);
    put(&mut o, "log_every", f.log_every);
    put(&mut o, "heldout_every", f.heldout_every);
    put(&mut o, "max_pairs", f.max_pairs);
    o
}

fn train_config(base: TrainConfig, common: &Common, f: &TrainFlags) -> Result<TrainConfig> {
    let o = train_overrides(common, f, &base);
    let phase = base.phase;
    let mut cfg: TrainConfig = configure(base, common.config.as_deref(), o)?;
    if cfg.phase != phase {
        return Err(Error::Config(format!(
            "config file sets phase {:?} for a {:?} command",
            cfg.phase, phase
        )));
    }
    cfg.checkpoint = Some(common.out.join(CHECKPOINT_FILE));
    cfg.validate()?;
    Ok(cfg)
}

fn eval_overrides(common: &Common, f: &EvalFlags) -> Map<String, Value> {
    let mut o = Map::new();
    put(&mut o, "seed", common.seed);
    put(&mut o, "sampler_steps", f.sampler_steps);
    put(&mut o, "pairs", f.pairs);
    put(&mut o, "temporal_videos", f.temporal_videos);
    o
}

fn eval_config(common: &Common, f: &EvalFlags) -> Result<EvalConfig> {
    let cfg: EvalConfig = configure(
        EvalConfig::default(),
        common.config.as_deref(),
        eval_overrides(common, f),
    )?;
    cfg.sampler()?;
    Ok(cfg)
}

/// The `ablate` config file holds optional `train` and `eval` objects.
fn ablate_config(common: &Common, t: &TrainFlags, e: &EvalFlags) -> Result<(TrainConfig, EvalConfig)> {
    let (mut tf, mut ef) = (Map::new(), Map::new());
    if let Some(p) = &common.config {
        let v: Value =
            serde_json::from_slice(&read_file(p)?).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
        let Value::Object(mut m) = v else {
            return Err(Error::Config(format!("{} must hold a JSON object", p.display())));
        };
        for (key, dst) in [("train", &mut tf), ("eval", &mut ef)] {
            match m.remove(key) {
                Some(Value::Object(x)) => *dst = x,
                Some(_) => return Err(Error::Config(format!("{key} must be an object"))),
                None => {}
            }
        }
        if let Some(k) = m.keys().next() {
            return Err(Error::Config(format!(
                "unknown ablate config key {k:?}; expected train or eval"
            )));
        }
    }
    let base = TrainConfig::edit();
    tf.extend(train_overrides(common, t, &base));
    let mut tc: TrainConfig = configure(base, None, tf)?;
    tc.checkpoint = None;
    tc.validate()?;
    ef.extend(eval_overrides(common, e));
    let ec: EvalConfig = configure(EvalConfig::default(), None, ef)?;
    ec.sampler()?;
    Ok((tc, ec))
}

fn file_digest(p: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(p).map_err(|e| Error::io(p, e))?))
}

fn dataset_digest(ds: &Dataset) -> Result<String> {
    let (manifest, bytes) = encode(ds);
    Ok(sha256_hex(
        format!("{}{}", json_digest(&manifest)?, sha256_hex(&bytes)).as_bytes(),
    ))
}

fn load_data(path: Option<&Path>, seed: u64, log: &mut Log) -> Result<Dataset> {
    match path {
        Some(p) => {
            if !p.is_dir() {
                return Err(Error::Config(format!(
                    "{} is not a dataset directory; create one with gen-data",
                    p.display()
                )));
            }
            log.line(format!("reading dataset {}", p.display()));
            read_dataset(p)
        }
        None => {
            log.line(format!("generating the default corpus with seed {seed}"));
            Ok(generate(&DataConfig {
                seed,
                ..DataConfig::default()
            })?
            .0)
        }
    }
}

fn load_checkpoint(p: &Path, log: &mut Log) -> Result<(Checkpoint, String)> {
    log.line(format!("loading checkpoint {}", p.display()));
    Ok((Checkpoint::load(p)?, file_digest(p)?))
}

fn digest_of(v: Value) -> Result<String> {
    json_digest(&v)
}

fn cmd_gen_data(common: &Common, cfg: &DataConfig, log: &mut Log) -> Result<Report> {
    let (ds, train_rep, test_rep) = generate(cfg)?;
    let manifest = write_dataset(&common.out, &ds)?;
    log.line(format!(
        "wrote {} train pairs, {} test pairs, {} clips, {} held-out clips to {}",
        ds.train.len(),
        ds.test.len(),
        ds.clips.len(),
        ds.heldout_clips.len(),
        common.out.display()
    ));
    let mut r = Report::new("gen-data", json_digest(cfg)?, None);
    r.metrics = json!({
        "train_pairs": ds.train.len(),
        "test_pairs": ds.test.len(),
        "clips": ds.clips.len(),
        "heldout_clips": ds.heldout_clips.len(),
        "filter": { "train": train_rep, "test": test_rep },
        "manifest_digest": json_digest(&manifest)?,
        "dataset_digest": dataset_digest(&ds)?,
    });
    Ok(r)
}

fn save_final(s: &Session, log: &mut Log) -> Result<String> {
    let path = s.config.checkpoint.clone().expect("cli sets the checkpoint path");
    s.checkpoint().save(&path)?;
    log.line(format!("saved {} at step {}", path.display(), s.step));
    file_digest(&path)
}

fn log_entries(s: &Session, log: &mut Log) {
    for e in &s.log {
        let mut line = format!("step {}", e.step);
        if let Some(l) = e.loss {
            line += &format!(" loss {l:.6}");
        }
        if let Some(h) = e.heldout {
            line += &format!(" heldout {h:.6}");
        }
        if let Some((lo, hi)) = e.gate_range {
            line += &format!(" gate [{lo:.4}, {hi:.4}]");
        }
        log.line(line);
    }
}

fn cmd_pretrain(
    cfg: TrainConfig,
    dit: DiTConfig,
    data: Option<&Path>,
    resume: Option<&Path>,
    steps: Option<usize>,
    log: &mut Log,
) -> Result<Report> {
    let ds = load_data(data, cfg.seed, log)?;
    let (mut s, resumed_from) = match resume {
        Some(p) => {
            let (ck, digest) = load_checkpoint(p, log)?;
            if ck.config.phase != Phase::Pretrain {
                return Err(Error::Config(format!(
                    "{} is not a pretraining checkpoint",
                    p.display()
                )));
            }
            let mut s = Session::resume(&ck)?;
            s.config = TrainConfig {
                checkpoint: cfg.checkpoint.clone(),
                steps: steps.unwrap_or(s.config.steps),
                ..s.config
            };
            (s, Some(digest))
        }
        None => (new_pretrain_session(dit.clone(), cfg.clone())?, None),
    };
    log.line(format!(
        "pretraining {} steps at batch {} from step {}",
        s.config.steps, s.config.batch_size, s.step
    ));
    let rep = pretrain_backbone(&mut s, &ds.clips, &ds.heldout_clips)?;
    log_entries(&s, log);
    log.line(format!(
        "held-out loss {:.6} -> {:.6} ({:.1}% drop)",
        rep.initial_heldout,
        rep.final_heldout,
        100.0 * rep.drop_fraction()
    ));
    let digest = save_final(&s, log)?;
    let config_digest = digest_of(json!({
        "train": TrainConfig { checkpoint: None, ..s.config.clone() },
        "dit": s.model.cfg(),
    }))?;
    let mut r = Report::new("pretrain", config_digest, Some(digest));
    r.metrics = json!({
        "seed": s.config.seed,
        "steps": rep.steps,
        "initial_heldout": rep.initial_heldout,
        "final_heldout": rep.final_heldout,
        "drop_fraction": rep.drop_fraction(),
        "dataset_digest": dataset_digest(&ds)?,
        "resumed_from": resumed_from,
        "log": s.log,
    });
    Ok(r)
}

fn cmd_train_edit(
    cfg: TrainConfig,
    backbone: Option<&Path>,
    data: Option<&Path>,
    resume: Option<&Path>,
    epochs: Option<usize>,
    log: &mut Log,
) -> Result<Report> {
    let hint = "train-edit needs --backbone <file> from pretrain, or --resume <file> from an earlier train-edit";
    let (mut s, input_digest) = match (resume, backbone) {
        (Some(p), _) => {
            let (ck, digest) = load_checkpoint(require(Some(p), hint)?, log)?;
            if ck.config.phase != Phase::EditTrain {
                return Err(Error::Config(format!(
                    "{} is not an edit-training checkpoint",
                    p.display()
                )));
            }
            let mut s = Session::resume(&ck)?;
            s.config = TrainConfig {
                checkpoint: cfg.checkpoint.clone(),
                epochs: epochs.unwrap_or(s.config.epochs),
                ..s.config
            };
            (s, digest)
        }
        (None, b) => {
            let (ck, digest) = load_checkpoint(require(b, hint)?, log)?;
            if ck.config.phase != Phase::Pretrain || ck.mode.is_some() {
                return Err(Error::Config(format!(
                    "{} is not a pretrained backbone",
                    b.unwrap().display()
                )));
            }
            let model = attach_and_inherit(&ck, cfg.ablation, cfg.seed)?;
            (Session::new(cfg.clone(), model)?, digest)
        }
    };
    let ds = load_data(data, s.config.seed, log)?;
    log.line(format!(
        "edit training {:?} on {} pairs, {} epochs at batch {}, lr {:e}",
        s.config.ablation,
        s.config.max_pairs.unwrap_or(ds.train.len()).min(ds.train.len()),
        s.config.epochs,
        s.config.batch_size,
        s.config.learning_rate
    ));
    let rep = train_edit(&mut s, &ds.train, None)?;
    log_entries(&s, log);
    log.line(format!(
        "smoothed loss {:.6} -> {:.6} (ratio {:.4}, window {})",
        rep.initial_window,
        rep.final_window,
        rep.ratio(),
        rep.window
    ));
    let digest = save_final(&s, log)?;
    let config_digest = digest_of(json!({
        "train": TrainConfig { checkpoint: None, ..s.config.clone() },
        "input_checkpoint": input_digest,
    }))?;
    let mut r = Report::new("train-edit", config_digest, Some(digest));
    r.metrics = json!({
        "seed": s.config.seed,
        "mode": s.config.ablation,
        "steps": rep.steps,
        "initial_window": rep.initial_window,
        "final_window": rep.final_window,
        "smoothing_window": rep.window,
        "ratio": rep.ratio(),
        "frozen_tensors": s.frozen_digests.len(),
        "input_checkpoint_digest": input_digest,
        "dataset_digest": dataset_digest(&ds)?,
        "log": s.log,
    });
    Ok(r)
}

fn edit_checkpoint(p: &Path, log: &mut Log) -> Result<(Checkpoint, String)> {
    let (ck, digest) = load_checkpoint(p, log)?;
    if ck.mode.is_none() {
        return Err(Error::Config(format!(
            "{} holds a bare backbone; pass a checkpoint written by train-edit",
            p.display()
        )));
    }
    Ok((ck, digest))
}

fn cmd_sample(
    common: &Common,
    cfg: &EvalConfig,
    ckp: &Path,
    data: Option<&Path>,
    frames: usize,
    count: usize,
    log: &mut Log,
) -> Result<Report> {
    let (ck, ck_digest) = edit_checkpoint(ckp, log)?;
    if frames == 0 || frames > ck.dit.frames_max {
        return Err(Error::Config(format!("--frames must lie in 1..={}", ck.dit.frames_max)));
    }
    let model = model_from_checkpoint(&ck)?;
    let ds = load_data(data, ck.config.seed, log)?;
    let pairs = &ds.test[..count.min(ds.test.len())];
    if pairs.is_empty() {
        return Err(Error::Config("no held-out pairs to sample".into()));
    }
    let sampler = cfg.sampler()?;
    let rows: Vec<Vec<Tensor>> = if frames == 1 {
        let outs = edit_images(&model, pairs, &sampler, cfg.seed)?;
        pairs
            .iter()
            .zip(outs)
            .map(|(p, o)| vec![p.src_image.clone(), o, p.edit_image.clone()])
            .collect()
    } else {
        let videos: Vec<Tensor> = pairs
            .iter()
            .map(|p| Ok(static_video(&p.scene, frames)?.frames))
            .collect::<Result<_>>()?;
        let src: Vec<PromptTokens> = pairs.iter().map(|p| p.src_prompt.clone()).collect();
        let edit: Vec<PromptTokens> = pairs.iter().map(|p| p.edit_prompt.clone()).collect();
        let outs = edit_videos(&model, &videos, &src, &edit, &sampler, cfg.seed)?;
        pairs
            .iter()
            .zip(outs)
            .map(|(p, o)| {
                let mut row = vec![p.src_image.clone()];
                row.extend(o.unstack()?);
                Ok(row)
            })
            .collect::<Result<_>>()?
    };
    let refs: Vec<Vec<&Tensor>> = rows.iter().map(|r| r.iter().collect()).collect();
    let path = common.out.join("samples.ppm");
    write_ppm(&path, &image_grid(&refs)?)?;
    log.line(format!(
        "wrote {} edited samples at {frames} frames to {}",
        pairs.len(),
        path.display()
    ));
    let config_digest = digest_of(json!({ "eval": cfg, "frames": frames, "count": count }))?;
    let mut r = Report::new("sample", config_digest, Some(ck_digest));
    r.metrics = json!({
        "seed": cfg.seed,
        "mode": ck.mode,
        "samples": pairs.len(),
        "frames": frames,
        "grid": "samples.ppm",
        "dataset_digest": dataset_digest(&ds)?,
    });
    Ok(r)
}

fn eval_metrics(e: &FullEval) -> Value {
    json!({
        "aggregate": e.images.aggregate,
        "per_task": e.images.per_task,
        "temporal": e.temporal,
        "audit": e.audit,
    })
}

fn cmd_eval(
    common: &Common,
    cfg: &EvalConfig,
    ckp: &Path,
    data: Option<&Path>,
    csv: bool,
    dump: bool,
    log: &mut Log,
) -> Result<Report> {
    let (ck, ck_digest) = edit_checkpoint(ckp, log)?;
    let model = model_from_checkpoint(&ck)?;
    let baseline = zero_init_baseline(&ck)?;
    let ds = load_data(data, ck.config.seed, log)?;
    let pairs = eval_pairs(&ds.test, cfg)?;
    log.line(format!("evaluating {:?} on {} held-out pairs", ck.mode, pairs.len()));
    let sampler = cfg.sampler()?;
    let base = edit_images(&baseline, pairs, &sampler, cfg.seed)?;
    let e = evaluate_against(&model, pairs, &base, cfg)?;
    let a = &e.images.aggregate;
    log.line(format!(
        "edit-region MSE {:?} (zero-init {:?}), preservation PSNR {:?} (zero-init {:?})",
        a.edit_region_mse, a.baseline_edit_region_mse, a.preservation_psnr, a.baseline_preservation_psnr
    ));
    for t in &e.temporal {
        log.line(format!(
            "temporal consistency at F={}: {:.6}",
            t.frames, t.temporal_consistency
        ));
    }
    if csv {
        let p = common.out.join("per_sample.csv");
        fs::create_dir_all(&common.out).map_err(|e| Error::io(&common.out, e))?;
        fs::write(&p, per_sample_csv(&e.images.per_sample)?).map_err(|err| Error::io(&p, err))?;
    }
    if dump {
        let outs = edit_images(&model, pairs, &sampler, cfg.seed)?;
        let rows: Vec<Vec<&Tensor>> = pairs
            .iter()
            .zip(&outs)
            .zip(&base)
            .map(|((p, o), b)| vec![&p.src_image, b, o, &p.edit_image])
            .collect();
        write_ppm(&common.out.join("eval_grid.ppm"), &image_grid(&rows)?)?;
    }
    let config_digest = digest_of(json!({ "eval": cfg }))?;
    let mut r = Report::new("eval", config_digest, Some(ck_digest));
    let mut m = eval_metrics(&e);
    m["seed"] = json!(cfg.seed);
    m["mode"] = json!(ck.mode);
    m["metric_kind"] = json!("exact pixel metrics on synthetic pairs");
    m["dataset_digest"] = json!(dataset_digest(&ds)?);
    m["training_losses"] = json!(ck.losses);
    r.metrics = m;
    r.per_sample = e
        .images
        .per_sample
        .iter()
        .map(serde_json::to_value)
        .collect::<std::result::Result<_, _>>()?;
    Ok(r)
}

/// Exit code 2 when any check fails.
fn cmd_gradcheck(common: &Common, log: &mut Log) -> Result<(Report, i32)> {
    let seed = common.seed.unwrap_or(0);
    let rep = gradcheck_suite(seed)?;
    println!("{rep}");
    log.line(format!("{rep}"));
    let mut r = Report::new("gradcheck", digest_of(json!({ "seed": seed }))?, None);
    r.metrics = json!({ "seed": seed, "all_passed": rep.all_passed() });
    r.per_sample = rep
        .rows
        .iter()
        .map(serde_json::to_value)
        .collect::<std::result::Result<_, _>>()?;
    if !rep.all_passed() {
        let failed: Vec<&str> = rep.rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        log.line(format!("failed checks: {}", failed.join(", ")));
        return Ok((r, 2));
    }
    Ok((r, 0))
}

fn cmd_ablate(
    common: &Common,
    cfg: TrainConfig,
    ecfg: &EvalConfig,
    backbone: &Path,
    data: Option<&Path>,
    modes: &[AblationMode],
    log: &mut Log,
) -> Result<Report> {
    let (ck, ck_digest) = load_checkpoint(backbone, log)?;
    if ck.config.phase != Phase::Pretrain || ck.mode.is_some() {
        return Err(Error::Config(format!(
            "{} is not a pretrained backbone",
            backbone.display()
        )));
    }
    let ds = load_data(data, cfg.seed, log)?;
    log.line(format!("ablating {modes:?} from backbone {}", &ck_digest[..12]));
    let runs = run_ablation(&ck, &cfg, &ds.train, modes)?;
    let pairs = eval_pairs(&ds.test, ecfg)?;
    let baseline = attach_and_inherit(&ck, AblationMode::Full, cfg.seed)?;
    let base = edit_images(&baseline, pairs, &ecfg.sampler()?, ecfg.seed)?;
    let mut per_mode = Map::new();
    let mut ranked = Vec::new();
    for run in &runs {
        let e = evaluate_against(&run.session.model, pairs, &base, ecfg)?;
        let name = serde_json::to_value(run.mode)?.as_str().unwrap_or_default().to_string();
        let path = common.out.join(format!("ablation-{name}.ive"));
        run.session.checkpoint().save(&path)?;
        log.line(format!(
            "{name}: loss ratio {:.4}, edit-region MSE {:?}",
            run.report.ratio(),
            e.images.aggregate.edit_region_mse
        ));
        ranked.push((
            e.images.aggregate.edit_region_mse.unwrap_or(f64::INFINITY),
            name.clone(),
        ));
        let mut m = eval_metrics(&e);
        m["backbone_digest"] = json!(run.backbone_digest);
        m["checkpoint_digest"] = json!(file_digest(&path)?);
        m["train"] = json!({
            "steps": run.report.steps,
            "initial_window": run.report.initial_window,
            "final_window": run.report.final_window,
            "ratio": run.report.ratio(),
        });
        m["trainable_tensors"] = json!(run.session.adam.ids.len());
        per_mode.insert(name, m);
    }
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0));
    let same_backbone = runs.windows(2).all(|w| w[0].backbone_digest == w[1].backbone_digest);
    let config_digest = digest_of(json!({ "train": cfg, "eval": ecfg, "modes": modes }))?;
    let mut r = Report::new("ablate", config_digest, Some(ck_digest));
    r.metrics = json!({
        "seed": cfg.seed,
        "modes": per_mode,
        "same_backbone": same_backbone,
        "ordering_by_edit_region_mse": ranked.into_iter().map(|(_, n)| n).collect::<Vec<_>>(),
        "dataset_digest": dataset_digest(&ds)?,
    });
    Ok(r)
}
