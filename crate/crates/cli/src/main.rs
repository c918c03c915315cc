//! `streamchar` command-line interface.
//!
//! Exit codes: 0 success, 1 validation or I/O failure, 2 numerical abort.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use streamchar::config::RunConfig;
use streamchar::container::{read_stream, StreamHeader, StreamWriter};
use streamchar::distill::{stage1, stage2, DistillRecord, ScorePair};
use streamchar::eval::{evaluate_stream, StreamReport};
use streamchar::model::ModelConfig;
use streamchar::stream::{ReferenceStats, StreamRequest, Streamer};
use streamchar::synthworld::{gen_sample, WorldConfig};
use streamchar::train::train_teacher;
use streamchar::{Checkpoint, ChunkRecord, Error, Params, Scalar};

const TAG_TEACHER: &str = "teacher";
const TAG_STAGE1: &str = "student_stage1";
const TAG_STAGE2: &str = "student_stage2";

/// Reference statistics for the video quality proxy.
const STATS_SAMPLES: usize = 200;
const STATS_TOKENS: usize = 60;
const STATS_SEED: u64 = 999;

#[derive(Parser)]
#[command(name = "streamchar", version, about = "Streaming talking-character generation on a synthetic world")]
struct Cli {
    /// TOML run configuration. Built-in defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root. Overrides `output_dir` from the configuration.
    #[arg(long, env = "STREAMCHAR_OUT", global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the default configuration to a file.
    InitConfig { path: PathBuf },
    /// Jointly train orchestrator, denoiser and pointer.
    TrainTeacher {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distill the teacher into a few-step student.
    Distill {
        #[arg(long, value_enum, default_value = "both")]
        stage: Stage,
        /// Defaults to `<out>/teacher.sck`.
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Stage I output used by stage 2. Defaults to `<out>/student_stage1.sck`.
        #[arg(long)]
        student: Option<PathBuf>,
        /// Run Stage II directly from the teacher.
        #[arg(long)]
        skip_stage1: bool,
        #[arg(long)]
        loss_window: Option<usize>,
        #[arg(long)]
        no_sink: bool,
        #[arg(long)]
        stage1_steps: Option<usize>,
        #[arg(long)]
        stage2_steps: Option<usize>,
    },
    /// Stream chunks for a transcript and write the container and traces.
    Stream {
        /// Defaults to the newest student, then the teacher, under the output root.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Comma-separated token ids; may be empty. A synthetic transcript is drawn when absent.
        #[arg(long)]
        transcript: Option<String>,
        /// Seed of the synthetic speaker and transcript.
        #[arg(long, default_value_t = 0)]
        speaker_seed: u64,
        /// Length of the synthetic transcript.
        #[arg(long, default_value_t = 120)]
        tokens: usize,
        #[arg(long, default_value_t = 20)]
        chunks: usize,
        #[arg(long)]
        no_sink: bool,
        #[arg(long)]
        steps: Option<usize>,
        /// Base name of the written files.
        #[arg(long, default_value = "stream")]
        name: String,
    },
    /// Report metrics of a stream container.
    Eval {
        /// Defaults to `<out>/stream.scs`.
        container: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Stage {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    Both,
}

/// Everything needed to rebuild a model from a checkpoint.
#[derive(Serialize, Deserialize)]
struct Meta {
    world: WorldConfig,
    model: ModelConfig,
    step: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::NonFinite(_)) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Command::InitConfig { path } = &cli.cmd {
        let text = RunConfig::default().to_toml()?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        return Ok(());
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(out) = cli.out {
        cfg.output_dir = out;
    }
    fs::create_dir_all(&cfg.output_dir).with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    match cli.cmd {
        Command::InitConfig { .. } => unreachable!(),
        Command::TrainTeacher { steps, seed } => {
            if let Some(s) = steps {
                cfg.train.steps = s;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            cmd_train(&cfg)
        }
        Command::Distill { stage, teacher, student, skip_stage1, loss_window, no_sink, stage1_steps, stage2_steps } => {
            if let Some(w) = loss_window {
                cfg.distill.loss_window = w;
            }
            if no_sink {
                cfg.distill.sink = false;
            }
            if let Some(s) = stage1_steps {
                cfg.distill.stage1_steps = s;
            }
            if let Some(s) = stage2_steps {
                cfg.distill.stage2_steps = s;
            }
            cfg.validate()?;
            if skip_stage1 && stage == Stage::One {
                bail!(Error::Config("--skip-stage1 conflicts with --stage 1".into()));
            }
            let teacher = teacher.unwrap_or_else(|| cfg.output_dir.join(format!("{TAG_TEACHER}.sck")));
            cmd_distill(&cfg, stage, &teacher, student, skip_stage1)
        }
        Command::Stream { checkpoint, transcript, speaker_seed, tokens, chunks, no_sink, steps, name } => {
            if no_sink {
                cfg.stream.sink = false;
            }
            if let Some(s) = steps {
                cfg.stream.sampling_steps = s;
                cfg.distill.student_steps = s;
            }
            cfg.validate()?;
            let checkpoint = match checkpoint {
                Some(p) => p,
                None => newest_model(&cfg.output_dir)?,
            };
            cmd_stream(&cfg, &checkpoint, transcript, speaker_seed, tokens, chunks, &name)
        }
        Command::Eval { container } => {
            let path = container.unwrap_or_else(|| cfg.output_dir.join("stream.scs"));
            let report = eval_container(&path)?;
            let json = serde_json::to_string_pretty(&report)?;
            println!("{json}");
            fs::write(path.with_extension("eval.json"), json + "\n")?;
            Ok(())
        }
    }
}

fn jsonl(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn save(cfg: &RunConfig, model: &ModelConfig, tag: &str, step: Option<usize>, params: Params, path: &Path) -> Result<()> {
    let meta = Meta { world: cfg.world.clone(), model: model.clone(), step };
    Checkpoint::new(tag, &meta, params)?.save(path).with_context(|| format!("writing {}", path.display()))
}

/// Loads a checkpoint and checks it was built for the configured world.
fn load(cfg: &RunConfig, path: &Path, tags: &[&str]) -> Result<(ModelConfig, Params)> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    if !tags.contains(&ck.tag.as_str()) {
        bail!(Error::Precondition(format!("{} is tagged `{}`, expected one of {tags:?}", path.display(), ck.tag)));
    }
    let meta: Meta = ck.meta_as()?;
    if meta.world != cfg.world {
        bail!(Error::Config(format!("{} was built for a different world configuration", path.display())));
    }
    meta.model.validate(&cfg.world)?;
    Ok((meta.model, ck.params))
}

fn newest_model(out: &Path) -> Result<PathBuf> {
    [TAG_STAGE2, TAG_STAGE1, TAG_TEACHER]
        .iter()
        .map(|t| out.join(format!("{t}.sck")))
        .find(|p| p.exists())
        .ok_or_else(|| Error::Precondition(format!("no checkpoint under {}", out.display())).into())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let out = &cfg.output_dir;
    let mut log = jsonl(&out.join("train_log.jsonl"))?;
    let mut err = None;
    let every = cfg.train.checkpoint_every;
    let (params, report) = train_teacher::<Scalar>(&cfg.world, &cfg.model, &cfg.train, None, |rec, p| {
        if err.is_some() {
            return;
        }
        let r = serde_json::to_writer(&mut log, rec).map_err(anyhow::Error::from).and_then(|_| Ok(writeln!(log)?));
        let r = r.and_then(|_| {
            let step = rec.step + 1;
            if every > 0 && step % every == 0 && step < cfg.train.steps {
                save(cfg, &cfg.model, TAG_TEACHER, Some(step), p.clone(), &out.join(format!("{TAG_TEACHER}_step{step}.sck")))?;
            }
            Ok(())
        });
        err = r.err();
    })?;
    if let Some(e) = err {
        return Err(e);
    }
    log.flush()?;
    save(cfg, &cfg.model, TAG_TEACHER, Some(cfg.train.steps), params, &out.join(format!("{TAG_TEACHER}.sck")))?;
    let summary = serde_json::json!({ "initial": report.initial, "last": report.last, "steps": cfg.train.steps });
    fs::write(out.join("train_report.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    println!("{summary}");
    Ok(())
}

fn cmd_distill(cfg: &RunConfig, stage: Stage, teacher_path: &Path, student: Option<PathBuf>, skip_stage1: bool) -> Result<()> {
    let out = &cfg.output_dir;
    let (model, teacher) = load(cfg, teacher_path, &[TAG_TEACHER])?;
    let mut scores = ScorePair::new(teacher.clone());
    let mut log = jsonl(&out.join("distill_log.jsonl"))?;
    let mut write = |rec: &DistillRecord, _: &Params| -> streamchar::Result<()> {
        serde_json::to_writer(&mut log, rec).map_err(|e| Error::Io(e.into()))?;
        writeln!(log)?;
        Ok(())
    };
    let run1 = stage != Stage::Two && !skip_stage1;
    let run2 = stage != Stage::One;
    let mut params = teacher;
    if run1 {
        stage1(&cfg.world, &model, &cfg.distill, &mut params, &mut scores, &mut write)?;
        save(cfg, &model, TAG_STAGE1, Some(cfg.distill.stage1_steps), params.clone(), &out.join(format!("{TAG_STAGE1}.sck")))?;
    } else if run2 && !skip_stage1 {
        let path = student.unwrap_or_else(|| out.join(format!("{TAG_STAGE1}.sck")));
        let (m, p) = load(cfg, &path, &[TAG_STAGE1])?;
        if m != model {
            bail!(Error::Config(format!("{} and the teacher disagree on the model configuration", path.display())));
        }
        params = p;
    }
    if run2 {
        stage2(&cfg.world, &model, &cfg.distill, &mut params, &mut scores, &mut write)?;
        save(cfg, &model, TAG_STAGE2, Some(cfg.distill.stage2_steps), params, &out.join(format!("{TAG_STAGE2}.sck")))?;
    }
    drop(write);
    log.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct LatencyLine {
    index: usize,
    cursor: f64,
    window_start: usize,
    s_hat: f64,
    clamped: bool,
    #[serde(flatten)]
    latency: streamchar::stream::LatencyRecord,
}

fn parse_transcript(s: &str) -> Result<Vec<u32>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<u32>().map_err(|e| Error::Config(format!("transcript token `{t}`: {e}")).into()))
        .collect()
}

fn cmd_stream(cfg: &RunConfig, checkpoint: &Path, transcript: Option<String>, seed: u64, tokens: usize, chunks: usize, name: &str) -> Result<()> {
    let (model, params) = load(cfg, checkpoint, &[TAG_TEACHER, TAG_STAGE1, TAG_STAGE2])?;
    let sample = gen_sample::<Scalar>(&cfg.world, tokens.max(1), seed)?;
    let mut request = StreamRequest::from_sample(&sample);
    if let Some(t) = transcript {
        let t = parse_transcript(&t)?;
        if let Some(bad) = t.iter().find(|&&x| x as usize >= cfg.world.vocab_size) {
            bail!(Error::Precondition(format!("token {bad} outside the vocabulary of {}", cfg.world.vocab_size)));
        }
        request.transcript = t;
    }
    let identity: Vec<f64> = sample.identity.iter().map(|&x| f64::from(x)).collect();
    let header = StreamHeader {
        world: cfg.world.clone(),
        transcript: request.transcript.clone(),
        prompt: request.prompt,
        timbre: cfg.world.timbre(&identity),
        sink: cfg.stream.sink,
        sampling_steps: cfg.stream.sampling_steps,
        seed: cfg.stream.seed,
    };
    let out = &cfg.output_dir;
    let path = out.join(format!("{name}.scs"));
    let file = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    let mut writer = StreamWriter::new(file, &header)?;
    let mut trace = jsonl(&out.join(format!("{name}_latency.jsonl")))?;
    let mut records = Vec::new();
    let mut streamer = Streamer::new(&cfg.world, &params, &model, cfg.stream.clone(), request)?;
    streamer.run(chunks, |c| {
        let rec = ChunkRecord::from_output(c);
        writer.write_record(&rec)?;
        let line = LatencyLine { index: c.index, cursor: c.cursor, window_start: c.window_start, s_hat: c.s_hat, clamped: c.clamped, latency: c.latency };
        serde_json::to_writer(&mut trace, &line).map_err(|e| Error::Io(e.into()))?;
        writeln!(trace)?;
        records.push(rec);
        Ok(())
    })?;
    writer.finish()?;
    trace.flush()?;
    let stats = ReferenceStats::from_world(&cfg.world, STATS_SAMPLES, STATS_TOKENS, STATS_SEED)?;
    let report = evaluate_stream(&header, &records, &stats)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(out.join(format!("{name}_report.json")), json.clone() + "\n")?;
    println!("{json}");
    Ok(())
}

fn eval_container(path: &Path) -> Result<StreamReport> {
    let mut f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let (header, records) = read_stream::<Scalar>(&mut f).with_context(|| format!("reading {}", path.display()))?;
    let stats = ReferenceStats::from_world(&header.world, STATS_SAMPLES, STATS_TOKENS, STATS_SEED)?;
    Ok(evaluate_stream(&header, &records, &stats)?)
}
