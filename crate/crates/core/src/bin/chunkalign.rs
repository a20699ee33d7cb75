use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use chunkalign::harness::{
    bench, delay_sweep, evaluate_parallel, export_attention, inspect_attention, load_or_generate,
    train, AttentionSummary, LogEntry, RunConfig,
};
use chunkalign::model::{load_checkpoint, Architecture, Model};
use chunkalign::synthdata::{generate_dataset, Dataset};
use chunkalign::{Error, Result};

#[derive(Parser)]
#[command(
    name = "chunkalign",
    version,
    about = "Chunkwise Aligner and transducer baselines on synthetic transduction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by `[task]`.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Overrides `task.seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides `task.chunk_len` (and `model.chunk_len`).
        #[arg(long = "chunk-size")]
        chunk_size: Option<usize>,
        /// Dataset file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write its checkpoint and log.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        setup: TrainSetup,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode a split with a checkpoint and report metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeFlags,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Decode with this many threads; records stay in dataset order.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Directory for `metrics.json` and `decodes.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two or more checkpoints on the same split.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        decode: DecodeFlags,
        /// Repeat for each model; the first is the baseline of every ratio.
        #[arg(long = "checkpoint", required = true, num_args = 1)]
        checkpoints: Vec<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for `bench.json` and `bench.txt`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export per-head encoder self-attention for one utterance.
    InspectAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Utterance id; the first test utterance when omitted.
        #[arg(long)]
        utterance: Option<String>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one chunkwise model per delay and report test error side by side.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        setup: TrainSetup,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,4")]
        delays: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML); built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset file, overriding `run.dataset`.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Args)]
struct TrainSetup {
    /// Overrides `run.seed` and `model.init_seed`.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    arch: Option<Architecture>,
    #[arg(long = "chunk-size")]
    chunk_size: Option<usize>,
    #[arg(long = "delay-frames")]
    delay_frames: Option<usize>,
    #[command(flatten)]
    decode: DecodeFlags,
}

#[derive(Args)]
struct DecodeFlags {
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(d) = &self.dataset {
            cfg.run.dataset = Some(d.clone());
        }
        Ok(cfg)
    }
}

impl DecodeFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(b) = self.beam {
            cfg.decode.beam = b;
        }
        if let Some(t) = self.tau {
            cfg.decode.tau = t;
        }
    }
}

impl TrainSetup {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.run.seed = s;
            cfg.model.init_seed = s;
        }
        if let Some(a) = self.arch {
            cfg.run.arch = a;
        }
        if let Some(c) = self.chunk_size {
            cfg.set_chunk_len(c);
        }
        if let Some(d) = self.delay_frames {
            cfg.run.delay_frames = d;
        }
        self.decode.apply(cfg);
        cfg.validate()
    }
}

fn split<'a>(data: &'a Dataset, name: &str) -> Result<&'a [chunkalign::synthdata::Utterance]> {
    match name {
        "train" => Ok(&data.train),
        "dev" => Ok(&data.dev),
        "test" => Ok(&data.test),
        other => Err(Error::Config(format!(
            "unknown split {other:?}; expected train, dev or test"
        ))),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_loss_curve(checkpoint: &Path) -> Result<Vec<(usize, f64)>> {
    let Some(log) = checkpoint.parent().map(|d| d.join("train_log.jsonl")) else {
        return Ok(Vec::new());
    };
    if !log.exists() {
        return Ok(Vec::new());
    }
    fs::read_to_string(log)?
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let e: LogEntry = serde_json::from_str(l)?;
            Ok((e.step, e.loss))
        })
        .collect()
}

fn check_compatible(model: &Model, cfg: &RunConfig) -> Result<()> {
    let m = model.config();
    if m.feature_dim != cfg.task.feature_dim || m.frame_reduction != cfg.task.frame_reduction {
        return Err(Error::Config(format!(
            "checkpoint expects {}-dim features reduced by {}, dataset has {}-dim reduced by {}",
            m.feature_dim, m.frame_reduction, cfg.task.feature_dim, cfg.task.frame_reduction
        )));
    }
    if m.vocab_size < cfg.task.model_vocab_size() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary {} is smaller than the dataset's {}",
            m.vocab_size,
            cfg.task.model_vocab_size()
        )));
    }
    Ok(())
}

fn dataset_for(cfg: &mut RunConfig) -> Result<Dataset> {
    let data = load_or_generate(cfg)?;
    cfg.task = data.config.clone();
    Ok(data)
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Generate {
            common,
            seed,
            chunk_size,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(s) = seed {
                cfg.task.seed = s;
            }
            if let Some(c) = chunk_size {
                cfg.set_chunk_len(c);
            }
            cfg.validate()?;
            let data = generate_dataset(&cfg.task, cfg.run.dataset_size)?;
            data.save(&out)?;
            let all = data.train.iter().chain(&data.dev).chain(&data.test);
            let (tokens, frames) = all.fold((0, 0), |(t, f), u| {
                (t + u.tokens.len(), f + u.alignment.total_frames())
            });
            writeln!(
                stdout,
                "wrote {}: {} train, {} dev, {} test utterances; {tokens} tokens over {frames} encoder frames",
                out.display(),
                data.train.len(),
                data.dev.len(),
                data.test.len()
            )?;
        }
        Command::Train { common, setup, out } => {
            let mut cfg = common.load()?;
            setup.apply(&mut cfg)?;
            let out = out.or_else(|| cfg.run.out.clone());
            let data = dataset_for(&mut cfg)?;
            let outcome = train(&cfg, &data, out.as_deref())?;
            let last = outcome.log.last().map_or(f64::NAN, |e| e.loss);
            writeln!(
                stdout,
                "{}: {} steps in {:.1}s, final loss {last:.4}, best dev TER {} at step {}, {} utterances skipped",
                cfg.run.arch.name(),
                outcome.steps_run,
                outcome.wall_seconds,
                outcome.best_dev_ter.map_or("-".into(), |t| format!("{t:.4}")),
                outcome.best_step,
                outcome.skipped
            )?;
            if let Some(dir) = out {
                writeln!(stdout, "checkpoint: {}", dir.join("model.ckpt").display())?;
            }
        }
        Command::Eval {
            common,
            decode,
            checkpoint,
            split: which,
            jobs,
            out,
        } => {
            let mut cfg = common.load()?;
            decode.apply(&mut cfg);
            let model = load_checkpoint(&checkpoint)?;
            let data = dataset_for(&mut cfg)?;
            check_compatible(&model, &cfg)?;
            let (mut report, records) =
                evaluate_parallel(&model, split(&data, &which)?, &cfg.decode, jobs)?;
            report.loss_curve = read_loss_curve(&checkpoint)?;
            writeln!(
                stdout,
                "{} on {} {which} utterances: TER {:.4}, RTF {:.5}, {:.1} joiner evals/utt, {:.1} label softmaxes/utt",
                report.arch.name(),
                report.utterances,
                report.ter,
                report.rtf,
                report.mean_stats.joiner_space_evals,
                report.mean_stats.label_softmax_evals
            )?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                write_json(&dir.join("metrics.json"), &report)?;
                let mut lines = String::new();
                for r in &records {
                    lines.push_str(&serde_json::to_string(r)?);
                    lines.push('\n');
                }
                fs::write(dir.join("decodes.jsonl"), lines)?;
            }
        }
        Command::Bench {
            common,
            decode,
            checkpoints,
            split: which,
            out,
        } => {
            let mut cfg = common.load()?;
            decode.apply(&mut cfg);
            let data = dataset_for(&mut cfg)?;
            let models = checkpoints
                .iter()
                .map(|p| {
                    let m = load_checkpoint(p)?;
                    check_compatible(&m, &cfg)?;
                    let name = p.parent().and_then(|d| d.file_name()).map_or_else(
                        || p.display().to_string(),
                        |n| n.to_string_lossy().into_owned(),
                    );
                    Ok((name, m))
                })
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<(String, &Model)> = models.iter().map(|(n, m)| (n.clone(), m)).collect();
            let report = bench(&refs, split(&data, &which)?, &cfg.decode)?;
            let table = report.render_table();
            write!(stdout, "{table}")?;
            if let Some(dir) = out {
                fs::create_dir_all(&dir)?;
                fs::write(dir.join("bench.json"), report.to_json()?)?;
                fs::write(dir.join("bench.txt"), table)?;
            }
        }
        Command::InspectAttention {
            common,
            checkpoint,
            utterance,
            layer,
            out,
        } => {
            let mut cfg = common.load()?;
            let model = load_checkpoint(&checkpoint)?;
            let data = dataset_for(&mut cfg)?;
            check_compatible(&model, &cfg)?;
            let utt = match &utterance {
                Some(id) => data
                    .train
                    .iter()
                    .chain(&data.dev)
                    .chain(&data.test)
                    .find(|u| &u.id == id)
                    .ok_or_else(|| Error::Config(format!("no utterance with id {id:?}")))?,
                None => data
                    .test
                    .first()
                    .ok_or_else(|| Error::Config("dataset has no test utterances".into()))?,
            };
            let report = inspect_attention(&model, utt, layer)?;
            let written = export_attention(&report, &out, &utt.id)?;
            let summary = AttentionSummary::from(&report);
            write_json(
                &out.join(format!("{}_l{layer}_summary.json", utt.id)),
                &summary,
            )?;
            writeln!(
                stdout,
                "{} layer {layer}: {} heads, mean leftmost-frame mass {:.4}, {} files in {}",
                utt.id,
                report.heads.len(),
                summary.mean_leftmost_mass,
                written.len() + 1,
                out.display()
            )?;
        }
        Command::Sweep {
            common,
            setup,
            delays,
            out,
        } => {
            let mut cfg = common.load()?;
            setup.apply(&mut cfg)?;
            if cfg.run.arch != Architecture::Chunkwise {
                return Err(Error::Config(
                    "the delay sweep applies to the chunkwise model".into(),
                ));
            }
            let data = dataset_for(&mut cfg)?;
            let report = delay_sweep(&cfg, &data, &delays)?;
            let table = report.render_table();
            write!(stdout, "{table}")?;
            if let Some(dir) = out.or_else(|| cfg.run.out.clone()) {
                fs::create_dir_all(&dir)?;
                write_json(&dir.join("sweep.json"), &report)?;
                fs::write(dir.join("sweep.txt"), table)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.class().exit_code())
        }
    }
}
