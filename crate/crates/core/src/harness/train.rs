use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::{dev_error_rate, evaluate};
use super::optim::{clip_global_norm, learning_rate, Optimizer};
use crate::alignment::{apply_delay, prepare_assignment, ChunkAssignment};
use crate::error::{Error, ErrorClass, Result};
use crate::losses::{batch_loss, LossItem, LossReport};
use crate::model::{save_checkpoint, Architecture, Model};
use crate::synthdata::{Dataset, Utterance};
use crate::tensor::Tape;

/// Training utterances with their chunk assignments, after delay and capacity handling.
#[derive(Debug, Clone)]
pub struct PreparedSet<'a> {
    pub items: Vec<(&'a Utterance, Option<ChunkAssignment>)>,
    /// Utterances left out (unrepairable, or too short for the Aligner).
    pub skipped: usize,
    /// Labels whose delayed frame was clamped to the last frame.
    pub clamped: usize,
}

/// Applies the configured delay and builds chunk assignments where the architecture needs them.
pub fn prepare_training<'a>(cfg: &RunConfig, utts: &'a [Utterance]) -> Result<PreparedSet<'a>> {
    let mut set = PreparedSet {
        items: Vec::with_capacity(utts.len()),
        skipped: 0,
        clamped: 0,
    };
    for u in utts {
        match cfg.run.arch {
            Architecture::Transducer => set.items.push((u, None)),
            Architecture::Aligner => {
                if u.alignment.total_frames() > u.tokens.len() {
                    set.items.push((u, None));
                } else {
                    set.skipped += 1;
                }
            }
            Architecture::Chunkwise => {
                let delayed = apply_delay(&u.alignment, cfg.run.delay_frames);
                set.clamped += delayed.clamped;
                match prepare_assignment(
                    &delayed.alignment.with_eos(),
                    cfg.model.chunk_len,
                    cfg.run.capacity,
                ) {
                    Ok(a) => set.items.push((u, Some(a))),
                    Err(Error::Unrepairable { .. }) => set.skipped += 1,
                    Err(e) => return Err(e),
                }
            }
        }
    }
    if set.items.is_empty() {
        return Err(Error::Config("no usable training utterances".into()));
    }
    Ok(set)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub loss: f64,
    pub label_ce: f64,
    pub eoc_bce: Option<f64>,
    pub lr: f64,
    pub grad_norm: f64,
    pub grid_entries: usize,
    pub transducer_entries: usize,
    pub elapsed_s: f64,
    pub dev_ter: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the lowest dev error rate (the final ones when there is no dev set).
    pub model: Model,
    pub log: Vec<LogEntry>,
    pub best_dev_ter: Option<f64>,
    pub best_step: usize,
    pub steps_run: usize,
    pub skipped: usize,
    pub clamped: usize,
    pub wall_seconds: f64,
}

fn diverged(step: usize, e: Error) -> Error {
    match e.class() {
        ErrorClass::Numerical => Error::Diverged {
            step,
            detail: e.to_string(),
        },
        _ => e,
    }
}

/// Trains `cfg.run.arch` on the dataset's train split, selecting on the dev split.
///
/// With `out` set, writes `config.toml`, `train_log.jsonl` and the best `model.ckpt` there.
pub fn train(cfg: &RunConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let prepared = prepare_training(cfg, &data.train)?;
    let mut model = Model::new(cfg.model.clone(), cfg.run.arch)?;
    let mut opt = Optimizer::new(
        cfg.train.optimizer,
        model.params().tensors(),
        cfg.train.beta1,
        cfg.train.beta2,
    );
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
            Some(BufWriter::new(File::create(dir.join("train_log.jsonl"))?))
        }
        None => None,
    };
    let dev: &[Utterance] = match cfg.train.eval_utterances {
        0 => &data.dev,
        n => &data.dev[..n.min(data.dev.len())],
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.run.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut log = Vec::new();
    let mut best: Option<(f64, Model, usize)> = None;
    let mut steps_run = 0;

    for step in 0..cfg.train.steps {
        let mut batch = Vec::with_capacity(cfg.train.batch_size);
        while batch.len() < cfg.train.batch_size.min(prepared.items.len()) {
            if cursor == order.len() {
                order = (0..prepared.items.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(order[cursor]);
            cursor += 1;
        }
        let items: Vec<LossItem> = batch
            .iter()
            .map(|&i| {
                let (u, a) = &prepared.items[i];
                LossItem {
                    features: &u.features,
                    labels: &u.tokens,
                    assignment: a.as_ref(),
                }
            })
            .collect();

        let mut tape = Tape::new();
        let bound = model.params().bind(&mut tape, true);
        let (loss, report): (_, LossReport) =
            batch_loss(&model, &mut tape, &bound, &items, cfg.train.reduction)
                .map_err(|e| diverged(step, e))?;
        if !report.total.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss is {}", report.total),
            });
        }
        let grads = tape.backward(loss).map_err(|e| diverged(step, e))?;
        let mut flat: Vec<Vec<f64>> = bound
            .vars()
            .iter()
            .zip(model.params().tensors())
            .map(|(&v, t)| grads.get_or_zeros(v, t.numel()))
            .collect();
        let grad_norm =
            clip_global_norm(&mut flat, cfg.train.clip_norm).map_err(|e| diverged(step, e))?;
        let lr = learning_rate(cfg.train.learning_rate, cfg.train.warmup_steps, step);
        opt.step(model.params_mut().tensors_mut(), &flat, lr);
        steps_run = step + 1;

        let last = step + 1 == cfg.train.steps;
        let eval_now = last || (cfg.train.eval_every > 0 && (step + 1) % cfg.train.eval_every == 0);
        let dev_ter = if eval_now && !dev.is_empty() {
            Some(dev_error_rate(&model, dev, &cfg.decode)?)
        } else {
            None
        };
        let entry = LogEntry {
            step,
            loss: report.total,
            label_ce: report.label_ce,
            eoc_bce: report.eoc_bce,
            lr,
            grad_norm,
            grid_entries: report.grid_entries,
            transducer_entries: report.transducer_entries,
            elapsed_s: start.elapsed().as_secs_f64(),
            dev_ter,
        };
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &entry)?;
            writeln!(f)?;
        }
        log.push(entry);

        if let Some(ter) = dev_ter {
            if best.as_ref().is_none_or(|(b, _, _)| ter < *b) {
                if let Some(dir) = out {
                    save_checkpoint(&model, dir.join("model.ckpt"))?;
                }
                best = Some((ter, model.clone(), step));
            }
            if ter <= cfg.train.target_dev_ter {
                break;
            }
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    let (best_dev_ter, model, best_step) = match best {
        Some((ter, m, s)) => (Some(ter), m, s),
        None => {
            if let Some(dir) = out {
                save_checkpoint(&model, dir.join("model.ckpt"))?;
            }
            (None, model, steps_run.saturating_sub(1))
        }
    };
    Ok(TrainOutcome {
        model,
        log,
        best_dev_ter,
        best_step,
        steps_run,
        skipped: prepared.skipped,
        clamped: prepared.clamped,
        wall_seconds: start.elapsed().as_secs_f64(),
    })
}

/// One row of a delay sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepEntry {
    pub delay_frames: usize,
    pub test_ter: f64,
    pub best_dev_ter: Option<f64>,
    pub steps_run: usize,
    pub final_loss: f64,
    pub clamped_labels: usize,
    pub skipped_utterances: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    pub arch: Architecture,
    pub chunk_len: usize,
    pub entries: Vec<SweepEntry>,
}

impl SweepReport {
    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:>6} {:>9} {:>9} {:>7} {:>10} {:>8}\n",
            "delay", "test_ter", "dev_ter", "steps", "final_loss", "clamped"
        );
        for e in &self.entries {
            s.push_str(&format!(
                "{:>6} {:>9.4} {:>9} {:>7} {:>10.4} {:>8}\n",
                e.delay_frames,
                e.test_ter,
                e.best_dev_ter.map_or("-".into(), |t| format!("{t:.4}")),
                e.steps_run,
                e.final_loss,
                e.clamped_labels
            ));
        }
        s
    }
}

/// Trains one model per delay and reports held-out error rates side by side.
pub fn delay_sweep(cfg: &RunConfig, data: &Dataset, delays: &[usize]) -> Result<SweepReport> {
    let mut entries = Vec::with_capacity(delays.len());
    for &d in delays {
        let mut c = cfg.clone();
        c.run.delay_frames = d;
        let outcome = train(&c, data, None)?;
        entries.push(sweep_entry(&c, data, &outcome)?);
    }
    Ok(SweepReport {
        schema_version: 1,
        arch: cfg.run.arch,
        chunk_len: cfg.model.chunk_len,
        entries,
    })
}

/// Summarizes a finished training run for a sweep report.
pub fn sweep_entry(cfg: &RunConfig, data: &Dataset, outcome: &TrainOutcome) -> Result<SweepEntry> {
    Ok(SweepEntry {
        delay_frames: cfg.run.delay_frames,
        test_ter: evaluate(&outcome.model, &data.test, &cfg.decode)?.0.ter,
        best_dev_ter: outcome.best_dev_ter,
        steps_run: outcome.steps_run,
        final_loss: outcome.log.last().map_or(f64::NAN, |e| e.loss),
        clamped_labels: outcome.clamped,
        skipped_utterances: outcome.skipped,
        wall_seconds: outcome.wall_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sweep_report_round_trips_exactly() {
        let entry = |d: usize, x: f64| SweepEntry {
            delay_frames: d,
            test_ter: x / 7.0,
            best_dev_ter: Some(x.sqrt()),
            steps_run: 20000,
            final_loss: x.ln_1p() * 1e-3,
            clamped_labels: d,
            skipped_utterances: 0,
            wall_seconds: x * 317.123456789,
        };
        let report = SweepReport {
            schema_version: 1,
            arch: Architecture::Chunkwise,
            chunk_len: 8,
            entries: (0..50).map(|i| entry(i, 0.1 + i as f64 / 3.0)).collect(),
        };
        let back: SweepReport =
            serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
        assert_eq!(back, report);
        assert_eq!(report.render_table().lines().count(), 51);
    }
}
