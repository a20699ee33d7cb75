use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::alignment::{assign_unchecked, repair_spill};
use crate::decoding::{decode_encoded, DecodeOptions, DecodeStats};
use crate::error::{Error, Result};
use crate::losses::{chunkwise_grid_entries, transducer_grid_entries};
use crate::model::{Architecture, Model};
use crate::synthdata::{token_error_rate, Utterance};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Raw feature frames are taken to be 10 ms apart when converting to audio time.
pub const FRAME_SHIFT_SECONDS: f64 = 0.01;

/// Per-utterance decode output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeRecord {
    pub id: String,
    pub reference: Vec<usize>,
    pub hypothesis: Vec<usize>,
    pub score: f64,
    pub finished: bool,
    pub stats: DecodeStats,
    pub transitions: Vec<usize>,
    pub encode_seconds: f64,
    pub search_seconds: f64,
}

/// [`DecodeStats`] averaged over utterances.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanStats {
    pub joiner_space_evals: f64,
    pub eoc_evals: f64,
    pub label_softmax_evals: f64,
    pub predictor_steps: f64,
    pub frames_visited: f64,
    pub chunks_entered: f64,
}

impl MeanStats {
    pub fn of(stats: &[DecodeStats]) -> Self {
        let n = stats.len().max(1) as f64;
        let mut total = DecodeStats::default();
        for &s in stats {
            total += s;
        }
        Self {
            joiner_space_evals: total.joiner_space_evals as f64 / n,
            eoc_evals: total.eoc_evals as f64 / n,
            label_softmax_evals: total.label_softmax_evals as f64 / n,
            predictor_steps: total.predictor_steps as f64 / n,
            frames_visited: total.frames_visited as f64 / n,
            chunks_entered: total.chunks_entered as f64 / n,
        }
    }
}

/// Corpus-level evaluation summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub arch: Architecture,
    pub utterances: usize,
    pub beam: usize,
    pub tau: f64,
    pub ter: f64,
    pub finished_fraction: f64,
    pub mean_stats: MeanStats,
    /// Training-grid entries this architecture needs per utterance, averaged.
    pub mean_grid_entries: f64,
    /// Transducer training-grid entries for the same utterances, averaged.
    pub mean_transducer_entries: f64,
    pub encode_seconds: f64,
    pub search_seconds: f64,
    pub audio_seconds: f64,
    /// `(encode + search) / audio`.
    pub rtf: f64,
    /// `(step, loss)` pairs, when a training log is attached.
    #[serde(default)]
    pub loss_curve: Vec<(usize, f64)>,
}

impl MetricsReport {
    pub fn mean_search_seconds(&self) -> f64 {
        self.search_seconds / self.utterances.max(1) as f64
    }
}

/// Training-grid sizes for one utterance: `(this architecture, transducer)`.
fn grid_entries(model: &Model, u: &Utterance) -> (usize, usize) {
    let v = model.vocab_size();
    let t = u.alignment.total_frames();
    let labels = u.tokens.len();
    let transducer = transducer_grid_entries(t, labels, v);
    let own = match model.arch() {
        Architecture::Transducer => transducer,
        Architecture::Aligner => (labels + 1) * v,
        Architecture::Chunkwise => {
            let chunks = t.div_ceil(model.config().chunk_len);
            let assigned = assign_unchecked(&u.alignment.with_eos(), model.config().chunk_len)
                .and_then(|c| repair_spill(&c))
                .map_or(chunks, |c| c.num_chunks());
            chunkwise_grid_entries(labels + 1, v, assigned)
        }
    };
    (own, transducer)
}

struct Decoded {
    record: DecodeRecord,
    own_entries: usize,
    transducer_entries: usize,
    audio_seconds: f64,
}

fn decode_one(model: &Model, u: &Utterance, opts: &DecodeOptions) -> Result<Decoded> {
    let t0 = Instant::now();
    let enc = model.encode(&u.features)?;
    let t1 = Instant::now();
    let r = decode_encoded(model, &enc.frames, opts)?;
    let t2 = Instant::now();
    let (own_entries, transducer_entries) = grid_entries(model, u);
    Ok(Decoded {
        record: DecodeRecord {
            id: u.id.clone(),
            reference: u.tokens.clone(),
            hypothesis: r.tokens,
            score: r.score,
            finished: r.finished,
            stats: r.stats,
            transitions: r.transitions,
            encode_seconds: (t1 - t0).as_secs_f64(),
            search_seconds: (t2 - t1).as_secs_f64(),
        },
        own_entries,
        transducer_entries,
        audio_seconds: u.features.shape()[0] as f64 * FRAME_SHIFT_SECONDS,
    })
}

/// Decodes every utterance and scores the hypotheses.
pub fn evaluate(
    model: &Model,
    utts: &[Utterance],
    opts: &DecodeOptions,
) -> Result<(MetricsReport, Vec<DecodeRecord>)> {
    evaluate_parallel(model, utts, opts, 1)
}

/// [`evaluate`] spread over `jobs` threads. Records keep the input order, so the report
/// only differs in its timings.
pub fn evaluate_parallel(
    model: &Model,
    utts: &[Utterance],
    opts: &DecodeOptions,
    jobs: usize,
) -> Result<(MetricsReport, Vec<DecodeRecord>)> {
    if utts.is_empty() {
        return Err(Error::Config("no utterances to evaluate".into()));
    }
    let decoded: Vec<Decoded> = if jobs <= 1 {
        utts.iter()
            .map(|u| decode_one(model, u, opts))
            .collect::<Result<_>>()?
    } else {
        let per = utts.len().div_ceil(jobs);
        std::thread::scope(|s| {
            let handles: Vec<_> = utts
                .chunks(per)
                .map(|part| {
                    s.spawn(move || {
                        part.iter()
                            .map(|u| decode_one(model, u, opts))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut all = Vec::with_capacity(utts.len());
            for h in handles {
                all.extend(h.join().expect("decode worker panicked")?);
            }
            Ok::<_, Error>(all)
        })?
    };
    let own: usize = decoded.iter().map(|d| d.own_entries).sum();
    let transducer: usize = decoded.iter().map(|d| d.transducer_entries).sum();
    let audio: f64 = decoded.iter().map(|d| d.audio_seconds).sum();
    let records: Vec<DecodeRecord> = decoded.into_iter().map(|d| d.record).collect();
    let refs: Vec<Vec<usize>> = records.iter().map(|r| r.reference.clone()).collect();
    let hyps: Vec<Vec<usize>> = records.iter().map(|r| r.hypothesis.clone()).collect();
    let n = records.len() as f64;
    let encode_seconds: f64 = records.iter().map(|r| r.encode_seconds).sum();
    let search_seconds: f64 = records.iter().map(|r| r.search_seconds).sum();
    let stats: Vec<DecodeStats> = records.iter().map(|r| r.stats).collect();
    let report = MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        arch: model.arch(),
        utterances: records.len(),
        beam: opts.beam,
        tau: opts.tau,
        ter: token_error_rate(&refs, &hyps)?,
        finished_fraction: records.iter().filter(|r| r.finished).count() as f64 / n,
        mean_stats: MeanStats::of(&stats),
        mean_grid_entries: own as f64 / n,
        mean_transducer_entries: transducer as f64 / n,
        encode_seconds,
        search_seconds,
        audio_seconds: audio,
        rtf: (encode_seconds + search_seconds) / audio,
        loss_curve: Vec::new(),
    };
    Ok((report, records))
}

/// Greedy-decoding token error rate, used for model selection.
pub fn dev_error_rate(model: &Model, utts: &[Utterance], opts: &DecodeOptions) -> Result<f64> {
    let greedy = DecodeOptions { beam: 1, ..*opts };
    Ok(evaluate(model, utts, &greedy)?.0.ter)
}

/// Ratio of transducer to chunkwise training-grid entries.
pub fn grid_ratio(frames: usize, labels: usize, vocab: usize, chunk_len: usize) -> f64 {
    transducer_grid_entries(frames, labels, vocab) as f64
        / chunkwise_grid_entries(labels, vocab, frames.div_ceil(chunk_len)) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchEntry {
    pub name: String,
    pub metrics: MetricsReport,
}

/// Pairwise comparison against the first entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRatio {
    pub baseline: String,
    pub other: String,
    /// Baseline mean search time over the other's.
    pub search_time_ratio: f64,
    pub joiner_space_ratio: f64,
    pub grid_entry_ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: u32,
    pub utterances: usize,
    pub entries: Vec<BenchEntry>,
    pub ratios: Vec<BenchRatio>,
}

impl BenchReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported report schema {}",
                r.schema_version
            )));
        }
        Ok(r)
    }

    pub fn render_table(&self) -> String {
        let mut s = format!(
            "{:<16} {:<11} {:>7} {:>12} {:>12} {:>10} {:>12} {:>8}\n",
            "model", "arch", "ter", "joiner/utt", "softmax/utt", "search_ms", "grid/utt", "rtf"
        );
        for e in &self.entries {
            let m = &e.metrics;
            s.push_str(&format!(
                "{:<16} {:<11} {:>7.4} {:>12.1} {:>12.1} {:>10.3} {:>12.0} {:>8.5}\n",
                e.name,
                m.arch.name(),
                m.ter,
                m.mean_stats.joiner_space_evals,
                m.mean_stats.label_softmax_evals,
                m.mean_search_seconds() * 1e3,
                m.mean_grid_entries,
                m.rtf
            ));
        }
        for r in &self.ratios {
            s.push_str(&format!(
                "{} / {}: search time x{:.2}, joiner evals x{:.2}, grid entries x{:.2}\n",
                r.baseline, r.other, r.search_time_ratio, r.joiner_space_ratio, r.grid_entry_ratio
            ));
        }
        s
    }
}

/// Evaluates several models on the same utterances and compares each with the first.
pub fn bench(
    models: &[(String, &Model)],
    utts: &[Utterance],
    opts: &DecodeOptions,
) -> Result<BenchReport> {
    if models.len() < 2 {
        return Err(Error::Config("bench needs at least two models".into()));
    }
    let mut entries = Vec::with_capacity(models.len());
    for (name, model) in models {
        entries.push(BenchEntry {
            name: name.clone(),
            metrics: evaluate(model, utts, opts)?.0,
        });
    }
    let base = &entries[0];
    let ratios = entries[1..]
        .iter()
        .map(|e| BenchRatio {
            baseline: base.name.clone(),
            other: e.name.clone(),
            search_time_ratio: base.metrics.search_seconds / e.metrics.search_seconds,
            joiner_space_ratio: base.metrics.mean_stats.joiner_space_evals
                / e.metrics.mean_stats.joiner_space_evals,
            grid_entry_ratio: base.metrics.mean_grid_entries / e.metrics.mean_grid_entries,
        })
        .collect();
    Ok(BenchReport {
        schema_version: REPORT_SCHEMA_VERSION,
        utterances: utts.len(),
        entries,
        ratios,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::synthdata::{generate_dataset, SynthTaskConfig};

    #[test]
    fn large_vocabulary_grid_ratio() {
        assert_eq!(grid_ratio(100, 20, 1000, 10), 2_002_000.0 / 20_030.0);
    }

    #[test]
    fn report_fields_are_consistent() {
        let data = generate_dataset(&SynthTaskConfig::default(), 20).unwrap();
        let model = Model::new(ModelConfig::default(), Architecture::Chunkwise).unwrap();
        let opts = DecodeOptions {
            beam: 2,
            ..DecodeOptions::default()
        };
        let (r, records) = evaluate(&model, &data.test, &opts).unwrap();
        assert_eq!(r.utterances, records.len());
        assert_eq!(r.schema_version, REPORT_SCHEMA_VERSION);
        assert!(r.ter >= 0.0 && (0.0..=1.0).contains(&r.finished_fraction));
        let frames: usize = data.test.iter().map(|u| u.features.shape()[0]).sum();
        assert!((r.audio_seconds - frames as f64 * FRAME_SHIFT_SECONDS).abs() < 1e-9);
        assert!(r.mean_grid_entries < r.mean_transducer_entries);
        let (p, precs) = evaluate_parallel(&model, &data.test, &opts, 2).unwrap();
        assert_eq!(p.ter, r.ter);
        let ids = |v: &[DecodeRecord]| {
            v.iter()
                .map(|d| (d.id.clone(), d.hypothesis.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&precs), ids(&records));
        assert!(evaluate(&model, &[], &opts).is_err());
        assert!(bench(&[("a".into(), &model)], &data.test, &opts).is_err());
    }
}
