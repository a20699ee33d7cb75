//! Synthetic token-sequence corpus with exact alignments, and token error rate.
//!
//! Each token is rendered as its own fixed random unit vector repeated for a sampled number of
//! raw frames, plus Gaussian noise. The first frame of every token is scaled by `onset_gain`
//! so repeated tokens stay separable. Utterances end in silence (zero vectors plus noise),
//! padded so the raw length is a multiple of the frame reduction.
//!
//! Dataset files are line-delimited JSON: a header line
//! `{"format": "chunkalign-dataset", "version": 1, "config": {...}}` followed by one record per
//! utterance `{"id", "split", "tokens", "durations", "frames", "total_frames", "shape",
//! "features"}`, where `frames` are 1-based encoder end frames and `features` is the base64 of
//! the row-major little-endian `f64` feature matrix.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::{assign_unchecked, repair_spill, ForcedAlignment};
use crate::error::{Error, Result};
use crate::model::FIRST_TOKEN;
use crate::tensor::Tensor;

pub const DATASET_FORMAT: &str = "chunkalign-dataset";
pub const DATASET_VERSION: u32 = 1;

/// Generator settings. Token ids run from 2 to `vocab_size + 1`; 0 and 1 are `<sos>`/`<eos>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthTaskConfig {
    /// Number of distinct synthetic tokens.
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Raw frames per token, inclusive range.
    pub min_duration: usize,
    pub max_duration: usize,
    pub noise_std: f64,
    /// Tokens per utterance, inclusive range.
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Raw frames per encoder frame.
    pub frame_reduction: usize,
    /// Raw silence frames after the last token, before padding to a multiple of the reduction.
    pub trailing_silence: usize,
    pub onset_gain: f64,
    /// Utterances whose labels plus `<eos>` cannot fit chunks of this length are redrawn;
    /// 0 disables the check.
    pub chunk_len: usize,
    pub seed: u64,
}

impl Default for SynthTaskConfig {
    fn default() -> Self {
        Self {
            vocab_size: 16,
            feature_dim: 8,
            min_duration: 6,
            max_duration: 10,
            noise_std: 0.15,
            min_tokens: 5,
            max_tokens: 20,
            frame_reduction: 4,
            trailing_silence: 8,
            onset_gain: 2.0,
            chunk_len: 8,
            seed: 1,
        }
    }
}

impl SynthTaskConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.vocab_size == 0 || self.feature_dim == 0 || self.frame_reduction == 0 {
            return bad("vocab_size, feature_dim and frame_reduction must be positive");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return bad("duration range must satisfy 1 <= min_duration <= max_duration");
        }
        if self.min_tokens > self.max_tokens {
            return bad("token range must satisfy min_tokens <= max_tokens");
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return bad("noise_std must be finite and nonnegative");
        }
        if self.chunk_len == 1 {
            return bad("chunk_len must be 0 or at least 2");
        }
        Ok(())
    }

    /// Model vocabulary size needed for these tokens (adds `<sos>` and `<eos>`).
    pub fn model_vocab_size(&self) -> usize {
        self.vocab_size + FIRST_TOKEN
    }

    /// Per-token prototype rows, indexed by token id; rows for `<sos>`/`<eos>` are zero.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::from_seed(seed_bytes(self.seed, u64::MAX, 0));
        let mut out = vec![vec![0.0; self.feature_dim]; FIRST_TOKEN];
        for _ in 0..self.vocab_size {
            let v: Vec<f64> = (0..self.feature_dim)
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            out.push(v.into_iter().map(|x| x / norm).collect());
        }
        out
    }
}

fn seed_bytes(seed: u64, stream: u64, index: u64) -> [u8; 32] {
    let mut b = [0u8; 32];
    b[..8].copy_from_slice(&seed.to_le_bytes());
    b[8..16].copy_from_slice(&stream.to_le_bytes());
    b[16..24].copy_from_slice(&index.to_le_bytes());
    b
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn stream(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Test => 2,
        }
    }
}

/// One synthetic utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// `[T_raw × D_in]`.
    pub features: Tensor,
    pub tokens: Vec<usize>,
    /// Raw frames per token.
    pub durations: Vec<usize>,
    /// End frame of each token in encoder frames.
    pub alignment: ForcedAlignment,
}

/// Draws one utterance. Redraws (up to a bound) when the labels do not fit the chunk grid.
pub fn generate_utterance(
    cfg: &SynthTaskConfig,
    prototypes: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Result<Utterance> {
    cfg.validate()?;
    for _ in 0..1000 {
        let u = draw(cfg, prototypes, rng)?;
        if fits(cfg, &u) {
            return Ok(u);
        }
    }
    Err(Error::Config(
        "could not draw an utterance that fits the chunk grid; lengthen chunk_len or durations"
            .into(),
    ))
}

fn fits(cfg: &SynthTaskConfig, u: &Utterance) -> bool {
    cfg.chunk_len == 0
        || assign_unchecked(&u.alignment.with_eos(), cfg.chunk_len)
            .and_then(|c| repair_spill(&c))
            .is_ok()
}

fn draw(cfg: &SynthTaskConfig, prototypes: &[Vec<f64>], rng: &mut impl Rng) -> Result<Utterance> {
    let r = cfg.frame_reduction;
    let d = cfg.feature_dim;
    let count = rng.random_range(cfg.min_tokens..=cfg.max_tokens);
    let tokens: Vec<usize> = (0..count)
        .map(|_| FIRST_TOKEN + rng.random_range(0..cfg.vocab_size))
        .collect();
    let durations: Vec<usize> = (0..count)
        .map(|_| rng.random_range(cfg.min_duration..=cfg.max_duration))
        .collect();
    let speech: usize = durations.iter().sum();
    let raw = (speech + cfg.trailing_silence).max(1).next_multiple_of(r);

    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut data = Vec::with_capacity(raw * d);
    let mut ends = Vec::with_capacity(count);
    let mut end = 0;
    for (&tok, &dur) in tokens.iter().zip(&durations) {
        for i in 0..dur {
            let gain = if i == 0 { cfg.onset_gain } else { 1.0 };
            data.extend(prototypes[tok].iter().map(|p| gain * p));
        }
        end += dur;
        ends.push(end.div_ceil(r));
    }
    data.resize(raw * d, 0.0);
    if cfg.noise_std > 0.0 {
        for x in &mut data {
            *x += noise.sample(rng);
        }
    }
    Ok(Utterance {
        id: String::new(),
        features: Tensor::new(vec![raw, d], data)?,
        tokens,
        durations,
        alignment: ForcedAlignment::new(ends, raw / r)?,
    })
}

/// Train, dev and test utterances plus the config that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthTaskConfig,
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Sizes of an 80/10/10 split; the test split takes the remainder.
pub fn split_sizes(count: usize) -> (usize, usize, usize) {
    let train = count * 8 / 10;
    let dev = count / 10;
    (train, dev, count - train - dev)
}

/// Generates `count` utterances split 80/10/10. Each utterance draws from its own seed
/// stream, so the result depends only on the config.
pub fn generate_dataset(cfg: &SynthTaskConfig, count: usize) -> Result<Dataset> {
    let (tr, dv, te) = split_sizes(count);
    generate_splits(cfg, tr, dv, te)
}

/// Generates explicitly sized splits.
pub fn generate_splits(
    cfg: &SynthTaskConfig,
    train: usize,
    dev: usize,
    test: usize,
) -> Result<Dataset> {
    cfg.validate()?;
    let protos = cfg.prototypes();
    let make = |split: Split, n: usize| -> Result<Vec<Utterance>> {
        (0..n)
            .map(|i| {
                let mut rng = ChaCha8Rng::from_seed(seed_bytes(cfg.seed, split.stream(), i as u64));
                let mut u = generate_utterance(cfg, &protos, &mut rng)?;
                u.id = format!(
                    "{}-{i:05}",
                    serde_json::to_value(split)?.as_str().unwrap_or("?")
                );
                Ok(u)
            })
            .collect()
    };
    Ok(Dataset {
        config: cfg.clone(),
        train: make(Split::Train, train)?,
        dev: make(Split::Dev, dev)?,
        test: make(Split::Test, test)?,
    })
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: SynthTaskConfig,
}

#[derive(Serialize, Deserialize)]
struct Record {
    id: String,
    split: Split,
    tokens: Vec<usize>,
    durations: Vec<usize>,
    frames: Vec<usize>,
    total_frames: usize,
    shape: [usize; 2],
    features: String,
}

impl Dataset {
    fn splits(&self) -> [(Split, &Vec<Utterance>); 3] {
        [
            (Split::Train, &self.train),
            (Split::Dev, &self.dev),
            (Split::Test, &self.test),
        ]
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        let header = Header {
            format: DATASET_FORMAT.into(),
            version: DATASET_VERSION,
            config: self.config.clone(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for (split, utts) in self.splits() {
            for u in utts {
                let bytes: Vec<u8> = u
                    .features
                    .data()
                    .iter()
                    .flat_map(|x| x.to_le_bytes())
                    .collect();
                let (rows, cols) = u.features.dims2().expect("features are a matrix");
                let rec = Record {
                    id: u.id.clone(),
                    split,
                    tokens: u.tokens.clone(),
                    durations: u.durations.clone(),
                    frames: u.alignment.frames().to_vec(),
                    total_frames: u.alignment.total_frames(),
                    shape: [rows, cols],
                    features: BASE64.encode(bytes),
                };
                serde_json::to_writer(&mut w, &rec)?;
                writeln!(w)?;
            }
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: Header = serde_json::from_str(&first)?;
        if header.format != DATASET_FORMAT || header.version != DATASET_VERSION {
            return Err(Error::Format(format!(
                "unsupported dataset format {} v{}",
                header.format, header.version
            )));
        }
        let mut ds = Dataset {
            config: header.config,
            train: Vec::new(),
            dev: Vec::new(),
            test: Vec::new(),
        };
        for (n, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line)?;
            let bytes = BASE64
                .decode(rec.features.as_bytes())
                .map_err(|e| Error::Format(format!("record {}: {e}", n + 1)))?;
            if bytes.len() != rec.shape[0] * rec.shape[1] * 8 {
                return Err(Error::Format(format!(
                    "record {}: payload does not match shape",
                    n + 1
                )));
            }
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            if rec.tokens.len() != rec.frames.len() || rec.tokens.len() != rec.durations.len() {
                return Err(Error::Format(format!("record {}: length mismatch", n + 1)));
            }
            let utt = Utterance {
                id: rec.id,
                features: Tensor::new(rec.shape.to_vec(), data)?,
                tokens: rec.tokens,
                durations: rec.durations,
                alignment: ForcedAlignment::new(rec.frames, rec.total_frames)?,
            };
            match rec.split {
                Split::Train => ds.train.push(utt),
                Split::Dev => ds.dev.push(utt),
                Split::Test => ds.test.push(utt),
            }
        }
        Ok(ds)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::new();
        self.write(&mut buf)?;
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read(BufReader::new(fs::File::open(path)?))
    }
}

/// Levenshtein distance between two token sequences.
pub fn edit_distance(reference: &[usize], hypothesis: &[usize]) -> usize {
    strsim::generic_levenshtein(&reference.to_vec(), &hypothesis.to_vec())
}

/// Total edit distance over total reference length.
pub fn token_error_rate(refs: &[Vec<usize>], hyps: &[Vec<usize>]) -> Result<f64> {
    if refs.len() != hyps.len() {
        return Err(Error::Config(format!(
            "{} references but {} hypotheses",
            refs.len(),
            hyps.len()
        )));
    }
    let words: usize = refs.iter().map(Vec::len).sum();
    if words == 0 {
        return Err(Error::Config("reference corpus has no tokens".into()));
    }
    let edits: usize = refs
        .iter()
        .zip(hyps)
        .map(|(r, h)| edit_distance(r, h))
        .sum();
    Ok(edits as f64 / words as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SynthTaskConfig {
        SynthTaskConfig {
            min_tokens: 2,
            max_tokens: 6,
            ..SynthTaskConfig::default()
        }
    }

    #[test]
    fn degenerate_render_is_exact() {
        let cfg = SynthTaskConfig {
            noise_std: 0.0,
            min_duration: 1,
            max_duration: 1,
            frame_reduction: 1,
            trailing_silence: 0,
            onset_gain: 1.0,
            chunk_len: 0,
            min_tokens: 4,
            max_tokens: 4,
            ..SynthTaskConfig::default()
        };
        let protos = cfg.prototypes();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let u = generate_utterance(&cfg, &protos, &mut rng).unwrap();
        assert_eq!(u.alignment.frames(), &[1, 2, 3, 4]);
        for (i, &tok) in u.tokens.iter().enumerate() {
            assert_eq!(u.features.row(i), protos[tok].as_slice());
        }
    }

    #[test]
    fn prototypes_are_unit_vectors() {
        let protos = SynthTaskConfig::default().prototypes();
        assert_eq!(protos.len(), 18);
        for p in &protos[FIRST_TOKEN..] {
            assert!((p.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn generation_properties() {
        let cfg = tiny();
        let ds = generate_dataset(&cfg, 40).unwrap();
        assert_eq!((ds.train.len(), ds.dev.len(), ds.test.len()), (32, 4, 4));
        for u in ds.train.iter().chain(&ds.dev).chain(&ds.test) {
            let raw = u.features.shape()[0];
            let speech: usize = u.durations.iter().sum();
            let pad = raw - speech - cfg.trailing_silence;
            assert!(pad < cfg.frame_reduction);
            assert_eq!(raw % cfg.frame_reduction, 0);
            assert_eq!(u.alignment.total_frames(), raw / cfg.frame_reduction);
            assert_eq!(u.alignment.num_labels(), u.tokens.len());
            assert!(ForcedAlignment::new(
                u.alignment.frames().to_vec(),
                u.alignment.total_frames()
            )
            .is_ok());
            let mut end = 0;
            for (&d, &f) in u.durations.iter().zip(u.alignment.frames()) {
                end += d;
                assert_eq!(f, end.div_ceil(cfg.frame_reduction));
            }
            assert!(u
                .tokens
                .iter()
                .all(|&t| (FIRST_TOKEN..cfg.model_vocab_size()).contains(&t)));
        }
        assert_eq!(generate_dataset(&cfg, 40).unwrap(), ds);
        assert_ne!(ds.train[0].features, ds.dev[0].features);
    }

    #[test]
    fn split_sizes_example() {
        assert_eq!(split_sizes(100), (80, 10, 10));
    }

    #[test]
    fn serialization_round_trip() {
        let ds = generate_dataset(&tiny(), 10).unwrap();
        let mut buf = Vec::new();
        ds.write(&mut buf).unwrap();
        let back = Dataset::read(buf.as_slice()).unwrap();
        assert_eq!(back, ds);
        let text = String::from_utf8(buf).unwrap();
        assert!(text.lines().next().unwrap().contains(DATASET_FORMAT));
        assert!(
            Dataset::read("{\"format\":\"x\",\"version\":1,\"config\":{}}\n".as_bytes()).is_err()
        );
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthTaskConfig {
                min_duration: 0,
                ..tiny()
            },
            SynthTaskConfig {
                min_duration: 5,
                max_duration: 4,
                ..tiny()
            },
            SynthTaskConfig {
                min_tokens: 7,
                max_tokens: 6,
                ..tiny()
            },
            SynthTaskConfig {
                noise_std: -1.0,
                ..tiny()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn error_rate_examples() {
        let a = vec![vec![2, 3, 4], vec![5]];
        assert_eq!(token_error_rate(&a, &a).unwrap(), 0.0);
        let r = token_error_rate(&[vec![2, 3, 4]], &[vec![2, 4]]).unwrap();
        assert!((r - 1.0 / 3.0).abs() < 1e-15);
        assert!(token_error_rate(&[vec![]], &[vec![2]]).is_err());
        assert!(token_error_rate(&a, &a[..1]).is_err());
    }
}
