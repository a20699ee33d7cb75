//! Chunkwise beam search and greedy decoding, plus transducer and Aligner baselines.
//!
//! All scores are natural-log probabilities. Every greedy decoder returns exactly what its beam
//! search returns with a beam of one; it merely stops as soon as no later finished hypothesis
//! could outrank the best one found so far.

use std::cmp::Ordering;
use std::ops::{AddAssign, Range};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Architecture, JoinerWeights, Model, PredictorState, PredictorWeights, EOS, SOS,
};
use crate::tensor::Tensor;

/// Operation counts of one decode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeStats {
    pub joiner_space_evals: usize,
    pub eoc_evals: usize,
    pub label_softmax_evals: usize,
    pub predictor_steps: usize,
    pub frames_visited: usize,
    pub chunks_entered: usize,
}

impl AddAssign for DecodeStats {
    fn add_assign(&mut self, o: Self) {
        self.joiner_space_evals += o.joiner_space_evals;
        self.eoc_evals += o.eoc_evals;
        self.label_softmax_evals += o.label_softmax_evals;
        self.predictor_steps += o.predictor_steps;
        self.frames_visited += o.frames_visited;
        self.chunks_entered += o.chunks_entered;
    }
}

/// Joiner and predictor evaluations a decoder needs. `Ctx` is the predictor output after
/// consuming a hypothesis' tokens.
pub trait Scorer {
    type Ctx;
    type Space;

    fn vocab_size(&self) -> usize;
    /// Context after `<sos>`.
    fn start(&self) -> Result<Self::Ctx>;
    fn advance(&self, ctx: &Self::Ctx, token: usize) -> Result<Self::Ctx>;
    /// Joiner space for 0-based encoder frame `frame`.
    fn space(&self, frame: usize, ctx: &Self::Ctx) -> Result<Self::Space>;
    /// Gate probability: end-of-chunk for the chunkwise model, blank for the transducer.
    fn gate(&self, space: &Self::Space) -> Result<f64>;
    fn labels(&self, space: &Self::Space) -> Result<Vec<f64>>;
}

/// Predictor-side context of [`ModelScorer`].
#[derive(Debug, Clone)]
pub struct ModelCtx {
    pred_proj: Vec<f64>,
    state: PredictorState,
}

/// [`Scorer`] backed by a model and a precomputed encoder output.
#[derive(Debug, Clone)]
pub struct ModelScorer {
    joiner: JoinerWeights,
    predictor: PredictorWeights,
    enc_proj: Vec<Vec<f64>>,
    vocab: usize,
}

impl ModelScorer {
    pub fn new(model: &Model, enc: &Tensor) -> Result<Self> {
        let joiner = model.joiner_weights();
        let (frames, _) = enc
            .dims2()
            .ok_or_else(|| Error::shape("decode", "encoder output must be a matrix"))?;
        let enc_proj = (0..frames)
            .map(|t| joiner.project_enc(enc.row(t)))
            .collect::<Result<_>>()?;
        Ok(Self {
            joiner,
            predictor: model.predictor_weights(),
            enc_proj,
            vocab: model.vocab_size(),
        })
    }

    pub fn frames(&self) -> usize {
        self.enc_proj.len()
    }
}

impl Scorer for ModelScorer {
    type Ctx = ModelCtx;
    type Space = Vec<f64>;

    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn start(&self) -> Result<ModelCtx> {
        let zero = ModelCtx {
            pred_proj: Vec::new(),
            state: PredictorState::zeros(self.predictor.dim()),
        };
        self.advance(&zero, SOS)
    }

    fn advance(&self, ctx: &ModelCtx, token: usize) -> Result<ModelCtx> {
        let (h, state) = self.predictor.step(token, &ctx.state)?;
        Ok(ModelCtx {
            pred_proj: self.joiner.project_pred(&h)?,
            state,
        })
    }

    fn space(&self, frame: usize, ctx: &ModelCtx) -> Result<Vec<f64>> {
        let enc = self
            .enc_proj
            .get(frame)
            .ok_or_else(|| Error::Decode(format!("frame {frame} out of range")))?;
        Ok(self.joiner.space(enc, &ctx.pred_proj))
    }

    fn gate(&self, space: &Vec<f64>) -> Result<f64> {
        self.joiner
            .gate(space)
            .ok_or_else(|| Error::Config("model has no gate output".into()))
    }

    fn labels(&self, space: &Vec<f64>) -> Result<Vec<f64>> {
        Ok(self.joiner.label_dist(space))
    }
}

/// Anything [`prune_hyps`] can rank.
pub trait Ranked {
    fn score(&self) -> f64;
    fn tokens(&self) -> &[usize];
}

/// Ranking order: higher score first, then shorter token sequence, then lexicographic tokens.
pub fn rank_order<H: Ranked>(a: &H, b: &H) -> Ordering {
    b.score()
        .total_cmp(&a.score())
        .then_with(|| a.tokens().len().cmp(&b.tokens().len()))
        .then_with(|| a.tokens().cmp(b.tokens()))
}

/// Keeps the `beam` best hypotheses, sorted by [`rank_order`].
pub fn prune_hyps<H: Ranked>(mut set: Vec<H>, beam: usize) -> Vec<H> {
    set.sort_by(rank_order);
    set.truncate(beam);
    set
}

/// 0-based frame range of chunk `n` (1-based): `(n-1)·L_c .. min(n·L_c, T)`.
pub fn chunk_range(frames: usize, chunk_len: usize, n: usize) -> Result<Range<usize>> {
    if chunk_len == 0 {
        return Err(Error::Config("chunk length must be positive".into()));
    }
    let chunks = frames.div_ceil(chunk_len);
    if n == 0 || n > chunks {
        return Err(Error::Decode(format!("chunk {n} outside 1..={chunks}")));
    }
    Ok((n - 1) * chunk_len..(n * chunk_len).min(frames))
}

/// Rows of chunk `n` (1-based) of an encoder output.
pub fn chunk_generator(h_enc: &Tensor, chunk_len: usize, n: usize) -> Result<Tensor> {
    let (frames, dim) = h_enc
        .dims2()
        .ok_or_else(|| Error::shape("chunk_generator", "encoder output must be a matrix"))?;
    let r = chunk_range(frames, chunk_len, n)?;
    Tensor::new(
        vec![r.len(), dim],
        h_enc.data()[r.start * dim..r.end * dim].to_vec(),
    )
}

/// A finished (or forced-final) hypothesis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Finished {
    /// Labels without `<sos>` or `<eos>`.
    pub tokens: Vec<usize>,
    pub score: f64,
}

/// Outcome of one decode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Best hypothesis' labels, without `<sos>` or `<eos>`.
    pub tokens: Vec<usize>,
    pub score: f64,
    /// False when no hypothesis produced `<eos>` and the best unfinished one was returned.
    pub finished: bool,
    /// 1-based frames at which the returned hypothesis took an end-of-chunk transition.
    pub transitions: Vec<usize>,
    /// Finished hypotheses in rank order (empty for greedy decoders).
    pub nbest: Vec<Finished>,
    pub stats: DecodeStats,
}

struct Hyp<C> {
    /// Starts with `<sos>`; ends with `<eos>` only in the finished set.
    tokens: Vec<usize>,
    score: f64,
    /// Context before the last token; `None` only for the root.
    parent: Option<Rc<C>>,
    ctx: Option<Rc<C>>,
    transitions: Vec<usize>,
}

impl<C> Ranked for Hyp<C> {
    fn score(&self) -> f64 {
        self.score
    }

    fn tokens(&self) -> &[usize] {
        &self.tokens
    }
}

impl<C> Hyp<C> {
    fn root<S: Scorer<Ctx = C>>(scorer: &S, stats: &mut DecodeStats) -> Result<Self> {
        stats.predictor_steps += 1;
        Ok(Self {
            tokens: vec![SOS],
            score: 0.0,
            parent: None,
            ctx: Some(Rc::new(scorer.start()?)),
            transitions: Vec::new(),
        })
    }

    /// Predictor output for this hypothesis, computed on first use and kept across chunks.
    fn ctx<S: Scorer<Ctx = C>>(&mut self, scorer: &S, stats: &mut DecodeStats) -> Result<Rc<C>> {
        if self.ctx.is_none() {
            let parent = self
                .parent
                .as_ref()
                .expect("non-root hypotheses have a parent");
            let last = *self.tokens.last().expect("tokens start with <sos>");
            stats.predictor_steps += 1;
            self.ctx = Some(Rc::new(scorer.advance(parent, last)?));
        }
        Ok(self.ctx.clone().expect("just set"))
    }

    fn child(&self, ctx: &Rc<C>, token: usize, score: f64) -> Self {
        let mut tokens = self.tokens.clone();
        tokens.push(token);
        Self {
            tokens,
            score,
            parent: Some(ctx.clone()),
            ctx: None,
            transitions: self.transitions.clone(),
        }
    }

    fn labels(&self) -> Vec<usize> {
        self.tokens
            .iter()
            .copied()
            .filter(|&t| t != SOS && t != EOS)
            .collect()
    }
}

fn finish<C>(
    mut finals: Vec<Hyp<C>>,
    fallback: impl FnOnce() -> Option<Hyp<C>>,
    stats: DecodeStats,
) -> DecodeResult {
    finals.sort_by(rank_order);
    let nbest = finals
        .iter()
        .map(|h| Finished {
            tokens: h.labels(),
            score: h.score,
        })
        .collect();
    let (best, finished) = match finals.into_iter().next() {
        Some(h) => (Some(h), true),
        None => (fallback(), false),
    };
    match best {
        Some(h) => DecodeResult {
            tokens: h.labels(),
            score: h.score,
            finished,
            transitions: h.transitions,
            nbest,
            stats,
        },
        None => DecodeResult {
            tokens: Vec::new(),
            score: f64::NEG_INFINITY,
            finished: false,
            transitions: Vec::new(),
            nbest,
            stats,
        },
    }
}

fn check_common(frames: usize, beam: usize) -> Result<()> {
    if frames == 0 {
        return Err(Error::Decode("empty encoder output".into()));
    }
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    Ok(())
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Config(format!("threshold {tau} must lie in (0, 1)")));
    }
    Ok(())
}

/// Tokens a label softmax may emit: everything except `<sos>`.
fn emittable(vocab: usize) -> impl Iterator<Item = usize> {
    (0..vocab).filter(|&k| k != SOS)
}

/// Chunkwise beam search over `frames` encoder frames split into chunks of `chunk_len`.
///
/// Per chunk, every hypothesis is expanded frame by frame. One whose end-of-chunk probability
/// exceeds `tau` waits for the next chunk; the others are extended by each token, with
/// `<eos>` extensions collected as finished. Survivors of the chunk's last frame join the
/// waiting set unpenalized.
pub fn chunkwise_beam_search<S: Scorer>(
    scorer: &S,
    frames: usize,
    chunk_len: usize,
    beam: usize,
    tau: f64,
) -> Result<DecodeResult> {
    check_common(frames, beam)?;
    check_tau(tau)?;
    let mut stats = DecodeStats::default();
    let mut b = vec![Hyp::root(scorer, &mut stats)?];
    let mut f: Vec<Hyp<S::Ctx>> = Vec::new();
    let chunks = frames.div_ceil(chunk_len.max(1));
    for n in 1..=chunks {
        if b.is_empty() {
            break;
        }
        stats.chunks_entered += 1;
        let mut c = Vec::new();
        for t in chunk_range(frames, chunk_len, n)? {
            if b.is_empty() {
                break;
            }
            stats.frames_visited += 1;
            let mut a = Vec::new();
            for mut h in b.drain(..) {
                let ctx = h.ctx(scorer, &mut stats)?;
                let space = scorer.space(t, &ctx)?;
                stats.joiner_space_evals += 1;
                let eoc = scorer.gate(&space)?;
                stats.eoc_evals += 1;
                if eoc > tau {
                    h.score += eoc.ln();
                    h.transitions.push(t + 1);
                    c.push(h);
                    continue;
                }
                let dist = scorer.labels(&space)?;
                stats.label_softmax_evals += 1;
                let stay = (1.0 - eoc).ln();
                for k in emittable(dist.len()) {
                    let child = h.child(&ctx, k, h.score + dist[k].ln() + stay);
                    if k == EOS {
                        f.push(child);
                    } else {
                        a.push(child);
                    }
                }
            }
            b = prune_hyps(a, beam);
        }
        b.extend(c);
        b = prune_hyps(b, beam);
    }
    Ok(finish(f, || b.into_iter().next(), stats))
}

/// Index of the largest value among `candidates`, the smallest index on ties.
fn argmax(dist: &[f64], candidates: impl Iterator<Item = usize>) -> Option<usize> {
    candidates.fold(None, |best: Option<usize>, k| match best {
        Some(b) if dist[b] >= dist[k] => Some(b),
        _ => Some(k),
    })
}

/// Running state of a greedy decode.
struct Greedy<C> {
    hyp: Hyp<C>,
    best_final: Option<Hyp<C>>,
}

impl<C> Greedy<C> {
    /// Records the `<eos>` extension, then extends by the best other token. Returns false once
    /// the running hypothesis can no longer beat the best finished one.
    fn expand<S: Scorer<Ctx = C>>(
        &mut self,
        scorer: &S,
        ctx: &Rc<C>,
        dist: &[f64],
        stay: f64,
        stats: &mut DecodeStats,
    ) -> Result<bool> {
        let eos = self
            .hyp
            .child(ctx, EOS, self.hyp.score + dist[EOS].ln() + stay);
        if self
            .best_final
            .as_ref()
            .is_none_or(|b| rank_order(&eos, b) == Ordering::Less)
        {
            self.best_final = Some(eos);
        }
        let Some(k) = argmax(dist, emittable(dist.len()).filter(|&k| k != EOS)) else {
            return Ok(false);
        };
        let score = self.hyp.score + dist[k].ln() + stay;
        if self.best_final.as_ref().is_some_and(|b| b.score >= score) {
            return Ok(false);
        }
        self.hyp = self.hyp.child(ctx, k, score);
        self.hyp.ctx(scorer, stats)?;
        Ok(true)
    }

    fn result(self, stats: DecodeStats) -> DecodeResult {
        let hyp = self.hyp;
        let mut r = finish(self.best_final.into_iter().collect(), || Some(hyp), stats);
        r.nbest.clear();
        r
    }
}

/// Single-hypothesis chunkwise decoding; token-identical to a beam search with beam one.
pub fn chunkwise_greedy<S: Scorer>(
    scorer: &S,
    frames: usize,
    chunk_len: usize,
    tau: f64,
) -> Result<DecodeResult> {
    check_common(frames, 1)?;
    check_tau(tau)?;
    let mut stats = DecodeStats::default();
    let mut g = Greedy {
        hyp: Hyp::root(scorer, &mut stats)?,
        best_final: None,
    };
    'chunks: for n in 1..=frames.div_ceil(chunk_len.max(1)) {
        stats.chunks_entered += 1;
        for t in chunk_range(frames, chunk_len, n)? {
            stats.frames_visited += 1;
            let ctx = g.hyp.ctx(scorer, &mut stats)?;
            let space = scorer.space(t, &ctx)?;
            stats.joiner_space_evals += 1;
            let eoc = scorer.gate(&space)?;
            stats.eoc_evals += 1;
            if eoc > tau {
                g.hyp.score += eoc.ln();
                g.hyp.transitions.push(t + 1);
                continue 'chunks;
            }
            // Scores never increase, so no extension can beat the best finished hypothesis.
            if g.best_final
                .as_ref()
                .is_some_and(|b| b.score >= g.hyp.score + (1.0 - eoc).ln())
            {
                break 'chunks;
            }
            let dist = scorer.labels(&space)?;
            stats.label_softmax_evals += 1;
            if !g.expand(scorer, &ctx, &dist, (1.0 - eoc).ln(), &mut stats)? {
                break 'chunks;
            }
        }
    }
    Ok(g.result(stats))
}

/// Label-synchronous Aligner beam search: step `u` pairs encoder frame `u` with the
/// hypothesis' `u`-th predictor output.
pub fn aligner_beam_search<S: Scorer>(
    scorer: &S,
    frames: usize,
    max_len: usize,
    beam: usize,
) -> Result<DecodeResult> {
    check_aligner(frames, max_len, beam)?;
    let mut stats = DecodeStats::default();
    let mut b = vec![Hyp::root(scorer, &mut stats)?];
    let mut f = Vec::new();
    for u in 0..max_len {
        if b.is_empty() {
            break;
        }
        stats.frames_visited += 1;
        let mut a = Vec::new();
        for mut h in b.drain(..) {
            let ctx = h.ctx(scorer, &mut stats)?;
            let space = scorer.space(u, &ctx)?;
            stats.joiner_space_evals += 1;
            let dist = scorer.labels(&space)?;
            stats.label_softmax_evals += 1;
            for k in emittable(dist.len()) {
                let child = h.child(&ctx, k, h.score + dist[k].ln());
                if k == EOS {
                    f.push(child);
                } else {
                    a.push(child);
                }
            }
        }
        b = prune_hyps(a, beam);
    }
    Ok(finish(f, || b.into_iter().next(), stats))
}

fn check_aligner(frames: usize, max_len: usize, beam: usize) -> Result<()> {
    check_common(frames, beam)?;
    if max_len > frames {
        return Err(Error::Decode(format!(
            "maximum length {max_len} exceeds {frames} frames"
        )));
    }
    Ok(())
}

/// Greedy Aligner decoding; `finished` is false when `max_len` steps produce no `<eos>`.
pub fn aligner_decode<S: Scorer>(
    scorer: &S,
    frames: usize,
    max_len: usize,
) -> Result<DecodeResult> {
    check_aligner(frames, max_len, 1)?;
    let mut stats = DecodeStats::default();
    let mut g = Greedy {
        hyp: Hyp::root(scorer, &mut stats)?,
        best_final: None,
    };
    for u in 0..max_len {
        stats.frames_visited += 1;
        let ctx = g.hyp.ctx(scorer, &mut stats)?;
        let space = scorer.space(u, &ctx)?;
        stats.joiner_space_evals += 1;
        let dist = scorer.labels(&space)?;
        stats.label_softmax_evals += 1;
        if !g.expand(scorer, &ctx, &dist, 0.0, &mut stats)? {
            break;
        }
    }
    Ok(g.result(stats))
}

/// Labels a transducer may emit: neither `<sos>` nor `<eos>`.
fn transducer_labels(vocab: usize) -> impl Iterator<Item = usize> {
    (0..vocab).filter(|&k| k != SOS && k != EOS)
}

/// Frame-synchronous transducer beam search. At each frame, candidates ending in blank and
/// candidates extended by a label are pruned together; blank-ended ones wait for the next
/// frame, the rest are expanded again, up to `max_symbols` labels per frame.
pub fn transducer_beam_search<S: Scorer>(
    scorer: &S,
    frames: usize,
    beam: usize,
    max_symbols: usize,
) -> Result<DecodeResult> {
    check_common(frames, beam)?;
    let mut stats = DecodeStats::default();
    let mut b = vec![Hyp::root(scorer, &mut stats)?];
    for t in 0..frames {
        stats.frames_visited += 1;
        let mut next: Vec<(Hyp<S::Ctx>, bool)> = Vec::new();
        let mut active = std::mem::take(&mut b);
        for step in 0..=max_symbols {
            if active.is_empty() {
                break;
            }
            let mut cand: Vec<(Hyp<S::Ctx>, bool)> = Vec::new();
            for mut h in active.drain(..) {
                let ctx = h.ctx(scorer, &mut stats)?;
                let space = scorer.space(t, &ctx)?;
                stats.joiner_space_evals += 1;
                let blank = scorer.gate(&space)?;
                stats.eoc_evals += 1;
                if step < max_symbols {
                    let dist = scorer.labels(&space)?;
                    stats.label_softmax_evals += 1;
                    let stay = (1.0 - blank).ln();
                    for k in transducer_labels(dist.len()) {
                        cand.push((h.child(&ctx, k, h.score + dist[k].ln() + stay), false));
                    }
                }
                h.score += blank.ln();
                cand.push((h, true));
            }
            cand.append(&mut next);
            cand.sort_by(|x, y| rank_order(&x.0, &y.0));
            cand.truncate(beam);
            for (h, ended) in cand {
                if ended {
                    next.push((h, true));
                } else {
                    active.push(h);
                }
            }
        }
        b = next.into_iter().map(|(h, _)| h).collect();
    }
    Ok(finish(b, || None, stats))
}

/// Greedy transducer decoding: at each frame, emit the best label while its probability
/// `(1 - b)·p(k)` exceeds the blank probability `b`, up to `max_symbols` labels.
pub fn transducer_greedy<S: Scorer>(
    scorer: &S,
    frames: usize,
    max_symbols: usize,
) -> Result<DecodeResult> {
    check_common(frames, 1)?;
    let mut stats = DecodeStats::default();
    let mut h = Hyp::root(scorer, &mut stats)?;
    for t in 0..frames {
        stats.frames_visited += 1;
        let mut emitted = 0;
        loop {
            let ctx = h.ctx(scorer, &mut stats)?;
            let space = scorer.space(t, &ctx)?;
            stats.joiner_space_evals += 1;
            let blank = scorer.gate(&space)?;
            stats.eoc_evals += 1;
            let mut label = None;
            // A label can only beat blank when blank is below one half.
            if emitted < max_symbols && blank < 0.5 {
                let dist = scorer.labels(&space)?;
                stats.label_softmax_evals += 1;
                if let Some(k) = argmax(&dist, transducer_labels(dist.len())) {
                    let p = (1.0 - blank).ln() + dist[k].ln();
                    if p > blank.ln() {
                        label = Some((k, p));
                    }
                }
            }
            match label {
                Some((k, p)) => {
                    h = h.child(&ctx, k, h.score + p);
                    emitted += 1;
                }
                None => {
                    h.score += blank.ln();
                    break;
                }
            }
        }
    }
    let mut r = finish(vec![h], || None, stats);
    r.nbest.clear();
    Ok(r)
}

/// Decoding settings shared by the model-level entry point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeOptions {
    /// Beam width; one selects the greedy decoders.
    pub beam: usize,
    /// End-of-chunk threshold.
    pub tau: f64,
    /// Transducer label emissions allowed per frame.
    pub max_symbols: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            beam: 8,
            tau: 0.5,
            max_symbols: 4,
        }
    }
}

/// Decodes an encoder output with the decoder matching the model's architecture.
pub fn decode_encoded(model: &Model, enc: &Tensor, opts: &DecodeOptions) -> Result<DecodeResult> {
    let scorer = ModelScorer::new(model, enc)?;
    let frames = scorer.frames();
    match (model.arch(), opts.beam) {
        (Architecture::Chunkwise, 1) => {
            chunkwise_greedy(&scorer, frames, model.config().chunk_len, opts.tau)
        }
        (Architecture::Chunkwise, b) => {
            chunkwise_beam_search(&scorer, frames, model.config().chunk_len, b, opts.tau)
        }
        (Architecture::Transducer, 1) => transducer_greedy(&scorer, frames, opts.max_symbols),
        (Architecture::Transducer, b) => {
            transducer_beam_search(&scorer, frames, b, opts.max_symbols)
        }
        (Architecture::Aligner, 1) => aligner_decode(&scorer, frames, frames),
        (Architecture::Aligner, b) => aligner_beam_search(&scorer, frames, frames, b),
    }
}

/// Encodes raw features and decodes them.
pub fn decode(model: &Model, features: &Tensor, opts: &DecodeOptions) -> Result<DecodeResult> {
    let enc = model.encode(features)?;
    decode_encoded(model, &enc.frames, opts)
}
