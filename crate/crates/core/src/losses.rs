//! Training objectives: transducer full-sum, Aligner cross-entropy, and the chunkwise
//! label + end-of-chunk loss.

use serde::{Deserialize, Serialize};

use crate::alignment::{build_joiner_pairs, ChunkAssignment, PairKind};
use crate::error::{Error, Result};
use crate::model::{Architecture, Bound, Model, EOS, SOS};
use crate::tensor::{log_add, Tape, Tensor, Var};

/// Probabilities are clipped to `[PROB_FLOOR, 1 - PROB_FLOOR]` before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// How per-entry losses are combined within one utterance. Batches always take the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Sum,
    Mean,
}

impl Reduction {
    fn apply(self, total: f64, count: usize) -> f64 {
        match self {
            Reduction::Sum => total,
            Reduction::Mean => total / count.max(1) as f64,
        }
    }

    fn factor(self, count: usize) -> f64 {
        self.apply(1.0, count)
    }
}

/// Options for the plain (off-tape) losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossOptions {
    pub reduction: Reduction,
    /// Skip probability clipping: a zero target probability yields an infinite loss.
    pub strict: bool,
}

impl LossOptions {
    fn log(self, p: f64) -> f64 {
        if self.strict {
            p.ln()
        } else {
            p.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln()
        }
    }
}

/// Log-probabilities over the `T × (U+1)` transducer lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct TransducerGrid {
    frames: usize,
    labels: usize,
    vocab: usize,
    /// `[T × (U+1)]`.
    log_blank: Vec<f64>,
    /// `[T × (U+1) × V]`.
    log_label: Vec<f64>,
}

impl TransducerGrid {
    pub fn new(
        frames: usize,
        labels: usize,
        vocab: usize,
        log_blank: Vec<f64>,
        log_label: Vec<f64>,
    ) -> Result<Self> {
        let nodes = frames * (labels + 1);
        if frames == 0 || vocab == 0 {
            return Err(Error::Grid("empty lattice".into()));
        }
        if log_blank.len() != nodes || log_label.len() != nodes * vocab {
            return Err(Error::Grid(format!(
                "expected {nodes} blank and {} label entries, got {} and {}",
                nodes * vocab,
                log_blank.len(),
                log_label.len()
            )));
        }
        Ok(Self {
            frames,
            labels,
            vocab,
            log_blank,
            log_label,
        })
    }

    /// Builds the grid from HAT outputs: `P(blank) = b`, `P(k) = (1 - b) · p(k)`.
    pub fn from_hat(
        frames: usize,
        labels: usize,
        blank: &[f64],
        label_dists: &[f64],
        vocab: usize,
    ) -> Result<Self> {
        let opts = LossOptions::default();
        let log_blank: Vec<f64> = blank.iter().map(|&b| opts.log(b)).collect();
        if label_dists.len() != blank.len() * vocab {
            return Err(Error::Grid(
                "label distributions do not match blank entries".into(),
            ));
        }
        let log_label = label_dists
            .chunks(vocab)
            .zip(blank)
            .flat_map(|(dist, &b)| {
                let stay = opts.log(1.0 - b);
                dist.iter().map(move |&p| stay + opts.log(p))
            })
            .collect();
        Self::new(frames, labels, vocab, log_blank, log_label)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn labels(&self) -> usize {
        self.labels
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn log_blank(&self, t: usize, u: usize) -> f64 {
        self.log_blank[t * (self.labels + 1) + u]
    }

    pub fn log_label(&self, t: usize, u: usize, k: usize) -> f64 {
        self.log_label[(t * (self.labels + 1) + u) * self.vocab + k]
    }

    /// Fails unless blank plus all labels sum to one within `tol` at every node.
    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for t in 0..self.frames {
            for u in 0..=self.labels {
                let total = self.log_blank(t, u).exp()
                    + (0..self.vocab)
                        .map(|k| self.log_label(t, u, k).exp())
                        .sum::<f64>();
                if (total - 1.0).abs() > tol {
                    return Err(Error::Grid(format!("node ({t}, {u}) sums to {total}")));
                }
            }
        }
        Ok(())
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.labels {
            return Err(Error::Grid(format!(
                "{} labels for a grid built for {}",
                labels.len(),
                self.labels
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&k| k >= self.vocab) {
            return Err(Error::UnknownToken {
                token: bad,
                vocab: self.vocab,
            });
        }
        Ok(())
    }

    /// Label log-probabilities of the targets: `[T × U]`, entry `(t, u)` emits `labels[u]`.
    fn target_log_labels(&self, labels: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.frames * self.labels);
        for t in 0..self.frames {
            for (u, &y) in labels.iter().enumerate() {
                out.push(self.log_label(t, u, y));
            }
        }
        out
    }
}

/// Result of the forward-backward pass.
struct Lattice {
    log_prob: f64,
    /// `d(-log P) / d lb`, `[T × (U+1)]`.
    grad_blank: Vec<f64>,
    /// `d(-log P) / d ll`, `[T × U]`.
    grad_label: Vec<f64>,
}

/// Forward-backward over blank log-probs `lb [T × (U+1)]` and target label log-probs
/// `ll [T × U]`.
fn forward_backward(lb: &[f64], ll: &[f64], frames: usize, labels: usize) -> Lattice {
    let w = labels + 1;
    let (bi, li) = (
        |t: usize, u: usize| t * w + u,
        |t: usize, u: usize| t * labels + u,
    );
    let mut alpha = vec![f64::NEG_INFINITY; frames * w];
    alpha[0] = 0.0;
    for t in 0..frames {
        for u in 0..=labels {
            if t == 0 && u == 0 {
                continue;
            }
            let mut a = f64::NEG_INFINITY;
            if t > 0 {
                a = alpha[bi(t - 1, u)] + lb[bi(t - 1, u)];
            }
            if u > 0 {
                a = log_add(a, alpha[bi(t, u - 1)] + ll[li(t, u - 1)]);
            }
            alpha[bi(t, u)] = a;
        }
    }
    let last = bi(frames - 1, labels);
    let log_prob = alpha[last] + lb[last];

    let mut beta = vec![f64::NEG_INFINITY; frames * w];
    for t in (0..frames).rev() {
        for u in (0..=labels).rev() {
            beta[bi(t, u)] = if t == frames - 1 && u == labels {
                lb[last]
            } else {
                let mut b = f64::NEG_INFINITY;
                if t + 1 < frames {
                    b = beta[bi(t + 1, u)] + lb[bi(t, u)];
                }
                if u < labels {
                    b = log_add(b, beta[bi(t, u + 1)] + ll[li(t, u)]);
                }
                b
            };
        }
    }

    let mut grad_blank = vec![0.0; frames * w];
    let mut grad_label = vec![0.0; frames * labels];
    for t in 0..frames {
        for u in 0..=labels {
            let a = alpha[bi(t, u)];
            let after_blank = if t + 1 < frames {
                beta[bi(t + 1, u)]
            } else if u == labels {
                0.0
            } else {
                f64::NEG_INFINITY
            };
            grad_blank[bi(t, u)] = -(a + lb[bi(t, u)] + after_blank - log_prob).exp();
            if u < labels {
                grad_label[li(t, u)] = -(a + ll[li(t, u)] + beta[bi(t, u + 1)] - log_prob).exp();
            }
        }
    }
    Lattice {
        log_prob,
        grad_blank,
        grad_label,
    }
}

/// Negative log of the total probability of all monotone alignments of `labels`.
pub fn transducer_full_sum(grid: &TransducerGrid, labels: &[usize]) -> Result<f64> {
    grid.check_labels(labels)?;
    let ll = grid.target_log_labels(labels);
    Ok(-forward_backward(&grid.log_blank, &ll, grid.frames, grid.labels).log_prob)
}

/// Largest `T + U` accepted by [`brute_force_transducer`].
pub const BRUTE_FORCE_LIMIT: usize = 12;

/// Explicit enumeration of every alignment path; a reference for [`transducer_full_sum`].
pub fn brute_force_transducer(grid: &TransducerGrid, labels: &[usize]) -> Result<f64> {
    grid.check_labels(labels)?;
    if grid.frames + grid.labels > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge(grid.frames + grid.labels));
    }
    fn walk(
        g: &TransducerGrid,
        labels: &[usize],
        t: usize,
        u: usize,
        acc: f64,
        paths: &mut Vec<f64>,
    ) {
        if t == g.frames - 1 && u == g.labels {
            paths.push(acc + g.log_blank(t, u));
            return;
        }
        if t + 1 < g.frames {
            walk(g, labels, t + 1, u, acc + g.log_blank(t, u), paths);
        }
        if u < g.labels {
            walk(
                g,
                labels,
                t,
                u + 1,
                acc + g.log_label(t, u, labels[u]),
                paths,
            );
        }
    }
    let mut paths = Vec::new();
    walk(grid, labels, 0, 0, 0.0, &mut paths);
    Ok(-paths.into_iter().fold(f64::NEG_INFINITY, log_add))
}

/// Number of output entries a transducer evaluates: `T · U · (V+1)`.
pub fn transducer_grid_entries(frames: usize, labels: usize, vocab: usize) -> usize {
    frames * labels * (vocab + 1)
}

/// Number of output entries the chunkwise loss evaluates: `U · V + (U + N)`.
pub fn chunkwise_grid_entries(labels: usize, vocab: usize, chunks: usize) -> usize {
    labels * vocab + labels + chunks
}

fn check_dists(dists: &Tensor, targets: &[usize]) -> Result<usize> {
    let (rows, vocab) = dists
        .dims2()
        .ok_or_else(|| Error::shape("cross_entropy", "distributions must be a matrix"))?;
    if rows != targets.len() {
        return Err(Error::shape(
            "cross_entropy",
            format!("{rows} distributions for {} targets", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&k| k >= vocab) {
        return Err(Error::UnknownToken { token: bad, vocab });
    }
    Ok(vocab)
}

/// `-Σ_u log p_u(y_u)` over `[U × V]` label distributions.
pub fn chunkwise_label_ce(dists: &Tensor, targets: &[usize], opts: LossOptions) -> Result<f64> {
    check_dists(dists, targets)?;
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(u, &y)| -opts.log(dists.get2(u, y)))
        .sum();
    Ok(opts.reduction.apply(total, targets.len()))
}

/// Binary cross-entropy of end-of-chunk probabilities against 0/1 targets.
pub fn eoc_bce(probs: &[f64], targets: &[u8], opts: LossOptions) -> Result<f64> {
    if probs.len() != targets.len() {
        return Err(Error::shape(
            "eoc_bce",
            format!(
                "{} probabilities for {} targets",
                probs.len(),
                targets.len()
            ),
        ));
    }
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            if t == 1 {
                -opts.log(p)
            } else {
                -opts.log(1.0 - p)
            }
        })
        .sum();
    Ok(opts.reduction.apply(total, targets.len()))
}

/// Cross-entropy over the diagonal pairs of an Aligner: label `u` is read from frame `u`.
pub fn aligner_ce(
    dists: &Tensor,
    targets: &[usize],
    frames: usize,
    opts: LossOptions,
) -> Result<f64> {
    if frames < targets.len() {
        return Err(Error::Alignment(format!(
            "{} labels do not fit in {frames} frames",
            targets.len()
        )));
    }
    chunkwise_label_ce(dists, targets, opts)
}

/// Loss value with its components and grid sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub label_ce: f64,
    pub eoc_bce: Option<f64>,
    /// Output entries evaluated by the objective actually used.
    pub grid_entries: usize,
    /// Output entries a transducer would evaluate on the same utterances.
    pub transducer_entries: usize,
}

/// Combines chunkwise components: `total = label + eoc`, unweighted.
pub fn total_chunkwise_loss(
    label_ce: f64,
    eoc_bce: f64,
    frames: usize,
    labels: usize,
    vocab: usize,
    chunks: usize,
) -> LossReport {
    LossReport {
        total: label_ce + eoc_bce,
        label_ce,
        eoc_bce: Some(eoc_bce),
        grid_entries: chunkwise_grid_entries(labels, vocab, chunks),
        transducer_entries: transducer_grid_entries(frames, labels, vocab),
    }
}

/// One training utterance.
#[derive(Debug, Clone)]
pub struct LossItem<'a> {
    /// Raw feature frames `[T_raw × F]`.
    pub features: &'a Tensor,
    /// Label tokens without `<eos>`.
    pub labels: &'a [usize],
    /// Chunk assignment of `labels` plus `<eos>`; required by the chunkwise model.
    pub assignment: Option<&'a ChunkAssignment>,
}

/// Tape handles for one utterance's loss.
#[derive(Debug, Clone)]
pub struct UtteranceLoss {
    pub total: Var,
    pub label: Var,
    pub eoc: Option<Var>,
    pub grid_entries: usize,
    pub transducer_entries: usize,
}

/// `-Σ log clip(x)` on the tape, reduced.
fn neg_log_sum(tape: &mut Tape, x: Var, reduction: Reduction) -> Result<Var> {
    let n = tape.value(x).numel();
    let c = tape.clamp(x, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let l = tape.log(c)?;
    let s = tape.sum(l)?;
    tape.scale(s, -reduction.factor(n))
}

/// Picks `dists[i, targets[i]]` for each row.
fn pick_targets(tape: &mut Tape, dists: Var, targets: &[usize]) -> Result<Var> {
    let vocab = tape.shape(dists)[1];
    let flat: Vec<usize> = targets
        .iter()
        .enumerate()
        .map(|(i, &y)| i * vocab + y)
        .collect();
    tape.gather_elements(dists, &flat)
}

fn with_sos(labels: &[usize]) -> Vec<usize> {
    let mut inputs = Vec::with_capacity(labels.len() + 1);
    inputs.push(SOS);
    inputs.extend_from_slice(labels);
    inputs
}

/// Records one utterance's loss for the model's architecture.
pub fn utterance_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    item: &LossItem,
    reduction: Reduction,
) -> Result<UtteranceLoss> {
    let enc = model
        .encode_on_tape(tape, bound, item.features, false)?
        .output;
    let frames = tape.shape(enc)[0];
    let vocab = model.vocab_size();
    let joiner = model.joiner_layout();
    match model.arch() {
        Architecture::Transducer => {
            let labels = item.labels;
            let u = labels.len();
            let pred = model.predict_on_tape(tape, bound, &with_sos(labels))?;
            let pairs: Vec<(usize, usize)> = (0..frames)
                .flat_map(|t| (0..=u).map(move |j| (t, j)))
                .collect();
            let space = joiner.space_on_tape(tape, bound, enc, pred, &pairs)?;
            let blank = joiner.gate_on_tape(tape, bound, space)?;
            let blank = tape.clamp(blank, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
            let lb = tape.log(blank)?;
            let stay = tape.affine(blank, -1.0, 1.0)?;
            let l_stay = tape.log(stay)?;

            let emit_rows: Vec<usize> = (0..frames)
                .flat_map(|t| (0..u).map(move |j| t * (u + 1) + j))
                .collect();
            let emit_targets: Vec<usize> =
                (0..frames).flat_map(|_| labels.iter().copied()).collect();
            let emit_space = tape.gather_rows(space, &emit_rows)?;
            let dists = joiner.labels_on_tape(tape, bound, emit_space)?;
            let p = pick_targets(tape, dists, &emit_targets)?;
            let p = tape.clamp(p, PROB_FLOOR, 1.0)?;
            let lp = tape.log(p)?;
            let l_stay_emit = tape.gather_elements(l_stay, &emit_rows)?;

            let lb_v = tape.value(lb).data().to_vec();
            let ll: Vec<f64> = tape
                .value(lp)
                .data()
                .iter()
                .zip(tape.value(l_stay_emit).data())
                .map(|(a, b)| a + b)
                .collect();
            let lat = forward_backward(&lb_v, &ll, frames, u);
            let k = reduction.factor(frames + u);
            let total = tape.scalar_fn(
                &[lb, lp, l_stay_emit],
                -lat.log_prob * k,
                vec![
                    lat.grad_blank.iter().map(|g| g * k).collect(),
                    lat.grad_label.iter().map(|g| g * k).collect(),
                    lat.grad_label.iter().map(|g| g * k).collect(),
                ],
            )?;
            Ok(UtteranceLoss {
                total,
                label: total,
                eoc: None,
                grid_entries: transducer_grid_entries(frames, u, vocab),
                transducer_entries: transducer_grid_entries(frames, u, vocab),
            })
        }
        Architecture::Aligner => {
            let mut labels = item.labels.to_vec();
            labels.push(EOS);
            let u = labels.len();
            if frames < u {
                return Err(Error::Alignment(format!(
                    "{u} labels (with <eos>) do not fit in {frames} frames"
                )));
            }
            let pred = model.predict_on_tape(tape, bound, &with_sos(&labels[..u - 1]))?;
            let pairs: Vec<(usize, usize)> = (0..u).map(|j| (j, j)).collect();
            let space = joiner.space_on_tape(tape, bound, enc, pred, &pairs)?;
            let dists = joiner.labels_on_tape(tape, bound, space)?;
            let p = pick_targets(tape, dists, &labels)?;
            let label = neg_log_sum(tape, p, reduction)?;
            Ok(UtteranceLoss {
                total: label,
                label,
                eoc: None,
                grid_entries: u * vocab,
                transducer_entries: transducer_grid_entries(frames, item.labels.len(), vocab),
            })
        }
        Architecture::Chunkwise => {
            let assignment = item.assignment.ok_or_else(|| {
                Error::Alignment("chunkwise loss needs a chunk assignment".into())
            })?;
            let mut labels = item.labels.to_vec();
            labels.push(EOS);
            if assignment.total_frames() != frames {
                return Err(Error::Alignment(format!(
                    "assignment covers {} frames, encoder produced {frames}",
                    assignment.total_frames()
                )));
            }
            let pairs = build_joiner_pairs(assignment, &labels)?;
            let pred = model.predict_on_tape(tape, bound, &with_sos(&labels))?;
            let rows: Vec<(usize, usize)> = pairs
                .iter()
                .map(|p| (p.frame - 1, p.pred_step - 1))
                .collect();
            let space = joiner.space_on_tape(tape, bound, enc, pred, &rows)?;

            let (label_rows, targets): (Vec<usize>, Vec<usize>) = pairs
                .iter()
                .enumerate()
                .filter_map(|(i, p)| match p.kind {
                    PairKind::Label(k) => Some((i, k)),
                    PairKind::Eoc => None,
                })
                .unzip();
            let label_space = tape.gather_rows(space, &label_rows)?;
            let dists = joiner.labels_on_tape(tape, bound, label_space)?;
            let p = pick_targets(tape, dists, &targets)?;
            let label = neg_log_sum(tape, p, reduction)?;

            // Probability of the target outcome: eoc for target 1, 1 - eoc for target 0.
            let eoc = joiner.gate_on_tape(tape, bound, space)?;
            let n = pairs.len();
            let sign = tape.constant(Tensor::vector(
                pairs
                    .iter()
                    .map(|p| 2.0 * p.eoc_target as f64 - 1.0)
                    .collect(),
            ));
            let offset = tape.constant(Tensor::vector(
                pairs.iter().map(|p| 1.0 - p.eoc_target as f64).collect(),
            ));
            let signed = tape.mul(eoc, sign)?;
            let q = tape.add(signed, offset)?;
            let eoc_loss = neg_log_sum(tape, q, reduction)?;
            debug_assert_eq!(tape.shape(q), &[n]);

            let total = tape.add(label, eoc_loss)?;
            Ok(UtteranceLoss {
                total,
                label,
                eoc: Some(eoc_loss),
                grid_entries: chunkwise_grid_entries(labels.len(), vocab, assignment.num_chunks()),
                transducer_entries: transducer_grid_entries(frames, item.labels.len(), vocab),
            })
        }
    }
}

/// Mean loss over a batch, with a report of the component means.
pub fn batch_loss(
    model: &Model,
    tape: &mut Tape,
    bound: &Bound,
    items: &[LossItem],
    reduction: Reduction,
) -> Result<(Var, LossReport)> {
    if items.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut totals = Vec::with_capacity(items.len());
    let mut label_sum = 0.0;
    let mut eoc_sum: Option<f64> = None;
    let mut grid_entries = 0;
    let mut transducer_entries = 0;
    for item in items {
        let l = utterance_loss(model, tape, bound, item, reduction)?;
        totals.push(l.total);
        label_sum += tape.value(l.label).data()[0];
        if let Some(e) = l.eoc {
            *eoc_sum.get_or_insert(0.0) += tape.value(e).data()[0];
        }
        grid_entries += l.grid_entries;
        transducer_entries += l.transducer_entries;
    }
    let mut acc = totals[0];
    for &t in &totals[1..] {
        acc = tape.add(acc, t)?;
    }
    let n = items.len() as f64;
    let mean = tape.scale(acc, 1.0 / n)?;
    let report = LossReport {
        total: tape.value(mean).data()[0],
        label_ce: label_sum / n,
        eoc_bce: eoc_sum.map(|e| e / n),
        grid_entries,
        transducer_entries,
    };
    Ok((mean, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::{assign_to_chunks, ForcedAlignment};
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn uniform_grid(frames: usize, labels: usize, vocab: usize, blank: f64) -> TransducerGrid {
        let nodes = frames * (labels + 1);
        TransducerGrid::from_hat(
            frames,
            labels,
            &vec![blank; nodes],
            &vec![1.0 / vocab as f64; nodes * vocab],
            vocab,
        )
        .unwrap()
    }

    fn random_grid(
        rng: &mut ChaCha8Rng,
        frames: usize,
        labels: usize,
        vocab: usize,
    ) -> TransducerGrid {
        let nodes = frames * (labels + 1);
        let blank: Vec<f64> = (0..nodes).map(|_| rng.random_range(0.05..0.95)).collect();
        let mut dists = Vec::with_capacity(nodes * vocab);
        for _ in 0..nodes {
            let raw: Vec<f64> = (0..vocab).map(|_| rng.random_range(0.1..1.0)).collect();
            let s: f64 = raw.iter().sum();
            dists.extend(raw.iter().map(|r| r / s));
        }
        TransducerGrid::from_hat(frames, labels, &blank, &dists, vocab).unwrap()
    }

    #[test]
    fn two_path_example() {
        let g = uniform_grid(2, 1, 2, 0.5);
        g.check_normalized(1e-12).unwrap();
        let loss = transducer_full_sum(&g, &[1]).unwrap();
        assert!((loss - (-(0.125f64).ln())).abs() < 1e-12);
        assert!((brute_force_transducer(&g, &[1]).unwrap() - loss).abs() < 1e-12);
    }

    #[test]
    fn no_labels_is_all_blank() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_grid(&mut rng, 4, 0, 3);
        let expect: f64 = -(0..4).map(|t| g.log_blank(t, 0)).sum::<f64>();
        assert!((transducer_full_sum(&g, &[]).unwrap() - expect).abs() < 1e-12);
        let g1 = random_grid(&mut rng, 1, 0, 2);
        assert!((brute_force_transducer(&g1, &[]).unwrap() + g1.log_blank(0, 0)).abs() < 1e-15);
    }

    #[test]
    fn matches_brute_force_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (t, u, v) = (
                rng.random_range(1..=4),
                rng.random_range(0..=3),
                rng.random_range(1..=3),
            );
            let g = random_grid(&mut rng, t, u, v);
            let labels: Vec<usize> = (0..u).map(|_| rng.random_range(0..v)).collect();
            let a = transducer_full_sum(&g, &labels).unwrap();
            let b = brute_force_transducer(&g, &labels).unwrap();
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn grid_errors() {
        let g = uniform_grid(2, 1, 2, 0.5);
        assert!(matches!(
            transducer_full_sum(&g, &[0, 1]),
            Err(Error::Grid(_))
        ));
        assert!(matches!(
            transducer_full_sum(&g, &[5]),
            Err(Error::UnknownToken { .. })
        ));
        let big = uniform_grid(8, 5, 2, 0.5);
        assert!(matches!(
            brute_force_transducer(&big, &[0; 5]),
            Err(Error::TooLarge(13))
        ));
        let skew = TransducerGrid::new(1, 0, 1, vec![0.0], vec![0.0]).unwrap();
        assert!(skew.check_normalized(1e-9).is_err());
    }

    #[test]
    fn forward_backward_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (t, u) = (3, 2);
        let lb: Vec<f64> = (0..t * (u + 1))
            .map(|_| rng.random_range(-2.0..-0.1))
            .collect();
        let ll: Vec<f64> = (0..t * u).map(|_| rng.random_range(-2.0..-0.1)).collect();
        let lat = forward_backward(&lb, &ll, t, u);
        let eps = 1e-6;
        for i in 0..lb.len() {
            let (mut p, mut m) = (lb.clone(), lb.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (-forward_backward(&p, &ll, t, u).log_prob
                + forward_backward(&m, &ll, t, u).log_prob)
                / (2.0 * eps);
            assert!((fd - lat.grad_blank[i]).abs() < 1e-7);
        }
        for i in 0..ll.len() {
            let (mut p, mut m) = (ll.clone(), ll.clone());
            p[i] += eps;
            m[i] -= eps;
            let fd = (-forward_backward(&lb, &p, t, u).log_prob
                + forward_backward(&lb, &m, t, u).log_prob)
                / (2.0 * eps);
            assert!((fd - lat.grad_label[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn closed_form_cross_entropies() {
        let opts = LossOptions::default();
        let uniform = Tensor::new(vec![3, 4], vec![0.25; 12]).unwrap();
        let ce = chunkwise_label_ce(&uniform, &[0, 1, 2], opts).unwrap();
        assert!((ce - 3.0 * 4f64.ln()).abs() < 1e-12);
        let onehot = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert!(chunkwise_label_ce(&onehot, &[1, 0], opts).unwrap().abs() < 1e-11);
        assert!((aligner_ce(&uniform, &[0, 1, 2], 3, opts).unwrap() - ce).abs() < 1e-15);
        assert!(aligner_ce(&uniform, &[0, 1, 2], 2, opts).is_err());

        let bce = eoc_bce(&[0.5; 6], &[0, 0, 1, 1, 0, 1], opts).unwrap();
        assert!((bce - 6.0 * 2f64.ln()).abs() < 1e-12);
        assert!(eoc_bce(&[0.0, 1.0], &[0, 1], opts).unwrap() < 1e-11);
        assert!(eoc_bce(&[0.5], &[0, 1], opts).is_err());

        let strict = LossOptions {
            strict: true,
            ..opts
        };
        let inf = chunkwise_label_ce(&onehot, &[0, 0], strict).unwrap();
        assert!(inf.is_infinite() && inf > 0.0);

        let mean = LossOptions {
            reduction: Reduction::Mean,
            ..opts
        };
        assert!(
            (chunkwise_label_ce(&uniform, &[0, 1, 2], mean).unwrap() - 4f64.ln()).abs() < 1e-12
        );
    }

    #[test]
    fn report_arithmetic() {
        let r = total_chunkwise_loss(2.0, 3.0, 100, 20, 1000, 10);
        assert_eq!(r.total, 5.0);
        assert_eq!(r.grid_entries, 20_030);
        assert_eq!(r.transducer_entries, 2_002_000);
    }

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            feature_dim: 3,
            frame_reduction: 2,
            encoder_dim: 4,
            encoder_layers: 1,
            heads: 2,
            ff_dim: 6,
            predictor_dim: 4,
            joiner_dim: 5,
            vocab_size: 5,
            chunk_len: 3,
            phase_period: 3,
            ..ModelConfig::default()
        }
    }

    fn features(rng: &mut ChaCha8Rng, raw: usize, dim: usize) -> Tensor {
        Tensor::new(
            vec![raw, dim],
            (0..raw * dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn tape_losses_match_plain_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cfg = tiny_config();
        let x = features(&mut rng, 12, cfg.feature_dim);
        let labels = [2, 4, 3];

        let hat = Model::new(cfg.clone(), Architecture::Transducer).unwrap();
        let mut tape = Tape::new();
        let bound = hat.params().bind(&mut tape, false);
        let item = LossItem {
            features: &x,
            labels: &labels,
            assignment: None,
        };
        let l = utterance_loss(&hat, &mut tape, &bound, &item, Reduction::Sum).unwrap();
        let enc = hat.encode(&x).unwrap().frames;
        let t = enc.shape()[0];
        let jw = hat.joiner_weights();
        let mut blank = Vec::new();
        let mut dists = Vec::new();
        let mut state = hat.initial_predictor_state();
        let mut preds = Vec::new();
        for &tok in [SOS].iter().chain(&labels) {
            let (h, s) = hat.predictor_step(tok, &state).unwrap();
            preds.push(h);
            state = s;
        }
        for ti in 0..t {
            for pred in &preds {
                let out = crate::model::hat_joiner(enc.row(ti), pred, &jw).unwrap();
                blank.push(out.gate.unwrap());
                dists.extend(out.label_dist);
            }
        }
        let grid = TransducerGrid::from_hat(t, 3, &blank, &dists, cfg.vocab_size).unwrap();
        let expect = transducer_full_sum(&grid, &labels).unwrap();
        assert!((tape.value(l.total).data()[0] - expect).abs() < 1e-10);
    }

    #[test]
    fn single_chunk_chunkwise_label_ce_equals_aligner() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cfg = ModelConfig {
            chunk_len: 8,
            ..tiny_config()
        };
        let x = features(&mut rng, 12, cfg.feature_dim);
        let labels = [3, 2];
        let chunk = Model::new(cfg.clone(), Architecture::Chunkwise).unwrap();
        let mut aligner = Model::new(cfg, Architecture::Aligner).unwrap();
        for id in aligner.params().ids().collect::<Vec<_>>() {
            let name = aligner.params().name(id).to_string();
            let src = chunk.params().find(&name).unwrap();
            *aligner.params_mut().get_mut(id) = chunk.params().get(src).clone();
        }
        let t = chunk.encode(&x).unwrap().num_frames();
        let fa = ForcedAlignment::new(vec![1, 2, 3], t).unwrap();
        let assignment = assign_to_chunks(&fa, 8).unwrap();
        assert_eq!(assignment.num_chunks(), 1);

        let mut tape = Tape::new();
        let bound = chunk.params().bind(&mut tape, false);
        let item = LossItem {
            features: &x,
            labels: &labels,
            assignment: Some(&assignment),
        };
        let c = utterance_loss(&chunk, &mut tape, &bound, &item, Reduction::Sum).unwrap();
        let mut tape2 = Tape::new();
        let bound2 = aligner.params().bind(&mut tape2, false);
        let item2 = LossItem {
            assignment: None,
            ..item
        };
        let a = utterance_loss(&aligner, &mut tape2, &bound2, &item2, Reduction::Sum).unwrap();
        assert_eq!(
            tape.value(c.label).data()[0].to_bits(),
            tape2.value(a.label).data()[0].to_bits()
        );
        let total = tape.value(c.total).data()[0];
        let parts = tape.value(c.label).data()[0] + tape.value(c.eoc.unwrap()).data()[0];
        assert_eq!(total, parts);
    }

    #[test]
    fn batch_loss_is_mean_of_utterances() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let cfg = tiny_config();
        let m = Model::new(cfg.clone(), Architecture::Chunkwise).unwrap();
        let xa = features(&mut rng, 12, cfg.feature_dim);
        let xb = features(&mut rng, 10, cfg.feature_dim);
        let aa = assign_to_chunks(&ForcedAlignment::new(vec![2, 4, 6], 6).unwrap(), 3).unwrap();
        let ab = assign_to_chunks(&ForcedAlignment::new(vec![5], 5).unwrap(), 3).unwrap();
        let items = [
            LossItem {
                features: &xa,
                labels: &[2, 3],
                assignment: Some(&aa),
            },
            LossItem {
                features: &xb,
                labels: &[],
                assignment: Some(&ab),
            },
        ];
        let mut tape = Tape::new();
        let bound = m.params().bind(&mut tape, true);
        let (loss, report) = batch_loss(&m, &mut tape, &bound, &items, Reduction::Sum).unwrap();
        let mut singles = 0.0;
        for item in &items {
            let mut t2 = Tape::new();
            let b2 = m.params().bind(&mut t2, false);
            let l = utterance_loss(&m, &mut t2, &b2, item, Reduction::Sum).unwrap();
            singles += t2.value(l.total).data()[0];
        }
        assert!((tape.value(loss).data()[0] - singles / 2.0).abs() < 1e-12);
        assert!((report.total - report.label_ce - report.eoc_bce.unwrap()).abs() < 1e-12);
        assert_eq!(
            report.grid_entries,
            chunkwise_grid_entries(3, 5, 2) + chunkwise_grid_entries(1, 5, 2)
        );
        assert!(tape.backward(loss).is_ok());
    }
}
