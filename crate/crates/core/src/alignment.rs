//! Forced alignments and the chunkwise training grid built from them.
//!
//! Frame indices in this module are 1-based encoder frames, matching the serialized dataset.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::EOS;

/// One encoder-frame index (the label's end frame) per label, nondecreasing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForcedAlignment {
    frames: Vec<usize>,
    total_frames: usize,
}

impl ForcedAlignment {
    pub fn new(frames: Vec<usize>, total_frames: usize) -> Result<Self> {
        if let Some(&f) = frames.iter().find(|&&f| f == 0 || f > total_frames) {
            return Err(Error::Alignment(format!(
                "frame {f} outside 1..={total_frames}"
            )));
        }
        if frames.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Alignment("frames must be nondecreasing".into()));
        }
        Ok(Self {
            frames,
            total_frames,
        })
    }

    pub fn frames(&self) -> &[usize] {
        &self.frames
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn num_labels(&self) -> usize {
        self.frames.len()
    }

    /// Appends an `<eos>` label aligned to the last frame.
    pub fn with_eos(&self) -> Self {
        let mut frames = self.frames.clone();
        frames.push(self.total_frames);
        Self {
            frames,
            total_frames: self.total_frames,
        }
    }
}

/// `tokens` followed by `<eos>`.
pub fn append_eos(tokens: &[usize]) -> Vec<usize> {
    let mut out = tokens.to_vec();
    out.push(EOS);
    out
}

/// Result of shifting an alignment later in time.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delayed {
    pub alignment: ForcedAlignment,
    /// Labels whose shifted frame was clamped to the last frame.
    pub clamped: usize,
}

/// Shifts every frame by `delay_frames`, clamping at the last frame.
pub fn apply_delay(a: &ForcedAlignment, delay_frames: usize) -> Delayed {
    let mut clamped = 0;
    let frames = a
        .frames
        .iter()
        .map(|&f| {
            let shifted = f + delay_frames;
            if shifted > a.total_frames {
                clamped += 1;
                a.total_frames
            } else {
                shifted
            }
        })
        .collect();
    Delayed {
        alignment: ForcedAlignment {
            frames,
            total_frames: a.total_frames,
        },
        clamped,
    }
}

/// Delay in encoder frames for a delay given in milliseconds.
pub fn delay_ms_to_frames(delay_ms: usize, stride_ms: usize, frame_reduction: usize) -> usize {
    delay_ms / (stride_ms * frame_reduction)
}

/// Labels grouped into fixed-length chunks of the encoder output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChunkAssignment {
    chunk_len: usize,
    total_frames: usize,
    counts: Vec<usize>,
    /// `(chunk n, rank u_n)` per label, both 1-based.
    slots: Vec<(usize, usize)>,
}

impl ChunkAssignment {
    /// Builds an assignment from per-chunk label counts; labels fill chunks in order.
    pub fn from_counts(chunk_len: usize, total_frames: usize, counts: Vec<usize>) -> Result<Self> {
        if chunk_len < 2 {
            return Err(Error::Config(format!(
                "chunk length {chunk_len} must be at least 2"
            )));
        }
        if counts.len() != total_frames.div_ceil(chunk_len) {
            return Err(Error::Alignment(format!(
                "{} chunk counts for {} chunks",
                counts.len(),
                total_frames.div_ceil(chunk_len)
            )));
        }
        let slots = counts
            .iter()
            .enumerate()
            .flat_map(|(n, &c)| (1..=c).map(move |r| (n + 1, r)))
            .collect();
        Ok(Self {
            chunk_len,
            total_frames,
            counts,
            slots,
        })
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    /// Number of chunks `N = ⌈T / L_c⌉`.
    pub fn num_chunks(&self) -> usize {
        self.counts.len()
    }

    pub fn num_labels(&self) -> usize {
        self.slots.len()
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn slots(&self) -> &[(usize, usize)] {
        &self.slots
    }

    /// First frame (1-based) of chunk `n` (1-based).
    pub fn chunk_start(&self, n: usize) -> usize {
        (n - 1) * self.chunk_len + 1
    }

    /// Frames in chunk `n`; only the last chunk may be short.
    pub fn chunk_frames(&self, n: usize) -> usize {
        (n * self.chunk_len).min(self.total_frames) - (n - 1) * self.chunk_len
    }

    /// Labels chunk `n` can hold: one frame is reserved for its end-of-chunk entry.
    pub fn capacity(&self, n: usize) -> usize {
        self.chunk_frames(n) - 1
    }

    pub fn check_capacity(&self) -> Result<()> {
        for (i, &count) in self.counts.iter().enumerate() {
            let capacity = self.capacity(i + 1);
            if count > capacity {
                return Err(Error::Capacity {
                    chunk: i + 1,
                    count,
                    capacity,
                });
            }
        }
        Ok(())
    }

    pub fn total_capacity(&self) -> usize {
        (1..=self.num_chunks()).map(|n| self.capacity(n)).sum()
    }
}

/// Places each label in chunk `⌈f / L_c⌉` without checking capacity.
pub fn assign_unchecked(a: &ForcedAlignment, chunk_len: usize) -> Result<ChunkAssignment> {
    if chunk_len < 2 {
        return Err(Error::Config(format!(
            "chunk length {chunk_len} must be at least 2"
        )));
    }
    let mut counts = vec![0; a.total_frames.div_ceil(chunk_len)];
    for &f in &a.frames {
        counts[f.div_ceil(chunk_len) - 1] += 1;
    }
    ChunkAssignment::from_counts(chunk_len, a.total_frames, counts)
}

/// Places each label in chunk `⌈f / L_c⌉`, failing if any chunk exceeds its capacity.
pub fn assign_to_chunks(a: &ForcedAlignment, chunk_len: usize) -> Result<ChunkAssignment> {
    let c = assign_unchecked(a, chunk_len)?;
    c.check_capacity()?;
    Ok(c)
}

/// Moves labels that overflow a chunk, in order, into the earliest later chunk with room.
pub fn repair_spill(c: &ChunkAssignment) -> Result<ChunkAssignment> {
    let labels = c.num_labels();
    let mut counts = Vec::with_capacity(c.num_chunks());
    let mut carried = 0;
    for n in 1..=c.num_chunks() {
        let pending = carried + c.counts[n - 1];
        let kept = pending.min(c.capacity(n));
        counts.push(kept);
        carried = pending - kept;
    }
    if carried > 0 {
        return Err(Error::Unrepairable {
            labels,
            capacity: c.total_capacity(),
        });
    }
    ChunkAssignment::from_counts(c.chunk_len, c.total_frames, counts)
}

/// What to do when a chunk holds more labels than it has room for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapacityPolicy {
    #[default]
    Strict,
    Repair,
}

/// Assigns labels to chunks, applying `policy` on overflow.
pub fn prepare_assignment(
    a: &ForcedAlignment,
    chunk_len: usize,
    policy: CapacityPolicy,
) -> Result<ChunkAssignment> {
    let c = assign_unchecked(a, chunk_len)?;
    match (c.check_capacity(), policy) {
        (Ok(()), _) => Ok(c),
        (Err(_), CapacityPolicy::Repair) => repair_spill(&c),
        (Err(e), CapacityPolicy::Strict) => Err(e),
    }
}

/// One end-of-chunk training entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EocEntry {
    /// Encoder frame, 1-based.
    pub frame: usize,
    /// Predictor step `u`, 1-based: `h_pred_u` encodes the first `u - 1` labels.
    pub pred_step: usize,
    pub target: u8,
}

/// The `(U + N) × 1` end-of-chunk target grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EocTargetGrid {
    pub entries: Vec<EocEntry>,
}

impl EocTargetGrid {
    pub fn targets(&self) -> Vec<u8> {
        self.entries.iter().map(|e| e.target).collect()
    }
}

/// Per chunk: one target-0 entry per label at the chunk's leftmost frames, then a target-1
/// entry on the next frame paired with the predictor step that has seen all labels so far.
pub fn build_eoc_targets(c: &ChunkAssignment) -> Result<EocTargetGrid> {
    c.check_capacity()?;
    let mut entries = Vec::with_capacity(c.num_labels() + c.num_chunks());
    let mut before = 0;
    for n in 1..=c.num_chunks() {
        let start = c.chunk_start(n);
        let count = c.counts[n - 1];
        for j in 1..=count {
            entries.push(EocEntry {
                frame: start + j - 1,
                pred_step: before + j,
                target: 0,
            });
        }
        before += count;
        entries.push(EocEntry {
            frame: start + count,
            pred_step: before + 1,
            target: 1,
        });
    }
    Ok(EocTargetGrid { entries })
}

/// Whether a joiner evaluation trains a label or a chunk transition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairKind {
    /// Label entry carrying the target token.
    Label(usize),
    Eoc,
}

/// One joiner evaluation of the chunkwise training forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct JoinerPair {
    /// Encoder frame, 1-based.
    pub frame: usize,
    /// Predictor step, 1-based.
    pub pred_step: usize,
    pub kind: PairKind,
    pub eoc_target: u8,
}

/// Every `(frame, predictor step)` pair the chunkwise loss evaluates: `U` label entries plus
/// `N` final end-of-chunk entries, in the same order as [`build_eoc_targets`].
pub fn build_joiner_pairs(c: &ChunkAssignment, labels: &[usize]) -> Result<Vec<JoinerPair>> {
    if labels.len() != c.num_labels() {
        return Err(Error::Alignment(format!(
            "{} labels for an assignment of {}",
            labels.len(),
            c.num_labels()
        )));
    }
    let grid = build_eoc_targets(c)?;
    Ok(grid
        .entries
        .iter()
        .map(|e| JoinerPair {
            frame: e.frame,
            pred_step: e.pred_step,
            kind: if e.target == 1 {
                PairKind::Eoc
            } else {
                PairKind::Label(labels[e.pred_step - 1])
            },
            eoc_target: e.target,
        })
        .collect())
}
