use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::alignment::{assign_unchecked, repair_spill};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::synthdata::Utterance;
use crate::tensor::Tensor;

/// Attention of one head with its per-chunk leftmost-frame mass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadAttention {
    pub head: usize,
    /// `[T × T]`, rows are queries.
    pub weights: Tensor,
    /// Per chunk: mean over the chunk's queries of the weight on its leftmost `U_n + 1` frames.
    pub leftmost_mass: Vec<f64>,
}

impl HeadAttention {
    pub fn mean_leftmost_mass(&self) -> f64 {
        self.leftmost_mass.iter().sum::<f64>() / self.leftmost_mass.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionReport {
    pub id: String,
    pub layer: usize,
    pub chunk_len: usize,
    /// Labels (including `<eos>`) per chunk.
    pub counts: Vec<usize>,
    pub heads: Vec<HeadAttention>,
}

impl AttentionReport {
    pub fn mean_leftmost_mass(&self) -> f64 {
        self.heads
            .iter()
            .map(HeadAttention::mean_leftmost_mass)
            .sum::<f64>()
            / self.heads.len().max(1) as f64
    }
}

/// Per-head attention of one encoder layer for one utterance.
pub fn inspect_attention(model: &Model, utt: &Utterance, layer: usize) -> Result<AttentionReport> {
    let layers = model.config().encoder_layers;
    if layer >= layers {
        return Err(Error::Config(format!("layer {layer} outside 0..{layers}")));
    }
    let chunk_len = model.config().chunk_len;
    let enc = model.encode_with_attention(&utt.features)?;
    let frames = enc.num_frames();
    if frames != utt.alignment.total_frames() {
        return Err(Error::Alignment(format!(
            "utterance has {} aligned frames, encoder produced {frames}",
            utt.alignment.total_frames()
        )));
    }
    let assignment = repair_spill(&assign_unchecked(&utt.alignment.with_eos(), chunk_len)?)?;
    let counts = assignment.counts().to_vec();
    let heads = enc.attention[layer]
        .iter()
        .enumerate()
        .map(|(head, w)| HeadAttention {
            head,
            leftmost_mass: leftmost_mass(w, chunk_len, &counts),
            weights: w.clone(),
        })
        .collect();
    Ok(AttentionReport {
        id: utt.id.clone(),
        layer,
        chunk_len,
        counts,
        heads,
    })
}

/// For chunk `n`, the average over its query rows of the weight placed on key frames
/// `(n-1)·L_c .. (n-1)·L_c + U_n + 1` (0-based, clipped to the chunk).
pub fn leftmost_mass(weights: &Tensor, chunk_len: usize, counts: &[usize]) -> Vec<f64> {
    let frames = weights.shape()[0];
    counts
        .iter()
        .enumerate()
        .map(|(n, &c)| {
            let start = n * chunk_len;
            let end = ((n + 1) * chunk_len).min(frames);
            let keys = start..(start + c + 1).min(end);
            let total: f64 = (start..end)
                .map(|q| keys.clone().map(|k| weights.get2(q, k)).sum::<f64>())
                .sum();
            total / (end - start) as f64
        })
        .collect()
}

/// Tab-separated matrix, one row per line.
pub fn to_tsv(m: &Tensor) -> String {
    let (rows, cols) = m.dims2().expect("matrix");
    let mut s = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                s.push('\t');
            }
            write!(s, "{:.17e}", m.get2(r, c)).expect("string write");
        }
        s.push('\n');
    }
    s
}

/// Parses [`to_tsv`] output.
pub fn from_tsv(text: &str) -> Result<Tensor> {
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| {
            l.split('\t')
                .map(|v| v.parse::<f64>().map_err(|e| Error::Format(e.to_string())))
                .collect()
        })
        .collect::<Result<_>>()?;
    Tensor::from_rows(&rows)
}

/// Binary graymap (P5): darker is heavier; every cell is `scale × scale` pixels and chunk
/// boundaries are drawn as mid-gray lines.
pub fn to_pgm(m: &Tensor, chunk_len: usize, scale: usize) -> Vec<u8> {
    let (rows, cols) = m.dims2().expect("matrix");
    let scale = scale.max(1);
    let (h, w) = (rows * scale, cols * scale);
    let max = m.data().iter().copied().fold(f64::MIN_POSITIVE, f64::max);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    let boundary = |p: usize| chunk_len > 0 && p > 0 && p.is_multiple_of(chunk_len * scale);
    for y in 0..h {
        for x in 0..w {
            let px = if boundary(x) || boundary(y) {
                128
            } else {
                let v = m.get2(y / scale, x / scale) / max;
                (255.0 * (1.0 - v)).round().clamp(0.0, 255.0) as u8
            };
            out.push(px);
        }
    }
    out
}

/// Writes `<stem>_l<layer>_h<head>.tsv` and `.pgm` for every head into `dir`.
pub fn export_attention(
    report: &AttentionReport,
    dir: &Path,
    stem: &str,
) -> Result<Vec<std::path::PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for h in &report.heads {
        let base = format!("{stem}_l{}_h{}", report.layer, h.head);
        let tsv = dir.join(format!("{base}.tsv"));
        fs::write(&tsv, to_tsv(&h.weights))?;
        let pgm = dir.join(format!("{base}.pgm"));
        fs::write(&pgm, to_pgm(&h.weights, report.chunk_len, 4))?;
        written.push(tsv);
        written.push(pgm);
    }
    Ok(written)
}

/// Summary row for reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionSummary {
    pub id: String,
    pub layer: usize,
    pub counts: Vec<usize>,
    /// Per head, per chunk.
    pub leftmost_mass: Vec<Vec<f64>>,
    pub mean_leftmost_mass: f64,
}

impl From<&AttentionReport> for AttentionSummary {
    fn from(r: &AttentionReport) -> Self {
        Self {
            id: r.id.clone(),
            layer: r.layer,
            counts: r.counts.clone(),
            leftmost_mass: r.heads.iter().map(|h| h.leftmost_mass.clone()).collect(),
            mean_leftmost_mass: r.mean_leftmost_mass(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, ModelConfig};
    use crate::synthdata::{generate_dataset, SynthTaskConfig};

    #[test]
    fn uniform_rows_give_window_fractions() {
        let t = 10;
        let w = Tensor::new(vec![t, t], vec![1.0 / t as f64; t * t]).unwrap();
        // Chunks of 4, 4 and 2 frames holding 1, 2 and 0 labels.
        let mass = leftmost_mass(&w, 4, &[1, 2, 0]);
        let expect = [0.2, 0.3, 0.1];
        for (m, e) in mass.iter().zip(expect) {
            assert!((m - e).abs() < 1e-12);
        }
    }

    #[test]
    fn exports_round_trip() {
        let m = Tensor::new(vec![2, 2], vec![0.25, 0.75, 1.0 / 3.0, 2.0 / 3.0]).unwrap();
        assert_eq!(from_tsv(&to_tsv(&m)).unwrap(), m);
        let pgm = to_pgm(&m, 0, 3);
        let header = b"P5\n6 6\n255\n";
        assert!(pgm.starts_with(header));
        assert_eq!(pgm.len(), header.len() + 36);
        // Darkest cell is the largest weight.
        assert_eq!(pgm[header.len() + 3], 0);
        let grid = to_pgm(&m, 1, 3);
        assert_eq!(grid[header.len() + 3], 128);
    }

    #[test]
    fn layer_bounds_and_row_sums() {
        let task = SynthTaskConfig::default();
        let data = generate_dataset(&task, 10).unwrap();
        let model = Model::new(ModelConfig::default(), Architecture::Chunkwise).unwrap();
        assert!(matches!(
            inspect_attention(&model, &data.test[0], 2),
            Err(Error::Config(_))
        ));
        let r = inspect_attention(&model, &data.test[0], 1).unwrap();
        assert_eq!(r.heads.len(), model.config().heads);
        assert_eq!(
            r.counts.iter().sum::<usize>(),
            data.test[0].tokens.len() + 1
        );
        for h in &r.heads {
            let (rows, cols) = h.weights.dims2().unwrap();
            for q in 0..rows {
                let s: f64 = (0..cols).map(|k| h.weights.get2(q, k)).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
            assert!(h
                .leftmost_mass
                .iter()
                .all(|&m| (0.0..=1.0 + 1e-12).contains(&m)));
        }
    }
}
