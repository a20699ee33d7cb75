use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use super::{Bound, ModelConfig, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
struct Head {
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct Block {
    ln1: (ParamId, ParamId),
    heads: Vec<Head>,
    attn_bias: ParamId,
    ln2: (ParamId, ParamId),
    ff_w1: ParamId,
    ff_b1: ParamId,
    ff_w2: ParamId,
    ff_b2: ParamId,
}

/// Parameter handles of the attention encoder.
///
/// Frames are stacked `frame_reduction` at a time, linearly embedded, given sinusoidal
/// positions (plus an optional learned in-chunk phase), and passed through pre-norm blocks of
/// multi-head self-attention and a tanh feed-forward layer, each with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayout {
    input_w: ParamId,
    input_b: ParamId,
    phase: Option<ParamId>,
    blocks: Vec<Block>,
    final_ln: (ParamId, ParamId),
}

/// Encoder output in encoder-frame units.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    /// `[T × encoder_dim]`.
    pub frames: Tensor,
    /// `attention[layer][head]` is a `[T × T]` weight matrix; empty unless requested.
    pub attention: Vec<Vec<Tensor>>,
}

impl EncoderOutput {
    pub fn num_frames(&self) -> usize {
        self.frames.shape()[0]
    }
}

/// Tape handles produced by an encoder pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    pub output: Var,
    pub attention: Vec<Vec<Var>>,
}

fn sinusoid(frames: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; frames * dim];
    for t in 0..frames {
        for i in 0..dim {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = t as f64 / rate;
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![frames, dim], data).expect("numel matches")
}

/// Stacks `reduction` consecutive raw frames into one row, dropping any incomplete tail.
pub fn stack_frames(features: &Tensor, reduction: usize) -> Result<Tensor> {
    let (raw, dim) = features
        .dims2()
        .ok_or_else(|| Error::shape("encode", "features must be a matrix"))?;
    if raw < reduction || reduction == 0 {
        return Err(Error::InputTooShort {
            frames: raw,
            reduction,
        });
    }
    let frames = raw / reduction;
    let data = features.data()[..frames * reduction * dim].to_vec();
    Tensor::new(vec![frames, reduction * dim], data)
}

impl EncoderLayout {
    pub(crate) fn register(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.encoder_dim;
        let stacked = cfg.feature_dim * cfg.frame_reduction;
        let dh = d / cfg.heads;
        let input_w = store.add_uniform("encoder.input.w", vec![stacked, d], stacked, rng);
        let input_b = store.add_uniform("encoder.input.b", vec![d], stacked, rng);
        let phase = (cfg.phase_period > 0)
            .then(|| store.add_uniform("encoder.phase", vec![cfg.phase_period, d], 1, rng));
        let blocks = (0..cfg.encoder_layers)
            .map(|l| {
                let ln1 = (
                    store.add_filled(format!("encoder.{l}.ln1.g"), vec![d], 1.0),
                    store.add_filled(format!("encoder.{l}.ln1.b"), vec![d], 0.0),
                );
                let heads = (0..cfg.heads)
                    .map(|h| Head {
                        wq: store.add_uniform(
                            format!("encoder.{l}.head{h}.wq"),
                            vec![d, dh],
                            d,
                            rng,
                        ),
                        wk: store.add_uniform(
                            format!("encoder.{l}.head{h}.wk"),
                            vec![d, dh],
                            d,
                            rng,
                        ),
                        wv: store.add_uniform(
                            format!("encoder.{l}.head{h}.wv"),
                            vec![d, dh],
                            d,
                            rng,
                        ),
                        wo: store.add_uniform(
                            format!("encoder.{l}.head{h}.wo"),
                            vec![dh, d],
                            d,
                            rng,
                        ),
                    })
                    .collect();
                let attn_bias = store.add_filled(format!("encoder.{l}.attn.b"), vec![d], 0.0);
                let ln2 = (
                    store.add_filled(format!("encoder.{l}.ln2.g"), vec![d], 1.0),
                    store.add_filled(format!("encoder.{l}.ln2.b"), vec![d], 0.0),
                );
                Block {
                    ln1,
                    heads,
                    attn_bias,
                    ln2,
                    ff_w1: store.add_uniform(
                        format!("encoder.{l}.ff.w1"),
                        vec![d, cfg.ff_dim],
                        d,
                        rng,
                    ),
                    ff_b1: store.add_uniform(
                        format!("encoder.{l}.ff.b1"),
                        vec![cfg.ff_dim],
                        d,
                        rng,
                    ),
                    ff_w2: store.add_uniform(
                        format!("encoder.{l}.ff.w2"),
                        vec![cfg.ff_dim, d],
                        cfg.ff_dim,
                        rng,
                    ),
                    ff_b2: store.add_uniform(
                        format!("encoder.{l}.ff.b2"),
                        vec![d],
                        cfg.ff_dim,
                        rng,
                    ),
                }
            })
            .collect();
        let final_ln = (
            store.add_filled("encoder.final_ln.g", vec![d], 1.0),
            store.add_filled("encoder.final_ln.b", vec![d], 0.0),
        );
        Self {
            input_w,
            input_b,
            phase,
            blocks,
            final_ln,
        }
    }

    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        cfg: &ModelConfig,
        features: &Tensor,
        keep_attention: bool,
    ) -> Result<EncoderTrace> {
        if features.dims2().map(|(_, c)| c) != Some(cfg.feature_dim) {
            return Err(Error::shape(
                "encode",
                format!(
                    "features {:?}, feature_dim {}",
                    features.shape(),
                    cfg.feature_dim
                ),
            ));
        }
        let stacked = stack_frames(features, cfg.frame_reduction)?;
        let frames = stacked.shape()[0];
        let x_in = tape.constant(stacked);
        let x = tape.matmul(x_in, p[self.input_w])?;
        let x = tape.add_bias(x, p[self.input_b])?;
        let pos = tape.constant(sinusoid(frames, cfg.encoder_dim));
        let mut x = tape.add(x, pos)?;
        if let Some(phase) = self.phase {
            let rows: Vec<usize> = (0..frames).map(|t| t % cfg.phase_period).collect();
            let ph = tape.gather_rows(p[phase], &rows)?;
            x = tape.add(x, ph)?;
        }

        let mask = Rc::new(cfg.mask_mode()?.build(frames));
        let mut attention = Vec::new();
        for block in &self.blocks {
            let normed = tape.layer_norm(x, p[block.ln1.0], p[block.ln1.1])?;
            let mut mixed: Option<Var> = None;
            let mut layer_weights = Vec::new();
            for head in &block.heads {
                let q = tape.matmul(normed, p[head.wq])?;
                let k = tape.matmul(normed, p[head.wk])?;
                let v = tape.matmul(normed, p[head.wv])?;
                let (ctx, weights) = tape.attention(q, k, v, Rc::clone(&mask))?;
                let projected = tape.matmul(ctx, p[head.wo])?;
                mixed = Some(match mixed {
                    Some(acc) => tape.add(acc, projected)?,
                    None => projected,
                });
                if keep_attention {
                    layer_weights.push(weights);
                }
            }
            let mixed = tape.add_bias(mixed.expect("at least one head"), p[block.attn_bias])?;
            x = tape.add(x, mixed)?;

            let normed = tape.layer_norm(x, p[block.ln2.0], p[block.ln2.1])?;
            let h = tape.matmul(normed, p[block.ff_w1])?;
            let h = tape.add_bias(h, p[block.ff_b1])?;
            let h = tape.tanh(h)?;
            let h = tape.matmul(h, p[block.ff_w2])?;
            let h = tape.add_bias(h, p[block.ff_b2])?;
            x = tape.add(x, h)?;
            if keep_attention {
                attention.push(layer_weights);
            }
        }
        let output = tape.layer_norm(x, p[self.final_ln.0], p[self.final_ln.1])?;
        Ok(EncoderTrace { output, attention })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Model};

    fn features(raw: usize, dim: usize) -> Tensor {
        let data = (0..raw * dim)
            .map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0)
            .collect();
        Tensor::new(vec![raw, dim], data).unwrap()
    }

    #[test]
    fn frame_reduction_floors() {
        let model = Model::new(ModelConfig::default(), Architecture::Chunkwise).unwrap();
        let out = model.encode(&features(8, 8)).unwrap();
        assert_eq!(out.num_frames(), 2);
        let out = model.encode(&features(11, 8)).unwrap();
        assert_eq!(out.num_frames(), 2);
    }

    #[test]
    fn too_short_input_is_rejected() {
        let model = Model::new(ModelConfig::default(), Architecture::Chunkwise).unwrap();
        assert!(matches!(
            model.encode(&features(3, 8)),
            Err(Error::InputTooShort { .. })
        ));
    }

    #[test]
    fn offline_equals_wide_streaming() {
        let offline = ModelConfig::default();
        let streaming = ModelConfig {
            mask: "streaming".into(),
            stream_chunk: 40,
            stream_history: 40,
            ..ModelConfig::default()
        };
        let a = Model::new(offline, Architecture::Chunkwise).unwrap();
        let b = Model::new(streaming, Architecture::Chunkwise).unwrap();
        let f = features(40, 8);
        assert_eq!(a.encode(&f).unwrap().frames, b.encode(&f).unwrap().frames);
    }

    #[test]
    fn streaming_attention_respects_chunks() {
        let cfg = ModelConfig {
            mask: "streaming".into(),
            stream_chunk: 2,
            stream_history: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, Architecture::Chunkwise).unwrap();
        let out = model.encode_with_attention(&features(24, 8)).unwrap();
        assert_eq!(out.attention.len(), 2);
        let w = &out.attention[0][0];
        // Query frame 5 (index 4) only sees frames 3..=6.
        for k in 0..6 {
            assert_eq!(w.get2(4, k) > 0.0, (2..6).contains(&k), "key {k}");
        }
        for layer in &out.attention {
            for head in layer {
                for q in 0..6 {
                    let s: f64 = head.row(q).iter().sum();
                    assert!((s - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn streaming_output_ignores_future_chunks() {
        let cfg = ModelConfig {
            mask: "streaming".into(),
            stream_chunk: 2,
            stream_history: 2,
            ..ModelConfig::default()
        };
        let model = Model::new(cfg, Architecture::Chunkwise).unwrap();
        let f = features(24, 8);
        let mut g = f.clone();
        // Perturb raw frames belonging to the last encoder chunk (encoder frames 5-6).
        for v in &mut g.data_mut()[16 * 8..] {
            *v += 0.5;
        }
        let a = model.encode(&f).unwrap().frames;
        let b = model.encode(&g).unwrap().frames;
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(3), b.row(3));
        assert_ne!(a.row(4), b.row(4));
    }
}
