use rand_chacha::ChaCha8Rng;

use super::{Bound, ModelConfig, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// Recurrent predictor: `s_u = tanh(E[y_{u-1}] + W_h s_{u-1} + b)`, with `h_pred_u = s_u`.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorLayout {
    embed: ParamId,
    w_h: ParamId,
    b: ParamId,
}

/// Hidden state carried between predictor steps.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorState(pub Vec<f64>);

impl PredictorState {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }
}

impl PredictorLayout {
    pub(crate) fn register(
        cfg: &ModelConfig,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.predictor_dim;
        Self {
            embed: store.add_uniform("predictor.embed", vec![cfg.vocab_size, d], 1, rng),
            w_h: store.add_uniform("predictor.w_h", vec![d, d], d, rng),
            b: store.add_uniform("predictor.b", vec![d], d, rng),
        }
    }

    /// Runs the recurrence from the zero state over `inputs`, returning `[len × D″]` outputs.
    /// Row `u` is `h_pred_{u+1}`, the embedding of the prefix `inputs[..=u]`.
    pub(crate) fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        vocab: usize,
        inputs: &[usize],
    ) -> Result<Var> {
        if let Some(&bad) = inputs.iter().find(|&&t| t >= vocab) {
            return Err(Error::UnknownToken { token: bad, vocab });
        }
        let emb = tape.gather_rows(p[self.embed], inputs)?;
        let pre = tape.add_bias(emb, p[self.b])?;
        let mut outputs = Vec::with_capacity(inputs.len());
        let mut state: Option<Var> = None;
        for u in 0..inputs.len() {
            let row = tape.slice_rows(pre, u, u + 1)?;
            let z = match state {
                Some(s) => {
                    let rec = tape.matmul(s, p[self.w_h])?;
                    tape.add(row, rec)?
                }
                None => row,
            };
            let s = tape.tanh(z)?;
            outputs.push(s);
            state = Some(s);
        }
        tape.concat_rows(&outputs)
    }
}

/// Plain-buffer predictor weights for decoding.
#[derive(Debug, Clone)]
pub struct PredictorWeights {
    dim: usize,
    vocab: usize,
    embed: Vec<f64>,
    w_h: Vec<f64>,
    b: Vec<f64>,
}

impl PredictorWeights {
    pub fn from_store(layout: &PredictorLayout, store: &ParamStore) -> Self {
        let embed = store.get(layout.embed);
        Self {
            dim: embed.shape()[1],
            vocab: embed.shape()[0],
            embed: embed.data().to_vec(),
            w_h: store.get(layout.w_h).data().to_vec(),
            b: store.get(layout.b).data().to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// One step: consumes `token` from `state`, returning `(h_pred, next_state)`.
    pub fn step(&self, token: usize, state: &PredictorState) -> Result<(Vec<f64>, PredictorState)> {
        if token >= self.vocab {
            return Err(Error::UnknownToken {
                token,
                vocab: self.vocab,
            });
        }
        let d = self.dim;
        let mut z: Vec<f64> = self.embed[token * d..(token + 1) * d]
            .iter()
            .zip(&self.b)
            .map(|(e, b)| e + b)
            .collect();
        let mut rec = vec![0.0; d];
        crate::tensor::gemm_acc(&state.0, &self.w_h, &mut rec, 1, d, d);
        for (zi, r) in z.iter_mut().zip(&rec) {
            *zi = (*zi + r).tanh();
        }
        Ok((z.clone(), PredictorState(z)))
    }
}
