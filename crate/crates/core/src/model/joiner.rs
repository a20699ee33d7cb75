use rand_chacha::ChaCha8Rng;

use super::{Bound, ModelConfig, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{gemm_acc, sigmoid, softmax_into, Tape, Var};

/// Joiner parameters.
///
/// One layout serves all three formulations: the shared joiner space
/// `tanh(W_enc h_enc + W_pred h_pred + b)` and label softmax, plus (HAT and chunkwise only) a
/// sigmoid gate read out by a weight vector and scalar bias. The gate is the blank probability
/// for HAT and the end-of-chunk probability for the chunkwise joiner; the parameter shapes are
/// identical either way.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinerLayout {
    pub(crate) w_enc: ParamId,
    pub(crate) w_pred: ParamId,
    pub(crate) bias: ParamId,
    pub(crate) gate: Option<(ParamId, ParamId)>,
    pub(crate) w_label: ParamId,
    pub(crate) b_label: ParamId,
}

/// Output of one joiner evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct JoinerOutputs {
    /// Blank (HAT) or end-of-chunk (chunkwise) probability; absent for the Aligner.
    pub gate: Option<f64>,
    pub label_dist: Vec<f64>,
}

impl JoinerOutputs {
    /// `[gate, (1 - gate) · label_dist]`, the `V + 1`-way distribution.
    pub fn combined(&self) -> Option<Vec<f64>> {
        self.gate.map(|g| {
            std::iter::once(g)
                .chain(self.label_dist.iter().map(|p| (1.0 - g) * p))
                .collect()
        })
    }
}

impl JoinerLayout {
    pub(crate) fn register(
        cfg: &ModelConfig,
        with_gate: bool,
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d = cfg.joiner_dim;
        let w_enc = store.add_uniform(
            "joiner.w_enc",
            vec![cfg.encoder_dim, d],
            cfg.encoder_dim,
            rng,
        );
        let w_pred = store.add_uniform(
            "joiner.w_pred",
            vec![cfg.predictor_dim, d],
            cfg.predictor_dim,
            rng,
        );
        let bias = store.add_uniform("joiner.b", vec![d], cfg.encoder_dim, rng);
        let gate = with_gate.then(|| {
            (
                store.add_uniform("joiner.w_gate", vec![d, 1], d, rng),
                store.add_uniform("joiner.b_gate", vec![1], d, rng),
            )
        });
        let w_label = store.add_uniform("joiner.w_label", vec![d, cfg.vocab_size], d, rng);
        let b_label = store.add_uniform("joiner.b_label", vec![cfg.vocab_size], d, rng);
        Self {
            w_enc,
            w_pred,
            bias,
            gate,
            w_label,
            b_label,
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.w_enc, self.w_pred, self.bias];
        if let Some((w, b)) = self.gate {
            ids.extend([w, b]);
        }
        ids.extend([self.w_label, self.b_label]);
        ids
    }

    pub fn param_count(&self, store: &ParamStore) -> usize {
        self.ids().iter().map(|&id| store.get(id).numel()).sum()
    }

    /// Joiner space for `(encoder row, predictor row)` pairs: `[pairs × D]`.
    pub fn space_on_tape(
        &self,
        tape: &mut Tape,
        p: &Bound,
        enc: Var,
        pred: Var,
        pairs: &[(usize, usize)],
    ) -> Result<Var> {
        let enc_proj = tape.matmul(enc, p[self.w_enc])?;
        let pred_proj = tape.matmul(pred, p[self.w_pred])?;
        let enc_rows: Vec<usize> = pairs.iter().map(|&(e, _)| e).collect();
        let pred_rows: Vec<usize> = pairs.iter().map(|&(_, u)| u).collect();
        let e = tape.gather_rows(enc_proj, &enc_rows)?;
        let u = tape.gather_rows(pred_proj, &pred_rows)?;
        let sum = tape.add(e, u)?;
        let sum = tape.add_bias(sum, p[self.bias])?;
        tape.tanh(sum)
    }

    /// Gate probabilities `[rows]` for a joiner-space matrix.
    pub fn gate_on_tape(&self, tape: &mut Tape, p: &Bound, space: Var) -> Result<Var> {
        let (w, b) = self
            .gate
            .ok_or_else(|| Error::Config("this joiner has no gate".into()))?;
        let z = tape.matmul(space, p[w])?;
        let z = tape.add_bias(z, p[b])?;
        let g = tape.sigmoid(z)?;
        let rows = tape.shape(g)[0];
        tape.reshape(g, vec![rows])
    }

    /// Label distributions `[rows × V]` for a joiner-space matrix.
    pub fn labels_on_tape(&self, tape: &mut Tape, p: &Bound, space: Var) -> Result<Var> {
        let z = tape.matmul(space, p[self.w_label])?;
        let z = tape.add_bias(z, p[self.b_label])?;
        tape.softmax(z)
    }
}

/// Plain-buffer joiner weights for decoding and direct evaluation.
#[derive(Debug, Clone)]
pub struct JoinerWeights {
    pub enc_dim: usize,
    pub pred_dim: usize,
    pub dim: usize,
    pub vocab: usize,
    pub w_enc: Vec<f64>,
    pub w_pred: Vec<f64>,
    pub bias: Vec<f64>,
    pub gate: Option<(Vec<f64>, f64)>,
    pub w_label: Vec<f64>,
    pub b_label: Vec<f64>,
}

impl JoinerWeights {
    pub fn from_store(layout: &JoinerLayout, store: &ParamStore) -> Self {
        let w_enc = store.get(layout.w_enc);
        let w_label = store.get(layout.w_label);
        Self {
            enc_dim: w_enc.shape()[0],
            pred_dim: store.get(layout.w_pred).shape()[0],
            dim: w_enc.shape()[1],
            vocab: w_label.shape()[1],
            w_enc: w_enc.data().to_vec(),
            w_pred: store.get(layout.w_pred).data().to_vec(),
            bias: store.get(layout.bias).data().to_vec(),
            gate: layout
                .gate
                .map(|(w, b)| (store.get(w).data().to_vec(), store.get(b).data()[0])),
            w_label: w_label.data().to_vec(),
            b_label: store.get(layout.b_label).data().to_vec(),
        }
    }

    /// Total scalar parameter count.
    pub fn param_count(&self) -> usize {
        self.w_enc.len()
            + self.w_pred.len()
            + self.bias.len()
            + self.gate.as_ref().map_or(0, |(w, _)| w.len() + 1)
            + self.w_label.len()
            + self.b_label.len()
    }

    /// `W_enc h_enc`, reusable across every predictor state paired with that frame.
    pub fn project_enc(&self, h_enc: &[f64]) -> Result<Vec<f64>> {
        if h_enc.len() != self.enc_dim {
            return Err(Error::shape(
                "joiner",
                format!(
                    "h_enc has {} values, expected {}",
                    h_enc.len(),
                    self.enc_dim
                ),
            ));
        }
        let mut out = vec![0.0; self.dim];
        gemm_acc(h_enc, &self.w_enc, &mut out, 1, self.enc_dim, self.dim);
        Ok(out)
    }

    /// `W_pred h_pred`.
    pub fn project_pred(&self, h_pred: &[f64]) -> Result<Vec<f64>> {
        if h_pred.len() != self.pred_dim {
            return Err(Error::shape(
                "joiner",
                format!(
                    "h_pred has {} values, expected {}",
                    h_pred.len(),
                    self.pred_dim
                ),
            ));
        }
        let mut out = vec![0.0; self.dim];
        gemm_acc(h_pred, &self.w_pred, &mut out, 1, self.pred_dim, self.dim);
        Ok(out)
    }

    /// Joiner space from pre-projected inputs.
    pub fn space(&self, enc_proj: &[f64], pred_proj: &[f64]) -> Vec<f64> {
        enc_proj
            .iter()
            .zip(pred_proj)
            .zip(&self.bias)
            .map(|((e, p), b)| (e + p + b).tanh())
            .collect()
    }

    /// Gate probability for a joiner-space vector; `None` without a gate.
    pub fn gate(&self, space: &[f64]) -> Option<f64> {
        self.gate.as_ref().map(|(w, b)| {
            let z: f64 = space.iter().zip(w).map(|(h, w)| h * w).sum::<f64>() + b;
            sigmoid(z)
        })
    }

    pub fn label_dist(&self, space: &[f64]) -> Vec<f64> {
        let mut logits = vec![0.0; self.vocab];
        gemm_acc(space, &self.w_label, &mut logits, 1, self.dim, self.vocab);
        for (l, b) in logits.iter_mut().zip(&self.b_label) {
            *l += b;
        }
        let mut out = vec![0.0; self.vocab];
        softmax_into(&logits, &mut out);
        out
    }

    fn evaluate(&self, h_enc: &[f64], h_pred: &[f64]) -> Result<JoinerOutputs> {
        let space = self.space(&self.project_enc(h_enc)?, &self.project_pred(h_pred)?);
        Ok(JoinerOutputs {
            gate: self.gate(&space),
            label_dist: self.label_dist(&space),
        })
    }
}

/// HAT joiner: blank probability and label distribution for one `(t, u)` pair.
pub fn hat_joiner(h_enc: &[f64], h_pred: &[f64], params: &JoinerWeights) -> Result<JoinerOutputs> {
    if params.gate.is_none() {
        return Err(Error::Config("HAT joiner requires blank parameters".into()));
    }
    params.evaluate(h_enc, h_pred)
}

/// Aligner joiner: label distribution only; the caller pairs encoder frame `u` with predictor step `u`.
pub fn aligner_joiner(
    h_enc: &[f64],
    h_pred: &[f64],
    params: &JoinerWeights,
) -> Result<JoinerOutputs> {
    let mut out = params.evaluate(h_enc, h_pred)?;
    out.gate = None;
    Ok(out)
}

/// Chunkwise joiner: end-of-chunk probability and label distribution. The caller supplies the
/// encoder frame `(n-1)·L_c + u_n` of chunk `n`.
pub fn chunkwise_joiner(
    h_enc: &[f64],
    h_pred: &[f64],
    params: &JoinerWeights,
) -> Result<JoinerOutputs> {
    if params.gate.is_none() {
        return Err(Error::Config(
            "chunkwise joiner requires end-of-chunk parameters".into(),
        ));
    }
    params.evaluate(h_enc, h_pred)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Architecture, Model};

    fn zeroed(arch: Architecture) -> JoinerWeights {
        let m = Model::new(ModelConfig::default(), arch).unwrap();
        let mut w = m.joiner_weights();
        for buf in [
            &mut w.w_enc,
            &mut w.w_pred,
            &mut w.bias,
            &mut w.w_label,
            &mut w.b_label,
        ] {
            buf.iter_mut().for_each(|v| *v = 0.0);
        }
        if let Some((g, b)) = w.gate.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
            *b = 0.0;
        }
        w
    }

    #[test]
    fn zero_params_give_half_gate_and_uniform_labels() {
        for arch in [Architecture::Transducer, Architecture::Chunkwise] {
            let w = zeroed(arch);
            let out = hat_joiner(&[0.3; 32], &[-0.1; 32], &w).unwrap();
            assert_eq!(out.gate, Some(0.5));
            for p in &out.label_dist {
                assert!((p - 1.0 / 18.0).abs() < 1e-15);
            }
        }
        let w = zeroed(Architecture::Aligner);
        let out = aligner_joiner(&[0.3; 32], &[-0.1; 32], &w).unwrap();
        assert_eq!(out.gate, None);
        assert!(out
            .label_dist
            .iter()
            .all(|p| (p - 1.0 / 18.0).abs() < 1e-15));
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = Model::new(ModelConfig::default(), Architecture::Chunkwise).unwrap();
        let w = m.joiner_weights();
        assert!(chunkwise_joiner(&[0.0; 31], &[0.0; 32], &w).is_err());
        assert!(chunkwise_joiner(&[0.0; 32], &[0.0; 5], &w).is_err());
    }

    #[test]
    fn aligner_label_dist_matches_hat_with_shared_params() {
        let m = Model::new(ModelConfig::default(), Architecture::Transducer).unwrap();
        let w = m.joiner_weights();
        let he: Vec<f64> = (0..32).map(|i| (i as f64 * 0.37).sin()).collect();
        let hp: Vec<f64> = (0..32).map(|i| (i as f64 * 0.11).cos()).collect();
        let hat = hat_joiner(&he, &hp, &w).unwrap();
        let al = aligner_joiner(&he, &hp, &w).unwrap();
        assert_eq!(hat.label_dist, al.label_dist);
    }

    #[test]
    fn combined_distribution_sums_to_one() {
        let m = Model::new(ModelConfig::default(), Architecture::Chunkwise).unwrap();
        let w = m.joiner_weights();
        let he: Vec<f64> = (0..32).map(|i| (i as f64 * 1.7).sin() * 2.0).collect();
        let hp: Vec<f64> = (0..32).map(|i| (i as f64 * 0.9).cos()).collect();
        let out = chunkwise_joiner(&he, &hp, &w).unwrap();
        let total: f64 = out.combined().unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!((out.label_dist.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}
