//! Encoder, predictor and joiners as parameterized differentiable functions.

mod checkpoint;
mod encoder;
mod joiner;
mod params;
mod predictor;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC,
};
pub use encoder::{EncoderLayout, EncoderOutput, EncoderTrace};
pub use joiner::{
    aligner_joiner, chunkwise_joiner, hat_joiner, JoinerLayout, JoinerOutputs, JoinerWeights,
};
pub use params::{Bound, ParamId, ParamStore};
pub use predictor::{PredictorLayout, PredictorState, PredictorWeights};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{AttentionMask, Tape, Tensor, Var};

/// Token id of `<sos>`; a row of the embedding and output tables like any other token.
pub const SOS: usize = 0;
/// Token id of `<eos>`.
pub const EOS: usize = 1;
/// First id used for ordinary (synthetic) tokens.
pub const FIRST_TOKEN: usize = 2;

/// Which joiner formulation and training objective a model uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Transducer,
    Aligner,
    Chunkwise,
}

impl Architecture {
    /// HAT and chunkwise joiners carry a sigmoid gate (blank / end-of-chunk); the Aligner does not.
    pub fn has_gate(self) -> bool {
        !matches!(self, Architecture::Aligner)
    }

    pub fn name(self) -> &'static str {
        match self {
            Architecture::Transducer => "transducer",
            Architecture::Aligner => "aligner",
            Architecture::Chunkwise => "chunkwise",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transducer" | "hat" => Ok(Self::Transducer),
            "aligner" => Ok(Self::Aligner),
            "chunkwise" => Ok(Self::Chunkwise),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Encoder self-attention visibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Offline,
    /// Block streaming: each query sees its `current_chunk`-frame chunk plus `history` earlier frames.
    Streaming {
        current_chunk: usize,
        history: usize,
    },
}

impl MaskMode {
    pub fn build(self, frames: usize) -> AttentionMask {
        match self {
            MaskMode::Offline => AttentionMask::full(frames),
            MaskMode::Streaming {
                current_chunk,
                history,
            } => AttentionMask::streaming(frames, current_chunk, history),
        }
    }
}

/// Model hyperparameters. Kept flat so it serializes as a single config section.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub frame_reduction: usize,
    pub encoder_dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub predictor_dim: usize,
    pub joiner_dim: usize,
    /// Output/embedding table size, including `<sos>` and `<eos>`.
    pub vocab_size: usize,
    /// `"offline"` or `"streaming"`.
    pub mask: String,
    pub stream_chunk: usize,
    pub stream_history: usize,
    /// Chunk length `L_c` of the chunkwise model, in encoder frames.
    pub chunk_len: usize,
    /// Period of the learned in-chunk position embedding; 0 disables it.
    pub phase_period: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 8,
            frame_reduction: 4,
            encoder_dim: 32,
            encoder_layers: 2,
            heads: 2,
            ff_dim: 64,
            predictor_dim: 32,
            joiner_dim: 32,
            vocab_size: 18,
            mask: "offline".into(),
            stream_chunk: 8,
            stream_history: 8,
            chunk_len: 8,
            phase_period: 8,
            init_seed: 7,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("feature_dim", self.feature_dim),
            ("frame_reduction", self.frame_reduction),
            ("encoder_dim", self.encoder_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("predictor_dim", self.predictor_dim),
            ("joiner_dim", self.joiner_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.vocab_size < 2 {
            return Err(Error::Config("vocab_size must be at least 2".into()));
        }
        if !self.encoder_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "encoder_dim {} not divisible by heads {}",
                self.encoder_dim, self.heads
            )));
        }
        if self.chunk_len < 2 {
            return Err(Error::Config(format!(
                "chunk_len {} must be at least 2",
                self.chunk_len
            )));
        }
        self.mask_mode()?;
        Ok(())
    }

    pub fn mask_mode(&self) -> Result<MaskMode> {
        match self.mask.as_str() {
            "offline" => Ok(MaskMode::Offline),
            "streaming" => {
                if self.stream_chunk == 0 {
                    return Err(Error::Config("stream_chunk must be at least 1".into()));
                }
                Ok(MaskMode::Streaming {
                    current_chunk: self.stream_chunk,
                    history: self.stream_history,
                })
            }
            other => Err(Error::Config(format!("unknown mask mode {other:?}"))),
        }
    }
}

/// A complete encoder-predictor-joiner model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    arch: Architecture,
    params: ParamStore,
    encoder: EncoderLayout,
    predictor: PredictorLayout,
    joiner: JoinerLayout,
}

impl Model {
    /// Builds a freshly initialized model; identical configs give identical parameters.
    pub fn new(config: ModelConfig, arch: Architecture) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut params = ParamStore::new();
        let encoder = EncoderLayout::register(&config, &mut params, &mut rng);
        let predictor = PredictorLayout::register(&config, &mut params, &mut rng);
        let joiner = JoinerLayout::register(&config, arch.has_gate(), &mut params, &mut rng);
        Ok(Self {
            config,
            arch,
            params,
            encoder,
            predictor,
            joiner,
        })
    }

    /// Rebuilds a model around an existing parameter store, checking names and shapes.
    pub fn from_params(
        config: ModelConfig,
        arch: Architecture,
        params: ParamStore,
    ) -> Result<Self> {
        let mut model = Self::new(config, arch)?;
        if model.params.len() != params.len() {
            return Err(Error::Format(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for id in model.params.ids() {
            let (want_name, want) = (model.params.name(id), model.params.get(id));
            let (got_name, got) = (params.name(id), params.get(id));
            if want_name != got_name || want.shape() != got.shape() {
                return Err(Error::Format(format!(
                    "parameter {got_name} {:?} does not match expected {want_name} {:?}",
                    got.shape(),
                    want.shape()
                )));
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn arch(&self) -> Architecture {
        self.arch
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn encoder_layout(&self) -> &EncoderLayout {
        &self.encoder
    }

    pub fn predictor_layout(&self) -> &PredictorLayout {
        &self.predictor
    }

    pub fn joiner_layout(&self) -> &JoinerLayout {
        &self.joiner
    }

    /// Number of scalar parameters in the joiner.
    pub fn joiner_param_count(&self) -> usize {
        self.joiner.param_count(&self.params)
    }

    /// Encoder forward pass on the tape.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &Tensor,
        keep_attention: bool,
    ) -> Result<EncoderTrace> {
        self.encoder
            .forward(tape, bound, &self.config, features, keep_attention)
    }

    /// Predictor outputs for an input token sequence (normally `<sos>` followed by the labels).
    pub fn predict_on_tape(&self, tape: &mut Tape, bound: &Bound, inputs: &[usize]) -> Result<Var> {
        self.predictor
            .forward(tape, bound, self.config.vocab_size, inputs)
    }

    /// Inference-mode encoder pass.
    pub fn encode(&self, features: &Tensor) -> Result<EncoderOutput> {
        self.encode_inner(features, false)
    }

    /// Inference-mode encoder pass that also returns per-layer, per-head attention weights.
    pub fn encode_with_attention(&self, features: &Tensor) -> Result<EncoderOutput> {
        self.encode_inner(features, true)
    }

    fn encode_inner(&self, features: &Tensor, keep_attention: bool) -> Result<EncoderOutput> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let trace = self.encode_on_tape(&mut tape, &bound, features, keep_attention)?;
        Ok(EncoderOutput {
            frames: tape.value(trace.output).clone(),
            attention: trace
                .attention
                .iter()
                .map(|layer| layer.iter().map(|&w| tape.value(w).clone()).collect())
                .collect(),
        })
    }

    pub fn predictor_weights(&self) -> PredictorWeights {
        PredictorWeights::from_store(&self.predictor, &self.params)
    }

    pub fn joiner_weights(&self) -> JoinerWeights {
        JoinerWeights::from_store(&self.joiner, &self.params)
    }

    /// One recurrent predictor step outside any tape.
    pub fn predictor_step(
        &self,
        token: usize,
        state: &PredictorState,
    ) -> Result<(Vec<f64>, PredictorState)> {
        self.predictor_weights().step(token, state)
    }

    pub fn initial_predictor_state(&self) -> PredictorState {
        PredictorState::zeros(self.config.predictor_dim)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            vocab_size: 1,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            frame_reduction: 0,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            mask: "sideways".into(),
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = Model::new(ModelConfig::default(), Architecture::Chunkwise).unwrap();
        let b = Model::new(ModelConfig::default(), Architecture::Chunkwise).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn hat_and_chunkwise_share_parameter_shapes() {
        let hat = Model::new(ModelConfig::default(), Architecture::Transducer).unwrap();
        let cw = Model::new(ModelConfig::default(), Architecture::Chunkwise).unwrap();
        let al = Model::new(ModelConfig::default(), Architecture::Aligner).unwrap();
        assert_eq!(hat.joiner_param_count(), cw.joiner_param_count());
        let cfg = ModelConfig::default();
        assert_eq!(
            al.joiner_param_count() + cfg.joiner_dim + 1,
            hat.joiner_param_count()
        );
        let shapes = |m: &Model| {
            m.params()
                .iter()
                .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                .collect::<Vec<_>>()
        };
        assert_eq!(shapes(&hat), shapes(&cw));
        // Swapping parameter sets between the two joiners is well-formed.
        assert!(Model::from_params(cfg, Architecture::Chunkwise, hat.params().clone()).is_ok());
    }
}
