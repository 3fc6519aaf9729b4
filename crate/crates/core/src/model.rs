use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncodedSeq, EncoderConfig, EncoderVars, ToyEncoderParams};
use crate::error::{Error, Result};
use crate::heads::{self, Ablation, HeadNodes, HeadOutputs, Heads, HeadsVars};
use crate::numkernel::{ParamSet, Tape, Tensor2, Var};
use crate::subword::TokenSeq;

/// Dropout applied to `H` before each head during training.
pub const DEFAULT_HEAD_DROPOUT: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub ablation: Ablation,
    pub head_dropout: f64,
}

impl ModelConfig {
    pub fn new(vocab: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::new(vocab),
            ablation: Ablation::default(),
            head_dropout: DEFAULT_HEAD_DROPOUT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if !(0.0..1.0).contains(&self.head_dropout) {
            return Err(Error::Config(format!(
                "head dropout {} not in [0, 1)",
                self.head_dropout
            )));
        }
        Ok(())
    }
}

/// Toy encoder plus extraction heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: ToyEncoderParams,
    pub heads: Heads,
}

pub struct ModelVars {
    encoder: EncoderVars,
    heads: HeadsVars,
}

impl ParamSet for Model {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor2)) {
        self.encoder.visit(&format!("{prefix}enc."), f);
        self.heads.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor2)) {
        self.encoder.visit_mut(&format!("{prefix}enc."), f);
        self.heads.visit_mut(prefix, f);
    }
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = ToyEncoderParams::init(config.encoder.clone(), &mut rng)?;
        let heads = Heads::init(config.encoder.d, config.ablation, &mut rng);
        Ok(Model {
            config,
            encoder,
            heads,
        })
    }

    pub fn check(&self) -> Result<()> {
        self.config.validate()?;
        self.heads.check(self.config.ablation, self.config.encoder.d)
    }

    pub fn bind<'p>(&'p self, tape: &mut Tape<'p>) -> ModelVars {
        ModelVars {
            encoder: self.encoder.bind(tape),
            heads: self.heads.bind(tape),
        }
    }

    /// Encoder and heads on one tape. `rng` switches on training-mode dropout.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape<'_>,
        vars: &ModelVars,
        ids: &[u32],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Var, HeadNodes)> {
        let h = self
            .encoder
            .forward_on_tape(tape, &vars.encoder, ids, rng.as_deref_mut())?;
        let dropout = rng.map(|r| (self.config.head_dropout, r));
        let nodes = heads::heads_on_tape(tape, h, &vars.heads, dropout)?;
        Ok((h, nodes))
    }

    /// Inference-mode encoding of a sequence.
    pub fn encode(&self, seq: &TokenSeq) -> Result<EncodedSeq> {
        crate::encoder::encode_seq(&self.encoder, seq)
    }

    /// Inference-mode head outputs (unmasked).
    pub fn predict(&self, seq: &TokenSeq) -> Result<HeadOutputs> {
        let enc = self.encode(seq)?;
        heads::forward(&enc, &self.heads, self.config.ablation)
    }
}
