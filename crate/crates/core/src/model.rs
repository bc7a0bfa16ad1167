//! The full change-detection network: Siamese encoder → retrieval modules at
//! stages 4/5 → fusion decoder → 2-class head, plus the hybrid loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::{decode, DecoderConfig, Fusion};
use crate::dsfr::{dsfr_forward, DsfrConfig, DsfrOutput, DSFR_STAGES};
use crate::encoder::{encode_pair, EncoderConfig, FeaturePyramid};
use crate::error::{config_err, Result};
use crate::losses::{downsample_label, ClassWeights, LossConfig};
use crate::nn::{ForwardCtx, Mode};
use crate::params::{BufferStore, ParameterStore};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub dsfr: DsfrConfig,
    pub decoder: DecoderConfig,
    /// Disable to get the `Base+*` ablations without retrieval modules.
    pub use_dsfr: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::desk(),
            dsfr: DsfrConfig::default(),
            decoder: DecoderConfig::default(),
            use_dsfr: true,
        }
    }
}

/// The four ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "Base+Concat")]
    BaseConcat,
    #[serde(rename = "Base+CF")]
    BaseCf,
    #[serde(rename = "Base+Concat+DSFR")]
    BaseConcatDsfr,
    #[serde(rename = "Base+CF+DSFR")]
    BaseCfDsfr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::BaseConcat,
        Variant::BaseCf,
        Variant::BaseConcatDsfr,
        Variant::BaseCfDsfr,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Variant::BaseConcat => "Base+Concat",
            Variant::BaseCf => "Base+CF",
            Variant::BaseConcatDsfr => "Base+Concat+DSFR",
            Variant::BaseCfDsfr => "Base+CF+DSFR",
        }
    }

    pub fn apply(self, cfg: &mut ModelConfig) {
        let (fusion, dsfr) = match self {
            Variant::BaseConcat => (Fusion::Concat, false),
            Variant::BaseCf => (Fusion::Cf, false),
            Variant::BaseConcatDsfr => (Fusion::Concat, true),
            Variant::BaseCfDsfr => (Fusion::Cf, true),
        };
        cfg.decoder.fusion = fusion;
        cfg.use_dsfr = dsfr;
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig::tiny(),
            dsfr: DsfrConfig {
                proj_dim: 32,
                beta: None,
            },
            ..Self::default()
        }
    }

    /// VGG-16 widths with 512-dimensional Hopfield projections.
    pub fn full_scale() -> Self {
        Self {
            encoder: EncoderConfig::full_scale(),
            dsfr: DsfrConfig {
                proj_dim: 512,
                beta: None,
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.dsfr.validate()
    }

    /// Stable fingerprint of everything that determines parameter layout and
    /// forward semantics.
    pub fn arch_hash(&self) -> String {
        let canon = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canon.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct NetOutput {
    /// `[n,2,h,w]` class logits.
    pub logits: Var,
    /// `[n,1,h,w]` changed-class probability (softmax channel 1).
    pub prob: Var,
    pub pyramid: FeaturePyramid,
    /// Stage-4 and stage-5 retrieval outputs when enabled.
    pub dsfr: Option<[DsfrOutput; 2]>,
    pub bn_updates: Vec<(String, BatchStats)>,
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub wbce: Var,
    pub dice4: Option<Var>,
    pub dice5: Option<Var>,
    pub total: Var,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsferNet {
    pub config: ModelConfig,
    pub params: ParameterStore,
    pub buffers: BufferStore,
}

impl DsferNet {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParameterStore::new();
        let mut buffers = BufferStore::new();
        config.encoder.init(&mut params, &mut buffers, &mut rng)?;
        if config.use_dsfr {
            for stage in DSFR_STAGES {
                config
                    .dsfr
                    .init(&mut params, stage, config.encoder.width(stage), &mut rng)?;
            }
        }
        config
            .decoder
            .init(&config.encoder, &mut params, &mut buffers, &mut rng)?;
        Ok(Self {
            config,
            params,
            buffers,
        })
    }

    /// Builds the graph for a batch of image pairs (`[n,3,h,w]` or `[3,h,w]`).
    pub fn forward(&self, tape: &mut Tape, x1: Var, x2: Var, mode: Mode) -> Result<NetOutput> {
        let mut ctx = ForwardCtx::new(&self.params, &self.buffers, mode);
        let pyramid = encode_pair(&self.config.encoder, tape, &mut ctx, x1, x2)?;
        let dsfr = if self.config.use_dsfr {
            let (a4, b4) = pyramid.stage(4);
            let (a5, b5) = pyramid.stage(5);
            let d4 = dsfr_forward(&self.config.dsfr, tape, &ctx, 4, a4, b4)?;
            let d5 = dsfr_forward(&self.config.dsfr, tape, &ctx, 5, a5, b5)?;
            Some([d4, d5])
        } else {
            None
        };
        let masks = match &dsfr {
            Some([d4, d5]) => [Some(d4.retrieved), Some(d5.retrieved)],
            None => [None, None],
        };
        let logits = decode(&self.config.decoder, tape, &mut ctx, &pyramid, masks)?;
        let prob = changed_probability(tape, logits)?;
        Ok(NetOutput {
            logits,
            prob,
            pyramid,
            dsfr,
            bn_updates: ctx.bn_updates,
        })
    }

    /// Adds the training objective to the tape. `label` is `[n,1,h,w]`.
    pub fn loss(&self, tape: &mut Tape, out: &NetOutput, label: &Tensor, loss: &LossConfig, weights: ClassWeights) -> Result<LossVars> {
        if tape.shape(out.prob) != label.shape() {
            return Err(config_err!(
                "label {:?} does not match prediction {:?}",
                label.shape(),
                tape.shape(out.prob)
            ));
        }
        let wbce = tape.weighted_bce(out.prob, label, weights.w0, weights.w1)?;
        let Some([d4, d5]) = out.dsfr else {
            return Ok(LossVars {
                wbce,
                dice4: None,
                dice5: None,
                total: wbce,
            });
        };
        let p4 = changed_probability(tape, d4.logits)?;
        let p5 = changed_probability(tape, d5.logits)?;
        let dice4 = tape.dice(p4, &downsample_label(label, 4)?, loss.dice_epsilon)?;
        let dice5 = tape.dice(p5, &downsample_label(label, 5)?, loss.dice_epsilon)?;
        let sum = tape.add(dice4, dice5)?;
        let half = tape.scale(sum, 0.5);
        let weighted = tape.scale(half, loss.lambda);
        let total = tape.add(wbce, weighted)?;
        Ok(LossVars {
            wbce,
            dice4: Some(dice4),
            dice5: Some(dice5),
            total,
        })
    }

    /// Folds train-mode batch statistics into the running buffers, in the
    /// order they were recorded.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (name, stats) in updates {
            self.buffers
                .get_mut(name)
                .ok_or_else(|| config_err!("missing running stats `{name}`"))?
                .update(&stats.mean, &stats.var, BN_MOMENTUM);
        }
        Ok(())
    }

    /// Eval-mode inference on one pair: returns the `[1,1,h,w]` probability map.
    pub fn predict(&self, x1: &Tensor, x2: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let a = tape.constant(batched(x1)?);
        let b = tape.constant(batched(x2)?);
        let out = self.forward(&mut tape, a, b, Mode::Eval)?;
        Ok(tape.value(out.prob).clone())
    }
}

/// Softmax over the two logit channels, keeping the changed class.
pub fn changed_probability(tape: &mut Tape, logits: Var) -> Result<Var> {
    let sm = tape.softmax_channels(logits)?;
    tape.select_channel(sm, 1)
}

/// Adds a leading batch axis to a `[c,h,w]` tensor; 4-D tensors pass through.
pub fn batched(t: &Tensor) -> Result<Tensor> {
    match t.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(t.shape());
            t.reshape(&shape)
        }
        4 => Ok(t.clone()),
        _ => Err(config_err!("expected an image tensor, got {:?}", t.shape())),
    }
}

/// Stacks equally-shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items
        .first()
        .ok_or_else(|| config_err!("cannot stack an empty batch"))?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(config_err!("stack: shapes {:?} and {:?} differ", first.shape(), t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(&shape, data)
}
