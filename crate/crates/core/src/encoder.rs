//! Siamese five-stage convolutional encoder (a width-configurable VGG-16
//! layout without the classifier and the last pooling layer).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::{init_conv_bn_relu, ForwardCtx};
use crate::params::{BufferStore, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::as_nchw;

pub const STAGES: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub stage_widths: [usize; STAGES],
    pub convs_per_stage: [usize; STAGES],
    pub input_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl EncoderConfig {
    pub fn desk() -> Self {
        Self {
            stage_widths: [8, 16, 32, 64, 64],
            convs_per_stage: [2, 2, 3, 3, 3],
            input_channels: 3,
        }
    }

    /// VGG-16 widths.
    pub fn full_scale() -> Self {
        Self {
            stage_widths: [64, 128, 256, 512, 512],
            convs_per_stage: [2, 2, 3, 3, 3],
            input_channels: 3,
        }
    }

    pub fn tiny() -> Self {
        Self {
            stage_widths: [8, 16, 32, 32, 32],
            convs_per_stage: [2, 2, 3, 3, 3],
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.contains(&0) {
            return Err(config_err!("encoder.stage_widths must be positive: {:?}", self.stage_widths));
        }
        if self.convs_per_stage.contains(&0) {
            return Err(config_err!(
                "encoder.convs_per_stage must be >= 1: {:?}",
                self.convs_per_stage
            ));
        }
        if self.input_channels == 0 {
            return Err(config_err!("encoder.input_channels must be positive"));
        }
        Ok(())
    }

    pub fn width(&self, stage: usize) -> usize {
        self.stage_widths[stage - 1]
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterStore, buffers: &mut BufferStore, rng: &mut R) -> Result<()> {
        let mut c_in = self.input_channels;
        for stage in 1..=STAGES {
            let c_out = self.width(stage);
            for layer in 0..self.convs_per_stage[stage - 1] {
                init_conv_bn_relu(params, buffers, &layer_name(stage, layer), c_in, c_out, rng)?;
                c_in = c_out;
            }
        }
        Ok(())
    }
}

fn layer_name(stage: usize, layer: usize) -> String {
    format!("encoder.s{stage}.l{layer}")
}

/// Per-stage feature pairs `(F1^i, F2^i)`, index 0 = stage 1.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub stages: Vec<(Var, Var)>,
}

impl FeaturePyramid {
    pub fn stage(&self, stage: usize) -> (Var, Var) {
        self.stages[stage - 1]
    }
}

fn encode_branch(cfg: &EncoderConfig, tape: &mut Tape, ctx: &mut ForwardCtx, x: Var) -> Result<Vec<Var>> {
    let mut feats = Vec::with_capacity(STAGES);
    let mut h = x;
    for stage in 1..=STAGES {
        if stage > 1 {
            h = tape.maxpool2(h)?;
        }
        for layer in 0..cfg.convs_per_stage[stage - 1] {
            h = ctx.conv_bn_relu(tape, &layer_name(stage, layer), h)?;
        }
        feats.push(h);
    }
    Ok(feats)
}

/// Runs both temporal images through the same encoder weights.
///
/// Each branch is normalized with its own batch statistics, so swapping the
/// inputs swaps every feature pair exactly.
pub fn encode_pair(cfg: &EncoderConfig, tape: &mut Tape, ctx: &mut ForwardCtx, x1: Var, x2: Var) -> Result<FeaturePyramid> {
    let s1 = tape.shape(x1).to_vec();
    if s1 != tape.shape(x2) {
        return Err(config_err!(
            "encode_pair: image shapes differ {:?} vs {:?}",
            s1,
            tape.shape(x2)
        ));
    }
    let (_, c, h, w) = as_nchw(&s1, "encode_pair input")?;
    if c != cfg.input_channels {
        return Err(config_err!(
            "encode_pair: expected {} input channels, got {c}",
            cfg.input_channels
        ));
    }
    if h % 16 != 0 || w % 16 != 0 || h == 0 || w == 0 {
        return Err(config_err!("encode_pair: spatial dims {h}x{w} must be positive multiples of 16"));
    }
    let f1 = encode_branch(cfg, tape, ctx, x1)?;
    let f2 = encode_branch(cfg, tape, ctx, x2)?;
    Ok(FeaturePyramid {
        stages: f1.into_iter().zip(f2).collect(),
    })
}
