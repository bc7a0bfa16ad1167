//! Deep-to-shallow fusion decoder.
//!
//! With [`Fusion::Cf`] each stage computes
//! `f2(Concat(f1(Concat(F1, F2)) ⊙ F_R, up(F^{i+1})))`, where `f1`, `f2` are
//! 3×3 conv + BN + ReLU blocks, the mask `F_R` exists only at stages 4 and 5,
//! and stage 5 has no deeper operand. [`Fusion::Concat`] is the plain
//! baseline: one conv block over `Concat(Concat(F1, F2) ⊙ F_R, up(F^{i+1}))`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, FeaturePyramid, STAGES};
use crate::error::{config_err, Result};
use crate::kernels::UpsampleMode;
use crate::nn::{init_conv_bn_relu, ForwardCtx};
use crate::params::{BufferStore, ParameterStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Cf,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub fusion: Fusion,
    pub upsample: UpsampleMode,
}

fn block_prefix(stage: usize) -> String {
    format!("decoder.s{stage}")
}

pub const HEAD: &str = "decoder.head";

impl DecoderConfig {
    pub fn init<R: Rng + ?Sized>(
        &self,
        enc: &EncoderConfig,
        params: &mut ParameterStore,
        buffers: &mut BufferStore,
        rng: &mut R,
    ) -> Result<()> {
        for stage in (1..=STAGES).rev() {
            let c = enc.width(stage);
            let deeper = if stage < STAGES { enc.width(stage + 1) } else { 0 };
            let p = block_prefix(stage);
            match self.fusion {
                Fusion::Cf => {
                    init_conv_bn_relu(params, buffers, &format!("{p}.f1"), 2 * c, c, rng)?;
                    init_conv_bn_relu(params, buffers, &format!("{p}.f2"), c + deeper, c, rng)?;
                }
                Fusion::Concat => {
                    init_conv_bn_relu(params, buffers, &format!("{p}.g"), 2 * c + deeper, c, rng)?;
                }
            }
        }
        params.add_conv(HEAD, 2, enc.width(1), 1, rng)
    }
}

fn check_mask(tape: &Tape, feature: Var, mask: Var) -> Result<()> {
    let fs = tape.shape(feature);
    let ms = tape.shape(mask);
    let spatial = |s: &[usize]| s[s.len() - 2..].to_vec();
    if ms.len() != fs.len() || spatial(fs) != spatial(ms) {
        return Err(config_err!(
            "retrieval mask {:?} does not match feature map {:?}",
            ms,
            fs
        ));
    }
    Ok(())
}

/// One comprehensive-fusion block at `stage`.
pub fn cf_block(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    stage: usize,
    f1: Var,
    f2: Var,
    mask: Option<Var>,
    deeper: Option<Var>,
) -> Result<Var> {
    let p = block_prefix(stage);
    let cat = tape.concat_channels(f1, f2)?;
    let mut a = ctx.conv_bn_relu(tape, &format!("{p}.f1"), cat)?;
    if let Some(m) = mask {
        check_mask(tape, a, m)?;
        a = tape.mul_channel_broadcast(a, m)?;
    }
    let b = match deeper {
        Some(up) => tape.concat_channels(a, up)?,
        None => a,
    };
    ctx.conv_bn_relu(tape, &format!("{p}.f2"), b)
}

/// Plain concatenation block used by the `Concat` baselines.
pub fn concat_block(
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    stage: usize,
    f1: Var,
    f2: Var,
    mask: Option<Var>,
    deeper: Option<Var>,
) -> Result<Var> {
    let p = block_prefix(stage);
    let mut cat = tape.concat_channels(f1, f2)?;
    if let Some(m) = mask {
        check_mask(tape, cat, m)?;
        cat = tape.mul_channel_broadcast(cat, m)?;
    }
    let x = match deeper {
        Some(up) => tape.concat_channels(cat, up)?,
        None => cat,
    };
    ctx.conv_bn_relu(tape, &format!("{p}.g"), x)
}

/// Fuses the pyramid from stage 5 down to stage 1 and applies the 1×1 head.
/// `masks[0]`, `masks[1]` are the stage-4 and stage-5 retrieval maps.
pub fn decode(
    cfg: &DecoderConfig,
    tape: &mut Tape,
    ctx: &mut ForwardCtx,
    pyramid: &FeaturePyramid,
    masks: [Option<Var>; 2],
) -> Result<Var> {
    let mut deeper: Option<Var> = None;
    for stage in (1..=STAGES).rev() {
        let (f1, f2) = pyramid.stage(stage);
        let mask = match stage {
            4 => masks[0],
            5 => masks[1],
            _ => None,
        };
        let up = match deeper {
            Some(d) => Some(tape.upsample2x(d, cfg.upsample)?),
            None => None,
        };
        let out = match cfg.fusion {
            Fusion::Cf => cf_block(tape, ctx, stage, f1, f2, mask, up)?,
            Fusion::Concat => concat_block(tape, ctx, stage, f1, f2, mask, up)?,
        };
        deeper = Some(out);
    }
    let top = deeper.expect("at least one stage");
    ctx.conv(tape, HEAD, top, 0)
}
