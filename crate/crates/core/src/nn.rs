//! Forward context shared by the network modules.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::params::{BufferStore, ParameterStore};
use crate::tape::{BatchStats, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch norm uses batch statistics and reports them for running updates.
    Train,
    /// Batch norm uses stored running statistics.
    Eval,
}

/// Parameters, buffers and mode for one forward pass. Train-mode batch
/// statistics are collected in `bn_updates` rather than written back, so a
/// forward pass never mutates model state.
pub struct ForwardCtx<'a> {
    pub params: &'a ParameterStore,
    pub buffers: &'a BufferStore,
    pub mode: Mode,
    pub bn_updates: Vec<(String, BatchStats)>,
}

impl<'a> ForwardCtx<'a> {
    pub fn new(params: &'a ParameterStore, buffers: &'a BufferStore, mode: Mode) -> Self {
        Self {
            params,
            buffers,
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn param(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        tape.param(self.params, name)
    }

    pub fn conv(&self, tape: &mut Tape, prefix: &str, x: Var, padding: usize) -> Result<Var> {
        let w = self.param(tape, &format!("{prefix}.weight"))?;
        let b = self.param(tape, &format!("{prefix}.bias"))?;
        tape.conv2d(x, w, Some(b), 1, padding)
    }

    pub fn batchnorm(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.param(tape, &format!("{prefix}.gamma"))?;
        let beta = self.param(tape, &format!("{prefix}.beta"))?;
        match self.mode {
            Mode::Train => {
                let (y, stats) = tape.batchnorm_train(x, gamma, beta)?;
                self.bn_updates.push((prefix.to_string(), stats));
                Ok(y)
            }
            Mode::Eval => {
                let rs = self
                    .buffers
                    .get(prefix)
                    .ok_or_else(|| config_err!("missing running stats `{prefix}`"))?;
                tape.batchnorm_eval(x, gamma, beta, &rs.mean, &rs.var)
            }
        }
    }

    /// 3×3 conv (padding 1, no bias) → batch norm → ReLU, named
    /// `<prefix>.conv` / `<prefix>.bn`.
    pub fn conv_bn_relu(&mut self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w = self.param(tape, &format!("{prefix}.conv.weight"))?;
        let y = tape.conv2d(x, w, None, 1, 1)?;
        let y = self.batchnorm(tape, &format!("{prefix}.bn"), y)?;
        Ok(tape.relu(y))
    }
}

/// Registers the parameters and buffers of a [`ForwardCtx::conv_bn_relu`] block.
pub fn init_conv_bn_relu<R: Rng + ?Sized>(
    params: &mut ParameterStore,
    buffers: &mut BufferStore,
    prefix: &str,
    c_in: usize,
    c_out: usize,
    rng: &mut R,
) -> Result<()> {
    params.add_conv_no_bias(&format!("{prefix}.conv"), c_out, c_in, 3, rng)?;
    params.add_norm(&format!("{prefix}.bn"), c_out)?;
    buffers.add(format!("{prefix}.bn"), c_out);
    Ok(())
}
