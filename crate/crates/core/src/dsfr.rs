//! Deeply supervised feature retrieval.
//!
//! The absolute feature difference is the Hopfield state pattern; each
//! temporal feature map is a set of stored patterns. One retrieval step
//!
//! ```text
//! R_j = softmax_rows(β · (F_D W_D)(F_j W_S)ᵀ) · (F_j W_S)
//! ```
//!
//! is run against both stored sets with the same `W_D`, `W_S`; the merged
//! `sigmoid(R_1 + R_2)` is folded back to a `[d,h',w']` map whose channel
//! mean is the retrieved change map. A 1×1 conv turns that map into the
//! 2-channel intermediate prediction used for deep supervision.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::nn::ForwardCtx;
use crate::params::{ParamKind, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::{as_nchw, Tensor};

/// Encoder stages that carry a retrieval module.
pub const DSFR_STAGES: [usize; 2] = [4, 5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsfrConfig {
    /// Projection dimension `d` of `W_D`, `W_S`.
    pub proj_dim: usize,
    /// Inverse temperature; `None` means `1/sqrt(d)`.
    pub beta: Option<f64>,
}

impl Default for DsfrConfig {
    fn default() -> Self {
        Self {
            proj_dim: 64,
            beta: None,
        }
    }
}

impl DsfrConfig {
    pub fn beta(&self) -> f64 {
        self.beta.unwrap_or(1.0 / (self.proj_dim as f64).sqrt())
    }

    pub fn validate(&self) -> Result<()> {
        if self.proj_dim == 0 {
            return Err(config_err!("dsfr.proj_dim must be positive"));
        }
        let b = self.beta();
        if !(b >= 0.0 && b.is_finite()) {
            return Err(config_err!("dsfr.beta must be finite and >= 0, got {b}"));
        }
        Ok(())
    }

    pub fn init<R: Rng + ?Sized>(&self, params: &mut ParameterStore, stage: usize, channels: usize, rng: &mut R) -> Result<()> {
        let std = 1.0 / (channels as f64).sqrt();
        let p = prefix(stage);
        params.insert(
            format!("{p}.w_d"),
            Tensor::randn(&[channels, self.proj_dim], std, rng),
            ParamKind::Weight,
        )?;
        params.insert(
            format!("{p}.w_s"),
            Tensor::randn(&[channels, self.proj_dim], std, rng),
            ParamKind::Weight,
        )?;
        // Changed-class logit starts increasing with the retrieved activation.
        params.insert(
            format!("{p}.head.weight"),
            Tensor::new(&[2, 1, 1, 1], vec![-1.0, 1.0])?,
            ParamKind::Weight,
        )?;
        params.insert(format!("{p}.head.bias"), Tensor::zeros(&[2]), ParamKind::Bias)
    }
}

pub fn prefix(stage: usize) -> String {
    format!("dsfr.s{stage}")
}

/// Projection matrices and temperature of one Hopfield layer pair.
#[derive(Debug, Clone, PartialEq)]
pub struct HopfieldParams {
    pub w_d: Tensor,
    pub w_s: Tensor,
    pub beta: f64,
}

impl HopfieldParams {
    pub fn new(w_d: Tensor, w_s: Tensor, beta: f64) -> Result<Self> {
        if w_d.rank() != 2 || w_d.shape() != w_s.shape() {
            return Err(config_err!(
                "W_D {:?} and W_S {:?} must both be [c,d]",
                w_d.shape(),
                w_s.shape()
            ));
        }
        if w_d.shape()[1] == 0 {
            return Err(config_err!("projection dimension must be positive"));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(config_err!("beta must be finite and >= 0, got {beta}"));
        }
        Ok(Self { w_d, w_s, beta })
    }
}

/// Output of one Hopfield retrieval on the tape.
#[derive(Debug, Clone, Copy)]
pub struct Retrieval {
    /// `[.., n_state, d]`
    pub output: Var,
    /// Row-stochastic association matrix `[.., n_state, n_stored]`.
    pub attention: Var,
}

/// One Hopfield update of `state` against `stored` (both `[n,c]` or
/// batched `[B,n,c]`).
pub fn hopfield_retrieve_on(tape: &mut Tape, state: Var, stored: Var, w_d: Var, w_s: Var, beta: f64) -> Result<Retrieval> {
    let ss = tape.shape(state).to_vec();
    let st = tape.shape(stored).to_vec();
    let wd = tape.shape(w_d).to_vec();
    if ss.len() != st.len() || ss.last() != st.last() || ss.len() < 2 {
        return Err(config_err!(
            "hopfield_retrieve: state {:?} and stored {:?} must share rank and channel count",
            ss,
            st
        ));
    }
    if ss.len() == 3 && ss[0] != st[0] {
        return Err(config_err!("hopfield_retrieve: batch sizes differ {:?} vs {:?}", ss, st));
    }
    if wd.first() != ss.last() {
        return Err(config_err!(
            "hopfield_retrieve: W_D {:?} does not project {} channels",
            wd,
            ss.last().unwrap()
        ));
    }
    let query = tape.matmul(state, w_d)?;
    let keys = tape.matmul(stored, w_s)?;
    let scores = tape.matmul_nt(query, keys)?;
    let scores = tape.scale(scores, beta);
    let attention = tape.softmax_rows(scores)?;
    let output = tape.matmul(attention, keys)?;
    Ok(Retrieval { output, attention })
}

/// Eager form of [`hopfield_retrieve_on`] for plain `[n,c]` matrices.
pub fn hopfield_retrieve(state: &Tensor, stored: &Tensor, params: &HopfieldParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let s = tape.constant(state.clone());
    let m = tape.constant(stored.clone());
    let wd = tape.constant(params.w_d.clone());
    let ws = tape.constant(params.w_s.clone());
    let r = hopfield_retrieve_on(&mut tape, s, m, wd, ws, params.beta)?;
    Ok(tape.value(r.output).clone())
}

#[derive(Debug, Clone, Copy)]
pub struct DsfrOutput {
    /// Retrieved change map `F_R`, `[n,1,h',w']`, values in (0,1).
    pub retrieved: Var,
    /// `sigmoid(R_1 + R_2)` before the channel mean, `[n,d,h',w']`.
    pub retrieved_full: Var,
    /// Intermediate 2-channel logits `M`, `[n,2,h',w']`.
    pub logits: Var,
    pub attention1: Var,
    pub attention2: Var,
}

/// Retrieval core of the module with explicit weights; the head is applied
/// by [`dsfr_forward`].
pub fn dsfr_retrieve(tape: &mut Tape, f1: Var, f2: Var, w_d: Var, w_s: Var, beta: f64) -> Result<(Var, Var, Var, Var)> {
    let s1 = tape.shape(f1).to_vec();
    if s1 != tape.shape(f2) {
        return Err(config_err!("dsfr: feature shapes differ {:?} vs {:?}", s1, tape.shape(f2)));
    }
    let (_, _, h, w) = as_nchw(&s1, "dsfr input")?;
    let diff = tape.abs_diff(f1, f2)?;
    let state = tape.reshape_matrix(diff)?;
    let m1 = tape.reshape_matrix(f1)?;
    let m2 = tape.reshape_matrix(f2)?;
    let r1 = hopfield_retrieve_on(tape, state, m1, w_d, w_s, beta)?;
    let r2 = hopfield_retrieve_on(tape, state, m2, w_d, w_s, beta)?;
    let merged = tape.add(r1.output, r2.output)?;
    let merged = tape.sigmoid(merged);
    let full = tape.matrix_to_map(merged, h, w)?;
    let mask = tape.channel_mean(full)?;
    Ok((mask, full, r1.attention, r2.attention))
}

pub fn dsfr_forward(cfg: &DsfrConfig, tape: &mut Tape, ctx: &ForwardCtx, stage: usize, f1: Var, f2: Var) -> Result<DsfrOutput> {
    let p = prefix(stage);
    let w_d = ctx.param(tape, &format!("{p}.w_d"))?;
    let w_s = ctx.param(tape, &format!("{p}.w_s"))?;
    let (retrieved, retrieved_full, attention1, attention2) = dsfr_retrieve(tape, f1, f2, w_d, w_s, cfg.beta())?;
    let logits = ctx.conv(tape, &format!("{p}.head"), retrieved, 0)?;
    Ok(DsfrOutput {
        retrieved,
        retrieved_full,
        logits,
        attention1,
        attention2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor {
        Tensor::new(&[rows, cols], v.to_vec()).unwrap()
    }

    fn eye2() -> Tensor {
        m(2, 2, &[1.0, 0.0, 0.0, 1.0])
    }

    #[test]
    fn singleton_memory_returns_projected_row() {
        let w_s = m(2, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 3.0]);
        let w_d = m(2, 3, &[0.3, 0.1, 0.2, 0.0, 1.0, -1.0]);
        let stored = m(1, 2, &[2.0, -1.0]);
        let state = m(1, 2, &[0.7, 0.2]);
        for beta in [0.0, 0.5, 100.0] {
            let p = HopfieldParams::new(w_d.clone(), w_s.clone(), beta).unwrap();
            let out = hopfield_retrieve(&state, &stored, &p).unwrap();
            assert_eq!(out.shape(), &[1, 3]);
            let expect = [3.0, 3.5, -3.0];
            for (a, b) in out.data().iter().zip(expect) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_beta_is_uniform_average() {
        let p = HopfieldParams::new(eye2(), eye2(), 0.0).unwrap();
        let stored = m(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        let state = m(2, 2, &[0.3, -4.0, 8.0, 1.0]);
        let out = hopfield_retrieve(&state, &stored, &p).unwrap();
        for row in out.data().chunks(2) {
            assert!((row[0] - 3.0).abs() < 1e-12 && (row[1] - 5.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_projection_hand_value() {
        let p = HopfieldParams::new(eye2(), eye2(), 1.0).unwrap();
        let out = hopfield_retrieve(&m(1, 2, &[1.0, 0.0]), &m(2, 2, &[1.0, 0.0, 0.0, 1.0]), &p).unwrap();
        assert!((out.data()[0] - 0.7311).abs() < 1e-4);
        assert!((out.data()[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn mismatched_dims_error() {
        let p = HopfieldParams::new(eye2(), eye2(), 1.0).unwrap();
        assert!(hopfield_retrieve(&m(1, 2, &[1.0, 0.0]), &m(1, 3, &[1.0, 0.0, 0.0]), &p).is_err());
        assert!(HopfieldParams::new(eye2(), m(2, 1, &[1.0, 0.0]), 1.0).is_err());
        assert!(HopfieldParams::new(eye2(), eye2(), -1.0).is_err());
    }
}
