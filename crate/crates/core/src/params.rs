//! Named parameters and non-trainable buffers.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{config_err, Result};
use crate::tensor::Tensor;

/// How a parameter is treated by the optimizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Conv kernels and projection matrices; subject to weight decay.
    Weight,
    Bias,
    /// Batch-norm scale and shift.
    NormAffine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub tensor: Tensor,
    pub kind: ParamKind,
}

/// Trainable tensors keyed by a dotted path such as `encoder.s1.c0.weight`.
/// Iteration order is lexicographic by name.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterStore {
    entries: BTreeMap<String, Parameter>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, kind: ParamKind) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(config_err!("duplicate parameter `{name}`"));
        }
        let tensor = tensor.with_requires_grad();
        self.entries.insert(name, Parameter { tensor, kind });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name).map(|p| &p.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name).map(|p| &mut p.tensor)
    }

    pub fn kind(&self, name: &str) -> Option<ParamKind> {
        self.entries.get(name).map(|p| p.kind)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Parameter)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Parameter)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn zero_grad(&mut self) {
        self.entries.values_mut().for_each(|p| p.tensor.zero_grad());
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(|p| p.tensor.numel()).sum()
    }

    /// Adds a conv layer (`<prefix>.weight`, `<prefix>.bias`) with fan-in
    /// scaled normal init and zero bias.
    pub fn add_conv<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<()> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        self.insert(
            format!("{prefix}.weight"),
            Tensor::randn(&[c_out, c_in, k, k], std, rng),
            ParamKind::Weight,
        )?;
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[c_out]), ParamKind::Bias)
    }

    /// Like [`add_conv`](Self::add_conv) without a bias, for convs that feed
    /// a batch norm.
    pub fn add_conv_no_bias<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<()> {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        self.insert(
            format!("{prefix}.weight"),
            Tensor::randn(&[c_out, c_in, k, k], std, rng),
            ParamKind::Weight,
        )
    }

    /// Adds batch-norm affine parameters (`gamma` = 1, `beta` = 0).
    pub fn add_norm(&mut self, prefix: &str, channels: usize) -> Result<()> {
        self.insert(format!("{prefix}.gamma"), Tensor::ones(&[channels]), ParamKind::NormAffine)?;
        self.insert(format!("{prefix}.beta"), Tensor::zeros(&[channels]), ParamKind::NormAffine)
    }
}

/// Running mean/variance for one batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        }
    }

    /// `running = (1 - momentum)·running + momentum·batch`.
    pub fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
        for (r, b) in self.var.iter_mut().zip(batch_var) {
            *r = (1.0 - momentum) * *r + momentum * b;
        }
    }
}

/// Non-trainable state (batch-norm running statistics), keyed like
/// [`ParameterStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct BufferStore {
    stats: BTreeMap<String, RunningStats>,
}

impl BufferStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, channels: usize) {
        self.stats.insert(name.into(), RunningStats::new(channels));
    }

    pub fn insert(&mut self, name: impl Into<String>, stats: RunningStats) {
        self.stats.insert(name.into(), stats);
    }

    pub fn get(&self, name: &str) -> Option<&RunningStats> {
        self.stats.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        self.stats.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &RunningStats)> {
        self.stats.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.stats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stats.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_require_grad() {
        let mut store = ParameterStore::new();
        store.insert("a.weight", Tensor::zeros(&[2]), ParamKind::Weight).unwrap();
        assert!(store.insert("a.weight", Tensor::zeros(&[2]), ParamKind::Weight).is_err());
        assert!(store.get("a.weight").unwrap().requires_grad());
    }

    #[test]
    fn iteration_is_sorted() {
        let mut store = ParameterStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        store.add_conv("z", 2, 2, 3, &mut rng).unwrap();
        store.add_norm("b", 2).unwrap();
        let names: Vec<_> = store.names().collect();
        assert_eq!(names, ["b.beta", "b.gamma", "z.bias", "z.weight"]);
    }

    #[test]
    fn running_stats_momentum() {
        let mut rs = RunningStats::new(1);
        rs.update(&[1.0], &[3.0], 0.1);
        assert!((rs.mean[0] - 0.1).abs() < 1e-15);
        assert!((rs.var[0] - 1.2).abs() < 1e-15);
    }
}
