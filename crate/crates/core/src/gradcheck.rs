//! Central finite-difference verification of tape gradients.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::decoder::cf_block;
use crate::dsfr::{dsfr_retrieve, hopfield_retrieve_on};
use crate::encoder::EncoderConfig;
use crate::error::Result;
use crate::kernels::UpsampleMode;
use crate::losses::{ClassWeights, LossConfig};
use crate::model::{changed_probability, DsferNet, ModelConfig};
use crate::nn::{init_conv_bn_relu, ForwardCtx, Mode};
use crate::params::{BufferStore, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DENOMINATOR_FLOOR: f64 = 1e-12;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// `(input index, flat element)` where the worst error occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Compares tape gradients of the scalar built by `build` against central
/// differences at every element of every input.
///
/// The relative error of one element is `|a - n| / max(|a|, |n|, 1e-12)`.
pub fn grad_check<F>(point: &[Tensor], step: f64, build: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.input(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = inputs.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs)?;
        t.value(l).item()
    };

    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = point.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; point[i].numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let orig = point[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(DENOMINATOR_FLOOR);
            if err > report.max_rel_error || err.is_nan() {
                report.max_rel_error = err;
                report.worst = (i, j);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scale {
    /// One seed per primitive, one per composite.
    Small,
    /// Twenty seeds per primitive, three per composite.
    Full,
}

impl std::str::FromStr for Scale {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "small" => Ok(Scale::Small),
            "full" => Ok(Scale::Full),
            other => Err(format!("unknown gradcheck scale `{other}` (small|full)")),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteRow {
    pub name: String,
    pub kind: &'static str,
    pub seeds: usize,
    pub checked: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub rows: Vec<SuiteRow>,
    pub elapsed_secs: f64,
}

impl SuiteReport {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn table(&self) -> String {
        let mut s = format!("{:<28} {:<10} {:>6} {:>9} {:>12}  result\n", "graph", "kind", "seeds", "checked", "max_rel_err");
        for r in &self.rows {
            s.push_str(&format!(
                "{:<28} {:<10} {:>6} {:>9} {:>12.3e}  {}\n",
                r.name,
                r.kind,
                r.seeds,
                r.checked,
                r.max_rel_error,
                if r.passed { "PASS" } else { "FAIL" }
            ));
        }
        s.push_str(&format!("elapsed: {:.1}s\n", self.elapsed_secs));
        s
    }
}

type Builder = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;

/// A graph to check: its input point and a scalar-valued builder.
pub struct Case {
    pub inputs: Vec<Tensor>,
    pub build: Builder,
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

/// Reduces a tensor to a scalar through a fixed random weighting, so every
/// output element carries a distinct upstream gradient.
fn weighted_sum(tape: &mut Tape, v: Var, seed: u64) -> Result<Var> {
    let mut r = rng(seed ^ 0x5eed);
    let w = tape.constant(randn(tape.shape(v), &mut r));
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

fn unary_case(seed: u64, shape: &[usize], f: fn(&mut Tape, Var) -> Result<Var>) -> Case {
    let mut r = rng(seed);
    Case {
        inputs: vec![randn(shape, &mut r)],
        build: Box::new(move |t, v| {
            let y = f(t, v[0])?;
            weighted_sum(t, y, seed)
        }),
    }
}

fn binary_case(seed: u64, a: &[usize], b: &[usize], f: fn(&mut Tape, Var, Var) -> Result<Var>) -> Case {
    let mut r = rng(seed);
    Case {
        inputs: vec![randn(a, &mut r), randn(b, &mut r)],
        build: Box::new(move |t, v| {
            let y = f(t, v[0], v[1])?;
            weighted_sum(t, y, seed)
        }),
    }
}

fn binary_label(shape: &[usize], r: &mut ChaCha8Rng) -> Tensor {
    use rand::Rng;
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| if r.random_bool(0.4) { 1.0 } else { 0.0 }).collect()).unwrap()
}

/// Every primitive op, each wrapped into a scalar graph.
pub fn primitive_cases(seed: u64) -> Vec<(&'static str, Case)> {
    let mut cases: Vec<(&'static str, Case)> = vec![
        ("conv2d", {
            let mut r = rng(seed);
            Case {
                inputs: vec![randn(&[2, 2, 5, 5], &mut r), randn(&[3, 2, 3, 3], &mut r), randn(&[3], &mut r)],
                build: Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
                    weighted_sum(t, y, seed)
                }),
            }
        }),
        ("conv2d_stride2", {
            let mut r = rng(seed);
            Case {
                inputs: vec![randn(&[2, 6, 6], &mut r), randn(&[2, 2, 3, 3], &mut r), randn(&[2], &mut r)],
                build: Box::new(move |t, v| {
                    let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 0)?;
                    weighted_sum(t, y, seed)
                }),
            }
        }),
        ("maxpool2", unary_case(seed, &[2, 2, 4, 4], |t, x| t.maxpool2(x))),
        ("relu", unary_case(seed, &[3, 4, 4], |t, x| Ok(t.relu(x)))),
        ("sigmoid", unary_case(seed, &[3, 4, 4], |t, x| Ok(t.sigmoid(x)))),
        ("softmax_rows", unary_case(seed, &[4, 5], |t, x| t.softmax_rows(x))),
        ("softmax_channels", unary_case(seed, &[2, 3, 2, 2], |t, x| t.softmax_channels(x))),
        ("upsample2x_bilinear", unary_case(seed, &[2, 3, 3], |t, x| t.upsample2x(x, UpsampleMode::Bilinear))),
        ("upsample2x_nearest", unary_case(seed, &[2, 3, 3], |t, x| t.upsample2x(x, UpsampleMode::Nearest))),
        ("reshape_matrix", unary_case(seed, &[2, 3, 2, 2], |t, x| t.reshape_matrix(x))),
        ("matrix_to_map", unary_case(seed, &[2, 6, 3], |t, x| t.matrix_to_map(x, 2, 3))),
        ("channel_mean", unary_case(seed, &[2, 3, 2, 2], |t, x| t.channel_mean(x))),
        ("select_channel", unary_case(seed, &[2, 3, 2, 2], |t, x| t.select_channel(x, 1))),
        ("scale", unary_case(seed, &[5], |t, x| Ok(t.scale(x, -1.7)))),
        ("mean", unary_case(seed, &[6], |t, x| Ok(t.mean(x)))),
        ("matmul", binary_case(seed, &[3, 4], &[4, 2], |t, a, b| t.matmul(a, b))),
        ("matmul_batched_shared", binary_case(seed, &[2, 3, 4], &[4, 2], |t, a, b| t.matmul(a, b))),
        ("matmul_nt_batched", binary_case(seed, &[2, 3, 4], &[2, 5, 4], |t, a, b| t.matmul_nt(a, b))),
        ("concat_channels", binary_case(seed, &[2, 2, 3, 3], &[2, 1, 3, 3], |t, a, b| t.concat_channels(a, b))),
        ("add", binary_case(seed, &[3, 3], &[3, 3], |t, a, b| t.add(a, b))),
        ("sub", binary_case(seed, &[3, 3], &[3, 3], |t, a, b| t.sub(a, b))),
        ("elementwise_mul", binary_case(seed, &[3, 3], &[3, 3], |t, a, b| t.mul(a, b))),
        ("abs_diff", binary_case(seed, &[2, 3, 3], &[2, 3, 3], |t, a, b| t.abs_diff(a, b))),
        ("mul_channel_broadcast", binary_case(seed, &[2, 3, 2, 2], &[2, 1, 2, 2], |t, a, b| t.mul_channel_broadcast(a, b))),
    ];
    cases.push(("batchnorm_train", {
        let mut r = rng(seed);
        Case {
            inputs: vec![randn(&[3, 2, 3, 3], &mut r), randn(&[2], &mut r), randn(&[2], &mut r)],
            build: Box::new(move |t, v| {
                let (y, _) = t.batchnorm_train(v[0], v[1], v[2])?;
                weighted_sum(t, y, seed)
            }),
        }
    }));
    cases.push(("batchnorm_eval", {
        let mut r = rng(seed);
        Case {
            inputs: vec![randn(&[2, 2, 3, 3], &mut r), randn(&[2], &mut r), randn(&[2], &mut r)],
            build: Box::new(move |t, v| {
                let y = t.batchnorm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[1.5, 0.7])?;
                weighted_sum(t, y, seed)
            }),
        }
    }));
    cases.push(("weighted_bce", {
        let mut r = rng(seed);
        let label = binary_label(&[2, 1, 3, 3], &mut r);
        Case {
            inputs: vec![Tensor::rand_uniform(&[2, 1, 3, 3], 0.05, 0.95, &mut r)],
            build: Box::new(move |t, v| t.weighted_bce(v[0], &label, 0.3, 1.7)),
        }
    }));
    cases.push(("dice", {
        let mut r = rng(seed);
        let mut label = binary_label(&[2, 1, 3, 3], &mut r);
        // An empty sample has gradient eps/D², far below what central
        // differences resolve at eps = 1e-6.
        for sample in label.data_mut().chunks_mut(9) {
            if sample.iter().all(|&v| v == 0.0) {
                sample[0] = 1.0;
            }
        }
        Case {
            inputs: vec![Tensor::rand_uniform(&[2, 1, 3, 3], 0.0, 1.0, &mut r)],
            build: Box::new(move |t, v| t.dice(v[0], &label, 1e-6)),
        }
    }));
    cases.push(("dice_empty_label", {
        let mut r = rng(seed);
        let mut label = binary_label(&[2, 1, 3, 3], &mut r);
        label.data_mut()[..9].fill(0.0);
        Case {
            inputs: vec![Tensor::rand_uniform(&[2, 1, 3, 3], 0.0, 1.0, &mut r)],
            build: Box::new(move |t, v| t.dice(v[0], &label, 1.0)),
        }
    }));
    cases.push(("hopfield_retrieve", {
        let mut r = rng(seed);
        Case {
            inputs: vec![
                randn(&[2, 5, 3], &mut r),
                randn(&[2, 5, 3], &mut r),
                randn(&[3, 4], &mut r),
                randn(&[3, 4], &mut r),
            ],
            build: Box::new(move |t, v| {
                let out = hopfield_retrieve_on(t, v[0], v[1], v[2], v[3], 0.5)?;
                weighted_sum(t, out.output, seed)
            }),
        }
    }));
    cases
}

/// Retrieval module at one stage: both Hopfield layers, merge, channel mean,
/// 1×1 head and a dice term on the intermediate map.
pub fn dsfr_stage_case(seed: u64) -> Case {
    let mut r = rng(seed);
    let label = binary_label(&[2, 1, 4, 4], &mut r);
    Case {
        inputs: vec![
            randn(&[2, 4, 4, 4], &mut r),
            randn(&[2, 4, 4, 4], &mut r),
            Tensor::randn(&[4, 3], 0.5, &mut r),
            Tensor::randn(&[4, 3], 0.5, &mut r),
            randn(&[2, 1, 1, 1], &mut r),
            randn(&[2], &mut r),
        ],
        build: Box::new(move |t, v| {
            let (mask, _, _, _) = dsfr_retrieve(t, v[0], v[1], v[2], v[3], 1.0 / 3f64.sqrt())?;
            let logits = t.conv2d(mask, v[4], Some(v[5]), 1, 0)?;
            let p = changed_probability(t, logits)?;
            let dice = t.dice(p, &label, 1e-6)?;
            let s = weighted_sum(t, mask, seed)?;
            t.add(dice, s)
        }),
    }
}

/// Stage-4 fusion block with a retrieval mask and an upsampled deeper map.
pub fn cf_stage_case(seed: u64) -> Case {
    let mut r = rng(seed);
    let mut params = ParameterStore::new();
    let mut buffers = BufferStore::new();
    init_conv_bn_relu(&mut params, &mut buffers, "decoder.s4.f1", 6, 3, &mut r).unwrap();
    init_conv_bn_relu(&mut params, &mut buffers, "decoder.s4.f2", 3 + 4, 3, &mut r).unwrap();
    let (names, mut inputs) = flatten_params(&params);
    let extra = [
        randn(&[2, 3, 4, 4], &mut r),
        randn(&[2, 3, 4, 4], &mut r),
        Tensor::rand_uniform(&[2, 1, 4, 4], 0.1, 0.9, &mut r),
        randn(&[2, 4, 4, 4], &mut r),
    ];
    let first_extra = inputs.len();
    inputs.extend(extra);
    Case {
        inputs,
        build: Box::new(move |t, v| {
            for (name, var) in names.iter().zip(v) {
                t.bind_param(name, *var)?;
            }
            let empty_params = ParameterStore::new();
            let mut ctx = ForwardCtx::new(&empty_params, &buffers, Mode::Train);
            let x = &v[first_extra..];
            let out = cf_block(t, &mut ctx, 4, x[0], x[1], Some(x[2]), Some(x[3]))?;
            weighted_sum(t, out, seed)
        }),
    }
}

fn flatten_params(params: &ParameterStore) -> (Vec<String>, Vec<Tensor>) {
    params
        .iter()
        .map(|(n, p)| (n.to_string(), p.tensor.clone()))
        .unzip()
}

/// Encoder + both retrieval modules + fusion decoder + hybrid loss on a
/// narrow network and a 32×32 batch of two pairs.
pub fn full_network_case(seed: u64) -> Case {
    let config = gradcheck_model_config();
    let net = DsferNet::new(config, seed).expect("valid config");
    let mut r = rng(seed ^ 0xda7a);
    let x1 = Tensor::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut r);
    let x2 = Tensor::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut r);
    let label = binary_label(&[2, 1, 32, 32], &mut r);
    let (names, inputs) = flatten_params(&net.params);
    let loss_cfg = LossConfig {
        lambda: 0.5,
        ..LossConfig::default()
    };
    let weights = ClassWeights { w0: 0.4, w1: 0.6 };
    Case {
        inputs,
        build: Box::new(move |t, v| {
            for (name, var) in names.iter().zip(v) {
                t.bind_param(name, *var)?;
            }
            let a = t.constant(x1.clone());
            let b = t.constant(x2.clone());
            let out = net.forward(t, a, b, Mode::Train)?;
            Ok(net.loss(t, &out, &label, &loss_cfg, weights)?.total)
        }),
    }
}

pub fn gradcheck_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.encoder = EncoderConfig {
        stage_widths: [2, 3, 3, 4, 4],
        convs_per_stage: [1, 1, 1, 1, 1],
        input_channels: 3,
    };
    cfg.dsfr.proj_dim = 3;
    cfg
}

fn run_cases(name: &str, kind: &'static str, seeds: &[u64], make: impl Fn(u64) -> Case) -> Result<SuiteRow> {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for &s in seeds {
        let case = make(s);
        let r = grad_check(&case.inputs, DEFAULT_STEP, case.build)?;
        worst = if r.max_rel_error.is_nan() { f64::NAN } else { worst.max(r.max_rel_error) };
        checked += r.checked;
    }
    Ok(SuiteRow {
        name: name.to_string(),
        kind,
        seeds: seeds.len(),
        checked,
        max_rel_error: worst,
        passed: worst < TOLERANCE,
    })
}

/// Checks every primitive op and the three composite graphs.
pub fn run_suite(scale: Scale) -> Result<SuiteReport> {
    let start = Instant::now();
    let (prim_seeds, comp_seeds): (Vec<u64>, Vec<u64>) = match scale {
        Scale::Small => (vec![1], vec![1]),
        Scale::Full => ((1..=20).collect(), (1..=3).collect()),
    };
    let names: Vec<&'static str> = primitive_cases(0).into_iter().map(|(n, _)| n).collect();
    let mut rows = Vec::new();
    for (idx, name) in names.iter().enumerate() {
        rows.push(run_cases(name, "primitive", &prim_seeds, |s| {
            primitive_cases(s).swap_remove(idx).1
        })?);
    }
    rows.push(run_cases("dsfr_stage", "composite", &comp_seeds, dsfr_stage_case)?);
    rows.push(run_cases("cf_stage", "composite", &comp_seeds, cf_stage_case)?);
    rows.push(run_cases("full_tiny_network", "composite", &comp_seeds, full_network_case)?);
    Ok(SuiteReport {
        rows,
        elapsed_secs: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_is_exact() {
        let x = Tensor::new(&[3], vec![0.2, -1.0, 3.0]).unwrap();
        let r = grad_check(&[x], DEFAULT_STEP, |t, v| {
            let y = t.scale(v[0], 2.5);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-10, "{r:?}");
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu gradient at a kink straddled by the step differs from FD.
        let x = Tensor::new(&[1], vec![1e-7]).unwrap();
        let r = grad_check(&[x], 1e-5, |t, v| {
            let y = t.relu(v[0]);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error > 0.1);
    }
}
