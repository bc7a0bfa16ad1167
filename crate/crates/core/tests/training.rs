use dsfer_core::losses::{ClassWeights, LossConfig};
use dsfer_core::model::{DsferNet, ModelConfig};
use dsfer_core::nn::Mode;
use dsfer_core::tape::Tape;
use dsfer_core::tensor::Tensor;
use dsfer_core::train::{learning_rate, train_on, AdamState, Checkpoint, RunConfig};
use dsfer_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_model() -> ModelConfig {
    let mut cfg = ModelConfig::tiny();
    cfg.encoder.stage_widths = [4, 4, 4, 4, 4];
    cfg.dsfr.proj_dim = 4;
    cfg
}

fn head_grad_norms(lambda: f64) -> Vec<(String, f64)> {
    let mut net = DsferNet::new(small_model(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng));
    let b = tape.constant(Tensor::rand_uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng));
    let label = Tensor::new(&[2, 1, 32, 32], (0..2048).map(|i| f64::from((i % 7 < 2) as u8)).collect()).unwrap();
    let out = net.forward(&mut tape, a, b, Mode::Train).unwrap();
    let cfg = LossConfig {
        lambda,
        ..LossConfig::default()
    };
    let loss = net.loss(&mut tape, &out, &label, &cfg, ClassWeights { w0: 0.3, w1: 0.7 }).unwrap();
    let grads = tape.backward(loss.total).unwrap();
    tape.accumulate_param_grads(&grads, &mut net.params).unwrap();
    net.params
        .iter()
        .filter(|(name, _)| name.starts_with("dsfr.") && name.contains(".head."))
        .map(|(name, p)| {
            let norm = p.tensor.grad().map_or(0.0, |g| g.iter().map(|v| v * v).sum::<f64>().sqrt());
            (name.to_string(), norm)
        })
        .collect()
}

#[test]
fn retrieval_heads_learn_only_through_dice() {
    let off = head_grad_norms(0.0);
    let on = head_grad_norms(0.5);
    assert_eq!(off.len(), 4);
    assert!(off.iter().all(|(_, n)| *n == 0.0), "{off:?}");
    assert!(on.iter().all(|(_, n)| *n > 0.0), "{on:?}");
}

#[test]
fn checkpoint_round_trip_and_architecture_guard() {
    let net = DsferNet::new(small_model(), 4).unwrap();
    let ckpt = Checkpoint {
        optimizer: AdamState::new(&net.params),
        model: net,
        iter: 17,
        val_metrics: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path, Some(&small_model())).unwrap(), ckpt);
    assert_eq!(Checkpoint::load(&path, None).unwrap(), ckpt);

    let mut other = small_model();
    other.dsfr.proj_dim = 5;
    assert!(matches!(Checkpoint::load(&path, Some(&other)), Err(Error::Checkpoint(_))));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.push(0);
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(Checkpoint::load(&path, None), Err(Error::Checkpoint(_))));
    std::fs::write(&path, b"not a checkpoint").unwrap();
    assert!(Checkpoint::load(&path, None).is_err());
}

#[test]
fn schedule_reaches_zero_at_decay_end() {
    assert_eq!(learning_rate(1e-3, 0, 100), 1e-3);
    assert!((learning_rate(1e-3, 50, 100) - 5e-4).abs() < 1e-15);
    assert_eq!(learning_rate(1e-3, 100, 100), 0.0);
    assert_eq!(learning_rate(1e-3, 250, 100), 0.0);
}

#[test]
fn short_run_logs_every_iteration_and_keeps_best() {
    let mut cfg = RunConfig::tiny();
    cfg.model = small_model();
    cfg.data.synth.count = 40;
    cfg.data.synth.size = 32;
    cfg.loop_.max_iters = 6;
    cfg.loop_.val_every = 2;
    cfg.schedule.decay_end_iter = 6;
    let data = cfg.data.prepare().unwrap();
    let mut sink = Vec::new();
    let out = train_on(&cfg, &data, Some(&mut sink)).unwrap();
    assert_eq!(out.log.len(), 6);
    assert_eq!(String::from_utf8(sink).unwrap().lines().count(), 6);
    let vals: Vec<(u64, f64)> = out
        .log
        .iter()
        .filter_map(|r| r.val_f1.map(|f| (r.iter + 1, f)))
        .collect();
    assert_eq!(vals.iter().map(|v| v.0).collect::<Vec<_>>(), [2, 4, 6]);
    let best = vals.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
    let first_best = vals.iter().find(|v| v.1 == best).unwrap().0;
    assert_eq!(out.best.iter, first_best);
    assert_eq!(out.best.val_metrics.unwrap().f1, best);
    assert!(out.log.iter().all(|r| r.total.is_finite() && r.dice4.is_some()));
}
