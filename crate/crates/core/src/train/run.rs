use std::fs;
use std::io::Write;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{Dataset, RunConfig};
use super::optim::{adam_step, learning_rate, AdamState};
use crate::data::{iterate_batches, ChangeSample, Part};
use crate::error::{Error, Result};
use crate::losses::{class_weights_from_labels, ClassWeights};
use crate::metrics::{binarize, confusion, ConfusionCounts, Metrics};
use crate::model::{stack, DsferNet};
use crate::nn::Mode;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const LOG_FILE: &str = "log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

const EVAL_CHUNK: usize = 8;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub lr: f64,
    pub wbce: f64,
    pub dice4: Option<f64>,
    pub dice5: Option<f64>,
    pub total: f64,
    #[serde(rename = "val_F1", skip_serializing_if = "Option::is_none", default)]
    pub val_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the highest validation F1 (earliest on ties), or the
    /// final state when validation is disabled.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub log: Vec<LogRecord>,
    pub class_weights: ClassWeights,
}

/// Stacks images `[n,3,h,w]` and labels `[n,1,h,w]`.
pub fn batch_tensors(samples: &[&ChangeSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let t1: Vec<&Tensor> = samples.iter().map(|s| &s.image_t1).collect();
    let t2: Vec<&Tensor> = samples.iter().map(|s| &s.image_t2).collect();
    let labels: Vec<Tensor> = samples
        .iter()
        .map(|s| s.label.reshape(&[1, s.height(), s.width()]))
        .collect::<Result<_>>()?;
    let labels: Vec<&Tensor> = labels.iter().collect();
    Ok((stack(&t1)?, stack(&t2)?, stack(&labels)?))
}

/// Eval-mode confusion counts over `samples`.
pub fn evaluate_samples(net: &DsferNet, samples: &[&ChangeSample]) -> Result<ConfusionCounts> {
    let mut cc = ConfusionCounts::default();
    for chunk in samples.chunks(EVAL_CHUNK) {
        let (x1, x2, label) = batch_tensors(chunk)?;
        let mut tape = Tape::new();
        let a = tape.constant(x1);
        let b = tape.constant(x2);
        let out = net.forward(&mut tape, a, b, Mode::Eval)?;
        cc += confusion(&binarize(tape.value(out.prob)), &label)?;
    }
    Ok(cc)
}

pub fn evaluate(net: &DsferNet, data: &Dataset, part: Part) -> Result<(Metrics, ConfusionCounts)> {
    let samples = data.part(part)?;
    let cc = evaluate_samples(net, &samples)?;
    Ok((cc.metrics(), cc))
}

struct Trainer<'a> {
    cfg: &'a RunConfig,
    data: &'a Dataset,
    net: DsferNet,
    adam: AdamState,
    weights: ClassWeights,
}

impl Trainer<'_> {
    fn step(&mut self, iter: u64, ids: &[String]) -> Result<LogRecord> {
        let mut batch: Vec<ChangeSample> = Vec::with_capacity(ids.len());
        let mut aug_rng = ChaCha8Rng::seed_from_u64(self.cfg.loop_.seed);
        aug_rng.set_stream(iter);
        for id in ids {
            let s = self.data.get(id)?;
            batch.push(if self.cfg.loop_.augment {
                s.augmented(&mut aug_rng)
            } else {
                s.clone()
            });
        }
        let refs: Vec<&ChangeSample> = batch.iter().collect();
        let (x1, x2, label) = batch_tensors(&refs)?;

        let mut tape = Tape::new();
        let a = tape.constant(x1);
        let b = tape.constant(x2);
        let out = self.net.forward(&mut tape, a, b, Mode::Train)?;
        let loss = self.net.loss(&mut tape, &out, &label, &self.cfg.loss, self.weights)?;
        let value = |v| tape.value(v).data()[0];
        let record = LogRecord {
            iter,
            lr: learning_rate(self.cfg.optimizer.lr0, iter, self.cfg.schedule.decay_end_iter),
            wbce: value(loss.wbce),
            dice4: loss.dice4.map(value),
            dice5: loss.dice5.map(value),
            total: value(loss.total),
            val_f1: None,
        };
        if !record.total.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite loss at iteration {iter}: wbce={} dice4={:?} dice5={:?} total={}",
                record.wbce, record.dice4, record.dice5, record.total
            )));
        }
        let grads = tape.backward(loss.total)?;
        self.net.params.zero_grad();
        tape.accumulate_param_grads(&grads, &mut self.net.params)?;
        adam_step(&mut self.net.params, &mut self.adam, record.lr, &self.cfg.optimizer)?;
        self.net.apply_bn_updates(&out.bn_updates)?;
        Ok(record)
    }

    fn snapshot(&self, iter: u64, val: Option<Metrics>) -> Checkpoint {
        let mut model = self.net.clone();
        model.params.zero_grad();
        Checkpoint {
            model,
            optimizer: self.adam.clone(),
            iter,
            val_metrics: val,
        }
    }
}

/// Runs the optimization loop. Log records are also streamed as JSON lines
/// to `sink` when given.
pub fn train_on(cfg: &RunConfig, data: &Dataset, mut sink: Option<&mut dyn Write>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_samples = data.part(Part::Train)?;
    let weights = cfg
        .loss
        .class_weights(class_weights_from_labels(train_samples.iter().map(|s| &s.label)));
    info!("class weights w0={:.4} w1={:.4}", weights.w0, weights.w1);
    let net = DsferNet::new(cfg.model.clone(), cfg.loop_.seed)?;
    let adam = AdamState::new(&net.params);
    let mut trainer = Trainer {
        cfg,
        data,
        net,
        adam,
        weights,
    };
    let val_samples = data.part(Part::Val)?;
    let validate = cfg.loop_.val_every > 0 && !val_samples.is_empty();

    let mut log = Vec::with_capacity(cfg.loop_.max_iters as usize);
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut epoch = 0u64;
    let mut batches = Vec::new().into_iter();
    for iter in 0..cfg.loop_.max_iters {
        let ids = match batches.next() {
            Some(ids) => ids,
            None => {
                batches = iterate_batches(&data.split, Part::Train, cfg.loop_.batch_size, cfg.loop_.seed, epoch)?.into_iter();
                epoch += 1;
                batches.next().expect("at least one batch")
            }
        };
        let mut record = trainer.step(iter, &ids)?;
        let done = iter + 1;
        if validate && (done % cfg.loop_.val_every == 0 || done == cfg.loop_.max_iters) {
            let cc = evaluate_samples(&trainer.net, &val_samples)?;
            let m = cc.metrics();
            record.val_f1 = Some(m.f1);
            info!("iter {done}: loss {:.4}, val F1 {:.4}", record.total, m.f1);
            if best.as_ref().is_none_or(|(f, _)| m.f1 > *f) {
                best = Some((m.f1, trainer.snapshot(done, Some(m))));
            }
        }
        if let Some(w) = sink.as_deref_mut() {
            let line = serde_json::to_string(&record)?;
            writeln!(w, "{line}").map_err(|e| Error::io("<log>", e))?;
        }
        log.push(record);
    }
    let last = trainer.snapshot(cfg.loop_.max_iters, None);
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome {
        best,
        last,
        log,
        class_weights: weights,
    })
}

/// Loads the configured data, trains, and writes `log.jsonl` and
/// `best.ckpt` into `paths.out_dir` when set.
pub fn train(cfg: &RunConfig) -> Result<(Dataset, TrainOutcome)> {
    let data = cfg.data.prepare()?;
    let outcome = match &cfg.paths.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let log_path = dir.join(LOG_FILE);
            let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut w = std::io::BufWriter::new(file);
            let outcome = train_on(cfg, &data, Some(&mut w))?;
            w.flush().map_err(|e| Error::io(&log_path, e))?;
            outcome.best.save(dir.join(BEST_CHECKPOINT))?;
            outcome
        }
        None => train_on(cfg, &data, None)?,
    };
    Ok((data, outcome))
}
