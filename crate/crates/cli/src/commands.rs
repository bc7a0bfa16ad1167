use std::fs;
use std::path::Path;

use dsfer_core::data::{self, synth_generate, ChangeSample};
use dsfer_core::gradcheck::run_suite;
use dsfer_core::metrics::{confusion, ConfusionCounts, Metrics, PercentReport};
use dsfer_core::model::Variant;
use dsfer_core::tensor::Tensor;
use dsfer_core::train::{
    evaluate, export_retrieval, infer, run_ablation, run_lambda_sweep, train, write_inference, write_retrieval,
    Checkpoint, RunConfig, BEST_CHECKPOINT, LOG_FILE,
};
use dsfer_core::Error;
use log::info;
use serde::Serialize;

use crate::config::load_config;
use crate::{Command, ConfigArgs};

/// Metrics document written by `eval`.
#[derive(Debug, Serialize)]
struct EvalReport {
    part: String,
    samples: usize,
    #[serde(flatten)]
    percent: PercentReport,
    confusion: ConfusionCounts,
}

fn resolve(args: &ConfigArgs) -> anyhow::Result<RunConfig> {
    load_config(args.preset.as_deref(), args.config.as_deref(), &args.overrides)
}

fn write_json(path: &Path, value: &impl Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

/// Loads a checkpoint; when a configuration was given explicitly its
/// architecture must match.
fn load_checkpoint(path: &Path, args: &ConfigArgs, cfg: &RunConfig) -> anyhow::Result<Checkpoint> {
    let expected = args.given().then_some(&cfg.model);
    Ok(Checkpoint::load(path, expected)?)
}

fn read_image_pair(t1: &Path, t2: &Path, label: Option<&Path>) -> anyhow::Result<ChangeSample> {
    let id = t1
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "pair".into());
    let image_t1 = data::read_image(t1)?;
    let image_t2 = data::read_image(t2)?;
    let label = match label {
        Some(p) => data::read_mask(p)?,
        None => Tensor::zeros(&image_t1.shape()[1..]),
    };
    Ok(ChangeSample::new(id, image_t1, image_t2, label)?)
}

fn read_prediction(dir: &Path, id: &str) -> anyhow::Result<Tensor> {
    let path = dir.join(format!("{id}.png"));
    if !path.is_file() {
        return Err(Error::Sample {
            id: id.to_string(),
            reason: format!("missing prediction {}", path.display()),
        }
        .into());
    }
    Ok(data::read_mask(&path)?)
}

fn print_metrics(part: &str, samples: usize, m: &Metrics, cc: ConfusionCounts, json: Option<&Path>) -> anyhow::Result<()> {
    let report = EvalReport {
        part: part.to_string(),
        samples,
        percent: m.percent(),
        confusion: cc,
    };
    println!("{}", report.percent);
    println!("{}", serde_json::to_string(&report)?);
    if let Some(path) = json {
        write_json(path, &report)?;
    }
    Ok(())
}

pub fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth {
            out,
            seed,
            count,
            size,
            difficulty,
        } => {
            let samples = synth_generate(seed, count, size, difficulty)?;
            data::save_dataset(&out, &samples)?;
            info!(
                "wrote {count} samples to {} (changed fraction {:.4})",
                out.display(),
                data::changed_fraction(&samples)
            );
        }
        Command::Train { config, out } => {
            let mut cfg = resolve(&config)?;
            if let Some(out) = out {
                cfg.paths.out_dir = Some(out);
            }
            let (data, outcome) = train(&cfg)?;
            if let Some(dir) = &cfg.paths.out_dir {
                write_json(&dir.join("config.json"), &cfg)?;
                info!(
                    "wrote {} and {} to {}",
                    BEST_CHECKPOINT,
                    LOG_FILE,
                    dir.display()
                );
            }
            let (m, cc) = evaluate(&outcome.best.model, &data, data::Part::Val)?;
            info!("best checkpoint from iteration {}", outcome.best.iter);
            print_metrics("val", data.split.val.len(), &m, cc, None)?;
        }
        Command::Eval {
            config,
            checkpoint,
            predictions,
            part,
            json,
        } => {
            let cfg = resolve(&config)?;
            let dataset = cfg.data.prepare()?;
            let samples = dataset.part(part)?;
            let (m, cc) = match (checkpoint, predictions) {
                (Some(ckpt), _) => {
                    let ckpt = load_checkpoint(&ckpt, &config, &cfg)?;
                    evaluate(&ckpt.model, &dataset, part)?
                }
                (None, Some(dir)) => {
                    let mut cc = ConfusionCounts::default();
                    for s in &samples {
                        cc += confusion(&read_prediction(&dir, &s.id)?, &s.label)?;
                    }
                    (cc.metrics(), cc)
                }
                (None, None) => unreachable!("clap requires one of them"),
            };
            print_metrics(&part.to_string(), samples.len(), &m, cc, json.as_deref())?;
        }
        Command::Infer {
            config,
            checkpoint,
            t1,
            t2,
            label,
            out,
        } => {
            let cfg = resolve(&config)?;
            let ckpt = load_checkpoint(&checkpoint, &config, &cfg)?;
            let sample = read_image_pair(&t1, &t2, label.as_deref())?;
            let inf = infer(
                &ckpt.model,
                &sample.image_t1,
                &sample.image_t2,
                label.is_some().then_some(&sample.label),
            )?;
            for p in write_inference(&inf, &out, &sample.id)? {
                println!("{}", p.display());
            }
            if let Some(cc) = inf.confusion {
                println!("{}", cc.metrics().percent());
            }
        }
        Command::Gradcheck { scale, json } => {
            let report = run_suite(scale)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&report)?);
            } else {
                print!("{}", report.table());
            }
            if !report.all_passed() {
                return Err(Error::Numeric("gradient check failed".into()).into());
            }
        }
        Command::VizHopfield {
            config,
            checkpoint,
            sample_id,
            out,
        } => {
            let cfg = resolve(&config)?;
            let ckpt = load_checkpoint(&checkpoint, &config, &cfg)?;
            let dataset = cfg.data.prepare()?;
            let sample = dataset.get(&sample_id)?;
            let maps = export_retrieval(&ckpt.model, sample)?;
            for p in write_retrieval(&maps, sample, &out)? {
                println!("{}", p.display());
            }
        }
        Command::Ablation { config, seeds, json } => {
            let cfg = resolve(&config)?;
            let dataset = cfg.data.prepare()?;
            let report = run_ablation(&cfg, &dataset, &Variant::ALL, &seeds)?;
            print!("{report}");
            if let Some(path) = json {
                write_json(&path, &report)?;
            }
        }
        Command::LambdaSweep { config, lambdas, json } => {
            let cfg = resolve(&config)?;
            let dataset = cfg.data.prepare()?;
            let report = run_lambda_sweep(&cfg, &dataset, &lambdas)?;
            print!("{report}");
            if let Some(path) = json {
                write_json(&path, &report)?;
            }
        }
        Command::Config { preset } => {
            println!("{}", serde_json::to_string_pretty(&RunConfig::preset(&preset)?)?);
        }
    }
    Ok(())
}
