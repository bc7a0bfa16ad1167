//! Run configuration from a preset, an optional JSON file and dotted
//! `key=value` overrides.

use std::fs;
use std::path::Path;

use dsfer_core::train::RunConfig;
use dsfer_core::Error;
use serde_json::Value;

fn config_error(msg: String) -> anyhow::Error {
    Error::Config(msg).into()
}

/// Parses a JSON config. Fields left out take their values from the desk
/// preset. Errors name the offending key path and the line.
pub fn parse_config(text: &str, origin: &str) -> anyhow::Result<RunConfig> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        config_error(format!(
            "{origin}: key `{path}` (line {}, column {}): {inner}",
            inner.line(),
            inner.column()
        ))
    })
}

fn from_value(value: Value) -> anyhow::Result<RunConfig> {
    serde_path_to_error::deserialize(value).map_err(|e| {
        let path = e.path().to_string();
        config_error(format!("override of `{path}`: {}", e.into_inner()))
    })
}

/// Sets `key` (dotted path) to `raw`, parsed as JSON when possible and as a
/// string otherwise. Only keys that already exist may be set.
pub fn apply_override(cfg: RunConfig, assignment: &str) -> anyhow::Result<RunConfig> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_error(format!("override `{assignment}` is not of the form key=value")))?;
    let key = key.trim();
    let mut root = serde_json::to_value(&cfg)?;
    let mut slot = &mut root;
    for part in key.split('.') {
        slot = match slot {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| config_error(format!("unknown config key `{key}`")))?,
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| config_error(format!("unknown config key `{key}`")))?;
                let len = items.len();
                items
                    .get_mut(idx)
                    .ok_or_else(|| config_error(format!("index {idx} out of range for `{key}` (length {len})")))?
            }
            _ => return Err(config_error(format!("unknown config key `{key}`"))),
        };
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    from_value(root)
}

pub fn load_config(preset: Option<&str>, file: Option<&Path>, overrides: &[String]) -> anyhow::Result<RunConfig> {
    let mut cfg = match file {
        Some(path) => {
            if preset.is_some() {
                return Err(config_error("--preset and --config are mutually exclusive".into()));
            }
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: e,
            })?;
            parse_config(&text, &path.display().to_string())?
        }
        None => RunConfig::preset(preset.unwrap_or("desk"))?,
    };
    for o in overrides {
        cfg = apply_override(cfg, o)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields() {
        let cfg = RunConfig::desk();
        let cfg = apply_override(cfg, "loop.batch_size=3").unwrap();
        let cfg = apply_override(cfg, "model.encoder.stage_widths.4=16").unwrap();
        let cfg = apply_override(cfg, "loss.w0=0.25").unwrap();
        let cfg = apply_override(cfg, "data.root=some/dir").unwrap();
        assert_eq!(cfg.loop_.batch_size, 3);
        assert_eq!(cfg.model.encoder.stage_widths[4], 16);
        assert_eq!(cfg.loss.w0, Some(0.25));
        assert_eq!(cfg.data.root.as_deref(), Some(Path::new("some/dir")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for bad in ["loop.batch=3", "nonsense=1", "loop.batch_size.x=1", "model.encoder.stage_widths.9=1"] {
            let err = apply_override(RunConfig::desk(), bad).unwrap_err();
            assert!(err.to_string().contains("config"), "{bad}: {err}");
        }
        assert!(apply_override(RunConfig::desk(), "loop.batch_size").is_err());
    }

    #[test]
    fn type_errors_name_the_key() {
        let err = apply_override(RunConfig::desk(), "loop.batch_size=\"big\"").unwrap_err();
        assert!(err.to_string().contains("loop.batch_size"), "{err}");
    }

    #[test]
    fn parse_errors_report_path_and_line() {
        let text = "{\n  \"loop\": {\n    \"max_iters\": 10,\n    \"batch_sise\": 2\n  }\n}\n";
        let err = parse_config(text, "cfg.json").unwrap_err().to_string();
        assert!(err.contains("loop"), "{err}");
        assert!(err.contains("line 4"), "{err}");
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = parse_config(r#"{"loss": {"lambda": 1.0}}"#, "x").unwrap();
        assert_eq!(cfg.loss.lambda, 1.0);
        assert_eq!(cfg.loop_, RunConfig::desk().loop_);
    }
}
