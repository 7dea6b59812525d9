//! JSON run configs with dotted-path overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde_json::Value;

use crate::error::{Error, Result};
use crate::models::HcrnConfig;
use crate::synth::{SceneSpec, SequenceSpec};
use crate::train::{LogModelConfig, RunConfig};

/// Sets `path` (dot separated) in `root` to `raw`, parsed as JSON when
/// possible and as a bare string otherwise. Missing objects are created so
/// unknown keys surface in deserialization with their full path.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').ok_or_else(|| Error::Config {
        path: assignment.into(),
        message: "override must look like key=value".into(),
    })?;
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Config { path: path.into(), message: "empty key segment".into() });
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::Config {
            path: parts[..i].join("."),
            message: "cannot set a field inside a non-object".into(),
        })?;
        if i == parts.len() - 1 {
            obj.insert((*part).to_string(), value);
            return Ok(());
        }
        cur = obj.entry((*part).to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("loop returns on the last segment")
}

/// Deserializes with the failing field path in the error.
pub fn from_value<T: DeserializeOwned>(v: Value) -> Result<T> {
    serde_path_to_error::deserialize(v)
        .map_err(|e| Error::Config { path: e.path().to_string(), message: e.inner().to_string() })
}

pub fn parse_run_config(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut v: Value =
        serde_json::from_str(text).map_err(|e| Error::Config { path: ".".into(), message: e.to_string() })?;
    for o in overrides {
        apply_override(&mut v, o)?;
    }
    let cfg: RunConfig = from_value(v.clone()).map_err(|e| refine(&v, e))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Internally tagged sections are buffered before they reach their variant,
/// which hides the inner field from the error path. Re-reading the section as
/// the tagged variant recovers it.
fn refine(root: &Value, err: Error) -> Error {
    let Error::Config { path, .. } = &err else { return err };
    let (tag, section) = match path.as_str() {
        "model" => ("arch", "model"),
        "data" => ("family", "data"),
        _ => return err,
    };
    let Some(mut obj) = root.get(section).and_then(Value::as_object).cloned() else { return err };
    let Some(Value::String(variant)) = obj.remove(tag) else { return err };
    let inner = Value::Object(obj);
    let found = match (section, variant.as_str()) {
        ("model", "hcrn") => from_value::<HcrnConfig>(inner).err(),
        ("model", "lognet") => from_value::<LogModelConfig>(inner).err(),
        ("data", "sequence") => from_value::<SequenceSpec>(inner).err(),
        ("data", "scene") => from_value::<SceneSpec>(inner).err(),
        _ => None,
    };
    match found {
        Some(Error::Config { path, message }) => Error::Config { path: format!("{section}.{path}"), message },
        _ => err,
    }
}

pub fn load_run_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_run_config(&text, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{
        "seed": 1,
        "data": {"family": "sequence", "kind": "count_symbol", "num_clips": 4, "clip_len": 4,
                 "symbols": 4, "d": 8, "n_samples": 20, "seed": 0},
        "model": {"arch": "hcrn", "d": 8},
        "optim": {"lr": 0.001},
        "epochs": 1, "batch_size": 4, "n_val": 4
    }"#;

    #[test]
    fn overrides_replace_nested_values() {
        let cfg = parse_run_config(BASE, &["optim.lr=0.01".into(), "model.sampling=exhaustive".into()]).unwrap();
        assert_eq!(cfg.optim.lr, 0.01);
        let crate::train::ModelConfig::Hcrn(m) = cfg.model else { panic!("hcrn expected") };
        assert_eq!(m.sampling, crate::crn::Sampling::Exhaustive);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        match parse_run_config(BASE, &["optim.lrr=0.01".into()]) {
            Err(Error::Config { path, message }) => {
                assert_eq!(path, "optim.lrr");
                assert!(message.contains("lrr"), "{message}");
            }
            other => panic!("expected a config error, got {other:?}"),
        }
        assert!(matches!(parse_run_config(BASE, &["nonsense".into()]), Err(Error::Config { .. })));
    }

    #[test]
    fn tagged_sections_report_inner_paths() {
        match parse_run_config(BASE, &["model.dd=3".into()]) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "model.dd"),
            other => panic!("{other:?}"),
        }
        match parse_run_config(BASE, &["data.clip_len=\"x\"".into()]) {
            Err(Error::Config { path, .. }) => assert_eq!(path, "data.clip_len"),
            other => panic!("{other:?}"),
        }
    }
}
