//! Layered configuration: preset defaults, then the TOML file, then flags.

use std::path::Path;

use gs4c::pipeline::{PipelineConfig, Preset};
use gs4c::synth::SyntheticSceneSpec;
use gs4c::{Error, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

fn read_table(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    text.parse::<Table>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn merge(base: &mut Table, over: Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Dotted paths present in `given` but not in `known`.
fn unknown_keys(given: &Table, known: &Table, prefix: &str, out: &mut Vec<String>) {
    for (k, v) in given {
        let path = format!("{prefix}{k}");
        match (known.get(k), v) {
            (None, _) => out.push(path),
            (Some(Value::Table(kt)), Value::Table(gt)) => unknown_keys(gt, kt, &format!("{path}."), out),
            _ => {}
        }
    }
}

/// Deserializes `base` overlaid with the file at `path`, rejecting keys the
/// target type does not have.
fn layered<T: Serialize + DeserializeOwned + Clone>(base: &T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(base.clone());
    };
    let file = read_table(path)?;
    let mut table = Table::try_from(base).map_err(cfg_err)?;
    merge(&mut table, file.clone());
    let value: T = Value::Table(table)
        .try_into()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let known = Table::try_from(&value).map_err(cfg_err)?;
    let mut unknown = Vec::new();
    unknown_keys(&file, &known, "", &mut unknown);
    if !unknown.is_empty() {
        return Err(Error::Config(format!(
            "{}: unknown keys: {}",
            path.display(),
            unknown.join(", ")
        )));
    }
    Ok(value)
}

fn cfg_err(e: impl std::fmt::Display) -> Error {
    Error::Config(e.to_string())
}

pub fn pipeline_config(path: Option<&Path>, preset: Option<Preset>, seed: Option<u64>) -> Result<PipelineConfig> {
    let base = preset.map_or_else(PipelineConfig::default, PipelineConfig::preset);
    let mut cfg = layered(&base, path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn synth_spec(path: Option<&Path>) -> Result<SyntheticSceneSpec> {
    let spec = layered(&SyntheticSceneSpec::default(), path)?;
    spec.validate()?;
    Ok(spec)
}
