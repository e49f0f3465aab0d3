//! Flat JSON run configs. A config file holds scalar values under flat
//! dotted keys; `--set KEY=VALUE` overrides win over the file; the
//! `LXLAB_SEED` variable supplies the default seed when nothing names
//! one. Every run that writes files echoes its fully resolved settings
//! into a `resolved.json` snapshot next to them, minus the destination
//! itself, so the run can be repeated against any directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde_json::{Map, Number, Value};

use lxlab_core::docmodel::Lang;
use lxlab_core::train::{Preset, Regime, Task, TrainConfig};

use crate::{runtime, usage, CliError};

pub const SEED_ENV: &str = "LXLAB_SEED";
pub const SNAPSHOT_FILE: &str = "resolved.json";

/// Key/value view of one run's settings, before typing.
pub struct ConfigMap(BTreeMap<String, Value>);

impl ConfigMap {
    /// File values (if any) with `--set` pairs layered on top.
    pub fn load(file: Option<&Path>, sets: &[String]) -> Result<ConfigMap, CliError> {
        let mut map = BTreeMap::new();
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| runtime(format!("read {}: {e}", path.display())))?;
            let root: Value = serde_json::from_str(&text)
                .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
            let Value::Object(obj) = root else {
                return Err(usage(format!(
                    "config {} must be a JSON object of flat keys",
                    path.display()
                )));
            };
            for (k, v) in obj {
                if v.is_object() || v.is_array() {
                    return Err(usage(format!(
                        "config key {k:?} must be a scalar; lists are comma-separated strings"
                    )));
                }
                map.insert(k, v);
            }
        }
        for s in sets {
            let Some((k, v)) = s.split_once('=') else {
                return Err(usage(format!("--set needs KEY=VALUE, got {s:?}")));
            };
            if k.is_empty() {
                return Err(usage("--set key must not be empty"));
            }
            map.insert(k.to_string(), parse_scalar(v));
        }
        Ok(ConfigMap(map))
    }
}

/// A bare scalar: a JSON literal when it parses as one, a string otherwise.
fn parse_scalar(v: &str) -> Value {
    match serde_json::from_str::<Value>(v) {
        Ok(val) if !val.is_object() && !val.is_array() => val,
        _ => Value::String(v.to_string()),
    }
}

/// The seed environment variable, parsed if present.
pub fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV} must be an unsigned integer, got {s:?}"))),
        Err(_) => Ok(None),
    }
}

/// Resolve a training config: built-in defaults for `default_task`, then
/// the seed environment variable, then every key from the map.
pub fn resolve_train(map: &ConfigMap, default_task: Task) -> Result<TrainConfig, CliError> {
    let mut cfg = TrainConfig::tiny(default_task);
    if let Some(seed) = env_seed()? {
        cfg.seed = seed;
    }
    for (k, v) in &map.0 {
        match k.as_str() {
            "preset" => cfg.preset = named_value(v, k, Preset::parse)?,
            "task" => cfg.task = named_value(v, k, Task::parse)?,
            "regime" => cfg.regime = named_value(v, k, Regime::parse)?,
            "lr" => cfg.lr = f64_value(v, k)?,
            "warmup_frac" => cfg.warmup_frac = f64_value(v, k)?,
            "steps" => cfg.steps = u64_value(v, k)?,
            "batch_size" => cfg.batch_size = u64_value(v, k)? as usize,
            "grad_clip" => cfg.grad_clip = f64_value(v, k)?,
            "seed" => cfg.seed = u64_value(v, k)?,
            "train_langs" => cfg.train_langs = langs_value(v, k)?,
            "eval_langs" => cfg.eval_langs = langs_value(v, k)?,
            "re_negative_ratio" => cfg.re_negative_ratio = ratio_value(v, k)?,
            other => return Err(usage(format!("unknown config key {other:?}"))),
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn bad(key: &str, v: &Value) -> CliError {
    usage(format!("config key {key:?} rejects value {v}"))
}

fn f64_value(v: &Value, key: &str) -> Result<f64, CliError> {
    match v {
        Value::Number(n) => n.as_f64().ok_or_else(|| bad(key, v)),
        Value::String(s) => s.trim().parse().map_err(|_| bad(key, v)),
        _ => Err(bad(key, v)),
    }
}

fn u64_value(v: &Value, key: &str) -> Result<u64, CliError> {
    match v {
        Value::Number(n) => n.as_u64().ok_or_else(|| bad(key, v)),
        Value::String(s) => s.trim().parse().map_err(|_| bad(key, v)),
        _ => Err(bad(key, v)),
    }
}

fn named_value<T>(v: &Value, key: &str, parse: fn(&str) -> Option<T>) -> Result<T, CliError> {
    match v {
        Value::String(s) => parse(s.trim()).ok_or_else(|| bad(key, v)),
        _ => Err(bad(key, v)),
    }
}

fn langs_value(v: &Value, key: &str) -> Result<Vec<Lang>, CliError> {
    match v {
        Value::String(s) => parse_langs(s),
        _ => Err(bad(key, v)),
    }
}

fn ratio_value(v: &Value, key: &str) -> Result<Option<f64>, CliError> {
    match v {
        Value::Null => Ok(None),
        Value::String(s) if s.trim().eq_ignore_ascii_case("none") => Ok(None),
        other => f64_value(other, key).map(Some),
    }
}

/// Comma-separated language codes into typed languages.
pub fn parse_langs(s: &str) -> Result<Vec<Lang>, CliError> {
    s.split(',')
        .map(|c| {
            let c = c.trim();
            Lang::from_code(c).ok_or_else(|| {
                usage(format!(
                    "unknown language code {c:?}; expected one of {}",
                    Lang::ALL.map(|l| l.code()).join(",")
                ))
            })
        })
        .collect()
}

pub fn join_langs(langs: &[Lang]) -> String {
    langs.iter().map(|l| l.code()).collect::<Vec<_>>().join(",")
}

fn json_f64(x: f64) -> Value {
    Number::from_f64(x).map(Value::Number).unwrap_or(Value::Null)
}

/// Flat dotted view of a resolved training config, for the snapshot.
pub fn train_entries(cfg: &TrainConfig) -> Vec<(&'static str, Value)> {
    let mut v = vec![
        ("train.preset", Value::String(cfg.preset.code().into())),
        ("train.task", Value::String(cfg.task.code().into())),
        ("train.regime", Value::String(cfg.regime.code().into())),
        ("train.lr", json_f64(cfg.lr)),
        ("train.warmup_frac", json_f64(cfg.warmup_frac)),
        ("train.steps", Value::from(cfg.steps)),
        ("train.batch_size", Value::from(cfg.batch_size as u64)),
        ("train.grad_clip", json_f64(cfg.grad_clip)),
        ("train.seed", Value::from(cfg.seed)),
        ("train.train_langs", Value::String(join_langs(&cfg.train_langs))),
        ("train.eval_langs", Value::String(join_langs(&cfg.eval_langs))),
    ];
    if let Some(r) = cfg.re_negative_ratio {
        v.push(("train.re_negative_ratio", json_f64(r)));
    }
    v
}

/// Write the snapshot into `out_dir`. The destination directory is left
/// out on purpose: reruns pick their own.
pub fn write_snapshot(
    out_dir: &Path,
    subcommand: &str,
    entries: &[(&str, Value)],
) -> Result<(), CliError> {
    let mut obj = Map::new();
    obj.insert("subcommand".into(), Value::String(subcommand.into()));
    for (k, v) in entries {
        obj.insert((*k).to_string(), v.clone());
    }
    let text = serde_json::to_string_pretty(&Value::Object(obj)).expect("snapshot serialize");
    fs::create_dir_all(out_dir)
        .map_err(|e| runtime(format!("create {}: {e}", out_dir.display())))?;
    let path = out_dir.join(SNAPSHOT_FILE);
    fs::write(&path, text + "\n").map_err(|e| runtime(format!("write {}: {e}", path.display())))
}
