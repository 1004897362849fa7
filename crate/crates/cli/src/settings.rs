use std::path::Path;
use std::str::FromStr;

use denomae::pipeline::{PipelineError, Result, RunConfig, TrainConfig};
use serde_json::Value;

use crate::args::{Common, TrainFlags};

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Preset, overlaid with the optional JSON file. Unknown keys are errors.
pub fn load(common: &Common) -> Result<RunConfig> {
    let preset = RunConfig::preset(&common.preset).ok_or_else(|| PipelineError::Config(format!("unknown preset {}", common.preset)))?;
    let mut cfg = match &common.config {
        None => preset,
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
            let over: Value = serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
            let mut base = serde_json::to_value(&preset).expect("config serializes");
            reject_unknown(&base, &over, "")?;
            merge(&mut base, over);
            serde_json::from_value(base).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?
        }
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn reject_unknown(base: &Value, over: &Value, at: &str) -> Result<()> {
    if let (Value::Object(b), Value::Object(o)) = (base, over) {
        for (k, v) in o {
            let path = if at.is_empty() { k.clone() } else { format!("{at}.{k}") };
            match b.get(k) {
                None => return Err(PipelineError::Config(format!("unknown config key {path}"))),
                Some(inner) => reject_unknown(inner, v, &path)?,
            }
        }
    }
    Ok(())
}

pub fn apply_train(t: &mut TrainConfig, f: &TrainFlags) {
    if let Some(v) = f.epochs {
        t.epochs = v;
    }
    if let Some(v) = f.lr {
        t.lr = v;
    }
    if let Some(v) = f.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = f.checkpoint_every {
        t.checkpoint_every = v;
    }
}

pub fn parse_list<T: FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    let items = text
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| PipelineError::Config(format!("{what} {s:?}: {e}"))))
        .collect::<Result<Vec<T>>>()?;
    if items.is_empty() {
        return Err(PipelineError::Config(format!("empty {what} list")));
    }
    Ok(items)
}

/// `a..b` (inclusive integer range, either direction) or `x,y,z`.
pub fn parse_snrs(text: &str) -> Result<Vec<f64>> {
    if let Some((a, b)) = text.split_once("..") {
        let parse = |s: &str| {
            s.trim()
                .parse::<i32>()
                .map_err(|e| PipelineError::Config(format!("SNR range bound {s:?}: {e}")))
        };
        let (a, b) = (parse(a)?, parse(b)?);
        let out: Vec<f64> = if a <= b {
            (a..=b).map(f64::from).collect()
        } else {
            (b..=a).rev().map(f64::from).collect()
        };
        return Ok(out);
    }
    let v: Vec<f64> = parse_list(text, "SNR")?;
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(PipelineError::Config(format!("SNR {bad} is not finite")));
    }
    Ok(v)
}

/// Refuses to reuse a non-empty run directory unless `overwrite` (which
/// clears it) or `keep` (resume) is set.
pub fn prepare_out(dir: &Path, overwrite: bool, keep: bool) -> Result<()> {
    let occupied = dir.exists() && std::fs::read_dir(dir).map_err(|e| PipelineError::io(dir, e))?.next().is_some();
    if occupied && !keep {
        if !overwrite {
            return Err(PipelineError::Config(format!(
                "run directory {} exists and is not empty (pass --overwrite to replace it)",
                dir.display()
            )));
        }
        std::fs::remove_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }
    std::fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))
}

pub fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    let path = dir.join("resolved_config.json");
    let mut text = serde_json::to_string_pretty(cfg).expect("config serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))
}
