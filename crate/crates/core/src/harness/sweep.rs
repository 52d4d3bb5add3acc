use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::RunConfig;
use super::run::run_to_csv;
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};

/// Short names accepted for common axes.
pub const AXIS_ALIASES: [(&str, &str); 12] = [
    ("E", "train_every"),
    ("F", "rollout_batch"),
    ("k", "rollout_length"),
    ("G2", "adaptation.g2"),
    ("g2", "adaptation.g2"),
    ("G3", "policy_updates"),
    ("g3", "policy_updates"),
    ("B", "model.ensemble_size"),
    ("strategy", "adaptation.strategy"),
    ("divergence", "adaptation.divergence"),
    ("alpha", "adaptation.alpha"),
    ("stop_epoch", "adaptation.stop_epoch"),
];

fn leaf_paths(v: &toml::Value, prefix: &str, out: &mut Vec<String>) {
    if let toml::Value::Table(t) = v {
        for (k, child) in t {
            let p = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            if child.is_table() {
                leaf_paths(child, &p, out);
            } else {
                out.push(p);
            }
        }
    }
}

/// Every dotted configuration path that can be swept, plus aliases.
pub fn valid_axes() -> Vec<String> {
    let v = toml::Value::try_from(RunConfig::default()).expect("default config serializes");
    let mut out = Vec::new();
    leaf_paths(&v, "", &mut out);
    // Optional fields are absent from the default serialization.
    out.push("sac.target_entropy".into());
    out.extend(AXIS_ALIASES.iter().map(|(a, _)| a.to_string()));
    out.sort();
    out
}

fn resolve(axis: &str) -> Result<String> {
    let path = AXIS_ALIASES.iter().find(|(a, _)| *a == axis).map_or(axis, |(_, p)| p).to_string();
    if valid_axes().contains(&path) {
        Ok(path)
    } else {
        Err(Error::config(format!("unknown sweep axis `{axis}`; valid axes: {}", valid_axes().join(", "))))
    }
}

/// Parses a command-line value as a TOML literal, falling back to a string.
pub fn parse_value(text: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {text}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(text.to_string()))
}

/// `base` with the field at `axis` replaced by `value`.
pub fn with_axis(base: &RunConfig, axis: &str, value: &toml::Value) -> Result<RunConfig> {
    let path = resolve(axis)?;
    let mut root = toml::Value::try_from(base).map_err(|e| Error::config(e.to_string()))?;
    let mut node = &mut root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        node = node
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("missing section `{part}`")))?;
    }
    let table = node.as_table_mut().ok_or_else(|| Error::config(format!("`{path}` is not inside a section")))?;
    table.insert(parts[parts.len() - 1].to_string(), value.clone());
    let cfg: RunConfig = root
        .try_into()
        .map_err(|e: toml::de::Error| Error::config(format!("value {value} for `{axis}`: {}", e.message())))?;
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ManifestRow {
    pub cell: usize,
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub csv_path: String,
    pub status: String,
}

fn label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

/// Runs every value × seed cell, one CSV each, and writes `manifest.csv`
/// into `out_dir`. Failed cells are recorded in the manifest; the first
/// failure is returned after all cells have finished.
pub fn sweep(base: &RunConfig, axis: &str, values: &[toml::Value], out_dir: &Path, exec: Execution) -> Result<Vec<ManifestRow>> {
    if values.is_empty() {
        return Err(Error::usage("sweep needs at least one value"));
    }
    let mut cells = Vec::new();
    for v in values {
        let cfg = with_axis(base, axis, v)?;
        for &seed in &cfg.seeds {
            let name = format!("{}={}", axis, label(v)).replace(['/', ' ', '"'], "_");
            let path: PathBuf = out_dir.join(name).join(format!("seed{seed}.csv"));
            cells.push((cfg.clone(), label(v), seed, path));
        }
    }
    let results = parallel::map(exec, &cells, |(cfg, _, seed, path)| run_to_csv(cfg, *seed, path).map(|_| ()));
    let rows: Vec<ManifestRow> = cells
        .iter()
        .zip(&results)
        .enumerate()
        .map(|(i, ((_, v, seed, path), res))| ManifestRow {
            cell: i,
            axis: axis.to_string(),
            value: v.clone(),
            seed: *seed,
            csv_path: path.display().to_string(),
            status: match res {
                Ok(()) => "ok".into(),
                Err(e) => format!("error: {}", e.class()),
            },
        })
        .collect();
    std::fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join("manifest.csv"))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    if let Some(e) = results.into_iter().find_map(|r| r.err()) {
        return Err(e);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapt::Strategy;

    #[test]
    fn aliases_and_paths_resolve() {
        let base = RunConfig::default();
        let c = with_axis(&base, "strategy", &parse_value("fixed_real")).unwrap();
        assert_eq!(c.adaptation.strategy, Strategy::FixedReal);
        let c = with_axis(&base, "G3", &parse_value("3")).unwrap();
        assert_eq!(c.policy_updates, 3);
        let c = with_axis(&base, "k", &parse_value("[1, 10, 1, 4]")).unwrap();
        assert_eq!(c.rollout_length.eval(10), 4);
        let c = with_axis(&base, "sac.target_entropy", &parse_value("-2.0")).unwrap();
        assert_eq!(c.sac.target_entropy, Some(-2.0));
    }

    #[test]
    fn bad_axis_lists_valid_ones() {
        let err = with_axis(&RunConfig::default(), "nope", &parse_value("1")).unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("policy_updates")));
        assert!(matches!(with_axis(&RunConfig::default(), "G3", &parse_value("\"x\"")), Err(Error::Config(_))));
    }
}
