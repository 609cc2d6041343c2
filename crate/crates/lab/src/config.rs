//! Experiment configuration files.
//!
//! A file only needs the fields it changes: `domain` and `method` select the
//! defaults, and every other key overrides them. `--set path=value` flags are
//! merged the same way.

use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use querysynth_core::harness::{DomainKind, ExperimentConfig, Method};
use toml::{Table, Value};

fn str_field<'a>(t: &'a Table, key: &str) -> Result<Option<&'a str>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::String(s)) => Ok(Some(s)),
        Some(v) => bail!("`{key}` must be a string, got {v}"),
    }
}

fn defaults_for(t: &Table) -> Result<ExperimentConfig> {
    let domain = match str_field(t, "domain")? {
        None | Some("nav2d") => DomainKind::Nav2d,
        Some("gaussclass") => DomainKind::Gaussclass,
        Some(other) => bail!("unknown domain {other:?}; expected nav2d or gaussclass"),
    };
    let method = match str_field(t, "method")? {
        None => Method::Synthesis,
        Some(m) => Method::from_name(m).ok_or_else(|| anyhow!("unknown method {m:?}"))?,
    };
    Ok(ExperimentConfig::for_domain(domain, method))
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

/// Domain defaults overlaid with `overrides`.
pub fn from_table(overrides: Table) -> Result<ExperimentConfig> {
    let base = defaults_for(&overrides)?;
    let mut table = Table::try_from(&base).context("serializing defaults")?;
    merge(&mut table, overrides);
    let config: ExperimentConfig = table.try_into().map_err(|e: toml::de::Error| anyhow!("{}", e.message()))?;
    config.validate().map_err(|e| anyhow!("{e}"))?;
    Ok(config)
}

pub fn parse(text: &str) -> Result<ExperimentConfig> {
    let table: Table = text.parse().map_err(|e: toml::de::Error| anyhow!("{e}"))?;
    from_table(table)
}

pub fn load(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse(&text).with_context(|| format!("in {}", path.display()))
}

/// The full configuration as TOML, every field spelled out.
pub fn to_string(config: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(config).context("serializing the configuration")
}

/// Parses `a.b.c=value`; the value is read as TOML and falls back to a bare string.
pub fn parse_assignment(s: &str) -> Result<(Vec<String>, Value)> {
    let (path, raw) = s.split_once('=').ok_or_else(|| anyhow!("expected key=value, got {s:?}"))?;
    let keys: Vec<String> = path.trim().split('.').map(str::to_string).collect();
    if keys.iter().any(String::is_empty) {
        bail!("empty key in {path:?}");
    }
    let raw = raw.trim();
    let value = match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("parsed above"),
        Err(_) => Value::String(raw.to_string()),
    };
    Ok((keys, value))
}

/// Writes `value` at `keys`, creating intermediate tables.
pub fn assign(table: &mut Table, keys: &[String], value: Value) -> Result<()> {
    let (last, parents) = keys.split_last().ok_or_else(|| anyhow!("empty key"))?;
    let mut t = table;
    for k in parents {
        let entry = t.entry(k.clone()).or_insert_with(|| Value::Table(Table::new()));
        t = entry.as_table_mut().ok_or_else(|| anyhow!("`{k}` is not a table"))?;
    }
    t.insert(last.clone(), value);
    Ok(())
}

/// A file's keys (or none) with assignments written over them.
pub fn overrides(file: Option<&Path>, assignments: &[String]) -> Result<Table> {
    let mut table = match file {
        Some(p) => std::fs::read_to_string(p)
            .with_context(|| format!("reading {}", p.display()))?
            .parse::<Table>()
            .map_err(|e| anyhow!("{}: {e}", p.display()))?,
        None => Table::new(),
    };
    for a in assignments {
        let (keys, value) = parse_assignment(a)?;
        assign(&mut table, &keys, value)?;
    }
    Ok(table)
}

/// [`overrides`] merged over the domain defaults.
pub fn resolve(file: Option<&Path>, assignments: &[String]) -> Result<ExperimentConfig> {
    from_table(overrides(file, assignments)?)
}
