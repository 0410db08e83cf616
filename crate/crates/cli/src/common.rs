//! Shared plumbing: config resolution and the effective-config artifact.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ambiseg::config::{render_kv, Config};
use ambiseg::{Error, Result};

use crate::CommonArgs;

/// Load the config file (if any), then apply `--set` pairs on top.
pub fn resolve_config(args: &CommonArgs) -> Result<Config> {
    let mut cfg = match &args.config {
        Some(path) => Config::from_file(path)?,
        None => Config::empty(),
    };
    cfg.apply_overrides(&args.set)?;
    Ok(cfg)
}

pub fn ensure_out_dir(args: &CommonArgs) -> Result<PathBuf> {
    std::fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    Ok(args.out.clone())
}

/// Record the fully resolved settings so the run can be replayed with
/// `--config <out>/effective-config.txt` alone.
pub fn write_effective(
    out: &Path,
    subcommand: &str,
    pairs: &BTreeMap<String, String>,
) -> Result<PathBuf> {
    let path = out.join("effective-config.txt");
    let body = format!("# ambiseg {} effective configuration\n{}", subcommand, render_kv(pairs));
    std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn kv(pairs: &mut BTreeMap<String, String>, key: &str, value: impl ToString) {
    pairs.insert(key.to_string(), value.to_string());
}
