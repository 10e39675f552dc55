use std::path::{Path, PathBuf};

use adt_core::bootstrap::BootstrapConfig;
use adt_core::estimator::EstimatorConfig;
use adt_core::panel::PanelSchema;
use serde::{Deserialize, Serialize};

use crate::{CliError, CliResult};

/// Everything an estimation run depends on. Relative paths are resolved
/// against the directory of the file they were read from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Pseudo-treatment window `[first, last]` inside the pre-period.
    #[serde(default)]
    pub pretrends: Option<[u32; 2]>,
    pub data: DataPaths,
    pub columns: PanelSchema,
    #[serde(default)]
    pub estimator: EstimatorConfig,
    #[serde(default)]
    pub bootstrap: BootstrapConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataPaths {
    pub sites: PathBuf,
    pub panel: PathBuf,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("adt_output")
}

/// Minimum number of variogram bins the correlation fit accepts.
pub const MIN_VARIOGRAM_BINS: usize = 3;

impl RunConfig {
    /// Read a run configuration, or the `config` table of a run manifest.
    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let value: toml::Table =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let value = match value.get("config") {
            Some(toml::Value::Table(t)) if value.contains_key("run") => t.clone(),
            _ => value,
        };
        let mut cfg: RunConfig = value
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.data.sites = resolve(base, &cfg.data.sites);
        cfg.data.panel = resolve(base, &cfg.data.panel);
        cfg.output_dir = resolve(base, &cfg.output_dir);
        Ok(cfg)
    }

    pub fn validate(&self) -> CliResult<()> {
        let config = |e: adt_core::AdtError| CliError::Config(e.to_string());
        self.estimator.nuisance.validate().map_err(config)?;
        self.bootstrap.validate().map_err(config)?;
        if let adt_core::llkr::Bandwidth::Fixed(h) = self.estimator.bandwidth {
            if !(h > 0.0 && h.is_finite()) {
                return Err(CliError::Config(format!("bandwidth {h} must be positive")));
            }
        }
        if self.bootstrap.variogram.n_bins < MIN_VARIOGRAM_BINS {
            return Err(CliError::Config(format!(
                "variogram needs at least {MIN_VARIOGRAM_BINS} bins to fit a correlation family, got {}",
                self.bootstrap.variogram.n_bins
            )));
        }
        if self.columns.t0 < 2 {
            return Err(CliError::Config("t0 must leave at least one pre-period month".into()));
        }
        if let Some([a, b]) = self.pretrends {
            check_window(a, b, self.columns.t0)?;
        }
        Ok(())
    }
}

/// A pseudo-treatment window must start after month 1 and end before `t0`.
pub fn check_window(a: u32, b: u32, t0: u32) -> CliResult<()> {
    if a < 2 || a > b || b >= t0 {
        return Err(CliError::Config(format!(
            "pre-trends window {a}:{b} must satisfy 2 <= first <= last < t0 = {t0}"
        )));
    }
    Ok(())
}

/// Parse `first:last`.
pub fn parse_window(s: &str) -> Result<[u32; 2], String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected FIRST:LAST, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("`{v}`: {e}"));
    Ok([parse(a)?, parse(b)?])
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
[data]
sites = "s.csv"
panel = "p.csv"
[columns]
t0 = 10
"#;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn relative_paths_resolve_against_the_config_directory() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(&write(dir.path(), MINIMAL)).unwrap();
        assert_eq!(cfg.data.sites, dir.path().join("s.csv"));
        assert_eq!(cfg.output_dir, dir.path().join("adt_output"));
        cfg.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let err = RunConfig::load(&write(dir.path(), &format!("bogus = 1\n{MINIMAL}"))).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn too_few_bins_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("{MINIMAL}[bootstrap.variogram]\nn_bins = 2\n");
        let cfg = RunConfig::load(&write(dir.path(), &text)).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("at least 3 bins"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn manifest_config_table_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::load(&write(dir.path(), MINIMAL)).unwrap();
        let mut doc = toml::Table::new();
        doc.insert("run".into(), toml::Value::Table(toml::Table::new()));
        doc.insert("config".into(), toml::Value::try_from(&cfg).unwrap());
        let p = dir.path().join("manifest.toml");
        std::fs::write(&p, toml::to_string(&doc).unwrap()).unwrap();
        assert_eq!(RunConfig::load(&p).unwrap(), cfg);
    }

    #[test]
    fn windows() {
        assert_eq!(parse_window("61:72").unwrap(), [61, 72]);
        assert!(parse_window("61-72").is_err());
        assert!(check_window(61, 72, 73).is_ok());
        assert!(check_window(61, 73, 73).is_err());
        assert!(check_window(1, 5, 73).is_err());
        assert!(check_window(9, 5, 73).is_err());
    }
}
