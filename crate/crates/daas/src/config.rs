//! Run configuration: one TOML file with full defaulting, validated and
//! echoed back in resolved form so a run directory always records the exact
//! settings that produced it.
//!
//! Resolution rules, applied by [`RunConfig::resolve`]:
//! - the top-level `seed` feeds both the search and the evaluation phase;
//! - the dataset decides the network's input channels and class count;
//! - everything else keeps its section value (or that section's default).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{self, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::search::SearchConfig;
use crate::tensor::Scalar;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Where training data comes from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    Synthetic {
        #[serde(flatten, default)]
        spec: SyntheticSpec,
    },
    /// A directory of 3073-byte-record batch files; names containing
    /// "test" form the test split.
    BinaryBatches {
        dir: String,
        #[serde(default)]
        class_subset: Option<Vec<u8>>,
        #[serde(default)]
        per_class_cap: Option<usize>,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic {
            spec: SyntheticSpec::default(),
        }
    }
}

impl DatasetSpec {
    /// Input channels and class count the network must be built for.
    pub fn dims(&self) -> Result<(usize, usize)> {
        match self {
            DatasetSpec::Synthetic { spec } => {
                spec.validate()?;
                Ok((spec.channels, spec.classes))
            }
            DatasetSpec::BinaryBatches { class_subset, .. } => {
                let classes = match class_subset {
                    None => 10,
                    Some(s) => {
                        let mut v = s.clone();
                        v.sort_unstable();
                        v.dedup();
                        if v.is_empty() || v.iter().any(|&l| l >= 10) {
                            return Err(Error::InvalidConfig(
                                "class subset must name distinct labels below 10".to_string(),
                            ));
                        }
                        v.len()
                    }
                };
                Ok((3, classes))
            }
        }
    }

    /// Materialize the dataset (generation or disk load).
    pub fn load<F: Scalar>(&self, seed: u64) -> Result<Dataset<F>> {
        match self {
            DatasetSpec::Synthetic { spec } => data::generate_synthetic(spec, seed),
            DatasetSpec::BinaryBatches {
                dir,
                class_subset,
                per_class_cap,
            } => data::load_binary_batches(
                Path::new(dir),
                class_subset.as_deref(),
                *per_class_cap,
                seed,
            ),
        }
    }
}

/// Everything one run needs: dataset, search settings, evaluation settings,
/// the master seed and the output directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub out_dir: String,
    pub dataset: DatasetSpec,
    pub search: SearchConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            seed: 1,
            out_dir: "runs/default".to_string(),
            dataset: DatasetSpec::default(),
            search: SearchConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Apply the cross-section resolution rules and validate. Idempotent:
    /// resolving a resolved config changes nothing.
    pub fn resolve(&mut self) -> Result<()> {
        let (in_channels, classes) = self.dataset.dims()?;
        self.search.seed = self.seed;
        self.search.supernet.in_channels = in_channels;
        self.search.supernet.classes = classes;
        self.eval.seed = self.seed;
        self.search.validate()?;
        self.eval.validate()?;
        Ok(())
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    /// Parse a TOML document, filling omitted fields with defaults. The
    /// schema version is checked before the typed parse so an incompatible
    /// file is reported as such rather than as a field error.
    pub fn from_toml_str(s: &str) -> Result<RunConfig> {
        let value: toml::Value = toml::from_str(s)?;
        if let Some(v) = value.get("schema_version") {
            let found = v.as_integer().unwrap_or(-1);
            if found != CONFIG_SCHEMA_VERSION as i64 {
                return Err(Error::SchemaVersion {
                    kind: "run-config".to_string(),
                    found: found.try_into().unwrap_or(u32::MAX),
                    supported: CONFIG_SCHEMA_VERSION,
                });
            }
        }
        Ok(value.try_into()?)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_toml_str(&s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml_string()?)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Output directory, honoring the DAAS_RUN_ROOT environment override
    /// for relative paths.
    pub fn resolved_out_dir(&self) -> PathBuf {
        resolve_under_run_root(Path::new(&self.out_dir))
    }
}

/// Environment variable that relocates relative run directories.
pub const RUN_ROOT_ENV: &str = "DAAS_RUN_ROOT";

pub fn resolve_under_run_root(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}
