//! Run directories, checkpoints, metrics streams, and the drivers that the
//! command-line front end calls.
//!
//! A run directory has a fixed layout so tooling and tests can assert
//! paths:
//!
//! ```text
//! <out_dir>/
//!   config.resolved     resolved TOML settings the run actually used
//!   checkpoints/        latest.bin, rewritten atomically every epoch
//!   genotype.json       derived architecture
//!   policy.json         derived policy distribution table
//!   metrics.jsonl       line-delimited records, each tagged with "kind"
//!   report.json         final evaluation summary
//! ```
//!
//! Checkpoints are binary: an 8-byte magic, a little-endian format version,
//! then a serialized snapshot of everything that evolves during search.
//! Because every random draw is keyed by (seed, epoch, step) rather than a
//! mutable generator, the epoch counter in the snapshot IS the rng state:
//! resuming replays the exact continuation of the uninterrupted run.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Dataset;
use crate::augment::ENUMERATION_CAP;
use crate::derive::{
    derive_architecture, derive_policy_distribution, read_genotype, read_policy_distribution,
    write_genotype, write_policy_distribution, Genotype, PolicyDistribution,
};
use crate::error::{Error, Result};
use crate::eval::{build_network, train_and_test_with, AugmentMode, EvalOutcome};
use crate::nn::ParamStore;
use crate::rng::{self, tag};
use crate::search::{search_loop, AdamF64, EpochMetrics, SearchState};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DAASCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Fixed-layout run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    /// Create the directory (and checkpoints/) if needed.
    pub fn create(root: PathBuf) -> Result<Self> {
        fs::create_dir_all(root.join("checkpoints"))
            .map_err(|e| Error::io(root.display().to_string(), e))?;
        Ok(RunDir { root })
    }

    /// Open an existing run directory.
    pub fn open(root: PathBuf) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::InvalidConfig(format!(
                "{} is not a run directory",
                root.display()
            )));
        }
        Ok(RunDir { root })
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.resolved")
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn latest_checkpoint(&self) -> PathBuf {
        self.checkpoint_dir().join("latest.bin")
    }

    pub fn genotype_path(&self) -> PathBuf {
        self.root.join("genotype.json")
    }

    pub fn policy_path(&self) -> PathBuf {
        self.root.join("policy.json")
    }

    pub fn metrics_path(&self) -> PathBuf {
        self.root.join("metrics.jsonl")
    }

    pub fn report_path(&self) -> PathBuf {
        self.root.join("report.json")
    }
}

/// Append one record to a metrics stream, tagged with a record kind so
/// heterogeneous records can share the file.
pub fn append_metric<T: Serialize>(path: &Path, kind: &str, record: &T) -> Result<()> {
    let mut value = serde_json::to_value(record)?;
    value
        .as_object_mut()
        .expect("metric records are objects")
        .insert("record".to_string(), serde_json::json!(kind));
    let mut file = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    writeln!(file, "{}", serde_json::to_string(&value)?)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Read a metrics stream back as JSON values.
pub fn read_metrics(path: &Path) -> Result<Vec<serde_json::Value>> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    s.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct NamedTensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointData {
    config: crate::search::SearchConfig,
    next_epoch: u64,
    params: Vec<NamedTensor>,
    velocity: Vec<NamedTensor>,
    arch: Vec<f64>,
    gamma: Vec<f64>,
    adam_arch: AdamF64,
    adam_gamma: AdamF64,
}

fn bad(path: &Path, msg: impl Into<String>) -> Error {
    Error::BadCheckpoint {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

/// Serialize a full search snapshot. The file is written to a temporary
/// sibling and renamed, so a crash never leaves a truncated checkpoint.
pub fn save_checkpoint<F: Scalar>(path: &Path, state: &SearchState<F>) -> Result<()> {
    let named = |name: &str, t: &Tensor<F>| NamedTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        data: t.to_f64_vec(),
    };
    let data = CheckpointData {
        config: state.cfg.clone(),
        next_epoch: state.next_epoch as u64,
        params: state
            .store
            .iter()
            .map(|(id, e)| named(state.store.name(id), &e.value))
            .collect(),
        velocity: state
            .opt_theta
            .velocity
            .iter()
            .map(|(id, t)| named(state.store.name(*id), t))
            .collect(),
        arch: state.arch.flat(),
        gamma: state.gamma.data().to_vec(),
        adam_arch: state.opt_arch.clone(),
        adam_gamma: state.opt_gamma.clone(),
    };
    let mut bytes = Vec::with_capacity(64);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bincode::serialize_into(&mut bytes, &data).map_err(|e| bad(path, e.to_string()))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Restore a search snapshot. The network skeleton is rebuilt from the
/// stored config (parameter names and shapes are deterministic), then every
/// tensor is overwritten from the snapshot; a name or shape that does not
/// line up is a checkpoint error, not a crash.
pub fn load_checkpoint<F: Scalar>(path: &Path) -> Result<SearchState<F>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() < 12 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(bad(path, "not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::SchemaVersion {
            kind: "checkpoint".to_string(),
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let data: CheckpointData =
        bincode::deserialize(&bytes[12..]).map_err(|e| bad(path, e.to_string()))?;

    let mut state = SearchState::<F>::new(data.config)?;
    let by_name: BTreeMap<String, (crate::nn::ParamId, Vec<usize>)> = state
        .store
        .ids()
        .map(|id| {
            let name = state.store.name(id).to_string();
            let shape = state.store.get(id).shape().to_vec();
            (name, (id, shape))
        })
        .collect();
    if data.params.len() != by_name.len() {
        return Err(bad(
            path,
            format!(
                "snapshot has {} parameters, the rebuilt network {}",
                data.params.len(),
                by_name.len()
            ),
        ));
    }
    let restore = |nt: &NamedTensor| -> Result<(crate::nn::ParamId, Tensor<F>)> {
        let (id, want) = by_name
            .get(&nt.name)
            .ok_or_else(|| bad(path, format!("unknown parameter {}", nt.name)))?;
        if want != &nt.shape {
            return Err(bad(
                path,
                format!("parameter {} has shape {:?}, expected {:?}", nt.name, nt.shape, want),
            ));
        }
        Ok((*id, Tensor::from_f64_slice(&nt.shape, &nt.data)?))
    };
    for nt in &data.params {
        let (id, t) = restore(nt)?;
        *state.store.get_mut(id) = t;
    }
    state.opt_theta.velocity.clear();
    for nt in &data.velocity {
        let (id, t) = restore(nt)?;
        state.opt_theta.velocity.insert(id, t);
    }
    if data.arch.len() != state.arch.flat().len() {
        return Err(bad(path, "architecture parameter length mismatch"));
    }
    state.arch.set_flat(&data.arch);
    if data.gamma.len() != state.gamma.dim() {
        return Err(bad(path, "policy parameter length mismatch"));
    }
    state.gamma.data_mut().copy_from_slice(&data.gamma);
    if data.adam_arch.m.len() != state.opt_arch.m.len()
        || data.adam_gamma.m.len() != state.opt_gamma.m.len()
    {
        return Err(bad(path, "optimizer state length mismatch"));
    }
    state.opt_arch = data.adam_arch;
    state.opt_gamma = data.adam_gamma;
    state.next_epoch = data.next_epoch as usize;
    Ok(state)
}

/// Run (or resume) the search phase into the config's run directory:
/// writes config.resolved, appends one tagged metrics line per epoch, and
/// keeps checkpoints/latest.bin current. `progress` fires once per epoch
/// after the checkpoint lands.
pub fn run_search(
    cfg: &RunConfig,
    resume: bool,
    mut progress: impl FnMut(&EpochMetrics),
) -> Result<(RunDir, Vec<EpochMetrics>)> {
    let mut cfg = cfg.clone();
    cfg.resolve()?;
    let dir = RunDir::create(cfg.resolved_out_dir())?;
    cfg.save(&dir.config_path())?;

    let ckpt = dir.latest_checkpoint();
    let mut state: SearchState<f32> = if resume {
        if !ckpt.is_file() {
            return Err(Error::NothingToResume(format!(
                "{} has no checkpoint",
                dir.root.display()
            )));
        }
        let state = load_checkpoint(&ckpt)?;
        if state.cfg != cfg.search {
            return Err(bad(&ckpt, "checkpoint was produced by a different config"));
        }
        state
    } else {
        if dir.metrics_path().exists() {
            fs::remove_file(dir.metrics_path())
                .map_err(|e| Error::io(dir.metrics_path().display().to_string(), e))?;
        }
        if ckpt.exists() {
            fs::remove_file(&ckpt).map_err(|e| Error::io(ckpt.display().to_string(), e))?;
        }
        SearchState::new(cfg.search.clone())?
    };

    let dataset: Dataset<f32> = cfg.dataset.load(cfg.seed)?;
    let data = dataset.search_data();
    let metrics_path = dir.metrics_path();
    let ckpt_path = ckpt.clone();
    let metrics = search_loop(&mut state, &data, |st, m| {
        append_metric(&metrics_path, "search-epoch", m)?;
        save_checkpoint(&ckpt_path, st)?;
        progress(m);
        Ok(())
    })?;
    Ok((dir, metrics))
}

/// Discretize the latest checkpoint into genotype.json and policy.json.
pub fn run_derive(dir: &RunDir) -> Result<(Genotype, PolicyDistribution)> {
    let state: SearchState<f32> = load_checkpoint(&dir.latest_checkpoint())?;
    let genotype = derive_architecture(&state.arch);
    let dist = derive_policy_distribution(&state.gamma, ENUMERATION_CAP)?;
    write_genotype(&dir.genotype_path(), &genotype)?;
    write_policy_distribution(&dir.policy_path(), &dist)?;
    Ok((genotype, dist))
}

/// Final evaluation summary, written to report.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: String,
    pub schema_version: u32,
    pub seed: u64,
    pub mode: AugmentMode,
    pub test_accuracy: f64,
    pub param_count: usize,
    pub wall_seconds: f64,
}

/// Train the derived genotype from scratch per the eval section of the
/// config and write the report. The policy table is read from the run
/// directory only when the mode needs it.
pub fn run_evaluate(
    dir: &RunDir,
    cfg: &RunConfig,
    progress: impl FnMut(&crate::eval::EvalEpochMetrics),
) -> Result<EvalOutcome> {
    let mut cfg = cfg.clone();
    cfg.resolve()?;
    let genotype = read_genotype(&dir.genotype_path())?;
    let dist = if cfg.eval.mode == AugmentMode::DerivedPolicy {
        Some(read_policy_distribution(&dir.policy_path())?)
    } else {
        None
    };
    let dataset: Dataset<f32> = cfg.dataset.load(cfg.seed)?;
    let (in_channels, classes) = cfg.dataset.dims()?;
    let mut store = ParamStore::new();
    let mut init_rng = rng::stream(cfg.eval.seed, &[tag::INIT, 1]);
    let mut net = build_network(
        &genotype,
        &cfg.eval,
        in_channels,
        classes,
        &mut store,
        &mut init_rng,
    )?;
    let outcome = train_and_test_with(
        &mut net,
        &mut store,
        &dataset,
        dist.as_ref(),
        &cfg.eval,
        progress,
    )?;
    for em in &outcome.epochs {
        append_metric(&dir.metrics_path(), "eval-epoch", em)?;
    }
    let report = EvalReport {
        kind: "evaluation-report".to_string(),
        schema_version: REPORT_SCHEMA_VERSION,
        seed: cfg.eval.seed,
        mode: outcome.mode,
        test_accuracy: outcome.test_accuracy,
        param_count: outcome.param_count,
        wall_seconds: outcome.wall_seconds,
    };
    fs::write(
        dir.report_path(),
        serde_json::to_string_pretty(&report)? + "\n",
    )
    .map_err(|e| Error::io(dir.report_path().display().to_string(), e))?;
    Ok(outcome)
}
