//! Config-driven experiment orchestration: a TOML file names a dataset, an
//! architecture, a protocol, and a branch-layout matrix; the runner executes
//! every (layout, phase count, seed) job up to a worker limit and writes
//! metrics, checkpoints, and plot-ready tables under one output directory.

pub mod outputs;

use std::collections::{BTreeSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::backbone::ModelVariant;
use crate::checkpoint;
use crate::data::cifar::{load_cifar_dir, CifarLimits};
use crate::data::{gen_synthetic, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::protocol::{
    run_protocol_observed, ProtocolConfig, ProtocolFailure, RunOutput, RunSpec,
};
use crate::trainer::TrainerConfig;
use crate::backbone::ArchConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Where the images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSpec {
    /// Directory holding `data_batch_1..5.bin` and `test_batch.bin` in the
    /// 3073-byte binary record layout.
    Cifar10File {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        train_per_class: Option<usize>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        test_per_class: Option<usize>,
    },
    Synthetic {
        #[serde(flatten)]
        spec: SyntheticSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Branch layout per run, e.g. "all+scaling" or "single-branch-all".
    pub branch_matrix: Vec<String>,
    /// Optional sweep over phase counts; empty means the protocol's own.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub phase_counts: Vec<usize>,
    pub output_dir: PathBuf,
    pub dataset: DatasetSpec,
    pub arch: ArchConfig,
    pub protocol: ProtocolConfig,
    pub trainer: TrainerConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported schema version {}, this build reads {SCHEMA_VERSION}",
                self.schema_version
            )));
        }
        self.arch.validate()?;
        self.protocol.validate()?;
        self.trainer.validate()?;
        if self.branch_matrix.is_empty() {
            return Err(Error::Config("branch matrix is empty".into()));
        }
        let mut seen = BTreeSet::new();
        for entry in &self.branch_matrix {
            let label = parse_layout(entry)?.label();
            if !seen.insert(label.clone()) {
                return Err(Error::Config(format!(
                    "branch layout '{label}' appears twice in the matrix"
                )));
            }
        }
        let mut counts = BTreeSet::new();
        for &n in &self.phase_counts {
            if !counts.insert(n) {
                return Err(Error::Config(format!(
                    "phase count {n} appears twice"
                )));
            }
            let mut p = self.protocol.clone();
            p.n_phases = n;
            p.validate()?;
            p.split_sizes()?;
        }
        match &self.dataset {
            DatasetSpec::Synthetic { spec } => {
                spec.validate()?;
                if spec.num_classes != self.protocol.total_classes {
                    return Err(Error::Config(format!(
                        "the synthetic dataset has {} classes, the protocol expects {}",
                        spec.num_classes, self.protocol.total_classes
                    )));
                }
                if spec.image_size != self.arch.image_size
                    || spec.channels != self.arch.in_channels
                {
                    return Err(Error::Config(format!(
                        "synthetic images are {}x{}px x{} channels, \
                         the architecture expects {}x{}px x{}",
                        spec.image_size,
                        spec.image_size,
                        spec.channels,
                        self.arch.image_size,
                        self.arch.image_size,
                        self.arch.in_channels
                    )));
                }
            }
            DatasetSpec::Cifar10File { .. } => {
                if self.protocol.total_classes != 10 {
                    return Err(Error::Config(format!(
                        "the file dataset provides 10 classes, the protocol expects {}",
                        self.protocol.total_classes
                    )));
                }
                if self.arch.image_size != 32 || self.arch.in_channels != 3 {
                    return Err(Error::Config(
                        "the file dataset provides 3-channel 32px images".into(),
                    ));
                }
            }
        }
        if self.output_dir.as_os_str().is_empty() {
            return Err(Error::Config("output directory is empty".into()));
        }
        Ok(())
    }

    pub fn phase_counts_effective(&self) -> Vec<usize> {
        if self.phase_counts.is_empty() {
            vec![self.protocol.n_phases]
        } else {
            self.phase_counts.clone()
        }
    }
}

/// Parses a branch-matrix entry, naming the one family that is recognized
/// but deliberately not built.
pub fn parse_layout(entry: &str) -> Result<ModelVariant> {
    let t = entry.trim();
    let lowered = t.to_ascii_lowercase();
    if lowered.starts_with("4x") || lowered.starts_with("4\u{d7}") {
        return Err(Error::Config(format!(
            "branch layout '{t}' is not supported: the 4x (quadruple-width) \
             variants are out of scope; allowed: {}",
            allowed_layouts()
        )));
    }
    ModelVariant::parse(t).map_err(|e| {
        let msg = match e {
            Error::Config(m) => m,
            other => other.to_string(),
        };
        Error::Config(format!("{msg}; allowed layouts: {}", allowed_layouts()))
    })
}

fn allowed_layouts() -> String {
    ModelVariant::ALLOWED
        .iter()
        .map(ModelVariant::label)
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig =
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn serialize_config(cfg: &ExperimentConfig) -> Result<String> {
    toml::to_string_pretty(cfg).map_err(|e| Error::Config(format!("config: {e}")))
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    parse_config(&text)
}

/// Command-line adjustments folded into the config before planning.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    /// Run this many seeds instead of the protocol's run count.
    pub seeds: Option<usize>,
    /// Force the strict memory budget on.
    pub strict_memory: bool,
    /// Redirect all outputs.
    pub output_dir: Option<PathBuf>,
    /// Replace the base seed; the CLI wires AANETS_SEED here.
    pub base_seed: Option<u64>,
}

pub fn apply_overrides(cfg: &ExperimentConfig, ov: &Overrides) -> ExperimentConfig {
    let mut out = cfg.clone();
    if let Some(k) = ov.seeds {
        out.protocol.runs = k;
    }
    if ov.strict_memory {
        out.protocol.strict_memory = true;
    }
    if let Some(dir) = &ov.output_dir {
        out.output_dir = dir.clone();
    }
    if let Some(base) = ov.base_seed {
        out.trainer.seed = base;
    }
    out
}

/// One training run the planner scheduled.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PlannedJob {
    pub layout: String,
    pub n_phases: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    /// Matrix order: layouts, then phase counts, then seeds.
    pub jobs: Vec<PlannedJob>,
    pub seeds: Vec<u64>,
    pub phase_counts: Vec<usize>,
}

/// Expands the config into the job matrix. Seeds count up from the
/// trainer's base seed so every run is reconstructible from the config.
pub fn plan_jobs(cfg: &ExperimentConfig) -> Result<Plan> {
    cfg.validate()?;
    let base = cfg.trainer.seed;
    let seeds: Vec<u64> = (0..cfg.protocol.runs as u64).map(|i| base + i).collect();
    let phase_counts = cfg.phase_counts_effective();
    let mut jobs = Vec::new();
    for entry in &cfg.branch_matrix {
        let label = parse_layout(entry)?.label();
        for &n in &phase_counts {
            for &seed in &seeds {
                jobs.push(PlannedJob {
                    layout: label.clone(),
                    n_phases: n,
                    seed,
                });
            }
        }
    }
    Ok(Plan {
        jobs,
        seeds,
        phase_counts,
    })
}

pub fn build_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    match spec {
        DatasetSpec::Synthetic { spec } => gen_synthetic(spec),
        DatasetSpec::Cifar10File {
            path,
            train_per_class,
            test_per_class,
        } => load_cifar_dir(
            path,
            &CifarLimits {
                train_per_class: *train_per_class,
                test_per_class: *test_per_class,
            },
        ),
    }
}

/// Machine-readable record of one failed job.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FailureRecord {
    pub layout: String,
    pub n_phases: usize,
    pub seed: u64,
    pub completed_phases: usize,
    pub error: String,
}

/// One finished job: the run's outputs or its failure record.
#[derive(Debug)]
pub struct JobResult {
    pub job: PlannedJob,
    pub outcome: std::result::Result<RunOutput, FailureRecord>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub results: Vec<JobResult>,
    pub failed: usize,
    pub output_dir: PathBuf,
}

/// Runs every planned job, failures included, then writes all output
/// files. Only infrastructure trouble (bad dataset, unwritable directory)
/// aborts; a failed training job becomes an error record instead.
pub fn run_experiment(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentOutcome> {
    let plan = plan_jobs(cfg)?;
    let dataset = build_dataset(&cfg.dataset)?;
    fs::create_dir_all(&cfg.output_dir)?;

    let queue: Mutex<VecDeque<usize>> = Mutex::new((0..plan.jobs.len()).collect());
    let slots: Mutex<Vec<Option<JobResult>>> =
        Mutex::new((0..plan.jobs.len()).map(|_| None).collect());
    let workers = workers.clamp(1, plan.jobs.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().expect("queue lock").pop_front();
                let Some(idx) = next else { break };
                let result = run_one(cfg, &dataset, &plan.jobs[idx]);
                slots.lock().expect("result lock")[idx] = Some(result);
            });
        }
    });

    let results: Vec<JobResult> = slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|slot| slot.expect("every job ran"))
        .collect();
    let failed = results.iter().filter(|r| r.outcome.is_err()).count();
    outputs::write_all(cfg, &plan, &results)?;
    Ok(ExperimentOutcome {
        results,
        failed,
        output_dir: cfg.output_dir.clone(),
    })
}

fn run_one(cfg: &ExperimentConfig, dataset: &Dataset, job: &PlannedJob) -> JobResult {
    let infra = |e: Error| ProtocolFailure {
        completed: Vec::new(),
        error: e,
    };
    let attempt = || -> std::result::Result<RunOutput, ProtocolFailure> {
        let variant = parse_layout(&job.layout).map_err(infra)?;
        let mut protocol = cfg.protocol.clone();
        protocol.n_phases = job.n_phases;
        let ckpt_dir = cfg
            .output_dir
            .join("checkpoints")
            .join(&job.layout)
            .join(format!("n{}", job.n_phases))
            .join(format!("seed_{}", job.seed));
        fs::create_dir_all(&ckpt_dir).map_err(|e| infra(e.into()))?;
        let spec = RunSpec {
            protocol: &protocol,
            trainer: &cfg.trainer,
            arch: &cfg.arch,
            variant,
            seed: job.seed,
        };
        run_protocol_observed(&spec, dataset, &mut |state, report| {
            let path = ckpt_dir.join(format!("phase_{}.ckpt", report.phase_index));
            let tmp = path.with_extension("ckpt.tmp");
            checkpoint::save(state, &tmp)?;
            fs::rename(&tmp, &path)?;
            Ok(())
        })
    };
    let outcome = attempt().map_err(|failure| FailureRecord {
        layout: job.layout.clone(),
        n_phases: job.n_phases,
        seed: job.seed,
        completed_phases: failure.completed.len(),
        error: failure.error.to_string(),
    });
    JobResult {
        job: job.clone(),
        outcome,
    }
}
