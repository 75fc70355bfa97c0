//! The (N+1)-phase incremental benchmark: class splits, phase-0 base
//! training, per-phase pool assembly, training, evaluation over all seen
//! classes, exemplar upkeep, and cross-seed aggregation.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::backbone::{
    AggregationWeights, ArchConfig, BaseBackbone, Body, BranchKind, BranchParams, ModelVariant,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::memory::{
    assemble_pools, class_seed, select_exemplars, strict_quota, BudgetLedger, ExemplarStore,
    Origin, Sample, SelectionMethod,
};
use crate::trainer::{
    init_phase, initial_state, train_phase, AlphaRecord, PhaseState, TrainLog, TrainerConfig,
};

/// How classes are divided across the N+1 phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitMode {
    /// Phase 0 takes half the classes; the other half arrives evenly over
    /// the N incremental phases.
    HalfThenEven,
    /// Every phase, including phase 0, takes the same number of classes.
    SameEveryPhase,
}

impl std::fmt::Display for SplitMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SplitMode::HalfThenEven => write!(f, "half-then-even"),
            SplitMode::SameEveryPhase => write!(f, "same-every-phase"),
        }
    }
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "half-then-even" => Ok(SplitMode::HalfThenEven),
            "same-every-phase" => Ok(SplitMode::SameEveryPhase),
            other => Err(Error::Config(format!(
                "unknown split mode '{other}' (expected half-then-even or same-every-phase)"
            ))),
        }
    }
}

fn default_quota() -> usize {
    20
}

/// Benchmark shape shared by every run of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub total_classes: usize,
    /// Number of incremental phases N; the run has N+1 phases in total.
    pub n_phases: usize,
    pub split_mode: SplitMode,
    /// Number of seeds to run.
    pub runs: usize,
    #[serde(default = "default_quota")]
    pub per_class_quota: usize,
    /// Pay for extra model parameters by shrinking the exemplar quota.
    #[serde(default)]
    pub strict_memory: bool,
    /// Fold the stable branch's scales into the trunk at each phase end.
    #[serde(default)]
    pub update_base: bool,
    #[serde(default)]
    pub class_order_seed: u64,
    #[serde(default)]
    pub selection: SelectionMethod,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_phases == 0 {
            return Err(Error::Config("n_phases must be at least 1".into()));
        }
        if self.runs == 0 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.per_class_quota == 0 {
            return Err(Error::Config("per_class_quota must be positive".into()));
        }
        self.split_sizes().map(|_| ())
    }

    /// Per-phase class counts, phase 0 first.
    pub fn split_sizes(&self) -> Result<Vec<usize>> {
        let total = self.total_classes;
        let n = self.n_phases;
        match self.split_mode {
            SplitMode::HalfThenEven => {
                if total == 0 || !total.is_multiple_of(2) {
                    return Err(Error::Config(format!(
                        "half-then-even needs an even class count, got {total}"
                    )));
                }
                let half = total / 2;
                if !half.is_multiple_of(n) {
                    return Err(Error::Config(format!(
                        "half the classes ({half}) must divide evenly across {n} incremental phases"
                    )));
                }
                let mut sizes = vec![half];
                sizes.extend(std::iter::repeat_n(half / n, n));
                Ok(sizes)
            }
            SplitMode::SameEveryPhase => {
                let phases = n + 1;
                if total == 0 || !total.is_multiple_of(phases) {
                    return Err(Error::Config(format!(
                        "{total} classes do not divide evenly across {phases} phases"
                    )));
                }
                Ok(vec![total / phases; phases])
            }
        }
    }
}

/// Shuffles `class_ids` by the configured seed and partitions them into the
/// per-phase lists. The partition is exact and disjoint.
pub fn make_splits(cfg: &ProtocolConfig, class_ids: &[u32]) -> Result<Vec<Vec<u32>>> {
    if class_ids.len() != cfg.total_classes {
        return Err(Error::Config(format!(
            "{} class ids for a protocol over {} classes",
            class_ids.len(),
            cfg.total_classes
        )));
    }
    let sizes = cfg.split_sizes()?;
    let mut order = class_ids.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.class_order_seed));
    let mut splits = Vec::with_capacity(sizes.len());
    let mut cursor = 0;
    for size in sizes {
        splits.push(order[cursor..cursor + size].to_vec());
        cursor += size;
    }
    Ok(splits)
}

/// One phase's scorecard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase_index: usize,
    pub seen_classes: usize,
    /// Accuracy over the union of all seen classes' test sets.
    pub test_accuracy: f64,
    /// Accuracy split by the phase each test class arrived in.
    pub per_group_accuracy: BTreeMap<usize, f64>,
    pub alpha_snapshot: AggregationWeights,
    /// Parameters trained in this phase.
    pub param_count: usize,
    /// Exemplar storage in native image bytes.
    pub memory_bytes: usize,
    /// Timing sidecar; excluded from serialized metrics so reruns are
    /// bit-identical.
    #[serde(skip_serializing, default)]
    pub wall_time_s: f64,
}

/// One seed's full (N+1)-phase result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub per_phase: Vec<PhaseReport>,
    /// Arithmetic mean of all N+1 per-phase test accuracies.
    pub average_incremental_accuracy: f64,
    pub last_phase_accuracy: f64,
}

impl RunSummary {
    fn from_phases(seed: u64, per_phase: Vec<PhaseReport>) -> Self {
        let mean = per_phase.iter().map(|p| p.test_accuracy).sum::<f64>()
            / per_phase.len() as f64;
        let last = per_phase.last().map_or(0.0, |p| p.test_accuracy);
        Self {
            seed,
            per_phase,
            average_incremental_accuracy: mean,
            last_phase_accuracy: last,
        }
    }
}

/// Everything run_protocol produces besides the summary.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    /// Per-(phase, epoch, level) aggregation weights across all phases.
    pub alpha_trajectory: Vec<AlphaRecord>,
}

/// A failed run: the error plus every phase that completed before it.
#[derive(Debug)]
pub struct ProtocolFailure {
    pub completed: Vec<PhaseReport>,
    pub error: Error,
}

impl std::fmt::Display for ProtocolFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "run aborted after {} completed phases: {}",
            self.completed.len(),
            self.error
        )
    }
}

impl std::error::Error for ProtocolFailure {}

impl From<ProtocolFailure> for Error {
    fn from(f: ProtocolFailure) -> Self {
        f.error
    }
}

/// Everything that pins down one run.
#[derive(Debug, Clone, Copy)]
pub struct RunSpec<'a> {
    pub protocol: &'a ProtocolConfig,
    pub trainer: &'a TrainerConfig,
    pub arch: &'a ArchConfig,
    pub variant: ModelVariant,
    pub seed: u64,
}

fn mix_seed(seed: u64, salt: u64) -> u64 {
    (seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15)).rotate_left(17)
}

fn per_level_conv_params(arch: &ArchConfig) -> usize {
    let per_conv = arch.filters * arch.filters * arch.kernel_size * arch.kernel_size + arch.filters;
    arch.layers_per_level * per_conv
}

fn branch_learnable(kind: BranchKind, arch: &ArchConfig) -> usize {
    match kind {
        BranchKind::All => per_level_conv_params(arch),
        BranchKind::Scaling => arch.layers_per_level * arch.filters,
        BranchKind::Frozen => 0,
    }
}

/// Learnable parameters the variant adds over the single-branch baseline
/// (full per-level copies, no aggregation weights). Smaller variants count
/// as zero overhead.
pub fn extra_params_of(arch: &ArchConfig, variant: ModelVariant) -> usize {
    let baseline = arch.levels * per_level_conv_params(arch);
    let own = match variant {
        ModelVariant::Single(kind) => arch.levels * branch_learnable(kind, arch),
        ModelVariant::Dual { plastic, stable } => {
            arch.levels
                * (branch_learnable(plastic, arch) + branch_learnable(stable, arch))
                + 2 * arch.levels
        }
    };
    own.saturating_sub(baseline)
}

fn fresh_pool(dataset: &Dataset, classes: &[u32]) -> Result<Vec<Sample>> {
    let mut pool = Vec::new();
    for &class in classes {
        for im in dataset.train_of(class)? {
            pool.push(Sample {
                image: im.clone(),
                label: class,
                origin: Origin::Fresh,
            });
        }
    }
    Ok(pool)
}

fn ensure_finite(log: &TrainLog, phase: usize) -> Result<()> {
    for (name, losses) in [("lower", &log.lower_losses), ("upper", &log.upper_losses)] {
        if let Some((epoch, loss)) = losses
            .iter()
            .enumerate()
            .find(|(_, l)| !l.is_finite())
        {
            return Err(Error::Training(format!(
                "phase {phase}: non-finite {name}-level loss {loss} at epoch {epoch}"
            )));
        }
    }
    Ok(())
}

/// Trains the phase-0 single-branch network end to end; the result's trunk
/// becomes the frozen substrate of every later phase.
pub fn train_base(
    dataset: &Dataset,
    classes: &[u32],
    arch: &ArchConfig,
    trainer: &TrainerConfig,
    seed: u64,
) -> Result<(PhaseState, TrainLog)> {
    let mut state = initial_state(arch, classes, seed)?;
    let pool = fresh_pool(dataset, classes)?;
    let log = train_phase(&mut state, &pool, &[], trainer)?;
    ensure_finite(&log, 0)?;
    Ok((state, log))
}

struct Evaluation {
    test_accuracy: f64,
    per_group_accuracy: BTreeMap<usize, f64>,
    samples_scored: usize,
}

/// Accuracy over the union of all seen classes' test sets, plus the same
/// broken out by phase of origin.
fn evaluate(
    state: &PhaseState,
    dataset: &Dataset,
    splits: &[Vec<u32>],
    upto_phase: usize,
) -> Result<Evaluation> {
    let mut per_group = BTreeMap::new();
    let mut hits = 0usize;
    let mut total = 0usize;
    for (group, classes) in splits.iter().enumerate().take(upto_phase + 1) {
        let mut group_hits = 0usize;
        let mut group_total = 0usize;
        for &class in classes {
            let row = state.row_for(class).ok_or_else(|| {
                Error::State(format!("class {class} missing from the trained head"))
            })?;
            for im in dataset.test_of(class)? {
                let logits = state.model.forward_traced(&state.alphas, im)?.logits;
                let pred = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .expect("non-empty head");
                group_hits += usize::from(pred == row);
                group_total += 1;
            }
        }
        per_group.insert(group, group_hits as f64 / group_total as f64);
        hits += group_hits;
        total += group_total;
    }
    Ok(Evaluation {
        test_accuracy: hits as f64 / total as f64,
        per_group_accuracy: per_group,
        samples_scored: total,
    })
}

/// New trunk with each stable branch's per-filter scales folded into the
/// corresponding base kernels. Biases are never scaled. The caller is
/// responsible for resetting the scales afterwards.
pub fn update_base_variant(state: &PhaseState) -> Result<BaseBackbone> {
    let Body::Dual(duals) = &state.model.body else {
        return Err(Error::Config(
            "base update needs a dual-branch body with a scaling stable branch".into(),
        ));
    };
    let mut base = state.model.base.clone();
    for (k, dual) in duals.iter().enumerate() {
        let BranchParams::Scaling(sp) = &dual.stable else {
            return Err(Error::Config(format!(
                "base update needs a scaling stable branch, level {k} has {}",
                dual.stable.kind()
            )));
        };
        for (q, layer) in base.levels[k].layers.iter_mut().enumerate() {
            for (o, &scale) in sp.per_layer[q].iter().enumerate() {
                layer
                    .weight
                    .index_axis_mut(ndarray::Axis(0), o)
                    .mapv_inplace(|w| w * scale);
            }
        }
    }
    Ok(base)
}

/// Folds the scales into the trunk and resets them to one, in place.
pub fn apply_base_update(state: &mut PhaseState) -> Result<()> {
    let base = update_base_variant(state)?;
    state.model.base = base;
    if let Body::Dual(duals) = &mut state.model.body {
        for dual in duals {
            if let BranchParams::Scaling(sp) = &mut dual.stable {
                for v in &mut sp.per_layer {
                    v.fill(1.0);
                }
            }
        }
    }
    Ok(())
}

/// Runs all N+1 phases for one seed. On failure the completed phase
/// reports ride along with the error.
pub fn run_protocol(
    spec: &RunSpec<'_>,
    dataset: &Dataset,
) -> std::result::Result<RunOutput, ProtocolFailure> {
    run_protocol_observed(spec, dataset, &mut |_, _| Ok(()))
}

/// Like [`run_protocol`], invoking `observer` with the end-of-phase state
/// (after any base update) and its report, e.g. to write checkpoints.
pub fn run_protocol_observed(
    spec: &RunSpec<'_>,
    dataset: &Dataset,
    observer: &mut dyn FnMut(&PhaseState, &PhaseReport) -> Result<()>,
) -> std::result::Result<RunOutput, ProtocolFailure> {
    let mut reports: Vec<PhaseReport> = Vec::new();
    let mut trajectory: Vec<AlphaRecord> = Vec::new();
    match drive_run(spec, dataset, observer, &mut reports, &mut trajectory) {
        Ok(()) => Ok(RunOutput {
            summary: RunSummary::from_phases(spec.seed, reports),
            alpha_trajectory: trajectory,
        }),
        Err(error) => Err(ProtocolFailure {
            completed: reports,
            error,
        }),
    }
}

fn drive_run(
    spec: &RunSpec<'_>,
    dataset: &Dataset,
    observer: &mut dyn FnMut(&PhaseState, &PhaseReport) -> Result<()>,
    reports: &mut Vec<PhaseReport>,
    trajectory: &mut Vec<AlphaRecord>,
) -> Result<()> {
    let protocol = spec.protocol;
    let arch = spec.arch;
    protocol.validate()?;
    spec.trainer.validate()?;
    arch.validate()?;
    let dims = dataset.dims();
    if dims != (arch.in_channels, arch.image_size, arch.image_size) {
        return Err(Error::Config(format!(
            "dataset images are {dims:?}, the architecture expects ({}, {}, {})",
            arch.in_channels, arch.image_size, arch.image_size
        )));
    }

    let splits = make_splits(protocol, &dataset.class_ids())?;
    let quota = if protocol.strict_memory {
        strict_quota(&BudgetLedger {
            bytes_per_float: 4,
            image_bytes: dataset.image_bytes(),
            extra_params: extra_params_of(arch, spec.variant),
            num_classes: protocol.total_classes,
            baseline_quota: protocol.per_class_quota,
        })?
    } else {
        protocol.per_class_quota
    };
    let mut store = ExemplarStore::new(quota, protocol.selection)?;

    // Phase 0: train the trunk on the first split, then freeze it.
    let clock = Instant::now();
    let (mut state, log) = train_base(
        dataset,
        &splits[0],
        arch,
        spec.trainer,
        mix_seed(spec.seed, 0),
    )?;
    trajectory.extend(log.alpha_trajectory);
    store_new_exemplars(&mut store, &state, dataset, &splits[0], spec.seed, 0)?;
    let report = phase_report(&state, dataset, &splits, 0, &store, clock)?;
    observer(&state, &report)?;
    reports.push(report);

    for i in 1..splits.len() {
        let clock = Instant::now();
        let kinds = vec![spec.variant; arch.levels];
        state = init_phase(&state, &kinds, &splits[i], mix_seed(spec.seed, i as u64))?;

        // E_i is selected with the inherited model so the balanced pool
        // exists before training starts.
        let mut new_data = BTreeMap::new();
        for &class in &splits[i] {
            new_data.insert(class, dataset.train_of(class)?.to_vec());
        }
        let mut new_exemplars = BTreeMap::new();
        for (&class, images) in &new_data {
            let picked = select_exemplars(
                &state.model,
                &state.alphas,
                images,
                store.quota(),
                store.method(),
                class_seed(mix_seed(spec.seed, i as u64), class),
            )?;
            new_exemplars.insert(class, picked);
        }
        let (full_pool, balanced_pool) = assemble_pools(&store, &new_data, &new_exemplars)?;

        let log = train_phase(&mut state, &full_pool, &balanced_pool, spec.trainer)?;
        ensure_finite(&log, i)?;
        trajectory.extend(log.alpha_trajectory);

        for (class, picked) in new_exemplars {
            store.insert_class(class, picked)?;
        }
        let report = phase_report(&state, dataset, &splits, i, &store, clock)?;
        if protocol.update_base {
            apply_base_update(&mut state)?;
        }
        observer(&state, &report)?;
        reports.push(report);
    }
    Ok(())
}

/// Selects and stores exemplars for phase-0 classes with the just-trained
/// model.
fn store_new_exemplars(
    store: &mut ExemplarStore,
    state: &PhaseState,
    dataset: &Dataset,
    classes: &[u32],
    seed: u64,
    phase: u64,
) -> Result<()> {
    for &class in classes {
        let picked = select_exemplars(
            &state.model,
            &state.alphas,
            dataset.train_of(class)?,
            store.quota(),
            store.method(),
            class_seed(mix_seed(seed, phase), class),
        )?;
        store.insert_class(class, picked)?;
    }
    Ok(())
}

fn phase_report(
    state: &PhaseState,
    dataset: &Dataset,
    splits: &[Vec<u32>],
    phase: usize,
    store: &ExemplarStore,
    clock: Instant,
) -> Result<PhaseReport> {
    let eval = evaluate(state, dataset, splits, phase)?;
    let expected: usize = splits
        .iter()
        .take(phase + 1)
        .flatten()
        .map(|&c| dataset.test_of(c).map(|s| s.len()))
        .sum::<Result<usize>>()?;
    if eval.samples_scored != expected {
        return Err(Error::State(format!(
            "phase {phase} scored {} samples, the seen classes hold {expected}",
            eval.samples_scored
        )));
    }
    let param_count = if phase == 0 {
        state.model.learnable_params_initial()
    } else {
        state.model.learnable_params_incremental()
    };
    Ok(PhaseReport {
        phase_index: phase,
        seen_classes: state.seen_classes(),
        test_accuracy: eval.test_accuracy,
        per_group_accuracy: eval.per_group_accuracy,
        alpha_snapshot: state.alphas.clone(),
        param_count,
        memory_bytes: store.total_exemplars() * dataset.image_bytes(),
        wall_time_s: clock.elapsed().as_secs_f64(),
    })
}

/// Mean and 95% confidence half-width (Student's t) of one metric.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub half_width: f64,
}

fn mean_ci(values: &[f64]) -> Result<MeanCi> {
    if values.len() < 2 {
        return Err(Error::Argument(format!(
            "confidence intervals need at least 2 runs, got {}",
            values.len()
        )));
    }
    // Identical values mean zero spread; skip the arithmetic so round-off
    // cannot manufacture a spurious width.
    if values.iter().all(|v| *v == values[0]) {
        return Ok(MeanCi {
            mean: values[0],
            half_width: 0.0,
        });
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| Error::Numeric(format!("t distribution: {e}")))?
        .inverse_cdf(0.975);
    Ok(MeanCi {
        mean,
        half_width: t * sd / n.sqrt(),
    })
}

/// Cross-seed aggregate of the two run-level metrics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunAggregate {
    pub runs: usize,
    pub average_incremental_accuracy: MeanCi,
    pub last_phase_accuracy: MeanCi,
}

pub fn aggregate_runs(summaries: &[RunSummary]) -> Result<RunAggregate> {
    let avg: Vec<f64> = summaries
        .iter()
        .map(|s| s.average_incremental_accuracy)
        .collect();
    let last: Vec<f64> = summaries.iter().map(|s| s.last_phase_accuracy).collect();
    Ok(RunAggregate {
        runs: summaries.len(),
        average_incremental_accuracy: mean_ci(&avg)?,
        last_phase_accuracy: mean_ci(&last)?,
    })
}
