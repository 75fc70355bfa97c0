//! Alternating two-level training: network parameters move on the full
//! (imbalanced) pool with SGD momentum, aggregation weights move on the
//! balanced exemplar pool with plain SGD and are projected back onto the
//! feasible segment after every step.

pub mod gradcheck;

use std::collections::BTreeMap;

use ndarray::{Array, Array3, Dimension};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    backward_batch, extend_head, AggregationWeights, AlphaPair, ArchConfig, Body, BodyGrads,
    BranchGrads, BranchParams, Gradients, Model, ModelVariant,
};
use crate::error::{Error, Result};
use crate::memory::{Origin, Sample};

/// One scheduled learning-rate drop: from `epoch` on, both rates are divided
/// by `divisor` (cumulatively across drops).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LrDrop {
    pub epoch: usize,
    pub divisor: f64,
}

/// Hyperparameters of one phase's training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerConfig {
    /// Lower-level (network) learning rate.
    pub gamma1: f64,
    /// Upper-level (aggregation-weight) learning rate.
    pub gamma2: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    #[serde(default)]
    pub lr_schedule: Vec<LrDrop>,
    pub seed: u64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            gamma1: 0.05,
            gamma2: 1e-3,
            momentum: 0.9,
            batch_size: 32,
            epochs: 30,
            lr_schedule: vec![
                LrDrop {
                    epoch: 15,
                    divisor: 10.0,
                },
                LrDrop {
                    epoch: 23,
                    divisor: 10.0,
                },
            ],
            seed: 0,
        }
    }
}

impl TrainerConfig {
    // Negated comparisons so a NaN fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma1 > 0.0) || !(self.gamma2 > 0.0) {
            return Err(Error::Config(format!(
                "learning rates must be strictly positive (gamma1 {}, gamma2 {})",
                self.gamma1, self.gamma2
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let mut prev: Option<usize> = None;
        for drop in &self.lr_schedule {
            if !(drop.divisor > 0.0) {
                return Err(Error::Config(format!(
                    "schedule divisor {} must be positive",
                    drop.divisor
                )));
            }
            if drop.epoch >= self.epochs {
                return Err(Error::Config(format!(
                    "schedule epoch {} is not below epochs {}",
                    drop.epoch, self.epochs
                )));
            }
            if let Some(p) = prev {
                if drop.epoch <= p {
                    return Err(Error::Config(
                        "schedule epochs must be strictly increasing".into(),
                    ));
                }
            }
            prev = Some(drop.epoch);
        }
        Ok(())
    }

    /// Effective `(gamma1, gamma2)` at `epoch` after all drops at or before
    /// it have compounded.
    pub fn rates_at(&self, epoch: usize) -> (f64, f64) {
        let mut g1 = self.gamma1;
        let mut g2 = self.gamma2;
        for drop in &self.lr_schedule {
            if epoch >= drop.epoch {
                g1 /= drop.divisor;
                g2 /= drop.divisor;
            }
        }
        (g1, g2)
    }
}

/// One row of the aggregation-weight trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaRecord {
    pub phase: usize,
    pub epoch: usize,
    pub level: usize,
    pub alpha_stable: f64,
    pub alpha_plastic: f64,
}

/// Everything train_phase returns besides the mutated state.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// One record per (epoch, level) for dual bodies; empty otherwise.
    pub alpha_trajectory: Vec<AlphaRecord>,
    /// Mean lower-level loss per epoch.
    pub lower_losses: Vec<f64>,
    /// Mean upper-level loss per epoch (dual bodies only).
    pub upper_losses: Vec<f64>,
}

/// Mutable training state of one phase.
#[derive(Debug, Clone)]
pub struct PhaseState {
    pub phase_index: usize,
    pub model: Model,
    pub alphas: AggregationWeights,
    /// Class label to classifier-head row, in introduction order.
    pub label_rows: BTreeMap<u32, usize>,
    /// Whether the trunk (stem and base levels) trains this phase.
    pub train_base: bool,
    velocity: Gradients,
    rng: ChaCha8Rng,
}

impl PhaseState {
    pub fn seen_classes(&self) -> usize {
        self.label_rows.len()
    }

    pub fn row_for(&self, label: u32) -> Option<usize> {
        self.label_rows.get(&label).copied()
    }

    pub fn seen_labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.label_rows.keys().copied()
    }
}

/// Fresh phase-0 state: a single-branch frozen body over a randomly
/// initialized trunk, trained end to end.
pub fn initial_state(arch: &ArchConfig, classes: &[u32], seed: u64) -> Result<PhaseState> {
    check_new_classes(classes, None)?;
    let model = Model::initial(arch, classes.len(), seed)?;
    let velocity = Gradients::zeros_like(&model, true);
    Ok(PhaseState {
        phase_index: 0,
        model,
        alphas: AggregationWeights::none(),
        label_rows: classes.iter().enumerate().map(|(i, &c)| (c, i)).collect(),
        train_base: true,
        velocity,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

fn check_new_classes(classes: &[u32], prev: Option<&BTreeMap<u32, usize>>) -> Result<()> {
    if classes.is_empty() {
        return Err(Error::Protocol("phase introduces no classes".into()));
    }
    let mut seen = std::collections::BTreeSet::new();
    for &c in classes {
        if !seen.insert(c) {
            return Err(Error::Protocol(format!("class {c} listed twice in one phase")));
        }
        if prev.is_some_and(|p| p.contains_key(&c)) {
            return Err(Error::Protocol(format!(
                "class {c} overlaps an earlier phase"
            )));
        }
    }
    Ok(())
}

/// Starts the next incremental phase from a completed one.
///
/// The first incremental phase builds fresh branches from `level_kinds`
/// (full copies start at the base weights, scale vectors at one, every
/// aggregation pair at 0.5); later phases inherit branch parameters and
/// aggregation weights unchanged. The head grows by `new_classes` rows.
pub fn init_phase(
    prev: &PhaseState,
    level_kinds: &[ModelVariant],
    new_classes: &[u32],
    seed: u64,
) -> Result<PhaseState> {
    let levels = prev.model.levels();
    if level_kinds.len() != levels {
        return Err(Error::Config(format!(
            "{} level layouts for {} levels",
            level_kinds.len(),
            levels
        )));
    }
    let dual = match level_kinds {
        [] => unreachable!("levels >= 1 by arch validation"),
        [first, rest @ ..] => {
            if rest.iter().any(|k| k.is_dual() != first.is_dual()) {
                return Err(Error::Config(
                    "level layouts mix single- and dual-branch levels".into(),
                ));
            }
            first.is_dual()
        }
    };
    check_new_classes(new_classes, Some(&prev.label_rows))?;

    let base = prev.model.base.clone();
    let (body, alphas) = if prev.phase_index == 0 {
        let filters = base.arch.filters;
        let body = if dual {
            Body::Dual(
                base.levels
                    .iter()
                    .zip(level_kinds)
                    .map(|(lvl, kind)| match kind {
                        ModelVariant::Dual { plastic, stable } => crate::backbone::DualLevel {
                            stable: BranchParams::init(*stable, lvl, filters),
                            plastic: BranchParams::init(*plastic, lvl, filters),
                        },
                        ModelVariant::Single(_) => unreachable!("checked above"),
                    })
                    .collect(),
            )
        } else {
            Body::Single(
                base.levels
                    .iter()
                    .zip(level_kinds)
                    .map(|(lvl, kind)| match kind {
                        ModelVariant::Single(k) => BranchParams::init(*k, lvl, filters),
                        ModelVariant::Dual { .. } => unreachable!("checked above"),
                    })
                    .collect(),
            )
        };
        let alphas = if dual {
            AggregationWeights::even(levels)
        } else {
            AggregationWeights::none()
        };
        (body, alphas)
    } else {
        // Carry over; the requested layout must match what is inherited.
        let have = ModelVariant::of_body(&prev.model.body);
        if prev.model.body.is_dual() != dual {
            return Err(Error::Config(format!(
                "requested {} layout but the previous phase trained {}",
                if dual { "dual" } else { "single" },
                have.map_or_else(|| "an empty body".into(), |v| v.label()),
            )));
        }
        (prev.model.body.clone(), prev.alphas.clone())
    };

    let head = extend_head(&prev.model.head, new_classes.len())?;
    let model = Model { base, body, head };
    model.validate()?;
    let velocity = Gradients::zeros_like(&model, false);

    let mut label_rows = prev.label_rows.clone();
    for (next_row, &c) in (label_rows.len()..).zip(new_classes) {
        label_rows.insert(c, next_row);
    }

    Ok(PhaseState {
        phase_index: prev.phase_index + 1,
        model,
        alphas,
        label_rows,
        train_base: false,
        velocity,
        rng: ChaCha8Rng::seed_from_u64(seed),
    })
}

fn sgd_tensor<D: Dimension>(
    p: &mut Array<f64, D>,
    v: &mut Array<f64, D>,
    g: &Array<f64, D>,
    lr: f64,
    momentum: f64,
) {
    v.zip_mut_with(g, |vv, &gg| *vv = momentum * *vv + gg);
    p.zip_mut_with(v, |pp, &vv| *pp -= lr * vv);
}

/// Applies one SGD-with-momentum step to every network parameter that has a
/// gradient. Aggregation weights are never touched here.
fn apply_network_step(state: &mut PhaseState, grads: &Gradients, lr: f64, momentum: f64) {
    let model = &mut state.model;
    let vel = &mut state.velocity;

    if state.train_base {
        if let (Some(sg), Some(sv)) = (grads.stem.as_ref(), vel.stem.as_mut()) {
            sgd_tensor(&mut model.base.stem.weight, &mut sv.weight, &sg.weight, lr, momentum);
            sgd_tensor(&mut model.base.stem.bias, &mut sv.bias, &sg.bias, lr, momentum);
        }
        if let (Some(bg), Some(bv)) = (grads.base_levels.as_ref(), vel.base_levels.as_mut()) {
            for (k, level) in model.base.levels.iter_mut().enumerate() {
                for (q, layer) in level.layers.iter_mut().enumerate() {
                    sgd_tensor(
                        &mut layer.weight,
                        &mut bv[k].layers[q].weight,
                        &bg[k].layers[q].weight,
                        lr,
                        momentum,
                    );
                    sgd_tensor(
                        &mut layer.bias,
                        &mut bv[k].layers[q].bias,
                        &bg[k].layers[q].bias,
                        lr,
                        momentum,
                    );
                }
            }
        }
    }

    let step_branch =
        |branch: &mut BranchParams, bg: &BranchGrads, bv: &mut BranchGrads| match (branch, bg, bv) {
            (BranchParams::All(lp), BranchGrads::All(g), BranchGrads::All(v)) => {
                for (q, layer) in lp.layers.iter_mut().enumerate() {
                    sgd_tensor(
                        &mut layer.weight,
                        &mut v.layers[q].weight,
                        &g.layers[q].weight,
                        lr,
                        momentum,
                    );
                    sgd_tensor(
                        &mut layer.bias,
                        &mut v.layers[q].bias,
                        &g.layers[q].bias,
                        lr,
                        momentum,
                    );
                }
            }
            (BranchParams::Scaling(sp), BranchGrads::Scaling(g), BranchGrads::Scaling(v)) => {
                for (q, scales) in sp.per_layer.iter_mut().enumerate() {
                    sgd_tensor(scales, &mut v[q], &g[q], lr, momentum);
                }
            }
            (BranchParams::Frozen, BranchGrads::Frozen, BranchGrads::Frozen) => {}
            _ => unreachable!("gradient mirror out of sync with branch params"),
        };

    match (&mut model.body, &grads.body, &mut vel.body) {
        (Body::Single(params), BodyGrads::Single(g), BodyGrads::Single(v)) => {
            for ((p, pg), pv) in params.iter_mut().zip(g).zip(v) {
                step_branch(p, pg, pv);
            }
        }
        (Body::Dual(params), BodyGrads::Dual(g), BodyGrads::Dual(v)) => {
            for ((p, pg), pv) in params.iter_mut().zip(g).zip(v) {
                step_branch(&mut p.stable, &pg.stable, &mut pv.stable);
                step_branch(&mut p.plastic, &pg.plastic, &mut pv.plastic);
            }
        }
        _ => unreachable!("gradient mirror out of sync with body"),
    }

    sgd_tensor(
        &mut model.head.weight,
        &mut vel.head_weight,
        &grads.head_weight,
        lr,
        momentum,
    );
    sgd_tensor(
        &mut model.head.bias,
        &mut vel.head_bias,
        &grads.head_bias,
        lr,
        momentum,
    );
}

fn batch_rows(state: &PhaseState, batch: &[&Sample]) -> Result<Vec<usize>> {
    batch
        .iter()
        .map(|s| {
            state.row_for(s.label).ok_or_else(|| {
                Error::Data(format!("label {} is not among the seen classes", s.label))
            })
        })
        .collect()
}

/// One SGD-with-momentum step of the network parameters (branches, head,
/// and the trunk while it trains) on a minibatch from the full pool.
/// Aggregation weights and frozen parameters stay untouched. Returns the
/// batch loss.
pub fn lower_step(
    state: &mut PhaseState,
    batch: &[&Sample],
    lr1: f64,
    momentum: f64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Argument("empty lower-level batch".into()));
    }
    let rows = batch_rows(state, batch)?;
    let images: Vec<&Array3<f64>> = batch.iter().map(|s| &s.image).collect();
    let (loss, grads) =
        backward_batch(&state.model, &state.alphas, &images, &rows, state.train_base)?;
    apply_network_step(state, &grads, lr1, momentum);
    Ok(loss)
}

/// One plain-SGD step of the aggregation weights on a minibatch from the
/// balanced exemplar pool, followed by projection onto the feasible
/// segment. Network parameters stay untouched. Returns the batch loss.
pub fn upper_step(state: &mut PhaseState, batch: &[&Sample], lr2: f64) -> Result<f64> {
    if !state.model.body.is_dual() {
        return Err(Error::State(
            "upper-level step requires a dual-branch body".into(),
        ));
    }
    if batch.is_empty() {
        return Err(Error::State("empty balanced pool".into()));
    }
    if let Some(fresh) = batch.iter().find(|s| s.origin != Origin::Exemplar) {
        return Err(Error::Data(format!(
            "balanced pool contains a non-exemplar sample of class {}",
            fresh.label
        )));
    }
    let rows = batch_rows(state, batch)?;
    let images: Vec<&Array3<f64>> = batch.iter().map(|s| &s.image).collect();
    let (loss, grads) = backward_batch(&state.model, &state.alphas, &images, &rows, false)?;
    for (pair, g) in state.alphas.per_level.iter_mut().zip(&grads.alphas) {
        pair.stable -= lr2 * g.stable;
        pair.plastic -= lr2 * g.plastic;
        *pair = project_alpha(*pair)?;
    }
    Ok(loss)
}

/// Nearest point (Euclidean) of the segment `{(a, 1-a) : a in [0, 1]}`.
pub fn project_alpha(raw: AlphaPair) -> Result<AlphaPair> {
    if !raw.stable.is_finite() || !raw.plastic.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite aggregation pair ({}, {})",
            raw.stable, raw.plastic
        )));
    }
    let t = ((raw.stable - raw.plastic + 1.0) / 2.0).clamp(0.0, 1.0);
    Ok(AlphaPair {
        stable: t,
        plastic: 1.0 - t,
    })
}

/// Runs one phase: per epoch, a full minibatch sweep of lower steps over
/// `full_pool`, then (for dual bodies) a full sweep of upper steps over
/// `balanced_pool`, recording the aggregation weights after each epoch.
pub fn train_phase(
    state: &mut PhaseState,
    full_pool: &[Sample],
    balanced_pool: &[Sample],
    cfg: &TrainerConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    if full_pool.is_empty() {
        return Err(Error::Argument("empty training pool".into()));
    }
    let dual = state.model.body.is_dual();
    if dual && balanced_pool.is_empty() {
        return Err(Error::State("empty balanced pool".into()));
    }

    let mut log = TrainLog::default();
    let mut lower_refs: Vec<&Sample> = full_pool.iter().collect();
    let mut upper_refs: Vec<&Sample> = balanced_pool.iter().collect();

    for epoch in 0..cfg.epochs {
        let (lr1, lr2) = cfg.rates_at(epoch);

        lower_refs.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        for chunk in lower_refs.chunks(cfg.batch_size) {
            loss_sum += lower_step(state, chunk, lr1, cfg.momentum)? * chunk.len() as f64;
        }
        log.lower_losses.push(loss_sum / lower_refs.len() as f64);

        if dual {
            upper_refs.shuffle(&mut state.rng);
            let mut upper_sum = 0.0;
            for chunk in upper_refs.chunks(cfg.batch_size) {
                upper_sum += upper_step(state, chunk, lr2)? * chunk.len() as f64;
            }
            log.upper_losses.push(upper_sum / upper_refs.len() as f64);
            for (level, pair) in state.alphas.per_level.iter().enumerate() {
                log.alpha_trajectory.push(AlphaRecord {
                    phase: state.phase_index,
                    epoch,
                    level,
                    alpha_stable: pair.stable,
                    alpha_plastic: pair.plastic,
                });
            }
        }
    }
    Ok(log)
}
