//! Exemplar memory: per-class stores with a fixed per-class quota, greedy
//! mean-matching (herding) or random selection, strict-budget accounting,
//! and assembly of the two training pools each phase consumes.

pub mod io;

use std::collections::BTreeMap;

use ndarray::{Array1, Array3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{AggregationWeights, Model};
use crate::error::{Error, Result};

/// Where a pooled sample came from. Upper-level steps only accept exemplars.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Exemplar,
    Fresh,
}

/// One training sample as the pools hand it to the trainer.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: Array3<f64>,
    pub label: u32,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    #[default]
    Herding,
    Random,
}

impl std::str::FromStr for SelectionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "herding" => Ok(SelectionMethod::Herding),
            "random" => Ok(SelectionMethod::Random),
            other => Err(Error::Config(format!(
                "unknown selection method '{other}' (expected herding or random)"
            ))),
        }
    }
}

/// Greedy mean-matching selection. Returns `quota` indices into
/// `embeddings`, in selection order: step `t` picks the unchosen candidate
/// whose inclusion brings the running average closest (L2) to the class
/// mean, breaking ties toward the lowest index.
pub fn herding_select(embeddings: &[Array1<f64>], quota: usize) -> Result<Vec<usize>> {
    if embeddings.is_empty() {
        return Err(Error::Argument("herding over an empty candidate set".into()));
    }
    if quota == 0 {
        return Err(Error::Argument("herding with quota 0".into()));
    }
    if quota > embeddings.len() {
        return Err(Error::Argument(format!(
            "herding quota {quota} exceeds {} candidates",
            embeddings.len()
        )));
    }
    let dim = embeddings[0].len();
    if let Some(bad) = embeddings.iter().position(|e| e.len() != dim) {
        return Err(Error::Argument(format!(
            "embedding {bad} has dim {}, expected {dim}",
            embeddings[bad].len()
        )));
    }

    let n = embeddings.len();
    let mut mean = Array1::<f64>::zeros(dim);
    for e in embeddings {
        mean += e;
    }
    mean /= n as f64;

    let take = quota;
    let mut chosen = Vec::with_capacity(take);
    let mut taken = vec![false; n];
    let mut running = Array1::<f64>::zeros(dim);
    for t in 1..=take {
        let inv = 1.0 / t as f64;
        let mut best: Option<(usize, f64)> = None;
        for (j, e) in embeddings.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let mut dist_sq = 0.0;
            for ((&m, &r), &v) in mean.iter().zip(running.iter()).zip(e.iter()) {
                let d = m - (r + v) * inv;
                dist_sq += d * d;
            }
            // Strict `<` keeps the earliest index on ties.
            if best.is_none_or(|(_, bd)| dist_sq < bd) {
                best = Some((j, dist_sq));
            }
        }
        let (j, _) = best.expect("at least one candidate remains");
        taken[j] = true;
        running += &embeddings[j];
        chosen.push(j);
    }
    Ok(chosen)
}

/// Random selection with the same prefix property as herding: the order is
/// one seeded permutation, so shrinking the quota truncates it.
pub fn random_select(n: usize, quota: usize, seed: u64) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Argument("random selection over an empty set".into()));
    }
    if quota == 0 {
        return Err(Error::Argument("random selection with quota 0".into()));
    }
    if quota > n {
        return Err(Error::Argument(format!(
            "selection quota {quota} exceeds {n} candidates"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.truncate(quota);
    Ok(order)
}

/// Inputs of the strict memory-budget arithmetic: the parameter overhead of
/// the dual-branch model is priced in image bytes and paid for by shrinking
/// the per-class exemplar quota.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    pub bytes_per_float: usize,
    /// Bytes of one stored image (H x W x C).
    pub image_bytes: usize,
    /// Learnable-parameter overhead versus the single-branch baseline.
    pub extra_params: usize,
    pub num_classes: usize,
    pub baseline_quota: usize,
}

impl BudgetLedger {
    pub fn validate(&self) -> Result<()> {
        if self.bytes_per_float == 0
            || self.image_bytes == 0
            || self.extra_params == 0
            || self.num_classes == 0
            || self.baseline_quota == 0
        {
            return Err(Error::Argument(
                "every budget-ledger field must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Reduced per-class quota after charging the parameter overhead against
/// the exemplar byte budget: `baseline - ceil(extra_params * bytes_per_float
/// / image_bytes / num_classes)`.
pub fn strict_quota(ledger: &BudgetLedger) -> Result<usize> {
    ledger.validate()?;
    let bytes = ledger.extra_params as u128 * ledger.bytes_per_float as u128;
    let denom = ledger.image_bytes as u128 * ledger.num_classes as u128;
    let per_class = bytes.div_ceil(denom) as usize;
    if per_class >= ledger.baseline_quota {
        return Err(Error::Config(format!(
            "strict budget infeasible: parameter overhead costs {per_class} exemplars \
             per class against a baseline of {}",
            ledger.baseline_quota
        )));
    }
    Ok(ledger.baseline_quota - per_class)
}

/// Exemplars kept across phases: per class, an ordered list of at most
/// `quota` images (selection order, so truncation equals re-selection at the
/// smaller quota).
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarStore {
    classes: BTreeMap<u32, Vec<Array3<f64>>>,
    quota: usize,
    method: SelectionMethod,
    dims: Option<(usize, usize, usize)>,
}

impl ExemplarStore {
    pub fn new(quota: usize, method: SelectionMethod) -> Result<Self> {
        if quota == 0 {
            return Err(Error::Config("exemplar quota must be positive".into()));
        }
        Ok(Self {
            classes: BTreeMap::new(),
            quota,
            method,
            dims: None,
        })
    }

    pub fn quota(&self) -> usize {
        self.quota
    }

    pub fn method(&self) -> SelectionMethod {
        self.method
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn total_exemplars(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn labels(&self) -> impl Iterator<Item = u32> + '_ {
        self.classes.keys().copied()
    }

    pub fn contains(&self, label: u32) -> bool {
        self.classes.contains_key(&label)
    }

    pub fn exemplars(&self, label: u32) -> Option<&[Array3<f64>]> {
        self.classes.get(&label).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, &[Array3<f64>])> {
        self.classes.iter().map(|(&l, v)| (l, v.as_slice()))
    }

    pub fn image_dims(&self) -> Option<(usize, usize, usize)> {
        self.dims
    }

    /// Inserts one class's exemplars in selection order.
    pub fn insert_class(&mut self, label: u32, exemplars: Vec<Array3<f64>>) -> Result<()> {
        if self.classes.contains_key(&label) {
            return Err(Error::Protocol(format!(
                "class {label} already has stored exemplars"
            )));
        }
        if exemplars.is_empty() {
            return Err(Error::Argument(format!(
                "class {label}: no exemplars to store"
            )));
        }
        if exemplars.len() > self.quota {
            return Err(Error::Argument(format!(
                "class {label}: {} exemplars exceed quota {}",
                exemplars.len(),
                self.quota
            )));
        }
        let d = exemplars[0].dim();
        let dims = (d.0, d.1, d.2);
        match self.dims {
            None => self.dims = Some(dims),
            Some(existing) if existing != dims => {
                return Err(Error::Argument(format!(
                    "class {label}: image dims {dims:?} differ from stored {existing:?}"
                )));
            }
            Some(_) => {}
        }
        if let Some(bad) = exemplars.iter().position(|im| {
            let d = im.dim();
            (d.0, d.1, d.2) != dims
        }) {
            return Err(Error::Argument(format!(
                "class {label}: exemplar {bad} has inconsistent dims"
            )));
        }
        self.classes.insert(label, exemplars);
        Ok(())
    }

    /// Shrinks the per-class quota, truncating every stored list. Growth is
    /// rejected: discarded exemplars cannot be recovered.
    pub fn set_quota(&mut self, quota: usize) -> Result<()> {
        if quota == 0 {
            return Err(Error::Config("exemplar quota must be positive".into()));
        }
        if quota > self.quota {
            return Err(Error::Config(format!(
                "quota cannot grow ({} -> {quota}): discarded exemplars are gone",
                self.quota
            )));
        }
        for list in self.classes.values_mut() {
            list.truncate(quota);
        }
        self.quota = quota;
        Ok(())
    }

    pub(crate) fn from_raw_parts(
        quota: usize,
        method: SelectionMethod,
        dims: Option<(usize, usize, usize)>,
        classes: BTreeMap<u32, Vec<Array3<f64>>>,
    ) -> Self {
        Self {
            classes,
            quota,
            method,
            dims,
        }
    }
}

/// Embeds `images` with the given model state and picks exemplars by the
/// store's method, returning them in selection order. Classes smaller than
/// the quota keep everything. `class_seed` only matters for random selection.
pub fn select_exemplars(
    model: &Model,
    alphas: &AggregationWeights,
    images: &[Array3<f64>],
    quota: usize,
    method: SelectionMethod,
    class_seed: u64,
) -> Result<Vec<Array3<f64>>> {
    if images.is_empty() {
        return Err(Error::Argument("no candidate images".into()));
    }
    let take = quota.min(images.len());
    let indices = match method {
        SelectionMethod::Herding => {
            let embeddings: Vec<Array1<f64>> = images
                .iter()
                .map(|im| model.embed(alphas, im))
                .collect::<Result<_>>()?;
            herding_select(&embeddings, take)?
        }
        SelectionMethod::Random => random_select(images.len(), take, class_seed)?,
    };
    Ok(indices.into_iter().map(|i| images[i].clone()).collect())
}

/// Mixes a per-class seed so two classes never share a random permutation.
pub fn class_seed(base: u64, label: u32) -> u64 {
    base ^ (u64::from(label).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Selects and stores exemplars for each new class with the current model.
pub fn update_store(
    store: &mut ExemplarStore,
    model: &Model,
    alphas: &AggregationWeights,
    new_class_data: &BTreeMap<u32, Vec<Array3<f64>>>,
    seed: u64,
) -> Result<()> {
    if new_class_data.is_empty() {
        return Err(Error::Protocol("no new classes to store".into()));
    }
    for (&label, images) in new_class_data {
        let picked = select_exemplars(
            model,
            alphas,
            images,
            store.quota(),
            store.method(),
            class_seed(seed, label),
        )?;
        store.insert_class(label, picked)?;
    }
    Ok(())
}

/// Builds the two per-phase training pools.
///
/// The lower pool is every old exemplar plus all fresh data of the incoming
/// classes; the upper pool is every old exemplar plus the incoming classes'
/// own exemplars, so each class contributes at most `quota` samples.
pub fn assemble_pools(
    store: &ExemplarStore,
    new_data: &BTreeMap<u32, Vec<Array3<f64>>>,
    new_exemplars: &BTreeMap<u32, Vec<Array3<f64>>>,
) -> Result<(Vec<Sample>, Vec<Sample>)> {
    if new_data.is_empty() {
        return Err(Error::Protocol("phase introduces no new classes".into()));
    }
    for (&label, images) in new_data {
        if images.is_empty() {
            return Err(Error::Protocol(format!("class {label} has no data")));
        }
        if store.contains(label) {
            return Err(Error::Protocol(format!(
                "class {label} overlaps an earlier phase"
            )));
        }
    }
    if new_exemplars.keys().ne(new_data.keys()) {
        return Err(Error::Protocol(
            "new exemplar classes do not match new data classes".into(),
        ));
    }
    for (&label, ex) in new_exemplars {
        if ex.is_empty() {
            return Err(Error::Protocol(format!("class {label}: empty exemplar set")));
        }
        if ex.len() > store.quota() {
            return Err(Error::Argument(format!(
                "class {label}: {} exemplars exceed quota {}",
                ex.len(),
                store.quota()
            )));
        }
    }

    let mut lower = Vec::new();
    let mut upper = Vec::new();
    for (label, images) in store.iter() {
        for im in images {
            lower.push(Sample {
                image: im.clone(),
                label,
                origin: Origin::Exemplar,
            });
            upper.push(Sample {
                image: im.clone(),
                label,
                origin: Origin::Exemplar,
            });
        }
    }
    for (&label, images) in new_data {
        for im in images {
            lower.push(Sample {
                image: im.clone(),
                label,
                origin: Origin::Fresh,
            });
        }
    }
    for (&label, images) in new_exemplars {
        for im in images {
            upper.push(Sample {
                image: im.clone(),
                label,
                origin: Origin::Exemplar,
            });
        }
    }
    Ok((lower, upper))
}
