//! Dual-branch residual model: a frozen base backbone, per-level branch
//! parameters, per-level aggregation weights, and a linear classifier head.

use ndarray::{Array1, Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::conv::{conv2d_forward, relu, ConvParams};
use crate::error::{Error, Result};

/// Tolerance for the aggregation-weight sum-to-one check.
pub const ALPHA_SUM_TOL: f64 = 1e-9;

/// Shape of the toy residual backbone. All levels share the same filter
/// count; spatial size is preserved end to end (stride 1, same padding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub levels: usize,
    pub filters: usize,
    pub kernel_size: usize,
    pub layers_per_level: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            image_size: 8,
            in_channels: 3,
            levels: 3,
            filters: 8,
            kernel_size: 3,
            layers_per_level: 2,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::Config("levels must be at least 1".into()));
        }
        if self.filters == 0 || self.in_channels == 0 {
            return Err(Error::Config("filters and in_channels must be positive".into()));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "kernel_size must be odd and positive, got {}",
                self.kernel_size
            )));
        }
        if self.layers_per_level == 0 {
            return Err(Error::Config("layers_per_level must be at least 1".into()));
        }
        if self.image_size == 0 {
            return Err(Error::Config("image_size must be positive".into()));
        }
        Ok(())
    }

    pub fn embed_dim(&self) -> usize {
        self.filters
    }

    /// Stable identifier recorded in checkpoints and reports.
    pub fn tag(&self) -> String {
        format!(
            "toy-resnet-{}level-{}f-{}x{}k-{}px",
            self.levels, self.filters, self.layers_per_level, self.kernel_size, self.image_size
        )
    }
}

/// Convolution stack of one residual level of the base backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelParams {
    pub layers: Vec<ConvParams>,
}

impl LevelParams {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(ConvParams::param_count).sum()
    }
}

/// The shared trunk: stem convolution plus per-level residual stacks.
/// Trained once, then frozen; branches either reuse or copy it.
#[derive(Debug, Clone)]
pub struct BaseBackbone {
    pub stem: ConvParams,
    pub levels: Vec<LevelParams>,
    pub arch: ArchConfig,
}

impl BaseBackbone {
    pub fn init(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = ConvParams::he_init(arch.filters, arch.in_channels, arch.kernel_size, &mut rng);
        let levels = (0..arch.levels)
            .map(|_| LevelParams {
                layers: (0..arch.layers_per_level)
                    .map(|_| {
                        ConvParams::he_init(arch.filters, arch.filters, arch.kernel_size, &mut rng)
                    })
                    .collect(),
            })
            .collect();
        Ok(Self {
            stem,
            levels,
            arch: arch.clone(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.stem.param_count() + self.levels.iter().map(LevelParams::param_count).sum::<usize>()
    }
}

/// How a branch derives its level computation from the base backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    /// Owns a full copy of the level's convolution parameters.
    All,
    /// Owns one multiplier per output filter per layer; weights stay frozen.
    Scaling,
    /// Reuses the base parameters unchanged.
    Frozen,
}

impl std::fmt::Display for BranchKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BranchKind::All => write!(f, "all"),
            BranchKind::Scaling => write!(f, "scaling"),
            BranchKind::Frozen => write!(f, "frozen"),
        }
    }
}

impl std::str::FromStr for BranchKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(BranchKind::All),
            "scaling" => Ok(BranchKind::Scaling),
            "frozen" => Ok(BranchKind::Frozen),
            other => Err(Error::Config(format!(
                "unknown branch kind '{other}' (expected all, scaling, or frozen)"
            ))),
        }
    }
}

/// Branch layout used for every incremental phase. Dual pairings are named
/// `plastic+stable` in configs; only combinations with at least one branch
/// anchored to the base (or a lone branch) are accepted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelVariant {
    Single(BranchKind),
    Dual { plastic: BranchKind, stable: BranchKind },
}

impl ModelVariant {
    pub const ALLOWED: [ModelVariant; 7] = [
        ModelVariant::Single(BranchKind::All),
        ModelVariant::Single(BranchKind::Scaling),
        ModelVariant::Dual {
            plastic: BranchKind::All,
            stable: BranchKind::All,
        },
        ModelVariant::Dual {
            plastic: BranchKind::All,
            stable: BranchKind::Scaling,
        },
        ModelVariant::Dual {
            plastic: BranchKind::All,
            stable: BranchKind::Frozen,
        },
        ModelVariant::Dual {
            plastic: BranchKind::Scaling,
            stable: BranchKind::Scaling,
        },
        ModelVariant::Dual {
            plastic: BranchKind::Scaling,
            stable: BranchKind::Frozen,
        },
    ];

    pub fn is_dual(&self) -> bool {
        matches!(self, ModelVariant::Dual { .. })
    }

    /// Canonical config string: `single-branch-<kind>` or `<plastic>+<stable>`.
    pub fn label(&self) -> String {
        match self {
            ModelVariant::Single(kind) => format!("single-branch-{kind}"),
            ModelVariant::Dual { plastic, stable } => format!("{plastic}+{stable}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let allowed_list = || {
            Self::ALLOWED
                .iter()
                .map(Self::label)
                .collect::<Vec<_>>()
                .join(", ")
        };
        let variant = if let Some(kind) = s.strip_prefix("single-branch-") {
            ModelVariant::Single(kind.parse()?)
        } else if let Some((p, st)) = s.split_once('+') {
            ModelVariant::Dual {
                plastic: p.parse()?,
                stable: st.parse()?,
            }
        } else {
            return Err(Error::Config(format!(
                "unrecognized branch layout '{s}'; allowed: {}",
                allowed_list()
            )));
        };
        if !Self::ALLOWED.contains(&variant) {
            return Err(Error::Config(format!(
                "branch layout '{s}' is not supported; allowed: {}",
                allowed_list()
            )));
        }
        Ok(variant)
    }

    /// Fresh branch parameters for the first incremental phase: full copies
    /// start from the base weights, scale vectors start at one.
    pub fn build_body(&self, base: &BaseBackbone) -> Body {
        let filters = base.arch.filters;
        match self {
            ModelVariant::Single(kind) => Body::Single(
                base.levels
                    .iter()
                    .map(|lvl| BranchParams::init(*kind, lvl, filters))
                    .collect(),
            ),
            ModelVariant::Dual { plastic, stable } => Body::Dual(
                base.levels
                    .iter()
                    .map(|lvl| DualLevel {
                        stable: BranchParams::init(*stable, lvl, filters),
                        plastic: BranchParams::init(*plastic, lvl, filters),
                    })
                    .collect(),
            ),
        }
    }

    /// The layout a body actually has, for validating inherited states.
    pub fn of_body(body: &Body) -> Option<ModelVariant> {
        match body {
            Body::Single(v) => v.first().map(|b| ModelVariant::Single(b.kind())),
            Body::Dual(v) => v.first().map(|d| ModelVariant::Dual {
                plastic: d.plastic.kind(),
                stable: d.stable.kind(),
            }),
        }
    }
}

/// Per-layer scale vectors of a scaling branch; `per_layer[q][o]` multiplies
/// every weight of output filter `o` in layer `q`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleParams {
    pub per_layer: Vec<Array1<f64>>,
}

impl ScaleParams {
    pub fn ones(layers: usize, filters: usize) -> Self {
        Self {
            per_layer: (0..layers).map(|_| Array1::ones(filters)).collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.per_layer.iter().map(Array1::len).sum()
    }
}

/// Parameters a branch owns at one level.
#[derive(Debug, Clone, PartialEq)]
pub enum BranchParams {
    All(LevelParams),
    Scaling(ScaleParams),
    Frozen,
}

impl BranchParams {
    pub fn kind(&self) -> BranchKind {
        match self {
            BranchParams::All(_) => BranchKind::All,
            BranchParams::Scaling(_) => BranchKind::Scaling,
            BranchParams::Frozen => BranchKind::Frozen,
        }
    }

    /// Fresh parameters for a branch of `kind` at base level `base`.
    pub fn init(kind: BranchKind, base: &LevelParams, filters: usize) -> Self {
        match kind {
            BranchKind::All => BranchParams::All(base.clone()),
            BranchKind::Scaling => {
                BranchParams::Scaling(ScaleParams::ones(base.layers.len(), filters))
            }
            BranchKind::Frozen => BranchParams::Frozen,
        }
    }

    /// Parameters this branch contributes to the learnable set.
    pub fn learnable_count(&self) -> usize {
        match self {
            BranchParams::All(lp) => lp.param_count(),
            BranchParams::Scaling(sp) => sp.param_count(),
            BranchParams::Frozen => 0,
        }
    }
}

/// Both branches at one residual level. `stable` leans on the base weights;
/// `plastic` is free to move. The pairing is fixed per experiment config.
#[derive(Debug, Clone, PartialEq)]
pub struct DualLevel {
    pub stable: BranchParams,
    pub plastic: BranchParams,
}

/// The learnable mid-section of the model.
#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    /// One branch per level; no aggregation weights.
    Single(Vec<BranchParams>),
    /// Stable plus plastic branch per level, mixed by aggregation weights.
    Dual(Vec<DualLevel>),
}

impl Body {
    pub fn levels(&self) -> usize {
        match self {
            Body::Single(v) => v.len(),
            Body::Dual(v) => v.len(),
        }
    }

    pub fn is_dual(&self) -> bool {
        matches!(self, Body::Dual(_))
    }

    pub fn learnable_count(&self) -> usize {
        match self {
            Body::Single(v) => v.iter().map(BranchParams::learnable_count).sum(),
            Body::Dual(v) => v
                .iter()
                .map(|d| d.stable.learnable_count() + d.plastic.learnable_count())
                .sum(),
        }
    }
}

/// Mixing weights for one level. Both components live in `[0, 1]` and sum
/// to one within [`ALPHA_SUM_TOL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaPair {
    pub stable: f64,
    pub plastic: f64,
}

impl AlphaPair {
    pub const EVEN: AlphaPair = AlphaPair {
        stable: 0.5,
        plastic: 0.5,
    };

    pub fn validate(&self) -> Result<()> {
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        if !in_range(self.stable) || !in_range(self.plastic) {
            return Err(Error::Argument(format!(
                "aggregation weights ({}, {}) outside [0, 1]",
                self.stable, self.plastic
            )));
        }
        if (self.stable + self.plastic - 1.0).abs() > ALPHA_SUM_TOL {
            return Err(Error::Argument(format!(
                "aggregation weights ({}, {}) do not sum to 1",
                self.stable, self.plastic
            )));
        }
        Ok(())
    }
}

/// One aggregation pair per level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights {
    pub per_level: Vec<AlphaPair>,
}

impl AggregationWeights {
    pub fn even(levels: usize) -> Self {
        Self {
            per_level: vec![AlphaPair::EVEN; levels],
        }
    }

    /// Empty set, used by single-branch bodies that have nothing to mix.
    pub fn none() -> Self {
        Self { per_level: Vec::new() }
    }

    pub fn validate(&self) -> Result<()> {
        for pair in &self.per_level {
            pair.validate()?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        2 * self.per_level.len()
    }
}

/// Linear classifier over the pooled embedding; one row per class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl ClassifierHead {
    pub fn zeros(classes: usize, embed_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((classes, embed_dim)),
            bias: Array1::zeros(classes),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn embed_dim(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    pub fn logits(&self, embed: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(embed) + &self.bias
    }
}

/// Grows the head by `new_classes` rows. Existing rows keep their exact
/// values; new rows (weights and biases) start at zero.
pub fn extend_head(head: &ClassifierHead, new_classes: usize) -> Result<ClassifierHead> {
    if new_classes == 0 {
        return Err(Error::Argument(
            "extend_head requires at least one new class".into(),
        ));
    }
    let (old, dim) = (head.classes(), head.embed_dim());
    let mut weight = Array2::zeros((old + new_classes, dim));
    weight.slice_mut(ndarray::s![..old, ..]).assign(&head.weight);
    let mut bias = Array1::zeros(old + new_classes);
    bias.slice_mut(ndarray::s![..old]).assign(&head.bias);
    Ok(ClassifierHead { weight, bias })
}

/// Full model: frozen trunk, branch body, classifier head.
#[derive(Debug, Clone)]
pub struct Model {
    pub base: BaseBackbone,
    pub body: Body,
    pub head: ClassifierHead,
}

impl Model {
    /// Initial-phase model: a single frozen branch per level, so the trunk
    /// itself is what gets trained.
    pub fn initial(arch: &ArchConfig, classes: usize, seed: u64) -> Result<Self> {
        if classes == 0 {
            return Err(Error::Argument("model needs at least one class".into()));
        }
        let base = BaseBackbone::init(arch, seed)?;
        let body = Body::Single(vec![BranchParams::Frozen; arch.levels]);
        let head = ClassifierHead::zeros(classes, arch.embed_dim());
        Ok(Self { base, body, head })
    }

    pub fn levels(&self) -> usize {
        self.base.levels.len()
    }

    /// Checks body shapes against the base backbone.
    pub fn validate(&self) -> Result<()> {
        if self.body.levels() != self.base.levels.len() {
            return Err(Error::Config(format!(
                "body has {} levels but base has {}",
                self.body.levels(),
                self.base.levels.len()
            )));
        }
        let check_branch = |level: usize, b: &BranchParams| -> Result<()> {
            let base = &self.base.levels[level];
            match b {
                BranchParams::All(lp) => {
                    if lp.layers.len() != base.layers.len() {
                        return Err(Error::Config(format!(
                            "level {level}: branch owns {} layers, base has {}",
                            lp.layers.len(),
                            base.layers.len()
                        )));
                    }
                    for (q, (own, bl)) in lp.layers.iter().zip(&base.layers).enumerate() {
                        if own.weight.shape() != bl.weight.shape() {
                            return Err(Error::Config(format!(
                                "level {level} layer {q}: branch weight shape {:?} != base {:?}",
                                own.weight.shape(),
                                bl.weight.shape()
                            )));
                        }
                    }
                }
                BranchParams::Scaling(sp) => {
                    if sp.per_layer.len() != base.layers.len() {
                        return Err(Error::Config(format!(
                            "level {level}: {} scale vectors for {} layers",
                            sp.per_layer.len(),
                            base.layers.len()
                        )));
                    }
                    for (q, (sv, bl)) in sp.per_layer.iter().zip(&base.layers).enumerate() {
                        if sv.len() != bl.out_channels() {
                            return Err(Error::Config(format!(
                                "level {level} layer {q}: {} scales for {} filters",
                                sv.len(),
                                bl.out_channels()
                            )));
                        }
                    }
                }
                BranchParams::Frozen => {}
            }
            Ok(())
        };
        match &self.body {
            Body::Single(v) => {
                for (k, b) in v.iter().enumerate() {
                    check_branch(k, b)?;
                }
            }
            Body::Dual(v) => {
                for (k, d) in v.iter().enumerate() {
                    check_branch(k, &d.stable)?;
                    check_branch(k, &d.plastic)?;
                }
            }
        }
        if self.head.embed_dim() != self.base.arch.embed_dim() {
            return Err(Error::Config(format!(
                "head embed dim {} != backbone embed dim {}",
                self.head.embed_dim(),
                self.base.arch.embed_dim()
            )));
        }
        Ok(())
    }

    /// Parameters updated during an incremental phase (branches, head) plus
    /// the aggregation weights when the body is dual.
    pub fn learnable_params_incremental(&self) -> usize {
        let alphas = if self.body.is_dual() { 2 * self.levels() } else { 0 };
        self.body.learnable_count() + self.head.param_count() + alphas
    }

    /// Parameters updated during the initial phase (trunk plus head).
    pub fn learnable_params_initial(&self) -> usize {
        self.base.param_count() + self.head.param_count()
    }

    /// Every parameter the model stores, learnable or frozen.
    pub fn stored_params(&self) -> usize {
        let alphas = if self.body.is_dual() { 2 * self.levels() } else { 0 };
        self.base.param_count() + self.body.learnable_count() + self.head.param_count() + alphas
    }
}

/// Convolution with one learned multiplier per output filter; the biases of
/// the underlying layer pass through unscaled.
pub fn scaled_forward(
    base_layer: &ConvParams,
    phi: &Array1<f64>,
    x: &Array3<f64>,
    level: usize,
    layer: usize,
) -> Result<Array3<f64>> {
    if phi.len() != base_layer.out_channels() {
        return Err(Error::Dimension(format!(
            "level {level}, layer {layer}: {} scale factors for {} output filters",
            phi.len(),
            base_layer.out_channels()
        )));
    }
    check_conv_input(base_layer, x, level, layer)?;
    Ok(conv2d_forward(
        base_layer,
        Some(phi.as_slice().expect("standard layout")),
        x,
    ))
}

fn check_conv_input(layer_p: &ConvParams, x: &Array3<f64>, level: usize, layer: usize) -> Result<()> {
    if x.shape()[0] != layer_p.in_channels() {
        return Err(Error::Dimension(format!(
            "level {level}, layer {layer}: input has {} channels, layer expects {}",
            x.shape()[0],
            layer_p.in_channels()
        )));
    }
    Ok(())
}

/// Output of a branch's residual stack together with the per-layer
/// convolution inputs needed to run the backward pass.
#[derive(Debug, Clone)]
pub struct BranchEval {
    pub out: Array3<f64>,
    /// `conv_inputs[q]` is the post-ReLU input fed to layer `q`.
    pub conv_inputs: Vec<Array3<f64>>,
}

/// Runs one branch's residual stack: pre-activation layers, then the skip
/// connection added at the end.
pub fn branch_forward(
    branch: &BranchParams,
    base_level: &LevelParams,
    x: &Array3<f64>,
    level: usize,
) -> Result<BranchEval> {
    let layer_count = base_level.layers.len();
    let mut conv_inputs = Vec::with_capacity(layer_count);
    let mut h = x.clone();
    for q in 0..layer_count {
        let r = relu(&h);
        let out = match branch {
            BranchParams::All(lp) => {
                let own = &lp.layers[q];
                check_conv_input(own, &r, level, q)?;
                conv2d_forward(own, None, &r)
            }
            BranchParams::Scaling(sp) => {
                scaled_forward(&base_level.layers[q], &sp.per_layer[q], &r, level, q)?
            }
            BranchParams::Frozen => {
                let bl = &base_level.layers[q];
                check_conv_input(bl, &r, level, q)?;
                conv2d_forward(bl, None, &r)
            }
        };
        conv_inputs.push(r);
        h = out;
    }
    Ok(BranchEval {
        out: x + &h,
        conv_inputs,
    })
}

/// Evaluates both branches of a dual level on the same input. Returns
/// `(stable, plastic)` outputs with their traces.
pub fn level_forward(
    dual: &DualLevel,
    base_level: &LevelParams,
    x: &Array3<f64>,
    level: usize,
) -> Result<(BranchEval, BranchEval)> {
    let stable = branch_forward(&dual.stable, base_level, x, level)?;
    let plastic = branch_forward(&dual.plastic, base_level, x, level)?;
    Ok((stable, plastic))
}

/// Weighted sum of the two branch outputs. The caller is responsible for
/// keeping the pair on the feasible segment; training code projects after
/// every aggregation-weight step.
pub fn aggregate(
    stable_out: &Array3<f64>,
    plastic_out: &Array3<f64>,
    alpha: &AlphaPair,
) -> Result<Array3<f64>> {
    if stable_out.shape() != plastic_out.shape() {
        return Err(Error::Dimension(format!(
            "branch outputs disagree in shape: {:?} vs {:?}",
            stable_out.shape(),
            plastic_out.shape()
        )));
    }
    Ok(stable_out * alpha.stable + plastic_out * alpha.plastic)
}

/// Mean over the spatial grid of each channel.
pub fn pooled_embedding(x: &Array3<f64>) -> Array1<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let inv = 1.0 / (h * w) as f64;
    Array1::from_iter((0..c).map(|ch| x.index_axis(ndarray::Axis(0), ch).sum() * inv))
}

/// Per-sample forward record kept around for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Array3<f64>,
    /// Post-ReLU stem output (the input to level 0).
    pub stem_out: Array3<f64>,
    pub levels: Vec<LevelTrace>,
    pub embedding: Array1<f64>,
    pub logits: Array1<f64>,
}

#[derive(Debug, Clone)]
pub enum LevelTrace {
    Single(BranchEval),
    Dual {
        stable: BranchEval,
        plastic: BranchEval,
    },
}

impl Model {
    /// Full forward pass for one image, keeping intermediates.
    pub fn forward_traced(
        &self,
        alphas: &AggregationWeights,
        image: &Array3<f64>,
    ) -> Result<ForwardTrace> {
        let arch = &self.base.arch;
        if image.shape() != [arch.in_channels, arch.image_size, arch.image_size] {
            return Err(Error::Dimension(format!(
                "image shape {:?}, model expects [{}, {}, {}]",
                image.shape(),
                arch.in_channels,
                arch.image_size,
                arch.image_size
            )));
        }
        if self.body.is_dual() && alphas.per_level.len() != self.levels() {
            return Err(Error::Argument(format!(
                "{} aggregation pairs for {} levels",
                alphas.per_level.len(),
                self.levels()
            )));
        }

        let stem_out = relu(&conv2d_forward(&self.base.stem, None, image));
        let mut x = stem_out.clone();
        let mut levels = Vec::with_capacity(self.levels());
        match &self.body {
            Body::Single(branches) => {
                for (k, branch) in branches.iter().enumerate() {
                    let eval = branch_forward(branch, &self.base.levels[k], &x, k)?;
                    x = eval.out.clone();
                    levels.push(LevelTrace::Single(eval));
                }
            }
            Body::Dual(duals) => {
                for (k, dual) in duals.iter().enumerate() {
                    let (stable, plastic) = level_forward(dual, &self.base.levels[k], &x, k)?;
                    x = aggregate(&stable.out, &plastic.out, &alphas.per_level[k])?;
                    levels.push(LevelTrace::Dual { stable, plastic });
                }
            }
        }
        let embedding = pooled_embedding(&x);
        let logits = self.head.logits(&embedding);
        Ok(ForwardTrace {
            input: image.clone(),
            stem_out,
            levels,
            embedding,
            logits,
        })
    }

    /// Logits and embeddings for a batch, row per image.
    pub fn forward_batch(
        &self,
        alphas: &AggregationWeights,
        images: &[&Array3<f64>],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if images.is_empty() {
            return Err(Error::Argument("empty batch".into()));
        }
        let classes = self.head.classes();
        let dim = self.head.embed_dim();
        let mut logits = Array2::zeros((images.len(), classes));
        let mut embeds = Array2::zeros((images.len(), dim));
        for (i, img) in images.iter().enumerate() {
            let trace = self.forward_traced(alphas, img)?;
            logits.row_mut(i).assign(&trace.logits);
            embeds.row_mut(i).assign(&trace.embedding);
        }
        Ok((logits, embeds))
    }

    /// Embedding only (used by exemplar selection).
    pub fn embed(&self, alphas: &AggregationWeights, image: &Array3<f64>) -> Result<Array1<f64>> {
        Ok(self.forward_traced(alphas, image)?.embedding)
    }
}
