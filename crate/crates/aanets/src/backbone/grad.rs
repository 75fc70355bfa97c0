//! Hand-written backward pass: softmax cross-entropy at the top, then the
//! head, the aggregation mix, each branch's residual stack, and (when the
//! trunk is being trained) the base levels and stem.

use ndarray::{Array1, Array2, Array3, Axis};

use super::conv::{conv2d_backward, relu_backward, ConvGrads};
use super::model::{
    AggregationWeights, AlphaPair, Body, BranchEval, BranchParams, LevelParams, LevelTrace, Model,
};
use crate::error::{Error, Result};

/// Gradients for one residual level's convolution stack.
#[derive(Debug, Clone)]
pub struct LevelGrads {
    pub layers: Vec<ConvGrads>,
}

impl LevelGrads {
    fn zeros_like(level: &LevelParams) -> Self {
        Self {
            layers: level.layers.iter().map(ConvGrads::zeros_like).collect(),
        }
    }
}

/// Gradients for whatever parameters one branch owns.
#[derive(Debug, Clone)]
pub enum BranchGrads {
    All(LevelGrads),
    /// One gradient per scale factor, per layer.
    Scaling(Vec<Array1<f64>>),
    Frozen,
}

impl BranchGrads {
    fn zeros_like(branch: &BranchParams) -> Self {
        match branch {
            BranchParams::All(lp) => BranchGrads::All(LevelGrads {
                layers: lp.layers.iter().map(ConvGrads::zeros_like).collect(),
            }),
            BranchParams::Scaling(sp) => {
                BranchGrads::Scaling(sp.per_layer.iter().map(|v| Array1::zeros(v.len())).collect())
            }
            BranchParams::Frozen => BranchGrads::Frozen,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DualGrads {
    pub stable: BranchGrads,
    pub plastic: BranchGrads,
}

#[derive(Debug, Clone)]
pub enum BodyGrads {
    Single(Vec<BranchGrads>),
    Dual(Vec<DualGrads>),
}

/// Mean-loss gradients for everything a training step may touch. The trunk
/// fields are populated only when `train_base` was requested.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub stem: Option<ConvGrads>,
    pub base_levels: Option<Vec<LevelGrads>>,
    pub body: BodyGrads,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
    pub alphas: Vec<AlphaPair>,
}

impl Gradients {
    pub fn zeros_like(model: &Model, train_base: bool) -> Self {
        let body = match &model.body {
            Body::Single(v) => BodyGrads::Single(v.iter().map(BranchGrads::zeros_like).collect()),
            Body::Dual(v) => BodyGrads::Dual(
                v.iter()
                    .map(|d| DualGrads {
                        stable: BranchGrads::zeros_like(&d.stable),
                        plastic: BranchGrads::zeros_like(&d.plastic),
                    })
                    .collect(),
            ),
        };
        let alphas = if model.body.is_dual() {
            vec![
                AlphaPair {
                    stable: 0.0,
                    plastic: 0.0
                };
                model.levels()
            ]
        } else {
            Vec::new()
        };
        Self {
            stem: train_base.then(|| ConvGrads::zeros_like(&model.base.stem)),
            base_levels: train_base
                .then(|| model.base.levels.iter().map(LevelGrads::zeros_like).collect()),
            body,
            head_weight: Array2::zeros(model.head.weight.raw_dim()),
            head_bias: Array1::zeros(model.head.bias.raw_dim()),
            alphas,
        }
    }
}

/// Numerically stable softmax cross-entropy. Returns the loss and the
/// gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Array1<f64>, target: usize) -> (f64, Array1<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exp: Array1<f64> = logits.mapv(|v| (v - max).exp());
    let sum: f64 = exp.sum();
    let loss = sum.ln() + max - logits[target];
    let mut dlogits = exp / sum;
    dlogits[target] -= 1.0;
    (loss, dlogits)
}

/// Where a branch's parameter gradients land.
enum GradSink<'a> {
    Branch(&'a mut BranchGrads),
    /// Frozen branch while the trunk is being trained.
    Base(&'a mut LevelGrads),
    Discard,
}

/// Backward through one branch's residual stack. `dout` is the gradient at
/// the branch output; the return value is the gradient at the level input
/// (skip connection included).
fn branch_backward(
    branch: &BranchParams,
    base_level: &LevelParams,
    eval: &BranchEval,
    dout: &Array3<f64>,
    mut sink: GradSink<'_>,
) -> Array3<f64> {
    let layer_count = base_level.layers.len();
    let mut dcur = dout.clone();
    for q in (0..layer_count).rev() {
        let conv_in = &eval.conv_inputs[q];
        let (params, scale): (_, Option<&[f64]>) = match branch {
            BranchParams::All(lp) => (&lp.layers[q], None),
            BranchParams::Scaling(sp) => (
                &base_level.layers[q],
                Some(sp.per_layer[q].as_slice().expect("standard layout")),
            ),
            BranchParams::Frozen => (&base_level.layers[q], None),
        };
        let (cg, drelu) = conv2d_backward(params, scale, conv_in, &dcur);
        match &mut sink {
            GradSink::Branch(bg) => match (branch, &mut **bg) {
                (BranchParams::All(_), BranchGrads::All(lg)) => {
                    lg.layers[q].weight += &cg.weight;
                    lg.layers[q].bias += &cg.bias;
                }
                (BranchParams::Scaling(_), BranchGrads::Scaling(sg)) => {
                    // d(scale_o) contracts the effective-weight gradient
                    // against the frozen base weights of filter o; the bias
                    // stays frozen.
                    let base_w = &base_level.layers[q].weight;
                    for o in 0..base_w.shape()[0] {
                        let prod = (&cg.weight.index_axis(Axis(0), o)
                            * &base_w.index_axis(Axis(0), o))
                            .sum();
                        sg[q][o] += prod;
                    }
                }
                (BranchParams::Frozen, BranchGrads::Frozen) => {}
                _ => unreachable!("gradient mirror out of sync with branch params"),
            },
            GradSink::Base(lg) => {
                debug_assert!(matches!(branch, BranchParams::Frozen));
                lg.layers[q].weight += &cg.weight;
                lg.layers[q].bias += &cg.bias;
            }
            GradSink::Discard => {}
        }
        dcur = relu_backward(conv_in, &drelu);
    }
    dout + &dcur
}

/// Mean softmax cross-entropy over the batch plus gradients for every
/// learnable group. `targets[i]` is a head row index.
pub fn backward_batch(
    model: &Model,
    alphas: &AggregationWeights,
    images: &[&Array3<f64>],
    targets: &[usize],
    train_base: bool,
) -> Result<(f64, Gradients)> {
    if images.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    if images.len() != targets.len() {
        return Err(Error::Argument(format!(
            "{} images but {} targets",
            images.len(),
            targets.len()
        )));
    }
    let classes = model.head.classes();
    if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
        return Err(Error::Data(format!(
            "target row {bad} out of range for {classes}-class head"
        )));
    }

    let mut grads = Gradients::zeros_like(model, train_base);
    let scale = 1.0 / images.len() as f64;
    let mut total_loss = 0.0;
    let side = model.base.arch.image_size;
    let spatial_inv = 1.0 / (side * side) as f64;

    for (img, &target) in images.iter().zip(targets) {
        let trace = model.forward_traced(alphas, img)?;
        let (loss, mut dlogits) = softmax_cross_entropy(&trace.logits, target);
        total_loss += loss * scale;
        dlogits *= scale;

        // Head: logits = W e + b.
        for c in 0..classes {
            let d = dlogits[c];
            grads.head_bias[c] += d;
            for (gw, &e) in grads
                .head_weight
                .row_mut(c)
                .iter_mut()
                .zip(trace.embedding.iter())
            {
                *gw += d * e;
            }
        }
        let dembed = model.head.weight.t().dot(&dlogits);

        // Pooling: each channel's embedding is the spatial mean.
        let filters = dembed.len();
        let mut dx = Array3::zeros((filters, side, side));
        for c in 0..filters {
            dx.index_axis_mut(Axis(0), c).fill(dembed[c] * spatial_inv);
        }

        for k in (0..model.levels()).rev() {
            let base_level = &model.base.levels[k];
            dx = match (&model.body, &trace.levels[k]) {
                (Body::Single(branches), LevelTrace::Single(eval)) => {
                    let branch = &branches[k];
                    let sink = sink_for(branch, &mut grads, k, SinkSide::Single);
                    branch_backward(branch, base_level, eval, &dx, sink)
                }
                (Body::Dual(duals), LevelTrace::Dual { stable, plastic }) => {
                    let pair = &alphas.per_level[k];
                    grads.alphas[k].stable += (&dx * &stable.out).sum();
                    grads.alphas[k].plastic += (&dx * &plastic.out).sum();
                    let dout_s = &dx * pair.stable;
                    let dout_p = &dx * pair.plastic;
                    let din_s = {
                        let sink = sink_for(&duals[k].stable, &mut grads, k, SinkSide::Stable);
                        branch_backward(&duals[k].stable, base_level, stable, &dout_s, sink)
                    };
                    let din_p = {
                        let sink = sink_for(&duals[k].plastic, &mut grads, k, SinkSide::Plastic);
                        branch_backward(&duals[k].plastic, base_level, plastic, &dout_p, sink)
                    };
                    din_s + &din_p
                }
                _ => unreachable!("trace kind out of sync with body"),
            };
        }

        if train_base {
            let dpre = relu_backward(&trace.stem_out, &dx);
            let (cg, _) = conv2d_backward(&model.base.stem, None, &trace.input, &dpre);
            let sg = grads.stem.as_mut().expect("train_base allocates stem grads");
            sg.weight += &cg.weight;
            sg.bias += &cg.bias;
        }
    }

    Ok((total_loss, grads))
}

enum SinkSide {
    Single,
    Stable,
    Plastic,
}

/// Picks the gradient destination for a branch at level `k`. Frozen branches
/// feed the base levels while the trunk is being trained, otherwise nothing.
fn sink_for<'a>(
    branch: &BranchParams,
    grads: &'a mut Gradients,
    k: usize,
    side: SinkSide,
) -> GradSink<'a> {
    if matches!(branch, BranchParams::Frozen) {
        return match grads.base_levels.as_mut() {
            Some(base) => GradSink::Base(&mut base[k]),
            None => GradSink::Discard,
        };
    }
    match (&mut grads.body, side) {
        (BodyGrads::Single(v), SinkSide::Single) => GradSink::Branch(&mut v[k]),
        (BodyGrads::Dual(v), SinkSide::Stable) => GradSink::Branch(&mut v[k].stable),
        (BodyGrads::Dual(v), SinkSide::Plastic) => GradSink::Branch(&mut v[k].plastic),
        _ => unreachable!("gradient mirror out of sync with body"),
    }
}
