//! Central-difference verification of the analytic gradients, grouped by
//! parameter family so each optimization level can be audited on its own.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{
    backward_batch, softmax_cross_entropy, AggregationWeights, AlphaPair, ArchConfig,
    BaseBackbone, Body, BodyGrads, BranchGrads, BranchKind, BranchParams, ClassifierHead,
    DualLevel, Gradients, Model,
};
use crate::error::{Error, Result};

/// Which parameter family to audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// Aggregation weights, both components of every level pair.
    Alpha,
    /// Per-filter scale factors of every scaling branch.
    Phi,
    /// Convolution weights and biases of every fully-owned branch.
    Eta,
}

impl std::str::FromStr for ParamGroup {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "alpha" => Ok(ParamGroup::Alpha),
            "phi" => Ok(ParamGroup::Phi),
            "eta" => Ok(ParamGroup::Eta),
            other => Err(Error::Argument(format!(
                "unknown parameter group '{other}' (expected alpha, phi, or eta)"
            ))),
        }
    }
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ParamGroup::Alpha => write!(f, "alpha"),
            ParamGroup::Phi => write!(f, "phi"),
            ParamGroup::Eta => write!(f, "eta"),
        }
    }
}

/// Central-difference estimate of `df/dx` at `x`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, eps: f64) -> f64 {
    (f(x + eps) - f(x - eps)) / (2.0 * eps)
}

/// `|a - n|` scaled by the larger magnitude; absolute when both are tiny.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let abs = (analytic - numeric).abs();
    let scale = analytic.abs().max(numeric.abs());
    if scale > 1e-10 {
        abs / scale
    } else {
        abs
    }
}

/// Mean softmax cross-entropy of the batch at fixed parameters.
pub fn mean_loss(
    model: &Model,
    alphas: &AggregationWeights,
    images: &[&Array3<f64>],
    targets: &[usize],
) -> Result<f64> {
    if images.is_empty() || images.len() != targets.len() {
        return Err(Error::Argument("batch and targets must align".into()));
    }
    let mut total = 0.0;
    for (img, &t) in images.iter().zip(targets) {
        let trace = model.forward_traced(alphas, img)?;
        total += softmax_cross_entropy(&trace.logits, t).0;
    }
    Ok(total / images.len() as f64)
}

#[derive(Debug, Clone, Copy)]
enum Side {
    Single,
    Stable,
    Plastic,
}

/// Address of one scalar in the checked family.
#[derive(Debug, Clone, Copy)]
enum Coord {
    AlphaStable(usize),
    AlphaPlastic(usize),
    Phi {
        level: usize,
        side: Side,
        layer: usize,
        filter: usize,
    },
    EtaWeight {
        level: usize,
        side: Side,
        layer: usize,
        flat: usize,
    },
    EtaBias {
        level: usize,
        side: Side,
        layer: usize,
        idx: usize,
    },
}

fn branch_at(body: &Body, level: usize, side: Side) -> &BranchParams {
    match (body, side) {
        (Body::Single(v), Side::Single) => &v[level],
        (Body::Dual(v), Side::Stable) => &v[level].stable,
        (Body::Dual(v), Side::Plastic) => &v[level].plastic,
        _ => unreachable!("coordinate side out of sync with body"),
    }
}

fn branch_at_mut(body: &mut Body, level: usize, side: Side) -> &mut BranchParams {
    match (body, side) {
        (Body::Single(v), Side::Single) => &mut v[level],
        (Body::Dual(v), Side::Stable) => &mut v[level].stable,
        (Body::Dual(v), Side::Plastic) => &mut v[level].plastic,
        _ => unreachable!("coordinate side out of sync with body"),
    }
}

fn grads_at(grads: &Gradients, level: usize, side: Side) -> &BranchGrads {
    match (&grads.body, side) {
        (BodyGrads::Single(v), Side::Single) => &v[level],
        (BodyGrads::Dual(v), Side::Stable) => &v[level].stable,
        (BodyGrads::Dual(v), Side::Plastic) => &v[level].plastic,
        _ => unreachable!("coordinate side out of sync with gradients"),
    }
}

fn sides_of(body: &Body) -> &'static [Side] {
    match body {
        Body::Single(_) => &[Side::Single],
        Body::Dual(_) => &[Side::Stable, Side::Plastic],
    }
}

fn enumerate_coords(model: &Model, alphas: &AggregationWeights, group: ParamGroup) -> Vec<Coord> {
    let mut coords = Vec::new();
    match group {
        ParamGroup::Alpha => {
            for k in 0..alphas.per_level.len() {
                coords.push(Coord::AlphaStable(k));
                coords.push(Coord::AlphaPlastic(k));
            }
        }
        ParamGroup::Phi => {
            for level in 0..model.levels() {
                for &side in sides_of(&model.body) {
                    if let BranchParams::Scaling(sp) = branch_at(&model.body, level, side) {
                        for (layer, scales) in sp.per_layer.iter().enumerate() {
                            for filter in 0..scales.len() {
                                coords.push(Coord::Phi {
                                    level,
                                    side,
                                    layer,
                                    filter,
                                });
                            }
                        }
                    }
                }
            }
        }
        ParamGroup::Eta => {
            for level in 0..model.levels() {
                for &side in sides_of(&model.body) {
                    if let BranchParams::All(lp) = branch_at(&model.body, level, side) {
                        for (layer, conv) in lp.layers.iter().enumerate() {
                            for flat in 0..conv.weight.len() {
                                coords.push(Coord::EtaWeight {
                                    level,
                                    side,
                                    layer,
                                    flat,
                                });
                            }
                            for idx in 0..conv.bias.len() {
                                coords.push(Coord::EtaBias {
                                    level,
                                    side,
                                    layer,
                                    idx,
                                });
                            }
                        }
                    }
                }
            }
        }
    }
    coords
}

fn value_at(model: &Model, alphas: &AggregationWeights, c: Coord) -> f64 {
    match c {
        Coord::AlphaStable(k) => alphas.per_level[k].stable,
        Coord::AlphaPlastic(k) => alphas.per_level[k].plastic,
        Coord::Phi {
            level,
            side,
            layer,
            filter,
        } => match branch_at(&model.body, level, side) {
            BranchParams::Scaling(sp) => sp.per_layer[layer][filter],
            _ => unreachable!(),
        },
        Coord::EtaWeight {
            level,
            side,
            layer,
            flat,
        } => match branch_at(&model.body, level, side) {
            BranchParams::All(lp) => lp.layers[layer].weight.as_slice().expect("layout")[flat],
            _ => unreachable!(),
        },
        Coord::EtaBias {
            level,
            side,
            layer,
            idx,
        } => match branch_at(&model.body, level, side) {
            BranchParams::All(lp) => lp.layers[layer].bias[idx],
            _ => unreachable!(),
        },
    }
}

fn set_at(model: &mut Model, alphas: &mut AggregationWeights, c: Coord, v: f64) {
    match c {
        Coord::AlphaStable(k) => alphas.per_level[k].stable = v,
        Coord::AlphaPlastic(k) => alphas.per_level[k].plastic = v,
        Coord::Phi {
            level,
            side,
            layer,
            filter,
        } => match branch_at_mut(&mut model.body, level, side) {
            BranchParams::Scaling(sp) => sp.per_layer[layer][filter] = v,
            _ => unreachable!(),
        },
        Coord::EtaWeight {
            level,
            side,
            layer,
            flat,
        } => match branch_at_mut(&mut model.body, level, side) {
            BranchParams::All(lp) => {
                lp.layers[layer].weight.as_slice_mut().expect("layout")[flat] = v
            }
            _ => unreachable!(),
        },
        Coord::EtaBias {
            level,
            side,
            layer,
            idx,
        } => match branch_at_mut(&mut model.body, level, side) {
            BranchParams::All(lp) => lp.layers[layer].bias[idx] = v,
            _ => unreachable!(),
        },
    }
}

fn analytic_at(grads: &Gradients, c: Coord) -> f64 {
    match c {
        Coord::AlphaStable(k) => grads.alphas[k].stable,
        Coord::AlphaPlastic(k) => grads.alphas[k].plastic,
        Coord::Phi {
            level,
            side,
            layer,
            filter,
        } => match grads_at(grads, level, side) {
            BranchGrads::Scaling(sg) => sg[layer][filter],
            _ => unreachable!(),
        },
        Coord::EtaWeight {
            level,
            side,
            layer,
            flat,
        } => match grads_at(grads, level, side) {
            BranchGrads::All(lg) => lg.layers[layer].weight.as_slice().expect("layout")[flat],
            _ => unreachable!(),
        },
        Coord::EtaBias {
            level,
            side,
            layer,
            idx,
        } => match grads_at(grads, level, side) {
            BranchGrads::All(lg) => lg.layers[layer].bias[idx],
            _ => unreachable!(),
        },
    }
}

/// Compares the analytic gradient of every scalar in `group` against a
/// central finite difference of the batch loss and returns the maximum
/// relative error. Meant for tiny models (at most 10k stored scalars).
pub fn grad_check(
    model: &Model,
    alphas: &AggregationWeights,
    images: &[&Array3<f64>],
    targets: &[usize],
    group: ParamGroup,
    eps: f64,
) -> Result<f64> {
    if !(eps > 1e-8 && eps < 1e-2) {
        return Err(Error::Argument(format!(
            "eps {eps} outside the supported range (1e-8, 1e-2)"
        )));
    }
    if model.stored_params() > 10_000 {
        return Err(Error::Argument(format!(
            "model has {} stored scalars; gradient checking is for tiny models (<= 10000)",
            model.stored_params()
        )));
    }
    let coords = enumerate_coords(model, alphas, group);
    if coords.is_empty() {
        return Err(Error::Argument(format!(
            "model has no parameters in group {group}"
        )));
    }

    let (_, grads) = backward_batch(model, alphas, images, targets, false)?;
    let mut max_rel = 0.0f64;
    for &c in &coords {
        let base = value_at(model, alphas, c);
        let numeric = central_diff(
            |v| {
                let mut m = model.clone();
                let mut a = alphas.clone();
                set_at(&mut m, &mut a, c, v);
                mean_loss(&m, &a, images, targets).expect("perturbed loss")
            },
            base,
            eps,
        );
        let analytic = analytic_at(&grads, c);
        max_rel = max_rel.max(relative_error(analytic, numeric));
    }
    Ok(max_rel)
}

/// Builds a small fixture with every parameter family active: a 2-level
/// dual-branch model whose scaling factors are off-unit, whose plastic
/// branch is perturbed away from the base, whose classifier head is
/// non-zero (a zero head would let every trunk gradient vanish), plus
/// off-center aggregation weights and a 4-image batch.
pub fn audit_fixture(
    seed: u64,
) -> Result<(Model, AggregationWeights, Vec<Array3<f64>>, Vec<usize>)> {
    let arch = ArchConfig {
        image_size: 4,
        in_channels: 2,
        levels: 2,
        filters: 3,
        kernel_size: 3,
        layers_per_level: 1,
    };
    let base = BaseBackbone::init(&arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(22));
    let duals = (0..arch.levels)
        .map(|k| {
            let mut stable = BranchParams::init(BranchKind::Scaling, &base.levels[k], arch.filters);
            if let BranchParams::Scaling(sp) = &mut stable {
                for v in &mut sp.per_layer {
                    v.mapv_inplace(|_| 0.7 + 0.6 * rng.random::<f64>());
                }
            }
            let mut plastic = BranchParams::init(BranchKind::All, &base.levels[k], arch.filters);
            if let BranchParams::All(lp) = &mut plastic {
                for layer in &mut lp.layers {
                    layer
                        .weight
                        .mapv_inplace(|w| w + 0.1 * (rng.random::<f64>() - 0.5));
                }
            }
            DualLevel { stable, plastic }
        })
        .collect();
    let mut head = ClassifierHead::zeros(3, arch.embed_dim());
    head.weight.mapv_inplace(|_| rng.random::<f64>() - 0.5);
    let model = Model {
        base,
        body: Body::Dual(duals),
        head,
    };
    let alphas = AggregationWeights {
        per_level: vec![
            AlphaPair {
                stable: 0.55,
                plastic: 0.45,
            };
            2
        ],
    };
    let images: Vec<Array3<f64>> = (0..4)
        .map(|_| Array3::from_shape_fn((2, 4, 4), |_| rng.random::<f64>()))
        .collect();
    let targets = vec![0, 1, 2, 1];
    Ok((model, alphas, images, targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_is_exact_on_quadratics() {
        let f = |x: f64| 3.0 * x * x + 2.0 * x - 1.0;
        let d = central_diff(f, 2.0, 1e-4);
        assert!(relative_error(14.0, d) <= 1e-8, "got {d}");
    }

    #[test]
    fn relative_error_handles_tiny_pairs() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-12, -1e-12) < 1e-11);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }

    fn toy() -> (Model, AggregationWeights, Vec<Array3<f64>>, Vec<usize>) {
        audit_fixture(12).unwrap()
    }

    #[test]
    fn toy_net_alpha_group_within_tolerance() {
        let (model, alphas, images, targets) = toy();
        let refs: Vec<&Array3<f64>> = images.iter().collect();
        let err = grad_check(&model, &alphas, &refs, &targets, ParamGroup::Alpha, 1e-5).unwrap();
        assert!(err <= 1e-4, "alpha max rel err {err}");
    }

    #[test]
    fn toy_net_phi_group_within_tolerance() {
        let (model, alphas, images, targets) = toy();
        let refs: Vec<&Array3<f64>> = images.iter().collect();
        let err = grad_check(&model, &alphas, &refs, &targets, ParamGroup::Phi, 1e-5).unwrap();
        assert!(err <= 1e-4, "phi max rel err {err}");
    }

    #[test]
    fn toy_net_eta_group_within_tolerance() {
        let (model, alphas, images, targets) = toy();
        let refs: Vec<&Array3<f64>> = images.iter().collect();
        let err = grad_check(&model, &alphas, &refs, &targets, ParamGroup::Eta, 1e-5).unwrap();
        assert!(err <= 1e-4, "eta max rel err {err}");
    }

    #[test]
    fn grad_check_rejects_out_of_range_eps() {
        let (model, alphas, images, targets) = toy();
        let refs: Vec<&Array3<f64>> = images.iter().collect();
        for bad in [1e-9, 1e-8, 1e-2, 0.5, 0.0, -1e-5] {
            assert!(
                grad_check(&model, &alphas, &refs, &targets, ParamGroup::Alpha, bad).is_err(),
                "eps {bad} should be rejected"
            );
        }
    }

    #[test]
    fn grad_check_rejects_oversized_models() {
        let arch = ArchConfig {
            image_size: 8,
            in_channels: 3,
            levels: 3,
            filters: 16,
            kernel_size: 3,
            layers_per_level: 2,
        };
        let model = Model::initial(&arch, 10, 0).unwrap();
        assert!(model.stored_params() > 10_000);
        let img = Array3::zeros((3, 8, 8));
        let err = grad_check(
            &model,
            &AggregationWeights::none(),
            &[&img],
            &[0],
            ParamGroup::Eta,
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("tiny models"));
    }

    #[test]
    fn grad_check_reports_missing_group() {
        // A frozen/scaling body owns no fully-copied branch, so Eta is empty.
        let arch = ArchConfig {
            image_size: 4,
            in_channels: 1,
            levels: 1,
            filters: 2,
            kernel_size: 3,
            layers_per_level: 1,
        };
        let base = BaseBackbone::init(&arch, 5).unwrap();
        let body = crate::backbone::Body::Dual(vec![DualLevel {
            stable: BranchParams::Frozen,
            plastic: BranchParams::init(BranchKind::Scaling, &base.levels[0], arch.filters),
        }]);
        let model = Model {
            base,
            body,
            head: ClassifierHead::zeros(2, arch.embed_dim()),
        };
        let img = Array3::zeros((1, 4, 4));
        let err = grad_check(
            &model,
            &AggregationWeights::even(1),
            &[&img],
            &[0],
            ParamGroup::Eta,
            1e-5,
        )
        .unwrap_err();
        assert!(err.to_string().contains("no parameters"));
    }
}
