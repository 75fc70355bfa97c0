//! Acceptance gate: ten end-to-end checks, one per release criterion, each
//! printing a single PASS or FAIL line with its measured numbers. Tolerances
//! are pinned here and nowhere else.

use std::time::Instant;

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use aanets::backbone::{
    aggregate, branch_forward, AggregationWeights, AlphaPair, ArchConfig, BaseBackbone, Body,
    BranchKind, BranchParams, ClassifierHead, DualLevel, Model, ModelVariant, ScaleParams,
};
use aanets::data::cifar::{read_cifar_file, write_cifar_file};
use aanets::data::{gen_synthetic, SyntheticSpec};
use aanets::experiment::{self, outputs, DatasetSpec, ExperimentConfig};
use aanets::memory::{herding_select, strict_quota, BudgetLedger, Origin, Sample, SelectionMethod};
use aanets::protocol::{
    aggregate_runs, run_protocol, update_base_variant, ProtocolConfig, RunSpec, RunSummary,
    SplitMode,
};
use aanets::trainer::gradcheck::{audit_fixture, grad_check, ParamGroup};
use aanets::trainer::{
    init_phase, initial_state, lower_step, upper_step, LrDrop, PhaseState, TrainerConfig,
};

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("criterion {id:02} {name}: {word} [{detail}]");
    assert!(pass, "criterion {id:02} {name}: FAIL [{detail}]");
}

fn max_abs_diff(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Dual-branch model with distinct branches plus its stable-only twin.
fn dual_and_stable_twin(seed: u64) -> (Model, Model, AggregationWeights) {
    let (model, alphas, _, _) = audit_fixture(seed).unwrap();
    let Body::Dual(duals) = &model.body else {
        unreachable!("fixture is dual-branch")
    };
    let twin = Model {
        base: model.base.clone(),
        body: Body::Single(duals.iter().map(|d| d.stable.clone()).collect()),
        head: model.head.clone(),
    };
    (model.clone(), twin, alphas)
}

fn random_images(rng: &mut ChaCha8Rng, n: usize, dims: (usize, usize, usize)) -> Vec<Array3<f64>> {
    (0..n)
        .map(|_| Array3::from_shape_fn(dims, |_| rng.random::<f64>()))
        .collect()
}

#[test]
fn criterion_01_aggregation_identities() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(71);

    // All weight on the stable branch reproduces the stable-only network
    // exactly: zero tolerance.
    let (dual, twin, _) = dual_and_stable_twin(12);
    let stable_only = AggregationWeights {
        per_level: vec![
            AlphaPair {
                stable: 1.0,
                plastic: 0.0,
            };
            dual.levels()
        ],
    };
    let images = random_images(&mut rng, 20, (2, 4, 4));
    let refs: Vec<&Array3<f64>> = images.iter().collect();
    let (dual_logits, _) = dual.forward_batch(&stable_only, &refs).unwrap();
    let (twin_logits, _) = twin
        .forward_batch(&AggregationWeights::none(), &refs)
        .unwrap();
    let exact = dual_logits
        .iter()
        .zip(twin_logits.iter())
        .all(|(a, b)| a == b);

    // Equal branches collapse the mixture: the output cannot depend on
    // the weights. A fresh full copy starts at the base, so pairing it
    // with a frozen branch makes both branches identical.
    let arch = ArchConfig {
        image_size: 4,
        in_channels: 2,
        levels: 2,
        filters: 3,
        kernel_size: 3,
        layers_per_level: 1,
    };
    let base = BaseBackbone::init(&arch, 9).unwrap();
    let duals: Vec<DualLevel> = base
        .levels
        .iter()
        .map(|lvl| DualLevel {
            stable: BranchParams::Frozen,
            plastic: BranchParams::init(BranchKind::All, lvl, arch.filters),
        })
        .collect();
    let mut head = ClassifierHead::zeros(3, arch.embed_dim());
    head.weight.mapv_inplace(|_| rng.random::<f64>() - 0.5);
    let collapse = Model {
        base,
        body: Body::Dual(duals),
        head,
    };
    let settings = [(1.0, 0.0), (0.0, 1.0), (0.5, 0.5), (0.313, 0.687)];
    let batch = random_images(&mut rng, 10, (2, 4, 4));
    let brefs: Vec<&Array3<f64>> = batch.iter().collect();
    let outputs: Vec<_> = settings
        .iter()
        .map(|&(s, p)| {
            let a = AggregationWeights {
                per_level: vec![AlphaPair { stable: s, plastic: p }; 2],
            };
            collapse.forward_batch(&a, &brefs).unwrap().0
        })
        .collect();
    let mut collapse_dev = 0.0f64;
    for other in &outputs[1..] {
        for (x, y) in outputs[0].iter().zip(other.iter()) {
            collapse_dev = collapse_dev.max((x - y).abs());
        }
    }

    // Aggregation is linear in both branch outputs.
    let dims = (3, 4, 4);
    let alpha = AlphaPair {
        stable: 0.3,
        plastic: 0.7,
    };
    let mk = |rng: &mut ChaCha8Rng| Array3::from_shape_fn(dims, |_| rng.random::<f64>() - 0.5);
    let (s1, s2, p1, p2) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
    let joint = aggregate(&(&s1 + &s2), &(&p1 + &p2), &alpha).unwrap();
    let split = &aggregate(&s1, &p1, &alpha).unwrap() + &aggregate(&s2, &p2, &alpha).unwrap();
    let scaled = aggregate(&(&s1 * 2.5), &(&p1 * 2.5), &alpha).unwrap();
    let rescaled = &aggregate(&s1, &p1, &alpha).unwrap() * 2.5;
    let linear_dev = max_abs_diff(&joint, &split).max(max_abs_diff(&scaled, &rescaled));

    let pass = exact && collapse_dev <= 1e-6 && linear_dev <= 1e-6;
    verdict(
        1,
        "aggregation identities",
        pass,
        &format!(
            "stable reproduction exact: {exact}, collapse dev {collapse_dev:.2e} <= 1e-6, \
             linearity dev {linear_dev:.2e} <= 1e-6, {:.2?}",
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_02_unit_scales_match_frozen() {
    let start = Instant::now();
    let arch = ArchConfig {
        image_size: 6,
        in_channels: 2,
        levels: 2,
        filters: 4,
        kernel_size: 3,
        layers_per_level: 2,
    };
    let base = BaseBackbone::init(&arch, 17).unwrap();
    let ones = BranchParams::Scaling(ScaleParams::ones(arch.layers_per_level, arch.filters));
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let level = trial % arch.levels;
        let x = Array3::from_shape_fn((arch.filters, 6, 6), |_| rng.random::<f64>() - 0.2);
        let scaled = branch_forward(&ones, &base.levels[level], &x, level).unwrap();
        let frozen = branch_forward(&BranchParams::Frozen, &base.levels[level], &x, level).unwrap();
        worst = worst.max(max_abs_diff(&scaled.out, &frozen.out));
    }
    verdict(
        2,
        "unit scales equal frozen branch",
        worst <= 1e-6,
        &format!(
            "max dev {worst:.2e} <= 1e-6 over 100 random inputs, {:.2?}",
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_03_gradients_match_finite_differences() {
    let start = Instant::now();
    let (model, alphas, images, targets) = audit_fixture(12).unwrap();
    let refs: Vec<&Array3<f64>> = images.iter().collect();
    let errs: Vec<(ParamGroup, f64)> = [ParamGroup::Alpha, ParamGroup::Phi, ParamGroup::Eta]
        .into_iter()
        .map(|g| {
            let e = grad_check(&model, &alphas, &refs, &targets, g, 1e-5).unwrap();
            (g, e)
        })
        .collect();
    let pass = errs.iter().all(|&(_, e)| e <= 1e-4);
    let detail = errs
        .iter()
        .map(|(g, e)| format!("{g} {e:.2e}"))
        .collect::<Vec<_>>()
        .join(", ");
    verdict(
        3,
        "gradient check",
        pass,
        &format!(
            "max relative errors <= 1e-4 at eps 1e-5: {detail}, {} stored scalars, {:.2?}",
            model.stored_params(),
            start.elapsed()
        ),
    );
}

fn trunk_bits(base: &BaseBackbone) -> Vec<u64> {
    let mut bits = Vec::new();
    let mut push_conv = |w: &ndarray::Array4<f64>, b: &Array1<f64>| {
        bits.extend(w.iter().map(|v| v.to_bits()));
        bits.extend(b.iter().map(|v| v.to_bits()));
    };
    push_conv(&base.stem.weight, &base.stem.bias);
    for lvl in &base.levels {
        for layer in &lvl.layers {
            push_conv(&layer.weight, &layer.bias);
        }
    }
    bits
}

fn alpha_bits(alphas: &AggregationWeights) -> Vec<u64> {
    alphas
        .per_level
        .iter()
        .flat_map(|p| [p.stable.to_bits(), p.plastic.to_bits()])
        .collect()
}

#[test]
fn criterion_04_step_invariants_over_randomized_training() {
    let start = Instant::now();
    let arch = ArchConfig {
        image_size: 6,
        in_channels: 2,
        levels: 2,
        filters: 4,
        kernel_size: 3,
        layers_per_level: 1,
    };
    let ds = gen_synthetic(&SyntheticSpec {
        num_classes: 4,
        samples_per_class: 6,
        test_per_class: 2,
        image_size: 6,
        channels: 2,
        separation: 0.8,
        noise: 0.05,
        seed: 33,
    })
    .unwrap();
    let state0 = initial_state(&arch, &[0, 1], 9).unwrap();
    let kinds = vec![ModelVariant::parse("all+frozen").unwrap(); arch.levels];
    let mut state: PhaseState = init_phase(&state0, &kinds, &[2, 3], 10).unwrap();

    let sample = |class: u32, idx: usize, origin: Origin| Sample {
        image: ds.train_of(class).unwrap()[idx].clone(),
        label: class,
        origin,
    };
    let mut lower_pool = Vec::new();
    for class in [2u32, 3] {
        for i in 0..6 {
            lower_pool.push(sample(class, i, Origin::Fresh));
        }
    }
    for class in [0u32, 1] {
        for i in 0..2 {
            lower_pool.push(sample(class, i, Origin::Exemplar));
        }
    }
    let upper_pool: Vec<Sample> = (0..4u32)
        .flat_map(|class| (0..2).map(move |i| (class, i)))
        .map(|(class, i)| sample(class, i, Origin::Exemplar))
        .collect();

    let base_before = trunk_bits(&state.model.base);
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut lower_count = 0usize;
    let mut upper_count = 0usize;
    let mut worst_sum_dev = 0.0f64;
    for _ in 0..1000 {
        let lr = 0.001 + 0.019 * rng.random::<f64>();
        if rng.random::<f64>() < 0.5 {
            let batch: Vec<&Sample> = (0..4)
                .map(|_| &lower_pool[rng.random_range(0..lower_pool.len())])
                .collect();
            let alphas_before = alpha_bits(&state.alphas);
            lower_step(&mut state, &batch, lr, 0.9).unwrap();
            assert_eq!(
                alpha_bits(&state.alphas),
                alphas_before,
                "lower step moved the aggregation weights"
            );
            lower_count += 1;
        } else {
            let batch: Vec<&Sample> = (0..4)
                .map(|_| &upper_pool[rng.random_range(0..upper_pool.len())])
                .collect();
            upper_step(&mut state, &batch, lr).unwrap();
            upper_count += 1;
        }
        for pair in &state.alphas.per_level {
            worst_sum_dev = worst_sum_dev.max((pair.stable + pair.plastic - 1.0).abs());
            assert!(
                (0.0..=1.0).contains(&pair.stable) && (0.0..=1.0).contains(&pair.plastic),
                "aggregation pair ({}, {}) left the unit square",
                pair.stable,
                pair.plastic
            );
        }
        assert_eq!(
            trunk_bits(&state.model.base),
            base_before,
            "trunk parameters moved"
        );
    }
    let frozen_intact = matches!(&state.model.body, Body::Dual(duals)
        if duals.iter().all(|d| matches!(d.stable, BranchParams::Frozen)));

    verdict(
        4,
        "step invariants",
        worst_sum_dev <= 1e-9 && frozen_intact,
        &format!(
            "{lower_count} lower + {upper_count} upper steps, max |sum - 1| {worst_sum_dev:.2e} \
             <= 1e-9, trunk and frozen branches bit-identical, {:.2?}",
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_05_strict_memory_arithmetic() {
    let start = Instant::now();
    let cases = [
        (530_000usize, 32 * 32 * 3, 100usize, 13usize),
        (12_600_000, 224 * 224 * 3, 100, 16),
        (12_600_000, 224 * 224 * 3, 1000, 19),
    ];
    let mut got = Vec::new();
    let mut pass = true;
    for &(extra, image_bytes, classes, want) in &cases {
        let quota = strict_quota(&BudgetLedger {
            bytes_per_float: 4,
            image_bytes,
            extra_params: extra,
            num_classes: classes,
            baseline_quota: 20,
        })
        .unwrap();
        pass &= quota == want;
        got.push(quota.to_string());
    }
    verdict(
        5,
        "strict memory arithmetic",
        pass,
        &format!(
            "quotas [{}] == [13, 16, 19] exactly, {:.2?}",
            got.join(", "),
            start.elapsed()
        ),
    );
}

/// Brute-force greedy mean matching: at each step try every remaining
/// candidate and keep the first one whose inclusion minimizes the distance
/// to the class mean.
fn greedy_oracle(embeddings: &[Array1<f64>], quota: usize) -> Vec<usize> {
    let n = embeddings.len();
    let dim = embeddings[0].len();
    let mut mean = Array1::<f64>::zeros(dim);
    for e in embeddings {
        mean = mean + e;
    }
    let mean = mean / n as f64;
    let mut chosen: Vec<usize> = Vec::new();
    let mut sum = Array1::<f64>::zeros(dim);
    for t in 1..=quota {
        let mut best: Option<(usize, f64)> = None;
        for (j, e) in embeddings.iter().enumerate() {
            if chosen.contains(&j) {
                continue;
            }
            let avg = (&sum + e) / t as f64;
            let diff = &mean - &avg;
            let d = diff.dot(&diff);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        let (j, _) = best.unwrap();
        chosen.push(j);
        sum = sum + &embeddings[j];
    }
    chosen
}

#[test]
fn criterion_06_herding_matches_exhaustive_greedy() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(206);
    let mut prefix_checks = 0usize;
    for trial in 0..200 {
        let n = rng.random_range(2..=8);
        let dim = rng.random_range(1..=4);
        let embeddings: Vec<Array1<f64>> = (0..n)
            .map(|_| Array1::from_shape_fn(dim, |_| 2.0 * rng.random::<f64>() - 1.0))
            .collect();
        let quota = rng.random_range(1..=n.min(4));
        let got = herding_select(&embeddings, quota).unwrap();
        let want = greedy_oracle(&embeddings, quota);
        assert_eq!(got, want, "trial {trial}: herding diverged from the oracle");

        // Prefix property: a smaller quota is a prefix of a larger one.
        let full = herding_select(&embeddings, n).unwrap();
        for q in 1..=n {
            assert_eq!(
                herding_select(&embeddings, q).unwrap(),
                full[..q],
                "trial {trial}: quota {q} is not a prefix"
            );
            prefix_checks += 1;
        }
    }
    verdict(
        6,
        "herding equals exhaustive greedy",
        true,
        &format!(
            "200 trials (<= 8 candidates, quota <= 4) plus {prefix_checks} prefix checks, {:.2?}",
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_07_dual_branch_beats_the_single_branch_baseline() {
    let start = Instant::now();
    let arch = ArchConfig {
        image_size: 8,
        in_channels: 2,
        levels: 3,
        filters: 8,
        kernel_size: 3,
        layers_per_level: 1,
    };
    let data = gen_synthetic(&SyntheticSpec {
        num_classes: 10,
        samples_per_class: 40,
        test_per_class: 20,
        image_size: 8,
        channels: 2,
        separation: 0.6,
        noise: 0.35,
        seed: 97,
    })
    .unwrap();
    let protocol = ProtocolConfig {
        total_classes: 10,
        n_phases: 5,
        split_mode: SplitMode::HalfThenEven,
        runs: 1,
        per_class_quota: 1,
        strict_memory: false,
        update_base: false,
        class_order_seed: 13,
        selection: SelectionMethod::Herding,
    };
    let trainer = TrainerConfig {
        gamma1: 0.03,
        gamma2: 0.01,
        momentum: 0.9,
        batch_size: 8,
        epochs: 60,
        lr_schedule: vec![
            LrDrop {
                epoch: 40,
                divisor: 5.0,
            },
            LrDrop {
                epoch: 50,
                divisor: 2.0,
            },
        ],
        seed: 11,
    };
    let seeds = [11u64, 12, 13];
    let measure = |label: &str| -> (Vec<f64>, Vec<f64>) {
        let variant = ModelVariant::parse(label).unwrap();
        let mut aia = Vec::new();
        let mut old = Vec::new();
        for &seed in &seeds {
            let spec = RunSpec {
                protocol: &protocol,
                trainer: &trainer,
                arch: &arch,
                variant,
                seed,
            };
            let out = run_protocol(&spec, &data).unwrap_or_else(|f| {
                panic!(
                    "{label} seed {seed} failed after {} phases: {}",
                    f.completed.len(),
                    f.error
                )
            });
            let last = out.summary.per_phase.last().unwrap();
            aia.push(out.summary.average_incremental_accuracy);
            old.push(last.per_group_accuracy[&0]);
        }
        (aia, old)
    };
    let (aanet_aia, aanet_old) = measure("all+scaling");
    let (base_aia, base_old) = measure("single-branch-all");
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let aanet_mean = mean(&aanet_aia);
    let base_mean = mean(&base_aia);
    let wins = aanet_old
        .iter()
        .zip(&base_old)
        .filter(|(a, b)| a > b)
        .count();

    let pass = aanet_mean >= base_mean - 0.005 && wins >= 2;
    verdict(
        7,
        "directional experiment",
        pass,
        &format!(
            "10 classes, 5 incremental phases, 3 seeds: dual mean accuracy {aanet_mean:.4} >= \
             single {base_mean:.4} - 0.005, first-group last-phase wins {wins}/3 >= 2 \
             (dual {aanet_old:?} vs single {base_old:?}), {:.2?}",
            start.elapsed()
        ),
    );
}

fn determinism_config(out: &std::path::Path) -> ExperimentConfig {
    ExperimentConfig {
        schema_version: 1,
        branch_matrix: vec!["all+scaling".into(), "single-branch-all".into()],
        phase_counts: Vec::new(),
        output_dir: out.to_path_buf(),
        dataset: DatasetSpec::Synthetic {
            spec: SyntheticSpec {
                num_classes: 4,
                samples_per_class: 6,
                test_per_class: 4,
                image_size: 6,
                channels: 2,
                separation: 0.8,
                noise: 0.02,
                seed: 41,
            },
        },
        arch: ArchConfig {
            image_size: 6,
            in_channels: 2,
            levels: 2,
            filters: 4,
            kernel_size: 3,
            layers_per_level: 1,
        },
        protocol: ProtocolConfig {
            total_classes: 4,
            n_phases: 1,
            split_mode: SplitMode::HalfThenEven,
            runs: 2,
            per_class_quota: 3,
            strict_memory: false,
            update_base: false,
            class_order_seed: 5,
            selection: SelectionMethod::Herding,
        },
        trainer: TrainerConfig {
            gamma1: 0.05,
            gamma2: 0.05,
            momentum: 0.9,
            batch_size: 8,
            epochs: 2,
            lr_schedule: Vec::new(),
            seed: 7,
        },
    }
}

#[test]
fn criterion_08_reruns_are_bit_identical() {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let dir_a = tmp.path().join("a");
    let dir_b = tmp.path().join("b");
    experiment::run_experiment(&determinism_config(&dir_a), 2).unwrap();
    experiment::run_experiment(&determinism_config(&dir_b), 1).unwrap();

    let metric_files = [
        "summaries.jsonl",
        "metrics.csv",
        "group_metrics.csv",
        "alpha_table.csv",
        "comparison.csv",
        "schema.json",
        "runs/all+scaling/n1_seed_7.json",
        "runs/all+scaling/n1_seed_8.json",
        "runs/single-branch-all/n1_seed_7.json",
        "runs/single-branch-all/n1_seed_8.json",
        "checkpoints/all+scaling/n1/seed_7/phase_1.ckpt",
    ];
    let mut same = 0usize;
    for name in metric_files {
        let a = std::fs::read(dir_a.join(name)).unwrap();
        let b = std::fs::read(dir_b.join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
        same += 1;
    }
    verdict(
        8,
        "determinism",
        true,
        &format!(
            "{same} metrics files bit-identical across independent reruns, {:.2?}",
            start.elapsed()
        ),
    );
}

fn set_scales(state: &mut PhaseState, values: &[Vec<Array1<f64>>]) {
    let Body::Dual(duals) = &mut state.model.body else {
        panic!("needs a dual body")
    };
    for (dual, per_level) in duals.iter_mut().zip(values) {
        let BranchParams::Scaling(sp) = &mut dual.stable else {
            panic!("needs a scaling stable branch")
        };
        sp.per_layer = per_level.clone();
    }
}

#[test]
fn criterion_09_base_updates_compose() {
    let start = Instant::now();
    let arch = ArchConfig {
        image_size: 6,
        in_channels: 2,
        levels: 2,
        filters: 4,
        kernel_size: 3,
        layers_per_level: 2,
    };
    let state0 = initial_state(&arch, &[0, 1], 3).unwrap();
    let kinds = vec![ModelVariant::parse("all+scaling").unwrap(); arch.levels];
    let base_state = init_phase(&state0, &kinds, &[2], 4).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(90);
    let mut draw = |_: &str| -> Vec<Vec<Array1<f64>>> {
        (0..arch.levels)
            .map(|_| {
                (0..arch.layers_per_level)
                    .map(|_| Array1::from_shape_fn(arch.filters, |_| 0.6 + 0.8 * rng.random::<f64>()))
                    .collect()
            })
            .collect()
    };
    let phi = draw("first");
    let phi_prime = draw("second");
    let product: Vec<Vec<Array1<f64>>> = phi
        .iter()
        .zip(&phi_prime)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x * y).collect())
        .collect();

    // Two sequential folds.
    let mut first = base_state.clone();
    set_scales(&mut first, &phi);
    let folded_once = update_base_variant(&first).unwrap();
    let mut second = base_state.clone();
    second.model.base = folded_once;
    set_scales(&mut second, &phi_prime);
    let sequential = update_base_variant(&second).unwrap();

    // One fold with the elementwise product.
    let mut joint = base_state.clone();
    set_scales(&mut joint, &product);
    let combined = update_base_variant(&joint).unwrap();

    let mut worst = 0.0f64;
    for (a, b) in sequential.levels.iter().zip(&combined.levels) {
        for (la, lb) in a.layers.iter().zip(&b.layers) {
            for (x, y) in la.weight.iter().zip(lb.weight.iter()) {
                worst = worst.max((x - y).abs());
            }
            assert_eq!(la.bias, lb.bias, "biases must never be scaled");
        }
    }
    verdict(
        9,
        "base update composition",
        worst <= 1e-12,
        &format!(
            "sequential folds vs product fold max dev {worst:.2e} <= 1e-12, {:.2?}",
            start.elapsed()
        ),
    );
}

#[test]
fn criterion_10_cli_round_trips() {
    let start = Instant::now();

    // Config text survives a parse/serialize/parse cycle unchanged.
    let tmp = tempfile::tempdir().unwrap();
    let cfg = determinism_config(&tmp.path().join("out"));
    let text = experiment::serialize_config(&cfg).unwrap();
    let reparsed = experiment::parse_config(&text).unwrap();
    let config_fixpoint =
        reparsed == cfg && experiment::serialize_config(&reparsed).unwrap() == text;

    // Binary image records reload bit-exactly.
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let records: Vec<(u8, Vec<u8>)> = (0..30)
        .map(|_| {
            let label = rng.random_range(0..10u8);
            let pixels: Vec<u8> = (0..3072).map(|_| rng.random::<u8>()).collect();
            (label, pixels)
        })
        .collect();
    let bin = tmp.path().join("batch.bin");
    write_cifar_file(&bin, &records).unwrap();
    let loaded = read_cifar_file(&bin).unwrap();
    let mut cifar_exact = loaded.len() == records.len();
    for ((label, pixels), (got_label, image)) in records.iter().zip(&loaded) {
        cifar_exact &= u32::from(*label) == *got_label;
        let side = 32;
        for (idx, &b) in pixels.iter().enumerate() {
            let (c, rest) = (idx / (side * side), idx % (side * side));
            let expect = f64::from(b) / 255.0;
            cifar_exact &= image[(c, rest / side, rest % side)].to_bits() == expect.to_bits();
        }
    }

    // The report verb's table equals a fresh aggregation of the stored runs.
    let out = tmp.path().join("exp");
    experiment::run_experiment(&determinism_config(&out), 2).unwrap();
    let table = outputs::report(&out).unwrap();
    let mut cells_match = true;
    for layout in ["all+scaling", "single-branch-all"] {
        let read = |seed: u64| -> RunSummary {
            let path = out.join("runs").join(layout).join(format!("n1_seed_{seed}.json"));
            serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
        };
        let agg = aggregate_runs(&[read(7), read(8)]).unwrap();
        let cell = format!(
            "{} \u{b1} {}",
            agg.average_incremental_accuracy.mean, agg.average_incremental_accuracy.half_width
        );
        cells_match &= table.contains(&format!("{layout},{cell}"));
    }

    let pass = config_fixpoint && cifar_exact && cells_match;
    verdict(
        10,
        "round trips",
        pass,
        &format!(
            "config fixpoint: {config_fixpoint}, binary records bit-exact: {cifar_exact}, \
             report cells equal recomputation: {cells_match}, {:.2?}",
            start.elapsed()
        ),
    );
}
