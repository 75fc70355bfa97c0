//! End-to-end benchmark runs on small synthetic datasets.

use std::collections::BTreeMap;

use aanets::backbone::{ArchConfig, BranchKind, ModelVariant};
use aanets::data::{gen_synthetic, Dataset, SyntheticSpec};
use aanets::protocol::{
    run_protocol, run_protocol_observed, ProtocolConfig, RunSpec, SplitMode,
};
use aanets::trainer::TrainerConfig;

fn arch() -> ArchConfig {
    ArchConfig {
        image_size: 6,
        in_channels: 2,
        levels: 2,
        filters: 4,
        kernel_size: 3,
        layers_per_level: 1,
    }
}

fn spec_data(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 4,
        samples_per_class: 6,
        test_per_class: 4,
        image_size: 6,
        channels: 2,
        separation: 0.8,
        noise: 0.02,
        seed,
    }
}

fn trainer(epochs: usize) -> TrainerConfig {
    TrainerConfig {
        gamma1: 0.05,
        gamma2: 0.05,
        momentum: 0.9,
        batch_size: 8,
        epochs,
        lr_schedule: Vec::new(),
        seed: 0,
    }
}

fn protocol(n: usize) -> ProtocolConfig {
    ProtocolConfig {
        total_classes: 4,
        n_phases: n,
        split_mode: SplitMode::HalfThenEven,
        runs: 1,
        per_class_quota: 3,
        strict_memory: false,
        update_base: false,
        class_order_seed: 5,
        selection: Default::default(),
    }
}

fn aanet_variant() -> ModelVariant {
    ModelVariant::Dual {
        plastic: BranchKind::All,
        stable: BranchKind::Scaling,
    }
}

/// Test split replaced by the train split: accuracy then measures pure fit.
fn train_as_test(ds: &Dataset) -> Dataset {
    let rebuild = |of: &dyn Fn(u32) -> Vec<ndarray::Array3<f64>>| -> BTreeMap<_, _> {
        ds.class_ids().into_iter().map(|c| (c, of(c))).collect()
    };
    let train = rebuild(&|c| ds.train_of(c).unwrap().to_vec());
    let test = rebuild(&|c| ds.train_of(c).unwrap().to_vec());
    Dataset::new(train, test, ds.image_bytes()).unwrap()
}

#[test]
fn single_increment_fits_a_separable_toy_problem() {
    let ds = train_as_test(&gen_synthetic(&spec_data(41)).unwrap());
    let a = arch();
    let t = trainer(30);
    let p = protocol(1);
    let spec = RunSpec {
        protocol: &p,
        trainer: &t,
        arch: &a,
        variant: aanet_variant(),
        seed: 9,
    };
    let out = run_protocol(&spec, &ds).unwrap();
    assert_eq!(out.summary.per_phase.len(), 2);
    assert!(
        out.summary.last_phase_accuracy >= 0.95,
        "last-phase accuracy {}",
        out.summary.last_phase_accuracy
    );
}

#[test]
fn summary_bookkeeping_is_internally_consistent() {
    let ds = gen_synthetic(&spec_data(42)).unwrap();
    let a = arch();
    let t = trainer(4);
    let p = protocol(2);
    let spec = RunSpec {
        protocol: &p,
        trainer: &t,
        arch: &a,
        variant: aanet_variant(),
        seed: 10,
    };
    let out = run_protocol(&spec, &ds).unwrap();
    let s = &out.summary;
    assert_eq!(s.per_phase.len(), 3);

    // The average is recomputable from the per-phase reports.
    let recomputed = s
        .per_phase
        .iter()
        .map(|p| p.test_accuracy)
        .sum::<f64>()
        / s.per_phase.len() as f64;
    assert_eq!(recomputed, s.average_incremental_accuracy);
    assert_eq!(
        s.last_phase_accuracy,
        s.per_phase.last().unwrap().test_accuracy
    );

    // Seen classes grow by the split sizes (2 then 1 and 1), and each
    // report covers exactly the phases seen so far.
    let seen: Vec<usize> = s.per_phase.iter().map(|p| p.seen_classes).collect();
    assert_eq!(seen, vec![2, 3, 4]);
    for (i, report) in s.per_phase.iter().enumerate() {
        assert_eq!(report.phase_index, i);
        let groups: Vec<usize> = report.per_group_accuracy.keys().copied().collect();
        assert_eq!(groups, (0..=i).collect::<Vec<_>>());
        for acc in report.per_group_accuracy.values() {
            assert!((0.0..=1.0).contains(acc));
        }
    }

    // Exemplar memory grows with the stored classes: quota 3, 72-byte
    // images.
    let mem: Vec<usize> = s.per_phase.iter().map(|p| p.memory_bytes).collect();
    assert_eq!(mem, vec![2 * 3 * 72, 3 * 3 * 72, 4 * 3 * 72]);

    // Alpha records exist for both incremental phases at every epoch and
    // level, and every pair stays on the segment.
    assert_eq!(out.alpha_trajectory.len(), 2 * t.epochs * a.levels);
    for rec in &out.alpha_trajectory {
        assert!(rec.phase == 1 || rec.phase == 2);
        assert!((rec.alpha_stable + rec.alpha_plastic - 1.0).abs() <= 1e-9);
        assert!((0.0..=1.0).contains(&rec.alpha_stable));
    }
}

#[test]
fn identical_seeds_reproduce_the_run_bit_for_bit() {
    let ds = gen_synthetic(&spec_data(43)).unwrap();
    let a = arch();
    let t = trainer(3);
    let p = protocol(2);
    let spec = RunSpec {
        protocol: &p,
        trainer: &t,
        arch: &a,
        variant: aanet_variant(),
        seed: 11,
    };
    // Wall time is measured, not computed, so it is cleared before the
    // comparison; serialized metrics omit it for the same reason.
    let strip = |mut s: aanets::protocol::RunSummary| {
        for p in &mut s.per_phase {
            p.wall_time_s = 0.0;
        }
        s
    };
    let one = run_protocol(&spec, &ds).unwrap();
    let two = run_protocol(&spec, &ds).unwrap();
    assert_eq!(strip(one.summary.clone()), strip(two.summary));
    assert_eq!(one.alpha_trajectory, two.alpha_trajectory);

    let mut other = spec;
    other.seed = 12;
    let three = run_protocol(&other, &ds).unwrap();
    assert_ne!(
        strip(one.summary),
        strip(three.summary),
        "seed changes the run"
    );
}

#[test]
fn trunk_stays_frozen_across_phases_without_base_updates() {
    let ds = gen_synthetic(&spec_data(44)).unwrap();
    let a = arch();
    let t = trainer(3);
    let p = protocol(2);
    let spec = RunSpec {
        protocol: &p,
        trainer: &t,
        arch: &a,
        variant: aanet_variant(),
        seed: 13,
    };
    let mut trunks: Vec<Vec<u64>> = Vec::new();
    run_protocol_observed(&spec, &ds, &mut |state, _| {
        let mut bits: Vec<u64> = state
            .model
            .base
            .stem
            .weight
            .iter()
            .map(|v| v.to_bits())
            .collect();
        for level in &state.model.base.levels {
            for layer in &level.layers {
                bits.extend(layer.weight.iter().map(|v| v.to_bits()));
                bits.extend(layer.bias.iter().map(|v| v.to_bits()));
            }
        }
        trunks.push(bits);
        Ok(())
    })
    .unwrap();
    assert_eq!(trunks.len(), 3);
    assert_eq!(trunks[0], trunks[1]);
    assert_eq!(trunks[0], trunks[2]);
}

#[test]
fn base_updates_fold_scales_and_reset_them() {
    let ds = gen_synthetic(&spec_data(45)).unwrap();
    let a = arch();
    let t = trainer(3);
    let mut p = protocol(2);
    p.update_base = true;
    let spec = RunSpec {
        protocol: &p,
        trainer: &t,
        arch: &a,
        variant: aanet_variant(),
        seed: 14,
    };
    let mut scale_snapshots: Vec<Vec<f64>> = Vec::new();
    run_protocol_observed(&spec, &ds, &mut |state, report| {
        if report.phase_index > 0 {
            if let aanets::backbone::Body::Dual(duals) = &state.model.body {
                let mut scales = Vec::new();
                for d in duals {
                    if let aanets::backbone::BranchParams::Scaling(sp) = &d.stable {
                        scales.extend(sp.per_layer.iter().flatten().copied());
                    }
                }
                scale_snapshots.push(scales);
            }
        }
        Ok(())
    })
    .unwrap();
    assert_eq!(scale_snapshots.len(), 2);
    for snapshot in &scale_snapshots {
        assert!(!snapshot.is_empty());
        assert!(
            snapshot.iter().all(|&s| s == 1.0),
            "scales reset after folding: {snapshot:?}"
        );
    }
}

#[test]
fn strict_memory_pays_for_extra_parameters_with_quota() {
    let ds = gen_synthetic(&spec_data(46)).unwrap();
    let a = arch();
    let t = trainer(2);
    // Dual all+scaling on this arch adds 8 scales + 4 aggregation weights
    // = 12 params = 48 bytes; images are 72 native bytes over 4 classes,
    // so the quota drops by ceil(48/288) = 1.
    let mut p = protocol(1);
    p.strict_memory = true;
    let spec = RunSpec {
        protocol: &p,
        trainer: &t,
        arch: &a,
        variant: aanet_variant(),
        seed: 15,
    };
    let out = run_protocol(&spec, &ds).unwrap();
    let mem: Vec<usize> = out.summary.per_phase.iter().map(|p| p.memory_bytes).collect();
    assert_eq!(mem, vec![2 * 2 * 72, 4 * 2 * 72], "quota 2 instead of 3");
}

#[test]
fn failures_carry_the_completed_phases() {
    let ds = gen_synthetic(&spec_data(47)).unwrap();
    let a = arch();
    let t = trainer(2);
    let p = protocol(1);
    let spec = RunSpec {
        protocol: &p,
        trainer: &t,
        arch: &a,
        variant: aanet_variant(),
        seed: 16,
    };
    let mut calls = 0;
    let failure = run_protocol_observed(&spec, &ds, &mut |_, _| {
        calls += 1;
        if calls == 2 {
            Err(aanets::Error::State("observer bailed".into()))
        } else {
            Ok(())
        }
    })
    .unwrap_err();
    assert_eq!(failure.completed.len(), 1, "phase 0 finished first");
    assert!(failure.error.to_string().contains("observer bailed"));
}

#[test]
fn mismatched_architecture_is_rejected_before_training() {
    let ds = gen_synthetic(&spec_data(48)).unwrap();
    let mut a = arch();
    a.image_size = 8;
    let t = trainer(2);
    let p = protocol(1);
    let spec = RunSpec {
        protocol: &p,
        trainer: &t,
        arch: &a,
        variant: aanet_variant(),
        seed: 17,
    };
    let failure = run_protocol(&spec, &ds).unwrap_err();
    assert!(failure.completed.is_empty());
    assert!(matches!(failure.error, aanets::Error::Config(_)));
}
