//! Composite objective, λ controller, schedule and the training loop.

mod common;

use brainteacher::nn::{build_network, encode_checkpoint, NetworkSpec, Tensor};
use brainteacher::rsm::Rsm;
use brainteacher::stats::mean_sem;
use brainteacher::teacher::{generate_random_teacher, TeacherKind, V1_MU, V1_SIGMA};
use brainteacher::training::*;
use common::{tiny_bundle, tiny_config};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn composite_loss_examples() {
    assert!((composite_loss(2.3, 0.04, 10.0).unwrap() - 2.7).abs() < 1e-12);
    assert_eq!(composite_loss(2.3, 0.04, 0.0).unwrap(), 2.3);
    assert!(composite_loss(f64::NAN, 0.1, 1.0).is_err());
    assert!(composite_loss(1.0, f64::INFINITY, 1.0).is_err());
    assert!(composite_loss(1.0, 0.1, -1.0).is_err());
}

proptest! {
    #[test]
    fn controller_hits_the_target_ratio(
        r in 1e-4f64..10.0,
        mismatch in 1e-6f64..100.0,
        ce in 1e-3f64..20.0,
    ) {
        let s = update_lambda(&LambdaState::new(r), mismatch, ce).unwrap();
        prop_assert!((s.current_lambda * mismatch / ce - r).abs() <= 1e-10 * r.max(1.0));
        prop_assert!((s.ratio() - r).abs() <= 1e-10 * r.max(1.0));
    }

    #[test]
    fn zero_target_gives_zero_weight(mismatch in 0.0f64..100.0, ce in 0.0f64..20.0) {
        prop_assert_eq!(update_lambda(&LambdaState::new(0.0), mismatch, ce).unwrap().current_lambda, 0.0);
    }
}

#[test]
fn controller_examples() {
    let s = update_lambda(&LambdaState::new(0.1), 0.04, 2.0).unwrap();
    assert!((s.current_lambda - 5.0).abs() < 1e-12);
    assert!((s.ratio() - 0.1).abs() < 1e-12);
    let mut prev = LambdaState::new(0.1);
    prev.current_lambda = 7.0;
    assert_eq!(update_lambda(&prev, 0.0, 2.0).unwrap().current_lambda, 7.0);
    assert_eq!(update_lambda(&prev, 0.04, 0.0).unwrap().current_lambda, 7.0);
}

#[test]
fn schedule_switches_off_after_teacher_epochs() {
    let bundle = tiny_bundle();
    let mut c = tiny_config(&bundle, TeacherKind::Random, 0.1);
    c.neural_epochs = 3;
    c.total_epochs = 6;
    let got: Vec<f64> = (0..6).map(|e| scheduled_r(e, &c)).collect();
    assert_eq!(got, vec![0.1, 0.1, 0.1, 0.0, 0.0, 0.0]);
    let mut bad = c.clone();
    bad.neural_epochs = 7;
    assert!(bad.validate().is_err());
    bad.neural_epochs = 0;
    assert!(bad.validate().is_ok());
    bad.r = -0.1;
    assert!(bad.validate().is_err());
}

fn random_teacher_of(m: usize) -> (Vec<String>, Rsm) {
    let ids: Vec<String> = (0..m).map(|i| format!("s{i}")).collect();
    let t = generate_random_teacher(&ids, 39, V1_MU, V1_SIGMA, 5).unwrap();
    (ids, t)
}

fn rand_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()).unwrap()
}

/// ∇(ce + λ·m) equals ∇ce + λ·∇m parameter by parameter.
#[test]
fn composite_gradient_is_the_weighted_sum() {
    let spec = NetworkSpec::cornet_z_mini(4, [3, 32, 32]);
    let net = build_network::<f64>(&spec, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = rand_tensor(vec![3, 3, 32, 32], &mut rng);
    let stimuli = rand_tensor(vec![4, 3, 32, 32], &mut rng);
    let (_, teacher) = random_teacher_of(4);
    let target = teacher.values().to_vec();
    let labels = [0, 3, 1];
    let lambda = 3.7;
    let grads = |which: u8| {
        let mut g = brainteacher::nn::Graph::new();
        let mut drop = ChaCha8Rng::seed_from_u64(11);
        let nodes = record_terms(&net, &mut g, batch.clone(), &labels, Some((stimuli.clone(), &target, "V1")), false, &mut drop).unwrap();
        let root = match which {
            0 => nodes.ce,
            1 => nodes.mismatch.unwrap(),
            _ => combine(&mut g, &nodes, lambda).unwrap(),
        };
        g.backward(root).unwrap().for_params(&net.param_shapes())
    };
    let (gce, gm, gall) = (grads(0), grads(1), grads(2));
    let mut worst: f64 = 0.0;
    for ((a, b), c) in gce.iter().zip(&gm).zip(&gall) {
        for ((x, y), z) in a.data().iter().zip(b.data()).zip(c.data()) {
            worst = worst.max((x + lambda * y - z).abs());
        }
    }
    assert!(worst < 1e-9, "max deviation {worst}");
    assert!(gm.iter().any(|t| t.data().iter().any(|v| *v != 0.0)));
}

#[test]
fn composite_grad_check_passes_on_the_small_network() {
    let mut setup = GradCheckSetup::cornet_mini(0.1);
    setup.samples = 60;
    let out = composite_grad_check(&setup).unwrap();
    assert!(out.lambda > 0.0 && out.mismatch > 0.0);
    assert!(out.report.max_relative_error < 1e-4, "{:?}", out.report.max_relative_error);
}

#[test]
fn train_cost_is_the_mean_of_batch_losses_and_respects_the_ratio() {
    let bundle = tiny_bundle();
    let c = tiny_config(&bundle, TeacherKind::Random, 0.3);
    let teacher = c.teacher.build(&bundle.stimuli.ids).unwrap().unwrap();
    let pathway = TeacherPathway::new(bundle.stimuli.images.clone(), &bundle.stimuli.ids, teacher, "V1").unwrap();
    let mut net = build_network::<f32>(&c.network, 1).unwrap();
    let mut state = LambdaState::new(0.3);
    let mut rngs = SeedRngs::new(1);
    let e0 = train_epoch(&mut net, &bundle.train.images, &bundle.train.labels, Some(&pathway), &mut state, 0, &c, &mut rngs).unwrap();
    let oracle = e0.batch_losses.iter().sum::<f64>() / e0.batch_losses.len() as f64;
    assert!((e0.train_cost - oracle).abs() < 1e-9);
    assert_eq!(e0.batch_losses.len(), bundle.train.len().div_ceil(16));
    assert_eq!(e0.lambda_updates.len(), 1);
    let e1 = train_epoch(&mut net, &bundle.train.images, &bundle.train.labels, Some(&pathway), &mut state, 1, &c, &mut rngs).unwrap();
    // Epoch 1 is fitted to epoch 0's means.
    let u = e1.lambda_updates[0];
    let m0 = e0.train_rsm_mismatch.unwrap();
    assert!((u.current_lambda * m0 / e0.train_ce - 0.3).abs() < 1e-10);

    let mut batch_cfg = c.clone();
    batch_cfg.lambda_cadence = LambdaCadence::Batch;
    let mut state = LambdaState::new(0.3);
    let e = train_epoch(&mut net, &bundle.train.images, &bundle.train.labels, Some(&pathway), &mut state, 0, &batch_cfg, &mut SeedRngs::new(2)).unwrap();
    assert_eq!(e.lambda_updates.len(), e.batch_losses.len());
}

#[test]
fn zero_ratio_matches_no_teacher_bit_for_bit() {
    let bundle = tiny_bundle();
    let dir = tempfile::tempdir().unwrap();
    let mut runs = Vec::new();
    for (name, kind, r) in [("zero", TeacherKind::Random, 0.0), ("none", TeacherKind::None, 0.0)] {
        let mut c = tiny_config(&bundle, kind, r);
        c.checkpoint_every = Some(1);
        let d = dir.path().join(name);
        runs.push((run_experiment(&c, &bundle, Some(&d)).unwrap(), d));
    }
    for epoch in 1..=2 {
        let a = std::fs::read(checkpoint_path(&runs[0].1, 1, epoch)).unwrap();
        let b = std::fs::read(checkpoint_path(&runs[1].1, 1, epoch)).unwrap();
        assert_eq!(a, b, "epoch {epoch}");
    }
    let (a, b) = (&runs[0].0.rows, &runs[1].0.rows);
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.train_cost.to_bits(), y.train_cost.to_bits());
        assert_eq!(x.test_accuracy, y.test_accuracy);
        assert_eq!(x.lambda, 0.0);
    }
}

#[test]
fn runs_are_deterministic_per_seed() {
    let bundle = tiny_bundle();
    let mut c = tiny_config(&bundle, TeacherKind::Random, 0.1);
    c.total_epochs = 1;
    c.neural_epochs = 1;
    c.seeds = vec![4, 2];
    let a = run_experiment(&c, &bundle, None).unwrap();
    let b = run_experiment(&c, &bundle, None).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.rows.iter().map(|r| r.seed).collect::<Vec<_>>(), vec![2, 4]);
    c.seeds = vec![4];
    let single = run_experiment(&c, &bundle, None).unwrap();
    assert_eq!(single.rows[0], a.rows[1]);
    assert_ne!(a.rows[0].train_cost, a.rows[1].train_cost);
}

#[test]
fn record_round_trip_and_aggregation() {
    let bundle = tiny_bundle();
    let mut c = tiny_config(&bundle, TeacherKind::Random, 0.1);
    c.seeds = vec![1, 2, 3];
    let rec = run_experiment(&c, &bundle, None).unwrap();
    assert_eq!(rec.rows.len(), 6);
    for row in &rec.rows {
        assert!(row.train_rsm_mismatch.is_some() && row.rsm_mismatch.is_some());
        assert!(row.lambda > 0.0);
        assert!((row.generalization_gap - (row.train_ce - row.test_cost)).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&row.test_accuracy));
    }
    let last = rec.final_aggregate().unwrap();
    let accs: Vec<f64> = rec.final_rows().iter().map(|r| r.test_accuracy).collect();
    let m = accs.iter().sum::<f64>() / 3.0;
    let sd = (accs.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 2.0).sqrt();
    let agg = last.metrics["test_accuracy"];
    assert!((agg.mean - m).abs() < 1e-12);
    assert!((agg.sem.unwrap() - sd / 3f64.sqrt()).abs() < 1e-12);
    assert_eq!(last.n_seeds, 3);

    let dir = tempfile::tempdir().unwrap();
    rec.write(dir.path()).unwrap();
    assert_eq!(ExperimentRecord::load(&dir.path().join("record.json")).unwrap(), rec);
    let csv = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let jsonl = std::fs::read_to_string(dir.path().join("rows.jsonl")).unwrap();
    assert_eq!(jsonl.lines().count(), 6);
}

#[test]
fn sem_examples() {
    let s = mean_sem(&[0.3, 0.5]).unwrap();
    assert!((s.mean - 0.4).abs() < 1e-15 && (s.sem.unwrap() - 0.1).abs() < 1e-15);
    let s = mean_sem(&[0.7]).unwrap();
    assert_eq!((s.mean, s.sem), (0.7, None));
    let s = mean_sem(&[1.0, 2.0, 3.0, 4.0]).unwrap();
    // sd = √(5/3), SEM = sd / 2.
    assert!((s.sem.unwrap() - (5.0f64 / 3.0).sqrt() / 2.0).abs() < 1e-15);
}

#[test]
fn checkpoints_encode_identical_networks_identically() {
    let spec = NetworkSpec::cornet_z_mini(4, [3, 32, 32]);
    let a = build_network::<f32>(&spec, 3).unwrap();
    let b = build_network::<f32>(&spec, 3).unwrap();
    let c = build_network::<f32>(&spec, 4).unwrap();
    assert_eq!(encode_checkpoint(&a, 3, 0).unwrap(), encode_checkpoint(&b, 3, 0).unwrap());
    assert_ne!(encode_checkpoint(&a, 3, 0).unwrap(), encode_checkpoint(&c, 3, 0).unwrap());
}

#[test]
fn mismatched_configs_are_rejected() {
    let bundle = tiny_bundle();
    let mut c = tiny_config(&bundle, TeacherKind::Random, 0.1);
    c.network = NetworkSpec::cornet_z_mini(7, [3, 32, 32]);
    assert!(run_experiment(&c, &bundle, None).is_err());
    let mut c = tiny_config(&bundle, TeacherKind::Random, 0.1);
    c.checkpoint_every = Some(1);
    assert!(run_experiment(&c, &bundle, None).is_err());
    let mut c = tiny_config(&bundle, TeacherKind::Random, 0.1);
    c.teacher.attach_tag = Some("IT9".into());
    assert!(run_experiment(&c, &bundle, None).is_err());
}
