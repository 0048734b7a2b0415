//! End-to-end acceptance gate, one test per criterion.
//!
//! Each test prints a single `criterion NN ... pass` line on success; a
//! failure panics with the criterion number in the message, so the
//! harness output always carries one verdict line per criterion.

use std::sync::Mutex;
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::Rng;

use drvnet::data::{augment, crop_to_original, zero_pad, Dataset, RetinalSample};
use drvnet::evaluation::{binarize, confusion, evaluate_image};
use drvnet::loss::{bce_loss, composite_loss, dice_loss, LossWeights};
use drvnet::network::{DrVNet, ModelConfig};
use drvnet::nn::fdcheck::rel_err;
use drvnet::nn::{GradStore, TrainCtx};
use drvnet::rng::{substream, SeedRng, Stream};
use drvnet::training::{train_phase1, train_phase2, Phase, TrainSchedule};

/// The wall-clock-budgeted tests must not share the single CPU.
static HEAVY: Mutex<()> = Mutex::new(());

fn rng(tag: u64) -> SeedRng {
    substream(0xACCE97, Stream::Custom(tag))
}

fn random_image(h: usize, w: usize, r: &mut SeedRng) -> Array3<f64> {
    Array3::from_shape_fn((h, w, 3), |_| r.gen_range(0.0..1.0))
}

fn random_mask(h: usize, w: usize, r: &mut SeedRng) -> Array2<f64> {
    Array2::from_shape_fn((h, w), |_| if r.gen_bool(0.5) { 1.0 } else { 0.0 })
}

fn sample_from(image: Array3<f64>, annotation: Array2<f64>) -> RetinalSample {
    let (h, w, _) = image.dim();
    RetinalSample {
        identifier: "synthetic".into(),
        dataset: Dataset::Drive,
        image,
        annotation,
        original_size: (h, w),
        padded_size: (h, w),
    }
}

// ---------------------------------------------------------------------------

#[test]
fn criterion_01_forward_shapes_ranges_and_runtime() {
    let _cpu = HEAVY.lock().unwrap();
    // Production width at desk scale, desk-scale width at the full
    // DRIVE geometry: every shape/range property holds at any width,
    // and both finish inside the CPU budget.
    let configs = [
        (64usize, ModelConfig::default()),
        (592, ModelConfig { base_channels: 4, ..ModelConfig::default() }),
    ];
    let started = Instant::now();
    for (side, cfg) in configs {
        let model = DrVNet::new(&cfg, &mut rng(side as u64)).unwrap();
        let x = random_image(side, side, &mut rng(1 + side as u64));
        let (bmap, fmap) = model.forward_full(&x).unwrap();
        assert_eq!(bmap.dim(), (side, side), "criterion 1: backbone map shape");
        assert_eq!(fmap.dim(), (side, side), "criterion 1: final map shape");
        for map in [&bmap, &fmap] {
            assert!(
                map.iter().all(|v| (0.0..=1.0).contains(v)),
                "criterion 1: probabilities outside [0,1] at side {side}"
            );
        }
    }
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 60.0, "criterion 1: suite took {secs:.1} s (budget 60 s)");
    println!("criterion 01 forward shape/range suite ({secs:.1} s) ... pass");
}

#[test]
fn criterion_02_analytic_gradients_match_finite_differences() {
    let _cpu = HEAVY.lock().unwrap();
    // Dropout off and frozen batch statistics make the loss a
    // deterministic differentiable function of the parameters.
    let cfg = ModelConfig {
        base_channels: 4,
        dropout_rate: 0.0,
        ..ModelConfig::default()
    };
    let mut init = rng(2);
    let mut model = DrVNet::new(&cfg, &mut init).unwrap();
    // Check at a generic parameter point. At the symmetric init every
    // relu kink downstream of an exact-zero activation sits exactly at
    // the evaluation point, where a central difference measures the
    // two-sided average instead of the one-sided subgradient the
    // backward pass (like any framework) returns. A small jitter moves
    // all kinks off the origin without changing what is being verified.
    let mut jitter = rng(6);
    use drvnet::nn::ParamVisit;
    model.visit_params_mut(&mut |_, p| {
        for v in p.iter_mut() {
            *v += jitter.gen_range(-0.05..0.05);
        }
    });
    let x = random_image(16, 16, &mut rng(3));
    let target = random_mask(16, 16, &mut rng(4));
    let w = LossWeights::default();

    let mut drng = rng(5);
    let mut ctx = TrainCtx::frozen(&mut drng);
    let ((_, fmap), cache) = model.forward_train_full(&x, &mut ctx).unwrap();
    let dfinal = drvnet::loss::composite_grad(&fmap, &target, &w).unwrap();
    let mut grads = GradStore::new();
    let dimage = model.backward_full(&dfinal, &cache, &mut grads);

    // Inference forward equals the frozen training forward, so it can
    // serve as the scalar function for the central differences.
    let eval = |m: &DrVNet| -> f64 {
        let (_, f) = m.forward_full(&x).unwrap();
        composite_loss(&f, &target, &w).unwrap()
    };
    let eval_at = |m: &DrVNet, xp: &Array3<f64>| -> f64 {
        let (_, f) = m.forward_full(xp).unwrap();
        composite_loss(&f, &target, &w).unwrap()
    };

    let names: Vec<String> = {
        let mut v = Vec::new();
        model.visit_params(&mut |n, _| v.push(n.to_string()));
        v
    };
    assert!(!names.is_empty(), "criterion 2: no parameters visited");
    let mut checked = 0usize;
    for name in &names {
        let mut len = 0;
        model.visit_params(&mut |n, p| {
            if n == name {
                len = p.len();
            }
        });
        let picks = [0, len / 2, len.saturating_sub(1)];
        for &flat in &picks {
            let analytic = grads
                .get(name)
                .and_then(|g| g.iter().nth(flat).copied())
                .unwrap_or(0.0);
            let h = 1e-6;
            let mut fp = 0.0;
            let mut fm = 0.0;
            for (sign, out) in [(1.0, &mut fp), (-1.0, &mut fm)] {
                let mut m2 = model.clone();
                m2.visit_params_mut(&mut |n, p| {
                    if n == name {
                        p.as_slice_mut().unwrap()[flat] += sign * h;
                    }
                });
                *out = eval(&m2);
            }
            let numeric = (fp - fm) / (2.0 * h);
            assert!(
                (analytic - numeric).abs() < 1e-7 || rel_err(analytic, numeric) < 1e-4,
                "criterion 2: {name}[{flat}] analytic {analytic} vs numeric {numeric}"
            );
            checked += 1;
        }
    }
    // Input gradient at a few pixels closes the loop end to end.
    for idx in [(0usize, 0usize, 0usize), (7, 9, 1), (15, 15, 2)] {
        let h = 1e-6;
        let mut xp = x.clone();
        xp[idx] += h;
        let fp = eval_at(&model, &xp);
        xp[idx] -= 2.0 * h;
        let fm = eval_at(&model, &xp);
        let numeric = (fp - fm) / (2.0 * h);
        assert!(
            (dimage[idx] - numeric).abs() < 1e-7 || rel_err(dimage[idx], numeric) < 1e-4,
            "criterion 2: input grad at {idx:?}: analytic {} vs numeric {numeric}",
            dimage[idx]
        );
    }
    println!(
        "criterion 02 gradient suite ({} tensors, {checked} coordinates) ... pass",
        names.len()
    );
}

#[test]
fn criterion_03_loss_oracles() {
    let pred = Array2::from_shape_vec((1, 2), vec![0.9, 0.2]).unwrap();
    let target = Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap();

    // mean(−ln 0.9, −ln 0.8)
    let bce = bce_loss(&pred, &target, None).unwrap();
    assert!(
        (bce - 0.16425203348636154).abs() < 1e-6,
        "criterion 3: bce {bce}"
    );

    // Maximum-entropy prediction.
    let half = Array2::from_elem((3, 3), 0.5);
    let any = random_mask(3, 3, &mut rng(6));
    let flat = bce_loss(&half, &any, None).unwrap();
    assert!(
        (flat - std::f64::consts::LN_2).abs() < 1e-12,
        "criterion 3: ln 2 oracle {flat}"
    );

    // 1 − 2/3 with zero smoothing.
    let dp = Array2::from_shape_vec((1, 4), vec![1.0, 1.0, 0.0, 0.0]).unwrap();
    let dt = Array2::from_shape_vec((1, 4), vec![1.0, 0.0, 0.0, 0.0]).unwrap();
    let dice = dice_loss(&dp, &dt, 0.0).unwrap();
    assert!(
        (dice - (1.0 - 2.0 / 3.0)).abs() < 1e-6,
        "criterion 3: dice {dice}"
    );
    // Perfect overlap: smoothing cancels exactly.
    assert_eq!(dice_loss(&dt, &dt, 1.0).unwrap(), 0.0, "criterion 3");

    // Composite = λ-weighted sum, bitwise.
    let w = LossWeights::default();
    let composite = composite_loss(&pred, &target, &w).unwrap();
    let by_hand = w.lambda1 * bce_loss(&pred, &target, None).unwrap()
        + w.lambda2 * dice_loss(&pred, &target, w.dice_smoothing).unwrap();
    assert_eq!(composite, by_hand, "criterion 3: composite is not the exact sum");
    assert!(
        (composite - 0.2126391302605551).abs() < 1e-6,
        "criterion 3: composite {composite}"
    );
    let mut r = rng(7);
    for _ in 0..10 {
        let p = Array2::from_shape_fn((5, 4), |_| r.gen_range(0.01..0.99));
        let t = random_mask(5, 4, &mut r);
        let c = composite_loss(&p, &t, &w).unwrap();
        let s = w.lambda1 * bce_loss(&p, &t, None).unwrap()
            + w.lambda2 * dice_loss(&p, &t, w.dice_smoothing).unwrap();
        assert_eq!(c, s, "criterion 3: composite drifted from the sum");
    }
    println!("criterion 03 loss oracles ... pass");
}

#[test]
fn criterion_04_confusion_and_auc_against_brute_force() {
    let mut r = rng(8);
    for case in 0..100 {
        let pred = random_mask(32, 32, &mut r);
        let truth = random_mask(32, 32, &mut r);
        let counts = confusion(&pred, &truth).unwrap();
        let (mut tp, mut tn, mut fp, mut fn_) = (0u64, 0u64, 0u64, 0u64);
        for y in 0..32 {
            for x in 0..32 {
                match (pred[(y, x)] == 1.0, truth[(y, x)] == 1.0) {
                    (true, true) => tp += 1,
                    (false, false) => tn += 1,
                    (true, false) => fp += 1,
                    (false, true) => fn_ += 1,
                }
            }
        }
        assert_eq!(
            (counts.tp, counts.tn, counts.fp, counts.fn_),
            (tp, tn, fp, fn_),
            "criterion 4: confusion mismatch in case {case}"
        );
        let eval = evaluate_image("case", &pred, &truth, 0.5).unwrap();
        assert_eq!(eval.se, ratio(tp, tp + fn_), "criterion 4: Se case {case}");
        assert_eq!(eval.sp, ratio(tn, tn + fp), "criterion 4: Sp case {case}");
        assert_eq!(
            eval.acc,
            (tp + tn) as f64 / 1024.0,
            "criterion 4: Acc case {case}"
        );
    }

    // AUC equals the Mann–Whitney statistic, ties counting one half.
    // Quantized values force plenty of ties.
    for case in 0..50 {
        let side = 2 + (case % 7); // 4..=64 pixels
        let map = Array2::from_shape_fn((side, side), |_| {
            f64::from(r.gen_range(0u32..5)) / 4.0
        });
        let truth = random_mask(side, side, &mut r);
        let pos: Vec<f64> = map
            .iter()
            .zip(truth.iter())
            .filter(|(_, t)| **t == 1.0)
            .map(|(p, _)| *p)
            .collect();
        let neg: Vec<f64> = map
            .iter()
            .zip(truth.iter())
            .filter(|(_, t)| **t == 0.0)
            .map(|(p, _)| *p)
            .collect();
        let eval = evaluate_image("case", &map, &truth, 0.5).unwrap();
        if pos.is_empty() || neg.is_empty() {
            assert_eq!(eval.auc, None, "criterion 4: AUC defined for one class");
            continue;
        }
        let mut num2 = 0u64; // 2·wins + ties over all (pos, neg) pairs
        for p in &pos {
            for n in &neg {
                if p > n {
                    num2 += 2;
                } else if p == n {
                    num2 += 1;
                }
            }
        }
        let mw = num2 as f64 / (2.0 * pos.len() as f64 * neg.len() as f64);
        assert_eq!(eval.auc, Some(mw), "criterion 4: AUC case {case}");
    }
    println!("criterion 04 metric oracles vs brute force ... pass");
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

#[test]
fn criterion_05_gmean_reproduces_the_published_value() {
    // 20 000 pixels tallying Se = 0.8512 and Sp = 0.9795 exactly.
    let (tp, fn_, tn, fp) = (8512usize, 1488, 9795, 205);
    let mut map = Vec::new();
    let mut truth = Vec::new();
    for (n, p, t) in [
        (tp, 0.9, 1.0),
        (fn_, 0.1, 1.0),
        (tn, 0.1, 0.0),
        (fp, 0.9, 0.0),
    ] {
        map.extend(std::iter::repeat(p).take(n));
        truth.extend(std::iter::repeat(t).take(n));
    }
    let map = Array2::from_shape_vec((200, 100), map).unwrap();
    let truth = Array2::from_shape_vec((200, 100), truth).unwrap();
    let eval = evaluate_image("gmean", &map, &truth, 0.5).unwrap();
    assert_eq!(eval.se, Some(0.8512), "criterion 5: Se");
    assert_eq!(eval.sp, Some(0.9795), "criterion 5: Sp");
    let gmean = eval.gmean.expect("criterion 5: G-mean undefined");
    assert!(
        (gmean - (0.8512f64 * 0.9795).sqrt()).abs() < 1e-12,
        "criterion 5: G-mean {gmean} is not sqrt(Se·Sp)"
    );
    // The per-run-averaged published figure differs in the fourth digit.
    assert!(
        (gmean - 0.9127).abs() < 1e-3,
        "criterion 5: G-mean {gmean} vs published 0.9127"
    );
    println!("criterion 05 G-mean check ({gmean:.4} vs 0.9127) ... pass");
}

#[test]
fn criterion_06_padding_round_trips_every_dataset_geometry() {
    // (h, w, padded square) per dataset.
    for (h, w, side) in [(584usize, 565usize, 592usize), (960, 999, 1008), (605, 700, 704)] {
        let mut r = rng(9 + side as u64);
        let image = random_image(h, w, &mut r);
        let annotation = random_mask(h, w, &mut r);
        let vessel_pixels = annotation.sum();
        let sample = sample_from(image.clone(), annotation.clone());
        let padded = zero_pad(&sample, side, side).unwrap();
        assert_eq!(padded.padded_size, (side, side), "criterion 6");
        assert_eq!(
            padded.annotation.sum(),
            vessel_pixels,
            "criterion 6: padding altered the vessel count at {h}x{w}"
        );
        let offsets = padded.pad_offsets();
        let back = crop_to_original(&padded.annotation, (h, w), offsets).unwrap();
        assert_eq!(back, annotation, "criterion 6: annotation round trip {h}x{w}");
        for c in 0..3 {
            let plane = padded.image.index_axis(ndarray::Axis(2), c).to_owned();
            let back = crop_to_original(&plane, (h, w), offsets).unwrap();
            assert_eq!(
                back,
                image.index_axis(ndarray::Axis(2), c).to_owned(),
                "criterion 6: image channel {c} round trip {h}x{w}"
            );
        }
    }
    println!("criterion 06 padding round trips (592/1008/704) ... pass");
}

#[test]
fn criterion_07_phase_two_leaves_the_backbone_bitwise_intact() {
    let _cpu = HEAVY.lock().unwrap();
    let mut r = rng(10);
    let train: Vec<RetinalSample> = (0..2)
        .map(|_| sample_from(random_image(16, 16, &mut r), random_mask(16, 16, &mut r)))
        .collect();
    let val = vec![sample_from(random_image(16, 16, &mut r), random_mask(16, 16, &mut r))];
    let weights = LossWeights::default();
    let sched = |phase| TrainSchedule {
        phase,
        initial_lr: 1e-3,
        decay_factor: 10.0,
        decay_every: 50,
        total_epochs: 2,
        batch_size: 1,
        seed: 11,
    };

    let cfg = ModelConfig {
        base_channels: 4,
        tail_enabled: false,
        ..ModelConfig::default()
    };
    let mut backbone = DrVNet::new(&cfg, &mut substream(11, Stream::Init)).unwrap();
    let phase1 = train_phase1(
        &mut backbone,
        &train,
        &val,
        &weights,
        &sched(Phase::Backbone),
        None,
    )
    .unwrap();

    let full_cfg = ModelConfig { tail_enabled: true, ..cfg };
    let mut full = DrVNet::new(&full_cfg, &mut substream(11, Stream::Init)).unwrap();
    let phase2 = train_phase2(
        &mut full,
        &phase1.best,
        &train,
        &val,
        &weights,
        &sched(Phase::Tail),
        None,
    )
    .unwrap();

    let before = phase1.best.param_digest("backbone/");
    for (label, ckpt) in [("best", &phase2.best), ("last", &phase2.last)] {
        assert_eq!(
            ckpt.param_digest("backbone/"),
            before,
            "criterion 7: backbone digest drifted in phase-2 {label}"
        );
    }
    // Digest equality already implies it, but compare the raw tensors
    // too so a digest bug cannot mask a drift.
    let mut compared = 0usize;
    for (name, tensor) in &phase2.last.params {
        if let Some(reference) = phase1.best.params.get(name) {
            if name.starts_with("backbone/") {
                assert_eq!(tensor, reference, "criterion 7: {name} changed");
                compared += 1;
            }
        }
    }
    assert!(compared > 0, "criterion 7: no backbone tensors compared");
    println!("criterion 07 two-phase freeze ({compared} tensors bitwise equal) ... pass");
}

#[test]
fn criterion_08_overfits_a_single_symmetric_patch() {
    let _cpu = HEAVY.lock().unwrap();
    // A disk centred on the patch is invariant under the whole dihedral
    // augmentation group, so every augmented copy equals the original
    // and 200 steps see one consistent target.
    let side = 64usize;
    let c = (side as f64 - 1.0) / 2.0;
    let annotation = Array2::from_shape_fn((side, side), |(y, x)| {
        let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
        if d2 <= 18.0 * 18.0 {
            1.0
        } else {
            0.0
        }
    });
    let image = Array3::from_shape_fn((side, side, 3), |(y, x, _)| {
        0.1 + 0.8 * annotation[(y, x)]
    });
    let sample = sample_from(image, annotation.clone());
    for draw in 0..8 {
        let aug = augment(&sample, &mut rng(20 + draw));
        assert_eq!(aug.image, sample.image, "criterion 8: patch not symmetric");
        assert_eq!(aug.annotation, sample.annotation, "criterion 8");
    }

    let cfg = ModelConfig {
        base_channels: 8,
        dropout_rate: 0.0,
        tail_enabled: false,
        ..ModelConfig::default()
    };
    let mut model = DrVNet::new(&cfg, &mut substream(12, Stream::Init)).unwrap();
    let sched = TrainSchedule {
        phase: Phase::Backbone,
        initial_lr: 1e-3,
        decay_factor: 10.0,
        decay_every: 200,
        total_epochs: 200,
        batch_size: 1,
        seed: 12,
    };
    let started = Instant::now();
    let out = train_phase1(
        &mut model,
        std::slice::from_ref(&sample),
        &[],
        &LossWeights::default(),
        &sched,
        None,
    )
    .unwrap();
    let secs = started.elapsed().as_secs_f64();
    assert!(secs < 300.0, "criterion 8: took {secs:.0} s (budget 300 s)");

    let first = out.history.first().unwrap().train_total;
    let last = out.history.last().unwrap().train_total;
    assert!(
        last <= 0.1 * first,
        "criterion 8: loss only fell {first:.4} -> {last:.4}"
    );

    let (map, _) = model.forward_full(&sample.image).unwrap();
    let mask = binarize(&map, 0.5).unwrap();
    let inter = (&mask * &annotation).sum();
    let dice = 2.0 * inter / (mask.sum() + annotation.sum());
    assert!(dice > 0.9, "criterion 8: post-threshold Dice {dice:.4}");
    println!(
        "criterion 08 overfit smoke (loss {first:.4} -> {last:.4}, Dice {dice:.3}, {secs:.0} s) ... pass"
    );
}

#[test]
fn criterion_09_learning_rate_plateaus() {
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * b.abs();
    let sched = TrainSchedule::for_phase(Phase::Backbone, Dataset::Drive, 0);
    assert_eq!(sched.total_epochs, 150, "criterion 9");
    assert_eq!(sched.lr_at(0).unwrap(), 1e-3, "criterion 9");
    for (epoch, lr) in [(0, 1e-3), (49, 1e-3), (50, 1e-4), (99, 1e-4), (100, 1e-5), (149, 1e-5)] {
        let got = sched.lr_at(epoch).unwrap();
        assert!(close(got, lr), "criterion 9: epoch {epoch} lr {got} want {lr}");
    }
    let tail = TrainSchedule::for_phase(Phase::Tail, Dataset::Drive, 0);
    assert_eq!(tail.total_epochs, 100, "criterion 9");
    assert!(close(tail.lr_at(99).unwrap(), 1e-4), "criterion 9: tail decay");

    // The logged records carry exactly the scheduled rate.
    let mut r = rng(13);
    let train = vec![sample_from(random_image(16, 16, &mut r), random_mask(16, 16, &mut r))];
    let cfg = ModelConfig {
        base_channels: 4,
        tail_enabled: false,
        ..ModelConfig::default()
    };
    let mut model = DrVNet::new(&cfg, &mut substream(13, Stream::Init)).unwrap();
    let two = TrainSchedule {
        total_epochs: 2,
        batch_size: 1,
        ..TrainSchedule::for_phase(Phase::Backbone, Dataset::Drive, 13)
    };
    let out = train_phase1(&mut model, &train, &[], &LossWeights::default(), &two, None).unwrap();
    for rec in &out.history {
        assert_eq!(
            rec.lr,
            two.lr_at(rec.epoch as i64).unwrap(),
            "criterion 9: logged lr diverges at epoch {}",
            rec.epoch
        );
    }
    println!("criterion 09 learning-rate plateaus 1e-3/1e-4/1e-5 at 0/50/100 ... pass");
}
