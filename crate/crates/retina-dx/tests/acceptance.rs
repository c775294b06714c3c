//! Release gate: one test per acceptance criterion, each printing a single
//! verdict line (run with `--nocapture` to see them in passing runs).

use std::path::PathBuf;
use std::process::Command;

use retina_dx::checkpoint::{checkpoint_bytes, load_checkpoint_bytes};
use retina_dx::clahe::{clahe, ClaheParams};
use retina_dx::data::{split_indices, Label};
use retina_dx::gradcheck::grad_check;
use retina_dx::image::preprocess;
use retina_dx::layers::{build_network, conv2d_forward, LayerSpec, Mode, NetworkConfig, PoolMode};
use retina_dx::oracle::{direct_conv2d, reference_clahe};
use retina_dx::pnm;
use retina_dx::rng::Rng;
use retina_dx::synth::synth_fundus;
use retina_dx::tensor::Tensor;
use retina_dx::train::{train, LabeledSet, TrainingConfig};
use retina_dx::Image8;

fn verdict(number: usize, name: &str, pass: bool, detail: &str) {
    let word = if pass { "PASS" } else { "FAIL" };
    println!("ACCEPTANCE {number} ({name}): {word}{detail}");
    assert!(pass, "criterion {number} ({name}) failed: {detail}");
}

// ---------------------------------------------------------------------------
// 1. Gradient correctness: full shrunk stack < 1e-3, single-layer stacks
//    < 1e-4, all in 64-bit mode.
#[test]
fn criterion_1_gradient_correctness() {
    let full = grad_check(&NetworkConfig::gradcheck_variant("table1").unwrap(), 1e-3, 3).unwrap();

    // Minimal stacks isolating each layer kind in front of the classifier
    // head; these must clear the tighter per-layer bar.
    let head = || vec![LayerSpec::Fc { output_size: 2 }, LayerSpec::Softmax];
    let conv = |n: usize| LayerSpec::Conv {
        filter_h: 3,
        filter_w: 3,
        num_filters: n,
        stride: 1,
        pad: 0,
    };
    let mini = |name: &str, mut layers: Vec<LayerSpec>| {
        layers.extend(head());
        NetworkConfig {
            name: name.into(),
            input: [2, 6, 6],
            layers,
        }
    };
    let per_layer = [
        mini("fc-only", vec![]),
        mini("conv", vec![conv(3)]),
        mini("batchnorm", vec![conv(3), LayerSpec::Batchnorm { epsilon: 1e-5 }]),
        mini("relu", vec![conv(3), LayerSpec::Relu]),
        mini(
            "maxpool",
            vec![
                conv(3),
                LayerSpec::Maxpool {
                    pool_h: 2,
                    pool_w: 2,
                    stride: 2,
                    pad: 0,
                    mode: PoolMode::Max,
                },
            ],
        ),
        mini(
            "dropout",
            vec![
                LayerSpec::Fc { output_size: 6 },
                LayerSpec::Dropout { probability: 0.3 },
            ],
        ),
    ];
    let mut worst_layer: (f64, String) = (0.0, String::new());
    for config in &per_layer {
        let report = grad_check(config, 1e-4, 17).unwrap();
        if report.max_rel_err() > worst_layer.0 {
            worst_layer = (report.max_rel_err(), config.name.clone());
        }
    }

    let pass = full.passed() && worst_layer.0 < 1e-4;
    verdict(
        1,
        "gradient-correctness",
        pass,
        &format!(
            " (full-stack max rel err {:.2e} < 1e-3; worst single-layer {:.2e} [{}] < 1e-4)",
            full.max_rel_err(),
            worst_layer.0,
            worst_layer.1
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. CLAHE equals the brute-force oracle within ±1 intensity level on 100
//    seeded random 32×32 images, for 2×2 and 8×8 tile grids.
#[test]
fn criterion_2_clahe_oracle_equivalence() {
    let mut worst = 0u8;
    let mut checked = 0usize;
    for seed in 0..100u64 {
        let mut rng = Rng::new(seed);
        let pixels: Vec<u8> = (0..32 * 32).map(|_| rng.index(256) as u8).collect();
        let img = Image8::new(32, 32, 1, pixels).unwrap();
        for tiles in [2usize, 8] {
            let p = ClaheParams {
                tiles_x: tiles,
                tiles_y: tiles,
                clip_limit: 0.01,
                bins: 256,
            };
            let fast = clahe(&img, &p).unwrap();
            let slow = reference_clahe(&img, &p);
            for (a, b) in fast.pixels().iter().zip(slow.pixels()) {
                let d = a.abs_diff(*b);
                worst = worst.max(d);
            }
            checked += 1;
        }
    }
    verdict(
        2,
        "clahe-oracle-equivalence",
        worst <= 1,
        &format!(" (max |Δ| {worst} ≤ 1 over {checked} image/grid pairs)"),
    );
}

// ---------------------------------------------------------------------------
// 3. conv2d_forward equals the sliding-window oracle within 1e-6 absolute
//    on 50 random shapes.
#[test]
fn criterion_3_convolution_oracle_equivalence() {
    let mut worst = 0.0f64;
    for seed in 0..50u64 {
        let mut rng = Rng::new(1000 + seed);
        let n = 1 + rng.index(3);
        let cin = 1 + rng.index(4);
        let cout = 1 + rng.index(5);
        let kh = 1 + rng.index(3);
        let kw = 1 + rng.index(3);
        let stride = 1 + rng.index(2);
        let pad = rng.index(2);
        // Pick input sizes that land on an integral output grid; the pad is
        // clamped so both spatial dims stay at least 1.
        let ho = 1 + rng.index(5);
        let wo = 1 + rng.index(5);
        let p = pad.min((kh - 1) / 2).min((kw - 1) / 2);
        let h = (ho - 1) * stride + kh - 2 * p;
        let w = (wo - 1) * stride + kw - 2 * p;

        let x: Tensor<f32> = Tensor::from_fn(&[n, cin, h, w], || rng.uniform_in(-1.0, 1.0) as f32);
        let k: Tensor<f32> =
            Tensor::from_fn(&[cout, cin, kh, kw], || rng.uniform_in(-1.0, 1.0) as f32);
        let b: Tensor<f32> = Tensor::from_fn(&[cout], || rng.uniform_in(-1.0, 1.0) as f32);

        let fast = conv2d_forward(&x, &k, &b, stride, p).unwrap();
        let slow = direct_conv2d(&x, &k, &b, stride, p).unwrap();
        for (a, o) in fast.data().iter().zip(slow.data()) {
            worst = worst.max((a - o).abs() as f64);
        }
    }
    verdict(
        3,
        "convolution-oracle-equivalence",
        worst < 1e-6,
        &format!(" (max |Δ| {worst:.2e} < 1e-6 over 50 shapes)"),
    );
}

// ---------------------------------------------------------------------------
// 4. Overfit: 20 synthetic images (10 per class), the full-size two-block
//    network, lr 0.01, momentum 0.9, batch 4 → 100% training accuracy within
//    200 epochs.
#[test]
fn criterion_4_synthetic_overfit() {
    let clahe_params = ClaheParams::default();
    let mut set = LabeledSet::new();
    for label in [Label::Healthy, Label::DrSigns] {
        for seed in 0..10u64 {
            let img = synth_fundus(label, seed, 64).unwrap();
            let t = preprocess(&img, &clahe_params, 64).unwrap();
            set.push(t, label.index()).unwrap();
        }
    }

    let config = NetworkConfig::preset("table1").unwrap();
    let mut net = build_network::<f32>(&config, 7).unwrap();
    let empty = LabeledSet::new();
    let mut epochs_run = 0usize;
    let mut reached = None;
    let mut first_epoch_loss = None;
    let mut loss_dropped = false;
    // Train in 10-epoch slices so the run can stop as soon as the training
    // set is fully memorized. The learning rate holds at 0.01 throughout
    // (drop period beyond the slice length).
    'outer: while epochs_run < 200 {
        let cfg = TrainingConfig {
            initial_lr: 0.01,
            momentum: 0.9,
            batch_size: 4,
            max_epochs: 10,
            lr_drop_period_epochs: 1000,
            seed: 7 + epochs_run as u64,
            ..TrainingConfig::default()
        };
        let records = train(&mut net, &set, &empty, &cfg).unwrap();
        for r in &records {
            epochs_run += 1;
            match first_epoch_loss {
                None => first_epoch_loss = Some(r.train_loss),
                Some(first) if r.train_loss < first => loss_dropped = true,
                _ => {}
            }
            if r.train_accuracy == 1.0 {
                reached = Some(epochs_run);
                break 'outer;
            }
        }
    }

    let pass = reached.is_some() && loss_dropped;
    verdict(
        4,
        "synthetic-overfit",
        pass,
        &match reached {
            Some(e) => format!(" (100% training accuracy at epoch {e} ≤ 200; loss fell below epoch 1: {loss_dropped})"),
            None => format!(" (still below 100% after {epochs_run} epochs)"),
        },
    );
}

// ---------------------------------------------------------------------------
// Shared helpers for the CLI-level criteria: a tiny on-disk dataset of
// synthetic images plus a run configuration.
fn write_synth_dataset(dir: &std::path::Path, per_class: usize, size: usize) -> PathBuf {
    let mut rows = String::from("path,label\n");
    for label in [Label::Healthy, Label::DrSigns] {
        for seed in 0..per_class as u64 {
            let img = synth_fundus(label, seed, size).unwrap();
            let name = format!("{}_{seed}.ppm", label.token());
            pnm::write_file(&dir.join(&name), &img).unwrap();
            rows.push_str(&format!("{name},{}\n", label.token()));
        }
    }
    let manifest = dir.join("manifest.csv");
    std::fs::write(&manifest, rows).unwrap();
    manifest
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_retina-dx"))
}

// ---------------------------------------------------------------------------
// 5. Determinism: cmd_train twice with the same config and seed gives
//    byte-identical metrics.csv and final checkpoints.
#[test]
fn criterion_5_training_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synth_dataset(dir.path(), 5, 48);

    let run = |out: &str| {
        let out_dir = dir.path().join(out);
        let status = binary()
            .args([
                "train",
                "--manifest",
                manifest.to_str().unwrap(),
                "--out",
                out_dir.to_str().unwrap(),
                "--input-size",
                "32",
                "--epochs",
                "3",
                "--batch-size",
                "4",
                "--seed",
                "11",
            ])
            .status()
            .unwrap();
        assert!(status.success(), "training run failed");
        (
            std::fs::read(out_dir.join("metrics.csv")).unwrap(),
            std::fs::read(out_dir.join("model.rdxc")).unwrap(),
        )
    };
    let (metrics_a, model_a) = run("a");
    let (metrics_b, model_b) = run("b");

    let pass = metrics_a == metrics_b && model_a == model_b;
    verdict(
        5,
        "training-determinism",
        pass,
        &format!(
            " (metrics identical: {}; checkpoints identical: {})",
            metrics_a == metrics_b,
            model_a == model_b
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Schedule conformance: the lr column of a 20-epoch run equals
//    initial_lr·0.2^floor((epoch−1)/5) exactly.
#[test]
fn criterion_6_lr_schedule_conformance() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_synth_dataset(dir.path(), 4, 48);
    let out_dir = dir.path().join("out");
    let status = binary()
        .args([
            "train",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            out_dir.to_str().unwrap(),
            "--input-size",
            "32",
            "--batch-size",
            "4",
            "--seed",
            "2",
        ])
        .status()
        .unwrap();
    assert!(status.success(), "training run failed");

    let text = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    let mut exact = lines.len() == 21 && lines[0] == "epoch,lr,train_loss,train_acc,val_acc";
    let mut detail = format!("{} lines", lines.len());
    if exact {
        for (i, line) in lines[1..].iter().enumerate() {
            let epoch = i + 1;
            let fields: Vec<&str> = line.split(',').collect();
            let got: f64 = fields[1].parse().unwrap();
            let want = 0.01 * 0.2f64.powi(((epoch - 1) / 5) as i32);
            if got != want || fields[0] != epoch.to_string() {
                exact = false;
                detail = format!("epoch {epoch}: lr {got:e} != {want:e}");
                break;
            }
        }
    }
    if exact {
        detail = "header + 20 epochs, every lr bit-exact to initial_lr·0.2^floor((epoch−1)/5)"
            .to_string();
    }
    verdict(6, "lr-schedule-conformance", exact, &format!(" ({detail})"));
}

// ---------------------------------------------------------------------------
// 7. Checkpoint integrity: save→load→save byte-identical; predictions on 10
//    inputs bit-identical across a reload.
#[test]
fn criterion_7_checkpoint_integrity() {
    let config = NetworkConfig::preset("table1_shrunk").unwrap();
    let mut net = build_network::<f32>(&config, 5).unwrap();
    // A couple of training steps populate batchnorm running statistics so
    // inference mode is defined.
    let mut rng = Rng::new(99);
    let mut set = LabeledSet::new();
    for i in 0..8 {
        set.push(
            Tensor::from_fn(&[3, 8, 8], || rng.uniform_in(0.0, 1.0) as f32),
            i % 2,
        )
        .unwrap();
    }
    let cfg = TrainingConfig {
        max_epochs: 2,
        batch_size: 4,
        ..TrainingConfig::default()
    };
    train(&mut net, &set, &LabeledSet::new(), &cfg).unwrap();

    let inputs: Vec<Tensor<f32>> = (0..10)
        .map(|_| Tensor::from_fn(&[1, 3, 8, 8], || rng.uniform_in(0.0, 1.0) as f32))
        .collect();
    let predict = |net: &mut retina_dx::Network<f32>| -> Vec<Vec<f32>> {
        inputs
            .iter()
            .map(|x| net.forward(x, Mode::Inference).unwrap().data().to_vec())
            .collect()
    };

    let before = predict(&mut net);
    let bytes_1 = checkpoint_bytes(&net).unwrap();
    let mut reloaded = load_checkpoint_bytes(&bytes_1).unwrap();
    let bytes_2 = checkpoint_bytes(&reloaded).unwrap();
    let after = predict(&mut reloaded);

    let pass = bytes_1 == bytes_2 && before == after;
    verdict(
        7,
        "checkpoint-integrity",
        pass,
        &format!(
            " (save→load→save identical: {}; 10 predictions bit-identical: {})",
            bytes_1 == bytes_2,
            before == after
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Split protocol: 130 → 104/26, and partition properties for every N in
//    2..=500.
#[test]
fn criterion_8_split_protocol() {
    let s130 = split_indices(130, 42).unwrap();
    let headline = s130.train.len() == 104 && s130.test.len() == 26;

    let mut properties = true;
    for n in 2..=500usize {
        let s = split_indices(n, n as u64).unwrap();
        let mut all: Vec<usize> = s.train.iter().chain(&s.test).copied().collect();
        all.sort_unstable();
        if s.train.len() != n * 8 / 10
            || s.train.is_empty()
            || s.test.is_empty()
            || all != (0..n).collect::<Vec<_>>()
        {
            properties = false;
            break;
        }
    }
    verdict(
        8,
        "split-protocol",
        headline && properties,
        &format!(" (130→{}/{}; partition holds for N=2..=500: {properties})", s130.train.len(), s130.test.len()),
    );
}

// ---------------------------------------------------------------------------
// 9. Optional real-data smoke test, gated on RETINA_DX_DIARETDB0 pointing at
//    a prepared directory (a manifest.csv of ppm/pgm files, or a normals.txt
//    list, or healthy/ and dr_signs/ subdirectories).
#[test]
fn criterion_9_real_data_end_to_end() {
    let root = match std::env::var_os("RETINA_DX_DIARETDB0") {
        Some(v) => PathBuf::from(v),
        None => {
            println!("ACCEPTANCE 9 (real-data-end-to-end): SKIP (RETINA_DX_DIARETDB0 not set)");
            return;
        }
    };

    let manifest = if root.join("manifest.csv").exists() {
        retina_dx::load_manifest(&root.join("manifest.csv")).unwrap()
    } else if root.join("normals.txt").exists() {
        let rule = retina_dx::LabelRule::NormalList {
            list_file: root.join("normals.txt"),
        };
        retina_dx::ingest_directory(&root, &rule).unwrap().0
    } else {
        let rule = retina_dx::LabelRule::Subdirs {
            healthy_dir: "healthy".into(),
            dr_signs_dir: "dr_signs".into(),
        };
        retina_dx::ingest_directory(&root, &rule).unwrap().0
    };

    let clahe_params = ClaheParams::default();
    let split = retina_dx::split_80_20(&manifest, 42).unwrap();
    let load = |indices: &[usize]| -> LabeledSet {
        let mut set = LabeledSet::new();
        for &i in indices {
            let (rel, label) = &manifest.entries[i];
            let img = pnm::read_file(&root.join(rel)).unwrap();
            let t = preprocess(&img, &clahe_params, 64).unwrap();
            set.push(t, label.index()).unwrap();
        }
        set
    };
    let train_set = load(&split.train);
    let test_set = load(&split.test);

    let config = NetworkConfig::preset("table1").unwrap();
    let mut net = build_network::<f32>(&config, 42).unwrap();
    train(&mut net, &train_set, &test_set, &TrainingConfig::default()).unwrap();
    let (accuracy, _) = retina_dx::evaluate(&mut net, &test_set).unwrap();

    verdict(
        9,
        "real-data-end-to-end",
        accuracy >= 0.85,
        &format!(" (test accuracy {accuracy:.4} ≥ 0.85 on {} held-out images)", test_set.len()),
    );
}
