//! Acceptance suite: one test per numbered criterion, each printing one
//! pass/fail line (run with `-- --nocapture` to see them).
//!
//! Real MNIST/CIFAR files are not assumed; the MNIST-subset role is played
//! by the rendered digit-glyph dataset and the second dataset is the
//! structured-gratings generator, both offline and deterministic. When
//! FEDLEAK_DATA_DIR points at real MNIST files they are used instead.

use std::collections::HashMap;
use std::path::PathBuf;

use fedleak::aggregate::AggregationKind;
use fedleak::attack::{
    capture_gradient, infer_label, input_gradient_of_matching_loss, run_attack, AttackConfig,
    MaskedTargets,
};
use fedleak::graph::{GraphBuilder, Padding};
use fedleak::harness::{
    run_convergence, run_threshold_sweep, DatasetKind, DatasetSpec, ExperimentConfig, ModelArch,
};
use fedleak::nn::{compile, init_params, BnMode, ModelConfig, ParameterBundle};
use fedleak::obfuscate::{
    clip, mask, noise, obfuscate, prune, ObfuscationMethod, ObfuscationSpec,
};
use fedleak::protocol::{run_training, PartitionSpec, RoundConfig};
use fedleak::rng;
use fedleak::tensor::{Precision, Tensor};

fn pass(criterion: u32, detail: &str) {
    println!("criterion {criterion}: PASS - {detail}");
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| rng::unit_uniform(seed, i as u64) * 2.0 - 1.0)
        .collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn out_dir(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join("fedleak_acceptance").join(name);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn median(mut v: Vec<f64>) -> f64 {
    assert!(!v.is_empty());
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// The MNIST-subset stand-in: real MNIST when FEDLEAK_DATA_DIR has the IDX
/// files, otherwise the offline digit glyphs.
fn mnist_stand_in() -> (DatasetKind, &'static str) {
    if let Some(dir) = std::env::var_os("FEDLEAK_DATA_DIR") {
        let dir = PathBuf::from(dir);
        if dir.join("train-images-idx3-ubyte").exists() {
            return (DatasetKind::Mnist, "mnist");
        }
    }
    (DatasetKind::Digits, "digits")
}

// ---------------------------------------------------------------- 1

#[test]
fn criterion_01_differentiation_matches_finite_differences() {
    let started = std::time::Instant::now();
    let h = 1e-5;
    let tol = 1e-4;
    let mut worst: f64 = 0.0;

    let fd_check = |graph: &fedleak::graph::Graph,
                    feeds: &HashMap<String, Tensor>,
                    root: usize,
                    wrt: &[(usize, &str)],
                    worst: &mut f64| {
        let values = graph.evaluate(feeds).unwrap();
        let ids: Vec<usize> = wrt.iter().map(|(id, _)| *id).collect();
        let grads = graph.gradients(&values, root, &ids).unwrap();
        for ((_, name), grad) in wrt.iter().zip(&grads) {
            let base = &feeds[*name];
            for i in 0..base.len() {
                let probe = |delta: f64| -> f64 {
                    let mut f = feeds.clone();
                    f.get_mut(*name).unwrap().data_mut()[i] += delta;
                    graph.evaluate(&f).unwrap().get(root).item()
                };
                let fd = (probe(h) - probe(-h)) / (2.0 * h);
                let rel = (grad.data()[i] - fd).abs() / fd.abs().max(1e-6);
                *worst = worst.max(rel);
                assert!(rel < tol, "{name}[{i}]: rel {rel}");
            }
        }
    };

    // every supported model op in small dedicated graphs
    for &(ta, tb) in &[(false, false), (true, false), (false, true), (true, true)] {
        let mut b = GraphBuilder::new(Precision::F64);
        let sa = if ta { [3, 2] } else { [2, 3] };
        let sb = if tb { [4, 3] } else { [3, 4] };
        let a = b.leaf("a", &sa).unwrap();
        let bb = b.leaf("b", &sb).unwrap();
        let mm = b.matmul(a, bb, ta, tb).unwrap();
        let sq = b.mul(mm, mm).unwrap();
        let root = b.sum(sq).unwrap();
        let graph = b.finish(vec![]).unwrap();
        let feeds = HashMap::from([
            ("a".to_string(), rand_tensor(&sa, 1)),
            ("b".to_string(), rand_tensor(&sb, 2)),
        ]);
        fd_check(&graph, &feeds, root, &[(a, "a"), (bb, "b")], &mut worst);
    }
    for padding in [Padding::Same, Padding::Valid] {
        let mut b = GraphBuilder::new(Precision::F64);
        let x = b.leaf("x", &[1, 2, 4, 4]).unwrap();
        let k = b.leaf("k", &[2, 2, 3, 3]).unwrap();
        let conv = b.conv2d(x, k, padding).unwrap();
        let act = b.relu(conv).unwrap();
        let sq = b.mul(act, act).unwrap();
        let root = b.sum(sq).unwrap();
        let graph = b.finish(vec![]).unwrap();
        let feeds = HashMap::from([
            ("x".to_string(), rand_tensor(&[1, 2, 4, 4], 3)),
            ("k".to_string(), rand_tensor(&[2, 2, 3, 3], 4)),
        ]);
        fd_check(&graph, &feeds, root, &[(x, "x"), (k, "k")], &mut worst);
    }
    {
        // batch-norm primitives + pooling + bias + fused softmax-CE
        let mut b = GraphBuilder::new(Precision::F64);
        let x = b.leaf("x", &[2, 2, 4, 4]).unwrap();
        let gamma = b.leaf("gamma", &[2]).unwrap();
        let beta = b.leaf("beta", &[2]).unwrap();
        let var = b.leaf("var", &[2]).unwrap();
        let mean = b.leaf("mean", &[2]).unwrap();
        let inv = b.rsqrt_eps(var, 1e-5).unwrap();
        let gain = b.mul(gamma, inv).unwrap();
        let centered = b.sub_channel(x, mean).unwrap();
        let scaled = b.mul_channel(centered, gain).unwrap();
        let bn = b.add_channel(scaled, beta).unwrap();
        let pooled = b.avg_pool2(bn).unwrap();
        let flat = b.reshape(pooled, &[2, 8]).unwrap();
        let w = b.leaf("w", &[8, 3]).unwrap();
        let bias = b.leaf("bias", &[3]).unwrap();
        let mm = b.matmul(flat, w, false, false).unwrap();
        let logits = b.add_bias(mm, bias).unwrap();
        let mut onehot = Tensor::zeros(&[2, 3]);
        onehot.data_mut()[1] = 1.0;
        onehot.data_mut()[3 + 2] = 1.0;
        let t = b.constant(onehot).unwrap();
        let root = b.softmax_cross_entropy(logits, t).unwrap();
        let graph = b.finish(vec![]).unwrap();
        let mut var_t = rand_tensor(&[2], 8);
        for v in var_t.data_mut() {
            *v = v.abs() + 0.5;
        }
        let feeds = HashMap::from([
            ("x".to_string(), rand_tensor(&[2, 2, 4, 4], 5)),
            ("gamma".to_string(), rand_tensor(&[2], 6)),
            ("beta".to_string(), rand_tensor(&[2], 7)),
            ("var".to_string(), var_t),
            ("mean".to_string(), rand_tensor(&[2], 9)),
            ("w".to_string(), rand_tensor(&[8, 3], 10)),
            ("bias".to_string(), rand_tensor(&[3], 11)),
        ]);
        fd_check(
            &graph,
            &feeds,
            root,
            &[(x, "x"), (gamma, "gamma"), (beta, "beta"), (var, "var"), (w, "w"), (bias, "bias")],
            &mut worst,
        );
    }

    // three random composed CNN graphs through the model compiler
    for seed in [21u64, 22, 23] {
        let config = ModelConfig::default_cnn((1, 8, 8), 3, seed);
        let model = compile(&config, 2, BnMode::Batch, true).unwrap();
        let params = init_params(&config).unwrap();
        let mut feeds = params.to_feeds();
        let imgs = rand_tensor(&[2, 1, 8, 8], seed + 100);
        let mut onehot = Tensor::zeros(&[2, 3]);
        onehot.data_mut()[0] = 1.0;
        onehot.data_mut()[3 + 1] = 1.0;
        feeds.insert("input".into(), imgs);
        feeds.insert("targets".into(), onehot);
        let wrt: Vec<(usize, &str)> = model
            .params
            .iter()
            .filter(|(n, _)| !n.ends_with(".running_mean") && !n.ends_with(".running_var"))
            .map(|(n, id)| (*id, n.as_str()))
            .collect();
        fd_check(&model.graph, &feeds, model.loss.unwrap(), &wrt, &mut worst);
    }

    assert!(started.elapsed().as_secs() < 60, "criterion 1 runtime");
    pass(1, &format!("max relative error {worst:.2e} < 1e-4 across ops and 3 CNN graphs"));
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_02_second_order_matches_finite_differences() {
    let started = std::time::Instant::now();
    let mut worst: f64 = 0.0;
    let configs = [
        ModelConfig::new((1, 2, 3), 3, vec![], 31),
        ModelConfig::new(
            (1, 4, 4),
            3,
            vec![
                fedleak::nn::LayerSpec::conv(2, 3),
                fedleak::nn::LayerSpec::relu(),
                fedleak::nn::LayerSpec::pool(),
            ],
            32,
        ),
    ];
    for config in configs {
        let params = init_params(&config).unwrap();
        let (c, h, w) = config.input;
        let source = {
            let data = (0..c * h * w)
                .map(|i| rng::unit_uniform(33, i as u64))
                .collect();
            Tensor::from_vec(&[c, h, w], data).unwrap()
        };
        let capture =
            capture_gradient(&config, &params, &source, 1, &ObfuscationSpec::none()).unwrap();
        let dummy = {
            let data = (0..c * h * w)
                .map(|i| rng::unit_uniform(34, i as u64))
                .collect();
            Tensor::from_vec(&[c, h, w], data).unwrap()
        };
        let got =
            input_gradient_of_matching_loss(&config, &params, &dummy, 1, &capture.targets)
                .unwrap();
        let matching_at = |img: &Tensor| -> f64 {
            let probe =
                capture_gradient(&config, &params, img, 1, &ObfuscationSpec::none()).unwrap();
            probe
                .targets
                .flatten()
                .iter()
                .zip(capture.targets.flatten().iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum()
        };
        let step = 1e-5;
        for i in 0..dummy.len() {
            let mut plus = dummy.clone();
            plus.data_mut()[i] += step;
            let mut minus = dummy.clone();
            minus.data_mut()[i] -= step;
            let fd = (matching_at(&plus) - matching_at(&minus)) / (2.0 * step);
            let rel = (got.data()[i] - fd).abs() / fd.abs().max(1e-6);
            worst = worst.max(rel);
            assert!(rel < 1e-3, "input {:?} pixel {i}: rel {rel}", config.input);
        }
    }
    assert!(started.elapsed().as_secs() < 60, "criterion 2 runtime");
    pass(2, &format!(
        "input gradient of the matching loss matches finite differences, max rel {worst:.2e} < 1e-3"
    ));
}

// ---------------------------------------------------------------- 3

#[test]
fn criterion_03_closed_form_inversion_and_label_extraction() {
    let started = std::time::Instant::now();

    // analytic label extraction, 100/100 random trials
    let mut correct = 0;
    for case in 0..100u64 {
        let config = ModelConfig::new((1, 2, 2), 4, vec![], case);
        let params = init_params(&config).unwrap();
        let image = {
            let data = (0..4)
                .map(|i| rng::unit_uniform(500 + case, i as u64))
                .collect();
            Tensor::from_vec(&[1, 2, 2], data).unwrap()
        };
        let label = (rng::unit_uniform(case, 9) * 4.0) as usize;
        let cap =
            capture_gradient(&config, &params, &image, label, &ObfuscationSpec::none()).unwrap();
        if infer_label(&cap).unwrap() == label {
            correct += 1;
        }
    }
    assert_eq!(correct, 100, "label inference {correct}/100");

    // reconstruction within 1e-3 per pixel of G_W[k,:]/G_b[k]
    let config = ModelConfig::new((1, 2, 2), 3, vec![], 777);
    let params = init_params(&config).unwrap();
    let image = {
        let data = (0..4).map(|i| rng::unit_uniform(888, i as u64)).collect();
        Tensor::from_vec(&[1, 2, 2], data).unwrap()
    };
    let cap = capture_gradient(&config, &params, &image, 2, &ObfuscationSpec::none()).unwrap();
    let g_w = cap.targets.get("head.weight").unwrap();
    let g_b = cap.targets.get("head.bias").unwrap();
    let k = (0..3)
        .max_by(|&a, &b| g_b.data()[a].abs().total_cmp(&g_b.data()[b].abs()))
        .unwrap();
    let analytic: Vec<f64> = (0..4).map(|i| g_w.data()[i * 3 + k] / g_b.data()[k]).collect();
    let attack_cfg = AttackConfig {
        lr: 0.01,
        weight_decay: 0.0,
        max_iterations: 12_000,
        checkpoint_interval: 100,
        seed: 5,
        ..AttackConfig::default()
    };
    let out = run_attack(&config, &cap, &attack_cfg).unwrap();
    let mut worst: f64 = 0.0;
    for (got, want) in out.reconstruction.data().iter().zip(&analytic) {
        worst = worst.max((got - want).abs());
        assert!((got - want).abs() < 1e-3, "pixel {got} vs analytic {want}");
    }
    assert_eq!(out.label, 2);
    assert!(started.elapsed().as_secs() < 120, "criterion 3 runtime");
    pass(3, &format!(
        "labels 100/100; reconstruction within {worst:.1e} (< 1e-3) of the closed-form inversion"
    ));
}

// ---------------------------------------------------------------- 4

#[test]
fn criterion_04_aggregation_matches_scalar_loop_oracle() {
    // independent per-coordinate oracle, written against the documented
    // contract (sorted contributors, identical-value shortcut, fallback)
    fn oracle(columns: &[Vec<f64>], kind: AggregationKind, fallback: &[f64]) -> Vec<f64> {
        let mut out = Vec::new();
        for coord in 0..fallback.len() {
            let mut vals = Vec::new();
            for col in columns {
                if !col[coord].is_nan() {
                    vals.push(col[coord]);
                }
            }
            if vals.is_empty() {
                out.push(fallback[coord]);
                continue;
            }
            vals.sort_by(f64::total_cmp);
            out.push(match kind {
                AggregationKind::Mean => {
                    if vals[0] == vals[vals.len() - 1] {
                        vals[0]
                    } else {
                        let mut s = 0.0;
                        for v in &vals {
                            s += v;
                        }
                        s / vals.len() as f64
                    }
                }
                AggregationKind::Median => {
                    let m = vals.len() / 2;
                    if vals.len() % 2 == 1 {
                        vals[m]
                    } else {
                        (vals[m - 1] + vals[m]) / 2.0
                    }
                }
            });
        }
        out
    }

    use fedleak::aggregate::{aggregate, AggregationSpec};
    use fedleak::nn::BundleEntry;
    let bundle_from = |data: Vec<f64>| -> ParameterBundle {
        ParameterBundle::new(vec![BundleEntry {
            name: "w".into(),
            tensor: Tensor::from_vec(&[data.len()], data).unwrap(),
            tag: fedleak::nn::ParamTag::Maskable,
        }])
        .unwrap()
    };

    for case in 0..100u64 {
        let n = 120;
        let clients = 3 + (case % 5) as usize;
        let mut columns: Vec<Vec<f64>> = (0..clients as u64)
            .map(|c| {
                (0..n)
                    .map(|i| {
                        let r = rng::unit_uniform(case * 97 + c, i as u64);
                        if r < 0.4 {
                            f64::NAN
                        } else {
                            r * 8.0 - 4.0
                        }
                    })
                    .collect()
            })
            .collect();
        for col in columns.iter_mut() {
            col[11] = f64::NAN; // guaranteed fallback coordinate
        }
        let fallback: Vec<f64> = (0..n)
            .map(|i| rng::unit_uniform(case, 5000 + i as u64))
            .collect();
        let subs: Vec<ParameterBundle> = columns.iter().map(|c| bundle_from(c.clone())).collect();
        let fb = bundle_from(fallback.clone());
        for kind in [AggregationKind::Mean, AggregationKind::Median] {
            let got = aggregate(&subs, &AggregationSpec { kind, fallback: &fb })
                .unwrap()
                .flatten();
            let want = oracle(&columns, kind, &fallback);
            assert_eq!(got, want, "case {case} {kind:?}");
        }
    }
    pass(4, "NaN-aware mean and median equal the scalar-loop oracle exactly on 100 cases");
}

// ---------------------------------------------------------------- 5

#[test]
fn criterion_05_obfuscation_unit_suite() {
    use fedleak::nn::BundleEntry;
    let bundle_of = |data: Vec<f64>| -> ParameterBundle {
        ParameterBundle::new(vec![BundleEntry {
            name: "l".into(),
            tensor: Tensor::from_vec(&[data.len()], data).unwrap(),
            tag: fedleak::nn::ParamTag::Maskable,
        }])
        .unwrap()
    };

    // hand-computed percentile examples
    let layer = bundle_of(vec![0.1, -0.5, 0.3, -0.2]);
    assert_eq!(clip(&layer, 0.5).unwrap().flatten(), vec![0.1, -0.25, 0.25, -0.2]);
    assert_eq!(prune(&layer, 0.5).unwrap().flatten(), vec![0.0, -0.5, 0.3, 0.0]);
    assert_eq!(prune(&layer, 0.0).unwrap().flatten(), vec![0.1, -0.5, 0.3, -0.2]);

    // dispatcher laws
    let base = bundle_of((0..500).map(|i| rng::unit_uniform(1, i) - 0.5).collect());
    assert_eq!(
        obfuscate(&base, &ObfuscationSpec::none()).unwrap().flatten(),
        base.flatten()
    );

    // statistical bands over 20 seeds
    for seed in 0..20u64 {
        let n = 10_000;
        let b = bundle_of((0..n as u64).map(|i| rng::unit_uniform(seed + 50, i) - 0.5).collect());
        let masked = mask(&b, 0.4, seed).unwrap();
        let nans = masked.flatten().iter().filter(|v| v.is_nan()).count();
        assert!((3855..=4145).contains(&nans), "seed {seed}: {nans} NaN");

        let noisy = noise(&b, 0.5, seed).unwrap();
        let deltas: Vec<f64> = noisy
            .flatten()
            .iter()
            .zip(b.flatten().iter())
            .map(|(a, x)| a - x)
            .collect();
        let mean = deltas.iter().sum::<f64>() / n as f64;
        let std =
            (deltas.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / n as f64).sqrt();
        assert!((0.47..=0.53).contains(&std), "seed {seed}: noise std {std}");
        assert!(mean.abs() < 3.0 * 0.5 / (n as f64).sqrt(), "seed {seed}: noise mean {mean}");

        let pruned = prune(&b, 0.65).unwrap();
        let zeros = pruned.flatten().iter().filter(|&&v| v == 0.0).count();
        let frac = zeros as f64 / n as f64;
        assert!((frac - 0.65).abs() <= 2.0 / (n as f64).sqrt(), "seed {seed}: prune {frac}");
    }
    pass(5, "hand examples exact; binomial/order-statistics bands hold over 20 seeds");
}

// ---------------------------------------------------------------- 6, 7, 9 (threshold sweeps)

fn sweep_config(name: &str, kinds: Vec<DatasetKind>, grid: Vec<(ObfuscationMethod, Vec<f64>)>, seeds: Vec<u64>, masked: MaskedTargets) -> ExperimentConfig {
    ExperimentConfig {
        datasets: kinds
            .into_iter()
            .map(|kind| DatasetSpec {
                kind,
                train: 2000,
                test: 1000,
                classes: 4,
                shape: (1, 28, 28),
                seed: 7,
            })
            .collect(),
        arch: ModelArch::Cnn,
        model_seed: 11,
        attack: AttackConfig {
            // desk-scale stopping patience and dark init matching the
            // datasets' pixel statistics; see the decisions notes
            checkpoint_interval: 100,
            init: fedleak::attack::DummyInit::UniformTo(0.3),
            masked_targets: masked,
            ..AttackConfig::default()
        },
        grid,
        seeds,
        out_dir: out_dir(name),
        ..ExperimentConfig::default()
    }
}

/// (dataset, method, p, seed) -> max_adjusted_ssim from a threshold CSV.
fn parse_sweep(csv: &str) -> HashMap<(String, String, String, u64), f64> {
    let mut out = HashMap::new();
    for line in csv.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        assert_eq!(f[4], "ok", "cell failed: {line}");
        out.insert(
            (
                f[0].to_string(),
                f[1].to_string(),
                f[2].to_string(),
                f[3].parse().unwrap(),
            ),
            f[6].parse().unwrap(),
        );
    }
    out
}

#[test]
fn criterion_06_baseline_leakage_floor() {
    let started = std::time::Instant::now();
    let (mnist_kind, mnist_name) = mnist_stand_in();
    let cfg = sweep_config(
        "criterion6",
        vec![mnist_kind, DatasetKind::Synth],
        vec![(ObfuscationMethod::None, vec![0.0])],
        vec![1, 2, 3, 4, 5],
        MaskedTargets::Drop,
    );
    let outcome = run_threshold_sweep(&cfg).unwrap();
    assert_eq!(outcome.failures, 0);
    let rows = parse_sweep(&std::fs::read_to_string(&outcome.csv_path).unwrap());
    let mut details = Vec::new();
    for ds in [mnist_name, "synth"] {
        let scores: Vec<f64> = (1..=5)
            .map(|s| rows[&(ds.to_string(), "none".into(), "0".into(), s)])
            .collect();
        let med = median(scores.clone());
        assert!(med >= 0.6, "{ds} baseline median {med} < 0.6 ({scores:?})");
        details.push(format!("{ds} median {med:.3}"));
    }
    assert!(started.elapsed().as_secs() < 1800, "criterion 6 runtime");
    pass(6, &format!("unobfuscated attack medians >= 0.6 ({})", details.join(", ")));
}

#[test]
fn criterion_07_defense_thresholds() {
    let started = std::time::Instant::now();
    // threshold targets anchor to the MNIST column of the reference table;
    // run the MNIST stand-in with the zero-fill attacker treatment of
    // masked coordinates, 9 seeds for stable medians at the collapse floor
    let (mnist_kind, mnist_name) = mnist_stand_in();
    let seeds: Vec<u64> = (1..=9).collect();
    let cfg = sweep_config(
        "criterion7",
        vec![mnist_kind],
        vec![
            (ObfuscationMethod::None, vec![0.0]),
            (ObfuscationMethod::Mask, vec![0.2, 0.3, 0.4]),
            (ObfuscationMethod::Clip, vec![0.995]),
        ],
        seeds.clone(),
        MaskedTargets::ZeroFill,
    );
    let outcome = run_threshold_sweep(&cfg).unwrap();
    assert_eq!(outcome.failures, 0);
    let rows = parse_sweep(&std::fs::read_to_string(&outcome.csv_path).unwrap());
    let ds = mnist_name.to_string();
    let get = |method: &str, p: &str, seed: u64| rows[&(ds.clone(), method.into(), p.into(), seed)];

    let mask_medians: Vec<f64> = ["0.2", "0.3", "0.4"]
        .iter()
        .map(|p| median(seeds.iter().map(|&s| get("mask", p, s)).collect()))
        .collect();
    let clip_median = median(seeds.iter().map(|&s| get("clip", "0.995", s)).collect());

    assert!(mask_medians[2] <= 0.35, "mask 0.4 median {}", mask_medians[2]);
    assert!(clip_median <= 0.35, "clip 0.995 median {clip_median}");
    for &s in &seeds {
        let baseline = get("none", "0", s);
        assert!(
            get("mask", "0.4", s) < baseline,
            "seed {s}: mask 0.4 not below baseline"
        );
        assert!(
            get("clip", "0.995", s) < baseline,
            "seed {s}: clip 0.995 not below baseline"
        );
    }
    assert!(
        mask_medians[0] >= mask_medians[1] && mask_medians[1] >= mask_medians[2],
        "mask medians not non-increasing: {mask_medians:?}"
    );
    assert!(started.elapsed().as_secs() < 3600, "criterion 7 runtime");
    pass(7, &format!(
        "mask medians {:.3}/{:.3}/{:.3} (non-increasing, 0.4 <= 0.35), clip median {clip_median:.3} <= 0.35, both below baseline per seed",
        mask_medians[0], mask_medians[1], mask_medians[2]
    ));
}

// ---------------------------------------------------------------- 8

fn convergence_config(name: &str, rounds: usize) -> ExperimentConfig {
    let (mnist_kind, _) = mnist_stand_in();
    ExperimentConfig {
        datasets: vec![DatasetSpec {
            kind: mnist_kind,
            train: 2000,
            test: 1000,
            classes: 10,
            shape: (1, 28, 28),
            seed: 7,
        }],
        arch: ModelArch::Cnn,
        model_seed: 11,
        grid: vec![
            (ObfuscationMethod::None, vec![0.0]),
            (ObfuscationMethod::Mask, vec![0.4]),
            (ObfuscationMethod::Noise, vec![0.5]),
            (ObfuscationMethod::Clip, vec![0.995]),
            (ObfuscationMethod::Prune, vec![0.95]),
        ],
        rounds: RoundConfig {
            rounds,
            epochs: 1,
            clients: 10,
            batch_size: 32,
            seed: 3,
            ..RoundConfig::default()
        },
        aggregations: vec![AggregationKind::Mean, AggregationKind::Median],
        partitions: vec![PartitionSpec::iid(5), PartitionSpec::dirichlet(0.5, 5)],
        seeds: vec![1],
        out_dir: out_dir(name),
        ..ExperimentConfig::default()
    }
}

/// (method, aggregation, partition) -> final-round accuracy.
fn parse_convergence(csv: &str) -> HashMap<(String, String, String), (u64, f64)> {
    let mut out: HashMap<(String, String, String), (u64, f64)> = HashMap::new();
    for line in csv.lines().skip(1).filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split(',').collect();
        let key = (f[0].to_string(), f[2].to_string(), f[3].to_string());
        let round: u64 = f[4].parse().unwrap();
        let acc: f64 = f[5].parse().unwrap();
        let e = out.entry(key).or_insert((0, 0.0));
        if round >= e.0 {
            *e = (round, acc);
        }
    }
    out
}

#[test]
fn criterion_08_convergence_ordering() {
    let started = std::time::Instant::now();
    let cfg = convergence_config("criterion8", 25);
    let outcome = run_convergence(&cfg).unwrap();
    assert_eq!(outcome.failures, 0);
    let finals = parse_convergence(&std::fs::read_to_string(&outcome.csv_path).unwrap());
    let acc = |m: &str, a: &str, p: &str| finals[&(m.into(), a.into(), p.into())].1;

    // the unobfuscated desk-scale baseline itself must train well
    assert!(
        acc("none", "mean", "iid") > 0.9,
        "baseline {:.3} <= 0.9",
        acc("none", "mean", "iid")
    );
    let mut details = Vec::new();
    for agg in ["mean", "median"] {
        for part in ["iid", "dirichlet-0.5"] {
            let baseline = acc("none", agg, part);
            for good in ["mask", "clip"] {
                let v = acc(good, agg, part);
                assert!(
                    (baseline - v).abs() <= 0.05,
                    "{good} {agg}/{part}: {v} vs baseline {baseline}"
                );
                for bad in ["prune", "noise"] {
                    assert!(
                        v > acc(bad, agg, part),
                        "{good} not above {bad} in {agg}/{part}"
                    );
                }
            }
            details.push(format!("{agg}/{part} baseline {baseline:.2}"));
        }
        // noise/prune trail by >= 5 points at least under mean aggregation
        if agg == "mean" {
            for part in ["iid", "dirichlet-0.5"] {
                let baseline = acc("none", "mean", part);
                for bad in ["prune", "noise"] {
                    let v = acc(bad, "mean", part);
                    assert!(
                        baseline - v >= 0.05,
                        "{bad} trails by {:.3} (< 5 points) in mean/{part}",
                        baseline - v
                    );
                }
            }
        }
    }
    assert!(started.elapsed().as_secs() < 7200, "criterion 8 runtime");
    pass(8, &format!(
        "mask/clip within 5 points of baseline and above prune/noise in all 4 panels ({})",
        details.join("; ")
    ));
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_09_reruns_are_byte_identical() {
    // Re-run the criterion-6 and criterion-7 sweeps and a reduced-rounds
    // convergence (same pipeline and writers; determinism is independent of
    // cell count) into fresh directories and compare bytes.
    let started = std::time::Instant::now();
    let (mnist_kind, _) = mnist_stand_in();

    let mut a = sweep_config(
        "criterion9_sweep_a",
        vec![mnist_kind, DatasetKind::Synth],
        vec![(ObfuscationMethod::None, vec![0.0])],
        vec![1, 2, 3, 4, 5],
        MaskedTargets::Drop,
    );
    let first = run_threshold_sweep(&a).unwrap();
    a.out_dir = out_dir("criterion9_sweep_b");
    let second = run_threshold_sweep(&a).unwrap();
    let bytes_a = std::fs::read(&first.csv_path).unwrap();
    let bytes_b = std::fs::read(&second.csv_path).unwrap();
    assert_eq!(bytes_a, bytes_b, "threshold sweep reruns differ");

    let mut c7 = sweep_config(
        "criterion9_c7_a",
        vec![mnist_kind],
        vec![
            (ObfuscationMethod::None, vec![0.0]),
            (ObfuscationMethod::Mask, vec![0.4]),
        ],
        vec![1, 2, 3],
        MaskedTargets::ZeroFill,
    );
    let first = run_threshold_sweep(&c7).unwrap();
    c7.out_dir = out_dir("criterion9_c7_b");
    let second = run_threshold_sweep(&c7).unwrap();
    assert_eq!(
        std::fs::read(&first.csv_path).unwrap(),
        std::fs::read(&second.csv_path).unwrap(),
        "criterion-7-shaped sweep reruns differ"
    );

    let mut conv = convergence_config("criterion9_conv_a", 4);
    let first = run_convergence(&conv).unwrap();
    conv.out_dir = out_dir("criterion9_conv_b");
    let second = run_convergence(&conv).unwrap();
    assert_eq!(
        std::fs::read(&first.csv_path).unwrap(),
        std::fs::read(&second.csv_path).unwrap(),
        "convergence reruns differ"
    );
    assert!(started.elapsed().as_secs() < 3600, "criterion 9 runtime");
    pass(9, "threshold and convergence CSVs byte-identical across reruns");
}

// ---------------------------------------------------------------- 10

#[test]
fn criterion_10_batchnorm_circumvention() {
    let started = std::time::Instant::now();
    let (mnist_kind, _) = mnist_stand_in();
    let spec = DatasetSpec {
        kind: mnist_kind,
        train: 2000,
        test: 1000,
        classes: 10,
        shape: (1, 28, 28),
        seed: 7,
    };
    let (train, test) = spec.load().unwrap();
    let model = ModelConfig::default_cnn(spec.image_shape(), spec.class_count(), 11);

    // Masking at its threshold value with the exemption disabled via the
    // test hook, against the exemption-enabled run; everything else equal.
    let run = |naive: bool| -> f64 {
        let obf = if naive {
            ObfuscationSpec::mask(0.4, 0).with_naive_masking()
        } else {
            ObfuscationSpec::mask(0.4, 0)
        };
        let cfg = RoundConfig {
            rounds: 25,
            epochs: 1,
            clients: 10,
            batch_size: 32,
            obfuscation: obf,
            seed: 3,
            ..RoundConfig::default()
        };
        run_training(&model, &train, &test, &cfg, &PartitionSpec::iid(5))
            .unwrap()
            .final_accuracy()
    };
    let exempt = run(false);
    let naive = run(true);
    let gap = exempt - naive;
    assert!(started.elapsed().as_secs() < 1800, "criterion 10 runtime");
    if gap >= 0.10 {
        pass(10, &format!(
            "naive masking {naive:.3} vs exempted {exempt:.3} at round 25 (gap {gap:.2} >= 0.10)"
        ));
    } else {
        // Known-unattainable under this artifact's aggregation contract:
        // the NaN-aware reduction with previous-central fallback always
        // yields a dense, finite central model, and clients re-estimate
        // batch statistics from data each round, so masked normalization
        // entries are repaired server-side no matter the mask ratio. The
        // divergence behind the published observation requires NaN to reach
        // a model, which this server contractually prevents. Measured gaps
        // are ~0 at every (p, clients) probed up to p=0.9. Details in the
        // project decision notes.
        println!(
            "criterion 10: FAIL - naive masking {naive:.3} vs exempted {exempt:.3} at round 25 \
             (gap {gap:.3} < 0.10); the NaN-aware aggregation + fallback mandated elsewhere in \
             the artifact repairs naive masking, so the divergence cannot be reproduced"
        );
        panic!("criterion 10 unattainable under the aggregation contract: gap {gap:.3} < 0.10");
    }
}
