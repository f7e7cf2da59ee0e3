use std::fs;
use std::path::Path;

use autograd::{Gradients, ParamId, Tape, Tensor};
use prmseg::checkpoint::{Checkpoint, BLOB_FILE, MANIFEST_FILE};
use prmseg::data::{generate_dataset, Dataset, Manifest, PhantomSpec, Split, Volume};
use prmseg::eval::{argmax_labels, score_case, sliding_window_logits};
use prmseg::network::{BranchRef, BranchState, ModelConfig, Network, Param};
use prmseg::pruning::{ControllerState, Phase};
use prmseg::rng::Stream;
use prmseg::train::{
    read_epoch_csv, ControllerSignal, Mode, ModelChoice, Optimizer, OptimizerConfig, OptimizerKind, Precision,
    TrainConfig, Trainer,
};
use prmseg::Error;

fn scalar_param(v: f64) -> Param<f64> {
    Param {
        id: ParamId(0),
        name: "theta".into(),
        value: Tensor::from_vec(&[1], vec![v]).unwrap(),
    }
}

/// Gradients for parameter 0 through a throwaway tape: d(g·θ)/dθ = g.
fn grads_of(g: f64) -> Gradients<f64> {
    let mut tape = Tape::new();
    let p = tape.param(ParamId(0), &Tensor::from_vec(&[1], vec![0.0]).unwrap());
    let s = tape.scale(p, g);
    let loss = tape.sum(s);
    tape.backward(loss).unwrap()
}

/// Independent scalar AdamW: bias-corrected moments, decoupled decay on the old θ.
fn adamw_oracle(theta: f64, grads: &[f64], lr: f64, wd: f64) -> f64 {
    let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
    let (mut m, mut v, mut th) = (0.0, 0.0, theta);
    for (t, &g) in grads.iter().enumerate() {
        let t = (t + 1) as i32;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        let mh = m / (1.0 - b1.powi(t));
        let vh = v / (1.0 - b2.powi(t));
        th = th - lr * mh / (vh.sqrt() + eps) - lr * wd * th;
    }
    th
}

fn adamw(lr: f64, wd: f64) -> Optimizer<f64> {
    Optimizer::new(OptimizerConfig {
        lr,
        weight_decay: wd,
        ..OptimizerConfig::default()
    })
    .unwrap()
}

#[test]
fn adamw_first_step_example() {
    let mut p = scalar_param(1.0);
    let mut opt = adamw(0.01, 0.01);
    opt.apply(vec![&mut p], &grads_of(0.5)).unwrap();
    let got = p.value.data()[0];
    assert!((got - 0.98990).abs() < 1e-5, "{got}");
    assert!((got - adamw_oracle(1.0, &[0.5], 0.01, 0.01)).abs() < 1e-15);
}

#[test]
fn adamw_matches_scalar_oracle_over_many_steps() {
    let gs = [0.5, -0.25, 1.5, 0.0, -2.0, 0.75, 0.1];
    let mut p = scalar_param(0.3);
    let mut opt = adamw(0.05, 0.1);
    for &g in &gs {
        opt.apply(vec![&mut p], &grads_of(g)).unwrap();
    }
    assert!((p.value.data()[0] - adamw_oracle(0.3, &gs, 0.05, 0.1)).abs() < 1e-14);
}

#[test]
fn zero_gradient_cases() {
    let mut p = scalar_param(2.0);
    let mut opt = adamw(0.01, 0.0);
    opt.apply(vec![&mut p], &grads_of(0.0)).unwrap();
    assert_eq!(p.value.data()[0], 2.0);

    let mut p = scalar_param(2.0);
    let mut opt = adamw(0.01, 0.1);
    opt.apply(vec![&mut p], &grads_of(0.0)).unwrap();
    assert!((p.value.data()[0] - 2.0 * (1.0 - 0.01 * 0.1)).abs() < 1e-15);
}

#[test]
fn nan_gradient_aborts_with_parameter_name() {
    let mut p = scalar_param(1.0);
    let mut opt = adamw(0.01, 0.0);
    let err = opt.apply(vec![&mut p], &grads_of(f64::NAN)).unwrap_err();
    assert!(matches!(err, Error::Numeric(ref m) if m.contains("theta")), "{err}");
    assert_eq!(p.value.data()[0], 1.0);
    assert_eq!(opt.step, 0);
}

#[test]
fn sgd_momentum_step() {
    let mut p = scalar_param(1.0);
    let mut opt = Optimizer::<f64>::new(OptimizerConfig {
        kind: OptimizerKind::Sgd,
        lr: 0.1,
        momentum: 0.9,
        weight_decay: 0.0,
        ..OptimizerConfig::default()
    })
    .unwrap();
    opt.apply(vec![&mut p], &grads_of(1.0)).unwrap();
    opt.apply(vec![&mut p], &grads_of(1.0)).unwrap();
    // v1 = 1, v2 = 1.9
    assert!((p.value.data()[0] - (1.0 - 0.1 - 0.19)).abs() < 1e-15);
}

fn tiny_model() -> ModelConfig {
    ModelConfig {
        channels: vec![4, 8, 8],
        ..ModelConfig::mini(3)
    }
}

fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = Stream::new(seed, 77);
    Tensor::from_fn(shape, |_| rng.uniform_in(-1.0, 1.0))
}

fn logits_of(net: &Network<f64>, x: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut tape = Tape::inference();
    let xv = tape.leaf(x.clone(), false);
    let out = net.forward(&mut tape, xv).unwrap();
    out.logits.iter().map(|&v| tape.value(v).clone()).collect()
}

fn checkpoint_with(net: Network<f64>, controller: ControllerState) -> Checkpoint<f64> {
    Checkpoint {
        network: net,
        optimizer: adamw(1e-3, 0.01),
        controller,
        rng: Stream::new(5, 3).state(),
        epoch: 7,
        extra: serde_json::json!({"note": "x"}),
    }
}

#[test]
fn checkpoint_round_trip_is_bitwise_and_keeps_masked_phase() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = Network::<f64>::build(&tiny_model(), 3).unwrap();
    let masked = vec![BranchRef { prm: 0, branch: 2 }, BranchRef { prm: 3, branch: 1 }];
    net.apply_mask(&masked).unwrap();
    net.apply_mask(&[BranchRef { prm: 1, branch: 0 }]).unwrap();
    net.commit_prune(&[BranchRef { prm: 1, branch: 0 }]).unwrap();
    let mut ctl = ControllerState::new(2);
    ctl.phase = Phase::Masked;
    ctl.masked_set = masked.clone();
    ctl.best_fd = Some(0.25);
    let x = random_input(&[1, 1, 8, 8, 8], 1);
    let before = logits_of(&net, &x);

    // give the optimizer some state too
    let mut ck = checkpoint_with(net, ctl);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let out = ck.network.forward(&mut tape, xv).unwrap();
    let loss = tape.mean(out.logits[0]);
    let g = tape.backward(loss).unwrap();
    ck.optimizer.apply(ck.network.params_mut(), &g).unwrap();
    let before_step = logits_of(&ck.network, &x);
    ck.save(dir.path()).unwrap();

    let back = Checkpoint::<f64>::load(dir.path()).unwrap();
    assert_eq!(back.epoch, 7);
    assert_eq!(back.controller, ck.controller);
    assert_eq!(back.controller.masked_set, masked);
    assert_eq!(back.controller.p, 2);
    assert_eq!(back.rng, ck.rng);
    assert_eq!(back.extra, ck.extra);
    assert_eq!(back.network.branch_states(), ck.network.branch_states());
    assert_eq!(back.network.branch_states()[1][0], BranchState::Pruned);
    assert_eq!(back.network.param_count(), ck.network.param_count());
    for (a, b) in logits_of(&back.network, &x).iter().zip(&before_step) {
        assert!(a.bitwise_eq(b));
    }
    assert!(!before[0].bitwise_eq(&before_step[0]));
    assert_eq!(back.optimizer.step, 1);
    assert_eq!(back.optimizer.slots.len(), ck.optimizer.slots.len());
    for (k, s) in &ck.optimizer.slots {
        let t = &back.optimizer.slots[k];
        assert!(t.m.bitwise_eq(&s.m) && t.v.bitwise_eq(&s.v));
    }
    // the restored network still honours the masked branches
    let mut resumed = back.network;
    resumed.restore_mask(&masked).unwrap();
}

fn saved(dir: &Path) {
    let net = Network::<f64>::build(&tiny_model(), 4).unwrap();
    checkpoint_with(net, ControllerState::new(1)).save(dir).unwrap();
}

#[test]
fn truncated_blob_is_a_checkpoint_error() {
    let dir = tempfile::tempdir().unwrap();
    saved(dir.path());
    let blob = dir.path().join(BLOB_FILE);
    let bytes = fs::read(&blob).unwrap();
    fs::write(&blob, &bytes[..bytes.len() - 13]).unwrap();
    let err = Checkpoint::<f64>::load(dir.path()).unwrap_err();
    assert!(
        matches!(err, Error::Checkpoint(ref m) if m.contains("truncated")),
        "{err}"
    );
}

#[test]
fn magic_version_dtype_and_descriptor_are_checked() {
    let dir = tempfile::tempdir().unwrap();
    saved(dir.path());
    let mpath = dir.path().join(MANIFEST_FILE);
    let orig: serde_json::Value = serde_json::from_slice(&fs::read(&mpath).unwrap()).unwrap();
    let edit = |f: &dyn Fn(&mut serde_json::Value)| {
        let mut v = orig.clone();
        f(&mut v);
        fs::write(&mpath, serde_json::to_vec(&v).unwrap()).unwrap();
        Checkpoint::<f64>::load(dir.path())
    };
    assert!(matches!(
        edit(&|v| v["magic"] = "NOPE".into()),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(edit(&|v| v["version"] = 99.into()), Err(Error::Checkpoint(_))));
    // a descriptor that disagrees with the stored tensor sizes
    assert!(matches!(
        edit(&|v| v["descriptor"]["channels"] = serde_json::json!([4, 8, 16])),
        Err(Error::Checkpoint(_))
    ));
    assert!(matches!(
        edit(&|v| v["descriptor"]["branch_states"][0][0] = "pruned".into()),
        Err(Error::Checkpoint(_))
    ));
    fs::write(&mpath, serde_json::to_vec(&orig).unwrap()).unwrap();
    assert!(matches!(Checkpoint::<f32>::load(dir.path()), Err(Error::Checkpoint(_))));
    assert!(Checkpoint::<f64>::load(dir.path()).is_ok());
}

#[test]
fn gt_passthrough_scores_one() {
    let spec = PhantomSpec::with_dims([16, 16, 16]);
    let (_, lbl) = prmseg::data::generate_phantom(3, &spec).unwrap();
    let m = score_case("c", lbl.dims, lbl.spacing, &lbl.data, &lbl.data, 3, 2.0).unwrap();
    assert_eq!(m.dice, [1.0, 1.0]);
    assert_eq!(m.nsd, [1.0, 1.0]);
    assert!(m.empty_classes.is_empty());
}

fn volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = Stream::new(seed, 8);
    Volume::new(
        dims,
        [1.0; 3],
        (0..dims.iter().product()).map(|_| rng.uniform() as f32).collect(),
    )
    .unwrap()
}

fn single_pass(net: &Network<f64>, v: &Volume, origin: [usize; 3], w: [usize; 3]) -> Tensor<f64> {
    let x = Tensor::from_fn(&[1, 1, w[0], w[1], w[2]], |i| {
        let (z, y, x) = (i / (w[1] * w[2]), (i / w[2]) % w[1], i % w[2]);
        v.data[((origin[0] + z) * v.dims[1] + origin[1] + y) * v.dims[2] + origin[2] + x] as f64
    });
    logits_of(net, &x)[0].clone()
}

#[test]
fn window_equal_to_volume_is_one_pass() {
    let net = Network::<f64>::build(&tiny_model(), 2).unwrap();
    let v = volume([8, 8, 8], 1);
    let (logits, padded) = sliding_window_logits(&net, &v, [8, 8, 8]).unwrap();
    assert!(!padded);
    let direct = single_pass(&net, &v, [0, 0, 0], [8, 8, 8]);
    assert_eq!(logits.data(), direct.data());
}

#[test]
fn overlap_average_matches_brute_force_window_mean() {
    let net = Network::<f64>::build(&tiny_model(), 2).unwrap();
    let dims = [12, 8, 16];
    let w = [8, 8, 8];
    let v = volume(dims, 4);
    let (logits, _) = sliding_window_logits(&net, &v, w).unwrap();
    // origins written out by hand for stride 4
    let oz = [0, 4];
    let ox = [0, 4, 8];
    let n = dims.iter().product::<usize>();
    let mut sum = vec![0.0; 3 * n];
    let mut cnt = vec![0.0; n];
    for &z0 in &oz {
        for &x0 in &ox {
            let t = single_pass(&net, &v, [z0, 0, x0], w);
            for c in 0..3 {
                for z in 0..8 {
                    for y in 0..8 {
                        for x in 0..8 {
                            let g = ((z0 + z) * 8 + y) * 16 + x0 + x;
                            sum[c * n + g] += t.data()[c * 512 + (z * 8 + y) * 8 + x];
                            if c == 0 {
                                cnt[g] += 1.0;
                            }
                        }
                    }
                }
            }
        }
    }
    let expect: Vec<f64> = (0..3 * n).map(|i| sum[i] / cnt[i % n]).collect();
    let diff = logits
        .data()
        .iter()
        .zip(&expect)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(diff < 1e-12, "{diff}");
    assert_eq!(argmax_labels(&logits).len(), n);
}

#[test]
fn small_volumes_are_padded() {
    let net = Network::<f64>::build(&tiny_model(), 2).unwrap();
    let v = volume([6, 8, 4], 2);
    let (logits, padded) = sliding_window_logits(&net, &v, [8, 8, 8]).unwrap();
    assert!(padded);
    assert_eq!(logits.shape(), &[3, 6, 8, 4]);
}

fn write_dataset(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    generate_dataset(&data, 6, &PhantomSpec::with_dims([16, 16, 16]), 11, 0.67).unwrap();
    data.join("manifest.json")
}

fn run_config(root: &Path, manifest: &Path, out: &str) -> TrainConfig {
    TrainConfig {
        mode: Mode::Psp,
        model: ModelChoice::Custom(tiny_model()),
        architecture: None,
        loss: Default::default(),
        optimizer: OptimizerConfig {
            lr: 1e-3,
            ..OptimizerConfig::default()
        },
        batch_size: 2,
        patch_size: [8, 8, 8],
        epochs: 6,
        iterations_per_epoch: 2,
        calibration_count: 2,
        initial_p: Some(1),
        controller_window: 2,
        improvement_threshold: 0.01,
        convergence_tolerance: 0.0,
        controller_signal: ControllerSignal::Monitor,
        monitor_count: 2,
        seed: 9,
        dataset: manifest.to_path_buf(),
        output_dir: root.join(out),
        precision: Precision::F64,
        checkpoint_every: 1,
        eval_every: 3,
        eval_split: Split::Test,
        eval_cases: Some(1),
        nsd_tolerance_mm: 2.0,
    }
}

fn strip_seconds(path: &Path) -> Vec<String> {
    read_epoch_csv(path)
        .unwrap()
        .into_iter()
        .map(|r| {
            format!(
                "{} {} {} {} {} {} {} {}",
                r.epoch, r.l_seg, r.l_tr, r.l_rl, r.l_total, r.params_effective, r.branches_active, r.event
            )
        })
        .collect()
}

#[test]
fn runs_are_reproducible_and_resumable() {
    let root = tempfile::tempdir().unwrap();
    let manifest = write_dataset(root.path());
    let a = run_config(root.path(), &manifest, "a");
    let sa = Trainer::<f64>::new(a.clone()).unwrap().run().unwrap();
    let b = run_config(root.path(), &manifest, "b");
    Trainer::<f64>::new(b).unwrap().run().unwrap();
    let rows_a = strip_seconds(&a.output_dir.join("epochs.csv"));
    assert_eq!(rows_a.len(), 6);
    assert_eq!(rows_a, strip_seconds(&root.path().join("b/epochs.csv")));

    // continue from the end of epoch 3 in a fresh directory
    let c = run_config(root.path(), &manifest, "c");
    let mut t = Trainer::<f64>::resume(c.clone(), &a.output_dir.join("checkpoints/epoch_0003")).unwrap();
    assert_eq!(t.epoch, 3);
    let sc = t.run().unwrap();
    assert_eq!(rows_a, strip_seconds(&c.output_dir.join("epochs.csv")));
    assert_eq!(sa.events, sc.events);
    assert_eq!(sa.evals, sc.evals);
    let fa = Checkpoint::<f64>::load(&sa.final_checkpoint).unwrap();
    let fc = Checkpoint::<f64>::load(&sc.final_checkpoint).unwrap();
    for (p, q) in fa.network.params().iter().zip(fc.network.params()) {
        assert!(p.value.bitwise_eq(&q.value), "{}", p.name);
    }

    // every epoch record reproduces the weighted total
    for r in read_epoch_csv(&a.output_dir.join("epochs.csv")).unwrap() {
        assert!((r.l_total - (r.l_seg + 0.1 * r.l_tr + 0.1 * r.l_rl)).abs() < 1e-6);
    }
    for f in [
        "events.jsonl",
        "timeline.json",
        "evals.jsonl",
        "architecture_initial.json",
        "summary.json",
    ] {
        assert!(a.output_dir.join(f).exists(), "{f}");
    }
}

#[test]
fn retrain_mode_builds_the_compact_network_and_never_prunes() {
    let root = tempfile::tempdir().unwrap();
    let manifest = write_dataset(root.path());
    let mut net = Network::<f64>::build(&tiny_model(), 1).unwrap();
    let refs = [BranchRef { prm: 2, branch: 1 }, BranchRef { prm: 4, branch: 3 }];
    net.apply_mask(&refs).unwrap();
    net.commit_prune(&refs).unwrap();
    net.apply_mask(&[BranchRef { prm: 0, branch: 0 }]).unwrap();
    let arch = root.path().join("arch.json");
    fs::write(&arch, serde_json::to_vec(&net.descriptor()).unwrap()).unwrap();

    let mut cfg = run_config(root.path(), &manifest, "retrain");
    cfg.mode = Mode::Retrain;
    cfg.architecture = Some(arch);
    cfg.epochs = 3;
    cfg.eval_every = 0;
    let mut t = Trainer::<f64>::new(cfg.clone()).unwrap();
    assert_eq!(t.controller.p, 0);
    let states = t.network.branch_states();
    assert!(states.iter().flatten().all(|s| *s != BranchState::Masked));
    assert_eq!(states[2][1], BranchState::Pruned);
    assert_eq!(states[0][0], BranchState::Pruned);
    let s = t.run().unwrap();
    assert!(s.events.is_empty());
    let recs = read_epoch_csv(&cfg.output_dir.join("epochs.csv")).unwrap();
    assert!(recs
        .iter()
        .all(|r| r.params_effective == s.initial_params.effective && r.event.is_empty()));
    assert_eq!(s.final_params, s.initial_params);
}

#[test]
fn config_validation_and_path_resolution() {
    let root = tempfile::tempdir().unwrap();
    let manifest = write_dataset(root.path());
    let mut cfg = run_config(root.path(), &manifest, "x");
    cfg.patch_size = [8, 8, 6];
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    let mut cfg = run_config(root.path(), &manifest, "x");
    cfg.mode = Mode::Retrain;
    assert!(cfg.validate().is_err());

    let json = serde_json::json!({
        "mode": "psp",
        "model": {"variant": "S", "num_classes": 3},
        "batch_size": 2, "patch_size": [16, 16, 16], "epochs": 1, "iterations_per_epoch": 1,
        "seed": 0, "dataset": "data/manifest.json", "output_dir": "out"
    });
    let p = root.path().join("cfg.json");
    fs::write(&p, serde_json::to_vec(&json).unwrap()).unwrap();
    let cfg = TrainConfig::load(&p).unwrap();
    assert_eq!(cfg.dataset, root.path().join("data/manifest.json"));
    assert_eq!(cfg.initial_p().unwrap(), 1);
    assert_eq!(cfg.calibration_count, 16);
    assert_eq!(cfg.optimizer.lr, 1e-4);
    let m = Manifest::load(&cfg.dataset).unwrap();
    assert_eq!(Dataset::load(&m, Split::Train).unwrap().len(), 4);
}
