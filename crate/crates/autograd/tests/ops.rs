use autograd::testing::{check_gradients, direct_conv3};
use autograd::{Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_vec(shape, data.to_vec()).unwrap()
}

#[test]
fn conv3_identity_kernel_copies_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[1, 1, 3, 4, 5], -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
    let y = tape.conv3(xv, k, None, [1, 1, 1], [0, 0, 0]).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn conv3_all_ones_counts_neighbours() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[1, 1, 5, 5, 5]));
    let k = tape.constant(Tensor::ones(&[1, 1, 3, 3, 3]));
    let y = tape.conv3_same(x, k, None).unwrap();
    let out = tape.value(y);
    assert_eq!(out.shape(), &[1, 1, 5, 5, 5]);
    // interior voxel (2,2,2)
    assert_eq!(out.data()[2 * 25 + 2 * 5 + 2], 27.0);
    // corner sees 2×2×2 in-bounds taps
    assert_eq!(out.data()[0], 8.0);
}

#[test]
fn conv3_matches_direct_oracle_on_anisotropic_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 2, 4, 4, 4], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 2, 3, 1, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let (xv, kv, bv) = (
        tape.constant(x.clone()),
        tape.constant(k.clone()),
        tape.constant(b.clone()),
    );
    let y = tape.conv3_same(xv, kv, Some(bv)).unwrap();
    let want = direct_conv3(&x, &k, Some(&b), [1, 1, 1], [1, 0, 1]);
    for (a, w) in tape.value(y).data().iter().zip(want.data()) {
        assert!((a - w).abs() <= 1e-5 * w.abs().max(1e-12), "{a} vs {w}");
    }
}

#[test]
fn conv3_strided_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 3, 6, 5, 4], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[2, 3, 3, 3, 3], -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
    let y = tape.conv3(xv, kv, None, [2, 2, 2], [1, 1, 1]).unwrap();
    let want = direct_conv3(&x, &k, None, [2, 2, 2], [1, 1, 1]);
    assert_eq!(tape.value(y).shape(), want.shape());
    assert!(tape.value(y).max_abs_diff(&want) < 1e-12);
}

#[test]
fn conv3_rejects_channel_mismatch_and_even_same_kernel() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[1, 2, 4, 4, 4]));
    let k = tape.constant(Tensor::ones(&[1, 3, 1, 1, 1]));
    assert!(matches!(
        tape.conv3(x, k, None, [1, 1, 1], [0, 0, 0]),
        Err(TensorError::Shape(_))
    ));
    let k2 = tape.constant(Tensor::ones(&[1, 2, 2, 2, 2]));
    assert!(tape.conv3_same(x, k2, None).is_err());
}

#[test]
fn transposed_conv_impulse_response_is_scaled_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let k = rand_tensor(&mut rng, &[1, 1, 2, 2, 2], -1.0, 1.0);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 1, 1, 1], 3.0));
    let kv = tape.constant(k.clone());
    let y = tape.transposed_conv3(x, kv, None, [2, 2, 2]).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2, 2]);
    for (a, b) in tape.value(y).data().iter().zip(k.data()) {
        assert_eq!(*a, 3.0 * b);
    }
}

#[test]
fn transposed_conv_doubles_extents() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::ones(&[2, 4, 4, 4, 4]));
    let k = tape.constant(Tensor::ones(&[4, 3, 2, 2, 2]));
    let y = tape.transposed_conv3(x, k, None, [2, 2, 2]).unwrap();
    assert_eq!(tape.shape(y), &[2, 3, 8, 8, 8]);
    let bad = tape.constant(Tensor::ones(&[5, 3, 2, 2, 2]));
    assert!(tape.transposed_conv3(x, bad, None, [2, 2, 2]).is_err());
}

#[test]
fn transposed_conv_is_adjoint_of_strided_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let x = rand_tensor(&mut rng, &[2, 3, 6, 4, 8], -1.0, 1.0);
        let y = rand_tensor(&mut rng, &[2, 5, 3, 2, 4], -1.0, 1.0);
        let k = rand_tensor(&mut rng, &[5, 3, 2, 2, 2], -1.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let (xv, yv, kv) = (tape.constant(x.clone()), tape.constant(y.clone()), tape.constant(k));
        let cx = tape.conv3(xv, kv, None, [2, 2, 2], [0, 0, 0]).unwrap();
        let ty = tape.transposed_conv3(yv, kv, None, [2, 2, 2]).unwrap();
        let lhs: f64 = tape.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(tape.value(ty).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-5 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn instance_norm_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[2, 3, 4, 4, 4], -3.0, 5.0);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x);
    let one = tape.constant(Tensor::ones(&[3]));
    let zero = tape.constant(Tensor::zeros(&[3]));
    let y = tape.instance_norm(xv, one, zero, 1e-5).unwrap();
    for s in tape.value(y).data().chunks(64) {
        let mean = s.iter().sum::<f64>() / 64.0;
        let var = s.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 64.0;
        assert!(mean.abs() < 1e-5);
        assert!((var - 1.0).abs() < 1e-3);
    }
    let two = tape.constant(Tensor::full(&[3], 2.0));
    let three = tape.constant(Tensor::full(&[3], 3.0));
    let z = tape.instance_norm(y, two, three, 1e-5).unwrap();
    for s in tape.value(z).data().chunks(64) {
        let mean = s.iter().sum::<f64>() / 64.0;
        assert!((mean - 3.0).abs() < 1e-6);
    }
}

#[test]
fn instance_norm_constant_channel_is_zero() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::full(&[1, 1, 2, 2, 2], 4.5));
    let one = tape.constant(Tensor::ones(&[1]));
    let zero = tape.constant(Tensor::zeros(&[1]));
    let y = tape.instance_norm(x, one, zero, 1e-5).unwrap();
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn leaky_relu_branches() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(t(&[3], &[2.0, -1.0, 0.0]), true);
    let y = tape.leaky_relu(x, 0.01);
    assert_eq!(tape.value(y).data(), &[2.0, -0.01, 0.0]);
    let loss = tape.sum(y);
    let g = tape.backward(loss).unwrap();
    // subgradient at exactly zero is the slope
    assert_eq!(g.leaf(x).unwrap().data(), &[1.0, 0.01, 0.01]);
}

#[test]
fn stop_gradient_forward_identity_and_zero_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let xt = rand_tensor(&mut rng, &[2, 3], -2.0, 2.0);

    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(xt.clone(), true);
    let s = tape.stop_gradient(x);
    assert!(tape.value(s).bitwise_eq(&xt));
    let other = tape.leaf(Tensor::ones(&[1]), true);
    let l = tape.sum(s);
    let l = tape.mul(l, other).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.leaf(x).is_none_or(|g| g.data().iter().all(|&v| v == 0.0)));

    // x · sg(x): gradient equals x, not 2x
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(xt.clone(), true);
    let s = tape.stop_gradient(x);
    let p = tape.mul(x, s).unwrap();
    let l = tape.sum(p);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.leaf(x).unwrap(), &xt);
}

#[test]
fn cosine_similarity_reference_values() {
    let cases: [(&[f64], &[f64], f64); 3] = [
        (&[1.0, 2.0, -3.0], &[1.0, 2.0, -3.0], 1.0),
        (&[1.0, 2.0, -3.0], &[-1.0, -2.0, 3.0], -1.0),
        (&[1.0, 0.0], &[0.0, 1.0], 0.0),
    ];
    for (a, b, want) in cases {
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(t(&[a.len()], a));
        let bv = tape.constant(t(&[b.len()], b));
        let c = tape.cosine_similarity(av, bv, 1e-8).unwrap();
        assert!((tape.value(c).item() - want).abs() < 1e-12);
    }
    // zero vector is absorbed by eps
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[4]));
    let o = tape.constant(Tensor::ones(&[4]));
    let c = tape.cosine_similarity(z, o, 1e-8).unwrap();
    assert_eq!(tape.value(c).item(), 0.0);
}

#[test]
fn channel_mean_matches_scalar_loop() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t(&[1, 2, 1, 1, 1], &[1.0, 3.0]));
    let m = tape.channel_mean(x).unwrap();
    assert_eq!(tape.value(m).data(), &[2.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let xt = rand_tensor(&mut rng, &[2, 3, 2, 3, 2], -1.0, 1.0);
    let x = tape.constant(xt.clone());
    let m = tape.channel_mean(x).unwrap();
    assert_eq!(tape.shape(m), &[2, 1, 2, 3, 2]);
    for b in 0..2 {
        for v in 0..12 {
            let mut acc = 0.0;
            for c in 0..3 {
                acc += xt.data()[(b * 3 + c) * 12 + v];
            }
            assert!((tape.value(m).data()[b * 12 + v] - acc / 3.0).abs() < 1e-6);
        }
    }
    let one = tape.constant(xt.batch_item(0).unwrap().reshape(&[1, 3, 12]).unwrap());
    let s = tape.slice_channels(one, 1, 2).unwrap();
    let m1 = tape.channel_mean(s).unwrap();
    assert_eq!(tape.value(m1), tape.value(s));
}

#[test]
fn elementwise_suite_examples() {
    let mut tape = Tape::<f64>::new();
    let z = tape.constant(Tensor::zeros(&[1]));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);
    let ones = tape.constant(Tensor::ones(&[2, 3]));
    let total = tape.sum(ones);
    assert_eq!(tape.value(total).item(), 6.0);
    let a = tape.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
    let b = tape.constant(Tensor::zeros(&[1, 3, 2, 2, 2]));
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.shape(c), &[1, 5, 2, 2, 2]);
    assert!(tape.add(a, b).is_err());
    assert!(tape.mul(a, b).is_err());
}

#[test]
fn backward_contract_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(&[2]), true);
    assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    let l = tape.sum(x);
    tape.backward(l).unwrap();
    assert!(matches!(tape.backward(l), Err(TensorError::Contract(_))));
}

#[test]
fn sum_of_squares_gradient_is_two_x() {
    let xt = t(&[4], &[0.5, -1.5, 2.0, 0.0]);
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(xt.clone(), true);
    let sq = tape.mul(x, x).unwrap();
    let l = tape.sum(sq);
    let g = tape.backward(l).unwrap();
    assert_eq!(g.leaf(x).unwrap(), &xt.map(|v| 2.0 * v));
}

#[test]
fn requires_grad_false_never_accumulates() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::ones(&[3]), false);
    let w = tape.leaf(Tensor::ones(&[3]), true);
    let p = tape.mul(x, w).unwrap();
    let l = tape.sum(p);
    let g = tape.backward(l).unwrap();
    assert!(g.leaf(x).is_none());
    assert!(g.leaf(w).is_some());
}

#[test]
fn gradcheck_conv_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[2, 2, 3, 4, 3], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 2, 1, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    let r = rand_tensor(&mut rng, &[2, 3, 3, 4, 3], 0.5, 1.5);
    let rep = check_gradients(
        &[x, k, b],
        |tape, v| {
            let y = tape.conv3_same(v[0], v[1], Some(v[2]))?;
            let rv = tape.constant(r.clone());
            let p = tape.mul(y, rv)?;
            Ok(tape.sum(p))
        },
        1e-4,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");

    let y = rand_tensor(&mut rng, &[1, 3, 2, 2, 2], -1.0, 1.0);
    let k = rand_tensor(&mut rng, &[3, 2, 2, 2, 2], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2], -1.0, 1.0);
    let r = rand_tensor(&mut rng, &[1, 2, 4, 4, 4], 0.5, 1.5);
    let rep = check_gradients(
        &[y, k, b],
        |tape, v| {
            let o = tape.transposed_conv3(v[0], v[1], Some(v[2]), [2, 2, 2])?;
            let rv = tape.constant(r.clone());
            let p = tape.mul(o, rv)?;
            Ok(tape.sum(p))
        },
        1e-4,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

#[test]
fn gradcheck_norm_and_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = rand_tensor(&mut rng, &[2, 2, 2, 2, 3], -2.0, 2.0);
    let g = rand_tensor(&mut rng, &[2], 0.5, 1.5);
    let b = rand_tensor(&mut rng, &[2], -0.5, 0.5);
    let r = rand_tensor(&mut rng, &[2, 2, 2, 2, 3], -1.5, 1.5);
    let rep = check_gradients(
        &[x.clone(), g, b],
        |tape, v| {
            let y = tape.instance_norm(v[0], v[1], v[2], 1e-5)?;
            let rv = tape.constant(r.clone());
            let p = tape.mul(y, rv)?;
            Ok(tape.sum(p))
        },
        1e-4,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");

    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let c = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let rep = check_gradients(&[a, c], |tape, v| tape.cosine_similarity(v[0], v[1], 1e-8), 1e-4).unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");

    let target = Tensor::from_fn(&[2, 1, 2, 2, 3], |i| (i % 3 == 0) as u8 as f64);
    let z = rand_tensor(&mut rng, &[2, 1, 2, 2, 3], -3.0, 3.0);
    let rep = check_gradients(&[z], |tape, v| tape.bce_with_logits(v[0], &target), 1e-4).unwrap();
    assert!(rep.max_rel_err < 1e-4, "{rep:?}");
}

fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..2.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

#[test]
fn gradcheck_elementwise_family() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shape = [2, 3, 2, 2, 2];
    let r = rand_tensor(&mut rng, &shape, 0.5, 1.5);
    type Build = fn(&mut Tape<f64>, &[Var]) -> autograd::Result<Var>;
    let unary: Vec<(&str, Build)> = vec![
        ("sigmoid", |t, v| Ok(t.sigmoid(v[0]))),
        ("exp", |t, v| Ok(t.exp(v[0]))),
        ("leaky", |t, v| Ok(t.leaky_relu(v[0], 0.01))),
        ("scale", |t, v| Ok(t.scale(v[0], 1.7))),
        ("add_scalar", |t, v| Ok(t.add_scalar(v[0], 0.3))),
        ("channel_mean", |t, v| t.channel_mean(v[0])),
        ("log_softmax", |t, v| t.log_softmax_channels(v[0])),
        ("mean", |t, v| Ok(t.mean(v[0]))),
        ("slice_batch", |t, v| t.slice_batch(v[0], 1)),
        ("slice_channels", |t, v| t.slice_channels(v[0], 1, 3)),
        ("sum_spatial", |t, v| t.sum_spatial(v[0])),
    ];
    for (name, op) in unary {
        let x = away_from_zero(&mut rng, &shape);
        let rep = check_gradients(
            &[x],
            |tape, v| {
                let y = op(tape, v)?;
                // weight by a fixed random field so no element's gradient vanishes
                let n = tape.value(y).numel();
                let w = Tensor::from_vec(tape.shape(y), r.data()[..n].to_vec())?;
                let wv = tape.constant(w);
                let p = tape.mul(y, wv)?;
                Ok(tape.sum(p))
            },
            1e-4,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{name}: {rep:?}");
    }

    let pos = Tensor::from_fn(&shape, |_| rng.random_range(0.5..2.0));
    let rep = check_gradients(
        &[pos],
        |t, v| {
            let y = t.ln(v[0]);
            let wv = t.constant(r.clone());
            let p = t.mul(y, wv)?;
            Ok(t.sum(p))
        },
        1e-4,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "ln: {rep:?}");

    type Binary = fn(&mut Tape<f64>, Var, Var) -> autograd::Result<Var>;
    let binary: Vec<(&str, Binary)> = vec![
        ("add", |t, a, b| t.add(a, b)),
        ("sub", |t, a, b| t.sub(a, b)),
        ("mul", |t, a, b| t.mul(a, b)),
        ("div", |t, a, b| t.div(a, b)),
        ("concat", |t, a, b| t.concat_channels(a, b)),
    ];
    for (name, op) in binary {
        let a = away_from_zero(&mut rng, &shape);
        let b = away_from_zero(&mut rng, &shape);
        let rep = check_gradients(
            &[a, b],
            |t, v| {
                let y = op(t, v[0], v[1])?;
                let q = t.mul(y, y)?;
                Ok(t.sum(q))
            },
            1e-4,
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{name}: {rep:?}");
    }

    let x = away_from_zero(&mut rng, &shape);
    let s = Tensor::scalar(0.7);
    let rep = check_gradients(
        &[x, s],
        |t, v| {
            let y = t.mul_scalar_var(v[0], v[1])?;
            let wv = t.constant(r.clone());
            let p = t.mul(y, wv)?;
            Ok(t.sum(p))
        },
        1e-4,
    )
    .unwrap();
    assert!(rep.max_rel_err < 1e-4, "mul_scalar_var: {rep:?}");
}

#[test]
fn forward_replay_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[1, 2, 6, 6, 6], -1.0, 1.0).cast::<f32>();
    let k = rand_tensor(&mut rng, &[4, 2, 3, 3, 1], -1.0, 1.0).cast::<f32>();
    let run = || {
        let mut tape = Tape::<f32>::new();
        let (xv, kv) = (tape.constant(x.clone()), tape.constant(k.clone()));
        let y = tape.conv3_same(xv, kv, None).unwrap();
        let y = tape.leaky_relu(y, 0.01);
        tape.value(y).clone()
    };
    assert!(run().bitwise_eq(&run()));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cosine_stays_in_unit_interval(
        a in prop::collection::vec(-1e3f64..1e3, 1..40),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.random_range(-1e3..1e3)).collect();
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(Tensor::from_vec(&[a.len()], a.clone()).unwrap());
        let bv = tape.constant(Tensor::from_vec(&[b.len()], b).unwrap());
        let c = tape.cosine_similarity(av, bv, 1e-8).unwrap();
        let v = tape.value(c).item();
        prop_assert!((-1.0 - 1e-6..=1.0 + 1e-6).contains(&v));
    }

    #[test]
    fn conv_output_extent_formula(
        d in 1usize..7, h in 1usize..7, w in 1usize..7,
        kz in prop::sample::select(vec![1usize, 3]),
        ky in prop::sample::select(vec![1usize, 3]),
        kx in prop::sample::select(vec![1usize, 3]),
        s in 1usize..3,
    ) {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones(&[1, 1, d, h, w]));
        let k = tape.constant(Tensor::ones(&[1, 1, kz, ky, kx]));
        let pad = [kz / 2, ky / 2, kx / 2];
        let y = tape.conv3(x, k, None, [s, s, s], pad).unwrap();
        let expect = |n: usize, k: usize, p: usize| (n + 2 * p - k) / s + 1;
        prop_assert_eq!(tape.shape(y), &[1, 1, expect(d, kz, pad[0]), expect(h, ky, pad[1]), expect(w, kx, pad[2])][..]);
    }
}
