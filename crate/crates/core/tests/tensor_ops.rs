use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spatialedit::tensor::{check_gradients, weighted_sum, Graph, Tensor};
use spatialedit::Error;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn mat(rows: usize, cols: usize, data: &[f32]) -> Tensor<f32> {
    Tensor::new([rows, cols], data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_annihilator() {
    let mut g = Graph::<f32>::new();
    let i2 = g.constant(mat(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    let p = g.matmul(i2, i2).unwrap();
    assert_eq!(g.value(p).data(), &[1.0, 0.0, 0.0, 1.0]);

    let a = g.constant(mat(2, 2, &[1.0, 2.0, 3.0, 4.0]));
    let z = g.constant(Tensor::zeros([2, 2]));
    let p = g.matmul(a, z).unwrap();
    assert!(g.value(p).data().iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_rejects_inner_mismatch() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros([3, 4]));
    let b = g.constant(Tensor::zeros([3, 2]));
    assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradient_matches_finite_difference() {
    let mut r = rng(11);
    let a = Tensor::<f64>::randn([3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn([4, 2], 1.0, &mut r);
    let errs = check_gradients(
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            weighted_sum(g, p)
        },
        &[a, b],
        1e-5,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-5), "{errs:?}");
}

#[test]
fn batched_and_transposed_matmul_gradients() {
    let mut r = rng(12);
    let a = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn([2, 5, 4], 1.0, &mut r);
    let errs = check_gradients(
        |g, v| {
            let p = g.matmul_t(v[0], v[1])?;
            weighted_sum(g, p)
        },
        &[a.clone(), b],
        1e-5,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-5), "{errs:?}");

    let shared = Tensor::<f64>::randn([4, 3], 1.0, &mut r);
    let errs = check_gradients(
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            weighted_sum(g, p)
        },
        &[a, shared],
        1e-5,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-5), "{errs:?}");
}

#[test]
fn matmul_t_equals_explicit_transpose() {
    let mut r = rng(13);
    let a = Tensor::<f64>::randn([3, 4], 1.0, &mut r);
    let b = Tensor::<f64>::randn([5, 4], 1.0, &mut r);
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b.clone()));
    let bt = g.constant(b.permute(&[1, 0]).unwrap());
    let p1 = g.matmul_t(av, bv).unwrap();
    let p2 = g.matmul(av, bt).unwrap();
    assert!(g.value(p1).max_abs_diff(g.value(p2)).unwrap() < 1e-12);
}

#[test]
fn softmax_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::zeros([3]));
    let s = g.softmax(x).unwrap();
    for &v in g.value(s).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let x = g.constant(Tensor::new([2], vec![1000.0, 0.0]).unwrap());
    let s = g.softmax(x).unwrap();
    let out = g.value(s).data();
    assert!(out.iter().all(|v| v.is_finite()));
    assert!((out[0] - 1.0).abs() < 1e-12 && out[1] < 1e-300);

    let mut g32 = Graph::<f32>::new();
    let x = g32.constant(Tensor::new([2], vec![1000.0, 0.0]).unwrap());
    let s = g32.softmax(x).unwrap();
    assert_eq!(g32.value(s).data()[0], 1.0);
}

#[test]
fn softmax_gradient() {
    let x = Tensor::<f64>::randn([2, 5], 1.0, &mut rng(21));
    let errs = check_gradients(
        |g, v| {
            let s = g.softmax(v[0])?;
            weighted_sum(g, s)
        },
        &[x],
        1e-5,
    )
    .unwrap();
    assert!(errs[0] < 1e-5, "{errs:?}");
}

#[test]
fn layer_norm_cases() {
    let mut g = Graph::<f64>::new();
    let x = g.constant(Tensor::full([2, 4], 3.5));
    let gain = g.constant(Tensor::ones([4]));
    let bias = g.constant(Tensor::zeros([4]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let x = g.constant(Tensor::randn([3, 4], 2.0, &mut rng(3)));
    let zero_gain = g.constant(Tensor::zeros([4]));
    let b = g.constant(Tensor::new([4], vec![0.1, -0.2, 0.3, 0.4]).unwrap());
    let y = g.layer_norm(x, zero_gain, b, 1e-5).unwrap();
    for row in g.value(y).data().chunks(4) {
        assert_eq!(row, &[0.1, -0.2, 0.3, 0.4]);
    }
}

#[test]
fn layer_norm_statistics_and_gradient() {
    let mut r = rng(31);
    let x = Tensor::<f64>::randn([4, 8], 3.0, &mut r);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let gain = g.constant(Tensor::ones([8]));
    let bias = g.constant(Tensor::zeros([8]));
    let y = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
    for row in g.value(y).data().chunks(8) {
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-4);
    }
    let gain = Tensor::<f64>::randn([8], 1.0, &mut r);
    let bias = Tensor::<f64>::randn([8], 1.0, &mut r);
    let errs = check_gradients(
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(g, y)
        },
        &[x, gain, bias],
        1e-5,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
}

#[test]
fn elementwise_cases() {
    let mut g = Graph::<f64>::new();
    let z = g.constant(Tensor::zeros([1]));
    let s = g.sigmoid(z);
    assert_eq!(g.value(s).item(), 0.5);

    let a = g.constant(Tensor::randn([2, 3], 1.0, &mut rng(4)));
    let ones = g.constant(Tensor::ones([2, 3]));
    let p = g.mul(a, ones).unwrap();
    assert_eq!(g.value(p), g.value(a));

    let big = g.constant(Tensor::new([3], vec![-800.0, 0.0, 800.0]).unwrap());
    let s = g.sigmoid(big);
    assert!(g.value(s).data().iter().all(|v| v.is_finite()));

    let b = g.constant(Tensor::zeros([3, 2]));
    assert!(matches!(g.add(a, b), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(41);
    let x = Tensor::<f64>::randn([16], 1.5, &mut r);
    let y = Tensor::<f64>::randn([16], 1.5, &mut r);
    let gelu = check_gradients(
        |g, v| {
            let o = g.gelu(v[0]);
            weighted_sum(g, o)
        },
        std::slice::from_ref(&x),
        1e-5,
    )
    .unwrap();
    assert!(gelu[0] < 1e-4, "{gelu:?}");

    let mixed = check_gradients(
        |g, v| {
            let s = g.sigmoid(v[0]);
            let m = g.mul(s, v[1])?;
            let d = g.sub(m, v[0])?;
            let a = g.add(d, v[1])?;
            let sc = g.scale(a, 0.7);
            weighted_sum(g, sc)
        },
        &[x, y],
        1e-5,
    )
    .unwrap();
    assert!(mixed.iter().all(|&e| e < 1e-4), "{mixed:?}");
}

#[test]
fn shape_op_gradients() {
    let mut r = rng(51);
    let x = Tensor::<f64>::randn([2, 3, 4], 1.0, &mut r);
    let y = Tensor::<f64>::randn([2, 2, 4], 1.0, &mut r);
    let bias = Tensor::<f64>::randn([3, 4], 1.0, &mut r);
    let table = Tensor::<f64>::randn([5, 4], 1.0, &mut r);
    let errs = check_gradients(
        |g, v| {
            let c = g.concat(&[v[0], v[1]], 1)?;
            let p = g.permute(c, &[2, 0, 1])?;
            let n = g.narrow(p, 2, 1, 3)?;
            let rs = g.reshape(n, [4, 6])?;
            let rows = g.gather_rows(v[3], &[4, 0, 4, 2])?;
            let rows = g.reshape(rows, [4, 1, 4])?;
            let rep = g.repeat(rows, 1, 6)?;
            let rep = g.reshape(rep, [4, 24])?;
            let rep = g.narrow(rep, 1, 0, 6)?;
            let s = g.add(rs, rep)?;
            let s = g.reshape(s, [2, 3, 4])?;
            let s = g.add_suffix(s, v[2])?;
            weighted_sum(g, s)
        },
        &[x, y, bias, table],
        1e-5,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
}

#[test]
fn mse_cases() {
    let mut g = Graph::<f64>::new();
    let p = g.constant(Tensor::randn([2, 3], 1.0, &mut rng(6)));
    let l = g.mse(p, p, None).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    let t = g.constant(g.value(p).map(|v| v - 1.0));
    let l = g.mse(p, t, None).unwrap();
    assert!((g.value(l).item() - 1.0).abs() < 1e-15);

    let empty = Tensor::zeros([2, 3]);
    assert!(matches!(g.mse(p, t, Some(&empty)), Err(Error::EmptyMask)));
}

#[test]
fn masked_mse_matches_brute_force() {
    let mut r = rng(61);
    let pred = Tensor::<f64>::randn([4, 5], 1.0, &mut r);
    let target = Tensor::<f64>::randn([4, 5], 1.0, &mut r);
    let mask = Tensor::<f64>::from_fn([4, 5], |i| if (i * 7) % 3 == 0 { 1.0 } else { 0.0 });
    let mut g = Graph::new();
    let (pv, tv) = (g.constant(pred.clone()), g.constant(target.clone()));
    let l = g.mse(pv, tv, Some(&mask)).unwrap();

    let mut total = 0.0;
    let mut count = 0;
    for i in 0..20 {
        if (i * 7) % 3 == 0 {
            total += (pred.data()[i] - target.data()[i]).powi(2);
            count += 1;
        }
    }
    assert!((g.value(l).item() - total / count as f64).abs() < 1e-14);

    let errs = check_gradients(|g, v| g.mse(v[0], v[1], Some(&mask)), &[pred, target], 1e-5).unwrap();
    assert!(errs.iter().all(|&e| e < 1e-6), "{errs:?}");
}

#[test]
fn backward_of_sum_is_ones() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::randn([3, 2], 1.0, &mut rng(7)), true);
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap(), &Tensor::ones([3, 2]));
}

#[test]
fn frozen_tensor_gets_no_gradient() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::randn([2, 2], 1.0, &mut rng(8)), true);
    let w = g.leaf(Tensor::randn([2, 2], 1.0, &mut rng(9)), false);
    let p = g.matmul(x, w).unwrap();
    let s = g.sum(p);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).is_some());
    assert!(grads.get(w).is_none());
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(Tensor::zeros([2]), true);
    assert!(matches!(g.backward(x), Err(Error::DisconnectedGraph(_))));
}

#[test]
fn composed_loss_gradient_check() {
    // mse over matmul -> softmax -> layer_norm
    let mut r = rng(71);
    let x = Tensor::<f64>::randn([3, 4], 1.0, &mut r);
    let w = Tensor::<f64>::randn([4, 6], 1.0, &mut r);
    let gain = Tensor::<f64>::randn([6], 1.0, &mut r);
    let bias = Tensor::<f64>::randn([6], 1.0, &mut r);
    let target = Tensor::<f64>::randn([3, 6], 1.0, &mut r);
    let errs = check_gradients(
        |g, v| {
            let h = g.matmul(v[0], v[1])?;
            let s = g.softmax(h)?;
            let n = g.layer_norm(s, v[2], v[3], 1e-5)?;
            let t = g.constant(target.clone());
            g.mse(n, t, None)
        },
        &[x, w, gain, bias],
        1e-5,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e < 1e-4), "{errs:?}");
}

#[test]
fn forward_backward_bitwise_reproducible() {
    let run = || {
        let mut r = rng(81);
        let mut g = Graph::<f32>::new();
        let x = g.leaf(Tensor::randn([8, 16], 1.0, &mut r), true);
        let w = g.leaf(Tensor::randn([16, 16], 0.3, &mut r), true);
        let h = g.matmul(x, w).unwrap();
        let h = g.gelu(h);
        let s = g.softmax(h).unwrap();
        let l = g.sum(s);
        let l2 = g.mse(h, x, None);
        let l = match l2 {
            Ok(l2) => g.add(l, l2).unwrap(),
            Err(_) => l,
        };
        let grads = g.backward(l).unwrap();
        (
            g.value(l).clone(),
            grads.get(w).unwrap().clone(),
            grads.get(x).unwrap().clone(),
        )
    };
    assert_eq!(run(), run());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::new([3, 4], vals).unwrap());
        let s = g.softmax(x).unwrap();
        for row in g.value(s).data().chunks(4) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sigmoid_strictly_inside_unit_interval(vals in prop::collection::vec(-30.0f32..30.0, 1..32)) {
        let n = vals.len();
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::new([n], vals).unwrap());
        let s = g.sigmoid(x);
        prop_assert!(g.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn permute_then_inverse_is_identity(a in 1usize..4, b in 1usize..4, c in 1usize..4, which in 0usize..6) {
        let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        let perm = perms[which];
        let mut inv = [0; 3];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let x = Tensor::<f32>::from_fn([a, b, c], |i| i as f32 * 1.25 - 3.0);
        let back = x.permute(&perm).unwrap().permute(&inv).unwrap();
        prop_assert_eq!(back, x);
    }

    #[test]
    fn concat_split_round_trip(rows in 1usize..4, wa in 1usize..5, wb in 1usize..5) {
        let a = Tensor::<f32>::from_fn([rows, wa, 2], |i| i as f32);
        let b = Tensor::<f32>::from_fn([rows, wb, 2], |i| -(i as f32));
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        let parts = c.split(1, &[wa, wb]).unwrap();
        prop_assert_eq!(&parts[0], &a);
        prop_assert_eq!(&parts[1], &b);
    }
}
