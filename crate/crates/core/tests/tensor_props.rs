use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use remocap::tensor::{grad_check, GradCheckConfig, Tape, Tensor, Var};

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn shape_strategy() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=5, 1..=4)
}

fn conv_oracle(x: &Tensor, w: &Tensor) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut out = Tensor::zeros([cout, h, wd]);
    for o in 0..cout {
        for i in 0..h {
            for j in 0..wd {
                let mut acc = 0.0;
                for c in 0..cin {
                    for di in 0..k {
                        for dj in 0..k {
                            let (y, xx) = (i as isize + di as isize - pad, j as isize + dj as isize - pad);
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                acc += x.get(&[c, y as usize, xx as usize]) * w.get(&[o, c, di, dj]);
                            }
                        }
                    }
                }
                out.set(&[o, i, j], acc);
            }
        }
    }
    out
}

#[test]
fn conv_identity_kernel_passes_input_through() {
    let tape = Tape::new();
    let x = random(&[3, 4, 5], 1);
    let mut w = Tensor::zeros([3, 3, 1, 1]);
    for c in 0..3 {
        w.set(&[c, c, 0, 0], 1.0);
    }
    let y = tape.constant(x.clone()).conv2d(tape.constant(w), 1).unwrap();
    assert_eq!(y.to_tensor(), x);
}

#[test]
fn conv_all_ones_interior_sums_window() {
    let tape = Tape::new();
    let x = Tensor::full([1, 5, 5], 0.25);
    let y = tape
        .constant(x)
        .conv2d(tape.constant(Tensor::full([1, 1, 3, 3], 1.0)), 1)
        .unwrap()
        .to_tensor();
    assert_eq!(y.get(&[0, 2, 2]), 9.0 * 0.25);
    assert_eq!(y.get(&[0, 0, 0]), 4.0 * 0.25);
}

#[test]
fn pooling_two_element_means() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    assert_eq!(x.avg_pool_axis(1).unwrap().to_tensor().data(), &[1.5, 3.5]);
    let g = tape.constant(Tensor::new([1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap());
    assert_eq!(g.global_avg_pool_2d().unwrap().to_tensor().data(), &[1.5]);
}

#[test]
fn backward_reaches_every_leaf_once_per_use() {
    // y = x*x + x, dy/dx = 2x + 1
    let tape = Tape::new();
    let x = tape.leaf(Tensor::new([3], vec![1.0, -2.0, 0.5]).unwrap());
    let y = x.mul(x).unwrap().add(x).unwrap().sum();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).data(), &[3.0, -3.0, 2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn permute_round_trip_is_bit_exact(shape in shape_strategy(), seed in any::<u64>(), rot in 0usize..4) {
        let x = random(&shape, seed);
        let n = shape.len();
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        prop_assert_eq!(x.permute(&perm).unwrap().permute(&inv).unwrap(), x.clone());
        let flat = x.clone().reshape([x.numel()]).unwrap().reshape(shape.clone()).unwrap();
        prop_assert_eq!(flat, x);
    }

    #[test]
    fn softmax_rows_sum_to_one(shape in shape_strategy(), seed in any::<u64>()) {
        let tape = Tape::new();
        let axis = shape.len() - 1;
        let x = tape.constant(random(&shape, seed).reshape(shape.clone()).unwrap());
        let y = x.scale(20.0).softmax(axis).unwrap().to_tensor();
        for row in y.data().chunks(shape[axis]) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn sigmoid_is_strictly_inside_unit_interval(seed in any::<u64>()) {
        let tape = Tape::new();
        let y = tape.constant(random(&[64], seed)).scale(30.0).sigmoid().to_tensor();
        prop_assert!(y.data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn conv_matches_nested_loop(seed in any::<u64>(), k in prop::sample::select(vec![1usize, 3]),
                                cin in 1usize..4, cout in 1usize..4, h in 1usize..7, w in 1usize..7) {
        let x = random(&[cin, h, w], seed);
        let wt = random(&[cout, cin, k, k], seed ^ 0x5555);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).conv2d(tape.constant(wt.clone()), 1).unwrap().to_tensor();
        prop_assert!(y.max_abs_diff(&conv_oracle(&x, &wt)) <= 1e-12);
    }

    #[test]
    fn avg_pool_matches_loop_mean(shape in shape_strategy(), seed in any::<u64>(), axis_pick in 0usize..4) {
        let axis = axis_pick % shape.len();
        let x = random(&shape, seed);
        let tape = Tape::new();
        let y = tape.constant(x.clone()).avg_pool_axis(axis).unwrap().to_tensor();
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let n = shape[axis];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = 0.0;
                for a in 0..n {
                    s += x.data()[(o * n + a) * inner + i];
                }
                prop_assert!((y.data()[o * inner + i] - s / n as f64).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ops_are_deterministic(seed in any::<u64>()) {
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(random(&[2, 4, 3, 3], seed));
            let w = tape.leaf(random(&[4, 4, 3, 3], seed + 1));
            let y = x.conv2d(w, 1).unwrap().silu().softmax(3).unwrap().sum();
            let g = tape.backward(y).unwrap();
            (y.item(), g.get(x), g.get(w))
        };
        prop_assert_eq!(run(), run());
    }
}

type Op = for<'t> fn(Var<'t>, Var<'t>) -> remocap::Result<Var<'t>>;

fn check_binary(op: Op, a: &[usize], b: &[usize], seed: u64) {
    let params = vec![("a".to_string(), random(a, seed)), ("b".to_string(), random(b, seed + 7))];
    let r = grad_check(
        |tape, v| {
            let y = op(v[0], v[1])?;
            let probe = tape.constant(random(&y.shape(), seed + 99));
            Ok(y.mul(probe)?.sum())
        },
        &params,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.pass, "{r}");
}

#[test]
fn differentiable_ops_pass_grad_check() {
    let ops: Vec<(Op, Vec<usize>, Vec<usize>)> = vec![
        (|a, b| a.mul(b), vec![3, 4], vec![3, 4]),
        (|a, b| a.sub(b)?.abs().add(b.sigmoid()), vec![2, 3, 2], vec![2, 3, 2]),
        (|a, b| a.matmul(b), vec![2, 3, 4], vec![2, 4, 5]),
        (|a, b| a.conv2d(b, 1), vec![2, 3, 5, 5], vec![4, 3, 3, 3]),
        (|a, b| a.conv2d(b, 2), vec![1, 2, 6, 5], vec![3, 2, 3, 3]),
        (|a, b| a.mul(b)?.softmax(1), vec![2, 5], vec![2, 5]),
        (|a, b| Ok(a.add(b)?.gelu().silu()), vec![4, 4], vec![4, 4]),
        (|a, b| a.mul(b)?.norm_last(), vec![3, 3], vec![3, 3]),
        (|a, b| a.add(b)?.mean_axis(1)?.permute(&[1, 0]), vec![3, 4, 2], vec![3, 4, 2]),
        (
            |a, b| {
                let gamma = b.slice(0, 0, 1)?.reshape([4])?;
                let beta = b.slice(0, 1, 1)?.reshape([4])?;
                a.group_norm(2, gamma, beta)
            },
            vec![2, 4, 3, 3],
            vec![2, 4],
        ),
        (
            |a, b| {
                let gamma = b.slice(0, 0, 1)?.reshape([5])?;
                let beta = b.slice(0, 1, 1)?.reshape([5])?;
                a.layer_norm(gamma, beta)
            },
            vec![3, 5],
            vec![2, 5],
        ),
        (|a, b| Var::concat(&[a, b], 1)?.slice(1, 1, 3), vec![2, 2], vec![2, 3]),
    ];
    for (i, (op, a, b)) in ops.into_iter().enumerate() {
        check_binary(op, &a, &b, 1000 + i as u64);
    }
}
