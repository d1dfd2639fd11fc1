use mubert_tensor::{finite_diff_check, finite_diff_check_many, Graph, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

fn eval(f: impl Fn(&mut Graph<f64>, &[Var]) -> mubert_tensor::Result<Var>, inputs: &[Tensor<f64>]) -> Tensor<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
    let y = f(&mut g, &vars).unwrap();
    g.value(y).clone()
}

fn naive_matmul(a: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
            }
        }
    }
    out
}

#[test]
fn matmul_identity_and_closed_form() {
    let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
    let b = t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]);
    let out = eval(|g, v| g.matmul(v[0], v[1]), &[id, b.clone()]);
    assert_eq!(out, b);

    let out = eval(|g, v| g.matmul(v[0], v[1]), &[t(&[1, 2], &[1.0, 2.0]), t(&[2, 1], &[3.0, 4.0])]);
    assert_eq!(out.data(), &[11.0]);
}

#[test]
fn matmul_matches_naive_product() {
    let a = random(&[7, 5], 1);
    let b = random(&[5, 3], 2);
    let out = eval(|g, v| g.matmul(v[0], v[1]), &[a.clone(), b.clone()]);
    for (x, y) in out.data().iter().zip(naive_matmul(&a, &b)) {
        assert!((x - y).abs() < 1e-12);
    }
    let bt = b.transpose().unwrap();
    let nt = eval(|g, v| g.matmul_nt(v[0], v[1]), &[a, bt]);
    assert_eq!(nt.shape(), out.shape());
    for (x, y) in nt.data().iter().zip(out.data()) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn matmul_gradient_matches_central_differences() {
    let errs = finite_diff_check_many(|g, v| g.matmul(v[0], v[1]), &[random(&[3, 4], 3), random(&[4, 2], 4)], 1e-5)
        .unwrap();
    assert!(errs.iter().all(|&e| e <= 1e-6), "{errs:?}");
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(random(&[2, 3], 5));
    let b = g.constant(random(&[2, 3], 6));
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(err, TensorError::Shape { op: "matmul", lhs: vec![2, 3], rhs: vec![2, 3] });
    assert!(err.to_string().contains("[2, 3] vs [2, 3]"));
}

#[test]
fn softmax_examples() {
    let one = eval(|g, v| g.softmax_rows(v[0]), &[t(&[1, 1], &[7.5])]);
    assert_eq!(one.data(), &[1.0]);

    let out = eval(|g, v| g.softmax_rows(v[0]), &[t(&[1, 2], &[0.0, 3f64.ln()])]);
    assert!((out.data()[0] - 0.25).abs() < 1e-12);
    assert!((out.data()[1] - 0.75).abs() < 1e-12);

    let out = eval(|g, v| g.softmax_rows(v[0]), &[Tensor::full(vec![1, 6], 2.0)]);
    assert!(out.data().iter().all(|&p| (p - 1.0 / 6.0).abs() < 1e-12));

    // Overflow-prone logits stay finite.
    let out = eval(|g, v| g.softmax_rows(v[0]), &[t(&[1, 3], &[1000.0, 999.0, -1000.0])]);
    assert!(out.all_finite());
}

#[test]
fn softmax_gradient_and_two_step_agreement() {
    let x = random(&[4, 4], 7);
    let e1 = finite_diff_check(|g, v| g.softmax_rows(v), &x, 1e-5).unwrap();
    let e2 = finite_diff_check(|g, v| g.softmax_rows(v), &x, 1e-4).unwrap();
    assert!(e1 <= 1e-6 && e2 <= 1e-6, "{e1} {e2}");
}

#[test]
fn layer_norm_examples() {
    let gain = Tensor::full(vec![4], 1.0);
    let bias = Tensor::zeros(vec![4]);
    let out = eval(|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5), &[Tensor::full(vec![1, 4], 3.0), gain, bias]);
    assert!(out.data().iter().all(|&v| v == 0.0));

    let out = eval(
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-12),
        &[t(&[1, 2], &[1.0, 3.0]), Tensor::full(vec![2], 1.0), Tensor::zeros(vec![2])],
    );
    assert!((out.data()[0] + 1.0).abs() < 1e-9 && (out.data()[1] - 1.0).abs() < 1e-9);

    let x = random(&[5, 8], 8);
    let out = eval(
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        &[x, Tensor::full(vec![8], 1.0), Tensor::zeros(vec![8])],
    );
    for r in 0..5 {
        let row = out.row(r);
        let mean: f64 = row.iter().sum::<f64>() / 8.0;
        let var: f64 = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}

#[test]
fn layer_norm_gradient() {
    let errs = finite_diff_check_many(
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        &[random(&[3, 6], 9), random(&[6], 10), random(&[6], 11)],
        1e-5,
    )
    .unwrap();
    assert!(errs.iter().all(|&e| e <= 1e-5), "{errs:?}");
}

#[test]
fn mse_examples_and_gelu_gradient() {
    let x = random(&[2, 3], 12);
    let zero = eval(|g, v| g.mse(v[0], v[1]), &[x.clone(), x.clone()]);
    assert_eq!(zero.data(), &[0.0]);
    let one = eval(|g, v| g.mse(v[0], v[1]), &[t(&[2], &[0.0, 0.0]), t(&[2], &[1.0, 1.0])]);
    assert_eq!(one.data(), &[1.0]);

    let e = finite_diff_check(|g, v| g.gelu(v), &random(&[10], 13), 1e-5).unwrap();
    assert!(e <= 1e-6, "{e}");
}

#[test]
fn backward_closed_forms() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(random(&[2, 3], 14));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).unwrap().data().iter().all(|&v| v == 1.0));

    let mut g = Graph::<f64>::new();
    let x = g.leaf(t(&[3], &[1.0, 2.0, 3.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq).unwrap();
    let grads = g.backward(loss).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
}

#[test]
fn backward_errors() {
    let mut g = Graph::<f64>::new();
    let c = g.constant(random(&[3], 15));
    let s = g.sum(c).unwrap();
    assert_eq!(g.backward(s).unwrap_err(), TensorError::Detached);

    let x = g.leaf(random(&[3], 16));
    assert!(matches!(g.backward(x), Err(TensorError::NonScalarLoss(_))));

    let mut other = Graph::<f64>::new();
    let y = other.leaf(Tensor::scalar(1.0));
    assert_eq!(g.backward(y).unwrap_err(), TensorError::ForeignVar);
}

#[test]
fn unused_leaves_receive_zero_gradients() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(random(&[3], 17));
    let unused = g.leaf(random(&[2, 2], 18));
    let s = g.sum(x).unwrap();
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(unused).unwrap(), &Tensor::zeros(vec![2, 2]));
}

#[test]
fn finite_diff_check_examples() {
    let e = finite_diff_check(|g, v| g.scale(v, 1.0), &random(&[5], 19), 1e-5).unwrap();
    assert!(e < 1e-8, "{e}");
    let e = finite_diff_check(
        |g, v| {
            let sq = g.mul(v, v)?;
            g.sum(sq)
        },
        &Tensor::new(vec![1], vec![2.0]).unwrap(),
        1e-5,
    )
    .unwrap();
    assert!(e < 1e-9, "{e}");
}

/// One gradient check per differentiable op, on inputs drawn from [-1, 1].
#[test]
fn every_op_passes_double_precision_gradient_check() {
    type Case = (&'static str, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> mubert_tensor::Result<Var>>, Vec<Tensor<f64>>);
    let positive = random(&[6], 20).map(|v| v.abs() + 0.5);
    let cases: Vec<Case> = vec![
        ("add", Box::new(|g, v| g.add(v[0], v[1])), vec![random(&[2, 3], 21), random(&[2, 3], 22)]),
        ("sub", Box::new(|g, v| g.sub(v[0], v[1])), vec![random(&[2, 3], 23), random(&[2, 3], 24)]),
        ("mul", Box::new(|g, v| g.mul(v[0], v[1])), vec![random(&[2, 3], 25), random(&[2, 3], 26)]),
        ("scale", Box::new(|g, v| g.scale(v[0], -0.7)), vec![random(&[4], 27)]),
        ("add_row", Box::new(|g, v| g.add_row(v[0], v[1])), vec![random(&[3, 4], 28), random(&[4], 29)]),
        ("mul_rows", Box::new(|g, v| g.mul_rows(v[0], v[1])), vec![random(&[3], 30), random(&[3, 4], 31)]),
        ("matmul_nt", Box::new(|g, v| g.matmul_nt(v[0], v[1])), vec![random(&[3, 4], 32), random(&[5, 4], 33)]),
        ("transpose", Box::new(|g, v| g.transpose(v[0])), vec![random(&[3, 2], 34)]),
        ("gelu", Box::new(|g, v| g.gelu(v[0])), vec![random(&[7], 35)]),
        ("softmax_rows", Box::new(|g, v| g.softmax_rows(v[0])), vec![random(&[3, 5], 36)]),
        ("mse", Box::new(|g, v| g.mse(v[0], v[1])), vec![random(&[2, 3], 37), random(&[2, 3], 38)]),
        ("mean", Box::new(|g, v| g.mean(v[0])), vec![random(&[2, 3], 39)]),
        ("reshape", Box::new(|g, v| g.reshape(v[0], vec![3, 2])), vec![random(&[2, 3], 40)]),
        ("concat_rows", Box::new(|g, v| g.concat_rows(&[v[0], v[1]])), vec![random(&[1, 3], 41), random(&[2, 3], 42)]),
        ("slice_rows", Box::new(|g, v| g.slice_rows(v[0], 1, 3)), vec![random(&[4, 2], 43)]),
        ("concat_cols", Box::new(|g, v| g.concat_cols(&[v[0], v[1]])), vec![random(&[2, 1], 44), random(&[2, 3], 45)]),
        ("slice_cols", Box::new(|g, v| g.slice_cols(v[0], 1, 3)), vec![random(&[2, 4], 46)]),
        ("diag", Box::new(|g, v| g.diag(v[0])), vec![random(&[3, 3], 47)]),
        ("normalize_sum", Box::new(|g, v| g.normalize_sum(v[0])), vec![positive]),
        ("mean_rows", Box::new(|g, v| g.mean_rows(v[0])), vec![random(&[3, 2], 48)]),
        ("cross_entropy", Box::new(|g, v| g.cross_entropy(v[0], 2)), vec![random(&[4], 49)]),
    ];
    for (name, f, inputs) in cases {
        let errs = finite_diff_check_many(|g, v| f(g, v), &inputs, 1e-5).unwrap();
        assert!(errs.iter().all(|&e| e <= 1e-6), "{name}: {errs:?}");
    }
}

#[test]
fn cross_entropy_uniform_logits() {
    let out = eval(|g, v| g.cross_entropy(v[0], 1), &[Tensor::zeros(vec![3])]);
    assert!((out.data()[0] - 3f64.ln()).abs() < 1e-12);
    let mut g = Graph::<f64>::new();
    let l = g.constant(Tensor::zeros(vec![3]));
    assert!(matches!(g.cross_entropy(l, 3), Err(TensorError::Index { .. })));
}

#[test]
fn single_precision_ops_track_double_gradients() {
    // Same graph in f32 and f64; the f32 reverse pass must agree with f64
    // central differences to 1e-3.
    let a = random(&[4, 6], 50);
    let b = random(&[6, 3], 51);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let m = g.matmul(v[0], v[1])?;
        let s = g.softmax_rows(m)?;
        g.gelu(s)
    };
    let numeric = mubert_tensor::numeric_gradients(&f, &[a.clone(), b.clone()], 1e-6).unwrap();
    let f32_grads = mubert_tensor::analytic_gradients(
        &|g: &mut Graph<f32>, v: &[Var]| {
            let m = g.matmul(v[0], v[1])?;
            let s = g.softmax_rows(m)?;
            g.gelu(s)
        },
        &[a.cast::<f32>(), b.cast::<f32>()],
    )
    .unwrap();
    for (an, nu) in f32_grads.iter().zip(&numeric) {
        for (&x, &y) in an.data().iter().zip(nu.data()) {
            assert!(mubert_tensor::relative_error(x as f64, y) <= 1e-3, "{x} vs {y}");
        }
    }
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..40, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let x = random(&[rows, cols], seed).map(|v| v * scale);
        let y = mubert_tensor::softmax_rows(&x.cast::<f32>());
        for r in 0..rows {
            let s: f64 = y.row(r).iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6, "row sum {}", s);
        }
    }

    #[test]
    fn reshape_transpose_round_trip(r in 1usize..8, c in 1usize..8, seed in any::<u64>()) {
        let x = random(&[r, c], seed);
        prop_assert_eq!(&x.transpose().unwrap().transpose().unwrap(), &x);
        prop_assert_eq!(&x.reshape(vec![r * c]).unwrap().reshape(vec![r, c]).unwrap(), &x);
    }

    #[test]
    fn backward_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        let x0 = random(&[3, 4], seed);
        let w0 = random(&[4, 2], seed ^ 0x55);
        let grad = |ca: f64, cb: f64| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(x0.clone());
            let w = g.constant(w0.clone());
            let m = g.matmul(x, w).unwrap();
            let l1 = g.sum(m).unwrap();
            let sm = g.softmax_rows(m).unwrap();
            let sq = g.mul(sm, sm).unwrap();
            let l2 = g.mean(sq).unwrap();
            let s1 = g.scale(l1, ca).unwrap();
            let s2 = g.scale(l2, cb).unwrap();
            let total = g.add(s1, s2).unwrap();
            g.backward(total).unwrap().get(x).unwrap().clone()
        };
        let both = grad(a, b);
        let g1 = grad(1.0, 0.0);
        let g2 = grad(0.0, 1.0);
        for i in 0..both.len() {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            prop_assert!((both.data()[i] - expect).abs() <= 1e-6);
        }
    }
}
