use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn tensor_rejects_bad_shapes() {
    assert!(Tensor::new([2, 3], vec![0.0; 5]).is_err());
    assert!(matches!(
        Tensor::new([2, 0], vec![]),
        Err(TensorError::Dimension { .. })
    ));
    assert_eq!(Tensor::scalar(3.0).numel(), 1);
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let eye = g.constant(Tensor::eye(2).unwrap());
    let b = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
    let out = g.matmul(eye, b).unwrap();
    assert_eq!(g.data(out), &[5.0, 6.0, 7.0, 8.0]);

    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.data(out), &[19.0, 22.0, 43.0, 50.0]);

    let z = g.constant(Tensor::zeros([2, 3]).unwrap());
    let any = g.constant(Tensor::from_fn([3, 4], |i| i as f64 - 3.3).unwrap());
    let out = g.matmul(z, any).unwrap();
    assert_eq!(g.shape(out), &[2, 4]);
    assert!(g.data(out).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros([2, 3]).unwrap());
    let b = g.constant(Tensor::zeros([4, 2]).unwrap());
    let err = g.matmul(a, b).unwrap_err();
    assert_eq!(
        err,
        TensorError::ShapeMismatch {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![4, 2]
        }
    );
    assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
}

#[test]
fn layernorm_examples() {
    let mut g = Graph::new();
    let ones = g.constant(Tensor::ones([2]).unwrap());
    let zeros = g.constant(Tensor::zeros([2]).unwrap());

    let c = g.constant(t(&[1, 2], &[4.0, 4.0]));
    let out = g.layernorm(c, ones, zeros, 1e-5).unwrap();
    assert_eq!(g.data(out), &[0.0, 0.0]);

    let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
    let out = g.layernorm(x, ones, zeros, 1e-14).unwrap();
    assert!(close(g.data(out), &[-1.0, 1.0], 1e-12));

    let beta = g.constant(t(&[2], &[0.25, -0.5]));
    let out = g.layernorm(x, zeros, beta, 1e-5).unwrap();
    assert_eq!(g.data(out), &[0.25, -0.5]);
}

#[test]
fn layernorm_rejects_wrong_gamma_and_eps() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros([2, 3]).unwrap());
    let p = g.constant(Tensor::ones([2]).unwrap());
    let q = g.constant(Tensor::ones([3]).unwrap());
    assert!(g.layernorm(x, p, p, 1e-5).is_err());
    assert!(matches!(g.layernorm(x, q, q, 0.0), Err(TensorError::Contract(_))));
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[2.5, 2.5, 2.5]));
    let s = g.softmax(x, 0).unwrap();
    assert!(close(g.data(s), &[1.0 / 3.0; 3], 1e-15));

    let x = g.constant(t(&[2], &[0.0, 3f64.ln()]));
    let s = g.softmax(x, 0).unwrap();
    assert!(close(g.data(s), &[0.25, 0.75], 1e-15));

    let x = g.constant(t(&[2], &[0.0, 1000.0]));
    let s = g.softmax(x, 0).unwrap();
    let d = g.data(s);
    assert!(d.iter().all(|v| v.is_finite()));
    assert!(d[0] < 1e-300 && (d[1] - 1.0).abs() < 1e-15);
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let z = g.constant(Tensor::scalar(0.0));
    let th = g.tanh(z);
    assert_eq!(g.data(th), &[0.0]);

    let v = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let m = g.mean(v);
    assert_eq!(g.data(m), &[2.0]);
    let var = g.variance(v);
    assert!((g.data(var)[0] - 2.0 / 3.0).abs() < 1e-15);

    let six = g.constant(Tensor::from_fn([6], |i| i as f64).unwrap());
    let r = g.reshape(six, &[2, 3]).unwrap();
    let back = g.reshape(r, &[6]).unwrap();
    assert_eq!(g.data(back), g.data(six));

    let bad = g.constant(Tensor::zeros([4]).unwrap());
    assert!(matches!(g.add(v, bad), Err(TensorError::ShapeMismatch { .. })));
    assert!(g.reshape(six, &[4]).is_err());
}

#[test]
fn gelu_reference_values() {
    let mut g = Graph::new();
    let x = g.constant(t(&[3], &[0.0, 1.0, -1.0]));
    let y = g.gelu(x);
    let d = g.data(y);
    assert_eq!(d[0], 0.0);
    // tanh approximation: 0.5·(1 + tanh(√(2/π)·1.044715))
    assert!((d[1] - 0.841_191_990_608_276_8).abs() < 1e-12);
    assert!((d[2] + 0.158_808_009_391_723_24).abs() < 1e-12);
}

#[test]
fn concat_slice_index_select() {
    let mut g = Graph::new();
    let a = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = g.constant(t(&[2, 1], &[9.0, 8.0]));
    let c = g.concat(&[a, b], 1).unwrap();
    assert_eq!(g.data(c), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    let s = g.slice(c, 1, 1, 2).unwrap();
    assert_eq!(g.data(s), &[2.0, 9.0, 4.0, 8.0]);
    let i = g.index_select(c, 0, &[1, 1, 0]).unwrap();
    assert_eq!(g.shape(i), &[3, 3]);
    assert_eq!(&g.data(i)[..3], &[3.0, 4.0, 8.0]);
    assert!(g.slice(c, 1, 2, 2).is_err());
    assert!(g.index_select(c, 0, &[2]).is_err());
}

#[test]
fn backward_square_sum() {
    let mut g = Graph::new();
    let x = g.param(&t(&[2], &[1.0, -2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0]);
}

#[test]
fn backward_tanh_at_zero() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::zeros([3]).unwrap());
    let th = g.tanh(x);
    let loss = g.sum(th);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_accumulates_until_zeroed() {
    let mut g = Graph::new();
    let x = g.param(&t(&[2], &[1.0, -2.0]));
    let sq = g.mul(x, x).unwrap();
    let loss = g.sum(sq);
    g.backward(loss).unwrap();
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[4.0, -8.0]);
    g.zero_grads();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 0.0]);
    g.backward(loss).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[2.0, -4.0]);
}

#[test]
fn backward_rejects_non_scalar() {
    let mut g = Graph::new();
    let x = g.param(&Tensor::zeros([3]).unwrap());
    let th = g.tanh(x);
    assert!(matches!(g.backward(th), Err(TensorError::Contract(_))));
}

#[test]
fn detach_cuts_gradient() {
    let mut g = Graph::new();
    let x = g.param(&t(&[2], &[1.0, 2.0]));
    let y = g.scale(x, 3.0);
    let d = g.detach(y);
    assert_eq!(g.data(d), g.data(y));
    let prod = g.mul(d, x).unwrap();
    let loss = g.sum(prod);
    g.backward(loss).unwrap();
    // Only the direct path through x contributes: d(sum(c·x))/dx = c.
    assert_eq!(g.grad(x).unwrap(), &[3.0, 6.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let mut g = Graph::new();
    let w = g.constant(t(&[2], &[1.0, 2.0]));
    let x = g.param(&t(&[2], &[3.0, 4.0]));
    let p = g.mul(w, x).unwrap();
    let loss = g.sum(p);
    g.backward(loss).unwrap();
    assert!(g.grad(w).is_none());
    assert_eq!(g.grad(x).unwrap(), &[1.0, 2.0]);
}

#[test]
fn op_suite_passes_gradcheck() {
    for seed in [0, 1, 2] {
        for report in gradcheck::gradcheck(seed) {
            assert!(report.passed, "{} rel err {}", report.name, report.max_rel_err);
        }
    }
}

#[test]
fn op_suite_covers_every_registered_op() {
    let names: Vec<String> = gradcheck::op_suite(0).into_iter().map(|c| c.name).collect();
    for op in gradcheck::DIFFERENTIABLE_OPS {
        assert!(
            names.iter().any(|n| n == op || n.starts_with(&format!("{op}_"))),
            "no gradcheck case for {op}"
        );
    }
}

#[test]
fn gradcheck_named_examples() {
    let suite = gradcheck::op_suite(11);
    for name in ["matmul", "layernorm", "softmax_cross_entropy"] {
        let case = suite.iter().find(|c| c.name == name).unwrap();
        let err = gradcheck::check_case(case, 1e-5, 11).unwrap();
        assert!(err < 1e-4, "{name}: {err}");
    }
}

#[test]
fn gradcheck_flags_a_broken_op() {
    let x = Tensor::from_fn([4], |i| 0.3 * i as f64 - 0.5).unwrap();
    let case = gradcheck::GradCase::new("broken_square", vec![x], |g, v| {
        let value = g.value(v[0]).clone();
        let sq = Tensor::new(value.shape().to_vec(), value.data().iter().map(|a| a * a).collect())?;
        // Wrong VJP: should be 2·x·g.
        Ok(g.custom(
            &[v[0]],
            sq,
            Box::new(|g, ins, _| vec![Some(ins[0].data().iter().zip(g).map(|(x, g)| x * g).collect())]),
        ))
    });
    let reports = gradcheck::run_cases(&[case], 1e-4, 0);
    assert!(!reports[0].passed);
}

#[test]
fn composite_chain_matches_finite_differences() {
    let x = Tensor::from_fn([3, 4], |i| ((i * 7 % 11) as f64) / 5.0 - 1.0).unwrap();
    let w = Tensor::from_fn([4, 4], |i| ((i * 5 % 13) as f64) / 6.5 - 1.0).unwrap();
    let gam = Tensor::from_fn([4], |i| 1.0 + 0.1 * i as f64).unwrap();
    let bet = Tensor::from_fn([4], |i| -0.2 * i as f64).unwrap();
    let case = gradcheck::GradCase::new("chain", vec![x, w, gam, bet], |g, v| {
        let h = g.matmul(v[0], v[1])?;
        let h = g.gelu(h);
        let h = g.layernorm(h, v[2], v[3], 1e-5)?;
        let s = g.softmax(h, 1)?;
        let t = g.transpose(s, &[1, 0])?;
        let r = g.reshape(t, &[2, 6])?;
        let m = g.mean_axis(r, 1)?;
        let e = g.exp(m);
        Ok(g.sum(e))
    });
    assert!(gradcheck::check_case(&case, 1e-5, 3).unwrap() < 1e-4);
}

mod props {
    use super::*;
    use proptest::prelude::*;

    fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
        let n: usize = shape.iter().product();
        proptest::collection::vec(-2.0f64..2.0, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn softmax_rows_sum_to_one(x in (1usize..6, 1usize..6).prop_flat_map(|(r, c)| tensor(vec![r, c]))) {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let s = g.softmax(v, 1).unwrap();
            let cols = x.shape()[1];
            for row in g.data(s).chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                prop_assert!(row.iter().all(|&p| p > 0.0 && p < 1.0 || cols == 1));
            }
        }

        #[test]
        fn transpose_round_trip_is_exact(x in (1usize..5, 1usize..5, 1usize..5).prop_flat_map(|(a, b, c)| tensor(vec![a, b, c]))) {
            let mut g = Graph::new();
            let v = g.constant(x.clone());
            let p = g.transpose(v, &[2, 0, 1]).unwrap();
            let back = g.transpose(p, &[1, 2, 0]).unwrap();
            prop_assert_eq!(g.value(back).data(), x.data());
            prop_assert_eq!(g.shape(back), x.shape());
        }

        #[test]
        fn forward_is_deterministic(x in tensor(vec![4, 6]), w in tensor(vec![6, 3])) {
            let run = || {
                let mut g = Graph::new();
                let a = g.constant(x.clone());
                let b = g.constant(w.clone());
                let h = g.matmul(a, b).unwrap();
                let h = g.gelu(h);
                let s = g.softmax(h, 1).unwrap();
                g.value(s).clone()
            };
            prop_assert_eq!(run(), run());
        }

        #[test]
        fn random_composite_gradients(x in tensor(vec![3, 4]), w in tensor(vec![4, 2])) {
            let case = gradcheck::GradCase::new("prop", vec![x, w], |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.tanh(h);
                let s = g.softmax(h, 0)?;
                let sq = g.mul(s, h)?;
                Ok(g.mean(sq))
            });
            prop_assert!(gradcheck::check_case(&case, 1e-5, 0).unwrap() < 1e-4);
        }
    }
}
