use approx::assert_abs_diff_eq;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn m(rows: &[&[f64]]) -> Tensor<f64> {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn matmul_identity_and_hand_values() {
    let mut g = Graph::new();
    let a = g.constant(m(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let eye = g.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let col = g.constant(m(&[&[5.0], &[6.0]]));
    let same = g.matmul(a, eye).unwrap();
    assert_eq!(g.value(same).data(), &[1.0, 2.0, 3.0, 4.0]);
    let prod = g.matmul(a, col).unwrap();
    assert_eq!(g.value(prod).shape(), &[2, 1]);
    assert_eq!(g.value(prod).data(), &[17.0, 39.0]);
}

#[test]
fn matmul_rejects_bad_inner_extent() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::<f64>::zeros(&[2, 3]));
    let b = g.constant(Tensor::<f64>::zeros(&[2, 3]));
    assert!(matches!(g.matmul(a, b), Err(NumericsError::ShapeMismatch { .. })));
}

#[test]
fn matmul_gradient_of_sum_is_row_sums_of_b_transpose() {
    // d/dA sum(A·B) = 1·Bᵀ; with B all ones every entry equals n.
    let mut g = Graph::new();
    let a = g.param(m(&[&[0.3, -1.0, 2.0], &[0.5, 0.1, -0.7]]));
    let b = g.constant(Tensor::filled(&[3, 4], 1.0));
    let c = g.matmul(a, b).unwrap();
    let s = g.sum(c);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(a).data().iter().all(|&x| x == 4.0));

    let err = grad_check(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            Ok(g.sum(c))
        },
        &[m(&[&[0.3, -1.0, 2.0], &[0.5, 0.1, -0.7]]), Tensor::filled(&[3, 4], 1.0)],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn pointwise_values() {
    let mut g = Graph::new();
    let z = g.param(Tensor::scalar(0.0f64));
    let t = g.tanh(z);
    let s = g.sigmoid(z);
    assert_eq!(g.value(t).data()[0], 0.0);
    assert_eq!(g.value(s).data()[0], 0.5);

    let x = g.param(Tensor::scalar(-3.2f64));
    let r = g.relu(x);
    assert_eq!(g.value(r).data()[0], 0.0);
    let grads = g.backward(r).unwrap();
    assert_eq!(grads.get(x).data()[0], 0.0);
}

#[test]
fn elementwise_dispatch_checks_arity_and_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::<f64>::zeros(&[2, 2]));
    let b = g.constant(Tensor::<f64>::zeros(&[3]));
    assert!(g.elementwise(Elementwise::Add, &[a]).is_err());
    assert!(matches!(
        g.elementwise(Elementwise::Hadamard, &[a, b]),
        Err(NumericsError::ShapeMismatch { .. })
    ));
    let s = g.constant(Tensor::scalar(2.0));
    let ok = g.elementwise(Elementwise::Sub, &[a, s]).unwrap();
    assert_eq!(g.value(ok).data(), &[-2.0; 4]);
}

#[test]
fn max_over_time_values_and_ties() {
    let mut g = Graph::new();
    let h = g.param(m(&[&[1.0, 5.0], &[3.0, 2.0]]));
    let p = g.max_over_time(h).unwrap();
    assert_eq!(g.value(p).data(), &[3.0, 5.0]);

    let single = g.param(m(&[&[0.25, -4.0, 9.0]]));
    let ps = g.max_over_time(single).unwrap();
    assert_eq!(g.value(ps).data(), &[0.25, -4.0, 9.0]);

    let tied = g.param(m(&[&[2.0, 2.0], &[2.0, 2.0]]));
    let pt = g.max_over_time(tied).unwrap();
    assert_eq!(g.value(pt).data(), &[2.0, 2.0]);
    let s = g.sum(pt);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(tied).data(), &[1.0, 1.0, 0.0, 0.0]);
}

#[test]
fn masked_step_max_ignores_padding_steps() {
    let mut g = Graph::new();
    let s0 = g.param(m(&[&[0.0, 1.0], &[0.0, 1.0]]));
    let s1 = g.param(m(&[&[9.0, 9.0], &[-1.0, 5.0]]));
    let p = g.masked_step_max(&[s0, s1], &[1, 2]).unwrap();
    assert_eq!(g.value(p).data(), &[0.0, 1.0, 0.0, 5.0]);
    assert!(matches!(
        g.masked_step_max(&[s0, s1], &[0, 2]),
        Err(NumericsError::EmptyTimeAxis)
    ));
    assert!(g.masked_step_max(&[], &[]).is_err());
}

#[test]
fn cosine_values() {
    let mut g = Graph::new();
    let u = g.param(Tensor::vector(vec![1.0f64, 0.0]).unwrap());
    let v = g.param(Tensor::vector(vec![0.0f64, 1.0]).unwrap());
    let c = g.cosine(u, v).unwrap();
    assert_eq!(g.value(c).data()[0], 0.0);

    let a = g.param(Tensor::vector(vec![3.0f64, 4.0]).unwrap());
    let b = g.param(Tensor::vector(vec![3.0f64, 4.0]).unwrap());
    let cab = g.cosine(a, b).unwrap();
    assert_abs_diff_eq!(g.value(cab).data()[0], 1.0, epsilon = 1e-12);
    let grads = g.backward(cab).unwrap();
    for x in grads.get(a).data() {
        assert_abs_diff_eq!(*x, 0.0, epsilon = 1e-12);
    }

    let p = g.constant(Tensor::vector(vec![1.0f64, 1.0]).unwrap());
    let q = g.constant(Tensor::vector(vec![1.0f64, 0.0]).unwrap());
    let cpq = g.cosine(p, q).unwrap();
    assert_abs_diff_eq!(g.value(cpq).data()[0], std::f64::consts::FRAC_1_SQRT_2, epsilon = 1e-12);
}

#[test]
fn cosine_rejects_zero_norm() {
    let mut g = Graph::new();
    let u = g.param(Tensor::vector(vec![0.0f64, 0.0]).unwrap());
    let v = g.param(Tensor::vector(vec![1.0f64, 0.0]).unwrap());
    assert_eq!(g.cosine(u, v), Err(NumericsError::ZeroNorm));
    assert_eq!(cosine_similarity(&[0.0f32], &[1.0]), Err(NumericsError::ZeroNorm));
}

#[test]
fn backward_basics() {
    let mut g = Graph::new();
    let x = g.param(m(&[&[0.1, 0.2, 0.3], &[1.0, 2.0, 3.0]]));
    let unused = g.param(Tensor::vector(vec![5.0f64, 6.0]).unwrap());
    let s = g.sum(x);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(x).data().iter().all(|&v| v == 1.0));
    assert!(grads.get(unused).data().iter().all(|&v| v == 0.0));
    assert!(matches!(g.backward(x), Err(NumericsError::NonScalarLoss(_))));
}

#[test]
fn grad_check_of_sum_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = random_tensor(&mut rng, &[3, 5]);
    let err = grad_check(|g, v| Ok(g.sum(v[0])), &[p], 1e-5).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn composite_cosine_of_linear_map() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..10 {
        let w = random_tensor(&mut rng, &[3, 4]);
        let x = random_tensor(&mut rng, &[4, 1]);
        let y = random_tensor(&mut rng, &[3, 1]);
        let err = grad_check(
            |g, v| {
                let wx = g.matmul(v[0], v[1])?;
                g.cosine(wx, v[2])
            },
            &[w, x, y],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

/// One gradient check per differentiable op, at random points kept away
/// from the relu kink and from max-pool ties.
#[test]
fn every_op_passes_grad_check() {
    type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, NumericsError>>;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cases: Vec<(&str, Vec<Vec<usize>>, Build)> = vec![
        (
            "matmul",
            vec![vec![2, 3], vec![3, 2]],
            Box::new(|g, v| {
                let c = g.matmul(v[0], v[1])?;
                let t = g.tanh(c);
                Ok(g.sum(t))
            }),
        ),
        (
            "transpose",
            vec![vec![2, 3], vec![2, 3]],
            Box::new(|g, v| {
                let t = g.transpose(v[0])?;
                let p = g.matmul(v[1], t)?;
                let s = g.sigmoid(p);
                Ok(g.sum(s))
            }),
        ),
        (
            "add_sub_mul",
            vec![vec![2, 2], vec![2, 2], vec![1]],
            Box::new(|g, v| {
                let a = g.add(v[0], v[1])?;
                let b = g.sub(a, v[2])?;
                let c = g.mul(b, v[0])?;
                let d = g.mul(c, v[2])?;
                let t = g.tanh(d);
                Ok(g.mean(t))
            }),
        ),
        (
            "relu",
            vec![vec![3, 2]],
            Box::new(|g, v| {
                let sq = g.mul(v[0], v[0])?;
                let r = g.relu(v[0]);
                let p = g.mul(r, sq)?;
                Ok(g.sum(p))
            }),
        ),
        (
            "narrow_concat_stack",
            vec![vec![2, 4]],
            Box::new(|g, v| {
                let a = g.narrow_cols(v[0], 0, 2)?;
                let b = g.narrow_cols(v[0], 1, 3)?;
                let c = g.concat_cols(&[a, b])?;
                let r0 = g.narrow_cols(v[0], 2, 2)?;
                let t = g.tanh(c);
                let s = g.sum(t);
                let r0t = g.transpose(r0)?;
                let rows = g.stack_rows(&[s, s])?;
                let q = g.matmul(r0t, rows)?;
                let z = g.sigmoid(q);
                Ok(g.sum(z))
            }),
        ),
        (
            "max_over_time",
            vec![vec![4, 3]],
            Box::new(|g, v| {
                let p = g.max_over_time(v[0])?;
                let t = g.tanh(p);
                Ok(g.sum(t))
            }),
        ),
        (
            "masked_step_max",
            vec![vec![2, 3], vec![2, 3], vec![2, 3]],
            Box::new(|g, v| {
                let p = g.masked_step_max(&v[..3], &[3, 2])?;
                let t = g.sigmoid(p);
                Ok(g.sum(t))
            }),
        ),
        (
            "gather_rows",
            vec![vec![4, 3]],
            Box::new(|g, v| {
                let r = g.gather_rows(v[0], &[2, 0, 2])?;
                let t = g.tanh(r);
                let s = g.mul(t, r)?;
                Ok(g.sum(s))
            }),
        ),
        ("cosine", vec![vec![5], vec![5]], Box::new(|g, v| g.cosine(v[0], v[1]))),
        (
            "normalize_pick",
            vec![vec![3, 4], vec![2, 4]],
            Box::new(|g, v| {
                let a = g.normalize_rows(v[0])?;
                let b = g.normalize_rows(v[1])?;
                let bt = g.transpose(b)?;
                let s = g.matmul(a, bt)?;
                let p = g.pick(s, &[(0, 1), (2, 0), (0, 1)])?;
                let q = g.mul(p, p)?;
                Ok(g.sum(q))
            }),
        ),
    ];
    for (name, shapes, build) in &cases {
        let mut checked = 0;
        while checked < 10 {
            let point: Vec<Tensor<f64>> = shapes.iter().map(|s| random_tensor(&mut rng, s)).collect();
            // Kinks: relu at 0, and near-ties for max pooling.
            let near_kink = point.iter().any(|t| t.data().iter().any(|x| x.abs() < 1e-3));
            let all: Vec<f64> = point.iter().flat_map(|t| t.data().to_vec()).collect();
            let near_tie = all
                .iter()
                .enumerate()
                .any(|(i, a)| all[i + 1..].iter().any(|b| (a - b).abs() < 1e-4));
            if near_kink || near_tie {
                continue;
            }
            let err = grad_check(|g, v| build(g, v), &point, 1e-5).unwrap();
            assert!(err < 1e-4, "{name}: relative error {err}");
            checked += 1;
        }
    }
}

proptest! {
    #[test]
    fn max_pool_gradient_mass_lands_on_argmax(
        vals in proptest::collection::vec(-5.0f64..5.0, 12),
        upstream in proptest::collection::vec(-2.0f64..2.0, 3),
    ) {
        let mut g = Graph::new();
        let h = g.param(Tensor::matrix(4, 3, vals.clone()).unwrap());
        let p = g.max_over_time(h).unwrap();
        let w = g.constant(Tensor::vector(upstream.clone()).unwrap());
        let weighted = g.mul(p, w).unwrap();
        let s = g.sum(weighted);
        let grads = g.backward(s).unwrap();
        let gh = grads.get(h);
        for j in 0..3 {
            let col: Vec<f64> = (0..4).map(|t| vals[t * 3 + j]).collect();
            let best = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let arg = col.iter().position(|&x| x == best).unwrap();
            let deposited: f64 = (0..4).map(|t| gh.data()[t * 3 + j]).sum();
            prop_assert_eq!(deposited, upstream[j]);
            for t in 0..4 {
                if t != arg {
                    prop_assert_eq!(gh.data()[t * 3 + j], 0.0);
                }
            }
        }
    }

    #[test]
    fn cosine_stays_in_range(
        u in proptest::collection::vec(-100.0f32..100.0, 6),
        v in proptest::collection::vec(-100.0f32..100.0, 6),
    ) {
        prop_assume!(u.iter().any(|x| *x != 0.0) && v.iter().any(|x| *x != 0.0));
        let c = cosine_similarity(&u, &v).unwrap();
        prop_assert!((-1.0..=1.0).contains(&c));
        let same = cosine_similarity(&u, &u).unwrap();
        prop_assert!((same - 1.0).abs() < 1e-6);
    }
}
