use super::*;
use crate::error::Error;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn matmul_identity_and_hand_case() {
    let tape = Tape::new();
    let eye = tape.constant(t(&[2, 2], &[1., 0., 0., 1.]));
    let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
    assert_eq!(eye.matmul(m).unwrap().value().data(), &[1., 2., 3., 4.]);

    let a = tape.constant(t(&[1, 2], &[1., 2.]));
    let b = tape.constant(t(&[2, 1], &[3., 4.]));
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), vec![1, 1]);
    assert_eq!(c.value().item(), 11.0);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[4, 2]));
    let err = a.matmul(b).unwrap_err();
    assert!(matches!(err, Error::Dimension { .. }));
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let err = grad_check_many(
        |_, v| Ok(v[0].matmul(v[1])?.sum_all()),
        &[a, b],
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-6, "max rel error {err}");
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    let zero = tape.constant(Tensor::scalar(0.0));
    assert_eq!(zero.silu().value().item(), 0.0);

    let one = tape.constant(Tensor::scalar(1.0));
    let oracle = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((one.silu().value().item() - oracle).abs() < 1e-15);

    let a = tape.constant(t(&[2], &[1., 2.]));
    let b = tape.constant(t(&[2], &[3., 4.]));
    assert_eq!(a.add(b).unwrap().value().data(), &[4., 6.]);
    assert_eq!(a.sub(b).unwrap().value().data(), &[-2., -2.]);
    assert_eq!(a.mul(b).unwrap().value().data(), &[3., 8.]);
    assert_eq!(a.scale(3.0).value().data(), &[3., 6.]);

    let bad = tape.constant(t(&[3], &[1., 2., 3.]));
    assert!(matches!(a.add(bad), Err(Error::Dimension { .. })));
}

#[test]
fn gelu_matches_closed_form() {
    let tape = Tape::new();
    for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
        let oracle = 0.5
            * x
            * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x * x * x)).tanh());
        let v = tape.constant(Tensor::scalar(x)).gelu_tanh().value().item();
        assert!((v - oracle).abs() < 1e-15);
    }
}

#[test]
fn broadcast_along_leading_axes() {
    let tape = Tape::new();
    let x = tape.constant(Tensor::from_fn(&[2, 3, 2], |i| i as f64));
    let row = tape.constant(t(&[2, 1, 2], &[10., 20., 30., 40.]));
    let y = x.add(row).unwrap().value();
    assert_eq!(
        y.data(),
        &[10., 21., 12., 23., 14., 25., 36., 47., 38., 49., 40., 51.]
    );
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let s = tape.constant(t(&[3], &[0., 0., 0.])).softmax_lastdim().value();
    for &v in s.data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-16);
    }
    let s = tape.constant(t(&[2], &[1000., 1000.])).softmax_lastdim().value();
    assert_eq!(s.data(), &[0.5, 0.5]);

    // Direct exp/sum without max subtraction is exact enough at this range.
    let xs = [1.0f64, 2.0, 3.0];
    let z: f64 = xs.iter().map(|x| x.exp()).sum();
    let s = tape.constant(t(&[3], &xs)).softmax_lastdim().value();
    for (v, x) in s.data().iter().zip(xs) {
        assert!((v - x.exp() / z).abs() < 1e-15);
    }
}

#[test]
fn grad_check_closed_forms() {
    let x = t(&[2], &[1., 2.]);
    let tape = Tape::new();
    let v = tape.leaf(x.clone());
    let g = tape.backward(v.square().sum_all()).unwrap();
    assert_eq!(g.get(v).unwrap(), &[2., 4.]);

    let err = grad_check(|_, v| Ok(v.square().sum_all()), &x, 1e-5).unwrap();
    assert!(err <= 1e-7, "{err}");

    let err = grad_check(|_, v| Ok(v.sum_all()), &t(&[3], &[0.3, -1.2, 5.0]), 1e-5).unwrap();
    assert!(err < 1e-9, "{err}");
}

#[test]
fn grad_check_rejects_bad_step_and_nonfinite_gradient() {
    let x = t(&[1], &[1.0]);
    assert!(grad_check(|_, v| Ok(v.sum_all()), &x, 0.0).is_err());
    // d/dx exp(exp(exp(x))) overflows at x = 10.
    let big = t(&[1], &[10.0]);
    let r = grad_check(|_, v| Ok(v.exp().exp().exp().sum_all()), &big, 1e-4);
    assert!(matches!(r, Err(Error::Numeric(_))), "{r:?}");
}

#[test]
fn shared_subexpressions_accumulate() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let y = x.add(x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[2.0]);

    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let a = x.scale(2.0);
    let y = a.mul(x).unwrap().add(a).unwrap(); // 2x² + 2x
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(x).unwrap(), &[14.0]);
}

#[test]
fn constants_get_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let c = tape.constant(Tensor::scalar(5.0));
    let g = tape.backward(x.mul(c).unwrap()).unwrap();
    assert_eq!(g.get(x).unwrap(), &[5.0]);
    assert!(g.get(c).is_none());
}

#[test]
fn backward_needs_scalar() {
    let tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]));
    assert!(tape.backward(x.exp()).is_err());
}

#[test]
fn cosine_extremes_and_degenerate_rows() {
    let tape = Tape::new();
    let a = tape.constant(t(&[3, 2], &[1., 0., 1., 0., 0., 0.]));
    let b = tape.constant(t(&[3, 2], &[2., 0., 0., 3., 1., 1.]));
    let (s, degenerate) = a.cosine_lastdim(b).unwrap();
    assert_eq!(s.value().data(), &[1.0, 0.0, 0.0]);
    assert_eq!(degenerate, 1);
}

#[test]
fn gather_rows_range_check() {
    let tape = Tape::new();
    let table = tape.constant(Tensor::from_fn(&[3, 2], |i| i as f64));
    assert_eq!(table.gather_rows(&[2, 0]).unwrap().value().data(), &[4., 5., 0., 1.]);
    assert!(matches!(table.gather_rows(&[3]), Err(Error::Input(_))));
}

/// Small-shape strategy for the per-primitive gradient property.
fn small_shape() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..=5, 1..=3)
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(shape, 1.0, &mut rng)
}

// Weighted sum keeps every coordinate of the output relevant to the loss.
fn weighted<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let w = tape.constant(rand_tensor(&y.shape(), seed ^ 0xabcd));
    Ok(y.mul(w)?.sum_all())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn unary_primitives_pass_grad_check(shape in small_shape(), seed in 0u64..10_000) {
        let x = rand_tensor(&shape, seed);
        for which in 0..5 {
            let err = grad_check(|tape, v| {
                let y = match which {
                    0 => v.silu(),
                    1 => v.gelu_tanh(),
                    2 => v.exp(),
                    3 => v.softmax_lastdim(),
                    _ => v.scale(-1.7),
                };
                weighted(tape, y, seed)
            }, &x, 1e-5).unwrap();
            prop_assert!(err <= 1e-4, "primitive {} err {}", which, err);
        }
    }

    #[test]
    fn binary_primitives_pass_grad_check(shape in small_shape(), seed in 0u64..10_000, bcast in any::<bool>()) {
        let a = rand_tensor(&shape, seed);
        let mut bshape = shape.clone();
        if bcast && bshape.len() > 1 {
            bshape[0] = 1;
        }
        let b = rand_tensor(&bshape, seed + 1);
        for which in 0..3 {
            let err = grad_check_many(|tape, v| {
                let y = match which {
                    0 => v[0].add(v[1])?,
                    1 => v[0].sub(v[1])?,
                    _ => v[0].mul(v[1])?,
                };
                weighted(tape, y, seed)
            }, &[a.clone(), b.clone()], 1e-5).unwrap();
            prop_assert!(err <= 1e-4, "binary {} err {}", which, err);
        }
    }

    #[test]
    fn matmul_batched_passes_grad_check(b in 1usize..=3, m in 1usize..=4, k in 1usize..=4, n in 1usize..=4, seed in 0u64..10_000, weight_2d in any::<bool>()) {
        let a = rand_tensor(&[b, m, k], seed);
        let w = if weight_2d { rand_tensor(&[k, n], seed + 1) } else { rand_tensor(&[b, k, n], seed + 1) };
        let err = grad_check_many(|tape, v| weighted(tape, v[0].matmul(v[1])?, seed), &[a, w], 1e-5).unwrap();
        prop_assert!(err <= 1e-4, "err {}", err);
    }

    #[test]
    fn structural_primitives_pass_grad_check(seed in 0u64..10_000) {
        let x = rand_tensor(&[2, 3, 4], seed);
        let gain = rand_tensor(&[4], seed + 2);
        let err = grad_check_many(|tape, v| {
            let y = v[0].rms_norm(v[1], 1e-6)?;
            let y = y.permute(&[2, 0, 1])?.reshape(&[4, 6])?;
            let y = y.narrow_lastdim(1, 4)?;
            weighted(tape, y, seed)
        }, &[x.clone(), gain], 1e-5).unwrap();
        prop_assert!(err <= 1e-4, "err {}", err);

        let rope_in = rand_tensor(&[2, 4, 2, 8], seed + 3);
        let err = grad_check(|tape, v| weighted(tape, v.rope_2d((2, 2), 10_000.0)?, seed), &rope_in, 1e-5).unwrap();
        prop_assert!(err <= 1e-4, "rope err {}", err);

        let other = rand_tensor(&[2, 3, 4], seed + 4);
        let err = grad_check_many(|tape, v| {
            let (s, _) = v[0].cosine_lastdim(v[1])?;
            weighted(tape, s, seed)
        }, &[x.clone(), other], 1e-5).unwrap();
        prop_assert!(err <= 1e-4, "cosine err {}", err);

        let table = rand_tensor(&[4, 3], seed + 5);
        let err = grad_check(|tape, v| weighted(tape, v.gather_rows(&[1, 3, 1])?, seed), &table, 1e-5).unwrap();
        prop_assert!(err <= 1e-4, "gather err {}", err);

        let err = grad_check(|_, v| Ok(v.mean_all()), &x, 1e-5).unwrap();
        prop_assert!(err <= 1e-4);
    }

    #[test]
    fn softmax_rows_are_distributions(shape in small_shape(), seed in 0u64..10_000, scale in 0.1f64..50.0) {
        let x = rand_tensor(&shape, seed);
        let tape = Tape::new();
        let s = tape.constant(x).scale(scale).softmax_lastdim().value();
        let w = *shape.last().unwrap();
        for row in s.data().chunks(w) {
            let total: f64 = row.iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }
}
