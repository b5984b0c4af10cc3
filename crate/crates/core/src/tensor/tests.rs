use super::check::finite_diff_check;
use super::*;
use crate::rng::Rng;
use crate::Scalar;

fn random_raw(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> RawTensor<f64> {
    let numel: usize = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(|_| rng.uniform_in(lo, hi)).collect();
    RawTensor::new(shape, data).unwrap()
}

/// Contract the op output against a fixed random weight matrix so that
/// transposed or misplaced gradients cannot cancel out.
fn weighted_sum<S: Scalar>(t: &Tensor<S>, seed: u64) -> TensorResult<Tensor<S>> {
    let shape = t.shape();
    let mut rng = Rng::seed_from_u64(seed);
    let numel: usize = shape.iter().product();
    let w: Vec<S> = (0..numel)
        .map(|_| rng.uniform_in(crate::lit(-1.0), crate::lit(1.0)))
        .collect();
    let wt = t.tape.constant(RawTensor::new(&shape, w).unwrap());
    Ok(t.mul(&wt)?.sum())
}

fn assert_grad_ok<F>(name: &str, x0: &RawTensor<f64>, build: F)
where
    F: Fn(&Tape<f64>, &Tensor<f64>) -> TensorResult<Tensor<f64>>,
{
    let err = finite_diff_check(build, x0, 1e-5).unwrap();
    assert!(err <= 1e-4, "{name}: finite-difference rel err {err:e}");
}

#[test]
fn grad_elementwise_unary_ops() {
    let mut rng = Rng::seed_from_u64(100);
    let x = random_raw(&mut rng, &[3, 4], -0.8, 0.8);
    let pos = random_raw(&mut rng, &[3, 4], 0.5, 2.0);
    let above_one = random_raw(&mut rng, &[3, 4], 1.1, 3.0);

    assert_grad_ok("neg", &x, |_, t| weighted_sum(&t.neg(), 1));
    assert_grad_ok("exp", &x, |_, t| weighted_sum(&t.exp(), 2));
    assert_grad_ok("log", &pos, |_, t| weighted_sum(&t.log(), 3));
    assert_grad_ok("sqrt", &pos, |_, t| weighted_sum(&t.sqrt(), 4));
    assert_grad_ok("cosh", &x, |_, t| weighted_sum(&t.cosh(), 5));
    assert_grad_ok("sinh", &x, |_, t| weighted_sum(&t.sinh(), 6));
    assert_grad_ok("acosh", &above_one, |_, t| weighted_sum(&t.acosh(), 7));
    assert_grad_ok("asin", &x, |_, t| weighted_sum(&t.asin(), 8));
    assert_grad_ok("acos", &x, |_, t| weighted_sum(&t.acos(), 9));
    assert_grad_ok("gelu", &x, |_, t| weighted_sum(&t.gelu(), 10));
    assert_grad_ok("sinhc", &x, |_, t| weighted_sum(&t.sinhc(), 11));
    assert_grad_ok("add_const", &x, |_, t| weighted_sum(&t.add_const(0.7), 12));
    assert_grad_ok("mul_const", &x, |_, t| weighted_sum(&t.mul_const(-1.3), 13));
    assert_grad_ok("transpose", &x, |_, t| weighted_sum(&t.transpose(), 14));
}

#[test]
fn grad_sinhc_near_zero_uses_series() {
    let x = RawTensor::new(&[1, 3], vec![1e-6, -5e-7, 2e-5]).unwrap();
    assert_grad_ok("sinhc_small", &x, |_, t| weighted_sum(&t.sinhc(), 15));
}

#[test]
fn grad_binary_ops_both_sides_and_broadcasts() {
    let mut rng = Rng::seed_from_u64(101);
    let a = random_raw(&mut rng, &[3, 4], -1.0, 1.0);
    let b = random_raw(&mut rng, &[3, 4], 0.5, 1.5);
    let row = random_raw(&mut rng, &[1, 4], 0.5, 1.5);
    let col = random_raw(&mut rng, &[3, 1], 0.5, 1.5);
    let scalar = random_raw(&mut rng, &[1], 0.5, 1.5);

    for (name, f) in [
        ("add", 0usize),
        ("sub", 1),
        ("mul", 2),
        ("div", 3),
    ] {
        let apply = move |x: &Tensor<f64>, y: &Tensor<f64>| match f {
            0 => x.add(y),
            1 => x.sub(y),
            2 => x.mul(y),
            _ => x.div(y),
        };
        // d/d lhs with various rhs shapes
        for (rhs_name, rhs) in [("full", &b), ("row", &row), ("col", &col), ("scalar", &scalar)] {
            let rhs = rhs.clone();
            assert_grad_ok(&format!("{name}/lhs/{rhs_name}"), &a, |tape, t| {
                let r = tape.constant(rhs.clone());
                weighted_sum(&apply(t, &r)?, 20)
            });
        }
        // d/d rhs for each broadcast shape
        for (rhs_name, rhs) in [("full", &b), ("row", &row), ("col", &col), ("scalar", &scalar)] {
            let lhs = a.clone();
            assert_grad_ok(&format!("{name}/rhs/{rhs_name}"), rhs, |tape, t| {
                let l = tape.constant(lhs.clone());
                weighted_sum(&apply(&l, t)?, 21)
            });
        }
    }
}

#[test]
fn grad_matmul_both_orientations() {
    let mut rng = Rng::seed_from_u64(102);
    let a = random_raw(&mut rng, &[3, 5], -1.0, 1.0);
    let b = random_raw(&mut rng, &[5, 2], -1.0, 1.0);
    let bt = random_raw(&mut rng, &[2, 5], -1.0, 1.0);

    let b2 = b.clone();
    assert_grad_ok("matmul/wrt_a", &a, |tape, t| {
        weighted_sum(&t.matmul(&tape.constant(b2.clone()))?, 30)
    });
    let a2 = a.clone();
    assert_grad_ok("matmul/wrt_b", &b, |tape, t| {
        weighted_sum(&tape.constant(a2.clone()).matmul(t)?, 31)
    });
    let bt2 = bt.clone();
    assert_grad_ok("matmul_t/wrt_a", &a, |tape, t| {
        weighted_sum(&t.matmul_t(&tape.constant(bt2.clone()))?, 32)
    });
    let a3 = a.clone();
    assert_grad_ok("matmul_t/wrt_b", &bt, |tape, t| {
        weighted_sum(&tape.constant(a3.clone()).matmul_t(t)?, 33)
    });
}

#[test]
fn grad_reductions_and_rows() {
    let mut rng = Rng::seed_from_u64(103);
    let x = random_raw(&mut rng, &[4, 3], -1.0, 1.0);
    let nz = random_raw(&mut rng, &[4, 3], 0.3, 1.0);

    assert_grad_ok("sum", &x, |_, t| Ok(t.sum()));
    assert_grad_ok("mean", &x, |_, t| Ok(t.mean()));
    assert_grad_ok("max_all", &x, |_, t| Ok(t.max_all()));
    assert_grad_ok("sum_rows", &x, |_, t| weighted_sum(&t.sum_rows(), 40));
    assert_grad_ok("row_norm", &nz, |_, t| weighted_sum(&t.row_norm(1e-12), 41));
    assert_grad_ok("softmax_rows", &x, |_, t| weighted_sum(&t.softmax_rows(), 42));
    assert_grad_ok("log_softmax_rows", &x, |_, t| {
        weighted_sum(&t.log_softmax_rows(), 43)
    });
}

#[test]
fn grad_structural_ops() {
    let mut rng = Rng::seed_from_u64(104);
    let x = random_raw(&mut rng, &[5, 3], -1.0, 1.0);

    assert_grad_ok("gather_rows_with_dup", &x, |_, t| {
        weighted_sum(&t.gather_rows(&[0, 2, 2, 4])?, 50)
    });
    assert_grad_ok("slice_rows", &x, |_, t| {
        weighted_sum(&t.slice_rows(1, 3)?, 51)
    });
    assert_grad_ok("slice_cols", &x, |_, t| {
        weighted_sum(&t.slice_cols(1, 2)?, 52)
    });
    assert_grad_ok("concat_rows", &x, |tape, t| {
        let other = tape.constant(RawTensor::zeros(&[2, 3]));
        weighted_sum(&concat(&[t.clone(), other], 0)?, 53)
    });
    assert_grad_ok("concat_cols", &x, |tape, t| {
        let other = tape.constant(RawTensor::zeros(&[5, 2]));
        weighted_sum(&concat(&[other, t.clone()], 1)?, 54)
    });
    assert_grad_ok("embedding_lookup", &x, |_, t| {
        weighted_sum(&embedding_lookup(t, &[1, 1, 0, 4, 3])?, 55)
    });
    assert_grad_ok("clamp_inside", &x, |_, t| {
        weighted_sum(&t.clamp(Some(-2.0), Some(2.0)), 56)
    });
}

#[test]
fn grad_layer_norm_all_inputs() {
    let mut rng = Rng::seed_from_u64(105);
    let x = random_raw(&mut rng, &[4, 6], -1.0, 1.0);
    let g = random_raw(&mut rng, &[1, 6], 0.5, 1.5);
    let b = random_raw(&mut rng, &[1, 6], -0.5, 0.5);

    let (g1, b1) = (g.clone(), b.clone());
    assert_grad_ok("layer_norm/wrt_x", &x, |tape, t| {
        weighted_sum(
            &layer_norm(t, &tape.constant(g1.clone()), &tape.constant(b1.clone()), 1e-5)?,
            60,
        )
    });
    let (x1, b2) = (x.clone(), b.clone());
    assert_grad_ok("layer_norm/wrt_gain", &g, |tape, t| {
        weighted_sum(
            &layer_norm(&tape.constant(x1.clone()), t, &tape.constant(b2.clone()), 1e-5)?,
            61,
        )
    });
    let (x2, g2) = (x.clone(), g.clone());
    assert_grad_ok("layer_norm/wrt_bias", &b, |tape, t| {
        weighted_sum(
            &layer_norm(&tape.constant(x2.clone()), &tape.constant(g2.clone()), t, 1e-5)?,
            62,
        )
    });
}

#[test]
fn softmax_of_equal_logits_is_uniform() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.constant(RawTensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
    let y = x.softmax_rows();
    assert_eq!(y.value().data(), &[0.5, 0.5]);
}

#[test]
fn acosh_of_one_is_zero() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.constant(RawTensor::scalar(1.0));
    assert_eq!(x.acosh().item(), 0.0);
}

#[test]
fn sum_backward_is_all_ones() {
    let tape: Tape<f64> = Tape::new();
    let w = tape.leaf(RawTensor::new(&[2, 3], vec![1.0; 6]).unwrap(), true);
    let loss = w.sum();
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(grads.wrt(&w).unwrap().data(), &[1.0; 6]);
}

#[test]
fn lorentz_quadratic_form_gradient() {
    // <x,x>_L built from composed ops has gradient (-2*x0, 2*x~).
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(RawTensor::new(&[1, 3], vec![1.3, 0.4, -0.2]).unwrap(), true);
    let time = x.slice_cols(0, 1).unwrap();
    let space = x.slice_cols(1, 2).unwrap();
    let loss = space
        .mul(&space)
        .unwrap()
        .sum()
        .sub(&time.mul(&time).unwrap().sum())
        .unwrap();
    let grads = tape.backward(&loss).unwrap();
    let g = grads.wrt(&x).unwrap();
    assert_eq!(g.data(), &[-2.6, 0.8, -0.4]);
}

#[test]
fn second_backward_errors_until_reset() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(RawTensor::scalar(2.0), true);
    let loss = x.mul(&x).unwrap();
    tape.backward(&loss).unwrap();
    assert_eq!(
        tape.backward(&loss).unwrap_err(),
        TensorError::BackwardConsumed
    );
    tape.reset();
    assert!(tape.backward(&loss).is_ok());
}

#[test]
fn non_scalar_loss_rejected() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(RawTensor::new(&[1, 2], vec![1.0, 2.0]).unwrap(), true);
    assert!(matches!(
        tape.backward(&x).unwrap_err(),
        TensorError::NotScalarLoss { .. }
    ));
}

#[test]
fn clamp_gradient_hard_cutoff() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(RawTensor::new(&[1, 3], vec![-2.0, 0.5, 3.0]).unwrap(), true);
    let loss = x.clamp(Some(-1.0), Some(1.0)).sum();
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(grads.wrt(&x).unwrap().data(), &[0.0, 1.0, 0.0]);
}

#[test]
fn max_all_routes_gradient_to_argmax() {
    let tape: Tape<f64> = Tape::new();
    let x = tape.leaf(RawTensor::new(&[1, 4], vec![0.1, 3.0, -1.0, 2.0]).unwrap(), true);
    let grads = tape.backward(&x.max_all()).unwrap();
    assert_eq!(grads.wrt(&x).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
}

#[test]
fn matmul_t_matches_explicit_transpose() {
    let mut rng = Rng::seed_from_u64(106);
    let a = random_raw(&mut rng, &[4, 3], -1.0, 1.0);
    let b = random_raw(&mut rng, &[5, 3], -1.0, 1.0);
    let tape: Tape<f64> = Tape::new();
    let at = tape.constant(a);
    let bt = tape.constant(b);
    let direct = at.matmul_t(&bt).unwrap();
    let via_transpose = at.matmul(&bt.transpose()).unwrap();
    assert_eq!(direct.value().data(), via_transpose.value().data());
}

#[test]
fn shape_errors_are_reported() {
    let tape: Tape<f64> = Tape::new();
    let a = tape.constant(RawTensor::new(&[2, 3], vec![0.0; 6]).unwrap());
    let b = tape.constant(RawTensor::new(&[3, 2], vec![0.0; 6]).unwrap());
    assert!(matches!(
        a.add(&b).unwrap_err(),
        TensorError::ShapeMismatch { op: "add", .. }
    ));
    assert!(matches!(
        a.matmul(&a).unwrap_err(),
        TensorError::ShapeMismatch { .. }
    ));
    assert!(matches!(
        embedding_lookup(&a, &[7]).unwrap_err(),
        TensorError::OutOfVocab { id: 7, vocab: 2 }
    ));
    assert!(matches!(
        a.gather_rows(&[5]).unwrap_err(),
        TensorError::RowOutOfRange { index: 5, rows: 2 }
    ));
    assert!(matches!(
        a.slice_rows(1, 4).unwrap_err(),
        TensorError::SliceOutOfRange { .. }
    ));
}

#[test]
fn forward_and_gradients_deterministic() {
    let run = || {
        let mut rng = Rng::seed_from_u64(107);
        let x0 = random_raw(&mut rng, &[4, 4], -1.0, 1.0);
        let tape: Tape<f64> = Tape::new();
        let x = tape.leaf(x0, true);
        let y = x.matmul(&x).unwrap().gelu().softmax_rows();
        let loss = y.mean();
        let grads = tape.backward(&loss).unwrap();
        (loss.item(), grads.wrt(&x).unwrap().clone())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert_eq!(g1.data().len(), g2.data().len());
    for (a, b) in g1.data().iter().zip(g2.data()) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
}

#[test]
fn teacher_style_no_grad_subgraph_is_skipped() {
    let tape: Tape<f64> = Tape::new();
    let frozen = tape.leaf(RawTensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), false);
    let live = tape.leaf(RawTensor::new(&[2, 2], vec![1.0; 4]).unwrap(), true);
    let mixed = frozen.matmul(&live).unwrap().sum();
    let grads = tape.backward(&mixed).unwrap();
    assert!(grads.wrt(&frozen).is_none());
    assert!(grads.wrt(&live).is_some());
}

#[test]
fn param_slots_retrievable_after_backward() {
    let tape: Tape<f64> = Tape::new();
    let w = tape.param_leaf(RawTensor::new(&[1, 2], vec![2.0, 3.0]).unwrap(), 7, true);
    let loss = w.mul(&w).unwrap().sum();
    let grads = tape.backward(&loss).unwrap();
    assert_eq!(grads.param(7).unwrap().data(), &[4.0, 6.0]);
    assert!(grads.param(8).is_none());
}
