use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>())
}

fn sum_all(tape: &mut Tape<f64>, v: Var) -> Var {
    let numel = tape.value(v).numel() as f64;
    let mut cur = v;
    while tape.value(cur).rank() > 0 {
        cur = tape.mean(cur, 0).unwrap();
    }
    tape.scale(cur, numel).unwrap()
}

/// Weighted sum with fixed pseudo-random weights so every output element
/// contributes a distinct gradient.
fn probe(tape: &mut Tape<f64>, v: Var) -> Var {
    let shape = tape.shape(v).to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    assert_eq!(shape.len(), 2, "probe expects a matrix");
    let (m, k) = (shape[0], shape[1]);
    let wv = tape.constant(Tensor::new(vec![m, k], w).unwrap());
    // Σ_ij v_ij·w_ij as a sum of row dot products
    let mut rows = Vec::new();
    for i in 0..m {
        let vr = tape.gather_rows(v, &[i]).unwrap();
        let wr = tape.gather_rows(wv, &[i]).unwrap();
        let wt = tape.transpose(wr).unwrap();
        rows.push(tape.matmul(vr, wt).unwrap());
    }
    let col = tape.concat_rows(&rows).unwrap();
    sum_all(tape, col)
}

/// Central finite differences against autodiff for every input element.
fn max_rel_err(
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(x.clone().with_requires_grad(true)))
        .collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.value(out).item().unwrap()
    };

    let h = 1e-4;
    let mut worst = 0.0f64;
    for (which, x) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(vars[which], x.numel());
        for i in 0..x.numel() {
            let mut plus = inputs.to_vec();
            plus[which].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[which].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

#[test]
fn tensor_rejects_inconsistent_length() {
    assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
    assert!(Tensor::<f64>::new(vec![0, 3], vec![]).is_err());
    let s = Tensor::scalar(2.5f64);
    assert_eq!(s.numel(), 1);
    assert_eq!(s.item().unwrap(), 2.5);
}

#[test]
fn matmul_identity_and_hand_product() {
    let mut tape = Tape::new();
    let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let c = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[1, 1]);
    assert_eq!(tape.value(c).data(), &[11.0]);
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    match tape.matmul(a, b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 5], &mut rng);
    let err = max_rel_err(&[a, b], |tape, v| {
        let c = tape.matmul(v[0], v[1]).unwrap();
        sum_all(tape, c)
    });
    assert!(err <= 1e-5, "max rel err {err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let y = tape.softmax(x, 0).unwrap();
    for &v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = tape.constant(t(&[2], &[1000.0, 1000.0]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    // reference values evaluated at 30 significant digits
    let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
    let y = tape.softmax(x, 0).unwrap();
    let expected = [
        0.090_030_573_170_380_46,
        0.244_728_471_054_797_65,
        0.665_240_955_774_821_9,
    ];
    for (v, e) in tape.value(y).data().iter().zip(expected) {
        assert!((v - e).abs() < 1e-15);
    }

    assert!(tape.softmax(x, 1).is_err());
}

#[test]
fn softmax_over_leading_axis_normalizes_columns() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 3.0, 2.0, 1.0]));
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    for j in 0..3 {
        assert!((v[j] + v[3 + j] - 1.0).abs() < 1e-12);
    }
    assert!((v[1] - 0.5).abs() < 1e-15);
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for axis in 0..2 {
        let x = random(&[3, 4], &mut rng);
        let err = max_rel_err(&[x], |tape, v| {
            let y = tape.softmax(v[0], axis).unwrap();
            probe(tape, y)
        });
        assert!(err <= 1e-5, "axis {axis}: {err}");
    }
}

#[test]
fn layernorm_examples() {
    let mut tape = Tape::new();
    let ones = tape.constant(t(&[2], &[1.0, 1.0]));
    let zeros = tape.constant(t(&[2], &[0.0, 0.0]));
    let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
    let y = tape.layernorm(x, ones, zeros, 1e-6).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-6 && (v[1] - 1.0).abs() < 1e-6);

    let g = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
    let b = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
    let x = tape.constant(t(&[1, 3], &[0.1, 0.1, 0.1]));
    let y = tape.layernorm(x, g, b, 1e-6).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn layernorm_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[4, 8], &mut rng);
    let g = random(&[8], &mut rng);
    let b = random(&[8], &mut rng);
    let err = max_rel_err(&[x, g, b], |tape, v| {
        let y = tape.layernorm(v[0], v[1], v[2], 1e-6).unwrap();
        probe(tape, y)
    });
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn gelu_gradient_on_random_scalars() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = t(
        &[100, 1],
        &(0..100).map(|_| rng.gen_range(-4.0..4.0)).collect::<Vec<_>>(),
    );
    let err = max_rel_err(&[x], |tape, v| {
        let y = tape.gelu(v[0]).unwrap();
        probe(tape, y)
    });
    assert!(err <= 1e-5, "{err}");
}

#[test]
fn gelu_matches_erf_definition() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 1.0]));
    let y = tape.gelu(x).unwrap();
    // Φ(1) = 0.841344746068543
    let v = tape.value(y).data();
    assert!((v[2] - 0.841_344_746_068_543).abs() < 1e-12);
    assert_eq!(v[1], 0.0);
    assert!((v[0] + (1.0 - 0.841_344_746_068_543)).abs() < 1e-12);
}

#[test]
fn gather_rows_examples_and_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let y = tape.gather_rows(x, &[0, 2]).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 2.0, 5.0, 6.0]);

    let all = tape.gather_rows(x, &[0, 1, 2]).unwrap();
    assert_eq!(tape.value(all), tape.value(x));

    assert!(matches!(
        tape.gather_rows(x, &[0, 3]),
        Err(Error::Index { index: 3, len: 3, .. })
    ));
    assert!(tape.gather_rows(x, &[1, 1]).is_err());
    assert!(tape.gather_rows(x, &[2, 0]).is_err());
}

#[test]
fn gather_rows_scatters_gradient_and_conserves_mass() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[4, 2], &[0.0; 8]).with_requires_grad(true));
    let y = tape.gather_rows(x, &[1, 3]).unwrap();
    let loss = probe(&mut tape, y);
    let grads = tape.backward(loss).unwrap();
    let gx = grads.get(x).unwrap();
    assert_eq!(&gx[0..2], &[0.0, 0.0]);
    assert_eq!(&gx[4..6], &[0.0, 0.0]);
    // incoming gradient on y is the probe weights
    let w: Vec<f64> = (0..4).map(|i| ((i * 7919) % 13) as f64 / 13.0 - 0.4).collect();
    let incoming: f64 = w.iter().sum();
    let scattered: f64 = gx.iter().sum();
    assert!((incoming - scattered).abs() < 1e-12);
}

#[test]
fn cross_entropy_examples() {
    let mut tape = Tape::new();
    let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
    let l = tape.cross_entropy(z, &[0]).unwrap();
    assert!((tape.value(l).item().unwrap() - std::f64::consts::LN_2).abs() < 1e-15);

    let z = tape.constant(t(&[1, 2], &[50.0, -50.0]));
    let l = tape.cross_entropy(z, &[0]).unwrap();
    assert!(tape.value(l).item().unwrap() < 1e-40);

    assert!(matches!(
        tape.cross_entropy(z, &[2]),
        Err(Error::Index { index: 2, .. })
    ));
}

#[test]
fn cross_entropy_matches_scalar_evaluation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = random(&[4, 10], &mut rng);
    let labels = [3usize, 0, 9, 5];
    let mut expected = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let row = z.row(r);
        let denom: f64 = row.iter().map(|v| v.exp()).sum();
        expected += -(row[y].exp() / denom).ln();
    }
    expected /= 4.0;
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let l = tape.cross_entropy(zv, &labels).unwrap();
    assert!((tape.value(l).item().unwrap() - expected).abs() < 1e-12);

    let err = max_rel_err(&[z], |tape, v| tape.cross_entropy(v[0], &labels).unwrap());
    assert!(err <= 1e-6, "{err}");
}

#[test]
fn kl_soft_targets_examples() {
    let mut tape = Tape::new();
    let s = tape.constant(t(&[1, 3], &[0.3, -1.0, 2.0]));
    let same = tape.constant(t(&[1, 3], &[0.3, -1.0, 2.0]));
    for tau in [0.5, 1.0, 4.0] {
        let l = tape.kl_soft_targets(s, same, tau).unwrap();
        assert!(tape.value(l).item().unwrap().abs() < 1e-15);
    }

    // KL between [σ(1), σ(-1)] and its reverse equals (e-1)/(e+1)
    let teacher = tape.constant(t(&[1, 2], &[1.0, 0.0]));
    let student = tape.constant(t(&[1, 2], &[0.0, 1.0]));
    let l = tape.kl_soft_targets(student, teacher, 1.0).unwrap();
    assert!((tape.value(l).item().unwrap() - 0.462_117_157_260_009_76).abs() < 1e-14);

    assert!(matches!(
        tape.kl_soft_targets(student, teacher, 0.0),
        Err(Error::Param(_))
    ));
    assert!(tape.kl_soft_targets(student, s, 1.0).is_err());
}

#[test]
fn kl_gradient_flows_to_student_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let s = random(&[2, 5], &mut rng);
    let te = random(&[2, 5], &mut rng);
    for tau in [1.0, 2.5] {
        let teacher = te.clone();
        let err = max_rel_err(std::slice::from_ref(&s), |tape, v| {
            let tv = tape.constant(teacher.clone());
            tape.kl_soft_targets(v[0], tv, tau).unwrap()
        });
        assert!(err <= 1e-6, "tau {tau}: {err}");
    }

    let mut tape = Tape::new();
    let sv = tape.leaf(s.with_requires_grad(true));
    let tv = tape.leaf(te.with_requires_grad(true));
    let l = tape.kl_soft_targets(sv, tv, 1.0).unwrap();
    let grads = tape.backward(l).unwrap();
    assert!(grads.get(sv).is_some());
    assert!(grads.get(tv).is_none());
}

#[test]
fn backward_simple_derivatives() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1], &[2.0]).with_requires_grad(true));
    let y = tape.scale(x, 3.0).unwrap();
    let loss = tape.mean(y, 0).unwrap();
    let loss = tape.mean(loss, 0).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &[3.0]);

    let mut tape = Tape::new();
    let x = tape.leaf(t(&[1, 1], &[2.0]).with_requires_grad(true));
    let y = tape.matmul(x, x).unwrap();
    let loss = sum_all(&mut tape, y);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap(), &[4.0]);

    let y2 = tape.add(x, x).unwrap();
    assert!(tape.backward(y2).is_ok());
    let big = tape.constant(Tensor::zeros(vec![2, 2]));
    assert!(matches!(tape.backward(big), Err(Error::Shape { .. })));
}

#[test]
fn structural_ops_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let a = random(&[3, 4], &mut rng);
    let b = random(&[3, 2], &mut rng);
    let bias = random(&[6], &mut rng);
    let err = max_rel_err(&[a, b, bias], |tape, v| {
        let c = tape.concat_cols(&[v[0], v[1]]).unwrap();
        let c = tape.add_bias(c, v[2]).unwrap();
        let s = tape.slice_cols(c, 1, 4).unwrap();
        let tr = tape.transpose(s).unwrap();
        let r = tape.concat_rows(&[tr, tr]).unwrap();
        let m = tape.mean(r, 1).unwrap();
        let m = tape.scale(m, 1.7).unwrap();
        let m = tape.mean(m, 0).unwrap();
        let sq = tape.gather_rows(c, &[0, 2]).unwrap();
        let sq = probe(tape, sq);
        tape.add(m, sq).unwrap()
    });
    assert!(err <= 1e-6, "{err}");
}

proptest! {
    #[test]
    fn softmax_slices_sum_to_one(
        rows in 1usize..5,
        cols in 1usize..7,
        seed in any::<u64>(),
        spread in 0.0f64..200.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-spread..=spread)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![rows, cols], data).unwrap());
        let y = tape.softmax(x, 1).unwrap();
        for r in 0..rows {
            let s: f64 = tape.value(y).row(r).iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn composite_gradient_agrees_with_finite_differences(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&[3, 4], &mut rng);
        let w = random(&[4, 4], &mut rng);
        let g = random(&[4], &mut rng);
        let b = random(&[4], &mut rng);
        let err = max_rel_err(&[x, w, g, b], |tape, v| {
            let h = tape.matmul(v[0], v[1]).unwrap();
            let h = tape.gelu(h).unwrap();
            let h = tape.layernorm(h, v[2], v[3], 1e-6).unwrap();
            let p = tape.softmax(h, 1).unwrap();
            probe(tape, p)
        });
        prop_assert!(err <= 1e-4, "{}", err);
    }
}
