use rand::Rng;

use super::*;
use crate::rng::stream;

fn random_tensor(rows: usize, cols: usize, rng: &mut RandomStream) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

#[test]
fn matmul_identity_and_small_cases() {
    let mut tape = Tape::new();
    let i2 = tape.constant(Tensor::identity(2));
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let out = tape.matmul(i2, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![5.0]]).unwrap());
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 1]);
    assert_eq!(tape.value(out).item(), 0.0);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::zeros(&[2, 3]));
    let b = tape.constant(Tensor::zeros(&[2, 3]));
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]"), "{err}");
}

#[test]
fn matmul_sum_gradient_is_row_sums_of_rhs() {
    let mut rng = stream(11);
    let a = random_tensor(3, 4, &mut rng);
    let b = random_tensor(4, 2, &mut rng);
    let mut tape = Tape::new();
    let va = tape.param(a.clone());
    let vb = tape.constant(b.clone());
    let c = tape.matmul(va, vb).unwrap();
    let s = tape.sum(c);
    tape.backward(s).unwrap();
    let g = tape.grad(va);
    for i in 0..3 {
        for p in 0..4 {
            let expected: f64 = b.row(p).iter().sum();
            assert!((g.get(i, p) - expected).abs() < 1e-12);
        }
    }
    let err = finite_diff_check(
        |t, x| {
            let vb = t.constant(b.clone());
            let c = t.matmul(x, vb)?;
            Ok(t.sum(c))
        },
        &a,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn elementwise_values_and_gradients() {
    let mut tape = Tape::new();
    let z = tape.constant(Tensor::scalar(0.0));
    let s = tape.sigmoid(z);
    assert_eq!(tape.value(s).item(), 0.5);

    let x = tape.param(Tensor::scalar(-3.0));
    let r = tape.elementwise(Activation::Relu, x);
    assert_eq!(tape.value(r).item(), 0.0);
    tape.backward(r).unwrap();
    assert_eq!(tape.grad(x).item(), 0.0);

    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(0.7));
    let y = tape.tanh(x);
    tape.backward(y).unwrap();
    let numeric = ((0.7f64 + 1e-5).tanh() - (0.7f64 - 1e-5).tanh()) / 2e-5;
    assert!((tape.grad(x).item() - numeric).abs() < 1e-6);
}

#[test]
fn softmax_uniform_and_stable() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::vector(vec![0.0; 4]));
    let y = tape.softmax(x);
    assert!(tape.value(y).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));

    let x = tape.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = tape.softmax(x);
    let v = tape.value(y).data();
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);
}

#[test]
fn softmax_matches_extended_precision_reference() {
    // Values from a 40-digit evaluation of softmax(1,2,3) and the gradient of
    // w·softmax(x) for w = (1, -2, 0.5).
    let want_y = [0.09003057317038046, 0.24472847105479765, 0.6652409557748219];
    let want_g = [0.09604514583293236, -0.47310763853503395, 0.37706249270210159];
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
    let y = tape.softmax(x);
    let w = tape.constant(Tensor::vector(vec![1.0, -2.0, 0.5]));
    let wy = tape.mul(y, w).unwrap();
    let s = tape.sum(wy);
    tape.backward(s).unwrap();
    for (a, b) in tape.value(y).data().iter().zip(want_y) {
        assert!((a - b).abs() < 1e-15);
    }
    for (a, b) in tape.grad(x).data().iter().zip(want_g) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn cross_entropy_reference_values() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::matrix(1, 4, vec![0.0; 4]).unwrap());
    let l = tape.cross_entropy(x, &[2]).unwrap();
    assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);

    let x = tape.constant(Tensor::matrix(1, 4, vec![0.0, 30.0, 0.0, 0.0]).unwrap());
    let l = tape.cross_entropy(x, &[1]).unwrap();
    assert!(tape.value(l).item() < 1e-12);

    let rows: [Vec<f64>; 2] = [vec![0.3, -1.2, 2.0], vec![1.5, 0.1, -0.4]];
    let targets = [2usize, 0];
    let hand: f64 = rows
        .iter()
        .zip(targets)
        .map(|(r, y)| {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            -(r[y].exp() / z).ln()
        })
        .sum::<f64>()
        / 2.0;
    let x = tape.constant(Tensor::from_rows(&rows).unwrap());
    let l = tape.cross_entropy(x, &targets).unwrap();
    assert!((tape.value(l).item() - hand).abs() < 1e-14);
}

#[test]
fn cross_entropy_rejects_out_of_range_target() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        tape.cross_entropy(x, &[0, 3]),
        Err(crate::Error::Index { index: 3, len: 3, .. })
    ));
}

#[test]
fn gumbel_zero_noise_is_plain_argmax() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![3.0, 1.0, 0.0]));
    let y = tape.gumbel_softmax_with_noise(x, &[0.0; 3], 1.2, true).unwrap();
    assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0]);
}

#[test]
fn gumbel_forward_is_one_hot_and_backward_is_relaxed() {
    let mut rng = stream(5);
    for _ in 0..50 {
        let logits = random_tensor(3, 5, &mut rng).scaled(4.0);
        let mut tape = Tape::new();
        let x = tape.param(logits);
        let y = tape.gumbel_softmax_st(x, 1.2, &mut rng).unwrap();
        for row in tape.value(y).data().chunks(5) {
            assert_eq!(row.iter().filter(|&&v| v != 0.0).count(), 1);
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }
    // The straight-through backward equals the gradient of the relaxed sample.
    let logits = random_tensor(2, 4, &mut rng);
    let noise = gumbel_noise(8, &mut rng);
    let w = random_tensor(2, 4, &mut rng);
    let grad_of = |hard: bool| {
        let mut tape = Tape::new();
        let x = tape.param(logits.clone());
        let y = tape.gumbel_softmax_with_noise(x, &noise, 0.7, hard).unwrap();
        let wv = tape.constant(w.clone());
        let p = tape.mul(y, wv).unwrap();
        let s = tape.sum(p);
        tape.backward(s).unwrap();
        tape.grad(x)
    };
    assert_eq!(grad_of(true), grad_of(false));
    let err = finite_diff_check(
        |t, x| {
            let y = t.gumbel_softmax_with_noise(x, &noise, 0.7, false)?;
            let wv = t.constant(w.clone());
            let p = t.mul(y, wv)?;
            Ok(t.sum(p))
        },
        &logits,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn gumbel_rejects_non_positive_temperature() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![0.0, 1.0]));
    assert!(tape.gumbel_softmax_with_noise(x, &[0.0, 0.0], 0.0, true).is_err());
}

#[test]
fn backward_square_and_accumulation() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::scalar(3.0));
    let y = tape.mul(x, x).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).item(), 6.0);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).item(), 12.0);
    tape.zero_grad();
    assert_eq!(tape.grad(x).item(), 0.0);
}

#[test]
fn backward_rejects_non_scalar_loss_and_zeroes_unreachable() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
    let unused = tape.param(Tensor::vector(vec![5.0]));
    assert!(matches!(tape.backward(x), Err(crate::Error::Contract(_))));
    let s = tape.sum(x);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(unused).data(), &[0.0]);
}

#[test]
fn sum_tanh_wx_matches_finite_differences() {
    let mut rng = stream(3);
    let w = random_tensor(4, 3, &mut rng);
    let x = random_tensor(3, 2, &mut rng);
    let err = finite_diff_check(
        |t, wv| {
            let xv = t.constant(x.clone());
            let z = t.matmul(wv, xv)?;
            let a = t.tanh(z);
            Ok(t.sum(a))
        },
        &w,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn finite_diff_check_trivial_cases() {
    let err = finite_diff_check(|t, x| t.mul(x, x), &Tensor::scalar(1.0), 1e-5).unwrap();
    assert!(err < 1e-8);
    let err = finite_diff_check(
        |t, _| Ok(t.constant(Tensor::scalar(4.0))),
        &Tensor::scalar(1.0),
        1e-5,
    )
    .unwrap();
    assert_eq!(err, 0.0);
}

#[test]
fn structural_ops_match_finite_differences() {
    let mut rng = stream(21);
    let a = random_tensor(3, 6, &mut rng);
    let b = random_tensor(3, 6, &mut rng);
    let bias = random_tensor(1, 6, &mut rng);
    let keys = random_tensor(9, 6, &mut rng);
    let err = check_gradients(
        |t, v| {
            let n = t.narrow_cols(v[0], 1, 4)?;
            let m = t.narrow_cols(v[1], 2, 4)?;
            let sel = t.select_rows(&[true, false, true], n, m)?;
            let avg = t.average(&[v[0], v[1]])?;
            let biased = t.add_bias(avg, v[2])?;
            let scores = t.group_dot(biased, v[3], 3)?;
            let ce = t.cross_entropy(scores, &[0, 2, 1])?;
            let s = t.sum(sel);
            let s = t.scale(s, 0.3);
            let d = t.sub(ce, s)?;
            let sm = t.softmax(v[0]);
            let mm = t.mean(sm);
            t.add(d, mm)
        },
        &[a, b, bias, keys],
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

fn scalar_adam(theta: &mut f64, m: &mut f64, v: &mut f64, t: i32, g: f64) {
    let (lr, b1, b2, eps) = (1e-3, 0.9, 0.999, 1e-8);
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    let mh = *m / (1.0 - b1.powi(t));
    let vh = *v / (1.0 - b2.powi(t));
    *theta -= lr * mh / (vh.sqrt() + eps);
}

#[test]
fn adam_first_step_closed_form() {
    let mut params = ParamSet::new();
    params.push("theta", Tensor::scalar(0.0));
    let mut state = AdamState::new(&params, AdamConfig::default());
    adam_step(&mut params, &[Tensor::scalar(1.0)], &mut state).unwrap();
    assert_eq!(state.t, 1);
    // m̂ = v̂ = 1, so the step is lr / (1 + eps).
    assert!((params.get(0).item() + 1e-3 / (1.0 + 1e-8)).abs() < 1e-18);
}

#[test]
fn adam_zero_gradient_leaves_params() {
    let mut params = ParamSet::new();
    params.push("w", Tensor::vector(vec![0.3, -0.2]));
    let before = params.clone();
    let mut state = AdamState::new(&params, AdamConfig::default());
    adam_step(&mut params, &[Tensor::zeros(&[2])], &mut state).unwrap();
    assert_eq!(params, before);
}

#[test]
fn adam_matches_scalar_oracle_on_quadratic() {
    // f(θ) = 0.5·c·(θ - 2)², g = c·(θ - 2)
    let c = 3.0;
    let mut params = ParamSet::new();
    params.push("theta", Tensor::scalar(0.5));
    let mut state = AdamState::new(&params, AdamConfig::default());
    let (mut theta, mut m, mut v) = (0.5, 0.0, 0.0);
    for t in 1..=2 {
        let g = c * (params.get(0).item() - 2.0);
        adam_step(&mut params, &[Tensor::scalar(g)], &mut state).unwrap();
        let g_oracle = c * (theta - 2.0);
        scalar_adam(&mut theta, &mut m, &mut v, t, g_oracle);
        assert!((params.get(0).item() - theta).abs() < 1e-12);
    }
}

#[test]
fn adam_rejects_nan_gradient_by_name() {
    let mut params = ParamSet::new();
    params.push("w_out", Tensor::scalar(1.0));
    let mut state = AdamState::new(&params, AdamConfig::default());
    let err = adam_step(&mut params, &[Tensor::scalar(f64::NAN)], &mut state).unwrap_err();
    assert!(err.to_string().contains("w_out"));
    assert_eq!(params.get(0).item(), 1.0);
    assert_eq!(state.t, 0);
}

#[test]
fn init_uniform_respects_bound() {
    let mut rng = stream(1);
    let t = init_uniform(&[16, 64], 16, &mut rng);
    assert!(t.data().iter().all(|v| v.abs() < 0.25));
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(data in proptest::collection::vec(-50.0f64..50.0, 1..24), cols in 1usize..6) {
            let cols = cols.min(data.len());
            let rows = data.len() / cols;
            let t = Tensor::matrix(rows, cols, data[..rows * cols].to_vec()).unwrap();
            let mut tape = Tape::new();
            let x = tape.constant(t);
            let y = tape.softmax(x);
            for row in tape.value(y).data().chunks(cols) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                prop_assert!(row.iter().all(|&p| p > 0.0));
            }
        }

        #[test]
        fn ops_are_bit_reproducible(seed in any::<u64>()) {
            let run = || {
                let mut rng = stream(seed);
                let x = random_tensor(2, 3, &mut rng);
                let mut tape = Tape::new();
                let v = tape.param(x);
                let y = tape.gumbel_softmax_st(v, 1.2, &mut rng).unwrap();
                let s = tape.softmax(v);
                let p = tape.mul(y, s).unwrap();
                let l = tape.sum(p);
                tape.backward(l).unwrap();
                (tape.value(l).item().to_bits(), tape.grad(v))
            };
            prop_assert_eq!(run(), run());
        }
    }
}
