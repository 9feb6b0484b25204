use super::*;
use crate::error::Error;

fn ident(n: usize) -> DiffArray {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    DiffArray::matrix(n, n, v).unwrap()
}

fn identity_attention(tape: &mut Tape, d: usize) -> AttentionNodes {
    let w = || ident(d);
    let b = || DiffArray::vector(vec![0.0; d]);
    AttentionNodes {
        w_q: tape.constant(w()),
        b_q: tape.constant(b()),
        w_k: tape.constant(w()),
        b_k: tape.constant(b()),
        w_v: tape.constant(w()),
        b_v: tape.constant(b()),
        w_o: tape.constant(w()),
        b_o: tape.constant(b()),
    }
}

#[test]
fn matmul_identity_and_zero() {
    let mut tape = Tape::new();
    let a = tape.constant(DiffArray::matrix(3, 3, (1..=9).map(f64::from).collect()).unwrap());
    let i = tape.constant(ident(3));
    let z = tape.constant(DiffArray::zeros(vec![3, 3]));
    let ai = tape.matmul(a, i).unwrap();
    assert_eq!(tape.values(ai), tape.values(a));
    let az = tape.matmul(a, z).unwrap();
    assert!(tape.values(az).iter().all(|&v| v == 0.0));
}

#[test]
fn matmul_hand_case() {
    let mut tape = Tape::new();
    let a = tape.constant(DiffArray::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let b = tape.constant(DiffArray::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.values(c), &[19.0, 22.0, 43.0, 50.0]);
}

#[test]
fn matmul_shape_mismatch() {
    let mut tape = Tape::new();
    let a = tape.constant(DiffArray::matrix(2, 3, vec![0.0; 6]).unwrap());
    let b = tape.constant(DiffArray::matrix(2, 2, vec![0.0; 4]).unwrap());
    assert!(matches!(tape.matmul(a, b), Err(Error::ShapeMismatch(_))));
}

#[test]
fn softmax_uniform_and_hand_case() {
    let mut tape = Tape::new();
    let x = tape.constant(DiffArray::matrix(1, 4, vec![2.5; 4]).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    for &v in tape.values(y) {
        assert!((v - 0.25).abs() < 1e-15);
    }
    let x2 = tape.constant(DiffArray::matrix(1, 2, vec![0.0, 3.0f64.ln()]).unwrap());
    let y2 = tape.softmax_rows(x2).unwrap();
    assert!((tape.values(y2)[0] - 0.25).abs() < 1e-12);
    assert!((tape.values(y2)[1] - 0.75).abs() < 1e-12);
}

#[test]
fn softmax_shift_invariance_and_row_sums() {
    let mut tape = Tape::new();
    let vals = vec![0.3, -1.2, 4.0, 0.0, 2.2, -0.7];
    let x = tape.constant(DiffArray::matrix(2, 3, vals.clone()).unwrap());
    let shifted =
        tape.constant(DiffArray::matrix(2, 3, vals.iter().map(|v| v + 123.25).collect()).unwrap());
    let y = tape.softmax_rows(x).unwrap();
    let ys = tape.softmax_rows(shifted).unwrap();
    for (a, b) in tape.values(y).iter().zip(tape.values(ys)) {
        assert!((a - b).abs() < 1e-12);
    }
    for row in 0..2 {
        let s: f64 = tape.values(y)[row * 3..(row + 1) * 3].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(tape.values(y)[row * 3..(row + 1) * 3].iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn layer_norm_cases() {
    let mut tape = Tape::new();
    let gain = tape.constant(DiffArray::vector(vec![1.0, 1.0]));
    let bias = tape.constant(DiffArray::vector(vec![0.0, 0.0]));
    // Constant row standardizes to zeros.
    let x = tape.constant(DiffArray::matrix(1, 2, vec![5.0, 5.0]).unwrap());
    let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert!(tape.values(y).iter().all(|&v| v.abs() < 1e-12));
    // Zero gain returns the bias.
    let g0 = tape.constant(DiffArray::vector(vec![0.0, 0.0]));
    let b7 = tape.constant(DiffArray::vector(vec![7.0, -7.0]));
    let x2 = tape.constant(DiffArray::matrix(1, 2, vec![3.0, 9.0]).unwrap());
    let y2 = tape.layer_norm(x2, g0, b7, 1e-5).unwrap();
    assert_eq!(tape.values(y2), &[7.0, -7.0]);
    // (1, -1) has mean 0 and unit variance, so it is a fixed point as eps -> 0.
    let x3 = tape.constant(DiffArray::matrix(1, 2, vec![1.0, -1.0]).unwrap());
    let y3 = tape.layer_norm(x3, gain, bias, 1e-14).unwrap();
    assert!((tape.values(y3)[0] - 1.0).abs() < 1e-9);
    assert!((tape.values(y3)[1] + 1.0).abs() < 1e-9);
}

#[test]
fn attention_single_kv_token_passes_value_through() {
    let mut tape = Tape::new();
    let params = identity_attention(&mut tape, 2);
    let q = tape.constant(DiffArray::matrix(3, 2, vec![0.1, 0.2, -1.0, 4.0, 0.0, 0.0]).unwrap());
    let kv = tape.constant(DiffArray::matrix(1, 2, vec![2.5, -3.5]).unwrap());
    let out = multi_head_cross_attention(&mut tape, q, kv, &params, 1).unwrap();
    for row in 0..3 {
        assert_eq!(&tape.values(out)[row * 2..(row + 1) * 2], &[2.5, -3.5]);
    }
}

#[test]
fn attention_identical_keys_average_values() {
    let mut tape = Tape::new();
    let params = identity_attention(&mut tape, 2);
    let q = tape.constant(DiffArray::matrix(1, 2, vec![0.4, -0.9]).unwrap());
    // Keys identical, values distinct: weights are uniform.
    let kv_vals = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
    let kv = tape.constant(DiffArray::matrix(3, 2, kv_vals).unwrap());
    let out = multi_head_cross_attention(&mut tape, q, kv, &params, 1).unwrap();
    assert!((tape.values(out)[0] - 1.0).abs() < 1e-12);
    assert!((tape.values(out)[1] - 1.0).abs() < 1e-12);

    // q = 0 makes every score 0, so distinct values are averaged uniformly.
    let mut tape2 = Tape::new();
    let params2 = identity_attention(&mut tape2, 1);
    let q2 = tape2.constant(DiffArray::matrix(1, 1, vec![0.0]).unwrap());
    let kv2 = tape2.constant(DiffArray::matrix(4, 1, vec![1.0, 2.0, 3.0, 6.0]).unwrap());
    let out2 = multi_head_cross_attention(&mut tape2, q2, kv2, &params2, 1).unwrap();
    assert!((tape2.values(out2)[0] - 3.0).abs() < 1e-12);
}

#[test]
fn attention_hand_softmax_case() {
    // d=1, scale 1, query 1, keys {0, 1}, values {0, 1}.
    let mut tape = Tape::new();
    let params = identity_attention(&mut tape, 1);
    let q = tape.constant(DiffArray::matrix(1, 1, vec![1.0]).unwrap());
    let kv = tape.constant(DiffArray::matrix(2, 1, vec![0.0, 1.0]).unwrap());
    let out = multi_head_cross_attention(&mut tape, q, kv, &params, 1).unwrap();
    let w1 = 1.0 / (1.0 + (-1.0f64).exp()); // 0.7311
    assert!((tape.values(out)[0] - w1).abs() < 1e-4);
    assert!((tape.values(out)[0] - 0.7311).abs() < 1e-4);
}

#[test]
fn attention_rejects_bad_heads() {
    let mut tape = Tape::new();
    let params = identity_attention(&mut tape, 4);
    let q = tape.constant(DiffArray::zeros(vec![2, 4]));
    let kv = tape.constant(DiffArray::zeros(vec![3, 4]));
    assert!(matches!(
        multi_head_cross_attention(&mut tape, q, kv, &params, 3),
        Err(Error::InvalidConfig(_))
    ));
}

#[test]
fn backward_sum_gives_ones_and_disconnected_gives_zeros() {
    let mut tape = Tape::new();
    let x = tape.leaf(DiffArray::matrix(2, 3, vec![1.0, -2.0, 0.5, 3.0, 4.0, -1.0]).unwrap());
    let unused = tape.leaf(DiffArray::vector(vec![9.0, 9.0]));
    let s = tape.sum_all(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.leaf_grad(x).unwrap(), &[1.0; 6]);
    assert_eq!(tape.leaf_grad(unused).unwrap(), &[0.0, 0.0]);
}

#[test]
fn backward_product_matches_finite_differences() {
    let build = |inputs: &[DiffArray]| -> crate::error::Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(inputs[0].clone());
        let y = tape.leaf(inputs[1].clone());
        let p = tape.mul(x, y)?;
        let s = tape.sum_all(p)?;
        Ok(tape.values(s)[0])
    };
    let inputs = vec![
        DiffArray::matrix(1, 1, vec![2.0]).unwrap(),
        DiffArray::matrix(1, 1, vec![3.0]).unwrap(),
    ];
    let mut tape = Tape::new();
    let x = tape.leaf(inputs[0].clone());
    let y = tape.leaf(inputs[1].clone());
    let p = tape.mul(x, y).unwrap();
    let s = tape.sum_all(p).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.leaf_grad(x).unwrap(), &[3.0]);
    assert_eq!(tape.leaf_grad(y).unwrap(), &[2.0]);
    let analytic = vec![tape.leaf_grad(x).unwrap().to_vec(), tape.leaf_grad(y).unwrap().to_vec()];
    let report = fdcheck::check_gradients(&inputs, &analytic, None, build).unwrap();
    assert!(report.max_rel_err < 1e-8, "rel err {}", report.max_rel_err);
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(DiffArray::vector(vec![1.0, 2.0]));
    assert!(matches!(tape.backward(x), Err(Error::NotScalar(_))));
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut tape = Tape::new();
        let a = tape.constant(
            DiffArray::matrix(3, 3, (0..9).map(|i| (i as f64).sin()).collect()).unwrap(),
        );
        let b = tape.constant(
            DiffArray::matrix(3, 3, (0..9).map(|i| (i as f64).cos()).collect()).unwrap(),
        );
        let c = tape.matmul(a, b).unwrap();
        let s = tape.softmax_rows(c).unwrap();
        let g = tape.gelu(s).unwrap();
        tape.values(g).to_vec()
    };
    let first = run();
    let second = run();
    assert!(first.iter().zip(&second).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn checked_mode_flags_non_finite() {
    let mut tape = Tape::new();
    tape.set_checked(true);
    let x = tape.constant(DiffArray::matrix(1, 1, vec![1e308]).unwrap());
    let y = tape.constant(DiffArray::matrix(1, 1, vec![1e308]).unwrap());
    assert!(matches!(tape.add(x, y), Err(Error::NonFinite(_))));
}

#[test]
fn gelu_matches_reference_points() {
    // gelu(0) = 0, gelu(large) ~ x, gelu(-large) ~ 0
    let mut tape = Tape::new();
    let x = tape.constant(DiffArray::vector(vec![0.0, 6.0, -6.0]));
    let y = tape.gelu(x).unwrap();
    let v = tape.values(y);
    assert_eq!(v[0], 0.0);
    assert!((v[1] - 6.0).abs() < 1e-6);
    assert!(v[2].abs() < 1e-6);
}

#[test]
fn gather_and_slice_roundtrip_values() {
    let mut tape = Tape::new();
    let a = tape.constant(DiffArray::matrix(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
    let g = tape.gather_rows(a, &[2, 0, 2]).unwrap();
    assert_eq!(tape.values(g), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
    let s = tape.slice_cols(a, 1, 1).unwrap();
    assert_eq!(tape.values(s), &[2.0, 4.0, 6.0]);
    let c = tape.concat_cols(&[s, s]).unwrap();
    assert_eq!(tape.values(c), &[2.0, 2.0, 4.0, 4.0, 6.0, 6.0]);
}
