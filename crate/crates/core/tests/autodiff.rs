use fasd::optim::{AdamW, AdamWConfig};
use fasd::{Error, ParamStore, Tape, Tensor};
use proptest::prelude::*;

fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
    Tensor::new(&[rows, cols], data.to_vec()).unwrap()
}

fn triple_loop(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.dims()[0], a.dims()[1], b.dims()[1]);
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

fn matmul_values(a: Tensor, b: Tensor) -> fasd::Result<Tensor> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(a), tape.constant(b));
    let y = tape.matmul(a, b)?;
    Ok(tape.value(y).clone())
}

#[test]
fn matmul_identity_zero_and_hand_case() {
    let a = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
    let eye = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(matmul_values(a.clone(), eye).unwrap().data(), a.data());
    assert_eq!(matmul_values(a, Tensor::zeros(&[2, 2]).unwrap()).unwrap().data(), &[0.0; 4]);
    let row = t2(1, 3, &[1.0, 2.0, 3.0]);
    let ones = t2(3, 1, &[1.0, 1.0, 1.0]);
    let y = matmul_values(row.clone(), ones.clone()).unwrap();
    assert_eq!(y.dims(), &[1, 1]);
    assert_eq!(y.data(), &[6.0]);
    assert_eq!(triple_loop(&row, &ones), vec![6.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let err = matmul_values(Tensor::zeros(&[2, 3]).unwrap(), Tensor::zeros(&[2, 3]).unwrap()).unwrap_err();
    match &err {
        Error::Dimension { lhs, rhs, .. } => {
            assert_eq!(lhs, &vec![2, 3]);
            assert_eq!(rhs, &vec![2, 3]);
        }
        other => panic!("unexpected error {other:?}"),
    }
    assert!(err.to_string().contains("[2, 3]"));
}

proptest! {
    #[test]
    fn matmul_matches_triple_loop(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let gen = |i: usize| ((seed.wrapping_add(i as u64 * 2654435761) % 2001) as f64 - 1000.0) / 250.0;
        let a = Tensor::from_fn(&[m, k], gen).unwrap();
        let b = Tensor::from_fn(&[k, n], |i| gen(i + 97)).unwrap();
        let y = matmul_values(a.clone(), b.clone()).unwrap();
        for (got, want) in y.data().iter().zip(triple_loop(&a, &b)) {
            prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()));
        }
    }

    #[test]
    fn softmax_shift_invariant(xs in prop::collection::vec(-5.0f64..5.0, 1..8), c in -50.0f64..50.0) {
        let n = xs.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(&[1, n], xs.clone()).unwrap());
        let shifted = tape.add_scalar(x, c).unwrap();
        let a = tape.softmax(x, None).unwrap();
        let b = tape.softmax(shifted, None).unwrap();
        prop_assert!(tape.value(a).max_abs_diff(tape.value(b)) < 1e-12);
        let total: f64 = tape.value(a).data().iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}

fn softmax_row(xs: &[f64], mask: Option<Vec<bool>>) -> fasd::Result<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[1, xs.len()], xs.to_vec()).unwrap());
    let y = tape.softmax(x, mask.map(Into::into))?;
    Ok(tape.value(y).data().to_vec())
}

#[test]
fn softmax_examples() {
    for p in softmax_row(&[0.0, 0.0, 0.0], None).unwrap() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let xs = [1f64.ln(), 2f64.ln(), 3f64.ln()];
    let got = softmax_row(&xs, None).unwrap();
    // brute-force normalization
    let e: Vec<f64> = xs.iter().map(|x| x.exp()).collect();
    let z: f64 = e.iter().sum();
    for (i, g) in got.iter().enumerate() {
        assert!((g - e[i] / z).abs() < 1e-15);
        assert!((g - (i + 1) as f64 / 6.0).abs() < 1e-15);
    }
}

#[test]
fn softmax_masked_entries_exactly_zero() {
    let p = softmax_row(&[3.0, 1.0, -2.0, 0.5], Some(vec![true, false, true, false])).unwrap();
    assert_eq!(p[1], 0.0);
    assert_eq!(p[3], 0.0);
    assert!((p[0] + p[2] - 1.0).abs() < 1e-15);
    let err = softmax_row(&[1.0, 2.0], Some(vec![false, false])).unwrap_err();
    assert!(matches!(err, Error::DegenerateRow { row: 0 }));
}

#[test]
fn backward_sum_of_squares_and_unreached_leaf() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap());
    let w = tape.leaf(Tensor::new(&[2], vec![4.0, 5.0]).unwrap());
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum(sq).unwrap();
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[2.0, -4.0, 1.0]);
    assert_eq!(g.wrt(&tape, w).data(), &[0.0, 0.0]);
}

#[test]
fn backward_accumulates_fan_out() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0));
    let a = tape.scale(x, 2.0).unwrap();
    let b = tape.mul(x, x).unwrap();
    let y = tape.add(a, b).unwrap();
    let y = tape.add(y, x).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.wrt(&tape, x).data(), &[2.0 + 6.0 + 1.0]);
}

#[test]
fn backward_needs_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]).unwrap());
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
}

#[test]
fn non_finite_results_are_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::scalar(800.0));
    assert!(matches!(tape.exp(x), Err(Error::NonFinite { .. })));
    let z = tape.constant(Tensor::scalar(0.0));
    assert!(tape.log(z).is_err());
    assert!(Tensor::new(&[1], vec![f64::NAN]).is_err() || !Tensor::new(&[1], vec![f64::NAN]).unwrap().is_finite());
}

#[test]
fn forward_is_bit_identical() {
    let run = || {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_fn(&[4, 5], |i| (i as f64 * 0.37).sin()).unwrap());
        let w = tape.constant(Tensor::from_fn(&[5, 3], |i| (i as f64 * 1.3).cos()).unwrap());
        let y = tape.matmul(x, w).unwrap();
        let y = tape.softmax(y, None).unwrap();
        let y = tape.log_softmax(y).unwrap();
        tape.value(y).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

fn quad_store(w: &[f64]) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", Tensor::new(&[w.len()], w.to_vec()).unwrap()).unwrap();
    s
}

#[test]
fn adamw_zero_gradient_no_decay_is_identity() {
    let mut store = quad_store(&[1.0, -3.0]);
    let cfg = AdamWConfig {
        weight_decay: 0.0,
        ..Default::default()
    };
    let mut opt = AdamW::new(cfg, &store);
    for _ in 0..3 {
        opt.step(&mut store, &[Tensor::zeros(&[2]).unwrap()]).unwrap();
    }
    assert_eq!(store.get(store.id("w").unwrap()).data(), &[1.0, -3.0]);
}

#[test]
fn adamw_descends_on_square() {
    let mut store = quad_store(&[1.0]);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr: 1e-2,
            ..Default::default()
        },
        &store,
    );
    let w0 = 1.0;
    let g = Tensor::new(&[1], vec![2.0 * w0]).unwrap();
    opt.step(&mut store, &[g]).unwrap();
    let w1 = store.get(store.id("w").unwrap()).data()[0];
    assert!(w1 < w0 && w1 > 0.0);
}

#[test]
fn adamw_rejects_shape_mismatch() {
    let mut store = quad_store(&[1.0, 2.0]);
    let mut opt = AdamW::new(AdamWConfig::default(), &store);
    assert!(matches!(
        opt.step(&mut store, &[Tensor::zeros(&[3]).unwrap()]),
        Err(Error::Contract(_))
    ));
    assert!(opt.step(&mut store, &[]).is_err());
}

#[test]
fn adamw_matches_transcript_on_two_variable_quadratic() {
    // f(w) = 3·w0² + 0.5·w1² + w0·w1
    let grad = |w: &[f64]| [6.0 * w[0] + w[1], w[1] + w[0]];
    let (lr, b1, b2, eps, wd) = (0.05, 0.9, 0.999, 1e-8, 0.01);
    let mut store = quad_store(&[1.0, -2.0]);
    let mut opt = AdamW::new(
        AdamWConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
            weight_decay: wd,
            max_grad_norm: None,
        },
        &store,
    );
    let mut w = [1.0f64, -2.0];
    let (mut m, mut v) = ([0.0f64; 2], [0.0f64; 2]);
    for t in 1..=3 {
        let g = grad(&w);
        for i in 0..2 {
            w[i] *= 1.0 - lr * wd;
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            w[i] -= lr * mh / (vh.sqrt() + eps);
        }
        let cur = store.get(store.id("w").unwrap()).data().to_vec();
        opt.step(&mut store, &[Tensor::new(&[2], grad(&cur).to_vec()).unwrap()]).unwrap();
        let got = store.get(store.id("w").unwrap()).data();
        for i in 0..2 {
            assert!((got[i] - w[i]).abs() < 1e-14, "step {t}: {} vs {}", got[i], w[i]);
        }
    }
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let mut store = ParamStore::new();
    store.add("a", Tensor::from_fn(&[2, 3], |i| i as f64 * -0.7).unwrap()).unwrap();
    store.add("b.c", Tensor::scalar(std::f64::consts::PI)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    store.save(&path).unwrap();
    let back = ParamStore::load(&path).unwrap();
    assert_eq!(back.len(), 2);
    for ((_, n1, t1), (_, n2, t2)) in store.iter().zip(back.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1, t2);
    }
    let mut bytes = std::fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], b"FASDCKPT");
    bytes[0] = b'X';
    assert!(matches!(ParamStore::read_from(bytes.as_slice()), Err(Error::Checkpoint(_))));
    let bytes = std::fs::read(&path).unwrap();
    assert!(ParamStore::read_from(&bytes[..bytes.len() - 3]).is_err());
}
