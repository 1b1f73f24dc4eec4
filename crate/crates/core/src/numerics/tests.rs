use std::cell::RefCell;
use std::rc::Rc;

use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::error::{Error, Result};
use crate::rng::substream;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = substream(seed, "test-tensor", 0);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Central-difference oracle, independent of the adjoint code: perturbs each
/// input element, re-runs the forward pass and differentiates
/// `sum(out * weights)` numerically.
fn fd_max_rel_err(inputs: &[Tensor<f64>], build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) -> f64 {
    let eps = 1e-6;
    let weights = |n: usize| -> Vec<f64> { (0..n).map(|i| ((i as f64) * 0.731 + 0.2).sin()).collect() };
    let objective = |xs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars).unwrap();
        let v = tape.value(out).data();
        v.iter().zip(weights(v.len())).map(|(a, b)| a * b).sum()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = build(&mut tape, &vars).unwrap();
    let w = Tensor::new(tape.value(out).shape().to_vec(), weights(tape.value(out).len())).unwrap();
    let w = tape.constant(w);
    let prod = tape.mul(out, w).unwrap();
    let loss = tape.sum(prod);
    let grads = tape.backward(loss).unwrap();

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += eps;
            let plus = objective(&xs);
            xs[i].data_mut()[j] -= 2.0 * eps;
            let minus = objective(&xs);
            let numeric = (plus - minus) / (2.0 * eps);
            let analytic = grads.get(vars[i]).map_or(0.0, |g| g[j]);
            worst = worst.max(relative_error(analytic, numeric, 1e-7));
        }
    }
    worst
}

#[test]
fn matmul_identity_and_orthogonal_rows() {
    let mut tape = Tape::<f32>::new();
    let eye = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
    let m = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
    let out = tape.matmul(eye, m).unwrap();
    assert_eq!(tape.value(out).data(), &[1.0, 2.0, 3.0, 4.0]);

    let a = tape.constant(Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap());
    let b = tape.constant(Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap());
    let out = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(out).shape(), &[1, 1]);
    assert_eq!(tape.value(out).data(), &[0.0]);
}

#[test]
fn matmul_rejects_mismatched_inner_dimensions() {
    let mut tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros(vec![2, 3]));
    let b = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(matches!(tape.matmul(a, b), Err(Error::Dimension { .. })));
    assert!(tape.matmul_nt(a, b).is_ok());
}

#[test]
fn matmul_adjoints_match_central_differences() {
    let a = random_tensor(&[3, 4], 1);
    let b = random_tensor(&[4, 2], 2);
    assert!(fd_max_rel_err(&[a.clone(), b], |t, v| t.matmul(v[0], v[1])) < 1e-6);
    let bt = random_tensor(&[5, 4], 3);
    assert!(fd_max_rel_err(&[a, bt], |t, v| t.matmul_nt(v[0], v[1])) < 1e-6);
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.constant(Tensor::new(vec![2], vec![1000.0, 0.0]).unwrap());
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert_eq!(v[0], 1.0);
    assert!(v[1] >= 0.0 && v[1] < 1e-300);

    assert!(matches!(tape.softmax(x, 1), Err(Error::Dimension { .. })));
}

#[test]
fn softmax_adjoint_matches_central_differences() {
    let x = random_tensor(&[8], 4);
    assert!(fd_max_rel_err(&[x], |t, v| t.softmax(v[0], 0)) < 1e-6);
    let x = random_tensor(&[3, 4, 2], 5);
    assert!(fd_max_rel_err(&[x.clone()], |t, v| t.softmax(v[0], 1)) < 1e-6);
    assert!(fd_max_rel_err(&[x], |t, v| t.softmax(v[0], 2)) < 1e-6);
}

proptest! {
    #[test]
    fn softmax_lies_on_simplex(xs in prop::collection::vec(-50.0f64..50.0, 1..16)) {
        let mut tape = Tape::<f64>::new();
        let n = xs.len();
        let x = tape.constant(Tensor::new(vec![n], xs).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        let v = tape.value(y).data();
        prop_assert!(v.iter().all(|&p| p >= 0.0));
        prop_assert!((v.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn max_over_sequence_ignores_position_order(
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 1..7),
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        let seq = rows.len();
        let mut perm = rows.clone();
        perm.shuffle(&mut substream(seed, "perm", 0));
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_rows(&rows).unwrap());
        let b = tape.constant(Tensor::from_rows(&perm).unwrap());
        let valid = vec![true; seq];
        let ma = tape.max_over_sequence(a, seq, &valid).unwrap();
        let mb = tape.max_over_sequence(b, seq, &valid).unwrap();
        prop_assert_eq!(tape.value(ma).data(), tape.value(mb).data());
    }
}

#[test]
fn max_over_sequence_singleton_and_masking() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::from_rows(&[vec![1.0, -2.0], vec![9.0, 9.0], vec![0.5, 3.0]]).unwrap());
    // one sequence of three; only position 2 valid
    let m = tape.max_over_sequence(x, 3, &[false, false, true]).unwrap();
    assert_eq!(tape.value(m).data(), &[0.5, 3.0]);
    // masked position with larger values is ignored
    let m = tape.max_over_sequence(x, 3, &[true, false, true]).unwrap();
    assert_eq!(tape.value(m).data(), &[1.0, 3.0]);
    assert!(matches!(
        tape.max_over_sequence(x, 3, &[false, false, false]),
        Err(Error::EmptyPool { sequence: 0 })
    ));
}

#[test]
fn max_over_sequence_routes_ties_to_first_position() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_rows(&[vec![2.0], vec![2.0], vec![1.0]]).unwrap());
    let m = tape.max_over_sequence(x, 3, &[true; 3]).unwrap();
    let s = tape.sum(m);
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(x).unwrap(), &[1.0, 0.0, 0.0]);
}

#[test]
fn max_over_sequence_adjoint_matches_central_differences() {
    // distinct values per feature keep the max unique under perturbation
    let x = Tensor::new(vec![6, 2], vec![0.1, 0.9, 0.5, 0.2, 0.3, 0.4, -0.7, 0.8, 0.6, -0.1, 0.0, 1.5]).unwrap();
    let valid = [true, true, false, true, true, true];
    assert!(fd_max_rel_err(&[x], |t, v| t.max_over_sequence(v[0], 3, &valid)) < 1e-6);
}

#[test]
fn layer_norm_normalizes_rows() {
    let x = random_tensor(&[5, 16], 6);
    let mut tape = Tape::<f64>::new();
    let xv = tape.constant(x.cast::<f64>().reshape(vec![5, 16]).unwrap());
    let g = tape.constant(Tensor::full(vec![16], 1.0));
    let b = tape.constant(Tensor::zeros(vec![16]));
    let y = tape.layer_norm(xv, g, b, 1e-12).unwrap();
    for r in 0..5 {
        let row = tape.value(y).row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }
}

#[test]
fn layer_norm_and_gelu_adjoints() {
    let x = random_tensor(&[3, 6], 7);
    let g = random_tensor(&[6], 8);
    let b = random_tensor(&[6], 9);
    assert!(fd_max_rel_err(&[x.clone(), g, b], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)) < 1e-6);
    assert!(fd_max_rel_err(&[x], |t, v| Ok(t.gelu(v[0]))) < 1e-6);
}

#[test]
fn dropout_zero_rate_is_identity() {
    let mut tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_fn(vec![4, 4], |i| i as f32));
    let mut rng = substream(0, "d", 0);
    let y = tape.dropout(x, 0.0, &mut rng).unwrap();
    assert_eq!(tape.value(y), tape.value(x));
    assert!(tape.dropout(x, 1.0, &mut rng).is_err());
    assert!(tape.dropout(x, -0.1, &mut rng).is_err());
}

#[test]
fn dropout_preserves_expectation() {
    let n = 100_000;
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(vec![n], 1.0));
    let mut rng = substream(1, "d", 0);
    let y = tape.dropout(x, 0.3, &mut rng).unwrap();
    let mean = tape.value(y).data().iter().sum::<f64>() / n as f64;
    // per-element sd = sqrt(0.3/0.7) ≈ 0.655; 5 sigma over 1e5 samples
    assert!((mean - 1.0).abs() < 5.0 * 0.655 / (n as f64).sqrt(), "mean {mean}");
}

#[test]
fn dropout_adjoint_uses_the_forward_mask() {
    let x = random_tensor(&[4, 5], 10);
    let err = fd_max_rel_err(&[x], |t, v| {
        let mut rng = substream(3, "d", 0);
        t.dropout(v[0], 0.4, &mut rng)
    });
    assert!(err < 1e-6);
}

#[test]
fn embedding_and_row_ops_adjoints() {
    let table = random_tensor(&[5, 3], 11);
    assert!(fd_max_rel_err(&[table.clone()], |t, v| t.embedding(v[0], &[4, 0, 4, 2])) < 1e-6);
    assert!(fd_max_rel_err(&[table.clone()], |t, v| t.select_rows(v[0], &[1, 1, 3])) < 1e-6);
    let other = random_tensor(&[2, 3], 12);
    assert!(fd_max_rel_err(&[table.clone(), other], |t, v| t.concat_rows(&[v[0], v[1]])) < 1e-6);
    assert!(fd_max_rel_err(&[table.clone()], |t, v| t.segment_mean(v[0], &[vec![0, 2], vec![4], vec![1, 2, 3]])) < 1e-6);
    assert!(fd_max_rel_err(&[table.clone()], |t, v| t.normalize_rows(v[0])) < 1e-6);
    let bias = random_tensor(&[3], 13);
    assert!(fd_max_rel_err(&[table.clone(), bias], |t, v| t.add_row(v[0], v[1])) < 1e-6);
    assert!(fd_max_rel_err(&[table], |t, v| {
        let s = t.scale(v[0], -2.5);
        t.reshape(s, &[15])
    }) < 1e-6);
}

#[test]
fn embedding_rejects_out_of_range_ids() {
    let mut tape = Tape::<f32>::new();
    let t = tape.leaf(Tensor::zeros(vec![3, 2]));
    assert!(tape.embedding(t, &[3]).is_err());
}

#[test]
fn normalize_rows_rejects_zero_vectors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap());
    assert!(matches!(tape.normalize_rows(x), Err(Error::ZeroNorm { index: 1 })));
}

#[test]
fn cross_entropy_examples() {
    let v = 7;
    let mut tape = Tape::<f64>::new();
    let logits = tape.leaf(Tensor::zeros(vec![3, v]));
    let loss = tape.cross_entropy(logits, &[2, u32::MAX, 6], u32::MAX).unwrap();
    assert!((tape.value(loss).item() - (v as f64).ln()).abs() < 1e-12);
    assert!(matches!(
        tape.cross_entropy(logits, &[u32::MAX; 3], u32::MAX),
        Err(Error::UndefinedLoss)
    ));
    assert!(tape.cross_entropy(logits, &[7, 0, 0], u32::MAX).is_err());
}

#[test]
fn cross_entropy_adjoint_matches_central_differences() {
    let logits = random_tensor(&[4, 5], 14);
    let err = fd_max_rel_err(&[logits], |t, v| t.cross_entropy(v[0], &[1, 99, 4, 0], 99));
    assert!(err < 1e-6);
}

fn attention_inputs() -> Vec<Tensor<f64>> {
    vec![random_tensor(&[8, 4], 20), random_tensor(&[8, 4], 21), random_tensor(&[8, 4], 22)]
}

#[test]
fn attention_adjoints_match_central_differences() {
    let valid = [true, true, true, false, true, true, false, false];
    let spec = AttentionSpec { heads: 2, seq: 4, key_valid: &valid };
    let err = fd_max_rel_err(&attention_inputs(), |t, v| {
        t.attention::<crate::rng::StreamRng>(v[0], v[1], v[2], &spec, None)
    });
    assert!(err < 1e-6, "{err}");
    let err = fd_max_rel_err(&attention_inputs(), |t, v| {
        let mut rng = substream(5, "attn", 0);
        t.attention(v[0], v[1], v[2], &spec, Some((0.3, &mut rng)))
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn attention_rows_are_distributions_over_valid_keys() {
    let valid = [true, false, true, true, true, true, true, false];
    let spec = AttentionSpec { heads: 2, seq: 4, key_valid: &valid };
    let mut tape = Tape::<f64>::new();
    let x = attention_inputs();
    let (q, k, v) = (tape.leaf(x[0].clone()), tape.leaf(x[1].clone()), tape.leaf(x[2].clone()));
    let out = tape.attention::<crate::rng::StreamRng>(q, k, v, &spec, None).unwrap();
    let w = tape.attention_weights(out).unwrap();
    for (r, row) in w.chunks(4).enumerate() {
        let b = r / (2 * 4);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (j, &p) in row.iter().enumerate() {
            if !valid[b * 4 + j] {
                assert_eq!(p, 0.0);
            }
        }
    }
}

#[test]
fn backward_twice_is_an_error_until_reset() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = tape.scale(x, 3.0);
    tape.backward(y).unwrap();
    assert!(matches!(tape.backward(y), Err(Error::Tape(_))));
    tape.reset();
    let x = tape.leaf(Tensor::scalar(2.0));
    let y = tape.scale(x, 3.0);
    assert_eq!(tape.backward(y).unwrap().get(x).unwrap(), &[3.0]);
}

#[test]
fn backward_visits_operations_in_reverse_order() {
    let log = Rc::new(RefCell::new(Vec::new()));
    let mut tape = Tape::<f64>::new();
    let mut v = tape.leaf(Tensor::scalar(1.0));
    let mut made = Vec::new();
    for i in 0..5 {
        let log = Rc::clone(&log);
        let value = tape.value(v).clone();
        v = tape.custom(&[v], value, move |_, _, g| {
            log.borrow_mut().push(i);
            vec![g.to_vec()]
        });
        made.push(v);
    }
    tape.backward(v).unwrap();
    assert_eq!(*log.borrow(), vec![4, 3, 2, 1, 0]);
    let visited: Vec<Var> = tape.last_backward_order().iter().copied().filter(|x| made.contains(x)).collect();
    made.reverse();
    assert_eq!(visited, made);
}

#[test]
fn grad_check_linear_loss_is_exact() {
    let mut params = ParamSet::<f64>::new();
    params.insert("w", random_tensor(&[1, 6], 30));
    let x = random_tensor(&[6, 1], 31);
    let report = grad_check(
        &mut params,
        |p, tape| {
            let w = tape.param(p, "w")?;
            let x = tape.constant(x.clone());
            tape.matmul(w, x)
        },
        &GradCheckOptions { epsilon: 1e-3, ..Default::default() },
    )
    .unwrap();
    assert_eq!(report.checked, 6);
    assert!(report.max_relative_error < 1e-9, "{report:?}");
}

#[test]
fn grad_check_catches_a_wrong_adjoint() {
    let mut params = ParamSet::<f64>::new();
    params.insert("x", random_tensor(&[5], 32));
    let report = grad_check(
        &mut params,
        |p, tape| {
            let x = tape.param(p, "x")?;
            let value = Tensor::new(vec![5], tape.value(x).data().iter().map(|u| u * u).collect())?;
            // true adjoint is 2x·g; this one forgets the factor 2
            let sq = tape.custom(&[x], value, |inputs, _, g| {
                vec![inputs[0].data().iter().zip(g).map(|(u, w)| u * w).collect()]
            });
            Ok(tape.sum(sq))
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.max_relative_error > 0.4, "{report:?}");
}

#[test]
fn grad_check_rejects_non_finite_loss() {
    let mut params = ParamSet::<f64>::new();
    params.insert("x", Tensor::full(vec![2], f64::INFINITY));
    let res = grad_check(&mut params, |p, tape| {
        let x = tape.param(p, "x")?;
        Ok(tape.sum(x))
    }, &GradCheckOptions::default());
    assert!(matches!(res, Err(Error::GradCheck(_))));
}
