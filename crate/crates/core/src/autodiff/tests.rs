use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::error::MptError;

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
    }
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::new();
    let i = g.constant(Tensor::matrix(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap());
    let b = g.constant(Tensor::matrix(&[&[2.0, 3.0], &[4.0, 5.0]]).unwrap());
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.data(c), &[2.0, 3.0, 4.0, 5.0]);

    let r = g.constant(Tensor::matrix(&[&[1.0, 2.0]]).unwrap());
    let col = g.constant(Tensor::matrix(&[&[3.0], &[4.0]]).unwrap());
    let d = g.matmul(r, col).unwrap();
    assert_eq!(g.shape(d), &[1, 1]);
    assert_eq!(g.data(d), &[11.0]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, MptError::Dimension { .. }));
    assert!(msg.contains("[2, 3]"), "{msg}");
}

#[test]
fn matmul_gradcheck_random() {
    let a = random(&[3, 4], 1);
    let b = random(&[4, 2], 2);
    let report = gradcheck(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            let c2 = g.mul(c, c)?;
            Ok(g.sum(c2))
        },
        &[a, b],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn batched_matmul_broadcast_gradcheck() {
    let a = random(&[2, 3, 4], 3);
    let b = random(&[4, 5], 4);
    let report = gradcheck(
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            let c = g.mul(c, c)?;
            Ok(g.sum(c))
        },
        &[a, b],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(&[0.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert_eq!(g.data(y), &[0.5, 0.5]);

    let x = g.constant(Tensor::vector(&[1000.0, 0.0]));
    let y = g.softmax(x, 0).unwrap();
    assert!(g.data(y).iter().all(|v| v.is_finite()));
    assert!((g.data(y)[0] - 1.0).abs() < 1e-12);
    assert!(g.data(y)[1] < 1e-300);

    let x = g.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
    let y = g.softmax(x, 0).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    let want: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp() / z).collect();
    close(g.data(y), &want, 1e-12);
}

#[test]
fn softmax_invalid_axis() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.softmax(x, 2), Err(MptError::Dimension { .. })));
}

#[test]
fn softmax_gradcheck_on_inner_axis() {
    let x = random(&[2, 3, 4], 5);
    let w = random(&[2, 3, 4], 6);
    let report = gradcheck(
        |g, v| {
            let s = g.softmax(v[0], 1)?;
            let p = g.mul(s, v[1])?;
            Ok(g.sum(p))
        },
        &[x, w],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn layernorm_examples() {
    let mut g = Graph::new();
    let one = g.constant(Tensor::vector(&[1.0, 1.0]));
    let zero = g.constant(Tensor::vector(&[0.0, 0.0]));
    let x = g.constant(Tensor::vector(&[3.0, 3.0]));
    let y = g.layernorm(x, one, zero, 0, 1e-5).unwrap();
    assert_eq!(g.data(y), &[0.0, 0.0]);

    let x = g.constant(Tensor::vector(&[1.0, 3.0]));
    let y = g.layernorm(x, one, zero, 0, 0.0).unwrap();
    assert_eq!(g.data(y), &[-1.0, 1.0]);
}

#[test]
fn layernorm_rejects_mismatched_gain() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[2, 3]));
    let gain = g.constant(Tensor::zeros(&[2]));
    let bias = g.constant(Tensor::zeros(&[3]));
    assert!(g.layernorm(x, gain, bias, 1, 1e-5).is_err());
    assert!(g.layernorm(x, bias, bias, 4, 1e-5).is_err());
}

#[test]
fn layernorm_gradcheck() {
    let x = random(&[2, 5], 7);
    let gain = random(&[5], 8);
    let bias = random(&[5], 9);
    let w = random(&[2, 5], 10);
    let report = gradcheck(
        |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 1, 1e-5)?;
            let y = g.mul(y, v[3])?;
            Ok(g.sum(y))
        },
        &[x, gain, bias, w],
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn layernorm_gradcheck_leading_axis() {
    let x = random(&[4, 3], 11);
    let gain = random(&[4], 12);
    let bias = random(&[4], 13);
    let w = random(&[4, 3], 14);
    let report = gradcheck(
        |g, v| {
            let y = g.layernorm(v[0], v[1], v[2], 0, 1e-5)?;
            let y = g.mul(y, v[3])?;
            Ok(g.sum(y))
        },
        &[x, gain, bias, w],
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn elementwise_examples() {
    let mut g = Graph::new();
    let a = g.constant(Tensor::vector(&[1.0, 2.0]));
    let b = g.constant(Tensor::vector(&[3.0, 4.0]));
    let c = g.add(a, b).unwrap();
    assert_eq!(g.data(c), &[4.0, 6.0]);
    let r = g.constant(Tensor::vector(&[-1.0, 2.0]));
    let r = g.relu(r);
    assert_eq!(g.data(r), &[0.0, 2.0]);
    let s = g.constant(Tensor::vector(&[2.0, 4.0]));
    let s = g.scale(s, 0.5);
    assert_eq!(g.data(s), &[1.0, 2.0]);

    let m = g.constant(Tensor::zeros(&[2, 3]));
    let bad = g.constant(Tensor::zeros(&[2]));
    assert!(matches!(g.add(m, bad), Err(MptError::Dimension { .. })));
    let row = g.constant(Tensor::vector(&[1.0, 2.0, 3.0]));
    let bc = g.add(m, row).unwrap();
    assert_eq!(g.data(bc), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
}

#[test]
fn relu_passes_gradient_only_where_positive() {
    let mut g = Graph::new();
    let x = g.param(Tensor::vector(&[-1.0, 2.0, 0.5]));
    let y = g.relu(x);
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0, 1.0]);
}

#[test]
fn elementwise_gradcheck() {
    let a = random(&[3, 4], 15);
    let b = random(&[4], 16);
    let s = random(&[3], 17);
    let report = gradcheck(
        |g, v| {
            let x = g.add(v[0], v[1])?;
            let y = g.mul(x, v[1])?;
            let y = g.scale_by_element(y, v[2], 1)?;
            let y = g.relu(y);
            let y = g.scale(y, 1.7);
            let y = g.mul(y, y)?;
            Ok(g.sum(y))
        },
        &[a, b, s],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

#[test]
fn embed_examples() {
    let mut g = Graph::new();
    let table = g.param(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap());
    let e = g.embed(&[0], table).unwrap();
    assert_eq!(g.data(e), &[1.0, 2.0]);
    assert!(matches!(
        g.embed(&[2], table),
        Err(MptError::Vocabulary { index: 2, vocab: 2 })
    ));

    let e = g.embed(&[1, 1], table).unwrap();
    let w = g.constant(Tensor::matrix(&[&[1.0, 10.0], &[100.0, 1000.0]]).unwrap());
    let y = g.mul(e, w).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(table).unwrap(), &[0.0, 0.0, 101.0, 1010.0]);
}

#[test]
fn dropout_contracts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::new();
    let x = g.constant(random(&[4, 8], 18));
    assert_eq!(g.dropout(x, 0.0, true, &mut rng).unwrap(), x);
    assert_eq!(g.dropout(x, 0.1, false, &mut rng).unwrap(), x);
    assert!(matches!(
        g.dropout(x, 1.0, true, &mut rng),
        Err(MptError::Config(_))
    ));

    let mut r1 = ChaCha8Rng::seed_from_u64(42);
    let mut r2 = ChaCha8Rng::seed_from_u64(42);
    let a = g.dropout(x, 0.5, true, &mut r1).unwrap();
    let b = g.dropout(x, 0.5, true, &mut r2).unwrap();
    assert_eq!(g.data(a), g.data(b));
    let src = g.data(x).to_vec();
    for (o, s) in g.data(a).iter().zip(&src) {
        assert!(*o == 0.0 || (*o - 2.0 * s).abs() < 1e-15);
    }
}

#[test]
fn slice_concat_round_trip_gradcheck() {
    let x = random(&[3, 6], 19);
    let report = gradcheck(
        |g, v| {
            let a = g.slice_cols(v[0], 0, 2)?;
            let b = g.slice_cols(v[0], 2, 4)?;
            let c = g.concat_cols(&[b, a])?;
            let c = g.mul(c, c)?;
            let t = g.transpose(c)?;
            let r = g.reshape(t, &[18])?;
            let r = g.mul(r, r)?;
            Ok(g.sum(r))
        },
        &[x],
        1e-5,
        1e-5,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

/// Independent scalar attention for one sequence and one head.
fn naive_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], causal: bool) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let n = if causal { i + 1 } else { k.len() };
            let logits: Vec<f64> = (0..n)
                .map(|j| qi.iter().zip(&k[j]).map(|(a, b)| a * b).sum::<f64>() / d.sqrt())
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            let mut out = vec![0.0; v[0].len()];
            for (j, l) in logits.iter().enumerate() {
                let p = (l - m).exp() / z;
                for (o, vv) in out.iter_mut().zip(&v[j]) {
                    *o += p * vv;
                }
            }
            out
        })
        .collect()
}

fn rows_of(t: &Tensor, start: usize, len: usize, c0: usize, w: usize) -> Vec<Vec<f64>> {
    (start..start + len)
        .map(|r| t.row(r)[c0..c0 + w].to_vec())
        .collect()
}

#[test]
fn packed_attention_matches_naive_per_segment_and_head() {
    let (q, k, v) = (random(&[7, 4], 20), random(&[9, 4], 21), random(&[9, 6], 22));
    let pairs = [
        AttnPair { q_start: 0, q_len: 3, k_start: 0, k_len: 5 },
        AttnPair { q_start: 3, q_len: 4, k_start: 5, k_len: 4 },
    ];
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.packed_attention(qv, kv, vv, 2, &pairs, false).unwrap();
    let out = g.value(out).clone();
    for p in &pairs {
        for h in 0..2 {
            let want = naive_attention(
                &rows_of(&q, p.q_start, p.q_len, h * 2, 2),
                &rows_of(&k, p.k_start, p.k_len, h * 2, 2),
                &rows_of(&v, p.k_start, p.k_len, h * 3, 3),
                false,
            );
            let got = rows_of(&out, p.q_start, p.q_len, h * 3, 3);
            for (a, b) in got.iter().zip(&want) {
                close(a, b, 1e-12);
            }
        }
    }
}

#[test]
fn packed_causal_attention_matches_naive() {
    let (q, k, v) = (random(&[5, 4], 23), random(&[5, 4], 24), random(&[5, 4], 25));
    let pairs = [AttnPair { q_start: 0, q_len: 5, k_start: 0, k_len: 5 }];
    let mut g = Graph::new();
    let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
    let out = g.packed_attention(qv, kv, vv, 1, &pairs, true).unwrap();
    let want = naive_attention(
        &rows_of(&q, 0, 5, 0, 4),
        &rows_of(&k, 0, 5, 0, 4),
        &rows_of(&v, 0, 5, 0, 4),
        true,
    );
    for (r, w) in want.iter().enumerate() {
        close(g.value(out).row(r), w, 1e-12);
    }
}

#[test]
fn packed_attention_gradcheck() {
    let pairs = vec![
        AttnPair { q_start: 0, q_len: 2, k_start: 0, k_len: 3 },
        AttnPair { q_start: 2, q_len: 3, k_start: 0, k_len: 3 },
    ];
    let causal_pairs = vec![AttnPair { q_start: 0, q_len: 3, k_start: 0, k_len: 3 }];
    for (causal, pairs, tq) in [(false, pairs, 5), (true, causal_pairs, 3)] {
        let inputs = [
            random(&[tq, 4], 26),
            random(&[3, 4], 27),
            random(&[3, 4], 28),
            random(&[tq, 4], 29),
        ];
        let report = gradcheck(
            |g, v| {
                let o = g.packed_attention(v[0], v[1], v[2], 2, &pairs, causal)?;
                let o = g.mul(o, v[3])?;
                Ok(g.sum(o))
            },
            &inputs,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(report.passed, "causal={causal}: {report:?}");
    }
}

#[test]
fn smoothed_cross_entropy_gradcheck_and_padding() {
    let logits = random(&[4, 5], 30);
    let targets = [Some(1), None, Some(4), Some(0)];
    let report = gradcheck(
        |g, v| g.smoothed_cross_entropy(v[0], &targets, 0.1),
        &[logits],
        1e-5,
        1e-6,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");

    let mut g = Graph::new();
    let l = g.constant(Tensor::zeros(&[2, 3]));
    assert!(matches!(
        g.smoothed_cross_entropy(l, &[None, None], 0.1),
        Err(MptError::Contract(_))
    ));
}

#[test]
fn gradcheck_square_sum_and_contracts() {
    let x = Tensor::vector(&[1.0, 2.0]);
    let f = |g: &mut Graph, v: &[Var]| {
        let y = g.mul(v[0], v[0])?;
        Ok(g.sum(y))
    };
    let report = gradcheck(f, std::slice::from_ref(&x), 1e-5, 1e-8).unwrap();
    assert!(report.passed);

    let mut g = Graph::new();
    let xv = g.param(x.clone());
    let y = g.mul(xv, xv).unwrap();
    let s = g.sum(y);
    g.backward(s).unwrap();
    assert_eq!(g.grad(xv).unwrap(), &[2.0, 4.0]);

    // vector-valued function is a contract error
    let err = gradcheck(|g, v| g.mul(v[0], v[0]), std::slice::from_ref(&x), 1e-5, 1e-8).unwrap_err();
    assert!(matches!(err, MptError::Contract(_)));

    // tol = 0 on a function with truncation error fails without raising
    let report = gradcheck(
        |g, v| {
            let s = g.softmax(v[0], 0)?;
            let s = g.mul(s, s)?;
            Ok(g.sum(s))
        },
        &[Tensor::vector(&[0.3, -1.2, 2.0])],
        1e-5,
        0.0,
    )
    .unwrap();
    assert!(!report.passed);
}

#[test]
fn shared_leaf_gradient_is_sum_of_untied_copies() {
    let w = random(&[3, 3], 31);
    let x = random(&[2, 3], 32);
    let build = |g: &mut Graph, w1: Var, w2: Var, x: Var| -> Var {
        let h = g.matmul(x, w1).unwrap();
        let h = g.relu(h);
        let h = g.matmul(h, w2).unwrap();
        let h = g.mul(h, h).unwrap();
        g.sum(h)
    };
    let mut tied = Graph::new();
    let wv = tied.param(w.clone());
    let xv = tied.constant(x.clone());
    let out = build(&mut tied, wv, wv, xv);
    tied.backward(out).unwrap();

    let mut untied = Graph::new();
    let w1 = untied.param(w.clone());
    let w2 = untied.param(w.clone());
    let xv = untied.constant(x);
    let out2 = build(&mut untied, w1, w2, xv);
    untied.backward(out2).unwrap();
    assert_eq!(tied.value(out).data, untied.value(out2).data);
    let summed: Vec<f64> = untied
        .grad(w1)
        .unwrap()
        .iter()
        .zip(untied.grad(w2).unwrap())
        .map(|(a, b)| a + b)
        .collect();
    for (a, b) in tied.grad(wv).unwrap().iter().zip(&summed) {
        assert!(relative_error(*a, *b) <= 1e-12);
    }
}

#[test]
fn tape_replay_is_bit_identical() {
    let run = || {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = g.param(random(&[4, 4], 33));
        let y = g.matmul(x, x).unwrap();
        let y = g.dropout(y, 0.3, true, &mut rng).unwrap();
        let y = g.softmax(y, 1).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        (g.data(y).to_vec(), g.grad(x).unwrap().to_vec())
    };
    assert_eq!(run(), run());
}

#[test]
fn backward_requires_scalar() {
    let mut g = Graph::new();
    let x = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(x), Err(MptError::Contract(_))));
}

#[test]
fn tensor_shape_invariant() {
    assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
    assert!(Tensor::new(vec![2, 0], vec![]).is_err());
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(values in prop::collection::vec(-50.0f64..50.0, 12)) {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![3, 4], values).unwrap());
        for axis in 0..2 {
            let y = g.softmax(x, axis).unwrap();
            let t = g.value(y).clone();
            let (outer, len, inner) = if axis == 0 { (1, 3, 4) } else { (3, 4, 1) };
            for o in 0..outer {
                for i in 0..inner {
                    let s: f64 = (0..len).map(|a| t.data[o * len * inner + a * inner + i]).sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12);
                }
            }
            prop_assert!(t.data.iter().all(|v| *v >= 0.0));
        }
    }
}

#[test]
fn gradcheck_steps_around_kinks() {
    // relu(x)^2 + 3 relu(x) with x a step-size away from the kink on either side
    let f = |g: &mut Graph, v: &[Var]| {
        let r = g.relu(v[0]);
        let sq = g.mul(r, r)?;
        let lin = g.scale(r, 3.0);
        let y = g.add(sq, lin)?;
        Ok(g.sum(y))
    };
    let x = Tensor::vector(&[1.5e-4, -1.5e-4, 0.5e-4, 0.7]);
    let report = gradcheck(f, &[x], 1e-4, 1e-5).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.inputs[0].max_abs_err < 1e-10);
}
