use proptest::prelude::*;

use super::gradcheck::{check_gradients, relative_error};
use super::*;
use crate::error::Error;
use crate::rng::{normal_vec, stream, Stream};

fn randn(seed: u64, shape: &[usize]) -> Tensor {
    let mut rng = stream(seed, Stream::Probe);
    let n = shape.iter().product();
    Tensor::new(shape, normal_vec(&mut rng, n, 1.0)).unwrap()
}

fn probs(seed: u64, rows: usize, cols: usize) -> Vec<f64> {
    let t = randn(seed, &[rows, cols]);
    let mut out = Vec::new();
    for r in 0..rows {
        let e: Vec<f64> = t.row(r).iter().map(|x| x.exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|x| x / s));
    }
    out
}

#[test]
fn matmul_identity_and_hand_arithmetic() {
    let mut g = Graph::new();
    let eye = g.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let col = g.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
    let out = g.matmul(eye, col).unwrap();
    assert_eq!(g.value(out), &[3.0, 4.0]);

    let row = g.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
    let out = g.matmul(row, col).unwrap();
    assert_eq!(g.value(out), &[11.0]);
    assert_eq!(g.shape(out), &[1, 1]);
}

#[test]
fn matmul_shape_mismatch_names_both_shapes() {
    let mut g = Graph::new();
    let a = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    let b = g.constant(&[2, 3], vec![0.0; 6]).unwrap();
    match g.matmul(a, b) {
        Err(Error::Dimension { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected dimension error, got {other:?}"),
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = randn(1, &[5, 7]);
    let b = randn(2, &[7, 3]);
    let report = check_gradients(&[a, b], 1e-5, |g, v| {
        let c = g.matmul(v[0], v[1])?;
        Ok(g.sum(c))
    })
    .unwrap();
    assert_eq!(report.checked, 35 + 21);
    assert!(report.max_rel_error < 1e-6, "{report:?}");
}

#[test]
fn elementwise_analytic_values() {
    let mut g = Graph::new();
    let x = g.constant(&[3], vec![0.0, -2.0, 1.0]).unwrap();
    let s = g.sigmoid(x);
    let t = g.tanh(x);
    assert_eq!(g.value(s)[0], 0.5);
    assert!((g.value(s)[1] - 0.11920292202211755).abs() < 1e-15);
    assert_eq!(g.value(t)[0], 0.0);
    let k = g.scale(x, 2.0);
    assert_eq!(g.value(k), &[0.0, -4.0, 2.0]);
}

#[test]
fn elementwise_shape_rules() {
    let mut g = Graph::new();
    let a = g.constant(&[2, 2], vec![1.0; 4]).unwrap();
    let b = g.constant(&[4], vec![1.0; 4]).unwrap();
    let s = g.constant(&[1], vec![3.0]).unwrap();
    assert!(matches!(g.add(a, b), Err(Error::Dimension { .. })));
    let y = g.mul(a, s).unwrap();
    assert_eq!(g.value(y), &[3.0; 4]);
    assert_eq!(g.shape(y), &[2, 2]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(&[2, 3], vec![0.0, 0.0, 0.0, 2f64.ln(), 0.0, f64::NEG_INFINITY]).unwrap();
    assert!(matches!(g.softmax_rows(x, 1.0), Err(Error::Numeric { .. })));

    let x = g.constant(&[1, 3], vec![0.0, 0.0, 0.0]).unwrap();
    let y = g.softmax_rows(x, 1.0).unwrap();
    for &p in g.value(y) {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }

    let x = g.constant(&[1, 2], vec![2f64.ln(), 0.0]).unwrap();
    let y = g.softmax_rows(x, 1.0).unwrap();
    assert!((g.value(y)[0] - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.value(y)[1] - 1.0 / 3.0).abs() < 1e-15);

    let x = g.input(&[4, 9], randn(3, &[4, 9]).into_data(), false).unwrap();
    let y = g.softmax_rows(x, 1e6).unwrap();
    let dev = g.value(y).iter().map(|p| (p - 1.0 / 9.0).abs()).fold(0.0, f64::max);
    assert!(dev < 1e-5, "deviation {dev}");

    assert!(matches!(g.softmax_rows(x, 0.0), Err(Error::Usage(_))));
}

#[test]
fn causal_softmax_zeroes_future() {
    let mut g = Graph::new();
    let x = g.input(&[3, 3], randn(4, &[3, 3]).into_data(), false).unwrap();
    let y = g.causal_softmax_rows(x).unwrap();
    let v = g.value(y);
    assert_eq!(v[0], 1.0);
    assert_eq!(&v[1..3], &[0.0, 0.0]);
    assert_eq!(v[5], 0.0);
    assert!((v[3] + v[4] - 1.0).abs() < 1e-15);
}

fn oracle_ce(logits: &Tensor, labels: &[i64]) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for (t, &y) in labels.iter().enumerate() {
        if y == IGNORE_INDEX {
            continue;
        }
        let row = logits.row(t);
        let z: f64 = row.iter().map(|x| x.exp()).sum();
        total += -(row[y as usize].exp() / z).ln();
        n += 1;
    }
    total / n as f64
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let mut data = vec![0.0; 3 * 4];
    for (t, y) in [1usize, 3, 0].iter().enumerate() {
        data[t * 4 + y] = 20.0;
    }
    let logits = g.constant(&[3, 4], data).unwrap();
    let l = g.masked_cross_entropy(logits, &[1, 3, 0]).unwrap();
    assert!(g.scalar(l.loss) < 1e-8);

    let empty = g.masked_cross_entropy(logits, &[IGNORE_INDEX; 3]).unwrap();
    assert!(empty.is_empty());
    assert_eq!(g.scalar(empty.loss), 0.0);

    assert!(matches!(g.masked_cross_entropy(logits, &[4, 0, 0]), Err(Error::Data(_))));
    assert!(matches!(g.masked_cross_entropy(logits, &[-3, 0, 0]), Err(Error::Data(_))));

    let t = randn(5, &[4, 8]);
    let labels = [IGNORE_INDEX, 6, IGNORE_INDEX, 2];
    let x = g.tensor(&t);
    let l = g.masked_cross_entropy(x, &labels).unwrap();
    assert_eq!(l.count, 2);
    assert!((g.scalar(l.loss) - oracle_ce(&t, &labels)).abs() < 1e-10);
}

#[test]
fn cross_entropy_with_margin_twenty() {
    // Literal case: correct logit +20 above the others, three classes.
    let mut g = Graph::new();
    let logits = g.constant(&[1, 3], vec![20.0, 0.0, 0.0]).unwrap();
    let l = g.masked_cross_entropy(logits, &[0]).unwrap();
    assert!(g.scalar(l.loss) < 1e-8);
}

fn oracle_kl(p: &[f64], q: &[f64]) -> f64 {
    let mut s = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        if a > 0.0 {
            s += a * (a.ln() - b.ln());
        }
    }
    s
}

#[test]
fn kl_examples() {
    let mut g = Graph::new();
    let p = g.constant(&[2, 3], probs(6, 2, 3)).unwrap();
    let k = g.kl_rows(p, p).unwrap();
    assert_eq!(g.value(k), &[0.0, 0.0]);

    let p = g.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
    let q = g.constant(&[1, 2], vec![0.5, 0.5]).unwrap();
    let k = g.kl_rows(p, q).unwrap();
    assert!((g.value(k)[0] - 2f64.ln()).abs() < 1e-15);

    let pd = probs(7, 5, 6);
    let qd = probs(8, 5, 6);
    let p = g.constant(&[5, 6], pd.clone()).unwrap();
    let q = g.constant(&[5, 6], qd.clone()).unwrap();
    let k = g.kl_rows(p, q).unwrap();
    for r in 0..5 {
        let want = oracle_kl(&pd[r * 6..(r + 1) * 6], &qd[r * 6..(r + 1) * 6]);
        assert!((g.value(k)[r] - want).abs() < 1e-12);
    }

    // q with an exact zero where p > 0 is clamped, never NaN
    let p = g.constant(&[1, 2], vec![0.5, 0.5]).unwrap();
    let q = g.constant(&[1, 2], vec![1.0, 0.0]).unwrap();
    let k = g.kl_rows(p, q).unwrap();
    assert!(g.value(k)[0].is_finite());
}

#[test]
fn detach_blocks_gradient() {
    let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap().into_param();
    let w = Tensor::new(&[3], vec![0.3, 0.7, -1.1]).unwrap().into_param();
    let mut g = Graph::new();
    let xv = g.tensor(&x);
    let wv = g.tensor(&w);
    let y = g.detach(xv);
    assert!(g.is_detached(y));
    assert_eq!(g.value(y), x.data());
    let p = g.mul(y, wv).unwrap();
    let loss = g.sum(p);
    let grads = g.backward(loss).unwrap();
    assert!(grads.for_tensor(&x).is_none());
    assert_eq!(grads.for_tensor(&w).unwrap(), x.data());

    let c = g.constant(&[2], vec![0.1, f64::MIN_POSITIVE]).unwrap();
    let d = g.detach(c);
    assert!(g.value(d).iter().zip(g.value(c)).all(|(a, b)| a.to_bits() == b.to_bits()));

    // loss built only from a detached branch: nothing to propagate
    let only = g.detach(xv);
    let s = g.sum(only);
    let grads = g.backward(s).unwrap();
    assert!(grads.for_tensor(&x).is_none());
    assert!(grads.for_tensor(&w).is_none());
}

#[test]
fn backward_examples() {
    let mut x = Tensor::scalar(3.0).into_param();
    {
        let mut g = Graph::new();
        let v = g.tensor(&x);
        let sq = g.mul(v, v).unwrap();
        let grads = g.backward(sq).unwrap();
        assert_eq!(grads.for_tensor(&x).unwrap(), &[6.0]);
        grads.accumulate_into(&mut x).unwrap();
    }
    // a second backward without zeroing accumulates
    {
        let x2 = x.clone();
        let mut g = Graph::new();
        let v = g.tensor(&x2);
        let sq = g.mul(v, v).unwrap();
        let grads = g.backward(sq).unwrap();
        x.accumulate_grad(grads.for_tensor(&x2).unwrap()).unwrap();
    }
    assert_eq!(x.grad().unwrap(), &[12.0]);

    let mut g = Graph::new();
    let v = g.input(&[2], vec![1.0, 2.0], true).unwrap();
    assert!(matches!(g.backward(v), Err(Error::Usage(_))));
    let bad = g.input(&[1], vec![f64::NAN], true).unwrap();
    assert!(matches!(g.backward(bad), Err(Error::Numeric { .. })));
}

const TOL: f64 = 1e-4;

#[test]
fn gradcheck_elementwise_family() {
    let a = randn(10, &[3, 4]);
    let b = randn(11, &[3, 4]);
    let s = randn(12, &[1]);
    let r = check_gradients(&[a, b, s], 1e-5, |g, v| {
        let x = g.add(v[0], v[1])?;
        let y = g.mul(x, v[1])?;
        let z = g.sub(y, v[0])?;
        let t = g.tanh(z);
        let u = g.sigmoid(v[0]);
        let w = g.silu(v[1]);
        let k = g.mul(t, v[2])?;
        let m = g.add(k, u)?;
        let m = g.mul(m, w)?;
        let m = g.scale(m, 0.7);
        Ok(g.sum(m))
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn gradcheck_matmul_bt_and_softmax() {
    let a = randn(13, &[4, 5]);
    let b = randn(14, &[3, 5]);
    let w = randn(15, &[4, 3]);
    let r = check_gradients(&[a, b, w], 1e-5, |g, v| {
        let c = g.matmul_bt(v[0], v[1])?;
        let p = g.softmax_rows(c, 2.0)?;
        let q = g.mul(p, v[2])?;
        Ok(g.sum(q))
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");

    let s = randn(16, &[4, 4]);
    let w = randn(17, &[4, 4]);
    let r = check_gradients(&[s, w], 1e-5, |g, v| {
        let p = g.causal_softmax_rows(v[0])?;
        let q = g.mul(p, v[1])?;
        Ok(g.sum(q))
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn gradcheck_norms_and_scaling() {
    let x = randn(18, &[3, 6]);
    let gain = randn(19, &[6]);
    let rows = randn(20, &[3]);
    let w = randn(21, &[3, 6]);
    let r = check_gradients(&[x, gain, rows, w], 1e-5, |g, v| {
        let n = g.rms_norm_rows(v[0], 1e-6);
        let n = g.scale_cols(n, v[1])?;
        let d = g.normalize_rows(v[0], 1e-8);
        let d = g.scale_rows(d, v[2])?;
        let s = g.add(n, d)?;
        let s = g.mul(s, v[3])?;
        Ok(g.sum(s))
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn gradcheck_structural_ops() {
    let x = randn(22, &[4, 6]);
    let row = randn(23, &[6]);
    let w = randn(24, &[3, 6]);
    let r = check_gradients(&[x, row, w], 1e-5, |g, v| {
        let gathered = g.gather_rows(v[0], &[3, 0, 3])?;
        let left = g.slice_cols(gathered, 0, 2)?;
        let right = g.slice_cols(gathered, 2, 4)?;
        let joined = g.concat_cols(&[right, left])?;
        let injected = g.add_row_masked(joined, v[1], &[true, false, true])?;
        let flat = g.reshape(injected, &[18])?;
        let shaped = g.reshape(flat, &[3, 6])?;
        let out = g.mul(shaped, v[2])?;
        Ok(g.mean(out))
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn gradcheck_losses() {
    let logits = randn(25, &[5, 7]);
    let r = check_gradients(&[logits], 1e-5, |g, v| {
        Ok(g.masked_cross_entropy(v[0], &[IGNORE_INDEX, 3, 6, IGNORE_INDEX, 0])?.loss)
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");

    let a = randn(26, &[3, 5]);
    let b = randn(27, &[3, 5]);
    let r = check_gradients(&[a, b], 1e-5, |g, v| {
        let p = g.softmax_rows(v[0], 2.0)?;
        let q = g.softmax_rows(v[1], 2.0)?;
        let k = g.kl_rows(p, q)?;
        Ok(g.sum(k))
    })
    .unwrap();
    assert!(r.passes(TOL), "{r:?}");
}

#[test]
fn identical_inputs_give_bitwise_identical_gradients() {
    let run = || {
        let a = randn(30, &[4, 5]);
        let b = randn(31, &[5, 3]).into_param();
        let mut g = Graph::new();
        let av = g.input(a.shape(), a.data().to_vec(), true).unwrap();
        let bv = g.tensor(&b);
        let c = g.matmul(av, bv).unwrap();
        let c = g.tanh(c);
        let l = g.masked_cross_entropy(c, &[0, 2, IGNORE_INDEX, 1]).unwrap();
        let grads = g.backward(l.loss).unwrap();
        (g.scalar(l.loss), grads.for_tensor(&b).unwrap().to_vec())
    };
    let (l1, g1) = run();
    let (l2, g2) = run();
    assert_eq!(l1.to_bits(), l2.to_bits());
    assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
}

#[test]
fn relative_error_helper_is_symmetric() {
    assert_eq!(relative_error(1.0, 2.0), relative_error(2.0, 1.0));
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(data in prop::collection::vec(-50.0f64..50.0, 12), tau in 0.05f64..20.0) {
        let mut g = Graph::new();
        let x = g.constant(&[3, 4], data).unwrap();
        let y = g.softmax_rows(x, tau).unwrap();
        for r in 0..3 {
            let s: f64 = g.value(y)[r * 4..(r + 1) * 4].iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn kl_is_nonnegative(a in prop::collection::vec(-30.0f64..30.0, 10), b in prop::collection::vec(-30.0f64..30.0, 10)) {
        let mut g = Graph::new();
        let x = g.constant(&[2, 5], a).unwrap();
        let y = g.constant(&[2, 5], b).unwrap();
        let p = g.softmax_rows(x, 1.0).unwrap();
        let q = g.softmax_rows(y, 1.0).unwrap();
        let k = g.kl_rows(p, q).unwrap();
        for &v in g.value(k) {
            prop_assert!(v >= -1e-12);
        }
    }
}
