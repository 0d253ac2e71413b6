//! Finite-difference checks for every differentiable primitive.
//!
//! Each case builds a small graph ending in a scalar, then compares tape
//! gradients against central differences in f64. Shapes are randomized per
//! run but kept small; tolerance is 1e-5 relative everywhere.

use hseq_core::numerics::{grad_check, BoolMat, Tensor, DEFAULT_FD_STEP};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

const TOL: f64 = 1e-5;

fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

fn rand_tensor(r: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.gen_range(-1.5..1.5)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Positive-valued tensor, for sqrt and friends.
fn rand_pos_tensor(r: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| r.gen_range(0.2..2.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn check<F>(params: &[Tensor<f64>], f: F)
where
    F: Fn(
        &mut hseq_core::numerics::Tape<f64>,
        &[hseq_core::numerics::ValueId],
    ) -> hseq_core::Result<hseq_core::numerics::ValueId>,
{
    let err = grad_check(params, DEFAULT_FD_STEP, f).expect("grad_check failed to run");
    assert!(err < TOL, "max relative error {err} >= {TOL}");
}

#[test]
fn add_sub_mul() {
    let mut r = rng(11);
    for _ in 0..3 {
        let rows = r.gen_range(1..=32);
        let cols = r.gen_range(1..=32);
        let a = rand_tensor(&mut r, &[rows, cols]);
        let b = rand_tensor(&mut r, &[rows, cols]);
        check(&[a, b], |t, ids| {
            let s = t.add(ids[0], ids[1])?;
            let d = t.sub(s, ids[1])?;
            let m = t.mul(d, ids[1])?;
            t.mean_all(m)
        });
    }
}

#[test]
fn scalar_ops() {
    let mut r = rng(12);
    let a = rand_tensor(&mut r, &[7, 5]);
    check(&[a], |t, ids| {
        let x = t.add_scalar(ids[0], 0.7)?;
        let y = t.mul_scalar(x, -1.3)?;
        let sq = t.mul(y, y)?;
        t.sum_all(sq)
    });
}

#[test]
fn bias_broadcast_over_rows() {
    let mut r = rng(24);
    let x = rand_tensor(&mut r, &[9, 6]);
    let b = rand_tensor(&mut r, &[6]);
    check(&[x, b], |t, ids| {
        let y = t.add_bias(ids[0], ids[1])?;
        let sq = t.mul(y, y)?;
        t.mean_all(sq)
    });
}

#[test]
fn matmul_random_5x7_by_7x3() {
    let mut r = rng(13);
    let a = rand_tensor(&mut r, &[5, 7]);
    let b = rand_tensor(&mut r, &[7, 3]);
    let err = grad_check(&[a, b], DEFAULT_FD_STEP, |t, ids| {
        let c = t.matmul(ids[0], ids[1])?;
        let sq = t.mul(c, c)?;
        t.sum_all(sq)
    })
    .unwrap();
    assert!(err < 1e-6, "matmul rel err {err}");
}

#[test]
fn transpose_and_reshape() {
    let mut r = rng(14);
    let a = rand_tensor(&mut r, &[6, 4]);
    check(&[a], |t, ids| {
        let tr = t.transpose(ids[0])?;
        let rs = t.reshape(tr, &[2, 12])?;
        let sq = t.mul(rs, rs)?;
        t.mean_all(sq)
    });
}

#[test]
fn slice_and_concat_rows() {
    let mut r = rng(15);
    let a = rand_tensor(&mut r, &[9, 3]);
    let b = rand_tensor(&mut r, &[4, 3]);
    check(&[a, b], |t, ids| {
        let head = t.slice_rows(ids[0], 0, 5)?;
        let mid = t.slice_rows(ids[0], 2, 6)?;
        let cat = t.concat_rows(&[head, ids[1], mid])?;
        let sq = t.mul(cat, cat)?;
        t.mean_all(sq)
    });
}

#[test]
fn slice_and_concat_cols() {
    let mut r = rng(16);
    let a = rand_tensor(&mut r, &[5, 8]);
    check(&[a], |t, ids| {
        let left = t.slice_cols(ids[0], 0, 3)?;
        let right = t.slice_cols(ids[0], 3, 8)?;
        let swapped = t.concat_cols(&[right, left])?;
        let sq = t.mul(swapped, swapped)?;
        t.sum_all(sq)
    });
}

#[test]
fn reductions_feed_downstream() {
    let mut r = rng(17);
    let a = rand_tensor(&mut r, &[4, 4]);
    check(&[a], |t, ids| {
        let sq = t.mul(ids[0], ids[0])?;
        let m = t.mean_all(sq)?;
        let s = t.sum_all(ids[0])?;
        let prod = t.mul(m, s)?;
        t.sum_all(prod)
    });
}

#[test]
fn exp_sigmoid_silu_sqrt() {
    let mut r = rng(18);
    let a = rand_tensor(&mut r, &[6, 6]);
    check(&[a.clone()], |t, ids| {
        let e = t.exp(ids[0])?;
        t.mean_all(e)
    });
    check(&[a.clone()], |t, ids| {
        let s = t.sigmoid(ids[0])?;
        t.mean_all(s)
    });
    check(&[a], |t, ids| {
        let s = t.silu(ids[0])?;
        t.mean_all(s)
    });
    let p = rand_pos_tensor(&mut r, &[6, 6]);
    check(&[p], |t, ids| {
        let s = t.sqrt(ids[0])?;
        t.mean_all(s)
    });
}

#[test]
fn gather_rows_and_embedding() {
    let mut r = rng(19);
    let table = rand_tensor(&mut r, &[10, 4]);
    let ids: Vec<usize> = (0..7).map(|_| r.gen_range(0..10)).collect();
    check(&[table], move |t, p| {
        let g = t.embedding(p[0], &ids)?;
        let sq = t.mul(g, g)?;
        t.mean_all(sq)
    });
}

#[test]
fn softmax_masked_random_mask() {
    let mut r = rng(20);
    for _ in 0..3 {
        let n = r.gen_range(2..=8);
        let scores = rand_tensor(&mut r, &[n, n]);
        let mut mask = BoolMat::new_false(n, n);
        for i in 0..n {
            mask.set(i, i, true);
            for j in 0..n {
                if r.gen_bool(0.6) {
                    mask.set(i, j, true);
                }
            }
        }
        let weights = rand_tensor(&mut r, &[n, n]);
        check(&[scores], move |t, ids| {
            let p = t.softmax_masked(ids[0], &mask)?;
            let w = t.leaf(weights.clone());
            let wp = t.mul(p, w)?;
            t.sum_all(wp)
        });
    }
}

#[test]
fn rms_norm_with_gain() {
    let mut r = rng(21);
    let x = rand_tensor(&mut r, &[5, 8]);
    let gain = rand_tensor(&mut r, &[8]);
    check(&[x, gain], |t, ids| {
        let n = t.rms_norm(ids[0], ids[1], 1e-5)?;
        let sq = t.mul(n, n)?;
        t.mean_all(sq)
    });
}

#[test]
fn rope_rotation() {
    let mut r = rng(22);
    let x = rand_tensor(&mut r, &[4, 8]);
    let angles: Vec<f64> = (0..16).map(|_| r.gen_range(-3.0..3.0)).collect();
    let cos: Vec<f64> = angles.iter().map(|a| a.cos()).collect();
    let sin: Vec<f64> = angles.iter().map(|a| a.sin()).collect();
    let weights = rand_tensor(&mut r, &[4, 8]);
    check(&[x], move |t, ids| {
        let rot = t.rope(ids[0], &cos, &sin)?;
        let w = t.leaf(weights.clone());
        let wr = t.mul(rot, w)?;
        t.sum_all(wr)
    });
}

#[test]
fn cross_entropy_integer_targets() {
    let mut r = rng(23);
    let logits = rand_tensor(&mut r, &[6, 9]);
    let targets: Vec<usize> = (0..6).map(|_| r.gen_range(0..9)).collect();
    check(&[logits], move |t, ids| t.cross_entropy(ids[0], &targets));
}

#[test]
fn closed_form_sum_of_squares() {
    // f = sum(x^2) at [1,2,3]: analytic gradient [2,4,6].
    let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let mut tape = hseq_core::numerics::Tape::new();
    let id = tape.leaf(x.clone().with_grad());
    let sq = tape.mul(id, id).unwrap();
    let loss = tape.sum_all(sq).unwrap();
    let grads = tape.backward(loss).unwrap();
    assert_eq!(grads.get(id).unwrap().data(), &[2.0, 4.0, 6.0]);
    let err = grad_check(&[x], DEFAULT_FD_STEP, |t, ids| {
        let sq = t.mul(ids[0], ids[0])?;
        t.sum_all(sq)
    })
    .unwrap();
    assert!(err < 1e-7, "rel err {err}");
}

#[test]
fn constant_function_has_zero_error() {
    let x = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
    let err = grad_check(&[x], DEFAULT_FD_STEP, |t, _ids| {
        let c = t.leaf(Tensor::scalar(4.0));
        // Loss never touches the parameter.
        t.sum_all(c)
    })
    .unwrap();
    assert_eq!(err, 0.0);
}
