//! Dense matmul kernels.
//!
//! Three layouts cover every use in the autodiff tape without materialising
//! transposes: `nn` for forward products, `nt`/`tn` for the two backward
//! products. All kernels walk the output row-by-row with an inner contiguous
//! accumulation loop, which the compiler vectorises at opt-level 3.
//!
//! Parallelism splits output rows into contiguous chunks, one per thread.
//! Each output element is still produced by one thread as one serial
//! reduction, so results are bit-identical for every thread count.

use std::sync::OnceLock;

use crate::error::{Error, Result};

use super::tensor::{Scalar, Tensor};

/// Worker count for row-partitioned kernels. Reads `HSEQ_THREADS` once per
/// process; unset, empty, or unparsable values mean 1.
pub fn thread_count() -> usize {
    static COUNT: OnceLock<usize> = OnceLock::new();
    *COUNT.get_or_init(|| {
        std::env::var("HSEQ_THREADS")
            .ok()
            .and_then(|v| v.trim().parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

/// Run `f(row_start, row_end, out_chunk)` over contiguous row chunks of
/// `out`, possibly on multiple threads. Chunk boundaries depend only on
/// `rows` and `thread_count()`, never on timing.
fn for_row_chunks<S: Scalar>(
    out: &mut [S],
    rows: usize,
    cols: usize,
    f: impl Fn(usize, usize, &mut [S]) + Sync,
) {
    let threads = thread_count().min(rows.max(1));
    if threads <= 1 {
        f(0, rows, out);
        return;
    }
    let chunk_rows = rows.div_ceil(threads);
    std::thread::scope(|scope| {
        let f = &f;
        let mut rest = out;
        let mut start = 0;
        while start < rows {
            let end = (start + chunk_rows).min(rows);
            let (head, tail) = rest.split_at_mut((end - start) * cols);
            rest = tail;
            scope.spawn(move || f(start, end, head));
            start = end;
        }
    });
}

fn check_2d<'a, S: Scalar>(op: &'static str, t: &'a Tensor<S>) -> Result<(&'a [S], usize, usize)> {
    match t.shape() {
        [r, c] => Ok((t.data(), *r, *c)),
        _ => Err(Error::Shape {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        }),
    }
}

/// `C = A @ B` for `A: [m,k]`, `B: [k,n]`.
pub fn matmul_nn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ad, m, k) = check_2d("matmul_nn", a)?;
    let (bd, kb, n) = check_2d("matmul_nn", b)?;
    if k != kb {
        return Err(Error::shape("matmul_nn", a.shape(), b.shape()));
    }
    let mut out = vec![S::ZERO; m * n];
    for_row_chunks(&mut out, m, n, |r0, r1, chunk| {
        // ikj order: the inner j-loop is a contiguous axpy over the C row.
        for i in r0..r1 {
            let crow = &mut chunk[(i - r0) * n..(i - r0 + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for j in 0..n {
                    crow[j] += aip * brow[j];
                }
            }
        }
    });
    Tensor::new(&[m, n], out)
}

/// `C = A @ B^T` for `A: [m,k]`, `B: [n,k]`.
pub fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ad, m, k) = check_2d("matmul_nt", a)?;
    let (bd, n, kb) = check_2d("matmul_nt", b)?;
    if k != kb {
        return Err(Error::shape("matmul_nt", a.shape(), b.shape()));
    }
    let mut out = vec![S::ZERO; m * n];
    for_row_chunks(&mut out, m, n, |r0, r1, chunk| {
        // Both operands are walked along contiguous length-k rows.
        for i in r0..r1 {
            let arow = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &bd[j * k..(j + 1) * k];
                let mut acc = S::ZERO;
                for p in 0..k {
                    acc += arow[p] * brow[p];
                }
                chunk[(i - r0) * n + j] = acc;
            }
        }
    });
    Tensor::new(&[m, n], out)
}

/// `C = A^T @ B` for `A: [k,m]`, `B: [k,n]`.
pub fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ad, k, m) = check_2d("matmul_tn", a)?;
    let (bd, kb, n) = check_2d("matmul_tn", b)?;
    if k != kb {
        return Err(Error::shape("matmul_tn", a.shape(), b.shape()));
    }
    let mut out = vec![S::ZERO; m * n];
    for_row_chunks(&mut out, m, n, |r0, r1, chunk| {
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            for i in r0..r1 {
                let api = ad[p * m + i];
                let crow = &mut chunk[(i - r0) * n..(i - r0 + 1) * n];
                for j in 0..n {
                    crow[j] += api * brow[j];
                }
            }
        }
    });
    Tensor::new(&[m, n], out)
}
