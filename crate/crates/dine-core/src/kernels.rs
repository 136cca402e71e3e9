//! Dense matrix kernels shared by the tape operations.
//!
//! Matrices are row-major `f64` slices. Large products are split into
//! fixed-size row chunks; the chunk boundaries are identical whether the
//! chunks run on the rayon pool or on one thread, and every output element
//! is accumulated by exactly one GEMM call, so results are bit-identical
//! across the `parallel` feature and any thread count.

use std::sync::atomic::{AtomicBool, Ordering};

#[cfg(feature = "parallel")]
use rayon::prelude::*;

static PARALLEL: AtomicBool = AtomicBool::new(cfg!(feature = "parallel"));

/// Rows per GEMM chunk. Fixed so chunking never depends on the runtime mode.
const CHUNK_ROWS: usize = 64;

/// Minimum multiply count before chunked dispatch is worth the overhead.
const MIN_PAR_FLOPS: usize = 64 * 1024;

/// Enable or disable the rayon dispatch at runtime. Returns the previous
/// value. Has no effect when the crate is built without the `parallel`
/// feature (the flag is then always false).
pub fn set_parallel(enabled: bool) -> bool {
    if cfg!(feature = "parallel") {
        PARALLEL.swap(enabled, Ordering::Relaxed)
    } else {
        false
    }
}

pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel") && PARALLEL.load(Ordering::Relaxed)
}

fn dgemm_chunk(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
) {
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// C[m,n] = A[m,k] . B[k,n], all row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_rows(a, k as isize, 1, b, n as isize, 1, &mut c, m, k, n, k);
    c
}

/// C[m,n] = A[m,k] . B^T where B is stored row-major as [n,k].
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm_rows(a, k as isize, 1, b, 1, k as isize, &mut c, m, k, n, k);
    c
}

/// C[m,n] = A^T . B where A is stored row-major as [k,m] and B as [k,n].
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // A^T has row stride 1 and column stride m; chunking rows of C walks
    // columns of A, so pass a_row_elems = 1 to advance one column per row.
    gemm_rows(a, 1, m as isize, b, n as isize, 1, &mut c, m, k, n, 1);
    c
}

#[allow(clippy::too_many_arguments)]
fn gemm_rows(
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    a_row_elems: usize,
) {
    let work = m * k * n;
    let chunks: Vec<(usize, usize)> = (0..m)
        .step_by(CHUNK_ROWS)
        .map(|r0| (r0, (r0 + CHUNK_ROWS).min(m)))
        .collect();

    let run = |((r0, r1), c_chunk): ((usize, usize), &mut [f64])| {
        let a_off = r0 * a_row_elems;
        dgemm_chunk(r1 - r0, k, n, &a[a_off..], rsa, csa, b, rsb, csb, c_chunk);
    };

    #[cfg(feature = "parallel")]
    if parallel_enabled() && work >= MIN_PAR_FLOPS && chunks.len() > 1 {
        let bounds: Vec<usize> = chunks.iter().map(|&(r0, r1)| (r1 - r0) * n).collect();
        let mut slices = Vec::with_capacity(chunks.len());
        let mut rest = c;
        for len in bounds {
            let (head, tail) = rest.split_at_mut(len);
            slices.push(head);
            rest = tail;
        }
        chunks
            .par_iter()
            .copied()
            .zip(slices.into_par_iter())
            .for_each(run);
        return;
    }

    let mut offset = 0;
    for &(r0, r1) in &chunks {
        let len = (r1 - r0) * n;
        run(((r0, r1), &mut c[offset..offset + len]));
        offset += len;
    }
    let _ = work;
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                for j in 0..n {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        let c = matmul(&a, &b, m, k, n);
        let expect = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_variants_match() {
        let (m, k, n) = (4, 6, 3);
        let a: Vec<f64> = (0..m * k).map(|i| 0.1 * i as f64 - 1.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| 0.05 * i as f64 + 0.5).collect();
        let c = matmul(&a, &b, m, k, n);

        // B^T stored as [n,k]
        let mut bt = vec![0.0; k * n];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let c_nt = matmul_nt(&a, &bt, m, k, n);

        // A^T stored as [k,m]
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let c_tn = matmul_tn(&at, &b, m, k, n);

        for idx in 0..m * n {
            assert!((c[idx] - c_nt[idx]).abs() < 1e-12);
            assert!((c[idx] - c_tn[idx]).abs() < 1e-12);
        }
    }

    #[test]
    fn parallel_and_sequential_are_bit_identical() {
        let (m, k, n) = (300, 41, 57);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 53) % 89) as f64 / 89.0 - 0.5).collect();
        let was = set_parallel(true);
        let c_par = matmul(&a, &b, m, k, n);
        set_parallel(false);
        let c_seq = matmul(&a, &b, m, k, n);
        set_parallel(was);
        assert_eq!(c_par, c_seq);
    }
}
