//! Dense f64 matrix kernels with a fixed accumulation order.
//!
//! Every kernel accumulates each output element strictly along ascending
//! inner index. Because one output row never reads another, a row of the
//! result is bitwise identical no matter how many rows are computed in the
//! same call — the property the decoder's query independence rests on.

/// c[m×n] += a[m×k] · b[k×n]
pub fn gemm_nn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Two-row blocking reuses each row of b for two rows of a. The per-row
    // sum order (t ascending) is identical to the unblocked loop.
    let mut i = 0;
    while i + 2 <= m {
        let (a0, a1) = (&a[i * k..(i + 1) * k], &a[(i + 1) * k..(i + 2) * k]);
        let (c0, c1) = c[i * n..(i + 2) * n].split_at_mut(n);
        for t in 0..k {
            let (x0, x1) = (a0[t], a1[t]);
            let br = &b[t * n..(t + 1) * n];
            for ((y0, y1), &bv) in c0.iter_mut().zip(c1.iter_mut()).zip(br) {
                *y0 += x0 * bv;
                *y1 += x1 * bv;
            }
        }
        i += 2;
    }
    if i < m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for (t, &x) in ar.iter().enumerate() {
            let br = &b[t * n..(t + 1) * n];
            for (y, &bv) in cr.iter_mut().zip(br) {
                *y += x * bv;
            }
        }
    }
}

/// c[m×n] += a[m×k] · b[n×k]ᵀ  (rows of `b` are the contraction vectors)
pub fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for (j, y) in cr.iter_mut().enumerate() {
            *y += dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// c[m×n] += a[k×m]ᵀ · b[k×n]
pub fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for t in 0..k {
        let ar = &a[t * m..(t + 1) * m];
        let br = &b[t * n..(t + 1) * n];
        for (i, &x) in ar.iter().enumerate() {
            let cr = &mut c[i * n..(i + 1) * n];
            for (y, &bv) in cr.iter_mut().zip(br) {
                *y += x * bv;
            }
        }
    }
}

/// Dot product with four-way partial sums. The split is a fixed function of
/// the vector length, so the result does not depend on the caller.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = 0.0;
    for o in chunks * 4..a.len() {
        tail += a[o] * b[o];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    c[i * n + j] += a[i * k + t] * b[t * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn nn_matches_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn_acc(m, k, n, &a, &b, &mut c);
        let want = naive_nn(m, k, n, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn nt_and_tn_match_naive() {
        let (m, k, n) = (4, 6, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.13).sin()).collect();
        let bt: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.29).cos()).collect();
        // b[t*n+j] = bt[j*k+t]
        let mut b = vec![0.0; k * n];
        for t in 0..k {
            for j in 0..n {
                b[t * n + j] = bt[j * k + t];
            }
        }
        let want = naive_nn(m, k, n, &a, &b);
        let mut c = vec![0.0; m * n];
        gemm_nt_acc(m, k, n, &a, &bt, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // aᵀ-form: out[m×n] = at[k×m]ᵀ · b[k×n]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for t in 0..k {
                at[t * m + i] = a[i * k + t];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm_tn_acc(m, k, n, &at, &b, &mut c2);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn row_results_do_not_depend_on_row_count() {
        let (m, k, n) = (9, 31, 17);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.0917).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.0471).cos()).collect();
        let mut full = vec![0.0; m * n];
        gemm_nn_acc(m, k, n, &a, &b, &mut full);
        for i in 0..m {
            let mut single = vec![0.0; n];
            gemm_nn_acc(1, k, n, &a[i * k..(i + 1) * k], &b, &mut single);
            assert_eq!(&full[i * n..(i + 1) * n], &single[..], "row {i} differs");
        }
    }
}
