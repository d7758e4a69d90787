//! Dense f64 kernels.
//!
//! Every kernel accumulates (`out +=`) and sums its contraction index in
//! ascending order, so results are bit-deterministic and identical between
//! the taped forward pass and the incremental decode path. Inner loops run
//! over contiguous rows so LLVM can vectorize them without reassociating
//! floating-point sums.

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    }
}

/// `out[k×n] += aᵀ[k×m] · b[m×n]` with `a` given as `[m×k]`.
pub fn matmul_at_b_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_il * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · bᵀ[k×n]` with `b` given as `[n×k]`.
pub fn matmul_a_bt_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    matmul_acc(a, &bt, m, k, n, out);
}

/// Returns `aᵀ` for `a: [rows×cols]`.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), rows * cols);
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// In-place stabilized softmax of one row; returns nothing, writes probs.
pub fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// log(Σ exp(row)) with max-subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}
