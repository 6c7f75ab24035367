//! Dense f64 kernels. Every kernel hands whole output rows to workers and
//! accumulates within a row sequentially, so outputs are bit-identical
//! across thread counts and with the sequential fallback.

use ndarray::Array2;

use crate::parallel;

/// `a (m,k) · b (k,p) -> (m,p)`.
pub fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (k2, p) = b.dim();
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = Array2::zeros((m, p));
    let a_s = a.as_slice().expect("standard layout");
    let b_s = b.as_slice().expect("standard layout");
    parallel::for_each_row(out.as_slice_mut().unwrap(), p, |i, row| {
        for kk in 0..k {
            let av = a_s[i * k + kk];
            let brow = &b_s[kk * p..kk * p + p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a^T (m,k) · b (m,p) -> (k,p)`; the reduction over `m` runs sequentially
/// inside each output row.
pub fn at_b(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (m2, p) = b.dim();
    assert_eq!(m, m2, "at_b outer dims {m} vs {m2}");
    let mut out = Array2::zeros((k, p));
    let a_s = a.as_slice().expect("standard layout");
    let b_s = b.as_slice().expect("standard layout");
    parallel::for_each_row(out.as_slice_mut().unwrap(), p, |i, row| {
        for mm in 0..m {
            let av = a_s[mm * k + i];
            let brow = &b_s[mm * p..mm * p + p];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    });
    out
}

/// `a (m,k) · b^T (p,k) -> (m,p)`.
pub fn a_bt(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (m, k) = a.dim();
    let (p, k2) = b.dim();
    assert_eq!(k, k2, "a_bt inner dims {k} vs {k2}");
    let mut out = Array2::zeros((m, p));
    let a_s = a.as_slice().expect("standard layout");
    let b_s = b.as_slice().expect("standard layout");
    parallel::for_each_row(out.as_slice_mut().unwrap(), p, |i, row| {
        let arow = &a_s[i * k..i * k + k];
        for (j, o) in row.iter_mut().enumerate() {
            let brow = &b_s[j * k..j * k + k];
            let mut acc = 0.0;
            for (av, bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    });
    out
}

/// `dst += scale * src`.
pub fn add_scaled(dst: &mut Array2<f64>, src: &Array2<f64>, scale: f64) {
    debug_assert_eq!(dst.dim(), src.dim());
    for (d, s) in dst.iter_mut().zip(src.iter()) {
        *d += scale * s;
    }
}

/// Copy the `head`-th `dh`-wide column block of `x (rows, heads*dh)` into a
/// contiguous `(rows, dh)` matrix.
pub fn head_block(x: &Array2<f64>, head: usize, dh: usize) -> Array2<f64> {
    let rows = x.nrows();
    let mut out = Array2::zeros((rows, dh));
    for r in 0..rows {
        for c in 0..dh {
            out[(r, c)] = x[(r, head * dh + c)];
        }
    }
    out
}

/// Add `block (rows, dh)` back into the `head`-th column block of `x`.
pub fn add_head_block(x: &mut Array2<f64>, block: &Array2<f64>, head: usize, dh: usize) {
    let rows = x.nrows();
    for r in 0..rows {
        for c in 0..dh {
            x[(r, head * dh + c)] += block[(r, c)];
        }
    }
}

/// Row-wise softmax in place.
pub fn softmax_rows(x: &mut Array2<f64>) {
    let p = x.ncols();
    parallel::for_each_row(x.as_slice_mut().unwrap(), p, |_, row| {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matmul_small() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        let b = array![[5.0, 6.0], [7.0, 8.0]];
        assert_eq!(matmul(&a, &b), array![[19.0, 22.0], [43.0, 50.0]]);
        assert_eq!(at_b(&a, &b), array![[26.0, 30.0], [38.0, 44.0]]);
        assert_eq!(a_bt(&a, &b), array![[17.0, 23.0], [39.0, 53.0]]);
    }

    #[test]
    fn parallel_matches_sequential_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(11);
        let a = Array2::from_shape_fn((33, 17), |_| rng.random_range(-1.0..1.0));
        let b = Array2::from_shape_fn((17, 29), |_| rng.random_range(-1.0..1.0));
        let par = matmul(&a, &b);
        crate::parallel::set_parallel(false);
        let seq = matmul(&a, &b);
        crate::parallel::set_parallel(true);
        assert!(par.iter().zip(seq.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn softmax_rows_are_distributions() {
        let mut x = array![[1.0, 2.0, 3.0], [-5.0, 0.0, 5.0]];
        softmax_rows(&mut x);
        for row in x.rows() {
            let sum: f64 = row.sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v > 0.0));
        }
    }
}
