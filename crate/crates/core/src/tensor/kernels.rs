//! Raw numeric kernels over row-major slices, shared by the graph operations.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn mm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn mm_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    // Transposing first lets the inner loop run over contiguous output rows.
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    mm_acc(a, &bt, out, m, k, n);
}

/// `out[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn mm_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn check_matmul(a: &[usize], b: &[usize]) -> Result<(usize, usize, usize)> {
    if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
        return Err(Error::shape("matmul", a, b));
    }
    Ok((a[0], a[1], b[1]))
}

/// Plain matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k, n) = check_matmul(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); m * n];
    mm_acc(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Softmax of one row in place, with max subtraction.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Row-wise softmax over the last axis.
pub fn softmax_lastdim<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    let c = x.cols();
    if c > 0 {
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
    }
    out
}

/// Normalizes each last-axis vector to zero mean and unit variance (no affine).
/// Returns the normalized values together with per-row mean and reciprocal std.
pub(crate) fn normalize_rows<T: Scalar>(x: &[T], d: usize, eps: f64) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / d;
    let mut out = vec![T::zero(); x.len()];
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let dn = T::lit(d as f64);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let rstd = T::one() / (var + T::lit(eps)).sqrt();
        for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
            *o = (v - mean) * rstd;
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (out, means, rstds)
}

/// Indices of the `k` largest entries in descending value order; ties go to the lower index.
pub fn topk_slice<T: Scalar>(s: &[T], k: usize) -> Result<(Vec<usize>, Vec<T>)> {
    if k == 0 || k > s.len() {
        return Err(Error::Argument(format!(
            "top-k requires 1 <= k <= n, got k={k}, n={}",
            s.len()
        )));
    }
    let mut best: Vec<(usize, T)> = Vec::with_capacity(k + 1);
    for (i, &v) in s.iter().enumerate() {
        if v.is_nan() {
            return Err(Error::NonFinite {
                op: "topk",
                context: format!(" (NaN at index {i})"),
            });
        }
        if best.len() == k && v <= best[k - 1].1 {
            continue;
        }
        // Strict comparison keeps earlier (lower) indices ahead on ties.
        let pos = best.iter().position(|&(_, b)| v > b).unwrap_or(best.len());
        best.insert(pos, (i, v));
        best.truncate(k);
    }
    Ok(best.into_iter().unzip())
}

/// Top-k over a rank-1 tensor.
pub fn topk<T: Scalar>(s: &Tensor<T>, k: usize) -> Result<(Vec<usize>, Tensor<T>)> {
    if s.rank() != 1 {
        return Err(Error::Argument(format!(
            "topk expects a vector, got shape {:?}",
            s.shape()
        )));
    }
    let (idx, vals) = topk_slice(s.data(), k)?;
    Ok((idx, Tensor::vector(vals)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_examples() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let b = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(matmul(&id, &b).unwrap(), b);
        let r = matmul(&t(&[1, 2], &[1.0, 0.0]), &t(&[2, 1], &[2.0, 5.0])).unwrap();
        assert_eq!(r.data(), &[2.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (m, k, n) in [(3, 4, 2), (1, 1, 1), (5, 7, 3), (8, 2, 9)] {
            let a: Vec<f32> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
            let b: Vec<f32> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let got = matmul(&Tensor::new(vec![m, k], a.clone()).unwrap(), &Tensor::new(vec![k, n], b.clone()).unwrap())
                .unwrap();
            let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
            let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
            let want = naive(&a64, &b64, m, k, n);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((*g as f64 - w).abs() <= 1e-6 * w.abs().max(1.0));
            }
        }
    }

    #[test]
    fn transposed_products_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, k, n) = (4, 3, 5);
        let a: Vec<f64> = (0..m * k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let want = naive(&a, &b, m, k, n);
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut out = vec![0.0; m * n];
        mm_nt_acc(&a, &bt, &mut out, m, k, n);
        assert!(out.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut out = vec![0.0; m * n];
        mm_tn_acc(&at, &b, &mut out, m, k, n);
        assert!(out.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f32>::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_slice(&[0.9, 0.1, 0.5], 2).unwrap().0, vec![0, 2]);
        assert_eq!(topk_slice(&[0.5, 0.5, 0.1], 1).unwrap().0, vec![0]);
        assert_eq!(topk_slice(&[0.1, 0.5, 0.5, 0.5], 2).unwrap().0, vec![1, 2]);
        assert!(matches!(topk_slice(&[1.0, 2.0], 3), Err(Error::Argument(_))));
        assert!(matches!(topk_slice(&[1.0, 2.0], 0), Err(Error::Argument(_))));
        assert!(topk_slice(&[1.0, f64::NAN], 1).is_err());
        assert!(topk(&Tensor::<f64>::zeros(vec![2, 2]), 1).is_err());
    }

    fn sort_oracle(s: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    #[test]
    fn topk_matches_sort_on_uniform_draws() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let s: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
            assert_eq!(topk_slice(&s, 8).unwrap().0, sort_oracle(&s, 8));
        }
    }

    proptest! {
        #[test]
        fn topk_matches_sort_with_ties(s in prop::collection::vec(0u8..6, 1..40), k in 1usize..40) {
            let s: Vec<f64> = s.into_iter().map(f64::from).collect();
            let k = k.min(s.len());
            let (idx, vals) = topk_slice(&s, k).unwrap();
            prop_assert_eq!(&idx, &sort_oracle(&s, k));
            prop_assert!(idx.iter().zip(&vals).all(|(&i, &v)| s[i] == v));
            prop_assert_eq!(topk_slice(&s, k).unwrap().0, idx);
        }

        #[test]
        fn softmax_rows_sum_to_one(v in prop::collection::vec(-50.0f64..50.0, 1..20), c in -100.0f64..100.0) {
            let n = v.len();
            let x = Tensor::new(vec![1, n], v.clone()).unwrap();
            let p = softmax_lastdim(&x);
            prop_assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-6);
            let shifted = Tensor::new(vec![1, n], v.iter().map(|a| a + c).collect()).unwrap();
            let q = softmax_lastdim(&shifted);
            prop_assert!(p.data().iter().zip(q.data()).all(|(a, b)| (a - b).abs() < 1e-6));
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_lastdim(&t(&[1, 3], &[0.0, 0.0, 0.0]));
        assert!(p.data().iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
        let p = softmax_lastdim(&Tensor::new(vec![1, 2], vec![1000.0f32, 0.0]).unwrap());
        assert_eq!(p.data(), &[1.0, 0.0]);
    }

    #[test]
    fn normalize_examples() {
        let (y, _, _) = normalize_rows(&[3.0f64, 3.0, 3.0], 3, 1e-5);
        assert!(y.iter().all(|&v| v == 0.0));
        let (y, _, _) = normalize_rows(&[1.0f64, -1.0], 2, 1e-5);
        assert!((y[0] - 1.0).abs() < 1e-5 && (y[1] + 1.0).abs() < 1e-5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x: Vec<f64> = (0..16).map(|_| rng.random_range(-3.0..5.0)).collect();
        let (y, _, _) = normalize_rows(&x, 16, 1e-5);
        let mean = y.iter().sum::<f64>() / 16.0;
        let var = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0f64), 0.5);
        assert_eq!(sigmoid(-1000.0f64), 0.0);
        assert_eq!(sigmoid(1000.0f64), 1.0);
    }
}
