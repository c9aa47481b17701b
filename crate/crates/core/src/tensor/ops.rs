// Raw numeric kernels shared by the forward and backward passes.

use super::axis_split;

/// `c[m×p] += a[m×n] · b[n×p]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let c_row = &mut c[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[k * p..(k + 1) * p];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×p] += a[m×n] · b[p×n]ᵀ`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..p {
            let b_row = &b[j * n..(j + 1) * n];
            c[i * p + j] += a_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `c[n×p] += a[m×n]ᵀ · b[m×p]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let b_row = &b[i * p..(i + 1) * p];
        for k in 0..n {
            let av = a[i * n + k];
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[k * p..(k + 1) * p];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Visits every 1-D lane along `axis`, passing the flat indices of its elements.
pub(crate) fn for_each_lane(shape: &[usize], axis: usize, mut f: impl FnMut(&[usize])) {
    let (outer, n, inner) = axis_split(shape, axis);
    let mut idx = vec![0usize; n];
    for o in 0..outer {
        for r in 0..inner {
            for (i, slot) in idx.iter_mut().enumerate() {
                *slot = (o * n + i) * inner + r;
            }
            f(&idx);
        }
    }
}

pub(crate) fn softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for_each_lane(shape, axis, |idx| {
        let max = idx.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for &i in idx {
            let e = (x[i] - max).exp();
            out[i] = e;
            total += e;
        }
        for &i in idx {
            out[i] /= total;
        }
    });
    out
}

pub(crate) fn log_softmax(x: &[f64], shape: &[usize], axis: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for_each_lane(shape, axis, |idx| {
        let max = idx.iter().map(|&i| x[i]).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + idx.iter().map(|&i| (x[i] - max).exp()).sum::<f64>().ln();
        for &i in idx {
            out[i] = x[i] - lse;
        }
    });
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_products_agree_with_plain_matmul() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = vec![0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        let bt = transpose(&b, 3, 2);
        let mut c2 = vec![0.0; 4];
        matmul_bt_acc(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c, c2);
        let at = transpose(&a, 2, 3);
        let mut c3 = vec![0.0; 4];
        matmul_at_acc(&at, &b, &mut c3, 3, 2, 2);
        assert_eq!(c, c3);
    }

    #[test]
    fn lanes_cover_axis_zero() {
        let mut seen = Vec::new();
        for_each_lane(&[2, 3], 0, |idx| seen.push(idx.to_vec()));
        assert_eq!(seen, vec![vec![0, 3], vec![1, 4], vec![2, 5]]);
    }
}
