//! Small dense kernels. All matrices are row-major slices.

/// `c[m,n] += a[m,p] * b[p,n]`
pub(super) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * p..(i + 1) * p];
        // four rows of b per pass so each c element is loaded and stored once per four products
        let mut k = 0;
        while k + 4 <= p {
            let (a0, a1, a2, a3) = (a_row[k], a_row[k + 1], a_row[k + 2], a_row[k + 3]);
            let b0 = &b[k * n..(k + 1) * n];
            let b1 = &b[(k + 1) * n..(k + 2) * n];
            let b2 = &b[(k + 2) * n..(k + 3) * n];
            let b3 = &b[(k + 3) * n..(k + 4) * n];
            for ((((cv, &x0), &x1), &x2), &x3) in c_row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *cv += a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
            k += 4;
        }
        for k in k..p {
            let aik = a_row[k];
            for (cv, &bv) in c_row.iter_mut().zip(&b[k * n..(k + 1) * n]) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m,p] += a[m,n] * b[p,n]^T`
pub(super) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for (k, cv) in c[i * p..(i + 1) * p].iter_mut().enumerate() {
            *cv += dot(a_row, &b[k * n..(k + 1) * n]);
        }
    }
}

/// `c[p,n] += a[m,p]^T * b[m,n]`
pub(super) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, p: usize, n: usize) {
    let mut i = 0;
    while i + 4 <= m {
        let b0 = &b[i * n..(i + 1) * n];
        let b1 = &b[(i + 1) * n..(i + 2) * n];
        let b2 = &b[(i + 2) * n..(i + 3) * n];
        let b3 = &b[(i + 3) * n..(i + 4) * n];
        for k in 0..p {
            let (a0, a1, a2, a3) = (a[i * p + k], a[(i + 1) * p + k], a[(i + 2) * p + k], a[(i + 3) * p + k]);
            let c_row = &mut c[k * n..(k + 1) * n];
            for ((((cv, &x0), &x1), &x2), &x3) in c_row.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *cv += a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
        }
        i += 4;
    }
    for i in i..m {
        let b_row = &b[i * n..(i + 1) * n];
        for k in 0..p {
            let aik = a[i * p + k];
            for (cv, &bv) in c[k * n..(k + 1) * n].iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

pub(super) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for j in 0..4 {
            acc[j] += x[j] * y[j];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `tanh` through one `exp`; saturates cleanly for large `|x|`.
fn fast_tanh(x: f64) -> f64 {
    if x.abs() < 0.1 {
        return x.tanh();
    }
    1.0 - 2.0 / ((2.0 * x).exp() + 1.0)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// tanh approximation of GELU.
pub(super) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

pub(super) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fast_tanh(u);
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-major strides of `shape`.
pub(super) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Calls `f(out, src)` for every output position of `permute(shape, axes)`,
/// in output order, with the matching input position.
pub(super) fn for_each_permuted(shape: &[usize], axes: &[usize], mut f: impl FnMut(usize, usize)) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total: usize = shape.iter().product();
    let rank = out_shape.len();
    if total == 0 {
        return;
    }
    // innermost axis handled as a run
    let (inner_len, inner_stride) = (out_shape[rank - 1], src_strides[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    let mut out = 0usize;
    while out < total {
        for j in 0..inner_len {
            f(out + j, cur + j * inner_stride);
        }
        out += inner_len;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            cur += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            cur -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, -1.0, 2.0, 0.5, 1.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_nn(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, [1.0 - 2.0 + 1.5, 4.0 + 3.0, 4.0 - 5.0 + 3.0, 10.0 + 6.0]);

        // a * b^T where b^T is 3x2 stored as 2x3
        let bt = [1.0, -1.0, 0.5, 0.0, 2.0, 1.0];
        let mut c2 = [0.0; 4];
        gemm_nt(&a, &bt, &mut c2, 2, 2, 3);
        assert_eq!(c, c2);

        // a^T (3x2) * [2x2]
        let mut c3 = [0.0; 6];
        gemm_tn(&a, &[1.0, 0.0, 0.0, 1.0], &mut c3, 2, 3, 2);
        assert_eq!(c3, [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn permute_visits_sources_in_output_order() {
        // 2x3 -> 3x2
        let mut seen = Vec::new();
        for_each_permuted(&[2, 3], &[1, 0], |o, s| seen.push((o, s)));
        assert_eq!(seen, vec![(0, 0), (1, 3), (2, 1), (3, 4), (4, 2), (5, 5)]);
    }

    #[test]
    fn gemm_handles_unrolled_and_tail_parts() {
        let (m, p, n) = (6, 7, 5);
        let a: Vec<f64> = (0..m * p).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..p * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, p, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..p).map(|k| a[i * p + k] * b[k * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-12);
            }
        }
        // a^T a through gemm_tn against the explicit sum
        let mut ata = vec![0.0; p * p];
        gemm_tn(&a, &a, &mut ata, m, p, p);
        for x in 0..p {
            for y in 0..p {
                let want: f64 = (0..m).map(|i| a[i * p + x] * a[i * p + y]).sum();
                assert!((ata[x * p + y] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fast_tanh_is_accurate() {
        for i in -400..=400 {
            let x = i as f64 * 0.05;
            assert!((fast_tanh(x) - x.tanh()).abs() < 1e-14, "{x}");
        }
        assert_eq!(fast_tanh(1e3), 1.0);
        assert_eq!(fast_tanh(-1e3), -1.0);
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
