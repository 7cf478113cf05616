//! Raw row-major kernels shared by the forward and backward passes.
//!
//! Every output element accumulates its terms in ascending inner-index
//! order, independent of how many rows are computed. Row subsets therefore
//! produce bit-identical results to the full computation, which the
//! selective layer relies on.

/// `a[m×k] · b[k×n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a[m×k]ᵀ · g[m×n]`, giving `k×n`.
pub fn matmul_at(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += aip * gv;
            }
        }
    }
    out
}

pub fn add_into(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|v| (v as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64 * 0.71).cos()).collect();
        let want = naive(&a, &b, m, k, n);
        assert_eq!(matmul(&a, &b, m, k, n), want);
        let bt = transpose(&b, k, n);
        assert_eq!(matmul_bt(&a, &bt, m, k, n), want);
        let at = transpose(&a, m, k);
        assert_eq!(matmul_at(&at, &b, k, m, n), want);
    }

    #[test]
    fn row_subset_matches_full_product_bitwise() {
        let (m, k, n) = (6, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|v| (v as f64 * 1.3).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|v| (v as f64 * 0.2).cos()).collect();
        let full = matmul(&a, &b, m, k, n);
        let sub = matmul(&a[2 * k..4 * k], &b, 2, k, n);
        assert_eq!(&full[2 * n..4 * n], &sub[..]);
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-3.0, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
