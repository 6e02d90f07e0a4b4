//! Dense matrix kernels on row-major slices. All kernels accumulate into `c`.

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let ci = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let bp = &b[p * n..(p + 1) * n];
            for (cv, bv) in ci.iter_mut().zip(bp) {
                *cv += aip * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for i in 0..m {
        let ai = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let bj = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in ai.iter().zip(bj) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    for p in 0..k {
        let ap = &a[p * m..(p + 1) * m];
        let bp = &b[p * n..(p + 1) * n];
        for (i, &api) in ap.iter().enumerate() {
            if api == 0.0 {
                continue;
            }
            let ci = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in ci.iter_mut().zip(bp) {
                *cv += api * bv;
            }
        }
    }
}
