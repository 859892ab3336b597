// Raw row-major loops shared by the tape's forward and backward passes.
// Summation order is fixed by the loop nesting, which keeps every result
// reproducible bit-for-bit.

/// `out[n,m] += a[n,p] * b[p,m]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, p: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        let a_row = &a[i * p..(i + 1) * p];
        for (k, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[k * m..(k + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

/// `out[n,p] += a[n,m] * b[p,m]^T`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], n: usize, m: usize, p: usize) {
    for i in 0..n {
        let a_row = &a[i * m..(i + 1) * m];
        for k in 0..p {
            let b_row = &b[k * m..(k + 1) * m];
            out[i * p + k] += dot(a_row, b_row);
        }
    }
}

/// `out[p,m] += a[n,p]^T * b[n,m]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, p: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * p..(i + 1) * p];
        let b_row = &b[i * m..(i + 1) * m];
        for (k, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[k * m..(k + 1) * m];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four independent partial sums let the compiler vectorise while the
    // combination order stays fixed.
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ta.iter().zip(tb) {
        s += x * y;
    }
    s
}

pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Valid (unpadded) dilated 1D convolution.
/// `x[b, n_in, cin]`, `w[k, cin, cout]` -> `out[b, n_out, cout]`,
/// `n_out = n_in - (k-1)*d`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub k: usize,
    pub dilation: usize,
    pub cin: usize,
    pub cout: usize,
}

pub(crate) fn conv1d_forward(x: &[f64], w: &[f64], out: &mut [f64], d: &ConvDims) {
    for b in 0..d.batch {
        for i in 0..d.n_out {
            let out_row = &mut out[(b * d.n_out + i) * d.cout..(b * d.n_out + i + 1) * d.cout];
            for j in 0..d.k {
                let pos = b * d.n_in + i + j * d.dilation;
                let x_row = &x[pos * d.cin..(pos + 1) * d.cin];
                for (m, &xv) in x_row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let w_row = &w[(j * d.cin + m) * d.cout..(j * d.cin + m + 1) * d.cout];
                    axpy(xv, w_row, out_row);
                }
            }
        }
    }
}

pub(crate) fn conv1d_backward_input(gout: &[f64], w: &[f64], gx: &mut [f64], d: &ConvDims) {
    for b in 0..d.batch {
        for i in 0..d.n_out {
            let g_row = &gout[(b * d.n_out + i) * d.cout..(b * d.n_out + i + 1) * d.cout];
            for j in 0..d.k {
                let pos = b * d.n_in + i + j * d.dilation;
                for m in 0..d.cin {
                    let w_row = &w[(j * d.cin + m) * d.cout..(j * d.cin + m + 1) * d.cout];
                    gx[pos * d.cin + m] += dot(w_row, g_row);
                }
            }
        }
    }
}

pub(crate) fn conv1d_backward_weight(gout: &[f64], x: &[f64], gw: &mut [f64], d: &ConvDims) {
    for b in 0..d.batch {
        for i in 0..d.n_out {
            let g_row = &gout[(b * d.n_out + i) * d.cout..(b * d.n_out + i + 1) * d.cout];
            for j in 0..d.k {
                let pos = b * d.n_in + i + j * d.dilation;
                let x_row = &x[pos * d.cin..(pos + 1) * d.cin];
                for (m, &xv) in x_row.iter().enumerate() {
                    if xv == 0.0 {
                        continue;
                    }
                    let gw_row = &mut gw[(j * d.cin + m) * d.cout..(j * d.cin + m + 1) * d.cout];
                    axpy(xv, g_row, gw_row);
                }
            }
        }
    }
}

/// Per-channel dilated filter: `w[k, c]`, `cin == cout == c`.
pub(crate) fn depthwise_forward(x: &[f64], w: &[f64], out: &mut [f64], d: &ConvDims) {
    let c = d.cin;
    for b in 0..d.batch {
        for i in 0..d.n_out {
            let out_row = &mut out[(b * d.n_out + i) * c..(b * d.n_out + i + 1) * c];
            for j in 0..d.k {
                let pos = b * d.n_in + i + j * d.dilation;
                let x_row = &x[pos * c..(pos + 1) * c];
                let w_row = &w[j * c..(j + 1) * c];
                for ((o, &xv), &wv) in out_row.iter_mut().zip(x_row).zip(w_row) {
                    *o += wv * xv;
                }
            }
        }
    }
}

pub(crate) fn depthwise_backward(
    gout: &[f64],
    x: &[f64],
    w: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    d: &ConvDims,
) {
    let c = d.cin;
    if let Some(gx) = gx {
        for b in 0..d.batch {
            for i in 0..d.n_out {
                let g_row = &gout[(b * d.n_out + i) * c..(b * d.n_out + i + 1) * c];
                for j in 0..d.k {
                    let pos = b * d.n_in + i + j * d.dilation;
                    let gx_row = &mut gx[pos * c..(pos + 1) * c];
                    let w_row = &w[j * c..(j + 1) * c];
                    for ((gxv, &gv), &wv) in gx_row.iter_mut().zip(g_row).zip(w_row) {
                        *gxv += wv * gv;
                    }
                }
            }
        }
    }
    if let Some(gw) = gw {
        for b in 0..d.batch {
            for i in 0..d.n_out {
                let g_row = &gout[(b * d.n_out + i) * c..(b * d.n_out + i + 1) * c];
                for j in 0..d.k {
                    let pos = b * d.n_in + i + j * d.dilation;
                    let x_row = &x[pos * c..(pos + 1) * c];
                    let gw_row = &mut gw[j * c..(j + 1) * c];
                    for ((gwv, &gv), &xv) in gw_row.iter_mut().zip(g_row).zip(x_row) {
                        *gwv += xv * gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (n, p, m) = (3, 4, 5);
        let a: Vec<f64> = (0..n * p).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..p * m).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut out = vec![0.0; n * m];
        gemm_nn(&a, &b, &mut out, n, p, m);
        for i in 0..n {
            for j in 0..m {
                let want: f64 = (0..p).map(|k| a[i * p + k] * b[k * m + j]).sum();
                assert!((out[i * m + j] - want).abs() < 1e-12);
            }
        }
        // a * (b^T)^T via gemm_nt with bt = b^T [m, p]
        let bt: Vec<f64> = (0..m * p).map(|idx| b[(idx % p) * m + idx / p]).collect();
        let mut out2 = vec![0.0; n * m];
        gemm_nt(&a, &bt, &mut out2, n, p, m);
        for (x, y) in out.iter().zip(&out2) {
            assert!((x - y).abs() < 1e-12);
        }
        // a^T * c
        let c: Vec<f64> = (0..n * m).map(|i| i as f64 - 4.0).collect();
        let mut out3 = vec![0.0; p * m];
        gemm_tn(&a, &c, &mut out3, n, p, m);
        for k in 0..p {
            for j in 0..m {
                let want: f64 = (0..n).map(|i| a[i * p + k] * c[i * m + j]).sum();
                assert!((out3[k * m + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dot_handles_tails() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert_eq!(dot(&a, &a), 140.0);
    }
}
