// Plain loops over row-major buffers. No SIMD, no threading.

/// `out = op(a) · op(b)` where `op` optionally transposes.
///
/// `a` is stored `ar × ac`, `b` is stored `br × bc`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    a: &[f64],
    ar: usize,
    ac: usize,
    ta: bool,
    b: &[f64],
    br: usize,
    bc: usize,
    tb: bool,
) -> (usize, usize, Vec<f64>) {
    let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
    let (k2, n) = if tb { (bc, br) } else { (br, bc) };
    debug_assert_eq!(k, k2);
    let mut out = vec![0.0; m * n];
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let orow = &mut out[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * ac + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * bc..(p + 1) * bc];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * ac..(i + 1) * ac];
                for j in 0..n {
                    let brow = &b[j * bc..(j + 1) * bc];
                    out[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let arow = &a[p * ac..(p + 1) * ac];
                let brow = &b[p * bc..(p + 1) * bc];
                for (i, &av) in arow.iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, &bv) in orow.iter_mut().zip(brow) {
                        *o += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * ac + i] * b[j * bc + p];
                    }
                    out[i * n + j] = s;
                }
            }
        }
    }
    (m, n, out)
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(exp(a) + exp(b))`.
#[inline]
pub fn logaddexp(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

pub fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut s = 0.0;
        for (o, &v) in orow.iter_mut().zip(xr) {
            *o = (v - m).exp();
            s += *o;
        }
        for o in orow.iter_mut() {
            *o /= s;
        }
    }
    out
}

pub fn log_softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let m = xr.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + xr.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
        for (o, &v) in out[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
            *o = v - lse;
        }
    }
    out
}

/// Gathers `K·C`-wide windows (stride `stride`, left padding `kernel/2`) into rows.
pub fn im2col(x: &[f64], t: usize, c: usize, kernel: usize, stride: usize) -> (usize, Vec<f64>) {
    let pad = kernel / 2;
    let t_out = t.div_ceil(stride);
    let width = kernel * c;
    let mut out = vec![0.0; t_out * width];
    for o in 0..t_out {
        for k in 0..kernel {
            let src = (o * stride + k) as isize - pad as isize;
            if src < 0 || src as usize >= t {
                continue;
            }
            let src = src as usize;
            out[o * width + k * c..o * width + (k + 1) * c].copy_from_slice(&x[src * c..(src + 1) * c]);
        }
    }
    (t_out, out)
}

pub fn col2im_add(dcol: &[f64], t: usize, c: usize, kernel: usize, stride: usize, dx: &mut [f64]) {
    let pad = kernel / 2;
    let t_out = t.div_ceil(stride);
    let width = kernel * c;
    for o in 0..t_out {
        for k in 0..kernel {
            let src = (o * stride + k) as isize - pad as isize;
            if src < 0 || src as usize >= t {
                continue;
            }
            let src = src as usize;
            for ch in 0..c {
                dx[src * c + ch] += dcol[o * width + k * c + ch];
            }
        }
    }
}
