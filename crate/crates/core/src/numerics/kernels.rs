//! Plain slice kernels shared by the tape and the value-level API.

/// `out[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn matmul_bt_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o += dot(a_row, b_row);
        }
    }
}

/// `out[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn matmul_at_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise without reassociation flags.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Row-wise softmax over contiguous rows of width `d`.
///
/// `visible[i]` false forces a zero output for that entry; a row whose
/// entries are all hidden or `-inf` becomes all zeros.
pub(crate) fn softmax_rows(x: &[f64], d: usize, visible: Option<&[bool]>, out: &mut [f64]) {
    for (r, (xr, or)) in x.chunks(d).zip(out.chunks_mut(d)).enumerate() {
        let vis = visible.map(|v| &v[r * d..(r + 1) * d]);
        let is_vis = |j: usize| vis.is_none_or(|v| v[j]);
        let mut max = f64::NEG_INFINITY;
        for (j, &v) in xr.iter().enumerate() {
            if is_vis(j) && v > max {
                max = v;
            }
        }
        if max == f64::NEG_INFINITY {
            or.iter_mut().for_each(|o| *o = 0.0);
            continue;
        }
        let mut sum = 0.0;
        for (j, (o, &v)) in or.iter_mut().zip(xr).enumerate() {
            *o = if is_vis(j) { (v - max).exp() } else { 0.0 };
            sum += *o;
        }
        let inv = 1.0 / sum;
        or.iter_mut().for_each(|o| *o *= inv);
    }
}

/// Row-wise RMS normalisation; returns the per-row inverse RMS.
pub(crate) fn rmsnorm_rows(x: &[f64], gain: &[f64], eps: f64, out: &mut [f64]) -> Vec<f64> {
    let d = gain.len();
    x.chunks(d)
        .zip(out.chunks_mut(d))
        .map(|(xr, or)| {
            let ms = xr.iter().map(|v| v * v).sum::<f64>() / d as f64;
            let inv = 1.0 / (ms + eps).sqrt();
            for ((o, &v), &g) in or.iter_mut().zip(xr).zip(gain) {
                *o = v * inv * g;
            }
            inv
        })
        .collect()
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}
