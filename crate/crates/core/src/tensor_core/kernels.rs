//! Slice-level inner loops shared by the forward and backward rules.

/// `dst[i, j] += alpha * src[i + di, j + dj]` over the overlap of two `h x w`
/// planes; out-of-range source pixels read as zero.
#[inline]
pub(crate) fn shifted_axpy(dst: &mut [f64], src: &[f64], h: usize, w: usize, di: isize, dj: isize, alpha: f64) {
    let (hi, wi) = (h as isize, w as isize);
    let i0 = (-di).max(0);
    let i1 = (hi - di).min(hi);
    let j0 = (-dj).max(0);
    let j1 = (wi - dj).min(wi);
    if i0 >= i1 || j0 >= j1 {
        return;
    }
    let (j0u, j1u) = (j0 as usize, j1 as usize);
    let sj0 = (j0 + dj) as usize;
    let len = j1u - j0u;
    for i in i0..i1 {
        let drow = i as usize * w;
        let srow = (i + di) as usize * w;
        let d = &mut dst[drow + j0u..drow + j1u];
        let s = &src[srow + sj0..srow + sj0 + len];
        for (a, b) in d.iter_mut().zip(s) {
            *a += alpha * b;
        }
    }
}

/// `sum over (i, j) of a[i, j] * b[i + di, j + dj]` with zero padding on `b`.
#[inline]
pub(crate) fn shifted_dot(a: &[f64], b: &[f64], h: usize, w: usize, di: isize, dj: isize) -> f64 {
    let (hi, wi) = (h as isize, w as isize);
    let i0 = (-di).max(0);
    let i1 = (hi - di).min(hi);
    let j0 = (-dj).max(0);
    let j1 = (wi - dj).min(wi);
    if i0 >= i1 || j0 >= j1 {
        return 0.0;
    }
    let (j0u, j1u) = (j0 as usize, j1 as usize);
    let sj0 = (j0 + dj) as usize;
    let len = j1u - j0u;
    let mut acc = 0.0;
    for i in i0..i1 {
        let arow = i as usize * w;
        let brow = (i + di) as usize * w;
        acc += dot(&a[arow + j0u..arow + j1u], &b[brow + sj0..brow + sj0 + len]);
    }
    acc
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for k in 0..chunks {
        let i = k * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

/// Standard normal CDF via `erf`.
#[inline]
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

#[inline]
pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
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
