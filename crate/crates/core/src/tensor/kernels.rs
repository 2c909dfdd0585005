//! Inner loops for the heavy graph operations. Accumulation order is fixed,
//! so results are bit-reproducible.

use super::graph::Padding;

/// Output extent and leading pad of a convolution along one spatial axis.
///
/// `Valid`: `(n - k) / stride + 1`, no padding.
/// `Same`: `ceil(n / stride)`; the total pad `max((out - 1) * stride + k - n, 0)`
/// is split with the smaller half before the data.
pub fn conv2d_output_extent(n: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Valid => (n >= k).then(|| ((n - k) / stride + 1, 0)),
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            Some((out, total / 2))
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub k: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    #[inline]
    fn source(&self, o: usize, kk: usize, pad: usize, n: usize) -> Option<usize> {
        let pos = o * self.stride + kk;
        if pos < pad || pos - pad >= n {
            None
        } else {
            Some(pos - pad)
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], kernel: &[f64]) -> Vec<f64> {
    let (cin, cout, k) = (g.cin, g.cout, g.k);
    let mut out = vec![0.0; g.ho * g.wo * cout];
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let o = &mut out[(oy * g.wo + ox) * cout..][..cout];
            for ky in 0..k {
                let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else { continue };
                    let pix = &input[(iy * g.w + ix) * cin..][..cin];
                    let slab = &kernel[(ky * k + kx) * cin * cout..][..cin * cout];
                    for (ci, &a) in pix.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let row = &slab[ci * cout..][..cout];
                        for (acc, &kv) in o.iter_mut().zip(row) {
                            *acc += a * kv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients wrt input (if requested) and kernel (if requested).
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    input: &[f64],
    kernel: &[f64],
    grad_out: &[f64],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (cin, cout, k) = (g.cin, g.cout, g.k);
    let mut gin = want_input.then(|| vec![0.0; g.h * g.w * cin]);
    let mut gker = want_kernel.then(|| vec![0.0; k * k * cin * cout]);
    // kernel transposed to [k, k, cout, cin] so the input-gradient update is a contiguous axpy
    let kt = want_input.then(|| {
        let mut kt = vec![0.0; kernel.len()];
        for tap in 0..k * k {
            for ci in 0..cin {
                for co in 0..cout {
                    kt[(tap * cout + co) * cin + ci] = kernel[(tap * cin + ci) * cout + co];
                }
            }
        }
        kt
    });
    for oy in 0..g.ho {
        for ox in 0..g.wo {
            let go = &grad_out[(oy * g.wo + ox) * cout..][..cout];
            if go.iter().all(|&v| v == 0.0) {
                continue;
            }
            for ky in 0..k {
                let Some(iy) = g.source(oy, ky, g.pad_top, g.h) else { continue };
                for kx in 0..k {
                    let Some(ix) = g.source(ox, kx, g.pad_left, g.w) else { continue };
                    let tap = ky * k + kx;
                    let pix_off = (iy * g.w + ix) * cin;
                    if let Some(gk) = gker.as_mut() {
                        let pix = &input[pix_off..][..cin];
                        let slab = &mut gk[tap * cin * cout..][..cin * cout];
                        for (ci, &a) in pix.iter().enumerate() {
                            if a == 0.0 {
                                continue;
                            }
                            let row = &mut slab[ci * cout..][..cout];
                            for (acc, &gv) in row.iter_mut().zip(go) {
                                *acc += a * gv;
                            }
                        }
                    }
                    if let (Some(gi), Some(kt)) = (gin.as_mut(), kt.as_ref()) {
                        let dst = &mut gi[pix_off..][..cin];
                        let slab = &kt[tap * cout * cin..][..cout * cin];
                        for (co, &gv) in go.iter().enumerate() {
                            if gv == 0.0 {
                                continue;
                            }
                            let row = &slab[co * cin..][..cin];
                            for (acc, &kv) in dst.iter_mut().zip(row) {
                                *acc += gv * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    (gin, gker)
}

/// `[r, d] x [d, m] -> [r, m]`
pub(crate) fn matmul(a: &[f64], b: &[f64], r: usize, d: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * m];
    for i in 0..r {
        let dst = &mut out[i * m..][..m];
        for (p, &av) in a[i * d..][..d].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            for (acc, &bv) in dst.iter_mut().zip(&b[p * m..][..m]) {
                *acc += av * bv;
            }
        }
    }
    out
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
