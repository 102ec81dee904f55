//! Inner loops for the layer forward/backward passes.
//!
//! Everything here works on flat row-major slices with caller-validated
//! dimensions. Inner loops are written so the autovectorizer can keep them
//! contiguous.

use crate::tensor::Real;
use rayon::prelude::*;

/// Work threshold above which dense kernels fan out over rayon. Parallel
/// units write disjoint rows, so results are identical to the serial path
/// on any worker count.
const PAR_FLOPS: usize = 1 << 21;

/// y[b,:] = bias + sum_i x[b,i] * w[i,:]
pub fn dense_forward(x: &[Real], w: &[Real], bias: &[Real], batch: usize, n_in: usize, n_out: usize, y: &mut [Real]) {
    debug_assert_eq!(x.len(), batch * n_in);
    debug_assert_eq!(w.len(), n_in * n_out);
    debug_assert_eq!(y.len(), batch * n_out);
    let row = |(b, yrow): (usize, &mut [Real])| {
        yrow.copy_from_slice(bias);
        let xrow = &x[b * n_in..(b + 1) * n_in];
        for (i, &xi) in xrow.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wrow = &w[i * n_out..(i + 1) * n_out];
            for (yv, &wv) in yrow.iter_mut().zip(wrow) {
                *yv += xi * wv;
            }
        }
    };
    if batch * n_in * n_out >= PAR_FLOPS && batch > 1 {
        y.par_chunks_mut(n_out).enumerate().for_each(row);
    } else {
        y.chunks_mut(n_out).enumerate().for_each(row);
    }
}

/// dx = dy W^T, dw += x^T dy, db += column sums of dy.
pub fn dense_backward(
    x: &[Real],
    w: &[Real],
    dy: &[Real],
    batch: usize,
    n_in: usize,
    n_out: usize,
    dx: &mut [Real],
    dw: &mut [Real],
    db: &mut [Real],
) {
    for b in 0..batch {
        let dyrow = &dy[b * n_out..(b + 1) * n_out];
        for (dbv, &g) in db.iter_mut().zip(dyrow) {
            *dbv += g;
        }
    }
    let parallel = batch * n_in * n_out >= PAR_FLOPS;
    // dx rows are independent per batch row
    let dx_row = |(b, dxrow): (usize, &mut [Real])| {
        let dyrow = &dy[b * n_out..(b + 1) * n_out];
        for (i, dxv) in dxrow.iter_mut().enumerate() {
            let wrow = &w[i * n_out..(i + 1) * n_out];
            let mut acc = 0.0;
            for (&wv, &g) in wrow.iter().zip(dyrow) {
                acc += wv * g;
            }
            *dxv = acc;
        }
    };
    if parallel && batch > 1 {
        dx.par_chunks_mut(n_in).enumerate().for_each(dx_row);
    } else {
        dx.chunks_mut(n_in).enumerate().for_each(dx_row);
    }
    // dw rows are independent per input coordinate
    let dw_row = |(i, dwrow): (usize, &mut [Real])| {
        for b in 0..batch {
            let xi = x[b * n_in + i];
            if xi == 0.0 {
                continue;
            }
            let dyrow = &dy[b * n_out..(b + 1) * n_out];
            for (dwv, &g) in dwrow.iter_mut().zip(dyrow) {
                *dwv += xi * g;
            }
        }
    };
    if parallel && n_in > 1 {
        dw.par_chunks_mut(n_out).enumerate().for_each(dw_row);
    } else {
        dw.chunks_mut(n_out).enumerate().for_each(dw_row);
    }
}

/// Copy one channel row into a zero-padded scratch row.
fn pad_row(src: &[Real], pad: usize, dst: &mut [Real]) {
    dst[..pad].fill(0.0);
    dst[pad..pad + src.len()].copy_from_slice(src);
    dst[pad + src.len()..].fill(0.0);
}

/// 1-d convolution, symmetric zero padding `k/2`, arbitrary stride.
/// x: [batch, cin, lin], w: [cout, cin, k], y: [batch, cout, lout]
pub fn conv1d_forward(
    x: &[Real],
    w: &[Real],
    bias: &[Real],
    batch: usize,
    cin: usize,
    cout: usize,
    lin: usize,
    k: usize,
    stride: usize,
    lout: usize,
    y: &mut [Real],
) {
    let pad = k / 2;
    let lp = lin + 2 * pad;
    let mut scratch = vec![0.0; cin * lp];
    for b in 0..batch {
        for c in 0..cin {
            pad_row(&x[(b * cin + c) * lin..][..lin], pad, &mut scratch[c * lp..][..lp]);
        }
        for o in 0..cout {
            let yrow = &mut y[(b * cout + o) * lout..][..lout];
            yrow.fill(bias[o]);
            for c in 0..cin {
                let xpad = &scratch[c * lp..][..lp];
                for kk in 0..k {
                    let wv = w[(o * cin + c) * k + kk];
                    if stride == 1 {
                        let src = &xpad[kk..kk + lout];
                        for (yv, &xv) in yrow.iter_mut().zip(src) {
                            *yv += wv * xv;
                        }
                    } else {
                        for (l, yv) in yrow.iter_mut().enumerate() {
                            *yv += wv * xpad[l * stride + kk];
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of conv1d_forward with the same layout conventions.
pub fn conv1d_backward(
    x: &[Real],
    w: &[Real],
    dy: &[Real],
    batch: usize,
    cin: usize,
    cout: usize,
    lin: usize,
    k: usize,
    stride: usize,
    lout: usize,
    dx: &mut [Real],
    dw: &mut [Real],
    db: &mut [Real],
) {
    let pad = k / 2;
    let lp = lin + 2 * pad;
    let mut scratch = vec![0.0; cin * lp];
    let mut dscratch = vec![0.0; cin * lp];
    for b in 0..batch {
        for c in 0..cin {
            pad_row(&x[(b * cin + c) * lin..][..lin], pad, &mut scratch[c * lp..][..lp]);
        }
        dscratch.fill(0.0);
        for o in 0..cout {
            let dyrow = &dy[(b * cout + o) * lout..][..lout];
            db[o] += dyrow.iter().sum::<Real>();
            for c in 0..cin {
                let xpad = &scratch[c * lp..][..lp];
                let dxpad = &mut dscratch[c * lp..][..lp];
                for kk in 0..k {
                    let widx = (o * cin + c) * k + kk;
                    let wv = w[widx];
                    if stride == 1 {
                        let src = &xpad[kk..kk + lout];
                        let mut acc = 0.0;
                        for (&g, &xv) in dyrow.iter().zip(src) {
                            acc += g * xv;
                        }
                        dw[widx] += acc;
                        let dst = &mut dxpad[kk..kk + lout];
                        for (dv, &g) in dst.iter_mut().zip(dyrow) {
                            *dv += wv * g;
                        }
                    } else {
                        let mut acc = 0.0;
                        for (l, &g) in dyrow.iter().enumerate() {
                            acc += g * xpad[l * stride + kk];
                            dxpad[l * stride + kk] += wv * g;
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
        for c in 0..cin {
            let dxrow = &mut dx[(b * cin + c) * lin..][..lin];
            let dpad = &dscratch[c * lp + pad..][..lin];
            for (d, &s) in dxrow.iter_mut().zip(dpad) {
                *d += s;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_identity_passes_through() {
        let n = 4;
        let mut w = vec![0.0; n * n];
        for i in 0..n {
            w[i * n + i] = 1.0;
        }
        let bias = vec![0.0; n];
        let x = [0.5, -1.0, 2.0, 3.5];
        let mut y = vec![0.0; n];
        dense_forward(&x, &w, &bias, 1, n, n, &mut y);
        assert_eq!(y, x);
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = [1.0, -2.0, 3.0, 0.5, 4.0];
        let w = [0.0, 1.0, 0.0];
        let bias = [0.0];
        let mut y = vec![0.0; 5];
        conv1d_forward(&x, &w, &bias, 1, 1, 1, 5, 3, 1, 5, &mut y);
        assert_eq!(y, x);
    }

    #[test]
    fn strided_conv_output_length() {
        // L=16, k=3, stride=2, pad=1 -> 8
        let x = vec![1.0; 16];
        let w = vec![1.0; 3];
        let bias = [0.0];
        let mut y = vec![0.0; 8];
        conv1d_forward(&x, &w, &bias, 1, 1, 1, 16, 3, 2, 8, &mut y);
        // interior windows sum 3 ones; the first window clips the left pad
        assert_eq!(y[0], 2.0);
        assert!(y[1..].iter().all(|&v| v == 3.0));
    }
}
