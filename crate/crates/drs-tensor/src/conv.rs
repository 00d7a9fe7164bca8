//! Raw convolution loops shared by the tape's forward and backward passes.
//!
//! Layouts (row-major):
//! - `conv2d`: input `[H, W, Cin]`, kernels `[k, k, Cin, Cout]`, bias `[Cout]`,
//!   output `[H', W', Cout]` with `H' = (H + 2p - k)/s + 1`.
//! - `conv_transpose2d`: input `[H, W, Cin]`, kernels `[k, k, Cout, Cin]`,
//!   bias `[Cout]`, output `[H', W', Cout]` with `H' = (H - 1)s - 2p + k`.
//!
//! With the same kernel buffer, `conv_transpose2d` is the exact linear
//! adjoint of `conv2d` (bias aside). Summation order is fixed so results are
//! bit-reproducible.

use crate::error::TensorError;
use crate::scalar::Scalar;

pub fn conv2d_out_extent(
    h: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    let padded = h + 2 * padding;
    if k == 0 || stride == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("kernel size {k} and stride {stride} must be >= 1"),
        });
    }
    if padded < k {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            detail: format!("padded extent {padded} is smaller than kernel size {k}"),
        });
    }
    Ok((padded - k) / stride + 1)
}

pub fn convt2d_out_extent(
    h: usize,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<usize, TensorError> {
    if k == 0 || stride == 0 {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!("kernel size {k} and stride {stride} must be >= 1"),
        });
    }
    let grown = (h - 1) * stride + k;
    if grown <= 2 * padding {
        return Err(TensorError::ShapeMismatch {
            op: "conv_transpose2d",
            detail: format!(
                "output extent ({h} - 1)*{stride} - 2*{padding} + {k} would be non-positive"
            ),
        });
    }
    Ok(grown - 2 * padding)
}

#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward<S: Scalar>(
    input: &[S],
    (h, w, cin): (usize, usize, usize),
    kernels: &[S],
    k: usize,
    bias: &[S],
    cout: usize,
    stride: usize,
    padding: usize,
    out: &mut [S],
    (oh, ow): (usize, usize),
) {
    debug_assert_eq!(out.len(), oh * ow * cout);
    for r in 0..oh {
        for c in 0..ow {
            let acc = &mut out[(r * ow + c) * cout..(r * ow + c) * cout + cout];
            acc.copy_from_slice(bias);
            for kh in 0..k {
                let ih = (r * stride + kh) as isize - padding as isize;
                if ih < 0 || ih as usize >= h {
                    continue;
                }
                for kw in 0..k {
                    let iw = (c * stride + kw) as isize - padding as isize;
                    if iw < 0 || iw as usize >= w {
                        continue;
                    }
                    let in_base = (ih as usize * w + iw as usize) * cin;
                    let k_base = (kh * k + kw) * cin * cout;
                    for ci in 0..cin {
                        let v = input[in_base + ci];
                        let krow = &kernels[k_base + ci * cout..k_base + ci * cout + cout];
                        for co in 0..cout {
                            acc[co] += v * krow[co];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates gradients into whichever of `d_input` / `d_kernels` / `d_bias`
/// is provided (inactive branches are skipped by the tape).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<S: Scalar>(
    d_out: &[S],
    input: &[S],
    (h, w, cin): (usize, usize, usize),
    kernels: &[S],
    k: usize,
    cout: usize,
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    mut d_input: Option<&mut [S]>,
    mut d_kernels: Option<&mut [S]>,
    d_bias: Option<&mut [S]>,
) {
    if let Some(db) = d_bias {
        for r in 0..oh {
            for c in 0..ow {
                let g = &d_out[(r * ow + c) * cout..(r * ow + c) * cout + cout];
                for co in 0..cout {
                    db[co] += g[co];
                }
            }
        }
    }
    if d_input.is_none() && d_kernels.is_none() {
        return;
    }
    for r in 0..oh {
        for c in 0..ow {
            let g = &d_out[(r * ow + c) * cout..(r * ow + c) * cout + cout];
            for kh in 0..k {
                let ih = (r * stride + kh) as isize - padding as isize;
                if ih < 0 || ih as usize >= h {
                    continue;
                }
                for kw in 0..k {
                    let iw = (c * stride + kw) as isize - padding as isize;
                    if iw < 0 || iw as usize >= w {
                        continue;
                    }
                    let in_base = (ih as usize * w + iw as usize) * cin;
                    let k_base = (kh * k + kw) * cin * cout;
                    if let Some(di) = d_input.as_deref_mut() {
                        for ci in 0..cin {
                            let krow = &kernels[k_base + ci * cout..k_base + ci * cout + cout];
                            let mut acc = S::zero();
                            for co in 0..cout {
                                acc += g[co] * krow[co];
                            }
                            di[in_base + ci] += acc;
                        }
                    }
                    if let Some(dk) = d_kernels.as_deref_mut() {
                        for ci in 0..cin {
                            let v = input[in_base + ci];
                            let krow = &mut dk[k_base + ci * cout..k_base + ci * cout + cout];
                            for co in 0..cout {
                                krow[co] += v * g[co];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn convt2d_forward<S: Scalar>(
    input: &[S],
    (h, w, cin): (usize, usize, usize),
    kernels: &[S],
    k: usize,
    bias: &[S],
    cout: usize,
    stride: usize,
    padding: usize,
    out: &mut [S],
    (oh, ow): (usize, usize),
) {
    debug_assert_eq!(out.len(), oh * ow * cout);
    for r in 0..oh {
        for c in 0..ow {
            let base = (r * ow + c) * cout;
            out[base..base + cout].copy_from_slice(bias);
        }
    }
    for i in 0..h {
        for j in 0..w {
            let in_base = (i * w + j) * cin;
            let x = &input[in_base..in_base + cin];
            for kh in 0..k {
                let or = (i * stride + kh) as isize - padding as isize;
                if or < 0 || or as usize >= oh {
                    continue;
                }
                for kw in 0..k {
                    let oc = (j * stride + kw) as isize - padding as isize;
                    if oc < 0 || oc as usize >= ow {
                        continue;
                    }
                    let out_base = (or as usize * ow + oc as usize) * cout;
                    let k_base = (kh * k + kw) * cout * cin;
                    for co in 0..cout {
                        let krow = &kernels[k_base + co * cin..k_base + co * cin + cin];
                        let mut acc = S::zero();
                        for ci in 0..cin {
                            acc += x[ci] * krow[ci];
                        }
                        out[out_base + co] += acc;
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn convt2d_backward<S: Scalar>(
    d_out: &[S],
    input: &[S],
    (h, w, cin): (usize, usize, usize),
    kernels: &[S],
    k: usize,
    cout: usize,
    stride: usize,
    padding: usize,
    (oh, ow): (usize, usize),
    mut d_input: Option<&mut [S]>,
    mut d_kernels: Option<&mut [S]>,
    d_bias: Option<&mut [S]>,
) {
    if let Some(db) = d_bias {
        for r in 0..oh {
            for c in 0..ow {
                let g = &d_out[(r * ow + c) * cout..(r * ow + c) * cout + cout];
                for co in 0..cout {
                    db[co] += g[co];
                }
            }
        }
    }
    if d_input.is_none() && d_kernels.is_none() {
        return;
    }
    for i in 0..h {
        for j in 0..w {
            let in_base = (i * w + j) * cin;
            for kh in 0..k {
                let or = (i * stride + kh) as isize - padding as isize;
                if or < 0 || or as usize >= oh {
                    continue;
                }
                for kw in 0..k {
                    let oc = (j * stride + kw) as isize - padding as isize;
                    if oc < 0 || oc as usize >= ow {
                        continue;
                    }
                    let out_base = (or as usize * ow + oc as usize) * cout;
                    let g = &d_out[out_base..out_base + cout];
                    let k_base = (kh * k + kw) * cout * cin;
                    if let Some(di) = d_input.as_deref_mut() {
                        for ci in 0..cin {
                            let mut acc = S::zero();
                            for co in 0..cout {
                                acc += g[co] * kernels[k_base + co * cin + ci];
                            }
                            di[in_base + ci] += acc;
                        }
                    }
                    if let Some(dk) = d_kernels.as_deref_mut() {
                        for co in 0..cout {
                            let krow = &mut dk[k_base + co * cin..k_base + co * cin + cin];
                            let gco = g[co];
                            for ci in 0..cin {
                                krow[ci] += input[in_base + ci] * gco;
                            }
                        }
                    }
                }
            }
        }
    }
}
