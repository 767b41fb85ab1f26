//! Spatial kernels for the tape: 2-D cross-correlation and max pooling
//! over `H x W x C` tensors. These are the hot loops of the whole crate,
//! so the channel dimension is kept innermost and contiguous.

use super::{GraphError, Padding, Result};
use crate::tensor::Tensor;

pub(super) fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: (usize, usize),
    padding: Padding,
) -> Result<(Tensor, (usize, usize))> {
    let (sy, sx) = stride;
    if sy == 0 || sx == 0 {
        return Err(GraphError::ZeroStride(sy, sx));
    }
    if input.shape().len() != 3 {
        return Err(GraphError::BadRank {
            op: "conv2d",
            expected: "an HxWxCin input",
            shape: input.shape().to_vec(),
        });
    }
    if kernel.shape().len() != 4 {
        return Err(GraphError::BadRank {
            op: "conv2d",
            expected: "a khxkwxCinxCout kernel",
            shape: kernel.shape().to_vec(),
        });
    }
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, kcin, cout) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    if kcin != cin {
        return Err(GraphError::BadRank {
            op: "conv2d",
            expected: "kernel Cin matching input Cin",
            shape: kernel.shape().to_vec(),
        });
    }
    let (oh, ow, pad) = match padding {
        Padding::Same => {
            let oh = h.div_ceil(sy);
            let ow = w.div_ceil(sx);
            let total_y = ((oh - 1) * sy + kh).saturating_sub(h);
            let total_x = ((ow - 1) * sx + kw).saturating_sub(w);
            (oh, ow, (total_y / 2, total_x / 2))
        }
        Padding::Valid => {
            if kh > h || kw > w {
                return Err(GraphError::KernelTooLarge { kh, kw, h, w });
            }
            ((h - kh) / sy + 1, (w - kw) / sx + 1, (0, 0))
        }
    };
    let (py, px) = pad;
    let mut out = vec![0.0; oh * ow * cout];
    let id = input.data();
    let kd = kernel.data();
    for oy in 0..oh {
        for ky in 0..kh {
            let iy = (oy * sy + ky) as isize - py as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let iy = iy as usize;
            for ox in 0..ow {
                let obase = (oy * ow + ox) * cout;
                for kx in 0..kw {
                    let ix = (ox * sx + kx) as isize - px as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ix = ix as usize;
                    let ibase = (iy * w + ix) * cin;
                    let kbase = ((ky * kw + kx) * cin) * cout;
                    for ci in 0..cin {
                        let x = id[ibase + ci];
                        let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                        let orow = &mut out[obase..obase + cout];
                        for (o, &k) in orow.iter_mut().zip(krow) {
                            *o += x * k;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![oh, ow, cout], out).expect("sized buffer"),
        pad,
    ))
}

pub(super) fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: (usize, usize),
    pad: (usize, usize),
    want_input: bool,
    want_kernel: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let (sy, sx) = stride;
    let (py, px) = pad;
    let (h, w, cin) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let (oh, ow) = (grad_out.shape()[0], grad_out.shape()[1]);
    let id = input.data();
    let kd = kernel.data();
    let gd = grad_out.data();
    let mut gi = want_input.then(|| vec![0.0; id.len()]);
    let mut gk = want_kernel.then(|| vec![0.0; kd.len()]);
    for oy in 0..oh {
        for ky in 0..kh {
            let iy = (oy * sy + ky) as isize - py as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let iy = iy as usize;
            for ox in 0..ow {
                let obase = (oy * ow + ox) * cout;
                let grow = &gd[obase..obase + cout];
                for kx in 0..kw {
                    let ix = (ox * sx + kx) as isize - px as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let ix = ix as usize;
                    let ibase = (iy * w + ix) * cin;
                    let kbase = ((ky * kw + kx) * cin) * cout;
                    for ci in 0..cin {
                        let krow = &kd[kbase + ci * cout..kbase + (ci + 1) * cout];
                        if let Some(gi) = gi.as_mut() {
                            let s: f64 = grow.iter().zip(krow).map(|(g, k)| g * k).sum();
                            gi[ibase + ci] += s;
                        }
                        if let Some(gk) = gk.as_mut() {
                            let x = id[ibase + ci];
                            let gkrow = &mut gk[kbase + ci * cout..kbase + (ci + 1) * cout];
                            for (dk, &g) in gkrow.iter_mut().zip(grow) {
                                *dk += x * g;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        gi.map(|d| Tensor::new(input.shape().to_vec(), d).expect("sized")),
        gk.map(|d| Tensor::new(kernel.shape().to_vec(), d).expect("sized")),
    )
}

pub(super) fn max_pool_forward(
    input: &Tensor,
    window: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    let (wy, wx) = window;
    let (sy, sx) = stride;
    if sy == 0 || sx == 0 {
        return Err(GraphError::ZeroStride(sy, sx));
    }
    if input.shape().len() != 3 {
        return Err(GraphError::BadRank {
            op: "max_pool",
            expected: "an HxWxC input",
            shape: input.shape().to_vec(),
        });
    }
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if wy == 0 || wx == 0 || wy > h || wx > w {
        return Err(GraphError::BadWindow { wy, wx, h, w });
    }
    let oh = (h - wy) / sy + 1;
    let ow = (w - wx) / sx + 1;
    let id = input.data();
    let mut out = vec![0.0; oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let obase = (oy * ow + ox) * c;
            for ch in 0..c {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0usize;
                for ky in 0..wy {
                    let iy = oy * sy + ky;
                    for kx in 0..wx {
                        let ix = ox * sx + kx;
                        let idx = (iy * w + ix) * c + ch;
                        // strict comparison keeps the lowest flat index on ties
                        if id[idx] > best {
                            best = id[idx];
                            best_idx = idx;
                        }
                    }
                }
                out[obase + ch] = best;
                argmax[obase + ch] = best_idx;
            }
        }
    }
    Ok((
        Tensor::new(vec![oh, ow, c], out).expect("sized buffer"),
        argmax,
    ))
}
