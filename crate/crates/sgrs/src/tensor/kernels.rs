//! Forward and backward compute kernels behind the tape primitives.
//!
//! All functions assume shapes were validated by the tape layer. The inner
//! loops work on contiguous row slices so the compiler can vectorize them;
//! summation order is fixed, so results are bit-identical run to run.

use super::{Scalar, Tensor};

/// Minimum argument to the natural log; realizes the 0*log(0) = 0
/// convention together with the multiplying mask.
pub const LN_CLAMP: f64 = 1e-12;

pub fn conv2d_out_dims(
    input: &[usize],
    kernel: &[usize],
    padding: usize,
) -> Option<(usize, usize, usize, usize)> {
    let (n, h, w) = (input[0], input[2], input[3]);
    let (cout, kh, kw) = (kernel[0], kernel[2], kernel[3]);
    let ho = (h + 2 * padding).checked_sub(kh)? + 1;
    let wo = (w + 2 * padding).checked_sub(kw)? + 1;
    Some((n, cout, ho, wo))
}

/// Dot product with four independent accumulators so the reduction is
/// not one long serial dependency chain.
fn dot4<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (qa, qb) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            acc[i] = acc[i] + qa[i] * qb[i];
        }
    }
    let mut tail = T::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail = tail + *x * *y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Tensor<T> {
    let (nb, cin, h, w) = dims4(input);
    let (cout, _, kh, kw) = dims4(kernel);
    let (_, _, ho, wo) = conv2d_out_dims(input.dims(), kernel.dims(), padding).unwrap();
    let mut out = vec![T::zero(); nb * cout * ho * wo];
    let idata = input.data();
    let kdata = kernel.data();
    let bdata = bias.data();
    let p = padding as isize;
    for n in 0..nb {
        for co in 0..cout {
            let oplane = &mut out[(n * cout + co) * ho * wo..][..ho * wo];
            oplane.fill(bdata[co]);
            for ci in 0..cin {
                let iplane = &idata[(n * cin + ci) * h * w..][..h * w];
                let kbase = ((co * cin + ci) * kh) * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wgt = kdata[kbase + ky * kw + kx];
                        let dy = ky as isize - p;
                        let dx = kx as isize - p;
                        for oy in 0..ho {
                            let iy = oy as isize + dy;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let ox_lo = (-dx).max(0) as usize;
                            let ox_hi = (w as isize - dx).min(wo as isize).max(0) as usize;
                            if ox_lo >= ox_hi {
                                continue;
                            }
                            let orow = &mut oplane[oy * wo + ox_lo..oy * wo + ox_hi];
                            let irow = &iplane[(iy as usize) * w + (ox_lo as isize + dx) as usize..]
                                [..ox_hi - ox_lo];
                            for (d, s) in orow.iter_mut().zip(irow) {
                                *d = *d + wgt * *s;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![nb, cout, ho, wo], out).unwrap()
}

/// Gradients of conv2d w.r.t. (input, kernel, bias). Each output is
/// computed only when the corresponding `need_*` flag is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    gout: &Tensor<T>,
    padding: usize,
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (nb, cin, h, w) = dims4(input);
    let (cout, _, kh, kw) = dims4(kernel);
    let (_, _, ho, wo) = dims4(gout);
    let p = padding as isize;
    let idata = input.data();
    let kdata = kernel.data();
    let gdata = gout.data();

    let dinput = need_input.then(|| {
        let mut din = vec![T::zero(); idata.len()];
        for n in 0..nb {
            for ci in 0..cin {
                let dplane = &mut din[(n * cin + ci) * h * w..][..h * w];
                for co in 0..cout {
                    let gplane = &gdata[(n * cout + co) * ho * wo..][..ho * wo];
                    let kbase = ((co * cin + ci) * kh) * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wgt = kdata[kbase + ky * kw + kx];
                            let dy = ky as isize - p;
                            let dx = kx as isize - p;
                            // din[iy, ix] += wgt * g[iy - dy, ix - dx]
                            for oy in 0..ho {
                                let iy = oy as isize + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let ox_lo = (-dx).max(0) as usize;
                                let ox_hi = (w as isize - dx).min(wo as isize).max(0) as usize;
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let grow = &gplane[oy * wo + ox_lo..oy * wo + ox_hi];
                                let drow = &mut dplane[(iy as usize) * w
                                    + (ox_lo as isize + dx) as usize..][..ox_hi - ox_lo];
                                for (d, g) in drow.iter_mut().zip(grow) {
                                    *d = *d + wgt * *g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::new(input.dims().to_vec(), din).unwrap()
    });

    let dkernel = need_kernel.then(|| {
        let mut dk = vec![T::zero(); kdata.len()];
        for co in 0..cout {
            for ci in 0..cin {
                let kbase = ((co * cin + ci) * kh) * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let dy = ky as isize - p;
                        let dx = kx as isize - p;
                        let mut acc = T::zero();
                        for n in 0..nb {
                            let gplane = &gdata[(n * cout + co) * ho * wo..][..ho * wo];
                            let iplane = &idata[(n * cin + ci) * h * w..][..h * w];
                            for oy in 0..ho {
                                let iy = oy as isize + dy;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let ox_lo = (-dx).max(0) as usize;
                                let ox_hi = (w as isize - dx).min(wo as isize).max(0) as usize;
                                if ox_lo >= ox_hi {
                                    continue;
                                }
                                let grow = &gplane[oy * wo + ox_lo..oy * wo + ox_hi];
                                let irow = &iplane[(iy as usize) * w
                                    + (ox_lo as isize + dx) as usize..][..ox_hi - ox_lo];
                                acc = acc + dot4(grow, irow);
                            }
                        }
                        dk[kbase + ky * kw + kx] = acc;
                    }
                }
            }
        }
        Tensor::new(kernel.dims().to_vec(), dk).unwrap()
    });

    let dbias = need_bias.then(|| {
        let mut db = vec![T::zero(); cout];
        for n in 0..nb {
            for (co, slot) in db.iter_mut().enumerate() {
                let gplane = &gdata[(n * cout + co) * ho * wo..][..ho * wo];
                let mut acc = T::zero();
                for g in gplane {
                    acc = acc + *g;
                }
                *slot = *slot + acc;
            }
        }
        Tensor::new(vec![cout], db).unwrap()
    });

    (dinput, dkernel, dbias)
}

/// Per-pixel channel softmax with max-subtraction stabilization.
pub fn softmax_forward<T: Scalar>(logits: &Tensor<T>) -> Tensor<T> {
    let (nb, c, h, w) = dims4(logits);
    let hw = h * w;
    let src = logits.data();
    let mut out = vec![T::zero(); src.len()];
    for n in 0..nb {
        let base = n * c * hw;
        for p in 0..hw {
            let mut m = src[base + p];
            for ch in 1..c {
                let v = src[base + ch * hw + p];
                if v > m {
                    m = v;
                }
            }
            let mut sum = T::zero();
            for ch in 0..c {
                let e = (src[base + ch * hw + p] - m).exp();
                out[base + ch * hw + p] = e;
                sum = sum + e;
            }
            for ch in 0..c {
                out[base + ch * hw + p] = out[base + ch * hw + p] / sum;
            }
        }
    }
    Tensor::new(logits.dims().to_vec(), out).unwrap()
}

/// d logits = s * (g - sum_c g*s) pixelwise.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let (nb, c, h, w) = dims4(probs);
    let hw = h * w;
    let s = probs.data();
    let g = gout.data();
    let mut din = vec![T::zero(); s.len()];
    for n in 0..nb {
        let base = n * c * hw;
        for p in 0..hw {
            let mut dot = T::zero();
            for ch in 0..c {
                let off = base + ch * hw + p;
                dot = dot + g[off] * s[off];
            }
            for ch in 0..c {
                let off = base + ch * hw + p;
                din[off] = s[off] * (g[off] - dot);
            }
        }
    }
    Tensor::new(probs.dims().to_vec(), din).unwrap()
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu_backward<T: Scalar>(x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(x.dims().to_vec(), data).unwrap()
}

/// 2x2 max pooling, stride 2. Ties break toward the earliest element in
/// scan order so forward and backward agree exactly.
pub fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (nb, c, h, w) = dims4(x);
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = vec![T::zero(); nb * c * ho * wo];
    for pl in 0..nb * c {
        let iplane = &src[pl * h * w..][..h * w];
        let oplane = &mut out[pl * ho * wo..][..ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let (iy, ix) = (oy * 2, ox * 2);
                let mut m = iplane[iy * w + ix];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = iplane[(iy + dy) * w + ix + dx];
                    if v > m {
                        m = v;
                    }
                }
                oplane[oy * wo + ox] = m;
            }
        }
    }
    Tensor::new(vec![nb, c, ho, wo], out).unwrap()
}

pub fn maxpool2_backward<T: Scalar>(x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let (nb, c, h, w) = dims4(x);
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let g = gout.data();
    let mut din = vec![T::zero(); src.len()];
    for pl in 0..nb * c {
        let iplane = &src[pl * h * w..][..h * w];
        let dplane = &mut din[pl * h * w..][..h * w];
        let gplane = &g[pl * ho * wo..][..ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let (iy, ix) = (oy * 2, ox * 2);
                let mut best = (iy, ix);
                let mut m = iplane[iy * w + ix];
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let v = iplane[(iy + dy) * w + ix + dx];
                    if v > m {
                        m = v;
                        best = (iy + dy, ix + dx);
                    }
                }
                dplane[best.0 * w + best.1] =
                    dplane[best.0 * w + best.1] + gplane[oy * wo + ox];
            }
        }
    }
    Tensor::new(x.dims().to_vec(), din).unwrap()
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (nb, c, h, w) = dims4(x);
    let (ho, wo) = (h * 2, w * 2);
    let src = x.data();
    let mut out = vec![T::zero(); nb * c * ho * wo];
    for pl in 0..nb * c {
        let iplane = &src[pl * h * w..][..h * w];
        let oplane = &mut out[pl * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let irow = &iplane[(oy / 2) * w..][..w];
            let orow = &mut oplane[oy * wo..][..wo];
            for (ox, o) in orow.iter_mut().enumerate() {
                *o = irow[ox / 2];
            }
        }
    }
    Tensor::new(vec![nb, c, ho, wo], out).unwrap()
}

pub fn upsample2_backward<T: Scalar>(x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let (nb, c, h, w) = dims4(x);
    let (ho, wo) = (h * 2, w * 2);
    let g = gout.data();
    let mut din = vec![T::zero(); x.len()];
    for pl in 0..nb * c {
        let dplane = &mut din[pl * h * w..][..h * w];
        let gplane = &g[pl * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let drow = &mut dplane[(oy / 2) * w..][..w];
            let grow = &gplane[oy * wo..][..wo];
            for (ox, gv) in grow.iter().enumerate() {
                drow[ox / 2] = drow[ox / 2] + *gv;
            }
        }
    }
    Tensor::new(x.dims().to_vec(), din).unwrap()
}

/// Concatenation along the channel axis.
pub fn concat_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (nb, ca, h, w) = dims4(a);
    let cb = b.dims()[1];
    let hw = h * w;
    let mut out = vec![T::zero(); nb * (ca + cb) * hw];
    for n in 0..nb {
        let dst = &mut out[n * (ca + cb) * hw..][..(ca + cb) * hw];
        dst[..ca * hw].copy_from_slice(&a.data()[n * ca * hw..][..ca * hw]);
        dst[ca * hw..].copy_from_slice(&b.data()[n * cb * hw..][..cb * hw]);
    }
    Tensor::new(vec![nb, ca + cb, h, w], out).unwrap()
}

pub fn concat_backward<T: Scalar>(
    a_dims: &[usize],
    b_dims: &[usize],
    gout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (nb, ca, h, w) = (a_dims[0], a_dims[1], a_dims[2], a_dims[3]);
    let cb = b_dims[1];
    let hw = h * w;
    let mut da = vec![T::zero(); nb * ca * hw];
    let mut db = vec![T::zero(); nb * cb * hw];
    for n in 0..nb {
        let src = &gout.data()[n * (ca + cb) * hw..][..(ca + cb) * hw];
        da[n * ca * hw..][..ca * hw].copy_from_slice(&src[..ca * hw]);
        db[n * cb * hw..][..cb * hw].copy_from_slice(&src[ca * hw..]);
    }
    (
        Tensor::new(a_dims.to_vec(), da).unwrap(),
        Tensor::new(b_dims.to_vec(), db).unwrap(),
    )
}

pub fn ln_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let clamp = super::lit::<T>(LN_CLAMP);
    x.map(|v| if v > clamp { v.ln() } else { clamp.ln() })
}

pub fn ln_backward<T: Scalar>(x: &Tensor<T>, gout: &Tensor<T>) -> Tensor<T> {
    let clamp = super::lit::<T>(LN_CLAMP);
    let data = x
        .data()
        .iter()
        .zip(gout.data())
        .map(|(&v, &g)| if v > clamp { g / v } else { T::zero() })
        .collect();
    Tensor::new(x.dims().to_vec(), data).unwrap()
}

pub fn sum_all<T: Scalar>(x: &Tensor<T>) -> T {
    let mut acc = T::zero();
    for v in x.data() {
        acc = acc + *v;
    }
    acc
}

fn dims4<T: Scalar>(t: &Tensor<T>) -> (usize, usize, usize, usize) {
    let d = t.dims();
    debug_assert_eq!(d.len(), 4);
    (d[0], d[1], d[2], d[3])
}
