//! Raw forward and backward kernels on dense buffers.
//!
//! The tape dispatches into these; they know nothing about recording.
//! Convolution is organized so the innermost loops run over contiguous
//! rows (axpy / dot shapes the compiler can vectorize). Inputs are copied
//! into an explicitly zero-padded buffer once per call, which removes all
//! boundary handling from the hot loops.

use super::{Element, Shape, Tensor};

/// Copy `x` into a buffer with `pad` zero rows/columns on every side.
fn pad_input<E: Element>(x: &Tensor<E>, pad: usize) -> Tensor<E> {
    let s = x.shape();
    if pad == 0 {
        return x.clone();
    }
    let ps = Shape::new(s.n, s.c, s.h + 2 * pad, s.w + 2 * pad);
    let mut out = Tensor::zeros(ps);
    for n in 0..s.n {
        for c in 0..s.c {
            for y in 0..s.h {
                let src = s.idx(n, c, y, 0);
                let dst = ps.idx(n, c, y + pad, pad);
                out.data_mut()[dst..dst + s.w].copy_from_slice(&x.data()[src..src + s.w]);
            }
        }
    }
    out
}

fn unpad_grad<E: Element>(gp: &Tensor<E>, shape: Shape, pad: usize) -> Tensor<E> {
    if pad == 0 {
        return gp.clone();
    }
    let ps = gp.shape();
    let mut out = Tensor::zeros(shape);
    for n in 0..shape.n {
        for c in 0..shape.c {
            for y in 0..shape.h {
                let src = ps.idx(n, c, y + pad, pad);
                let dst = shape.idx(n, c, y, 0);
                out.data_mut()[dst..dst + shape.w]
                    .copy_from_slice(&gp.data()[src..src + shape.w]);
            }
        }
    }
    out
}

pub fn conv2d_out_shape(x: Shape, w: Shape, stride: usize, pad: usize) -> Shape {
    let oh = (x.h + 2 * pad - w.h) / stride + 1;
    let ow = (x.w + 2 * pad - w.w) / stride + 1;
    Shape::new(x.n, w.n, oh, ow)
}

/// Direct convolution: weights laid out (c_out, c_in, k, k), bias per c_out.
pub fn conv2d_fwd<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    b: &[E],
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let xs = x.shape();
    let ws = w.shape();
    let os = conv2d_out_shape(xs, ws, stride, pad);
    let k = ws.h;
    let xp = pad_input(x, pad);
    let ps = xp.shape();
    let mut out = Tensor::zeros(os);

    for n in 0..os.n {
        for co in 0..os.c {
            let base = os.idx(n, co, 0, 0);
            out.data_mut()[base..base + os.h * os.w].fill(b[co]);
            for ci in 0..xs.c {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data()[ws.idx(co, ci, ky, kx)];
                        if stride == 1 {
                            for y in 0..os.h {
                                let orow = os.idx(n, co, y, 0);
                                let irow = ps.idx(n, ci, y + ky, kx);
                                let xrow = &xp.data()[irow..irow + os.w];
                                let dst = &mut out.data_mut()[orow..orow + os.w];
                                for (d, s) in dst.iter_mut().zip(xrow) {
                                    *d += wv * *s;
                                }
                            }
                        } else {
                            for y in 0..os.h {
                                let iy = y * stride + ky;
                                for ox in 0..os.w {
                                    let ix = ox * stride + kx;
                                    let v = xp.data()[ps.idx(n, ci, iy, ix)];
                                    out.data_mut()[os.idx(n, co, y, ox)] += wv * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient w.r.t. the convolution input.
pub fn conv2d_bwd_x<E: Element>(
    g: &Tensor<E>,
    x_shape: Shape,
    w: &Tensor<E>,
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let ws = w.shape();
    let os = g.shape();
    let k = ws.h;
    let ps = Shape::new(
        x_shape.n,
        x_shape.c,
        x_shape.h + 2 * pad,
        x_shape.w + 2 * pad,
    );
    let mut gp = Tensor::zeros(ps);

    for n in 0..os.n {
        for co in 0..os.c {
            for ci in 0..x_shape.c {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w.data()[ws.idx(co, ci, ky, kx)];
                        if stride == 1 {
                            for y in 0..os.h {
                                let grow = os.idx(n, co, y, 0);
                                let irow = ps.idx(n, ci, y + ky, kx);
                                let gs = &g.data()[grow..grow + os.w];
                                let dst = &mut gp.data_mut()[irow..irow + os.w];
                                for (d, gv) in dst.iter_mut().zip(gs) {
                                    *d += wv * *gv;
                                }
                            }
                        } else {
                            for y in 0..os.h {
                                let iy = y * stride + ky;
                                for ox in 0..os.w {
                                    let ix = ox * stride + kx;
                                    let gv = g.data()[os.idx(n, co, y, ox)];
                                    gp.data_mut()[ps.idx(n, ci, iy, ix)] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    unpad_grad(&gp, x_shape, pad)
}

/// Gradient w.r.t. the convolution weights.
pub fn conv2d_bwd_w<E: Element>(
    g: &Tensor<E>,
    x: &Tensor<E>,
    w_shape: Shape,
    stride: usize,
    pad: usize,
) -> Tensor<E> {
    let os = g.shape();
    let xs = x.shape();
    let k = w_shape.h;
    let xp = pad_input(x, pad);
    let ps = xp.shape();
    let mut gw = Tensor::zeros(w_shape);

    for n in 0..os.n {
        for co in 0..os.c {
            for ci in 0..xs.c {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = E::ZERO;
                        if stride == 1 {
                            for y in 0..os.h {
                                let grow = os.idx(n, co, y, 0);
                                let irow = ps.idx(n, ci, y + ky, kx);
                                let gs = &g.data()[grow..grow + os.w];
                                let xr = &xp.data()[irow..irow + os.w];
                                for (gv, xv) in gs.iter().zip(xr) {
                                    acc += *gv * *xv;
                                }
                            }
                        } else {
                            for y in 0..os.h {
                                let iy = y * stride + ky;
                                for ox in 0..os.w {
                                    let ix = ox * stride + kx;
                                    acc += g.data()[os.idx(n, co, y, ox)]
                                        * xp.data()[ps.idx(n, ci, iy, ix)];
                                }
                            }
                        }
                        gw.data_mut()[w_shape.idx(co, ci, ky, kx)] += acc;
                    }
                }
            }
        }
    }
    gw
}

/// Gradient w.r.t. the convolution bias: sum of `g` over batch and space.
pub fn conv2d_bwd_b<E: Element>(g: &Tensor<E>) -> Vec<E> {
    let os = g.shape();
    let mut gb = vec![E::ZERO; os.c];
    for n in 0..os.n {
        for co in 0..os.c {
            let base = os.idx(n, co, 0, 0);
            let mut acc = E::ZERO;
            for v in &g.data()[base..base + os.h * os.w] {
                acc += *v;
            }
            gb[co] += acc;
        }
    }
    gb
}

/// Source coordinate for half-pixel-center bilinear sampling, clamped to
/// the valid range. Returns (low index, high index, fractional weight).
#[inline]
fn sample_coord(i: usize, scale: f64, in_size: usize) -> (usize, usize, f64) {
    let s = (i as f64 + 0.5) * scale - 0.5;
    let s = s.clamp(0.0, (in_size - 1) as f64);
    let lo = s.floor() as usize;
    let hi = (lo + 1).min(in_size - 1);
    (lo, hi, s - lo as f64)
}

pub fn resize_bilinear_fwd<E: Element>(x: &Tensor<E>, out_h: usize, out_w: usize) -> Tensor<E> {
    let xs = x.shape();
    let os = Shape::new(xs.n, xs.c, out_h, out_w);
    let sy = xs.h as f64 / out_h as f64;
    let sx = xs.w as f64 / out_w as f64;
    let mut out = Tensor::zeros(os);
    for n in 0..xs.n {
        for c in 0..xs.c {
            for oy in 0..out_h {
                let (y0, y1, ty) = sample_coord(oy, sy, xs.h);
                let ty = E::from_f64(ty);
                for ox in 0..out_w {
                    let (x0, x1, tx) = sample_coord(ox, sx, xs.w);
                    let tx = E::from_f64(tx);
                    // lerp form keeps constants and identity resizes exact
                    let a = x.at(n, c, y0, x0);
                    let b = x.at(n, c, y0, x1);
                    let d = x.at(n, c, y1, x0);
                    let e = x.at(n, c, y1, x1);
                    let top = a + tx * (b - a);
                    let bot = d + tx * (e - d);
                    out.set(n, c, oy, ox, top + ty * (bot - top));
                }
            }
        }
    }
    out
}

pub fn resize_bilinear_bwd<E: Element>(g: &Tensor<E>, x_shape: Shape) -> Tensor<E> {
    let os = g.shape();
    let sy = x_shape.h as f64 / os.h as f64;
    let sx = x_shape.w as f64 / os.w as f64;
    let mut gx = Tensor::zeros(x_shape);
    for n in 0..os.n {
        for c in 0..os.c {
            for oy in 0..os.h {
                let (y0, y1, ty) = sample_coord(oy, sy, x_shape.h);
                for ox in 0..os.w {
                    let (x0, x1, tx) = sample_coord(ox, sx, x_shape.w);
                    let gv = g.at(n, c, oy, ox);
                    let (ty_e, tx_e) = (E::from_f64(ty), E::from_f64(tx));
                    let one = E::ONE;
                    let w00 = (one - ty_e) * (one - tx_e);
                    let w01 = (one - ty_e) * tx_e;
                    let w10 = ty_e * (one - tx_e);
                    let w11 = ty_e * tx_e;
                    let d = gx.data_mut();
                    d[x_shape.idx(n, c, y0, x0)] += gv * w00;
                    d[x_shape.idx(n, c, y0, x1)] += gv * w01;
                    d[x_shape.idx(n, c, y1, x0)] += gv * w10;
                    d[x_shape.idx(n, c, y1, x1)] += gv * w11;
                }
            }
        }
    }
    gx
}

/// Broadcast-multiply `a ⊙ b` where every dimension of `b` either matches
/// `a` or is 1. The output takes `a`'s shape.
pub fn mul_bcast_fwd<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let s = a.shape();
    let bs = b.shape();
    let mut out = Tensor::zeros(s);
    for n in 0..s.n {
        let bn = if bs.n == 1 { 0 } else { n };
        for c in 0..s.c {
            let bc = if bs.c == 1 { 0 } else { c };
            for y in 0..s.h {
                let by = if bs.h == 1 { 0 } else { y };
                for x in 0..s.w {
                    let bx = if bs.w == 1 { 0 } else { x };
                    out.set(n, c, y, x, a.at(n, c, y, x) * b.at(bn, bc, by, bx));
                }
            }
        }
    }
    out
}

/// Gradient of `mul_bcast` w.r.t. the broadcast operand: g ⊙ a reduced over
/// the broadcast dimensions.
pub fn mul_bcast_bwd_b<E: Element>(g: &Tensor<E>, a: &Tensor<E>, b_shape: Shape) -> Tensor<E> {
    let s = a.shape();
    let mut gb = Tensor::zeros(b_shape);
    for n in 0..s.n {
        let bn = if b_shape.n == 1 { 0 } else { n };
        for c in 0..s.c {
            let bc = if b_shape.c == 1 { 0 } else { c };
            for y in 0..s.h {
                let by = if b_shape.h == 1 { 0 } else { y };
                for x in 0..s.w {
                    let bx = if b_shape.w == 1 { 0 } else { x };
                    let i = b_shape.idx(bn, bc, by, bx);
                    gb.data_mut()[i] += g.at(n, c, y, x) * a.at(n, c, y, x);
                }
            }
        }
    }
    gb
}
