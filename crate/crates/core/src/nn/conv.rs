//! 2-D convolution (cross-correlation, zero padding, symmetric).
//!
//! Forward lowers each sample to an im2col matrix and runs the GEMM kernels;
//! backward recomputes the column matrix instead of keeping it alive, trading
//! a little compute for a lot of activation memory. 1x1/stride-1 convolutions
//! skip the lowering entirely: in NCHW the sample is already the right
//! matrix.

use rayon::prelude::*;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::gemm;
use crate::tape::{OpImpl, Tape, Val};
use crate::tensor::Tensor;

/// Weights of one convolution layer.
#[derive(Clone, Debug)]
pub struct Conv2dParams<E: Elem> {
    pub weight: Tensor<E>, // [F, C, kh, kw]
    pub bias: Option<Tensor<E>>, // [F]
    pub stride: usize,
    pub pad: usize,
}

impl<E: Elem> Conv2dParams<E> {
    pub fn new(weight: Tensor<E>, bias: Option<Tensor<E>>, stride: usize, pad: usize) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 4 {
            return Err(Error::op("conv2d", format!("weight must be [F,C,kh,kw], got {ws:?}")));
        }
        if stride == 0 {
            return Err(Error::op("conv2d", "stride must be >= 1"));
        }
        if let Some(b) = &bias {
            if b.shape() != [ws[0]] {
                return Err(Error::op(
                    "conv2d",
                    format!("bias shape {:?} does not match {} filters", b.shape(), ws[0]),
                ));
            }
        }
        Ok(Self { weight, bias, stride, pad })
    }

    /// Scalar parameter count: weights plus bias when present.
    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.as_ref().map_or(0, |b| b.len())
    }
}

/// Output extent for one spatial dimension: `floor((h + 2p - k)/s) + 1`.
pub fn conv_out_extent(h: usize, k: usize, pad: usize, stride: usize) -> Result<usize> {
    let padded = h + 2 * pad;
    if padded < k {
        return Err(Error::op(
            "conv2d",
            format!("kernel {k} exceeds padded input extent {padded}"),
        ));
    }
    let out = (padded - k) / stride + 1;
    if out == 0 {
        return Err(Error::op("conv2d", "output extent would be zero"));
    }
    Ok(out)
}

/// Records `conv2d(x, w, bias)` on the tape. `x` is `[N,C,H,W]`, `w` is
/// `[F,C,kh,kw]`; output is `[N,F,H',W']`.
pub fn conv2d<E: Elem>(
    tape: &mut Tape<E>,
    x: Val,
    weight: Val,
    bias: Option<Val>,
    stride: usize,
    pad: usize,
) -> Result<Val> {
    let xs = tape.value(x).shape().to_vec();
    let ws = tape.value(weight).shape().to_vec();
    if xs.len() != 4 {
        return Err(Error::op("conv2d", format!("input must be [N,C,H,W], got {xs:?}")));
    }
    if ws.len() != 4 {
        return Err(Error::op("conv2d", format!("weight must be [F,C,kh,kw], got {ws:?}")));
    }
    if stride == 0 {
        return Err(Error::op("conv2d", "stride must be >= 1"));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if c != wc {
        return Err(Error::op(
            "conv2d",
            format!("input has {c} channels but weight expects {wc}"),
        ));
    }
    if let Some(b) = bias {
        let bs = tape.value(b).shape();
        if bs != [f] {
            return Err(Error::op(
                "conv2d",
                format!("bias shape {bs:?} does not match {f} filters"),
            ));
        }
    }
    let oh = conv_out_extent(h, kh, pad, stride)?;
    let ow = conv_out_extent(w, kw, pad, stride)?;

    let geom = ConvGeom {
        n,
        c,
        h,
        w,
        f,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    };
    let out = forward(&geom, tape.value(x).values(), tape.value(weight).values(), bias.map(|b| tape.value(b).values().to_vec()));
    let t = Tensor::from_parts(vec![n, f, oh, ow], out, false);
    let mut inputs = vec![x, weight];
    if let Some(b) = bias {
        inputs.push(b);
    }
    tape.push(inputs, t, Box::new(ConvOp { geom, has_bias: bias.is_some() }))
}

/// Registers the params as leaves and applies the layer; convenience for
/// standalone use outside a model.
pub fn conv2d_params<E: Elem>(tape: &mut Tape<E>, x: Val, p: &Conv2dParams<E>) -> Result<Val> {
    let w = tape.leaf(p.weight.clone());
    let b = p.bias.as_ref().map(|b| tape.leaf(b.clone()));
    conv2d(tape, x, w, b, p.stride, p.pad)
}

#[derive(Clone, Debug)]
struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.c * self.kh * self.kw
    }
    fn m(&self) -> usize {
        self.oh * self.ow
    }
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn forward<E: Elem>(g: &ConvGeom, x: &[E], w: &[E], bias: Option<Vec<E>>) -> Vec<E> {
    let (k, m) = (g.k(), g.m());
    let mut out = vec![E::ZERO; g.n * g.f * m];
    out.par_chunks_mut(g.f * m)
        .enumerate()
        .for_each(|(s, y_s)| {
            let x_s = &x[s * g.c * g.h * g.w..(s + 1) * g.c * g.h * g.w];
            if g.is_pointwise() {
                gemm::gemm_nn(g.f, k, m, w, x_s, y_s);
            } else {
                let mut col = vec![E::ZERO; k * m];
                im2col(g, x_s, &mut col);
                gemm::gemm_nn(g.f, k, m, w, &col, y_s);
            }
            if let Some(b) = &bias {
                for (fi, row) in y_s.chunks_exact_mut(m).enumerate() {
                    let bv = b[fi];
                    for v in row {
                        *v = v.add(bv);
                    }
                }
            }
        });
    out
}

fn im2col<E: Elem>(g: &ConvGeom, x_s: &[E], col: &mut [E]) {
    let m = g.m();
    for c in 0..g.c {
        let plane = &x_s[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let krow = &mut col[((c * g.kh + ki) * g.kw + kj) * m..][..m];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue; // stays zero
                    }
                    let src_row = &plane[iy as usize * g.w..iy as usize * g.w + g.w];
                    let dst = &mut krow[oy * g.ow..oy * g.ow + g.ow];
                    fill_row(dst, src_row, g.ow, g.stride, kj as isize - g.pad as isize, g.w);
                }
            }
        }
    }
}

/// dst[ox] = src[ox*stride + off] where in bounds.
#[inline]
fn fill_row<E: Elem>(dst: &mut [E], src: &[E], ow: usize, stride: usize, off: isize, w: usize) {
    let (lo, hi) = ox_range(ow, stride, off, w);
    if lo >= hi {
        return;
    }
    if stride == 1 {
        let s0 = (lo as isize + off) as usize;
        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
    } else {
        for ox in lo..hi {
            let ix = (ox * stride) as isize + off;
            dst[ox] = src[ix as usize];
        }
    }
}

/// Valid output range [lo, hi) for input index ox*stride + off in [0, w).
#[inline]
fn ox_range(ow: usize, stride: usize, off: isize, w: usize) -> (usize, usize) {
    let lo = if off < 0 {
        ((-off) as usize).div_ceil(stride)
    } else {
        0
    };
    let max_i = w as isize - 1 - off;
    if max_i < 0 {
        return (0, 0);
    }
    let hi = ((max_i as usize) / stride + 1).min(ow);
    (lo.min(ow), hi)
}

/// Scatter-add of a column matrix back to image layout; adjoint of im2col.
fn col2im_add<E: Elem>(g: &ConvGeom, col: &[E], dx_s: &mut [E]) {
    let m = g.m();
    for c in 0..g.c {
        let plane = &mut dx_s[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let krow = &col[((c * g.kh + ki) * g.kw + kj) * m..][..m];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * g.w..iy as usize * g.w + g.w];
                    let src = &krow[oy * g.ow..oy * g.ow + g.ow];
                    let off = kj as isize - g.pad as isize;
                    let (lo, hi) = ox_range(g.ow, g.stride, off, g.w);
                    for ox in lo..hi {
                        let ix = (ox * g.stride) as isize + off;
                        let d = &mut dst_row[ix as usize];
                        *d = d.add(src[ox]);
                    }
                }
            }
        }
    }
}

struct ConvOp {
    geom: ConvGeom,
    has_bias: bool,
}

impl<E: Elem> OpImpl<E> for ConvOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }

    fn backward(
        &self,
        grad_out: &[E],
        _out: &Tensor<E>,
        inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let g = &self.geom;
        let (k, m) = (g.k(), g.m());
        let x = inputs[0].values();
        let w = inputs[1].values();

        let dx = needs[0].then(|| {
            let mut dx = vec![E::ZERO; g.n * g.c * g.h * g.w];
            dx.par_chunks_mut(g.c * g.h * g.w)
                .enumerate()
                .for_each(|(s, dx_s)| {
                    let dy_s = &grad_out[s * g.f * m..(s + 1) * g.f * m];
                    if g.is_pointwise() {
                        gemm::gemm_tn(k, g.f, m, w, dy_s, dx_s);
                    } else {
                        let mut dcol = vec![E::ZERO; k * m];
                        gemm::gemm_tn(k, g.f, m, w, dy_s, &mut dcol);
                        col2im_add(g, &dcol, dx_s);
                    }
                });
            dx
        });

        let dw = needs[1].then(|| {
            // Per-sample contributions computed in parallel, then summed in
            // fixed sample order so the result is independent of scheduling.
            let partials: Vec<Vec<E>> = (0..g.n)
                .into_par_iter()
                .map(|s| {
                    let x_s = &x[s * g.c * g.h * g.w..(s + 1) * g.c * g.h * g.w];
                    let dy_s = &grad_out[s * g.f * m..(s + 1) * g.f * m];
                    let mut dw_s = vec![E::ZERO; g.f * k];
                    if g.is_pointwise() {
                        gemm::gemm_nt(g.f, m, k, dy_s, x_s, &mut dw_s);
                    } else {
                        let mut col = vec![E::ZERO; k * m];
                        im2col(g, x_s, &mut col);
                        gemm::gemm_nt(g.f, m, k, dy_s, &col, &mut dw_s);
                    }
                    dw_s
                })
                .collect();
            let mut dw = vec![E::ZERO; g.f * k];
            for part in partials {
                for (d, p) in dw.iter_mut().zip(part) {
                    *d = d.add(p);
                }
            }
            dw
        });

        let mut grads = vec![dx, dw];
        if self.has_bias {
            grads.push(needs[2].then(|| {
                let mut db = vec![E::ZERO; g.f];
                for s in 0..g.n {
                    for (fi, db_f) in db.iter_mut().enumerate() {
                        let row = &grad_out[(s * g.f + fi) * m..(s * g.f + fi + 1) * m];
                        let mut acc = E::ZERO;
                        for &v in row {
                            acc = acc.add(v);
                        }
                        *db_f = db_f.add(acc);
                    }
                }
                db
            }));
        }
        grads
    }
}
