//! Pooling: 2x2/stride-2 max pooling and global average pooling.

use rayon::prelude::*;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tape::{OpImpl, Tape, Val};
use crate::tensor::Tensor;

/// 2x2 max pooling with stride 2. Requires even spatial extents. Backward
/// routes each window's gradient to the first maximum in row-major window
/// order, so ties are deterministic.
pub fn maxpool2<E: Elem>(tape: &mut Tape<E>, x: Val) -> Result<Val> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 {
        return Err(Error::op("maxpool2", format!("input must be [N,C,H,W], got {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::op(
            "maxpool2",
            format!("spatial extents must be even, got {h}x{w}"),
        ));
    }
    let (oh, ow) = (h / 2, w / 2);
    let xv = tape.value(x).values();
    let mut out = vec![E::ZERO; n * c * oh * ow];
    let mut argmax = vec![0u32; n * c * oh * ow];
    out.par_chunks_mut(oh * ow)
        .zip(argmax.par_chunks_mut(oh * ow))
        .enumerate()
        .for_each(|(plane_idx, (o, am))| {
            let plane = &xv[plane_idx * h * w..(plane_idx + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best_idx = (2 * oy) * w + 2 * ox;
                    let mut best = plane[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let idx = (2 * oy + dy) * w + 2 * ox + dx;
                        if plane[idx] > best {
                            best = plane[idx];
                            best_idx = idx;
                        }
                    }
                    o[oy * ow + ox] = best;
                    am[oy * ow + ox] = best_idx as u32;
                }
            }
        });
    let t = Tensor::from_parts(vec![n, c, oh, ow], out, false);
    tape.push(
        vec![x],
        t,
        Box::new(MaxPoolOp {
            plane_in: h * w,
            plane_out: oh * ow,
            argmax,
        }),
    )
}

struct MaxPoolOp {
    plane_in: usize,
    plane_out: usize,
    argmax: Vec<u32>,
}

impl<E: Elem> OpImpl<E> for MaxPoolOp {
    fn name(&self) -> &'static str {
        "maxpool2"
    }
    fn backward(
        &self,
        g: &[E],
        _out: &Tensor<E>,
        inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        if !needs[0] {
            return vec![None];
        }
        let mut dx = vec![E::ZERO; inputs[0].len()];
        dx.par_chunks_mut(self.plane_in)
            .enumerate()
            .for_each(|(plane_idx, d)| {
                let base = plane_idx * self.plane_out;
                for i in 0..self.plane_out {
                    let idx = self.argmax[base + i] as usize;
                    d[idx] = d[idx].add(g[base + i]);
                }
            });
        vec![Some(dx)]
    }
}

/// Global average pooling: spatial mean per channel, `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<E: Elem>(tape: &mut Tape<E>, x: Val) -> Result<Val> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 {
        return Err(Error::op(
            "global_avg_pool",
            format!("input must be [N,C,H,W], got {xs:?}"),
        ));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    let hw = h * w;
    let xv = tape.value(x).values();
    let out: Vec<E> = (0..n * c)
        .map(|plane| {
            let mut sum = 0.0f64;
            for &v in &xv[plane * hw..(plane + 1) * hw] {
                sum += v.to_f64();
            }
            E::from_f64(sum / hw as f64)
        })
        .collect();
    let t = Tensor::from_parts(vec![n, c], out, false);
    tape.push(vec![x], t, Box::new(GapOp { hw }))
}

struct GapOp {
    hw: usize,
}

impl<E: Elem> OpImpl<E> for GapOp {
    fn name(&self) -> &'static str {
        "global_avg_pool"
    }
    fn backward(
        &self,
        g: &[E],
        _out: &Tensor<E>,
        inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        if !needs[0] {
            return vec![None];
        }
        let inv = E::from_f64(1.0 / self.hw as f64);
        let mut dx = vec![E::ZERO; inputs[0].len()];
        for (plane, chunk) in dx.chunks_exact_mut(self.hw).enumerate() {
            let gv = g[plane].mul(inv);
            for d in chunk {
                *d = gv;
            }
        }
        vec![Some(dx)]
    }
}
