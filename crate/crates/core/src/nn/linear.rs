//! Fully connected layer: `y = x W^T + b`.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::gemm;
use crate::tape::{OpImpl, Tape, Val};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LinearParams<E: Elem> {
    pub weight: Tensor<E>, // [out, in]
    pub bias: Tensor<E>,   // [out]
}

impl<E: Elem> LinearParams<E> {
    pub fn new(weight: Tensor<E>, bias: Tensor<E>) -> Result<Self> {
        let ws = weight.shape();
        if ws.len() != 2 || bias.shape() != [ws[0]] {
            return Err(Error::op(
                "linear",
                format!("weight [out,in] and bias [out] required, got {ws:?} / {:?}", bias.shape()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn linear<E: Elem>(tape: &mut Tape<E>, x: Val, weight: Val, bias: Val) -> Result<Val> {
    let xs = tape.value(x).shape().to_vec();
    let ws = tape.value(weight).shape().to_vec();
    let bs = tape.value(bias).shape().to_vec();
    if xs.len() != 2 || ws.len() != 2 {
        return Err(Error::op("linear", format!("need [N,in] x [out,in], got {xs:?} / {ws:?}")));
    }
    let (n, d_in) = (xs[0], xs[1]);
    let (d_out, w_in) = (ws[0], ws[1]);
    if d_in != w_in {
        return Err(Error::op(
            "linear",
            format!("input width {d_in} does not match weight width {w_in}"),
        ));
    }
    if bs != [d_out] {
        return Err(Error::op("linear", format!("bias must be [{d_out}], got {bs:?}")));
    }
    let mut out = vec![E::ZERO; n * d_out];
    gemm::gemm_nt(n, d_in, d_out, tape.value(x).values(), tape.value(weight).values(), &mut out);
    let bv = tape.value(bias).values();
    for row in out.chunks_exact_mut(d_out) {
        for (o, &b) in row.iter_mut().zip(bv) {
            *o = o.add(b);
        }
    }
    let t = Tensor::from_parts(vec![n, d_out], out, false);
    tape.push(vec![x, weight, bias], t, Box::new(LinearOp { n, d_in, d_out }))
}

/// Registers the params as leaves and applies the layer.
pub fn linear_params<E: Elem>(tape: &mut Tape<E>, x: Val, p: &LinearParams<E>) -> Result<Val> {
    let w = tape.leaf(p.weight.clone());
    let b = tape.leaf(p.bias.clone());
    linear(tape, x, w, b)
}

struct LinearOp {
    n: usize,
    d_in: usize,
    d_out: usize,
}

impl<E: Elem> OpImpl<E> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(
        &self,
        g: &[E],
        _out: &Tensor<E>,
        inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let (n, d_in, d_out) = (self.n, self.d_in, self.d_out);
        let dx = needs[0].then(|| {
            let mut dx = vec![E::ZERO; n * d_in];
            gemm::gemm_nn(n, d_out, d_in, g, inputs[1].values(), &mut dx);
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![E::ZERO; d_out * d_in];
            gemm::gemm_tn(d_out, n, d_in, g, inputs[0].values(), &mut dw);
            dw
        });
        let db = needs[2].then(|| {
            let mut db = vec![E::ZERO; d_out];
            for row in g.chunks_exact(d_out) {
                for (d, &v) in db.iter_mut().zip(row) {
                    *d = d.add(v);
                }
            }
            db
        });
        vec![dx, dw, db]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use crate::rng::derive_rng;
    use rand::Rng;

    #[test]
    fn identity_weight_zero_bias() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0], false).unwrap());
        let p = LinearParams::new(
            Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0], false).unwrap(),
            Tensor::new(&[2], vec![0.0, 0.0], false).unwrap(),
        )
        .unwrap();
        let y = linear_params(&mut tape, x, &p).unwrap();
        assert_eq!(tape.value(y).values(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn hand_dot() {
        // x=[1,2], W=[[1,1]], b=[0.5] -> 3.5
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 2.0], false).unwrap());
        let p = LinearParams::new(
            Tensor::new(&[1, 2], vec![1.0, 1.0], false).unwrap(),
            Tensor::new(&[1], vec![0.5], false).unwrap(),
        )
        .unwrap();
        let y = linear_params(&mut tape, x, &p).unwrap();
        assert!((tape.value(y).values()[0] - 3.5).abs() < 1e-15);
    }

    #[test]
    fn width_mismatch_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0], false).unwrap());
        let w = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 1.0], false).unwrap());
        let b = tape.leaf(Tensor::new(&[1], vec![0.0], false).unwrap());
        assert!(linear(&mut tape, x, w, b).is_err());
    }

    #[test]
    fn gradients_check_out() {
        let mut rng = derive_rng(4, "linear_test", 0);
        let xv: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let wv: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let bv: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = grad_check(
            |t, v| {
                let y = linear(t, v[0], v[1], v[2])?;
                let sq = t.mul(y, y)?;
                t.sum_all(sq)
            },
            &[
                Tensor::new(&[2, 3], xv, false).unwrap(),
                Tensor::new(&[4, 3], wv, false).unwrap(),
                Tensor::new(&[4], bv, false).unwrap(),
            ],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-4, "err = {err}");
    }
}
