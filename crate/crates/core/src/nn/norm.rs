//! Batch normalization over `[N,C,H,W]`.
//!
//! Training mode normalizes with the batch mean and population variance and
//! folds the batch statistics into the running estimates with the configured
//! momentum (`running = (1 - momentum) * running + momentum * batch`); the
//! running variance tracks the population convention too. Inference
//! normalizes with the running statistics and mutates nothing. Channel sums
//! are accumulated in f64 regardless of the element type.

use rayon::prelude::*;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::tape::{OpImpl, Tape, Val};
use crate::tensor::Tensor;

/// Running statistics plus the epsilon/momentum hyperparameters.
#[derive(Clone, Debug)]
pub struct BatchNormState<E: Elem> {
    pub running_mean: Tensor<E>, // [C]
    pub running_var: Tensor<E>,  // [C]
    pub eps: f64,
    pub momentum: f64,
}

impl<E: Elem> BatchNormState<E> {
    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: Tensor::from_parts(vec![channels], vec![E::ZERO; channels], false),
            running_var: Tensor::from_parts(vec![channels], vec![E::ONE; channels], false),
            eps: 1e-5,
            momentum: 0.1,
        }
    }
}

/// Full parameter bundle for standalone use; models keep gamma/beta in their
/// param store and only carry the state.
#[derive(Clone, Debug)]
pub struct BatchNormParams<E: Elem> {
    pub gamma: Tensor<E>, // [C]
    pub beta: Tensor<E>,  // [C]
    pub state: BatchNormState<E>,
}

impl<E: Elem> BatchNormParams<E> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::from_parts(vec![channels], vec![E::ONE; channels], false),
            beta: Tensor::from_parts(vec![channels], vec![E::ZERO; channels], false),
            state: BatchNormState::new(channels),
        }
    }
}

/// Records batch normalization on the tape. In `Train` mode the running
/// stats inside `state` are updated as a side effect.
pub fn batchnorm<E: Elem>(
    tape: &mut Tape<E>,
    x: Val,
    gamma: Val,
    beta: Val,
    state: &mut BatchNormState<E>,
    mode: Mode,
) -> Result<Val> {
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 {
        return Err(Error::op("batchnorm", format!("input must be [N,C,H,W], got {xs:?}")));
    }
    let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
    if tape.value(gamma).shape() != [c] || tape.value(beta).shape() != [c] {
        return Err(Error::op("batchnorm", "gamma/beta must be [C]"));
    }
    if state.running_mean.len() != c || state.running_var.len() != c {
        return Err(Error::op("batchnorm", "running stats must be [C]"));
    }
    if state.eps < 0.0 {
        return Err(Error::op("batchnorm", "eps must be >= 0"));
    }
    let m = n * h * w;
    if mode == Mode::Train && m < 2 {
        return Err(Error::op(
            "batchnorm",
            "train mode needs at least two elements per channel",
        ));
    }

    let (mean, var) = match mode {
        Mode::Train => channel_stats(tape.value(x).values(), n, c, h * w),
        Mode::Infer => (
            state.running_mean.values().iter().map(|v| v.to_f64()).collect(),
            state.running_var.values().iter().map(|v| v.to_f64()).collect(),
        ),
    };
    let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + state.eps).sqrt()).collect();

    if mode == Mode::Train {
        let mom = state.momentum;
        let rm = state.running_mean.values_mut();
        for (r, &b) in rm.iter_mut().zip(&mean) {
            *r = E::from_f64((1.0 - mom) * r.to_f64() + mom * b);
        }
        let rv = state.running_var.values_mut();
        for (r, &b) in rv.iter_mut().zip(&var) {
            *r = E::from_f64((1.0 - mom) * r.to_f64() + mom * b);
        }
    }

    let gv = tape.value(gamma).values().to_vec();
    let bv = tape.value(beta).values().to_vec();
    let xv = tape.value(x).values();
    let hw = h * w;
    let mut out = vec![E::ZERO; xv.len()];
    out.par_chunks_mut(hw)
        .enumerate()
        .for_each(|(chunk, o)| {
            let ci = chunk % c;
            let scale = E::from_f64(gv[ci].to_f64() * invstd[ci]);
            let shift = E::from_f64(bv[ci].to_f64() - gv[ci].to_f64() * invstd[ci] * mean[ci]);
            let src = &xv[chunk * hw..(chunk + 1) * hw];
            for (dst, &v) in o.iter_mut().zip(src) {
                *dst = v.mul_add(scale, shift);
            }
        });

    let t = Tensor::from_parts(xs, out, false);
    tape.push(
        vec![x, gamma, beta],
        t,
        Box::new(BatchNormOp {
            n,
            c,
            hw,
            mean,
            invstd,
            mode,
        }),
    )
}

/// Standalone form taking a parameter bundle.
pub fn batchnorm_params<E: Elem>(
    tape: &mut Tape<E>,
    x: Val,
    p: &mut BatchNormParams<E>,
    mode: Mode,
) -> Result<Val> {
    let g = tape.leaf(p.gamma.clone());
    let b = tape.leaf(p.beta.clone());
    batchnorm(tape, x, g, b, &mut p.state, mode)
}

/// Per-channel mean and population variance over (N, H*W), in f64.
fn channel_stats<E: Elem>(x: &[E], n: usize, c: usize, hw: usize) -> (Vec<f64>, Vec<f64>) {
    let m = (n * hw) as f64;
    let stats: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ci| {
            let mut sum = 0.0;
            for s in 0..n {
                let plane = &x[(s * c + ci) * hw..(s * c + ci + 1) * hw];
                for &v in plane {
                    sum += v.to_f64();
                }
            }
            let mean = sum / m;
            let mut ss = 0.0;
            for s in 0..n {
                let plane = &x[(s * c + ci) * hw..(s * c + ci + 1) * hw];
                for &v in plane {
                    let d = v.to_f64() - mean;
                    ss += d * d;
                }
            }
            (mean, ss / m)
        })
        .collect();
    stats.into_iter().unzip()
}

struct BatchNormOp {
    n: usize,
    c: usize,
    hw: usize,
    mean: Vec<f64>,
    invstd: Vec<f64>,
    mode: Mode,
}

impl<E: Elem> OpImpl<E> for BatchNormOp {
    fn name(&self) -> &'static str {
        "batchnorm"
    }

    fn backward(
        &self,
        g: &[E],
        _out: &Tensor<E>,
        inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let x = inputs[0].values();
        let gamma = inputs[1].values();
        let (n, c, hw) = (self.n, self.c, self.hw);
        let m = (n * hw) as f64;

        // Per-channel sums of g and g * xhat.
        let sums: Vec<(f64, f64)> = (0..c)
            .into_par_iter()
            .map(|ci| {
                let mut sg = 0.0;
                let mut sgx = 0.0;
                for s in 0..n {
                    let base = (s * c + ci) * hw;
                    for i in 0..hw {
                        let gv = g[base + i].to_f64();
                        let xh = (x[base + i].to_f64() - self.mean[ci]) * self.invstd[ci];
                        sg += gv;
                        sgx += gv * xh;
                    }
                }
                (sg, sgx)
            })
            .collect();

        let dgamma = needs[1].then(|| sums.iter().map(|&(_, sgx)| E::from_f64(sgx)).collect());
        let dbeta = needs[2].then(|| sums.iter().map(|&(sg, _)| E::from_f64(sg)).collect());

        let dx = needs[0].then(|| {
            let mut dx = vec![E::ZERO; x.len()];
            dx.par_chunks_mut(hw).enumerate().for_each(|(chunk, o)| {
                let ci = chunk % c;
                let gm = gamma[ci].to_f64();
                let istd = self.invstd[ci];
                let base = chunk * hw;
                match self.mode {
                    Mode::Train => {
                        let (sg, sgx) = sums[ci];
                        for (i, dst) in o.iter_mut().enumerate() {
                            let gv = g[base + i].to_f64();
                            let xh = (x[base + i].to_f64() - self.mean[ci]) * istd;
                            *dst = E::from_f64(gm * istd * (gv - sg / m - xh * sgx / m));
                        }
                    }
                    Mode::Infer => {
                        for (i, dst) in o.iter_mut().enumerate() {
                            *dst = E::from_f64(g[base + i].to_f64() * gm * istd);
                        }
                    }
                }
            });
            dx
        });

        vec![dx, dgamma, dbeta]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_EPS};
    use crate::rng::derive_rng;
    use rand::Rng;

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = derive_rng(seed, "bn_test", 0);
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn constant_input_train_gives_beta() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 2, 2, 2], vec![3.0; 16], false).unwrap());
        let mut p = BatchNormParams::<f64>::new(2);
        p.beta = Tensor::new(&[2], vec![0.7, -0.2], false).unwrap();
        let y = batchnorm_params(&mut tape, x, &mut p, Mode::Train).unwrap();
        let out = tape.value(y).values();
        for s in 0..2 {
            for c in 0..2 {
                for i in 0..4 {
                    let want = if c == 0 { 0.7 } else { -0.2 };
                    assert!((out[(s * 2 + c) * 4 + i] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn infer_identity_normalization() {
        let vals = rand_vec(16, 1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 2, 2, 2], vals.clone(), false).unwrap());
        let mut p = BatchNormParams::<f64>::new(2);
        p.state.eps = 1e-14;
        let y = batchnorm_params(&mut tape, x, &mut p, Mode::Infer).unwrap();
        for (a, b) in tape.value(y).values().iter().zip(&vals) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn two_point_channel_normalizes_to_unit() {
        // x = [1, 3]: mean 2, population sigma 1 -> [-1, 1]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0], false).unwrap());
        let mut p = BatchNormParams::<f64>::new(1);
        p.state.eps = 0.0;
        let y = batchnorm_params(&mut tape, x, &mut p, Mode::Train).unwrap();
        let out = tape.value(y).values();
        assert!((out[0] + 1.0).abs() < 1e-12);
        assert!((out[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn train_output_has_mean_beta_and_unit_variance() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[4, 3, 5, 5], rand_vec(300, 2), false).unwrap());
        let mut p = BatchNormParams::<f64>::new(3);
        p.state.eps = 1e-12;
        let y = batchnorm_params(&mut tape, x, &mut p, Mode::Train).unwrap();
        let out = tape.value(y).values();
        for c in 0..3 {
            let mut vals = Vec::new();
            for s in 0..4 {
                vals.extend_from_slice(&out[(s * 3 + c) * 25..(s * 3 + c + 1) * 25]);
            }
            let mean: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let var: f64 = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-6, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "channel {c} var {var}");
        }
    }

    #[test]
    fn running_stats_update_with_momentum() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[2, 1, 1, 2], vec![1.0, 3.0, 5.0, 7.0], false).unwrap());
        let mut p = BatchNormParams::<f64>::new(1);
        let _ = batchnorm_params(&mut tape, x, &mut p, Mode::Train).unwrap();
        // batch mean 4, population var 5; running starts at (0, 1), momentum 0.1
        assert!((p.state.running_mean.values()[0] - 0.4).abs() < 1e-12);
        assert!((p.state.running_var.values()[0] - (0.9 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn single_element_train_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2, 1, 1], vec![1.0, 2.0], false).unwrap());
        let mut p = BatchNormParams::<f64>::new(2);
        assert!(batchnorm_params(&mut tape, x, &mut p, Mode::Train).is_err());
        assert!(batchnorm_params(&mut tape, x, &mut p, Mode::Infer).is_ok());
    }

    #[test]
    fn gradients_check_out_both_modes() {
        let x = Tensor::new(&[2, 2, 3, 3], rand_vec(36, 3), false).unwrap();
        let gamma = Tensor::new(&[2], vec![1.3, 0.8], false).unwrap();
        let beta = Tensor::new(&[2], vec![0.1, -0.4], false).unwrap();
        for mode in [Mode::Train, Mode::Infer] {
            let err = grad_check(
                |t, v| {
                    let mut state = BatchNormState::new(2);
                    state.running_mean = Tensor::new(&[2], vec![0.2, -0.1], false).unwrap();
                    state.running_var = Tensor::new(&[2], vec![1.5, 0.7], false).unwrap();
                    let y = batchnorm(t, v[0], v[1], v[2], &mut state, mode)?;
                    let sq = t.mul(y, y)?;
                    t.sum_all(sq)
                },
                &[x.clone(), gamma.clone(), beta.clone()],
                DEFAULT_EPS,
            )
            .unwrap();
            assert!(err < 1e-4, "{mode:?} err = {err}");
        }
    }
}
