//! SimAM: parameter-free spatial attention.
//!
//! Each activation is weighted by a closed-form "energy" of its squared
//! deviation from the channel's spatial mean: with `M = H*W`, `mu` the
//! spatial mean, `d_t = (t - mu)^2` and `v = sum(d) / (M - 1)`,
//!
//! ```text
//! e_t = d_t / (4 (v + lambda)) + 0.5        y_t = t * sigmoid(e_t)
//! ```
//!
//! so weights live in (0.5, 1) for `lambda > 0` and grow monotonically with
//! the squared deviation. The module also owns the placement policy that
//! decides where attention enters a residual block.

use rayon::prelude::*;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tape::{OpImpl, Tape, Val};
use crate::tensor::Tensor;

/// Where SimAM is applied relative to a residual block computing `F(x)` with
/// shortcut `s`.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum Placement {
    /// `F + s + SimAM(s)`: attention on the shortcut, added as a third term.
    PerBlockAdditive,
    /// `SimAM(F) + s`: attention on the residual branch.
    PerBlockResidual,
    /// Blocks compute plain `F + s`; attention is applied once to the output
    /// of the second stage of the network.
    AfterStage2,
    /// Plain residual blocks, no attention.
    None,
}

#[derive(Copy, Clone, Debug)]
pub struct SimAMConfig {
    pub lambda: f64,
    pub placement: Placement,
}

impl Default for SimAMConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            placement: Placement::PerBlockAdditive,
        }
    }
}

impl SimAMConfig {
    pub fn new(lambda: f64, placement: Placement) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("simam lambda must be > 0, got {lambda}")));
        }
        Ok(Self { lambda, placement })
    }
}

/// Per-channel spatial mean and the sample-variance energy denominator term
/// `v = sum((t - mu)^2) / (M - 1)`, accumulated in f64.
fn channel_mean_v<E: Elem>(ch: &[E]) -> (f64, f64) {
    let m = ch.len() as f64;
    let mut sum = 0.0;
    for &v in ch {
        sum += v.to_f64();
    }
    let mean = sum / m;
    let mut ss = 0.0;
    for &v in ch {
        let d = v.to_f64() - mean;
        ss += d * d;
    }
    (mean, ss / (m - 1.0))
}

fn sigmoid_f64(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out_ch[i] += x_ch[i] * sigmoid(e_i)`
fn apply_channel<E: Elem>(x_ch: &[E], out_ch: &mut [E], mean: f64, v: f64, lambda: f64) {
    let inv4vl = 1.0 / (4.0 * (v + lambda));
    for (o, &t) in out_ch.iter_mut().zip(x_ch) {
        let d = t.to_f64() - mean;
        let w = sigmoid_f64(d * d * inv4vl + 0.5);
        *o = o.add(E::from_f64(t.to_f64() * w));
    }
}

/// `dx_ch[i] += d/dt_i [sum_j g_j * t_j * sigmoid(e_j)]`
fn grad_channel<E: Elem>(g_ch: &[E], x_ch: &[E], mean: f64, v: f64, lambda: f64, dx_ch: &mut [E]) {
    let m = x_ch.len() as f64;
    let a = 1.0 / (4.0 * (v + lambda));
    // h_i = g_i t_i w_i (1 - w_i), S = sum h_i d_i
    let mut s_hd = 0.0;
    for (&g, &t) in g_ch.iter().zip(x_ch) {
        let d = t.to_f64() - mean;
        let dd = d * d;
        let w = sigmoid_f64(dd * a + 0.5);
        s_hd += g.to_f64() * t.to_f64() * w * (1.0 - w) * dd;
    }
    // q_i = a h_i - 4 a^2 S / (M-1); accumulate sum q_j (t_j - mu)
    let q_shift = 4.0 * a * a * s_hd / (m - 1.0);
    let mut s_qd = 0.0;
    for (&g, &t) in g_ch.iter().zip(x_ch) {
        let d = t.to_f64() - mean;
        let w = sigmoid_f64(d * d * a + 0.5);
        let h = g.to_f64() * t.to_f64() * w * (1.0 - w);
        s_qd += (a * h - q_shift) * d;
    }
    for ((dx, &g), &t) in dx_ch.iter_mut().zip(g_ch).zip(x_ch) {
        let d = t.to_f64() - mean;
        let w = sigmoid_f64(d * d * a + 0.5);
        let h = g.to_f64() * t.to_f64() * w * (1.0 - w);
        let q = a * h - q_shift;
        let val = g.to_f64() * w + 2.0 * d * q - 2.0 * s_qd / m;
        *dx = dx.add(E::from_f64(val));
    }
}

fn check_input<E: Elem>(t: &Tensor<E>, lambda: f64) -> Result<(usize, usize, usize)> {
    let s = t.shape();
    if s.len() != 4 {
        return Err(Error::op("simam", format!("input must be [N,C,H,W], got {s:?}")));
    }
    let hw = s[2] * s[3];
    if hw < 2 {
        return Err(Error::op(
            "simam",
            format!("needs H*W >= 2 for the sample-variance energy, got {}x{}", s[2], s[3]),
        ));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::op("simam", format!("lambda must be >= 0, got {lambda}")));
    }
    Ok((s[0], s[1], hw))
}

/// Per-channel stats for the whole batch; errors when `v + lambda` is not
/// positive (a constant channel with `lambda = 0`), which would put the
/// energy at 0/0.
fn batch_stats<E: Elem>(x: &[E], nc: usize, hw: usize, lambda: f64) -> Result<Vec<(f64, f64)>> {
    let stats: Vec<(f64, f64)> = (0..nc)
        .into_par_iter()
        .map(|i| channel_mean_v(&x[i * hw..(i + 1) * hw]))
        .collect();
    if stats.iter().any(|&(_, v)| v + lambda <= 0.0) {
        return Err(Error::op(
            "simam",
            "v + lambda must be positive; constant channel with lambda = 0",
        ));
    }
    Ok(stats)
}

/// Records `x * sigmoid(e)` on the tape. Shape-preserving, differentiable.
pub fn simam_forward<E: Elem>(tape: &mut Tape<E>, x: Val, lambda: f64) -> Result<Val> {
    let (_, _, hw) = check_input(tape.value(x), lambda)?;
    let xv = tape.value(x).values();
    let nc = xv.len() / hw;
    let stats = batch_stats(xv, nc, hw, lambda)?;
    let mut out = vec![E::ZERO; xv.len()];
    out.par_chunks_mut(hw).enumerate().for_each(|(i, o)| {
        let (mean, v) = stats[i];
        apply_channel(&xv[i * hw..(i + 1) * hw], o, mean, v, lambda);
    });
    let t = Tensor::from_parts(tape.value(x).shape().to_vec(), out, false);
    tape.push(vec![x], t, Box::new(SimAmOp { hw, lambda, stats }))
}

/// Attention weights `sigmoid(e_t)` without the tape; used by invariant
/// checks.
pub fn simam_weights<E: Elem>(x: &Tensor<E>, lambda: f64) -> Result<Tensor<E>> {
    let (_, _, hw) = check_input(x, lambda)?;
    let xv = x.values();
    let nc = xv.len() / hw;
    let stats = batch_stats(xv, nc, hw, lambda)?;
    let mut out = vec![E::ZERO; xv.len()];
    for (i, o) in out.chunks_mut(hw).enumerate() {
        let (mean, v) = stats[i];
        let inv4vl = 1.0 / (4.0 * (v + lambda));
        for (w_out, &t) in o.iter_mut().zip(&xv[i * hw..(i + 1) * hw]) {
            let d = t.to_f64() - mean;
            *w_out = E::from_f64(sigmoid_f64(d * d * inv4vl + 0.5));
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out, false))
}

struct SimAmOp {
    hw: usize,
    lambda: f64,
    stats: Vec<(f64, f64)>,
}

impl<E: Elem> OpImpl<E> for SimAmOp {
    fn name(&self) -> &'static str {
        "simam"
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
        let x = inputs[0].values();
        let mut dx = vec![E::ZERO; x.len()];
        let hw = self.hw;
        dx.par_chunks_mut(hw).enumerate().for_each(|(i, d)| {
            let (mean, v) = self.stats[i];
            grad_channel(&g[i * hw..(i + 1) * hw], &x[i * hw..(i + 1) * hw], mean, v, self.lambda, d);
        });
        vec![Some(dx)]
    }
}

/// Combines a residual branch `F` with its shortcut `s` according to the
/// placement policy (no activation; the block applies its own ReLU).
pub fn apply_placement<E: Elem>(
    tape: &mut Tape<E>,
    block_f: Val,
    shortcut: Val,
    cfg: &SimAMConfig,
) -> Result<Val> {
    residual_combine(tape, block_f, shortcut, cfg, false)
}

/// Fused `combine(+ ReLU)` used by bottleneck blocks: one tape node instead
/// of a chain of adds, which matters for activation memory at training time.
/// `AfterStage2` behaves like `None` here; the stage hook applies
/// [`simam_forward`] separately.
pub fn residual_combine<E: Elem>(
    tape: &mut Tape<E>,
    block_f: Val,
    shortcut: Val,
    cfg: &SimAMConfig,
    post_relu: bool,
) -> Result<Val> {
    let fs = tape.value(block_f).shape().to_vec();
    let ss = tape.value(shortcut).shape().to_vec();
    if fs != ss {
        return Err(Error::ShapeMismatch { left: fs, right: ss });
    }
    let attended = match cfg.placement {
        Placement::PerBlockAdditive => Some(shortcut),
        Placement::PerBlockResidual => Some(block_f),
        Placement::AfterStage2 | Placement::None => None,
    };
    let stats = match attended {
        Some(a) => {
            let (_, _, hw) = check_input(tape.value(a), cfg.lambda)?;
            let av = tape.value(a).values();
            Some((hw, batch_stats(av, av.len() / hw, hw, cfg.lambda)?))
        }
        None => None,
    };

    let fv = tape.value(block_f).values();
    let sv = tape.value(shortcut).values();
    let mut out: Vec<E> = fv.iter().zip(sv).map(|(&a, &b)| a.add(b)).collect();
    if let (Some(a), Some((hw, stats))) = (attended, &stats) {
        let av = tape.value(a).values();
        out.par_chunks_mut(*hw).enumerate().for_each(|(i, o)| {
            let (mean, v) = stats[i];
            apply_channel(&av[i * hw..(i + 1) * hw], o, mean, v, cfg.lambda);
        });
    }
    if post_relu {
        for v in &mut out {
            *v = v.max(E::ZERO);
        }
    }
    let t = Tensor::from_parts(tape.value(block_f).shape().to_vec(), out, false);
    tape.push(
        vec![block_f, shortcut],
        t,
        Box::new(CombineOp {
            placement: cfg.placement,
            lambda: cfg.lambda,
            post_relu,
            stats,
        }),
    )
}

struct CombineOp {
    placement: Placement,
    lambda: f64,
    post_relu: bool,
    stats: Option<(usize, Vec<(f64, f64)>)>,
}

impl<E: Elem> OpImpl<E> for CombineOp {
    fn name(&self) -> &'static str {
        "residual_combine"
    }
    fn backward(
        &self,
        g: &[E],
        out: &Tensor<E>,
        inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        // Gradient through the optional ReLU first.
        let masked: Vec<E> = if self.post_relu {
            g.iter()
                .zip(out.values())
                .map(|(&gv, &ov)| if ov > E::ZERO { gv } else { E::ZERO })
                .collect()
        } else {
            g.to_vec()
        };

        let simam_grad = |attended: &[E]| -> Vec<E> {
            let (hw, stats) = self.stats.as_ref().expect("stats saved at forward");
            let mut dx = vec![E::ZERO; attended.len()];
            dx.par_chunks_mut(*hw).enumerate().for_each(|(i, d)| {
                let (mean, v) = stats[i];
                grad_channel(
                    &masked[i * hw..(i + 1) * hw],
                    &attended[i * hw..(i + 1) * hw],
                    mean,
                    v,
                    self.lambda,
                    d,
                );
            });
            dx
        };

        let (df, ds) = match self.placement {
            Placement::PerBlockAdditive => {
                let ds = needs[1].then(|| {
                    let mut ds = simam_grad(inputs[1].values());
                    for (d, &m) in ds.iter_mut().zip(&masked) {
                        *d = d.add(m);
                    }
                    ds
                });
                (needs[0].then(|| masked.clone()), ds)
            }
            Placement::PerBlockResidual => {
                let df = needs[0].then(|| {
                    let mut df = simam_grad(inputs[0].values());
                    for (d, &m) in df.iter_mut().zip(&masked) {
                        *d = d.add(m);
                    }
                    df
                });
                (df, needs[1].then(|| masked.clone()))
            }
            Placement::AfterStage2 | Placement::None => (
                needs[0].then(|| masked.clone()),
                needs[1].then(|| masked.clone()),
            ),
        };
        vec![df, ds]
    }
}
