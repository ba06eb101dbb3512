//! Finite-difference gradient verification.
//!
//! Compares the tape's analytic gradients against central differences
//! `(f(x+eps) - f(x-eps)) / (2 eps)` coordinate by coordinate and reports the
//! worst relative error `|a - n| / max(1, |a|, |n|)`. Meaningful in double
//! precision; single precision drowns the difference quotient in rounding
//! error.

use rand::Rng;

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::rng::derive_rng;
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-4;

/// Checks every coordinate of every input. `f` must be deterministic: it is
/// evaluated twice at the base point and the two loss values must agree
/// bitwise.
pub fn grad_check<E, F>(f: F, inputs: &[Tensor<E>], eps: f64) -> Result<f64>
where
    E: Elem,
    F: Fn(&mut Tape<E>, &[Val]) -> Result<Val>,
{
    let all: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| (0..t.len()).collect())
        .collect();
    grad_check_coords(f, inputs, eps, &all)
}

/// Like [`grad_check`] but probes at most `max_coords` randomly chosen
/// coordinates per input (deterministic in `seed`). For large models checking
/// every coordinate is quadratic in the forward cost; a sampled subset still
/// catches wiring mistakes.
pub fn grad_check_sampled<E, F>(
    f: F,
    inputs: &[Tensor<E>],
    eps: f64,
    max_coords: usize,
    seed: u64,
) -> Result<f64>
where
    E: Elem,
    F: Fn(&mut Tape<E>, &[Val]) -> Result<Val>,
{
    let mut rng = derive_rng(seed, "grad_check_sampled", 0);
    let coords: Vec<Vec<usize>> = inputs
        .iter()
        .map(|t| {
            if t.len() <= max_coords {
                (0..t.len()).collect()
            } else {
                let mut idx: Vec<usize> = (0..t.len()).collect();
                // partial Fisher-Yates: the first max_coords entries
                for i in 0..max_coords {
                    let j = rng.gen_range(i..idx.len());
                    idx.swap(i, j);
                }
                idx.truncate(max_coords);
                idx.sort_unstable();
                idx
            }
        })
        .collect();
    grad_check_coords(f, inputs, eps, &coords)
}

fn grad_check_coords<E, F>(
    f: F,
    inputs: &[Tensor<E>],
    eps: f64,
    coords: &[Vec<usize>],
) -> Result<f64>
where
    E: Elem,
    F: Fn(&mut Tape<E>, &[Val]) -> Result<Val>,
{
    if eps <= 0.0 {
        return Err(Error::op("grad_check", "eps must be positive"));
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let vals: Vec<Val> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(true);
            tape.leaf(t)
        })
        .collect();
    let loss = f(&mut tape, &vals)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::NonScalarLoss(tape.value(loss).shape().to_vec()));
    }
    let base = tape.value(loss).values()[0].to_f64();
    tape.backward(loss)?;
    let analytic: Vec<Vec<E>> = vals
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![E::ZERO; t.len()])
        })
        .collect();

    // Determinism probe: a second evaluation must reproduce the loss exactly.
    let again = eval_loss(&f, inputs)?;
    if again != base {
        return Err(Error::op(
            "grad_check",
            format!("function is not deterministic: {base} vs {again}"),
        ));
    }

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor<E>> = inputs.to_vec();
    for (i, coord_list) in coords.iter().enumerate() {
        for &c in coord_list {
            let orig = inputs[i].values()[c];
            probe[i].values_mut()[c] = E::from_f64(orig.to_f64() + eps);
            let plus = eval_loss(&f, &probe)?;
            probe[i].values_mut()[c] = E::from_f64(orig.to_f64() - eps);
            let minus = eval_loss(&f, &probe)?;
            probe[i].values_mut()[c] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[i][c].to_f64();
            let err = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

fn eval_loss<E, F>(f: &F, inputs: &[Tensor<E>]) -> Result<f64>
where
    E: Elem,
    F: Fn(&mut Tape<E>, &[Val]) -> Result<Val>,
{
    let mut tape = Tape::new();
    let vals: Vec<Val> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.set_requires_grad(false);
            tape.leaf(t)
        })
        .collect();
    let loss = f(&mut tape, &vals)?;
    Ok(tape.value(loss).values()[0].to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exactly_linear() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.2, 2.0, 0.7, -0.1, 1.5], false).unwrap();
        let err = grad_check(|t, v| t.sum_all(v[0]), &[x], DEFAULT_EPS).unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn relu_away_from_kink() {
        let x = Tensor::new(&[5], vec![-1.0, -0.3, 0.2, 1.0, 2.5], false).unwrap();
        let err = grad_check(
            |t, v| {
                let r = t.relu(v[0])?;
                t.sum_all(r)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-6, "err = {err}");
    }

    #[test]
    fn product_fanout() {
        // loss = sum(x * x): gradient 2x
        let x = Tensor::new(&[3], vec![1.5, -2.0, 0.25], false).unwrap();
        let err = grad_check(
            |t, v| {
                let p = t.mul(v[0], v[0])?;
                t.sum_all(p)
            },
            &[x],
            DEFAULT_EPS,
        )
        .unwrap();
        assert!(err < 1e-8, "err = {err}");
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::new(&[1], vec![1.0], false).unwrap();
        assert!(grad_check(|t, v| t.sum_all(v[0]), &[x], 0.0).is_err());
    }
}
