//! Softmax cross-entropy over class logits.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tape::{OpImpl, Tape, Val};
use crate::tensor::Tensor;

/// Mean over the batch of `-log softmax(logits)[label]`, computed with the
/// max-shift so huge logits cannot overflow. Returns a `[1]` scalar. The
/// gradient is `(softmax - onehot) / N`.
pub fn softmax_cross_entropy<E: Elem>(
    tape: &mut Tape<E>,
    logits: Val,
    labels: &[usize],
) -> Result<Val> {
    let ls = tape.value(logits).shape().to_vec();
    if ls.len() != 2 {
        return Err(Error::op("softmax_cross_entropy", format!("logits must be [N,K], got {ls:?}")));
    }
    let (n, k) = (ls[0], ls[1]);
    if labels.len() != n {
        return Err(Error::op(
            "softmax_cross_entropy",
            format!("{} labels for batch of {n}", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::op(
            "softmax_cross_entropy",
            format!("label {bad} out of range for {k} classes"),
        ));
    }

    let lv = tape.value(logits).values();
    let mut probs = vec![E::ZERO; n * k];
    let mut total = 0.0f64;
    for (row_idx, row) in lv.chunks_exact(k).enumerate() {
        let mut mx = row[0].to_f64();
        for &v in row {
            mx = mx.max(v.to_f64());
        }
        let mut denom = 0.0f64;
        for &v in row {
            denom += (v.to_f64() - mx).exp();
        }
        let log_denom = denom.ln();
        for (j, &v) in row.iter().enumerate() {
            probs[row_idx * k + j] = E::from_f64(((v.to_f64() - mx) - log_denom).exp());
        }
        let z = lv[row_idx * k + labels[row_idx]].to_f64();
        total += log_denom - (z - mx);
    }
    let loss = Tensor::from_parts(vec![1], vec![E::from_f64(total / n as f64)], false);
    tape.push(
        vec![logits],
        loss,
        Box::new(SoftmaxCeOp {
            n,
            k,
            probs,
            labels: labels.to_vec(),
        }),
    )
}

struct SoftmaxCeOp<E: Elem> {
    n: usize,
    k: usize,
    probs: Vec<E>,
    labels: Vec<usize>,
}

impl<E: Elem> OpImpl<E> for SoftmaxCeOp<E> {
    fn name(&self) -> &'static str {
        "softmax_cross_entropy"
    }
    fn backward(
        &self,
        g: &[E],
        _out: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        if !needs[0] {
            return vec![None];
        }
        let scale = g[0].to_f64() / self.n as f64;
        let mut dl = vec![E::ZERO; self.n * self.k];
        for i in 0..self.n {
            for j in 0..self.k {
                let p = self.probs[i * self.k + j].to_f64();
                let onehot = if j == self.labels[i] { 1.0 } else { 0.0 };
                dl[i * self.k + j] = E::from_f64((p - onehot) * scale);
            }
        }
        vec![Some(dl)]
    }
}
