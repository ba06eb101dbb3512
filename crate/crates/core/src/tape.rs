//! Reverse-mode automatic differentiation over a linear tape.
//!
//! A [`Tape`] records every executed operation in topological order: inputs
//! always precede the node that consumes them, because [`Val`] handles can
//! only refer to nodes already pushed. [`Tape::backward`] walks the record
//! once in reverse, accumulating gradients additively across fan-out, and
//! refuses to run twice on the same forward pass.
//!
//! Primitive elementwise/matrix/reduction ops live here; fused layer ops
//! (convolution, batch norm, pooling, losses, attention) implement [`OpImpl`]
//! in their own modules and register nodes through [`Tape::push`].

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::gemm;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Val(pub(crate) usize);

/// Backward rule for one recorded operation.
pub trait OpImpl<E: Elem>: Send {
    fn name(&self) -> &'static str;

    /// Given the output gradient, produce one gradient per input.
    /// `needs[i]` is false when input `i` does not require a gradient; the
    /// implementation may return `None` for it.
    fn backward(
        &self,
        grad_out: &[E],
        out: &Tensor<E>,
        inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>>;
}

struct Node<E: Elem> {
    value: Tensor<E>,
    inputs: Vec<Val>,
    op: Option<Box<dyn OpImpl<E>>>,
    needs_grad: bool,
    grad: Option<Vec<E>>,
}

pub struct Tape<E: Elem> {
    nodes: Vec<Node<E>>,
    backward_done: bool,
}

impl<E: Elem> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> Tape<E> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a leaf tensor. Its `requires_grad` flag decides whether
    /// `backward` will leave a gradient on it.
    pub fn leaf(&mut self, t: Tensor<E>) -> Val {
        let needs = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            inputs: Vec::new(),
            op: None,
            needs_grad: needs,
            grad: None,
        });
        Val(self.nodes.len() - 1)
    }

    /// Registers a computed node. Checks the all-finite invariant on the
    /// fresh output.
    pub fn push(
        &mut self,
        inputs: Vec<Val>,
        value: Tensor<E>,
        op: Box<dyn OpImpl<E>>,
    ) -> Result<Val> {
        value.check_finite().map_err(|e| match e {
            Error::NonFinite { index } => Error::op(
                op.name(),
                format!("non-finite output at flat index {index}"),
            ),
            other => other,
        })?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            inputs,
            op: Some(op),
            needs_grad,
            grad: None,
        });
        Ok(Val(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Val) -> &Tensor<E> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` with respect to node `v`.
    /// Present only on nodes that required a gradient; for leaves this is
    /// d(loss)/d(leaf).
    pub fn grad(&self, v: Val) -> Option<&[E]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// The node's value with its gradient attached, mirroring the
    /// shape/length contract of the tensor type.
    pub fn value_with_grad(&self, v: Val) -> Result<Tensor<E>> {
        let node = &self.nodes[v.0];
        match &node.grad {
            Some(g) => node.value.with_grad(g.clone()),
            None => Ok(node.value.clone()),
        }
    }

    /// Reverse pass from a scalar loss. Every leaf with `requires_grad`
    /// receives `d loss / d leaf`; fan-out contributions sum. Exactly one
    /// traversal is allowed per recorded forward pass.
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        self.backward_done = true;
        if !loss_node.needs_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![E::ONE]);

        for i in (0..=loss.0).rev() {
            if self.nodes[i].op.is_none() {
                continue; // leaf: keep its accumulated gradient
            }
            let Some(grad_out) = self.nodes[i].grad.take() else {
                continue;
            };
            let node = &self.nodes[i];
            let input_vals = node.inputs.clone();
            let needs: Vec<bool> = input_vals
                .iter()
                .map(|v| self.nodes[v.0].needs_grad)
                .collect();
            if !needs.iter().any(|&b| b) {
                continue;
            }
            let inputs: Vec<&Tensor<E>> =
                input_vals.iter().map(|v| &self.nodes[v.0].value).collect();
            let grads = node
                .op
                .as_ref()
                .expect("non-leaf")
                .backward(&grad_out, &node.value, &inputs, &needs);
            debug_assert_eq!(grads.len(), input_vals.len());
            drop(grad_out);
            for (v, g) in input_vals.iter().zip(grads) {
                let Some(g) = g else { continue };
                if !self.nodes[v.0].needs_grad {
                    continue;
                }
                debug_assert_eq!(g.len(), self.nodes[v.0].value.len());
                match &mut self.nodes[v.0].grad {
                    Some(acc) => {
                        for (dst, src) in acc.iter_mut().zip(&g) {
                            *dst = dst.add(*src);
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(())
    }

    // ----- elementwise ops ---------------------------------------------

    fn binary(
        &mut self,
        _name: &'static str,
        a: Val,
        b: Val,
        f: impl Fn(E, E) -> E,
        op: Box<dyn OpImpl<E>>,
    ) -> Result<Val> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.check_same_shape(tb)
            .map_err(|_| Error::ShapeMismatch {
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            })?;
        let out: Vec<E> = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), out, false);
        self.push(vec![a, b], t, op)
    }

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("add", a, b, |x, y| x.add(y), Box::new(AddOp))
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("sub", a, b, |x, y| x.sub(y), Box::new(SubOp))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        self.binary("mul", a, b, |x, y| x.mul(y), Box::new(MulOp))
    }

    /// `alpha * x` with a compile-time scalar.
    pub fn scale(&mut self, x: Val, alpha: E) -> Result<Val> {
        let t = self.value(x);
        let out: Vec<E> = t.values().iter().map(|&v| v.mul(alpha)).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), out, false);
        self.push(vec![x], t, Box::new(ScaleOp { alpha }))
    }

    pub fn relu(&mut self, x: Val) -> Result<Val> {
        let t = self.value(x);
        let out: Vec<E> = t.values().iter().map(|&v| v.max(E::ZERO)).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), out, false);
        self.push(vec![x], t, Box::new(ReluOp))
    }

    pub fn sigmoid(&mut self, x: Val) -> Result<Val> {
        let t = self.value(x);
        let out: Vec<E> = t.values().iter().map(|&v| v.sigmoid()).collect();
        let t = Tensor::from_parts(t.shape().to_vec(), out, false);
        self.push(vec![x], t, Box::new(SigmoidOp))
    }

    // ----- matmul --------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::op(
                "matmul",
                format!("incompatible shapes {sa:?} x {sb:?}"),
            ));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![E::ZERO; m * n];
        gemm::gemm_nn(m, k, n, ta.values(), tb.values(), &mut out);
        let t = Tensor::from_parts(vec![m, n], out, false);
        self.push(vec![a, b], t, Box::new(MatmulOp { m, k, n }))
    }

    // ----- reductions ----------------------------------------------------

    /// Reduces over `axes`, keeping each reduced extent as 1.
    pub fn reduce(&mut self, kind: ReduceKind, x: Val, axes: &[usize]) -> Result<Val> {
        let t = self.value(x);
        let plan = ReducePlan::new(t.shape(), axes)?;
        if matches!(kind, ReduceKind::VarSample) && plan.group < 2 {
            return Err(Error::op(
                "reduce",
                "var_sample needs more than one element along the reduced axes",
            ));
        }
        let out = plan.apply(kind, t.values());
        let t = Tensor::from_parts(plan.out_shape.clone(), out, false);
        self.push(vec![x], t, Box::new(ReduceOp { kind, plan }))
    }

    /// Sum of all elements as a `[1]` scalar; the usual test loss.
    pub fn sum_all(&mut self, x: Val) -> Result<Val> {
        let rank = self.value(x).shape().len();
        let axes: Vec<usize> = (0..rank).collect();
        let s = self.reduce(ReduceKind::Sum, x, &axes)?;
        self.reshape(s, &[1])
    }

    pub fn mean_all(&mut self, x: Val) -> Result<Val> {
        let rank = self.value(x).shape().len();
        let axes: Vec<usize> = (0..rank).collect();
        let s = self.reduce(ReduceKind::Mean, x, &axes)?;
        self.reshape(s, &[1])
    }

    // ----- shape ---------------------------------------------------------

    pub fn reshape(&mut self, x: Val, shape: &[usize]) -> Result<Val> {
        let t = self.value(x).reshaped(shape)?;
        let from = self.value(x).shape().to_vec();
        self.push(vec![x], t, Box::new(ReshapeOp { from }))
    }
}

// ----- primitive op backward rules --------------------------------------

struct AddOp;
impl<E: Elem> OpImpl<E> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(
        &self,
        g: &[E],
        _out: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.to_vec()),
        ]
    }
}

struct SubOp;
impl<E: Elem> OpImpl<E> for SubOp {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn backward(
        &self,
        g: &[E],
        _out: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![
            needs[0].then(|| g.to_vec()),
            needs[1].then(|| g.iter().map(|&v| v.neg()).collect()),
        ]
    }
}

struct MulOp;
impl<E: Elem> OpImpl<E> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(
        &self,
        g: &[E],
        _out: &Tensor<E>,
        inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let (a, b) = (inputs[0].values(), inputs[1].values());
        vec![
            needs[0].then(|| g.iter().zip(b).map(|(&gv, &bv)| gv.mul(bv)).collect()),
            needs[1].then(|| g.iter().zip(a).map(|(&gv, &av)| gv.mul(av)).collect()),
        ]
    }
}

struct ScaleOp<E: Elem> {
    alpha: E,
}
impl<E: Elem> OpImpl<E> for ScaleOp<E> {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn backward(
        &self,
        g: &[E],
        _out: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| g.iter().map(|&v| v.mul(self.alpha)).collect())]
    }
}

struct ReluOp;
impl<E: Elem> OpImpl<E> for ReluOp {
    fn name(&self) -> &'static str {
        "relu"
    }
    fn backward(
        &self,
        g: &[E],
        out: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        // Gradient passes where the input was strictly positive; exact zeros
        // (including the tie at 0) pass zero.
        vec![needs[0].then(|| {
            g.iter()
                .zip(out.values())
                .map(|(&gv, &ov)| if ov > E::ZERO { gv } else { E::ZERO })
                .collect()
        })]
    }
}

struct SigmoidOp;
impl<E: Elem> OpImpl<E> for SigmoidOp {
    fn name(&self) -> &'static str {
        "sigmoid"
    }
    fn backward(
        &self,
        g: &[E],
        out: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        vec![needs[0].then(|| {
            g.iter()
                .zip(out.values())
                .map(|(&gv, &y)| gv.mul(y).mul(E::ONE.sub(y)))
                .collect()
        })]
    }
}

struct MatmulOp {
    m: usize,
    k: usize,
    n: usize,
}
impl<E: Elem> OpImpl<E> for MatmulOp {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn backward(
        &self,
        g: &[E],
        _out: &Tensor<E>,
        inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let (m, k, n) = (self.m, self.k, self.n);
        let da = needs[0].then(|| {
            let mut da = vec![E::ZERO; m * k];
            gemm::gemm_nt(m, n, k, g, inputs[1].values(), &mut da);
            da
        });
        let db = needs[1].then(|| {
            let mut db = vec![E::ZERO; k * n];
            gemm::gemm_tn(k, m, n, inputs[0].values(), g, &mut db);
            db
        });
        vec![da, db]
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    VarPop,
    VarSample,
}

/// Precomputed index mapping for a keep-as-1 reduction.
struct ReducePlan {
    in_shape: Vec<usize>,
    out_shape: Vec<usize>,
    reduced: Vec<bool>,
    /// number of input elements folded into each output cell
    group: usize,
}

impl ReducePlan {
    fn new(shape: &[usize], axes: &[usize]) -> Result<Self> {
        let rank = shape.len();
        let mut reduced = vec![false; rank];
        for &ax in axes {
            if ax >= rank {
                return Err(Error::op(
                    "reduce",
                    format!("axis {ax} out of range for rank {rank}"),
                ));
            }
            if reduced[ax] {
                return Err(Error::op("reduce", format!("duplicate axis {ax}")));
            }
            reduced[ax] = true;
        }
        if axes.is_empty() {
            return Err(Error::op("reduce", "no axes given"));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .zip(&reduced)
            .map(|(&e, &r)| if r { 1 } else { e })
            .collect();
        let group = shape
            .iter()
            .zip(&reduced)
            .filter(|(_, &r)| r)
            .map(|(&e, _)| e)
            .product();
        Ok(Self {
            in_shape: shape.to_vec(),
            out_shape,
            reduced,
            group,
        })
    }

    /// Output flat index for each input flat index, iterating in input order.
    fn map_index(&self, mut flat: usize) -> usize {
        let rank = self.in_shape.len();
        let mut out = 0usize;
        let mut out_stride = 1usize;
        // walk axes from last to first building the output flat index
        let mut idx = vec![0usize; rank];
        for ax in (0..rank).rev() {
            idx[ax] = flat % self.in_shape[ax];
            flat /= self.in_shape[ax];
        }
        for ax in (0..rank).rev() {
            let coord = if self.reduced[ax] { 0 } else { idx[ax] };
            out += coord * out_stride;
            out_stride *= self.out_shape[ax];
        }
        out
    }

    fn apply<E: Elem>(&self, kind: ReduceKind, x: &[E]) -> Vec<E> {
        let out_len: usize = self.out_shape.iter().product();
        let mut sum = vec![E::ZERO; out_len];
        for (i, &v) in x.iter().enumerate() {
            let o = self.map_index(i);
            sum[o] = sum[o].add(v);
        }
        let m = E::from_f64(self.group as f64);
        match kind {
            ReduceKind::Sum => sum,
            ReduceKind::Mean => sum.iter().map(|&s| s.div(m)).collect(),
            ReduceKind::VarPop | ReduceKind::VarSample => {
                let mean: Vec<E> = sum.iter().map(|&s| s.div(m)).collect();
                let mut ss = vec![E::ZERO; out_len];
                for (i, &v) in x.iter().enumerate() {
                    let o = self.map_index(i);
                    let d = v.sub(mean[o]);
                    ss[o] = d.mul_add(d, ss[o]);
                }
                let div = match kind {
                    ReduceKind::VarPop => m,
                    _ => E::from_f64((self.group - 1) as f64),
                };
                ss.iter().map(|&s| s.div(div)).collect()
            }
        }
    }
}

struct ReduceOp {
    kind: ReduceKind,
    plan: ReducePlan,
}

impl<E: Elem> OpImpl<E> for ReduceOp {
    fn name(&self) -> &'static str {
        "reduce"
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
        let m = E::from_f64(self.plan.group as f64);
        let dx = match self.kind {
            ReduceKind::Sum => x
                .iter()
                .enumerate()
                .map(|(i, _)| g[self.plan.map_index(i)])
                .collect(),
            ReduceKind::Mean => x
                .iter()
                .enumerate()
                .map(|(i, _)| g[self.plan.map_index(i)].div(m))
                .collect(),
            ReduceKind::VarPop | ReduceKind::VarSample => {
                // d var / d x_i = 2 (x_i - mean) / divisor
                let out_len: usize = self.plan.out_shape.iter().product();
                let mut sum = vec![E::ZERO; out_len];
                for (i, &v) in x.iter().enumerate() {
                    let o = self.plan.map_index(i);
                    sum[o] = sum[o].add(v);
                }
                let mean: Vec<E> = sum.iter().map(|&s| s.div(m)).collect();
                let div = match self.kind {
                    ReduceKind::VarPop => m,
                    _ => E::from_f64((self.plan.group - 1) as f64),
                };
                let two = E::from_f64(2.0);
                x.iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let o = self.plan.map_index(i);
                        g[o].mul(two).mul(v.sub(mean[o])).div(div)
                    })
                    .collect()
            }
        };
        vec![Some(dx)]
    }
}

struct ReshapeOp {
    from: Vec<usize>,
}
impl<E: Elem> OpImpl<E> for ReshapeOp {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn backward(
        &self,
        g: &[E],
        _out: &Tensor<E>,
        _inputs: &[&Tensor<E>],
        needs: &[bool],
    ) -> Vec<Option<Vec<E>>> {
        let _ = &self.from;
        vec![needs[0].then(|| g.to_vec())]
    }
}
