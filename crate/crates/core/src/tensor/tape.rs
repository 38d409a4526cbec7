use std::cell::RefCell;
use std::fmt;
use std::sync::Arc;

use super::{ops, Element, Tensor};
use crate::error::{LevitError, Result};

type Backward<E> = Box<dyn Fn(&Tensor<E>) -> Result<Vec<Option<Tensor<E>>>>>;

struct Node<E: Element> {
    value: Tensor<E>,
    parents: Vec<usize>,
    backward: Option<Backward<E>>,
    requires_grad: bool,
}

/// Records operations in creation order, which is a topological order of the
/// graph, so backward is a single reverse sweep.
///
/// A tape built with [`Tape::inference`] never stores backward closures.
pub struct Tape<E: Element = f32> {
    nodes: RefCell<Vec<Node<E>>>,
    grad_enabled: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    pub fn inference() -> Self {
        Self { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, node: Node<E>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// A leaf that receives a gradient.
    pub fn param(&self, value: Tensor<E>) -> Var<'_, E> {
        let id = self.push(Node { value, parents: Vec::new(), backward: None, requires_grad: self.grad_enabled });
        Var { tape: self, id }
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        let id = self.push(Node { value, parents: Vec::new(), backward: None, requires_grad: false });
        Var { tape: self, id }
    }

    fn record<F>(&self, value: Tensor<E>, parents: &[Var<'_, E>], backward: F) -> Var<'_, E>
    where
        F: Fn(&Tensor<E>) -> Result<Vec<Option<Tensor<E>>>> + 'static,
    {
        let requires_grad = self.grad_enabled && parents.iter().any(|p| p.requires_grad());
        let node = if requires_grad {
            Node {
                value,
                parents: parents.iter().map(|p| p.id).collect(),
                backward: Some(Box::new(backward)),
                requires_grad,
            }
        } else {
            Node { value, parents: Vec::new(), backward: None, requires_grad }
        };
        Var { tape: self, id: self.push(node) }
    }

    /// Reverse sweep from a single-element output. Every recorded operation
    /// is visited once; gradients from fan-out accumulate additively.
    pub fn backward(&self, output: Var<'_, E>) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape().to_vec();
        if nodes[output.id].value.numel() != 1 {
            return Err(LevitError::NonScalarBackward(out_shape));
        }
        let mut grads: Vec<Option<Tensor<E>>> = vec![None; nodes.len()];
        grads[output.id] = Some(Tensor::ones(&out_shape));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            let Some(backward) = node.backward.as_ref() else { continue };
            // interior gradients are consumed here; only leaves keep theirs
            let Some(grad) = grads[id].take() else { continue };
            let parent_grads = backward(&grad)?;
            for (&pid, pgrad) in node.parents.iter().zip(parent_grads) {
                let Some(pgrad) = pgrad else { continue };
                if !nodes[pid].requires_grad {
                    continue;
                }
                grads[pid] = Some(match grads[pid].take() {
                    Some(acc) => acc.add(&pgrad)?,
                    None => pgrad,
                });
            }
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, E: Element = f32> {
    tape: &'t Tape<E>,
    id: usize,
}

impl<E: Element> fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Accumulated leaf gradients from one backward sweep.
pub struct Gradients<E: Element> {
    grads: Vec<Option<Tensor<E>>>,
    shapes: Vec<Vec<usize>>,
}

impl<E: Element> Gradients<E> {
    pub fn get(&self, var: Var<'_, E>) -> Option<&Tensor<E>> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of a leaf; zeros when the output does not depend on it.
    pub fn wrt(&self, var: Var<'_, E>) -> Tensor<E> {
        self.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&self.shapes[var.id]))
    }
}

// `add`, `mul` and friends are fallible (shape checks), so the operator traits do not fit
#[allow(clippy::should_implement_trait)]
impl<'t, E: Element> Var<'t, E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn value(&self) -> Tensor<E> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    pub fn backward(&self) -> Result<Gradients<E>> {
        self.tape.backward(*self)
    }

    pub fn add(self, other: Var<'t, E>) -> Result<Self> {
        let y = self.value().add(&other.value())?;
        Ok(self.tape.record(y, &[self, other], |g| Ok(vec![Some(g.clone()), Some(g.clone())])))
    }

    pub fn mul(self, other: Var<'t, E>) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let y = a.mul(&b)?;
        Ok(self.tape.record(y, &[self, other], move |g| Ok(vec![Some(g.mul(&b)?), Some(g.mul(&a)?)])))
    }

    pub fn scale(self, factor: E) -> Self {
        let y = self.value().scale(factor);
        self.tape.record(y, &[self], move |g| Ok(vec![Some(g.scale(factor))]))
    }

    pub fn sum(self) -> Self {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.tape.record(y, &[self], move |g| Ok(vec![Some(Tensor::full(&shape, g.data()[0]))]))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let x = self.value();
        let orig = x.shape().to_vec();
        let y = x.reshape(shape)?;
        Ok(self.tape.record(y, &[self], move |g| Ok(vec![Some(g.reshape(&orig)?)])))
    }

    pub fn conv2d(self, weight: Var<'t, E>, stride: usize, padding: usize) -> Result<Self> {
        let (x, w) = (self.value(), weight.value());
        let y = ops::conv2d(&x, &w, None, stride, padding)?;
        Ok(self.tape.record(y, &[self, weight], move |g| {
            let (dx, dw) = ops::conv2d_backward(&x, &w, g, stride, padding)?;
            Ok(vec![Some(dx), Some(dw)])
        }))
    }

    pub fn add_channel_bias(self, bias: Var<'t, E>) -> Result<Self> {
        let y = ops::add_channel_bias(&self.value(), &bias.value())?;
        Ok(self.tape.record(y, &[self, bias], |g| Ok(vec![Some(g.clone()), Some(ops::channel_sum(g)?)])))
    }

    /// Train-mode batch norm; also returns the batch (mean, biased variance).
    pub fn batch_norm_train(self, gamma: Var<'t, E>, beta: Var<'t, E>, eps: E) -> Result<(Self, Vec<E>, Vec<E>)> {
        let gam = gamma.value();
        let trace = ops::batchnorm_train(&self.value(), &gam, &beta.value(), eps)?;
        let (normalized, inv_std) = (trace.normalized, trace.inv_std);
        let y = self.tape.record(trace.output, &[self, gamma, beta], move |g| {
            let (dx, dg, db) = ops::batchnorm_train_backward(g, &normalized, &gam, &inv_std)?;
            Ok(vec![Some(dx), Some(dg), Some(db)])
        });
        Ok((y, trace.mean, trace.var))
    }

    /// Eval-mode batch norm with fixed running statistics.
    pub fn batch_norm_eval(
        self,
        gamma: Var<'t, E>,
        beta: Var<'t, E>,
        mean: &Tensor<E>,
        var: &Tensor<E>,
        eps: E,
    ) -> Result<Self> {
        let x = self.value();
        let (scale, shift) = ops::batchnorm_eval_coefficients(&gamma.value(), &beta.value(), mean, var, eps);
        let y = ops::channel_affine(&x, &scale, &shift)?;
        let (mean, var) = (mean.data().to_vec(), var.data().to_vec());
        let (gamma_t, scale_c) = (gamma.value(), scale.clone());
        Ok(self.tape.record(y, &[self, gamma, beta], move |g| {
            let c = gamma_t.numel();
            let inv_std: Vec<E> = var.iter().map(|&v| E::one() / (v + eps).sqrt()).collect();
            let normalized_shift: Vec<E> = mean.iter().zip(&inv_std).map(|(&m, &s)| -m * s).collect();
            let normalized = ops::channel_affine(&x, &inv_std, &normalized_shift)?;
            let dx = ops::channel_affine(g, &scale_c, &vec![E::zero(); c])?;
            let dgamma = ops::channel_sum(&g.mul(&normalized)?)?;
            Ok(vec![Some(dx), Some(dgamma), Some(ops::channel_sum(g)?)])
        }))
    }

    /// Layer norm across channels at each site.
    pub fn layer_norm(self, gamma: Var<'t, E>, beta: Var<'t, E>, eps: E) -> Result<Self> {
        let gam = gamma.value();
        let trace = ops::layer_norm_channels(&self.value(), &gam, &beta.value(), eps)?;
        let (normalized, inv_std) = (trace.normalized, trace.inv_std);
        Ok(self.tape.record(trace.output, &[self, gamma, beta], move |g| {
            let (dx, dg, db) = ops::layer_norm_channels_backward(g, &normalized, &gam, &inv_std)?;
            Ok(vec![Some(dx), Some(dg), Some(db)])
        }))
    }

    pub fn hardswish(self) -> Self {
        let x = self.value();
        let y = ops::hardswish(&x);
        self.tape.record(y, &[self], move |g| {
            let d = x.map(ops::hardswish_grad_scalar);
            Ok(vec![Some(g.mul(&d)?)])
        })
    }

    pub fn softmax(self) -> Result<Self> {
        let y = ops::softmax_lastdim(&self.value())?;
        let out = y.clone();
        Ok(self.tape.record(y, &[self], move |g| Ok(vec![Some(ops::softmax_backward(&out, g)?)])))
    }

    pub fn matmul(self, other: Var<'t, E>, trans_a: bool, trans_b: bool) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let y = ops::matmul(&a, &b, trans_a, trans_b)?;
        Ok(self.tape.record(y, &[self, other], move |g| {
            let (da, db) = ops::matmul_backward(&a, &b, trans_a, trans_b, g)?;
            Ok(vec![Some(da), Some(db)])
        }))
    }

    pub fn avgpool_global(self) -> Result<Self> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = ops::avgpool_global(&x)?;
        Ok(self.tape.record(y, &[self], move |g| Ok(vec![Some(ops::avgpool_global_backward(&shape, g)?)])))
    }

    pub fn subsample(self, stride: usize) -> Result<Self> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = ops::subsample(&x, stride)?;
        Ok(self.tape.record(y, &[self], move |g| Ok(vec![Some(ops::subsample_backward(&shape, g, stride)?)])))
    }

    /// Treats `self` as a lookup table and gathers `index` into `shape`.
    pub fn gather(self, index: Arc<[usize]>, shape: &[usize]) -> Result<Self> {
        let table = self.value();
        let table_shape = table.shape().to_vec();
        let y = ops::gather(&table, &index, shape)?;
        Ok(self.tape.record(y, &[self], move |g| Ok(vec![Some(ops::scatter_add(&table_shape, &index, g)?)])))
    }

    /// `self + other` with `other` (leading extent 1) repeated over the batch.
    pub fn add_batch_broadcast(self, other: Var<'t, E>) -> Result<Self> {
        let y = ops::add_batch_broadcast(&self.value(), &other.value())?;
        Ok(self.tape.record(y, &[self, other], |g| Ok(vec![Some(g.clone()), Some(ops::sum_over_batch(g)?)])))
    }

    pub fn scale_per_sample(self, factors: Vec<E>) -> Result<Self> {
        let y = ops::scale_per_sample(&self.value(), &factors)?;
        Ok(self.tape.record(y, &[self], move |g| Ok(vec![Some(ops::scale_per_sample(g, &factors)?)])))
    }

    /// Mean cross entropy of (B, K) logits.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Self> {
        let (loss, probs) = ops::cross_entropy(&self.value(), labels)?;
        let labels = labels.to_vec();
        Ok(self.tape.record(Tensor::scalar(loss), &[self], move |g| {
            Ok(vec![Some(ops::cross_entropy_backward(&probs, &labels, g.data()[0])?)])
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2], &[1.0, 2.0]).unwrap());
        let loss = x.mul(x).unwrap().sum();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.wrt(x).data(), &[2.0, 4.0]);
    }

    #[test]
    fn hardswish_gradient_at_one() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(1.0));
        let grads = x.hardswish().sum().backward().unwrap();
        assert!((grads.wrt(x).data()[0] - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(x.hardswish().backward(), Err(LevitError::NonScalarBackward(_))));
    }

    #[test]
    fn unreachable_params_get_zero() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[3]));
        let unused = tape.param(Tensor::ones(&[2, 2]));
        let grads = x.sum().backward().unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused), Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn fan_out_accumulates() {
        let tape = Tape::<f64>::new();
        let x = tape.param(Tensor::from_f64(&[2], &[0.5, -1.0]).unwrap());
        let a = x.scale(3.0);
        let b = x.hardswish();
        let grads = a.add(b).unwrap().sum().backward().unwrap();
        let expected: Vec<f64> = [0.5f64, -1.0].iter().map(|&v| 3.0 + ops::hardswish_grad_scalar(v)).collect();
        assert_eq!(grads.wrt(x).data(), expected.as_slice());
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let tape = Tape::<f32>::inference();
        let x = tape.param(Tensor::ones(&[2]));
        assert!(!x.requires_grad());
        let y = x.hardswish().sum();
        let grads = y.backward().unwrap();
        assert!(grads.get(x).is_none());
    }
}
