//! Minimal reverse-mode automatic differentiation over dense f32 tensors.
//!
//! Tensors are cheap `Rc` handles. Leaf tensors created with
//! [`Tensor::param`] accumulate gradients; every op attaches a graph node
//! to its output when some input needs a gradient (and gradient recording
//! is enabled, see [`no_grad`]). [`Tensor::backward`] walks the graph once
//! in reverse topological order.
//!
//! Quantization ops install their own backward rules through
//! [`custom_grad`], which records a caller-supplied backward function and
//! forward-time context instead of differentiating the forward body.

mod conv;
mod norm;
mod ops;
mod optim;

pub use optim::{lr_schedule, Sgd};

use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Runs `f` with gradient recording disabled (evaluation / export paths).
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub(crate) fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

type BackwardFn = Box<dyn Fn(&[f32]) -> Result<Vec<Option<Vec<f32>>>>>;

/// Backward rule plus the parent tensors it differentiates with respect to.
///
/// The closure receives the upstream gradient (shaped like the node's
/// output) and returns one gradient per input, `None` for inputs that do
/// not participate. Forward-time context lives in the closure's captures.
struct GraphNode {
    inputs: Vec<Tensor>,
    backward: BackwardFn,
}

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    requires_grad: bool,
    node: Option<GraphNode>,
}

/// Dense row-major f32 tensor with optional gradient and graph linkage.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("has_node", &self.inner.node.is_some())
            .finish()
    }
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn new_inner(
        data: Vec<f32>,
        shape: Vec<usize>,
        requires_grad: bool,
        node: Option<GraphNode>,
    ) -> Tensor {
        debug_assert_eq!(data.len(), numel_of(&shape));
        Tensor {
            inner: Rc::new(TensorInner {
                shape,
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                node,
            }),
        }
    }

    /// A constant tensor (no gradient).
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(Error::contract(
                "from_vec",
                format!("data length {} != product of shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor::new_inner(data, shape.to_vec(), false, None))
    }

    /// A scalar constant.
    pub fn scalar(value: f32) -> Tensor {
        Tensor::new_inner(vec![value], vec![1], false, None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_inner(vec![0.0; numel_of(shape)], shape.to_vec(), false, None)
    }

    /// A trainable leaf: gradients accumulate here across backward passes.
    pub fn param(data: Vec<f32>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(Error::contract(
                "param",
                format!("data length {} != product of shape {:?}", data.len(), shape),
            ));
        }
        Ok(Tensor::new_inner(data, shape.to_vec(), true, None))
    }

    fn from_op(data: Vec<f32>, shape: Vec<usize>, node: Option<GraphNode>) -> Tensor {
        Tensor::new_inner(data, shape, false, node)
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        numel_of(&self.inner.shape)
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    /// True when backward will produce or propagate a gradient through this tensor.
    pub(crate) fn tracks_grad(&self) -> bool {
        self.inner.requires_grad || self.inner.node.is_some()
    }

    pub fn data(&self) -> std::cell::Ref<'_, Vec<f32>> {
        self.inner.data.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f32 {
        let d = self.inner.data.borrow();
        debug_assert_eq!(d.len(), 1);
        d[0]
    }

    /// Overwrites the stored values. Only sensible on leaves between steps.
    pub fn set_data(&self, values: &[f32]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    /// In-place update of the stored values (optimizer use).
    pub fn update_data(&self, f: impl FnOnce(&mut [f32])) {
        f(&mut self.inner.data.borrow_mut());
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    fn ptr_id(&self) -> usize {
        Rc::as_ptr(&self.inner) as usize
    }

    fn accumulate_leaf_grad(&self, g: &[f32]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(existing) => {
                for (e, v) in existing.iter_mut().zip(g) {
                    *e += v;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse-mode sweep from a scalar loss. Every `requires_grad` leaf
    /// reachable from `self` receives (accumulates) its gradient.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape()),
            ));
        }

        // Post-order DFS over tensors that carry nodes; reversed, this
        // visits each node exactly once with all consumers done first.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<usize, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, processed)) = stack.pop() {
            if processed {
                order.push(t);
                continue;
            }
            if t.inner.node.is_none() || visited.contains_key(&t.ptr_id()) {
                continue;
            }
            visited.insert(t.ptr_id(), ());
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for input in &node.inputs {
                    stack.push((input.clone(), false));
                }
            }
        }

        let mut grads: HashMap<usize, Vec<f32>> = HashMap::new();
        grads.insert(self.ptr_id(), vec![1.0]);
        if self.inner.node.is_none() {
            if self.inner.requires_grad {
                self.accumulate_leaf_grad(&[1.0]);
            }
            return Ok(());
        }

        for t in order.iter().rev() {
            let upstream = match grads.remove(&t.ptr_id()) {
                Some(g) => g,
                None => continue, // not on a path from the loss
            };
            let node = t.inner.node.as_ref().expect("ordered tensors carry nodes");
            let input_grads = (node.backward)(&upstream)?;
            if input_grads.len() != node.inputs.len() {
                return Err(Error::contract(
                    "backward",
                    format!(
                        "backward rule produced {} gradients for {} inputs",
                        input_grads.len(),
                        node.inputs.len()
                    ),
                ));
            }
            for (input, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if ig.len() != input.numel() {
                    return Err(Error::shape("backward", &[ig.len()], input.shape()));
                }
                if input.inner.node.is_some() {
                    match grads.get_mut(&input.ptr_id()) {
                        Some(existing) => {
                            for (e, v) in existing.iter_mut().zip(&ig) {
                                *e += v;
                            }
                        }
                        None => {
                            grads.insert(input.ptr_id(), ig);
                        }
                    }
                } else if input.inner.requires_grad {
                    input.accumulate_leaf_grad(&ig);
                }
            }
        }
        Ok(())
    }
}

/// Builds an op output: attaches a node when recording is on and some
/// input tracks gradients.
pub(crate) fn op_output(
    inputs: Vec<Tensor>,
    data: Vec<f32>,
    shape: Vec<usize>,
    backward: impl Fn(&[f32]) -> Result<Vec<Option<Vec<f32>>>> + 'static,
) -> Tensor {
    let record = grad_enabled() && inputs.iter().any(|t| t.tracks_grad());
    let node = record.then(|| GraphNode {
        inputs,
        backward: Box::new(backward),
    });
    Tensor::from_op(data, shape, node)
}

/// An op with a caller-supplied backward rule.
///
/// `forward` maps the input buffers to output data, output shape, and a
/// saved context; `backward` maps (upstream gradient, saved context) to
/// one optional gradient per input, bypassing autodiff of the forward
/// body entirely. Gradient shapes are checked against the inputs during
/// the backward sweep.
pub fn custom_grad<S, Fw, Bw>(inputs: &[&Tensor], forward: Fw, backward: Bw) -> Result<Tensor>
where
    S: 'static,
    Fw: FnOnce(&[&[f32]]) -> Result<(Vec<f32>, Vec<usize>, S)>,
    Bw: Fn(&[f32], &S) -> Vec<Option<Vec<f32>>> + 'static,
{
    let borrowed: Vec<std::cell::Ref<'_, Vec<f32>>> = inputs.iter().map(|t| t.data()).collect();
    let views: Vec<&[f32]> = borrowed.iter().map(|d| d.as_slice()).collect();
    let (data, shape, saved) = forward(&views)?;
    if data.len() != numel_of(&shape) {
        return Err(Error::contract(
            "custom_grad",
            format!(
                "forward produced {} values for shape {:?}",
                data.len(),
                shape
            ),
        ));
    }
    drop(borrowed);
    let owned: Vec<Tensor> = inputs.iter().map(|t| (*t).clone()).collect();
    Ok(op_output(owned, data, shape, move |up| {
        Ok(backward(up, &saved))
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn leaf_grad_accumulates_across_uses() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.mul(&x).unwrap(); // x^2
        let loss = y.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0]);

        // Using a tensor twice doubles its gradient vs once.
        x.zero_grad();
        let z = x.add(&x).unwrap();
        let loss = z.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = Tensor::param(vec![3.0], &[1]).unwrap();
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![12.0]); // 2 * (2x)
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.add(&x).unwrap();
        assert!(matches!(y.backward(), Err(Error::Contract { .. })));
    }

    #[test]
    fn dead_relu_has_zero_grad() {
        let x = Tensor::param(vec![-1.0], &[1]).unwrap();
        let y = x.relu().unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn custom_grad_overrides_backward() {
        // identity forward, backward g -> 2g
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let y = custom_grad(
            &[&x],
            |ins| Ok((ins[0].to_vec(), vec![1], ())),
            |up, _| vec![Some(up.iter().map(|g| 2.0 * g).collect())],
        )
        .unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn custom_grad_round_with_identity_backward() {
        // round forward, pass-through backward: grad of sum(round(x)) is ones
        let x = Tensor::param(vec![0.2, 1.7, -0.6], &[3]).unwrap();
        let y = custom_grad(
            &[&x],
            |ins| Ok((ins[0].iter().map(|v| v.round()).collect(), vec![3], ())),
            |up, _| vec![Some(up.to_vec())],
        )
        .unwrap();
        assert_eq!(y.to_vec(), vec![0.0, 2.0, -1.0]);
        let loss = y.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn custom_grad_floor_with_zero_backward() {
        let x = Tensor::param(vec![0.9, -0.1], &[2]).unwrap();
        let y = custom_grad(
            &[&x],
            |ins| Ok((ins[0].iter().map(|v| v.floor()).collect(), vec![2], ())),
            |up, _| vec![Some(vec![0.0; up.len()])],
        )
        .unwrap();
        let loss = y.sum().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn custom_grad_shape_mismatch_is_reported() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let y = custom_grad(
            &[&x],
            |ins| Ok((ins[0].to_vec(), vec![2], ())),
            |_, _| vec![Some(vec![1.0])], // wrong length
        )
        .unwrap();
        let loss = y.sum().unwrap();
        assert!(matches!(loss.backward(), Err(Error::Shape { .. })));
    }

    #[test]
    fn no_grad_suppresses_nodes() {
        let x = Tensor::param(vec![1.0], &[1]).unwrap();
        let y = no_grad(|| x.mul(&x).unwrap());
        assert!(y.inner.node.is_none());
    }
}
