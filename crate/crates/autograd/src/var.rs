//! Graph nodes and reverse-mode gradient evaluation.
//!
//! Every backward rule is written in terms of `Var` operations, so gradients computed
//! with `create_graph = true` are themselves differentiable. This is what allows
//! differentiating through unrolled optimizer steps.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::tensor::Tensor;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<usize> = const { Cell::new(0) };
}

fn next_id() -> usize {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

pub fn is_grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Runs `f` with graph recording disabled; every `Var` created inside is a constant.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    struct Restore(bool);
    impl Drop for Restore {
        fn drop(&mut self) {
            GRAD_ENABLED.with(|g| g.set(self.0));
        }
    }
    let _restore = Restore(GRAD_ENABLED.with(|g| g.replace(false)));
    f()
}

pub(crate) trait Backward {
    fn name(&self) -> &'static str;
    /// Gradient contribution for each input, given the output gradient.
    fn backward(&self, grad: &Var, inputs: &[Var], output: &Var) -> Vec<Option<Var>>;
}

struct Node {
    id: usize,
    value: Tensor,
    requires_grad: bool,
    op: Option<Box<dyn Backward>>,
    inputs: Vec<Var>,
}

impl Drop for Node {
    // Iterative teardown: unrolled graphs can be deep enough to overflow the stack
    // with the default recursive drop.
    fn drop(&mut self) {
        let mut stack = std::mem::take(&mut self.inputs);
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.append(&mut node.inputs);
            }
        }
    }
}

/// A value in the computation graph.
///
/// Cloning is cheap (reference counted). Leaves created with [`Var::param`] track
/// gradients; [`Var::constant`] leaves do not.
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl Var {
    pub fn param(value: Tensor) -> Self {
        Self(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: true,
            op: None,
            inputs: Vec::new(),
        }))
    }

    pub fn constant(value: Tensor) -> Self {
        Self(Rc::new(Node {
            id: next_id(),
            value,
            requires_grad: false,
            op: None,
            inputs: Vec::new(),
        }))
    }

    pub fn scalar(value: f64) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    pub(crate) fn from_op(value: Tensor, op: impl Backward + 'static, inputs: Vec<Var>) -> Self {
        let requires_grad = is_grad_enabled() && inputs.iter().any(|v| v.requires_grad());
        if requires_grad {
            Self(Rc::new(Node {
                id: next_id(),
                value,
                requires_grad,
                op: Some(Box::new(op)),
                inputs,
            }))
        } else {
            Self::constant(value)
        }
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.value.numel()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.0.value.clone())
    }

    pub fn op_name(&self) -> Option<&'static str> {
        self.0.op.as_ref().map(|op| op.name())
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}({:?}", self.0.id, self.0.value)?;
        if let Some(name) = self.op_name() {
            write!(f, ", op={name}")?;
        }
        write!(f, ")")
    }
}

/// Gradients of the scalar `output` with respect to each of `wrt`.
///
/// Inputs that `output` does not depend on get zero gradients. With `create_graph`
/// the returned gradients are connected to the graph and can be differentiated again.
pub fn grad(output: &Var, wrt: &[Var], create_graph: bool) -> Vec<Var> {
    assert_eq!(output.numel(), 1, "grad() needs a scalar output, got {:?}", output.shape());
    if create_graph {
        grad_impl(output, wrt)
    } else {
        no_grad(|| grad_impl(output, wrt))
    }
}

fn grad_impl(output: &Var, wrt: &[Var]) -> Vec<Var> {
    let zeros = |v: &Var| Var::constant(Tensor::zeros(v.shape()));
    if !output.requires_grad() {
        return wrt.iter().map(zeros).collect();
    }

    // Post-order DFS over grad-requiring nodes gives a topological order.
    let mut order: Vec<Var> = Vec::new();
    let mut visited: HashMap<usize, ()> = HashMap::new();
    let mut stack: Vec<(Var, usize)> = vec![(output.clone(), 0)];
    visited.insert(output.id(), ());
    while let Some((node, child)) = stack.pop() {
        if child < node.0.inputs.len() {
            let next = node.0.inputs[child].clone();
            stack.push((node, child + 1));
            if next.requires_grad() && !visited.contains_key(&next.id()) {
                visited.insert(next.id(), ());
                stack.push((next, 0));
            }
        } else {
            order.push(node);
        }
    }

    let wanted: HashMap<usize, usize> = wrt.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();
    let mut results: Vec<Option<Var>> = vec![None; wrt.len()];
    let mut grads: HashMap<usize, Var> = HashMap::new();
    grads.insert(output.id(), Var::constant(Tensor::ones(output.shape())));

    for node in order.iter().rev() {
        let Some(g) = grads.remove(&node.id()) else { continue };
        if let Some(&slot) = wanted.get(&node.id()) {
            results[slot] = Some(g.clone());
        }
        let Some(op) = node.0.op.as_ref() else { continue };
        let input_grads = op.backward(&g, &node.0.inputs, node);
        debug_assert_eq!(input_grads.len(), node.0.inputs.len(), "{} backward arity", op.name());
        for (input, ig) in node.0.inputs.iter().zip(input_grads) {
            let Some(ig) = ig else { continue };
            if !input.requires_grad() {
                continue;
            }
            debug_assert_eq!(ig.shape(), input.shape(), "{} backward shape", op.name());
            let acc = match grads.remove(&input.id()) {
                Some(prev) => prev.add(&ig),
                None => ig,
            };
            grads.insert(input.id(), acc);
        }
    }

    // Duplicated entries in `wrt` share one slot in `wanted`; fill the rest.
    wrt.iter()
        .enumerate()
        .map(|(i, v)| {
            results[i]
                .take()
                .or_else(|| wanted.get(&v.id()).and_then(|&j| results.get(j).cloned().flatten()))
                .unwrap_or_else(|| zeros(v))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constants_have_no_grad() {
        let x = Var::constant(Tensor::scalar(2.0));
        let y = x.mul(&x);
        assert!(!y.requires_grad());
        let g = grad(&y, &[x.clone()], false);
        assert_eq!(g[0].item(), 0.0);
    }

    #[test]
    fn no_grad_blocks_recording() {
        let x = Var::param(Tensor::scalar(3.0));
        let y = no_grad(|| x.mul(&x));
        assert!(!y.requires_grad());
        assert!(is_grad_enabled());
    }

    #[test]
    fn second_derivative_of_cube() {
        let x = Var::param(Tensor::scalar(1.5));
        let y = x.mul(&x).mul(&x);
        let dy = grad(&y, &[x.clone()], true).remove(0);
        assert!((dy.item() - 3.0 * 1.5 * 1.5).abs() < 1e-12);
        let d2y = grad(&dy, &[x.clone()], false).remove(0);
        assert!((d2y.item() - 6.0 * 1.5).abs() < 1e-12);
    }

    #[test]
    fn deep_chain_drops_without_overflow() {
        let x = Var::param(Tensor::scalar(1.0));
        let mut y = x.clone();
        for _ in 0..200_000 {
            y = y.add_scalar(1e-6);
        }
        assert!((y.item() - 1.2).abs() < 1e-6);
        drop(y);
    }
}
