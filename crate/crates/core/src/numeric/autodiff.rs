//! Reverse-mode differentiation over the op graph embedded in tensors.

use std::collections::{BTreeMap, HashMap, HashSet};

use crate::scalar::Real;

use super::tensor::{GradKind, NumericError, Tensor};

/// Gradients keyed by tensor identity, produced by [`backward`].
pub struct Gradients<S: Real> {
    by_id: HashMap<u64, Tensor<S>>,
}

impl<S: Real> Gradients<S> {
    /// Gradient of the loss with respect to `t`, if `t` was reached.
    pub fn get(&self, t: &Tensor<S>) -> Option<&Tensor<S>> {
        self.by_id.get(&t.id())
    }

    /// Gradient for `t`, with zeros when the loss never touched it.
    pub fn get_or_zeros(&self, t: &Tensor<S>) -> Tensor<S> {
        match self.get(t) {
            Some(g) => g.clone(),
            None => Tensor::zeros(t.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

/// Named parameter store. Insertion marks tensors as differentiation roots;
/// names are unique and iterate in sorted order so that updates and
/// serialization are deterministic.
pub struct ParamSet<S: Real> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Real> Default for ParamSet<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Real> Clone for ParamSet<S> {
    fn clone(&self) -> Self {
        ParamSet { map: self.map.clone() }
    }
}

impl<S: Real> ParamSet<S> {
    pub fn new() -> Self {
        ParamSet { map: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<S>) -> Result<(), NumericError> {
        if self.map.contains_key(name) {
            return Err(NumericError::DuplicateParam { name: name.to_string() });
        }
        self.map.insert(name.to_string(), tensor.requires_grad());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<S>, NumericError> {
        self.map.get(name).ok_or_else(|| NumericError::UnknownParam { name: name.to_string() })
    }

    /// Replaces the value of an existing parameter (same shape required).
    pub fn set(&mut self, name: &str, tensor: Tensor<S>) -> Result<(), NumericError> {
        let slot = self.map.get_mut(name).ok_or_else(|| NumericError::UnknownParam { name: name.to_string() })?;
        if slot.shape() != tensor.shape() {
            return Err(NumericError::ShapeMismatch {
                op: "ParamSet::set",
                lhs: slot.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        *slot = tensor.requires_grad();
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<S>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn value_count(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// Postorder over the gradient-tracking subgraph reachable from `root`.
fn topo_order<S: Real>(root: &Tensor<S>) -> Vec<Tensor<S>> {
    enum Step<S: Real> {
        Enter(Tensor<S>),
        Exit(Tensor<S>),
    }
    let mut seen: HashSet<u64> = HashSet::new();
    let mut order = Vec::new();
    let mut stack = vec![Step::Enter(root.clone())];
    while let Some(step) = stack.pop() {
        match step {
            Step::Enter(t) => {
                if !t.tracks_grad() || !seen.insert(t.id()) {
                    continue;
                }
                stack.push(Step::Exit(t.clone()));
                if let GradKind::Node(node) = &t.inner.grad {
                    for input in &node.inputs {
                        stack.push(Step::Enter(input.clone()));
                    }
                }
            }
            Step::Exit(t) => order.push(t),
        }
    }
    order
}

fn accumulate<S: Real>(acc: &mut HashMap<u64, Vec<S>>, id: u64, partial: Vec<S>) {
    match acc.entry(id) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            let buf = e.get_mut();
            debug_assert_eq!(buf.len(), partial.len());
            for (a, p) in buf.iter_mut().zip(partial) {
                *a += p;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(partial);
        }
    }
}

/// Runs the backward pass from a scalar loss and returns gradients for every
/// reached differentiation root. Unreached roots are simply absent; callers
/// that need dense output use [`Gradients::get_or_zeros`] or [`grads_by_name`].
pub fn backward<S: Real>(loss: &Tensor<S>) -> Result<Gradients<S>, NumericError> {
    if loss.numel() != 1 {
        return Err(NumericError::NotScalar { shape: loss.shape().to_vec() });
    }
    let order = topo_order(loss);
    let mut acc: HashMap<u64, Vec<S>> = HashMap::new();
    acc.insert(loss.id(), vec![S::one()]);
    let mut leaf_grads: HashMap<u64, Tensor<S>> = HashMap::new();
    for t in order.iter().rev() {
        let Some(grad) = acc.remove(&t.id()) else { continue };
        match &t.inner.grad {
            GradKind::Node(node) => {
                let partials = (node.back)(&grad);
                debug_assert_eq!(partials.len(), node.inputs.len());
                for (input, partial) in node.inputs.iter().zip(partials) {
                    if let Some(p) = partial {
                        if input.tracks_grad() {
                            debug_assert_eq!(p.len(), input.numel());
                            accumulate(&mut acc, input.id(), p);
                        }
                    }
                }
            }
            GradKind::Leaf => {
                let g = Tensor::from_vec(t.shape().to_vec(), grad).expect("gradient matches leaf shape");
                leaf_grads.insert(t.id(), g);
            }
            GradKind::None => {}
        }
    }
    Ok(Gradients { by_id: leaf_grads })
}

/// Dense per-name gradient map over a parameter set: parameters the loss never
/// reached get zero gradients of the right shape.
pub fn grads_by_name<S: Real>(grads: &Gradients<S>, params: &ParamSet<S>) -> BTreeMap<String, Tensor<S>> {
    params
        .iter()
        .map(|(name, tensor)| (name.to_string(), grads.get_or_zeros(tensor)))
        .collect()
}
