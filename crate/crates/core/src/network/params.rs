use std::collections::HashSet;

use super::NetworkError;
use crate::tensor::{Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> Parameters<T> {
    pub fn new(named: Vec<(String, Tensor<T>)>) -> Result<Self, NetworkError> {
        let mut seen = HashSet::new();
        for (name, _) in &named {
            if !seen.insert(name.as_str()) {
                return Err(NetworkError::DuplicateName(name.clone()));
            }
        }
        Ok(Self {
            entries: named
                .into_iter()
                .map(|(name, value)| Param {
                    name,
                    value,
                    grad: None,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param<T>> {
        self.entries.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.entries.iter_mut().find(|p| p.name == name)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }

    /// Records every parameter as a leaf of `g`, converting precision if
    /// needed.
    pub fn register<U: Scalar>(&self, g: &mut Graph<U>, requires_grad: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|p| g.leaf(p.value.cast(), requires_grad))
            .collect()
    }

    /// Adds the gradients of `vars` (as returned by [`Self::register`]) into
    /// the parameter accumulators.
    pub fn accumulate_grads(&mut self, g: &Graph<T>, vars: &[Var]) {
        for (p, &v) in self.entries.iter_mut().zip(vars) {
            let Some(dg) = g.grad(v) else { continue };
            match &mut p.grad {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(dg.data()) {
                        *a += *d;
                    }
                }
                None => p.grad = Some(dg.clone()),
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            if let Some(gr) = &mut p.grad {
                gr.data_mut().fill(T::zero());
            }
        }
    }

    pub fn cast<U: Scalar>(&self) -> Parameters<U> {
        Parameters {
            entries: self
                .entries
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p.grad.as_ref().map(Tensor::cast),
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|p| p.value.all_finite())
    }
}
