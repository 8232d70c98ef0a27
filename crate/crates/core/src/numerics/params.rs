use std::collections::HashMap;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named learnable tensors in a fixed declaration order, each with an
/// optional gradient slot of the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Registers a parameter; returns its position in declaration order.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.grads.push(None);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn value(&self, id: usize) -> &Tensor<T> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Tensor<T> {
        &mut self.values[id]
    }

    pub fn values(&self) -> &[Tensor<T>] {
        &self.values
    }

    pub fn grad(&self, id: usize) -> Option<&Tensor<T>> {
        self.grads[id].as_ref()
    }

    pub fn set_grad(&mut self, id: usize, grad: Tensor<T>) -> Result<()> {
        if grad.shape() != self.values[id].shape() {
            return Err(Error::Shape {
                op: "set_grad",
                detail: format!(
                    "gradient {:?} for `{}` with shape {:?}",
                    grad.shape(),
                    self.names[id],
                    self.values[id].shape()
                ),
            });
        }
        self.grads[id] = Some(grad);
        Ok(())
    }

    pub fn set_grads(&mut self, grads: Vec<Tensor<T>>) -> Result<()> {
        if grads.len() != self.len() {
            return Err(Error::Shape {
                op: "set_grads",
                detail: format!("{} gradients for {} parameters", grads.len(), self.len()),
            });
        }
        for (id, g) in grads.into_iter().enumerate() {
            self.set_grad(id, g)?;
        }
        Ok(())
    }

    pub fn clear_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Iterates `(name, value, grad)` triples.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>, Option<&Tensor<T>>)> {
        self.names
            .iter()
            .zip(&self.values)
            .zip(&self.grads)
            .map(|((n, v), g)| (n.as_str(), v, g.as_ref()))
    }

    pub(crate) fn split_mut(&mut self) -> ParamsMut<'_, T> {
        (&self.names, &mut self.values, &self.grads)
    }

    /// Converts every value to another precision. Gradients are dropped.
    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            grads: vec![None; self.values.len()],
            index: self.index.clone(),
        }
    }

    /// All values flattened in declaration order.
    pub fn flat_values(&self) -> Vec<T> {
        self.values.iter().flat_map(|v| v.data().iter().copied()).collect()
    }
}

/// Names, mutable values and gradients, borrowed together for an update.
pub(crate) type ParamsMut<'a, T> = (&'a [String], &'a mut [Tensor<T>], &'a [Option<Tensor<T>>]);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::<f32>::new();
        p.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(p.insert("w", Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn gradient_shape_must_match() {
        let mut p = ParamSet::<f32>::new();
        let id = p.insert("w", Tensor::zeros(&[2, 3])).unwrap();
        assert!(p.set_grad(id, Tensor::zeros(&[3, 2])).is_err());
        assert!(p.set_grad(id, Tensor::zeros(&[2, 3])).is_ok());
        assert_eq!(p.numel(), 6);
    }
}
