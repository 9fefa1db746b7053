use std::collections::BTreeMap;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Graph, Var};
use super::tensor::Tensor2;
use crate::error::{ensure, Result};

/// Named parameters with one gradient slot each.
///
/// Names are kept sorted so iteration (and serialization) order is stable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    values: BTreeMap<String, Tensor2>,
    #[serde(skip)]
    grads: BTreeMap<String, Tensor2>,
}

/// The graph variables a [`ParamSet`] was bound to.
#[derive(Clone, Debug, Default)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl Index<&str> for ParamVars {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor2) -> Result<()> {
        let name = name.into();
        ensure!(
            !self.values.contains_key(&name),
            Configuration,
            "duplicate parameter name {name}"
        );
        ensure!(
            value.is_finite(),
            Validation,
            "parameter {name} has non-finite entries"
        );
        self.values.insert(name, value);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, value: Tensor2) -> Result<Self> {
        self.insert(name, value)?;
        Ok(self)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor2> {
        self.values.get(name)
    }

    pub(crate) fn value_mut(&mut self, name: &str) -> Option<&mut Tensor2> {
        self.values.get_mut(name)
    }

    /// Replaces a parameter's value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor2) -> Result<()> {
        let slot = self.values.get_mut(name);
        ensure!(slot.is_some(), Configuration, "no parameter named {name}");
        let slot = slot.unwrap();
        ensure!(
            slot.shape() == value.shape(),
            Dimension,
            "parameter {name} has shape {:?}, got {:?}",
            slot.shape(),
            value.shape()
        );
        *slot = value;
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.values.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.values().map(Tensor2::len).sum()
    }

    pub fn grad(&self, name: &str) -> Option<&Tensor2> {
        self.grads.get(name)
    }

    pub fn has_grads(&self) -> bool {
        self.values.keys().all(|k| self.grads.contains_key(k))
    }

    pub fn clear_grads(&mut self) {
        self.grads.clear();
    }

    pub fn set_grad(&mut self, name: &str, grad: Tensor2) -> Result<()> {
        let value = self.values.get(name);
        ensure!(value.is_some(), Configuration, "no parameter named {name}");
        ensure!(
            value.unwrap().shape() == grad.shape(),
            Dimension,
            "gradient shape {:?} for parameter {name} of shape {:?}",
            grad.shape(),
            value.unwrap().shape()
        );
        self.grads.insert(name.to_string(), grad);
        Ok(())
    }

    /// Records every parameter as a leaf of `g`.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            vars: self
                .values
                .iter()
                .map(|(k, v)| (k.clone(), g.leaf(v.clone())))
                .collect(),
        }
    }

    /// Fills every gradient slot from a finished backward pass.
    pub fn collect_grads(&mut self, grads: &Gradients, vars: &ParamVars) -> Result<()> {
        for (name, var) in vars.iter() {
            self.set_grad(name, grads.get(var)?)?;
        }
        Ok(())
    }

    /// Flattened copy of all values in name order.
    pub fn flatten(&self) -> Vec<f64> {
        self.values
            .values()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    /// Bytes of all values in name order; equality of these bytes is the
    /// frozen-parameter contract.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.values {
            out.extend_from_slice(name.as_bytes());
            out.push(0);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }
}

impl Index<&str> for ParamSet {
    type Output = Tensor2;

    /// Panics on an unknown name; use [`ParamSet::get`] when absence is expected.
    fn index(&self, name: &str) -> &Tensor2 {
        self.get(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }
}

/// Backpropagates `loss` through `g` and fills the gradient slot of every
/// parameter of `params` bound as `vars`.
pub fn gradient(g: &Graph, loss: Var, params: &mut ParamSet, vars: &ParamVars) -> Result<()> {
    let grads = g.backward(loss)?;
    params.collect_grads(&grads, vars)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::MvpError;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor2::zeros(1, 1)).unwrap();
        assert!(matches!(
            p.insert("w", Tensor2::zeros(1, 1)),
            Err(MvpError::Configuration(_))
        ));
    }

    #[test]
    fn gradient_fills_every_slot() {
        let mut p = ParamSet::new()
            .with("a", Tensor2::row_vector(vec![1.0, -3.0]))
            .unwrap()
            .with("unused", Tensor2::zeros(2, 2))
            .unwrap();
        let mut g = Graph::new();
        let vars = p.bind(&mut g);
        let sq = g.mul(vars["a"], vars["a"]).unwrap();
        let s = g.sum_all(sq).unwrap();
        let loss = g.scale(s, 0.5).unwrap();
        gradient(&g, loss, &mut p, &vars).unwrap();
        assert_eq!(p.grad("a").unwrap().data(), &[1.0, -3.0]);
        assert_eq!(p.grad("unused").unwrap().data(), &[0.0; 4]);
        assert!(p.has_grads());
    }

    #[test]
    fn gradient_shape_must_match() {
        let mut p = ParamSet::new().with("a", Tensor2::zeros(1, 2)).unwrap();
        assert!(matches!(
            p.set_grad("a", Tensor2::zeros(2, 1)),
            Err(MvpError::Dimension(_))
        ));
    }
}
