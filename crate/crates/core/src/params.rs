//! Named parameter tensors.
//!
//! Every trainable quantity is a dense matrix owned by the component that
//! uses it. Components expose their tensors through [`Parameterized`] in a
//! fixed order; that order is what ties a [`ParamSet`], the graph leaves
//! created by [`bind`], and the gradients coming back out together.

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use nalgebra::DMatrix;

pub trait Parameterized {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &DMatrix<f64>));
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut DMatrix<f64>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Flat, ordered collection of named tensors.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, DMatrix<f64>)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_model(model: &impl Parameterized) -> Self {
        let mut entries = Vec::new();
        model.visit_params("", &mut |name, m| entries.push((name.to_string(), m.clone())));
        Self { entries }
    }

    /// Same names and shapes as `self`, filled with zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(n, m)| (n.clone(), DMatrix::zeros(m.nrows(), m.ncols())))
                .collect(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: DMatrix<f64>) {
        self.entries.push((name.into(), value));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DMatrix<f64>)> {
        self.entries.iter().map(|(n, m)| (n.as_str(), m))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut DMatrix<f64>)> {
        self.entries.iter_mut().map(|(n, m)| (n.as_str(), m))
    }

    pub fn get(&self, name: &str) -> Option<&DMatrix<f64>> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut DMatrix<f64>> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, m)| m.len()).sum()
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .iter()
            .map(|(_, m)| m.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    /// Write the tensors back into `model`, checking names and shapes.
    pub fn apply_to(&self, model: &mut impl Parameterized) -> Result<()> {
        let mut it = self.entries.iter();
        let mut err = None;
        model.visit_params_mut("", &mut |name, m| {
            if err.is_some() {
                return;
            }
            match it.next() {
                Some((n, v)) if n == name && v.shape() == m.shape() => m.copy_from(v),
                Some((n, v)) => {
                    err = Some(Error::Checkpoint(format!(
                        "parameter `{name}` {:?} does not match stored `{n}` {:?}",
                        m.shape(),
                        v.shape()
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing parameter `{name}`"))),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        if let Some((n, _)) = it.next() {
            return Err(Error::Checkpoint(format!("unexpected parameter `{n}`")));
        }
        Ok(())
    }
}

/// Create one graph leaf per parameter of `model`, in visit order.
pub fn bind(model: &impl Parameterized, g: &mut Graph) -> Vec<Var> {
    let mut vars = Vec::new();
    model.visit_params("", &mut |_, m| vars.push(g.leaf(m.clone())));
    vars
}

/// Collect the adjoints of `leaves` into a [`ParamSet`] shaped like `like`.
pub fn collect_gradients(like: &ParamSet, leaves: &[Var], grads: &Gradients) -> ParamSet {
    assert_eq!(like.len(), leaves.len(), "leaf count differs from parameter count");
    ParamSet {
        entries: like
            .entries
            .iter()
            .zip(leaves)
            .map(|((n, m), v)| (n.clone(), grads.get_or_zeros(*v, m.shape())))
            .collect(),
    }
}

/// Sequential reader over bound leaves, used by components to pick up their
/// own variables in visit order.
pub struct VarCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> VarCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    #[allow(clippy::should_implement_trait)]
    pub fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }

    pub fn position(&self) -> usize {
        self.pos
    }
}
