//! Named, ordered parameter storage shared by the encoder, optimizer and
//! checkpoint code.

use indexmap::IndexMap;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::ssm::{SelectiveSsmParams, SsmVars};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Params {
    tensors: IndexMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn insert_ssm(&mut self, prefix: &str, p: &SelectiveSsmParams) {
        for (name, t) in p.named() {
            self.insert(format!("{prefix}.{name}"), t.clone());
        }
    }

    pub fn ssm(&self, prefix: &str) -> Result<SelectiveSsmParams> {
        let get = |n: &str| self.get(&format!("{prefix}.{n}")).cloned();
        Ok(SelectiveSsmParams {
            a_log: get("a_log")?,
            d_skip: get("d_skip")?,
            w_delta: get("w_delta")?,
            delta_bias: get("delta_bias")?,
            w_b: get("w_b")?,
            w_c: get("w_c")?,
        })
    }

    /// Records every tensor on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    /// Bitwise equality of every tensor (names and order included).
    pub fn bitwise_eq(&self, other: &Params) -> bool {
        self.tensors.len() == other.tensors.len()
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|((ka, a), (kb, b))| ka == kb && a.bitwise_eq(b))
    }
}

/// Tape handles for a [`Params`] set.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unbound parameter `{name}`")))
    }

    pub fn ssm(&self, prefix: &str) -> Result<SsmVars> {
        let get = |n: &str| self.get(&format!("{prefix}.{n}"));
        Ok(SsmVars {
            a_log: get("a_log")?,
            d_skip: get("d_skip")?,
            w_delta: get("w_delta")?,
            delta_bias: get("delta_bias")?,
            w_b: get("w_b")?,
            w_c: get("w_c")?,
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Collects gradients in parameter order; every parameter must have one.
    pub fn gradients(&self, grads: &Gradients, params: &Params) -> Result<Params> {
        let mut out = Params::new();
        for (name, var) in &self.vars {
            let shape = params.get(name)?.shape();
            out.insert(name.clone(), grads.get_or_zeros(*var, shape));
        }
        Ok(out)
    }
}
