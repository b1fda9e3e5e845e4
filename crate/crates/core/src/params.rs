//! Named parameter tensors and their graph bindings.

use alloc::collections::BTreeMap;
use alloc::string::String;

use crate::error::{bail, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::real::Real;
use crate::tensor::Tensor;

/// Parameters (or gradients) keyed by dotted name.
pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;

/// Parameters placed on a graph, looked up by name.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn new() -> Self {
        Self::default()
    }

    /// Binds `names` from `params`; trainable bindings receive gradients.
    pub fn bind<'a, T: Real>(
        g: &mut Graph<T>,
        params: &ParamMap<T>,
        names: impl IntoIterator<Item = &'a str>,
        trainable: bool,
    ) -> Result<Self> {
        let mut out = Self::new();
        out.extend(g, params, names, trainable)?;
        Ok(out)
    }

    pub fn extend<'a, T: Real>(
        &mut self,
        g: &mut Graph<T>,
        params: &ParamMap<T>,
        names: impl IntoIterator<Item = &'a str>,
        trainable: bool,
    ) -> Result<()> {
        for name in names {
            if self.vars.contains_key(name) {
                continue;
            }
            let Some(t) = params.get(name) else {
                bail!(Config, "missing parameter {}", name);
            };
            let v = if trainable { g.param(t.clone()) } else { g.constant(t.clone()) };
            self.vars.insert(name.into(), v);
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        match self.vars.get(name) {
            Some(&v) => Ok(v),
            None => bail!(Internal, "parameter {} is not bound", name),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }

    /// Gradients for every bound name; unreached parameters get zeros.
    pub fn collect<T: Real>(&self, g: &Graph<T>, grads: &Gradients<T>) -> ParamMap<T> {
        self.vars.iter().map(|(k, &v)| (k.clone(), grads.get_or_zeros(v, g.shape(v)))).collect()
    }
}

/// `acc[name] += add[name]`, inserting missing entries.
pub fn accumulate<T: Real>(acc: &mut ParamMap<T>, add: ParamMap<T>) -> Result<()> {
    for (name, t) in add {
        match acc.get_mut(&name) {
            Some(a) => {
                if a.shape() != t.shape() {
                    bail!(Dimension, "gradient {} has shape {:?}, expected {:?}", name, t.shape(), a.shape());
                }
                a.data_mut().iter_mut().zip(t.data()).for_each(|(x, &y)| *x += y);
            }
            None => {
                acc.insert(name, t);
            }
        }
    }
    Ok(())
}

/// Total scalar count of a parameter map.
pub fn count<T: Real>(params: &ParamMap<T>) -> usize {
    params.values().map(|t| t.len()).sum()
}
