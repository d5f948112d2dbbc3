use indexmap::IndexMap;

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};
use crate::dataio::{Checkpoint, TensorFile};
use crate::error::{Error, Result};

/// Named trainable tensors; iteration follows insertion order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Overwrites every parameter present in `src` whose name matches a prefix
    /// in `prefixes` (all names when `prefixes` is empty). Shapes must agree.
    pub fn load_from(&mut self, src: &ParamStore<T>, prefixes: &[&str]) -> Result<usize> {
        let mut loaded = 0;
        for (name, value) in src.iter() {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            let dst = self.get_mut(name)?;
            if dst.shape() != value.shape() {
                return Err(Error::shape(name, dst.shape(), value.shape()));
            }
            *dst = value.clone();
            loaded += 1;
        }
        Ok(loaded)
    }
}

/// Parameters registered on one graph, looked up by name.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    vars: IndexMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn vars(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Rebinds `name` to another node (used to probe one tensor at a time).
    pub fn set(&mut self, name: &str, v: Var) {
        self.vars.insert(name.to_string(), v);
    }
}

impl<T: Real> ParamStore<T> {
    /// Registers every parameter whose name starts with `prefix` on `g`.
    pub fn bind(&self, g: &mut Graph<T>, prefix: &str) -> Bound {
        let vars = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), g.param(k, v.clone())))
            .collect();
        Bound { vars }
    }

    /// Like [`ParamStore::bind`] but as constants that receive no gradient.
    pub fn bind_constants(&self, g: &mut Graph<T>, prefix: &str) -> Bound {
        let vars = self
            .params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), g.constant(v.clone())))
            .collect();
        Bound { vars }
    }
}

impl ParamStore<f32> {
    pub fn to_tensor_files(&self, prefix: &str) -> IndexMap<String, TensorFile> {
        self.params
            .iter()
            .map(|(k, v)| {
                (
                    format!("{prefix}{k}"),
                    TensorFile {
                        shape: v.shape().to_vec(),
                        data: v.data().to_vec(),
                    },
                )
            })
            .collect()
    }

    /// Collects every tensor of `ckpt` whose name starts with `prefix`.
    pub fn from_checkpoint(ckpt: &Checkpoint, prefix: &str) -> Result<Self> {
        let mut store = ParamStore::new();
        for (name, t) in &ckpt.tensors {
            if let Some(stripped) = name.strip_prefix(prefix) {
                store.insert(stripped, Tensor::new(t.shape.clone(), t.data.clone())?)?;
            }
        }
        Ok(store)
    }
}
