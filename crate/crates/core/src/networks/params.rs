use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// `U(-b, b)` with `b = sqrt(3 / fan_in)`.
    Uniform { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Shape, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
        }
    }

    fn initialize(&self, rng: &mut impl Rng) -> Tensor {
        match self.init {
            Init::Zeros => Tensor::zeros(self.shape),
            Init::Ones => Tensor::full(self.shape, 1.0),
            Init::Uniform { fan_in } => {
                let bound = (3.0 / fan_in.max(1) as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
                let data = (0..self.shape.numel()).map(|_| dist.sample(rng)).collect();
                Tensor::from_vec(self.shape, data).expect("spec shape")
            }
        }
    }
}

/// Named tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Initializes every spec in order from `rng`.
    pub fn from_specs(specs: &[ParamSpec], rng: &mut impl Rng) -> Self {
        let mut store = Self::new();
        for spec in specs {
            store.insert(spec.name.clone(), spec.initialize(rng));
        }
        store
    }

    /// Adds or replaces a tensor.
    pub fn insert(&mut self, name: String, tensor: Tensor) {
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = tensor;
        } else {
            self.index.insert(name.clone(), self.names.len());
            self.names.push(name);
            self.tensors.push(tensor);
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Checks that names and shapes match `specs` exactly.
    pub fn check_against(&self, specs: &[ParamSpec]) -> Result<()> {
        for spec in specs {
            match self.get(&spec.name) {
                None => {
                    return Err(Error::Checkpoint(format!("missing tensor {}", spec.name)));
                }
                Some(t) if t.shape() != spec.shape => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {} has shape {}, expected {}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    )));
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Parameters attached to a graph, either as leaves or as constants.
pub struct Bound<'g> {
    vars: Vec<Var<'g>>,
    index: HashMap<String, usize>,
}

impl<'g> Bound<'g> {
    pub fn leaves(graph: &'g Graph, store: &ParamStore) -> Self {
        Self::from_vars(store.tensors.iter().map(|t| graph.leaf(t.clone())).collect(), store)
    }

    pub fn constants(graph: &'g Graph, store: &ParamStore) -> Self {
        Self::from_vars(store.tensors.iter().map(|t| graph.constant(t.clone())).collect(), store)
    }

    /// Binds caller-made variables, one per entry of `store` in order.
    pub fn from_vars(vars: Vec<Var<'g>>, store: &ParamStore) -> Self {
        assert_eq!(vars.len(), store.len(), "one variable per parameter");
        Self {
            vars,
            index: store.index.clone(),
        }
    }

    /// # Panics
    /// When `name` is not a parameter; architectures and their specs are
    /// generated together so a miss is a programming error.
    pub fn get(&self, name: &str) -> Var<'g> {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unknown parameter {name}"),
        }
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_respects_bounds_and_kinds() {
        let specs = [
            ParamSpec::new("w", Shape::new(4, 3, 3, 3), Init::Uniform { fan_in: 27 }),
            ParamSpec::new("b", Shape::new(1, 4, 1, 1), Init::Zeros),
            ParamSpec::new("g", Shape::new(1, 4, 1, 1), Init::Ones),
        ];
        let store = ParamStore::from_specs(&specs, &mut ChaCha8Rng::seed_from_u64(1));
        let bound = (3.0f64 / 27.0).sqrt();
        let w = store.get("w").unwrap();
        assert!(w.max() <= bound && w.min() >= -bound);
        assert!(w.max() > 0.0 && w.min() < 0.0);
        assert_eq!(store.get("b").unwrap().sum(), 0.0);
        assert_eq!(store.get("g").unwrap().sum(), 4.0);
        assert_eq!(store.numel(), 108 + 8);
        store.check_against(&specs).unwrap();
    }

    #[test]
    fn insert_replaces_in_place() {
        let mut s = ParamStore::new();
        s.insert("a".into(), Tensor::scalar(1.0));
        s.insert("b".into(), Tensor::scalar(2.0));
        s.insert("a".into(), Tensor::scalar(3.0));
        assert_eq!(s.names(), ["a", "b"]);
        assert_eq!(s.get("a").unwrap().item(), 3.0);
    }
}
