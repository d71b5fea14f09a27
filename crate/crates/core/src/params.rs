//! Named parameter tensors and their initialisation.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered collection of named tensors. Insertion order is the canonical
/// order (optimizer state and checkpoints follow it).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tensor: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(contract!("duplicate parameter name `{}`", name));
        }
        let id = self.tensors.len();
        self.index.insert(name.to_string(), id);
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn fill(&mut self, value: f64) {
        self.tensors.iter_mut().for_each(|t| t.fill(value));
    }

    /// Copies every tensor of `other` into the parameter of the same name.
    /// Both stores must hold exactly the same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        for name in other.index.keys() {
            if !self.index.contains_key(name) {
                return Err(contract!("unexpected parameter `{}`", name));
            }
        }
        for (i, name) in self.names.iter().enumerate() {
            let src = other
                .id(name)
                .map(|id| other.get(id))
                .ok_or_else(|| Error::MissingParam(name.clone()))?;
            if src.shape() != self.tensors[i].shape() {
                return Err(contract!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    name,
                    src.shape(),
                    self.tensors[i].shape()
                ));
            }
            self.tensors[i] = src.clone();
        }
        Ok(())
    }

    /// Largest absolute elementwise difference over all parameters.
    pub fn max_abs_diff(&self, other: &ParamStore) -> Result<f64> {
        if self.names != other.names {
            return Err(contract!("parameter stores hold different names"));
        }
        self.tensors
            .iter()
            .zip(&other.tensors)
            .try_fold(0.0f64, |acc, (a, b)| Ok(acc.max(a.max_abs_diff(b)?)))
    }
}

/// He-normal initialisation: `N(0, gain^2 / fan_in)`.
pub fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut R) -> Tensor {
    let std = gain / libm::sqrt(fan_in.max(1) as f64);
    Tensor::from_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        z * std
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn names_are_unique_and_ordered() {
        let mut s = ParamStore::new();
        let a = s.add("a", Tensor::zeros(&[2])).unwrap();
        let b = s.add("b", Tensor::zeros(&[3])).unwrap();
        assert!(s.add("a", Tensor::zeros(&[1])).is_err());
        assert_eq!(s.id("b"), Some(b));
        assert_eq!(s.name(a), "a");
        assert_eq!(s.num_scalars(), 5);
    }

    #[test]
    fn load_from_checks_names_and_shapes() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(&[2])).unwrap();
        let mut src = ParamStore::new();
        src.add("w", Tensor::full(&[2], 1.5)).unwrap();
        s.load_from(&src).unwrap();
        assert_eq!(s.get(ParamId(0)).data(), &[1.5, 1.5]);

        let mut bad = ParamStore::new();
        bad.add("w", Tensor::zeros(&[3])).unwrap();
        assert!(s.load_from(&bad).is_err());
        let mut extra = src.clone();
        extra.add("v", Tensor::zeros(&[1])).unwrap();
        assert!(s.load_from(&extra).is_err());
    }

    #[test]
    fn kaiming_scale_is_plausible() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = kaiming_normal(&[64, 16, 3, 3], 144, 2f64.sqrt(), &mut rng);
        let var = t.data().iter().map(|v| v * v).sum::<f64>() / t.len() as f64;
        assert!((var - 2.0 / 144.0).abs() < 0.2 * 2.0 / 144.0);
    }
}
