//! Named parameter registry and the binding of parameters into a graph.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::error::{Error, Result};
use crate::numerics::{Gradients, Graph, Tensor, Var};
use crate::scalar::Scalar;

/// Parameters keyed by unique dotted names, iterated in name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            map: BTreeMap::new(),
        }
    }

    /// Adds a new parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.map.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.map.insert(name, value);
        Ok(())
    }

    /// Replaces the value of an existing parameter, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Dimension {
                op: "set parameter",
                lhs: slot.shape().to_vec(),
                rhs: value.shape().to_vec(),
            });
        }
        *slot = value;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor<T>> {
        self.map.remove(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Inserts every entry of `other`, failing on the first name clash.
    pub fn extend(&mut self, other: ParamStore<T>) -> Result<()> {
        for (k, v) in other.map {
            self.insert(k, v)?;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// CRC32 of the shape and the little-endian element bytes of `name`.
    pub fn checksum(&self, name: &str) -> Result<u32> {
        let t = self.get(name)?;
        let mut h = crc32fast::Hasher::new();
        for &e in t.shape() {
            h.update(&(e as u64).to_le_bytes());
        }
        for &x in t.data() {
            h.update(&x.as_f64().to_le_bytes());
        }
        Ok(h.finalize())
    }

    pub fn checksums(&self) -> BTreeMap<String, u32> {
        self.names()
            .map(|n| (n.to_string(), self.checksum(n).expect("name from store")))
            .collect()
    }

    pub fn num_elements(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }
}

/// Binds store entries to graph leaves on first use. Trainable names become
/// gradient-tracking leaves, everything else a constant.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    trainable: Option<&'a BTreeSet<String>>,
    bound: HashMap<String, Var>,
}

impl<'a, T: Scalar> Binder<'a, T> {
    /// Every parameter treated as a constant.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            trainable: None,
            bound: HashMap::new(),
        }
    }

    pub fn new(store: &'a ParamStore<T>, trainable: &'a BTreeSet<String>) -> Self {
        Self {
            store,
            trainable: Some(trainable),
            bound: HashMap::new(),
        }
    }

    /// Uses already created leaves for `names` instead of store lookups.
    pub fn with_bound(mut self, names: &[String], vars: &[Var]) -> Self {
        for (n, &v) in names.iter().zip(vars) {
            self.bound.insert(n.clone(), v);
        }
        self
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = self.store.get(name)?.clone();
        let rg = self.trainable.is_some_and(|t| t.contains(name));
        let v = g.leaf(value, rg);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Gradients of every bound trainable parameter, by name.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter(|(n, _)| self.trainable.is_some_and(|t| t.contains(n.as_str())))
            .filter_map(|(n, &v)| grads.get(v).map(|g| (n.clone(), g.clone())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(vec![2])).is_err());
        assert!(s.set("a", Tensor::zeros(vec![3])).is_err());
        assert!(s.set("b", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn checksum_tracks_content() {
        let mut s = ParamStore::<f64>::new();
        s.insert("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let before = s.checksum("w").unwrap();
        s.get_mut("w").unwrap().data_mut()[1] = 2.5;
        assert_ne!(before, s.checksum("w").unwrap());
    }

    #[test]
    fn binder_marks_only_trainable_leaves() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", Tensor::vector(vec![1.0, 2.0])).unwrap();
        s.insert("b", Tensor::vector(vec![3.0, 4.0])).unwrap();
        let trainable: BTreeSet<String> = ["a".to_string()].into();
        let mut g = Graph::new();
        let mut b = Binder::new(&s, &trainable);
        let va = b.var(&mut g, "a").unwrap();
        let vb = b.var(&mut g, "b").unwrap();
        assert_eq!(b.var(&mut g, "a").unwrap(), va);
        let p = g.mul(va, vb).unwrap();
        let loss = g.sum(p).unwrap();
        let grads = g.backward(loss).unwrap();
        let named = b.gradients(&grads);
        assert_eq!(named.len(), 1);
        assert_eq!(named["a"].data(), &[3.0, 4.0]);
        assert!(b.var(&mut g, "missing").is_err());
    }
}
