use crate::error::{NumError, Result};
use crate::scalar::Scalar;
use crate::tape::{Gradients, Tape, Var};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;

/// Named parameter tensors, ordered by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    entries: BTreeMap<String, ArrayD<F>>,
}

impl<F: Scalar> Default for ParamStore<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<F>) {
        self.entries
            .insert(name.into(), value.as_standard_layout().into_owned());
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<F>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ArrayD<F>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ArrayD<F>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn num_elements(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// Gaussian init with the given standard deviation.
    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) {
        let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
        let data: Vec<F> = (0..shape.iter().product::<usize>())
            .map(|_| F::of(normal.sample(rng)))
            .collect();
        self.insert(
            name,
            ArrayD::from_shape_vec(IxDyn(shape), data).expect("init shape"),
        );
    }

    pub fn insert_filled(&mut self, name: &str, shape: &[usize], value: f64) {
        self.insert(name, ArrayD::from_elem(IxDyn(shape), F::of(value)));
    }

    /// SHA-256 over names and little-endian payloads of the selected entries.
    pub fn checksum(&self, select: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        let mut buf = Vec::new();
        for (name, value) in self.entries.iter().filter(|(k, _)| select(k)) {
            hasher.update(name.as_bytes());
            for &d in value.shape() {
                hasher.update((d as u64).to_le_bytes());
            }
            buf.clear();
            for &x in value.iter() {
                x.write_le(&mut buf);
            }
            hasher.update(&buf);
        }
        hex::encode(hasher.finalize())
    }

    /// Records every entry as a leaf on `tape`; entries for which
    /// `trainable` returns true receive gradients.
    pub fn bind(&self, tape: &mut Tape<F>, trainable: impl Fn(&str) -> bool) -> Result<Binding> {
        let mut vars = BTreeMap::new();
        for (name, value) in &self.entries {
            let v = tape.leaf(value.clone(), trainable(name))?;
            vars.insert(name.clone(), v);
        }
        Ok(Binding { vars })
    }

    pub fn convert<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for (k, v) in &self.entries {
            out.insert(k.clone(), v.mapv(|x| G::of(x.as_f64())));
        }
        out
    }
}

/// Tape handles for the entries of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Binding {
    vars: BTreeMap<String, Var>,
}

impl Binding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| NumError::UnknownParam(name.to_string()))
    }

    /// Collects gradients for every trainable bound entry that was reached.
    pub fn collect<F: Scalar>(
        &self,
        tape: &Tape<F>,
        grads: &mut Gradients<F>,
    ) -> BTreeMap<String, ArrayD<F>> {
        self.vars
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .filter_map(|(k, v)| grads.take(*v).map(|g| (k.clone(), g)))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bind_marks_only_selected_entries_trainable() {
        let mut store = ParamStore::<f64>::new();
        store.insert_filled("gen.w", &[2], 1.0);
        store.insert_filled("disc.w", &[2], 2.0);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape, |n| n.starts_with("gen.")).unwrap();
        let g = b.var("gen.w").unwrap();
        let d = b.var("disc.w").unwrap();
        assert!(tape.requires_grad(g));
        assert!(!tape.requires_grad(d));
        let p = tape.mul(g, d).unwrap();
        let s = tape.sum(p).unwrap();
        let mut grads = tape.backward(s).unwrap();
        let collected = b.collect(&tape, &mut grads);
        assert_eq!(collected.keys().collect::<Vec<_>>(), vec!["gen.w"]);
        assert!(matches!(b.var("missing"), Err(NumError::UnknownParam(_))));
    }

    #[test]
    fn checksum_tracks_selected_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        store.insert_normal("a", &[3, 3], 1.0, &mut rng);
        store.insert_normal("b", &[3], 1.0, &mut rng);
        let a0 = store.checksum(|n| n == "a");
        let b0 = store.checksum(|n| n == "b");
        store.get_mut("b").unwrap()[[0]] += 1.0;
        assert_eq!(a0, store.checksum(|n| n == "a"));
        assert_ne!(b0, store.checksum(|n| n == "b"));
    }
}
