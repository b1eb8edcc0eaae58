//! Named parameter matrices with a flat-vector view for the optimiser.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::diff::{Graph, Matrix, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

/// Parameters registered as leaves of one graph.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound(vars)
    }

    #[inline]
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a `rows x cols` matrix drawn uniformly from `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, Matrix::from_vec(rows, cols, data).expect("sized"))
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for m in &self.values {
            out.extend_from_slice(m.data());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        let expected = self.scalar_count();
        if flat.len() != expected {
            return Err(Error::LengthMismatch {
                expected,
                actual: flat.len(),
            });
        }
        let mut offset = 0;
        for m in &mut self.values {
            let n = m.data().len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound(self.values.iter().map(|m| g.leaf(m.clone())).collect())
    }

    /// Flattens the gradients of every bound parameter in store order.
    pub fn flat_gradients(&self, bound: &Bound, grads: &crate::diff::Gradients) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.scalar_count());
        for (&v, m) in bound.0.iter().zip(&self.values) {
            match grads.get(v) {
                Some(g) => out.extend_from_slice(g.data()),
                None => out.extend(std::iter::repeat_n(0.0, m.data().len())),
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;

    #[test]
    fn flat_view_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        store.add_uniform("a", 2, 3, 3, &mut rng);
        store.add_uniform("b", 1, 4, 4, &mut rng);
        let flat = store.to_flat();
        assert_eq!(flat.len(), 10);
        let mut copy = store.clone();
        copy.set_flat(&[0.0; 10]).unwrap();
        copy.set_flat(&flat).unwrap();
        assert_eq!(copy, store);
        assert!(copy.set_flat(&[1.0]).is_err());
    }

    #[test]
    fn uniform_init_respects_fan_in() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let id = store.add_uniform("w", 16, 16, 16, &mut rng);
        assert!(store.get(id).data().iter().all(|v| v.abs() <= 0.25));
    }
}
