//! Named parameter tensors and their gradients.

use std::collections::HashMap;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Ordered collection of learnable tensors addressed by name or id.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Adds a tensor; panics on duplicate names since those indicate a construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ArrayD<T> {
        &mut self.values[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&ArrayD<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ArrayD<T>> {
        self.id(name).map(|id| &mut self.values[id.0])
    }

    /// Total number of learnable scalars.
    pub fn count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    pub fn to_records(&self) -> Vec<TensorRecord> {
        self.names
            .iter()
            .zip(&self.values)
            .map(|(n, v)| TensorRecord::from_tensor(n, v))
            .collect()
    }

    /// Overwrites values from serialized records; every name and shape must match.
    pub fn load_records(&mut self, records: &[TensorRecord]) -> Result<()> {
        if records.len() != self.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, model expects {}",
                records.len(),
                self.len()
            )));
        }
        for r in records {
            let id = self
                .id(&r.name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {}", r.name)))?;
            let t = r.to_tensor::<T>()?;
            if t.shape() != self.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor {} has shape {:?}, model expects {:?}",
                    r.name,
                    t.shape(),
                    self.get(id).shape()
                )));
            }
            *self.get_mut(id) = t;
        }
        Ok(())
    }
}

/// Gradients aligned with a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    values: Vec<ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Self {
            values: store.values.iter().map(|v| ArrayD::zeros(v.raw_dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ArrayD<T>> {
        self.values.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ArrayD<T>> {
        self.values.iter_mut()
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, g: &ArrayD<T>) {
        self.values[id.0] += g;
    }

    /// `self += other`.
    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn scale(&mut self, c: T) {
        for v in &mut self.values {
            v.mapv_inplace(|x| x * c);
        }
    }

    pub fn global_norm(&self) -> T {
        self.values
            .iter()
            .flat_map(|v| v.iter())
            .map(|&x| x * x)
            .sum::<T>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Type-agnostic serialized tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn from_tensor<T: Scalar>(name: &str, t: &ArrayD<T>) -> Self {
        Self {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.iter().map(|x| x.as_f64()).collect(),
        }
    }

    pub fn to_tensor<T: Scalar>(&self) -> Result<ArrayD<T>> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.iter().map(|&x| T::of(x)).collect())
            .map_err(|e| Error::Checkpoint(format!("tensor {}: {e}", self.name)))
    }
}

/// Uniform `±1/sqrt(fan_in)` initialization.
pub fn fan_in_uniform<T: Scalar, R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> ArrayD<T> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    ArrayD::from_shape_fn(IxDyn(shape), |_| T::of(dist.sample(rng)))
}

/// `[rows, blocks * rows]` matrix whose square blocks are random orthogonal matrices.
pub fn orthogonal_blocks<T: Scalar, R: Rng>(rows: usize, blocks: usize, rng: &mut R) -> ArrayD<T> {
    let mut out = ArrayD::zeros(IxDyn(&[rows, blocks * rows]));
    for b in 0..blocks {
        let q = random_orthogonal(rows, rng);
        for i in 0..rows {
            for j in 0..rows {
                out[[i, b * rows + j]] = T::of(q[i][j]);
            }
        }
    }
    out
}

fn random_orthogonal<R: Rng>(n: usize, rng: &mut R) -> Vec<Vec<f64>> {
    // modified Gram-Schmidt on a Gaussian matrix
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    while cols.len() < n {
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
        for q in &cols {
            let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            cols.push(v);
        }
    }
    (0..n).map(|i| (0..n).map(|j| cols[j][i]).collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn orthogonal_blocks_are_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let w: ArrayD<f64> = orthogonal_blocks(6, 4, &mut rng);
        for b in 0..4 {
            for i in 0..6 {
                for j in 0..6 {
                    let d: f64 = (0..6).map(|r| w[[r, b * 6 + i]] * w[[r, b * 6 + j]]).sum();
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((d - expect).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn records_round_trip_and_reject_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = ParamStore::<f64>::new();
        a.insert("w", fan_in_uniform(&[3, 4], 3, &mut rng));
        a.insert("b", fan_in_uniform(&[4], 3, &mut rng));
        let recs = a.to_records();
        let mut b = ParamStore::<f64>::new();
        b.insert("w", ArrayD::zeros(IxDyn(&[3, 4])));
        b.insert("b", ArrayD::zeros(IxDyn(&[4])));
        b.load_records(&recs).unwrap();
        assert_eq!(a.by_name("w"), b.by_name("w"));
        let mut c = ParamStore::<f64>::new();
        c.insert("w", ArrayD::zeros(IxDyn(&[4, 3])));
        c.insert("b", ArrayD::zeros(IxDyn(&[4])));
        assert!(c.load_records(&recs).is_err());
    }

    #[test]
    fn gradient_norm_and_scale() {
        let mut s = ParamStore::<f64>::new();
        let id = s.insert("x", ArrayD::zeros(IxDyn(&[2])));
        let mut g = Gradients::zeros_like(&s);
        g.accumulate(id, &ndarray::arr1(&[3.0, 4.0]).into_dyn());
        assert_eq!(g.global_norm(), 5.0);
        g.scale(2.0);
        assert_eq!(g.global_norm(), 10.0);
    }
}
