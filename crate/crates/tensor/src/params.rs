use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Scalar, Tensor};

/// Ordered collection of named parameter tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    /// Appends a tensor and returns its slot index.
    pub fn push(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter name {name}");
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor<T> {
        &self.tensors[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor<T> {
        &mut self.tensors[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.tensors.iter_mut().collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter())
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Bitwise equality of every element, distinguishing `-0.0` and NaN payloads.
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.names == other.names
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| {
                a.shape() == b.shape()
                    && a
                        .data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_f64().unwrap().to_bits() == y.to_f64().unwrap().to_bits())
            })
    }
}

/// He-normal initialization for a conv weight `[c_out, c_in, kh, kw]`.
pub fn kaiming_normal<T: Scalar, R: Rng>(shape: &[usize], gain: f64, rng: &mut R) -> Tensor<T> {
    assert_eq!(shape.len(), 4);
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let std = gain / fan_in.sqrt();
    let dist = Normal::new(0.0, std).unwrap();
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::lit(dist.sample(rng))).collect())
}
