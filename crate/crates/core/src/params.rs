//! Named parameter collections, their binding into a [`Graph`], and the
//! Adam optimizer that updates them.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;

use crate::autodiff::{Gradients, Graph, Var};
use crate::scalar::Scalar;

/// Index of a tensor inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Ordered collection of named 2-D tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Array2<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(value);
        ParamId(self.tensors.len() - 1)
    }

    /// Fan-in scaled uniform initialization `U(-1/√fan_in, 1/√fan_in)`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_simple_fn(shape, || T::lit(rng.random_range(-bound..bound)));
        self.insert(name, value)
    }

    pub fn get(&self, id: ParamId) -> &Array2<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<T>> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Array2<T>> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn tensors(&self) -> &[Array2<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<T>] {
        &mut self.tensors
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Register every tensor as a leaf of `graph`, trainable or constant.
    pub fn bind<'a>(&'a self, graph: &mut Graph<'a, T>, trainable: bool) -> Bound {
        Bound(
            self.tensors
                .iter()
                .map(|t| {
                    if trainable {
                        graph.param(t.view())
                    } else {
                        graph.constant_view(t.view())
                    }
                })
                .collect(),
        )
    }
}

/// Graph leaves for every tensor of a store, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Gradients for each tensor in store order; tensors that did not
    /// influence the output get zeros.
    pub fn gradients<T: Scalar>(&self, grads: &mut Gradients<T>, store: &ParamStore<T>) -> Vec<Array2<T>> {
        self.0
            .iter()
            .zip(store.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Array2::zeros(t.dim())))
            .collect()
    }
}

/// Rescale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Array2<T>], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| {
            let v = v.as_f64();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let factor = T::lit(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|v| v * factor);
        }
    }
    norm
}

/// Adaptive-moment gradient descent with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: Vec<Array2<T>>,
    second: Vec<Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(store: &ParamStore<T>, learning_rate: f64) -> Self {
        let zeros = || store.tensors().iter().map(|t| Array2::zeros(t.dim())).collect();
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Array2<T>]) {
        assert_eq!(grads.len(), store.len(), "one gradient per tensor");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let one = T::one();
        let bias1 = T::lit(1.0 - self.beta1.powi(t));
        let bias2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.learning_rate);
        let eps = T::lit(self.eps);
        for (((param, grad), m), v) in store
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            ndarray::Zip::from(param)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let m_hat = *m / bias1;
                    let v_hat = *v / bias2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}
