use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

/// Trainable tensor with its gradient slot and AdamW moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
    pub step: u64,
}

impl<T: Scalar> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let zeros = Tensor::zeros(value.shape());
        Self {
            name: name.into(),
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
            step: 0,
        }
    }
}

/// Ordered, named parameter set. The `tag` identifies the store on a
/// [`Graph`](crate::nn::Graph) tape and must be unique among stores that
/// share a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    tag: String,
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(tag: impl Into<String>) -> Self {
        Self {
            tag: tag.into(),
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    /// Copy of this store under a different tag (e.g. an EMA target).
    pub fn clone_as(&self, tag: impl Into<String>) -> Self {
        let mut out = self.clone();
        out.tag = tag.into();
        for p in &mut out.params {
            p.grad.fill(T::zero());
            p.m.fill(T::zero());
            p.v.fill(T::zero());
            p.step = 0;
        }
        out
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> usize {
        let name = name.into();
        let idx = self.params.len();
        self.index.insert(name.clone(), idx);
        self.params.push(Param::new(name, value));
        idx
    }

    pub fn get(&self, index: usize) -> &Param<T> {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param<T> {
        &mut self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(T::zero());
        }
    }

    pub fn grad_is_zero(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.grad.data().iter().all(|g| *g == T::zero()))
    }

    pub fn grad_is_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.is_finite())
    }

    pub fn names(&self) -> Vec<&str> {
        self.params.iter().map(|p| p.name.as_str()).collect()
    }

    /// Squared L2 distance between the values of two stores with equal
    /// name sets.
    pub fn sq_distance(&self, other: &ParamStore<T>) -> Result<T> {
        check_same_names(self, other)?;
        let mut acc = T::zero();
        for p in &self.params {
            let q = other.by_name(&p.name).unwrap();
            for (a, b) in p.value.data().iter().zip(q.value.data()) {
                acc += (*a - *b) * (*a - *b);
            }
        }
        Ok(acc)
    }

    /// Copies values (not optimizer state) from `other`.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        check_same_names(self, other)?;
        for p in &mut self.params {
            p.value = other.by_name(&p.name).unwrap().value.clone();
        }
        Ok(())
    }
}

fn check_same_names<T: Scalar>(a: &ParamStore<T>, b: &ParamStore<T>) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ParamMismatch(format!(
            "{} has {} parameters, {} has {}",
            a.tag(),
            a.len(),
            b.tag(),
            b.len()
        )));
    }
    for p in a.iter() {
        match b.by_name(&p.name) {
            Some(q) if q.value.shape() == p.value.shape() => {}
            Some(q) => {
                return Err(Error::ParamMismatch(format!(
                    "{}: shape {:?} vs {:?}",
                    p.name,
                    p.value.shape(),
                    q.value.shape()
                )))
            }
            None => {
                return Err(Error::ParamMismatch(format!(
                    "{} missing from {}",
                    p.name,
                    b.tag()
                )))
            }
        }
    }
    Ok(())
}

/// Soft target update `target ← (1−τ)·target + τ·online`.
pub fn ema_blend<T: Scalar>(target: &mut ParamStore<T>, online: &ParamStore<T>, tau: T) -> Result<()> {
    check_same_names(target, online)?;
    let keep = T::one() - tau;
    for p in target.iter_mut() {
        let src = online.by_name(&p.name).unwrap();
        p.value
            .data_mut()
            .iter_mut()
            .zip(src.value.data())
            .for_each(|(t, o)| *t = keep * *t + tau * *o);
    }
    Ok(())
}
