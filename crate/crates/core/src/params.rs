//! Named parameters with paired gradient accumulators.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Parameters keyed by dotted name, iterated in name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::invalid(
                "param_store",
                alloc::format!("duplicate parameter `{name}`"),
            ));
        }
        let grad = Tensor::zeros(value.shape());
        self.entries.insert(name.to_string(), Param { value, grad });
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn param(&self, name: &str) -> Result<&Param<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param_mut(&mut self, name: &str) -> Result<&mut Param<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.param(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor<T>> {
        Ok(&self.param(name)?.grad)
    }

    pub fn grad_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        Ok(&mut self.param_mut(name)?.grad)
    }

    /// Replaces a value, keeping the shape contract.
    pub fn set_value(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self.param_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.fill(T::zero());
        }
    }

    pub fn grad_norm(&self) -> T {
        self.entries
            .values()
            .map(|p| p.grad.dot(&p.grad))
            .sum::<T>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: T) {
        for p in self.entries.values_mut() {
            p.grad.scale(s);
        }
    }

    /// Adds every gradient of `other` (same names and shapes) into `self`.
    pub fn accumulate_grads(&mut self, other: &ParamStore<T>) -> Result<()> {
        for (name, p) in self.entries.iter_mut() {
            let o = other.param(name)?;
            p.grad.add_assign(&o.grad)?;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, p)| {
                    (
                        k.clone(),
                        Param {
                            value: p.value.cast(),
                            grad: p.grad.cast(),
                        },
                    )
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_grads_shaped() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("a.w", Tensor::ones(&[2, 3])).unwrap();
        assert!(ps.insert("a.w", Tensor::ones(&[1])).is_err());
        assert_eq!(ps.grad("a.w").unwrap().shape(), &[2, 3]);
        assert!(matches!(ps.value("nope"), Err(Error::UnknownParam(_))));
        assert!(ps.set_value("a.w", Tensor::ones(&[3, 2])).is_err());
    }

    #[test]
    fn grad_norm_and_scaling() {
        let mut ps = ParamStore::<f64>::new();
        ps.insert("x", Tensor::zeros(&[2])).unwrap();
        ps.insert("y", Tensor::zeros(&[1])).unwrap();
        ps.grad_mut("x")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[3.0, 0.0]);
        ps.grad_mut("y").unwrap().data_mut()[0] = 4.0;
        assert_eq!(ps.grad_norm(), 5.0);
        ps.scale_grads(0.5);
        assert_eq!(ps.grad_norm(), 2.5);
        ps.zero_grads();
        assert_eq!(ps.grad_norm(), 0.0);
    }
}
