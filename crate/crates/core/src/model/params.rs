use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// One named parameter array.
#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub trainable: bool,
}

/// Ordered collection of named parameters.
///
/// Frozen parameters are handed out detached so no gradient is ever
/// computed for them.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<()> {
        let var = Var::from_tensor(&tensor)?;
        self.params.insert(name.into(), Param { var, trainable });
        Ok(())
    }

    pub fn insert_normal<R: Rng + ?Sized>(
        &mut self,
        name: &str,
        shape: &[usize],
        std: f64,
        dtype: DType,
        trainable: bool,
        rng: &mut R,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std is finite and non-negative");
        let values: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(dtype)?;
        self.insert(name, t, trainable)
    }

    pub fn insert_const(
        &mut self,
        name: &str,
        shape: &[usize],
        value: f64,
        dtype: DType,
        trainable: bool,
    ) -> Result<()> {
        let t = (Tensor::ones(shape, dtype, &Device::Cpu)? * value)?;
        self.insert(name, t, trainable)
    }

    /// Tensor for use in a forward pass.
    pub fn get(&self, name: &str) -> Result<Tensor> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))?;
        if p.trainable {
            Ok(p.var.as_tensor().clone())
        } else {
            Ok(p.var.as_tensor().detach())
        }
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) {
        if let Some(p) = self.params.get_mut(name) {
            p.trainable = trainable;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(n, p)| (n, &p.var))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.values().map(|p| p.var.elem_count()).sum()
    }

    /// Deep copy: new variables with the same values.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut out = ParamStore::new();
        for (name, p) in &self.params {
            out.insert(name.clone(), p.var.as_tensor().copy()?, p.trainable)?;
        }
        Ok(out)
    }

    /// Overwrites a parameter's value in place, keeping its shape.
    pub fn assign(&self, name: &str, value: &Tensor) -> Result<()> {
        let p = self
            .params
            .get(name)
            .ok_or_else(|| Error::Model(format!("missing parameter {name}")))?;
        if p.var.shape() != value.shape() {
            return Err(Error::Model(format!(
                "shape {:?} does not fit parameter {name} {:?}",
                value.shape(),
                p.var.shape()
            )));
        }
        p.var.set(&value.to_dtype(p.var.dtype())?)?;
        Ok(())
    }
}
