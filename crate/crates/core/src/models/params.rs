//! Named, grouped trainable parameters with seeded initialisation.
//!
//! Candle's CPU backend cannot be seeded, so every parameter is drawn here
//! from a ChaCha stream and wrapped in a [`Var`].

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    BackboneA,
    Decouple,
    SpatialTeacher,
    BackboneB,
    Students,
    TemporalTeacher,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::BackboneA,
        ParamGroup::Decouple,
        ParamGroup::SpatialTeacher,
        ParamGroup::BackboneB,
        ParamGroup::Students,
        ParamGroup::TemporalTeacher,
    ];
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    Normal(f64),
}

#[derive(Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub var: Var,
}

#[derive(Debug)]
pub struct ParamStore {
    params: Vec<Param>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: Device::Cpu, dtype }
    }

    /// Runs `f` `times` times from the same RNG state, so each call draws
    /// identical initial values. The store continues from where the last call left off.
    pub fn replicate<T>(&mut self, times: usize, mut f: impl FnMut(&mut Self, usize) -> Result<T>) -> Result<Vec<T>> {
        let start = self.rng.clone();
        (0..times)
            .map(|i| {
                self.rng = start.clone();
                f(self, i)
            })
            .collect()
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a parameter and returns a tensor that aliases its storage,
    /// so in-place optimizer updates are visible to the layer holding it.
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, dims: &[usize], init: Init) -> Result<Tensor> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::config(format!("duplicate parameter name `{name}`")));
        }
        let count: usize = dims.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; count],
            Init::Ones => vec![1.0; count],
            Init::Const(c) => vec![c; count],
            Init::Uniform(bound) => (0..count).map(|_| self.rng.random_range(-bound..=bound)).collect(),
            Init::Normal(std) => {
                let normal = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
                (0..count).map(|_| normal.sample(&mut self.rng)).collect()
            }
        };
        let tensor = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        let alias = var.as_tensor().clone();
        self.params.push(Param { name, group, var });
        Ok(alias)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn in_group(&self, group: ParamGroup) -> impl Iterator<Item = &Param> {
        self.params.iter().filter(move |p| p.group == group)
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    /// Flattened values of one parameter as `f64`.
    pub fn values(&self, index: usize) -> Result<Vec<f64>> {
        Ok(self.params[index].var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1()?)
    }

    pub fn set_values(&self, index: usize, values: &[f64]) -> Result<()> {
        let var = &self.params[index].var;
        if values.len() != var.elem_count() {
            return Err(Error::shape(format!(
                "parameter `{}` holds {} values, got {}",
                self.params[index].name,
                var.elem_count(),
                values.len()
            )));
        }
        let t = Tensor::from_slice(values, var.shape(), &self.device)?.to_dtype(self.dtype)?;
        var.set(&t)?;
        Ok(())
    }

    /// Copies every parameter value from `other`, matching by name and shape.
    pub fn copy_from(&self, other: &ParamStore) -> Result<()> {
        for (i, p) in self.params.iter().enumerate() {
            let src = other
                .params
                .iter()
                .position(|q| q.name == p.name)
                .ok_or_else(|| Error::shape(format!("parameter `{}` missing from source", p.name)))?;
            self.set_values(i, &other.values(src)?)?;
        }
        Ok(())
    }
}

/// Uniform fan-in initialisation; `gain` is `sqrt(2)` before a ReLU.
pub fn fan_in_uniform(fan_in: usize, gain: f64) -> Init {
    Init::Uniform(gain * (3.0 / fan_in as f64).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_init_is_reproducible() {
        let mut a = ParamStore::new(3, DType::F32);
        let mut b = ParamStore::new(3, DType::F32);
        a.add("w", ParamGroup::Students, &[4, 3], Init::Uniform(0.5)).unwrap();
        b.add("w", ParamGroup::Students, &[4, 3], Init::Uniform(0.5)).unwrap();
        assert_eq!(a.values(0).unwrap(), b.values(0).unwrap());
        assert!(a.values(0).unwrap().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn alias_sees_updates() {
        let mut s = ParamStore::new(0, DType::F64);
        let t = s.add("b", ParamGroup::Decouple, &[3], Init::Zeros).unwrap();
        s.set_values(0, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(t.to_vec1::<f64>().unwrap(), vec![1.0, 2.0, 3.0]);
        assert!(s.add("b", ParamGroup::Decouple, &[1], Init::Ones).is_err());
        assert!(s.set_values(0, &[1.0]).is_err());
    }
}
