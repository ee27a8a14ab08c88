//! Central finite-difference checks of autograd gradients.

use candle_core::Tensor;
use rand::Rng;

use super::params::ParamStore;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradProbe {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradProbe {
    /// `|a - n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients from dividing by zero.
    pub fn relative_error(&self, floor: f64) -> f64 {
        (self.analytic - self.numeric).abs() / self.analytic.abs().max(self.numeric.abs()).max(floor)
    }
}

/// Picks `count` random `(parameter, element)` coordinates among the
/// parameters accepted by `filter`.
pub fn sample_coordinates<R: Rng>(
    store: &ParamStore,
    count: usize,
    rng: &mut R,
    filter: impl Fn(&str) -> bool,
) -> Vec<(usize, usize)> {
    let eligible: Vec<usize> = store
        .params()
        .iter()
        .enumerate()
        .filter(|(_, p)| filter(&p.name))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Vec::new();
    }
    (0..count)
        .map(|_| {
            let p = eligible[rng.random_range(0..eligible.len())];
            (p, rng.random_range(0..store.params()[p].var.elem_count()))
        })
        .collect()
}

/// Compares backprop gradients of the scalar `loss` with central differences
/// at the given coordinates. Parameter values are restored afterwards.
pub fn check_gradients(
    store: &ParamStore,
    coords: &[(usize, usize)],
    eps: f64,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<Vec<GradProbe>> {
    let value = loss()?;
    let grads = value.backward()?;
    let mut probes = Vec::with_capacity(coords.len());
    for &(p, i) in coords {
        let param = &store.params()[p];
        let analytic = match grads.get(param.var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?[i],
            None => 0.0,
        };
        let original = store.values(p)?;
        let mut shifted = original.clone();
        shifted[i] = original[i] + eps;
        store.set_values(p, &shifted)?;
        let up = scalar(&loss()?)?;
        shifted[i] = original[i] - eps;
        store.set_values(p, &shifted)?;
        let down = scalar(&loss()?)?;
        store.set_values(p, &original)?;
        probes.push(GradProbe { param: param.name.clone(), index: i, analytic, numeric: (up - down) / (2.0 * eps) });
    }
    Ok(probes)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}
