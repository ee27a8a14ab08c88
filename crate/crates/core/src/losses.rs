//! Loss terms and the warm-up schedule.
//!
//! Every multi-label distribution is treated as `U` independent Bernoulli
//! variables. Probabilities are clamped to `[1e-7, 1 - 1e-7]` before any log.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::config::{HyperParams, KlDirection};
use crate::error::{Error, Result};

pub const PROB_EPS: f64 = 1e-7;

/// `sigmoid(x)` clamped away from 0 and 1.
pub fn clamped_sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::sigmoid(x)?.clamp(PROB_EPS, 1.0 - PROB_EPS)?)
}

fn bernoulli_kl(from: &Tensor, to: &Tensor) -> Result<Tensor> {
    // KL(from || to) per element.
    let one_from = from.affine(-1.0, 1.0)?;
    let one_to = to.affine(-1.0, 1.0)?;
    let a = (from * (from.log()? - to.log()?)?)?;
    let b = (&one_from * (one_from.log()? - one_to.log()?)?)?;
    Ok((a + b)?)
}

/// Online distillation between two logit sets `[b, U]`.
///
/// Both are pulled toward the detached soft target of their mean logits:
/// `T^2 / b * sum over batch and AUs of [KL(q || p) + KL(q || w)]`
/// (or `KL(p || q) + KL(w || q)` with [`KlDirection::ModelToTarget`]).
pub fn kl_distill(p_logits: &Tensor, w_logits: &Tensor, temperature: f64, direction: KlDirection) -> Result<Tensor> {
    if p_logits.dims() != w_logits.dims() {
        return Err(Error::shape(format!("distillation inputs {:?} vs {:?}", p_logits.dims(), w_logits.dims())));
    }
    let b = p_logits.dims().first().copied().unwrap_or(0);
    if b == 0 {
        return Err(Error::config("distillation needs a non-empty batch"));
    }
    if !(temperature > 0.0) {
        return Err(Error::config("temperature must be positive"));
    }
    let mean = ((p_logits + w_logits)? * 0.5)?.detach();
    let q = clamped_sigmoid(&(mean / temperature)?)?;
    let p = clamped_sigmoid(&(p_logits / temperature)?)?;
    let w = clamped_sigmoid(&(w_logits / temperature)?)?;
    let kl = match direction {
        KlDirection::TargetToModel => (bernoulli_kl(&q, &p)? + bernoulli_kl(&q, &w)?)?,
        KlDirection::ModelToTarget => (bernoulli_kl(&p, &q)? + bernoulli_kl(&w, &q)?)?,
    };
    Ok((kl.sum_all()? * (temperature * temperature / b as f64))?)
}

/// Weighted BCE per row: mean over the last (AU) axis of
/// `-[w y log s + (1 - y) log(1 - s)]`. `weights` has one entry per AU.
pub fn weighted_bce_rows(logits: &Tensor, targets: &Tensor, weights: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::shape(format!("logits {:?} vs targets {:?}", logits.dims(), targets.dims())));
    }
    let s = clamped_sigmoid(logits)?;
    let pos = targets.broadcast_mul(weights)?.mul(&s.log()?)?;
    let neg = targets.affine(-1.0, 1.0)?.mul(&s.affine(-1.0, 1.0)?.log()?)?;
    Ok((pos + neg)?.neg()?.mean(D::Minus1)?)
}

/// [`weighted_bce_rows`] averaged over every leading axis.
pub fn weighted_bce(logits: &Tensor, targets: &Tensor, weights: &Tensor) -> Result<Tensor> {
    Ok(weighted_bce_rows(logits, targets, weights)?.mean_all()?)
}

/// `bce(first) + bce(second) + alpha * kl_term`, both against the key-frame labels.
pub fn composite_supervised(
    first: &Tensor,
    second: &Tensor,
    targets: &Tensor,
    weights: &Tensor,
    alpha: f64,
    kl_term: &Tensor,
) -> Result<Tensor> {
    let sup = (weighted_bce(first, targets, weights)? + weighted_bce(second, targets, weights)?)?;
    Ok((sup + (kl_term * alpha)?)?)
}

/// Pseudo-label BCE per clip: logits and pseudo labels are `[b, n - 1, U]`;
/// returns `[b]`, the sum over the unlabeled positions of the weighted BCE.
pub fn pseudo_bce_per_clip(logits: &Tensor, pseudo: &Tensor, weights: &Tensor) -> Result<Tensor> {
    Ok(weighted_bce_rows(logits, pseudo, weights)?.sum(D::Minus1)?)
}

/// Perturbation-classifier loss: ordered clips are class 0, shuffled clips
/// class 1. Mean over clips of the two BCE terms' average.
pub fn ssl_loss(ordered_logits: &Tensor, shuffled_logits: &Tensor) -> Result<Tensor> {
    let ordered = clamped_sigmoid(ordered_logits)?.affine(-1.0, 1.0)?.log()?;
    let shuffled = clamped_sigmoid(shuffled_logits)?.log()?;
    Ok(((ordered + shuffled)? * -0.5)?.mean_all()?)
}

/// Gaussian warm-up weight for zero-based epoch `x`:
/// `min(1, exp(-omega * (1 - (x - mu)^2 / sigma^2)))` before `warmup_epochs`, then 1.
pub fn ramp_weight(x: usize, omega: f64, mu: f64, sigma: f64, warmup_epochs: usize) -> Result<f64> {
    if sigma == 0.0 {
        return Err(Error::config("ramp sigma must be non-zero"));
    }
    if x >= warmup_epochs {
        return Ok(1.0);
    }
    let d = x as f64 - mu;
    Ok((-omega * (1.0 - d * d / (sigma * sigma))).exp().min(1.0))
}

/// Ramp weight for 1-based training epoch `epoch`.
pub fn ramp_for_epoch(epoch: usize, hp: &HyperParams) -> Result<f64> {
    ramp_weight(epoch.saturating_sub(1), hp.ramp_omega, hp.ramp_mu, hp.ramp_sigma, hp.warmup_epochs)
}

/// `lambda1 L_s + w (L_bce + lambda2 L_t + lambda3 L_ssl + lambda4 L_semi)`.
pub fn compose(hp: &HyperParams, w_ramp: f64, l_s: f64, l_bce: f64, l_t: f64, l_ssl: f64, l_semi: f64) -> f64 {
    hp.lambda1 * l_s + w_ramp * (l_bce + hp.lambda2 * l_t + hp.lambda3 * l_ssl + hp.lambda4 * l_semi)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_skd: f64,
    pub l_tkd: f64,
    /// BCE of the ensemble output.
    pub l_bce: f64,
    pub l_s: f64,
    pub l_t: f64,
    pub l_ssl: f64,
    pub l_semi: f64,
    pub w_ramp: f64,
    pub l_total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 9] = ["l_skd", "l_tkd", "l_bce", "l_s", "l_t", "l_ssl", "l_semi", "w_ramp", "l_total"];

    pub fn values(&self) -> [f64; 9] {
        [self.l_skd, self.l_tkd, self.l_bce, self.l_s, self.l_t, self.l_ssl, self.l_semi, self.w_ramp, self.l_total]
    }

    /// Adds `scale * other` field by field.
    pub fn accumulate(&mut self, other: &LossBreakdown, scale: f64) {
        self.l_skd += other.l_skd * scale;
        self.l_tkd += other.l_tkd * scale;
        self.l_bce += other.l_bce * scale;
        self.l_s += other.l_s * scale;
        self.l_t += other.l_t * scale;
        self.l_ssl += other.l_ssl * scale;
        self.l_semi += other.l_semi * scale;
        self.w_ramp += other.w_ramp * scale;
        self.l_total += other.l_total * scale;
    }
}

/// Differentiable loss terms of one batch, each a scalar tensor except
/// `semi_per_clip` (`[b]`, ungated).
pub struct LossTerms {
    pub l_skd: Tensor,
    pub l_tkd: Tensor,
    pub l_bce: Tensor,
    pub l_s: Tensor,
    pub l_t: Tensor,
    pub l_ssl: Tensor,
    pub semi_per_clip: Tensor,
}

/// Per-clip pseudo-label weights: 0 for every clip before `start_epoch`
/// (3 by default, so epochs 1 and 2 never use pseudo labels), else the mask.
pub fn semi_gate(mask: &[bool], epoch: usize, start_epoch: usize) -> Vec<f64> {
    mask.iter().map(|&m| if epoch >= start_epoch && m { 1.0 } else { 0.0 }).collect()
}

/// Assembles the total loss. `L_semi` is the gated per-clip sum divided by the batch size.
pub fn total_loss(terms: &LossTerms, hp: &HyperParams, epoch: usize, tpl_mask: &[bool]) -> Result<(Tensor, LossBreakdown)> {
    let b = terms.semi_per_clip.dim(0)?;
    if tpl_mask.len() != b {
        return Err(Error::shape(format!("{} gate entries for {b} clips", tpl_mask.len())));
    }
    let gate = Tensor::from_vec(semi_gate(tpl_mask, epoch, hp.tpl_start_epoch), b, terms.semi_per_clip.device())?
        .to_dtype(terms.semi_per_clip.dtype())?;
    let l_semi = ((&terms.semi_per_clip * &gate)?.sum_all()? / b.max(1) as f64)?;
    let w_ramp = ramp_for_epoch(epoch, hp)?;
    let inner = ((&terms.l_bce + (&terms.l_t * hp.lambda2)?)? + (&terms.l_ssl * hp.lambda3)?)?;
    let inner = (inner + (&l_semi * hp.lambda4)?)?;
    let total = ((&terms.l_s * hp.lambda1)? + (inner * w_ramp)?)?;
    let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?) };
    let breakdown = LossBreakdown {
        l_skd: scalar(&terms.l_skd)?,
        l_tkd: scalar(&terms.l_tkd)?,
        l_bce: scalar(&terms.l_bce)?,
        l_s: scalar(&terms.l_s)?,
        l_t: scalar(&terms.l_t)?,
        l_ssl: scalar(&terms.l_ssl)?,
        l_semi: scalar(&l_semi)?,
        w_ramp,
        l_total: scalar(&total)?,
    };
    Ok((total, breakdown))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap().unsqueeze(0).unwrap()
    }

    fn s(t: &Tensor) -> f64 {
        t.to_scalar::<f64>().unwrap()
    }

    fn sig(x: f64) -> f64 {
        (1.0 / (1.0 + (-x).exp())).clamp(PROB_EPS, 1.0 - PROB_EPS)
    }

    fn kl(q: f64, p: f64) -> f64 {
        q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln()
    }

    #[test]
    fn identical_logits_have_zero_distillation() {
        let x = t1(&[0.3, -2.0, 4.0]);
        assert!(s(&kl_distill(&x, &x, 1.0, KlDirection::TargetToModel).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn single_au_distillation_example() {
        let got = s(&kl_distill(&t1(&[0.0]), &t1(&[2.0]), 1.0, KlDirection::TargetToModel).unwrap());
        let q = sig(1.0);
        assert!((q - 0.7311).abs() < 1e-4);
        let expected = kl(q, sig(0.0)) + kl(q, sig(2.0));
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
        let reverse = s(&kl_distill(&t1(&[0.0]), &t1(&[2.0]), 1.0, KlDirection::ModelToTarget).unwrap());
        assert!((reverse - (kl(sig(0.0), q) + kl(sig(2.0), q))).abs() < 1e-12);
        let empty = Tensor::zeros((0, 3), DType::F64, &Device::Cpu).unwrap();
        assert!(kl_distill(&empty, &empty, 1.0, KlDirection::TargetToModel).is_err());
    }

    #[test]
    fn weighted_bce_examples() {
        let w1 = Tensor::new(&[1.0f64], &Device::Cpu).unwrap();
        let v = s(&weighted_bce(&t1(&[0.0]), &t1(&[1.0]), &w1).unwrap());
        assert!((v - 0.6931).abs() < 1e-4);
        let confident = s(&weighted_bce(&t1(&[-40.0]), &t1(&[0.0]), &w1).unwrap());
        assert!(confident < 1e-6);

        let w = Tensor::new(&[2.0f64, 1.0], &Device::Cpu).unwrap();
        let got = s(&weighted_bce(&t1(&[1.0, -1.0]), &t1(&[1.0, 0.0]), &w).unwrap());
        let expected = (2.0 * -sig(1.0).ln() + -(1.0 - sig(-1.0)).ln()) / 2.0;
        assert!((got - expected).abs() < 1e-12);
    }

    #[test]
    fn composite_reduces_without_distillation() {
        let w = Tensor::new(&[1.0f64, 1.0], &Device::Cpu).unwrap();
        let y = t1(&[1.0, 0.0]);
        let good = t1(&[20.0, -20.0]);
        let kl = Tensor::new(3.0f64, &Device::Cpu).unwrap();
        assert!(s(&composite_supervised(&good, &good, &y, &w, 0.0, &kl).unwrap()) < 1e-6);
        let a = t1(&[0.5, 0.2]);
        let pure = s(&weighted_bce(&a, &y, &w).unwrap()) * 2.0;
        let with = s(&composite_supervised(&a, &a, &y, &w, 0.5, &kl).unwrap());
        assert!((with - pure - 1.5).abs() < 1e-12);
    }

    #[test]
    fn pseudo_bce_sums_positions() {
        let w = Tensor::new(&[3.0f64, 1.0], &Device::Cpu).unwrap();
        let logits = Tensor::new(&[[[0.0f64, -30.0]]], &Device::Cpu).unwrap();
        let labels = Tensor::new(&[[[1.0f64, 0.0]]], &Device::Cpu).unwrap();
        let v = pseudo_bce_per_clip(&logits, &labels, &w).unwrap().to_vec1::<f64>().unwrap();
        // One unlabeled frame: AU0 contributes 0.6931 * w_0, averaged over U = 2.
        assert!((v[0] - 3.0 * std::f64::consts::LN_2 / 2.0).abs() < 1e-6);

        let logits = Tensor::new(&[[[6.0f64, -7.0], [-8.0, 9.0], [5.5, 6.0], [-6.0, -5.5]]], &Device::Cpu).unwrap();
        let labels = logits.ge(0.0).unwrap().to_dtype(DType::F64).unwrap();
        let v = pseudo_bce_per_clip(&logits, &labels, &w).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(v.len(), 1);
        assert!(v[0] < 0.02);
    }

    #[test]
    fn ramp_examples() {
        let r = |x| ramp_weight(x, 2.0, 0.0, 5.0, 5).unwrap();
        assert!((r(0) - (-2.0f64).exp()).abs() < 1e-15);
        assert!((r(0) - 0.1353).abs() < 1e-4);
        assert_eq!(r(5), 1.0);
        assert_eq!(r(50), 1.0);
        assert!((0..5).all(|x| r(x) <= r(x + 1)));
        assert!(ramp_weight(0, 2.0, 0.0, 0.0, 5).is_err());
    }

    fn terms(v: [f64; 4], semi: &[f64]) -> LossTerms {
        let c = |x: f64| Tensor::new(x, &Device::Cpu).unwrap();
        LossTerms {
            l_skd: c(0.0),
            l_tkd: c(0.0),
            l_s: c(v[0]),
            l_bce: c(v[1]),
            l_t: c(v[2]),
            l_ssl: c(v[3]),
            semi_per_clip: Tensor::new(semi, &Device::Cpu).unwrap(),
        }
    }

    #[test]
    fn total_loss_composition() {
        let hp = HyperParams::default();
        // Epoch 6 is past warm-up, so w_ramp = 1.
        let (_, b) = total_loss(&terms([1.0, 1.0, 1.0, 1.0], &[1.0]), &hp, 6, &[true]).unwrap();
        assert!((b.l_total - 2.45).abs() < 1e-12);
        assert!((compose(&hp, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0) - 2.45).abs() < 1e-12);

        let zero = HyperParams { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0, lambda4: 0.0, ..hp.clone() };
        let (_, b) = total_loss(&terms([3.0, 0.7, 2.0, 5.0], &[4.0]), &zero, 6, &[true]).unwrap();
        assert_eq!(b.l_total, 0.7);

        let (_, early) = total_loss(&terms([1.0, 1.0, 1.0, 1.0], &[8.0, 8.0]), &hp, 1, &[true, true]).unwrap();
        assert_eq!(early.l_semi, 0.0);
        let (_, gated) = total_loss(&terms([1.0, 1.0, 1.0, 1.0], &[8.0, 2.0]), &hp, 3, &[false, true]).unwrap();
        assert_eq!(gated.l_semi, 1.0);
    }

    #[test]
    fn doubling_lambda2_adds_ramped_temporal_loss() {
        let unit = HyperParams { lambda2: 1.0, ..HyperParams::default() };
        let double = HyperParams { lambda2: 2.0, ..unit.clone() };
        for epoch in 1..8 {
            let t = terms([0.4, 0.9, 1.7, 0.3], &[0.5]);
            let (_, a) = total_loss(&t, &unit, epoch, &[true]).unwrap();
            let (_, b) = total_loss(&t, &double, epoch, &[true]).unwrap();
            assert!((b.l_total - a.l_total - a.w_ramp * 1.7).abs() < 1e-12);
        }
    }
}
