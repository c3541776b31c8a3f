//! Rectified-flow interpolation, noise-level sampling, one-step denoising and
//! the Stage 1A loss assembly.
//!
//! Velocity convention: the decoder regresses `x - z`, so `x_t + t * v` recovers
//! `x` and integration from `t_i` down to `t_{i+1}` adds `(t_i - t_{i+1}) * v`.

use candle_core::Tensor;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::nn::{scalar_f64, to_f64_vec};

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Reshapes per-sample times `[batch]` so they broadcast over `[batch, ...]`.
fn broadcast_times(t: &Tensor, like: &Tensor) -> Result<Tensor> {
    let b = t.dim(0)?;
    if like.dim(0)? != b {
        return Err(Error::shape(format!("{} noise levels for batch {}", b, like.dim(0)?)));
    }
    let mut shape = vec![b];
    shape.extend(std::iter::repeat(1).take(like.rank() - 1));
    Ok(t.reshape(shape)?.to_dtype(like.dtype())?)
}

/// `x_t = t * z + (1 - t) * x`, with `t` of shape `[batch]`.
pub fn interpolate(x: &Tensor, z: &Tensor, t: &Tensor) -> Result<Tensor> {
    check_same_shape(x, z, "interpolate")?;
    if to_f64_vec(t)?.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::invalid("noise level outside [0, 1]"));
    }
    let tb = broadcast_times(t, x)?;
    let one_minus = tb.affine(-1.0, 1.0)?;
    Ok((z.broadcast_mul(&tb)? + x.broadcast_mul(&one_minus)?)?)
}

/// Mean of `(x - z - v_pred)^2` over every element.
pub fn flow_loss(v_pred: &Tensor, x: &Tensor, z: &Tensor) -> Result<Tensor> {
    check_same_shape(v_pred, x, "flow_loss")?;
    check_same_shape(x, z, "flow_loss")?;
    Ok(((x - z)? - v_pred)?.sqr()?.mean_all()?)
}

/// One-step clean estimate `x̂ = x_t + t * v_pred`.
pub fn denoise_one_step(x_t: &Tensor, v_pred: &Tensor, t: &Tensor) -> Result<Tensor> {
    check_same_shape(x_t, v_pred, "denoise_one_step")?;
    let tb = broadcast_times(t, x_t)?;
    Ok((x_t + v_pred.broadcast_mul(&tb)?)?)
}

/// One draw from the thick-tailed logit-normal noise-level distribution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseLevel {
    pub t: f64,
    /// True when the draw came from the uniform component.
    pub from_uniform: bool,
}

/// With probability `uniform_mix_prob` draws `t ~ U(0, 1)`, otherwise `sigmoid(n)`, `n ~ N(0, 1)`.
pub fn sample_noise_level<R: Rng + ?Sized>(rng: &mut R, uniform_mix_prob: f64) -> NoiseLevel {
    let from_uniform = rng.random::<f64>() < uniform_mix_prob;
    let t = if from_uniform {
        rng.random::<f64>()
    } else {
        let n: f64 = StandardNormal.sample(rng);
        1.0 / (1.0 + (-n).exp())
    };
    NoiseLevel { t, from_uniform }
}

/// Loss components of one Stage 1A step and their weighted total.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub flow: Tensor,
    pub perc: Tensor,
    pub commit: Tensor,
    pub ent: Tensor,
    pub total: Tensor,
    pub lambda_perc: f64,
    pub lambda_commit: f64,
    pub lambda_ent: f64,
}

/// Scalar snapshot of a [`LossBundle`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValues {
    pub flow: f64,
    pub perc: f64,
    pub commit: f64,
    pub ent: f64,
    pub total: f64,
}

impl LossBundle {
    pub fn values(&self) -> Result<LossValues> {
        Ok(LossValues {
            flow: scalar_f64(&self.flow)?,
            perc: scalar_f64(&self.perc)?,
            commit: scalar_f64(&self.commit)?,
            ent: scalar_f64(&self.ent)?,
            total: scalar_f64(&self.total)?,
        })
    }
}

/// `flow + λ_perc * perc + λ_commit * commit + λ_ent * ent` with weights from `train`.
pub fn stage1a_loss(
    flow: Tensor,
    perc: Tensor,
    commit: Tensor,
    ent: Tensor,
    train: &TrainConfig,
) -> Result<LossBundle> {
    let (lp, lc, le) = (train.lambda_perc, train.lambda_commit, train.lambda_ent);
    for (name, v) in [("lambda_perc", lp), ("lambda_commit", lc), ("lambda_ent", le)] {
        if !(v >= 0.0) {
            return Err(Error::config(&format!("train.{name}"), "must be >= 0"));
        }
    }
    let total = (((&flow + (&perc * lp)?)? + (&commit * lc)?)? + (&ent * le)?)?;
    Ok(LossBundle {
        flow,
        perc,
        commit,
        ent,
        total,
        lambda_perc: lp,
        lambda_commit: lc,
        lambda_ent: le,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{randn, seeded};
    use candle_core::{DType, Device};

    fn t1(v: &[f64]) -> Tensor {
        Tensor::from_vec(v.to_vec(), v.len(), &Device::Cpu).unwrap()
    }

    #[test]
    fn interpolate_endpoints_and_midpoint() {
        let dev = Device::Cpu;
        let x = randn(&mut seeded(1), &[2, 3], DType::F64, &dev).unwrap();
        let z = randn(&mut seeded(2), &[2, 3], DType::F64, &dev).unwrap();
        let at0 = interpolate(&x, &z, &t1(&[0.0, 0.0])).unwrap();
        let at1 = interpolate(&x, &z, &t1(&[1.0, 1.0])).unwrap();
        assert_eq!(to_f64_vec(&at0).unwrap(), to_f64_vec(&x).unwrap());
        assert_eq!(to_f64_vec(&at1).unwrap(), to_f64_vec(&z).unwrap());
        let mid = interpolate(&t1(&[0.0]), &t1(&[2.0]), &t1(&[0.5])).unwrap();
        assert_eq!(to_f64_vec(&mid).unwrap(), vec![1.0]);
        assert!(interpolate(&x, &z, &t1(&[1.5, 0.0])).is_err());
    }

    #[test]
    fn flow_loss_exact_and_offset() {
        let dev = Device::Cpu;
        let x = randn(&mut seeded(1), &[2, 3], DType::F64, &dev).unwrap();
        let z = randn(&mut seeded(2), &[2, 3], DType::F64, &dev).unwrap();
        let v = (&x - &z).unwrap();
        assert_eq!(scalar_f64(&flow_loss(&v, &x, &z).unwrap()).unwrap(), 0.0);
        let off = (v + 0.25).unwrap();
        let l = scalar_f64(&flow_loss(&off, &x, &z).unwrap()).unwrap();
        assert!((l - 0.0625).abs() < 1e-12);
    }

    #[test]
    fn denoise_examples() {
        let x = denoise_one_step(&t1(&[0.5]), &t1(&[1.0]), &t1(&[0.5])).unwrap();
        assert_eq!(to_f64_vec(&x).unwrap(), vec![1.0]);
        let x = denoise_one_step(&t1(&[0.3]), &t1(&[7.0]), &t1(&[0.0])).unwrap();
        assert_eq!(to_f64_vec(&x).unwrap(), vec![0.3]);
    }

    #[test]
    fn loss_bundle_with_zero_weights_is_flow() {
        let train = TrainConfig { lambda_perc: 0.0, lambda_commit: 0.0, lambda_ent: 0.0, ..Default::default() };
        let b = stage1a_loss(t1(&[1.5]).sum_all().unwrap(), t1(&[2.0]).sum_all().unwrap(),
            t1(&[3.0]).sum_all().unwrap(), t1(&[-4.0]).sum_all().unwrap(), &train).unwrap();
        assert_eq!(b.values().unwrap().total, 1.5);
        let bad = TrainConfig { lambda_ent: -0.1, ..Default::default() };
        let s = || t1(&[1.0]).sum_all().unwrap();
        assert!(stage1a_loss(s(), s(), s(), s(), &bad).is_err());
    }
}
