//! Small differentiable building blocks over candle tensors.

use candle_core::{DType, Device, Tensor, D};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;

/// Seeded deterministic generator used throughout the crate.
pub type SeededRng = rand_chacha::ChaCha8Rng;

pub fn seeded(seed: u64) -> SeededRng {
    use rand::SeedableRng;
    SeededRng::seed_from_u64(seed)
}

/// Standard-normal tensor drawn from `rng` (never candle's internal generator).
pub fn randn<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, dev)?.to_dtype(dtype)?)
}

pub fn full(value: f64, shape: &[usize], dtype: DType, dev: &Device) -> Result<Tensor> {
    Ok(Tensor::full(value, shape, dev)?.to_dtype(dtype)?)
}

/// Reads any float tensor as `f64` values in row-major order.
pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub fn log_softmax(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax(x: &Tensor) -> Result<Tensor> {
    Ok(log_softmax(x)?.exp()?)
}

/// LayerNorm over the last dimension without affine parameters.
pub fn layer_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    Ok(centered.broadcast_div(&(var + eps)?.sqrt()?)?)
}

/// Tanh-approximated GELU built from primitive ops so its gradient is exact
/// (the fused kernel's backward uses a looser approximation).
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let cube = x.sqr()?.mul(x)?;
    let inner = ((x + (cube * 0.044715)?)? * c)?;
    Ok(((inner.tanh()? + 1.0)?.mul(x)? * 0.5)?)
}

pub fn silu(x: &Tensor) -> Result<Tensor> {
    Ok(x.silu()?)
}

/// Multi-head scaled dot-product attention, no masking.
///
/// `q`, `k`, `v` are `[batch, seq, heads * head_dim]`; returns the same shape.
pub fn attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, w) = q.dims3()?;
    let hd = w / heads;
    let split = |t: &Tensor| -> Result<Tensor> {
        Ok(t.reshape((b, n, heads, hd))?.transpose(1, 2)?.contiguous()?)
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (hd as f64).sqrt())?;
    let probs = softmax(&scores)?;
    let out = probs.matmul(&v)?;
    Ok(out.transpose(1, 2)?.reshape((b, n, w))?)
}

/// Sinusoidal embedding of per-sample scalars `t` (shape `[batch]`) into `dim` channels.
pub fn timestep_embedding(t: &Tensor, dim: usize, scale: f64) -> Result<Tensor> {
    let half = dim / 2;
    let dev = t.device();
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10_000f64).ln() * i as f64 / half as f64).exp())
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), dev)?.to_dtype(t.dtype())?;
    let args = (t.unsqueeze(1)? * scale)?.broadcast_mul(&freqs)?;
    let emb = Tensor::cat(&[args.cos()?, args.sin()?], 1)?;
    if dim % 2 == 1 {
        let b = t.dim(0)?;
        let pad = Tensor::zeros((b, 1), t.dtype(), dev)?;
        return Ok(Tensor::cat(&[emb, pad], 1)?);
    }
    Ok(emb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [1000.0, 0.0, -1000.0]], &Device::Cpu).unwrap();
        let p = softmax(&x).unwrap().sum(1).unwrap().to_vec1::<f64>().unwrap();
        for s in p {
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_is_standardized() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let y = to_f64_vec(&layer_norm(&x, 0.0).unwrap()).unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        let var: f64 = y.iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}
