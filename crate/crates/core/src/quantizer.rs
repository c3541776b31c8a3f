//! Lookup-free binary quantization, its entropy and commitment regularizers,
//! finite scalar quantization, and token packing.
//!
//! Latent tensors are `[batch, S, D]`. Binary codes hold exactly `-1.0` or `+1.0`.
//! Each token's `D` bits are split into `D / g` groups; every group packs into
//! one id in `[0, 2^g)` with the group's first element as bit 0.

use std::io::{Read, Write};

use candle_core::{CpuStorage, CustomOp1, DType, Layout, Shape, Tensor};

use crate::error::{Error, Result};
use crate::nn::{log_softmax, to_f64_vec};

/// Largest group width whose codebook is enumerated by the entropy loss.
pub const MAX_GROUP_BITS: usize = 16;

fn map_cpu(
    name: &str,
    storage: &CpuStorage,
    layout: &Layout,
    f: impl Fn(f64) -> f64,
) -> candle_core::Result<(CpuStorage, Shape)> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg(format!("{name}: non-contiguous input")))?;
    let out = match storage {
        CpuStorage::F32(v) => CpuStorage::F32(v[start..end].iter().map(|&x| f(x as f64) as f32).collect()),
        CpuStorage::F64(v) => CpuStorage::F64(v[start..end].iter().map(|&x| f(x)).collect()),
        _ => return Err(candle_core::Error::Msg(format!("{name}: unsupported dtype"))),
    };
    Ok((out, layout.shape().clone()))
}

/// Sign with the `>= 0 -> +1` convention; identity gradient.
struct SignStraightThrough;

impl CustomOp1 for SignStraightThrough {
    fn name(&self) -> &'static str {
        "sign-straight-through"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        map_cpu(self.name(), s, l, |x| if x >= 0.0 { 1.0 } else { -1.0 })
    }
    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.clone()))
    }
}

/// Rounding onto a grid of spacing `1/half_levels`; identity gradient.
struct GridRoundStraightThrough {
    half_levels: f64,
}

impl CustomOp1 for GridRoundStraightThrough {
    fn name(&self) -> &'static str {
        "grid-round-straight-through"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let h = self.half_levels;
        map_cpu(self.name(), s, l, |x| (x * h).round() / h)
    }
    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad.clone()))
    }
}

fn ensure_finite(latent: &Tensor, what: &str) -> Result<()> {
    let bad = to_f64_vec(latent)?.iter().any(|v| !v.is_finite());
    if bad {
        return Err(Error::NonFinite(format!("{what} input contains NaN or infinity")));
    }
    Ok(())
}

/// `c = 2 * 1[ĉ >= 0] - 1`, with a straight-through (identity) gradient.
pub fn binarize(latent: &Tensor) -> Result<Tensor> {
    ensure_finite(latent, "binarize")?;
    Ok(latent.contiguous()?.apply_op1(SignStraightThrough)?)
}

/// Mean of `(ĉ - q(ĉ))^2`; the quantized target carries no gradient.
pub fn commitment_loss(latent: &Tensor) -> Result<Tensor> {
    ensure_finite(latent, "commitment_loss")?;
    let target = binarize(latent)?.detach();
    Ok((latent - target)?.sqr()?.mean_all()?)
}

/// The `2^g` codebook vectors as columns, shape `[g, 2^g]`, entry `(j, k)` is
/// `+1` when bit `j` of `k` is set and `-1` otherwise.
pub fn group_codebook(group_bits: usize, dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
    let k = 1usize << group_bits;
    let mut data = Vec::with_capacity(group_bits * k);
    for j in 0..group_bits {
        for code in 0..k {
            data.push(if (code >> j) & 1 == 1 { 1.0f64 } else { -1.0 });
        }
    }
    Ok(Tensor::from_vec(data, (group_bits, k), dev)?.to_dtype(dtype)?)
}

/// LFQ entropy regularizer in nats.
///
/// Each group of `g` dims yields logits `ĉ_group · C` against the group codebook and
/// `p = softmax(logits)`. Returns the mean per-sample entropy minus the entropy of the
/// batch-averaged distribution, each averaged over group positions.
pub fn entropy_loss(latent: &Tensor, group_bits: usize) -> Result<Tensor> {
    if group_bits == 0 || group_bits > MAX_GROUP_BITS {
        return Err(Error::invalid(format!(
            "entropy group bits must lie in 1..={MAX_GROUP_BITS}, got {group_bits}"
        )));
    }
    ensure_finite(latent, "entropy_loss")?;
    let (b, s, d) = latent.dims3()?;
    if d % group_bits != 0 {
        return Err(Error::shape(format!("token dim {d} not divisible by group bits {group_bits}")));
    }
    let groups = d / group_bits;
    let n = b * s;
    let codebook = group_codebook(group_bits, latent.dtype(), latent.device())?;
    // [n, groups, g] -> [groups, n, g] so each group position is averaged separately.
    let x = latent.reshape((n, groups, group_bits))?.transpose(0, 1)?.contiguous()?;
    let logits = x.broadcast_matmul(&codebook)?; // [groups, n, K]
    let logp = log_softmax(&logits)?;
    let p = logp.exp()?;
    let sample_entropy = (p.mul(&logp)?.sum(2)?.neg()?).mean_all()?;
    let mean_p = p.mean(1)?; // [groups, K]
    let mean_entropy = (mean_p.mul(&(mean_p.clone() + 1e-30)?.log()?)?.sum(1)?.neg()?).mean_all()?;
    Ok((sample_entropy - mean_entropy)?)
}

/// Finite scalar quantization onto `levels` symmetric points in `[-1, 1]`.
///
/// `y = round(tanh(ĉ) * h) / h` with `h = (levels - 1) / 2`; the rounding is
/// straight-through so gradients follow `tanh`.
pub fn fsq_quantize(latent: &Tensor, levels: usize) -> Result<Tensor> {
    if levels < 3 || levels % 2 == 0 {
        return Err(Error::invalid(format!("FSQ needs an odd level count >= 3, got {levels}")));
    }
    ensure_finite(latent, "fsq_quantize")?;
    let half_levels = (levels - 1) as f64 / 2.0;
    Ok(latent.tanh()?.contiguous()?.apply_op1(GridRoundStraightThrough { half_levels })?)
}

/// The `levels` grid points of [`fsq_quantize`], ascending.
pub fn fsq_grid(levels: usize) -> Vec<f64> {
    let h = (levels - 1) as f64 / 2.0;
    (0..levels).map(|i| (i as f64 - h) / h).collect()
}

/// Packed integer token ids of a binary code, row-major `[batch, S * D / g]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenIds {
    pub batch: usize,
    pub latent_seq_len: usize,
    pub token_bits: usize,
    pub group_bits: usize,
    pub ids: Vec<u16>,
}

const TOKEN_MAGIC: &[u8; 4] = b"FMTK";
const TOKEN_VERSION: u16 = 1;

impl TokenIds {
    /// Ids per image, `S * D / g`.
    pub fn seq_len(&self) -> usize {
        self.latent_seq_len * (self.token_bits / self.group_bits)
    }

    pub fn row(&self, i: usize) -> &[u16] {
        let l = self.seq_len();
        &self.ids[i * l..(i + 1) * l]
    }

    pub fn vocab(&self) -> usize {
        1 << self.group_bits
    }

    /// Builds from explicit rows, checking range and shape.
    pub fn from_rows(
        rows: &[Vec<u16>],
        latent_seq_len: usize,
        token_bits: usize,
        group_bits: usize,
    ) -> Result<Self> {
        if group_bits == 0 || group_bits > 16 || token_bits % group_bits != 0 {
            return Err(Error::invalid(format!("bad factorization D={token_bits}, g={group_bits}")));
        }
        let len = latent_seq_len * token_bits / group_bits;
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            if r.len() != len {
                return Err(Error::shape(format!("token row of length {} (expected {len})", r.len())));
            }
            for &id in r {
                if (id as usize) >> group_bits != 0 {
                    return Err(Error::TokenOutOfRange { id: id as u32, bits: group_bits });
                }
            }
            ids.extend_from_slice(r);
        }
        Ok(TokenIds { batch: rows.len(), latent_seq_len, token_bits, group_bits, ids })
    }

    /// Little-endian binary form: 16-byte header (magic, version, S, D, g, batch) then u16 ids.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let to_u16 = |v: usize, what: &str| -> Result<u16> {
            u16::try_from(v).map_err(|_| Error::invalid(format!("{what} {v} exceeds u16")))
        };
        w.write_all(TOKEN_MAGIC)?;
        w.write_all(&TOKEN_VERSION.to_le_bytes())?;
        w.write_all(&to_u16(self.latent_seq_len, "S")?.to_le_bytes())?;
        w.write_all(&to_u16(self.token_bits, "D")?.to_le_bytes())?;
        w.write_all(&to_u16(self.group_bits, "g")?.to_le_bytes())?;
        w.write_all(&(self.batch as u32).to_le_bytes())?;
        for id in &self.ids {
            w.write_all(&id.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)
            .map_err(|e| Error::CorruptTokens(format!("short header: {e}")))?;
        if &header[0..4] != TOKEN_MAGIC {
            return Err(Error::CorruptTokens("bad magic".into()));
        }
        let u16_at = |i: usize| u16::from_le_bytes([header[i], header[i + 1]]) as usize;
        let version = u16_at(4) as u16;
        if version != TOKEN_VERSION {
            return Err(Error::CorruptTokens(format!("unsupported version {version}")));
        }
        let (s, d, g) = (u16_at(6), u16_at(8), u16_at(10));
        let batch = u32::from_le_bytes([header[12], header[13], header[14], header[15]]) as usize;
        if g == 0 || g > 16 || d % g != 0 {
            return Err(Error::CorruptTokens(format!("bad factorization D={d}, g={g}")));
        }
        let len = s * d / g;
        let mut bytes = vec![0u8; batch * len * 2];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::CorruptTokens(format!("truncated ids: {e}")))?;
        let rows: Vec<Vec<u16>> = bytes
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect::<Vec<_>>()
            .chunks(len.max(1))
            .map(|c| c.to_vec())
            .collect();
        let rows = if len == 0 { vec![Vec::new(); batch] } else { rows };
        TokenIds::from_rows(&rows, s, d, g)
    }
}

/// Packs a `[batch, S, D]` binary code into group ids.
pub fn pack_tokens(code: &Tensor, group_bits: usize) -> Result<TokenIds> {
    let (b, s, d) = code.dims3()?;
    if group_bits == 0 || group_bits > 16 || d % group_bits != 0 {
        return Err(Error::shape(format!("token dim {d} not divisible by group bits {group_bits}")));
    }
    let values = to_f64_vec(code)?;
    let mut ids = Vec::with_capacity(values.len() / group_bits);
    for group in values.chunks_exact(group_bits) {
        let mut id = 0u32;
        for (j, &v) in group.iter().enumerate() {
            if v == 1.0 {
                id |= 1 << j;
            } else if v != -1.0 {
                return Err(Error::invalid(format!("code entry {v} is not ±1")));
            }
        }
        ids.push(id as u16);
    }
    Ok(TokenIds { batch: b, latent_seq_len: s, token_bits: d, group_bits, ids })
}

/// Inverse of [`pack_tokens`]; returns a `[batch, S, D]` tensor of `dtype`.
pub fn unpack_tokens(tokens: &TokenIds, dtype: DType, dev: &candle_core::Device) -> Result<Tensor> {
    let g = tokens.group_bits;
    let mut values = Vec::with_capacity(tokens.ids.len() * g);
    for &id in &tokens.ids {
        if (id as usize) >> g != 0 {
            return Err(Error::TokenOutOfRange { id: id as u32, bits: g });
        }
        for j in 0..g {
            values.push(if (id >> j) & 1 == 1 { 1.0f64 } else { -1.0 });
        }
    }
    let shape = (tokens.batch, tokens.latent_seq_len, tokens.token_bits);
    Ok(Tensor::from_vec(values, shape, dev)?.to_dtype(dtype)?)
}
