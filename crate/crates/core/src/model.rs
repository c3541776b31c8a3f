//! Dual-stream (MMDiT-style) transformer encoder and decoder.
//!
//! Both networks run a latent stream of `S` tokens and an image stream of patch
//! tokens with separate per-stream weights and joint bidirectional attention over
//! the concatenated sequence. Only the decoder is time-conditioned, through AdaLN
//! shift/scale/gate modulation driven by a sinusoidal embedding of `t`.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::{ModelConfig, QuantizerKind};
use crate::error::{Error, Result};
use crate::nn::{attention, gelu, layer_norm, silu, timestep_embedding};
use crate::quantizer::{binarize, fsq_quantize};
use crate::sampler::VelocityField;

const LN_EPS: f64 = 1e-6;
const POS_STD: f64 = 0.02;
const MOD_INIT_SCALE: f64 = 0.1;
/// Rows with a smaller norm are left alone by [`ParamStore::renormalize_mlp`].
pub const RENORM_MIN_NORM: f64 = 1e-8;

/// How a parameter is treated by initialization, optimization and renormalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    /// Input embedding (fan-in independent of width).
    Embedding,
    /// Width-by-width hidden matrix outside the MLP.
    Hidden,
    /// MLP matrix, renormalized per row after every step.
    Mlp,
    /// Final projection out of the hidden width.
    Output,
    Bias,
    Position,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub var: Var,
    pub role: ParamRole,
    /// Multiplier applied to the base learning rate.
    pub lr_mult: f64,
}

/// Named trainable tensors, ordered by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .map(|p| p.var.as_tensor())
            .ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    pub fn insert(&mut self, name: String, param: Param) {
        self.params.insert(name, param);
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|p| p.var.as_tensor().elem_count()).sum()
    }

    /// Detached copies of every tensor, keyed by name.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.params
            .iter()
            .map(|(k, p)| Ok((k.clone(), p.var.as_tensor().detach().copy()?)))
            .collect()
    }

    /// Overwrites values in place from `values`; every name must be present with the same shape.
    pub fn load_values(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, p) in &self.params {
            let v = values
                .get(name)
                .ok_or_else(|| Error::invalid(format!("missing value for `{name}`")))?;
            if v.dims() != p.var.as_tensor().dims() {
                return Err(Error::shape(format!(
                    "`{name}`: {:?} vs {:?}",
                    v.dims(),
                    p.var.as_tensor().dims()
                )));
            }
            p.var.set(&v.to_dtype(p.var.dtype())?)?;
        }
        Ok(())
    }

    /// Deep copy with fresh variables.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut params = BTreeMap::new();
        for (k, p) in &self.params {
            let var = Var::from_tensor(&p.var.as_tensor().copy()?)?;
            params.insert(k.clone(), Param { var, role: p.role, lr_mult: p.lr_mult });
        }
        Ok(ParamStore { params })
    }

    /// Rescales every MLP weight row to unit L2 norm; near-zero rows and parameters
    /// named by `frozen` are left untouched.
    pub fn renormalize_mlp(&self, frozen: impl Fn(&str) -> bool) -> Result<()> {
        for (_, p) in self.params.iter().filter(|(n, p)| p.role == ParamRole::Mlp && !frozen(n)) {
            let w = p.var.as_tensor().detach();
            p.var.set(&renormalize_rows(&w)?)?;
        }
        Ok(())
    }
}

/// Row-wise unit normalization of a `[out, in]` matrix.
pub fn renormalize_rows(w: &Tensor) -> Result<Tensor> {
    let norms = w.sqr()?.sum_keepdim(1)?.sqrt()?;
    let small = norms.lt(RENORM_MIN_NORM)?;
    let safe = small.where_cond(&norms.ones_like()?, &norms)?;
    Ok(w.broadcast_div(&safe)?)
}

struct Builder<'a, R: Rng + ?Sized> {
    store: ParamStore,
    rng: &'a mut R,
    width_factor: f64,
    dtype: DType,
    device: Device,
}

impl<R: Rng + ?Sized> Builder<'_, R> {
    fn tensor(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let v: f64 = StandardNormal.sample(self.rng);
                v * std
            })
            .collect();
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    fn add(&mut self, name: String, t: Tensor, role: ParamRole) -> Result<()> {
        let lr_mult = match role {
            ParamRole::Hidden | ParamRole::Mlp | ParamRole::Output => 1.0 / self.width_factor,
            _ => 1.0,
        };
        self.store.insert(name, Param { var: Var::from_tensor(&t)?, role, lr_mult });
        Ok(())
    }

    /// Linear layer `[out, in]` with variance `scale^2 / fan_in` plus zero bias.
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize, role: ParamRole, scale: f64) -> Result<()> {
        let mut std = scale / (fan_in as f64).sqrt();
        if role == ParamRole::Output {
            std /= self.width_factor;
        }
        let w = self.tensor(&[fan_out, fan_in], std)?;
        self.add(format!("{name}.weight"), w, role)?;
        let b = Tensor::zeros(fan_out, self.dtype, &self.device)?;
        self.add(format!("{name}.bias"), b, ParamRole::Bias)
    }
}

fn stream_names() -> [&'static str; 2] {
    ["lat", "img"]
}

/// Builds encoder and decoder parameters with hidden size `config.width * width_factor`.
///
/// Hidden matrices use variance `1 / fan_in`; output projections get an extra
/// `1 / width_factor`; hidden and output learning-rate multipliers are `1 / width_factor`.
pub fn init_parameters<R: Rng + ?Sized>(
    config: &ModelConfig,
    width_factor: usize,
    rng: &mut R,
    dtype: DType,
    device: &Device,
) -> Result<ParamStore> {
    if width_factor < 1 {
        return Err(Error::invalid("width_factor must be >= 1"));
    }
    let w = config.width * width_factor;
    let mlp = w * config.mlp_ratio;
    let mut b = Builder {
        store: ParamStore::default(),
        rng,
        width_factor: width_factor as f64,
        dtype,
        device: device.clone(),
    };
    for (net, depth, modulated) in [
        ("encoder", config.encoder_depth, false),
        ("decoder", config.decoder_depth, true),
    ] {
        b.linear(&format!("{net}.img_in"), config.patch_dim(), w, ParamRole::Embedding, 1.0)?;
        b.linear(&format!("{net}.lat_in"), config.token_bits, w, ParamRole::Embedding, 1.0)?;
        let p = b.tensor(&[config.num_patches(), w], POS_STD)?;
        b.add(format!("{net}.img_pos"), p, ParamRole::Position)?;
        let p = b.tensor(&[config.latent_seq_len, w], POS_STD)?;
        b.add(format!("{net}.lat_pos"), p, ParamRole::Position)?;
        if modulated {
            b.linear(&format!("{net}.time_in"), w, w, ParamRole::Hidden, 1.0)?;
            b.linear(&format!("{net}.time_out"), w, w, ParamRole::Hidden, 1.0)?;
        }
        for i in 0..depth {
            for s in stream_names() {
                let pre = format!("{net}.block{i}.{s}");
                b.linear(&format!("{pre}.qkv"), w, 3 * w, ParamRole::Hidden, 1.0)?;
                b.linear(&format!("{pre}.attn_out"), w, w, ParamRole::Hidden, 1.0)?;
                b.linear(&format!("{pre}.mlp_in"), w, mlp, ParamRole::Mlp, 1.0)?;
                b.linear(&format!("{pre}.mlp_out"), mlp, w, ParamRole::Mlp, 1.0)?;
                if modulated {
                    b.linear(&format!("{pre}.mod"), w, 6 * w, ParamRole::Hidden, MOD_INIT_SCALE)?;
                }
            }
        }
    }
    b.linear("encoder.lat_out", w, config.token_bits, ParamRole::Output, 1.0)?;
    b.linear("decoder.final_mod", w, 2 * w, ParamRole::Hidden, MOD_INIT_SCALE)?;
    b.linear("decoder.img_out", w, config.patch_dim(), ParamRole::Output, 1.0)?;
    Ok(b.store)
}

/// `x @ W^T + b` over the last dimension.
pub(crate) fn linear(store: &ParamStore, name: &str, x: &Tensor) -> Result<Tensor> {
    let w = store.get(&format!("{name}.weight"))?;
    let bias = store.get(&format!("{name}.bias"))?;
    let dims = x.dims().to_vec();
    let fan_in = *dims.last().unwrap();
    let rows = x.elem_count() / fan_in;
    let y = x.reshape((rows, fan_in))?.matmul(&w.t()?)?.broadcast_add(bias)?;
    let mut out_dims = dims;
    *out_dims.last_mut().unwrap() = w.dim(0)?;
    Ok(y.reshape(out_dims)?)
}

/// Splits images `[B, C, H, W]` into `[B, (H/p)*(W/p), p*p*C]` row-major patches.
pub fn patchify(x: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!("patch size {patch} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(x.reshape(vec![b, c, gh, patch, gw, patch])?
        .permute([0, 2, 4, 3, 5, 1])?
        .contiguous()?
        .reshape((b, gh * gw, patch * patch * c))?)
}

/// Inverse of [`patchify`] for a square grid.
pub fn unpatchify(seq: &Tensor, patch: usize, channels: usize) -> Result<Tensor> {
    let (b, n, d) = seq.dims3()?;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || d != patch * patch * channels {
        return Err(Error::shape(format!("cannot unpatchify [{b}, {n}, {d}] with p={patch}, C={channels}")));
    }
    Ok(seq
        .reshape(vec![b, side, side, patch, patch, channels])?
        .permute([0, 5, 1, 3, 2, 4])?
        .contiguous()?
        .reshape((b, channels, side * patch, side * patch))?)
}

/// Per-stream AdaLN parameters `(shift1, scale1, gate1, shift2, scale2, gate2)`.
struct Modulation {
    chunks: Vec<Tensor>,
}

impl Modulation {
    fn new(store: &ParamStore, name: &str, cond: &Tensor, width: usize) -> Result<Self> {
        let m = linear(store, name, cond)?; // [B, k * w]
        let k = m.dim(1)? / width;
        let chunks = (0..k)
            .map(|i| Ok(m.narrow(1, i * width, width)?.unsqueeze(1)?))
            .collect::<Result<Vec<_>>>()?;
        Ok(Modulation { chunks })
    }

    /// `x * (1 + scale) + shift`.
    fn apply(&self, x: &Tensor, shift: usize, scale: usize) -> Result<Tensor> {
        Ok(x.broadcast_mul(&(&self.chunks[scale] + 1.0)?)?.broadcast_add(&self.chunks[shift])?)
    }

    /// `x * (1 + gate)`.
    fn gate(&self, x: &Tensor, gate: usize) -> Result<Tensor> {
        Ok(x.broadcast_mul(&(&self.chunks[gate] + 1.0)?)?)
    }
}

/// Dual-stream block: joint attention then per-stream MLP, pre-norm residual.
fn dual_block(
    store: &ParamStore,
    prefix: &str,
    streams: [Tensor; 2],
    cond: Option<&Tensor>,
    heads: usize,
) -> Result<[Tensor; 2]> {
    let width = streams[0].dim(2)?;
    let names = stream_names();
    let mods = match cond {
        Some(c) => Some(
            names
                .iter()
                .map(|s| Modulation::new(store, &format!("{prefix}.{s}.mod"), c, width))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    let mut qs = Vec::new();
    let mut ks = Vec::new();
    let mut vs = Vec::new();
    let mut lens = Vec::new();
    for (i, s) in names.iter().enumerate() {
        let mut h = layer_norm(&streams[i], LN_EPS)?;
        if let Some(m) = &mods {
            h = m[i].apply(&h, 0, 1)?;
        }
        let qkv = linear(store, &format!("{prefix}.{s}.qkv"), &h)?;
        qs.push(qkv.narrow(2, 0, width)?);
        ks.push(qkv.narrow(2, width, width)?);
        vs.push(qkv.narrow(2, 2 * width, width)?);
        lens.push(streams[i].dim(1)?);
    }
    let q = Tensor::cat(&qs, 1)?;
    let k = Tensor::cat(&ks, 1)?;
    let v = Tensor::cat(&vs, 1)?;
    let attn = attention(&q, &k, &v, heads)?;
    let mut out = Vec::with_capacity(2);
    let mut offset = 0;
    for (i, s) in names.iter().enumerate() {
        let a = attn.narrow(1, offset, lens[i])?;
        offset += lens[i];
        let mut a = linear(store, &format!("{prefix}.{s}.attn_out"), &a)?;
        if let Some(m) = &mods {
            a = m[i].gate(&a, 2)?;
        }
        let x = (&streams[i] + a)?;
        let mut h = layer_norm(&x, LN_EPS)?;
        if let Some(m) = &mods {
            h = m[i].apply(&h, 3, 4)?;
        }
        let h = gelu(&linear(store, &format!("{prefix}.{s}.mlp_in"), &h)?)?;
        let mut h = linear(store, &format!("{prefix}.{s}.mlp_out"), &h)?;
        if let Some(m) = &mods {
            h = m[i].gate(&h, 5)?;
        }
        out.push((x + h)?);
    }
    let img = out.pop().unwrap();
    let lat = out.pop().unwrap();
    Ok([lat, img])
}

/// Encoder/decoder pair plus its configuration.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    config: ModelConfig,
    params: ParamStore,
    dtype: DType,
    device: Device,
}

impl Tokenizer {
    pub fn new<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R, dtype: DType, device: &Device) -> Result<Self> {
        let params = init_parameters(config, config.width_factor, rng, dtype, device)?;
        Ok(Tokenizer { config: config.clone(), params, dtype, device: device.clone() })
    }

    pub fn from_params(config: &ModelConfig, params: ParamStore, dtype: DType, device: &Device) -> Self {
        Tokenizer { config: config.clone(), params, dtype, device: device.clone() }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }
    pub fn params(&self) -> &ParamStore {
        &self.params
    }
    pub fn dtype(&self) -> DType {
        self.dtype
    }
    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Copy whose parameters are replaced by `values` (e.g. EMA weights).
    pub fn with_values(&self, values: &BTreeMap<String, Tensor>) -> Result<Self> {
        let params = self.params.deep_clone()?;
        params.load_values(values)?;
        Ok(Tokenizer { params, ..self.clone() })
    }

    fn hidden(&self) -> usize {
        self.config.hidden()
    }

    fn check_image(&self, x: &Tensor) -> Result<usize> {
        let (b, c, h, w) = x.dims4()?;
        let r = self.config.image_resolution;
        if c != self.config.channels || h != r || w != r {
            return Err(Error::shape(format!(
                "expected images [B, {}, {r}, {r}], got {:?}",
                self.config.channels,
                x.dims()
            )));
        }
        Ok(b)
    }

    fn embed_streams(&self, net: &str, x: &Tensor, code: &Tensor) -> Result<[Tensor; 2]> {
        let p = &self.params;
        let patches = patchify(x, self.config.patch_size)?;
        let img = linear(p, &format!("{net}.img_in"), &patches)?.broadcast_add(p.get(&format!("{net}.img_pos"))?)?;
        let lat = linear(p, &format!("{net}.lat_in"), code)?.broadcast_add(p.get(&format!("{net}.lat_pos"))?)?;
        Ok([lat, img])
    }

    /// Continuous latent `ĉ = e(x, c_0)` of shape `[B, S, D]`, `c_0 = 0`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let b = self.check_image(x)?;
        let c0 = Tensor::zeros((b, self.config.latent_seq_len, self.config.token_bits), self.dtype, &self.device)?;
        let mut streams = self.embed_streams("encoder", x, &c0)?;
        for i in 0..self.config.encoder_depth {
            streams = dual_block(&self.params, &format!("encoder.block{i}"), streams, None, self.config.num_heads)?;
        }
        let [lat, _] = streams;
        linear(&self.params, "encoder.lat_out", &layer_norm(&lat, LN_EPS)?)
    }

    /// Quantized code: LFQ binarization or FSQ rounding, both straight-through.
    pub fn quantize(&self, latent: &Tensor) -> Result<Tensor> {
        match self.config.quantizer_kind {
            QuantizerKind::Lfq => binarize(latent),
            QuantizerKind::Fsq => fsq_quantize(latent, self.config.fsq_levels),
        }
    }

    /// Velocity `v = d(x_t, c, t)` for per-sample noise levels `t` of shape `[B]`.
    pub fn decode(&self, x_t: &Tensor, code: &Tensor, t: &Tensor) -> Result<Tensor> {
        let b = self.check_image(x_t)?;
        let (cb, s, d) = code.dims3()?;
        if cb != b || s != self.config.latent_seq_len || d != self.config.token_bits {
            return Err(Error::shape(format!(
                "code {:?} does not match batch {b}, S={}, D={}",
                code.dims(),
                self.config.latent_seq_len,
                self.config.token_bits
            )));
        }
        if t.dims() != [b] {
            return Err(Error::shape(format!("noise levels {:?} for batch {b}", t.dims())));
        }
        let w = self.hidden();
        let p = &self.params;
        let temb = timestep_embedding(&t.to_dtype(self.dtype)?, w, 1000.0)?;
        let temb = linear(p, "decoder.time_out", &silu(&linear(p, "decoder.time_in", &temb)?)?)?;
        let cond = silu(&temb)?;
        let mut streams = self.embed_streams("decoder", x_t, code)?;
        for i in 0..self.config.decoder_depth {
            streams = dual_block(p, &format!("decoder.block{i}"), streams, Some(&cond), self.config.num_heads)?;
        }
        let [_, img] = streams;
        let m = Modulation::new(p, "decoder.final_mod", &cond, w)?;
        let h = m.apply(&layer_norm(&img, LN_EPS)?, 0, 1)?;
        let out = linear(p, "decoder.img_out", &h)?;
        unpatchify(&out, self.config.patch_size, self.config.channels)
    }

    /// All-zero code: the unconditional (latent-dropped) input.
    pub fn null_code(&self, batch: usize) -> Result<Tensor> {
        Ok(Tensor::zeros((batch, self.config.latent_seq_len, self.config.token_bits), self.dtype, &self.device)?)
    }

    /// Encoder parameter names.
    pub fn encoder_param_names(&self) -> Vec<String> {
        self.params.names().filter(|n| n.starts_with("encoder.")).cloned().collect()
    }
}

impl VelocityField for Tokenizer {
    fn velocity(&self, x_t: &Tensor, code: Option<&Tensor>, t: f64) -> Result<Tensor> {
        let b = x_t.dim(0)?;
        let code = match code {
            Some(c) => c.clone(),
            None => self.null_code(b)?,
        };
        let tt = Tensor::full(t, b, &self.device)?.to_dtype(self.dtype)?;
        self.decode(x_t, &code, &tt)
    }
}

/// Zeroes each sample's whole latent with probability `prob`. Returns the dropped flags.
pub fn apply_latent_dropout<R: Rng + ?Sized>(code: &Tensor, prob: f64, rng: &mut R) -> Result<(Tensor, Vec<bool>)> {
    if !(0.0..=1.0).contains(&prob) {
        return Err(Error::invalid(format!("dropout probability {prob} outside [0, 1]")));
    }
    let b = code.dim(0)?;
    let dropped: Vec<bool> = (0..b).map(|_| rng.random::<f64>() < prob).collect();
    if !dropped.iter().any(|&d| d) {
        return Ok((code.clone(), dropped));
    }
    let keep: Vec<f64> = dropped.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
    let mut shape = vec![b];
    shape.extend(std::iter::repeat(1).take(code.rank() - 1));
    let keep = Tensor::from_vec(keep, shape, code.device())?.to_dtype(code.dtype())?;
    Ok((code.broadcast_mul(&keep)?, dropped))
}
