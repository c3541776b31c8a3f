//! Masked-token generator over packed tokenizer ids.
//!
//! A bidirectional transformer reads token ids (with a reserved MASK id `2^g`),
//! learned positions and an optional class token, and predicts the original ids at
//! masked positions. Sampling starts from an all-MASK sequence and commits the most
//! confident predictions step by step following a cosine schedule.

use std::f64::consts::FRAC_PI_2;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::checkpoint::{CheckpointState, Stage, CHECKPOINT_VERSION};
use crate::config::{fingerprint_of, ModelConfig, Stage2Config, ValidatedConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{linear, Param, ParamRole, ParamStore, Tokenizer};
use crate::nn::{attention, gelu, layer_norm, log_softmax, randn, scalar_f64, to_f64_vec, SeededRng};
use crate::quantizer::{pack_tokens, TokenIds};
use crate::trainer::{adam_step, collect_grads, AdamHyper, Moments};

const LN_EPS: f64 = 1e-6;
const EMB_STD: f64 = 0.02;

/// Token sequences with optional per-sequence class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenDataset {
    pub tokens: TokenIds,
    pub labels: Option<Vec<u32>>,
}

impl TokenDataset {
    pub fn len(&self) -> usize {
        self.tokens.batch
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.batch == 0
    }

    /// Number of classes implied by the labels (0 when unlabeled).
    pub fn num_classes(&self) -> usize {
        self.labels.as_ref().and_then(|l| l.iter().max()).map_or(0, |&m| m as usize + 1)
    }

    fn labels_path(path: &Path) -> PathBuf {
        let mut p = path.as_os_str().to_owned();
        p.push(".labels");
        PathBuf::from(p)
    }

    /// Writes the token file and, when labeled, a sidecar `<path>.labels` with one integer per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        self.tokens.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))?;
        if let Some(labels) = &self.labels {
            let mut w = std::io::BufWriter::new(std::fs::File::create(Self::labels_path(path))?);
            for l in labels {
                writeln!(w, "{l}")?;
            }
            w.flush()?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let tokens = TokenIds::read_from(std::io::BufReader::new(std::fs::File::open(path)?))?;
        let lp = Self::labels_path(path);
        let labels = if lp.exists() {
            let f = std::io::BufReader::new(std::fs::File::open(&lp)?);
            let mut v = Vec::new();
            for (i, line) in f.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                v.push(line.trim().parse::<u32>().map_err(|_| {
                    Error::CorruptTokens(format!("label line {} is not an integer: {line:?}", i + 1))
                })?);
            }
            if v.len() != tokens.batch {
                return Err(Error::CorruptTokens(format!("{} labels for {} sequences", v.len(), tokens.batch)));
            }
            Some(v)
        } else {
            None
        };
        Ok(TokenDataset { tokens, labels })
    }
}

/// Packed ids of `binarize(encode(x))` for every image, in dataset order.
pub fn tokenize_dataset(tok: &Tokenizer, images: &Dataset, batch_size: usize) -> Result<TokenDataset> {
    let m = tok.config();
    if let Some(r) = images.records.first() {
        if r.resolution != m.image_resolution || r.channels != m.channels {
            return Err(Error::shape(format!(
                "images are {}x{}x{}, tokenizer expects {}x{}x{}",
                r.channels, r.resolution, r.resolution, m.channels, m.image_resolution, m.image_resolution
            )));
        }
    }
    if m.quantizer_kind != crate::config::QuantizerKind::Lfq {
        return Err(Error::invalid("token ids require the binary (LFQ) quantizer"));
    }
    let mut ids = Vec::new();
    let n = images.len();
    let mut start = 0;
    while start < n {
        let idx: Vec<usize> = (start..(start + batch_size.max(1)).min(n)).collect();
        let x = images.batch(&idx, tok.dtype(), tok.device())?;
        let code = tok.quantize(&tok.encode(&x)?)?;
        ids.extend(pack_tokens(&code, m.entropy_group_bits)?.ids);
        start += idx.len();
    }
    let tokens = TokenIds {
        batch: n,
        latent_seq_len: m.latent_seq_len,
        token_bits: m.token_bits,
        group_bits: m.entropy_group_bits,
        ids,
    };
    let labels: Option<Vec<u32>> = images.records.iter().map(|r| r.label).collect();
    Ok(TokenDataset { tokens, labels })
}

/// `cos(π s / 2)`: fraction of positions still masked at progress `s`.
pub fn mask_fraction(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    if s == 1.0 { 0.0 } else { (FRAC_PI_2 * s).cos() }
}

/// Linear temperature decay from `start` at the first step to 0 at the last.
pub fn temperature_at(step: usize, steps: usize, start: f64) -> f64 {
    if steps <= 1 {
        return start;
    }
    start * (1.0 - step as f64 / (steps - 1) as f64)
}

/// `ℓ_u + w (ℓ_c - ℓ_u)`; returns `ℓ_c` unchanged when `w = 1`.
pub fn guided_logits(cond: &Tensor, uncond: &Tensor, weight: f64) -> Result<Tensor> {
    if weight == 1.0 {
        return Ok(cond.clone());
    }
    Ok((uncond + ((cond - uncond)? * weight)?)?)
}

/// Bidirectional masked-token transformer.
#[derive(Debug, Clone)]
pub struct MaskGit {
    params: ParamStore,
    seq_len: usize,
    group_bits: usize,
    num_classes: usize,
    config: Stage2Config,
    dtype: DType,
    device: Device,
}

impl MaskGit {
    pub fn new<R: Rng + ?Sized>(
        config: &Stage2Config,
        seq_len: usize,
        group_bits: usize,
        num_classes: usize,
        rng: &mut R,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let w = config.width;
        let vocab = 1usize << group_bits;
        let mut store = ParamStore::default();
        let mut add = |name: String, t: Tensor, role: ParamRole| -> Result<()> {
            store.insert(name, Param { var: Var::from_tensor(&t)?, role, lr_mult: 1.0 });
            Ok(())
        };
        let mut normal = |shape: &[usize], std: f64| -> Result<Tensor> { Ok((randn(rng, shape, dtype, device)? * std)?) };
        let zeros = |n: usize| -> Result<Tensor> { Ok(Tensor::zeros(n, dtype, device)?) };
        let positions = seq_len + usize::from(num_classes > 0);
        add("tok_emb".into(), normal(&[vocab + 1, w], EMB_STD)?, ParamRole::Embedding)?;
        add("pos".into(), normal(&[positions, w], EMB_STD)?, ParamRole::Position)?;
        if num_classes > 0 {
            add("cls_emb".into(), normal(&[num_classes + 1, w], EMB_STD)?, ParamRole::Embedding)?;
        }
        let mlp = w * config.mlp_ratio;
        for i in 0..config.depth {
            for (name, fan_in, fan_out, role) in [
                ("qkv", w, 3 * w, ParamRole::Hidden),
                ("attn_out", w, w, ParamRole::Hidden),
                ("mlp_in", w, mlp, ParamRole::Mlp),
                ("mlp_out", mlp, w, ParamRole::Mlp),
            ] {
                add(format!("block{i}.{name}.weight"), normal(&[fan_out, fan_in], 1.0 / (fan_in as f64).sqrt())?, role)?;
                add(format!("block{i}.{name}.bias"), zeros(fan_out)?, ParamRole::Bias)?;
            }
        }
        add("head.weight".into(), normal(&[vocab, w], 1.0 / (w as f64).sqrt())?, ParamRole::Output)?;
        add("head.bias".into(), zeros(vocab)?, ParamRole::Bias)?;
        Ok(MaskGit { params: store, seq_len, group_bits, num_classes, config: config.clone(), dtype, device: device.clone() })
    }

    /// Rebuilds a model from a Stage 2 checkpoint; sizes are read from the tensor shapes.
    pub fn from_state(config: &Stage2Config, state: &CheckpointState, dtype: DType, device: &Device) -> Result<Self> {
        state.require_stage(&[Stage::Stage2], "not a stage 2 checkpoint")?;
        let get = |k: &str| state.params.get(k).ok_or_else(|| Error::CorruptCheckpoint(format!("missing `{k}`")));
        let vocab_plus = get("tok_emb")?.dim(0)?;
        let group_bits = (vocab_plus - 1).trailing_zeros() as usize;
        let num_classes = match state.params.get("cls_emb") {
            Some(t) => t.dim(0)? - 1,
            None => 0,
        };
        let seq_len = get("pos")?.dim(0)? - usize::from(num_classes > 0);
        let model = MaskGit::new(config, seq_len, group_bits, num_classes, &mut crate::nn::seeded(0), dtype, device)?;
        state.verify_fingerprint(&model.fingerprint())?;
        model.params.load_values(&state.params)?;
        Ok(model)
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }
    pub fn group_bits(&self) -> usize {
        self.group_bits
    }
    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn vocab(&self) -> usize {
        1 << self.group_bits
    }
    /// The reserved MASK id, one past the last real id.
    pub fn mask_id(&self) -> u32 {
        self.vocab() as u32
    }

    /// Hash of the generator architecture plus the token layout. Training and sampling
    /// settings are left out so they can change between runs.
    pub fn fingerprint(&self) -> String {
        const ARCH: [&str; 4] = ["stage2.width", "stage2.depth", "stage2.num_heads", "stage2.mlp_ratio"];
        let mut e: Vec<(String, String)> =
            self.config.entries().into_iter().filter(|(k, _)| ARCH.contains(&k.as_str())).collect();
        e.push(("tokens.seq_len".into(), self.seq_len.to_string()));
        e.push(("tokens.group_bits".into(), self.group_bits.to_string()));
        e.push(("tokens.num_classes".into(), self.num_classes.to_string()));
        fingerprint_of(&e).0
    }

    /// Logits `[B, L, 2^g]` for ids `[B, L]` (MASK allowed) and optional classes
    /// (`None` entries, or `None` overall, select the null class).
    pub fn logits(&self, ids: &[u32], batch: usize, classes: Option<&[Option<u32>]>) -> Result<Tensor> {
        let (l, w) = (self.seq_len, self.config.width);
        if ids.len() != batch * l {
            return Err(Error::shape(format!("{} ids for batch {batch} x {l}", ids.len())));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id > self.mask_id()) {
            return Err(Error::TokenOutOfRange { id: bad, bits: self.group_bits });
        }
        let p = &self.params;
        let idx = Tensor::from_vec(ids.to_vec(), batch * l, &self.device)?;
        let mut x = p.get("tok_emb")?.index_select(&idx, 0)?.reshape((batch, l, w))?;
        if self.num_classes > 0 {
            let null = self.num_classes as u32;
            let cls: Vec<u32> = (0..batch)
                .map(|i| classes.and_then(|c| c[i]).map_or(Ok(null), |c| {
                    if (c as usize) < self.num_classes { Ok(c) } else { Err(Error::invalid(format!("class {c} out of range"))) }
                }))
                .collect::<Result<_>>()?;
            let cidx = Tensor::from_vec(cls, batch, &self.device)?;
            let c = p.get("cls_emb")?.index_select(&cidx, 0)?.unsqueeze(1)?;
            x = Tensor::cat(&[c, x], 1)?;
        }
        x = x.broadcast_add(p.get("pos")?)?;
        for i in 0..self.config.depth {
            let h = layer_norm(&x, LN_EPS)?;
            let qkv = linear(p, &format!("block{i}.qkv"), &h)?;
            let (q, k, v) = (qkv.narrow(2, 0, w)?, qkv.narrow(2, w, w)?, qkv.narrow(2, 2 * w, w)?);
            let a = attention(&q.contiguous()?, &k.contiguous()?, &v.contiguous()?, self.config.num_heads)?;
            x = (x + linear(p, &format!("block{i}.attn_out"), &a)?)?;
            let h = layer_norm(&x, LN_EPS)?;
            let h = gelu(&linear(p, &format!("block{i}.mlp_in"), &h)?)?;
            x = (x + linear(p, &format!("block{i}.mlp_out"), &h)?)?;
        }
        if self.num_classes > 0 {
            x = x.narrow(1, 1, l)?;
        }
        linear(p, "head", &layer_norm(&x, LN_EPS)?)
    }

    /// Mean cross-entropy over masked positions only (`mask[i]` true where `input` holds MASK).
    pub fn masked_cross_entropy(
        &self,
        input: &[u32],
        target: &[u32],
        mask: &[bool],
        batch: usize,
        classes: Option<&[Option<u32>]>,
    ) -> Result<Tensor> {
        let v = self.vocab();
        if target.iter().any(|&t| t as usize >= v) {
            let bad = *target.iter().find(|&&t| t as usize >= v).unwrap();
            return Err(Error::TokenOutOfRange { id: bad, bits: self.group_bits });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("no masked positions"));
        }
        let logp = log_softmax(&self.logits(input, batch, classes)?)?;
        let mut sel = vec![0f64; batch * self.seq_len * v];
        for (i, (&t, &m)) in target.iter().zip(mask).enumerate() {
            if m {
                sel[i * v + t as usize] = 1.0 / count as f64;
            }
        }
        let sel = Tensor::from_vec(sel, (batch, self.seq_len, v), &self.device)?.to_dtype(self.dtype)?;
        Ok((logp * sel)?.sum_all()?.neg()?)
    }
}

/// Result of [`train_maskgit`].
#[derive(Debug, Clone)]
pub struct MaskGitRun {
    pub model: MaskGit,
    pub state: CheckpointState,
    /// Masked cross-entropy (nats) per step.
    pub losses: Vec<f64>,
}

/// Masks `ceil(L * mask_fraction(s))` random positions (at least one), `s ~ U(0, 1)`.
pub fn draw_mask<R: Rng + ?Sized>(rng: &mut R, seq_len: usize) -> Vec<bool> {
    let s: f64 = rng.random();
    let n = ((seq_len as f64 * mask_fraction(s)).ceil() as usize).clamp(1, seq_len);
    let mut order: Vec<usize> = (0..seq_len).collect();
    order.shuffle(rng);
    let mut mask = vec![false; seq_len];
    for &i in &order[..n] {
        mask[i] = true;
    }
    mask
}

/// Trains the generator on `data`; classes are used when the dataset is labeled.
pub fn train_maskgit(
    cfg: &ValidatedConfig,
    data: &TokenDataset,
    rng: &mut SeededRng,
    dtype: DType,
    device: &Device,
) -> Result<MaskGitRun> {
    if data.is_empty() {
        return Err(Error::invalid("token dataset is empty"));
    }
    let s2 = cfg.stage2();
    let tokens = &data.tokens;
    let vocab = tokens.vocab();
    if let Some(&bad) = tokens.ids.iter().find(|&&id| id as usize >= vocab) {
        return Err(Error::TokenOutOfRange { id: bad as u32, bits: tokens.group_bits });
    }
    let l = tokens.seq_len();
    let model = MaskGit::new(s2, l, tokens.group_bits, data.num_classes(), rng, dtype, device)?;
    let hp = AdamHyper::new(s2.learning_rate, cfg.train().adam_beta1, cfg.train().adam_beta2);
    let mut moments = Moments::default();
    let mut losses = Vec::with_capacity(s2.max_steps);
    let mask_id = model.mask_id();
    for _ in 0..s2.max_steps {
        let b = s2.batch_size;
        let mut input = Vec::with_capacity(b * l);
        let mut target = Vec::with_capacity(b * l);
        let mut mask = Vec::with_capacity(b * l);
        let mut classes = Vec::with_capacity(b);
        for _ in 0..b {
            let i = rng.random_range(0..data.len());
            let row = tokens.row(i);
            let m = draw_mask(rng, l);
            for (j, &id) in row.iter().enumerate() {
                target.push(id as u32);
                input.push(if m[j] { mask_id } else { id as u32 });
            }
            mask.extend(m);
            let dropped = rng.random::<f64>() < s2.class_dropout_prob;
            classes.push(match &data.labels {
                Some(lbl) if !dropped => Some(lbl[i]),
                _ => None,
            });
        }
        let loss = model.masked_cross_entropy(&input, &target, &mask, b, Some(&classes))?;
        losses.push(scalar_f64(&loss)?);
        let grads = collect_grads(&model.params, &loss.backward()?);
        adam_step(&model.params, &grads, &mut moments, &hp, |_| 1.0)?;
    }
    let params = model.params.snapshot()?;
    let state = CheckpointState {
        ema: params.clone(),
        params,
        adam_m: moments.m,
        adam_v: moments.v,
        adam_step: moments.step,
        step: s2.max_steps as u64,
        fingerprint: model.fingerprint(),
        stage: Stage::Stage2,
        version: CHECKPOINT_VERSION,
    };
    Ok(MaskGitRun { model, state, losses })
}

/// Sampling controls for [`sample_maskgit`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskGitSampling {
    pub steps: usize,
    pub temperature: f64,
    pub guidance_weight: f64,
}

impl MaskGitSampling {
    pub fn from_config(c: &Stage2Config) -> Self {
        MaskGitSampling { steps: c.sample_steps, temperature: c.temperature, guidance_weight: c.guidance_weight }
    }
}

/// Draws one index from `softmax(logits / temperature)`; temperature 0 is argmax.
fn draw<R: Rng + ?Sized>(rng: &mut R, logits: &[f64], temperature: f64) -> usize {
    let argmax = || {
        logits
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
            .0
    };
    if temperature <= 0.0 {
        return argmax();
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        u -= wi;
        if u <= 0.0 {
            return i;
        }
    }
    argmax()
}

/// Iterative confidence-ordered decoding from an all-MASK sequence.
///
/// Returns the committed ids per sample together with, for each step, the number of
/// positions still masked after it.
pub fn sample_maskgit_trace(
    model: &MaskGit,
    batch: usize,
    classes: Option<&[Option<u32>]>,
    opts: &MaskGitSampling,
    rng: &mut SeededRng,
) -> Result<(Vec<Vec<u32>>, Vec<usize>)> {
    if opts.steps < 1 {
        return Err(Error::invalid("sampling needs at least one step"));
    }
    let (l, v, mask_id) = (model.seq_len, model.vocab(), model.mask_id());
    let mut ids = vec![mask_id; batch * l];
    let guided = model.num_classes > 0 && classes.is_some_and(|c| c.iter().any(|x| x.is_some()));
    let mut trace = Vec::with_capacity(opts.steps);
    for k in 0..opts.steps {
        let cond = model.logits(&ids, batch, classes)?;
        let logits = if guided && opts.guidance_weight != 1.0 {
            let uncond = model.logits(&ids, batch, None)?;
            guided_logits(&cond, &uncond, opts.guidance_weight)?
        } else {
            cond
        };
        let probs = to_f64_vec(&crate::nn::softmax(&logits)?)?;
        let raw = to_f64_vec(&logits)?;
        let temp = temperature_at(k, opts.steps, opts.temperature);
        let keep_masked = ((l as f64) * mask_fraction((k + 1) as f64 / opts.steps as f64)).floor() as usize;
        let keep_masked = if k + 1 == opts.steps { 0 } else { keep_masked };
        let mut remaining = 0;
        for b in 0..batch {
            let row = &mut ids[b * l..(b + 1) * l];
            let masked: Vec<usize> = (0..l).filter(|&j| row[j] == mask_id).collect();
            if masked.is_empty() {
                continue;
            }
            let mut cands: Vec<(usize, u32, f64)> = masked
                .iter()
                .map(|&j| {
                    let off = (b * l + j) * v;
                    let tok = draw(rng, &raw[off..off + v], temp);
                    (j, tok as u32, probs[off + tok])
                })
                .collect();
            let target = keep_masked.min(masked.len() - 1);
            let commit = masked.len() - target;
            cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            for &(j, tok, _) in &cands[..commit] {
                row[j] = tok;
            }
            remaining = remaining.max(masked.len() - commit);
        }
        trace.push(remaining);
    }
    Ok((ids.chunks(l).map(|c| c.to_vec()).collect(), trace))
}

/// Samples `batch` token sequences and packs them as [`TokenIds`] for `model_cfg`'s layout.
pub fn sample_maskgit(
    model: &MaskGit,
    model_cfg: &ModelConfig,
    batch: usize,
    classes: Option<&[Option<u32>]>,
    opts: &MaskGitSampling,
    rng: &mut SeededRng,
) -> Result<TokenIds> {
    let expected = model_cfg.latent_seq_len * model_cfg.groups_per_token();
    if model.seq_len != expected || model.group_bits != model_cfg.entropy_group_bits {
        return Err(Error::shape(format!(
            "generator emits {} ids of {} bits, tokenizer layout needs {expected} of {}",
            model.seq_len, model.group_bits, model_cfg.entropy_group_bits
        )));
    }
    let (rows, _) = sample_maskgit_trace(model, batch, classes, opts, rng)?;
    let rows: Vec<Vec<u16>> = rows.iter().map(|r| r.iter().map(|&id| id as u16).collect()).collect();
    TokenIds::from_rows(&rows, model_cfg.latent_seq_len, model_cfg.token_bits, model_cfg.entropy_group_bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seeded;

    fn small() -> Stage2Config {
        Stage2Config { width: 16, depth: 1, num_heads: 2, mlp_ratio: 2, ..Default::default() }
    }

    #[test]
    fn mask_fraction_examples() {
        assert_eq!(mask_fraction(0.0), 1.0);
        assert_eq!(mask_fraction(1.0), 0.0);
        assert!((mask_fraction(0.5) - 0.707_106_78).abs() < 1e-8);
        let mut prev = 1.0;
        for i in 0..=100 {
            let f = mask_fraction(i as f64 / 100.0);
            assert!(f <= prev);
            prev = f;
        }
    }

    #[test]
    fn temperature_is_linear_to_zero() {
        assert_eq!(temperature_at(0, 5, 1.0), 1.0);
        assert_eq!(temperature_at(4, 5, 1.0), 0.0);
        assert_eq!(temperature_at(2, 5, 1.0), 0.5);
        assert_eq!(temperature_at(0, 1, 0.7), 0.7);
    }

    #[test]
    fn unit_guidance_is_identity() {
        let m = MaskGit::new(&small(), 4, 3, 2, &mut seeded(1), DType::F64, &Device::Cpu).unwrap();
        let ids = vec![m.mask_id(); 8];
        let c = m.logits(&ids, 2, Some(&[Some(0), Some(1)])).unwrap();
        let u = m.logits(&ids, 2, None).unwrap();
        let g = guided_logits(&c, &u, 1.0).unwrap();
        assert_eq!(to_f64_vec(&g).unwrap(), to_f64_vec(&c).unwrap());
    }

    #[test]
    fn unmasked_positions_contribute_nothing() {
        let m = MaskGit::new(&small(), 4, 3, 0, &mut seeded(2), DType::F64, &Device::Cpu).unwrap();
        let target = vec![1, 2, 3, 4];
        let mask = [true, false, true, false];
        let input: Vec<u32> = target.iter().zip(&mask).map(|(&t, &mk)| if mk { m.mask_id() } else { t }).collect();
        let a = scalar_f64(&m.masked_cross_entropy(&input, &target, &mask, 1, None).unwrap()).unwrap();
        let mut other = target.clone();
        other[1] = 7;
        other[3] = 0;
        let input2: Vec<u32> = other.iter().zip(&mask).map(|(&t, &mk)| if mk { m.mask_id() } else { t }).collect();
        assert_eq!(input, vec![8, 2, 8, 4]);
        let b = scalar_f64(&m.masked_cross_entropy(&input, &other, &mask, 1, None).unwrap()).unwrap();
        assert_eq!(a, b);
        assert_ne!(input2, input);
        assert!(m.masked_cross_entropy(&input, &[9, 0, 0, 0], &mask, 1, None).is_err());
    }

    #[test]
    fn sampling_commits_everything_monotonically() {
        let m = MaskGit::new(&small(), 6, 3, 0, &mut seeded(3), DType::F32, &Device::Cpu).unwrap();
        for steps in [1, 3, 8] {
            let opts = MaskGitSampling { steps, temperature: 1.0, guidance_weight: 1.5 };
            let (rows, trace) = sample_maskgit_trace(&m, 3, None, &opts, &mut seeded(4)).unwrap();
            assert!(rows.iter().flatten().all(|&id| id < 8));
            assert_eq!(*trace.last().unwrap(), 0);
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn draw_mask_bounds() {
        let mut rng = seeded(5);
        for _ in 0..100 {
            let m = draw_mask(&mut rng, 7);
            let n = m.iter().filter(|&&b| b).count();
            assert!((1..=7).contains(&n));
        }
    }
}
