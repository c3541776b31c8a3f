//! Optimizer and EMA mechanics plus the two tokenizer training stages.

use std::collections::VecDeque;
use std::io::Write;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::checkpoint::{CheckpointState, Stage, TensorMap, CHECKPOINT_VERSION};
use crate::config::{SamplerConfig, ValidatedConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::{denoise_one_step, flow_loss, interpolate, sample_noise_level, stage1a_loss};
use crate::metrics::{psnr, PerceptualExtractor};
use crate::model::{apply_latent_dropout, ParamStore, Tokenizer};
use crate::nn::{randn, scalar_f64, seeded, to_f64_vec, SeededRng};
use crate::quantizer::{commitment_loss, entropy_loss};
use crate::sampler::{integrate, random_schedule, scaled_initial_noise, shifted_schedule, GuidanceSpec};
use crate::config::QuantizerKind;

/// Window of the divergence guard's moving average.
pub const DIVERGENCE_WINDOW: usize = 100;
/// Abort when a step's total loss exceeds this multiple of the moving average.
pub const DIVERGENCE_FACTOR: f64 = 10.0;
/// Consecutive non-improving held-out snapshots before Stage 1B stops.
pub const EARLY_STOP_PATIENCE: usize = 3;
/// Seed of the fixed noise used for evaluation reconstructions.
pub const EVAL_NOISE_SEED: u64 = 0x00e7_a15e;

/// First and second Adam moments plus the update count.
#[derive(Debug, Clone, Default)]
pub struct Moments {
    pub m: TensorMap,
    pub v: TensorMap,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamHyper { lr, beta1, beta2, eps: 1e-8 }
    }
}

/// Gradients of every parameter present in `grads`, keyed by parameter name.
pub fn collect_grads(params: &ParamStore, grads: &GradStore) -> TensorMap {
    params
        .iter()
        .filter_map(|(k, p)| grads.get(p.var.as_tensor()).map(|g| (k.clone(), g.clone())))
        .collect()
}

/// One bias-corrected Adam update.
///
/// The effective rate of parameter `name` is `lr * lr_mult * lr_scale(name)`; parameters
/// with scale 0 are skipped entirely (values and moments untouched). Missing gradients
/// count as zero.
pub fn adam_step(
    params: &ParamStore,
    grads: &TensorMap,
    moments: &mut Moments,
    hp: &AdamHyper,
    lr_scale: impl Fn(&str) -> f64,
) -> Result<()> {
    for (name, g) in grads {
        if !scalar_f64(&g.sum_all()?)?.is_finite() {
            return Err(Error::NanGradient(name.clone()));
        }
    }
    moments.step += 1;
    let t = moments.step as i32;
    let bc1 = 1.0 - hp.beta1.powi(t);
    let bc2 = 1.0 - hp.beta2.powi(t);
    for (name, p) in params.iter() {
        let scale = lr_scale(name);
        if scale == 0.0 {
            continue;
        }
        let w = p.var.as_tensor();
        let g = match grads.get(name) {
            Some(g) => g.to_dtype(w.dtype())?,
            None => w.zeros_like()?,
        };
        let m_prev = match moments.m.get(name) {
            Some(m) => m.clone(),
            None => w.zeros_like()?,
        };
        let v_prev = match moments.v.get(name) {
            Some(v) => v.clone(),
            None => w.zeros_like()?,
        };
        let m = ((&m_prev * hp.beta1)? + (&g * (1.0 - hp.beta1))?)?;
        let v = ((&v_prev * hp.beta2)? + (g.sqr()? * (1.0 - hp.beta2))?)?;
        let m_hat = (&m / bc1)?;
        let v_hat = (&v / bc2)?;
        let update = (m_hat / (v_hat.sqrt()? + hp.eps)?)?;
        let lr = hp.lr * p.lr_mult * scale;
        p.var.set(&(w.detach() - (update * lr)?)?)?;
        moments.m.insert(name.clone(), m);
        moments.v.insert(name.clone(), v);
    }
    Ok(())
}

/// `ema <- ema + (1 - rate) * (params - ema)`, elementwise; exact when a parameter is unchanged.
pub fn ema_update(ema: &mut TensorMap, params: &ParamStore, rate: f64) -> Result<()> {
    for (name, p) in params.iter() {
        let w = p.var.as_tensor().detach();
        let e = ema
            .get(name)
            .ok_or_else(|| Error::invalid(format!("EMA tree lacks `{name}`")))?;
        if e.dims() != w.dims() {
            return Err(Error::shape(format!("EMA `{name}`: {:?} vs {:?}", e.dims(), w.dims())));
        }
        let next = (e + ((w - e)? * (1.0 - rate))?)?;
        ema.insert(name.clone(), next);
    }
    Ok(())
}

/// Loss components of one optimizer step (means over accumulated micro-batches).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepRecord {
    pub step: usize,
    pub flow: f64,
    pub perc: f64,
    pub commit: f64,
    pub ent: f64,
    pub sample: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalSnapshot {
    pub step: usize,
    pub psnr: f64,
    pub perceptual: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalSnapshot>,
    pub early_stopped: bool,
    /// Step whose parameters were returned (Stage 1B keeps the best snapshot).
    pub selected_step: usize,
}

impl TrainReport {
    pub fn mean_flow(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.steps[range];
        s.iter().map(|r| r.flow).sum::<f64>() / s.len() as f64
    }

    /// CSV with one row per step; evaluation columns are filled on snapshot steps.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "flow", "perc", "commit", "ent", "sample", "total", "eval_psnr", "eval_perceptual"])?;
        let mut evals = self.evals.iter().peekable();
        let write_eval_only = |out: &mut csv::Writer<W>, e: &EvalSnapshot| -> Result<()> {
            out.write_record([
                e.step.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                fmt_metric(e.psnr),
                fmt_metric(e.perceptual),
            ])?;
            Ok(())
        };
        for r in &self.steps {
            while let Some(e) = evals.next_if(|e| e.step < r.step) {
                write_eval_only(&mut out, e)?;
            }
            let (ep, ed) = match evals.next_if(|e| e.step == r.step) {
                Some(e) => (fmt_metric(e.psnr), fmt_metric(e.perceptual)),
                None => (String::new(), String::new()),
            };
            out.write_record([
                r.step.to_string(),
                r.flow.to_string(),
                r.perc.to_string(),
                r.commit.to_string(),
                r.ent.to_string(),
                r.sample.to_string(),
                r.total.to_string(),
                ep,
                ed,
            ])?;
        }
        for e in evals {
            write_eval_only(&mut out, e)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn fmt_metric(v: f64) -> String {
    if v == f64::INFINITY { "inf".into() } else { v.to_string() }
}

/// Result of a training stage.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub state: CheckpointState,
    pub report: TrainReport,
}

/// Runtime knobs that are not part of the fingerprinted configuration.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub dtype: DType,
    pub device: Device,
    /// Held-out images for evaluation snapshots (and Stage 1B early stopping).
    pub held_out: Option<Tensor>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { dtype: DType::F32, device: Device::Cpu, held_out: None }
    }
}

/// Builds a tokenizer from checkpoint tensors (EMA or raw).
pub fn tokenizer_from_state(
    cfg: &ValidatedConfig,
    state: &CheckpointState,
    use_ema: bool,
    dtype: DType,
    device: &Device,
) -> Result<Tokenizer> {
    state.verify_fingerprint(&cfg.model_fingerprint().0)?;
    state.require_stage(&[Stage::Stage1a, Stage::Stage1b], "not a tokenizer checkpoint")?;
    let shell = Tokenizer::new(cfg.model(), &mut seeded(0), dtype, device)?;
    shell.params().load_values(if use_ema { &state.ema } else { &state.params })?;
    Ok(shell)
}

/// Encode, quantize and integrate the decoder ODE with the sampler settings.
/// Noise comes from `noise_seed`, so repeated calls are identical.
pub fn reconstruct(tok: &Tokenizer, x: &Tensor, sampler: &SamplerConfig, noise_seed: u64) -> Result<Tensor> {
    let code = tok.quantize(&tok.encode(x)?)?.detach();
    let z = randn(&mut seeded(noise_seed), x.dims(), tok.dtype(), tok.device())?;
    let z = scaled_initial_noise(&z, sampler.noise_scale)?;
    let schedule = shifted_schedule(sampler.num_steps, sampler.rho)?;
    let guidance = GuidanceSpec::from_sampler(sampler)?;
    integrate(tok, Some(&code), &z, &schedule, &guidance, false)
}

/// Mean PSNR and perceptual distance of reconstructions of `x`.
pub fn evaluate(tok: &Tokenizer, x: &Tensor, sampler: &SamplerConfig, extractor: &PerceptualExtractor) -> Result<EvalSnapshot> {
    let y = reconstruct(tok, x, sampler, EVAL_NOISE_SEED)?;
    let b = x.dim(0)?;
    let (xs, ys) = (to_f64_vec(x)?, to_f64_vec(&y)?);
    let n = xs.len() / b;
    let mut p = 0.0;
    for i in 0..b {
        p += psnr(&xs[i * n..(i + 1) * n], &ys[i * n..(i + 1) * n])?;
    }
    let perceptual = scalar_f64(&extractor.distance(&x.to_dtype(y.dtype())?, &y)?)?;
    Ok(EvalSnapshot { step: 0, psnr: p / b as f64, perceptual })
}

fn sample_batch<R: Rng + ?Sized>(rng: &mut R, data: &Dataset, batch: usize, dtype: DType, dev: &Device) -> Result<Tensor> {
    let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..data.len())).collect();
    data.batch(&idx, dtype, dev)
}

fn sample_times<R: Rng + ?Sized>(rng: &mut R, batch: usize, mix: f64, dtype: DType, dev: &Device) -> Result<Tensor> {
    let t: Vec<f64> = (0..batch).map(|_| sample_noise_level(rng, mix).t).collect();
    Ok(Tensor::from_vec(t, batch, dev)?.to_dtype(dtype)?)
}

fn add_grads(acc: &mut TensorMap, grads: TensorMap) -> Result<()> {
    for (k, g) in grads {
        let next = match acc.remove(&k) {
            Some(a) => (a + g)?,
            None => g,
        };
        acc.insert(k, next);
    }
    Ok(())
}

struct DivergenceGuard {
    window: VecDeque<f64>,
}

impl DivergenceGuard {
    fn new() -> Self {
        DivergenceGuard { window: VecDeque::with_capacity(DIVERGENCE_WINDOW) }
    }

    fn check(&mut self, step: usize, loss: f64) -> Result<()> {
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss, average: self.average() });
        }
        if self.window.len() == DIVERGENCE_WINDOW {
            let average = self.average();
            if loss > DIVERGENCE_FACTOR * average {
                return Err(Error::Diverged { step, loss, average });
            }
            self.window.pop_front();
        }
        self.window.push_back(loss);
        Ok(())
    }

    fn average(&self) -> f64 {
        self.window.iter().sum::<f64>() / self.window.len().max(1) as f64
    }
}

fn check_dataset(cfg: &ValidatedConfig, data: &Dataset) -> Result<()> {
    let m = cfg.model();
    match data.records.first() {
        None => Err(Error::invalid("training dataset is empty")),
        Some(r) if r.resolution != m.image_resolution || r.channels != m.channels => Err(Error::shape(format!(
            "dataset images are {}x{}x{}, config expects {}x{}x{}",
            r.channels, r.resolution, r.resolution, m.channels, m.image_resolution, m.image_resolution
        ))),
        _ => Ok(()),
    }
}

/// Stage 1A: end-to-end flow matching with perceptual, commitment and entropy terms.
pub fn train_stage1a(cfg: &ValidatedConfig, data: &Dataset, rng: &mut SeededRng, opts: &TrainOptions) -> Result<TrainRun> {
    check_dataset(cfg, data)?;
    let (m, tc) = (cfg.model(), cfg.train());
    let (dtype, dev) = (opts.dtype, &opts.device);
    let tok = Tokenizer::new(m, rng, dtype, dev)?;
    let params = tok.params();
    let extractor = PerceptualExtractor::new(tc.perceptual_seed_1a, m.channels, dtype, dev)?;
    let eval_extractor = extractor.clone();
    let hp = AdamHyper::new(tc.learning_rate, tc.adam_beta1, tc.adam_beta2);
    let mut moments = Moments::default();
    let mut ema = params.snapshot()?;
    let mut report = TrainReport::default();
    let mut guard = DivergenceGuard::new();
    let accum = tc.grad_accum_steps.max(1);

    for step in 1..=tc.max_steps {
        let mut grads = TensorMap::new();
        let mut rec = StepRecord { step, ..Default::default() };
        for _ in 0..accum {
            let x = sample_batch(rng, data, tc.batch_size, dtype, dev)?;
            let b = x.dim(0)?;
            let t = sample_times(rng, b, tc.uniform_mix_prob, dtype, dev)?;
            let z = randn(rng, x.dims(), dtype, dev)?;
            let x_t = interpolate(&x, &z, &t)?;
            let latent = tok.encode(&x)?;
            let code = tok.quantize(&latent)?;
            let (code, _) = apply_latent_dropout(&code, m.latent_dropout_prob, rng)?;
            let v = tok.decode(&x_t, &code, &t)?;
            let flow = flow_loss(&v, &x, &z)?;
            let x_hat = denoise_one_step(&x_t, &v, &t)?;
            let perc = extractor.distance(&x, &x_hat)?;
            let (commit, ent) = match m.quantizer_kind {
                QuantizerKind::Lfq => (commitment_loss(&latent)?, entropy_loss(&latent, m.entropy_group_bits)?),
                QuantizerKind::Fsq => (flow.zeros_like()?, flow.zeros_like()?),
            };
            let bundle = stage1a_loss(flow, perc, commit, ent, tc)?;
            let vals = bundle.values()?;
            rec.flow += vals.flow / accum as f64;
            rec.perc += vals.perc / accum as f64;
            rec.commit += vals.commit / accum as f64;
            rec.ent += vals.ent / accum as f64;
            rec.total += vals.total / accum as f64;
            let loss = if accum > 1 { (bundle.total / accum as f64)? } else { bundle.total };
            add_grads(&mut grads, collect_grads(params, &loss.backward()?))?;
        }
        guard.check(step, rec.total)?;
        let freeze = step > tc.encoder_freeze_step;
        let frozen = |n: &str| freeze && n.starts_with("encoder.");
        adam_step(params, &grads, &mut moments, &hp, |n| if frozen(n) { 0.0 } else { 1.0 })?;
        params.renormalize_mlp(frozen)?;
        ema_update(&mut ema, params, tc.ema_rate)?;
        report.steps.push(rec);

        if let Some(h) = &opts.held_out {
            if step % tc.eval_interval.max(1) == 0 || step == tc.max_steps {
                let snap = tok.with_values(&ema)?;
                let e = evaluate(&snap, h, cfg.sampler(), &eval_extractor)?;
                log::info!("stage1a step {step}: psnr {:.3} perceptual {:.4}", e.psnr, e.perceptual);
                report.evals.push(EvalSnapshot { step, ..e });
            }
        }
    }
    report.selected_step = tc.max_steps;
    let state = CheckpointState {
        params: params.snapshot()?,
        ema,
        adam_m: moments.m,
        adam_v: moments.v,
        adam_step: moments.step,
        step: tc.max_steps as u64,
        fingerprint: cfg.model_fingerprint().0.clone(),
        stage: Stage::Stage1a,
        version: CHECKPOINT_VERSION,
    };
    Ok(TrainRun { state, report })
}

/// Reward term used by Stage 1B.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PostTrainObjective {
    /// Perceptual distance of the sample obtained by backpropagating through the full chain.
    ChainSample,
    /// Perceptual distance of the one-step estimate `x_t + t v` (comparison baseline).
    OneStep,
    /// No reward term; the same random draws are consumed as with `ChainSample`.
    FlowOnly,
}

/// Stage 1B batch size: half of Stage 1A's, at least one.
pub fn stage1b_batch_size(cfg: &ValidatedConfig) -> usize {
    (cfg.train().batch_size / 2).max(1)
}

/// Stage 1B learning rate: half of Stage 1A's.
pub fn stage1b_learning_rate(cfg: &ValidatedConfig) -> f64 {
    cfg.train().learning_rate / 2.0
}

/// Stage 1B: decoder post-training through the sampling chain with the encoder frozen.
///
/// A Stage 1A checkpoint starts from its EMA weights with fresh optimizer state; a
/// Stage 1B checkpoint resumes exactly. With held-out images, training stops after
/// [`EARLY_STOP_PATIENCE`] snapshots without improvement in perceptual distance and
/// returns the best snapshot (including the starting point).
pub fn train_stage1b(
    cfg: &ValidatedConfig,
    init: &CheckpointState,
    data: &Dataset,
    rng: &mut SeededRng,
    opts: &TrainOptions,
    objective: PostTrainObjective,
) -> Result<TrainRun> {
    check_dataset(cfg, data)?;
    init.verify_fingerprint(&cfg.model_fingerprint().0)?;
    init.require_stage(&[Stage::Stage1a, Stage::Stage1b], "stage 1B needs a stage 1A or 1B checkpoint")?;
    init.check_congruent()?;
    let (m, tc) = (cfg.model(), cfg.train());
    let (dtype, dev) = (opts.dtype, &opts.device);
    let resume = init.stage == Stage::Stage1b;
    let tok = tokenizer_from_state(cfg, init, !resume, dtype, dev)?;
    let params = tok.params();
    let mut ema = if resume { init.ema.clone() } else { params.snapshot()? };
    let mut moments = if resume {
        Moments { m: init.adam_m.clone(), v: init.adam_v.clone(), step: init.adam_step }
    } else {
        Moments::default()
    };
    let start = if resume { init.step as usize } else { 0 };
    let extractor = PerceptualExtractor::new(tc.perceptual_seed_1b, m.channels, dtype, dev)?;
    let eval_extractor = PerceptualExtractor::new(tc.perceptual_seed_1a, m.channels, dtype, dev)?;
    let hp = AdamHyper::new(stage1b_learning_rate(cfg), tc.adam_beta1, tc.adam_beta2);
    let batch = stage1b_batch_size(cfg);
    let accum = tc.grad_accum_steps.max(1);
    let unguided = GuidanceSpec::unguided();
    let mut report = TrainReport::default();
    let mut guard = DivergenceGuard::new();

    let snapshot_state = |params: &ParamStore, ema: &TensorMap, moments: &Moments, step: usize| -> Result<CheckpointState> {
        Ok(CheckpointState {
            params: params.snapshot()?,
            ema: ema.clone(),
            adam_m: moments.m.clone(),
            adam_v: moments.v.clone(),
            adam_step: moments.step,
            step: step as u64,
            fingerprint: cfg.model_fingerprint().0.clone(),
            stage: Stage::Stage1b,
            version: CHECKPOINT_VERSION,
        })
    };

    let mut best: Option<(f64, CheckpointState)> = None;
    let mut stale = 0usize;
    if let Some(h) = &opts.held_out {
        let e = evaluate(&tok.with_values(&ema)?, h, cfg.sampler(), &eval_extractor)?;
        report.evals.push(EvalSnapshot { step: start, ..e });
        best = Some((e.perceptual, snapshot_state(params, &ema, &moments, start)?));
    }

    let end = start + tc.stage1b_max_steps;
    let mut last = start;
    for step in start + 1..=end {
        let mut grads = TensorMap::new();
        let mut rec = StepRecord { step, ..Default::default() };
        for _ in 0..accum {
            let x = sample_batch(rng, data, batch, dtype, dev)?;
            let b = x.dim(0)?;
            let code = tok.quantize(&tok.encode(&x)?.detach())?.detach();
            let t = sample_times(rng, b, tc.uniform_mix_prob, dtype, dev)?;
            let z = randn(rng, x.dims(), dtype, dev)?;
            let x_t = interpolate(&x, &z, &t)?;
            let (code_d, _) = apply_latent_dropout(&code, m.latent_dropout_prob, rng)?;
            let v = tok.decode(&x_t, &code_d, &t)?;
            let flow = flow_loss(&v, &x, &z)?;
            let schedule = random_schedule(tc.stage1b_num_steps, rng)?;
            let z_chain = randn(rng, x.dims(), dtype, dev)?;
            let reward = match objective {
                PostTrainObjective::ChainSample if tc.lambda_sample != 0.0 => {
                    let x_hat = integrate(&tok, Some(&code), &z_chain, &schedule, &unguided, true)?;
                    Some(extractor.distance(&x, &x_hat)?)
                }
                PostTrainObjective::OneStep if tc.lambda_sample != 0.0 => {
                    let x_hat = denoise_one_step(&x_t, &v, &t)?;
                    Some(extractor.distance(&x, &x_hat)?)
                }
                _ => None,
            };
            let (sample_val, total) = match reward {
                Some(r) => (scalar_f64(&r)?, (&flow + (r * tc.lambda_sample)?)?),
                None => (0.0, flow.clone()),
            };
            let fv = scalar_f64(&flow)?;
            rec.flow += fv / accum as f64;
            rec.sample += sample_val / accum as f64;
            rec.total += scalar_f64(&total)? / accum as f64;
            let loss = if accum > 1 { (total / accum as f64)? } else { total };
            let mut g = collect_grads(params, &loss.backward()?);
            g.retain(|k, _| !k.starts_with("encoder."));
            add_grads(&mut grads, g)?;
        }
        guard.check(step - start, rec.total)?;
        let frozen = |n: &str| n.starts_with("encoder.");
        adam_step(params, &grads, &mut moments, &hp, |n| if frozen(n) { 0.0 } else { 1.0 })?;
        params.renormalize_mlp(frozen)?;
        ema_update(&mut ema, params, tc.ema_rate)?;
        report.steps.push(rec);
        last = step;

        if let Some(h) = &opts.held_out {
            if (step - start) % tc.eval_interval.max(1) == 0 || step == end {
                let e = evaluate(&tok.with_values(&ema)?, h, cfg.sampler(), &eval_extractor)?;
                log::info!("stage1b step {step}: psnr {:.3} perceptual {:.4}", e.psnr, e.perceptual);
                report.evals.push(EvalSnapshot { step, ..e });
                let improved = best.as_ref().is_none_or(|(p, _)| e.perceptual < *p);
                if improved {
                    best = Some((e.perceptual, snapshot_state(params, &ema, &moments, step)?));
                    stale = 0;
                } else {
                    stale += 1;
                    if stale >= EARLY_STOP_PATIENCE {
                        report.early_stopped = true;
                        break;
                    }
                }
            }
        }
    }
    let state = match best {
        Some((_, s)) => s,
        None => snapshot_state(params, &ema, &moments, last)?,
    };
    report.selected_step = state.step as usize;
    Ok(TrainRun { state, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Param, ParamRole};
    use candle_core::Var;

    fn store(values: &[f64], lr_mult: f64) -> ParamStore {
        let mut s = ParamStore::default();
        let var = Var::from_tensor(&Tensor::new(values, &Device::Cpu).unwrap()).unwrap();
        s.insert("w".into(), Param { var, role: ParamRole::Hidden, lr_mult });
        s
    }

    fn grads(values: &[f64]) -> TensorMap {
        let mut g = TensorMap::new();
        g.insert("w".into(), Tensor::new(values, &Device::Cpu).unwrap());
        g
    }

    #[test]
    fn adam_matches_hand_computation() {
        let p0 = [0.5, -1.0, 2.0];
        let g = [0.1, -0.2, 0.3];
        let s = store(&p0, 0.5);
        let hp = AdamHyper::new(0.01, 0.9, 0.95);
        let mut mom = Moments::default();
        adam_step(&s, &grads(&g), &mut mom, &hp, |_| 1.0).unwrap();
        let got = to_f64_vec(s.get("w").unwrap()).unwrap();
        for i in 0..3 {
            let m = 0.1 * g[i];
            let v = 0.05 * g[i] * g[i];
            let upd = (m / 0.1) / ((v / 0.05f64).sqrt() + 1e-8);
            let want = p0[i] - 0.01 * 0.5 * upd;
            assert!((got[i] - want).abs() <= 1e-15 * want.abs().max(1.0), "{i}: {} vs {want}", got[i]);
        }
    }

    #[test]
    fn adam_zero_gradient_and_steady_state() {
        let s = store(&[1.0, 2.0], 1.0);
        let hp = AdamHyper::new(0.01, 0.9, 0.95);
        let mut mom = Moments::default();
        adam_step(&s, &grads(&[0.0, 0.0]), &mut mom, &hp, |_| 1.0).unwrap();
        assert_eq!(to_f64_vec(s.get("w").unwrap()).unwrap(), vec![1.0, 2.0]);

        let s = store(&[0.0], 1.0);
        let mut mom = Moments::default();
        let mut prev = 0.0;
        for _ in 0..500 {
            adam_step(&s, &grads(&[3.0]), &mut mom, &hp, |_| 1.0).unwrap();
            let cur = to_f64_vec(s.get("w").unwrap()).unwrap()[0];
            assert!(((prev - cur) - 0.01).abs() < 1e-6);
            prev = cur;
        }
    }

    #[test]
    fn adam_rejects_nan_and_skips_frozen() {
        let s = store(&[1.0], 1.0);
        let mut mom = Moments::default();
        let hp = AdamHyper::new(0.1, 0.9, 0.95);
        let err = adam_step(&s, &grads(&[f64::NAN]), &mut mom, &hp, |_| 1.0);
        assert!(matches!(err, Err(Error::NanGradient(n)) if n == "w"));
        adam_step(&s, &grads(&[1.0]), &mut mom, &hp, |_| 0.0).unwrap();
        assert_eq!(to_f64_vec(s.get("w").unwrap()).unwrap(), vec![1.0]);
    }

    #[test]
    fn ema_closed_forms() {
        let s = store(&[2.0, -1.0], 1.0);
        let mut ema = TensorMap::new();
        ema.insert("w".into(), Tensor::new(&[0.0f64, 0.0], &Device::Cpu).unwrap());
        let mut e0 = ema.clone();
        ema_update(&mut e0, &s, 0.0).unwrap();
        assert_eq!(to_f64_vec(&e0["w"]).unwrap(), vec![2.0, -1.0]);
        let mut e1 = ema.clone();
        ema_update(&mut e1, &s, 1.0).unwrap();
        assert_eq!(to_f64_vec(&e1["w"]).unwrap(), vec![0.0, 0.0]);
        let rate: f64 = 0.9;
        for _ in 0..7 {
            ema_update(&mut ema, &s, rate).unwrap();
        }
        let got = to_f64_vec(&ema["w"]).unwrap();
        for (g, w) in got.iter().zip([2.0, -1.0]) {
            let want = w + rate.powi(7) * (0.0 - w);
            assert!((g - want).abs() < 1e-12);
        }
    }

    #[test]
    fn divergence_guard_trips() {
        let mut g = DivergenceGuard::new();
        for s in 0..DIVERGENCE_WINDOW {
            g.check(s, 1.0).unwrap();
        }
        g.check(101, 9.0).unwrap();
        assert!(matches!(g.check(102, 50.0), Err(Error::Diverged { step: 102, .. })));
        assert!(DivergenceGuard::new().check(1, f64::NAN).is_err());
    }

    #[test]
    fn report_csv_has_eval_columns() {
        let report = TrainReport {
            steps: (1..=3).map(|s| StepRecord { step: s, flow: 1.0, total: 1.0, ..Default::default() }).collect(),
            evals: vec![
                EvalSnapshot { step: 0, psnr: 10.0, perceptual: 0.5 },
                EvalSnapshot { step: 2, psnr: f64::INFINITY, perceptual: 0.25 },
            ],
            early_stopped: false,
            selected_step: 3,
        };
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("0,,"));
        assert!(lines[3].ends_with(",inf,0.25"));
    }
}
