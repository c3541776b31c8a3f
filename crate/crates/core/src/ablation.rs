//! Scripted comparison sweeps over sampler and training choices.

use std::io::Write;

use candle_core::Tensor;

use crate::checkpoint::CheckpointState;
use crate::config::{ConfigBundle, QuantizerKind, ValidatedConfig};
use crate::data::Dataset;
use crate::error::Result;
use crate::metrics::{MetricReport, PerceptualExtractor};
use crate::nn::seeded;
use crate::trainer::{reconstruct, tokenizer_from_state, train_stage1a, train_stage1b, PostTrainObjective, TrainOptions, EVAL_NOISE_SEED};

/// One sweep arm. `Default` is the reference every other arm is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Default,
    /// Linear timestep spacing (`rho = 1`) at inference.
    LinearSchedule,
    /// Guidance weight 1 at inference.
    NoGuidance,
    /// Finite scalar quantization instead of binary codes (retrained).
    Fsq,
    /// Noise levels drawn without the uniform component (retrained).
    NoUniformMix,
}

impl Variant {
    pub const ALL: [Variant; 5] =
        [Variant::Default, Variant::LinearSchedule, Variant::NoGuidance, Variant::Fsq, Variant::NoUniformMix];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Default => "default",
            Variant::LinearSchedule => "rho=1",
            Variant::NoGuidance => "no_guidance",
            Variant::Fsq => "fsq",
            Variant::NoUniformMix => "no_uniform_mix",
        }
    }

    /// Config for training this arm; `None` when it shares the default model.
    fn training_overrides(self) -> Option<Vec<(&'static str, String)>> {
        match self {
            Variant::Fsq => Some(vec![("model.quantizer_kind", QuantizerKind::Fsq.to_string())]),
            Variant::NoUniformMix => Some(vec![("train.uniform_mix_prob", "0".into())]),
            _ => None,
        }
    }

    fn sampler_overrides(self) -> Vec<(&'static str, String)> {
        match self {
            Variant::LinearSchedule => vec![("sampler.rho", "1".into())],
            Variant::NoGuidance => vec![("sampler.guidance_weight", "1".into())],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub toy_fid: f64,
    pub psnr: f64,
    pub perceptual: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn get(&self, variant: &str, seed: u64) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant && r.seed == seed)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["variant", "seed", "toy_fid", "psnr", "perceptual"])?;
        for r in &self.rows {
            out.write_record([
                r.variant.clone(),
                r.seed.to_string(),
                format!("{:.6}", r.toy_fid),
                format!("{:.6}", r.psnr),
                format!("{:.6}", r.perceptual),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn with_overrides(cfg: &ValidatedConfig, overrides: &[(&str, String)]) -> Result<ValidatedConfig> {
    let mut b: ConfigBundle = cfg.bundle().clone();
    for (k, v) in overrides {
        b.set(k, v)?;
    }
    b.validate()
}

/// Metrics of `state` reconstructing `eval` under `cfg`'s sampler (EMA weights).
pub fn score(cfg: &ValidatedConfig, state: &CheckpointState, eval: &Tensor, opts: &TrainOptions) -> Result<MetricReport> {
    let tok = tokenizer_from_state(cfg, state, true, opts.dtype, &opts.device)?;
    let extractor = PerceptualExtractor::new(cfg.train().perceptual_seed_1a, cfg.model().channels, opts.dtype, &opts.device)?;
    let x = eval.to_dtype(opts.dtype)?;
    let y = reconstruct(&tok, &x, cfg.sampler(), EVAL_NOISE_SEED)?;
    MetricReport::compute(&extractor, &x, &y)
}

/// Trains the needed Stage 1A models per seed and scores every requested arm on `eval`.
pub fn run_ablation(
    cfg: &ValidatedConfig,
    train: &Dataset,
    eval: &Tensor,
    seeds: &[u64],
    variants: &[Variant],
    opts: &TrainOptions,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    for &seed in seeds {
        let mut default_state: Option<CheckpointState> = None;
        for &v in variants {
            let (train_cfg, state) = match v.training_overrides() {
                Some(o) => {
                    let c = with_overrides(cfg, &o)?;
                    let run = train_stage1a(&c, train, &mut seeded(seed), opts)?;
                    (c, run.state)
                }
                None => {
                    if default_state.is_none() {
                        default_state = Some(train_stage1a(cfg, train, &mut seeded(seed), opts)?.state);
                    }
                    (cfg.clone(), default_state.clone().unwrap())
                }
            };
            let eval_cfg = with_overrides(&train_cfg, &v.sampler_overrides())?;
            let report = score(&eval_cfg, &state, eval, opts)?;
            log::info!("ablation {} seed {seed}: toy-FID {:.4}", v.name(), report.toy_fid);
            table.rows.push(AblationRow {
                variant: v.name().to_string(),
                seed,
                toy_fid: report.toy_fid,
                psnr: report.mean_psnr(),
                perceptual: report.mean_perceptual(),
            });
        }
    }
    Ok(table)
}

/// Post-trains one Stage 1A checkpoint with the chain objective and with the one-step
/// objective, scoring both and the starting point on `eval`.
pub fn compare_post_training(
    cfg: &ValidatedConfig,
    init: &CheckpointState,
    train: &Dataset,
    eval: &Tensor,
    seed: u64,
    opts: &TrainOptions,
) -> Result<AblationTable> {
    let mut table = AblationTable::default();
    let mut push = |name: &str, report: MetricReport| {
        table.rows.push(AblationRow {
            variant: name.to_string(),
            seed,
            toy_fid: report.toy_fid,
            psnr: report.mean_psnr(),
            perceptual: report.mean_perceptual(),
        });
    };
    push("stage1a", score(cfg, init, eval, opts)?);
    for (name, objective) in [("chain_sample", PostTrainObjective::ChainSample), ("one_step", PostTrainObjective::OneStep)] {
        let run = train_stage1b(cfg, init, train, &mut seeded(seed), opts, objective)?;
        push(name, score(cfg, &run.state, eval, opts)?);
    }
    Ok(table)
}
