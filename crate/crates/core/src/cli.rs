//! Command-line entry points.

use std::ffi::OsString;
use std::fs::{File, OpenOptions};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use clap::{Args, Parser, Subcommand};

use crate::ablation::{compare_post_training, run_ablation, Variant};
use crate::checkpoint::{load_checkpoint, save_checkpoint, CheckpointState};
use crate::config::{ConfigBundle, ValidatedConfig};
use crate::data::{load_folder, synthetic_dataset, write_grid, write_images, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, PerceptualExtractor};
use crate::nn::seeded;
use crate::plot::plot_series;
use crate::quantizer::unpack_tokens;
use crate::sampler::{integrate, scaled_initial_noise, shifted_schedule, GuidanceSpec};
use crate::stage2::{sample_maskgit, tokenize_dataset, train_maskgit, MaskGit, MaskGitSampling};
use crate::trainer::{
    reconstruct, tokenizer_from_state, train_stage1a, train_stage1b, PostTrainObjective, TrainOptions, TrainReport,
    EVAL_NOISE_SEED,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FLOWMO_OUT";
const LOCK_NAME: &str = ".lock";

#[derive(Debug, Parser)]
#[command(name = "flowmo", version, about = "Flow-decoder image tokenizer: training, sampling and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Stage 1A: end-to-end flow-matching training of encoder and decoder.
    TrainStage1a(TrainArgs),
    /// Stage 1B: decoder post-training through the sampling chain (needs --init).
    TrainStage1b(TrainArgs),
    /// Stage 2: tokenize the dataset with --init and train the masked-token generator.
    TrainStage2(TrainArgs),
    /// Encode, quantize and decode images, writing grids and a metric report.
    Reconstruct(ReconstructArgs),
    /// Sample token grids from a stage 2 checkpoint and decode them to images.
    Sample(SampleArgs),
    /// Metrics between a folder of originals and a folder of reconstructions.
    Eval(EvalArgs),
    /// Ablation sweeps (schedule, guidance, quantizer, noise-level mix) as a table.
    Ablate(AblateArgs),
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.max_steps=100` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every random draw of the run.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (default: `$FLOWMO_OUT/<subcommand>` or `runs/<subcommand>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct SamplerArgs {
    /// ODE sampling steps (`sampler.num_steps`).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Timestep shift exponent (`sampler.rho`).
    #[arg(long)]
    pub rho: Option<f64>,
    /// Guidance weight (`sampler.guidance_weight`).
    #[arg(long)]
    pub guidance: Option<f64>,
    /// Flow-time band `lo,hi` where guidance applies (`sampler.guidance_interval`).
    #[arg(long = "guidance-interval", value_name = "LO,HI")]
    pub guidance_interval: Option<String>,
    /// Initial noise scale (`sampler.noise_scale`).
    #[arg(long = "noise-scale")]
    pub noise_scale: Option<f64>,
    /// Starting softmax temperature of stage 2 sampling (`stage2.temperature`).
    #[arg(long)]
    pub temperature: Option<f64>,
}

impl SamplerArgs {
    fn overrides(&self) -> Vec<String> {
        let mut v = Vec::new();
        if let Some(s) = self.steps {
            v.push(format!("sampler.num_steps={s}"));
        }
        if let Some(r) = self.rho {
            v.push(format!("sampler.rho={r}"));
        }
        if let Some(g) = self.guidance {
            v.push(format!("sampler.guidance_weight={g}"));
        }
        if let Some(i) = &self.guidance_interval {
            v.push(format!("sampler.guidance_interval={i}"));
        }
        if let Some(n) = self.noise_scale {
            v.push(format!("sampler.noise_scale={n}"));
        }
        if let Some(t) = self.temperature {
            v.push(format!("stage2.temperature={t}"));
        }
        v
    }
}

#[derive(Debug, Args, Clone)]
pub struct DataArgs {
    /// Folder of training images; without it a synthetic shapes dataset is used.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of synthetic images when --data is absent.
    #[arg(long, default_value_t = 256)]
    pub synthetic: usize,
    /// Seed of the synthetic dataset.
    #[arg(long = "data-seed", default_value_t = 0)]
    pub data_seed: u64,
    /// Hold out this many trailing images for evaluation snapshots and early stopping.
    #[arg(long = "held-out", default_value_t = 0)]
    pub held_out: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Checkpoint to start from (stage 1B: a 1A or 1B checkpoint; stage 2: a tokenizer checkpoint).
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Tokenizer checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    /// Stage 2 checkpoint.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Tokenizer checkpoint used to decode the sampled tokens.
    #[arg(long)]
    pub tokenizer: Option<PathBuf>,
    /// Number of images to sample.
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    /// Class label to condition on (unconditional when absent).
    #[arg(long)]
    pub class: Option<u32>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Folder of original images.
    #[arg(long)]
    pub originals: PathBuf,
    /// Folder of reconstructions (matched to originals by sorted file name).
    #[arg(long)]
    pub reconstructions: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(flatten)]
    pub sampler: SamplerArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Number of seeds per arm (seeds are `--seed`, `--seed + 1`, ...).
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Also compare chain-loss and one-step post-training from each default model.
    #[arg(long = "post-train")]
    pub post_train: bool,
}

/// Exclusive ownership of an output directory for the lifetime of the value.
#[derive(Debug)]
pub struct OutDirLock {
    path: PathBuf,
}

impl OutDirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(OutDirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutDirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

fn load_config(common: &CommonArgs, extra: &[String]) -> Result<ValidatedConfig> {
    let mut bundle = match &common.config {
        Some(p) => ConfigBundle::load(p)?,
        None => ConfigBundle::default(),
    };
    bundle.apply_overrides(&common.overrides)?;
    bundle.apply_overrides(extra)?;
    bundle.validate()
}

fn out_dir(common: &CommonArgs, name: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| {
        let root = std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        root.join(name)
    })
}

fn load_data(cfg: &ValidatedConfig, args: &DataArgs) -> Result<(Dataset, Option<Dataset>)> {
    let m = cfg.model();
    let data = match &args.data {
        Some(p) => load_folder(p, m.image_resolution)?,
        None => synthetic_dataset(args.data_seed, args.synthetic, m.image_resolution, 8)?,
    };
    if args.held_out == 0 {
        return Ok((data, None));
    }
    if args.held_out >= data.len() {
        return Err(Error::invalid(format!("--held-out {} leaves no training images out of {}", args.held_out, data.len())));
    }
    let (train, held) = data.split_tail(args.held_out);
    Ok((train, Some(held)))
}

fn require_init<'a>(init: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    init.as_deref()
        .ok_or_else(|| Error::StageMismatch { found: "none".into(), reason: format!("{what} requires --init <checkpoint>") })
}

fn write_report(out: &Path, prefix: &str, report: &TrainReport) -> Result<()> {
    report.write_csv(BufWriter::new(File::create(out.join(format!("{prefix}_report.csv")))?))?;
    let flow: Vec<f64> = report.steps.iter().map(|r| r.flow).collect();
    let total: Vec<f64> = report.steps.iter().map(|r| r.total).collect();
    plot_series(&out.join(format!("{prefix}_loss.png")), &[&total, &flow], 640, 360)
}

fn write_metrics(out: &Path, report: &MetricReport) -> Result<()> {
    report.write_csv(BufWriter::new(File::create(out.join("metrics.csv"))?))
}

const DTYPE: DType = DType::F32;

fn options(held: Option<&Dataset>) -> Result<TrainOptions> {
    let device = Device::Cpu;
    let held_out = match held {
        Some(h) => Some(h.all(DTYPE, &device)?),
        None => None,
    };
    Ok(TrainOptions { dtype: DTYPE, device, held_out })
}

fn cmd_train(stage: &str, args: &TrainArgs) -> Result<()> {
    let cfg = load_config(&args.common, &args.sampler.overrides())?;
    let init = match stage {
        "stage1b" => Some(load_checkpoint(require_init(&args.init, "train-stage1b")?, &Device::Cpu)?),
        "stage2" => Some(load_checkpoint(require_init(&args.init, "train-stage2")?, &Device::Cpu)?),
        _ => None,
    };
    let (data, held) = load_data(&cfg, &args.data)?;
    let out = out_dir(&args.common, &format!("train-{stage}"));
    let _lock = OutDirLock::acquire(&out)?;
    std::fs::write(out.join("config.txt"), cfg.bundle().to_text())?;
    let mut rng = seeded(args.common.seed);
    let opts = options(held.as_ref())?;
    match stage {
        "stage1a" => {
            let run = train_stage1a(&cfg, &data, &mut rng, &opts)?;
            save_checkpoint(&run.state, &out.join("stage1a.ckpt"))?;
            write_report(&out, "stage1a", &run.report)?;
        }
        "stage1b" => {
            let init = init.unwrap();
            let run = train_stage1b(&cfg, &init, &data, &mut rng, &opts, PostTrainObjective::ChainSample)?;
            save_checkpoint(&run.state, &out.join("stage1b.ckpt"))?;
            write_report(&out, "stage1b", &run.report)?;
        }
        _ => {
            let init = init.unwrap();
            let tok = tokenizer_from_state(&cfg, &init, true, DTYPE, &Device::Cpu)?;
            let tokens = tokenize_dataset(&tok, &data, 64)?;
            tokens.save(&out.join("tokens.bin"))?;
            let run = train_maskgit(&cfg, &tokens, &mut rng, DTYPE, &Device::Cpu)?;
            save_checkpoint(&run.state, &out.join("stage2.ckpt"))?;
            let mut w = csv::Writer::from_writer(BufWriter::new(File::create(out.join("stage2_report.csv"))?));
            w.write_record(["step", "masked_ce"])?;
            for (i, l) in run.losses.iter().enumerate() {
                w.write_record([(i + 1).to_string(), l.to_string()])?;
            }
            w.flush()?;
            plot_series(&out.join("stage2_loss.png"), &[&run.losses], 640, 360)?;
        }
    }
    println!("wrote {}", out.display());
    Ok(())
}

/// Interleaves two equally shaped batches as `[x0, y0, x1, y1, ...]`.
fn interleave(x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(Tensor::stack(&[x, y], 1)?.reshape((2 * b, c, h, w))?)
}

fn cmd_reconstruct(args: &ReconstructArgs) -> Result<()> {
    let cfg = load_config(&args.common, &args.sampler.overrides())?;
    let state = load_checkpoint(require_init(&args.init, "reconstruct")?, &Device::Cpu)?;
    let tok = tokenizer_from_state(&cfg, &state, true, DTYPE, &Device::Cpu)?;
    let data = match &args.data.data {
        Some(p) => load_folder(p, cfg.model().image_resolution)?,
        None => synthetic_dataset(args.data.data_seed, args.data.synthetic, cfg.model().image_resolution, 8)?,
    };
    let out = out_dir(&args.common, "reconstruct");
    let _lock = OutDirLock::acquire(&out)?;
    let x = data.all(DTYPE, &Device::Cpu)?;
    let y = reconstruct(&tok, &x, cfg.sampler(), args.common.seed ^ EVAL_NOISE_SEED)?;
    write_grid(&interleave(&x, &y)?, &out.join("side_by_side.png"), 8)?;
    write_images(&y, &out.join("reconstructions"), "recon")?;
    let ex = PerceptualExtractor::new(cfg.train().perceptual_seed_1a, cfg.model().channels, DTYPE, &Device::Cpu)?;
    write_metrics(&out, &MetricReport::compute(&ex, &x, &y)?)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_sample(args: &SampleArgs) -> Result<()> {
    let cfg = load_config(&args.common, &args.sampler.overrides())?;
    let dev = Device::Cpu;
    let gen_state: CheckpointState = load_checkpoint(require_init(&args.init, "sample")?, &dev)?;
    let tok_path = args
        .tokenizer
        .as_deref()
        .ok_or_else(|| Error::invalid("sample requires --tokenizer <checkpoint>"))?;
    let tok = tokenizer_from_state(&cfg, &load_checkpoint(tok_path, &dev)?, true, DTYPE, &dev)?;
    let model = MaskGit::from_state(cfg.stage2(), &gen_state, DTYPE, &dev)?;
    let out = out_dir(&args.common, "sample");
    let _lock = OutDirLock::acquire(&out)?;
    let mut rng = seeded(args.common.seed);
    let classes: Vec<Option<u32>> = vec![args.class; args.count];
    let tokens = sample_maskgit(&model, cfg.model(), args.count, Some(&classes), &MaskGitSampling::from_config(cfg.stage2()), &mut rng)?;
    tokens.write_to(BufWriter::new(File::create(out.join("samples.tokens"))?))?;
    let images = decode_tokens(&tok, &cfg, &tokens, &mut rng)?;
    write_grid(&images, &out.join("samples.png"), 8)?;
    println!("wrote {}", out.display());
    Ok(())
}

/// Decodes token ids to images with the tokenizer's sampler settings.
pub fn decode_tokens(
    tok: &crate::model::Tokenizer,
    cfg: &ValidatedConfig,
    tokens: &crate::quantizer::TokenIds,
    rng: &mut crate::nn::SeededRng,
) -> Result<Tensor> {
    let code = unpack_tokens(tokens, tok.dtype(), tok.device())?;
    let m = cfg.model();
    let shape = [tokens.batch, m.channels, m.image_resolution, m.image_resolution];
    let z = scaled_initial_noise(&crate::nn::randn(rng, &shape, tok.dtype(), tok.device())?, cfg.sampler().noise_scale)?;
    let schedule = shifted_schedule(cfg.sampler().num_steps, cfg.sampler().rho)?;
    integrate(tok, Some(&code), &z, &schedule, &GuidanceSpec::from_sampler(cfg.sampler())?, false)
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = load_config(&args.common, &[])?;
    let r = cfg.model().image_resolution;
    let x = load_folder(&args.originals, r)?;
    let y = load_folder(&args.reconstructions, r)?;
    if x.len() != y.len() {
        return Err(Error::invalid(format!("{} originals vs {} reconstructions", x.len(), y.len())));
    }
    let out = out_dir(&args.common, "eval");
    let _lock = OutDirLock::acquire(&out)?;
    let ex = PerceptualExtractor::new(cfg.train().perceptual_seed_1a, cfg.model().channels, DTYPE, &Device::Cpu)?;
    let report = MetricReport::compute(&ex, &x.all(DTYPE, &Device::Cpu)?, &y.all(DTYPE, &Device::Cpu)?)?;
    write_metrics(&out, &report)?;
    println!("psnr {:.4} ssim {:.4} perceptual {:.6} toy-fid {:.6}", report.mean_psnr(), report.mean_ssim(), report.mean_perceptual(), report.toy_fid);
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<()> {
    let cfg = load_config(&args.common, &args.sampler.overrides())?;
    let (data, held) = load_data(&cfg, &args.data)?;
    let eval = held.ok_or_else(|| Error::invalid("ablate requires --held-out N evaluation images"))?;
    let out = out_dir(&args.common, "ablate");
    let _lock = OutDirLock::acquire(&out)?;
    let opts = options(None)?;
    let eval_t = eval.all(DTYPE, &Device::Cpu)?;
    let seeds: Vec<u64> = (0..args.seeds).map(|i| args.common.seed + i).collect();
    let table = run_ablation(&cfg, &data, &eval_t, &seeds, &Variant::ALL, &opts)?;
    table.write_csv(BufWriter::new(File::create(out.join("ablation.csv"))?))?;
    for r in &table.rows {
        println!("{:<16} seed {:<3} toy-fid {:>10.4} psnr {:>8.3} perceptual {:>8.4}", r.variant, r.seed, r.toy_fid, r.psnr, r.perceptual);
    }
    if args.post_train {
        let mut rows = Vec::new();
        for &seed in &seeds {
            let init = train_stage1a(&cfg, &data, &mut seeded(seed), &opts)?.state;
            rows.extend(compare_post_training(&cfg, &init, &data, &eval_t, seed, &opts)?.rows);
        }
        let t = crate::ablation::AblationTable { rows };
        t.write_csv(BufWriter::new(File::create(out.join("post_training.csv"))?))?;
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the subcommand.
pub fn run<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => match e.kind() {
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
                print!("{e}");
                return Ok(());
            }
            _ => return Err(Error::invalid(e.to_string())),
        },
    };
    match &cli.command {
        Command::TrainStage1a(a) => cmd_train("stage1a", a),
        Command::TrainStage1b(a) => cmd_train("stage1b", a),
        Command::TrainStage2(a) => cmd_train("stage2", a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
    }
}

/// Process entry point: exit status 0 on success, 1 with the error on stderr otherwise.
pub fn main() -> std::process::ExitCode {
    match run(std::env::args_os()) {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::ExitCode::FAILURE
        }
    }
}
