#![allow(dead_code)]

use flowmo::config::{ConfigBundle, ValidatedConfig};

/// A model small enough to train on one core in seconds.
pub fn tiny_bundle() -> ConfigBundle {
    let mut b = ConfigBundle::default();
    b.apply_overrides(&[
        "model.image_resolution=16",
        "model.patch_size=4",
        "model.width=64",
        "model.num_heads=2",
        "model.mlp_ratio=2",
        "model.encoder_depth=1",
        "model.decoder_depth=2",
        "model.latent_seq_len=8",
        "model.token_bits=8",
        "model.entropy_group_bits=4",
        "train.batch_size=8",
        "train.learning_rate=3e-3",
        "train.max_steps=1000",
        "train.ema_rate=0.99",
        "train.eval_interval=250",
        "sampler.num_steps=8",
        "stage2.width=32",
        "stage2.depth=2",
        "stage2.num_heads=2",
        "stage2.mlp_ratio=2",
        "stage2.batch_size=16",
        "stage2.sample_steps=8",
    ])
    .unwrap();
    b
}

pub fn tiny() -> ValidatedConfig {
    tiny_bundle().validate().unwrap()
}

pub fn tiny_with(overrides: &[&str]) -> ValidatedConfig {
    let mut b = tiny_bundle();
    b.apply_overrides(overrides).unwrap();
    b.validate().unwrap()
}

use candle_core::{DType, Device, Tensor};
use flowmo::model::Tokenizer;
use flowmo::nn::{scalar_f64, seeded, to_f64_vec};
use flowmo::trainer::collect_grads;

/// Double-precision model for finite-difference checks.
pub fn grad_config() -> ValidatedConfig {
    let mut b = ConfigBundle::default();
    b.apply_overrides(&[
        "model.image_resolution=8",
        "model.patch_size=4",
        "model.width=16",
        "model.num_heads=2",
        "model.mlp_ratio=2",
        "model.encoder_depth=1",
        "model.decoder_depth=1",
        "model.latent_seq_len=4",
        "model.token_bits=4",
        "model.entropy_group_bits=2",
    ])
    .unwrap();
    b.validate().unwrap()
}

pub fn grad_tokenizer(seed: u64) -> Tokenizer {
    Tokenizer::new(grad_config().model(), &mut seeded(seed), DType::F64, &Device::Cpu).unwrap()
}

/// Outcome of comparing autodiff against central differences.
#[derive(Debug, Clone, Copy, Default)]
pub struct FdReport {
    /// Coordinates whose gradient magnitude exceeds the significance floor.
    pub checked: usize,
    /// Largest `|ad - fd| / max(|ad|, |fd|)` over checked coordinates.
    pub max_rel: f64,
    /// Largest `|ad - fd|` over coordinates below the floor.
    pub max_abs_small: f64,
}

impl FdReport {
    pub fn passes(&self, rel_tol: f64) -> bool {
        self.checked > 0 && self.max_rel <= rel_tol && self.max_abs_small <= 1e-9
    }
}

const FD_STEP: f64 = 1e-5;
const FD_FLOOR: f64 = 1e-6;

/// Probes up to three coordinates (first, middle, last) of every parameter whose name
/// passes `select`, comparing the backward pass of `loss` against central differences.
pub fn finite_difference_check(
    tok: &Tokenizer,
    select: impl Fn(&str) -> bool,
    loss: impl Fn(&Tokenizer) -> Tensor,
) -> FdReport {
    let params = tok.params();
    let l = loss(tok);
    let grads = collect_grads(params, &l.backward().unwrap());
    let mut rep = FdReport::default();
    for (name, p) in params.iter() {
        if !select(name) {
            continue;
        }
        let base = p.var.as_tensor().detach().copy().unwrap();
        let shape = base.dims().to_vec();
        let values = to_f64_vec(&base).unwrap();
        let ad = match grads.get(name) {
            Some(g) => to_f64_vec(g).unwrap(),
            None => vec![0.0; values.len()],
        };
        let n = values.len();
        let mut idx = vec![0, n / 2, n - 1];
        idx.dedup();
        for i in idx {
            let eval_at = |delta: f64| {
                let mut v = values.clone();
                v[i] += delta;
                p.var.set(&Tensor::from_vec(v, shape.as_slice(), &Device::Cpu).unwrap()).unwrap();
                scalar_f64(&loss(tok)).unwrap()
            };
            let fd = (eval_at(FD_STEP) - eval_at(-FD_STEP)) / (2.0 * FD_STEP);
            p.var.set(&base).unwrap();
            let scale = ad[i].abs().max(fd.abs());
            let err = (ad[i] - fd).abs();
            if scale > FD_FLOOR {
                rep.checked += 1;
                rep.max_rel = rep.max_rel.max(err / scale);
            } else {
                rep.max_abs_small = rep.max_abs_small.max(err);
            }
        }
    }
    rep
}
