//! Typed configuration records, validation, fingerprinting, and bits-per-pixel accounting.
//!
//! Configs are stored as flat `key = value` text with dotted keys
//! (`model.width`, `train.learning_rate`, `sampler.rho`, `stage2.depth`).
//! Every key mirrors a struct field; unknown keys are rejected.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Quantization scheme applied to the encoder output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QuantizerKind {
    Lfq,
    Fsq,
}

impl FromStr for QuantizerKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "lfq" => Ok(QuantizerKind::Lfq),
            "fsq" => Ok(QuantizerKind::Fsq),
            other => Err(format!("expected `lfq` or `fsq`, got `{other}`")),
        }
    }
}

impl fmt::Display for QuantizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantizerKind::Lfq => f.write_str("lfq"),
            QuantizerKind::Fsq => f.write_str("fsq"),
        }
    }
}

/// Closed flow-time interval `[lo, hi]`, written `lo,hi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl FromStr for Interval {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (lo, hi) = s.split_once(',').ok_or_else(|| format!("expected `lo,hi`, got `{s}`"))?;
        let lo = lo.trim().parse::<f64>().map_err(|e| e.to_string())?;
        let hi = hi.trim().parse::<f64>().map_err(|e| e.to_string())?;
        Ok(Interval { lo, hi })
    }
}

impl fmt::Display for Interval {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{}", self.lo, self.hi)
    }
}

/// Converts an EDM noise level σ to rectified-flow time, `σ / (1 + σ)`.
pub fn edm_sigma_to_flow_time(sigma: f64) -> f64 {
    sigma / (1.0 + sigma)
}

macro_rules! config_record {
    (
        $(#[$meta:meta])*
        pub struct $name:ident prefix $prefix:literal {
            $( $(#[$fmeta:meta])* $field:ident : $ty:ty = $default:expr ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $ty, )*
        }

        impl Default for $name {
            fn default() -> Self {
                Self { $( $field: $default, )* }
            }
        }

        impl $name {
            pub const PREFIX: &'static str = $prefix;

            /// Field names in declaration order.
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one field from its textual value. Returns `Ok(false)` for unknown keys.
            pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
                match key {
                    $(
                        stringify!($field) => {
                            self.$field = value.trim().parse::<$ty>().map_err(|e| {
                                Error::config(
                                    &format!("{}.{}", $prefix, stringify!($field)),
                                    format!("cannot parse `{}`: {}", value.trim(), e),
                                )
                            })?;
                            Ok(true)
                        }
                    )*
                    _ => Ok(false),
                }
            }

            /// Canonical `(dotted key, value)` pairs.
            pub fn entries(&self) -> Vec<(String, String)> {
                vec![$( (format!("{}.{}", $prefix, stringify!($field)), self.$field.to_string()), )*]
            }
        }
    };
}

config_record! {
    /// Architecture and latent-capacity settings.
    pub struct ModelConfig prefix "model" {
        image_resolution: usize = 32,
        channels: usize = 3,
        patch_size: usize = 4,
        /// Base hidden dimension; the built model uses `width * width_factor`.
        width: usize = 128,
        width_factor: usize = 1,
        num_heads: usize = 4,
        mlp_ratio: usize = 4,
        encoder_depth: usize = 2,
        decoder_depth: usize = 4,
        latent_seq_len: usize = 16,
        token_bits: usize = 8,
        entropy_group_bits: usize = 4,
        quantizer_kind: QuantizerKind = QuantizerKind::Lfq,
        fsq_levels: usize = 3,
        latent_dropout_prob: f64 = 0.1,
    }
}

config_record! {
    /// Optimization settings for the tokenizer stages.
    pub struct TrainConfig prefix "train" {
        learning_rate: f64 = 1e-3,
        batch_size: usize = 16,
        adam_beta1: f64 = 0.9,
        adam_beta2: f64 = 0.95,
        ema_rate: f64 = 0.999,
        encoder_freeze_step: usize = 5_000,
        lambda_perc: f64 = 0.1,
        lambda_commit: f64 = 0.000625,
        lambda_ent: f64 = 0.0025,
        lambda_sample: f64 = 0.01,
        uniform_mix_prob: f64 = 0.1,
        stage1b_num_steps: usize = 8,
        max_steps: usize = 10_000,
        stage1b_max_steps: usize = 1_000,
        grad_accum_steps: usize = 1,
        eval_interval: usize = 250,
        /// Seed of the perceptual network used by the Stage 1A losses.
        perceptual_seed_1a: u64 = 1,
        /// Seed of the (swapped) perceptual network used by Stage 1B.
        perceptual_seed_1b: u64 = 2,
    }
}

config_record! {
    /// Inference-time ODE sampling settings.
    pub struct SamplerConfig prefix "sampler" {
        num_steps: usize = 25,
        rho: f64 = 4.0,
        guidance_weight: f64 = 1.5,
        guidance_interval: Interval = Interval {
            lo: edm_sigma_to_flow_time(0.17),
            hi: edm_sigma_to_flow_time(1.02),
        },
        noise_scale: f64 = 1.0,
    }
}

config_record! {
    /// Masked-token generator settings.
    pub struct Stage2Config prefix "stage2" {
        width: usize = 128,
        depth: usize = 4,
        num_heads: usize = 4,
        mlp_ratio: usize = 4,
        learning_rate: f64 = 1e-3,
        batch_size: usize = 32,
        max_steps: usize = 2_000,
        class_dropout_prob: f64 = 0.1,
        sample_steps: usize = 64,
        temperature: f64 = 1.0,
        guidance_weight: f64 = 1.5,
    }
}

/// All configuration records, before validation.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConfigBundle {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub sampler: SamplerConfig,
    pub stage2: Stage2Config,
}

/// Stable content hash of canonicalized config fields (hex SHA-256).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint(pub String);

impl fmt::Display for Fingerprint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn fingerprint_of(entries: &[(String, String)]) -> Fingerprint {
    let mut hasher = Sha256::new();
    for (k, v) in entries {
        hasher.update(k.as_bytes());
        hasher.update(b"=");
        hasher.update(v.as_bytes());
        hasher.update(b"\n");
    }
    Fingerprint(hex::encode(hasher.finalize()))
}

impl ConfigBundle {
    pub fn entries(&self) -> Vec<(String, String)> {
        let mut out = self.model.entries();
        out.extend(self.train.entries());
        out.extend(self.sampler.entries());
        out.extend(self.stage2.entries());
        out
    }

    /// Sets a dotted key such as `model.width`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (prefix, field) = key
            .split_once('.')
            .ok_or_else(|| Error::UnknownKey(key.to_string()))?;
        let known = match prefix {
            ModelConfig::PREFIX => self.model.set(field, value)?,
            TrainConfig::PREFIX => self.train.set(field, value)?,
            SamplerConfig::PREFIX => self.sampler.set(field, value)?,
            Stage2Config::PREFIX => self.stage2.set(field, value)?,
            _ => false,
        };
        if known {
            Ok(())
        } else {
            Err(Error::UnknownKey(key.to_string()))
        }
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("override `{o}` is not key=value")))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    /// Parses the flat `key = value` grammar on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut bundle = ConfigBundle::default();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::ConfigParse {
                line: i + 1,
                reason: format!("expected key = value, got `{line}`"),
            })?;
            bundle.set(k.trim(), v.trim())?;
        }
        Ok(bundle)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Canonical text form; `parse(to_text())` reproduces the bundle.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(self) -> Result<ValidatedConfig> {
        let mut violations = Vec::new();
        check_model(&self.model, &mut violations);
        check_train(&self.train, &mut violations);
        check_sampler(&self.sampler, &mut violations);
        check_stage2(&self.stage2, &mut violations);
        if !violations.is_empty() {
            return Err(Error::Validation(violations));
        }
        let fingerprint = fingerprint_of(&self.entries());
        let model_fingerprint = fingerprint_of(&self.model.entries());
        Ok(ValidatedConfig { bundle: self, fingerprint, model_fingerprint })
    }
}

/// A bundle whose invariants all hold, with its fingerprints attached.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidatedConfig {
    bundle: ConfigBundle,
    fingerprint: Fingerprint,
    model_fingerprint: Fingerprint,
}

impl ValidatedConfig {
    pub fn bundle(&self) -> &ConfigBundle {
        &self.bundle
    }
    pub fn model(&self) -> &ModelConfig {
        &self.bundle.model
    }
    pub fn train(&self) -> &TrainConfig {
        &self.bundle.train
    }
    pub fn sampler(&self) -> &SamplerConfig {
        &self.bundle.sampler
    }
    pub fn stage2(&self) -> &Stage2Config {
        &self.bundle.stage2
    }
    /// Hash over every field of every record.
    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }
    /// Hash over the architecture fields only; checkpoints are keyed by this.
    pub fn model_fingerprint(&self) -> &Fingerprint {
        &self.model_fingerprint
    }
    pub fn into_bundle(self) -> ConfigBundle {
        self.bundle
    }
}

/// Validates the three tokenizer records (stage-2 settings take their defaults).
pub fn validate_config(
    model: ModelConfig,
    train: TrainConfig,
    sampler: SamplerConfig,
) -> Result<ValidatedConfig> {
    ConfigBundle { model, train, sampler, stage2: Stage2Config::default() }.validate()
}

fn push(v: &mut Vec<(String, String)>, prefix: &str, field: &str, reason: impl Into<String>) {
    v.push((format!("{prefix}.{field}"), reason.into()));
}

fn check_model(m: &ModelConfig, v: &mut Vec<(String, String)>) {
    let p = ModelConfig::PREFIX;
    for (name, value) in [
        ("image_resolution", m.image_resolution),
        ("channels", m.channels),
        ("patch_size", m.patch_size),
        ("width", m.width),
        ("width_factor", m.width_factor),
        ("num_heads", m.num_heads),
        ("mlp_ratio", m.mlp_ratio),
        ("encoder_depth", m.encoder_depth),
        ("decoder_depth", m.decoder_depth),
        ("latent_seq_len", m.latent_seq_len),
        ("token_bits", m.token_bits),
        ("entropy_group_bits", m.entropy_group_bits),
    ] {
        if value < 1 {
            push(v, p, name, "must be >= 1");
        }
    }
    if m.patch_size >= 1 && m.image_resolution % m.patch_size != 0 {
        push(
            v,
            p,
            "patch_size",
            format!("{} does not divide image_resolution {}", m.patch_size, m.image_resolution),
        );
    }
    if m.entropy_group_bits >= 1 && m.token_bits % m.entropy_group_bits != 0 {
        push(
            v,
            p,
            "token_bits",
            format!(
                "{} is not a multiple of entropy_group_bits {}",
                m.token_bits, m.entropy_group_bits
            ),
        );
    }
    if m.entropy_group_bits > 16 {
        push(v, p, "entropy_group_bits", "must be <= 16");
    }
    if m.num_heads >= 1 && (m.width * m.width_factor) % m.num_heads != 0 {
        push(v, p, "num_heads", "must divide width * width_factor");
    }
    if !(0.0..=1.0).contains(&m.latent_dropout_prob) {
        push(v, p, "latent_dropout_prob", "must lie in [0, 1]");
    }
    if m.quantizer_kind == QuantizerKind::Fsq && (m.fsq_levels < 2 || m.fsq_levels % 2 == 0) {
        push(v, p, "fsq_levels", format!("must be an odd count >= 3, got {}", m.fsq_levels));
    }
}

fn check_train(t: &TrainConfig, v: &mut Vec<(String, String)>) {
    let p = TrainConfig::PREFIX;
    if !(t.learning_rate >= 0.0 && t.learning_rate.is_finite()) {
        push(v, p, "learning_rate", "must be finite and >= 0");
    }
    for (name, value) in [
        ("batch_size", t.batch_size),
        ("stage1b_num_steps", t.stage1b_num_steps),
        ("grad_accum_steps", t.grad_accum_steps),
        ("eval_interval", t.eval_interval),
    ] {
        if value < 1 {
            push(v, p, name, "must be >= 1");
        }
    }
    for (name, value) in [("adam_beta1", t.adam_beta1), ("adam_beta2", t.adam_beta2)] {
        if !(0.0..1.0).contains(&value) {
            push(v, p, name, "must lie in [0, 1)");
        }
    }
    if !(0.0..1.0).contains(&t.ema_rate) {
        push(v, p, "ema_rate", "must lie in [0, 1)");
    }
    for (name, value) in [
        ("lambda_perc", t.lambda_perc),
        ("lambda_commit", t.lambda_commit),
        ("lambda_ent", t.lambda_ent),
        ("lambda_sample", t.lambda_sample),
    ] {
        if !(value >= 0.0 && value.is_finite()) {
            push(v, p, name, format!("must be finite and >= 0, got {value}"));
        }
    }
    if !(0.0..=1.0).contains(&t.uniform_mix_prob) {
        push(v, p, "uniform_mix_prob", "must lie in [0, 1]");
    }
}

fn check_sampler(s: &SamplerConfig, v: &mut Vec<(String, String)>) {
    let p = SamplerConfig::PREFIX;
    if s.num_steps < 1 {
        push(v, p, "num_steps", "must be >= 1");
    }
    if !(s.rho >= 1.0 && s.rho.is_finite()) {
        push(v, p, "rho", format!("must be finite and >= 1, got {}", s.rho));
    }
    if !(s.guidance_weight >= 0.0 && s.guidance_weight.is_finite()) {
        push(v, p, "guidance_weight", "must be finite and >= 0");
    }
    let Interval { lo, hi } = s.guidance_interval;
    if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
        push(v, p, "guidance_interval", format!("need 0 <= lo <= hi <= 1, got ({lo}, {hi})"));
    }
    if !(s.noise_scale > 0.0 && s.noise_scale.is_finite()) {
        push(v, p, "noise_scale", "must be finite and > 0");
    }
}

fn check_stage2(s: &Stage2Config, v: &mut Vec<(String, String)>) {
    let p = Stage2Config::PREFIX;
    for (name, value) in [
        ("width", s.width),
        ("depth", s.depth),
        ("num_heads", s.num_heads),
        ("mlp_ratio", s.mlp_ratio),
        ("batch_size", s.batch_size),
        ("sample_steps", s.sample_steps),
    ] {
        if value < 1 {
            push(v, p, name, "must be >= 1");
        }
    }
    if s.num_heads >= 1 && s.width % s.num_heads != 0 {
        push(v, p, "num_heads", "must divide width");
    }
    if !(0.0..=1.0).contains(&s.class_dropout_prob) {
        push(v, p, "class_dropout_prob", "must lie in [0, 1]");
    }
    if !(s.temperature >= 0.0 && s.temperature.is_finite()) {
        push(v, p, "temperature", "must be finite and >= 0");
    }
    if !(s.guidance_weight >= 0.0 && s.guidance_weight.is_finite()) {
        push(v, p, "guidance_weight", "must be finite and >= 0");
    }
}

/// Bits per pixel of a discrete code: `S * log2(V) / resolution^2`.
pub fn compute_bpp(latent_seq_len: u64, vocab_size: u64, resolution: u64) -> Result<f64> {
    if latent_seq_len < 1 {
        return Err(Error::config("latent_seq_len", "must be >= 1"));
    }
    if resolution < 1 {
        return Err(Error::config("resolution", "must be >= 1"));
    }
    if vocab_size < 1 || !vocab_size.is_power_of_two() {
        return Err(Error::config(
            "vocab_size",
            format!("{vocab_size} is not a power of two"),
        ));
    }
    let bits = vocab_size.trailing_zeros() as f64;
    Ok(latent_seq_len as f64 * bits / (resolution as f64 * resolution as f64))
}

impl ModelConfig {
    /// Hidden size actually built: `width * width_factor`.
    pub fn hidden(&self) -> usize {
        self.width * self.width_factor
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_resolution / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Implicit LFQ vocabulary, `2^token_bits`.
    pub fn vocab_size(&self) -> u64 {
        1u64 << self.token_bits
    }

    pub fn groups_per_token(&self) -> usize {
        self.token_bits / self.entropy_group_bits
    }

    /// Latent rate of this configuration in bits per pixel.
    pub fn bpp(&self) -> Result<f64> {
        match self.quantizer_kind {
            QuantizerKind::Lfq => compute_bpp(
                self.latent_seq_len as u64,
                self.vocab_size(),
                self.image_resolution as u64,
            ),
            QuantizerKind::Fsq => {
                let bits = self.token_bits as f64 * (self.fsq_levels as f64).log2();
                Ok(self.latent_seq_len as f64 * bits
                    / (self.image_resolution * self.image_resolution) as f64)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bpp_matches_table_rows() {
        assert_eq!(compute_bpp(256, 1 << 18, 256).unwrap(), 0.0703125);
        assert_eq!(compute_bpp(1024, 1 << 14, 256).unwrap(), 0.21875);
        assert_eq!(compute_bpp(32, 1 << 12, 256).unwrap(), 0.005859375);
    }

    #[test]
    fn bpp_rejects_non_power_of_two() {
        let err = compute_bpp(256, 1000, 256).unwrap_err().to_string();
        assert!(err.contains("1000"), "{err}");
    }

    #[test]
    fn bpp_is_monotone() {
        let mut prev = 0.0;
        for s in 1..64u64 {
            let b = compute_bpp(s, 1 << 10, 32).unwrap();
            assert!(b > prev);
            prev = b;
        }
        let mut prev = 0.0;
        for bits in 1..40 {
            let b = compute_bpp(16, 1u64 << bits, 32).unwrap();
            assert!(b > prev);
            prev = b;
        }
    }

    #[test]
    fn token_factorizations_accepted() {
        for (d, g) in [(18, 9), (56, 14)] {
            let model = ModelConfig { token_bits: d, entropy_group_bits: g, ..Default::default() };
            let v = validate_config(model, TrainConfig::default(), SamplerConfig::default()).unwrap();
            assert_eq!(v.model().groups_per_token(), d / g);
        }
    }

    #[test]
    fn indivisible_patch_rejected_with_field_name() {
        let model = ModelConfig { patch_size: 7, image_resolution: 32, ..Default::default() };
        let err = validate_config(model, TrainConfig::default(), SamplerConfig::default())
            .unwrap_err()
            .to_string();
        assert!(err.contains("model.patch_size"), "{err}");
    }

    #[test]
    fn every_violation_is_reported() {
        let model = ModelConfig { latent_dropout_prob: 1.5, token_bits: 7, ..Default::default() };
        let train = TrainConfig { ema_rate: 1.0, lambda_ent: -1.0, ..Default::default() };
        let sampler = SamplerConfig {
            rho: 0.5,
            guidance_interval: Interval { lo: 0.6, hi: 0.2 },
            ..Default::default()
        };
        match validate_config(model, train, sampler) {
            Err(Error::Validation(v)) => {
                let fields: Vec<_> = v.iter().map(|(f, _)| f.as_str()).collect();
                for f in [
                    "model.latent_dropout_prob",
                    "model.token_bits",
                    "train.ema_rate",
                    "train.lambda_ent",
                    "sampler.rho",
                    "sampler.guidance_interval",
                ] {
                    assert!(fields.contains(&f), "missing {f} in {fields:?}");
                }
            }
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn fingerprint_is_deterministic_and_discriminating() {
        let a = ConfigBundle::default().validate().unwrap();
        let b = ConfigBundle::default().validate().unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut c = ConfigBundle::default();
        c.set("train.learning_rate", "0.0002").unwrap();
        let c = c.validate().unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
        assert_eq!(a.model_fingerprint(), c.model_fingerprint());
    }

    #[test]
    fn text_round_trip() {
        let mut b = ConfigBundle::default();
        b.apply_overrides(&["model.quantizer_kind=fsq", "sampler.guidance_interval=0.1,0.4"])
            .unwrap();
        let parsed = ConfigBundle::parse(&b.to_text()).unwrap();
        assert_eq!(parsed, b);
    }

    #[test]
    fn parse_rejects_unknown_keys_and_skips_comments() {
        let ok = ConfigBundle::parse("# comment\n\nmodel.width = 64 # trailing\n").unwrap();
        assert_eq!(ok.model.width, 64);
        assert!(matches!(ConfigBundle::parse("model.bogus = 1"), Err(Error::UnknownKey(_))));
        assert!(matches!(ConfigBundle::parse("width = 1"), Err(Error::UnknownKey(_))));
        assert!(matches!(ConfigBundle::parse("model.width"), Err(Error::ConfigParse { line: 1, .. })));
    }

    #[test]
    fn default_guidance_interval_maps_edm_pair() {
        let s = SamplerConfig::default();
        assert!((s.guidance_interval.lo - 0.145).abs() < 1e-3);
        assert!((s.guidance_interval.hi - 0.505).abs() < 1e-3);
    }
}
