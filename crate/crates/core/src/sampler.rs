//! Timestep schedules, interval-gated guidance, and Euler integration of the
//! probability-flow ODE from noise (`t = 1`) to data (`t = 0`).

use candle_core::Tensor;
use rand::Rng;

use crate::config::{Interval, SamplerConfig};
use crate::error::{Error, Result};
use crate::nn::scalar_f64;

/// Strictly decreasing noise levels `(1, t_2, ..., t_n, 0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Schedule {
    times: Vec<f64>,
}

impl Schedule {
    /// Validates `times`: starts at 1, ends at 0, strictly decreasing.
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::invalid("schedule needs at least two times"));
        }
        if times[0] != 1.0 {
            return Err(Error::invalid(format!("schedule must start at 1, got {}", times[0])));
        }
        if *times.last().unwrap() != 0.0 {
            return Err(Error::invalid("schedule must end at 0"));
        }
        if let Some(i) = times.windows(2).position(|w| !(w[1] < w[0])) {
            return Err(Error::invalid(format!(
                "schedule not strictly decreasing at index {}: {} -> {}",
                i,
                times[i],
                times[i + 1]
            )));
        }
        Ok(Schedule { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    /// Number of Euler steps (one fewer than the number of times).
    pub fn num_steps(&self) -> usize {
        self.times.len() - 1
    }
}

/// Linearly spaced schedule `((n - i + 1) / n)` plus terminal 0.
pub fn linear_schedule(n: usize) -> Result<Schedule> {
    shifted_schedule(n, 1.0)
}

/// `t_i = ((n - i + 1) / n)^ρ` for `i = 1..n`, then 0.
pub fn shifted_schedule(n: usize, rho: f64) -> Result<Schedule> {
    if n < 1 {
        return Err(Error::invalid("schedule needs n >= 1"));
    }
    if !(rho >= 1.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("shift exponent must be finite and >= 1, got {rho}")));
    }
    let mut times: Vec<f64> = (0..n).map(|i| ((n - i) as f64 / n as f64).powf(rho)).collect();
    times.push(0.0);
    Schedule::new(times)
}

/// `t_i = (Σ_{j>=i} u_j) / (Σ_j u_j)` for positive weights `u`, then 0.
pub fn schedule_from_weights(u: &[f64]) -> Result<Schedule> {
    if u.is_empty() || u.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::invalid("schedule weights must be positive and finite"));
    }
    let mut suffix = vec![0.0; u.len()];
    let mut acc = 0.0;
    for i in (0..u.len()).rev() {
        acc += u[i];
        suffix[i] = acc;
    }
    let total = suffix[0];
    let mut times: Vec<f64> = suffix.iter().map(|s| s / total).collect();
    times.push(0.0);
    Schedule::new(times)
}

/// Randomized schedule with `u_j ~ U(0, 1)`; degenerate draws are redrawn.
pub fn random_schedule<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<Schedule> {
    if n < 1 {
        return Err(Error::invalid("schedule needs n >= 1"));
    }
    loop {
        let u: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        if let Ok(s) = schedule_from_weights(&u) {
            return Ok(s);
        }
    }
}

/// Guidance weight and the flow-time band where it applies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSpec {
    pub weight: f64,
    pub interval: Interval,
}

impl GuidanceSpec {
    pub fn new(weight: f64, interval: Interval) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::invalid(format!("guidance weight must be >= 0, got {weight}")));
        }
        if !(0.0 <= interval.lo && interval.lo <= interval.hi && interval.hi <= 1.0) {
            return Err(Error::invalid(format!("bad guidance interval {interval}")));
        }
        Ok(GuidanceSpec { weight, interval })
    }

    /// Weight 1: the conditional path everywhere.
    pub fn unguided() -> Self {
        GuidanceSpec { weight: 1.0, interval: Interval { lo: 0.0, hi: 1.0 } }
    }

    pub fn from_sampler(s: &SamplerConfig) -> Result<Self> {
        Self::new(s.guidance_weight, s.guidance_interval)
    }

    pub fn is_active(&self, t: f64) -> bool {
        self.weight != 1.0 && t >= self.interval.lo && t <= self.interval.hi
    }
}

/// `v_uncond + w * (v_cond - v_uncond)` inside the interval, `v_cond` elsewhere.
pub fn guided_velocity(v_cond: &Tensor, v_uncond: &Tensor, t: f64, spec: &GuidanceSpec) -> Result<Tensor> {
    if v_cond.dims() != v_uncond.dims() {
        return Err(Error::shape(format!("guidance branches {:?} vs {:?}", v_cond.dims(), v_uncond.dims())));
    }
    if !spec.is_active(t) {
        return Ok(v_cond.clone());
    }
    Ok((v_uncond + ((v_cond - v_uncond)? * spec.weight)?)?)
}

/// A velocity field `v(x_t, c, t)`; `code = None` selects the unconditional branch.
pub trait VelocityField {
    fn velocity(&self, x_t: &Tensor, code: Option<&Tensor>, t: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, Option<&Tensor>, f64) -> Result<Tensor>,
{
    fn velocity(&self, x_t: &Tensor, code: Option<&Tensor>, t: f64) -> Result<Tensor> {
        self(x_t, code, t)
    }
}

/// Euler integration `x <- x + (t_i - t_{i+1}) * v(x, t_i)` from `z` at `t = 1` to `t = 0`.
///
/// With `differentiable`, the autograd graph spans the whole chain; otherwise each
/// state is detached. Both paths compute identical values.
pub fn integrate<F: VelocityField + ?Sized>(
    field: &F,
    code: Option<&Tensor>,
    z: &Tensor,
    schedule: &Schedule,
    guidance: &GuidanceSpec,
    differentiable: bool,
) -> Result<Tensor> {
    let times = schedule.times();
    if times.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::invalid("non-monotone schedule"));
    }
    let mut x = if differentiable { z.clone() } else { z.detach() };
    for (step, w) in times.windows(2).enumerate() {
        let (t_cur, t_next) = (w[0], w[1]);
        let v = match code {
            Some(c) if guidance.is_active(t_cur) => {
                let v_cond = field.velocity(&x, Some(c), t_cur)?;
                let v_uncond = field.velocity(&x, None, t_cur)?;
                guided_velocity(&v_cond, &v_uncond, t_cur, guidance)?
            }
            _ => field.velocity(&x, code, t_cur)?,
        };
        x = (&x + (v * (t_cur - t_next))?)?;
        if !differentiable {
            x = x.detach();
        }
        if !scalar_f64(&x.sum_all()?)?.is_finite() {
            return Err(Error::IntegrationNan { step });
        }
    }
    Ok(x)
}

/// `scale * z`; scales below 1 raise the likelihood of the initial sample.
pub fn scaled_initial_noise(z: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::invalid(format!("noise scale must be > 0, got {scale}")));
    }
    Ok((z * scale)?)
}
