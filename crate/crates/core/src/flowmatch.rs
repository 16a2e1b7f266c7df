//! Rectified-flow interpolant, generation loss, guidance, and ODE sampler.
//!
//! Convention: `x_t = (1 − t)·ε + t·x1`, target velocity `x1 − ε`, and
//! sampling integrates from noise at `t = 0` to data at `t = 1`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{LatentImage, Model};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::textcond::{Language, TextEmbedding};

/// Default guidance scale.
pub const DEFAULT_GUIDANCE: f64 = 3.5;
/// Default number of integration steps.
pub const DEFAULT_STEPS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowSample<T> {
    pub x1: Tensor<T>,
    pub eps: Tensor<T>,
    pub t: T,
    pub xt: Tensor<T>,
    pub target_v: Tensor<T>,
}

/// Standard-normal tensor determined by `seed`.
pub fn noise<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

pub fn make_flow_sample<T: Scalar>(x1: &Tensor<T>, seed: u64, t: T) -> Result<FlowSample<T>> {
    make_flow_sample_with(x1, noise(x1.shape(), seed), t)
}

/// As [`make_flow_sample`] with caller-supplied noise.
pub fn make_flow_sample_with<T: Scalar>(x1: &Tensor<T>, eps: Tensor<T>, t: T) -> Result<FlowSample<T>> {
    if !(t >= T::zero() && t <= T::one()) {
        return Err(Error::Config(format!("flow time {t} outside [0, 1]")));
    }
    let xt = eps.zip_map(x1, |e, x| (T::one() - t) * e + t * x)?;
    let target_v = x1.zip_map(&eps, |x, e| x - e)?;
    Ok(FlowSample {
        x1: x1.clone(),
        eps,
        t,
        xt,
        target_v,
    })
}

/// Mean squared error between a predicted velocity and the sample target.
pub fn fm_loss<T: Scalar>(v_pred: &Tensor<T>, sample: &FlowSample<T>) -> Result<T> {
    if v_pred.shape() != sample.target_v.shape() {
        return Err(Error::shape("fm_loss", v_pred.shape(), sample.target_v.shape()));
    }
    let n = T::from_usize(v_pred.len()).unwrap();
    let s: T = v_pred
        .data()
        .iter()
        .zip(sample.target_v.data())
        .map(|(&a, &b)| (a - b) * (a - b))
        .sum();
    Ok(s / n)
}

/// Tape form of [`fm_loss`]; the target is a constant.
pub fn fm_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, v_pred: Var, sample: &FlowSample<T>) -> Result<Var> {
    let target = tape.constant(sample.target_v.clone());
    tape.mse(v_pred, target)
}

/// `v_uncond + s·(v_cond − v_uncond)`; `s = 1` and `s = 0` return the
/// corresponding input exactly.
pub fn cfg_combine<T: Scalar>(v_cond: &Tensor<T>, v_uncond: &Tensor<T>, s: T) -> Result<Tensor<T>> {
    if v_cond.shape() != v_uncond.shape() {
        return Err(Error::shape("cfg_combine", v_cond.shape(), v_uncond.shape()));
    }
    if s == T::one() {
        return Ok(v_cond.clone());
    }
    if s == T::zero() {
        return Ok(v_uncond.clone());
    }
    v_cond.zip_map(v_uncond, |c, u| u + s * (c - u))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Euler,
    Heun,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub scheme: Scheme,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_STEPS,
            guidance: DEFAULT_GUIDANCE,
            scheme: Scheme::Euler,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler.steps must be at least 1".into()));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Config("sampler.guidance must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// A velocity field with conditional and unconditional evaluations.
pub trait VelocityField<T: Scalar> {
    fn cond(&self, x: &Tensor<T>, t: T) -> Result<Tensor<T>>;

    fn uncond(&self, x: &Tensor<T>, t: T) -> Result<Tensor<T>> {
        self.cond(x, t)
    }
}

impl<T: Scalar, F: Fn(&Tensor<T>, T) -> Result<Tensor<T>>> VelocityField<T> for F {
    fn cond(&self, x: &Tensor<T>, t: T) -> Result<Tensor<T>> {
        self(x, t)
    }
}

fn guided<T: Scalar>(f: &impl VelocityField<T>, x: &Tensor<T>, t: T, s: T) -> Result<Tensor<T>> {
    if s == T::one() {
        return f.cond(x, t);
    }
    if s == T::zero() {
        return f.uncond(x, t);
    }
    cfg_combine(&f.cond(x, t)?, &f.uncond(x, t)?, s)
}

/// Integrates `dx/dt = v` from `x0` at `t = 0` to `t = 1`.
pub fn integrate<T: Scalar>(f: &impl VelocityField<T>, x0: Tensor<T>, cfg: &SamplerConfig) -> Result<Tensor<T>> {
    cfg.validate()?;
    let s = T::c(cfg.guidance);
    let n = cfg.steps;
    let dt = T::one() / T::from_usize(n).unwrap();
    let mut x = x0;
    for step in 0..n {
        let t = T::from_usize(step).unwrap() * dt;
        let v = guided(f, &x, t, s)?;
        x = match cfg.scheme {
            Scheme::Euler => x.zip_map(&v, |a, b| a + dt * b)?,
            Scheme::Heun => {
                let pred = x.zip_map(&v, |a, b| a + dt * b)?;
                let t1 = T::from_usize(step + 1).unwrap() * dt;
                let v1 = guided(f, &pred, t1, s)?;
                let avg = v.zip_map(&v1, |a, b| (a + b) * T::c(0.5))?;
                x.zip_map(&avg, |a, b| a + dt * b)?
            }
        };
        if !x.all_finite() {
            return Err(Error::NonFiniteState(step));
        }
    }
    Ok(x)
}

/// Model conditioned on adapted text, with empty streams for the
/// unconditional branch.
pub struct ConditionedModel<'a, T> {
    pub model: &'a Model<T>,
    pub grid: (usize, usize),
    pub tau_a: TextEmbedding<T>,
    pub tau_b: TextEmbedding<T>,
}

impl<T: Scalar> ConditionedModel<'_, T> {
    fn latent(&self, x: &Tensor<T>) -> LatentImage<T> {
        LatentImage {
            tokens: x.clone(),
            grid_h: self.grid.0,
            grid_w: self.grid.1,
            patch: self.model.config.patch,
            channels: 3,
        }
    }
}

impl<T: Scalar> VelocityField<T> for ConditionedModel<'_, T> {
    fn cond(&self, x: &Tensor<T>, t: T) -> Result<Tensor<T>> {
        self.model.forward_velocity(&self.latent(x), &self.tau_a, &self.tau_b, t)
    }

    fn uncond(&self, x: &Tensor<T>, t: T) -> Result<Tensor<T>> {
        let d = self.model.config.d_model;
        self.model.forward_velocity(
            &self.latent(x),
            &TextEmbedding::empty(Language::A, d),
            &TextEmbedding::empty(Language::B, d),
            t,
        )
    }
}

/// Generates one latent image of side `resolution` from adapted conditions.
pub fn sample<T: Scalar>(
    model: &Model<T>,
    tau_a: &TextEmbedding<T>,
    tau_b: &TextEmbedding<T>,
    resolution: usize,
    cfg: &SamplerConfig,
) -> Result<LatentImage<T>> {
    let p = model.config.patch;
    if resolution == 0 || resolution % p != 0 {
        return Err(Error::shape("sample", &[resolution], &[p]));
    }
    if tau_a.is_empty() && tau_b.is_empty() && cfg.guidance != 0.0 {
        return Err(Error::Config("sampling needs at least one non-empty condition".into()));
    }
    let g = resolution / p;
    let field = ConditionedModel {
        model,
        grid: (g, g),
        tau_a: tau_a.clone(),
        tau_b: tau_b.clone(),
    };
    let x0 = noise(&[g * g, model.config.patch_dim()], cfg.seed);
    let x = integrate(&field, x0, cfg)?;
    Ok(field.latent(&x))
}
