//! Two-dimensional flow-matching toy: a small MLP velocity field trained
//! on a two-Gaussian mixture with the same interpolant, loss, optimizer and
//! sampler as the image model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalbench::{median_bandwidth, mmd2};
use crate::flowmatch::{integrate, make_flow_sample_with, noise, SamplerConfig};
use crate::layers::linear;
use crate::numerics::{AdamWConfig, OptimizerState, ParamUpdate, Tape, Tensor, Var};
use crate::params::{Bound, Init, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    /// Mode centres are `(±separation / 2, 0)`.
    pub separation: f64,
    pub mode_std: f64,
    pub hidden: usize,
    pub time_dim: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            separation: 4.0,
            mode_std: 1.0,
            hidden: 128,
            time_dim: 16,
            steps: 3000,
            batch_size: 1024,
            lr: 3e-4,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mode_std > 0.0) || self.hidden == 0 || self.batch_size == 0 || self.time_dim < 2 {
            return Err(Error::Config("toy: mode_std, hidden, batch_size and time_dim must be positive".into()));
        }
        Ok(())
    }
}

/// `n` points from the equal-weight two-Gaussian mixture.
pub fn two_gaussians<T: Scalar>(cfg: &ToyConfig, n: usize, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        let a: f64 = rng.sample(StandardNormal);
        let b: f64 = rng.sample(StandardNormal);
        data.push(T::c(sign * cfg.separation / 2.0 + cfg.mode_std * a));
        data.push(T::c(cfg.mode_std * b));
    }
    Tensor::new(&[n, 2], data).expect("two columns")
}

/// Velocity MLP `[x, emb(t)] -> 2`.
#[derive(Clone, Debug)]
pub struct ToyField<T> {
    pub config: ToyConfig,
    pub params: ParamStore<T>,
}

impl<T: Scalar> ToyField<T> {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let (h, i) = (config.hidden, 2 + config.time_dim);
        let mut params = ParamStore::new();
        for (name, fan_in, fan_out) in [("fc1", i, h), ("fc2", h, h), ("fc3", h, 2)] {
            params.init(config.seed, &format!("{name}.w"), &[fan_in, fan_out], Init::Normal(1.0 / (fan_in as f64).sqrt()));
            params.init(config.seed, &format!("{name}.b"), &[1, fan_out], Init::Zeros);
        }
        Ok(Self { config, params })
    }

    fn on_tape(&self, tape: &mut Tape<T>, p: &Bound, x: Var, t: &[f64]) -> Result<Var> {
        let emb = tape.constant(time_features(t, self.config.time_dim));
        let inp = tape.concat_cols(&[x, emb])?;
        let h = linear(tape, p, inp, "fc1")?;
        let h = tape.gelu(h);
        let h = linear(tape, p, h, "fc2")?;
        let h = tape.gelu(h);
        linear(tape, p, h, "fc3")
    }

    /// Velocity at `x: [n, 2]`, all rows at time `t`.
    pub fn velocity(&self, x: &Tensor<T>, t: T) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let xv = tape.constant(x.clone());
        let ts = vec![t.as_f64(); x.rows()];
        let v = self.on_tape(&mut tape, &p, xv, &ts)?;
        Ok(tape.value(v).clone())
    }

    /// Trains with an independent time per row; returns the loss per step.
    pub fn train(&mut self) -> Result<Vec<f64>> {
        let cfg = self.config.clone();
        let mut opt = OptimizerState::new(AdamWConfig {
            lr: cfg.lr,
            ..AdamWConfig::default()
        });
        let mut losses = Vec::with_capacity(cfg.steps as usize);
        for step in 0..cfg.steps {
            let base = cfg.seed.wrapping_mul(1_000_003).wrapping_add(step);
            let x1 = two_gaussians::<T>(&cfg, cfg.batch_size, base);
            let eps = noise::<T>(&[cfg.batch_size, 2], base ^ 0xA5A5_A5A5);
            let mut rng = ChaCha8Rng::seed_from_u64(base ^ 0x5A5A_5A5A);
            let ts: Vec<f64> = (0..cfg.batch_size).map(|_| rng.gen::<f64>()).collect();
            let (mut xt, mut target) = (Vec::new(), Vec::new());
            for (i, &t) in ts.iter().enumerate() {
                let row = |m: &Tensor<T>| Tensor::new(&[1, 2], m.row(i).to_vec()).expect("row");
                let fs = make_flow_sample_with(&row(&x1), row(&eps), T::c(t))?;
                xt.extend_from_slice(fs.xt.data());
                target.extend_from_slice(fs.target_v.data());
            }
            let mut tape = Tape::new();
            let p = self.params.bind(&mut tape, |_| true);
            let xv = tape.constant(Tensor::new(&[cfg.batch_size, 2], xt)?);
            let tv = tape.constant(Tensor::new(&[cfg.batch_size, 2], target)?);
            let v = self.on_tape(&mut tape, &p, xv, &ts)?;
            let loss = tape.mse(v, tv)?;
            losses.push(tape.scalar(loss).as_f64());
            tape.backward(loss)?;
            let grads: Vec<Vec<T>> = self
                .params
                .iter()
                .map(|q| tape.grad(p.get(&q.name).expect("bound")).expect("trainable").to_vec())
                .collect();
            let mut updates: Vec<ParamUpdate<T>> = self
                .params
                .iter_mut()
                .zip(&grads)
                .map(|(q, g)| ParamUpdate {
                    name: &q.name,
                    value: &mut q.value,
                    grad: g,
                })
                .collect();
            opt.step(&mut updates)?;
        }
        Ok(losses)
    }

    /// `n` samples by integrating from standard-normal noise.
    pub fn sample(&self, n: usize, seed: u64, sampler: &SamplerConfig) -> Result<Tensor<T>> {
        let x0 = noise::<T>(&[n, 2], seed);
        integrate(&|x: &Tensor<T>, t: T| self.velocity(x, t), x0, sampler)
    }
}

/// `[sin, cos](π·k·t / 2)` for `k = 1..=dim/2`; smooth on `[0, 1]`.
fn time_features<T: Scalar>(t: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[t.len(), dim], |i| {
        let (t, j) = (t[i / dim], i % dim);
        let a = std::f64::consts::FRAC_PI_2 * ((j % half) + 1) as f64 * t;
        T::c(if j < half { a.sin() } else { a.cos() })
    })
}

/// Rows of an `[n, d]` tensor as `f64` vectors.
pub fn rows_f64<T: Scalar>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..x.rows()).map(|i| x.row(i).iter().map(|v| v.as_f64()).collect()).collect()
}

/// Mean MMD² over `reps` replicates of generated-vs-true and
/// true-vs-true sets of `n` points each.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MmdComparison {
    pub generated: f64,
    pub reference: f64,
}

impl MmdComparison {
    pub fn ratio(&self) -> f64 {
        self.generated / self.reference
    }
}

pub fn compare_to_truth<T: Scalar>(
    field: &ToyField<T>,
    n: usize,
    reps: u64,
    seed: u64,
    sampler: &SamplerConfig,
) -> Result<MmdComparison> {
    if n < 2 || reps == 0 {
        return Err(Error::Config("toy comparison needs n >= 2 and reps >= 1".into()));
    }
    let cfg = &field.config;
    let (mut g, mut r) = (0.0, 0.0);
    for k in 0..reps {
        // Offset keeps evaluation draws away from the training seeds.
        let s = (0x7E57u64 << 40) ^ seed.wrapping_mul(0x1000).wrapping_add(3 * k);
        let gen = rows_f64(&field.sample(n, s, sampler)?);
        let a = rows_f64(&two_gaussians::<f64>(cfg, n, s + 1));
        let b = rows_f64(&two_gaussians::<f64>(cfg, n, s + 2));
        let bw = median_bandwidth(&a);
        g += mmd2(&gen, &a, bw);
        r += mmd2(&b, &a, bw);
    }
    Ok(MmdComparison {
        generated: g / reps as f64,
        reference: r / reps as f64,
    })
}
