//! Three-phase schedule: stage 0 pretrains the backbone on A captions,
//! stage 1 trains the B branch on a language mix with the alignment loss,
//! stage 2 fine-tunes it on B captions only with a growing resolution.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignloss::{gate, inter_loss_on_tape, pool_loss_on_tape, AlignmentConfig, LossReport};
use crate::checkpoint::{Checkpoint, Progress};
use crate::backbone::{image_to_latent, is_clab_param, ClabMode, Model};
use crate::error::{Error, Result};
use crate::flowmatch::{fm_loss_on_tape, make_flow_sample};
use crate::numerics::{AdamWConfig, OptimizerState, ParamUpdate, Tape, Tensor, Var};
use crate::params::Provenance;
use crate::scalar::Scalar;
use crate::synthdata::{caption_pair, check_resolution, render, sample_scene_with, LengthMode, Scene};
use crate::textcond::{adapt_on_tape, adapter_prefix, encoder_prefix, Caption, Language};

/// Per-stage training settings. `None` fields take the stage default, see
/// [`TrainConfig::resolved`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Default 3000 / 2000 / 1000 for stages 0 / 1 / 2.
    pub steps: Option<u64>,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Default `[16]`, or `[16, 32]` in stage 2.
    pub resolutions: Option<Vec<usize>>,
    /// Steps at which the next resolution starts; default splits evenly.
    pub resolution_steps: Option<Vec<u64>>,
    /// Fraction of B captions in stage 1.
    pub language_mix: f64,
    pub cond_dropout: f64,
    /// Probability of the long caption grammar.
    pub long_caption_prob: f64,
    /// Whether sampled scenes may carry a motif. Default true in stages 0
    /// and 2, false in stage 1.
    pub allow_motif: Option<bool>,
    /// Periodic checkpoint interval in steps; 0 disables.
    pub checkpoint_every: u64,
    pub alignment: AlignmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            steps: None,
            lr: 1e-3,
            weight_decay: 0.0,
            seed: 0,
            resolutions: None,
            resolution_steps: None,
            language_mix: 0.6,
            cond_dropout: 0.1,
            long_caption_prob: 0.5,
            allow_motif: None,
            checkpoint_every: 0,
            alignment: AlignmentConfig::default(),
        }
    }
}

/// Learning rate reported for the full-scale setting.
pub const PAPER_LR: f64 = 1e-5;

/// [`TrainConfig`] with every stage default filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrainConfig {
    pub stage: u8,
    pub batch_size: usize,
    pub steps: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub resolutions: Vec<usize>,
    pub resolution_steps: Vec<u64>,
    pub language_mix: f64,
    pub cond_dropout: f64,
    pub long_caption_prob: f64,
    pub allow_motif: bool,
    pub checkpoint_every: u64,
    pub alignment: AlignmentConfig,
}

impl TrainConfig {
    pub fn resolved(&self, stage: u8) -> Result<ResolvedTrainConfig> {
        if stage > 2 {
            return Err(Error::Config(format!("stage must be 0, 1 or 2, got {stage}")));
        }
        let steps = self.steps.unwrap_or([3000, 2000, 1000][stage as usize]);
        let resolutions = self
            .resolutions
            .clone()
            .unwrap_or_else(|| if stage == 2 { vec![16, 32] } else { vec![16] });
        let resolution_steps = match &self.resolution_steps {
            Some(b) => b.clone(),
            None => {
                let k = resolutions.len() as u64;
                (1..k).map(|i| steps * i / k).collect()
            }
        };
        let r = ResolvedTrainConfig {
            stage,
            batch_size: self.batch_size,
            steps,
            lr: self.lr,
            weight_decay: self.weight_decay,
            seed: self.seed,
            resolutions,
            resolution_steps,
            language_mix: self.language_mix,
            cond_dropout: self.cond_dropout,
            long_caption_prob: self.long_caption_prob,
            allow_motif: self.allow_motif.unwrap_or(stage != 1),
            checkpoint_every: self.checkpoint_every,
            alignment: self.alignment.clone(),
        };
        r.validate()?;
        Ok(r)
    }
}

impl ResolvedTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if self.resolutions.is_empty() {
            return bad("train.resolutions must not be empty".into());
        }
        for r in &self.resolutions {
            check_resolution(*r).map_err(|_| Error::Config(format!("train.resolutions: unsupported resolution {r}")))?;
        }
        if self.resolutions.windows(2).any(|w| w[0] >= w[1]) {
            return bad("train.resolutions must be strictly increasing".into());
        }
        if self.resolution_steps.len() + 1 != self.resolutions.len()
            || self.resolution_steps.windows(2).any(|w| w[0] >= w[1])
        {
            return bad("train.resolution_steps must be increasing with one entry per resolution change".into());
        }
        if !(0.0..=1.0).contains(&self.language_mix) {
            return bad("train.language_mix must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return bad("train.cond_dropout must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.long_caption_prob) {
            return bad("train.long_caption_prob must lie in [0, 1]".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay < 0.0 {
            return bad("train.lr must be positive and train.weight_decay non-negative".into());
        }
        self.alignment.validate()
    }

    pub fn resolution_at(&self, step: u64) -> usize {
        let k = self.resolution_steps.iter().filter(|&&b| step >= b).count();
        self.resolutions[k]
    }

    pub fn adam(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Which parameters a stage updates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FreezePolicy {
    pub stage: u8,
}

impl FreezePolicy {
    pub fn trainable(&self, name: &str) -> bool {
        let enc = name.starts_with(&format!("{}.", encoder_prefix(Language::A)))
            || name.starts_with(&format!("{}.", encoder_prefix(Language::B)));
        let adapter_b = name.starts_with(&format!("{}.", adapter_prefix(Language::B)));
        if self.stage == 0 {
            !enc && !adapter_b && !is_clab_param(name)
        } else {
            adapter_b || is_clab_param(name)
        }
    }

    pub fn trainable_names<T: Scalar>(&self, model: &Model<T>) -> Vec<String> {
        model
            .params
            .iter()
            .filter(|p| self.trainable(&p.name))
            .map(|p| p.name.clone())
            .collect()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: u64,
    pub stage: u8,
    pub l_gen: f64,
    pub l_p: f64,
    pub l_inter: f64,
    pub l_ra: f64,
    pub gate_fired: bool,
    pub lr: f64,
    pub resolution: usize,
}

/// One training example before rendering.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchItem {
    pub scene: Scene,
    pub language: Language,
    pub caption: Caption,
    /// A counterpart of a B caption, when one exists.
    pub counterpart: Option<Caption>,
    pub t: f64,
    pub noise_seed: u64,
    /// Both text streams emptied (unconditional example).
    pub dropped: bool,
    pub resolution: usize,
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        let mut z = h ^ p.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

/// Deterministic batch for `step`, independent of earlier steps.
pub fn make_batch(cfg: &ResolvedTrainConfig, step: u64) -> Vec<BatchItem> {
    let res = cfg.resolution_at(step);
    (0..cfg.batch_size)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, cfg.stage as u64, step, i as u64]));
            let language = match cfg.stage {
                0 => Language::A,
                1 => {
                    if rng.gen::<f64>() < cfg.language_mix {
                        Language::B
                    } else {
                        Language::A
                    }
                }
                _ => Language::B,
            };
            let scene = sample_scene_with(&mut rng, cfg.allow_motif);
            let mode = if rng.gen::<f64>() < cfg.long_caption_prob {
                LengthMode::Long
            } else {
                LengthMode::Short
            };
            let t = rng.gen::<f64>();
            let dropped = rng.gen::<f64>() < cfg.cond_dropout;
            let noise_seed = rng.gen::<u64>();
            let (caption, counterpart) = match language {
                Language::A => (caption_pair(&scene, mode, true).0.expect("forced counterpart"), None),
                Language::B => {
                    let (a, b) = caption_pair(&scene, mode, false);
                    (b, a)
                }
            };
            BatchItem {
                scene,
                language,
                caption,
                counterpart,
                t,
                noise_seed,
                dropped,
                resolution: res,
            }
        })
        .collect()
}

/// Gradients of one batch for the trainable set.
pub struct BatchGradients<T> {
    pub report: LossReport,
    pub grads: Vec<(String, Vec<T>)>,
    /// B examples whose alignment term was skipped for lack of a counterpart.
    pub skipped_alignment: usize,
}

/// Model plus optimizer for one stage.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub config: ResolvedTrainConfig,
    /// Steps completed.
    pub step: u64,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(mut model: Model<T>, config: ResolvedTrainConfig) -> Result<Self> {
        config.validate()?;
        match (config.stage, model.config.clab) {
            (0, ClabMode::Off) => {}
            (0, _) => return Err(Error::Config("stage 0 trains the backbone without the B branch".into())),
            (_, ClabMode::Off) => return Err(Error::Config(format!("stage {} needs the B branch", config.stage))),
            _ => {}
        }
        let prov = Provenance::for_stage(config.stage);
        let policy = FreezePolicy { stage: config.stage };
        model.stamp(|n| policy.trainable(n), prov);
        let optimizer = OptimizerState::new(config.adam());
        Ok(Self {
            model,
            optimizer,
            config,
            step: 0,
        })
    }

    /// Continues a run from a periodic checkpoint of the same stage.
    pub fn resume(ck: Checkpoint<T>, config: ResolvedTrainConfig) -> Result<Self> {
        let progress = ck
            .progress
            .ok_or_else(|| Error::Checkpoint("checkpoint has no training progress".into()))?;
        if progress.stage != config.stage {
            return Err(Error::Checkpoint(format!(
                "checkpoint is from stage {}, resuming stage {}",
                progress.stage, config.stage
            )));
        }
        let optimizer = ck
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let mut t = Self::new(ck.model, config)?;
        t.optimizer = optimizer;
        t.optimizer.config = t.config.adam();
        t.step = progress.step;
        Ok(t)
    }

    /// Snapshot including optimizer state and progress.
    pub fn checkpoint(&self) -> Checkpoint<T> {
        let policy = self.policy();
        let mut ck = Checkpoint::new(self.model.clone(), |n| !policy.trainable(n));
        ck.optimizer = Some(self.optimizer.clone());
        ck.progress = Some(Progress {
            stage: self.config.stage,
            step: self.step,
        });
        ck
    }

    pub fn policy(&self) -> FreezePolicy {
        FreezePolicy { stage: self.config.stage }
    }

    /// Loss and trainable-set gradients of `batch` without updating.
    pub fn compute_gradients(&self, batch: &[BatchItem]) -> Result<BatchGradients<T>> {
        if batch.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let model = &self.model;
        let policy = self.policy();
        let align = &self.config.alignment;
        let use_align = self.config.stage > 0 && align.is_active();
        let d = model.config.d_model;
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, |n| policy.trainable(n));
        let mut gen = Vec::with_capacity(batch.len());
        let (mut lps, mut lis) = (Vec::new(), Vec::new());
        let mut skipped = 0;
        for item in batch {
            let img = render(&item.scene, item.resolution)?;
            let lat = image_to_latent::<T>(&img, model.config.patch)?;
            let fs = make_flow_sample(&lat.tokens, item.noise_seed, T::c(item.t))?;
            let xv = tape.constant(fs.xt.clone());
            let empty = tape.constant(Tensor::zeros(&[0, d]));
            let features = model.encode(&item.caption)?;
            let tau = adapt_on_tape(&mut tape, &p, &features)?;
            let (ta, tb) = match (item.dropped, item.language) {
                (true, _) => (empty, empty),
                (false, Language::A) => (tau, empty),
                (false, Language::B) => (empty, tau),
            };
            let v = model.velocity_on_tape(&mut tape, &p, xv, (lat.grid_h, lat.grid_w), ta, tb, fs.t)?;
            gen.push(fm_loss_on_tape(&mut tape, v, &fs)?);
            if use_align && item.language == Language::B {
                match &item.counterpart {
                    Some(a) => {
                        let aux = model.condition(a)?;
                        if align.use_pool {
                            lps.push(pool_loss_on_tape(&mut tape, tau, &aux.tokens)?);
                        }
                        if align.use_inter {
                            lis.push(inter_loss_on_tape(&mut tape, tau, &aux.tokens)?);
                        }
                    }
                    None => skipped += 1,
                }
            }
        }
        let l_gen = mean_of(&mut tape, &gen)?.expect("non-empty batch");
        let l_p = mean_of(&mut tape, &lps)?;
        let l_inter = mean_of(&mut tape, &lis)?;
        let val = |tape: &Tape<T>, v: Option<Var>| v.map_or(0.0, |v| tape.scalar(v).as_f64());
        let (lp_v, li_v) = (val(&tape, l_p), val(&tape, l_inter));
        let aligned = l_p.is_some() || l_inter.is_some();
        let g = if aligned {
            gate(lp_v, li_v, align)
        } else {
            gate(0.0, 0.0, &AlignmentConfig::disabled())
        };
        let mut total = l_gen;
        let mut l_ra = 0.0;
        if let (true, Some(v)) = (g.pool, l_p) {
            total = tape.add(total, v)?;
            l_ra += lp_v;
        }
        if let (true, Some(v)) = (g.inter, l_inter) {
            total = tape.add(total, v)?;
            l_ra += li_v;
        }
        let gen_v = val(&tape, Some(l_gen));
        tape.backward(total)?;
        let grads = model
            .params
            .iter()
            .filter(|q| policy.trainable(&q.name))
            .map(|q| {
                let var = p.get(&q.name)?;
                let g = tape.grad(var).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); q.value.len()]);
                Ok((q.name.clone(), g))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(BatchGradients {
            report: LossReport {
                l_gen: gen_v,
                l_p: lp_v,
                l_inter: li_v,
                l_ra,
                total: gen_v + l_ra,
                gate_fired: g.fired,
            },
            grads,
            skipped_alignment: skipped,
        })
    }

    /// One optimizer step on `batch`.
    pub fn step_on(&mut self, batch: &[BatchItem]) -> Result<LossReport> {
        let bg = self.compute_gradients(batch)?;
        let mut updates: Vec<ParamUpdate<T>> = Vec::with_capacity(bg.grads.len());
        let mut grads = bg.grads.iter();
        let policy = self.policy();
        for q in self.model.params.iter_mut() {
            if !policy.trainable(&q.name) {
                continue;
            }
            let (name, g) = grads.next().expect("gradient per trainable parameter");
            debug_assert_eq!(name, &q.name);
            updates.push(ParamUpdate {
                name: &q.name,
                value: &mut q.value,
                grad: g,
            });
        }
        self.optimizer.step(&mut updates)?;
        self.step += 1;
        Ok(bg.report)
    }

    /// Generates and trains on the batch for the current step.
    pub fn train_step(&mut self) -> Result<MetricRecord> {
        let step = self.step;
        let batch = make_batch(&self.config, step);
        let r = match self.config.stage {
            0 => self.step_on(&batch)?,
            1 => stage1_step(self, &batch)?,
            _ => stage2_step(self, &batch)?,
        };
        Ok(MetricRecord {
            step,
            stage: self.config.stage,
            l_gen: r.l_gen,
            l_p: r.l_p,
            l_inter: r.l_inter,
            l_ra: r.l_ra,
            gate_fired: r.gate_fired,
            lr: self.config.lr,
            resolution: self.config.resolution_at(step),
        })
    }

    /// Trains until the step budget is spent (or `stop_after` is reached);
    /// `on_step` sees every record and may checkpoint.
    pub fn run(&mut self, stop_after: Option<u64>, mut on_step: impl FnMut(&MetricRecord, &Self) -> Result<()>) -> Result<()> {
        let end = stop_after.map_or(self.config.steps, |s| s.min(self.config.steps));
        while self.step < end {
            let rec = self.train_step()?;
            on_step(&rec, self)?;
        }
        Ok(())
    }
}

fn mean_of<T: Scalar>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = xs.split_first() else {
        return Ok(None);
    };
    let mut s = first;
    for &x in rest {
        s = tape.add(s, x)?;
    }
    Ok(Some(tape.scale(s, T::one() / T::from_usize(xs.len()).unwrap())))
}

/// Stage-1 step: A examples condition the backbone, B examples drive the
/// branch with the A stream empty.
pub fn stage1_step<T: Scalar>(trainer: &mut Trainer<T>, batch: &[BatchItem]) -> Result<LossReport> {
    if trainer.config.stage != 1 {
        return Err(Error::Config("stage1_step on a non-stage-1 trainer".into()));
    }
    trainer.step_on(batch)
}

/// Stage-2 step: B examples only.
pub fn stage2_step<T: Scalar>(trainer: &mut Trainer<T>, batch: &[BatchItem]) -> Result<LossReport> {
    if trainer.config.stage != 2 {
        return Err(Error::Config("stage2_step on a non-stage-2 trainer".into()));
    }
    if let Some(item) = batch.iter().find(|i| i.language != Language::B) {
        return Err(Error::Config(format!(
            "stage 2 batches are B-only, found an A caption for scene class {}",
            item.scene.class_index()
        )));
    }
    trainer.step_on(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_per_stage() {
        let c = TrainConfig::default();
        let r0 = c.resolved(0).unwrap();
        assert_eq!((r0.steps, r0.resolutions.clone(), r0.allow_motif), (3000, vec![16], true));
        let r1 = c.resolved(1).unwrap();
        assert!(!r1.allow_motif);
        let r2 = c.resolved(2).unwrap();
        assert_eq!(r2.resolutions, vec![16, 32]);
        assert_eq!(r2.resolution_steps, vec![500]);
        assert_eq!(r2.resolution_at(0), 16);
        assert_eq!(r2.resolution_at(499), 16);
        assert_eq!(r2.resolution_at(500), 32);
    }

    #[test]
    fn schedule_must_increase() {
        let c = TrainConfig {
            resolutions: Some(vec![32, 16]),
            ..Default::default()
        };
        assert!(c.resolved(2).is_err());
        let c = TrainConfig {
            cond_dropout: 1.0,
            ..Default::default()
        };
        assert!(c.resolved(1).is_err());
    }

    #[test]
    fn batches_are_deterministic_and_stage_typed() {
        let r1 = TrainConfig::default().resolved(1).unwrap();
        assert_eq!(make_batch(&r1, 4), make_batch(&r1, 4));
        assert_ne!(make_batch(&r1, 4), make_batch(&r1, 5));
        let r2 = TrainConfig::default().resolved(2).unwrap();
        assert!(make_batch(&r2, 0).iter().all(|i| i.language == Language::B));
        let r0 = TrainConfig::default().resolved(0).unwrap();
        assert!(make_batch(&r0, 0).iter().all(|i| i.language == Language::A));
    }

    #[test]
    fn policy_partitions() {
        let s1 = FreezePolicy { stage: 1 };
        assert!(s1.trainable("clab.double.0.k.w"));
        assert!(s1.trainable("adapter_b.fc1.w"));
        assert!(!s1.trainable("adapter_a.fc1.w"));
        assert!(!s1.trainable("double.0.img.qkv.w"));
        let s0 = FreezePolicy { stage: 0 };
        assert!(s0.trainable("adapter_a.fc1.w"));
        assert!(!s0.trainable("enc_a.embed"));
        assert!(!s0.trainable("adapter_b.fc1.w"));
    }
}
