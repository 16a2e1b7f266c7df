//! Run configuration: one TOML file with a section per component.
//!
//! Every key has a default, unknown keys are rejected, and each command
//! writes the fully resolved configuration as `config.toml` into its
//! output directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use clab::backbone::ModelConfig;
use clab::evalbench::EvalConfig;
use clab::flowmatch::SamplerConfig;
use clab::synthdata::LengthMode;
use clab::toy2d::ToyConfig;
use clab::trainer::TrainConfig;
use clab::{Error, Precision, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// When set, replaces the seed of every section (and the model init seed).
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub precision: Precision,
    pub out: PathBuf,
    pub model: ModelConfig,
    pub stage0: TrainConfig,
    pub stage1: TrainConfig,
    pub stage2: TrainConfig,
    /// Sampler for `sample`; `eval` uses `eval.sampler`.
    pub sampler: SamplerConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
    pub datagen: DatagenConfig,
    pub gradcheck: GradcheckConfig,
    pub toy: ToyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            precision: Precision::F32,
            out: PathBuf::from("runs/default"),
            model: ModelConfig::default(),
            stage0: TrainConfig::default(),
            stage1: TrainConfig::default(),
            stage2: TrainConfig::default(),
            sampler: SamplerConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
            datagen: DatagenConfig::default(),
            gradcheck: GradcheckConfig::default(),
            toy: ToyConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    /// Arm names from the standard grid: no_align, pool, pool_inter, full,
    /// query_update.
    pub arms: Vec<String>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            arms: clab::evalbench::standard_arms().into_iter().map(|a| a.name).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub name: String,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatagenConfig {
    /// Split `i` is drawn with seed `seed + i`.
    pub seed: u64,
    pub splits: Vec<SplitSpec>,
    pub resolution: usize,
    pub allow_motif: bool,
    pub length_mode: LengthMode,
}

impl Default for DatagenConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            splits: vec![
                SplitSpec { name: "train".into(), count: 256 },
                SplitSpec { name: "test".into(), count: 64 },
            ],
            resolution: 16,
            allow_motif: true,
            length_mode: LengthMode::Short,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub primitive_tol: f64,
    pub end_to_end_tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            primitive_tol: 1e-5,
            end_to_end_tol: 1e-4,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string() + &span_hint(&e)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies the seed override and fills every stage default, then
    /// validates all sections.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        if let Some(s) = c.seed {
            c.model.init_seed = s;
            for st in [&mut c.stage0, &mut c.stage1, &mut c.stage2] {
                st.seed = s;
            }
            c.sampler.seed = s;
            c.eval.seed = s;
            c.datagen.seed = s;
            c.gradcheck.seed = s;
            c.toy.seed = s;
        }
        for (stage, st) in [&mut c.stage0, &mut c.stage1, &mut c.stage2].into_iter().enumerate() {
            let r = st.resolved(stage as u8).map_err(|e| prefix(e, &format!("stage{stage}")))?;
            st.steps = Some(r.steps);
            st.resolutions = Some(r.resolutions);
            st.resolution_steps = Some(r.resolution_steps);
            st.allow_motif = Some(r.allow_motif);
        }
        c.model.validate().map_err(|e| prefix(e, "model"))?;
        c.sampler.validate().map_err(|e| prefix(e, "sampler"))?;
        c.eval.validate().map_err(|e| prefix(e, "eval"))?;
        c.toy.validate().map_err(|e| prefix(e, "toy"))?;
        let known: Vec<String> = clab::evalbench::standard_arms().into_iter().map(|a| a.name).collect();
        if c.ablate.arms.is_empty() {
            return Err(Error::Config("ablate.arms must not be empty".into()));
        }
        if let Some(bad) = c.ablate.arms.iter().find(|a| !known.contains(a)) {
            return Err(Error::Config(format!("ablate.arms: unknown arm {bad:?} (known: {})", known.join(", "))));
        }
        clab::synthdata::check_resolution(c.datagen.resolution).map_err(|e| prefix(e, "datagen.resolution"))?;
        if !(c.gradcheck.primitive_tol > 0.0 && c.gradcheck.end_to_end_tol > 0.0) {
            return Err(Error::Config("gradcheck tolerances must be positive".into()));
        }
        Ok(c)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.toml"), self.to_toml())?;
        Ok(())
    }
}

fn prefix(e: Error, section: &str) -> Error {
    match e {
        Error::Config(m) => match m.strip_prefix("train.") {
            Some(rest) => Error::Config(format!("{section}.{rest}")),
            None => Error::Config(format!("{section}: {m}")),
        },
        other => other,
    }
}

fn span_hint(e: &toml::de::Error) -> String {
    e.span().map_or(String::new(), |s| format!(" (at byte {})", s.start))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolved_round_trips_through_toml() {
        let c = RunConfig::default().resolved().unwrap();
        let back = RunConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.resolved().unwrap(), c);
        assert_eq!(c.stage2.resolutions, Some(vec![16, 32]));
    }

    #[test]
    fn unknown_keys_are_named() {
        let e = RunConfig::from_toml("[stage1]\nlearning_rate = 0.1\n").unwrap_err();
        assert!(e.to_string().contains("learning_rate"), "{e}");
        let e = RunConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(e.to_string().contains("bogus"), "{e}");
    }

    #[test]
    fn seed_override_reaches_every_section() {
        let c = RunConfig { seed: Some(9), ..RunConfig::default() }.resolved().unwrap();
        assert_eq!((c.stage0.seed, c.stage2.seed, c.sampler.seed, c.eval.seed, c.model.init_seed), (9, 9, 9, 9, 9));
    }

    #[test]
    fn invalid_values_name_their_section() {
        let mut c = RunConfig::default();
        c.stage1.language_mix = 2.0;
        let e = c.resolved().unwrap_err().to_string();
        assert!(e.contains("stage1.language_mix"), "{e}");
    }
}
