//! Oracle attribute decoder, conditional accuracy, pixel-statistic MMD, and
//! the ablation harness.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignloss::AlignmentConfig;
use crate::backbone::{latent_to_image, ClabMode, Model};
use crate::error::{Error, Result};
use crate::flowmatch::{sample, SamplerConfig};
use crate::imageio::Image;
use crate::scalar::Scalar;
use crate::synthdata::{
    caption_pair, check_resolution, render, shape_mask, Color, LengthMode, Motif, Position, Scene, ShapeKind, Size,
    NUM_CLASSES,
};
use crate::textcond::{Caption, Language};
use crate::trainer::{TrainConfig, Trainer};

/// Channel maximum above which a pixel counts as shape foreground.
pub const FOREGROUND_LEVEL: f64 = 0.7;
/// Minimum IoU between the foreground and the best shape template.
pub const MIN_IOU: f64 = 0.5;
/// Fraction of foreground pixels that must carry the decoded color.
pub const MIN_COLOR_PURITY: f64 = 0.6;
/// Gray level above which a background pixel counts as pattern.
pub const MOTIF_ON_LEVEL: f64 = 0.2;
/// Background pattern coverage below which no motif is reported.
pub const MOTIF_MIN_COVERAGE: f64 = 0.1;
/// Minimum tile agreement for a motif to be reported.
pub const MOTIF_MIN_AGREEMENT: f64 = 0.75;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    UnsupportedSize,
    NoForeground,
    Color,
    Geometry,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Decoding {
    Accepted(Scene),
    Rejected(RejectReason),
}

impl Decoding {
    pub fn scene(&self) -> Option<&Scene> {
        match self {
            Decoding::Accepted(s) => Some(s),
            Decoding::Rejected(_) => None,
        }
    }
}

fn color_of(bits: [bool; 3]) -> Option<Color> {
    Color::ALL.iter().copied().find(|c| {
        let rgb = c.rgb();
        (0..3).all(|k| (rgb[k] > 0.5) == bits[k])
    })
}

fn dilate(mask: &[bool], res: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    for y in 0..res {
        for x in 0..res {
            if !mask[y * res + x] {
                continue;
            }
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < res && (ny as usize) < res {
                        out[ny as usize * res + nx as usize] = true;
                    }
                }
            }
        }
    }
    out
}

/// Inverts the renderer: foreground by channel maximum, color from the mean
/// foreground pixel, shape/position/size by best template IoU, motif by
/// tile agreement over the background away from the shape.
pub fn decode_attributes(img: &Image) -> Decoding {
    let res = img.width;
    if img.height != res || check_resolution(res).is_err() {
        return Decoding::Rejected(RejectReason::UnsupportedSize);
    }
    let px: Vec<[f64; 3]> = (0..res * res)
        .map(|i| {
            let p = img.get(i % res, i / res);
            p.map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
        })
        .collect();
    let fg: Vec<bool> = px.iter().map(|p| p.iter().cloned().fold(0.0, f64::max) >= FOREGROUND_LEVEL).collect();
    let n_fg = fg.iter().filter(|&&b| b).count();
    if n_fg == 0 {
        return Decoding::Rejected(RejectReason::NoForeground);
    }
    let mut mean = [0.0; 3];
    for (p, _) in px.iter().zip(&fg).filter(|(_, &f)| f) {
        for k in 0..3 {
            mean[k] += p[k] / n_fg as f64;
        }
    }
    let Some(color) = color_of(mean.map(|v| v > 0.5)) else {
        return Decoding::Rejected(RejectReason::Color);
    };
    let pure = px
        .iter()
        .zip(&fg)
        .filter(|(p, &f)| f && color_of(p.map(|v| v > 0.5)) == Some(color))
        .count();
    if (pure as f64) < MIN_COLOR_PURITY * n_fg as f64 {
        return Decoding::Rejected(RejectReason::Color);
    }
    let mut best = (0.0, None);
    for &shape in ShapeKind::ALL {
        for &position in Position::ALL {
            for &size in Size::ALL {
                let m = shape_mask(shape, position, size, res);
                let inter = m.iter().zip(&fg).filter(|(a, b)| **a && **b).count();
                let union = m.iter().zip(&fg).filter(|(a, b)| **a || **b).count();
                let iou = inter as f64 / union.max(1) as f64;
                if iou > best.0 {
                    best = (iou, Some((shape, position, size, m)));
                }
            }
        }
    }
    let (iou, Some((shape, position, size, template))) = best else {
        return Decoding::Rejected(RejectReason::Geometry);
    };
    if iou < MIN_IOU {
        return Decoding::Rejected(RejectReason::Geometry);
    }
    let covered: Vec<bool> = fg.iter().zip(&template).map(|(a, b)| *a || *b).collect();
    let keep_out = dilate(&covered, res);
    let bg: Vec<(usize, bool)> = (0..res * res)
        .filter(|&i| !keep_out[i])
        .map(|i| (i, px[i].iter().sum::<f64>() / 3.0 >= MOTIF_ON_LEVEL))
        .collect();
    let on = bg.iter().filter(|(_, b)| *b).count();
    let motif = if bg.is_empty() || (on as f64) < MOTIF_MIN_COVERAGE * bg.len() as f64 {
        None
    } else {
        let mut best_m = (0.0, None);
        for &m in Motif::ALL {
            let agree = bg.iter().filter(|(i, b)| m.tile(i % res, i / res) == *b).count();
            let a = agree as f64 / bg.len() as f64;
            if a > best_m.0 {
                best_m = (a, Some(m));
            }
        }
        if best_m.0 >= MOTIF_MIN_AGREEMENT {
            best_m.1
        } else {
            None
        }
    };
    Decoding::Accepted(Scene {
        shape,
        color,
        position,
        size,
        motif,
    })
}

/// Which text streams condition generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CondMode {
    A,
    B,
    Ab,
}

impl std::str::FromStr for CondMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" => Ok(CondMode::A),
            "b" => Ok(CondMode::B),
            "ab" => Ok(CondMode::Ab),
            _ => Err(Error::Config(format!("cond must be a, b or ab, got {s:?}"))),
        }
    }
}

/// One evaluation prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCase {
    pub scene: Scene,
    pub cond: CondMode,
    pub caption_a: Option<Caption>,
    pub caption_b: Option<Caption>,
}

/// Caption-balanced cases: classes cycle through a seeded permutation and
/// every `motif_every`-th case (0 = never) carries a motif, cycling through
/// all motifs.
pub fn eval_cases(cond: CondMode, n: usize, motif_every: usize, mode: LengthMode, seed: u64) -> Result<Vec<EvalCase>> {
    if cond != CondMode::B && motif_every != 0 {
        return Err(Error::Config("motifs are only expressible in B captions".into()));
    }
    let mut order: Vec<usize> = (0..NUM_CLASSES).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut k = 0;
    Ok((0..n)
        .map(|i| {
            let mut scene = Scene::from_class(order[i % NUM_CLASSES]);
            if motif_every != 0 && i % motif_every == 0 {
                scene.motif = Some(Motif::ALL[k % Motif::ALL.len()]);
                k += 1;
            }
            let (a, b) = caption_pair(&scene, mode, false);
            EvalCase {
                scene,
                cond,
                caption_a: if cond == CondMode::B { None } else { a },
                caption_b: if cond == CondMode::A { None } else { Some(b) },
            }
        })
        .collect())
}

/// Anything that produces an image for a case.
pub trait Generator {
    fn generate(&self, case: &EvalCase, resolution: usize, seed: u64) -> Result<Image>;
    fn fingerprint(&self) -> String;
}

/// Renders the captioned scene directly.
pub struct OracleGenerator;

impl Generator for OracleGenerator {
    fn generate(&self, case: &EvalCase, resolution: usize, _seed: u64) -> Result<Image> {
        render(&case.scene, resolution)
    }

    fn fingerprint(&self) -> String {
        "oracle".into()
    }
}

/// Samples a model through the flow ODE.
pub struct ModelGenerator<'a, T> {
    pub model: &'a Model<T>,
    pub sampler: SamplerConfig,
    /// Ignore the captions and sample unconditionally.
    pub unconditional: bool,
}

impl<T: Scalar> ModelGenerator<'_, T> {
    pub fn conditions(
        &self,
        case: &EvalCase,
    ) -> Result<(crate::textcond::TextEmbedding<T>, crate::textcond::TextEmbedding<T>)> {
        let m = self.model;
        let cond = |c: &Option<Caption>, lang: Language| match c {
            Some(c) if !self.unconditional => m.condition(c),
            _ => Ok(m.empty_condition(lang)),
        };
        let a = if case.cond == CondMode::B { None } else { case.caption_a.clone() };
        let b = if case.cond == CondMode::A { None } else { case.caption_b.clone() };
        Ok((cond(&a, Language::A)?, cond(&b, Language::B)?))
    }
}

impl<T: Scalar> Generator for ModelGenerator<'_, T> {
    fn generate(&self, case: &EvalCase, resolution: usize, seed: u64) -> Result<Image> {
        let (a, b) = self.conditions(case)?;
        let cfg = SamplerConfig {
            seed,
            guidance: if self.unconditional { 0.0 } else { self.sampler.guidance },
            ..self.sampler.clone()
        };
        let lat = sample(self.model, &a, &b, resolution, &cfg)?;
        latent_to_image(&lat)
    }

    fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.model.config).expect("config serializes"));
        for p in self.model.params.iter() {
            h.update(p.name.as_bytes());
            h.update(p.value.to_le_bytes());
        }
        h.update(serde_json::to_vec(&self.sampler).expect("sampler serializes"));
        h.update([self.unconditional as u8]);
        hex(&h.finalize())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Per-attribute fraction of correctly decoded samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeAccuracy {
    pub shape: f64,
    pub color: f64,
    pub position: f64,
    pub size: f64,
    /// Over cases whose caption names a motif.
    pub motif: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub cond: CondMode,
    pub samples: usize,
    pub resolution: usize,
    /// All attributes named by the caption decoded correctly.
    pub accuracy: f64,
    pub per_attribute: AttributeAccuracy,
    pub motif_samples: usize,
    pub rejection_rate: f64,
    /// Brute-force chance rate of `accuracy`.
    pub chance: f64,
    /// Brute-force chance rate of the motif attribute.
    pub motif_chance: f64,
    pub mmd2: f64,
    pub fingerprint: String,
}

/// Whether a decoded scene matches every attribute the case's caption
/// names. Motif-free captions say nothing about the background.
pub fn matches(case: &EvalCase, decoded: &Scene) -> bool {
    let s = &case.scene;
    s.shape == decoded.shape
        && s.color == decoded.color
        && s.position == decoded.position
        && s.size == decoded.size
        && (s.motif.is_none() || s.motif == decoded.motif)
}

/// `(overall, motif)` success probability of a uniform guess over the
/// outcome grid (108 classes × 8 motifs), by enumeration.
pub fn chance_rates(cases: &[EvalCase]) -> (f64, f64) {
    if cases.is_empty() {
        return (0.0, 0.0);
    }
    let outcomes: Vec<Scene> = Scene::all()
        .flat_map(|s| Motif::ALL.iter().map(move |&m| s.with_motif(Some(m))))
        .collect();
    let mut overall = 0.0;
    let (mut motif, mut n_motif) = (0.0, 0);
    for c in cases {
        let hits = outcomes.iter().filter(|o| matches(c, o)).count();
        overall += hits as f64 / outcomes.len() as f64;
        if let Some(m) = c.scene.motif {
            let mh = outcomes.iter().filter(|o| o.motif == Some(m)).count();
            motif += mh as f64 / outcomes.len() as f64;
            n_motif += 1;
        }
    }
    (
        overall / cases.len() as f64,
        if n_motif == 0 { 0.0 } else { motif / n_motif as f64 },
    )
}

/// Pixel statistics: 8×8 average-pooled grayscale plus an 8-bin histogram
/// of per-pixel binarized colors.
pub fn features(img: &Image) -> Vec<f64> {
    let (w, h) = (img.width, img.height);
    let mut f = vec![0.0; 64 + 8];
    for y in 0..h {
        for x in 0..w {
            let p = img.get(x, y).map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
            let cell = (y * 8 / h) * 8 + x * 8 / w;
            f[cell] += (p[0] + p[1] + p[2]) / 3.0;
            let bin = (p[0] > 0.5) as usize | ((p[1] > 0.5) as usize) << 1 | ((p[2] > 0.5) as usize) << 2;
            f[64 + bin] += 1.0;
        }
    }
    let per_cell = (w * h) as f64 / 64.0;
    f[..64].iter_mut().for_each(|v| *v /= per_cell);
    f[64..].iter_mut().for_each(|v| *v /= (w * h) as f64);
    f
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median pairwise Euclidean distance.
pub fn median_bandwidth(x: &[Vec<f64>]) -> f64 {
    let mut d: Vec<f64> = Vec::new();
    for i in 0..x.len() {
        for j in i + 1..x.len() {
            d.push(sq_dist(&x[i], &x[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d[d.len() / 2];
    if m > 0.0 {
        m
    } else {
        1.0
    }
}

/// Biased RBF-kernel MMD², `k(a, b) = exp(−‖a − b‖² / (2σ²))`.
pub fn mmd2(x: &[Vec<f64>], y: &[Vec<f64>], sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| (-sq_dist(a, b) / (2.0 * sigma * sigma)).exp();
    let mean_k = |p: &[Vec<f64>], q: &[Vec<f64>]| {
        let mut s = 0.0;
        for a in p {
            for b in q {
                s += k(a, b);
            }
        }
        s / (p.len() * q.len()) as f64
    };
    mean_k(x, x) + mean_k(y, y) - 2.0 * mean_k(x, y)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples: usize,
    pub resolution: usize,
    pub seed: u64,
    /// Every n-th B case carries a motif; 0 disables.
    pub motif_every: usize,
    pub length_mode: LengthMode,
    pub sampler: SamplerConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            samples: 216,
            resolution: 16,
            seed: 1,
            motif_every: 2,
            length_mode: LengthMode::Short,
            sampler: SamplerConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 100 {
            return Err(Error::Config("eval.samples must be at least 100".into()));
        }
        check_resolution(self.resolution).map_err(|e| Error::Config(format!("eval.resolution: {e}")))?;
        self.sampler.validate()
    }

    pub fn cases(&self, cond: CondMode) -> Result<Vec<EvalCase>> {
        let motif_every = if cond == CondMode::B { self.motif_every } else { 0 };
        eval_cases(cond, self.samples, motif_every, self.length_mode, self.seed)
    }
}

fn sample_seed(seed: u64, i: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Generates one image per case and grades it with the oracle decoder.
pub fn evaluate(gen: &impl Generator, cases: &[EvalCase], resolution: usize, seed: u64) -> Result<EvalReport> {
    evaluate_with(gen, cases, resolution, seed, |_, _, _, _| Ok(()))
}

/// As [`evaluate`], handing every generated image and its decoding to
/// `on_sample`.
pub fn evaluate_with(
    gen: &impl Generator,
    cases: &[EvalCase],
    resolution: usize,
    seed: u64,
    mut on_sample: impl FnMut(usize, &EvalCase, &Image, &Decoding) -> Result<()>,
) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::Config("no evaluation cases".into()));
    }
    let cond = cases[0].cond;
    let (mut ok, mut rej) = (0usize, 0usize);
    let mut attr = [0usize; 4];
    let (mut motif_ok, mut motif_n) = (0usize, 0usize);
    let mut gen_f = Vec::with_capacity(cases.len());
    let mut ref_f = Vec::with_capacity(cases.len());
    for (i, case) in cases.iter().enumerate() {
        let img = gen.generate(case, resolution, sample_seed(seed, i))?;
        gen_f.push(features(&img));
        ref_f.push(features(&render(&case.scene, resolution)?));
        if case.scene.motif.is_some() {
            motif_n += 1;
        }
        let decoded = decode_attributes(&img);
        on_sample(i, case, &img, &decoded)?;
        match decoded {
            Decoding::Rejected(_) => rej += 1,
            Decoding::Accepted(d) => {
                let s = &case.scene;
                attr[0] += (d.shape == s.shape) as usize;
                attr[1] += (d.color == s.color) as usize;
                attr[2] += (d.position == s.position) as usize;
                attr[3] += (d.size == s.size) as usize;
                if s.motif.is_some() && d.motif == s.motif {
                    motif_ok += 1;
                }
                ok += matches(case, &d) as usize;
            }
        }
    }
    let n = cases.len() as f64;
    let (chance, motif_chance) = chance_rates(cases);
    let sigma = median_bandwidth(&ref_f);
    let mut fp = Sha256::new();
    fp.update(gen.fingerprint().as_bytes());
    fp.update(serde_json::to_vec(cases).expect("cases serialize"));
    fp.update(resolution.to_le_bytes());
    fp.update(seed.to_le_bytes());
    Ok(EvalReport {
        cond,
        samples: cases.len(),
        resolution,
        accuracy: ok as f64 / n,
        per_attribute: AttributeAccuracy {
            shape: attr[0] as f64 / n,
            color: attr[1] as f64 / n,
            position: attr[2] as f64 / n,
            size: attr[3] as f64 / n,
            motif: (motif_n > 0).then(|| motif_ok as f64 / motif_n as f64),
        },
        motif_samples: motif_n,
        rejection_rate: rej as f64 / n,
        chance,
        motif_chance,
        mmd2: mmd2(&gen_f, &ref_f, sigma),
        fingerprint: hex(&fp.finalize()),
    })
}

/// Evaluates a model on the configured cases for one conditioning mode.
pub fn conditional_accuracy<T: Scalar>(model: &Model<T>, cond: CondMode, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let gen = ModelGenerator {
        model,
        sampler: cfg.sampler.clone(),
        unconditional: false,
    };
    evaluate(&gen, &cfg.cases(cond)?, cfg.resolution, cfg.seed)
}

/// One ablation configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationArm {
    pub name: String,
    pub clab: ClabMode,
    pub alignment: AlignmentConfig,
}

/// The loss ablation (no alignment, pooled only, pooled + sequence,
/// full gated) plus the query-update arm.
pub fn standard_arms() -> Vec<AblationArm> {
    let d0 = |pool, inter| AlignmentConfig {
        d_threshold: 0.0,
        use_pool: pool,
        use_inter: inter,
        ..AlignmentConfig::default()
    };
    vec![
        AblationArm { name: "no_align".into(), clab: ClabMode::KvOnly, alignment: AlignmentConfig::disabled() },
        AblationArm { name: "pool".into(), clab: ClabMode::KvOnly, alignment: d0(true, false) },
        AblationArm { name: "pool_inter".into(), clab: ClabMode::KvOnly, alignment: d0(true, true) },
        AblationArm { name: "full".into(), clab: ClabMode::KvOnly, alignment: AlignmentConfig::default() },
        AblationArm { name: "query_update".into(), clab: ClabMode::QueryUpdate, alignment: AlignmentConfig::default() },
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub arm: AblationArm,
    pub final_l_gen: f64,
    pub report: EvalReport,
}

/// Trains stage 1 for every arm from the same stage-0 model and evaluates
/// B-caption generation.
pub fn ablation_run<T: Scalar>(
    stage0: &Model<T>,
    arms: &[AblationArm],
    train: &TrainConfig,
    eval: &EvalConfig,
    mut progress: impl FnMut(&str, u64),
) -> Result<Vec<AblationRow>> {
    if stage0.config.clab != ClabMode::Off {
        return Err(Error::Config("ablation starts from a stage-0 model without the B branch".into()));
    }
    eval.validate()?;
    let mut rows = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut model = stage0.clone();
        model.install_clab(arm.clab);
        let cfg = TrainConfig {
            alignment: arm.alignment.clone(),
            ..train.clone()
        }
        .resolved(1)?;
        let mut trainer = Trainer::new(model, cfg)?;
        let mut last = 0.0;
        trainer.run(None, |rec, _| {
            last = rec.l_gen;
            progress(&arm.name, rec.step);
            Ok(())
        })?;
        let report = conditional_accuracy(&trainer.model, CondMode::B, eval)?;
        rows.push(AblationRow {
            arm: arm.clone(),
            final_l_gen: last,
            report,
        });
    }
    Ok(rows)
}

/// Fixed-width comparison table.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<14} {:>9} {:>9} {:>9} {:>10} {:>9}\n",
        "arm", "accuracy", "motif", "rejected", "mmd2", "l_gen"
    );
    for r in rows {
        let motif = r.report.per_attribute.motif.map_or("-".to_string(), |m| format!("{m:.4}"));
        let _ = writeln!(
            s,
            "{:<14} {:>9.4} {:>9} {:>9.4} {:>10.6} {:>9.5}",
            r.arm.name, r.report.accuracy, motif, r.report.rejection_rate, r.report.mmd2, r.final_l_gen
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_red_circle_center_large() {
        let s = Scene {
            shape: ShapeKind::Circle,
            color: Color::Red,
            position: Position::Center,
            size: Size::Large,
            motif: None,
        };
        assert_eq!(decode_attributes(&render(&s, 16).unwrap()), Decoding::Accepted(s));
    }

    #[test]
    fn black_image_rejected() {
        assert_eq!(
            decode_attributes(&Image::black(16, 16)),
            Decoding::Rejected(RejectReason::NoForeground)
        );
        assert_eq!(
            decode_attributes(&Image::black(16, 8)),
            Decoding::Rejected(RejectReason::UnsupportedSize)
        );
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let x = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        assert!(mmd2(&x, &x, 1.0).abs() < 1e-15);
        let y = vec![vec![5.0, 5.0], vec![6.0, 5.0]];
        assert!(mmd2(&x, &y, 1.0) > 0.5);
    }

    #[test]
    fn chance_of_motif_free_case() {
        let cases = eval_cases(CondMode::A, 100, 0, LengthMode::Short, 0).unwrap();
        let (c, m) = chance_rates(&cases);
        assert!((c - 1.0 / 108.0).abs() < 1e-12);
        assert_eq!(m, 0.0);
        let b = eval_cases(CondMode::B, 8, 1, LengthMode::Short, 0).unwrap();
        let (c, m) = chance_rates(&b);
        assert!((c - 1.0 / 864.0).abs() < 1e-12);
        assert!((m - 0.125).abs() < 1e-12);
        assert!(eval_cases(CondMode::A, 10, 2, LengthMode::Short, 0).is_err());
    }
}
