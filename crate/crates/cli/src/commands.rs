//! Subcommand implementations. Each writes its resolved configuration next
//! to its artifacts and returns a summary the binary prints.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use clab::backbone::{ClabMode, Model, ModelConfig};
use clab::checkpoint::Checkpoint;
use clab::evalbench::{
    ablation_run, evaluate_with, format_table, hex, standard_arms, AblationRow, CondMode, Decoding, EvalReport,
    ModelGenerator, RejectReason,
};
use clab::flowmatch::SamplerConfig;
use clab::imageio::{write_png, Image};
use clab::synthdata::{dump_dataset, parse, Scene};
use clab::textcond::{detokenize, tokenize, Caption, Language};
use clab::trainer::{MetricRecord, Trainer};
use clab::{Error, Result, Scalar};

use crate::config::RunConfig;
use crate::gradsuite::{self, CheckResult};
use crate::plot::{bar_chart, image_grid, line_plot, Series, PALETTE};

pub fn checkpoint_name(stage: u8) -> String {
    format!("stage{stage}.ckpt")
}

pub fn last_checkpoint_name(stage: u8) -> String {
    format!("stage{stage}.last.ckpt")
}

pub fn metrics_name(stage: u8) -> String {
    format!("metrics_stage{stage}.jsonl")
}

fn existing(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{what} {} does not exist", path.display())))
    }
}

fn load_checkpoint<T: Scalar>(path: &Path, what: &str) -> Result<Checkpoint<T>> {
    existing(path, what)?;
    Checkpoint::load(path)
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub stage: u8,
    /// Checkpoint of the previous stage; required for stages 1 and 2.
    pub init: Option<PathBuf>,
    /// Periodic checkpoint of this stage to continue from.
    pub resume: Option<PathBuf>,
    /// Stop (with a resumable checkpoint) once this many steps are done.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub steps_done: u64,
    pub steps_total: u64,
    pub last: Option<MetricRecord>,
}

impl TrainOutcome {
    pub fn completed(&self) -> bool {
        self.steps_done == self.steps_total
    }
}

fn initial_model<T: Scalar>(cfg: &RunConfig, args: &TrainArgs) -> Result<Model<T>> {
    match (args.stage, &args.init) {
        (0, Some(_)) => Err(Error::Config("stage 0 starts from scratch and takes no --init".into())),
        (0, None) => Model::new(ModelConfig { clab: ClabMode::Off, ..cfg.model.clone() }),
        (s, None) => Err(Error::Config(format!("stage {s} requires --init with a stage-{} checkpoint", s - 1))),
        (s, Some(path)) => {
            let ck = load_checkpoint::<T>(path, "--init checkpoint")?;
            let from = ck.progress.as_ref().map(|p| p.stage);
            if from != Some(s - 1) {
                let found = from.map_or("no training progress".to_string(), |f| format!("stage {f}"));
                return Err(Error::Config(format!(
                    "stage {s} requires a stage-{} checkpoint, {} has {found}",
                    s - 1,
                    path.display()
                )));
            }
            let mut model = ck.model;
            if s == 1 {
                if cfg.model.clab == ClabMode::Off {
                    return Err(Error::Config("model.clab must be kv_only or query_update for stage 1".into()));
                }
                model.install_clab(cfg.model.clab);
            }
            Ok(model)
        }
    }
}

/// Metrics lines with their parsed records; lines are kept verbatim so a
/// resumed log stays byte-identical.
fn read_metrics(path: &Path) -> Result<Vec<(String, MetricRecord)>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line)
            .map_err(|e| Error::Config(format!("{}: bad metrics line: {e}", path.display())))?;
        out.push((line, rec));
    }
    Ok(out)
}

fn json_line(out: &mut impl Write, value: &impl Serialize) -> Result<()> {
    serde_json::to_writer(&mut *out, value).map_err(std::io::Error::from)?;
    out.write_all(b"\n")?;
    Ok(())
}

pub fn loss_plot(records: &[MetricRecord]) -> Result<Vec<u8>> {
    let pts = |f: fn(&MetricRecord) -> f64| records.iter().map(|r| (r.step as f64, f(r))).collect();
    let mut series = vec![Series { points: pts(|r| r.l_gen), color: PALETTE[0] }];
    if records.iter().any(|r| r.l_ra != 0.0 || r.l_p != 0.0) {
        series.push(Series { points: pts(|r| r.l_p), color: PALETTE[1] });
        series.push(Series { points: pts(|r| r.l_inter), color: PALETTE[2] });
    }
    line_plot(&series, 480, 280)
}

/// Trains one stage. Writes `stageN.ckpt` when the budget is spent,
/// otherwise `stageN.last.ckpt`; periodic checkpoints also go to
/// `stageN.last.ckpt`.
pub fn cmd_train<T: Scalar>(cfg: &RunConfig, args: &TrainArgs) -> Result<TrainOutcome> {
    let s = args.stage;
    if s > 2 {
        return Err(Error::Config(format!("--stage must be 0, 1 or 2, got {s}")));
    }
    let tc = [&cfg.stage0, &cfg.stage1, &cfg.stage2][s as usize].resolved(s)?;
    let out = &cfg.out;
    cfg.write_resolved(out)?;
    let metrics = out.join(metrics_name(s));
    let mut trainer = match &args.resume {
        Some(path) => {
            if args.init.is_some() {
                return Err(Error::Config("--init and --resume are mutually exclusive".into()));
            }
            Trainer::resume(load_checkpoint::<T>(path, "--resume checkpoint")?, tc)?
        }
        None => Trainer::new(initial_model::<T>(cfg, args)?, tc)?,
    };
    let kept = if args.resume.is_some() && metrics.is_file() {
        read_metrics(&metrics)?.into_iter().filter(|(_, r)| r.step < trainer.step).collect()
    } else {
        Vec::new()
    };
    let mut log = std::io::BufWriter::new(std::fs::File::create(&metrics)?);
    for (line, _) in &kept {
        writeln!(log, "{line}")?;
    }
    let mut records: Vec<MetricRecord> = kept.into_iter().map(|(_, r)| r).collect();
    let last_path = out.join(last_checkpoint_name(s));
    let every = trainer.config.checkpoint_every;
    trainer.run(args.stop_after, |rec, t| {
        json_line(&mut log, rec)?;
        records.push(rec.clone());
        if every > 0 && t.step % every == 0 && t.step < t.config.steps {
            log.flush()?;
            t.checkpoint().save(&last_path)?;
        }
        Ok(())
    })?;
    log.flush()?;
    drop(log);
    let done = trainer.step == trainer.config.steps;
    let ck_path = if done { out.join(checkpoint_name(s)) } else { last_path };
    trainer.checkpoint().save(&ck_path)?;
    std::fs::write(out.join(format!("loss_stage{s}.png")), loss_plot(&records)?)?;
    Ok(TrainOutcome {
        checkpoint: ck_path,
        metrics,
        steps_done: trainer.step,
        steps_total: trainer.config.steps,
        last: records.last().cloned(),
    })
}

#[derive(Clone, Debug)]
pub struct SampleArgs {
    pub checkpoint: PathBuf,
    pub cond: CondMode,
    pub caption_a: Option<String>,
    pub caption_b: Option<String>,
    /// Overrides `sampler.guidance`.
    pub guidance: Option<f64>,
    pub count: usize,
    pub resolution: usize,
}

/// Tokenizes and grammar-checks a caption.
pub fn parse_caption(text: &str, lang: Language) -> Result<(Caption, Scene)> {
    let c = tokenize(text, lang)?;
    let scene = parse(text, lang)?;
    Ok((c, scene))
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleRecord {
    pub file: String,
    pub seed: u64,
    pub caption_a: Option<String>,
    pub caption_b: Option<String>,
    pub guidance: f64,
    pub decoded: Option<Scene>,
    pub rejected: Option<RejectReason>,
}

fn decoded_parts(d: &Decoding) -> (Option<Scene>, Option<RejectReason>) {
    match *d {
        Decoding::Accepted(s) => (Some(s), None),
        Decoding::Rejected(r) => (None, Some(r)),
    }
}

pub fn cmd_sample<T: Scalar>(cfg: &RunConfig, args: &SampleArgs) -> Result<Vec<SampleRecord>> {
    let (need_a, need_b) = match args.cond {
        CondMode::A => (true, false),
        CondMode::B => (false, true),
        CondMode::Ab => (true, true),
    };
    let take = |text: &Option<String>, need: bool, lang: Language, flag: &str| -> Result<Option<Caption>> {
        match (text, need) {
            (Some(t), true) => Ok(Some(parse_caption(t, lang)?.0)),
            (None, true) => Err(Error::Config(format!("--cond {} needs {flag}", cond_name(args.cond)))),
            (Some(_), false) => Err(Error::Config(format!("{flag} is not used with --cond {}", cond_name(args.cond)))),
            (None, false) => Ok(None),
        }
    };
    let ca = take(&args.caption_a, need_a, Language::A, "--caption-a")?;
    let cb = take(&args.caption_b, need_b, Language::B, "--caption-b")?;
    if args.count == 0 {
        return Err(Error::Config("--count must be at least 1".into()));
    }
    let sampler = SamplerConfig {
        guidance: args.guidance.unwrap_or(cfg.sampler.guidance),
        ..cfg.sampler.clone()
    };
    sampler.validate()?;
    let model = load_checkpoint::<T>(&args.checkpoint, "--checkpoint")?.model;
    if need_b && model.config.clab == ClabMode::Off {
        return Err(Error::Config("B conditioning needs a checkpoint with the B branch (stage 1 or later)".into()));
    }
    if args.resolution == 0 || args.resolution % model.config.patch != 0 {
        return Err(Error::Config(format!(
            "--resolution must be a positive multiple of the patch size {}",
            model.config.patch
        )));
    }
    cfg.write_resolved(&cfg.out)?;
    let gen = ModelGenerator { model: &model, sampler: sampler.clone(), unconditional: false };
    let case = clab::evalbench::EvalCase {
        scene: Scene::from_class(0),
        cond: args.cond,
        caption_a: ca.clone(),
        caption_b: cb.clone(),
    };
    let name = cond_name(args.cond);
    let mut records = Vec::with_capacity(args.count);
    for i in 0..args.count {
        let seed = sampler.seed.wrapping_add(i as u64);
        let img = clab::evalbench::Generator::generate(&gen, &case, args.resolution, seed)?;
        let file = format!("sample_{name}_{i:03}.png");
        write_png(&cfg.out.join(&file), &img)?;
        let (decoded, rejected) = decoded_parts(&clab::evalbench::decode_attributes(&img));
        records.push(SampleRecord {
            file,
            seed,
            caption_a: ca.as_ref().map(detokenize),
            caption_b: cb.as_ref().map(detokenize),
            guidance: sampler.guidance,
            decoded,
            rejected,
        });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.out.join(format!("samples_{name}.jsonl")))?);
    for r in &records {
        json_line(&mut f, r)?;
    }
    f.flush()?;
    Ok(records)
}

pub fn cond_name(c: CondMode) -> &'static str {
    match c {
        CondMode::A => "a",
        CondMode::B => "b",
        CondMode::Ab => "ab",
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EvalSample {
    pub index: usize,
    pub caption_a: Option<String>,
    pub caption_b: Option<String>,
    pub target: Scene,
    pub decoded: Option<Scene>,
    pub rejected: Option<RejectReason>,
    pub correct: bool,
}

pub fn report_table(r: &EvalReport) -> String {
    let motif = r.per_attribute.motif.map_or("-".into(), |m| format!("{m:.4}"));
    let a = &r.per_attribute;
    format!(
        "cond {}  samples {}  resolution {}\n\
         accuracy  {:.4}  (chance {:.6})\n\
         shape     {:.4}\ncolor     {:.4}\nposition  {:.4}\nsize      {:.4}\n\
         motif     {motif}  (over {} samples, chance {:.4})\n\
         rejected  {:.4}\nmmd2      {:.6}\nfingerprint {}\n",
        cond_name(r.cond),
        r.samples,
        r.resolution,
        r.accuracy,
        r.chance,
        a.shape,
        a.color,
        a.position,
        a.size,
        r.motif_samples,
        r.motif_chance,
        r.rejection_rate,
        r.mmd2,
        r.fingerprint
    )
}

/// Bars: overall, shape, color, position, size and (when present) motif
/// accuracy, with the overall chance rate as the reference line.
fn accuracy_bars(r: &EvalReport) -> Result<Vec<u8>> {
    let a = &r.per_attribute;
    let mut groups = vec![vec![r.accuracy], vec![a.shape], vec![a.color], vec![a.position], vec![a.size]];
    if let Some(m) = a.motif {
        groups.push(vec![m]);
    }
    bar_chart(&groups, Some(r.chance), 320, 200)
}

const GRID_TILES: usize = 64;

pub fn cmd_eval<T: Scalar>(cfg: &RunConfig, checkpoint: &Path, cond: CondMode) -> Result<EvalReport> {
    let model = load_checkpoint::<T>(checkpoint, "--checkpoint")?.model;
    if cond != CondMode::A && model.config.clab == ClabMode::Off {
        return Err(Error::Config("B conditioning needs a checkpoint with the B branch (stage 1 or later)".into()));
    }
    cfg.write_resolved(&cfg.out)?;
    let name = cond_name(cond);
    let gen = ModelGenerator { model: &model, sampler: cfg.eval.sampler.clone(), unconditional: false };
    let cases = cfg.eval.cases(cond)?;
    let mut samples = std::io::BufWriter::new(std::fs::File::create(cfg.out.join(format!("eval_{name}.jsonl")))?);
    let mut tiles: Vec<Image> = Vec::new();
    let report = evaluate_with(&gen, &cases, cfg.eval.resolution, cfg.eval.seed, |i, case, img, dec| {
        let (decoded, rejected) = decoded_parts(dec);
        let rec = EvalSample {
            index: i,
            caption_a: case.caption_a.as_ref().map(detokenize),
            caption_b: case.caption_b.as_ref().map(detokenize),
            target: case.scene,
            decoded,
            rejected,
            correct: decoded.is_some_and(|d| clab::evalbench::matches(case, &d)),
        };
        if tiles.len() < GRID_TILES {
            tiles.push(img.clone());
        }
        json_line(&mut samples, &rec)
    })?;
    samples.flush()?;
    let json = serde_json::to_string_pretty(&report).map_err(std::io::Error::from)?;
    std::fs::write(cfg.out.join(format!("eval_{name}.json")), json + "\n")?;
    std::fs::write(cfg.out.join(format!("eval_{name}.txt")), report_table(&report))?;
    write_png(&cfg.out.join(format!("eval_{name}_grid.png")), &image_grid(&tiles, 8)?)?;
    std::fs::write(cfg.out.join(format!("eval_{name}_accuracy.png")), accuracy_bars(&report)?)?;
    Ok(report)
}

/// Trains stage 1 for every configured arm from one stage-0 checkpoint and
/// evaluates B-caption generation.
pub fn cmd_ablate<T: Scalar>(
    cfg: &RunConfig,
    init: &Path,
    mut progress: impl FnMut(&str, u64),
) -> Result<Vec<AblationRow>> {
    let ck = load_checkpoint::<T>(init, "--init checkpoint")?;
    if ck.progress.as_ref().map(|p| p.stage) != Some(0) {
        return Err(Error::Config(format!("ablate needs a stage-0 checkpoint, {} is not one", init.display())));
    }
    let all = standard_arms();
    let arms: Vec<_> = cfg
        .ablate
        .arms
        .iter()
        .map(|n| all.iter().find(|a| &a.name == n).cloned().ok_or_else(|| Error::Config(format!("unknown arm {n:?}"))))
        .collect::<Result<_>>()?;
    cfg.write_resolved(&cfg.out)?;
    let rows = ablation_run(&ck.model, &arms, &cfg.stage1, &cfg.eval, &mut progress)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.out.join("ablation.jsonl"))?);
    for r in &rows {
        json_line(&mut f, r)?;
    }
    f.flush()?;
    std::fs::write(cfg.out.join("ablation.txt"), format_table(&rows))?;
    let groups: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.report.accuracy, r.report.per_attribute.motif.unwrap_or(0.0)]).collect();
    let chance = rows.first().map(|r| r.report.chance);
    std::fs::write(cfg.out.join("ablation.png"), bar_chart(&groups, chance, 360, 220)?)?;
    Ok(rows)
}

/// Always runs in 64-bit, whatever `--precision` says.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<CheckResult>> {
    let g = &cfg.gradcheck;
    let results = gradsuite::run(g.seed, g.primitive_tol, g.end_to_end_tol)?;
    cfg.write_resolved(&cfg.out)?;
    let mut f = std::io::BufWriter::new(std::fs::File::create(cfg.out.join("gradcheck.jsonl"))?);
    for r in &results {
        json_line(&mut f, r)?;
    }
    f.flush()?;
    Ok(results)
}

pub fn gradcheck_table(results: &[CheckResult]) -> String {
    let mut s = String::new();
    for r in results {
        s += &format!(
            "{} {:<36} {:<10} rel_err {:.3e} (tol {:.0e})\n",
            if r.pass { "PASS" } else { "FAIL" },
            r.name,
            r.kind,
            r.rel_err,
            r.tol
        );
    }
    s
}

#[derive(Clone, Debug)]
pub struct DatagenOutcome {
    pub dir: PathBuf,
    pub manifests: Vec<PathBuf>,
    /// SHA-256 over all manifests in split order.
    pub manifest_hash: String,
}

pub fn cmd_datagen(cfg: &RunConfig) -> Result<DatagenOutcome> {
    let d = &cfg.datagen;
    if d.splits.is_empty() {
        return Err(Error::Config("datagen.splits must not be empty".into()));
    }
    let splits: Vec<(&str, u64, usize)> = d
        .splits
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.as_str(), d.seed.wrapping_add(i as u64), s.count))
        .collect();
    if let Some(bad) = splits.iter().find(|s| s.0.is_empty() || s.0.contains(['/', '\\']) || s.0 == "." || s.0 == "..") {
        return Err(Error::Config(format!("datagen.splits: invalid split name {:?}", bad.0)));
    }
    cfg.write_resolved(&cfg.out)?;
    let dir = cfg.out.join("data");
    let manifests = dump_dataset(&dir, &splits, d.resolution, d.allow_motif, d.length_mode)?;
    let mut h = Sha256::new();
    for m in &manifests {
        h.update(std::fs::read(m)?);
    }
    let manifest_hash = hex(&h.finalize());
    std::fs::write(dir.join("manifest.sha256"), format!("{manifest_hash}\n"))?;
    Ok(DatagenOutcome { dir, manifests, manifest_hash })
}
