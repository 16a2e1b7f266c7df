//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails. Positional arguments select criteria by
//! substring, e.g. `cargo test --test acceptance -- gate toy`.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use clab::alignloss::{gated_ra_loss, inter_loss, interp_seq, pool_loss, AlignmentConfig, GateMode};
use clab::backbone::{patchify, ClabMode, Model, ModelConfig};
use clab::checkpoint::{self, Checkpoint};
use clab::evalbench::{AblationRow, CondMode};
use clab::flowmatch::{SamplerConfig, Scheme};
use clab::numerics::Tensor;
use clab::synthdata::{render, Motif, Scene};
use clab::textcond::{Language, TextEmbedding};
use clab::toy2d::{compare_to_truth, ToyConfig, ToyField};
use clab::trainer::{FreezePolicy, TrainConfig, Trainer};
use clab::{Error, Result};
use clab_cli::commands::{cmd_ablate, cmd_eval, cmd_train, TrainArgs};
use clab_cli::config::RunConfig;
use clab_cli::gradsuite;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict { pass, detail: detail.into() })
}

/// Shared state: the desk stage-0 checkpoint and the ablation rows are
/// reused by later criteria.
struct Ctx {
    dir: PathBuf,
    desk_stage0: Option<PathBuf>,
    ablation: Option<Vec<AblationRow>>,
}

type Criterion = (&'static str, Option<Duration>, fn(&mut Ctx) -> Result<Verdict>);

const CRITERIA: &[Criterion] = &[
    ("gradient_suite", Some(Duration::from_secs(120)), gradient_suite),
    ("zero_adapter_identity", Some(Duration::from_secs(10)), zero_adapter_identity),
    ("freezing_contract", Some(Duration::from_secs(300)), freezing_contract),
    ("gate_truth_table", Some(Duration::from_secs(1)), gate_truth_table),
    ("alignment_oracles", Some(Duration::from_secs(30)), alignment_oracles),
    ("flow_matching_toy", Some(Duration::from_secs(600)), flow_matching_toy),
    ("conditional_generation", Some(Duration::from_secs(90 * 60)), conditional_generation),
    ("query_update_ablation", None, query_update_ablation),
    ("alignment_ablation", None, alignment_ablation),
    ("determinism", None, determinism),
    ("checkpoint_round_trip", None, checkpoint_round_trip),
];

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn load_config(rel: &str, out: &Path) -> Result<RunConfig> {
    let mut c = RunConfig::load(&repo_file(rel))?;
    c.out = out.to_path_buf();
    c.resolved()
}

fn gradient_suite(_: &mut Ctx) -> Result<Verdict> {
    let results = gradsuite::run(0, 1e-5, 1e-4)?;
    let failed: Vec<_> = results.iter().filter(|r| !r.pass).map(|r| format!("{} {:.2e}", r.name, r.rel_err)).collect();
    let worst = |kind: &str| results.iter().filter(|r| r.kind == kind).map(|r| r.rel_err).fold(0.0, f64::max);
    verdict(
        failed.is_empty(),
        format!(
            "{} checks, worst primitive {:.2e} (tol 1e-5), worst end-to-end {:.2e} (tol 1e-4){}",
            results.len(),
            worst("primitive"),
            worst("end_to_end"),
            if failed.is_empty() { String::new() } else { format!("; failed: {}", failed.join(", ")) }
        ),
    )
}

fn zero_adapter_identity(_: &mut Ctx) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let mut mismatches = 0;
    for case in 0..100u64 {
        let cfg = ModelConfig {
            init_seed: case,
            n_double: 1 + case as usize % 2,
            n_single: case as usize % 3,
            clab: ClabMode::KvOnly,
            ..ModelConfig::default()
        };
        let mut with = Model::<f32>::new(cfg.clone())?;
        for p in with.params.iter_mut() {
            p.value = Tensor::randn(p.value.shape(), 0.2, &mut rng);
        }
        let mut without = Model::<f32>::new(ModelConfig { clab: ClabMode::Off, ..cfg })?;
        for p in without.params.iter_mut() {
            p.value = with.params.get(&p.name)?.clone();
        }
        let motif = if rng.gen::<bool>() { Some(Motif::ALL[rng.gen_range(0..Motif::ALL.len())]) } else { None };
        let img = render(&Scene::from_class(rng.gen_range(0..108)).with_motif(motif), 16)?;
        let x = patchify::<f32>(&img, with.config.patch)?;
        let d = with.config.d_model;
        let a = TextEmbedding::new(Language::A, Tensor::randn(&[rng.gen_range(0..8), d], 1.0, &mut rng));
        let empty = TextEmbedding::empty(Language::B, d);
        let t = rng.gen::<f32>();
        let v1 = with.forward_velocity(&x, &a, &empty, t)?;
        let v2 = without.forward_velocity(&x, &a, &empty, t)?;
        if !v1.bit_eq(&v2) {
            mismatches += 1;
        }
    }
    verdict(mismatches == 0, format!("{mismatches}/100 inputs differ bitwise"))
}

fn freezing_contract(_: &mut Ctx) -> Result<Verdict> {
    let base = ModelConfig { clab: ClabMode::Off, ..ModelConfig::default() };
    let mut s0 = Trainer::new(Model::<f32>::new(base)?, TrainConfig { steps: Some(20), ..TrainConfig::default() }.resolved(0)?)?;
    s0.run(None, |_, _| Ok(()))?;
    let mut model = s0.model;
    model.install_clab(ClabMode::KvOnly);
    let policy = FreezePolicy { stage: 1 };
    let before: Vec<(String, [u8; 32])> = model
        .params
        .iter()
        .map(|p| Ok((p.name.clone(), model.params.digest(&p.name)?)))
        .collect::<Result<_>>()?;
    let mut t = Trainer::new(model, TrainConfig { steps: Some(500), ..TrainConfig::default() }.resolved(1)?)?;
    t.run(None, |_, _| Ok(()))?;
    let (mut frozen, mut changed_frozen, mut moved) = (0, Vec::new(), 0);
    for (name, d) in &before {
        let now = t.model.params.digest(name)?;
        if policy.trainable(name) {
            moved += usize::from(now != *d);
        } else {
            frozen += 1;
            if now != *d {
                changed_frozen.push(name.clone());
            }
        }
    }
    let trainable: BTreeSet<String> = policy.trainable_names(&t.model).into_iter().collect();
    let held: BTreeSet<String> = t.optimizer.param_names().map(String::from).collect();
    let extra: Vec<_> = held.difference(&trainable).cloned().collect();
    verdict(
        changed_frozen.is_empty() && extra.is_empty() && moved > 0,
        format!(
            "{frozen} frozen buffers, {} changed; optimizer holds {} names, {} not trainable; {moved}/{} trainable moved{}",
            changed_frozen.len(),
            held.len(),
            extra.len(),
            trainable.len(),
            if changed_frozen.is_empty() { String::new() } else { format!("; changed: {}", changed_frozen.join(", ")) }
        ),
    )
}

/// `(l_ra, fired)` written out from the gate definition.
fn gate_oracle(l_p: f64, l_inter: f64, cfg: &AlignmentConfig) -> (f64, bool) {
    let p = if cfg.use_pool { l_p } else { 0.0 };
    let i = if cfg.use_inter { l_inter } else { 0.0 };
    if !cfg.use_pool && !cfg.use_inter {
        (0.0, false)
    } else if p + i >= cfg.d_threshold {
        (p + i, false)
    } else if cfg.gate_mode == GateMode::Equation {
        (p, true)
    } else {
        (0.0, true)
    }
}

fn gate_truth_table(_: &mut Ctx) -> Result<Verdict> {
    // Multiples of 1/128 keep every sum exact, so the boundary is hit.
    let vals: Vec<f64> = (0..=16).map(|k| k as f64 / 128.0).collect();
    let (mut cases, mut boundary, mut wrong) = (0, 0, 0);
    for use_pool in [false, true] {
        for use_inter in [false, true] {
            for gate_mode in [GateMode::Equation, GateMode::Text] {
                for &d in &vals {
                    let cfg = AlignmentConfig { d_threshold: d, gate_mode, use_pool, use_inter };
                    for &lp in &vals {
                        for &li in &vals {
                            cases += 1;
                            boundary += usize::from(use_pool && use_inter && lp + li == d);
                            wrong += usize::from(gated_ra_loss(lp, li, &cfg) != gate_oracle(lp, li, &cfg));
                        }
                    }
                }
            }
        }
    }
    let spot = [
        (gated_ra_loss(0.04, 0.03, &AlignmentConfig::default()), (0.04 + 0.03, false)),
        (gated_ra_loss(0.01, 0.02, &AlignmentConfig::default()), (0.01, true)),
        (
            gated_ra_loss(0.01, 0.02, &AlignmentConfig { gate_mode: GateMode::Text, ..AlignmentConfig::default() }),
            (0.0, true),
        ),
    ];
    let spot_ok = spot.iter().all(|(g, w)| g == w);
    verdict(
        wrong == 0 && boundary > 0 && spot_ok,
        format!("{cases} cases, {boundary} on the boundary, {wrong} wrong, worked examples {}", if spot_ok { "ok" } else { "wrong" }),
    )
}

fn rows(t: &TextEmbedding<f64>) -> Vec<Vec<f64>> {
    (0..t.len()).map(|i| t.tokens.row(i).to_vec()).collect()
}

fn mean_rows(a: &[Vec<f64>]) -> Vec<f64> {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).sum::<f64>() / a.len() as f64).collect()
}

fn direct_pool(b: &[Vec<f64>], a: &[Vec<f64>]) -> f64 {
    let (mb, ma) = (mean_rows(b), mean_rows(a));
    mb.iter().zip(&ma).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / mb.len() as f64
}

fn direct_interp(a: &[Vec<f64>], n: usize) -> Vec<Vec<f64>> {
    let m = a.len();
    if n == 1 {
        return vec![mean_rows(a)];
    }
    if m == 1 {
        return vec![a[0].clone(); n];
    }
    (0..n)
        .map(|i| {
            let x = i as f64 * (m - 1) as f64 / (n - 1) as f64;
            let k = (x.floor() as usize).min(m - 2);
            let w = x - k as f64;
            a[k].iter().zip(&a[k + 1]).map(|(p, q)| (1.0 - w) * p + w * q).collect()
        })
        .collect()
}

fn direct_inter(b: &[Vec<f64>], a: &[Vec<f64>]) -> f64 {
    let r = direct_interp(a, b.len());
    let sq: Vec<f64> = b.iter().flatten().zip(r.iter().flatten()).map(|(p, q)| (p - q).powi(2)).collect();
    sq.iter().sum::<f64>() / sq.len() as f64
}

fn rel(got: f64, want: f64) -> f64 {
    if got == want {
        0.0
    } else {
        (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
    }
}

fn alignment_oracles(_: &mut Ctx) -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(31337);
    let (mut pool, mut inter, mut interp) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        let d = rng.gen_range(1..=16);
        let lb = rng.gen_range(1..=20);
        let la = rng.gen_range(1..=20);
        let b = TextEmbedding::new(Language::B, Tensor::randn(&[lb, d], 1.0, &mut rng));
        let a = TextEmbedding::new(Language::A, Tensor::randn(&[la, d], 1.0, &mut rng));
        let (rb, ra) = (rows(&b), rows(&a));
        pool = pool.max(rel(pool_loss(&b, &a)?, direct_pool(&rb, &ra)));
        inter = inter.max(rel(inter_loss(&b, &a)?, direct_inter(&rb, &ra)));
        let n = rng.gen_range(1..=24);
        let got = rows(&interp_seq(&a, n)?);
        for (g, w) in got.iter().flatten().zip(direct_interp(&ra, n).iter().flatten()) {
            interp = interp.max((g - w).abs() / w.abs().max(1.0));
        }
    }
    verdict(
        pool <= 1e-12 && inter <= 1e-12 && interp <= 1e-12,
        format!("1000 cases, max rel-err pool {pool:.1e}, inter {inter:.1e}, interp {interp:.1e} (tol 1e-12)"),
    )
}

fn flow_matching_toy(_: &mut Ctx) -> Result<Verdict> {
    let mut field = ToyField::<f32>::new(ToyConfig::default())?;
    let losses = field.train()?;
    let sampler = SamplerConfig { scheme: Scheme::Euler, steps: 50, ..SamplerConfig::default() };
    let cmp = compare_to_truth(&field, 500, 20, 0, &sampler)?;
    let tail = &losses[losses.len().saturating_sub(100)..];
    verdict(
        cmp.ratio() <= 2.0,
        format!(
            "MMD² generated {:.3e} vs true-vs-true {:.3e}, ratio {:.3} (limit 2); final loss {:.4}",
            cmp.generated,
            cmp.reference,
            cmp.ratio(),
            tail.iter().sum::<f64>() / tail.len() as f64
        ),
    )
}

fn conditional_generation(ctx: &mut Ctx) -> Result<Verdict> {
    let out = ctx.dir.join("desk");
    let cfg = load_config("configs/desk.toml", &out)?;
    let s0 = cmd_train::<f32>(&cfg, &TrainArgs { stage: 0, ..TrainArgs::default() })?;
    ctx.desk_stage0 = Some(s0.checkpoint.clone());
    let s1 = cmd_train::<f32>(&cfg, &TrainArgs { stage: 1, init: Some(s0.checkpoint), ..TrainArgs::default() })?;
    let s2 = cmd_train::<f32>(&cfg, &TrainArgs { stage: 2, init: Some(s1.checkpoint), ..TrainArgs::default() })?;
    let r = cmd_eval::<f32>(&cfg, &s2.checkpoint, CondMode::B)?;
    let motif = r.per_attribute.motif.unwrap_or(0.0);
    verdict(
        r.resolution == 16 && r.accuracy >= 5.0 * r.chance && motif > r.motif_chance,
        format!(
            "{} B captions at {}x{}: accuracy {:.3} vs 5x chance {:.4}; motif {:.3} over {} vs chance {:.3}; rejected {:.3}",
            r.samples,
            r.resolution,
            r.resolution,
            r.accuracy,
            5.0 * r.chance,
            motif,
            r.motif_samples,
            r.motif_chance,
            r.rejection_rate
        ),
    )
}

fn ablation_rows(ctx: &mut Ctx) -> Result<&[AblationRow]> {
    if ctx.ablation.is_none() {
        let out = ctx.dir.join("ablation");
        let cfg = load_config("configs/ablation.toml", &out)?;
        let init = match &ctx.desk_stage0 {
            Some(p) => p.clone(),
            None => {
                // Run on its own: train the same stage 0 the desk run would.
                let c = load_config("configs/desk.toml", &out.join("stage0"))?;
                cmd_train::<f32>(&c, &TrainArgs { stage: 0, ..TrainArgs::default() })?.checkpoint
            }
        };
        ctx.ablation = Some(cmd_ablate::<f32>(&cfg, &init, |_, _| {})?);
    }
    Ok(ctx.ablation.as_deref().unwrap())
}

fn arm<'a>(rows: &'a [AblationRow], name: &str) -> Result<&'a AblationRow> {
    rows.iter().find(|r| r.arm.name == name).ok_or_else(|| Error::Config(format!("ablation has no {name:?} arm")))
}

fn query_update_ablation(ctx: &mut Ctx) -> Result<Verdict> {
    let rows = ablation_rows(ctx)?;
    let (full, qu) = (&arm(rows, "full")?.report, &arm(rows, "query_update")?.report);
    verdict(
        qu.accuracy < full.accuracy && qu.mmd2 > full.mmd2,
        format!(
            "accuracy: query_update {:.3} vs full {:.3}; MMD²: query_update {:.4} vs full {:.4}",
            qu.accuracy, full.accuracy, qu.mmd2, full.mmd2
        ),
    )
}

fn alignment_ablation(ctx: &mut Ctx) -> Result<Verdict> {
    let rows = ablation_rows(ctx)?;
    let acc = |n| arm(rows, n).map(|r| r.report.accuracy);
    let (none, pool, pool_inter, full) = (acc("no_align")?, acc("pool")?, acc("pool_inter")?, acc("full")?);
    verdict(
        full >= none && pool > none,
        format!("accuracy: no_align {none:.3}, pool {pool:.3}, pool_inter {pool_inter:.3}, full {full:.3}"),
    )
}

const TINY: &str = r#"
[model]
d_model = 16
d_enc = 12
heads = 2
enc_heads = 2
n_double = 1
n_single = 1
time_dim = 8

[stage0]
batch_size = 4
steps = 8

[stage1]
batch_size = 4
steps = 8

[stage2]
batch_size = 4
steps = 6

[sampler]
steps = 6

[eval]
samples = 100

[eval.sampler]
steps = 4
"#;

fn clab(args: &[&str]) -> Result<()> {
    let o = Command::new(env!("CARGO_BIN_EXE_clab")).args(args).output()?;
    if o.status.success() {
        Ok(())
    } else {
        Err(Error::Config(format!("clab {}: {}", args.join(" "), String::from_utf8_lossy(&o.stderr).trim())))
    }
}

fn determinism(ctx: &mut Ctx) -> Result<Verdict> {
    let root = ctx.dir.join("determinism");
    std::fs::create_dir_all(&root)?;
    let cfg = root.join("tiny.toml");
    std::fs::write(&cfg, TINY)?;
    let c = cfg.to_str().unwrap();
    let run = |name: &str| -> Result<PathBuf> {
        let d = root.join(name);
        let o = d.to_str().unwrap();
        let ck = |s: u8| d.join(format!("stage{s}.ckpt")).to_str().unwrap().to_string();
        clab(&["--config", c, "--out", o, "train", "--stage", "0"])?;
        clab(&["--config", c, "--out", o, "train", "--stage", "1", "--init", &ck(0)])?;
        clab(&["--config", c, "--out", o, "train", "--stage", "2", "--init", &ck(1)])?;
        for (cond, flag, caption) in [("b", "--caption-b", "you bian lan xiao de gewen fang"), ("a", "--caption-a", "large red circle left")] {
            clab(&["--config", c, "--out", o, "sample", "--checkpoint", &ck(2), "--cond", cond, flag, caption, "--count", "3"])?;
        }
        clab(&["--config", c, "--out", o, "eval", "--checkpoint", &ck(2), "--cond", "b"])?;
        Ok(d)
    };
    let (a, b) = (run("a")?, run("b")?);
    let mut names: Vec<String> = std::fs::read_dir(&a)?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()?;
    names.retain(|n| n != "config.toml");
    names.sort();
    let compared = names.iter().filter(|n| n.ends_with(".jsonl") || n.ends_with(".png") || n.ends_with(".ckpt")).count();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(a.join(n.as_str())).ok() != std::fs::read(b.join(n.as_str())).ok())
        .collect();
    let pngs = names.iter().filter(|n| n.ends_with(".png")).count();
    verdict(
        differing.is_empty() && pngs >= 6 && names.iter().any(|n| n == "metrics_stage2.jsonl"),
        format!(
            "{} files ({compared} logs/PNGs/checkpoints) over two runs, {} differ{}",
            names.len(),
            differing.len(),
            if differing.is_empty() { String::new() } else { format!(": {differing:?}") }
        ),
    )
}

fn checkpoint_round_trip(ctx: &mut Ctx) -> Result<Verdict> {
    let mut model = Model::<f32>::new(ModelConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for p in model.params.iter_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.5, &mut rng);
    }
    let mut t = Trainer::new(model, TrainConfig { steps: Some(2), batch_size: 4, ..TrainConfig::default() }.resolved(1)?)?;
    t.run(None, |_, _| Ok(()))?;
    let path = ctx.dir.join("roundtrip.ckpt");
    t.checkpoint().save(&path)?;
    let first = std::fs::read(&path)?;
    let path2 = ctx.dir.join("roundtrip2.ckpt");
    Checkpoint::<f32>::load(&path)?.save(&path2)?;
    let identical = first == std::fs::read(&path2)?;

    let (header, payload) = checkpoint::split(&first)?;
    let mut tampered_ok = 0;
    let tamperings = 3;
    for k in 0..tamperings {
        let mut h = header.clone();
        let i = k * h.tensors.len() / tamperings;
        h.tensors[i].offset += 4;
        if Checkpoint::<f32>::from_bytes(&checkpoint::join(&h, payload)).is_err() {
            tampered_ok += 1;
        }
    }
    verdict(
        identical && tampered_ok == tamperings,
        format!(
            "{} bytes, save-load-save {}; {tampered_ok}/{tamperings} tampered offsets rejected",
            first.len(),
            if identical { "identical" } else { "differs" }
        ),
    )
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).expect("create acceptance dir");
    println!("acceptance artifacts in {}", dir.display());
    let mut ctx = Ctx { dir, desk_stage0: None, ablation: None };
    let mut failed = 0;
    for (name, limit, check) in CRITERIA {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = check(&mut ctx);
        let took = start.elapsed();
        let (mut pass, mut detail) = match result {
            Ok(v) => (v.pass, v.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if let Some(l) = limit {
            if took > *l {
                pass = false;
                detail.push_str(&format!("; over the {:.0} s limit", l.as_secs_f64()));
            }
        }
        failed += usize::from(!pass);
        println!("{} {name} ({:.1} s): {detail}", if pass { "PASS" } else { "FAIL" }, took.as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
