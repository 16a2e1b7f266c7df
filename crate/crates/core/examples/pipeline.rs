//! Runs stages 0-2 with the given step budgets and reports accuracies.
//!
//! `cargo run --release --example pipeline -- <out_dir> <s0> <s1> <s2>`

use std::path::PathBuf;
use std::time::Instant;

use clab::backbone::{ClabMode, Model, ModelConfig};
use clab::checkpoint::Checkpoint;
use clab::evalbench::{conditional_accuracy, CondMode, EvalConfig};
use clab::trainer::{TrainConfig, Trainer};

fn main() -> clab::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = PathBuf::from(args.get(1).map_or("/tmp/pipeline", |s| s.as_str()));
    let steps: Vec<u64> = args[2..].iter().map(|s| s.parse().unwrap()).collect();
    std::fs::create_dir_all(&out)?;
    let eval = EvalConfig { samples: 108, ..EvalConfig::default() };
    let t0 = Instant::now();

    let s0 = out.join("stage0.ckpt");
    let model = if s0.exists() {
        Checkpoint::<f32>::load(&s0)?.model
    } else {
        let model = Model::<f32>::new(ModelConfig { clab: ClabMode::Off, ..ModelConfig::default() })?;
        let cfg = TrainConfig { steps: Some(steps[0]), ..TrainConfig::default() }.resolved(0)?;
        let mut tr = Trainer::new(model, cfg)?;
        tr.run(None, |r, _| {
            if r.step % 100 == 0 {
                println!("s0 step {} l_gen {:.4} t={:?}", r.step, r.l_gen, t0.elapsed());
            }
            Ok(())
        })?;
        tr.checkpoint().save(&s0)?;
        tr.model
    };
    let ra = conditional_accuracy(&model, CondMode::A, &eval)?;
    println!("stage0 A acc {:.3} rej {:.3} attr {:?} t={:?}", ra.accuracy, ra.rejection_rate, ra.per_attribute, t0.elapsed());
    if steps.len() < 2 {
        return Ok(());
    }
    let mut m1 = model.clone();
    m1.install_clab(ClabMode::KvOnly);
    let cfg = TrainConfig { steps: Some(steps[1]), ..TrainConfig::default() }.resolved(1)?;
    let mut tr = Trainer::new(m1, cfg)?;
    tr.run(None, |r, _| {
        if r.step % 100 == 0 {
            println!("s1 step {} l_gen {:.4} l_p {:.4} l_inter {:.4} fired {} t={:?}", r.step, r.l_gen, r.l_p, r.l_inter, r.gate_fired, t0.elapsed());
        }
        Ok(())
    })?;
    tr.checkpoint().save(&out.join("stage1.ckpt"))?;
    let rb = conditional_accuracy(&tr.model, CondMode::B, &eval)?;
    println!("stage1 B acc {:.3} chance {:.4} motif {:?} rej {:.3} attr {:?} t={:?}", rb.accuracy, rb.chance, rb.per_attribute.motif, rb.rejection_rate, rb.per_attribute, t0.elapsed());
    if steps.len() < 3 {
        return Ok(());
    }
    let cfg = TrainConfig { steps: Some(steps[2]), ..TrainConfig::default() }.resolved(2)?;
    let mut tr = Trainer::new(tr.model, cfg)?;
    tr.run(None, |r, _| {
        if r.step % 100 == 0 {
            println!("s2 step {} res {} l_gen {:.4} l_p {:.4} t={:?}", r.step, r.resolution, r.l_gen, r.l_p, t0.elapsed());
        }
        Ok(())
    })?;
    tr.checkpoint().save(&out.join("stage2.ckpt"))?;
    let rb = conditional_accuracy(&tr.model, CondMode::B, &eval)?;
    println!("stage2 B acc {:.3} chance {:.4} motif {:?} rej {:.3} attr {:?} t={:?}", rb.accuracy, rb.chance, rb.per_attribute.motif, rb.rejection_rate, rb.per_attribute, t0.elapsed());
    Ok(())
}
