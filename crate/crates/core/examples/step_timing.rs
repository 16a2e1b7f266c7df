//! Times one stage-0 style forward/backward pass per sample.

use std::time::Instant;

use clab::backbone::{patchify, ClabMode, Model, ModelConfig};
use clab::flowmatch::{fm_loss_on_tape, make_flow_sample};
use clab::numerics::Tape;
use clab::synthdata::{caption_pair, render, sample_scene, LengthMode};
use clab::textcond::adapt_on_tape;

fn main() {
    let res: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(16);
    let cfg = ModelConfig { clab: ClabMode::Off, ..ModelConfig::default() };
    let model = Model::<f32>::new(cfg).unwrap();
    println!("params: {}", model.params.num_scalars());
    let n = 32;
    let start = Instant::now();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |n| !n.starts_with("enc_"));
    let mut losses = Vec::new();
    for i in 0..n {
        let scene = sample_scene(i as u64, false);
        let (a, _) = caption_pair(&scene, LengthMode::Short, false);
        let e = model.encode(&a.unwrap()).unwrap();
        let img = render(&scene, res).unwrap();
        let x = patchify::<f32>(&img, 4).unwrap();
        let s = make_flow_sample(&x.tokens, i as u64, 0.5).unwrap();
        let xv = tape.constant(s.xt.clone());
        let ta = adapt_on_tape(&mut tape, &p, &e).unwrap();
        let tb = tape.constant(clab::numerics::Tensor::zeros(&[0, 64]));
        let v = model.velocity_on_tape(&mut tape, &p, xv, (x.grid_h, x.grid_w), ta, tb, 0.5).unwrap();
        losses.push(fm_loss_on_tape(&mut tape, v, &s).unwrap());
    }
    let fwd = start.elapsed();
    let mut l = losses[0];
    for &x in &losses[1..] {
        l = tape.add(l, x).unwrap();
    }
    tape.backward(l).unwrap();
    println!("res {res}: fwd {:?}, fwd+bwd {:?} per batch of {n}", fwd, start.elapsed());
}
