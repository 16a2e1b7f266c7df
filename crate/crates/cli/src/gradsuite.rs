//! Finite-difference checks behind the `gradcheck` command: every tape
//! primitive on random inputs, and the flow-matching loss through one
//! double-stream and one single-stream block.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use clab::backbone::{image_to_latent, ClabMode, Model, ModelConfig};
use clab::flowmatch::{fm_loss_on_tape, make_flow_sample};
use clab::numerics::{central_difference, finite_diff_check, max_rel_err, Tape, Tensor, Var, DEFAULT_STEP};
use clab::synthdata::{render, Motif, Scene};
use clab::textcond::{adapt_on_tape, tokenize, Language};
use clab::Result;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: &'static str,
    pub rel_err: f64,
    pub tol: f64,
    pub pass: bool,
}

/// A primitive under test: `f(tape, x, aux)` with `aux` random constants.
struct Prim {
    name: &'static str,
    x: [usize; 2],
    aux: &'static [[usize; 2]],
    f: fn(&mut Tape<f64>, Var, &[Var]) -> Result<Var>,
}

const MASK: [bool; 4] = [true, false, true, true];

const PRIMITIVES: &[Prim] = &[
    Prim { name: "matmul", x: [3, 4], aux: &[[4, 3]], f: |t, x, a| t.matmul(x, a[0]) },
    Prim { name: "matmul_rhs", x: [4, 3], aux: &[[3, 4]], f: |t, x, a| t.matmul(a[0], x) },
    Prim { name: "matmul_nt", x: [3, 4], aux: &[[5, 4]], f: |t, x, a| t.matmul_nt(x, a[0]) },
    Prim { name: "matmul_nt_rhs", x: [5, 4], aux: &[[3, 4]], f: |t, x, a| t.matmul_nt(a[0], x) },
    Prim { name: "add", x: [3, 4], aux: &[[3, 4]], f: |t, x, a| t.add(a[0], x) },
    Prim { name: "sub", x: [3, 4], aux: &[[3, 4]], f: |t, x, a| t.sub(a[0], x) },
    Prim { name: "mul", x: [3, 4], aux: &[[3, 4]], f: |t, x, a| t.mul(a[0], x) },
    Prim { name: "add_row", x: [3, 4], aux: &[[1, 4]], f: |t, x, a| t.add_row(x, a[0]) },
    Prim { name: "add_row_rhs", x: [1, 4], aux: &[[3, 4]], f: |t, x, a| t.add_row(a[0], x) },
    Prim { name: "mul_row", x: [3, 4], aux: &[[1, 4]], f: |t, x, a| t.mul_row(x, a[0]) },
    Prim { name: "mul_row_rhs", x: [1, 4], aux: &[[3, 4]], f: |t, x, a| t.mul_row(a[0], x) },
    Prim { name: "scale_add_scalar", x: [3, 4], aux: &[], f: |t, x, _| { let s = t.scale(x, -1.3); Ok(t.add_scalar(s, 0.2)) } },
    Prim { name: "gelu", x: [3, 4], aux: &[], f: |t, x, _| Ok(t.gelu(x)) },
    Prim { name: "layer_norm", x: [3, 4], aux: &[], f: |t, x, _| t.layer_norm(x, None, None) },
    Prim { name: "layer_norm_affine", x: [3, 4], aux: &[[1, 4], [1, 4]], f: |t, x, a| t.layer_norm(x, Some(a[0]), Some(a[1])) },
    Prim { name: "layer_norm_scale", x: [1, 4], aux: &[[3, 4], [1, 4]], f: |t, x, a| t.layer_norm(a[0], Some(x), Some(a[1])) },
    Prim { name: "layer_norm_shift", x: [1, 4], aux: &[[3, 4], [1, 4]], f: |t, x, a| t.layer_norm(a[0], Some(a[1]), Some(x)) },
    Prim { name: "softmax_rows", x: [3, 4], aux: &[], f: |t, x, _| t.softmax_rows(x, None) },
    Prim { name: "softmax_rows_masked", x: [3, 4], aux: &[], f: |t, x, _| t.softmax_rows(x, Some(&MASK)) },
    Prim { name: "transpose", x: [3, 4], aux: &[], f: |t, x, _| t.transpose(x) },
    Prim { name: "reshape", x: [3, 4], aux: &[], f: |t, x, _| t.reshape(x, &[4, 3]) },
    Prim { name: "concat_rows", x: [3, 4], aux: &[[2, 4]], f: |t, x, a| t.concat_rows(&[a[0], x, a[0]]) },
    Prim { name: "concat_cols", x: [3, 4], aux: &[[3, 2]], f: |t, x, a| t.concat_cols(&[x, a[0]]) },
    Prim { name: "narrow_rows", x: [3, 4], aux: &[], f: |t, x, _| t.narrow_rows(x, 1, 2) },
    Prim { name: "narrow_cols", x: [3, 4], aux: &[], f: |t, x, _| t.narrow_cols(x, 1, 2) },
    Prim { name: "mean_rows", x: [3, 4], aux: &[], f: |t, x, _| t.mean_rows(x) },
    Prim { name: "sum", x: [3, 4], aux: &[], f: |t, x, _| { let s = t.sum(x); t.reshape(s, &[1, 1]) } },
    Prim { name: "mean", x: [3, 4], aux: &[], f: |t, x, _| { let m = t.mean(x)?; t.reshape(m, &[1, 1]) } },
    Prim { name: "mse", x: [3, 4], aux: &[[3, 4]], f: |t, x, a| { let m = t.mse(x, a[0])?; t.reshape(m, &[1, 1]) } },
];

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Checks `p` through a random linear functional of its output, so every
/// output coordinate contributes.
fn check_primitive(p: &Prim, seed: u64) -> Result<f64> {
    let x = rand_t(&p.x, seed);
    let aux: Vec<Tensor<f64>> = p.aux.iter().enumerate().map(|(i, s)| rand_t(s, seed + 1 + i as u64)).collect();
    finite_diff_check(
        |tape, v| {
            let a: Vec<Var> = aux.iter().map(|t| tape.constant(t.clone())).collect();
            let y = (p.f)(tape, v, &a)?;
            let w = tape.constant(rand_t(tape.shape(y), seed ^ 0x5eed));
            let prod = tape.mul(y, w)?;
            Ok(tape.sum(prod))
        },
        &x,
        DEFAULT_STEP,
    )
}

/// One-block model with random (not zero) parameters so every path carries
/// gradient.
fn probe_model(n_double: usize, n_single: usize, clab: ClabMode, seed: u64) -> Result<Model<f64>> {
    let cfg = ModelConfig {
        d_model: 16,
        d_enc: 12,
        heads: 2,
        enc_heads: 2,
        n_double,
        n_single,
        time_dim: 8,
        clab,
        init_seed: seed,
        ..ModelConfig::default()
    };
    let mut m = Model::<f64>::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb10c);
    for p in m.params.iter_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.3, &mut rng);
    }
    Ok(m)
}

fn fm_loss_of(model: &Model<f64>, grads_for: Option<&str>) -> Result<(f64, Option<Vec<f64>>)> {
    let scene = Scene::from_class(40).with_motif(Some(Motif::Gewen));
    let lat = image_to_latent::<f64>(&render(&scene, 16)?, 4)?;
    let fs = make_flow_sample(&lat.tokens, 3, 0.35)?;
    let ea = model.encode(&tokenize("large red circle left", Language::A)?)?;
    let eb = model.encode(&tokenize("zuo bian hong da de gewen yuan", Language::B)?)?;
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |n| Some(n) == grads_for);
    let xv = tape.constant(fs.xt.clone());
    let ta = adapt_on_tape(&mut tape, &p, &ea)?;
    let tb = adapt_on_tape(&mut tape, &p, &eb)?;
    let v = model.velocity_on_tape(&mut tape, &p, xv, (4, 4), ta, tb, fs.t)?;
    let l = fm_loss_on_tape(&mut tape, v, &fs)?;
    let value = tape.scalar(l);
    let g = match grads_for {
        Some(name) => {
            tape.backward(l)?;
            let len = model.params.get(name)?.len();
            Some(tape.grad(p.get(name)?).map_or_else(|| vec![0.0; len], <[f64]>::to_vec))
        }
        None => None,
    };
    Ok((value, g))
}

/// Worst relative error over every non-encoder parameter tensor, on a
/// fixed coordinate subset per tensor.
pub fn end_to_end_err(model: &Model<f64>) -> Result<f64> {
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).filter(|n| !n.starts_with("enc_")).collect();
    let mut worst: f64 = 0.0;
    for name in &names {
        let g = fm_loss_of(model, Some(name))?.1.expect("requested");
        let base = model.params.get(name)?.clone();
        let stride = (base.len() / 6).max(1);
        let coords: Vec<usize> = (0..base.len()).step_by(stride).collect();
        let numeric = central_difference(
            |probe| {
                let mut m = model.clone();
                m.params.get_mut(name).expect("known").value = probe.clone();
                Ok(fm_loss_of(&m, None)?.0)
            },
            &base,
            &coords,
            DEFAULT_STEP,
        )?;
        let picked: Vec<f64> = coords.iter().map(|&c| g[c]).collect();
        worst = worst.max(max_rel_err(&picked, &numeric));
    }
    Ok(worst)
}

pub fn run(seed: u64, primitive_tol: f64, end_to_end_tol: f64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for (i, p) in PRIMITIVES.iter().enumerate() {
        let e = check_primitive(p, seed.wrapping_mul(31).wrapping_add(i as u64 * 101))?;
        out.push(CheckResult { name: p.name.into(), kind: "primitive", rel_err: e, tol: primitive_tol, pass: e <= primitive_tol });
    }
    for (name, nd, ns, mode) in [
        ("fm_loss_double_block", 1, 0, ClabMode::KvOnly),
        ("fm_loss_single_block", 0, 1, ClabMode::KvOnly),
        ("fm_loss_double_block_query_update", 1, 0, ClabMode::QueryUpdate),
    ] {
        let e = end_to_end_err(&probe_model(nd, ns, mode, seed)?)?;
        out.push(CheckResult { name: name.into(), kind: "end_to_end", rel_err: e, tol: end_to_end_tol, pass: e <= end_to_end_tol });
    }
    Ok(out)
}
