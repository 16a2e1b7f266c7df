//! Finite-difference checks of every tape primitive and of end-to-end
//! losses, in 64-bit.

use clab::backbone::{image_to_latent, ClabMode, Model, ModelConfig};
use clab::flowmatch::{fm_loss_on_tape, make_flow_sample};
use clab::numerics::{central_difference, finite_diff_check, max_rel_err, Tape, Tensor, Var, DEFAULT_STEP};
use clab::synthdata::{render, Motif, Scene};
use clab::textcond::adapt_on_tape;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const PRIMITIVE_TOL: f64 = 1e-5;
const END_TO_END_TOL: f64 = 1e-4;

fn rand_t(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Random linear functional of `y`, so every output coordinate matters.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> clab::Result<Var> {
    let w = tape.constant(rand_t(tape.shape(y), seed ^ 0x5eed));
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn check(x: &Tensor<f64>, seed: u64, f: impl Fn(&mut Tape<f64>, Var) -> clab::Result<Var>) -> f64 {
    finite_diff_check(
        |tape, v| {
            let y = f(tape, v)?;
            project(tape, y, seed)
        },
        x,
        DEFAULT_STEP,
    )
    .unwrap()
}

macro_rules! within {
    ($e:expr) => {{
        let err = $e;
        prop_assert!(err <= PRIMITIVE_TOL, "rel err {}", err);
    }};
}

fn dims() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (1usize..=8, 1usize..=8, 1usize..=8, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn matmul_both_operands((m, k, n, seed) in dims()) {
        let a = rand_t(&[m, k], seed);
        let b = rand_t(&[k, n], seed + 1);
        let bc = b.clone();
        within!(check(&a, seed, move |t, x| { let b = t.constant(bc.clone()); t.matmul(x, b) }));
        let ac = a.clone();
        within!(check(&b, seed, move |t, x| { let a = t.constant(ac.clone()); t.matmul(a, x) }));
    }

    #[test]
    fn matmul_nt_both_operands((m, k, n, seed) in dims()) {
        let a = rand_t(&[m, k], seed);
        let b = rand_t(&[n, k], seed + 1);
        let bc = b.clone();
        within!(check(&a, seed, move |t, x| { let b = t.constant(bc.clone()); t.matmul_nt(x, b) }));
        let ac = a.clone();
        within!(check(&b, seed, move |t, x| { let a = t.constant(ac.clone()); t.matmul_nt(a, x) }));
    }

    #[test]
    fn elementwise((m, n, _k, seed) in dims()) {
        let x = rand_t(&[m, n], seed);
        let o = rand_t(&[m, n], seed + 7);
        for op in 0..3 {
            let oc = o.clone();
            let e = check(&x, seed, move |t, v| {
                let c = t.constant(oc.clone());
                match op { 0 => t.add(c, v), 1 => t.sub(c, v), _ => t.mul(c, v) }
            });
            prop_assert!(e <= PRIMITIVE_TOL, "op {} err {}", op, e);
        }
        within!(check(&x, seed, |t, v| { let s = t.scale(v, -1.7); Ok(t.add_scalar(s, 0.3)) }));
        within!(check(&x, seed, |t, v| Ok(t.gelu(v))));
    }

    #[test]
    fn row_broadcasts((m, n, _k, seed) in dims()) {
        let x = rand_t(&[m, n], seed);
        let r = rand_t(&[1, n], seed + 3);
        for op in 0..2 {
            let rc = r.clone();
            let ex = check(&x, seed, move |t, v| {
                let c = t.constant(rc.clone());
                if op == 0 { t.add_row(v, c) } else { t.mul_row(v, c) }
            });
            let xc = x.clone();
            let er = check(&r, seed, move |t, v| {
                let c = t.constant(xc.clone());
                if op == 0 { t.add_row(c, v) } else { t.mul_row(c, v) }
            });
            prop_assert!(ex <= PRIMITIVE_TOL && er <= PRIMITIVE_TOL, "op {} {} {}", op, ex, er);
        }
    }

    #[test]
    fn layer_norm_all_inputs((m, n, _k, seed) in dims()) {
        // Two columns normalise to exactly +-1, whose gradient is pure noise.
        let n = n.max(3);
        let x = rand_t(&[m, n], seed);
        let s = rand_t(&[1, n], seed + 1);
        let b = rand_t(&[1, n], seed + 2);
        within!(check(&x, seed, |t, v| t.layer_norm(v, None, None)));
        let (sc, bc) = (s.clone(), b.clone());
        within!(check(&x, seed, move |t, v| {
            let (s, b) = (t.constant(sc.clone()), t.constant(bc.clone()));
            t.layer_norm(v, Some(s), Some(b))
        }));
        let (xc, bc) = (x.clone(), b.clone());
        within!(check(&s, seed, move |t, v| {
            let (x, b) = (t.constant(xc.clone()), t.constant(bc.clone()));
            t.layer_norm(x, Some(v), Some(b))
        }));
        let (xc, sc) = (x.clone(), s.clone());
        within!(check(&b, seed, move |t, v| {
            let (x, s) = (t.constant(xc.clone()), t.constant(sc.clone()));
            t.layer_norm(x, Some(s), Some(v))
        }));
    }

    #[test]
    fn softmax_masked_and_plain((m, n, _k, seed) in dims()) {
        let x = rand_t(&[m, n], seed);
        within!(check(&x, seed, |t, v| t.softmax_rows(v, None)));
        let mask: Vec<bool> = (0..n).map(|j| j == 0 || (seed >> j) & 1 == 1).collect();
        within!(check(&x, seed, move |t, v| t.softmax_rows(v, Some(&mask))));
    }

    #[test]
    fn shape_ops((m, n, k, seed) in dims()) {
        let x = rand_t(&[m, n], seed);
        let other_r = rand_t(&[k, n], seed + 1);
        let other_c = rand_t(&[m, k], seed + 2);
        within!(check(&x, seed, |t, v| t.transpose(v)));
        within!(check(&x, seed, |t, v| t.reshape(v, &[n, m])));
        within!(check(&x, seed, move |t, v| { let o = t.constant(other_r.clone()); t.concat_rows(&[o, v, o]) }));
        within!(check(&x, seed, move |t, v| { let o = t.constant(other_c.clone()); t.concat_cols(&[v, o]) }));
        let (rs, cs) = ((seed as usize) % m, (seed as usize / 7) % n);
        within!(check(&x, seed, move |t, v| t.narrow_rows(v, rs, m - rs)));
        within!(check(&x, seed, move |t, v| t.narrow_cols(v, cs, n - cs)));
    }

    #[test]
    fn reductions((m, n, _k, seed) in dims()) {
        let x = rand_t(&[m, n], seed);
        let y = rand_t(&[m, n], seed + 1);
        within!(check(&x, seed, |t, v| t.mean_rows(v)));
        within!(finite_diff_check(|t, v| Ok(t.sum(v)), &x, DEFAULT_STEP).unwrap());
        within!(finite_diff_check(|t, v| t.mean(v), &x, DEFAULT_STEP).unwrap());
        within!(finite_diff_check(move |t, v| { let c = t.constant(y.clone()); t.mse(v, c) }, &x, DEFAULT_STEP).unwrap());
    }
}

fn with_random_params(cfg: ModelConfig, seed: u64) -> Model<f64> {
    let mut m = Model::<f64>::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in m.params.iter_mut() {
        p.value = Tensor::randn(p.value.shape(), 0.3, &mut rng);
    }
    m
}

/// Flow-matching loss of one example through the full stack, including
/// the B adapter, as a function of the parameter store.
fn fm_loss_of(model: &Model<f64>, grads_for: Option<&str>) -> (f64, Option<Vec<f64>>) {
    let scene = Scene::from_class(40).with_motif(Some(Motif::Gewen));
    let lat = image_to_latent::<f64>(&render(&scene, 16).unwrap(), 4).unwrap();
    let fs = make_flow_sample(&lat.tokens, 3, 0.35).unwrap();
    let ca = clab::textcond::tokenize("large red circle left", clab::textcond::Language::A).unwrap();
    let cb = clab::textcond::tokenize("zuo bian hong da de gewen yuan", clab::textcond::Language::B).unwrap();
    let ea = model.encode(&ca).unwrap();
    let eb = model.encode(&cb).unwrap();
    let mut tape = Tape::new();
    let p = model.params.bind(&mut tape, |n| Some(n) == grads_for);
    let xv = tape.constant(fs.xt.clone());
    let ta = adapt_on_tape(&mut tape, &p, &ea).unwrap();
    let tb = adapt_on_tape(&mut tape, &p, &eb).unwrap();
    let v = model.velocity_on_tape(&mut tape, &p, xv, (4, 4), ta, tb, fs.t).unwrap();
    let l = fm_loss_on_tape(&mut tape, v, &fs).unwrap();
    let value = tape.scalar(l);
    let g = grads_for.map(|name| {
        tape.backward(l).unwrap();
        tape.grad(p.get(name).unwrap()).unwrap().to_vec()
    });
    (value, g)
}

fn end_to_end(cfg: ModelConfig) {
    let model = with_random_params(cfg, 17);
    let names: Vec<String> = model.params.iter().map(|p| p.name.clone()).filter(|n| !n.starts_with("enc_")).collect();
    let mut worst: f64 = 0.0;
    for name in &names {
        let (_, g) = fm_loss_of(&model, Some(name));
        let g = g.unwrap();
        let base = model.params.get(name).unwrap().clone();
        // A fixed, name-independent subset of coordinates keeps this fast.
        let stride = (base.len() / 6).max(1);
        let coords: Vec<usize> = (0..base.len()).step_by(stride).collect();
        let numeric = central_difference(
            |probe| {
                let mut m = model.clone();
                m.params.get_mut(name).unwrap().value = probe.clone();
                Ok(fm_loss_of(&m, None).0)
            },
            &base,
            &coords,
            DEFAULT_STEP,
        )
        .unwrap();
        let picked: Vec<f64> = coords.iter().map(|&c| g[c]).collect();
        let e = max_rel_err(&picked, &numeric);
        assert!(e <= END_TO_END_TOL, "{name}: rel err {e}");
        worst = worst.max(e);
    }
    println!("end-to-end worst rel err {worst:.3e} over {} tensors", names.len());
}

fn one_block(n_double: usize, n_single: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        d_enc: 12,
        heads: 2,
        enc_heads: 2,
        n_double,
        n_single,
        time_dim: 8,
        clab: ClabMode::KvOnly,
        ..ModelConfig::default()
    }
}

#[test]
fn double_block_fm_loss_gradients() {
    end_to_end(one_block(1, 0));
}

#[test]
fn single_block_fm_loss_gradients() {
    end_to_end(one_block(0, 1));
}

#[test]
fn query_update_branch_gradients() {
    let mut cfg = one_block(1, 0);
    cfg.clab = ClabMode::QueryUpdate;
    end_to_end(cfg);
}
