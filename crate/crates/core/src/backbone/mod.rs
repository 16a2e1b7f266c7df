//! MMDiT velocity model with the secondary-language key/value branch.
//!
//! Stack: patch tokens → input projection (+2-D sinusoidal positions) →
//! `n_double` double-stream blocks → `n_single` single-stream blocks →
//! AdaLN output head. Every block is modulated by the timestep embedding
//! (shift/scale/gate, zero-initialized).
//!
//! The branch adds, per block, key and value projections `clab.<block>.k`
//! and `clab.<block>.v` applied to the layer-normed B-language tokens. Those
//! keys and values join the block's joint attention; B tokens never issue
//! queries and leave every block unchanged. [`ClabMode::QueryUpdate`] is the
//! ablated alternative where they do both.

mod patch;

pub use patch::{image_to_latent, latent_to_image, patchify, unpatchify, LatentImage};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{attention, linear, mlp, sinusoid};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, Init, ParamStore, Provenance};
use crate::scalar::Scalar;
use crate::textcond::{self, Caption, Language, TextDims, TextEmbedding};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClabMode {
    /// No secondary-language branch.
    Off,
    /// Key/value injection only.
    KvOnly,
    /// Ablation: B tokens also query and are updated.
    QueryUpdate,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_enc: usize,
    pub heads: usize,
    pub enc_heads: usize,
    pub n_double: usize,
    pub n_single: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub time_dim: usize,
    pub pos_embed: bool,
    pub clab: ClabMode,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            d_enc: 48,
            heads: 4,
            enc_heads: 4,
            n_double: 2,
            n_single: 2,
            mlp_ratio: 2,
            patch: 4,
            time_dim: 64,
            pos_embed: true,
            clab: ClabMode::KvOnly,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("model.d_model must be a positive multiple of model.heads");
        }
        if self.enc_heads == 0 || self.d_enc % self.enc_heads != 0 {
            return bad("model.d_enc must be a positive multiple of model.enc_heads");
        }
        if self.d_model % 4 != 0 || self.time_dim % 2 != 0 {
            return bad("model.d_model must be divisible by 4 and model.time_dim even");
        }
        if self.patch == 0 || self.mlp_ratio == 0 {
            return bad("model.patch and model.mlp_ratio must be positive");
        }
        Ok(())
    }

    pub fn text_dims(&self) -> TextDims {
        TextDims {
            d_enc: self.d_enc,
            d_model: self.d_model,
            enc_heads: self.enc_heads,
        }
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * 3
    }

    pub fn block_prefixes(&self) -> Vec<(BlockKind, String)> {
        (0..self.n_double)
            .map(|i| (BlockKind::Double, format!("double.{i}")))
            .chain((0..self.n_single).map(|j| (BlockKind::Single, format!("single.{j}"))))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Double,
    Single,
}

/// True for secondary-branch projection parameters.
pub fn is_clab_param(name: &str) -> bool {
    name.starts_with("clab.")
}

/// Model parameters plus their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

fn add_linear<T: Scalar>(s: &mut ParamStore<T>, seed: u64, prefix: &str, fan_in: usize, fan_out: usize, zero: bool) {
    let w = if zero { Init::Zeros } else { Init::Normal(1.0 / (fan_in as f64).sqrt()) };
    s.init(seed, &format!("{prefix}.w"), &[fan_in, fan_out], w);
    s.init(seed, &format!("{prefix}.b"), &[fan_out], Init::Zeros);
}

fn add_mlp<T: Scalar>(s: &mut ParamStore<T>, seed: u64, prefix: &str, d: usize, hidden: usize) {
    add_linear(s, seed, &format!("{prefix}.fc1"), d, hidden, false);
    add_linear(s, seed, &format!("{prefix}.fc2"), hidden, d, false);
}

/// Key projection init scale for the secondary branch.
pub const CLAB_KEY_INIT_STD: f64 = 0.02;

impl<T: Scalar> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let seed = config.init_seed;
        let d = config.d_model;
        let hidden = d * config.mlp_ratio;
        let dims = config.text_dims();
        textcond::init_text_params(&mut s, Language::A, dims, seed);
        textcond::init_text_params(&mut s, Language::B, dims, seed);
        add_linear(&mut s, seed, "input", config.patch_dim(), d, false);
        add_linear(&mut s, seed, "time.fc1", config.time_dim, d, false);
        add_linear(&mut s, seed, "time.fc2", d, d, false);
        for (kind, pre) in config.block_prefixes() {
            match kind {
                BlockKind::Double => {
                    for stream in ["img", "txt"] {
                        let p = format!("{pre}.{stream}");
                        add_linear(&mut s, seed, &format!("{p}.mod"), d, 6 * d, true);
                        add_linear(&mut s, seed, &format!("{p}.qkv"), d, 3 * d, false);
                        add_linear(&mut s, seed, &format!("{p}.out"), d, d, false);
                        add_mlp(&mut s, seed, &format!("{p}.mlp"), d, hidden);
                    }
                }
                BlockKind::Single => {
                    add_linear(&mut s, seed, &format!("{pre}.mod"), d, 3 * d, true);
                    add_linear(&mut s, seed, &format!("{pre}.qkv"), d, 3 * d, false);
                    add_linear(&mut s, seed, &format!("{pre}.mlp_in"), d, hidden, false);
                    add_linear(&mut s, seed, &format!("{pre}.lin2"), d + hidden, d, false);
                }
            }
        }
        add_linear(&mut s, seed, "final.mod", d, 2 * d, true);
        add_linear(&mut s, seed, "final.out", d, config.patch_dim(), true);
        let mut model = Model { config, params: s };
        model.install_clab(model.config.clab);
        Ok(model)
    }

    /// Adds (or removes) the secondary-branch parameters for `mode`.
    /// Existing backbone parameters are untouched.
    pub fn install_clab(&mut self, mode: ClabMode) {
        self.config.clab = mode;
        let seed = self.config.init_seed;
        let d = self.config.d_model;
        let mut keep = ParamStore::new();
        for p in self.params.iter() {
            if !is_clab_param(&p.name) {
                keep.insert(&p.name, p.value.clone(), p.provenance);
            }
        }
        if mode != ClabMode::Off {
            for (_, pre) in self.config.block_prefixes() {
                let c = format!("clab.{pre}");
                let existing = |n: &str| self.params.get(n).ok().cloned();
                let mut put = |name: String, init: Init| match existing(&name) {
                    Some(v) => keep.insert(&name, v, self.params.iter().find(|p| p.name == name).unwrap().provenance),
                    None => keep.init(seed, &name, &[d, d], init),
                };
                put(format!("{c}.k.w"), Init::Normal(CLAB_KEY_INIT_STD));
                put(format!("{c}.v.w"), Init::Zeros);
                if mode == ClabMode::QueryUpdate {
                    put(format!("{c}.q.w"), Init::Normal(CLAB_KEY_INIT_STD));
                    put(format!("{c}.o.w"), Init::Zeros);
                }
            }
        }
        self.params = keep;
    }

    /// Marks every parameter selected by `pred` as produced by `prov`.
    pub fn stamp(&mut self, pred: impl Fn(&str) -> bool, prov: Provenance) {
        for p in self.params.iter_mut() {
            if pred(&p.name) {
                p.provenance = prov;
            }
        }
    }

    pub fn encode(&self, caption: &Caption) -> Result<TextEmbedding<T>> {
        textcond::encode(&self.params, self.config.text_dims(), caption)
    }

    /// Encoder followed by the language's adapter, without gradients.
    pub fn condition(&self, caption: &Caption) -> Result<TextEmbedding<T>> {
        let e = self.encode(caption)?;
        textcond::adapt(&self.params, &e)
    }

    pub fn empty_condition(&self, lang: Language) -> TextEmbedding<T> {
        TextEmbedding::empty(lang, self.config.d_model)
    }

    fn image_positions(&self, gh: usize, gw: usize) -> Tensor<T> {
        let d = self.config.d_model;
        let rows: Vec<f64> = (0..gh * gw).map(|i| ((i / gw) as f64 + 0.5) / gh as f64 * 8.0).collect();
        let cols: Vec<f64> = (0..gh * gw).map(|i| ((i % gw) as f64 + 0.5) / gw as f64 * 8.0).collect();
        let pr = sinusoid::<T>(&rows, d / 2);
        let pc = sinusoid::<T>(&cols, d / 2);
        Tensor::from_fn(&[gh * gw, d], |k| {
            let (i, j) = (k / d, k % d);
            if j < d / 2 {
                pr.data()[i * (d / 2) + j]
            } else {
                pc.data()[i * (d / 2) + j - d / 2]
            }
        })
    }

    /// Velocity prediction on a tape. `x` is `[tokens, patch_dim]`;
    /// `tau_a`, `tau_b` are adapted text tokens `[len, d_model]` (either may
    /// have zero rows).
    #[allow(clippy::too_many_arguments)]
    pub fn velocity_on_tape(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: (usize, usize),
        tau_a: Var,
        tau_b: Var,
        t: T,
    ) -> Result<Var> {
        Ok(self.trace_on_tape(tape, p, x, grid, tau_a, tau_b, t)?.0)
    }

    /// As [`Model::velocity_on_tape`], also returning the B stream as it
    /// leaves the last block.
    #[allow(clippy::too_many_arguments)]
    pub fn trace_on_tape(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        grid: (usize, usize),
        tau_a: Var,
        tau_b: Var,
        t: T,
    ) -> Result<(Var, Var)> {
        let cfg = &self.config;
        let d = cfg.d_model;
        let n = grid.0 * grid.1;
        if tape.shape(x) != [n, cfg.patch_dim()] {
            return Err(Error::shape("velocity", tape.shape(x), &[n, cfg.patch_dim()]));
        }
        for tau in [tau_a, tau_b] {
            if tape.shape(tau).len() != 2 || tape.shape(tau)[1] != d {
                return Err(Error::shape("velocity text stream", tape.shape(tau), &[0, d]));
            }
        }
        if !t.is_finite() {
            return Err(Error::Config(format!("time {t} is not finite")));
        }
        let mut img = linear(tape, p, x, "input")?;
        if cfg.pos_embed {
            let pos = tape.constant(self.image_positions(grid.0, grid.1));
            img = tape.add(img, pos)?;
        }
        let temb = tape.constant(sinusoid(&[t.as_f64() * 1000.0], cfg.time_dim));
        let c = linear(tape, p, temb, "time.fc1")?;
        let c = tape.gelu(c);
        let c = linear(tape, p, c, "time.fc2")?;
        let c = tape.gelu(c);

        let mut streams = Streams {
            img,
            txt: tau_a,
            b: tau_b,
        };
        for (kind, pre) in cfg.block_prefixes() {
            streams = match kind {
                BlockKind::Double => self.double_block(tape, p, &pre, streams, c)?,
                BlockKind::Single => self.single_block(tape, p, &pre, streams, c)?,
            };
        }
        let m = linear(tape, p, c, "final.mod")?;
        let shift = tape.narrow_cols(m, 0, d)?;
        let scale = tape.narrow_cols(m, d, d)?;
        let y = modulate(tape, streams.img, shift, scale)?;
        Ok((linear(tape, p, y, "final.out")?, streams.b))
    }

    fn double_block(&self, tape: &mut Tape<T>, p: &Bound, pre: &str, s: Streams, c: Var) -> Result<Streams> {
        let d = self.config.d_model;
        let mi = linear(tape, p, c, &format!("{pre}.img.mod"))?;
        let mi = chunks(tape, mi, 6, d)?;
        let mt = linear(tape, p, c, &format!("{pre}.txt.mod"))?;
        let mt = chunks(tape, mt, 6, d)?;
        let img_n = modulate(tape, s.img, mi[0], mi[1])?;
        let txt_n = modulate(tape, s.txt, mt[0], mt[1])?;
        let j = self.joint_attention(tape, p, pre, JointInput::Double { img: img_n, txt: txt_n }, s.b)?;
        let n_img = tape.shape(s.img)[0];
        let n_txt = tape.shape(s.txt)[0];
        let a_img = tape.narrow_rows(j.main, 0, n_img)?;
        let a_txt = tape.narrow_rows(j.main, n_img, n_txt)?;
        let img = residual_stream(tape, p, &format!("{pre}.img"), s.img, a_img, &mi)?;
        let txt = residual_stream(tape, p, &format!("{pre}.txt"), s.txt, a_txt, &mt)?;
        let b = self.update_b(tape, p, pre, s.b, j.b)?;
        Ok(Streams { img, txt, b })
    }

    fn single_block(&self, tape: &mut Tape<T>, p: &Bound, pre: &str, s: Streams, c: Var) -> Result<Streams> {
        let d = self.config.d_model;
        let n_img = tape.shape(s.img)[0];
        let n_txt = tape.shape(s.txt)[0];
        let m = linear(tape, p, c, &format!("{pre}.mod"))?;
        let m = chunks(tape, m, 3, d)?;
        let x = tape.concat_rows(&[s.img, s.txt])?;
        let xn = modulate(tape, x, m[0], m[1])?;
        let j = self.joint_attention(tape, p, pre, JointInput::Single { x: xn }, s.b)?;
        let h = linear(tape, p, xn, &format!("{pre}.mlp_in"))?;
        let h = tape.gelu(h);
        let cat = tape.concat_cols(&[j.main, h])?;
        let out = linear(tape, p, cat, &format!("{pre}.lin2"))?;
        let out = tape.mul_row(out, m[2])?;
        let x = tape.add(x, out)?;
        let img = tape.narrow_rows(x, 0, n_img)?;
        let txt = tape.narrow_rows(x, n_img, n_txt)?;
        let b = self.update_b(tape, p, pre, s.b, j.b)?;
        Ok(Streams { img, txt, b })
    }

    fn update_b(&self, tape: &mut Tape<T>, p: &Bound, pre: &str, b: Var, attn_b: Option<Var>) -> Result<Var> {
        match attn_b {
            Some(a) => {
                let o = p.get(&format!("clab.{pre}.o.w"))?;
                let delta = tape.matmul(a, o)?;
                tape.add(b, delta)
            }
            None => Ok(b),
        }
    }

    /// Joint attention of one block. Queries come from the image and A
    /// streams; keys and values additionally include the B stream projected
    /// through the block's branch projections.
    pub fn joint_attention(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        pre: &str,
        input: JointInput,
        tau_b: Var,
    ) -> Result<JointOutput> {
        let d = self.config.d_model;
        let (q, k, v) = match input {
            JointInput::Double { img, txt } => {
                if tape.shape(img)[1] != tape.shape(txt)[1] {
                    return Err(Error::shape("joint_attention", tape.shape(img), tape.shape(txt)));
                }
                let qi = linear(tape, p, img, &format!("{pre}.img.qkv"))?;
                let qt = linear(tape, p, txt, &format!("{pre}.txt.qkv"))?;
                let qkv = tape.concat_rows(&[qi, qt])?;
                split_qkv(tape, qkv, d)?
            }
            JointInput::Single { x } => {
                let qkv = linear(tape, p, x, &format!("{pre}.qkv"))?;
                split_qkv(tape, qkv, d)?
            }
        };
        let n_main = tape.shape(q)[0];
        let n_b = tape.shape(tau_b)[0];
        let mode = self.config.clab;
        if mode == ClabMode::Off || n_b == 0 {
            let main = attention(tape, q, k, v, self.config.heads)?;
            return Ok(JointOutput { main, b: None });
        }
        if tape.shape(tau_b)[1] != d {
            return Err(Error::shape("joint_attention", tape.shape(q), tape.shape(tau_b)));
        }
        let bn = tape.layer_norm(tau_b, None, None)?;
        let kb = tape.matmul(bn, p.get(&format!("clab.{pre}.k.w"))?)?;
        let vb = tape.matmul(bn, p.get(&format!("clab.{pre}.v.w"))?)?;
        let k = tape.concat_rows(&[k, kb])?;
        let v = tape.concat_rows(&[v, vb])?;
        if mode == ClabMode::QueryUpdate {
            let qb = tape.matmul(bn, p.get(&format!("clab.{pre}.q.w"))?)?;
            let q = tape.concat_rows(&[q, qb])?;
            let all = attention(tape, q, k, v, self.config.heads)?;
            let main = tape.narrow_rows(all, 0, n_main)?;
            let b = tape.narrow_rows(all, n_main, n_b)?;
            return Ok(JointOutput { main, b: Some(b) });
        }
        let main = attention(tape, q, k, v, self.config.heads)?;
        Ok(JointOutput { main, b: None })
    }

    /// Velocity for adapted conditions, without gradients.
    pub fn forward_velocity(
        &self,
        x: &LatentImage<T>,
        tau_a: &TextEmbedding<T>,
        tau_b: &TextEmbedding<T>,
        t: T,
    ) -> Result<Tensor<T>> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::Config(format!("time {t} outside [0, 1]")));
        }
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, |_| false);
        let xv = tape.constant(x.tokens.clone());
        let a = tape.constant(tau_a.tokens.clone());
        let b = tape.constant(tau_b.tokens.clone());
        let v = self.velocity_on_tape(&mut tape, &p, xv, (x.grid_h, x.grid_w), a, b, t)?;
        Ok(tape.value(v).clone())
    }
}

#[derive(Clone, Copy)]
struct Streams {
    img: Var,
    txt: Var,
    b: Var,
}

/// Normalized block input for [`Model::joint_attention`].
#[derive(Clone, Copy, Debug)]
pub enum JointInput {
    /// Separate image and A-text rows (per-stream projections).
    Double { img: Var, txt: Var },
    /// Concatenated `[image; A-text]` rows (shared projection).
    Single { x: Var },
}

pub struct JointOutput {
    /// Attention output for the image rows followed by the A rows.
    pub main: Var,
    /// B-stream attention output, only in [`ClabMode::QueryUpdate`].
    pub b: Option<Var>,
}

fn split_qkv<T: Scalar>(tape: &mut Tape<T>, qkv: Var, d: usize) -> Result<(Var, Var, Var)> {
    Ok((
        tape.narrow_cols(qkv, 0, d)?,
        tape.narrow_cols(qkv, d, d)?,
        tape.narrow_cols(qkv, 2 * d, d)?,
    ))
}

fn chunks<T: Scalar>(tape: &mut Tape<T>, m: Var, n: usize, d: usize) -> Result<Vec<Var>> {
    (0..n).map(|i| tape.narrow_cols(m, i * d, d)).collect()
}

/// `LN(x) · (1 + scale) + shift`.
fn modulate<T: Scalar>(tape: &mut Tape<T>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let s1 = tape.add_scalar(scale, T::one());
    tape.layer_norm(x, Some(s1), Some(shift))
}

/// Gated attention-output and MLP updates of one double-block stream.
fn residual_stream<T: Scalar>(tape: &mut Tape<T>, p: &Bound, pre: &str, x: Var, attn: Var, m: &[Var]) -> Result<Var> {
    let o = linear(tape, p, attn, &format!("{pre}.out"))?;
    let o = tape.mul_row(o, m[2])?;
    let x = tape.add(x, o)?;
    let h = modulate(tape, x, m[3], m[4])?;
    let h = mlp(tape, p, h, &format!("{pre}.mlp"))?;
    let h = tape.mul_row(h, m[5])?;
    tape.add(x, h)
}

pub type Model32 = Model<f32>;
pub type Model64 = Model<f64>;
