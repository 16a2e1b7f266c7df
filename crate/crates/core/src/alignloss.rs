//! Representation alignment between B-language and A-language features:
//! a pooled term `L_p`, a length-resampled sequence term `L_inter`, and the
//! threshold gate that combines them into `L_RA`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::scalar::Scalar;
use crate::textcond::TextEmbedding;

/// Default gate threshold.
pub const DEFAULT_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    /// Below the threshold only `L_p` is kept.
    Equation,
    /// Below the threshold the alignment loss is zero.
    Text,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignmentConfig {
    pub d_threshold: f64,
    pub gate_mode: GateMode,
    pub use_pool: bool,
    pub use_inter: bool,
}

impl Default for AlignmentConfig {
    fn default() -> Self {
        Self {
            d_threshold: DEFAULT_THRESHOLD,
            gate_mode: GateMode::Equation,
            use_pool: true,
            use_inter: true,
        }
    }
}

impl AlignmentConfig {
    /// No alignment loss at all.
    pub fn disabled() -> Self {
        Self {
            use_pool: false,
            use_inter: false,
            ..Self::default()
        }
    }

    pub fn is_active(&self) -> bool {
        self.use_pool || self.use_inter
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.d_threshold >= 0.0 && self.d_threshold.is_finite()) {
            return Err(Error::Config("alignment.d_threshold must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Per-batch loss breakdown. `total == l_gen + l_ra`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_gen: f64,
    pub l_p: f64,
    pub l_inter: f64,
    pub l_ra: f64,
    pub total: f64,
    pub gate_fired: bool,
}

/// Which alignment terms enter `L_RA`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateDecision {
    pub pool: bool,
    pub inter: bool,
    pub fired: bool,
}

/// Applies the threshold gate. The condition is evaluated on the
/// enabled-term sum and carries no gradient.
pub fn gate<T: Scalar>(l_p: T, l_inter: T, cfg: &AlignmentConfig) -> GateDecision {
    let lp = if cfg.use_pool { l_p } else { T::zero() };
    let li = if cfg.use_inter { l_inter } else { T::zero() };
    if !cfg.is_active() {
        return GateDecision { pool: false, inter: false, fired: false };
    }
    if lp + li >= T::c(cfg.d_threshold) {
        return GateDecision { pool: cfg.use_pool, inter: cfg.use_inter, fired: false };
    }
    match cfg.gate_mode {
        GateMode::Equation => GateDecision { pool: cfg.use_pool, inter: false, fired: true },
        GateMode::Text => GateDecision { pool: false, inter: false, fired: true },
    }
}

/// `(l_ra, gate_fired)`.
pub fn gated_ra_loss<T: Scalar>(l_p: T, l_inter: T, cfg: &AlignmentConfig) -> (T, bool) {
    let g = gate(l_p, l_inter, cfg);
    let mut l = T::zero();
    if g.pool {
        l += l_p;
    }
    if g.inter {
        l += l_inter;
    }
    (l, g.fired)
}

fn check_pair<T: Scalar>(a: &TextEmbedding<T>, b: &TextEmbedding<T>) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySequence("alignment loss"));
    }
    if a.dim() != b.dim() {
        return Err(Error::shape("alignment loss", a.tokens.shape(), b.tokens.shape()));
    }
    Ok(())
}

/// Linear resampling weights `[target_len, source_len]` with aligned
/// endpoints; a single output row is the source mean.
pub fn interp_matrix<T: Scalar>(source_len: usize, target_len: usize) -> Result<Tensor<T>> {
    if source_len == 0 || target_len == 0 {
        return Err(Error::EmptySequence("interp_seq"));
    }
    let mut w = vec![T::zero(); target_len * source_len];
    if target_len == 1 {
        let inv = T::one() / T::from_usize(source_len).unwrap();
        w.iter_mut().for_each(|v| *v = inv);
        return Tensor::new(&[1, source_len], w);
    }
    for i in 0..target_len {
        let pos = (i * (source_len - 1)) as f64 / (target_len - 1) as f64;
        let lo = (pos.floor() as usize).min(source_len - 1);
        let frac = pos - lo as f64;
        if frac == 0.0 || lo + 1 >= source_len {
            w[i * source_len + lo] = T::one();
        } else {
            w[i * source_len + lo] = T::c(1.0 - frac);
            w[i * source_len + lo + 1] = T::c(frac);
        }
    }
    Tensor::new(&[target_len, source_len], w)
}

fn resample<T: Scalar>(tokens: &Tensor<T>, target_len: usize) -> Result<Tensor<T>> {
    let (l, d) = (tokens.shape()[0], tokens.shape()[1]);
    if l == target_len {
        return Ok(tokens.clone());
    }
    let w = interp_matrix::<T>(l, target_len)?;
    let mut out = vec![T::zero(); target_len * d];
    for i in 0..target_len {
        for j in 0..l {
            let c = w.data()[i * l + j];
            if c == T::zero() {
                continue;
            }
            for (o, &x) in out[i * d..(i + 1) * d].iter_mut().zip(tokens.row(j)) {
                *o += c * x;
            }
        }
    }
    Tensor::new(&[target_len, d], out)
}

pub fn interp_seq<T: Scalar>(tau: &TextEmbedding<T>, target_len: usize) -> Result<TextEmbedding<T>> {
    if tau.is_empty() {
        return Err(Error::EmptySequence("interp_seq"));
    }
    Ok(TextEmbedding::new(tau.language, resample(&tau.tokens, target_len)?))
}

fn mean_rows<T: Scalar>(t: &Tensor<T>) -> Vec<T> {
    let (l, d) = (t.shape()[0], t.shape()[1]);
    let mut m = vec![T::zero(); d];
    for i in 0..l {
        for (a, &x) in m.iter_mut().zip(t.row(i)) {
            *a += x;
        }
    }
    let n = T::from_usize(l).unwrap();
    m.iter_mut().for_each(|v| *v /= n);
    m
}

fn mse<T: Scalar>(a: &[T], b: &[T]) -> T {
    let s: T = a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum();
    s / T::from_usize(a.len()).unwrap()
}

/// MSE between the sequence means.
pub fn pool_loss<T: Scalar>(tau_b: &TextEmbedding<T>, tau_a_aux: &TextEmbedding<T>) -> Result<T> {
    check_pair(tau_b, tau_a_aux)?;
    Ok(mse(&mean_rows(&tau_b.tokens), &mean_rows(&tau_a_aux.tokens)))
}

/// MSE after resampling `tau_a_aux` to the length of `tau_b`.
pub fn inter_loss<T: Scalar>(tau_b: &TextEmbedding<T>, tau_a_aux: &TextEmbedding<T>) -> Result<T> {
    check_pair(tau_b, tau_a_aux)?;
    let r = resample(&tau_a_aux.tokens, tau_b.len())?;
    Ok(mse(tau_b.tokens.data(), r.data()))
}

/// Tape form of [`pool_loss`]; `tau_a_aux` is a constant.
pub fn pool_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, tau_b: Var, tau_a_aux: &Tensor<T>) -> Result<Var> {
    if tape.shape(tau_b)[0] == 0 || tau_a_aux.shape()[0] == 0 {
        return Err(Error::EmptySequence("pool_loss"));
    }
    let mb = tape.mean_rows(tau_b)?;
    let ma = Tensor::new(&[1, tau_a_aux.cols()], mean_rows(tau_a_aux))?;
    let ma = tape.constant(ma);
    tape.mse(mb, ma)
}

/// Tape form of [`inter_loss`]; `tau_a_aux` is a constant.
pub fn inter_loss_on_tape<T: Scalar>(tape: &mut Tape<T>, tau_b: Var, tau_a_aux: &Tensor<T>) -> Result<Var> {
    let lb = tape.shape(tau_b)[0];
    if lb == 0 || tau_a_aux.shape()[0] == 0 {
        return Err(Error::EmptySequence("inter_loss"));
    }
    let r = tape.constant(resample(tau_a_aux, lb)?);
    tape.mse(tau_b, r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::textcond::Language;

    fn emb(rows: &[&[f64]]) -> TextEmbedding<f64> {
        TextEmbedding::new(Language::B, Tensor::from_rows(rows))
    }

    #[test]
    fn gate_examples() {
        let c = AlignmentConfig::default();
        let (l, f) = gated_ra_loss(0.04, 0.03, &c);
        assert!((l - 0.07f64).abs() < 1e-15 && !f);
        let (l, f) = gated_ra_loss(0.01, 0.02, &c);
        assert!(l == 0.01 && f);
        let t = AlignmentConfig { gate_mode: GateMode::Text, ..c.clone() };
        assert_eq!(gated_ra_loss(0.01, 0.02, &t), (0.0, true));
        let z = AlignmentConfig { d_threshold: 0.0, ..c };
        assert_eq!(gated_ra_loss(0.0, 0.0, &z), (0.0, false));
    }

    #[test]
    fn pooling_collapses_length() {
        let b = emb(&[&[1.0, 2.0], &[3.0, -4.0]]);
        let a = emb(&[&[2.0, -1.0]]);
        assert_eq!(pool_loss(&b, &a).unwrap(), 0.0);
        assert_eq!(pool_loss(&b, &b).unwrap(), 0.0);
    }

    #[test]
    fn midpoint_resampling() {
        let s = emb(&[&[0.0, 2.0], &[4.0, 6.0]]);
        let r = interp_seq(&s, 3).unwrap();
        assert_eq!(r.tokens.data(), &[0.0, 2.0, 2.0, 4.0, 4.0, 6.0]);
        assert_eq!(interp_seq(&s, 2).unwrap(), s);
        let m = interp_seq(&s, 1).unwrap();
        assert_eq!(m.tokens.data(), &[2.0, 4.0]);
    }

    #[test]
    fn empty_sequences_are_errors() {
        let e = TextEmbedding::<f64>::empty(Language::B, 2);
        let s = emb(&[&[1.0, 1.0]]);
        assert!(pool_loss(&e, &s).is_err());
        assert!(inter_loss(&s, &e).is_err());
        assert!(interp_seq(&e, 3).is_err());
    }
}
