//! Shared building blocks expressed as tape operations.

use crate::error::Result;
use crate::numerics::{Tape, Tensor, Var};
use crate::params::Bound;
use crate::scalar::Scalar;

/// `x · W + b` with parameters `{prefix}.w` `[in, out]` and optional `{prefix}.b`.
pub fn linear<T: Scalar>(tape: &mut Tape<T>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let w = p.get(&format!("{prefix}.w"))?;
    let y = tape.matmul(x, w)?;
    match p.try_get(&format!("{prefix}.b")) {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Multi-head scaled dot-product attention; `q: [nq, d]`, `k, v: [nk, d]`.
pub fn attention<T: Scalar>(tape: &mut Tape<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
    let d = tape.shape(q)[1];
    let dh = d / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.narrow_cols(q, h * dh, dh)?;
        let kh = tape.narrow_cols(k, h * dh, dh)?;
        let vh = tape.narrow_cols(v, h * dh, dh)?;
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let a = tape.softmax_rows(s, None)?;
        outs.push(tape.matmul(a, vh)?);
    }
    if heads == 1 {
        Ok(outs[0])
    } else {
        tape.concat_cols(&outs)
    }
}

/// Two-layer GELU MLP: `{prefix}.fc1`, `{prefix}.fc2`.
pub fn mlp<T: Scalar>(tape: &mut Tape<T>, p: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(tape, p, x, &format!("{prefix}.fc1"))?;
    let h = tape.gelu(h);
    linear(tape, p, h, &format!("{prefix}.fc2"))
}

/// Sinusoidal table `[len, dim]` over (possibly fractional) positions.
pub fn sinusoid<T: Scalar>(positions: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    Tensor::from_fn(&[positions.len(), dim], |i| {
        let (p, j) = (positions[i / dim], i % dim);
        let k = (j % half.max(1)) as f64;
        let freq = (-(10_000f64.ln()) * k / half.max(1) as f64).exp();
        let a = p * freq;
        T::c(if j < half { a.sin() } else { a.cos() })
    })
}
