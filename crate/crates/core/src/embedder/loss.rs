//! Temporal and instance-wise contrastive losses.
//!
//! Both take per-timestamp representations laid out as `[B, L, D]`
//! (series, overlap timestamp, feature) for the two crops.

use crate::error::{Error, Result};
use crate::numcore::{Tape, Tensor, Var};

/// For `a, b: [G, N, D]`, every anchor `a[g, n]` is contrasted against
/// `b[g, *]` and `a[g, m != n]`; the positive is `b[g, n]`. Returns the mean
/// of `-log softmax` over all `G * N` anchors.
fn grouped_contrastive(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let shape = tape.shape(a).to_vec();
    if shape.len() != 3 || tape.shape(b) != shape.as_slice() {
        return Err(Error::Shape {
            op: "contrastive",
            lhs: shape,
            rhs: tape.shape(b).to_vec(),
        });
    }
    let (groups, n) = (shape[0], shape[1]);
    let z = tape.concat(&[a, b], 1)?; // [G, 2N, D]
    let zt = tape.transpose(z, 1, 2)?; // [G, D, 2N]
    let sim = tape.bmm(z, zt)?; // [G, 2N, 2N]
    let rows = tape.slice(sim, 1, 0, n)?; // anchors from `a`: [G, N, 2N]

    let mut keep = vec![true; groups * n * 2 * n];
    let mut positive = vec![0.0; groups * n * 2 * n];
    for g in 0..groups {
        for i in 0..n {
            let row = (g * n + i) * 2 * n;
            keep[row + i] = false;
            positive[row + n + i] = 1.0;
        }
    }
    let lse = tape.logsumexp_last(rows, Some(keep))?; // [G, N]
    let picked = tape.mask_mul(rows, positive)?;
    let pos = tape.sum_last(picked); // [G, N]
    let per_anchor = tape.sub(lse, pos)?;
    Ok(tape.mean_all(per_anchor))
}

/// Mean temporal loss over series and overlap timestamps.
pub fn temporal_loss(tape: &mut Tape, h1: Var, h2: Var) -> Result<Var> {
    grouped_contrastive(tape, h1, h2)
}

/// Mean instance-wise loss over series and overlap timestamps.
pub fn instance_loss(tape: &mut Tape, h1: Var, h2: Var) -> Result<Var> {
    let a = tape.transpose(h1, 0, 1)?;
    let b = tape.transpose(h2, 0, 1)?;
    grouped_contrastive(tape, a, b)
}

/// `temporal + instance`, optionally averaged over successive 2x max-pooled
/// versions of the representations until one timestamp remains.
pub fn total_loss(tape: &mut Tape, h1: Var, h2: Var, hierarchical: bool) -> Result<Var> {
    let (mut a, mut b) = (h1, h2);
    let mut levels = Vec::new();
    loop {
        let t = temporal_loss(tape, a, b)?;
        let i = instance_loss(tape, a, b)?;
        levels.push(tape.add(t, i)?);
        let len = tape.shape(a)[1];
        if !hierarchical || len <= 1 {
            break;
        }
        a = pool_time(tape, a)?;
        b = pool_time(tape, b)?;
    }
    if levels.len() == 1 {
        return Ok(levels[0]);
    }
    let stacked = tape.concat(&levels, 0)?;
    Ok(tape.mean_all(stacked))
}

/// Window-2 stride-2 max-pool along the time axis of `[B, L, D]`.
pub fn pool_time(tape: &mut Tape, h: Var) -> Result<Var> {
    let ct = tape.transpose(h, 1, 2)?;
    let pooled = tape.maxpool_last(ct, 2, 2)?;
    tape.transpose(pooled, 1, 2)
}

fn eval(
    h1: &Tensor,
    h2: &Tensor,
    f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let a = tape.leaf(h1);
    let b = tape.leaf(h2);
    let l = f(&mut tape, a, b)?;
    Ok(tape.value(l)[0])
}

/// Value-only convenience wrappers over `[B, L, D]` tensors.
pub fn temporal_loss_value(h1: &Tensor, h2: &Tensor) -> Result<f64> {
    eval(h1, h2, temporal_loss)
}

pub fn instance_loss_value(h1: &Tensor, h2: &Tensor) -> Result<f64> {
    eval(h1, h2, instance_loss)
}

pub fn total_loss_value(h1: &Tensor, h2: &Tensor, hierarchical: bool) -> Result<f64> {
    eval(h1, h2, |t, a, b| total_loss(t, a, b, hierarchical))
}
