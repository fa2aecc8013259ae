//! Multi-level loss: slice-level `L_2D`, sequence-level `L_3D` and their
//! combination `L_SV = L_2D + lambda * L_3D`.
//!
//! Every function takes a batch of `B` sequences sharing one label each and
//! returns the mean over the batch of the per-sequence loss. With `B = 1`
//! they are exactly the per-sequence sums.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

fn check_targets(targets: &[usize]) -> Result<usize> {
    if targets.is_empty() {
        return Err(Error::Config("loss needs at least one sequence".into()));
    }
    Ok(targets.len())
}

/// `sum_t CE(Y^s_t, Y*)` from slice logits `[B*T, K]` (row `b*T + t`).
pub fn loss_2d<E: Element>(tape: &mut Tape<E>, slice_logits: Var, targets: &[usize], seq_len: usize) -> Result<Var> {
    let b = check_targets(targets)?;
    let rows: Vec<usize> = targets
        .iter()
        .flat_map(|&y| std::iter::repeat_n(y, seq_len))
        .collect();
    let ce = tape.cross_entropy(slice_logits, &rows)?;
    tape.mul_scalar(ce, E::from_f64_lossy(1.0 / b as f64))
}

/// `sum_t CE(Y_t, Y*) + CE(Y_f, Y*)` from per-position logits (`T` tensors
/// of `[B, K]`) and ensemble logits `[B, K]`.
pub fn loss_3d<E: Element>(tape: &mut Tape<E>, seq_logits: &[Var], final_logits: Var, targets: &[usize]) -> Result<Var> {
    let b = check_targets(targets)?;
    let mut total = tape.cross_entropy(final_logits, targets)?;
    for &l in seq_logits {
        let ce = tape.cross_entropy(l, targets)?;
        total = tape.add(total, ce)?;
    }
    tape.mul_scalar(total, E::from_f64_lossy(1.0 / b as f64))
}

/// `L_2D + lambda * L_3D`.
pub fn loss_sv<E: Element>(tape: &mut Tape<E>, l2d: Var, l3d: Var, lambda: f64) -> Result<Var> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be finite and >= 0, got {lambda}")));
    }
    let weighted = tape.mul_scalar(l3d, E::from_f64_lossy(lambda))?;
    tape.add(l2d, weighted)
}
