//! Training losses: negative mean cosine alignment between predicted and
//! teacher visual tokens (plus an MSE variant), and mean cross-entropy over
//! text tokens.

use crate::error::{Result, StabError};
use crate::tensor::{Tape, Var};

/// Epsilon added to each row norm so zero rows at init cannot divide by zero.
pub const COSINE_EPS: f64 = 1e-8;

/// `−(1/M)·Σ cos(pred_i, teacher_i)`; −1 when rows are equal, 0 when
/// orthogonal, +1 when negated.
pub fn distill_cosine(tape: &Tape, pred: Var, teacher: Var) -> Result<Var> {
    let (ps, ts) = (tape.shape(pred), tape.shape(teacher));
    if ps != ts || ps.len() != 2 {
        return Err(StabError::shape(format!(
            "distillation rows differ: {ps:?} vs {ts:?}"
        )));
    }
    let dot = tape.rows_dot(pred, teacher);
    let np = tape.add_scalar(tape.sqrt_guard(tape.rows_dot(pred, pred)), COSINE_EPS);
    let nt = tape.add_scalar(tape.sqrt_guard(tape.rows_dot(teacher, teacher)), COSINE_EPS);
    let cos = tape.div(dot, tape.mul(np, nt));
    Ok(tape.neg(tape.mean_all(cos)))
}

/// Mean squared error over all entries.
pub fn distill_mse(tape: &Tape, pred: Var, teacher: Var) -> Result<Var> {
    let (ps, ts) = (tape.shape(pred), tape.shape(teacher));
    if ps != ts {
        return Err(StabError::shape(format!(
            "distillation rows differ: {ps:?} vs {ts:?}"
        )));
    }
    let diff = tape.sub(pred, teacher);
    Ok(tape.mean_all(tape.mul(diff, diff)))
}

/// Mean negative log-likelihood of `targets` under row-wise softmax(logits).
pub fn text_loss(tape: &Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let ls = tape.shape(logits);
    if ls.len() != 2 || ls[0] != targets.len() {
        return Err(StabError::shape(format!(
            "logits {ls:?} vs {} targets",
            targets.len()
        )));
    }
    if targets.is_empty() {
        return Err(StabError::shape("text loss needs at least one token".to_string()));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= ls[1]) {
        return Err(StabError::data(format!(
            "target id {bad} outside vocabulary of {}",
            ls[1]
        )));
    }
    let logp = tape.log_softmax_rows(logits);
    let picked = tape.select_positions(logp, targets);
    Ok(tape.neg(tape.mean_all(picked)))
}
