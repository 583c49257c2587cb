//! Stage-scalable causal predictor: elastic sibling fusion, a diagonal
//! gated state-space scan, and the 255-way occupancy head.
//!
//! The scan and the single-step replay are built from the same tape ops in
//! the same order, so their outputs are bit-identical — that equivalence is
//! what lets the decoder run AR mode incrementally.

use crate::error::{LoccError, Result};
use crate::model::{Model, RunCounters, HEAD_CLASSES};
use crate::tensor::{Tape, Tensor, Var};

/// Stage decomposition of a window of `n` nodes. Stage `s` (0-based) owns
/// positions `{p : p mod s_eff == s}`, preserving coder order within a
/// stage. `requested = 0` is the AR sentinel (every node its own stage).
#[derive(Debug, Clone)]
pub struct StagePlan {
    pub n: usize,
    pub s_eff: usize,
    /// Requested stage count exceeded the window and was clamped.
    pub clamped: bool,
}

impl StagePlan {
    pub fn new(n: usize, requested: u16) -> Self {
        assert!(n > 0);
        let (s_eff, clamped) = if requested == 0 {
            (n, false)
        } else if requested as usize > n {
            (n, true)
        } else {
            (requested as usize, false)
        };
        Self { n, s_eff, clamped }
    }

    pub fn stage_of(&self, pos: usize) -> usize {
        pos % self.s_eff
    }

    pub fn positions(&self, stage: usize) -> Vec<usize> {
        (stage..self.n).step_by(self.s_eff).collect()
    }

    pub fn is_autoregressive(&self) -> bool {
        self.s_eff == self.n
    }
}

/// Decompose `[0, n)` into coding stages; returns the per-stage position
/// lists plus the effective stage count.
pub fn decompose_stages(n: usize, requested: u16) -> (Vec<Vec<usize>>, usize, bool) {
    let plan = StagePlan::new(n, requested);
    let stages = (0..plan.s_eff).map(|s| plan.positions(s)).collect();
    (stages, plan.s_eff, plan.clamped)
}

/// Elastic causal embedding: f_i = a_i + [o_{i-1} already coded] * Emb(o_{i-1}).
/// The mask is a fixed per-row scalar so encoder and decoder agree exactly.
pub fn fused_features_ops(
    tape: &mut Tape,
    model: &Model,
    a: Var,
    decoded: &[Option<u8>],
    plan: &StagePlan,
    stage: usize,
) -> Result<Var> {
    let n = plan.n;
    if decoded.len() != n {
        return Err(LoccError::ShapeMismatch("decoded length".into()));
    }
    let mut idx = vec![0usize; n];
    let mut mask = vec![0.0f64; n];
    for i in 1..n {
        if plan.stage_of(i - 1) < stage {
            let sym = decoded[i - 1].ok_or_else(|| {
                LoccError::InternalSync(format!("position {} not coded before stage {stage}", i - 1))
            })?;
            idx[i] = sym as usize;
            mask[i] = 1.0;
        }
    }
    let table = tape.param(&model.params, model.ids.sib_table)?;
    let emb = tape.embed(table, &idx)?;
    let masked = tape.mul_rows(emb, &mask)?;
    tape.add(a, masked)
}

/// One recurrence step: gated diagonal update plus residual output.
fn ssm_step_ops(tape: &mut Tape, model: &Model, x: Var, h_prev: Var) -> Result<(Var, Var)> {
    let wa = tape.param(&model.params, model.ids.ssm_wa)?;
    let ba = tape.param(&model.params, model.ids.ssm_ba)?;
    let wb = tape.param(&model.params, model.ids.ssm_wb)?;
    let bb = tape.param(&model.params, model.ids.ssm_bb)?;
    let wo = tape.param(&model.params, model.ids.ssm_wo)?;
    let bo = tape.param(&model.params, model.ids.ssm_bo)?;

    let ga = tape.matmul(x, wa)?;
    let ga = tape.add_bias(ga, ba)?;
    let a_t = tape.sigmoid(ga)?;
    let gb = tape.matmul(x, wb)?;
    let gb = tape.add_bias(gb, bb)?;
    let b_t = tape.sigmoid(gb)?;

    let keep = tape.mul(a_t, h_prev)?;
    let write = tape.mul(b_t, x)?;
    let h = tape.add(keep, write)?;

    let proj = tape.matmul(h, wo)?;
    let proj = tape.add_bias(proj, bo)?;
    let out = tape.add(x, proj)?;
    Ok((h, out))
}

/// Full causal scan over fused features `f` [n, d] -> outputs [n, d].
pub fn ssm_scan_ops(tape: &mut Tape, model: &Model, f: Var) -> Result<Var> {
    let n = tape.value(f).rows();
    let d = tape.value(f).cols();
    let mut h = tape.leaf(Tensor::zeros(&[1, d]))?;
    let mut outs = Vec::with_capacity(n);
    for t in 0..n {
        let x = tape.gather_rows(f, &[t])?;
        let (h_next, out) = ssm_step_ops(tape, model, x, h)?;
        h = h_next;
        outs.push(out);
    }
    tape.concat_rows(&outs)
}

/// Occupancy head: [m, d] -> per-row probabilities over symbols 1..=255
/// (column j corresponds to symbol j + 1).
pub fn head_ops(tape: &mut Tape, model: &Model, rows: Var) -> Result<Var> {
    let ids = &model.ids.head;
    let w1 = tape.param(&model.params, ids.w1)?;
    let b1 = tape.param(&model.params, ids.b1)?;
    let w2 = tape.param(&model.params, ids.w2)?;
    let b2 = tape.param(&model.params, ids.b2)?;
    let h = tape.matmul(rows, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.silu(h)?;
    let logits = tape.matmul(h, w2)?;
    let logits = tape.add_bias(logits, b2)?;
    tape.softmax_rows(logits)
}

/// Recurrence state for incremental (AR) inference.
#[derive(Debug, Clone)]
pub struct ScanState {
    h: Tensor,
    cursor: usize,
}

impl ScanState {
    pub fn new(model: &Model) -> Self {
        Self {
            h: Tensor::zeros(&[1, model.config.embed_dim]),
            cursor: 0,
        }
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }
}

/// Advance the recurrence by one fused feature row; `t` must equal the
/// state's cursor. Returns the step's output row.
pub fn ssm_step(model: &Model, state: &mut ScanState, f_t: &Tensor, t: usize) -> Result<Tensor> {
    if t != state.cursor {
        return Err(LoccError::InternalSync(format!(
            "ssm_step at t={t} but cursor is {}",
            state.cursor
        )));
    }
    if f_t.shape != [1, model.config.embed_dim] {
        return Err(LoccError::ShapeMismatch("ssm_step input".into()));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(f_t.clone())?;
    let h_prev = tape.leaf(state.h.clone())?;
    let (h, out) = ssm_step_ops(&mut tape, model, x, h_prev)?;
    state.h = tape.value(h).clone();
    state.cursor += 1;
    Ok(tape.value(out).clone())
}

/// Distributions for every position of one stage, given the backbone
/// output and the symbols coded in earlier stages. One predictor
/// invocation covers the whole stage.
pub fn predict_stage(
    model: &Model,
    a: &Tensor,
    decoded: &[Option<u8>],
    plan: &StagePlan,
    stage: usize,
    counters: &mut RunCounters,
) -> Result<Vec<(usize, Vec<f64>)>> {
    counters.predictor_invocations += 1;
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone())?;
    let f = fused_features_ops(&mut tape, model, av, decoded, plan, stage)?;
    let y = ssm_scan_ops(&mut tape, model, f)?;
    let positions = plan.positions(stage);
    let rows = tape.gather_rows(y, &positions)?;
    let probs = head_ops(&mut tape, model, rows)?;
    let pt = tape.value(probs);
    Ok(positions
        .iter()
        .enumerate()
        .map(|(r, &p)| (p, pt.data[r * HEAD_CLASSES..(r + 1) * HEAD_CLASSES].to_vec()))
        .collect())
}

/// One AR step: fuse the previous symbol into row `t` of the backbone
/// output, advance the recurrence, and return the distribution for
/// position `t`. Bit-identical to the stage path with s_eff = n.
pub fn ar_predict_next(
    model: &Model,
    a: &Tensor,
    t: usize,
    prev_symbol: Option<u8>,
    state: &mut ScanState,
    counters: &mut RunCounters,
) -> Result<Vec<f64>> {
    counters.predictor_invocations += 1;
    let d = model.config.embed_dim;
    let mut tape = Tape::new();
    let a_row = tape.leaf(Tensor::from_vec(&[1, d], a.data[t * d..(t + 1) * d].to_vec()))?;
    // mirror fused_features_ops arithmetic exactly (embed, mask, add)
    let (idx, mask) = match prev_symbol {
        Some(s) if t > 0 => (s as usize, 1.0),
        _ => (0usize, 0.0),
    };
    let table = tape.param(&model.params, model.ids.sib_table)?;
    let emb = tape.embed(table, &[idx])?;
    let masked = tape.mul_rows(emb, &[mask])?;
    let f_t = tape.add(a_row, masked)?;
    let f_t = tape.value(f_t).clone();

    let out = ssm_step(model, state, &f_t, t)?;
    let mut tape2 = Tape::new();
    let row = tape2.leaf(out)?;
    let probs = head_ops(&mut tape2, model, row)?;
    Ok(tape2.value(probs).data.clone())
}
