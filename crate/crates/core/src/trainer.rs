//! Joint training of the backbone and predictor with teacher forcing and
//! mixed-stage sampling, so one checkpoint serves every stage count.

use std::io::Write;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::backbone::backbone_ops;
use crate::error::{LoccError, Result};
use crate::geom::{PreprocessMode, QuantizationParams, SensorIntrinsics};
use crate::model::Model;
use crate::octree::{build_octree, node_contexts, window_ranges, NodeContext};
use crate::optim::AdamW;
use crate::predictor::{fused_features_ops, head_ops, ssm_scan_ops, StagePlan};
use crate::tensor::{Tape, Var};

/// One training example: a window of nodes with their contexts and
/// ground-truth occupancy symbols.
#[derive(Debug, Clone)]
pub struct TrainWindow {
    pub contexts: Vec<NodeContext>,
    pub symbols: Vec<u8>,
}

/// Cut a frame into training windows over its modeled levels, mirroring
/// the codec's preprocessing exactly.
pub fn frame_windows(
    points: &[[f64; 3]],
    intr: Option<&SensorIntrinsics>,
    mode: PreprocessMode,
    depth: u8,
    window: usize,
    direct_levels: u8,
    ancestors: usize,
) -> Result<Vec<TrainWindow>> {
    let mut transformed = Vec::with_capacity(points.len());
    for &p in points {
        if let Ok(t) = crate::geom::transform_point(p, mode, intr) {
            transformed.push(t);
        }
    }
    if transformed.is_empty() {
        return Err(LoccError::EmptyFrame);
    }
    let qp = QuantizationParams::fit(&transformed, depth)?;
    let grid: Vec<[u32; 3]> = transformed
        .iter()
        .filter_map(|t| qp.quantize(*t).ok())
        .collect();
    let tree = build_octree(&grid, depth)?;

    let mut out = Vec::new();
    for l in direct_levels.min(depth) as usize + 1..=depth as usize {
        let contexts = node_contexts(&tree, l, ancestors);
        let symbols = &tree.levels[l - 1];
        for r in window_ranges(symbols.len(), window) {
            out.push(TrainWindow {
                contexts: contexts[r.clone()].to_vec(),
                symbols: symbols[r].to_vec(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub epochs: usize,
    pub batch_windows: usize,
    /// Stage counts sampled uniformly per step; 0 is the AR sentinel.
    pub stage_set: Vec<u16>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            weight_decay: 1e-2,
            clip_norm: 1.0,
            epochs: 1,
            batch_windows: 4,
            stage_set: vec![1, 2, 4, 0],
            seed: 0,
        }
    }
}

/// Build the per-stage prediction rows and targets for one window under
/// teacher forcing; targets are `symbol - 1` (head class indices).
fn window_rows(
    tape: &mut Tape,
    model: &Model,
    win: &TrainWindow,
    stages: u16,
) -> Result<(Vec<Var>, Vec<usize>)> {
    let n = win.symbols.len();
    if n == 0 || win.contexts.len() != n {
        return Err(LoccError::ShapeMismatch("training window".into()));
    }
    let plan = StagePlan::new(n, stages);
    let mut rows = Vec::new();
    let mut targets = Vec::new();

    let mut decoded: Vec<Option<u8>> = vec![None; n];
    let mut a = if model.config.fully_causal {
        None
    } else {
        Some(backbone_ops(tape, model, &win.contexts, None)?)
    };

    if plan.is_autoregressive() && !model.config.fully_causal {
        // fully fused single scan is equivalent to n one-node stages
        for i in 0..n {
            decoded[i] = Some(win.symbols[i]);
        }
        let f = fused_features_ops(tape, model, a.unwrap(), &decoded, &plan, plan.s_eff)?;
        let y = ssm_scan_ops(tape, model, f)?;
        rows.push(y);
        targets.extend(win.symbols.iter().map(|&s| s as usize - 1));
        return Ok((rows, targets));
    }

    for s in 0..plan.s_eff {
        if model.config.fully_causal {
            let cur: Vec<u8> = decoded.iter().map(|d| d.unwrap_or(0)).collect();
            a = Some(backbone_ops(tape, model, &win.contexts, Some(&cur))?);
        }
        let f = fused_features_ops(tape, model, a.unwrap(), &decoded, &plan, s)?;
        let y = ssm_scan_ops(tape, model, f)?;
        let positions = plan.positions(s);
        rows.push(tape.gather_rows(y, &positions)?);
        for &p in &positions {
            targets.push(win.symbols[p] as usize - 1);
            decoded[p] = Some(win.symbols[p]);
        }
    }
    Ok((rows, targets))
}

/// Mean bits-per-symbol loss over a batch of windows at a fixed stage
/// count, on one tape.
pub fn batch_loss_ops(
    tape: &mut Tape,
    model: &Model,
    batch: &[&TrainWindow],
    stages: u16,
) -> Result<Var> {
    let mut all_rows = Vec::new();
    let mut all_targets = Vec::new();
    for win in batch {
        let (rows, targets) = window_rows(tape, model, win, stages)?;
        all_rows.extend(rows);
        all_targets.extend(targets);
    }
    let rows = tape.concat_rows(&all_rows)?;
    let probs = head_ops(tape, model, rows)?;
    tape.cross_entropy_bits(probs, &all_targets)
}

/// One optimizer step. Returns (loss bits, pre-clip gradient norm).
/// Non-finite forward values abort the step without touching the weights.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[&TrainWindow],
    stages: u16,
) -> Result<(f64, f64)> {
    model.params.zero_grads();
    let mut tape = Tape::new();
    let loss = batch_loss_ops(&mut tape, model, batch, stages)?;
    let loss_bits = tape.value(loss).data[0];
    tape.backward(loss, &mut model.params)?;
    let norm = model.params.clip_grad_norm(1.0);
    opt.step(&mut model.params);
    Ok((loss_bits, norm))
}

/// Average loss bits over windows without updating weights.
pub fn eval_loss(model: &Model, windows: &[TrainWindow], stages: u16) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for win in windows {
        let mut tape = Tape::new();
        let loss = batch_loss_ops(&mut tape, model, &[win], stages)?;
        total += tape.value(loss).data[0] * win.symbols.len() as f64;
        count += win.symbols.len();
    }
    Ok(total / count as f64)
}

/// Full training loop. Emits one JSON line per step to `log` when given.
pub fn train(
    model: &mut Model,
    windows: &[TrainWindow],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(LoccError::EmptyFrame);
    }
    if cfg.stage_set.is_empty() {
        return Err(LoccError::ConfigMismatch("empty stage set".into()));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(&model.params, cfg.learning_rate, cfg.weight_decay);
    let mut losses = Vec::new();
    let mut step = 0u64;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_windows.max(1)) {
            let batch: Vec<&TrainWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let stages = cfg.stage_set[rng.gen_range(0..cfg.stage_set.len())];
            match train_step(model, &mut opt, &batch, stages) {
                Ok((loss, norm)) => {
                    step += 1;
                    losses.push(loss);
                    if let Some(w) = log.as_deref_mut() {
                        writeln!(
                            w,
                            "{{\"step\":{step},\"epoch\":{epoch},\"stages\":{stages},\"loss_bits\":{loss:.6},\"grad_norm\":{norm:.6}}}"
                        )?;
                    }
                }
                Err(LoccError::NonFinite(what)) => {
                    // skip the batch; weights were not updated
                    if let Some(w) = log.as_deref_mut() {
                        writeln!(
                            w,
                            "{{\"step\":{step},\"epoch\":{epoch},\"stages\":{stages},\"skipped\":\"non-finite {what}\"}}"
                        )?;
                    }
                }
                Err(e) => return Err(e),
            }
        }
    }
    Ok(losses)
}
