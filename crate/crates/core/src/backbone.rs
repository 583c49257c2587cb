//! Windowed context backbone: tokenization, graph positional encoding,
//! and unmasked attention. In the post-causal configuration this runs a
//! single time per window; only the baseline reruns it per stage.

use crate::error::Result;
use crate::model::{Model, MlpIds, RunCounters};
use crate::octree::NodeContext;
use crate::tensor::{Tape, Tensor, Var};

/// Brute-force k-nearest neighbors within a window, self included.
/// Ordered by (squared distance, index); distance ties break to the lower
/// index so both codec sides agree bit-for-bit.
pub fn knn_within_window(coords: &[[f64; 3]], k: usize) -> Vec<Vec<usize>> {
    let n = coords.len();
    let k_eff = k.min(n);
    let mut out = Vec::with_capacity(n);
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dists.clear();
        for (j, c) in coords.iter().enumerate() {
            let dx = coords[i][0] - c[0];
            let dy = coords[i][1] - c[1];
            let dz = coords[i][2] - c[2];
            dists.push((dx * dx + dy * dy + dz * dz, j));
        }
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.push(dists[..k_eff].iter().map(|&(_, j)| j).collect());
    }
    out
}

fn mlp(tape: &mut Tape, model: &Model, ids: &MlpIds, x: Var) -> Result<Var> {
    let w1 = tape.param(&model.params, ids.w1)?;
    let b1 = tape.param(&model.params, ids.b1)?;
    let w2 = tape.param(&model.params, ids.w2)?;
    let b2 = tape.param(&model.params, ids.b2)?;
    let h = tape.matmul(x, w1)?;
    let h = tape.add_bias(h, b1)?;
    let h = tape.silu(h)?;
    let h = tape.matmul(h, w2)?;
    tape.add_bias(h, b2)
}

fn affine(tape: &mut Tape, model: &Model, w: crate::tensor::ParamId, b: crate::tensor::ParamId, x: Var) -> Result<Var> {
    let wv = tape.param(&model.params, w)?;
    let bv = tape.param(&model.params, b)?;
    let h = tape.matmul(x, wv)?;
    tape.add_bias(h, bv)
}

/// Embed ancestor occupancies, octant, and level into per-node tokens.
/// For the fully-causal baseline, `cur` carries the masked current-level
/// symbols (0 = not yet decoded) as an extra channel.
fn tokenize(tape: &mut Tape, model: &Model, contexts: &[NodeContext], cur: Option<&[u8]>) -> Result<Var> {
    let g = model.config.ancestors;
    let anc_table = tape.param(&model.params, model.ids.anc_table)?;
    let oct_table = tape.param(&model.params, model.ids.oct_table)?;
    let lvl_table = tape.param(&model.params, model.ids.lvl_table)?;

    let mut parts = Vec::with_capacity(g + 3);
    for gen in 0..g {
        let idx: Vec<usize> = contexts
            .iter()
            .map(|c| *c.ancestors.get(gen).unwrap_or(&0) as usize)
            .collect();
        parts.push(tape.embed(anc_table, &idx)?);
    }
    let oct_idx: Vec<usize> = contexts.iter().map(|c| c.octant as usize).collect();
    parts.push(tape.embed(oct_table, &oct_idx)?);
    let lvl_idx: Vec<usize> = contexts
        .iter()
        .map(|c| (c.level as usize).min(model.config.max_depth))
        .collect();
    parts.push(tape.embed(lvl_table, &lvl_idx)?);
    if let Some(cur_syms) = cur {
        let cur_table = tape.param(
            &model.params,
            model.ids.cur_table.expect("baseline model has cur_table"),
        )?;
        let idx: Vec<usize> = cur_syms.iter().map(|&s| s as usize).collect();
        parts.push(tape.embed(cur_table, &idx)?);
    }
    tape.concat_cols(&parts)
}

/// Graph positional encoding: token + coordinate features, then one round
/// of gated edge messages max-pooled over the k-NN graph.
fn graph_positional_encoding(
    tape: &mut Tape,
    model: &Model,
    tokens: Var,
    contexts: &[NodeContext],
) -> Result<Var> {
    let n = contexts.len();
    let coords: Vec<[f64; 3]> = contexts.iter().map(|c| c.coords).collect();
    let coord_t = Tensor::from_vec(&[n, 3], coords.iter().flatten().copied().collect());
    let coord_in = tape.leaf(coord_t)?;

    let e_tok = mlp(tape, model, &model.ids.token_mlp, tokens)?;
    let e_pos = mlp(tape, model, &model.ids.coord_mlp, coord_in)?;
    let e = tape.add(e_tok, e_pos)?;

    let neighbors = knn_within_window(&coords, model.config.knn);
    let mut centers = Vec::new();
    let mut others = Vec::new();
    let mut groups = Vec::with_capacity(n);
    for (i, list) in neighbors.iter().enumerate() {
        let start = centers.len();
        for &j in list {
            centers.push(i);
            others.push(j);
        }
        groups.push((start..centers.len()).collect::<Vec<_>>());
    }

    let ei = tape.gather_rows(e, &centers)?;
    let ej = tape.gather_rows(e, &others)?;
    let diff = tape.sub(ej, ei)?;
    let pair = tape.concat_cols(&[ei, diff])?;
    let msg = mlp(tape, model, &model.ids.edge_mlp, pair)?;
    let gate_in = affine(tape, model, model.ids.gate_w, model.ids.gate_b, msg)?;
    let gate = tape.sigmoid(gate_in)?;
    let gated = tape.mul(msg, gate)?;
    let pooled = tape.neighbor_max(gated, &groups)?;
    let pooled = mlp(tape, model, &model.ids.aggr_mlp, pooled)?;
    tape.add(e, pooled)
}

fn attention_stack(tape: &mut Tape, model: &Model, mut a: Var) -> Result<Var> {
    let d = model.config.embed_dim;
    let heads = model.config.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    for layer in &model.ids.attn {
        let q = affine(tape, model, layer.wq, layer.bq, a)?;
        let k = affine(tape, model, layer.wk, layer.bk, a)?;
        let v = affine(tape, model, layer.wv, layer.bv, a)?;
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = tape.slice_cols(q, h * dh, dh)?;
            let kh = tape.slice_cols(k, h * dh, dh)?;
            let vh = tape.slice_cols(v, h * dh, dh)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax_rows(scores)?;
            head_outs.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&head_outs)?;
        let o = affine(tape, model, layer.wo, layer.bo, cat)?;
        let res = tape.add(a, o)?;
        let g1 = tape.param(&model.params, layer.ln1_gain)?;
        let b1 = tape.param(&model.params, layer.ln1_bias)?;
        a = tape.layer_norm(res, g1, b1)?;

        let f = affine(tape, model, layer.ffn_w1, layer.ffn_b1, a)?;
        let f = tape.silu(f)?;
        let f = affine(tape, model, layer.ffn_w2, layer.ffn_b2, f)?;
        let res = tape.add(a, f)?;
        let g2 = tape.param(&model.params, layer.ln2_gain)?;
        let b2 = tape.param(&model.params, layer.ln2_bias)?;
        a = tape.layer_norm(res, g2, b2)?;
    }
    Ok(a)
}

/// Tape-level backbone forward over one window: [n] contexts -> [n, d].
pub fn backbone_ops(
    tape: &mut Tape,
    model: &Model,
    contexts: &[NodeContext],
    cur: Option<&[u8]>,
) -> Result<Var> {
    debug_assert_eq!(cur.is_some(), model.config.fully_causal);
    let tokens = tokenize(tape, model, contexts, cur)?;
    let e = graph_positional_encoding(tape, model, tokens, contexts)?;
    attention_stack(tape, model, e)
}

/// Inference wrapper. Increments the backbone-invocation counter exactly
/// once per call.
pub fn run_backbone(
    model: &Model,
    contexts: &[NodeContext],
    cur: Option<&[u8]>,
    counters: &mut RunCounters,
) -> Result<Tensor> {
    counters.backbone_invocations += 1;
    let mut tape = Tape::new();
    let out = backbone_ops(&mut tape, model, contexts, cur)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn fake_contexts(n: usize, seed: u64) -> Vec<NodeContext> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| NodeContext {
                octant: rng.gen_range(0..8),
                level: rng.gen_range(1..10),
                ancestors: (0..3).map(|_| rng.gen_range(0..=255)).collect(),
                coords: [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ],
            })
            .collect()
    }

    #[test]
    fn knn_self_first_and_sorted() {
        let coords = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.1, 0.0, 0.0],
            [5.0, 5.0, 5.0],
        ];
        let nb = knn_within_window(&coords, 3);
        assert_eq!(nb[0], vec![0, 2, 1]);
        assert_eq!(nb[3], vec![3, 1, 2]);
    }

    #[test]
    fn knn_tie_breaks_to_lower_index() {
        let coords = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]];
        let nb = knn_within_window(&coords, 2);
        assert_eq!(nb[0], vec![0, 1]);
    }

    #[test]
    fn knn_small_window_clamps_k() {
        let coords = vec![[0.0; 3], [1.0; 3]];
        let nb = knn_within_window(&coords, 8);
        assert_eq!(nb[0].len(), 2);
    }

    #[test]
    fn output_shape_and_determinism() {
        let model = Model::new(ModelConfig::tiny(), 1).unwrap();
        let ctx = fake_contexts(17, 2);
        let mut c1 = RunCounters::default();
        let a1 = run_backbone(&model, &ctx, None, &mut c1).unwrap();
        let mut c2 = RunCounters::default();
        let a2 = run_backbone(&model, &ctx, None, &mut c2).unwrap();
        assert_eq!(a1.shape, vec![17, 16]);
        assert_eq!(a1, a2);
        assert_eq!(c1.backbone_invocations, 1);
    }

    #[test]
    fn unmasked_attention_sees_later_nodes() {
        // changing a later node's context must change earlier outputs:
        // the backbone is deliberately non-causal within the window
        let model = Model::new(ModelConfig::tiny(), 1).unwrap();
        let mut ctx = fake_contexts(10, 3);
        let mut counters = RunCounters::default();
        let a1 = run_backbone(&model, &ctx, None, &mut counters).unwrap();
        ctx[9].ancestors[0] ^= 0x5f;
        let a2 = run_backbone(&model, &ctx, None, &mut counters).unwrap();
        let row0_changed = (0..a1.cols()).any(|j| a1.at(0, j) != a2.at(0, j));
        assert!(row0_changed);
    }

    #[test]
    fn baseline_mask_channel_feeds_through() {
        let mut cfg = ModelConfig::tiny();
        cfg.fully_causal = true;
        let model = Model::new(cfg, 1).unwrap();
        let ctx = fake_contexts(8, 4);
        let mut counters = RunCounters::default();
        let masked = vec![0u8; 8];
        let a1 = run_backbone(&model, &ctx, Some(&masked), &mut counters).unwrap();
        let mut revealed = masked.clone();
        revealed[3] = 129;
        let a2 = run_backbone(&model, &ctx, Some(&revealed), &mut counters).unwrap();
        assert_ne!(a1, a2);
    }
}
