//! Frame codec: preprocessing, octree serialization, and the shared
//! window-coding routine that guarantees the encoder and decoder evaluate
//! the exact same probability sequence.

use std::time::Instant;

use crate::backbone::run_backbone;
use crate::coder::{QuantizedCdf, RangeDecoder, RangeEncoder};
use crate::error::{LoccError, Result};
use crate::geom::{
    inverse_transform_point, transform_point, PreprocessMode, QuantizationParams, SensorIntrinsics,
};
use crate::model::{Model, RunCounters};
use crate::octree::{build_octree, window_ranges, NodeContext, TreeScaffold};
use crate::predictor::{ar_predict_next, predict_stage, ScanState, StagePlan};

const MAGIC: &[u8; 4] = b"LOC1";
const VERSION: u16 = 1;
/// Shallow levels coded with a fixed uniform model; they hold too few
/// nodes to amortize a backbone run.
pub const DEFAULT_DIRECT_LEVELS: u8 = 2;

#[derive(Debug, Clone)]
pub struct CodecConfig {
    pub depth: u8,
    /// Stage count per window; 0 is the AR sentinel.
    pub stages: u16,
    pub window: usize,
    pub mode: PreprocessMode,
    pub direct_levels: u8,
    /// Rerun the backbone per stage (fully-causal baseline). Requires a
    /// model trained with the masked current-symbol channel.
    pub baseline: bool,
}

impl CodecConfig {
    pub fn new(depth: u8, mode: PreprocessMode) -> Self {
        Self {
            depth,
            stages: 1,
            window: 1024,
            mode,
            direct_levels: DEFAULT_DIRECT_LEVELS,
            baseline: false,
        }
    }

    fn validate(&self, model: &Model) -> Result<()> {
        if self.depth == 0 || self.depth > 21 {
            return Err(LoccError::ConfigMismatch(format!("depth {}", self.depth)));
        }
        if self.window == 0 {
            return Err(LoccError::ConfigMismatch("window must be >= 1".into()));
        }
        if self.baseline != model.config.fully_causal {
            return Err(LoccError::ConfigMismatch(
                "baseline flag does not match the model's causality variant".into(),
            ));
        }
        Ok(())
    }
}

/// Fixed-layout little-endian frame header.
#[derive(Debug, Clone, PartialEq)]
pub struct BitstreamHeader {
    pub version: u16,
    pub depth: u8,
    pub direct_levels: u8,
    pub mode: PreprocessMode,
    pub baseline: bool,
    pub stages: u16,
    pub window: u32,
    pub input_points: u64,
    pub scales: [f64; 3],
    pub offsets: [f64; 3],
    pub model_digest: u64,
    pub payload_len: u64,
}

impl BitstreamHeader {
    pub const BYTES: usize = 4 + 2 + 1 + 1 + 1 + 1 + 2 + 4 + 8 + 48 + 8 + 8;

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(Self::BYTES);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.push(self.depth);
        out.push(self.direct_levels);
        out.push(self.mode.as_u8());
        out.push(self.baseline as u8);
        out.extend_from_slice(&self.stages.to_le_bytes());
        out.extend_from_slice(&self.window.to_le_bytes());
        out.extend_from_slice(&self.input_points.to_le_bytes());
        for v in self.scales.iter().chain(&self.offsets) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&self.model_digest.to_le_bytes());
        out.extend_from_slice(&self.payload_len.to_le_bytes());
        debug_assert_eq!(out.len(), Self::BYTES);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < Self::BYTES {
            return Err(LoccError::Truncation(format!(
                "header needs {} bytes, got {}",
                Self::BYTES,
                bytes.len()
            )));
        }
        if &bytes[0..4] != MAGIC {
            return Err(LoccError::Format("bad magic".into()));
        }
        let u16_at = |o: usize| u16::from_le_bytes(bytes[o..o + 2].try_into().unwrap());
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let version = u16_at(4);
        if version != VERSION {
            return Err(LoccError::Format(format!("unsupported version {version}")));
        }
        let depth = bytes[6];
        if depth == 0 || depth > 21 {
            return Err(LoccError::Format(format!("depth {depth}")));
        }
        let mut scales = [0.0; 3];
        let mut offsets = [0.0; 3];
        for a in 0..3 {
            scales[a] = f64_at(24 + 8 * a);
            offsets[a] = f64_at(48 + 8 * a);
        }
        if scales.iter().any(|s| !s.is_finite() || *s <= 0.0)
            || offsets.iter().any(|o| !o.is_finite())
        {
            return Err(LoccError::Format("bad quantization bounds".into()));
        }
        Ok(Self {
            version,
            depth,
            direct_levels: bytes[7],
            mode: PreprocessMode::from_u8(bytes[8])?,
            baseline: bytes[9] != 0,
            stages: u16_at(10),
            window: u32_at(12),
            input_points: u64_at(16),
            scales,
            offsets,
            model_digest: u64_at(72),
            payload_len: u64_at(80),
        })
    }
}

/// Per-frame accounting, reported by both codec directions.
#[derive(Debug, Clone, Default)]
pub struct FrameStats {
    pub input_points: usize,
    /// Deduplicated leaf count actually represented by the tree.
    pub coded_points: usize,
    pub duplicates: usize,
    /// Points dropped because preprocessing failed (e.g. rho = 0).
    pub rejected: usize,
    pub payload_bytes: usize,
    pub header_bytes: usize,
    /// Payload bits per original input point.
    pub bpp: f64,
    /// Sum of -log2 of the quantized coding probabilities.
    pub ideal_bits: f64,
    /// Coding windows across all levels (direct levels included).
    pub windows: usize,
    pub counters: RunCounters,
    pub seconds: f64,
    /// Ideal bits spent per level (index 0 = level 1).
    pub per_level_bits: Vec<f64>,
}

/// Decoder output: grid cells plus their reconstruction in world space.
#[derive(Debug, Clone)]
pub struct DecodedFrame {
    pub header: BitstreamHeader,
    pub grid_points: Vec<[u32; 3]>,
    pub points: Vec<[f64; 3]>,
}

trait SymbolIo {
    fn code(&mut self, local_pos: usize, cdf: &QuantizedCdf) -> Result<u8>;
}

struct EncodeIo<'a> {
    symbols: &'a [u8],
    enc: &'a mut RangeEncoder,
    ideal_bits: &'a mut f64,
}

impl SymbolIo for EncodeIo<'_> {
    fn code(&mut self, local_pos: usize, cdf: &QuantizedCdf) -> Result<u8> {
        let sym = self.symbols[local_pos];
        self.enc.encode(cdf, sym);
        *self.ideal_bits += cdf.cost_bits(sym);
        Ok(sym)
    }
}

struct DecodeIo<'a, 'b> {
    dec: &'a mut RangeDecoder<'b>,
    ideal_bits: &'a mut f64,
}

impl SymbolIo for DecodeIo<'_, '_> {
    fn code(&mut self, _local_pos: usize, cdf: &QuantizedCdf) -> Result<u8> {
        let sym = self.dec.decode(cdf)?;
        *self.ideal_bits += cdf.cost_bits(sym);
        Ok(sym)
    }
}

/// Code one window of occupancy symbols. The identical routine drives both
/// directions; only the `SymbolIo` differs, so probability evaluation order
/// is symmetric by construction.
fn code_window(
    model: &Model,
    contexts: &[NodeContext],
    stages: u16,
    baseline: bool,
    io: &mut dyn SymbolIo,
    counters: &mut RunCounters,
) -> Result<Vec<u8>> {
    let n = contexts.len();
    let plan = StagePlan::new(n, stages);
    let mut decoded: Vec<Option<u8>> = vec![None; n];

    if !baseline {
        let a = run_backbone(model, contexts, None, counters)?;
        if plan.is_autoregressive() {
            // incremental path: one recurrence step per node
            let mut state = ScanState::new(model);
            let mut prev = None;
            for t in 0..n {
                let pmf = ar_predict_next(model, &a, t, prev, &mut state, counters)?;
                let sym = io.code(t, &QuantizedCdf::from_pmf(&pmf)?)?;
                decoded[t] = Some(sym);
                prev = Some(sym);
            }
        } else {
            for s in 0..plan.s_eff {
                let dists = predict_stage(model, &a, &decoded, &plan, s, counters)?;
                for (pos, pmf) in dists {
                    let sym = io.code(pos, &QuantizedCdf::from_pmf(&pmf)?)?;
                    decoded[pos] = Some(sym);
                }
            }
        }
    } else {
        // fully-causal baseline: the heavy backbone reruns every stage with
        // the current level's already-coded symbols unmasked
        for s in 0..plan.s_eff {
            let cur: Vec<u8> = decoded.iter().map(|d| d.unwrap_or(0)).collect();
            let a = run_backbone(model, contexts, Some(&cur), counters)?;
            let dists = predict_stage(model, &a, &decoded, &plan, s, counters)?;
            for (pos, pmf) in dists {
                let sym = io.code(pos, &QuantizedCdf::from_pmf(&pmf)?)?;
                decoded[pos] = Some(sym);
            }
        }
    }
    decoded
        .into_iter()
        .enumerate()
        .map(|(i, d)| d.ok_or_else(|| LoccError::InternalSync(format!("position {i} never coded"))))
        .collect()
}

fn preprocess(
    points: &[[f64; 3]],
    mode: PreprocessMode,
    intr: Option<&SensorIntrinsics>,
    depth: u8,
) -> Result<(Vec<[u32; 3]>, QuantizationParams, usize)> {
    let mut transformed = Vec::with_capacity(points.len());
    let mut rejected = 0usize;
    for &p in points {
        match transform_point(p, mode, intr) {
            Ok(t) => transformed.push(t),
            Err(LoccError::MissingIntrinsics) => return Err(LoccError::MissingIntrinsics),
            Err(_) => rejected += 1,
        }
    }
    if transformed.is_empty() {
        return Err(LoccError::EmptyFrame);
    }
    let qp = QuantizationParams::fit(&transformed, depth)?;
    let mut grid = Vec::with_capacity(transformed.len());
    for t in &transformed {
        match qp.quantize(*t) {
            Ok(g) => grid.push(g),
            Err(_) => rejected += 1,
        }
    }
    if grid.is_empty() {
        return Err(LoccError::EmptyFrame);
    }
    Ok((grid, qp, rejected))
}

pub fn encode_frame(
    points: &[[f64; 3]],
    intr: Option<&SensorIntrinsics>,
    model: &Model,
    cfg: &CodecConfig,
) -> Result<(Vec<u8>, FrameStats)> {
    let start = Instant::now();
    cfg.validate(model)?;
    if points.is_empty() {
        return Err(LoccError::EmptyFrame);
    }
    let (grid, qp, rejected) = preprocess(points, cfg.mode, intr, cfg.depth)?;
    let tree = build_octree(&grid, cfg.depth)?;

    let mut stats = FrameStats {
        input_points: points.len(),
        coded_points: tree.num_leaves(),
        duplicates: tree.duplicate_count,
        rejected,
        ..Default::default()
    };

    let direct = cfg.direct_levels.min(cfg.depth) as usize;
    let mut scaffold = TreeScaffold::new(cfg.depth);
    let mut enc = RangeEncoder::new();
    let mut ideal = 0.0f64;
    let uniform = QuantizedCdf::uniform();
    for l in 1..=cfg.depth as usize {
        let symbols = &tree.levels[l - 1];
        let level_ideal_before = ideal;
        if l <= direct {
            for &s in symbols {
                enc.encode(&uniform, s);
                ideal += uniform.cost_bits(s);
            }
            stats.windows += symbols.len().div_ceil(cfg.window);
        } else {
            let contexts = scaffold.node_contexts(l, model.config.ancestors);
            for range in window_ranges(symbols.len(), cfg.window) {
                let mut io = EncodeIo {
                    symbols: &symbols[range.clone()],
                    enc: &mut enc,
                    ideal_bits: &mut ideal,
                };
                code_window(
                    model,
                    &contexts[range],
                    cfg.stages,
                    cfg.baseline,
                    &mut io,
                    &mut stats.counters,
                )?;
                stats.windows += 1;
            }
        }
        stats.per_level_bits.push(ideal - level_ideal_before);
        scaffold.push_level(symbols)?;
    }

    let payload = enc.finalize();
    let header = BitstreamHeader {
        version: VERSION,
        depth: cfg.depth,
        direct_levels: cfg.direct_levels,
        mode: cfg.mode,
        baseline: cfg.baseline,
        stages: cfg.stages,
        window: cfg.window as u32,
        input_points: points.len() as u64,
        scales: qp.per_axis_scale,
        offsets: qp.per_axis_offset,
        model_digest: model.digest(),
        payload_len: payload.len() as u64,
    };
    let mut out = header.to_bytes();
    stats.header_bytes = out.len();
    stats.payload_bytes = payload.len();
    stats.ideal_bits = ideal;
    stats.bpp = (payload.len() * 8) as f64 / points.len() as f64;
    out.extend_from_slice(&payload);
    stats.seconds = start.elapsed().as_secs_f64();
    Ok((out, stats))
}

pub fn decode_frame(
    bytes: &[u8],
    intr: Option<&SensorIntrinsics>,
    model: &Model,
) -> Result<(DecodedFrame, FrameStats)> {
    let start = Instant::now();
    let header = BitstreamHeader::from_bytes(bytes)?;
    if header.model_digest != model.digest() {
        return Err(LoccError::ConfigMismatch(format!(
            "bitstream was encoded with model {:016x}, loaded model is {:016x}",
            header.model_digest,
            model.digest()
        )));
    }
    if header.baseline != model.config.fully_causal {
        return Err(LoccError::ConfigMismatch(
            "bitstream causality variant does not match the model".into(),
        ));
    }
    if header.mode == PreprocessMode::CylindricalBeam && intr.is_none() {
        return Err(LoccError::MissingIntrinsics);
    }
    let payload_end = BitstreamHeader::BYTES + header.payload_len as usize;
    if bytes.len() < payload_end {
        return Err(LoccError::Truncation(format!(
            "payload: header promises {} bytes, {} available",
            header.payload_len,
            bytes.len() - BitstreamHeader::BYTES
        )));
    }
    let payload = &bytes[BitstreamHeader::BYTES..payload_end];

    let mut stats = FrameStats {
        input_points: header.input_points as usize,
        header_bytes: BitstreamHeader::BYTES,
        payload_bytes: payload.len(),
        bpp: (payload.len() * 8) as f64 / header.input_points.max(1) as f64,
        ..Default::default()
    };

    let direct = header.direct_levels.min(header.depth) as usize;
    let window = header.window as usize;
    if window == 0 {
        return Err(LoccError::Format("window must be >= 1".into()));
    }
    let mut dec = RangeDecoder::open(payload)?;
    let mut scaffold = TreeScaffold::new(header.depth);
    let mut ideal = 0.0f64;
    let uniform = QuantizedCdf::uniform();
    let mut levels: Vec<Vec<u8>> = Vec::with_capacity(header.depth as usize);
    for l in 1..=header.depth as usize {
        let n = scaffold.num_nodes(l);
        let level_ideal_before = ideal;
        let mut symbols = Vec::with_capacity(n);
        if l <= direct {
            for _ in 0..n {
                let s = dec.decode(&uniform)?;
                ideal += uniform.cost_bits(s);
                symbols.push(s);
            }
            stats.windows += n.div_ceil(window);
        } else {
            let contexts = scaffold.node_contexts(l, model.config.ancestors);
            for range in window_ranges(n, window) {
                let mut io = DecodeIo {
                    dec: &mut dec,
                    ideal_bits: &mut ideal,
                };
                let syms = code_window(
                    model,
                    &contexts[range],
                    header.stages,
                    header.baseline,
                    &mut io,
                    &mut stats.counters,
                )?;
                symbols.extend_from_slice(&syms);
                stats.windows += 1;
            }
        }
        stats.per_level_bits.push(ideal - level_ideal_before);
        scaffold.push_level(&symbols)?;
        levels.push(symbols);
    }
    stats.ideal_bits = ideal;

    let tree = crate::octree::OctreeLevels {
        depth: header.depth,
        levels,
        duplicate_count: 0,
    };
    let grid_points = crate::octree::reconstruct_points(&tree)?;
    stats.coded_points = grid_points.len();

    let qp = QuantizationParams {
        depth: header.depth,
        per_axis_scale: header.scales,
        per_axis_offset: header.offsets,
    };
    let mut points = Vec::with_capacity(grid_points.len());
    for &g in &grid_points {
        let c = qp.dequantize(g);
        points.push(inverse_transform_point(c, header.mode, intr)?);
    }
    stats.seconds = start.elapsed().as_secs_f64();
    Ok((
        DecodedFrame {
            header,
            grid_points,
            points,
        },
        stats,
    ))
}

/// The grid cells a frame occupies under the given configuration; this is
/// the set `decode(encode(frame))` must reproduce exactly.
pub fn expected_grid_points(
    points: &[[f64; 3]],
    intr: Option<&SensorIntrinsics>,
    cfg: &CodecConfig,
) -> Result<Vec<[u32; 3]>> {
    let (grid, _, _) = preprocess(points, cfg.mode, intr, cfg.depth)?;
    let tree = build_octree(&grid, cfg.depth)?;
    crate::octree::reconstruct_points(&tree)
}

/// Encode, decode, and compare grid sets. Returns the two stats on
/// success; `RoundTrip` error otherwise.
pub fn verify_round_trip(
    points: &[[f64; 3]],
    intr: Option<&SensorIntrinsics>,
    model: &Model,
    cfg: &CodecConfig,
) -> Result<(FrameStats, FrameStats)> {
    let (bytes, enc_stats) = encode_frame(points, intr, model, cfg)?;
    let (decoded, dec_stats) = decode_frame(&bytes, intr, model)?;
    let expected = expected_grid_points(points, intr, cfg)?;
    if decoded.grid_points != expected {
        return Err(LoccError::RoundTrip(format!(
            "grid mismatch: {} decoded vs {} expected cells",
            decoded.grid_points.len(),
            expected.len()
        )));
    }
    Ok((enc_stats, dec_stats))
}
