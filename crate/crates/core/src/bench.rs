//! Rate/latency sweep harness: encodes and decodes every frame at every
//! requested stage count, verifies the round trip, and reports CSV/JSON.

use rayon::prelude::*;
use serde::Serialize;

use crate::codec::{decode_frame, encode_frame, expected_grid_points, CodecConfig};
use crate::error::Result;
use crate::geom::SensorIntrinsics;
use crate::model::Model;

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub cfg: CodecConfig,
    /// Stage counts to sweep (0 = AR sentinel).
    pub stage_sweep: Vec<u16>,
    pub workers: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub frame: String,
    pub mode: String,
    pub depth: u8,
    pub stages: u16,
    pub input_points: usize,
    pub coded_points: usize,
    pub payload_bytes: usize,
    pub bpp: f64,
    pub ideal_bits: f64,
    pub encode_seconds: f64,
    pub decode_seconds: f64,
    pub backbone_invocations: u64,
    pub predictor_invocations: u64,
    pub lossless: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    pub fn all_lossless(&self) -> bool {
        self.rows.iter().all(|r| r.lossless && r.error.is_none())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "frame,mode,depth,stages,input_points,coded_points,payload_bytes,bpp,ideal_bits,encode_seconds,decode_seconds,backbone_invocations,predictor_invocations,lossless,error\n",
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{:.6},{:.2},{:.4},{:.4},{},{},{},{}\n",
                r.frame,
                r.mode,
                r.depth,
                r.stages,
                r.input_points,
                r.coded_points,
                r.payload_bytes,
                r.bpp,
                r.ideal_bits,
                r.encode_seconds,
                r.decode_seconds,
                r.backbone_invocations,
                r.predictor_invocations,
                r.lossless,
                r.error.as_deref().unwrap_or("")
            ));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

fn bench_one(
    name: &str,
    points: &[[f64; 3]],
    intr: Option<&SensorIntrinsics>,
    model: &Model,
    cfg: &CodecConfig,
) -> BenchRow {
    let mut row = BenchRow {
        frame: name.to_string(),
        mode: format!("{:?}", cfg.mode),
        depth: cfg.depth,
        stages: cfg.stages,
        input_points: points.len(),
        coded_points: 0,
        payload_bytes: 0,
        bpp: 0.0,
        ideal_bits: 0.0,
        encode_seconds: 0.0,
        decode_seconds: 0.0,
        backbone_invocations: 0,
        predictor_invocations: 0,
        lossless: false,
        error: None,
    };
    let run = || -> Result<(bool, crate::codec::FrameStats, crate::codec::FrameStats)> {
        let (bytes, enc) = encode_frame(points, intr, model, cfg)?;
        let (decoded, dec) = decode_frame(&bytes, intr, model)?;
        let expected = expected_grid_points(points, intr, cfg)?;
        Ok((decoded.grid_points == expected, enc, dec))
    };
    match run() {
        Ok((lossless, enc, dec)) => {
            row.coded_points = enc.coded_points;
            row.payload_bytes = enc.payload_bytes;
            row.bpp = enc.bpp;
            row.ideal_bits = enc.ideal_bits;
            row.encode_seconds = enc.seconds;
            row.decode_seconds = dec.seconds;
            row.backbone_invocations = enc.counters.backbone_invocations;
            row.predictor_invocations = enc.counters.predictor_invocations;
            row.lossless = lossless;
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Sweep all frames across the stage list. Deterministic row order
/// (frame-major, then stage); parallelism only affects wall time.
pub fn run_bench(
    frames: &[(String, Vec<[f64; 3]>)],
    intr: Option<&SensorIntrinsics>,
    model: &Model,
    spec: &BenchSpec,
) -> Result<BenchReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.workers.max(1))
        .build()
        .map_err(|e| crate::error::LoccError::Unsupported(format!("thread pool: {e}")))?;
    let jobs: Vec<(usize, u16)> = frames
        .iter()
        .enumerate()
        .flat_map(|(i, _)| spec.stage_sweep.iter().map(move |&s| (i, s)))
        .collect();
    let rows: Vec<BenchRow> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, stages)| {
                let mut cfg = spec.cfg.clone();
                cfg.stages = stages;
                bench_one(&frames[i].0, &frames[i].1, intr, model, &cfg)
            })
            .collect()
    });
    Ok(BenchReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::PreprocessMode;
    use crate::model::ModelConfig;
    use crate::synth::{synthetic_intrinsics, synthetic_scan};

    #[test]
    fn sweep_reports_every_cell() {
        let model = Model::new(ModelConfig::tiny(), 2).unwrap();
        let intr = synthetic_intrinsics(8);
        let frames = vec![
            ("a".to_string(), synthetic_scan(1, 400, &intr)),
            ("b".to_string(), synthetic_scan(2, 300, &intr)),
        ];
        let mut cfg = CodecConfig::new(8, PreprocessMode::Cartesian);
        cfg.window = 256;
        let spec = BenchSpec {
            cfg,
            stage_sweep: vec![1, 4, 0],
            workers: 2,
        };
        let report = run_bench(&frames, None, &model, &spec).unwrap();
        assert_eq!(report.rows.len(), 6);
        assert!(report.all_lossless(), "{:?}", report.rows);
        // deterministic ordering: frame-major
        assert_eq!(report.rows[0].frame, "a");
        assert_eq!(report.rows[3].frame, "b");
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 7);
        assert!(report.to_json().unwrap().contains("\"stages\": 4"));
    }
}
