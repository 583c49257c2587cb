//! `locc` command line: encode / decode / train / bench / metrics.
//!
//! Exit codes: 0 success, 1 other error, 2 round-trip failure,
//! 3 input/bitstream format error, 4 config or model-digest mismatch.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use locc_core::bench::{run_bench, BenchSpec};
use locc_core::codec::{decode_frame, encode_frame, expected_grid_points, CodecConfig};
use locc_core::error::LoccError;
use locc_core::geom::{PreprocessMode, SensorIntrinsics};
use locc_core::metrics::d1_psnr;
use locc_core::model::{Model, ModelConfig};
use locc_core::scan_io::{load_points, save_points};
use locc_core::synth::{fuzz_frame, synthetic_intrinsics, synthetic_scan};
use locc_core::trainer::{frame_windows, train, TrainConfig};

#[derive(Parser)]
#[command(name = "locc", version, about = "Lossless LiDAR geometry codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Cylbeam,
    Spherical,
    Cartesian,
}

impl From<ModeArg> for PreprocessMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Cylbeam => PreprocessMode::CylindricalBeam,
            ModeArg::Spherical => PreprocessMode::Spherical,
            ModeArg::Cartesian => PreprocessMode::Cartesian,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    Csv,
    Json,
}

#[derive(Args)]
struct CodecArgs {
    /// Octree depth L
    #[arg(long, default_value_t = 12)]
    depth: u8,
    /// Stages per window; 0 selects full autoregression
    #[arg(long, default_value_t = 1)]
    stages: u16,
    /// Window length W
    #[arg(long, default_value_t = 1024)]
    window: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Cartesian)]
    mode: ModeArg,
    /// Sensor intrinsics JSON (required for cylbeam mode)
    #[arg(long)]
    intrinsics: Option<PathBuf>,
    /// Rerun the backbone every stage (baseline; needs a baseline checkpoint)
    #[arg(long)]
    baseline_fully_causal: bool,
}

impl CodecArgs {
    fn config(&self) -> CodecConfig {
        let mut cfg = CodecConfig::new(self.depth, self.mode.into());
        cfg.stages = self.stages;
        cfg.window = self.window;
        cfg.baseline = self.baseline_fully_causal;
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Compress a point cloud (.bin or .ply) into a .locc bitstream
    Encode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        codec: CodecArgs,
        /// Decode the result and verify the grid round trip
        #[arg(long)]
        verify: bool,
    },
    /// Decompress a .locc bitstream back into a point cloud
    Decode {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        intrinsics: Option<PathBuf>,
    },
    /// Train (or initialize) a model checkpoint
    Train {
        /// Scan file or directory of scans; omit to train on synthetic data
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output checkpoint path
        #[arg(long)]
        output: PathBuf,
        /// Resume from an existing checkpoint instead of a fresh init
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[command(flatten)]
        codec: CodecArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        epochs: usize,
        #[arg(long, default_value_t = 4)]
        batch_windows: usize,
        /// Comma-separated stage counts to sample (0 = AR)
        #[arg(long, default_value = "1,2,4,0")]
        stage_set: String,
        /// Use the small test-size architecture instead of the full one
        #[arg(long)]
        tiny: bool,
        /// Synthetic frames to generate when --input is omitted
        #[arg(long, default_value_t = 8)]
        synthetic_frames: usize,
        #[arg(long, default_value_t = 4000)]
        synthetic_points: usize,
        /// JSONL training log path
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Rate/latency sweep with round-trip verification
    Bench {
        /// Scan file or directory; omit for synthetic frames
        #[arg(long)]
        input: Option<PathBuf>,
        /// Report file; stdout when omitted
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        codec: CodecArgs,
        /// Comma-separated stage counts to sweep (overrides --stages)
        #[arg(long)]
        stage_sweep: Option<String>,
        #[arg(long, value_enum, default_value_t = ReportArg::Csv)]
        report: ReportArg,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        #[arg(long, default_value_t = 4)]
        synthetic_frames: usize,
        #[arg(long, default_value_t = 2000)]
        synthetic_points: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Distortion metrics between two point clouds
    Metrics {
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth cloud to compare against
        #[arg(long)]
        reference: PathBuf,
        /// Signal peak for PSNR (59.70 for KITTI-like, 30000 for Ford raw units)
        #[arg(long, default_value_t = 59.70)]
        peak: f64,
        #[arg(long, value_enum, default_value_t = ReportArg::Json)]
        report: ReportArg,
    },
}

fn exit_code_for(err: &LoccError) -> u8 {
    match err {
        LoccError::RoundTrip(_) => 2,
        LoccError::Format(_)
        | LoccError::Truncation(_)
        | LoccError::Unsupported(_)
        | LoccError::CorruptTree(_)
        | LoccError::InvalidIntrinsics(_)
        | LoccError::Json(_) => 3,
        LoccError::ConfigMismatch(_) => 4,
        _ => 1,
    }
}

fn load_intrinsics(path: &Option<PathBuf>) -> Result<Option<SensorIntrinsics>, LoccError> {
    match path {
        Some(p) => Ok(Some(SensorIntrinsics::load(p)?)),
        None => Ok(None),
    }
}

fn collect_frames(path: &Path) -> Result<Vec<(String, Vec<[f64; 3]>)>, LoccError> {
    let mut out = Vec::new();
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                matches!(
                    p.extension().and_then(|e| e.to_str()),
                    Some("bin") | Some("ply")
                )
            })
            .collect();
        entries.sort();
        for p in entries {
            out.push((p.display().to_string(), load_points(&p)?));
        }
        if out.is_empty() {
            return Err(LoccError::Unsupported(format!(
                "no .bin or .ply files in {}",
                path.display()
            )));
        }
    } else {
        out.push((path.display().to_string(), load_points(path)?));
    }
    Ok(out)
}

fn synthetic_frames(count: usize, points: usize, seed: u64) -> Vec<(String, Vec<[f64; 3]>)> {
    let intr = synthetic_intrinsics(16);
    (0..count)
        .map(|i| {
            let pts = if i % 2 == 0 {
                synthetic_scan(seed.wrapping_add(i as u64), points, &intr)
            } else {
                fuzz_frame(seed.wrapping_add(i as u64), points)
            };
            (format!("synthetic-{i}"), pts)
        })
        .collect()
}

fn parse_stage_list(text: &str) -> Result<Vec<u16>, LoccError> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<u16>()
                .map_err(|_| LoccError::ConfigMismatch(format!("bad stage count {t:?}")))
        })
        .collect()
}

fn run(cli: Cli) -> Result<(), LoccError> {
    match cli.command {
        Command::Encode {
            input,
            output,
            checkpoint,
            codec,
            verify,
        } => {
            let model = Model::load(&checkpoint)?;
            let intr = load_intrinsics(&codec.intrinsics)?;
            let points = load_points(&input)?;
            let cfg = codec.config();
            let (bytes, stats) = encode_frame(&points, intr.as_ref(), &model, &cfg)?;
            std::fs::write(&output, &bytes)?;
            eprintln!(
                "encoded {} points -> {} bytes ({:.4} bpp, {} rejected, {:.2}s)",
                stats.input_points, bytes.len(), stats.bpp, stats.rejected, stats.seconds
            );
            if verify {
                let (decoded, _) = decode_frame(&bytes, intr.as_ref(), &model)?;
                let expected = expected_grid_points(&points, intr.as_ref(), &cfg)?;
                if decoded.grid_points != expected {
                    return Err(LoccError::RoundTrip(format!(
                        "{} decoded vs {} expected cells",
                        decoded.grid_points.len(),
                        expected.len()
                    )));
                }
                eprintln!("round trip verified: {} cells", expected.len());
            }
            Ok(())
        }
        Command::Decode {
            input,
            output,
            checkpoint,
            intrinsics,
        } => {
            let model = Model::load(&checkpoint)?;
            let intr = load_intrinsics(&intrinsics)?;
            let bytes = std::fs::read(&input)?;
            let (decoded, stats) = decode_frame(&bytes, intr.as_ref(), &model)?;
            save_points(&output, &decoded.points)?;
            eprintln!(
                "decoded {} points ({:.4} bpp, {:.2}s)",
                decoded.points.len(),
                stats.bpp,
                stats.seconds
            );
            Ok(())
        }
        Command::Train {
            input,
            output,
            checkpoint,
            codec,
            seed,
            epochs,
            batch_windows,
            stage_set,
            tiny,
            synthetic_frames: syn_frames,
            synthetic_points,
            log,
        } => {
            let intr = load_intrinsics(&codec.intrinsics)?;
            let mut model = match checkpoint {
                Some(p) => Model::load(&p)?,
                None => {
                    let mut mc = if tiny {
                        ModelConfig::tiny()
                    } else {
                        ModelConfig::default()
                    };
                    mc.fully_causal = codec.baseline_fully_causal;
                    Model::new(mc, seed)?
                }
            };
            let frames = match &input {
                Some(p) => collect_frames(p)?,
                None => synthetic_frames(syn_frames, synthetic_points, seed),
            };
            let mut windows = Vec::new();
            for (_, pts) in &frames {
                windows.extend(frame_windows(
                    pts,
                    intr.as_ref(),
                    codec.mode.into(),
                    codec.depth,
                    codec.window,
                    locc_core::codec::DEFAULT_DIRECT_LEVELS,
                    model.config.ancestors,
                )?);
            }
            if epochs > 0 {
                let cfg = TrainConfig {
                    epochs,
                    batch_windows,
                    stage_set: parse_stage_list(&stage_set)?,
                    seed,
                    ..Default::default()
                };
                let mut log_file = match &log {
                    Some(p) => Some(std::fs::File::create(p)?),
                    None => None,
                };
                let losses = train(
                    &mut model,
                    &windows,
                    &cfg,
                    log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
                )?;
                if let (Some(first), Some(last)) = (losses.first(), losses.last()) {
                    eprintln!(
                        "trained {} steps on {} windows: {:.3} -> {:.3} bits/symbol",
                        losses.len(),
                        windows.len(),
                        first,
                        last
                    );
                }
            }
            model.save(&output)?;
            eprintln!("checkpoint written to {} (digest {:016x})", output.display(), model.digest());
            Ok(())
        }
        Command::Bench {
            input,
            output,
            checkpoint,
            codec,
            stage_sweep,
            report,
            workers,
            synthetic_frames: syn_frames,
            synthetic_points,
            seed,
        } => {
            let model = Model::load(&checkpoint)?;
            let intr = load_intrinsics(&codec.intrinsics)?;
            let frames = match &input {
                Some(p) => collect_frames(p)?,
                None => synthetic_frames(syn_frames, synthetic_points, seed),
            };
            let sweep = match &stage_sweep {
                Some(s) => parse_stage_list(s)?,
                None => vec![codec.stages],
            };
            let spec = BenchSpec {
                cfg: codec.config(),
                stage_sweep: sweep,
                workers,
            };
            let bench_report = run_bench(&frames, intr.as_ref(), &model, &spec)?;
            let text = match report {
                ReportArg::Csv => bench_report.to_csv(),
                ReportArg::Json => bench_report.to_json()?,
            };
            match &output {
                Some(p) => std::fs::write(p, text)?,
                None => println!("{text}"),
            }
            if !bench_report.all_lossless() {
                let bad: Vec<&str> = bench_report
                    .rows
                    .iter()
                    .filter(|r| !r.lossless || r.error.is_some())
                    .map(|r| r.frame.as_str())
                    .collect();
                return Err(LoccError::RoundTrip(format!(
                    "bench round-trip failures: {bad:?}"
                )));
            }
            Ok(())
        }
        Command::Metrics {
            input,
            reference,
            peak,
            report,
        } => {
            let a = load_points(&input)?;
            let b = load_points(&reference)?;
            let psnr = d1_psnr(&a, &b, peak)?;
            match report {
                ReportArg::Json => println!(
                    "{{\"d1_psnr_db\":{psnr:.6},\"peak\":{peak},\"points_input\":{},\"points_reference\":{}}}",
                    a.len(),
                    b.len()
                ),
                ReportArg::Csv => {
                    println!("d1_psnr_db,peak,points_input,points_reference");
                    println!("{psnr:.6},{peak},{},{}", a.len(), b.len());
                }
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
