//! Sensor geometry: coordinate transforms between Cartesian scans and the
//! hybrid cylindrical-beam (or spherical) representation, plus integer grid
//! quantization for octree construction.
//!
//! All angle math is f64; quantization rounds half away from zero so the
//! integer-grid boundary is deterministic across platforms.

use serde::Deserialize;

use crate::error::{LoccError, Result};

/// Per-beam calibration of a spinning LiDAR: pitch angles and vertical
/// offsets indexed by beam. Beams are 1-based in the public API.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorIntrinsics {
    pub num_beams: usize,
    /// Pitch angle per beam, radians.
    pub pitch_angles: Vec<f64>,
    /// Vertical offset per beam, in the same units as point coordinates
    /// (after `unit_scale` is applied by the loader).
    pub vertical_offsets: Vec<f64>,
    /// Azimuth sample count per turn; carried for format fidelity, unused.
    pub phi_per_turn: Option<Vec<u32>>,
}

#[derive(Deserialize)]
struct IntrinsicsFile {
    #[serde(rename = "numLasers")]
    num_lasers: usize,
    #[serde(rename = "lasersTheta")]
    lasers_theta: Vec<f64>,
    #[serde(rename = "lasersZ")]
    lasers_z: Vec<f64>,
    #[serde(rename = "lasersNumPhiPerTurn", default)]
    lasers_num_phi_per_turn: Option<Vec<u32>>,
    /// Optional multiplier applied to `lasersZ`, for files whose vertical
    /// offsets use a different unit than the point coordinates.
    #[serde(rename = "unitScale", default)]
    unit_scale: Option<f64>,
}

impl SensorIntrinsics {
    pub fn new(pitch_angles: Vec<f64>, vertical_offsets: Vec<f64>) -> Result<Self> {
        if pitch_angles.is_empty() {
            return Err(LoccError::InvalidIntrinsics("no beams".into()));
        }
        if pitch_angles.len() != vertical_offsets.len() {
            return Err(LoccError::InvalidIntrinsics(format!(
                "pitch/offset length mismatch: {} vs {}",
                pitch_angles.len(),
                vertical_offsets.len()
            )));
        }
        if pitch_angles.iter().any(|a| !a.is_finite())
            || vertical_offsets.iter().any(|z| !z.is_finite())
        {
            return Err(LoccError::InvalidIntrinsics("non-finite entry".into()));
        }
        Ok(Self {
            num_beams: pitch_angles.len(),
            pitch_angles,
            vertical_offsets,
            phi_per_turn: None,
        })
    }

    /// Parse the JSON intrinsics format (`numLasers`, `lasersTheta`,
    /// `lasersZ`, optional `lasersNumPhiPerTurn` and `unitScale`).
    /// Unknown keys are ignored.
    pub fn from_json(text: &str) -> Result<Self> {
        let file: IntrinsicsFile = serde_json::from_str(text)?;
        if file.lasers_theta.len() != file.num_lasers || file.lasers_z.len() != file.num_lasers {
            return Err(LoccError::InvalidIntrinsics(format!(
                "numLasers = {} but lasersTheta has {} and lasersZ has {} entries",
                file.num_lasers,
                file.lasers_theta.len(),
                file.lasers_z.len()
            )));
        }
        if let Some(ppt) = &file.lasers_num_phi_per_turn {
            if ppt.len() != file.num_lasers {
                return Err(LoccError::InvalidIntrinsics(
                    "lasersNumPhiPerTurn length mismatch".into(),
                ));
            }
        }
        let scale = file.unit_scale.unwrap_or(1.0);
        let offsets = file.lasers_z.iter().map(|z| z * scale).collect();
        let mut intr = Self::new(file.lasers_theta, offsets)?;
        intr.phi_per_turn = file.lasers_num_phi_per_turn;
        Ok(intr)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Built-in calibrations for the two public sensors used in tests and docs.
pub mod presets {
    use super::SensorIntrinsics;

    pub const FORD_HDL64_JSON: &str = include_str!("../data/ford64.json");
    pub const QNX_VLP16_JSON: &str = include_str!("../data/qnx16.json");

    /// 64-beam Velodyne HDL-64E calibration (Ford sequences).
    pub fn ford64() -> SensorIntrinsics {
        SensorIntrinsics::from_json(FORD_HDL64_JSON).expect("embedded ford64 intrinsics")
    }

    /// 16-beam Velodyne VLP-16 calibration (QNX sequences).
    pub fn qnx16() -> SensorIntrinsics {
        SensorIntrinsics::from_json(QNX_VLP16_JSON).expect("embedded qnx16 intrinsics")
    }
}

/// Cartesian to cylindrical: (rho, theta, z) with theta in (-pi, pi].
pub fn to_cylindrical(p: [f64; 3]) -> Result<(f64, f64, f64)> {
    if p.iter().any(|c| !c.is_finite()) {
        return Err(LoccError::InvalidPoint(format!("{p:?}")));
    }
    let rho = p[0].hypot(p[1]);
    let theta = if p[0] == 0.0 && p[1] == 0.0 {
        0.0
    } else {
        p[1].atan2(p[0])
    };
    Ok((rho, theta, p[2]))
}

/// Assign a point to the beam whose calibrated pitch best matches the
/// point's apparent pitch. Ties break toward the smaller beam index.
/// Returns a 1-based beam index.
pub fn map_beam(rho: f64, z: f64, intr: &SensorIntrinsics) -> Result<usize> {
    if rho <= 0.0 {
        return Err(LoccError::DegenerateGeometry(format!(
            "rho = {rho}: pitch angle undefined"
        )));
    }
    let mut best = 0usize;
    let mut best_res = f64::INFINITY;
    for b in 0..intr.num_beams {
        let pitch = ((z - intr.vertical_offsets[b]) / rho).atan();
        let r = pitch - intr.pitch_angles[b];
        let r2 = r * r;
        if r2 < best_res {
            best_res = r2;
            best = b;
        }
    }
    Ok(best + 1)
}

/// Recover z from (rho, beam) using the calibrated ray of that beam.
pub fn inverse_beam(rho: f64, beam: usize, intr: &SensorIntrinsics) -> Result<f64> {
    if beam == 0 || beam > intr.num_beams {
        return Err(LoccError::InvalidBeam {
            beam,
            num_beams: intr.num_beams,
        });
    }
    Ok(rho * intr.pitch_angles[beam - 1].tan() + intr.vertical_offsets[beam - 1])
}

/// Cartesian to spherical: (r, azimuth, elevation).
pub fn to_spherical(p: [f64; 3]) -> Result<(f64, f64, f64)> {
    if p.iter().any(|c| !c.is_finite()) {
        return Err(LoccError::InvalidPoint(format!("{p:?}")));
    }
    let r = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
    if r == 0.0 {
        return Err(LoccError::DegenerateGeometry(
            "origin point has no spherical direction".into(),
        ));
    }
    let theta = if p[0] == 0.0 && p[1] == 0.0 {
        0.0
    } else {
        p[1].atan2(p[0])
    };
    let phi = (p[2] / r).asin();
    Ok((r, theta, phi))
}

/// Per-frame quantization to the `[0, 2^L - 1]` integer grid.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizationParams {
    pub depth: u8,
    pub per_axis_scale: [f64; 3],
    pub per_axis_offset: [f64; 3],
}

impl QuantizationParams {
    pub fn grid_max(&self) -> u32 {
        (1u32 << self.depth) - 1
    }

    /// Fit per-axis offsets/scales so all given coordinate triples land in
    /// the grid. Degenerate axes (single value) get scale 1.
    pub fn fit(coords: &[[f64; 3]], depth: u8) -> Result<Self> {
        if coords.is_empty() {
            return Err(LoccError::EmptyFrame);
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for c in coords {
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
        let cells = ((1u64 << depth) - 1) as f64;
        let mut scale = [1.0; 3];
        for a in 0..3 {
            if hi[a] > lo[a] {
                scale[a] = (hi[a] - lo[a]) / cells;
            }
        }
        Ok(Self {
            depth,
            per_axis_scale: scale,
            per_axis_offset: lo,
        })
    }

    /// Round-half-away-from-zero quantization, clamped to the grid.
    /// Returns Err for points outside the configured volume (more than half
    /// a cell beyond the grid ends) so callers can report a rejection count.
    pub fn quantize(&self, c: [f64; 3]) -> Result<[u32; 3]> {
        let max = self.grid_max() as f64;
        let mut g = [0u32; 3];
        for a in 0..3 {
            let v = (c[a] - self.per_axis_offset[a]) / self.per_axis_scale[a];
            if !v.is_finite() {
                return Err(LoccError::NonFinite("quantize".into()));
            }
            let r = v.round(); // round half away from zero
            if r < -0.5 || r > max + 0.5 {
                return Err(LoccError::RangeError(format!(
                    "axis {a}: {} outside [0, {max}]",
                    c[a]
                )));
            }
            g[a] = r.clamp(0.0, max) as u32;
        }
        Ok(g)
    }

    /// Bin center of a grid coordinate.
    pub fn dequantize(&self, g: [u32; 3]) -> [f64; 3] {
        let mut c = [0.0; 3];
        for a in 0..3 {
            c[a] = self.per_axis_offset[a] + g[a] as f64 * self.per_axis_scale[a];
        }
        c
    }
}

/// Which coordinate representation the octree is built in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PreprocessMode {
    /// (rho, theta, beam) via sensor intrinsics.
    CylindricalBeam,
    /// (r, azimuth, elevation), single-level conversion.
    Spherical,
    /// Raw (x, y, z).
    Cartesian,
}

impl PreprocessMode {
    pub fn as_u8(self) -> u8 {
        match self {
            PreprocessMode::CylindricalBeam => 0,
            PreprocessMode::Spherical => 1,
            PreprocessMode::Cartesian => 2,
        }
    }

    pub fn from_u8(v: u8) -> Result<Self> {
        match v {
            0 => Ok(PreprocessMode::CylindricalBeam),
            1 => Ok(PreprocessMode::Spherical),
            2 => Ok(PreprocessMode::Cartesian),
            _ => Err(LoccError::Format(format!("unknown preprocessing mode {v}"))),
        }
    }
}

/// Forward transform of one point into the mode's coordinate system.
/// For cylindrical-beam, the third component is the (1-based) beam index.
pub fn transform_point(
    p: [f64; 3],
    mode: PreprocessMode,
    intr: Option<&SensorIntrinsics>,
) -> Result<[f64; 3]> {
    match mode {
        PreprocessMode::Cartesian => {
            if p.iter().any(|c| !c.is_finite()) {
                return Err(LoccError::InvalidPoint(format!("{p:?}")));
            }
            Ok(p)
        }
        PreprocessMode::Spherical => {
            let (r, theta, phi) = to_spherical(p)?;
            Ok([r, theta, phi])
        }
        PreprocessMode::CylindricalBeam => {
            let intr = intr.ok_or(LoccError::MissingIntrinsics)?;
            let (rho, theta, z) = to_cylindrical(p)?;
            let beam = map_beam(rho, z, intr)?;
            Ok([rho, theta, beam as f64])
        }
    }
}

/// Inverse transform back to Cartesian.
pub fn inverse_transform_point(
    c: [f64; 3],
    mode: PreprocessMode,
    intr: Option<&SensorIntrinsics>,
) -> Result<[f64; 3]> {
    match mode {
        PreprocessMode::Cartesian => Ok(c),
        PreprocessMode::Spherical => {
            let (r, theta, phi) = (c[0], c[1], c[2]);
            Ok([
                r * phi.cos() * theta.cos(),
                r * phi.cos() * theta.sin(),
                r * phi.sin(),
            ])
        }
        PreprocessMode::CylindricalBeam => {
            let intr = intr.ok_or(LoccError::MissingIntrinsics)?;
            let (rho, theta) = (c[0], c[1]);
            let beam = c[2].round() as usize;
            let z = inverse_beam(rho, beam, intr)?;
            Ok([rho * theta.cos(), rho * theta.sin(), z])
        }
    }
}
