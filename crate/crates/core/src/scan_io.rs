//! Point-cloud file I/O: KITTI-style `.bin` (x, y, z, intensity as f32 LE)
//! and PLY (ascii or binary_little_endian, float or double vertices).

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use crate::error::{LoccError, Result};

/// Read a KITTI velodyne `.bin`: packed [x, y, z, intensity] f32 records.
/// Intensity is dropped.
pub fn read_kitti_bin(path: &Path) -> Result<Vec<[f64; 3]>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 16 != 0 {
        return Err(LoccError::Format(format!(
            "{}: length {} is not a multiple of 16",
            path.display(),
            bytes.len()
        )));
    }
    let mut out = Vec::with_capacity(bytes.len() / 16);
    for rec in bytes.chunks_exact(16) {
        let f = |o: usize| f32::from_le_bytes(rec[o..o + 4].try_into().unwrap()) as f64;
        out.push([f(0), f(4), f(8)]);
    }
    Ok(out)
}

pub fn write_kitti_bin(path: &Path, points: &[[f64; 3]]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for p in points {
        for &c in p {
            w.write_all(&(c as f32).to_le_bytes())?;
        }
        w.write_all(&0f32.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, PartialEq)]
enum PlyFormat {
    Ascii,
    BinaryLe,
}

#[derive(Clone, Copy)]
enum PropType {
    F32,
    F64,
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
}

impl PropType {
    fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "float" | "float32" => PropType::F32,
            "double" | "float64" => PropType::F64,
            "char" | "int8" => PropType::I8,
            "uchar" | "uint8" => PropType::U8,
            "short" | "int16" => PropType::I16,
            "ushort" | "uint16" => PropType::U16,
            "int" | "int32" => PropType::I32,
            "uint" | "uint32" => PropType::U32,
            other => return Err(LoccError::Format(format!("ply property type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            PropType::I8 | PropType::U8 => 1,
            PropType::I16 | PropType::U16 => 2,
            PropType::F32 | PropType::I32 | PropType::U32 => 4,
            PropType::F64 => 8,
        }
    }

    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            PropType::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PropType::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
            PropType::I8 => bytes[0] as i8 as f64,
            PropType::U8 => bytes[0] as f64,
            PropType::I16 => i16::from_le_bytes(bytes[..2].try_into().unwrap()) as f64,
            PropType::U16 => u16::from_le_bytes(bytes[..2].try_into().unwrap()) as f64,
            PropType::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            PropType::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
        }
    }
}

/// Read the vertex positions of a PLY file. Supports ascii and
/// binary_little_endian with scalar vertex properties; non-vertex elements
/// after the vertices are ignored.
pub fn read_ply(path: &Path) -> Result<Vec<[f64; 3]>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;

    // header is ascii lines up to "end_header"
    let header_end = find_header_end(&bytes)
        .ok_or_else(|| LoccError::Format("ply: no end_header".into()))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| LoccError::Format("ply: non-utf8 header".into()))?;
    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(LoccError::Format("ply: missing magic".into()));
    }

    let mut format = None;
    let mut vertex_count = None;
    let mut props: Vec<(PropType, String)> = Vec::new();
    let mut in_vertex = false;
    for line in lines {
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["format", f, _version] => {
                format = Some(match *f {
                    "ascii" => PlyFormat::Ascii,
                    "binary_little_endian" => PlyFormat::BinaryLe,
                    other => {
                        return Err(LoccError::Format(format!("ply format {other} unsupported")))
                    }
                });
            }
            ["comment", ..] | ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                in_vertex = true;
                vertex_count =
                    Some(n.parse::<usize>().map_err(|_| {
                        LoccError::Format(format!("ply vertex count {n}"))
                    })?);
            }
            ["element", ..] => in_vertex = false,
            ["property", "list", ..] => {
                if in_vertex {
                    return Err(LoccError::Format("ply: list property on vertices".into()));
                }
            }
            ["property", ty, name] => {
                if in_vertex {
                    props.push((PropType::parse(ty)?, name.to_string()));
                }
            }
            ["end_header"] | [] => {}
            other => {
                return Err(LoccError::Format(format!("ply header line {other:?}")));
            }
        }
    }
    let format = format.ok_or_else(|| LoccError::Format("ply: no format line".into()))?;
    let count = vertex_count.ok_or_else(|| LoccError::Format("ply: no vertex element".into()))?;
    let find = |name: &str| {
        props
            .iter()
            .position(|(_, n)| n == name)
            .ok_or_else(|| LoccError::Format(format!("ply: missing vertex property {name}")))
    };
    let (xi, yi, zi) = (find("x")?, find("y")?, find("z")?);

    let body = &bytes[header_end..];
    let mut out = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            let text = std::str::from_utf8(body)
                .map_err(|_| LoccError::Format("ply: non-utf8 ascii body".into()))?;
            for (ln, line) in text.lines().take(count).enumerate() {
                let vals: Vec<f64> = line
                    .split_whitespace()
                    .map(|t| t.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| LoccError::Format(format!("ply: bad vertex line {ln}")))?;
                if vals.len() < props.len() {
                    return Err(LoccError::Format(format!("ply: short vertex line {ln}")));
                }
                out.push([vals[xi], vals[yi], vals[zi]]);
            }
        }
        PlyFormat::BinaryLe => {
            let stride: usize = props.iter().map(|(t, _)| t.size()).sum();
            if body.len() < stride * count {
                return Err(LoccError::Truncation(format!(
                    "ply: {} bytes for {} vertices of {} bytes",
                    body.len(),
                    count,
                    stride
                )));
            }
            let offsets: Vec<usize> = props
                .iter()
                .scan(0usize, |acc, (t, _)| {
                    let o = *acc;
                    *acc += t.size();
                    Some(o)
                })
                .collect();
            for rec in body.chunks_exact(stride).take(count) {
                out.push([
                    props[xi].0.read_le(&rec[offsets[xi]..]),
                    props[yi].0.read_le(&rec[offsets[yi]..]),
                    props[zi].0.read_le(&rec[offsets[zi]..]),
                ]);
            }
        }
    }
    if out.len() != count {
        return Err(LoccError::Truncation(format!(
            "ply: {} of {} vertices present",
            out.len(),
            count
        )));
    }
    Ok(out)
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"end_header";
    let limit = bytes.len().min(64 * 1024);
    for i in 0..limit.saturating_sub(needle.len()) {
        if &bytes[i..i + needle.len()] == needle {
            // consume to end of line
            let mut j = i + needle.len();
            while j < bytes.len() && bytes[j] != b'\n' {
                j += 1;
            }
            return Some((j + 1).min(bytes.len()));
        }
    }
    None
}

/// Write points as PLY with double-precision vertices.
pub fn write_ply(path: &Path, points: &[[f64; 3]], binary: bool) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let fmt = if binary { "binary_little_endian" } else { "ascii" };
    write!(
        w,
        "ply\nformat {fmt} 1.0\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
        points.len()
    )?;
    if binary {
        for p in points {
            for &c in p {
                w.write_all(&c.to_le_bytes())?;
            }
        }
    } else {
        for p in points {
            writeln!(w, "{} {} {}", p[0], p[1], p[2])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Dispatch on extension: `.bin` (KITTI) or `.ply`.
pub fn load_points(path: &Path) -> Result<Vec<[f64; 3]>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => read_kitti_bin(path),
        Some("ply") => read_ply(path),
        other => Err(LoccError::Unsupported(format!(
            "input extension {other:?} (expected .bin or .ply)"
        ))),
    }
}

/// Dispatch on extension for writing decoded points.
pub fn save_points(path: &Path, points: &[[f64; 3]]) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("bin") => write_kitti_bin(path, points),
        Some("ply") => write_ply(path, points, true),
        other => Err(LoccError::Unsupported(format!(
            "output extension {other:?} (expected .bin or .ply)"
        ))),
    }
}
