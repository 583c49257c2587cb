//! Deterministic synthetic LiDAR frames for tests, training smoke runs,
//! and benchmarks without external data.

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::geom::SensorIntrinsics;

/// Evenly pitched spinning sensor with `num_beams` beams and no vertical
/// offsets.
pub fn synthetic_intrinsics(num_beams: usize) -> SensorIntrinsics {
    assert!(num_beams >= 1);
    let lo = -0.42f64;
    let hi = 0.08f64;
    let pitches: Vec<f64> = (0..num_beams)
        .map(|b| {
            if num_beams == 1 {
                lo
            } else {
                lo + (hi - lo) * b as f64 / (num_beams - 1) as f64
            }
        })
        .collect();
    let offsets = vec![0.0; num_beams];
    SensorIntrinsics::new(pitches, offsets).expect("synthetic intrinsics are valid")
}

struct Cylinder {
    cx: f64,
    cy: f64,
    radius: f64,
    height: f64,
}

/// Simulate one scan: rays from a sensor at 1.7 m over a flat ground plane
/// with a handful of vertical cylinders (poles, trunks, walls). Rays that
/// hit nothing return a far-range point, so every beam yields geometry.
pub fn synthetic_scan(seed: u64, num_points: usize, intr: &SensorIntrinsics) -> Vec<[f64; 3]> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x7363616e);
    let sensor_z = 1.7;
    let max_range = 80.0;

    let cylinders: Vec<Cylinder> = (0..6)
        .map(|_| {
            let ang = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
            let dist = rng.gen_range(5.0..50.0);
            Cylinder {
                cx: dist * ang.cos(),
                cy: dist * ang.sin(),
                radius: rng.gen_range(0.3..4.0),
                height: rng.gen_range(2.0..12.0),
            }
        })
        .collect();

    let mut out = Vec::with_capacity(num_points);
    let mut i = 0usize;
    while out.len() < num_points {
        let beam = i % intr.num_beams;
        i += 1;
        let pitch = intr.pitch_angles[beam];
        let az = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let dir = [pitch.cos() * az.cos(), pitch.cos() * az.sin(), pitch.sin()];

        let mut t_hit = max_range;
        if dir[2] < -1e-9 {
            let t = -sensor_z / dir[2];
            if t > 0.5 && t < t_hit {
                t_hit = t;
            }
        }
        for c in &cylinders {
            // 2D ray-circle intersection in the xy plane
            let ox = -c.cx;
            let oy = -c.cy;
            let a = dir[0] * dir[0] + dir[1] * dir[1];
            if a < 1e-12 {
                continue;
            }
            let b = 2.0 * (ox * dir[0] + oy * dir[1]);
            let cc = ox * ox + oy * oy - c.radius * c.radius;
            let disc = b * b - 4.0 * a * cc;
            if disc < 0.0 {
                continue;
            }
            let t = (-b - disc.sqrt()) / (2.0 * a);
            if t > 0.5 && t < t_hit {
                let z = sensor_z + t * dir[2];
                if z > 0.0 && z < c.height {
                    t_hit = t;
                }
            }
        }
        let noise = rng.gen_range(-0.02..0.02);
        let t = t_hit + noise;
        out.push([t * dir[0], t * dir[1], sensor_z + t * dir[2]]);
    }
    out
}

/// Mixed-geometry fuzz frame: uniform volume noise, tight clusters, and a
/// planar sheet. Points never land exactly at the origin.
pub fn fuzz_frame(seed: u64, num_points: usize) -> Vec<[f64; 3]> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed ^ 0x66757a7a);
    let mut out = Vec::with_capacity(num_points);
    let clusters: Vec<[f64; 3]> = (0..4)
        .map(|_| {
            [
                rng.gen_range(-40.0..40.0),
                rng.gen_range(-40.0..40.0),
                rng.gen_range(-3.0..10.0),
            ]
        })
        .collect();
    for k in 0..num_points {
        let p = match k % 3 {
            0 => [
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-2.0..15.0),
            ],
            1 => {
                let c = &clusters[rng.gen_range(0..clusters.len())];
                [
                    c[0] + rng.gen_range(-1.5..1.5),
                    c[1] + rng.gen_range(-1.5..1.5),
                    c[2] + rng.gen_range(-1.5..1.5),
                ]
            }
            _ => [
                rng.gen_range(-50.0..50.0),
                rng.gen_range(-50.0..50.0),
                0.1 + rng.gen_range(-0.05..0.05),
            ],
        };
        if p[0].abs() + p[1].abs() + p[2].abs() < 1e-6 {
            out.push([1.0, 1.0, 1.0]);
        } else {
            out.push(p);
        }
    }
    out
}
