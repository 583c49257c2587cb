//! Reconstruction metrics: point-to-point (D1) PSNR and Bjøntegaard rate
//! deltas between rate-distortion curves.

use std::collections::HashMap;

use crate::error::{LoccError, Result};

/// PSNR returned for bit-exact reconstructions (mse = 0).
pub const LOSSLESS_PSNR_DB: f64 = 999.0;

fn nearest_sq(
    query: [f64; 3],
    cells: &HashMap<[i64; 3], Vec<usize>>,
    points: &[[f64; 3]],
    cell: f64,
) -> f64 {
    let base = [
        (query[0] / cell).floor() as i64,
        (query[1] / cell).floor() as i64,
        (query[2] / cell).floor() as i64,
    ];
    let mut best = f64::INFINITY;
    let mut r = 0i64;
    loop {
        // ring r: cells at Chebyshev distance exactly r from the base cell
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                        continue;
                    }
                    let key = [base[0] + dx, base[1] + dy, base[2] + dz];
                    if let Some(idxs) = cells.get(&key) {
                        for &i in idxs {
                            let p = points[i];
                            let d = (query[0] - p[0]).powi(2)
                                + (query[1] - p[1]).powi(2)
                                + (query[2] - p[2]).powi(2);
                            if d < best {
                                best = d;
                            }
                        }
                    }
                }
            }
        }
        // any point in ring r+1 is at least r * cell away from the query
        if best.is_finite() && (r as f64 * cell).powi(2) >= best {
            return best;
        }
        r += 1;
    }
}

fn directed_mse(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    if to.len() < 64 {
        return directed_mse_brute(from, to);
    }
    // bucket size tuned so average occupancy stays small
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for p in to {
        for a in 0..3 {
            lo[a] = lo[a].min(p[a]);
            hi[a] = hi[a].max(p[a]);
        }
    }
    let extent = (0..3).map(|a| hi[a] - lo[a]).fold(0.0f64, f64::max).max(1e-9);
    let cell = extent / (to.len() as f64).cbrt().max(1.0);
    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (i, p) in to.iter().enumerate() {
        let key = [
            (p[0] / cell).floor() as i64,
            (p[1] / cell).floor() as i64,
            (p[2] / cell).floor() as i64,
        ];
        cells.entry(key).or_default().push(i);
    }
    let mut acc = 0.0;
    for &q in from {
        // ring expansion only pays off when the query sits near the
        // reference bounding box; distant outliers go brute force
        let outside = (0..3).any(|a| q[a] < lo[a] - cell || q[a] > hi[a] + cell);
        if outside {
            acc += directed_mse_brute(&[q], to);
        } else {
            acc += nearest_sq(q, &cells, to, cell);
        }
    }
    acc / from.len() as f64
}

fn directed_mse_brute(from: &[[f64; 3]], to: &[[f64; 3]]) -> f64 {
    let mut acc = 0.0;
    for &q in from {
        let mut best = f64::INFINITY;
        for &p in to {
            let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
            if d < best {
                best = d;
            }
        }
        acc += best;
    }
    acc / from.len() as f64
}

fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        LOSSLESS_PSNR_DB
    } else {
        10.0 * (3.0 * peak * peak / mse).log10()
    }
}

/// Symmetric point-to-point PSNR: the worse of the two directed MSEs,
/// 10*log10(3*peak^2 / mse). Returns 999 dB for identical sets.
pub fn d1_psnr(a: &[[f64; 3]], b: &[[f64; 3]], peak: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(LoccError::EmptyFrame);
    }
    let mse = directed_mse(a, b).max(directed_mse(b, a));
    Ok(psnr_from_mse(mse, peak))
}

/// Brute-force oracle for [`d1_psnr`] (O(n*m)).
pub fn d1_psnr_brute(a: &[[f64; 3]], b: &[[f64; 3]], peak: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(LoccError::EmptyFrame);
    }
    let mse = directed_mse_brute(a, b).max(directed_mse_brute(b, a));
    Ok(psnr_from_mse(mse, peak))
}

/// Least-squares polynomial fit y = sum c_k x^k of degree `deg` via normal
/// equations (small systems only).
fn polyfit(xs: &[f64], ys: &[f64], deg: usize) -> Result<Vec<f64>> {
    let m = deg + 1;
    let mut ata = vec![0.0; m * m];
    let mut atb = vec![0.0; m];
    for (&x, &y) in xs.iter().zip(ys) {
        let mut powers = vec![1.0; m];
        for k in 1..m {
            powers[k] = powers[k - 1] * x;
        }
        for i in 0..m {
            atb[i] += powers[i] * y;
            for j in 0..m {
                ata[i * m + j] += powers[i] * powers[j];
            }
        }
    }
    // Gaussian elimination with partial pivoting
    for col in 0..m {
        let mut piv = col;
        for r in col + 1..m {
            if ata[r * m + col].abs() > ata[piv * m + col].abs() {
                piv = r;
            }
        }
        if ata[piv * m + col].abs() < 1e-12 {
            return Err(LoccError::DegenerateGeometry("singular polyfit system".into()));
        }
        if piv != col {
            for j in 0..m {
                ata.swap(col * m + j, piv * m + j);
            }
            atb.swap(col, piv);
        }
        for r in col + 1..m {
            let f = ata[r * m + col] / ata[col * m + col];
            for j in col..m {
                ata[r * m + j] -= f * ata[col * m + j];
            }
            atb[r] -= f * atb[col];
        }
    }
    let mut c = vec![0.0; m];
    for i in (0..m).rev() {
        let mut v = atb[i];
        for j in i + 1..m {
            v -= ata[i * m + j] * c[j];
        }
        c[i] = v / ata[i * m + i];
    }
    Ok(c)
}

fn poly_integral(c: &[f64], lo: f64, hi: f64) -> f64 {
    let eval = |x: f64| {
        let mut acc = 0.0;
        for (k, &ck) in c.iter().enumerate() {
            acc += ck / (k + 1) as f64 * x.powi(k as i32 + 1);
        }
        acc
    };
    eval(hi) - eval(lo)
}

/// Bjøntegaard rate delta of curve `b` relative to curve `a`, in percent.
/// Each curve is (rate, psnr) points; rates are compared in the log domain
/// over the common PSNR interval. Negative means `b` spends fewer bits.
pub fn bd_br(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    if a.len() < 2 || b.len() < 2 {
        return Err(LoccError::ShapeMismatch("need >= 2 rate points".into()));
    }
    let prep = |curve: &[(f64, f64)]| -> Result<(Vec<f64>, Vec<f64>)> {
        let mut pts: Vec<(f64, f64)> = curve.to_vec();
        for &(r, _) in &pts {
            if r <= 0.0 {
                return Err(LoccError::RangeError(format!("non-positive rate {r}")));
            }
        }
        pts.sort_by(|p, q| p.1.partial_cmp(&q.1).unwrap());
        pts.dedup_by(|p, q| p.1 == q.1);
        let xs: Vec<f64> = pts.iter().map(|p| p.1).collect(); // psnr
        let ys: Vec<f64> = pts.iter().map(|p| p.0.log10()).collect(); // log rate
        Ok((xs, ys))
    };
    let (xa, ya) = prep(a)?;
    let (xb, yb) = prep(b)?;
    let lo = xa[0].max(xb[0]);
    let hi = xa[xa.len() - 1].min(xb[xb.len() - 1]);
    if hi <= lo {
        return Err(LoccError::NoOverlap);
    }
    let deg_a = 3.min(xa.len() - 1);
    let deg_b = 3.min(xb.len() - 1);
    let ca = polyfit(&xa, &ya, deg_a)?;
    let cb = polyfit(&xb, &yb, deg_b)?;
    let avg_diff = (poly_integral(&cb, lo, hi) - poly_integral(&ca, lo, hi)) / (hi - lo);
    Ok((10f64.powf(avg_diff) - 1.0) * 100.0)
}
