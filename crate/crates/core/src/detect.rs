//! Rortex-based vortex detection.
//!
//! The velocity gradient is estimated with second-order finite differences,
//! reduced to the 2D Rortex (the rigid-rotation part of the local rotation,
//! zero wherever the gradient has real eigenvalues), thresholded, and split
//! into same-sign connected components. Each component becomes one
//! [`VortexObservation`].

use std::collections::VecDeque;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{Grid, VelocityField};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    Ccw,
    Cw,
}

impl Orientation {
    pub fn sign(self) -> i8 {
        match self {
            Orientation::Ccw => 1,
            Orientation::Cw => -1,
        }
    }

    pub fn from_sign(x: f64) -> Option<Self> {
        if x > 0.0 {
            Some(Orientation::Ccw)
        } else if x < 0.0 {
            Some(Orientation::Cw)
        } else {
            None
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VortexObservation {
    pub frame: usize,
    pub center: (f64, f64),
    pub radius: f64,
    pub orientation: Orientation,
    pub vorticity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectConfig {
    /// Minimum |R| for a cell to belong to a vortex (1/time).
    pub threshold: f64,
    /// Minimum component size in cells.
    pub min_area: usize,
    /// 4 or 8.
    pub connectivity: u8,
    /// 3x3 box-filter passes applied to the velocity before differentiation.
    pub smoothing_passes: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        DetectConfig {
            threshold: 0.1,
            min_area: 4,
            connectivity: 8,
            smoothing_passes: 0,
        }
    }
}

impl DetectConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold.is_finite()) {
            return Err(Error::config("rortex threshold must be positive"));
        }
        if self.min_area == 0 {
            return Err(Error::config("min_area must be at least 1"));
        }
        if self.connectivity != 4 && self.connectivity != 8 {
            return Err(Error::config("connectivity must be 4 or 8"));
        }
        Ok(())
    }
}

/// Per-cell velocity gradient `[∂u/∂x, ∂u/∂y, ∂v/∂x, ∂v/∂y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub grid: Grid,
    pub entries: Vec<[f64; 4]>,
}

impl GradientField {
    pub fn vorticity(&self) -> Vec<f64> {
        self.entries.iter().map(|g| g[2] - g[1]).collect()
    }
}

/// Second-order derivative of a row-major scalar along one axis: central in
/// the interior, one-sided three-point at the two ends.
fn derivative(values: &[f64], grid: &Grid, along_x: bool) -> Vec<f64> {
    let (n, h) = if along_x { (grid.nx, grid.dx) } else { (grid.ny, grid.dy) };
    let at = |ix: usize, iy: usize| values[grid.index(ix, iy)];
    let mut out = vec![0.0; values.len()];
    for iy in 0..grid.ny {
        for ix in 0..grid.nx {
            let k = if along_x { ix } else { iy };
            let f = |m: usize| if along_x { at(m, iy) } else { at(ix, m) };
            let d = if k == 0 {
                (-3.0 * f(0) + 4.0 * f(1) - f(2)) / (2.0 * h)
            } else if k == n - 1 {
                (3.0 * f(n - 1) - 4.0 * f(n - 2) + f(n - 3)) / (2.0 * h)
            } else {
                (f(k + 1) - f(k - 1)) / (2.0 * h)
            };
            out[grid.index(ix, iy)] = d;
        }
    }
    out
}

pub fn velocity_gradient(field: &VelocityField) -> Result<GradientField> {
    let g = field.grid;
    if g.nx < 3 || g.ny < 3 {
        return Err(Error::input("gradient needs at least 3 cells per axis"));
    }
    let ux = derivative(&field.u, &g, true);
    let uy = derivative(&field.u, &g, false);
    let vx = derivative(&field.v, &g, true);
    let vy = derivative(&field.v, &g, false);
    let entries = (0..g.len()).map(|k| [ux[k], uy[k], vx[k], vy[k]]).collect();
    Ok(GradientField { grid: g, entries })
}

/// Rortex of one 2x2 velocity gradient `[ux, uy, vx, vy]`.
pub fn rortex(g: [f64; 4]) -> f64 {
    let [ux, uy, vx, vy] = g;
    let omega = vx - uy;
    // ω² − 4λ_ci², expanded so pure rotation gives exactly zero
    let shear = (uy + vx).hypot(ux - vy);
    if omega.abs() <= shear {
        // real eigenvalues
        return 0.0;
    }
    omega.signum() * (omega.abs() - shear)
}

pub fn rortex_field(grad: &GradientField) -> Vec<f64> {
    grad.entries.iter().map(|&g| rortex(g)).collect()
}

/// 3x3 box filter with edge cells averaging over their in-grid neighbours.
pub fn box_smooth(field: &VelocityField) -> VelocityField {
    let g = field.grid;
    let smooth = |src: &[f64]| {
        let mut out = vec![0.0; src.len()];
        for iy in 0..g.ny {
            for ix in 0..g.nx {
                let mut acc = 0.0;
                let mut n = 0.0;
                for jy in iy.saturating_sub(1)..=(iy + 1).min(g.ny - 1) {
                    for jx in ix.saturating_sub(1)..=(ix + 1).min(g.nx - 1) {
                        acc += src[g.index(jx, jy)];
                        n += 1.0;
                    }
                }
                out[g.index(ix, iy)] = acc / n;
            }
        }
        out
    };
    VelocityField {
        grid: g,
        u: smooth(&field.u),
        v: smooth(&field.v),
    }
}

/// Connected components of `|R| > threshold`, split by sign, labelled in
/// raster order of their first cell.
pub fn extract_vortices(
    rortex: &[f64],
    vorticity: &[f64],
    grid: &Grid,
    cfg: &DetectConfig,
    frame: usize,
) -> Vec<VortexObservation> {
    let n = grid.len();
    debug_assert_eq!(rortex.len(), n);
    debug_assert_eq!(vorticity.len(), n);
    let class = |k: usize| -> i8 {
        let r = rortex[k];
        if r > cfg.threshold {
            1
        } else if r < -cfg.threshold {
            -1
        } else {
            0
        }
    };
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    let neighbours: &[(isize, isize)] = if cfg.connectivity == 4 {
        &[(1, 0), (-1, 0), (0, 1), (0, -1)]
    } else {
        &[
            (1, 0),
            (-1, 0),
            (0, 1),
            (0, -1),
            (1, 1),
            (1, -1),
            (-1, 1),
            (-1, -1),
        ]
    };
    for start in 0..n {
        let sign = class(start);
        if sign == 0 || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut area = 0usize;
        let mut wsum = 0.0;
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut rsum = 0.0;
        let mut osum = 0.0;
        while let Some(k) = queue.pop_front() {
            let ix = k % grid.nx;
            let iy = k / grid.nx;
            let w = rortex[k].abs();
            let (x, y) = grid.center(ix, iy);
            area += 1;
            wsum += w;
            cx += w * x;
            cy += w * y;
            rsum += rortex[k];
            osum += vorticity[k];
            for &(ox, oy) in neighbours {
                let jx = ix as isize + ox;
                let jy = iy as isize + oy;
                if jx < 0 || jy < 0 || jx >= grid.nx as isize || jy >= grid.ny as isize {
                    continue;
                }
                let j = grid.index(jx as usize, jy as usize);
                if !seen[j] && class(j) == sign {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if area < cfg.min_area {
            continue;
        }
        let Some(orientation) = Orientation::from_sign(rsum) else {
            continue;
        };
        out.push(VortexObservation {
            frame,
            center: (cx / wsum, cy / wsum),
            radius: (area as f64 * grid.dx * grid.dy / std::f64::consts::PI).sqrt(),
            orientation,
            vorticity: osum / area as f64,
        });
    }
    out
}

/// Full per-frame detection: optional smoothing, gradient, Rortex, extraction.
pub fn detect_frame(field: &VelocityField, cfg: &DetectConfig, frame: usize) -> Result<Vec<VortexObservation>> {
    cfg.validate()?;
    let mut f = field.clone();
    for _ in 0..cfg.smoothing_passes {
        f = box_smooth(&f);
    }
    let grad = velocity_gradient(&f)?;
    let r = rortex_field(&grad);
    let w = grad.vorticity();
    Ok(extract_vortices(&r, &w, &field.grid, cfg, frame))
}

pub fn detect_sequence(fields: &[VelocityField], cfg: &DetectConfig) -> Result<Vec<Vec<VortexObservation>>> {
    fields
        .iter()
        .enumerate()
        .map(|(t, f)| detect_frame(f, cfg, t))
        .collect()
}

/// CSV dump with columns `t,x,y,r,orientation,omega`.
pub fn write_observations_csv<W: Write>(mut w: W, frames: &[Vec<VortexObservation>]) -> Result<()> {
    writeln!(w, "t,x,y,r,orientation,omega")?;
    for obs in frames.iter().flatten() {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            obs.frame,
            obs.center.0,
            obs.center.1,
            obs.radius,
            obs.orientation.sign(),
            obs.vorticity
        )?;
    }
    Ok(())
}
