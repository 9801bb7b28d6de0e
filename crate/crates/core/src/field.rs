//! Gridded 2D velocity snapshots.
//!
//! Cells are stored row-major: index `iy * nx + ix`, with cell centres at
//! `origin + ((ix + 0.5) dx, (iy + 0.5) dy)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    pub origin: (f64, f64),
}

impl Grid {
    pub fn new(nx: usize, ny: usize, dx: f64, dy: f64, origin: (f64, f64)) -> Result<Self> {
        let grid = Grid {
            nx,
            ny,
            dx,
            dy,
            origin,
        };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 8 || self.ny < 8 {
            return Err(Error::config(format!(
                "grid must be at least 8x8 cells, got {}x{}",
                self.nx, self.ny
            )));
        }
        if !(self.dx > 0.0 && self.dy > 0.0) || !self.dx.is_finite() || !self.dy.is_finite() {
            return Err(Error::config("grid spacing must be positive and finite"));
        }
        if !self.origin.0.is_finite() || !self.origin.1.is_finite() {
            return Err(Error::config("grid origin must be finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    /// Cell-centre coordinates.
    #[inline]
    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        (
            self.origin.0 + (ix as f64 + 0.5) * self.dx,
            self.origin.1 + (iy as f64 + 0.5) * self.dy,
        )
    }

    pub fn width(&self) -> f64 {
        self.nx as f64 * self.dx
    }

    pub fn height(&self) -> f64 {
        self.ny as f64 * self.dy
    }

    /// Physical centre of the grid.
    pub fn midpoint(&self) -> (f64, f64) {
        (
            self.origin.0 + 0.5 * self.width(),
            self.origin.1 + 0.5 * self.height(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub grid: Grid,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl VelocityField {
    pub fn zeros(grid: Grid) -> Self {
        VelocityField {
            grid,
            u: vec![0.0; grid.len()],
            v: vec![0.0; grid.len()],
        }
    }

    pub fn new(grid: Grid, u: Vec<f64>, v: Vec<f64>) -> Result<Self> {
        let field = VelocityField { grid, u, v };
        field.validate()?;
        Ok(field)
    }

    /// Samples `f(x, y) -> (u, v)` at every cell centre.
    pub fn from_fn(grid: Grid, f: impl Fn(f64, f64) -> (f64, f64)) -> Self {
        let mut field = Self::zeros(grid);
        for iy in 0..grid.ny {
            for ix in 0..grid.nx {
                let (x, y) = grid.center(ix, iy);
                let (u, v) = f(x, y);
                let k = grid.index(ix, iy);
                field.u[k] = u;
                field.v[k] = v;
            }
        }
        field
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.grid.len();
        if self.u.len() != n || self.v.len() != n {
            return Err(Error::input(format!(
                "velocity field has {}/{} entries, grid expects {n}",
                self.u.len(),
                self.v.len()
            )));
        }
        if self.u.iter().chain(&self.v).any(|x| !x.is_finite()) {
            return Err(Error::input("velocity field contains non-finite values"));
        }
        Ok(())
    }

    /// Rotates the field by +90° about the grid midpoint. Requires a square
    /// grid with equal spacing; a point `(x, y)` maps to `(-y, x)` relative to
    /// the midpoint and velocities rotate the same way.
    pub fn rotate_quarter(&self) -> Result<Self> {
        let g = self.grid;
        if g.nx != g.ny || g.dx != g.dy {
            return Err(Error::input(
                "quarter rotation needs a square grid with equal spacing",
            ));
        }
        let n = g.nx;
        let mut out = Self::zeros(g);
        for iy in 0..n {
            for ix in 0..n {
                // (ix, iy) -> (n-1-iy, ix)
                let src = g.index(ix, iy);
                let dst = g.index(n - 1 - iy, ix);
                out.u[dst] = -self.v[src];
                out.v[dst] = self.u[src];
            }
        }
        Ok(out)
    }
}
