//! Metric 2D grids and the two-channel traversability map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major scalar grid with metric georeferencing.
///
/// `origin` is the world position of the *corner* of cell (0, 0); cell centers
/// sit at `origin + (i + 0.5) * cell`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2 {
    pub nx: usize,
    pub ny: usize,
    pub origin: (f64, f64),
    pub cell: f64,
    pub data: Vec<f64>,
}

impl Grid2 {
    pub fn filled(nx: usize, ny: usize, origin: (f64, f64), cell: f64, value: f64) -> Self {
        Self { nx, ny, origin, cell, data: vec![value; nx * ny] }
    }

    #[inline]
    pub fn idx(&self, ix: usize, iy: usize) -> usize {
        iy * self.nx + ix
    }

    #[inline]
    pub fn get(&self, ix: usize, iy: usize) -> f64 {
        self.data[self.idx(ix, iy)]
    }

    #[inline]
    pub fn set(&mut self, ix: usize, iy: usize, v: f64) {
        let i = self.idx(ix, iy);
        self.data[i] = v;
    }

    /// Cell containing the world point, clamped to the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> (usize, usize) {
        let ix = ((x - self.origin.0) / self.cell).floor();
        let iy = ((y - self.origin.1) / self.cell).floor();
        let ix = ix.clamp(0.0, self.nx as f64 - 1.0) as usize;
        let iy = iy.clamp(0.0, self.ny as f64 - 1.0) as usize;
        (ix, iy)
    }

    /// True when the point lies inside the grid footprint.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let lx = x - self.origin.0;
        let ly = y - self.origin.1;
        lx >= 0.0 && ly >= 0.0 && lx < self.nx as f64 * self.cell && ly < self.ny as f64 * self.cell
    }

    /// Value at the cell containing the (border-clamped) point.
    pub fn nearest(&self, x: f64, y: f64) -> f64 {
        let (ix, iy) = self.cell_of(x, y);
        self.get(ix, iy)
    }

    /// Bilinear interpolation on cell centers, border-clamped.
    ///
    /// Returns the value plus the four corner cells with their weights so
    /// callers can propagate gradients with respect to cell values.
    pub fn bilinear(&self, x: f64, y: f64) -> BilinearSupport {
        // coordinates in units of cells relative to cell-center lattice
        let gx = (x - self.origin.0) / self.cell - 0.5;
        let gy = (y - self.origin.1) / self.cell - 0.5;
        let gx = gx.clamp(0.0, self.nx as f64 - 1.0);
        let gy = gy.clamp(0.0, self.ny as f64 - 1.0);
        let ix0 = (gx.floor() as usize).min(self.nx - 1);
        let iy0 = (gy.floor() as usize).min(self.ny - 1);
        let ix1 = (ix0 + 1).min(self.nx - 1);
        let iy1 = (iy0 + 1).min(self.ny - 1);
        let fx = gx - ix0 as f64;
        let fy = gy - iy0 as f64;
        let w00 = (1.0 - fx) * (1.0 - fy);
        let w10 = fx * (1.0 - fy);
        let w01 = (1.0 - fx) * fy;
        let w11 = fx * fy;
        let c = [
            (self.idx(ix0, iy0), w00),
            (self.idx(ix1, iy0), w10),
            (self.idx(ix0, iy1), w01),
            (self.idx(ix1, iy1), w11),
        ];
        let value = c.iter().map(|&(i, w)| self.data[i] * w).sum();
        // d(value)/d(x), d(value)/d(y); zero outside the clamp region
        let interior_x = gx > 0.0 && gx < self.nx as f64 - 1.0;
        let interior_y = gy > 0.0 && gy < self.ny as f64 - 1.0;
        let v00 = self.data[c[0].0];
        let v10 = self.data[c[1].0];
        let v01 = self.data[c[2].0];
        let v11 = self.data[c[3].0];
        let dvdx = if interior_x {
            ((v10 - v00) * (1.0 - fy) + (v11 - v01) * fy) / self.cell
        } else {
            0.0
        };
        let dvdy = if interior_y {
            ((v01 - v00) * (1.0 - fx) + (v11 - v10) * fx) / self.cell
        } else {
            0.0
        };
        BilinearSupport { value, corners: c, dvdx, dvdy }
    }
}

/// Result of a bilinear lookup: the value, the contributing cells with their
/// weights (the partials with respect to the cell values), and the spatial
/// partials.
#[derive(Debug, Clone, Copy)]
pub struct BilinearSupport {
    pub value: f64,
    pub corners: [(usize, f64); 4],
    pub dvdx: f64,
    pub dvdy: f64,
}

/// Two-channel bird's-eye-view traversability map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraversabilityMap {
    pub mu: Grid2,
    pub nu: Grid2,
}

impl TraversabilityMap {
    pub fn uniform(nx: usize, ny: usize, origin: (f64, f64), cell: f64, mu: f64, nu: f64) -> Self {
        Self {
            mu: Grid2::filled(nx, ny, origin, cell, mu),
            nu: Grid2::filled(nx, ny, origin, cell, nu),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.nx != self.nu.nx || self.mu.ny != self.nu.ny {
            return Err(Error::InvalidConfig("map channels must share shape".into()));
        }
        for v in self.mu.data.iter().chain(self.nu.data.iter()) {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::InvalidConfig(format!("map value {v} outside [0,1]")));
            }
        }
        Ok(())
    }

    /// Bilinear (mu, nu) at a world point, border-clamped.
    pub fn sample(&self, x: f64, y: f64) -> (f64, f64) {
        (self.mu.bilinear(x, y).value, self.nu.bilinear(x, y).value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn bilinear_at_cell_center_is_cell_value() {
        let mut g = Grid2::filled(4, 4, (0.0, 0.0), 0.5, 0.0);
        g.set(2, 1, 0.7);
        let x = 0.5 * (2.0 + 0.5);
        let y = 0.5 * (1.0 + 0.5);
        assert_relative_eq!(g.bilinear(x, y).value, 0.7, epsilon = 1e-12);
    }

    #[test]
    fn bilinear_midpoint_of_four_cells() {
        let mut g = Grid2::filled(2, 2, (0.0, 0.0), 1.0, 0.0);
        g.set(0, 1, 1.0);
        g.set(1, 1, 1.0);
        assert_relative_eq!(g.bilinear(1.0, 1.0).value, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn out_of_bounds_clamps_to_border() {
        let mut g = Grid2::filled(3, 3, (0.0, 0.0), 1.0, 0.2);
        g.set(0, 0, 0.9);
        assert_relative_eq!(g.bilinear(-5.0, -5.0).value, 0.9, epsilon = 1e-12);
    }
}
