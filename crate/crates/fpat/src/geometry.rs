//! Spatial and angular discretization of the disc phase space.
//!
//! The domain is a disc of radius `R` masked onto a Cartesian grid: a cell is
//! active when its center lies strictly inside the disc. Angular space is the
//! unit circle sampled at `n_dir` equispaced directions with equal trapezoidal
//! weights, which integrate the constant mode exactly.

use std::io::{self, BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("radius must be positive, got {0}")]
    BadRadius(f64),
    #[error("need at least 4 cells per axis, got {nx}x{ny}")]
    TooCoarse { nx: usize, ny: usize },
    #[error("direction count must be even and >= 8, got {0}")]
    BadDirectionCount(usize),
    #[error("field length {got} does not match grid cell count {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("malformed field CSV at line {line}: {msg}")]
    BadCsv { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// An active cell on the staircase boundary, with the radial outward normal.
#[derive(Debug, Clone, Copy)]
pub struct BoundaryCell {
    pub cell: usize,
    pub normal: (f64, f64),
}

/// Cartesian grid masked to the disc of radius `radius` centered at the origin.
///
/// Active cells carry contiguous indices `0..n_cells()` in raster order
/// (y-major, x-minor), which fixes the ordering of every field and of the CSV
/// serialization.
#[derive(Debug, Clone)]
pub struct Grid {
    pub radius: f64,
    pub nx: usize,
    pub ny: usize,
    pub dx: f64,
    pub dy: f64,
    cells: Vec<(f64, f64)>,
    cell_ij: Vec<(usize, usize)>,
    /// Active-cell index per raster slot, `usize::MAX` outside the disc.
    raster: Vec<usize>,
    boundary: Vec<BoundaryCell>,
    /// Position of a cell in `boundary`, `usize::MAX` for interior cells.
    boundary_of: Vec<usize>,
}

impl Grid {
    pub fn n_cells(&self) -> usize {
        self.cells.len()
    }

    /// Cell area; uniform, so it is the weight of every cell in discrete norms.
    pub fn cell_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn cells(&self) -> &[(f64, f64)] {
        &self.cells
    }

    pub fn center(&self, cell: usize) -> (f64, f64) {
        self.cells[cell]
    }

    pub fn cell_ij(&self, cell: usize) -> (usize, usize) {
        self.cell_ij[cell]
    }

    /// Active-cell index at raster position, if inside the disc.
    pub fn index_at(&self, i: usize, j: usize) -> Option<usize> {
        if i >= self.nx || j >= self.ny {
            return None;
        }
        match self.raster[j * self.nx + i] {
            usize::MAX => None,
            k => Some(k),
        }
    }

    pub fn boundary(&self) -> &[BoundaryCell] {
        &self.boundary
    }

    /// Index into `boundary()` for `cell`, if it is a boundary cell.
    pub fn boundary_index(&self, cell: usize) -> Option<usize> {
        match self.boundary_of[cell] {
            usize::MAX => None,
            b => Some(b),
        }
    }

    /// Nearest active cell to a point, by center distance.
    ///
    /// Starts at the raster slot containing the point and widens ring by ring,
    /// so it is cheap for points inside or near the disc.
    pub fn nearest_cell(&self, x: f64, y: f64) -> usize {
        let i0 = (((x + self.radius) / self.dx).floor() as isize).clamp(0, self.nx as isize - 1);
        let j0 = (((y + self.radius) / self.dy).floor() as isize).clamp(0, self.ny as isize - 1);
        let mut best: Option<(f64, usize)> = None;
        for ring in 0..self.nx.max(self.ny) as isize {
            for dj in -ring..=ring {
                for di in -ring..=ring {
                    if di.abs() != ring && dj.abs() != ring {
                        continue;
                    }
                    let (i, j) = (i0 + di, j0 + dj);
                    if i < 0 || j < 0 {
                        continue;
                    }
                    if let Some(k) = self.index_at(i as usize, j as usize) {
                        let (cx, cy) = self.cells[k];
                        let d2 = (cx - x).powi(2) + (cy - y).powi(2);
                        if best.map_or(true, |(bd, _)| d2 < bd) {
                            best = Some((d2, k));
                        }
                    }
                }
            }
            // One extra ring after the first hit covers diagonal near-misses.
            if let Some((bd, _)) = best {
                let reach = (ring as f64 - 1.0).max(0.0) * self.dx.min(self.dy);
                if bd.sqrt() <= reach || ring > 2 {
                    break;
                }
            }
        }
        best.expect("grid has no active cells").1
    }
}

/// Builds the masked grid. Cells are active iff their center lies strictly
/// inside the disc; boundary cells are active cells with a missing 4-neighbor.
pub fn build_grid(radius: f64, nx: usize, ny: usize) -> Result<Grid, GeometryError> {
    if !(radius > 0.0) {
        return Err(GeometryError::BadRadius(radius));
    }
    if nx < 4 || ny < 4 {
        return Err(GeometryError::TooCoarse { nx, ny });
    }
    let dx = 2.0 * radius / nx as f64;
    let dy = 2.0 * radius / ny as f64;
    let mut cells = Vec::new();
    let mut cell_ij = Vec::new();
    let mut raster = vec![usize::MAX; nx * ny];
    for j in 0..ny {
        for i in 0..nx {
            let x = -radius + (i as f64 + 0.5) * dx;
            let y = -radius + (j as f64 + 0.5) * dy;
            if x * x + y * y < radius * radius {
                raster[j * nx + i] = cells.len();
                cells.push((x, y));
                cell_ij.push((i, j));
            }
        }
    }
    let active = |i: isize, j: isize| -> bool {
        i >= 0
            && j >= 0
            && (i as usize) < nx
            && (j as usize) < ny
            && raster[j as usize * nx + i as usize] != usize::MAX
    };
    let mut boundary = Vec::new();
    let mut boundary_of = vec![usize::MAX; cells.len()];
    for (k, &(i, j)) in cell_ij.iter().enumerate() {
        let (i, j) = (i as isize, j as isize);
        let edge = !active(i - 1, j) || !active(i + 1, j) || !active(i, j - 1) || !active(i, j + 1);
        if edge {
            let (x, y) = cells[k];
            let r = (x * x + y * y).sqrt();
            // Radial normal: exact for the disc, immune to staircase noise.
            let normal = if r > 0.0 { (x / r, y / r) } else { (1.0, 0.0) };
            boundary_of[k] = boundary.len();
            boundary.push(BoundaryCell { cell: k, normal });
        }
    }
    Ok(Grid {
        radius,
        nx,
        ny,
        dx,
        dy,
        cells,
        cell_ij,
        raster,
        boundary,
        boundary_of,
    })
}

/// Equispaced directions on the unit circle with equal weights `2*pi/n_dir`.
#[derive(Debug, Clone)]
pub struct AngularGrid {
    pub n_dir: usize,
    directions: Vec<(f64, f64)>,
    weights: Vec<f64>,
}

impl AngularGrid {
    pub fn directions(&self) -> &[(f64, f64)] {
        &self.directions
    }

    pub fn direction(&self, j: usize) -> (f64, f64) {
        self.directions[j]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight(&self, j: usize) -> f64 {
        self.weights[j]
    }

    /// Index of the direction opposite to `j`; exact because `n_dir` is even.
    pub fn opposite(&self, j: usize) -> usize {
        (j + self.n_dir / 2) % self.n_dir
    }
}

/// Odd counts are rejected: the adjoint solve relies on the theta -> -theta
/// pairing, which only exists on an even grid.
pub fn build_angular_grid(n_dir: usize) -> Result<AngularGrid, GeometryError> {
    if n_dir < 8 || n_dir % 2 != 0 {
        return Err(GeometryError::BadDirectionCount(n_dir));
    }
    let w = 2.0 * std::f64::consts::PI / n_dir as f64;
    let directions = (0..n_dir)
        .map(|j| {
            let a = 2.0 * std::f64::consts::PI * j as f64 / n_dir as f64;
            (a.cos(), a.sin())
        })
        .collect();
    Ok(AngularGrid {
        n_dir,
        directions,
        weights: vec![w; n_dir],
    })
}

/// Real-valued field with one entry per active cell, in grid index order.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub values: Vec<f64>,
}

impl ScalarField {
    pub fn zeros(grid: &Grid) -> Self {
        Self::constant(grid, 0.0)
    }

    pub fn constant(grid: &Grid, v: f64) -> Self {
        ScalarField {
            values: vec![v; grid.n_cells()],
        }
    }

    pub fn from_fn(grid: &Grid, f: impl Fn(f64, f64) -> f64) -> Self {
        ScalarField {
            values: grid.cells().iter().map(|&(x, y)| f(x, y)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn clamp(&mut self, lo: f64, hi: f64) {
        for v in &mut self.values {
            *v = v.clamp(lo, hi);
        }
    }

    /// Plain Euclidean norm over cells (the uniform cell area cancels in
    /// every ratio this is used for).
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Discrete L2 inner product with cell-area weights.
    pub fn inner(&self, other: &ScalarField, grid: &Grid) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        grid.cell_area()
            * self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Writes the `x,y,value` CSV, one row per active cell in index order.
    pub fn write_csv<W: Write>(&self, grid: &Grid, mut w: W) -> Result<(), GeometryError> {
        if self.len() != grid.n_cells() {
            return Err(GeometryError::LengthMismatch {
                got: self.len(),
                want: grid.n_cells(),
            });
        }
        writeln!(w, "x,y,value")?;
        for (k, &(x, y)) in grid.cells().iter().enumerate() {
            writeln!(w, "{},{},{}", x, y, self.values[k])?;
        }
        Ok(())
    }

    /// Reads a field written by [`ScalarField::write_csv`] on the same grid.
    pub fn read_csv<R: BufRead>(grid: &Grid, r: R) -> Result<Self, GeometryError> {
        let mut values = Vec::with_capacity(grid.n_cells());
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if n == 0 {
                if line.trim() != "x,y,value" {
                    return Err(GeometryError::BadCsv {
                        line: 1,
                        msg: format!("expected header 'x,y,value', got '{line}'"),
                    });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let v = line.rsplit(',').next().unwrap_or("");
            let v: f64 = v.parse().map_err(|e| GeometryError::BadCsv {
                line: n + 1,
                msg: format!("bad value '{v}': {e}"),
            })?;
            values.push(v);
        }
        if values.len() != grid.n_cells() {
            return Err(GeometryError::LengthMismatch {
                got: values.len(),
                want: grid.n_cells(),
            });
        }
        Ok(ScalarField { values })
    }
}

/// Angular flux: one value per (direction, cell), direction-major so each
/// direction is a contiguous slice for the sweep and for parallel chunking.
#[derive(Debug, Clone, PartialEq)]
pub struct AngularFlux {
    pub n_cells: usize,
    pub n_dir: usize,
    pub values: Vec<f64>,
}

impl AngularFlux {
    pub fn zeros(grid: &Grid, angles: &AngularGrid) -> Self {
        AngularFlux {
            n_cells: grid.n_cells(),
            n_dir: angles.n_dir,
            values: vec![0.0; grid.n_cells() * angles.n_dir],
        }
    }

    pub fn at(&self, cell: usize, dir: usize) -> f64 {
        self.values[dir * self.n_cells + cell]
    }

    pub fn at_mut(&mut self, cell: usize, dir: usize) -> &mut f64 {
        &mut self.values[dir * self.n_cells + cell]
    }

    pub fn direction_slice(&self, dir: usize) -> &[f64] {
        &self.values[dir * self.n_cells..(dir + 1) * self.n_cells]
    }

    pub fn direction_slice_mut(&mut self, dir: usize) -> &mut [f64] {
        &mut self.values[dir * self.n_cells..(dir + 1) * self.n_cells]
    }

    /// Fills every direction with the same cell field (isotropic extension).
    pub fn isotropic(grid: &Grid, angles: &AngularGrid, f: &ScalarField) -> Self {
        let mut flux = AngularFlux::zeros(grid, angles);
        for d in 0..angles.n_dir {
            flux.values[d * grid.n_cells()..(d + 1) * grid.n_cells()]
                .copy_from_slice(&f.values);
        }
        flux
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Phase-space inner product with cell-area and quadrature weights.
    pub fn inner(&self, other: &AngularFlux, grid: &Grid, angles: &AngularGrid) -> f64 {
        debug_assert_eq!(self.values.len(), other.values.len());
        let mut total = 0.0;
        for d in 0..self.n_dir {
            let a = self.direction_slice(d);
            let b = other.direction_slice(d);
            let s: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            total += angles.weight(d) * s;
        }
        grid.cell_area() * total
    }
}
