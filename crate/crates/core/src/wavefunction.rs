use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Result, TfdError};
use crate::grid::{Fft2, FftAxis, Field2D, Grid1D};

/// Complex amplitudes Φ(z_i, z̃_j) of the two-mode iBT-picture state.
#[derive(Clone, Debug)]
pub struct WavefunctionGrid {
    pub grid_z: Grid1D,
    pub grid_zt: Grid1D,
    pub amplitudes: Array2<Complex64>,
    /// Atomic time units.
    pub time: f64,
}

impl WavefunctionGrid {
    pub fn new(grid_z: Grid1D, grid_zt: Grid1D, amplitudes: Array2<Complex64>) -> Result<Self> {
        if amplitudes.dim() != (grid_z.len(), grid_zt.len()) {
            return Err(TfdError::Argument(format!(
                "amplitude shape {:?} does not match grids ({}, {})",
                amplitudes.dim(),
                grid_z.len(),
                grid_zt.len()
            )));
        }
        Ok(Self { grid_z, grid_zt, amplitudes: amplitudes.as_standard_layout().into_owned(), time: 0.0 })
    }

    /// Builds a state from a function of (z, z̃); not normalized.
    pub fn from_fn(grid_z: Grid1D, grid_zt: Grid1D, f: impl Fn(f64, f64) -> Complex64) -> Self {
        let zs = grid_z.points();
        let zts = grid_zt.points();
        let amplitudes = Array2::from_shape_fn((zs.len(), zts.len()), |(i, j)| f(zs[i], zts[j]));
        Self { grid_z, grid_zt, amplitudes, time: 0.0 }
    }

    pub fn cell_area(&self) -> f64 {
        self.grid_z.dx() * self.grid_zt.dx()
    }

    /// ‖Φ‖² = Σ|Φ_ij|² dz dz̃.
    pub fn norm_sqr(&self) -> f64 {
        self.amplitudes.iter().map(|v| v.norm_sqr()).sum::<f64>() * self.cell_area()
    }

    pub fn normalize(&mut self) -> Result<()> {
        let n = self.norm_sqr();
        if !(n > 0.0) || !n.is_finite() {
            return Err(TfdError::Argument(format!("cannot normalize state with norm {n}")));
        }
        let s = 1.0 / n.sqrt();
        self.amplitudes.mapv_inplace(|v| v * s);
        Ok(())
    }

    /// |Φ(z, z̃)|² as a field.
    pub fn probability(&self) -> Field2D {
        Field2D {
            grid_z: self.grid_z.clone(),
            grid_zt: self.grid_zt.clone(),
            values: self.amplitudes.mapv(|v| v.norm_sqr()),
        }
    }

    /// ⟨Φ|f(z, z̃)|Φ⟩ for a multiplicative operator.
    pub fn expect_position(&self, f: impl Fn(f64, f64) -> f64) -> f64 {
        let zs = self.grid_z.points();
        let zts = self.grid_zt.points();
        let mut acc = 0.0;
        for ((i, j), v) in self.amplitudes.indexed_iter() {
            acc += v.norm_sqr() * f(zs[i], zts[j]);
        }
        acc * self.cell_area()
    }

    /// Trigonometric interpolation onto grids `factor` times denser over the
    /// same intervals. Original nodes keep their values; the Nyquist bin is
    /// split evenly between the positive and negative frequency.
    pub fn refine_spectral(&self, factor: usize) -> Result<WavefunctionGrid> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(TfdError::Argument(format!("refinement factor must be a power of two, got {factor}")));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (nz, nt) = self.amplitudes.dim();
        let mut coarse = self.amplitudes.clone();
        Fft2::new(nz, nt)?.forward(&mut coarse, FftAxis::Both)?;
        let (fz, ft) = (nz * factor, nt * factor);
        let targets = |k: usize, n: usize, nf: usize| -> Vec<(usize, f64)> {
            if k < n / 2 {
                vec![(k, 1.0)]
            } else if k > n / 2 {
                vec![(nf - (n - k), 1.0)]
            } else {
                vec![(k, 0.5), (nf - k, 0.5)]
            }
        };
        let scale = factor as f64;
        let mut fine = Array2::<Complex64>::zeros((fz, ft));
        for ((k, l), v) in coarse.indexed_iter() {
            for (a, wa) in targets(k, nz, fz) {
                for (b, wb) in targets(l, nt, ft) {
                    fine[[a, b]] += v * (wa * wb * scale);
                }
            }
        }
        Fft2::new(fz, ft)?.inverse(&mut fine, FftAxis::Both)?;
        let grid_z = Grid1D::new(fz, self.grid_z.x_min(), self.grid_z.x_max())?;
        let grid_zt = Grid1D::new(ft, self.grid_zt.x_min(), self.grid_zt.x_max())?;
        Ok(WavefunctionGrid { grid_z, grid_zt, amplitudes: fine, time: self.time })
    }
}
