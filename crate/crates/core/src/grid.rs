//! Uniform Fourier grids, rectangle-rule quadrature, bilinear interpolation
//! and unitary discrete Fourier transforms along either axis of a 2D array.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Result, TfdError};

/// Periodic uniform grid with `n` points on `[x_min, x_max)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid1D {
    n: usize,
    x_min: f64,
    x_max: f64,
    dx: f64,
    k_values: Vec<f64>,
}

impl Grid1D {
    pub fn new(n: usize, x_min: f64, x_max: f64) -> Result<Self> {
        if n < 8 || !n.is_power_of_two() {
            return Err(TfdError::Argument(format!("grid size must be a power of two >= 8, got {n}")));
        }
        if !(x_max > x_min) || !x_min.is_finite() || !x_max.is_finite() {
            return Err(TfdError::Argument(format!("grid bounds must satisfy x_min < x_max, got [{x_min}, {x_max}]")));
        }
        let dx = (x_max - x_min) / n as f64;
        let dk = 2.0 * PI / (n as f64 * dx);
        let half = (n / 2) as isize;
        let k_values =
            (0..n as isize).map(|i| if i < half { i } else { i - n as isize }).map(|i| i as f64 * dk).collect();
        Ok(Self { n, x_min, x_max, dx, k_values })
    }

    /// Grid on `[-halfwidth, halfwidth)`.
    pub fn symmetric(n: usize, halfwidth: f64) -> Result<Self> {
        Self::new(n, -halfwidth, halfwidth)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn dx(&self) -> f64 {
        self.dx
    }

    /// Spacing of the spectral companion, 2π/(n·dx).
    pub fn dk(&self) -> f64 {
        2.0 * PI / (self.n as f64 * self.dx)
    }

    pub fn point(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx
    }

    pub fn points(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.point(i)).collect()
    }

    /// Discrete Fourier frequencies in FFT order.
    pub fn k_values(&self) -> &[f64] {
        &self.k_values
    }

    /// Last grid node (the periodic image of `x_max` is not a node).
    pub fn last_point(&self) -> f64 {
        self.point(self.n - 1)
    }

    /// Fractional index of `x`, snapped to the nearest node when within
    /// rounding distance so on-node queries hit stored values exactly.
    fn fractional_index(&self, x: f64) -> f64 {
        let f = (x - self.x_min) / self.dx;
        let r = f.round();
        if (f - r).abs() < 1e-9 {
            r
        } else {
            f
        }
    }

    /// Cell index and weight for linear interpolation; `None` outside
    /// `[x_min, last_point]`.
    fn stencil(&self, x: f64) -> Option<(usize, f64)> {
        let f = self.fractional_index(x);
        let last = (self.n - 1) as f64;
        if !(f >= 0.0 && f <= last) {
            return None;
        }
        let i = (f.floor() as usize).min(self.n - 2);
        Some((i, f - i as f64))
    }
}

/// Rectangle-rule integral Σ values_i · dx.
pub fn integrate_1d(values: &[f64], grid: &Grid1D) -> Result<f64> {
    if values.len() != grid.len() {
        return Err(TfdError::Argument(format!("expected {} values, got {}", grid.len(), values.len())));
    }
    Ok(values.iter().sum::<f64>() * grid.dx())
}

/// Linear interpolation of nodal values; zero outside the grid.
pub fn linear_sample(values: &[f64], grid: &Grid1D, x: f64) -> f64 {
    match grid.stencil(x) {
        Some((i, t)) => {
            if t == 0.0 {
                values[i]
            } else {
                (1.0 - t) * values[i] + t * values[i + 1]
            }
        }
        None => 0.0,
    }
}

/// Real field on a 2D product grid, indexed `[z, z̃]`.
#[derive(Clone, Debug)]
pub struct Field2D {
    pub grid_z: Grid1D,
    pub grid_zt: Grid1D,
    pub values: Array2<f64>,
}

impl Field2D {
    pub fn new(grid_z: Grid1D, grid_zt: Grid1D, values: Array2<f64>) -> Result<Self> {
        if values.dim() != (grid_z.len(), grid_zt.len()) {
            return Err(TfdError::Argument(format!(
                "field shape {:?} does not match grids ({}, {})",
                values.dim(),
                grid_z.len(),
                grid_zt.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(TfdError::Argument("field contains non-finite values".into()));
        }
        Ok(Self { grid_z, grid_zt, values })
    }

    /// Σ values · dz · dz̃.
    pub fn integral(&self) -> f64 {
        self.values.sum() * self.grid_z.dx() * self.grid_zt.dx()
    }

    /// First moments (⟨z⟩, ⟨z̃⟩) treating the field as a density.
    pub fn centroid(&self) -> (f64, f64) {
        let zs = self.grid_z.points();
        let zts = self.grid_zt.points();
        let (mut sz, mut st, mut s0) = (0.0, 0.0, 0.0);
        for ((i, j), v) in self.values.indexed_iter() {
            sz += zs[i] * v;
            st += zts[j] * v;
            s0 += v;
        }
        (sz / s0, st / s0)
    }
}

/// Bilinear weights of the cell containing (z, z̃).
#[derive(Clone, Copy, Debug)]
pub(crate) struct Stencil2 {
    i: usize,
    j: usize,
    tz: f64,
    tt: f64,
}

impl Stencil2 {
    pub(crate) fn locate(grid_z: &Grid1D, grid_zt: &Grid1D, z: f64, zt: f64) -> Option<Self> {
        let (i, tz) = grid_z.stencil(z)?;
        let (j, tt) = grid_zt.stencil(zt)?;
        Some(Self { i, j, tz, tt })
    }

    #[inline]
    pub(crate) fn apply<T>(&self, values: &Array2<T>) -> T
    where
        T: Copy + std::ops::Mul<f64, Output = T> + std::ops::Add<Output = T>,
    {
        let (i, j, tz, tt) = (self.i, self.j, self.tz, self.tt);
        let f00 = values[[i, j]];
        if tz == 0.0 && tt == 0.0 {
            return f00;
        }
        let f10 = values[[i + 1, j]];
        let f01 = values[[i, j + 1]];
        let f11 = values[[i + 1, j + 1]];
        f00 * ((1.0 - tz) * (1.0 - tt)) + f10 * (tz * (1.0 - tt)) + f01 * ((1.0 - tz) * tt) + f11 * (tz * tt)
    }
}

/// Bilinear interpolation of a real field; zero outside the grid rectangle.
pub fn bilinear_sample(field: &Field2D, z: f64, zt: f64) -> f64 {
    Stencil2::locate(&field.grid_z, &field.grid_zt, z, zt).map_or(0.0, |s| s.apply(&field.values))
}

/// Bilinear interpolation of complex amplitudes on the given grids.
pub fn bilinear_sample_complex(
    values: &Array2<Complex64>,
    grid_z: &Grid1D,
    grid_zt: &Grid1D,
    z: f64,
    zt: f64,
) -> Complex64 {
    Stencil2::locate(grid_z, grid_zt, z, zt).map_or(Complex64::new(0.0, 0.0), |s| s.apply(values))
}

/// Axis selector for 2D transforms.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FftAxis {
    /// Axis 0 (physical mode).
    Z,
    /// Axis 1 (tilde mode).
    ZTilde,
    Both,
}

/// Reusable unitary FFT plans for a fixed 2D shape.
pub struct Fft2 {
    shape: (usize, usize),
    fwd: [Arc<dyn Fft<f64>>; 2],
    inv: [Arc<dyn Fft<f64>>; 2],
    transposed: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

/// Row-major `rows × cols` source into row-major `cols × rows` destination,
/// in cache-sized tiles.
fn transpose_into(src: &[Complex64], rows: usize, cols: usize, dst: &mut [Complex64]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

impl Fft2 {
    pub fn new(n_z: usize, n_zt: usize) -> Result<Self> {
        for n in [n_z, n_zt] {
            if n == 0 || !n.is_power_of_two() {
                return Err(TfdError::Argument(format!("transform length must be a power of two, got {n}")));
            }
        }
        let mut planner = FftPlanner::new();
        let fwd = [planner.plan_fft_forward(n_z), planner.plan_fft_forward(n_zt)];
        let inv = [planner.plan_fft_inverse(n_z), planner.plan_fft_inverse(n_zt)];
        let scratch_len = fwd.iter().chain(inv.iter()).map(|p| p.get_inplace_scratch_len()).max().unwrap_or(0);
        Ok(Self {
            shape: (n_z, n_zt),
            fwd,
            inv,
            transposed: vec![Complex64::new(0.0, 0.0); n_z * n_zt],
            scratch: vec![Complex64::new(0.0, 0.0); scratch_len],
        })
    }

    pub fn forward(&mut self, data: &mut Array2<Complex64>, axis: FftAxis) -> Result<()> {
        self.transform(data, axis, true)
    }

    pub fn inverse(&mut self, data: &mut Array2<Complex64>, axis: FftAxis) -> Result<()> {
        self.transform(data, axis, false)
    }

    fn transform(&mut self, data: &mut Array2<Complex64>, axis: FftAxis, forward: bool) -> Result<()> {
        if data.dim() != self.shape {
            return Err(TfdError::Argument(format!(
                "array shape {:?} does not match planned shape {:?}",
                data.dim(),
                self.shape
            )));
        }
        let plans = if forward { &self.fwd } else { &self.inv };
        let (nz, nt) = self.shape;
        if matches!(axis, FftAxis::ZTilde | FftAxis::Both) {
            let slice = data
                .as_slice_mut()
                .ok_or_else(|| TfdError::Argument("amplitude array must be in standard layout".into()))?;
            plans[1].process_with_scratch(slice, &mut self.scratch);
            let norm = 1.0 / (nt as f64).sqrt();
            slice.iter_mut().for_each(|v| *v *= norm);
        }
        if matches!(axis, FftAxis::Z | FftAxis::Both) {
            let src = data
                .as_slice()
                .ok_or_else(|| TfdError::Argument("amplitude array must be in standard layout".into()))?;
            transpose_into(src, nz, nt, &mut self.transposed);
            plans[0].process_with_scratch(&mut self.transposed, &mut self.scratch);
            let norm = 1.0 / (nz as f64).sqrt();
            self.transposed.iter_mut().for_each(|v| *v *= norm);
            let out = data
                .as_slice_mut()
                .ok_or_else(|| TfdError::Argument("amplitude array must be in standard layout".into()))?;
            transpose_into(&self.transposed, nt, nz, out);
        }
        Ok(())
    }
}

/// Unitary forward DFT along the selected axis; allocates the result.
pub fn fourier_forward(amplitudes: &Array2<Complex64>, axis: FftAxis) -> Result<Array2<Complex64>> {
    let (nz, nt) = amplitudes.dim();
    let mut out = amplitudes.as_standard_layout().into_owned();
    Fft2::new(nz, nt)?.forward(&mut out, axis)?;
    Ok(out)
}

/// Unitary inverse DFT along the selected axis; allocates the result.
pub fn fourier_inverse(amplitudes: &Array2<Complex64>, axis: FftAxis) -> Result<Array2<Complex64>> {
    let (nz, nt) = amplitudes.dim();
    let mut out = amplitudes.as_standard_layout().into_owned();
    Fft2::new(nz, nt)?.inverse(&mut out, axis)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    #[test]
    fn grid_validation() {
        assert!(Grid1D::new(12, 0.0, 1.0).is_err());
        assert!(Grid1D::new(4, 0.0, 1.0).is_err());
        assert!(Grid1D::new(16, 1.0, 1.0).is_err());
        let g = Grid1D::new(16, 0.0, 1.0).unwrap();
        assert_eq!(g.dx(), 1.0 / 16.0);
        assert_eq!(g.point(3), 3.0 / 16.0);
        assert_abs_diff_eq!(g.k_values()[1], 2.0 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(g.k_values()[8], -8.0 * 2.0 * PI, epsilon = 1e-12);
        assert_abs_diff_eq!(g.k_values()[15], -2.0 * PI, epsilon = 1e-12);
    }

    #[test]
    fn rectangle_quadrature() {
        let g = Grid1D::new(16, 0.0, 1.0).unwrap();
        assert_eq!(integrate_1d(&[1.0; 16], &g).unwrap(), 1.0);
        assert_eq!(integrate_1d(&[0.0; 16], &g).unwrap(), 0.0);
        assert!(integrate_1d(&[1.0; 15], &g).is_err());

        let g = Grid1D::symmetric(256, 12.0).unwrap();
        let (mu, s) = (0.4, 0.9);
        let vals: Vec<f64> =
            g.points().iter().map(|x| (-(x - mu) * (x - mu) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt())).collect();
        assert_abs_diff_eq!(integrate_1d(&vals, &g).unwrap(), 1.0, epsilon = 1e-8);
    }

    fn plane_field() -> Field2D {
        let g = Grid1D::new(16, -2.0, 2.0).unwrap();
        let gt = Grid1D::new(8, -1.0, 3.0).unwrap();
        let vals = Array2::from_shape_fn((16, 8), |(i, j)| 2.0 * g.point(i) + 3.0 * gt.point(j));
        Field2D::new(g, gt, vals).unwrap()
    }

    #[test]
    fn bilinear_examples() {
        let f = plane_field();
        let (z, zt) = (f.grid_z.point(5), f.grid_zt.point(2));
        assert_eq!(bilinear_sample(&f, z, zt), f.values[[5, 2]]);
        let (zc, ztc) = (z + 0.5 * f.grid_z.dx(), zt + 0.5 * f.grid_zt.dx());
        assert_abs_diff_eq!(bilinear_sample(&f, zc, ztc), 2.0 * zc + 3.0 * ztc, epsilon = 1e-13);
        assert_eq!(bilinear_sample(&f, -2.5, 0.0), 0.0);
        assert_eq!(bilinear_sample(&f, 0.0, 3.0), 0.0);
        assert_eq!(bilinear_sample(&f, f.grid_z.last_point() + 1e-6, 0.0), 0.0);
    }

    #[test]
    fn bilinear_is_continuous_across_cells() {
        let g = Grid1D::new(8, 0.0, 4.0).unwrap();
        let vals = Array2::from_shape_fn((8, 8), |(i, j)| ((i * 7 + j * 3) % 5) as f64);
        let f = Field2D::new(g.clone(), g.clone(), vals).unwrap();
        let edge = g.point(3);
        for zt in [0.1, 1.3, 2.9] {
            let left = bilinear_sample(&f, edge - 1e-10, zt);
            let right = bilinear_sample(&f, edge + 1e-10, zt);
            assert_abs_diff_eq!(left, right, epsilon = 1e-8);
        }
        let constant = Field2D::new(g.clone(), g.clone(), Array2::from_elem((8, 8), 2.5)).unwrap();
        assert_abs_diff_eq!(bilinear_sample(&constant, 1.234, 0.77), 2.5, epsilon = 1e-15);
    }

    #[test]
    fn delta_impulse_has_flat_spectrum() {
        let mut a = Array2::from_elem((16, 8), c(0.0, 0.0));
        a[[0, 0]] = c(1.0, 0.0);
        let f = fourier_forward(&a, FftAxis::Both).unwrap();
        let expect = 1.0 / (16.0f64 * 8.0).sqrt();
        for v in f.iter() {
            assert_abs_diff_eq!(v.norm(), expect, epsilon = 1e-14);
        }
    }

    #[test]
    fn plane_wave_hits_single_bin() {
        let g = Grid1D::new(32, -3.0, 5.0).unwrap();
        let k0 = g.k_values()[5];
        let a = Array2::from_shape_fn((32, 8), |(i, _)| Complex64::from_polar(1.0, k0 * g.point(i)));
        let f = fourier_forward(&a, FftAxis::Z).unwrap();
        for i in 0..32 {
            let m = f[[i, 3]].norm();
            if i == 5 {
                assert!(m > 1.0);
            } else {
                assert!(m < 1e-12, "bin {i} has {m}");
            }
        }
    }

    #[test]
    fn non_power_of_two_rejected() {
        let a = Array2::from_elem((12, 8), c(1.0, 0.0));
        assert!(fourier_forward(&a, FftAxis::Z).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_and_parseval(seed in proptest::collection::vec(-1.0..1.0f64, 2 * 16 * 32)) {
            let gz = Grid1D::symmetric(16, 3.0).unwrap();
            let gt = Grid1D::symmetric(32, 5.0).unwrap();
            let a = Array2::from_shape_fn((16, 32), |(i, j)| c(seed[2 * (i * 32 + j)], seed[2 * (i * 32 + j) + 1]));
            for axis in [FftAxis::Z, FftAxis::ZTilde, FftAxis::Both] {
                let f = fourier_forward(&a, axis).unwrap();
                let back = fourier_inverse(&f, axis).unwrap();
                let err = (&back - &a).iter().map(|v| v.norm()).fold(0.0, f64::max);
                prop_assert!(err < 1e-12);
            }
            // Continuum-normalized spectrum: Φ̂ = U·dx·√n/√(2π) per axis.
            let f = fourier_forward(&a, FftAxis::Both).unwrap();
            let scale = (gz.dx() * gt.dx()).powi(2) * 16.0 * 32.0 / (2.0 * PI).powi(2);
            let pos: f64 = a.iter().map(|v| v.norm_sqr()).sum::<f64>() * gz.dx() * gt.dx();
            let mom: f64 = f.iter().map(|v| v.norm_sqr() * scale).sum::<f64>() * gz.dk() * gt.dk();
            prop_assert!((pos - mom).abs() < 1e-10 * pos.max(1.0));
        }
    }
}
