//! Reduced quantities of the physical mode recovered from the iBT
//! wavefunction: the diagonal two-mode density, exact and uncorrelated
//! one-particle densities, the one-particle density matrix and its Wigner
//! transform.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Result, TfdError};
use crate::grid::{bilinear_sample, bilinear_sample_complex, linear_sample, Field2D, Grid1D};
use crate::thermo::{map_ab, ThermalParams};
use crate::wavefunction::WavefunctionGrid;

/// Largest tolerated |norm_raw − 1| before a density is flagged.
pub const NORM_WARN_TOLERANCE: f64 = 1e-3;

/// Largest tolerated imaginary residue in a Wigner transform.
pub const WIGNER_IMAG_TOLERANCE: f64 = 1e-6;

/// D(z_i, z̃_j) = |Φ(z_i, z̃_j)|².
#[derive(Clone, Debug)]
pub struct DiagonalTwoRDM(pub Field2D);

pub fn diagonal_2rdm(state: &WavefunctionGrid) -> DiagonalTwoRDM {
    DiagonalTwoRDM(state.probability())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Density1D {
    pub grid: Grid1D,
    pub values: Vec<f64>,
    /// Integral before renormalization.
    pub norm_raw: f64,
}

impl Density1D {
    /// Renormalizes `values` to unit integral and records the raw integral.
    pub fn from_unnormalized(grid: Grid1D, mut values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(TfdError::Argument(format!(
                "density has {} values for a {}-point grid",
                values.len(),
                grid.len()
            )));
        }
        let norm_raw: f64 = values.iter().sum::<f64>() * grid.dx();
        if !(norm_raw > 0.0) || !norm_raw.is_finite() {
            return Err(TfdError::NumericalInstability(format!("density integral is {norm_raw}")));
        }
        values.iter_mut().for_each(|v| *v /= norm_raw);
        let d = Self { grid, values, norm_raw };
        if !d.norm_within_tolerance() {
            log::warn!(
                "reduced density integral {:.6} deviates from 1 by more than {NORM_WARN_TOLERANCE:e}; \
                 the grid does not cover the transformed support",
                norm_raw
            );
        }
        Ok(d)
    }

    pub fn norm_within_tolerance(&self) -> bool {
        (self.norm_raw - 1.0).abs() <= NORM_WARN_TOLERANCE
    }

    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.grid.dx()
    }

    /// Raw moment ∫zⁿρ(z)dz.
    pub fn moment(&self, n: u32) -> f64 {
        self.grid.points().iter().zip(&self.values).map(|(z, v)| z.powi(n as i32) * v).sum::<f64>() * self.grid.dx()
    }

    pub fn mean(&self) -> f64 {
        self.moment(1)
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.grid.points().iter().zip(&self.values).map(|(z, v)| (z - m).powi(2) * v).sum::<f64>() * self.grid.dx()
    }

    /// ∫|ρ − σ|dz on a shared grid.
    pub fn l1_distance(&self, other: &Density1D) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).sum::<f64>() * self.grid.dx())
    }

    pub fn max_abs_difference(&self, other: &Density1D) -> Result<f64> {
        self.check_same_grid(other)?;
        Ok(self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
    }

    /// Most negative value, or 0 if the density is nonnegative.
    pub fn min_negative(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::min)
    }

    fn check_same_grid(&self, other: &Density1D) -> Result<()> {
        if self.grid != other.grid {
            return Err(TfdError::Argument("densities live on different grids".into()));
        }
        Ok(())
    }
}

/// ρ(z_i|z_k) for one physical mode.
#[derive(Clone, Debug)]
pub struct DensityMatrix1D {
    pub grid: Grid1D,
    pub entries: Array2<Complex64>,
}

impl DensityMatrix1D {
    pub fn trace(&self) -> f64 {
        self.entries.diag().iter().map(|v| v.re).sum::<f64>() * self.grid.dx()
    }

    pub fn hermiticity_residual(&self) -> f64 {
        let e = &self.entries;
        e.indexed_iter().map(|((i, k), v)| (v - e[[k, i]].conj()).norm()).fold(0.0, f64::max)
    }

    pub fn diagonal(&self) -> Vec<f64> {
        self.entries.diag().iter().map(|v| v.re).collect()
    }
}

#[derive(Clone, Debug)]
pub struct WignerGrid {
    pub grid_z: Grid1D,
    pub grid_p: Grid1D,
    /// values[[i, j]] = W(z_i, p_j).
    pub values: Array2<f64>,
    pub max_imaginary: f64,
}

impl WignerGrid {
    /// ∫W(z, p)dp on the z grid.
    pub fn z_marginal(&self) -> Vec<f64> {
        self.values.rows().into_iter().map(|r| r.sum() * self.grid_p.dx()).collect()
    }

    /// ∫W(z, p)dz on the p grid.
    pub fn p_marginal(&self) -> Vec<f64> {
        self.values.columns().into_iter().map(|c| c.sum() * self.grid_z.dx()).collect()
    }

    pub fn integral(&self) -> f64 {
        self.values.sum() * self.grid_z.dx() * self.grid_p.dx()
    }
}

/// Tilde quadrature grid with the spacing of `zt` widened by a power of two
/// until it covers every physical z̃ whose preimage can land inside the
/// sampled iBT box.
pub fn trace_grid(zt: &Grid1D, params: &ThermalParams) -> Result<Grid1D> {
    let theta = params.theta();
    if theta == 0.0 {
        return Ok(zt.clone());
    }
    let delta = params.delta_z() * -(-theta).exp_m1();
    let reach = (zt.x_min() - delta).abs().max((zt.x_max() - delta).abs()) * theta.abs().exp();
    let center = 0.5 * (zt.x_min() + zt.x_max());
    let half = 0.5 * (zt.x_max() - zt.x_min());
    let mut factor = 1usize;
    while (factor as f64) * half < reach + center.abs() {
        factor *= 2;
    }
    Grid1D::new(zt.len() * factor, center - factor as f64 * half, center + factor as f64 * half)
}

/// (a, b) iBT coordinates for every output z node and every tilde node of
/// the quadrature grid.
fn mapped_nodes(out_z: &Grid1D, trace_zt: &Grid1D, params: &ThermalParams) -> Array2<(f64, f64)> {
    let zs = out_z.points();
    let zts = trace_zt.points();
    Array2::from_shape_fn((zs.len(), zts.len()), |(i, j)| map_ab(zs[i], zts[j], params))
}

/// ρ(z_i) = Σ_j D(a, b)·dz̃ with bilinear interpolation of D = |Φ|².
pub fn exact_density(state: &WavefunctionGrid, params: &ThermalParams) -> Result<Density1D> {
    exact_density_refined(state, params, 1)
}

/// [`exact_density`] with Φ first refined spectrally by `factor`; the
/// result stays on the propagation z grid.
pub fn exact_density_refined(state: &WavefunctionGrid, params: &ThermalParams, factor: usize) -> Result<Density1D> {
    exact_density_on(&state.refine_spectral(factor)?, &state.grid_z, params)
}

/// Exact density on `out_z` from an already refined state.
pub fn exact_density_on(fine: &WavefunctionGrid, out_z: &Grid1D, params: &ThermalParams) -> Result<Density1D> {
    let d = diagonal_2rdm(fine).0;
    let trace = trace_grid(&fine.grid_zt, params)?;
    let nodes = mapped_nodes(out_z, &trace, params);
    let dzt = trace.dx();
    let values = nodes
        .rows()
        .into_iter()
        .map(|row| row.iter().map(|&(a, b)| bilinear_sample(&d, a, b)).sum::<f64>() * dzt)
        .collect();
    Density1D::from_unnormalized(out_z.clone(), values)
}

/// ρ(z|z′) = Σ_j Φ*(a(z, z̃_j), b(z, z̃_j))·Φ(a(z′, z̃_j), b(z′, z̃_j))·dz̃ with
/// complex bilinear interpolation of Φ, renormalized to unit trace.
pub fn exact_1rdm(state: &WavefunctionGrid, params: &ThermalParams) -> Result<DensityMatrix1D> {
    exact_1rdm_refined(state, params, 1)
}

pub fn exact_1rdm_refined(state: &WavefunctionGrid, params: &ThermalParams, factor: usize) -> Result<DensityMatrix1D> {
    exact_1rdm_on(&state.refine_spectral(factor)?, &state.grid_z, params)
}

/// Exact 1-RDM on `out_z` from an already refined state.
pub fn exact_1rdm_on(fine: &WavefunctionGrid, out_z: &Grid1D, params: &ThermalParams) -> Result<DensityMatrix1D> {
    let trace = trace_grid(&fine.grid_zt, params)?;
    let nodes = mapped_nodes(out_z, &trace, params);
    let psi = nodes.mapv(|(a, b)| bilinear_sample_complex(&fine.amplitudes, &fine.grid_z, &fine.grid_zt, a, b));
    let live: Vec<usize> =
        (0..psi.ncols()).filter(|&j| psi.column(j).iter().any(|v| *v != Complex64::new(0.0, 0.0))).collect();
    let psi = psi.select(ndarray::Axis(1), &live);
    let dzt = trace.dx();
    let mut entries = psi.mapv(|v| v.conj()).dot(&psi.t());
    entries.mapv_inplace(|v| v * dzt);
    let mut rho = DensityMatrix1D { grid: out_z.clone(), entries };
    let trace = rho.trace();
    if !(trace > 0.0) || !trace.is_finite() {
        return Err(TfdError::NumericalInstability(format!("density matrix trace is {trace}")));
    }
    if (trace - 1.0).abs() > NORM_WARN_TOLERANCE {
        log::warn!("density matrix trace {trace:.6} deviates from 1 by more than {NORM_WARN_TOLERANCE:e}");
    }
    rho.entries.mapv_inplace(|v| v / trace);
    Ok(rho)
}

/// W(z, p) = (1/2π)∫ρ(z+q/2|z−q/2)e^{ipq}dq, with q stepping by 2dz so every
/// cut sample falls on a matrix node. The momentum grid has n points with
/// spacing π/(n·dz), centered on zero.
pub fn wigner_from_1rdm(rho: &DensityMatrix1D) -> Result<WignerGrid> {
    let n = rho.grid.len();
    if rho.entries.dim() != (n, n) {
        return Err(TfdError::Argument("density matrix shape does not match its grid".into()));
    }
    let dz = rho.grid.dx();
    let dq = 2.0 * dz;
    let dp = std::f64::consts::PI / (n as f64 * dz);
    let half = n as i64 / 2;
    let grid_p = Grid1D::new(n, -(half as f64) * dp, half as f64 * dp)?;
    // e^{i p_j q_k} with p_j q_k = 2π(j − n/2)(k − n/2)/n.
    let phase: Vec<Complex64> =
        (0..n).map(|m| Complex64::from_polar(1.0, 2.0 * std::f64::consts::PI * m as f64 / n as f64)).collect();
    let mut values = Array2::zeros((n, n));
    let mut max_imaginary: f64 = 0.0;
    let mut cut = vec![Complex64::new(0.0, 0.0); n];
    for i in 0..n as i64 {
        for (k, c) in cut.iter_mut().enumerate() {
            let s = k as i64 - half;
            let (a, b) = (i + s, i - s);
            *c = if (0..n as i64).contains(&a) && (0..n as i64).contains(&b) {
                rho.entries[[a as usize, b as usize]]
            } else {
                Complex64::new(0.0, 0.0)
            };
        }
        for j in 0..n as i64 {
            let mut w = Complex64::new(0.0, 0.0);
            for (k, c) in cut.iter().enumerate() {
                let m = ((j - half) * (k as i64 - half)).rem_euclid(n as i64) as usize;
                w += c * phase[m];
            }
            w *= dq / (2.0 * std::f64::consts::PI);
            max_imaginary = max_imaginary.max(w.im.abs());
            values[[i as usize, j as usize]] = w.re;
        }
    }
    if max_imaginary > WIGNER_IMAG_TOLERANCE {
        log::warn!("Wigner transform has imaginary residue {max_imaginary:.3e}; density matrix not Hermitian");
    }
    Ok(WignerGrid { grid_z: rho.grid.clone(), grid_p, values, max_imaginary })
}

/// ρ(z_i) = Σ_j g_z(a)·g_z̃(b)·dz̃ from the single-mode marginals of |Φ|²,
/// linearly interpolated.
pub fn uncorrelated_density(state: &WavefunctionGrid, params: &ThermalParams) -> Result<Density1D> {
    uncorrelated_density_refined(state, params, 1)
}

pub fn uncorrelated_density_refined(
    state: &WavefunctionGrid,
    params: &ThermalParams,
    factor: usize,
) -> Result<Density1D> {
    uncorrelated_density_on(&state.refine_spectral(factor)?, &state.grid_z, params)
}

/// Uncorrelated density on `out_z` from an already refined state.
pub fn uncorrelated_density_on(fine: &WavefunctionGrid, out_z: &Grid1D, params: &ThermalParams) -> Result<Density1D> {
    let d = fine.probability();
    let gz: Vec<f64> = d.values.rows().into_iter().map(|r| r.sum() * fine.grid_zt.dx()).collect();
    let gzt: Vec<f64> = d.values.columns().into_iter().map(|c| c.sum() * fine.grid_z.dx()).collect();
    let trace = trace_grid(&fine.grid_zt, params)?;
    let nodes = mapped_nodes(out_z, &trace, params);
    let dzt = trace.dx();
    let values = nodes
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .map(|&(a, b)| linear_sample(&gz, &fine.grid_z, a) * linear_sample(&gzt, &fine.grid_zt, b))
                .sum::<f64>()
                * dzt
        })
        .collect();
    Density1D::from_unnormalized(out_z.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::propagator::{initial_center_for_physical_mean, initial_state, physical_moment};
    use crate::thermo::InverseTemperature;
    use approx::assert_abs_diff_eq;

    fn zero_temperature() -> ThermalParams {
        ThermalParams::new(InverseTemperature::Infinite, 1e-3, Complex64::new(0.0, 0.0)).unwrap()
    }

    fn room_temperature() -> ThermalParams {
        ThermalParams::from_lab_units(300.0, 200.0, Complex64::new(0.0, 0.0)).unwrap()
    }

    fn entangled(g: &Grid1D) -> WavefunctionGrid {
        let mut psi = WavefunctionGrid::from_fn(g.clone(), g.clone(), |z, zt| {
            let a = (-(z - 0.3).powi(2) / 1.2 - (zt + 0.2).powi(2) / 0.9 + 0.4 * z * zt).exp();
            Complex64::from_polar(a, 0.6 * z - 0.25 * z * zt + 0.1 * zt * zt)
        });
        psi.normalize().unwrap();
        psi
    }

    #[test]
    fn diagonal_of_reference_state() {
        let g = Grid1D::symmetric(128, 10.0).unwrap();
        let params = room_temperature();
        let z0 = initial_center_for_physical_mean(0.5, &params);
        let d = diagonal_2rdm(&initial_state(&g, &g, z0, 1.0).unwrap()).0;
        assert_abs_diff_eq!(d.integral(), 1.0, epsilon = 1e-10);
        let (cz, ct) = d.centroid();
        assert_abs_diff_eq!(cz, 0.2426, epsilon = 1e-4);
        assert_abs_diff_eq!(ct, 0.2426, epsilon = 1e-4);
        assert!(d.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn zero_temperature_reduces_to_partial_trace() {
        let g = Grid1D::symmetric(64, 8.0).unwrap();
        let psi = entangled(&g);
        let params = zero_temperature();
        let marginal: Vec<f64> = psi.probability().values.rows().into_iter().map(|r| r.sum() * g.dx()).collect();
        let exact = exact_density(&psi, &params).unwrap();
        assert_abs_diff_eq!(exact.norm_raw, 1.0, epsilon = 1e-10);
        for (a, b) in exact.values.iter().zip(&marginal) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        let rho = exact_1rdm(&psi, &params).unwrap();
        for i in 0..g.len() {
            for k in 0..g.len() {
                let pt: Complex64 =
                    (0..g.len()).map(|j| psi.amplitudes[[i, j]].conj() * psi.amplitudes[[k, j]]).sum::<Complex64>()
                        * g.dx();
                assert!((rho.entries[[i, k]] - pt).norm() < 1e-10);
            }
        }
        for (a, b) in rho.diagonal().iter().zip(&exact.values) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn thermal_gaussian_composition() {
        let g = Grid1D::symmetric(256, 12.0).unwrap();
        let params = room_temperature();
        let z0 = initial_center_for_physical_mean(0.5, &params);
        let psi = initial_state(&g, &g, z0, 1.0).unwrap();
        let coarse = exact_density(&psi, &params).unwrap();
        // Bilinear interpolation of |Φ|² inflates the variance by cosh 2θ·dz²/6.
        let inflation = (2.0 * params.theta()).cosh() * g.dx().powi(2) / 6.0;
        assert_abs_diff_eq!(coarse.variance(), 0.5 * (2.0 * params.theta()).cosh() + inflation, epsilon = 1e-5);
        let exact = exact_density_refined(&psi, &params, 8).unwrap();
        assert!(exact.norm_within_tolerance());
        assert_abs_diff_eq!(exact.integral(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(exact.mean(), 0.5, epsilon = 1e-6);
        let want = 0.5 * (2.0 * params.theta()).cosh();
        assert_abs_diff_eq!(want, 1.121_284_823_409_329_6, epsilon = 1e-12);
        assert_abs_diff_eq!(exact.variance(), want, epsilon = 1e-4);
        let m1 = physical_moment(&psi, &params, 1, 0).unwrap();
        assert_abs_diff_eq!(exact.mean(), m1, epsilon = 1e-4);
        let unc = uncorrelated_density_refined(&psi, &params, 8).unwrap();
        assert!(unc.max_abs_difference(&exact).unwrap() < 1e-6);
    }

    #[test]
    fn finite_temperature_1rdm_properties() {
        let g = Grid1D::symmetric(128, 12.0).unwrap();
        let params = room_temperature();
        let psi = entangled(&g);
        let rho = exact_1rdm(&psi, &params).unwrap();
        assert!(rho.hermiticity_residual() < 1e-10);
        assert_abs_diff_eq!(rho.trace(), 1.0, epsilon = 1e-12);
        // The diagonal squares interpolated amplitudes while the density
        // interpolates squared amplitudes; they agree to interpolation error.
        let exact = exact_density(&psi, &params).unwrap();
        let diff = rho.diagonal().iter().zip(&exact.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 5e-3, "diagonal differs by {diff}");
        let mean_diag: f64 = g.points().iter().zip(rho.diagonal()).map(|(z, v)| z * v).sum::<f64>() * g.dx();
        assert_abs_diff_eq!(mean_diag, exact.mean(), epsilon = 1e-3);
    }

    #[test]
    fn ground_state_wigner_is_positive_gaussian() {
        let g = Grid1D::symmetric(128, 10.0).unwrap();
        let psi = initial_state(&g, &g, 0.0, 1.0).unwrap();
        let rho = exact_1rdm(&psi, &zero_temperature()).unwrap();
        let w = wigner_from_1rdm(&rho).unwrap();
        assert!(w.max_imaginary < 1e-12);
        let zs = g.points();
        let ps = w.grid_p.points();
        for ((i, j), v) in w.values.indexed_iter() {
            let want = (-zs[i] * zs[i] - ps[j] * ps[j]).exp() / std::f64::consts::PI;
            assert!((v - want).abs() < 1e-10, "W({}, {}) = {v}, want {want}", zs[i], ps[j]);
        }
        for (a, b) in w.z_marginal().iter().zip(rho.diagonal()) {
            assert_abs_diff_eq!(a, &b, epsilon = 1e-12);
        }
    }

    #[test]
    fn momentum_sign_of_wigner() {
        // A state kicked by e^{ik₀z} must have ⟨p⟩ = +k₀.
        let g = Grid1D::symmetric(128, 10.0).unwrap();
        let mut psi = initial_state(&g, &g, 0.0, 1.0).unwrap();
        let zs = g.points();
        for ((i, _), v) in psi.amplitudes.indexed_iter_mut() {
            *v *= Complex64::from_polar(1.0, 1.3 * zs[i]);
        }
        let w = wigner_from_1rdm(&exact_1rdm(&psi, &zero_temperature()).unwrap()).unwrap();
        let ps = w.grid_p.points();
        let mean_p: f64 = w.p_marginal().iter().zip(&ps).map(|(m, p)| m * p).sum::<f64>() * w.grid_p.dx();
        assert_abs_diff_eq!(mean_p, 1.3, epsilon = 1e-8);
    }

    #[test]
    fn thermal_wigner_is_isotropic_gaussian() {
        let g = Grid1D::symmetric(128, 12.0).unwrap();
        let params = room_temperature();
        let psi = initial_state(&g, &g, 0.0, 1.0).unwrap();
        let rho = exact_1rdm_refined(&psi, &params, 8).unwrap();
        let w = wigner_from_1rdm(&rho).unwrap();
        assert!(w.max_imaginary < 1e-6);
        let v = 0.5 * (2.0 * params.theta()).cosh();
        let zs = g.points();
        let ps = w.grid_p.points();
        let l1: f64 = w
            .values
            .indexed_iter()
            .map(|((i, j), x)| {
                let want = (-(zs[i] * zs[i] + ps[j] * ps[j]) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v);
                (x - want).abs()
            })
            .sum::<f64>()
            * g.dx()
            * w.grid_p.dx();
        assert!(l1 < 1e-3, "L1 {l1}");
        for (a, b) in w.z_marginal().iter().zip(rho.diagonal()) {
            assert_abs_diff_eq!(a, &b, epsilon = 1e-6);
        }
    }

    #[test]
    fn product_state_uncorrelated_is_exact() {
        let g = Grid1D::symmetric(128, 12.0).unwrap();
        let params = room_temperature();
        let mut psi = WavefunctionGrid::from_fn(g.clone(), g.clone(), |z, zt| {
            Complex64::new((-(z - 0.4).powi(2) / 1.5).exp() * (-(zt + 0.3).powi(2) / 0.8).exp(), 0.0)
        });
        psi.normalize().unwrap();
        let exact = exact_density(&psi, &params).unwrap();
        let unc = uncorrelated_density(&psi, &params).unwrap();
        assert!(unc.max_abs_difference(&exact).unwrap() < 1e-6);
        // Correlated states separate.
        let psi = entangled(&g);
        let exact = exact_density(&psi, &params).unwrap();
        let unc = uncorrelated_density(&psi, &params).unwrap();
        assert!(unc.l1_distance(&exact).unwrap() > 1e-3);
    }

    #[test]
    fn density_helpers() {
        let g = Grid1D::symmetric(8, 4.0).unwrap();
        assert!(Density1D::from_unnormalized(g.clone(), vec![0.0; 8]).is_err());
        assert!(Density1D::from_unnormalized(g.clone(), vec![1.0; 7]).is_err());
        let d = Density1D::from_unnormalized(g.clone(), vec![2.0; 8]).unwrap();
        assert_abs_diff_eq!(d.norm_raw, 16.0, epsilon = 1e-14);
        assert!(!d.norm_within_tolerance());
        assert_abs_diff_eq!(d.integral(), 1.0, epsilon = 1e-14);
        let other = Density1D::from_unnormalized(Grid1D::symmetric(8, 5.0).unwrap(), vec![1.0; 8]).unwrap();
        assert!(d.l1_distance(&other).is_err());
    }
}
