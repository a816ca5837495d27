//! Closed-form Bogoliubov and thermal algebra for one mode and its tilde
//! partner: mixing angles, temperature-dependent shift functions, the
//! coordinate maps realizing the unitary thermal transform on position
//! kets, two-mode BT matrices, and the analytic squeezed-Gaussian model.
//!
//! The unitary thermal transform is never built as an operator. Every use
//! goes through [`shift_eta`] and [`map_ab`], which are exact on position
//! eigenstates.

use ndarray::Array2;
use num_complex::Complex64;
use std::f64::consts::{FRAC_PI_4, SQRT_2};

use crate::error::{Result, TfdError};
use crate::grid::{Field2D, Grid1D};
use crate::units::{cm1_to_hartree, KB_HARTREE_PER_K};

/// Inverse temperature β in 1/hartree, with an exact zero-temperature state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum InverseTemperature {
    /// β = +∞; the mixing angle is exactly zero.
    Infinite,
    Finite(f64),
}

impl InverseTemperature {
    /// β = 1/(k_B T). `T = 0` maps to [`InverseTemperature::Infinite`].
    pub fn from_kelvin(temperature: f64) -> Result<Self> {
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(TfdError::Domain(format!("temperature must be finite and non-negative, got {temperature}")));
        }
        if temperature == 0.0 {
            Ok(Self::Infinite)
        } else {
            Ok(Self::Finite(1.0 / (KB_HARTREE_PER_K * temperature)))
        }
    }

    pub fn is_zero_temperature(&self) -> bool {
        matches!(self, Self::Infinite)
    }

    /// Temperature in kelvin; zero for the infinite-β state.
    pub fn kelvin(&self) -> f64 {
        match self {
            Self::Infinite => 0.0,
            Self::Finite(beta) => 1.0 / (KB_HARTREE_PER_K * beta),
        }
    }
}

/// Bosonic mixing angle θ(β) = artanh(e^{−βω/2}).
pub fn mixing_angle(beta: InverseTemperature, omega: f64) -> Result<f64> {
    if !(omega > 0.0) || !omega.is_finite() {
        return Err(TfdError::Domain(format!("omega must be positive, got {omega}")));
    }
    match beta {
        InverseTemperature::Infinite => Ok(0.0),
        InverseTemperature::Finite(b) if b > 0.0 && b.is_finite() => Ok((-0.5 * b * omega).exp().atanh()),
        InverseTemperature::Finite(b) => {
            Err(TfdError::Domain(format!("beta must be positive (infinite temperature is not representable), got {b}")))
        }
    }
}

/// Inverse of [`mixing_angle`]: β such that tanh θ = e^{−βω/2}.
pub fn beta_from_mixing_angle(theta: f64, omega: f64) -> Result<InverseTemperature> {
    if !(omega > 0.0) {
        return Err(TfdError::Domain(format!("omega must be positive, got {omega}")));
    }
    if theta == 0.0 {
        return Ok(InverseTemperature::Infinite);
    }
    if !(theta > 0.0) || !theta.is_finite() {
        return Err(TfdError::Domain(format!("theta must be positive, got {theta}")));
    }
    Ok(InverseTemperature::Finite(-2.0 * theta.tanh().ln() / omega))
}

/// Temperature, frequency and displacement for one thermalized mode.
/// Immutable; θ and the displacement components follow from β, ω and α.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ThermalParams {
    beta: InverseTemperature,
    omega: f64,
    theta: f64,
    alpha: Complex64,
    delta_z: f64,
    delta_p: f64,
}

impl ThermalParams {
    pub fn new(beta: InverseTemperature, omega: f64, alpha: Complex64) -> Result<Self> {
        let theta = mixing_angle(beta, omega)?;
        Ok(Self::assemble(beta, omega, theta, alpha))
    }

    /// Convenience constructor from laboratory units.
    pub fn from_lab_units(temperature_k: f64, omega_cm1: f64, alpha: Complex64) -> Result<Self> {
        Self::new(InverseTemperature::from_kelvin(temperature_k)?, cm1_to_hartree(omega_cm1), alpha)
    }

    /// Builds parameters directly from a mixing angle; β is inferred.
    pub fn from_theta(theta: f64, omega: f64, alpha: Complex64) -> Result<Self> {
        let beta = beta_from_mixing_angle(theta, omega)?;
        Ok(Self::assemble(beta, omega, theta, alpha))
    }

    fn assemble(beta: InverseTemperature, omega: f64, theta: f64, alpha: Complex64) -> Self {
        Self { beta, omega, theta, alpha, delta_z: SQRT_2 * alpha.re, delta_p: SQRT_2 * alpha.im }
    }

    pub fn beta(&self) -> InverseTemperature {
        self.beta
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn alpha(&self) -> Complex64 {
        self.alpha
    }

    /// Position displacement √2·Re α.
    pub fn delta_z(&self) -> f64 {
        self.delta_z
    }

    /// Momentum displacement √2·Im α.
    pub fn delta_p(&self) -> f64 {
        self.delta_p
    }

    pub fn cosh(&self) -> f64 {
        self.theta.cosh()
    }

    pub fn sinh(&self) -> f64 {
        self.theta.sinh()
    }

    pub fn xi_z(&self, x: f64) -> f64 {
        shift_xi(x, self.delta_z, self.theta)
    }

    pub fn eta_z(&self, x: f64) -> f64 {
        shift_eta(x, self.delta_z, self.theta)
    }

    pub fn xi_p(&self, p: f64) -> f64 {
        shift_xi(p, self.delta_p, self.theta)
    }

    pub fn eta_p(&self, p: f64) -> f64 {
        shift_eta(p, self.delta_p, self.theta)
    }
}

/// ξ(x) = x − shift·(1 − e^{−θ}).
pub fn shift_xi(x: f64, shift: f64, theta: f64) -> f64 {
    x + shift * (-theta).exp_m1()
}

/// η(x) = x + shift·(e^{θ} − 1).
pub fn shift_eta(x: f64, shift: f64, theta: f64) -> f64 {
    x + shift * theta.exp_m1()
}

/// Coordinates (a, b) at which the iBT-picture state is sampled to obtain
/// the physical amplitude at (z, z̃).
pub fn map_ab(z: f64, ztilde: f64, params: &ThermalParams) -> (f64, f64) {
    map_ab_raw(z, ztilde, params.delta_z, params.theta)
}

pub(crate) fn map_ab_raw(z: f64, ztilde: f64, shift: f64, theta: f64) -> (f64, f64) {
    let (s, c) = (theta.sinh(), theta.cosh());
    let ez = shift_eta(z, shift, theta);
    let et = shift_eta(ztilde, shift, theta);
    (ez * c - et * s, -ez * s + et * c)
}

/// Particle statistics of a two-mode Bogoliubov transformation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Statistics {
    Fermion,
    Boson,
}

impl Statistics {
    /// +1 for fermions, −1 for bosons.
    pub fn sigma(self) -> i32 {
        match self {
            Self::Fermion => 1,
            Self::Boson => -1,
        }
    }

    pub fn from_sigma(sigma: i32) -> Result<Self> {
        match sigma {
            1 => Ok(Self::Fermion),
            -1 => Ok(Self::Boson),
            other => {
                Err(TfdError::Argument(format!("statistics flag must be +1 (fermion) or -1 (boson), got {other}")))
            }
        }
    }
}

/// Gauge-fixed 2×2 Bogoliubov matrix acting on (a₁, a₂†).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BtMatrix {
    pub statistics: Statistics,
    pub theta: f64,
    pub entries: [[f64; 2]; 2],
}

impl BtMatrix {
    /// M_σ = diag(1, σ).
    pub fn metric(&self) -> [[f64; 2]; 2] {
        [[1.0, 0.0], [0.0, self.statistics.sigma() as f64]]
    }

    pub fn determinant(&self) -> f64 {
        let u = &self.entries;
        u[0][0] * u[1][1] - u[0][1] * u[1][0]
    }

    /// Largest entry of |U M U† − M|.
    pub fn isometry_residual(&self) -> f64 {
        let u = &self.entries;
        let m = self.metric();
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += u[i][k] * m[k][k] * u[j][k];
                }
                worst = worst.max((acc - m[i][j]).abs());
            }
        }
        worst
    }

    /// Largest entry of |U† M U − M|.
    pub fn dual_isometry_residual(&self) -> f64 {
        let u = &self.entries;
        let m = self.metric();
        let mut worst: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = 0.0;
                for k in 0..2 {
                    acc += u[k][i] * m[k][k] * u[k][j];
                }
                worst = worst.max((acc - m[i][j]).abs());
            }
        }
        worst
    }
}

/// Rotation for fermions, hyperbolic rotation for bosons.
pub fn bt_matrix(statistics: Statistics, theta: f64) -> BtMatrix {
    let entries = match statistics {
        Statistics::Fermion => {
            let (s, c) = theta.sin_cos();
            [[c, -s], [s, c]]
        }
        Statistics::Boson => {
            let (s, c) = (theta.sinh(), theta.cosh());
            [[c, -s], [-s, c]]
        }
    };
    BtMatrix { statistics, theta, entries }
}

/// Mixing angle fixed by requiring the transformed annihilators to destroy
/// the thermal vacuum: tan θ = e^{−βω/2} (fermions), tanh θ = e^{−βω/2}
/// (bosons).
pub fn theta_from_condition(statistics: Statistics, beta: InverseTemperature, omega: f64) -> Result<f64> {
    match statistics {
        Statistics::Boson => mixing_angle(beta, omega),
        Statistics::Fermion => match beta {
            InverseTemperature::Infinite => Ok(0.0),
            InverseTemperature::Finite(b) => {
                let x = b * omega;
                if x.is_nan() || x < 0.0 {
                    return Err(TfdError::Domain(format!("fermionic condition needs beta*omega >= 0, got {x}")));
                }
                if x == 0.0 {
                    Ok(FRAC_PI_4)
                } else {
                    Ok((-0.5 * x).exp().atan())
                }
            }
        },
    }
}

/// g(θ) = (1 − e^{θ})/θ, continued to −1 at θ = 0.
pub fn g_of_theta(theta: f64) -> f64 {
    if theta == 0.0 {
        -1.0
    } else {
        -theta.exp_m1() / theta
    }
}

/// Isotropic Gaussian in iBT space and the harmonic shift it is viewed under.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianSqueezeModel {
    /// Width of the isotropic Gaussian.
    pub sigma0: f64,
    /// Center (δ, δ) of the Gaussian in iBT position space.
    pub delta: f64,
    /// Physical-space shift Δ of the harmonic potential.
    pub shift: f64,
    pub theta: f64,
}

impl GaussianSqueezeModel {
    /// δ′ = e^{θ}[δ − Δ(1 − e^{−θ})].
    pub fn transformed_center(&self) -> f64 {
        self.theta.exp() * shift_xi(self.delta, self.shift, self.theta)
    }

    /// Density of the transformed Gaussian at a physical point.
    pub fn density_at(&self, z: f64, ztilde: f64) -> f64 {
        let (a, b) = map_ab_raw(z, ztilde, self.shift, self.theta);
        let s2 = self.sigma0 * self.sigma0;
        let r2 = (a - self.delta).powi(2) + (b - self.delta).powi(2);
        (-r2 / (2.0 * s2)).exp() / (2.0 * std::f64::consts::PI * s2)
    }
}

/// Evaluates the analytically transformed Gaussian on a 2D position grid.
///
/// The map has unit Jacobian, so the prefactor (2πσ₀²)⁻¹ normalizes exactly
/// and the grid integral measures area preservation.
pub fn squeeze_gaussian(model: &GaussianSqueezeModel, grid_z: &Grid1D, grid_zt: &Grid1D) -> Result<Field2D> {
    if !(model.sigma0 > 0.0) {
        return Err(TfdError::Domain(format!("sigma0 must be positive, got {}", model.sigma0)));
    }
    let zs = grid_z.points();
    let zts = grid_zt.points();
    let values = Array2::from_shape_fn((zs.len(), zts.len()), |(i, j)| model.density_at(zs[i], zts[j]));
    Field2D::new(grid_z.clone(), grid_zt.clone(), values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    const THETA_300K_200CM: f64 = 0.723_440_208_941_665_7;

    #[test]
    fn zero_temperature_angle_is_exactly_zero() {
        assert_eq!(mixing_angle(InverseTemperature::Infinite, 1e-3).unwrap(), 0.0);
        assert_eq!(mixing_angle(InverseTemperature::from_kelvin(0.0).unwrap(), 7.0).unwrap(), 0.0);
    }

    #[test]
    fn room_temperature_angle() {
        let p = ThermalParams::from_lab_units(300.0, 200.0, Complex64::new(0.0, 0.0)).unwrap();
        assert_abs_diff_eq!(p.theta(), THETA_300K_200CM, epsilon = 1e-12);
    }

    #[test]
    fn half_tanh_angle() {
        let omega = 0.01;
        let beta = 2.0 * 2f64.ln() / omega;
        let th = mixing_angle(InverseTemperature::Finite(beta), omega).unwrap();
        assert_abs_diff_eq!(th, 0.5f64.atanh(), epsilon = 1e-14);
        assert_abs_diff_eq!(th.tanh(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn non_positive_beta_rejected() {
        assert!(matches!(mixing_angle(InverseTemperature::Finite(0.0), 1.0), Err(TfdError::Domain(_))));
        assert!(mixing_angle(InverseTemperature::Finite(-1.0), 1.0).is_err());
        assert!(mixing_angle(InverseTemperature::Finite(1.0), 0.0).is_err());
        assert!(InverseTemperature::from_kelvin(-3.0).is_err());
    }

    #[test]
    fn shift_function_examples() {
        let ln2 = 2f64.ln();
        assert_eq!(shift_xi(1.3, 0.0, 0.8), 1.3);
        assert_eq!(shift_xi(1.3, 2.0, 0.0), 1.3);
        assert_abs_diff_eq!(shift_xi(1.0, 1.0, ln2), 0.5, epsilon = 1e-15);
        assert_eq!(shift_eta(-0.7, 0.0, 0.8), -0.7);
        assert_abs_diff_eq!(shift_eta(0.0, 1.0, ln2), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn map_ab_identity_and_diagonal_contraction() {
        let p = ThermalParams::from_theta(0.0, 1.0, Complex64::new(0.0, 0.0)).unwrap();
        assert_eq!(map_ab(0.3, -1.2, &p), (0.3, -1.2));
        let p = ThermalParams::from_theta(0.9, 1.0, Complex64::new(0.0, 0.0)).unwrap();
        let (a, b) = map_ab(2.5, 2.5, &p);
        assert_abs_diff_eq!(a, 2.5 * (-0.9f64).exp(), epsilon = 1e-14);
        assert_abs_diff_eq!(b, 2.5 * (-0.9f64).exp(), epsilon = 1e-14);
    }

    #[test]
    fn bt_matrix_examples() {
        let u = bt_matrix(Statistics::Boson, 0.0);
        assert_eq!(u.entries, [[1.0, 0.0], [0.0, 1.0]]);
        let u = bt_matrix(Statistics::Fermion, FRAC_PI_4);
        let h = SQRT_2 / 2.0;
        let want = [[h, -h], [h, h]];
        for i in 0..2 {
            for j in 0..2 {
                assert_abs_diff_eq!(u.entries[i][j], want[i][j], epsilon = 1e-15);
            }
        }
        assert!(Statistics::from_sigma(0).is_err());
        assert_eq!(Statistics::from_sigma(-1).unwrap(), Statistics::Boson);
    }

    #[test]
    fn theta_conditions() {
        let f = theta_from_condition(Statistics::Fermion, InverseTemperature::Finite(0.0), 1.0);
        assert_abs_diff_eq!(f.unwrap(), FRAC_PI_4, epsilon = 1e-15);
        let f = theta_from_condition(Statistics::Fermion, InverseTemperature::Infinite, 1.0);
        assert_eq!(f.unwrap(), 0.0);
        let beta = InverseTemperature::from_kelvin(300.0).unwrap();
        let omega = cm1_to_hartree(200.0);
        let b = theta_from_condition(Statistics::Boson, beta, omega).unwrap();
        assert_abs_diff_eq!(b, mixing_angle(beta, omega).unwrap(), epsilon = 1e-14);
        assert_abs_diff_eq!(b, THETA_300K_200CM, epsilon = 1e-12);
        assert!(theta_from_condition(Statistics::Boson, InverseTemperature::Finite(0.0), 1.0).is_err());
        assert!(theta_from_condition(Statistics::Fermion, InverseTemperature::Finite(-1.0), 1.0).is_err());
    }

    #[test]
    fn g_values() {
        assert_eq!(g_of_theta(0.0), -1.0);
        assert_abs_diff_eq!(g_of_theta(1e-9), -1.0, epsilon = 1e-8);
        assert_abs_diff_eq!(g_of_theta(2f64.ln()), -std::f64::consts::LOG2_E, epsilon = 1e-14);
        assert_abs_diff_eq!(g_of_theta(1.0), -1.718_281_828_459_045, epsilon = 1e-14);
    }

    #[test]
    fn squeeze_centers() {
        let m = GaussianSqueezeModel { sigma0: 0.5, delta: 1.2, shift: 0.0, theta: 0.0 };
        assert_eq!(m.transformed_center(), 1.2);
        let m = GaussianSqueezeModel { sigma0: 0.5, delta: 1.2, shift: 1.2, theta: 0.7 };
        assert_abs_diff_eq!(m.transformed_center(), 1.2, epsilon = 1e-14);
        let m = GaussianSqueezeModel { sigma0: 0.5, delta: 1.2, shift: 0.0, theta: 0.7 };
        assert_abs_diff_eq!(m.transformed_center(), 1.2 * 0.7f64.exp(), epsilon = 1e-14);
        let bad = GaussianSqueezeModel { sigma0: 0.0, ..m };
        let g = Grid1D::new(16, -1.0, 1.0).unwrap();
        assert!(squeeze_gaussian(&bad, &g, &g).is_err());
    }

    #[test]
    fn squeeze_peak_sits_at_transformed_center() {
        let m = GaussianSqueezeModel { sigma0: 0.6, delta: 0.8, shift: 0.3, theta: 0.5 };
        let c = m.transformed_center();
        let peak = m.density_at(c, c);
        for (dz, dt) in [(1e-3, 0.0), (0.0, 1e-3), (-1e-3, 1e-3), (1e-3, 1e-3)] {
            assert!(m.density_at(c + dz, c + dt) < peak);
        }
    }

    proptest! {
        #[test]
        fn xi_inverts_eta(x in -20.0..20.0f64, shift in -5.0..5.0f64, theta in 0.0..4.0f64) {
            let back = shift_xi((-theta).exp() * shift_eta(theta.exp() * x, shift, theta), shift, theta);
            prop_assert!((back - x).abs() <= 1e-12 * (1.0 + x.abs() + shift.abs() * theta.exp()));
        }

        #[test]
        fn map_ab_unit_jacobian_and_inverse(z in -10.0..10.0f64, zt in -10.0..10.0f64, theta in -3.0..3.0f64) {
            let (s, c) = (theta.sinh(), theta.cosh());
            prop_assert!((c * c - s * s - 1.0).abs() < 1e-10 * c * c);
            let (a, b) = map_ab_raw(z, zt, 0.0, theta);
            let (z2, zt2) = map_ab_raw(a, b, 0.0, -theta);
            let scale = 1.0 + c * c * (z.abs() + zt.abs());
            prop_assert!((z2 - z).abs() < 1e-12 * scale);
            prop_assert!((zt2 - zt).abs() < 1e-12 * scale);
        }

        #[test]
        fn boson_isometry(theta in 0.0..5.0f64) {
            let u = bt_matrix(Statistics::Boson, theta);
            let scale = theta.cosh().powi(2);
            prop_assert!(u.isometry_residual() <= 1e-12 * scale);
            prop_assert!(u.dual_isometry_residual() <= 1e-12 * scale);
            prop_assert!((u.determinant() - 1.0).abs() <= 1e-12 * scale);
        }

        #[test]
        fn fermion_isometry(theta in 0.0..std::f64::consts::FRAC_PI_2) {
            let u = bt_matrix(Statistics::Fermion, theta);
            prop_assert!(u.isometry_residual() <= 1e-12);
            prop_assert!((u.determinant() - 1.0).abs() <= 1e-12);
        }

        #[test]
        fn mixing_angle_round_trip_and_monotone(beta in 1.0..5000.0f64, omega in 1e-4..1e-2f64) {
            let b = InverseTemperature::Finite(beta);
            let th = mixing_angle(b, omega).unwrap();
            let back = beta_from_mixing_angle(th, omega).unwrap();
            prop_assert!((mixing_angle(back, omega).unwrap() - th).abs() <= 1e-12);
            let hotter = mixing_angle(InverseTemperature::Finite(beta * 0.9), omega).unwrap();
            let stiffer = mixing_angle(b, omega * 1.1).unwrap();
            prop_assert!(hotter > th);
            prop_assert!(stiffer < th);
        }
    }
}
