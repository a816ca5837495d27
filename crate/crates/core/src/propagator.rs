//! iBT-picture Hamiltonian for polynomial potentials, the shifted bare-vacuum
//! initial state, symmetric split-step propagation of Φ(z, z̃; t), and
//! iBT-space and physical moments.

use ndarray::{Array2, Zip};
use num_complex::Complex64;

use crate::error::{Result, TfdError};
use crate::grid::{Fft2, FftAxis, Grid1D};
use crate::thermo::ThermalParams;
use crate::units::cm1_to_hartree;
use crate::wavefunction::WavefunctionGrid;

/// Highest total moment order accepted by default.
pub const DEFAULT_MAX_MOMENT_ORDER: u32 = 20;

/// Escaped-norm level above which a grid is rejected.
pub const MAX_ESCAPED_NORM: f64 = 1e-6;

/// Norm drift that aborts a propagation.
pub const NORM_DRIFT_LIMIT: f64 = 1e-6;

/// H = (ω/2)(z² + p²) + a₃z³ + a₄z⁴ in dimensionless oscillator coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PolynomialPotential {
    /// Hartree.
    pub omega: f64,
    pub a3: f64,
    pub a4: f64,
    /// Physical-space potential shift Δ.
    pub shift: f64,
}

impl PolynomialPotential {
    /// 200 cm⁻¹ quartic oscillator with a₃ = 7.35e−5 and a₄ = 7.35e−6 hartree.
    pub fn reference() -> Self {
        Self { omega: cm1_to_hartree(200.0), a3: 7.35e-5, a4: 7.35e-6, shift: 0.0 }
    }

    pub fn harmonic(omega: f64) -> Self {
        Self { omega, a3: 0.0, a4: 0.0, shift: 0.0 }
    }

    fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return Err(TfdError::Config(format!("omega_z must be positive, got {}", self.omega)));
        }
        if !(self.a3.is_finite() && self.a4.is_finite() && self.shift.is_finite()) {
            return Err(TfdError::Config("potential coefficients must be finite".into()));
        }
        Ok(())
    }

    /// Single-mode potential (ω/2)z² + a₃z³ + a₄z⁴.
    pub fn physical(&self, z: f64) -> f64 {
        let z2 = z * z;
        0.5 * self.omega * z2 + self.a3 * z2 * z + self.a4 * z2 * z2
    }

    /// V(z, z̃) of the iBT Hamiltonian: (ω/2)(z² − z̃²) plus the anharmonic
    /// terms in the mixed coordinate cosh θ·z + sinh θ·z̃, after the
    /// displacement z → z − Δ(1 − e^{−θ}) on both modes.
    pub fn ibt(&self, z: f64, zt: f64, theta: f64) -> f64 {
        let d = self.shift * -(-theta).exp_m1();
        let (z, zt) = (z - d, zt - d);
        let u = theta.cosh() * z + theta.sinh() * zt;
        let u2 = u * u;
        0.5 * self.omega * (z * z - zt * zt) + self.a3 * u2 * u + self.a4 * u2 * u2
    }

    /// (∂_z V, ∂_z̃ V, ∂²_z V, ∂²_z̃ V) of [`Self::ibt`].
    pub fn ibt_derivatives(&self, z: f64, zt: f64, theta: f64) -> [f64; 4] {
        let d = self.shift * -(-theta).exp_m1();
        let (z, zt) = (z - d, zt - d);
        let (c, s) = (theta.cosh(), theta.sinh());
        let u = c * z + s * zt;
        let du = 3.0 * self.a3 * u * u + 4.0 * self.a4 * u * u * u;
        let ddu = 6.0 * self.a3 * u + 12.0 * self.a4 * u * u;
        [self.omega * z + c * du, -self.omega * zt + s * du, self.omega + c * c * ddu, -self.omega + s * s * ddu]
    }

    /// Monomial coefficients c[i][j] of z^i z̃^j in [`Self::ibt`].
    pub fn ibt_coefficients(&self, theta: f64) -> [[f64; 5]; 5] {
        let d = self.shift * -(-theta).exp_m1();
        let (c, s) = (theta.cosh(), theta.sinh());
        // Linear forms as coefficient arrays over (z^i z̃^j).
        let mut zl = [[0.0; 5]; 5];
        zl[0][0] = -d;
        zl[1][0] = 1.0;
        let mut tl = [[0.0; 5]; 5];
        tl[0][0] = -d;
        tl[0][1] = 1.0;
        let mut ul = [[0.0; 5]; 5];
        ul[0][0] = -d * (c + s);
        ul[1][0] = c;
        ul[0][1] = s;

        let u2 = poly_mul(&ul, &ul);
        let u3 = poly_mul(&u2, &ul);
        let u4 = poly_mul(&u2, &u2);
        let z2 = poly_mul(&zl, &zl);
        let t2 = poly_mul(&tl, &tl);
        let mut out = [[0.0; 5]; 5];
        for i in 0..5 {
            for j in 0..5 {
                out[i][j] = 0.5 * self.omega * (z2[i][j] - t2[i][j]) + self.a3 * u3[i][j] + self.a4 * u4[i][j];
            }
        }
        out
    }
}

fn poly_mul(a: &[[f64; 5]; 5], b: &[[f64; 5]; 5]) -> [[f64; 5]; 5] {
    let mut out = [[0.0; 5]; 5];
    for i in 0..5 {
        for j in 0..5 {
            if a[i][j] == 0.0 {
                continue;
            }
            for k in 0..5 - i {
                for l in 0..5 - j {
                    out[i + k][j + l] += a[i][j] * b[k][l];
                }
            }
        }
    }
    out
}

/// Discretized iBT Hamiltonian, diagonal in position (potential) and in
/// momentum (kinetic) representation.
#[derive(Clone, Debug)]
pub struct IbtHamiltonian {
    pub potential: Array2<f64>,
    /// ∂_z V, ∂_z̃ V, ∂²_z V, ∂²_z̃ V on the grid.
    pub derivatives: [Array2<f64>; 4],
    /// (ω/2)(k_z² − k_z̃²) in FFT order.
    pub kinetic_spectrum: Array2<f64>,
    pub params: ThermalParams,
    pub polynomial: PolynomialPotential,
    pub grid_z: Grid1D,
    pub grid_zt: Grid1D,
}

/// Probability mass of the thermal reference Gaussian that falls outside
/// the grids: the physical density (variance ½cosh 2θ about Δ) on the z
/// grid, and the bare vacuum (variance ½) on both iBT grids.
pub fn escaped_norm_estimate(params: &ThermalParams, shift: f64, grid_z: &Grid1D, grid_zt: &Grid1D) -> f64 {
    let tails = |center: f64, var: f64, g: &Grid1D| {
        let s = (2.0 * var).sqrt();
        0.5 * libm::erfc((center - g.x_min()) / s) + 0.5 * libm::erfc((g.last_point() - center) / s)
    };
    let physical = tails(shift, 0.5 * (2.0 * params.theta()).cosh(), grid_z);
    let vac_z = tails(0.0, 0.5, grid_z);
    let vac_t = tails(0.0, 0.5, grid_zt);
    physical.max(vac_z).max(vac_t)
}

pub fn build_ibt_hamiltonian(
    polynomial: &PolynomialPotential,
    params: &ThermalParams,
    grid_z: &Grid1D,
    grid_zt: &Grid1D,
) -> Result<IbtHamiltonian> {
    polynomial.validate()?;
    let escaped = escaped_norm_estimate(params, polynomial.shift, grid_z, grid_zt);
    if escaped > MAX_ESCAPED_NORM {
        return Err(TfdError::Config(format!(
            "grid too small for the thermally stretched support: estimated escaped norm {escaped:.3e} \
             exceeds {MAX_ESCAPED_NORM:.0e}; enlarge the grid half-width"
        )));
    }
    let theta = params.theta();
    let zs = grid_z.points();
    let zts = grid_zt.points();
    let shape = (zs.len(), zts.len());
    let potential = Array2::from_shape_fn(shape, |(i, j)| polynomial.ibt(zs[i], zts[j], theta));
    let derivative =
        |k: usize| Array2::from_shape_fn(shape, |(i, j)| polynomial.ibt_derivatives(zs[i], zts[j], theta)[k]);
    let derivatives = [derivative(0), derivative(1), derivative(2), derivative(3)];
    let kz = grid_z.k_values();
    let kt = grid_zt.k_values();
    let kinetic_spectrum =
        Array2::from_shape_fn((kz.len(), kt.len()), |(i, j)| 0.5 * polynomial.omega * (kz[i] * kz[i] - kt[j] * kt[j]));
    Ok(IbtHamiltonian {
        potential,
        derivatives,
        kinetic_spectrum,
        params: *params,
        polynomial: *polynomial,
        grid_z: grid_z.clone(),
        grid_zt: grid_zt.clone(),
    })
}

/// iBT center z₀ that places the physical mean at `physical_mean`:
/// z₀ = e^{−θ}·m + Δ(1 − e^{−θ}), i.e. 0.5·e^{−θ} for the reference case.
pub fn initial_center_for_physical_mean(physical_mean: f64, params: &ThermalParams) -> f64 {
    let t = params.theta();
    (-t).exp() * physical_mean - params.delta_z() * (-t).exp_m1()
}

/// Normalized product Gaussian ∝ exp(−(z−z₀)²/(2w²)) exp(−(z̃−z₀)²/(2w²)).
pub fn initial_state(grid_z: &Grid1D, grid_zt: &Grid1D, z0: f64, width: f64) -> Result<WavefunctionGrid> {
    if !(width > 0.0) {
        return Err(TfdError::Argument(format!("width must be positive, got {width}")));
    }
    let w2 = 2.0 * width * width;
    let mut psi = WavefunctionGrid::from_fn(grid_z.clone(), grid_zt.clone(), |z, zt| {
        Complex64::new((-((z - z0).powi(2) + (zt - z0).powi(2)) / w2).exp(), 0.0)
    });
    psi.normalize()?;
    Ok(psi)
}

/// Per-sample expectation values in the iBT picture.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Observables {
    /// Atomic time units.
    pub time: f64,
    pub mean_z: f64,
    pub mean_zt: f64,
    pub z2: f64,
    pub zt2: f64,
    pub z_zt: f64,
    /// ⟨H_BT⟩ in hartree.
    pub energy: f64,
    /// ⟨H_BT + dt²/24·[V,[V,T]] − dt²/12·[T,[T,V]]⟩, the Hamiltonian the
    /// symmetric splitting conserves through second order in dt.
    pub modified_energy: f64,
    pub norm: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Trajectory {
    pub sample_times: Vec<f64>,
    pub observables: Vec<Observables>,
    /// Snapshots at sample times, kept only when requested.
    pub states: Vec<WavefunctionGrid>,
}

#[derive(Clone, Copy, Debug)]
pub struct PropagationOptions {
    /// Atomic time units.
    pub dt: f64,
    pub n_steps: usize,
    pub sample_every: usize,
    pub keep_states: bool,
}

/// Symmetric split-step evolution under the iBT Hamiltonian.
pub struct SplitStep<'h> {
    hamiltonian: &'h IbtHamiltonian,
    half_potential: Array2<Complex64>,
    kinetic: Array2<Complex64>,
    fft: Fft2,
    work: Array2<Complex64>,
    dt: f64,
}

impl<'h> SplitStep<'h> {
    pub fn new(hamiltonian: &'h IbtHamiltonian, dt: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(TfdError::Argument(format!("time step must be positive, got {dt}")));
        }
        let half_potential = hamiltonian.potential.mapv(|v| Complex64::from_polar(1.0, -0.5 * v * dt));
        let kinetic = hamiltonian.kinetic_spectrum.mapv(|t| Complex64::from_polar(1.0, -t * dt));
        let (nz, nt) = hamiltonian.potential.dim();
        Ok(Self { hamiltonian, half_potential, kinetic, fft: Fft2::new(nz, nt)?, work: Array2::zeros((nz, nt)), dt })
    }

    /// One Strang step e^{−iV dt/2} e^{−iT dt} e^{−iV dt/2}.
    pub fn step(&mut self, state: &mut WavefunctionGrid) -> Result<()> {
        let amps = &mut state.amplitudes;
        Zip::from(&mut *amps).and(&self.half_potential).for_each(|a, p| *a *= p);
        self.fft.forward(amps, FftAxis::Both)?;
        Zip::from(&mut *amps).and(&self.kinetic).for_each(|a, k| *a *= k);
        self.fft.inverse(amps, FftAxis::Both)?;
        Zip::from(&mut *amps).and(&self.half_potential).for_each(|a, p| *a *= p);
        Ok(())
    }

    pub fn observe(&mut self, state: &WavefunctionGrid) -> Result<Observables> {
        let h = self.hamiltonian;
        let zs = state.grid_z.points();
        let zts = state.grid_zt.points();
        let mut o = Observables { time: state.time, ..Default::default() };
        let mut e_pot = 0.0;
        for ((i, j), v) in state.amplitudes.indexed_iter() {
            let w = v.norm_sqr();
            let (z, zt) = (zs[i], zts[j]);
            o.norm += w;
            o.mean_z += w * z;
            o.mean_zt += w * zt;
            o.z2 += w * z * z;
            o.zt2 += w * zt * zt;
            o.z_zt += w * z * zt;
            e_pot += w * h.potential[[i, j]];
        }
        self.work.assign(&state.amplitudes);
        self.fft.forward(&mut self.work, FftAxis::Both)?;
        let e_kin: f64 = Zip::from(&self.work).and(&h.kinetic_spectrum).fold(0.0, |acc, a, t| acc + a.norm_sqr() * t);
        let correction = self.splitting_correction(state)?;
        let da = state.cell_area();
        o.norm *= da;
        o.mean_z *= da;
        o.mean_zt *= da;
        o.z2 *= da;
        o.zt2 *= da;
        o.z_zt *= da;
        o.energy = (e_pot + e_kin) * da;
        o.modified_energy = o.energy + correction * da;
        Ok(o)
    }

    /// dt²/24·Σ ψ*[V,[V,T]]ψ − dt²/12·Σ ψ*[T,[T,V]]ψ, with `self.work`
    /// holding ψ̂. Uses [V,[V,T]] = −ω(V_z² − V_z̃²) and, for the
    /// anti-Hermitian C = [T,V], ⟨[T,C]⟩ = 2 Re⟨Tψ|Cψ⟩.
    fn splitting_correction(&mut self, state: &WavefunctionGrid) -> Result<f64> {
        let h = self.hamiltonian;
        let omega = h.polynomial.omega;
        let [vz, vt, vzz, vtt] = &h.derivatives;
        let kz = h.grid_z.k_values();
        let kt = h.grid_zt.k_values();
        let psi = &state.amplitudes;
        let spectral = |fft: &mut Fft2, f: &dyn Fn(usize, usize) -> Complex64| -> Result<Array2<Complex64>> {
            let mut out = Array2::from_shape_fn(self.work.dim(), |(i, j)| self.work[[i, j]] * f(i, j));
            fft.inverse(&mut out, FftAxis::Both)?;
            Ok(out)
        };
        let t_psi = spectral(&mut self.fft, &|i, j| Complex64::new(h.kinetic_spectrum[[i, j]], 0.0))?;
        let dz = spectral(&mut self.fft, &|i, _| Complex64::new(0.0, kz[i]))?;
        let dt_ = spectral(&mut self.fft, &|_, j| Complex64::new(0.0, kt[j]))?;
        let mut vvt = 0.0;
        let mut ttv = 0.0;
        for ((i, j), p) in psi.indexed_iter() {
            let (gz, gt) = (vz[[i, j]], vt[[i, j]]);
            vvt += -omega * (gz * gz - gt * gt) * p.norm_sqr();
            let c_psi =
                -0.5 * omega * ((vzz[[i, j]] * p + 2.0 * gz * dz[[i, j]]) - (vtt[[i, j]] * p + 2.0 * gt * dt_[[i, j]]));
            ttv += 2.0 * (t_psi[[i, j]].conj() * c_psi).re;
        }
        let dt2 = self.dt * self.dt;
        Ok(dt2 / 24.0 * vvt - dt2 / 12.0 * ttv)
    }
}

/// Propagates `state`, calling `on_sample` at step 0 and every
/// `sample_every` steps. Returns the trajectory and the final state.
pub fn propagate_with<F>(
    mut state: WavefunctionGrid,
    hamiltonian: &IbtHamiltonian,
    options: &PropagationOptions,
    mut on_sample: F,
) -> Result<(Trajectory, WavefunctionGrid)>
where
    F: FnMut(&WavefunctionGrid, &Observables) -> Result<()>,
{
    if options.sample_every == 0 {
        return Err(TfdError::Argument("sample interval must be at least one step".into()));
    }
    if state.grid_z != hamiltonian.grid_z || state.grid_zt != hamiltonian.grid_zt {
        return Err(TfdError::Argument("state and Hamiltonian grids differ".into()));
    }
    let mut stepper = SplitStep::new(hamiltonian, options.dt)?;
    let mut traj = Trajectory::default();
    let t0 = state.time;
    let mut record = |state: &WavefunctionGrid, stepper: &mut SplitStep, traj: &mut Trajectory| -> Result<()> {
        let obs = stepper.observe(state)?;
        let initial = traj.observables.first().map_or(obs.norm, |o| o.norm);
        if (obs.norm - initial).abs() > NORM_DRIFT_LIMIT {
            return Err(TfdError::NumericalInstability(format!(
                "norm drifted from {initial:.12} to {:.12} at t = {:.3} a.u.; reduce dt or enlarge the grid",
                obs.norm, state.time
            )));
        }
        on_sample(state, &obs)?;
        traj.sample_times.push(state.time);
        traj.observables.push(obs);
        if options.keep_states {
            traj.states.push(state.clone());
        }
        Ok(())
    };
    record(&state, &mut stepper, &mut traj)?;
    for step in 1..=options.n_steps {
        stepper.step(&mut state)?;
        state.time = t0 + step as f64 * options.dt;
        if step % options.sample_every == 0 {
            record(&state, &mut stepper, &mut traj)?;
        }
    }
    Ok((traj, state))
}

pub fn propagate(
    state: WavefunctionGrid,
    hamiltonian: &IbtHamiltonian,
    options: &PropagationOptions,
) -> Result<Trajectory> {
    propagate_with(state, hamiltonian, options, |_, _| Ok(())).map(|(t, _)| t)
}

/// Split-step propagation of a single physical mode under
/// (ω/2)p² + V(z); returns |ψ|² at step 0 and every `sample_every` steps.
pub fn propagate_single_mode(
    psi0: &[Complex64],
    grid: &Grid1D,
    omega: f64,
    potential: impl Fn(f64) -> f64,
    dt: f64,
    n_steps: usize,
    sample_every: usize,
) -> Result<Vec<Vec<f64>>> {
    if psi0.len() != grid.len() || sample_every == 0 {
        return Err(TfdError::Argument("bad single-mode propagation arguments".into()));
    }
    let mut planner = rustfft::FftPlanner::new();
    let fwd = planner.plan_fft_forward(grid.len());
    let inv = planner.plan_fft_inverse(grid.len());
    let norm = 1.0 / (grid.len() as f64).sqrt();
    let half_v: Vec<Complex64> =
        grid.points().iter().map(|&z| Complex64::from_polar(1.0, -0.5 * potential(z) * dt)).collect();
    let kin: Vec<Complex64> =
        grid.k_values().iter().map(|&k| Complex64::from_polar(1.0, -0.5 * omega * k * k * dt)).collect();
    let mut psi = psi0.to_vec();
    let density = |psi: &[Complex64]| psi.iter().map(|v| v.norm_sqr()).collect::<Vec<f64>>();
    let mut out = vec![density(&psi)];
    for step in 1..=n_steps {
        psi.iter_mut().zip(&half_v).for_each(|(a, p)| *a *= p);
        fwd.process(&mut psi);
        psi.iter_mut().zip(&kin).for_each(|(a, k)| *a *= k * norm);
        inv.process(&mut psi);
        psi.iter_mut().zip(&half_v).for_each(|(a, p)| *a *= p * norm);
        if step % sample_every == 0 {
            out.push(density(&psi));
        }
    }
    Ok(out)
}

/// Powers of the four iBT-picture operators in one Weyl-ordered moment
/// ⟨{zⁱ p_zʲ}_W {z̃ᵏ p̃_zˡ}_W⟩. The tilde momentum carries the sign
/// convention p̃ = +i∂/∂z̃.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct IbtMomentOrder {
    pub z: u32,
    pub pz: u32,
    pub zt: u32,
    pub pzt: u32,
}

impl IbtMomentOrder {
    pub fn total(&self) -> u32 {
        self.z + self.pz + self.zt + self.pzt
    }
}

fn binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn check_order(total: u32, max_order: u32) -> Result<()> {
    if total > max_order {
        Err(TfdError::Argument(format!("moment order {total} exceeds the configured maximum {max_order}")))
    } else {
        Ok(())
    }
}

/// Weyl-symmetrized iBT moment. Position powers act on the grid; momentum
/// powers act as multipliers on the spectral companion.
pub fn ibt_moment(state: &WavefunctionGrid, order: IbtMomentOrder, max_order: u32) -> Result<f64> {
    check_order(order.total(), max_order)?;
    let zs = state.grid_z.points();
    let zts = state.grid_zt.points();
    let da = state.cell_area();
    if order.pz == 0 && order.pzt == 0 {
        return Ok(state.expect_position(|z, zt| z.powi(order.z as i32) * zt.powi(order.zt as i32)));
    }
    let (nz, nt) = state.amplitudes.dim();
    let mut fft = Fft2::new(nz, nt)?;
    let kz = state.grid_z.k_values();
    let kt = state.grid_zt.k_values();
    let mult = Array2::from_shape_fn((nz, nt), |(i, j)| kz[i].powi(order.pz as i32) * (-kt[j]).powi(order.pzt as i32));
    if order.z == 0 && order.zt == 0 {
        let mut f = state.amplitudes.clone();
        fft.forward(&mut f, FftAxis::Both)?;
        return Ok(Zip::from(&f).and(&mult).fold(0.0, |acc, a, m| acc + a.norm_sqr() * m) * da);
    }
    // {zⁱpʲ}_W = 2^{-i} Σ_a C(i,a) z^a pʲ z^{i−a}, per mode.
    let mut spectra = std::collections::HashMap::new();
    let mut spectrum = |a: u32, b: u32, fft: &mut Fft2| -> Result<Array2<Complex64>> {
        if let Some(s) = spectra.get(&(a, b)) {
            return Ok(Array2::clone(s));
        }
        let mut f = Array2::from_shape_fn((nz, nt), |(i, j)| {
            state.amplitudes[[i, j]] * (zs[i].powi(a as i32) * zts[j].powi(b as i32))
        });
        fft.forward(&mut f, FftAxis::Both)?;
        spectra.insert((a, b), f.clone());
        Ok(f)
    };
    let mut acc = Complex64::new(0.0, 0.0);
    for a in 0..=order.z {
        for b in 0..=order.zt {
            let left = spectrum(a, b, &mut fft)?;
            let right = spectrum(order.z - a, order.zt - b, &mut fft)?;
            let w = binomial(order.z, a) * binomial(order.zt, b);
            let inner = Zip::from(&left)
                .and(&right)
                .and(&mult)
                .fold(Complex64::new(0.0, 0.0), |s, l, r, m| s + l.conj() * r * *m);
            acc += inner * w;
        }
    }
    Ok(acc.re * da / 2f64.powi((order.z + order.zt) as i32))
}

/// Physical Weyl moment ⟨{Zⁿ Pᵐ}_W⟩ via the binomial expansion of
/// Z = cosh θ·ξ(z) + sinh θ·ξ(z̃) and P = cosh θ·ξ(p) + sinh θ·ξ(p̃) into
/// iBT moments.
pub fn physical_moment(state: &WavefunctionGrid, params: &ThermalParams, n: u32, m: u32) -> Result<f64> {
    physical_moment_with_limit(state, params, n, m, DEFAULT_MAX_MOMENT_ORDER)
}

pub fn physical_moment_with_limit(
    state: &WavefunctionGrid,
    params: &ThermalParams,
    n: u32,
    m: u32,
    max_order: u32,
) -> Result<f64> {
    check_order(n + m, max_order)?;
    let (c, s) = (params.cosh(), params.sinh());
    let et = params.theta().exp_m1();
    let off_z = -params.delta_z() * et;
    let off_p = -params.delta_p() * et;
    // Unshifted moments U[i][j] = ⟨{(cz + sz̃)^i (cp + sp̃)^j}_W⟩ for i ≤ n, j ≤ m.
    let mut total = 0.0;
    for i in 0..=n {
        for j in 0..=m {
            let weight = binomial(n, i) * binomial(m, j) * off_z.powi((n - i) as i32) * off_p.powi((m - j) as i32);
            if weight == 0.0 {
                continue;
            }
            let mut u = 0.0;
            for k in 0..=i {
                for l in 0..=j {
                    let coef =
                        binomial(i, k) * binomial(j, l) * c.powi((k + l) as i32) * s.powi((i + j - k - l) as i32);
                    if coef == 0.0 {
                        continue;
                    }
                    let order = IbtMomentOrder { z: k, pz: l, zt: i - k, pzt: j - l };
                    u += coef * ibt_moment(state, order, max_order)?;
                }
            }
            total += weight * u;
        }
    }
    Ok(total)
}

/// Physical position moments M_{n0}, n = 0..=n_max, from |Φ|².
pub fn physical_position_moments(state: &WavefunctionGrid, params: &ThermalParams, n_max: u32) -> Vec<f64> {
    let (c, s) = (params.cosh(), params.sinh());
    let zs: Vec<f64> = state.grid_z.points().iter().map(|&z| c * params.xi_z(z)).collect();
    let zts: Vec<f64> = state.grid_zt.points().iter().map(|&z| s * params.xi_z(z)).collect();
    let mut out = vec![0.0; n_max as usize + 1];
    for ((i, j), v) in state.amplitudes.indexed_iter() {
        let w = v.norm_sqr();
        let x = zs[i] + zts[j];
        let mut pw = w;
        for o in out.iter_mut() {
            *o += pw;
            pw *= x;
        }
    }
    let da = state.cell_area();
    out.iter_mut().for_each(|o| *o *= da);
    out
}

/// Physical momentum moments M_{0m}, m = 0..=m_max, from |Φ̂|².
pub fn physical_momentum_moments(state: &WavefunctionGrid, params: &ThermalParams, m_max: u32) -> Result<Vec<f64>> {
    let (nz, nt) = state.amplitudes.dim();
    let mut f = state.amplitudes.clone();
    Fft2::new(nz, nt)?.forward(&mut f, FftAxis::Both)?;
    let p = physical_momentum_grid(state, params);
    let mut out = vec![0.0; m_max as usize + 1];
    Zip::from(&f).and(&p).for_each(|a, &x| {
        let mut pw = a.norm_sqr();
        for o in out.iter_mut() {
            *o += pw;
            pw *= x;
        }
    });
    let da = state.cell_area();
    out.iter_mut().for_each(|o| *o *= da);
    Ok(out)
}

/// Physical momentum cosh θ·ξ(k_z) + sinh θ·ξ(−k_z̃) on the spectral grid.
fn physical_momentum_grid(state: &WavefunctionGrid, params: &ThermalParams) -> Array2<f64> {
    let (c, s) = (params.cosh(), params.sinh());
    let kz = state.grid_z.k_values();
    let kt = state.grid_zt.k_values();
    Array2::from_shape_fn((kz.len(), kt.len()), |(i, j)| c * params.xi_p(kz[i]) + s * params.xi_p(-kt[j]))
}

/// Table of physical Weyl moments M[n][m] for n + m ≤ `total_order`, via
/// {Zⁿ Pᵐ}_W = 2^{-n} Σ_a C(n,a) Z^a Pᵐ Z^{n−a} with Z diagonal on the grid
/// and P diagonal on the spectral grid. Entries with n + m > total_order
/// are NaN.
pub fn physical_weyl_moments(
    state: &WavefunctionGrid,
    params: &ThermalParams,
    total_order: u32,
) -> Result<Array2<f64>> {
    let n = total_order as usize;
    let (nz, nt) = state.amplitudes.dim();
    let mut fft = Fft2::new(nz, nt)?;
    let (c, s) = (params.cosh(), params.sinh());
    let zs: Vec<f64> = state.grid_z.points().iter().map(|&z| c * params.xi_z(z)).collect();
    let zts: Vec<f64> = state.grid_zt.points().iter().map(|&z| s * params.xi_z(z)).collect();
    // Spectra of Z^a Φ for a = 0..=n.
    let mut spectra = Vec::with_capacity(n + 1);
    let mut cur = state.amplitudes.clone();
    for a in 0..=n {
        if a > 0 {
            Zip::indexed(&mut cur).for_each(|(i, j), v| *v *= zs[i] + zts[j]);
        }
        let mut f = cur.clone();
        fft.forward(&mut f, FftAxis::Both)?;
        spectra.push(f);
    }
    let p = physical_momentum_grid(state, params);
    let da = state.cell_area();
    let mut out = Array2::from_elem((n + 1, n + 1), f64::NAN);
    for nn in 0..=n {
        for a in 0..=nn {
            // Σ_m conj(F[Z^aΦ]) Pᵐ F[Z^{nn−a}Φ], accumulated for all m at once.
            let left = &spectra[a];
            let right = &spectra[nn - a];
            let mmax = n - nn;
            let mut sums = vec![Complex64::new(0.0, 0.0); mmax + 1];
            Zip::from(left).and(right).and(&p).for_each(|l, r, &x| {
                let mut term = l.conj() * r;
                for s in sums.iter_mut() {
                    *s += term;
                    term *= x;
                }
            });
            let w = binomial(nn as u32, a as u32) / 2f64.powi(nn as i32);
            for (m, s) in sums.iter().enumerate() {
                let e = &mut out[[nn, m]];
                if e.is_nan() {
                    *e = 0.0;
                }
                *e += w * s.re * da;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::thermo::InverseTemperature;
    use crate::units::fs_to_au;
    use approx::assert_abs_diff_eq;

    fn zero_alpha() -> Complex64 {
        Complex64::new(0.0, 0.0)
    }

    #[test]
    fn harmonic_zero_temperature_potential_is_decoupled() {
        let polynomial = PolynomialPotential::harmonic(0.01);
        for (z, zt) in [(0.3, -1.1), (2.0, 0.5), (-3.0, 3.0)] {
            assert_abs_diff_eq!(polynomial.ibt(z, zt, 0.0), 0.005 * (z * z - zt * zt), epsilon = 1e-16);
        }
        let polynomial = PolynomialPotential { a3: 0.2, a4: 0.05, ..polynomial };
        let (z, zt) = (0.7, -1.3);
        assert_abs_diff_eq!(polynomial.ibt(z, zt, 0.0), polynomial.physical(z) - 0.005 * zt * zt, epsilon = 1e-15);
    }

    #[test]
    fn reference_potential_cross_terms_match_binomial_expansion() {
        let polynomial = PolynomialPotential::reference();
        let params = ThermalParams::from_lab_units(300.0, 200.0, zero_alpha()).unwrap();
        let (c, s) = (params.cosh(), params.sinh());
        let coef = polynomial.ibt_coefficients(params.theta());
        // Independent binomial oracle for a₃(cz+sz̃)³ + a₄(cz+sz̃)⁴.
        let choose = |n: i32, k: i32| -> f64 { (1..=k).map(|i| (n - k + i) as f64 / i as f64).product() };
        for i in 0..5 {
            for j in 0..5 {
                let mut want = 0.0;
                if i + j == 3 {
                    want += polynomial.a3 * choose(3, i as i32) * c.powi(i as i32) * s.powi(j as i32);
                }
                if i + j == 4 {
                    want += polynomial.a4 * choose(4, i as i32) * c.powi(i as i32) * s.powi(j as i32);
                }
                if (i, j) == (2, 0) {
                    want += 0.5 * polynomial.omega;
                }
                if (i, j) == (0, 2) {
                    want -= 0.5 * polynomial.omega;
                }
                assert_abs_diff_eq!(coef[i][j], want, epsilon = 1e-18);
            }
        }
        assert!(coef[2][1] > 0.0 && coef[1][2] > 0.0 && coef[1][3] > 0.0);
        // Closed form and coefficient form agree, including a shifted potential.
        let shifted = PolynomialPotential { shift: 0.4, ..polynomial };
        let coef = shifted.ibt_coefficients(params.theta());
        for (z, zt) in [(0.5, -0.25), (-2.0, 1.5), (3.0, 2.0)] {
            let poly: f64 = (0..5)
                .flat_map(|i| (0..5).map(move |j| (i, j)))
                .map(|(i, j)| coef[i][j] * f64::powi(z, i as i32) * f64::powi(zt, j as i32))
                .sum();
            assert_abs_diff_eq!(poly, shifted.ibt(z, zt, params.theta()), epsilon = 1e-14);
        }
    }

    #[test]
    fn small_grid_rejected_with_escaped_norm() {
        let params = ThermalParams::from_lab_units(300.0, 200.0, zero_alpha()).unwrap();
        let g = Grid1D::symmetric(64, 3.0).unwrap();
        let err = build_ibt_hamiltonian(&PolynomialPotential::reference(), &params, &g, &g).unwrap_err();
        assert!(matches!(err, TfdError::Config(ref m) if m.contains("escaped norm")));
    }

    #[test]
    fn initial_state_examples() {
        let g = Grid1D::symmetric(128, 10.0).unwrap();
        let t0 = ThermalParams::new(InverseTemperature::Infinite, 1e-3, zero_alpha()).unwrap();
        assert_eq!(initial_center_for_physical_mean(0.5, &t0), 0.5);
        let t300 = ThermalParams::from_lab_units(300.0, 200.0, zero_alpha()).unwrap();
        let z0 = initial_center_for_physical_mean(0.5, &t300);
        assert_abs_diff_eq!(z0, 0.242_540_301_781_038_8, epsilon = 1e-12);
        let psi = initial_state(&g, &g, z0, 1.0).unwrap();
        assert_abs_diff_eq!(psi.norm_sqr(), 1.0, epsilon = 1e-12);
        let lim = DEFAULT_MAX_MOMENT_ORDER;
        let m00 = ibt_moment(&psi, IbtMomentOrder::default(), lim).unwrap();
        assert_abs_diff_eq!(m00, 1.0, epsilon = 1e-12);
        let m1 = ibt_moment(&psi, IbtMomentOrder { z: 1, ..Default::default() }, lim).unwrap();
        assert_abs_diff_eq!(m1, z0, epsilon = 1e-12);
        let m2 = ibt_moment(&psi, IbtMomentOrder { z: 2, ..Default::default() }, lim).unwrap();
        assert_abs_diff_eq!(m2, z0 * z0 + 0.5, epsilon = 1e-12);
        let too_high = IbtMomentOrder { z: 15, pz: 6, ..Default::default() };
        assert!(ibt_moment(&psi, too_high, lim).is_err());
        assert!(initial_state(&g, &g, 0.0, 0.0).is_err());
    }

    #[test]
    fn physical_first_moment_initial_state() {
        let g = Grid1D::symmetric(128, 10.0).unwrap();
        let params = ThermalParams::from_lab_units(300.0, 200.0, zero_alpha()).unwrap();
        let z0 = initial_center_for_physical_mean(0.5, &params);
        let psi = initial_state(&g, &g, z0, 1.0).unwrap();
        let m10 = physical_moment(&psi, &params, 1, 0).unwrap();
        assert_abs_diff_eq!(m10, 0.5, epsilon = 1e-12);
        let by_parts = params.cosh() * z0 + params.sinh() * z0;
        assert_abs_diff_eq!(m10, by_parts, epsilon = 1e-12);
        // Thermal Gaussian: variance ½cosh 2θ in both position and momentum.
        let v = 0.5 * (2.0 * params.theta()).cosh();
        let m20 = physical_moment(&psi, &params, 2, 0).unwrap();
        assert_abs_diff_eq!(m20 - 0.25, v, epsilon = 1e-10);
        let m02 = physical_moment(&psi, &params, 0, 2).unwrap();
        assert_abs_diff_eq!(m02, v, epsilon = 1e-10);
    }

    #[test]
    fn zero_temperature_physical_equals_ibt() {
        let g = Grid1D::symmetric(64, 8.0).unwrap();
        let params = ThermalParams::new(InverseTemperature::Infinite, 1e-3, zero_alpha()).unwrap();
        let psi = WavefunctionGrid::from_fn(g.clone(), g.clone(), |z, zt| {
            Complex64::from_polar((-(z - 0.4).powi(2) - 0.7 * (zt + 0.2).powi(2)).exp(), 0.8 * z - 0.3 * z * zt)
        });
        let mut psi = psi;
        psi.normalize().unwrap();
        for (n, m) in [(1, 0), (2, 0), (0, 1), (0, 2), (1, 1), (2, 1)] {
            let phys = physical_moment(&psi, &params, n, m).unwrap();
            let ibt = ibt_moment(&psi, IbtMomentOrder { z: n, pz: m, ..Default::default() }, 20).unwrap();
            assert_abs_diff_eq!(phys, ibt, epsilon = 1e-12);
        }
    }

    #[test]
    fn binomial_route_matches_direct_weyl_table() {
        let g = Grid1D::symmetric(64, 9.0).unwrap();
        let alpha = Complex64::new(0.2, -0.1);
        let params = ThermalParams::from_theta(0.6, 1e-3, alpha).unwrap();
        let mut psi = WavefunctionGrid::from_fn(g.clone(), g.clone(), |z, zt| {
            Complex64::from_polar(
                (-(z - 0.3).powi(2) / 1.4 - (zt + 0.1).powi(2) / 1.1 - 0.3 * z * zt).exp(),
                0.5 * z + 0.2 * zt * zt - 0.4 * z * zt,
            )
        });
        psi.normalize().unwrap();
        let table = physical_weyl_moments(&psi, &params, 6).unwrap();
        let pos = physical_position_moments(&psi, &params, 6);
        let mom = physical_momentum_moments(&psi, &params, 6).unwrap();
        for n in 0..=6u32 {
            for m in 0..=(6 - n) {
                let direct = table[[n as usize, m as usize]];
                let binom = physical_moment(&psi, &params, n, m).unwrap();
                assert!(
                    (direct - binom).abs() < 1e-9 * (1.0 + direct.abs()),
                    "M[{n}][{m}]: table {direct} vs binomial {binom}"
                );
            }
            assert!((pos[n as usize] - table[[n as usize, 0]]).abs() < 1e-10 * (1.0 + pos[n as usize].abs()));
            assert!((mom[n as usize] - table[[0, n as usize]]).abs() < 1e-10 * (1.0 + mom[n as usize].abs()));
        }
        assert!(table[[4, 3]].is_nan());
    }

    #[test]
    fn weyl_moment_is_symmetrized() {
        // For a real Gaussian ⟨zp + pz⟩/2 = 0 while ⟨zp⟩ = i/2.
        let g = Grid1D::symmetric(64, 8.0).unwrap();
        let psi = initial_state(&g, &g, 0.7, 1.0).unwrap();
        let zp = ibt_moment(&psi, IbtMomentOrder { z: 1, pz: 1, ..Default::default() }, 20).unwrap();
        assert_abs_diff_eq!(zp, 0.0, epsilon = 1e-12);
        // With a momentum kick k₀: ⟨{zp}_W⟩ = z₀·k₀.
        let mut kicked = psi.clone();
        let zs = g.points();
        for ((i, _), v) in kicked.amplitudes.indexed_iter_mut() {
            *v *= Complex64::from_polar(1.0, 1.5 * zs[i]);
        }
        let zp = ibt_moment(&kicked, IbtMomentOrder { z: 1, pz: 1, ..Default::default() }, 20).unwrap();
        assert_abs_diff_eq!(zp, 0.7 * 1.5, epsilon = 1e-10);
        // The tilde momentum carries the opposite sign.
        let mut kicked_t = psi.clone();
        for ((_, j), v) in kicked_t.amplitudes.indexed_iter_mut() {
            *v *= Complex64::from_polar(1.0, 1.5 * zs[j]);
        }
        let pt = ibt_moment(&kicked_t, IbtMomentOrder { pzt: 1, ..Default::default() }, 20).unwrap();
        assert_abs_diff_eq!(pt, -1.5, epsilon = 1e-10);
    }

    fn harmonic_setup(n: usize) -> (IbtHamiltonian, WavefunctionGrid, f64) {
        let omega = cm1_to_hartree(200.0);
        let params = ThermalParams::new(InverseTemperature::Infinite, omega, zero_alpha()).unwrap();
        let g = Grid1D::symmetric(n, 10.0).unwrap();
        let h = build_ibt_hamiltonian(&PolynomialPotential::harmonic(omega), &params, &g, &g).unwrap();
        let psi = initial_state(&g, &g, 0.5, 1.0).unwrap();
        (h, psi, omega)
    }

    #[test]
    fn coherent_state_follows_cosine() {
        let (h, psi, omega) = harmonic_setup(128);
        let dt = fs_to_au(0.25);
        let period = 2.0 * std::f64::consts::PI / omega;
        let n_steps = (period / dt).ceil() as usize;
        let opts = PropagationOptions { dt, n_steps, sample_every: 10, keep_states: false };
        let traj = propagate(psi, &h, &opts).unwrap();
        for o in &traj.observables {
            let want = 0.5 * (omega * o.time).cos();
            assert!((o.mean_z - want).abs() < 3e-5, "t={} z={} want={}", o.time, o.mean_z, want);
            assert!((o.mean_zt - want).abs() < 3e-5, "t={} zt={} want={}", o.time, o.mean_zt, want);
            assert!((o.norm - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn split_step_is_second_order() {
        // Harmonic T = 0 oracle ⟨z⟩ = z₀ cos ωt; the splitting error is a pure phase lag.
        let (h, psi, omega) = harmonic_setup(64);
        let t_end = fs_to_au(1000.0);
        let run = |dt_fs: f64| {
            let dt = fs_to_au(dt_fs);
            let n_steps = (t_end / dt).round() as usize;
            let opts = PropagationOptions { dt, n_steps, sample_every: n_steps / 20, keep_states: false };
            let tr = propagate(psi.clone(), &h, &opts).unwrap();
            tr.observables.iter().map(|o| (o.mean_z - 0.5 * (omega * o.time).cos()).abs()).fold(0.0, f64::max)
        };
        let e1 = run(0.5);
        let e2 = run(0.25);
        let ratio = e1 / e2;
        assert!((ratio - 4.0).abs() < 0.5, "error ratio {ratio} ({e1:e} / {e2:e})");
    }

    #[test]
    fn sampling_bookkeeping() {
        let (h, psi, _) = harmonic_setup(32);
        let opts = PropagationOptions { dt: 5.0, n_steps: 20, sample_every: 5, keep_states: true };
        let mut seen = 0;
        let (traj, last) = propagate_with(psi.clone(), &h, &opts, |_, _| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, 5);
        assert_eq!(traj.sample_times, vec![0.0, 25.0, 50.0, 75.0, 100.0]);
        assert_eq!(traj.states.len(), 5);
        assert_eq!(last.time, 100.0);
        let bad = PropagationOptions { sample_every: 0, ..opts };
        assert!(propagate(psi.clone(), &h, &bad).is_err());
        let bad = PropagationOptions { dt: -1.0, ..opts };
        assert!(propagate(psi, &h, &bad).is_err());
    }
}
