//! Densities and Wigner surfaces rebuilt from finite moment sets through
//! Gauss–Hermite expansions with negative-norm-minimizing hyperparameters.

use ndarray::Array2;

use crate::error::{Result, TfdError};
use crate::grid::Grid1D;
use crate::optimize::{nelder_mead, NelderMeadOptions};
use crate::rdm::{Density1D, WignerGrid};

/// Tolerated |M₀₀ − 1| before a moment set is rejected.
const NORMALIZATION_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct MomentTable {
    position: Vec<f64>,
    momentum: Option<Vec<f64>>,
    cross: Option<Array2<f64>>,
}

impl MomentTable {
    /// Position moments M_{n0}, n = 0..=n_max.
    pub fn from_position(position: Vec<f64>) -> Result<Self> {
        Self::build(position, None, None)
    }

    pub fn from_position_momentum(position: Vec<f64>, momentum: Vec<f64>) -> Result<Self> {
        Self::build(position, Some(momentum), None)
    }

    /// Weyl-ordered M[n][m]; entries beyond the computed total order may be
    /// NaN. Pure moments are read from the first column and row.
    pub fn from_cross(cross: Array2<f64>) -> Result<Self> {
        let position: Vec<f64> = cross.column(0).iter().copied().take_while(|v| v.is_finite()).collect();
        let momentum: Vec<f64> = cross.row(0).iter().copied().take_while(|v| v.is_finite()).collect();
        Self::build(position, Some(momentum), Some(cross))
    }

    fn build(mut position: Vec<f64>, mut momentum: Option<Vec<f64>>, mut cross: Option<Array2<f64>>) -> Result<Self> {
        let m00 = *position.first().ok_or_else(|| TfdError::Argument("empty moment table".into()))?;
        if (m00 - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(TfdError::Argument(format!("zeroth moment {m00} is not unity")));
        }
        let check_even = |m: &[f64], label: &str| -> Result<()> {
            for (n, v) in m.iter().enumerate().step_by(2) {
                if !(*v > 0.0) {
                    return Err(TfdError::Argument(format!("even {label} moment of order {n} is {v}")));
                }
            }
            Ok(())
        };
        position.iter_mut().for_each(|v| *v /= m00);
        check_even(&position, "position")?;
        if let Some(m) = momentum.as_mut() {
            if m.is_empty() || (m[0] - m00).abs() > NORMALIZATION_TOLERANCE {
                return Err(TfdError::Argument("momentum moments disagree on normalization".into()));
            }
            m.iter_mut().for_each(|v| *v /= m00);
            check_even(m, "momentum")?;
        }
        if let Some(c) = cross.as_mut() {
            c.mapv_inplace(|v| v / m00);
        }
        Ok(Self { position, momentum, cross })
    }

    pub fn position_moments(&self) -> &[f64] {
        &self.position
    }

    pub fn momentum_moments(&self) -> Option<&[f64]> {
        self.momentum.as_deref()
    }

    pub fn cross_moments(&self) -> Option<&Array2<f64>> {
        self.cross.as_ref()
    }

    /// Highest available position-moment order.
    pub fn n_max(&self) -> usize {
        self.position.len() - 1
    }

    /// The momentum moments as a position-style table.
    pub fn momentum_table(&self) -> Option<MomentTable> {
        self.momentum.clone().map(|m| MomentTable { position: m, momentum: None, cross: None })
    }

    /// Largest total order for which every cross moment is finite.
    pub fn cross_order(&self) -> Option<usize> {
        let c = self.cross.as_ref()?;
        let n = c.nrows().min(c.ncols());
        (0..n).take_while(|&t| (0..=t).all(|a| c[[a, t - a]].is_finite())).last()
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

fn factorial(n: usize) -> f64 {
    (1..=n).map(|k| k as f64).product()
}

/// Moments of the distribution translated by μ:
/// M_n(μ) = Σ_k C(n, k) μ^k M_{n−k}.
pub fn shift_moments(moments: &[f64], mu: f64) -> Vec<f64> {
    (0..moments.len()).map(|n| (0..=n).map(|k| binomial(n, k) * mu.powi(k as i32) * moments[n - k]).sum()).collect()
}

/// Two-axis translation of a cross-moment table, over the entries with
/// n + m ≤ `order`.
pub fn shift_moments_2d(table: &Array2<f64>, mu_z: f64, mu_p: f64, order: usize) -> Array2<f64> {
    let mut out = Array2::from_elem(table.dim(), f64::NAN);
    for n in 0..=order.min(table.nrows() - 1) {
        for m in 0..=(order - n).min(table.ncols() - 1) {
            let mut s = 0.0;
            for k in 0..=n {
                for l in 0..=m {
                    s += binomial(n, k)
                        * binomial(m, l)
                        * mu_z.powi(k as i32)
                        * mu_p.powi(l as i32)
                        * table[[n - k, m - l]];
                }
            }
            out[[n, m]] = s;
        }
    }
    out
}

/// ln of ∫zⁿ e^{−z²/(2σ²)} Hₙ(z/(√2σ)) dz = √π σ^{n+1} n! 2^{(n+1)/2}.
fn ln_diagonal_integral(n: usize, sigma: f64) -> f64 {
    0.5 * std::f64::consts::PI.ln()
        + (n + 1) as f64 * sigma.ln()
        + libm::lgamma((n + 1) as f64)
        + 0.5 * (n + 1) as f64 * std::f64::consts::LN_2
}

/// √(2ⁿ n!), the norm that turns Hₙ into a bounded Hermite function.
fn hermite_scale(n: usize) -> f64 {
    (0.5 * (n as f64 * std::f64::consts::LN_2 + libm::lgamma((n + 1) as f64))).exp()
}

/// Coefficients d_k of ρ(z) = e^{−z²/(2σ²)} Σ_k d_k H_k(z/(√2σ)) matching
/// the centered moments M_0..M_n by the lower-triangular recursion
/// d_n = M_n / (√π σ^{n+1} n! 2^{(n+1)/2}) − Σ_{m≥1} d_{n−2m} / (4^m m!).
pub fn hermite_coefficients(moments: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(TfdError::Argument(format!("width must be positive, got {sigma}")));
    }
    let mut d = Vec::with_capacity(moments.len());
    for (n, &m) in moments.iter().enumerate() {
        let mut v = m / ln_diagonal_integral(n, sigma).exp();
        for j in 1..=n / 2 {
            v -= d[n - 2 * j] / (4f64.powi(j as i32) * factorial(j));
        }
        d.push(v);
    }
    Ok(d)
}

/// Bounded Hermite functions e^{−u²} H_k(u)/√(2^k k!) for k = 0..len.
fn hermite_functions(u: f64, out: &mut [f64]) {
    let g = (-u * u).exp();
    if out.is_empty() {
        return;
    }
    out[0] = g;
    if out.len() > 1 {
        out[1] = std::f64::consts::SQRT_2 * u * g;
    }
    for k in 1..out.len() - 1 {
        let kf = k as f64;
        out[k + 1] = (2.0 / (kf + 1.0)).sqrt() * u * out[k] - (kf / (kf + 1.0)).sqrt() * out[k - 1];
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HermiteExpansion {
    /// d_k for the distribution translated by μ.
    pub coefficients: Vec<f64>,
    pub sigma: f64,
    pub mu: f64,
}

impl HermiteExpansion {
    /// Expansion of the moments translated by `mu`, truncated at `order`.
    pub fn fit(moments: &[f64], sigma: f64, mu: f64, order: usize) -> Result<Self> {
        if order >= moments.len() {
            return Err(TfdError::Argument(format!(
                "order {order} needs {} moments, only {} available",
                order + 1,
                moments.len()
            )));
        }
        let shifted = shift_moments(&moments[..=order], mu);
        Ok(Self { coefficients: hermite_coefficients(&shifted, sigma)?, sigma, mu })
    }

    pub fn order(&self) -> usize {
        self.coefficients.len() - 1
    }

    /// ρ(z) = e^{−u²} Σ d_k H_k(u), u = (z + μ)/(√2σ).
    pub fn evaluate_on(&self, points: &[f64]) -> Vec<f64> {
        let scaled: Vec<f64> = self.coefficients.iter().enumerate().map(|(k, d)| d * hermite_scale(k)).collect();
        let mut h = vec![0.0; scaled.len()];
        let s = std::f64::consts::SQRT_2 * self.sigma;
        points
            .iter()
            .map(|&z| {
                hermite_functions((z + self.mu) / s, &mut h);
                scaled.iter().zip(&h).map(|(c, v)| c * v).sum()
            })
            .collect()
    }

    pub fn evaluate(&self, z: f64) -> f64 {
        self.evaluate_on(&[z])[0]
    }
}

/// ∫max(0, −ρ)dz by rectangle quadrature.
pub fn negative_norm(values: &[f64], dx: f64) -> f64 {
    values.iter().map(|v| (-v).max(0.0)).sum::<f64>() * dx
}

/// Window mass deficits below this are quadrature round-off.
const LEAK_FLOOR: f64 = 1e-10;

/// Negative norm on the window plus |1 − ∫ρ| over it. An expansion of unit
/// total mass can only lose window mass by placing structure, and with it
/// any negative lobes, outside the window.
pub fn window_score(values: &[f64], dx: f64) -> f64 {
    let leak = (1.0 - values.iter().sum::<f64>() * dx).abs();
    negative_norm(values, dx) + (leak - LEAK_FLOOR).max(0.0)
}

#[derive(Clone, Copy, Debug)]
pub struct ReconstructionOptions {
    /// Highest expansion order tried first.
    pub n_max: usize,
    pub neg_norm_threshold: f64,
    /// Lowest order the sweep descends to.
    pub min_order: usize,
    pub optimizer: NelderMeadOptions,
}

impl Default for ReconstructionOptions {
    fn default() -> Self {
        Self { n_max: 20, neg_norm_threshold: 1e-4, min_order: 2, optimizer: NelderMeadOptions::default() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReconstructionDiagnostics {
    pub order: usize,
    pub sigma: f64,
    pub mu: f64,
    pub neg_norm_score: f64,
    /// Score at or below the threshold.
    pub converged: bool,
    pub optimizer_converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct DensityReconstruction {
    pub density: Density1D,
    pub expansion: HermiteExpansion,
    pub diagnostics: ReconstructionDiagnostics,
}

/// Sweeps the expansion order down from `n_max`; at each order minimizes
/// the negative norm over (ln σ, μ) from σ = √(M₂ − M₁²), μ = −M₁, and stops
/// at the first order whose score meets the threshold. Without such an
/// order, returns the lowest-score candidate flagged as not converged.
pub fn reconstruct_density(
    moments: &[f64],
    grid: &Grid1D,
    options: &ReconstructionOptions,
) -> Result<DensityReconstruction> {
    let n_max = options.n_max.min(moments.len().saturating_sub(1));
    if n_max < 2 {
        return Err(TfdError::Argument("reconstruction needs moments through second order".into()));
    }
    let (m1, m2) = (moments[1] / moments[0], moments[2] / moments[0]);
    let var = m2 - m1 * m1;
    if !(var > 0.0) {
        return Err(TfdError::Argument(format!("moments imply a non-positive variance {var}")));
    }
    let sigma0 = var.sqrt();
    let mu0 = -m1;
    let points = grid.points();
    let dx = grid.dx();

    let mut best: Option<(ReconstructionDiagnostics, HermiteExpansion)> = None;
    for order in (options.min_order.min(n_max)..=n_max).rev() {
        let score = |x: &[f64]| -> f64 {
            match HermiteExpansion::fit(moments, x[0].exp(), x[1], order) {
                Ok(e) => window_score(&e.evaluate_on(&points), dx),
                Err(_) => f64::INFINITY,
            }
        };
        let min = nelder_mead(score, &[sigma0.ln(), mu0], &[0.1, 0.1 * sigma0], &options.optimizer);
        let expansion = HermiteExpansion::fit(moments, min.x[0].exp(), min.x[1], order)?;
        let diag = ReconstructionDiagnostics {
            order,
            sigma: expansion.sigma,
            mu: expansion.mu,
            neg_norm_score: min.value,
            converged: min.value <= options.neg_norm_threshold,
            optimizer_converged: min.converged,
            iterations: min.iterations,
        };
        let better = best.as_ref().is_none_or(|(b, _)| diag.neg_norm_score < b.neg_norm_score);
        if diag.converged || better {
            best = Some((diag, expansion));
        }
        if diag.converged {
            break;
        }
    }
    let (diagnostics, expansion) = best.expect("at least one order is tried");
    if !diagnostics.converged {
        log::warn!(
            "moment reconstruction did not reach negative norm {:e}; best {:.3e} at order {}",
            options.neg_norm_threshold,
            diagnostics.neg_norm_score,
            diagnostics.order
        );
    }
    let density = Density1D::from_unnormalized(grid.clone(), expansion.evaluate_on(&points))?;
    Ok(DensityReconstruction { density, expansion, diagnostics })
}

/// Coefficients d_{nm} of
/// W(z, p) = e^{−u²−v²} Σ d_{nm} H_n(u) H_m(v), u = z/(√2σ_z), v = p/(√2σ_p),
/// for centered Weyl moments with n ≤ `order_z`, m ≤ `order_p` and
/// n + m ≤ `total_order`; other entries are zero.
pub fn wigner_coefficients(
    table: &Array2<f64>,
    sigma_z: f64,
    sigma_p: f64,
    order_z: usize,
    order_p: usize,
    total_order: usize,
) -> Result<Array2<f64>> {
    for s in [sigma_z, sigma_p] {
        if !(s > 0.0) || !s.is_finite() {
            return Err(TfdError::Argument(format!("width must be positive, got {s}")));
        }
    }
    let mut d = Array2::zeros((order_z + 1, order_p + 1));
    for n in 0..=order_z {
        for m in 0..=order_p.min(total_order.saturating_sub(n)) {
            if n + m > total_order {
                continue;
            }
            let moment = *table
                .get([n, m])
                .filter(|v| v.is_finite())
                .ok_or_else(|| TfdError::Argument(format!("cross moment M[{n}][{m}] unavailable")))?;
            let mut v = moment / (ln_diagonal_integral(n, sigma_z) + ln_diagonal_integral(m, sigma_p)).exp();
            for k in 0..=n / 2 {
                for l in 0..=m / 2 {
                    if k + l == 0 {
                        continue;
                    }
                    v -= d[[n - 2 * k, m - 2 * l]] / (4f64.powi((k + l) as i32) * factorial(k) * factorial(l));
                }
            }
            d[[n, m]] = v;
        }
    }
    Ok(d)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WignerExpansion {
    pub coefficients: Array2<f64>,
    pub sigma_z: f64,
    pub sigma_p: f64,
    pub mu_z: f64,
    pub mu_p: f64,
}

impl WignerExpansion {
    pub fn fit(
        table: &Array2<f64>,
        hyper: [f64; 4],
        order_z: usize,
        order_p: usize,
        total_order: usize,
    ) -> Result<Self> {
        let [mu_z, mu_p, sigma_z, sigma_p] = hyper;
        let shifted = shift_moments_2d(table, mu_z, mu_p, total_order);
        let coefficients = wigner_coefficients(&shifted, sigma_z, sigma_p, order_z, order_p, total_order)?;
        Ok(Self { coefficients, sigma_z, sigma_p, mu_z, mu_p })
    }

    fn basis(points: &[f64], mu: f64, sigma: f64, order: usize) -> Array2<f64> {
        let s = std::f64::consts::SQRT_2 * sigma;
        let mut out = Array2::zeros((points.len(), order + 1));
        let mut h = vec![0.0; order + 1];
        for (i, &x) in points.iter().enumerate() {
            hermite_functions((x + mu) / s, &mut h);
            for k in 0..=order {
                out[[i, k]] = h[k] * hermite_scale(k);
            }
        }
        out
    }

    /// W(z_i, p_j) on the product grid.
    pub fn evaluate_on(&self, grid_z: &Grid1D, grid_p: &Grid1D) -> Array2<f64> {
        let (oz, op) = self.coefficients.dim();
        let bz = Self::basis(&grid_z.points(), self.mu_z, self.sigma_z, oz - 1);
        let bp = Self::basis(&grid_p.points(), self.mu_p, self.sigma_p, op - 1);
        bz.dot(&self.coefficients).dot(&bp.t())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WignerDiagnostics {
    pub order_z: usize,
    pub order_p: usize,
    pub total_order: usize,
    /// Summed L1 mismatch of both marginals against their targets.
    pub marginal_mismatch: f64,
    pub optimizer_converged: bool,
    pub iterations: usize,
}

#[derive(Clone, Debug)]
pub struct WignerReconstruction {
    pub wigner: WignerGrid,
    pub expansion: WignerExpansion,
    pub diagnostics: WignerDiagnostics,
}

fn marginal_mismatch(values: &Array2<f64>, grid_z: &Grid1D, grid_p: &Grid1D, rho_z: &[f64], rho_p: &[f64]) -> f64 {
    let (dz, dp) = (grid_z.dx(), grid_p.dx());
    let mz: f64 = values.rows().into_iter().zip(rho_z).map(|(r, t)| (r.sum() * dp - t).abs()).sum::<f64>() * dz;
    let mp: f64 = values.columns().into_iter().zip(rho_p).map(|(c, t)| (c.sum() * dz - t).abs()).sum::<f64>() * dp;
    mz + mp
}

/// Fits a 2D Hermite expansion to the cross moments, starting from the
/// hyperparameters of the position and momentum reconstructions and
/// optimizing {μ_z, μ_p, ln σ_z, ln σ_p} on the L1 mismatch of both
/// marginals. Per-axis orders follow the 1D reconstructions; the total
/// order is capped by `n_max` and the available cross moments.
pub fn reconstruct_wigner(
    moments: &MomentTable,
    n_max: usize,
    marginals: (&DensityReconstruction, &DensityReconstruction),
    optimizer: &NelderMeadOptions,
) -> Result<WignerReconstruction> {
    let table = moments
        .cross_moments()
        .ok_or_else(|| TfdError::Argument("Wigner reconstruction needs cross moments".into()))?;
    let available = moments.cross_order().unwrap_or(0);
    let (rz, rp) = marginals;
    let total = n_max.min(available);
    let order_z = rz.diagnostics.order.min(total);
    let order_p = rp.diagnostics.order.min(total);
    let (grid_z, grid_p) = (&rz.density.grid, &rp.density.grid);
    let objective = |x: &[f64]| -> f64 {
        let hyper = [x[0], x[1], x[2].exp(), x[3].exp()];
        match WignerExpansion::fit(table, hyper, order_z, order_p, total) {
            Ok(e) => marginal_mismatch(
                &e.evaluate_on(grid_z, grid_p),
                grid_z,
                grid_p,
                &rz.density.values,
                &rp.density.values,
            ),
            Err(_) => f64::INFINITY,
        }
    };
    let (ez, ep) = (&rz.expansion, &rp.expansion);
    let x0 = [ez.mu, ep.mu, ez.sigma.ln(), ep.sigma.ln()];
    let steps = [0.05 * ez.sigma, 0.05 * ep.sigma, 0.05, 0.05];
    let min = nelder_mead(objective, &x0, &steps, optimizer);
    let hyper = [min.x[0], min.x[1], min.x[2].exp(), min.x[3].exp()];
    let expansion = WignerExpansion::fit(table, hyper, order_z, order_p, total)?;
    let values = expansion.evaluate_on(grid_z, grid_p);
    let diagnostics = WignerDiagnostics {
        order_z,
        order_p,
        total_order: total,
        marginal_mismatch: min.value,
        optimizer_converged: min.converged,
        iterations: min.iterations,
    };
    if !min.converged {
        log::warn!("Wigner reconstruction stopped after {} iterations, mismatch {:.3e}", min.iterations, min.value);
    }
    let wigner = WignerGrid { grid_z: grid_z.clone(), grid_p: grid_p.clone(), values, max_imaginary: 0.0 };
    Ok(WignerReconstruction { wigner, expansion, diagnostics })
}
