//! Derivative-free simplex minimization.

#[derive(Clone, Copy, Debug)]
pub struct NelderMeadOptions {
    pub max_iterations: usize,
    /// Stop when the spread of simplex values falls below this fraction of
    /// their magnitude.
    pub rel_tolerance: f64,
    /// Absolute floor on the value spread, for objectives that reach zero.
    pub abs_tolerance: f64,
}

impl Default for NelderMeadOptions {
    fn default() -> Self {
        Self { max_iterations: 200, rel_tolerance: 1e-6, abs_tolerance: 1e-14 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Minimizes `f` from `x0` with an initial simplex offset by `steps` along
/// each axis. Ties keep the earlier vertex, so a start already at a flat
/// minimum is returned unchanged.
pub fn nelder_mead<F>(mut f: F, x0: &[f64], steps: &[f64], options: &NelderMeadOptions) -> Minimum
where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(x0.len(), steps.len(), "one step per coordinate");
    let n = x0.len();
    let mut eval = |x: &[f64]| {
        let v = f(x);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(n + 1);
    simplex.push((x0.to_vec(), eval(x0)));
    for i in 0..n {
        let mut x = x0.to_vec();
        x[i] += steps[i];
        let v = eval(&x);
        simplex.push((x, v));
    }

    let (alpha, gamma, rho, shrink) = (1.0, 2.0, 0.5, 0.5);
    let mut iterations = 0;
    let mut converged = false;
    loop {
        simplex.sort_by(|a, b| a.1.total_cmp(&b.1));
        let best = simplex[0].1;
        let worst = simplex[n].1;
        let spread = (worst - best).abs();
        if spread <= options.rel_tolerance * 0.5 * (best.abs() + worst.abs()) || spread <= options.abs_tolerance {
            converged = true;
            break;
        }
        if iterations >= options.max_iterations {
            break;
        }
        iterations += 1;

        let centroid: Vec<f64> =
            (0..n).map(|k| simplex[..n].iter().map(|(x, _)| x[k]).sum::<f64>() / n as f64).collect();
        let along = |t: f64| -> Vec<f64> { centroid.iter().zip(&simplex[n].0).map(|(c, w)| c + t * (c - w)).collect() };

        let xr = along(alpha);
        let fr = eval(&xr);
        if fr < simplex[0].1 {
            let xe = along(gamma);
            let fe = eval(&xe);
            simplex[n] = if fe < fr { (xe, fe) } else { (xr, fr) };
            continue;
        }
        if fr < simplex[n - 1].1 {
            simplex[n] = (xr, fr);
            continue;
        }
        let (xc, fc) = if fr < simplex[n].1 {
            let x = along(rho);
            let v = eval(&x);
            (x, v)
        } else {
            let x = along(-rho);
            let v = eval(&x);
            (x, v)
        };
        if fc < simplex[n].1.min(fr) {
            simplex[n] = (xc, fc);
            continue;
        }
        let x_best = simplex[0].0.clone();
        for vertex in simplex.iter_mut().skip(1) {
            let x: Vec<f64> = x_best.iter().zip(&vertex.0).map(|(b, v)| b + shrink * (v - b)).collect();
            let v = eval(&x);
            *vertex = (x, v);
        }
    }
    let (x, value) = simplex.swap_remove(0);
    Minimum { x, value, iterations, converged }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl() {
        let m = nelder_mead(
            |x| (x[0] - 1.5).powi(2) + 3.0 * (x[1] + 0.25).powi(2) + 2.0,
            &[0.0, 0.0],
            &[0.5, 0.5],
            &NelderMeadOptions { max_iterations: 500, rel_tolerance: 1e-14, abs_tolerance: 0.0 },
        );
        assert!(m.converged);
        assert!((m.x[0] - 1.5).abs() < 1e-5 && (m.x[1] + 0.25).abs() < 1e-5, "{:?}", m.x);
        assert!((m.value - 2.0).abs() < 1e-10);
    }

    #[test]
    fn rosenbrock() {
        let m = nelder_mead(
            |x| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2),
            &[-1.2, 1.0],
            &[0.1, 0.1],
            &NelderMeadOptions { max_iterations: 2000, rel_tolerance: 1e-16, abs_tolerance: 1e-20 },
        );
        assert!((m.x[0] - 1.0).abs() < 1e-4 && (m.x[1] - 1.0).abs() < 1e-4, "{:?}", m.x);
    }

    #[test]
    fn flat_start_is_kept() {
        let m = nelder_mead(|x| if x[0].abs() < 1.0 { 0.0 } else { 1.0 }, &[0.3], &[0.1], &Default::default());
        assert!(m.converged);
        assert_eq!(m.x, vec![0.3]);
        assert_eq!(m.iterations, 0);
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let opts = NelderMeadOptions { max_iterations: 3, rel_tolerance: 0.0, abs_tolerance: 0.0 };
        let m = nelder_mead(|x| (x[0] - 10.0).powi(2), &[0.0], &[1.0], &opts);
        assert!(!m.converged);
        assert_eq!(m.iterations, 3);
    }

    #[test]
    fn nan_is_treated_as_worst() {
        let m = nelder_mead(
            |x| if x[0] < 0.0 { f64::NAN } else { (x[0] - 0.5).powi(2) },
            &[1.0],
            &[0.3],
            &NelderMeadOptions { max_iterations: 300, rel_tolerance: 1e-12, abs_tolerance: 1e-16 },
        );
        assert!((m.x[0] - 0.5).abs() < 1e-4);
    }
}
