//! The thermalized anharmonic-oscillator experiment: configuration,
//! orchestration of propagation and per-sample analysis, CSV/JSON emission,
//! run comparison, and the analytic squeezing and Bogoliubov self-checks.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Result, TfdError};
use crate::grid::{Field2D, Grid1D};
use crate::moments::{
    reconstruct_density, reconstruct_wigner, DensityReconstruction, MomentTable, ReconstructionOptions,
    WignerReconstruction,
};
use crate::optimize::NelderMeadOptions;
use crate::propagator::{
    build_ibt_hamiltonian, initial_center_for_physical_mean, initial_state, physical_momentum_moments,
    physical_position_moments, physical_weyl_moments, propagate_with, IbtHamiltonian, Observables, PolynomialPotential,
    PropagationOptions,
};
use crate::rdm::{
    exact_1rdm_on, exact_density_on, uncorrelated_density_on, wigner_from_1rdm, Density1D, DensityMatrix1D, WignerGrid,
};
use crate::thermo::{
    bt_matrix, g_of_theta, shift_eta, shift_xi, squeeze_gaussian, theta_from_condition, GaussianSqueezeModel,
    InverseTemperature, Statistics, ThermalParams,
};
use crate::units::{cm1_to_hartree, fs_to_au};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TemperatureSetting {
    Zero,
    Kelvin(f64),
}

impl TemperatureSetting {
    pub fn inverse_temperature(&self) -> Result<InverseTemperature> {
        match *self {
            TemperatureSetting::Zero => Ok(InverseTemperature::Infinite),
            TemperatureSetting::Kelvin(t) => InverseTemperature::from_kelvin(t),
        }
    }
}

impl FromStr for TemperatureSetting {
    type Err = TfdError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("zero") {
            return Ok(Self::Zero);
        }
        let t: f64 =
            s.parse().map_err(|_| TfdError::Config(format!("temperature must be \"zero\" or kelvin, got {s:?}")))?;
        if t == 0.0 {
            Ok(Self::Zero)
        } else if t > 0.0 && t.is_finite() {
            Ok(Self::Kelvin(t))
        } else {
            Err(TfdError::Config(format!("temperature must be non-negative, got {t}")))
        }
    }
}

impl std::fmt::Display for TemperatureSetting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Zero => write!(f, "zero"),
            Self::Kelvin(t) => write!(f, "{t}"),
        }
    }
}

/// How the iBT initial center z₀ is chosen.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Z0Rule {
    /// Place the physical mean at the given value for every temperature.
    FixedPhysical(f64),
    Explicit(f64),
}

impl FromStr for Z0Rule {
    type Err = TfdError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || TfdError::Config(format!("z0_rule must be fixed_physical(v) or explicit(v), got {s:?}"));
        let (name, rest) = s.split_once('(').ok_or_else(bad)?;
        let value: f64 = rest.strip_suffix(')').ok_or_else(bad)?.trim().parse().map_err(|_| bad())?;
        if !value.is_finite() {
            return Err(bad());
        }
        match name.trim() {
            "fixed_physical" => Ok(Self::FixedPhysical(value)),
            "explicit" => Ok(Self::Explicit(value)),
            _ => Err(bad()),
        }
    }
}

impl std::fmt::Display for Z0Rule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::FixedPhysical(v) => write!(f, "fixed_physical({v})"),
            Self::Explicit(v) => write!(f, "explicit({v})"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EmitKind {
    DensityExact,
    DensityUncorr,
    DensityMoment,
    Rdm,
    Wigner,
    Observables,
    SqueezeDemo,
    BtSelfcheck,
}

impl EmitKind {
    pub const ALL: [EmitKind; 8] = [
        Self::DensityExact,
        Self::DensityUncorr,
        Self::DensityMoment,
        Self::Rdm,
        Self::Wigner,
        Self::Observables,
        Self::SqueezeDemo,
        Self::BtSelfcheck,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Self::DensityExact => "density_exact",
            Self::DensityUncorr => "density_uncorr",
            Self::DensityMoment => "density_moment",
            Self::Rdm => "rdm",
            Self::Wigner => "wigner",
            Self::Observables => "observables",
            Self::SqueezeDemo => "squeeze_demo",
            Self::BtSelfcheck => "bt_selfcheck",
        }
    }

    fn needs_propagation(&self) -> bool {
        !matches!(self, Self::SqueezeDemo | Self::BtSelfcheck)
    }
}

impl FromStr for EmitKind {
    type Err = TfdError;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| TfdError::Config(format!("unknown emit kind {s:?}")))
    }
}

/// Parses a comma-separated emit list.
pub fn parse_emit_set(s: &str) -> Result<BTreeSet<EmitKind>> {
    s.split(',').filter(|p| !p.trim().is_empty()).map(EmitKind::from_str).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub omega_cm1: f64,
    pub a3_au: f64,
    pub a4_au: f64,
    pub temperature_k: TemperatureSetting,
    pub alpha_re: f64,
    pub alpha_im: f64,
    pub z0_rule: Z0Rule,
    /// Width parameter w of the initial exp(−(z − z₀)²/(2w²)) factors.
    pub initial_width: f64,
    pub grid_n: usize,
    pub grid_halfwidth: f64,
    pub dt_fs: f64,
    pub t_total_fs: f64,
    pub sample_every_fs: f64,
    /// Interval between 1-RDM/Wigner evaluations; a multiple of the sample interval.
    pub wigner_every_fs: f64,
    pub n_max_moments: usize,
    pub neg_norm_threshold: f64,
    /// Spectral refinement of Φ before bilinear interpolation.
    pub interp_refinement: usize,
    pub emit: BTreeSet<EmitKind>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::reference(TemperatureSetting::Kelvin(300.0))
    }
}

impl ExperimentConfig {
    /// 200 cm⁻¹ quartic oscillator started at physical mean 0.5, 0.25 fs
    /// steps for 1 ps, sampled every 10 fs. Zero temperature uses a 256²
    /// grid over ±12; finite temperatures use 512² over ±20.
    pub fn reference(temperature: TemperatureSetting) -> Self {
        let (grid_n, grid_halfwidth, interp_refinement) = match temperature {
            TemperatureSetting::Zero => (256, 12.0, 8),
            TemperatureSetting::Kelvin(_) => (512, 20.0, 8),
        };
        Self {
            omega_cm1: 200.0,
            a3_au: 7.35e-5,
            a4_au: 7.35e-6,
            temperature_k: temperature,
            alpha_re: 0.0,
            alpha_im: 0.0,
            z0_rule: Z0Rule::FixedPhysical(0.5),
            initial_width: 1.0,
            grid_n,
            grid_halfwidth,
            dt_fs: 0.25,
            t_total_fs: 1000.0,
            sample_every_fs: 10.0,
            wigner_every_fs: 100.0,
            n_max_moments: 20,
            neg_norm_threshold: 1e-4,
            interp_refinement,
            emit: [
                EmitKind::Observables,
                EmitKind::DensityExact,
                EmitKind::DensityUncorr,
                EmitKind::DensityMoment,
                EmitKind::Wigner,
            ]
            .into_iter()
            .collect(),
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<f64> {
            v.trim().parse::<f64>().map_err(|_| TfdError::Config(format!("{key}: expected a number, got {v:?}")))
        };
        let count = |v: &str| -> Result<usize> {
            v.trim().parse::<usize>().map_err(|_| TfdError::Config(format!("{key}: expected a count, got {v:?}")))
        };
        match key {
            "omega_cm1" => self.omega_cm1 = num(value)?,
            "a3_au" => self.a3_au = num(value)?,
            "a4_au" => self.a4_au = num(value)?,
            "temperature_K" => self.temperature_k = value.parse()?,
            "alpha_re" => self.alpha_re = num(value)?,
            "alpha_im" => self.alpha_im = num(value)?,
            "z0_rule" => self.z0_rule = value.parse()?,
            "initial_width" => self.initial_width = num(value)?,
            "grid_n" => self.grid_n = count(value)?,
            "grid_halfwidth" => self.grid_halfwidth = num(value)?,
            "dt_fs" => self.dt_fs = num(value)?,
            "t_total_fs" => self.t_total_fs = num(value)?,
            "sample_every_fs" => self.sample_every_fs = num(value)?,
            "wigner_every_fs" => self.wigner_every_fs = num(value)?,
            "n_max_moments" => self.n_max_moments = count(value)?,
            "neg_norm_threshold" => self.neg_norm_threshold = num(value)?,
            "interp_refinement" => self.interp_refinement = count(value)?,
            "emit" => self.emit = parse_emit_set(value)?,
            _ => return Err(TfdError::Config(format!("unknown configuration key {key:?}"))),
        }
        Ok(())
    }

    /// Parses `key = value` lines over the reference defaults; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| TfdError::Config(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| TfdError::Config(format!("line {}: {}", lineno + 1, strip_prefix(&e))))?;
        }
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| TfdError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical `key = value` rendering; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let emit: Vec<&str> = self.emit.iter().map(|k| k.name()).collect();
        let mut s = String::new();
        let pairs: [(&str, String); 18] = [
            ("omega_cm1", self.omega_cm1.to_string()),
            ("a3_au", self.a3_au.to_string()),
            ("a4_au", self.a4_au.to_string()),
            ("temperature_K", self.temperature_k.to_string()),
            ("alpha_re", self.alpha_re.to_string()),
            ("alpha_im", self.alpha_im.to_string()),
            ("z0_rule", self.z0_rule.to_string()),
            ("initial_width", self.initial_width.to_string()),
            ("grid_n", self.grid_n.to_string()),
            ("grid_halfwidth", self.grid_halfwidth.to_string()),
            ("dt_fs", self.dt_fs.to_string()),
            ("t_total_fs", self.t_total_fs.to_string()),
            ("sample_every_fs", self.sample_every_fs.to_string()),
            ("wigner_every_fs", self.wigner_every_fs.to_string()),
            ("n_max_moments", self.n_max_moments.to_string()),
            ("neg_norm_threshold", self.neg_norm_threshold.to_string()),
            ("interp_refinement", self.interp_refinement.to_string()),
            ("emit", emit.join(",")),
        ];
        for (k, v) in pairs {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("omega_cm1", self.omega_cm1),
            ("initial_width", self.initial_width),
            ("grid_halfwidth", self.grid_halfwidth),
            ("dt_fs", self.dt_fs),
            ("t_total_fs", self.t_total_fs),
            ("sample_every_fs", self.sample_every_fs),
            ("wigner_every_fs", self.wigner_every_fs),
            ("neg_norm_threshold", self.neg_norm_threshold),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(TfdError::Config(format!("{name} must be positive and finite, got {v}")));
            }
        }
        for (name, v) in
            [("a3_au", self.a3_au), ("a4_au", self.a4_au), ("alpha_re", self.alpha_re), ("alpha_im", self.alpha_im)]
        {
            if !v.is_finite() {
                return Err(TfdError::Config(format!("{name} must be finite, got {v}")));
            }
        }
        if self.grid_n < 8 || !self.grid_n.is_power_of_two() {
            return Err(TfdError::Config(format!("grid_n must be a power of two of at least 8, got {}", self.grid_n)));
        }
        if self.n_max_moments < 2 {
            return Err(TfdError::Config(format!("n_max_moments must be at least 2, got {}", self.n_max_moments)));
        }
        if self.interp_refinement == 0 || !self.interp_refinement.is_power_of_two() {
            return Err(TfdError::Config(format!(
                "interp_refinement must be a power of two, got {}",
                self.interp_refinement
            )));
        }
        whole_multiple("t_total_fs", self.t_total_fs, "dt_fs", self.dt_fs)?;
        whole_multiple("sample_every_fs", self.sample_every_fs, "dt_fs", self.dt_fs)?;
        whole_multiple("wigner_every_fs", self.wigner_every_fs, "sample_every_fs", self.sample_every_fs)?;
        if self.emit.is_empty() {
            return Err(TfdError::Config("emit set is empty".into()));
        }
        Ok(())
    }
}

fn strip_prefix(e: &TfdError) -> String {
    match e {
        TfdError::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

fn whole_multiple(name: &str, value: f64, unit_name: &str, unit: f64) -> Result<usize> {
    let ratio = value / unit;
    let n = ratio.round();
    if n < 1.0 || (ratio - n).abs() > 1e-9 * ratio.max(1.0) {
        return Err(TfdError::Config(format!("{name} = {value} is not a whole multiple of {unit_name} = {unit}")));
    }
    Ok(n as usize)
}

/// Parameters resolved to atomic units.
#[derive(Clone, Debug, Serialize)]
pub struct ResolvedParameters {
    pub omega_hartree: f64,
    /// None at zero temperature.
    pub beta_per_hartree: Option<f64>,
    pub theta: f64,
    pub delta_z: f64,
    pub delta_p: f64,
    pub z0: f64,
    pub dt_au: f64,
    pub n_steps: usize,
    pub sample_stride: usize,
    pub wigner_stride: usize,
    pub grid_n: usize,
    pub grid_x_min: f64,
    pub grid_dx: f64,
    pub escaped_norm_estimate: f64,
    pub interp_refinement: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleDiagnostics {
    pub t_fs: f64,
    pub norm: f64,
    pub energy_hartree: f64,
    pub modified_energy_hartree: f64,
    pub norm_raw: f64,
    pub norm_raw_uncorr: f64,
    pub neg_norm_score: f64,
    pub moment_order: usize,
    pub moment_converged: bool,
    /// Negative mass removed from the moment density before writing.
    pub clamp_mass: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct WignerDiagnostics {
    pub t_fs: f64,
    pub max_imaginary: f64,
    /// max |∫W dp − ρ(z|z)|.
    pub marginal_residual: f64,
    pub reconstruction_mismatch: f64,
    pub reconstruction_converged: bool,
    pub momentum_order: usize,
    pub momentum_neg_norm: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunManifest {
    pub code_version: String,
    pub status: String,
    pub error: Option<String>,
    pub config: String,
    pub resolved: Option<ResolvedParameters>,
    pub wall_time_s: f64,
    pub files: Vec<String>,
    pub samples: Vec<SampleDiagnostics>,
    pub wigner: Vec<WignerDiagnostics>,
    pub non_converged: usize,
}

impl RunManifest {
    fn new(config: &ExperimentConfig) -> Self {
        Self {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            status: "running".into(),
            error: None,
            config: config.to_text(),
            resolved: None,
            wall_time_s: 0.0,
            files: Vec::new(),
            samples: Vec::new(),
            wigner: Vec::new(),
            non_converged: 0,
        }
    }

    fn write(&self, dir: &Path) -> Result<()> {
        let file = BufWriter::new(File::create(dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(file, self).map_err(|e| TfdError::Io(e.into()))
    }
}

/// Densities and reconstruction for one sampled time.
#[derive(Clone, Debug)]
pub struct SampleResult {
    pub t_fs: f64,
    pub observables: Observables,
    pub exact: Density1D,
    pub uncorrelated: Density1D,
    pub moment: DensityReconstruction,
    pub position_moments: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct WignerResult {
    pub t_fs: f64,
    /// From the exact 1-RDM.
    pub exact: WignerGrid,
    pub rdm: DensityMatrix1D,
    pub reconstruction: WignerReconstruction,
    pub momentum: DensityReconstruction,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub manifest: RunManifest,
    pub samples: Vec<SampleResult>,
    pub wigner: Vec<WignerResult>,
}

impl RunOutcome {
    pub fn non_converged(&self) -> usize {
        self.manifest.non_converged
    }
}

/// A validated, fully resolved experiment ready to run.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub params: ThermalParams,
    pub grid: Grid1D,
    pub hamiltonian: IbtHamiltonian,
    pub resolved: ResolvedParameters,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let omega = cm1_to_hartree(config.omega_cm1);
        let beta = config.temperature_k.inverse_temperature().map_err(as_config)?;
        let params =
            ThermalParams::new(beta, omega, Complex64::new(config.alpha_re, config.alpha_im)).map_err(as_config)?;
        let grid = Grid1D::symmetric(config.grid_n, config.grid_halfwidth).map_err(as_config)?;
        let polynomial = PolynomialPotential { omega, a3: config.a3_au, a4: config.a4_au, shift: params.delta_z() };
        let hamiltonian = build_ibt_hamiltonian(&polynomial, &params, &grid, &grid)?;
        let z0 = match config.z0_rule {
            Z0Rule::FixedPhysical(m) => initial_center_for_physical_mean(m, &params),
            Z0Rule::Explicit(v) => v,
        };
        let dt_au = fs_to_au(config.dt_fs);
        let resolved = ResolvedParameters {
            omega_hartree: omega,
            beta_per_hartree: match beta {
                InverseTemperature::Infinite => None,
                InverseTemperature::Finite(b) => Some(b),
            },
            theta: params.theta(),
            delta_z: params.delta_z(),
            delta_p: params.delta_p(),
            z0,
            dt_au,
            n_steps: whole_multiple("t_total_fs", config.t_total_fs, "dt_fs", config.dt_fs)?,
            sample_stride: whole_multiple("sample_every_fs", config.sample_every_fs, "dt_fs", config.dt_fs)?,
            wigner_stride: whole_multiple(
                "wigner_every_fs",
                config.wigner_every_fs,
                "sample_every_fs",
                config.sample_every_fs,
            )?,
            grid_n: config.grid_n,
            grid_x_min: grid.x_min(),
            grid_dx: grid.dx(),
            escaped_norm_estimate: crate::propagator::escaped_norm_estimate(&params, polynomial.shift, &grid, &grid),
            interp_refinement: if params.theta() == 0.0 { 1 } else { config.interp_refinement },
        };
        Ok(Self { config, params, grid, hamiltonian, resolved })
    }

    pub fn reconstruction_options(&self) -> ReconstructionOptions {
        ReconstructionOptions {
            n_max: self.config.n_max_moments,
            neg_norm_threshold: self.config.neg_norm_threshold,
            ..Default::default()
        }
    }

    /// Spectrally refined copy of `state` used by the interpolating estimators.
    pub fn refine(&self, state: &crate::WavefunctionGrid) -> Result<crate::WavefunctionGrid> {
        state.refine_spectral(self.resolved.interp_refinement)
    }

    /// Exact, uncorrelated and moment-reconstructed densities of one state.
    pub fn analyze(
        &self,
        state: &crate::WavefunctionGrid,
        t_fs: f64,
        observables: Observables,
    ) -> Result<SampleResult> {
        self.analyze_refined(state, &self.refine(state)?, t_fs, observables)
    }

    /// [`Self::analyze`] with the refined state supplied.
    pub fn analyze_refined(
        &self,
        state: &crate::WavefunctionGrid,
        fine: &crate::WavefunctionGrid,
        t_fs: f64,
        observables: Observables,
    ) -> Result<SampleResult> {
        let exact = exact_density_on(fine, &self.grid, &self.params)?;
        let uncorrelated = uncorrelated_density_on(fine, &self.grid, &self.params)?;
        let position_moments = physical_position_moments(state, &self.params, self.config.n_max_moments as u32);
        let table = MomentTable::from_position(position_moments.clone())?;
        let moment = reconstruct_density(table.position_moments(), &self.grid, &self.reconstruction_options())?;
        Ok(SampleResult { t_fs, observables, exact, uncorrelated, moment, position_moments })
    }

    /// Exact Wigner function from the 1-RDM and its moment reconstruction.
    pub fn analyze_wigner(&self, state: &crate::WavefunctionGrid, sample: &SampleResult) -> Result<WignerResult> {
        self.analyze_wigner_refined(state, &self.refine(state)?, sample)
    }

    pub fn analyze_wigner_refined(
        &self,
        state: &crate::WavefunctionGrid,
        fine: &crate::WavefunctionGrid,
        sample: &SampleResult,
    ) -> Result<WignerResult> {
        let rho = exact_1rdm_on(fine, &self.grid, &self.params)?;
        let exact = wigner_from_1rdm(&rho)?;
        let n = self.config.n_max_moments as u32;
        let table = MomentTable::from_cross(physical_weyl_moments(state, &self.params, n)?)?;
        let opts = self.reconstruction_options();
        let momentum = reconstruct_density(&physical_momentum_moments(state, &self.params, n)?, &exact.grid_p, &opts)?;
        let wigner_opts = NelderMeadOptions { abs_tolerance: 1e-10, ..opts.optimizer };
        let reconstruction =
            reconstruct_wigner(&table, self.config.n_max_moments, (&sample.moment, &momentum), &wigner_opts)?;
        Ok(WignerResult { t_fs: sample.t_fs, exact, rdm: rho, reconstruction, momentum })
    }

    /// Propagates and analyzes every sample; writes artifacts when `out_dir` is given.
    pub fn run(&self, out_dir: Option<&Path>) -> Result<RunOutcome> {
        let started = Instant::now();
        let mut manifest = RunManifest::new(&self.config);
        manifest.resolved = Some(self.resolved.clone());
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir)?;
            manifest.write(dir)?;
        }
        let result = self.run_inner(out_dir, &mut manifest);
        manifest.wall_time_s = started.elapsed().as_secs_f64();
        match &result {
            Ok(_) => manifest.status = "completed".into(),
            Err(e) => {
                manifest.status = "failed".into();
                manifest.error = Some(e.to_string());
            }
        }
        if let Some(dir) = out_dir {
            manifest.write(dir)?;
        }
        let (samples, wigner) = result?;
        Ok(RunOutcome { manifest, samples, wigner })
    }

    fn run_inner(
        &self,
        out_dir: Option<&Path>,
        manifest: &mut RunManifest,
    ) -> Result<(Vec<SampleResult>, Vec<WignerResult>)> {
        let emit = &self.config.emit;
        if let Some(dir) = out_dir {
            if emit.contains(&EmitKind::BtSelfcheck) {
                let report = bt_check(&self.config)?;
                write_json(&dir.join("bt_check.json"), &report)?;
                manifest.files.push("bt_check.json".into());
            }
            if emit.contains(&EmitKind::SqueezeDemo) {
                manifest.files.extend(squeeze_demo(&self.config, dir)?.files);
            }
        }
        if !emit.iter().any(|k| k.needs_propagation()) {
            return Ok((Vec::new(), Vec::new()));
        }

        let mut writers = Writers::open(out_dir, emit, &self.grid, &mut manifest.files)?;
        let state0 = initial_state(&self.grid, &self.grid, self.resolved.z0, self.config.initial_width)?;
        let options = PropagationOptions {
            dt: self.resolved.dt_au,
            n_steps: self.resolved.n_steps,
            sample_every: self.resolved.sample_stride,
            keep_states: false,
        };
        let mut samples = Vec::new();
        let mut wigners = Vec::new();
        let mut index = 0usize;
        let want_wigner = emit.contains(&EmitKind::Wigner) || emit.contains(&EmitKind::Rdm);
        propagate_with(state0, &self.hamiltonian, &options, |state, obs| {
            let t_fs = (index * self.resolved.sample_stride) as f64 * self.config.dt_fs;
            let fine = self.refine(state)?;
            let sample = self.analyze_refined(state, &fine, t_fs, *obs)?;
            let clamp_mass = writers.write_sample(&sample)?;
            let d = &sample.moment.diagnostics;
            if !d.converged {
                manifest.non_converged += 1;
            }
            manifest.samples.push(SampleDiagnostics {
                t_fs,
                norm: obs.norm,
                energy_hartree: obs.energy,
                modified_energy_hartree: obs.modified_energy,
                norm_raw: sample.exact.norm_raw,
                norm_raw_uncorr: sample.uncorrelated.norm_raw,
                neg_norm_score: d.neg_norm_score,
                moment_order: d.order,
                moment_converged: d.converged,
                clamp_mass,
            });
            if want_wigner && index.is_multiple_of(self.resolved.wigner_stride) {
                let w = self.analyze_wigner_refined(state, &fine, &sample)?;
                if let Some(dir) = out_dir {
                    if emit.contains(&EmitKind::Wigner) {
                        let name = format!("wigner_t{}.csv", time_label(t_fs));
                        write_matrix(
                            &dir.join(&name),
                            &w.exact.grid_z.points(),
                            &w.exact.grid_p.points(),
                            &w.exact.values,
                        )?;
                        manifest.files.push(name);
                        let name = format!("wigner_moment_t{}.csv", time_label(t_fs));
                        let r = &w.reconstruction.wigner;
                        write_matrix(&dir.join(&name), &r.grid_z.points(), &r.grid_p.points(), &r.values)?;
                        manifest.files.push(name);
                    }
                    if emit.contains(&EmitKind::Rdm) {
                        let name = format!("rdm2_diag_t{}.csv", time_label(t_fs));
                        let pts = self.grid.points();
                        write_matrix(&dir.join(&name), &pts, &pts, &state.probability().values)?;
                        manifest.files.push(name);
                        let name = format!("rdm1_diag_t{}.csv", time_label(t_fs));
                        write_rows(
                            &dir.join(&name),
                            &["z", "rho"],
                            pts.iter().zip(&w.rdm.diagonal()).map(|(a, b)| vec![*a, *b]),
                        )?;
                        manifest.files.push(name);
                    }
                }
                let rd = &w.reconstruction.diagnostics;
                let converged = rd.optimizer_converged && w.momentum.diagnostics.converged;
                if !converged {
                    manifest.non_converged += 1;
                }
                let marginal_residual =
                    w.exact.z_marginal().iter().zip(w.rdm.diagonal()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                manifest.wigner.push(WignerDiagnostics {
                    t_fs,
                    max_imaginary: w.exact.max_imaginary,
                    marginal_residual,
                    reconstruction_mismatch: rd.marginal_mismatch,
                    reconstruction_converged: converged,
                    momentum_order: w.momentum.diagnostics.order,
                    momentum_neg_norm: w.momentum.diagnostics.neg_norm_score,
                });
                wigners.push(w);
            }
            samples.push(sample);
            index += 1;
            Ok(())
        })?;
        writers.flush()?;
        Ok((samples, wigners))
    }
}

fn as_config(e: TfdError) -> TfdError {
    match e {
        TfdError::Config(_) => e,
        other => TfdError::Config(strip_prefix(&other)),
    }
}

/// Formats with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn time_label(t_fs: f64) -> String {
    if t_fs.fract() == 0.0 {
        format!("{:04}fs", t_fs as i64)
    } else {
        format!("{t_fs}fs")
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(file, value).map_err(|e| TfdError::Io(e.into()))
}

fn write_rows(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{}", header.join(","))?;
    for row in rows {
        writeln!(w, "{}", row.iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Row 1: first-axis grid, row 2: second-axis grid, then one row per
/// first-axis point.
fn write_matrix(path: &Path, rows_axis: &[f64], cols_axis: &[f64], values: &Array2<f64>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let line = |v: &mut dyn Iterator<Item = f64>| v.map(fmt_f64).collect::<Vec<_>>().join(",");
    writeln!(w, "{}", line(&mut rows_axis.iter().copied()))?;
    writeln!(w, "{}", line(&mut cols_axis.iter().copied()))?;
    for row in values.rows() {
        writeln!(w, "{}", line(&mut row.iter().copied()))?;
    }
    w.flush()?;
    Ok(())
}

/// Nonnegative, unit-integral copy of a density for output, with the
/// negative mass that was removed.
pub fn clamp_for_output(d: &Density1D) -> (Vec<f64>, f64) {
    let dx = d.grid.dx();
    let removed = d.values.iter().map(|v| (-v).max(0.0)).sum::<f64>() * dx;
    let mut out: Vec<f64> = d.values.iter().map(|v| v.max(0.0)).collect();
    let total = out.iter().sum::<f64>() * dx;
    if total > 0.0 {
        out.iter_mut().for_each(|v| *v /= total);
    }
    (out, removed)
}

const OBSERVABLE_COLUMNS: [&str; 10] = [
    "t_fs",
    "mean_exact",
    "mean_uncorr",
    "mean_moment",
    "var_exact",
    "var_uncorr",
    "var_moment",
    "norm_raw",
    "neg_norm_score",
    "moment_order",
];

struct Writers {
    observables: Option<BufWriter<File>>,
    exact: Option<BufWriter<File>>,
    uncorr: Option<BufWriter<File>>,
    moment: Option<BufWriter<File>>,
}

impl Writers {
    fn open(dir: Option<&Path>, emit: &BTreeSet<EmitKind>, grid: &Grid1D, files: &mut Vec<String>) -> Result<Self> {
        let mut open = |kind: EmitKind, name: &str, header: String| -> Result<Option<BufWriter<File>>> {
            match dir {
                Some(d) if emit.contains(&kind) => {
                    let mut w = BufWriter::new(File::create(d.join(name))?);
                    writeln!(w, "{header}")?;
                    files.push(name.to_string());
                    Ok(Some(w))
                }
                _ => Ok(None),
            }
        };
        let grid_header = std::iter::once("t_fs".to_string())
            .chain(grid.points().into_iter().map(fmt_f64))
            .collect::<Vec<_>>()
            .join(",");
        Ok(Self {
            observables: open(EmitKind::Observables, "observables.csv", OBSERVABLE_COLUMNS.join(","))?,
            exact: open(EmitKind::DensityExact, "density_exact.csv", grid_header.clone())?,
            uncorr: open(EmitKind::DensityUncorr, "density_uncorr.csv", grid_header.clone())?,
            moment: open(EmitKind::DensityMoment, "density_moment.csv", grid_header)?,
        })
    }

    /// Writes one sample and returns the negative mass clamped from the moment density.
    fn write_sample(&mut self, s: &SampleResult) -> Result<f64> {
        let (moment_values, clamp_mass) = clamp_for_output(&s.moment.density);
        let d = &s.moment.diagnostics;
        if let Some(w) = self.observables.as_mut() {
            let row = [
                fmt_f64(s.t_fs),
                fmt_f64(s.exact.mean()),
                fmt_f64(s.uncorrelated.mean()),
                fmt_f64(s.moment.density.mean()),
                fmt_f64(s.exact.variance()),
                fmt_f64(s.uncorrelated.variance()),
                fmt_f64(s.moment.density.variance()),
                fmt_f64(s.exact.norm_raw),
                fmt_f64(d.neg_norm_score),
                d.order.to_string(),
            ];
            writeln!(w, "{}", row.join(","))?;
        }
        let row =
            |t: f64, v: &[f64]| std::iter::once(t).chain(v.iter().copied()).map(fmt_f64).collect::<Vec<_>>().join(",");
        if let Some(w) = self.exact.as_mut() {
            writeln!(w, "{}", row(s.t_fs, &clamp_for_output(&s.exact).0))?;
        }
        if let Some(w) = self.uncorr.as_mut() {
            writeln!(w, "{}", row(s.t_fs, &clamp_for_output(&s.uncorrelated).0))?;
        }
        if let Some(w) = self.moment.as_mut() {
            writeln!(w, "{}", row(s.t_fs, &moment_values))?;
        }
        Ok(clamp_mass)
    }

    fn flush(&mut self) -> Result<()> {
        for w in [&mut self.observables, &mut self.exact, &mut self.uncorr, &mut self.moment].into_iter().flatten() {
            w.flush()?;
        }
        Ok(())
    }
}

/// A density time series read back from CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct DensitySeries {
    pub points: Vec<f64>,
    pub times: Vec<f64>,
    pub rows: Vec<Vec<f64>>,
}

impl DensitySeries {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| TfdError::Argument(format!("cannot open {}: {e}", path.display())))?;
        let mut lines = BufReader::new(file).lines();
        let header = lines.next().ok_or_else(|| TfdError::Parse(format!("{} is empty", path.display())))??;
        let mut cells = header.split(',');
        if cells.next().map(str::trim) != Some("t_fs") {
            return Err(TfdError::Parse(format!("{} lacks the t_fs grid header", path.display())));
        }
        let parse = |c: &str| {
            c.trim().parse::<f64>().map_err(|_| TfdError::Parse(format!("bad number {c:?} in {}", path.display())))
        };
        let points = cells.map(parse).collect::<Result<Vec<_>>>()?;
        let mut times = Vec::new();
        let mut rows = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let values = line.split(',').map(parse).collect::<Result<Vec<_>>>()?;
            if values.len() != points.len() + 1 {
                return Err(TfdError::Parse(format!("row length mismatch in {}", path.display())));
            }
            times.push(values[0]);
            rows.push(values[1..].to_vec());
        }
        Ok(Self { points, times, rows })
    }

    fn spacing(&self) -> f64 {
        if self.points.len() > 1 {
            self.points[1] - self.points[0]
        } else {
            1.0
        }
    }

    fn moments(&self, row: &[f64]) -> (f64, f64) {
        let dx = self.spacing();
        let mean: f64 = self.points.iter().zip(row).map(|(z, v)| z * v).sum::<f64>() * dx;
        let var: f64 = self.points.iter().zip(row).map(|(z, v)| (z - mean).powi(2) * v).sum::<f64>() * dx;
        (mean, var)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DeviationRow {
    pub t_fs: f64,
    pub l1: f64,
    pub max_abs: f64,
    pub mean_a: f64,
    pub mean_b: f64,
    pub var_a: f64,
    pub var_b: f64,
}

impl DeviationRow {
    pub fn variance_relative_deviation(&self) -> f64 {
        (self.var_b - self.var_a).abs() / self.var_a.abs()
    }
}

/// Per-time deviations between two density series on identical grids and times.
pub fn compare_series(a: &DensitySeries, b: &DensitySeries) -> Result<Vec<DeviationRow>> {
    let same_grid = a.points.len() == b.points.len()
        && a.points.iter().zip(&b.points).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0));
    if !same_grid {
        return Err(TfdError::Argument("density series live on different grids".into()));
    }
    if a.times.len() != b.times.len() || a.times.iter().zip(&b.times).any(|(x, y)| (x - y).abs() > 1e-9) {
        return Err(TfdError::Argument("density series have different time axes".into()));
    }
    let dx = a.spacing();
    Ok(a.rows
        .iter()
        .zip(&b.rows)
        .zip(&a.times)
        .map(|((ra, rb), &t)| {
            let (mean_a, var_a) = a.moments(ra);
            let (mean_b, var_b) = b.moments(rb);
            DeviationRow {
                t_fs: t,
                l1: ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).sum::<f64>() * dx,
                max_abs: ra.iter().zip(rb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max),
                mean_a,
                mean_b,
                var_a,
                var_b,
            }
        })
        .collect())
}

/// One comparison result per density file pair.
#[derive(Clone, Debug)]
pub struct Comparison {
    pub label: String,
    pub rows: Vec<DeviationRow>,
}

/// Compares two density CSV files, or every `density_*.csv` present in
/// both of two run directories.
pub fn compare(a: &Path, b: &Path) -> Result<Vec<Comparison>> {
    let pairs: Vec<(String, PathBuf, PathBuf)> = if a.is_dir() && b.is_dir() {
        let mut names: Vec<String> = fs::read_dir(a)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.starts_with("density_") && n.ends_with(".csv") && b.join(n).is_file())
            .collect();
        names.sort();
        if names.is_empty() {
            return Err(TfdError::Argument("run directories share no density files".into()));
        }
        names.into_iter().map(|n| (n.clone(), a.join(&n), b.join(&n))).collect()
    } else if a.is_file() && b.is_file() {
        let label = format!("{} vs {}", a.display(), b.display());
        vec![(label, a.to_path_buf(), b.to_path_buf())]
    } else {
        return Err(TfdError::Argument("compare expects two run directories or two density files".into()));
    };
    pairs
        .into_iter()
        .map(|(label, pa, pb)| {
            let rows = compare_series(&DensitySeries::read(&pa)?, &DensitySeries::read(&pb)?)?;
            Ok(Comparison { label, rows })
        })
        .collect()
}

pub fn write_comparison(path: &Path, comparisons: &[Comparison]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    render_comparison(&mut w, comparisons)?;
    w.flush()?;
    Ok(())
}

pub fn render_comparison(w: &mut dyn Write, comparisons: &[Comparison]) -> Result<()> {
    writeln!(w, "series,t_fs,l1,max_abs,mean_a,mean_b,var_a,var_b,var_rel_dev")?;
    for c in comparisons {
        for r in &c.rows {
            let values =
                [r.t_fs, r.l1, r.max_abs, r.mean_a, r.mean_b, r.var_a, r.var_b, r.variance_relative_deviation()];
            writeln!(w, "{},{}", c.label, values.map(fmt_f64).join(","))?;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct SqueezePanel {
    pub name: String,
    pub file: String,
    pub delta: f64,
    pub shift: f64,
    pub theta: f64,
    /// e^{θ}[δ − Δ(1 − e^{−θ})].
    pub transformed_center: f64,
    /// Grid centroid along the physical axis.
    pub centroid_z: f64,
    pub integral: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SqueezeReport {
    pub sigma0: f64,
    pub panels: Vec<SqueezePanel>,
    #[serde(skip)]
    pub files: Vec<String>,
}

/// Initial-state width and center used by the squeezing panels.
pub const SQUEEZE_SIGMA0: f64 = std::f64::consts::FRAC_1_SQRT_2;
pub const SQUEEZE_DELTA: f64 = 1.0;

/// The isotropic iBT Gaussian before the transform, after it with an
/// unshifted oscillator, and after it with the oscillator shifted to the
/// Gaussian's center. Writes one CSV per panel plus `squeeze_report.json`.
pub fn squeeze_demo(config: &ExperimentConfig, out_dir: &Path) -> Result<SqueezeReport> {
    let params = ThermalParams::new(
        config.temperature_k.inverse_temperature().map_err(as_config)?,
        cm1_to_hartree(config.omega_cm1),
        Complex64::new(0.0, 0.0),
    )
    .map_err(as_config)?;
    let grid = Grid1D::symmetric(config.grid_n, config.grid_halfwidth).map_err(as_config)?;
    fs::create_dir_all(out_dir)?;
    let theta = params.theta();
    let cases = [("untransformed", 0.0, 0.0), ("unshifted", theta, 0.0), ("shifted", theta, SQUEEZE_DELTA)];
    let mut report = SqueezeReport { sigma0: SQUEEZE_SIGMA0, panels: Vec::new(), files: Vec::new() };
    for (name, th, shift) in cases {
        let model = GaussianSqueezeModel { sigma0: SQUEEZE_SIGMA0, delta: SQUEEZE_DELTA, shift, theta: th };
        let field: Field2D = squeeze_gaussian(&model, &grid, &grid)?;
        let file = format!("squeeze_{name}.csv");
        let pts = grid.points();
        write_matrix(&out_dir.join(&file), &pts, &pts, &field.values)?;
        let integral = field.integral();
        let (cz, _) = field.centroid();
        report.files.push(file.clone());
        report.panels.push(SqueezePanel {
            name: name.into(),
            file,
            delta: SQUEEZE_DELTA,
            shift,
            theta: th,
            transformed_center: model.transformed_center(),
            centroid_z: cz,
            integral,
        });
    }
    write_json(&out_dir.join("squeeze_report.json"), &report)?;
    report.files.push("squeeze_report.json".into());
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct BtCheckReport {
    pub theta_boson: f64,
    pub theta_fermion: f64,
    pub angles_checked: usize,
    /// Boson residuals are relative to cosh 2θ.
    pub max_isometry_residual_boson: f64,
    pub max_isometry_residual_fermion: f64,
    pub max_dual_residual: f64,
    pub max_determinant_error: f64,
    pub xi_eta_samples: usize,
    pub max_xi_eta_residual: f64,
    pub g_at_zero: f64,
    pub passed: bool,
}

impl BtCheckReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain numeric report")
    }
}

/// Two-mode BT algebra at deterministic sample points and the mixing angles
/// of the configured temperature.
pub fn bt_check(config: &ExperimentConfig) -> Result<BtCheckReport> {
    let beta = config.temperature_k.inverse_temperature().map_err(as_config)?;
    let omega = cm1_to_hartree(config.omega_cm1);
    let theta_boson = theta_from_condition(Statistics::Boson, beta, omega)?;
    let theta_fermion = theta_from_condition(Statistics::Fermion, beta, omega)?;
    let angles: Vec<f64> = (0..=400).map(|i| -3.0 + 6.0 * i as f64 / 400.0).collect();
    let (mut iso_b, mut iso_f, mut dual, mut det) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for &t in &angles {
        let b = bt_matrix(Statistics::Boson, t);
        let f = bt_matrix(Statistics::Fermion, t);
        let scale = (2.0 * t).cosh();
        iso_b = iso_b.max(b.isometry_residual() / scale);
        iso_f = iso_f.max(f.isometry_residual());
        dual = dual.max(b.dual_isometry_residual() / scale).max(f.dual_isometry_residual());
        det = det.max((b.determinant() - 1.0).abs() / scale).max((f.determinant() - 1.0).abs());
    }
    let mut xi_eta = 0.0f64;
    let mut samples = 0;
    for i in 0..100 {
        for j in 0..100 {
            let x = -10.0 + 20.0 * i as f64 / 99.0;
            let theta = 2.0 * j as f64 / 99.0;
            let shift = 0.37 * (i as f64 - j as f64) / 10.0;
            let back = shift_xi((-theta).exp() * shift_eta(theta.exp() * x, shift, theta), shift, theta);
            xi_eta = xi_eta.max((back - x).abs() / x.abs().max(1.0));
            samples += 1;
        }
    }
    let g0 = g_of_theta(0.0);
    let passed = iso_b < 1e-12 && iso_f < 1e-12 && dual < 1e-12 && det < 1e-12 && xi_eta < 1e-12 && g0 == -1.0;
    Ok(BtCheckReport {
        theta_boson,
        theta_fermion,
        angles_checked: angles.len(),
        max_isometry_residual_boson: iso_b,
        max_isometry_residual_fermion: iso_f,
        max_dual_residual: dual,
        max_determinant_error: det,
        xi_eta_samples: samples,
        max_xi_eta_residual: xi_eta,
        g_at_zero: g0,
        passed,
    })
}

/// Byte-compares every CSV present in `a` against the same file in `b`.
pub fn outputs_identical(a: &Path, b: &Path) -> Result<Vec<String>> {
    let mut differing = Vec::new();
    let mut names: Vec<String> = fs::read_dir(a)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    for n in names {
        let same = match (fs::read(a.join(&n)), fs::read(b.join(&n))) {
            (Ok(x), Ok(y)) => x == y,
            _ => false,
        };
        if !same {
            differing.push(n);
        }
    }
    Ok(differing)
}
