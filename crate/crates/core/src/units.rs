//! Conversions between laboratory units and Hartree atomic units (ħ = 1).

/// Hartree per wavenumber (cm⁻¹).
pub const HARTREE_PER_CM1: f64 = 1.0 / 219_474.631_363_2;

/// Boltzmann constant in hartree per kelvin.
pub const KB_HARTREE_PER_K: f64 = 3.166_811_563e-6;

/// Atomic time units per femtosecond.
pub const AU_TIME_PER_FS: f64 = 41.341_373_335;

pub fn cm1_to_hartree(wavenumber: f64) -> f64 {
    wavenumber * HARTREE_PER_CM1
}

pub fn fs_to_au(t_fs: f64) -> f64 {
    t_fs * AU_TIME_PER_FS
}

pub fn au_to_fs(t_au: f64) -> f64 {
    t_au / AU_TIME_PER_FS
}
