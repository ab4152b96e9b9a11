//! Synthetic multi-subject HRIR bundles from a rigid-sphere head model.
//!
//! Each subject is a sphere of radius `a` with ears on the horizontal plane
//! at azimuths `±(π/2 + δ)`. Per ear, the arrival delay follows the
//! Woodworth ray model and the magnitude follows a one-pole/one-zero head
//! shadow whose high-frequency gain falls as the incidence angle grows,
//! shaped by a per-subject spectral tilt. Responses are assembled as minimum
//! phase plus an integer interaural delay.

use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{self, Direction, HrirBundle, HrirSet};
use crate::dsp::{self, Hrir, Itd, MagnitudeSpectrum};
use crate::error::{Error, Result};

pub const SPEED_OF_SOUND: f64 = 343.0;

const SHADOW_ALPHA_MIN: f64 = 0.1;
const SHADOW_THETA_MIN: f64 = 5.0 * PI / 6.0;
const TILT_REFERENCE_HZ: f64 = 1000.0;
const TILT_LOWEST_HZ: f64 = 100.0;

/// Spherical-head parameters of one synthetic subject.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphereSubject {
    /// Meters.
    pub head_radius: f64,
    /// Ear azimuths are `±(π/2 + ear_offset)`.
    pub ear_offset: f64,
    pub tilt_db_per_octave: f64,
    pub seed: u64,
}

impl SphereSubject {
    /// Draws head radius in [0.07, 0.10] m, ear offset in ±0.05 rad and tilt
    /// in [−1, 1] dB/octave.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            head_radius: rng.random_range(0.07..=0.10),
            ear_offset: rng.random_range(-0.05..=0.05),
            tilt_db_per_octave: rng.random_range(-1.0..=1.0),
            seed,
        }
    }

    fn ear_axes(&self) -> [[f64; 3]; 2] {
        let az = FRAC_PI_2 + self.ear_offset;
        [[az.cos(), az.sin(), 0.0], [az.cos(), -az.sin(), 0.0]]
    }

    /// Incidence angle between the source direction and each ear axis.
    pub fn incidence(&self, direction: &Direction) -> [f64; 2] {
        let u = direction.unit_vector();
        self.ear_axes()
            .map(|e| (u[0] * e[0] + u[1] * e[1] + u[2] * e[2]).clamp(-1.0, 1.0).acos())
    }

    /// Woodworth arrival delay at each ear relative to the head center, in
    /// seconds: `−(a/c) cos ψ` when the ear is lit, `(a/c)(ψ − π/2)` when the
    /// wave has to wrap around the sphere.
    pub fn ear_delays(&self, direction: &Direction) -> [f64; 2] {
        let k = self.head_radius / SPEED_OF_SOUND;
        self.incidence(direction).map(|psi| {
            if psi < FRAC_PI_2 {
                -k * psi.cos()
            } else {
                k * (psi - FRAC_PI_2)
            }
        })
    }

    /// Analytic ITD in (fractional) samples, left minus right.
    pub fn itd_samples(&self, direction: &Direction, sample_rate: u32) -> f64 {
        let [l, r] = self.ear_delays(direction);
        (l - r) * f64::from(sample_rate)
    }

    /// Linear magnitude of one ear at `freq_hz` for incidence `psi`.
    pub fn ear_gain(&self, psi: f64, freq_hz: f64) -> f64 {
        let alpha = (1.0 + SHADOW_ALPHA_MIN / 2.0)
            + (1.0 - SHADOW_ALPHA_MIN / 2.0) * (psi / SHADOW_THETA_MIN * PI).cos();
        let x = PI * freq_hz * self.head_radius / SPEED_OF_SOUND;
        let shadow = ((1.0 + alpha * alpha * x * x) / (1.0 + x * x)).sqrt();
        let octaves = (freq_hz.max(TILT_LOWEST_HZ) / TILT_REFERENCE_HZ).log2();
        shadow * 10f64.powf(self.tilt_db_per_octave * octaves / 20.0)
    }

    /// One-sided magnitude spectrum with `hrir_length / 2 + 1` bins.
    pub fn magnitude(&self, direction: &Direction, sample_rate: u32, hrir_length: usize) -> Result<MagnitudeSpectrum> {
        let bins = hrir_length / 2 + 1;
        let psi = self.incidence(direction);
        let df = f64::from(sample_rate) / hrir_length as f64;
        let values = (0..bins)
            .flat_map(|f| psi.map(|p| self.ear_gain(p, f as f64 * df)))
            .collect();
        MagnitudeSpectrum::new(bins, values)
    }

    pub fn hrir(&self, direction: &Direction, sample_rate: u32, hrir_length: usize, base_delay: usize) -> Result<Hrir> {
        let mag = self.magnitude(direction, sample_rate, hrir_length)?;
        let itd = self.itd_samples(direction, sample_rate).round();
        dsp::apply_itd(&dsp::min_phase_reconstruct(&mag)?, Itd(itd), base_delay)
    }
}

/// Direction grid recipe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum GridSpec {
    /// Subdivided icosahedron (162 directions at 2 subdivisions).
    Icosphere(u32),
    Octahedron,
    /// `n` equally spaced directions on the horizontal plane.
    Horizontal(usize),
}

impl GridSpec {
    pub fn directions(&self) -> Result<Vec<Direction>> {
        Ok(match *self {
            GridSpec::Icosphere(s) => bundle::icosphere_grid(s),
            GridSpec::Octahedron => bundle::octahedron_grid(),
            GridSpec::Horizontal(n) => {
                if n == 0 {
                    return Err(Error::InvalidArgument("empty horizontal grid".into()));
                }
                (0..n)
                    .map(|i| Direction::new(2.0 * PI * i as f64 / n as f64, 0.0))
                    .collect::<Result<_>>()?
            }
        })
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridSpec::Icosphere(s) => write!(f, "icosphere:{s}"),
            GridSpec::Octahedron => write!(f, "octahedron"),
            GridSpec::Horizontal(n) => write!(f, "horizontal:{n}"),
        }
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("unknown grid spec {s:?}"));
        match s.split_once(':') {
            None if s == "octahedron" => Ok(GridSpec::Octahedron),
            Some(("icosphere", n)) => n.parse().map(GridSpec::Icosphere).map_err(|_| bad()),
            Some(("horizontal", n)) => n.parse().map(GridSpec::Horizontal).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

impl TryFrom<String> for GridSpec {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<GridSpec> for String {
    fn from(g: GridSpec) -> String {
        g.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub subjects: usize,
    pub grid: GridSpec,
    pub sample_rate: u32,
    pub hrir_length: usize,
    pub seed: u64,
    pub base_delay: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            subjects: 40,
            grid: GridSpec::Icosphere(2),
            sample_rate: 48_000,
            hrir_length: 256,
            seed: 0,
            base_delay: 0,
        }
    }
}

impl SynthConfig {
    pub fn subject_params(&self, index: usize) -> SphereSubject {
        SphereSubject::random(
            self.seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                .wrapping_add(index as u64 + 1),
        )
    }
}

pub fn subject_id(index: usize) -> String {
    format!("P{:04}", index + 1)
}

/// Builds a bundle of `config.subjects` random sphere subjects.
pub fn generate_bundle(config: &SynthConfig) -> Result<HrirBundle> {
    if config.subjects == 0 {
        return Err(Error::InvalidArgument("at least one subject is required".into()));
    }
    if config.hrir_length < 4 || !config.hrir_length.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "hrir length {} must be a power of two >= 4",
            config.hrir_length
        )));
    }
    let grid = config.grid.directions()?;
    let sets = (0..config.subjects)
        .into_par_iter()
        .map(|i| {
            let subject = config.subject_params(i);
            let hrirs = grid
                .iter()
                .map(|d| subject.hrir(d, config.sample_rate, config.hrir_length, config.base_delay))
                .collect::<Result<Vec<_>>>()?;
            HrirSet::from_hrirs(subject_id(i), config.sample_rate, &hrirs)
        })
        .collect::<Result<Vec<_>>>()?;
    HrirBundle::new(grid, sets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{estimate_itd, ItdConfig};

    fn symmetric(radius: f64) -> SphereSubject {
        SphereSubject {
            head_radius: radius,
            ear_offset: 0.0,
            tilt_db_per_octave: 0.3,
            seed: 0,
        }
    }

    #[test]
    fn median_plane_has_zero_itd() {
        let s = symmetric(0.09);
        let front = Direction::new(0.0, 0.0).unwrap();
        assert_eq!(s.itd_samples(&front, 48_000).round(), 0.0);
        let h = s.hrir(&front, 48_000, 256, 0).unwrap();
        assert_eq!(estimate_itd(&h, 48_000, &ItdConfig::default()).unwrap().0, 0.0);
    }

    #[test]
    fn lateral_itd_matches_woodworth() {
        let s = symmetric(0.0875);
        let left = Direction::new(FRAC_PI_2, 0.0).unwrap();
        let itd = s.itd_samples(&left, 48_000);
        let woodworth = 48_000.0 * (0.0875 / 343.0) * (FRAC_PI_2 + 1.0);
        assert!((itd + woodworth).abs() < 1e-9);
        assert_eq!(itd.round(), -31.0);
    }

    #[test]
    fn mirror_symmetry() {
        let s = symmetric(0.08);
        for (az, el) in [(0.4, 0.1), (2.0, -0.5), (1.2, 0.9)] {
            let a = s.hrir(&Direction::new(az, el).unwrap(), 48_000, 128, 0).unwrap();
            let b = s.hrir(&Direction::new(-az, el).unwrap(), 48_000, 128, 0).unwrap();
            for t in 0..128 {
                assert!((a[0][t] - b[1][t]).abs() < 1e-6);
                assert!((a[1][t] - b[0][t]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn equal_seeds_are_bit_identical() {
        let cfg = SynthConfig {
            subjects: 3,
            grid: GridSpec::Icosphere(0),
            hrir_length: 64,
            seed: 11,
            ..Default::default()
        };
        assert_eq!(generate_bundle(&cfg).unwrap(), generate_bundle(&cfg).unwrap());
        let other = SynthConfig { seed: 12, ..cfg.clone() };
        assert_ne!(generate_bundle(&cfg).unwrap(), generate_bundle(&other).unwrap());
    }

    #[test]
    fn parameter_ranges() {
        for seed in 0..200 {
            let s = SphereSubject::random(seed);
            assert!((0.07..=0.10).contains(&s.head_radius));
            assert!(s.ear_offset.abs() <= 0.05);
            assert!(s.tilt_db_per_octave.abs() <= 1.0);
        }
    }

    #[test]
    fn contralateral_ear_is_shadowed() {
        let s = symmetric(0.09);
        assert!(s.ear_gain(PI, 8000.0) < 0.3 * s.ear_gain(0.0, 8000.0));
        // the shadow is a high-frequency effect
        assert!((s.ear_gain(PI, 50.0) / s.ear_gain(0.0, 50.0) - 1.0).abs() < 0.05);
    }

    #[test]
    fn grid_spec_parsing() {
        assert_eq!("icosphere:2".parse::<GridSpec>().unwrap(), GridSpec::Icosphere(2));
        assert_eq!("octahedron".parse::<GridSpec>().unwrap(), GridSpec::Octahedron);
        assert_eq!("horizontal:8".parse::<GridSpec>().unwrap().directions().unwrap().len(), 8);
        assert!("cube".parse::<GridSpec>().is_err());
        assert!(generate_bundle(&SynthConfig { subjects: 0, ..Default::default() }).is_err());
    }
}
