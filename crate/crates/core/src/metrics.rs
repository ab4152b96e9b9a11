//! Log-spectral distortion, ILD and ITD errors, and the ε-insensitive MAE.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bundle::{HrirSet, MeasurementSubset};
use crate::dsp::{self, Hrir, ItdConfig, MagnitudeSpectrum};
use crate::error::{Error, Result};

/// Log-spectral distortion in dB: the RMS over bins of the dB log-ratio,
/// computed per channel and averaged over both channels.
pub fn lsd(a_star: &MagnitudeSpectrum, a: &MagnitudeSpectrum) -> Result<f64> {
    if a_star.bins() != a.bins() {
        return Err(Error::Shape(format!(
            "LSD of {} bins against {} bins",
            a_star.bins(),
            a.bins()
        )));
    }
    if let Some(v) = a_star.values().iter().chain(a.values()).find(|v| **v <= 0.0) {
        return Err(Error::invariant("strictly positive magnitude", format!("value {v}")));
    }
    let to_db = |m: &MagnitudeSpectrum| m.values().iter().map(|v| 20.0 * v.log10()).collect::<Vec<_>>();
    Ok(lsd_db(&to_db(a_star), &to_db(a)))
}

/// [`lsd`] on spectra already in dB, both laid out `[bin][channel]`.
pub fn lsd_db(a_star_db: &[f64], a_db: &[f64]) -> f64 {
    debug_assert_eq!(a_star_db.len(), a_db.len());
    let bins = a_db.len() / 2;
    let mut sq = [0.0f64; 2];
    for (i, (s, p)) in a_star_db.iter().zip(a_db).enumerate() {
        let d = p - s;
        sq[i % 2] += d * d;
    }
    0.5 * sq.iter().map(|s| (s / bins as f64).sqrt()).sum::<f64>()
}

/// `max(|τ* − τ| − ε, 0)`.
pub fn mae_eps(tau_star: f64, tau: f64, eps: f64) -> f64 {
    ((tau_star - tau).abs() - eps).max(0.0)
}

fn ild_from_energies(left: f64, right: f64) -> Result<f64> {
    if left <= 0.0 || right <= 0.0 {
        return Err(Error::invariant(
            "non-zero channel energy",
            format!("energies ({left}, {right})"),
        ));
    }
    Ok(10.0 * (left / right).log10())
}

/// Full-band ILD in dB, `20 log10(rms_left / rms_right)`.
pub fn ild(hrir: &Hrir) -> Result<f64> {
    let e = |x: &[f64]| x.iter().map(|v| v * v).sum::<f64>();
    ild_from_energies(e(&hrir[0]), e(&hrir[1]))
}

/// [`ild`] from a one-sided spectrum via Parseval.
pub fn ild_spectrum(mag: &MagnitudeSpectrum) -> Result<f64> {
    let last = mag.bins() - 1;
    let energy = |c: usize| {
        (0..=last)
            .map(|f| {
                let w = if f == 0 || f == last { 1.0 } else { 2.0 };
                w * mag.get(f, c).powi(2)
            })
            .sum::<f64>()
    };
    ild_from_energies(energy(0), energy(1))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionScore {
    pub direction: usize,
    pub itd_error_us: f64,
    pub ild_error_db: f64,
    pub lsd_db: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanScores {
    pub itd_error_us: f64,
    pub ild_error_db: f64,
    pub lsd_db: f64,
}

impl MeanScores {
    pub fn mean_of<'a>(items: impl IntoIterator<Item = &'a MeanScores>) -> MeanScores {
        let mut acc = MeanScores::default();
        let mut n = 0usize;
        for m in items {
            acc.itd_error_us += m.itd_error_us;
            acc.ild_error_db += m.ild_error_db;
            acc.lsd_db += m.lsd_db;
            n += 1;
        }
        if n > 0 {
            let n = n as f64;
            acc.itd_error_us /= n;
            acc.ild_error_db /= n;
            acc.lsd_db /= n;
        }
        acc
    }
}

/// Per-direction and mean errors of a predicted subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subject: String,
    pub sample_rate: u32,
    pub exclude_measured: bool,
    pub directions: Vec<DirectionScore>,
    pub mean: MeanScores,
}

impl EvalReport {
    pub fn evaluated(&self) -> Vec<usize> {
        self.directions.iter().map(|d| d.direction).collect()
    }

    /// One row per direction plus a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction,itd_error_us,ild_error_db,lsd_db\n");
        for d in &self.directions {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                d.direction, d.itd_error_us, d.ild_error_db, d.lsd_db
            );
        }
        let _ = writeln!(
            out,
            "mean,{},{},{}",
            self.mean.itd_error_us, self.mean.ild_error_db, self.mean.lsd_db
        );
        out
    }
}

/// Scores a predicted subject against the ground truth. With
/// `exclude_measured`, directions in `measured` are skipped.
pub fn evaluate(
    pred: &HrirSet,
    truth: &HrirSet,
    measured: &MeasurementSubset,
    exclude_measured: bool,
    itd_config: &ItdConfig,
) -> Result<EvalReport> {
    if pred.num_directions() != truth.num_directions() || pred.hrir_length() != truth.hrir_length() {
        return Err(Error::Shape(format!(
            "prediction has {} directions x L={}, truth has {} x L={}",
            pred.num_directions(),
            pred.hrir_length(),
            truth.num_directions(),
            truth.hrir_length()
        )));
    }
    if pred.sample_rate() != truth.sample_rate() {
        return Err(Error::invariant("shared sample rate", "prediction and truth differ"));
    }
    let fs = truth.sample_rate();
    let mut directions = Vec::new();
    for d in 0..truth.num_directions() {
        if exclude_measured && measured.contains(d) {
            continue;
        }
        let (p, t) = (pred.hrir(d), truth.hrir(d));
        let itd_p = dsp::estimate_itd(&p, fs, itd_config)?;
        let itd_t = dsp::estimate_itd(&t, fs, itd_config)?;
        let mag_p = dsp::magnitude_spectrum(&p)?.floored()?;
        let mag_t = dsp::magnitude_spectrum(&t)?.floored()?;
        directions.push(DirectionScore {
            direction: d,
            itd_error_us: (itd_p.micros(fs) - itd_t.micros(fs)).abs(),
            ild_error_db: (ild(&p)? - ild(&t)?).abs(),
            lsd_db: lsd(&mag_t, &mag_p)?,
        });
    }
    let n = directions.len().max(1) as f64;
    let mean = MeanScores {
        itd_error_us: directions.iter().map(|d| d.itd_error_us).sum::<f64>() / n,
        ild_error_db: directions.iter().map(|d| d.ild_error_db).sum::<f64>() / n,
        lsd_db: directions.iter().map(|d| d.lsd_db).sum::<f64>() / n,
    };
    Ok(EvalReport {
        subject: truth.subject_id().to_string(),
        sample_rate: fs,
        exclude_measured,
        directions,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(left: &[f64], right: &[f64]) -> MagnitudeSpectrum {
        MagnitudeSpectrum::from_channels(left, right).unwrap()
    }

    #[test]
    fn lsd_cases() {
        let a = spec(&[1.0, 2.0, 0.5], &[3.0, 1.0, 1.0]);
        assert_eq!(lsd(&a, &a).unwrap(), 0.0);
        let scaled = spec(&[10.0, 20.0, 5.0], &[30.0, 10.0, 10.0]);
        assert!((lsd(&a, &scaled).unwrap() - 20.0).abs() < 1e-9);
        // ratios (10, 1) on one channel, (1, 1) on the other
        let base = spec(&[1.0, 1.0], &[1.0, 1.0]);
        let mixed = spec(&[10.0, 1.0], &[1.0, 1.0]);
        assert!((lsd(&base, &mixed).unwrap() - 200f64.sqrt() / 2.0).abs() < 1e-9);
        assert!(lsd(&base, &a).is_err());
    }

    #[test]
    fn mae_eps_cases() {
        assert_eq!(mae_eps(1.0, 1.4, 0.5), 0.0);
        assert_eq!(mae_eps(1.0, 1.5, 0.5), 0.0);
        assert!((mae_eps(10.0, 7.2, 0.5) - 2.3).abs() < 1e-12);
    }

    #[test]
    fn ild_cases() {
        let x = vec![0.5, -0.25, 0.125];
        assert_eq!(ild(&[x.clone(), x.clone()]).unwrap(), 0.0);
        let double: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        let v = ild(&[double.clone(), x.clone()]).unwrap();
        assert!((v - 20.0 * 2f64.log10()).abs() < 1e-12);
        assert!((ild(&[x.clone(), double]).unwrap() + v).abs() < 1e-12);
        assert!(ild(&[x, vec![0.0; 3]]).is_err());
    }

    #[test]
    fn ild_time_and_frequency_agree() {
        let l: Vec<f64> = (0..16).map(|t| (t as f64 * 0.7).sin() * 0.9f64.powi(t)).collect();
        let r: Vec<f64> = (0..16).map(|t| (t as f64 * 1.3).cos() * 0.8f64.powi(t)).collect();
        let h = [l, r];
        let m = dsp::magnitude_spectrum(&h).unwrap();
        assert!((ild(&h).unwrap() - ild_spectrum(&m).unwrap()).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn lsd_symmetric_and_scale_invariant(
            a in prop::collection::vec(0.01f64..10.0, 8),
            b in prop::collection::vec(0.01f64..10.0, 8),
            c in 0.01f64..100.0,
        ) {
            let (sa, sb) = (spec(&a[..4], &a[4..]), spec(&b[..4], &b[4..]));
            let ab = lsd(&sa, &sb).unwrap();
            prop_assert!((ab - lsd(&sb, &sa).unwrap()).abs() < 1e-9);
            let ca: Vec<f64> = a.iter().map(|v| v * c).collect();
            let cb: Vec<f64> = b.iter().map(|v| v * c).collect();
            let scaled = lsd(&spec(&ca[..4], &ca[4..]), &spec(&cb[..4], &cb[4..])).unwrap();
            prop_assert!((ab - scaled).abs() < 1e-9);
        }

        #[test]
        fn mae_eps_properties(t in -50.0f64..50.0, x in -50.0f64..50.0, y in -50.0f64..50.0, eps in 0.0f64..2.0) {
            prop_assert!(mae_eps(t, x, eps) >= 0.0);
            let mid = 0.5 * (x + y);
            prop_assert!(mae_eps(t, mid, eps) <= 0.5 * (mae_eps(t, x, eps) + mae_eps(t, y, eps)) + 1e-12);
            let inside = t + eps * (x / 50.0);
            prop_assert!(mae_eps(t, inside, eps) <= 1e-12);
        }
    }
}
