//! Top-K retrieval of reference subjects from sparse measurements.
//!
//! The objective sums a per-direction error over the measured directions and
//! over the K retrieved subjects. Since it is additive over subjects, the
//! best K-subset is the K subjects with the smallest individual sums; no
//! combinatorial search is needed.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{Direction, HrirBundle, HrirSet, MeasurementSubset, MIN_GRID_SEPARATION};
use crate::dsp::{self, Hrir, Itd, ItdConfig};
use crate::error::{Error, Result};
use crate::metrics;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CriterionKind {
    Lsd,
    ItdMae,
    Random,
}

/// Serialized as its text form (`itd`, `lsd`, `random:<seed>`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RetrievalCriterion {
    pub kind: CriterionKind,
    /// Only used by [`CriterionKind::Random`].
    pub seed: u64,
}

impl RetrievalCriterion {
    pub const LSD: Self = Self {
        kind: CriterionKind::Lsd,
        seed: 0,
    };
    pub const ITD: Self = Self {
        kind: CriterionKind::ItdMae,
        seed: 0,
    };

    pub fn random(seed: u64) -> Self {
        Self {
            kind: CriterionKind::Random,
            seed,
        }
    }
}

impl fmt::Display for RetrievalCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            CriterionKind::Lsd => f.write_str("lsd"),
            CriterionKind::ItdMae => f.write_str("itd"),
            CriterionKind::Random => write!(f, "random:{}", self.seed),
        }
    }
}

impl TryFrom<String> for RetrievalCriterion {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<RetrievalCriterion> for String {
    fn from(c: RetrievalCriterion) -> String {
        c.to_string()
    }
}

impl FromStr for RetrievalCriterion {
    type Err = Error;

    /// Accepts `lsd`, `itd` (or `itd_mae`), `random` and `random:<seed>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lsd" => Ok(Self::LSD),
            "itd" | "itd_mae" => Ok(Self::ITD),
            "random" => Ok(Self::random(0)),
            _ => s
                .strip_prefix("random:")
                .and_then(|n| n.parse().ok())
                .map(Self::random)
                .ok_or_else(|| Error::InvalidArgument(format!("unknown retrieval criterion {s:?}"))),
        }
    }
}

/// Magnitude (dB, floored) and ITD of one stereo response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HrtfFeatures {
    /// `[bin][channel]`.
    pub db: Vec<f64>,
    pub itd: Itd,
}

impl HrtfFeatures {
    pub fn compute(hrir: &Hrir, sample_rate: u32, itd_config: &ItdConfig) -> Result<Self> {
        Ok(Self {
            db: dsp::magnitude_spectrum(hrir)?.to_db()?,
            itd: dsp::estimate_itd(hrir, sample_rate, itd_config)?,
        })
    }

    pub fn bins(&self) -> usize {
        self.db.len() / 2
    }
}

/// Lazily computed, memoized features of every (subject, direction) in a
/// bundle. Safe to share between threads.
pub struct FeatureStore<'a> {
    bundle: &'a HrirBundle,
    itd_config: ItdConfig,
    slots: BTreeMap<&'a str, Vec<OnceLock<HrtfFeatures>>>,
}

impl<'a> FeatureStore<'a> {
    pub fn new(bundle: &'a HrirBundle, itd_config: ItdConfig) -> Self {
        let n = bundle.grid().len();
        let slots = bundle
            .subjects()
            .keys()
            .map(|id| (id.as_str(), (0..n).map(|_| OnceLock::new()).collect()))
            .collect();
        Self {
            bundle,
            itd_config,
            slots,
        }
    }

    pub fn bundle(&self) -> &'a HrirBundle {
        self.bundle
    }

    pub fn itd_config(&self) -> &ItdConfig {
        &self.itd_config
    }

    pub fn features(&self, subject: &str, direction: usize) -> Result<&HrtfFeatures> {
        let slots = self
            .slots
            .get(subject)
            .ok_or_else(|| Error::UnknownSubject(subject.to_string()))?;
        let slot = slots.get(direction).ok_or(Error::OffGrid(direction))?;
        if let Some(f) = slot.get() {
            return Ok(f);
        }
        let set = self.bundle.subject(subject)?;
        let computed = HrtfFeatures::compute(&set.hrir(direction), set.sample_rate(), &self.itd_config)?;
        // A concurrent writer computed the same value; either copy is fine.
        let _ = slot.set(computed);
        Ok(slot.get().expect("slot initialized"))
    }

    /// Computes every slot up front, in parallel.
    pub fn precompute(&self, subjects: &[String]) -> Result<()> {
        let n = self.bundle.grid().len();
        subjects
            .par_iter()
            .try_for_each(|s| (0..n).try_for_each(|d| self.features(s, d).map(|_| ())))
    }
}

/// A target subject's measured responses on D′ and their features.
#[derive(Debug, Clone)]
pub struct TargetMeasurements {
    pub subject_id: String,
    pub subset: MeasurementSubset,
    pub hrirs: Vec<Hrir>,
    pub features: Vec<HrtfFeatures>,
}

impl TargetMeasurements {
    pub fn from_set(set: &HrirSet, subset: &MeasurementSubset, itd_config: &ItdConfig) -> Result<Self> {
        let mut hrirs = Vec::with_capacity(subset.len());
        let mut features = Vec::with_capacity(subset.len());
        for &d in subset.indices() {
            if d >= set.num_directions() {
                return Err(Error::OffGrid(d));
            }
            let h = set.hrir(d);
            features.push(HrtfFeatures::compute(&h, set.sample_rate(), itd_config)?);
            hrirs.push(h);
        }
        Ok(Self {
            subject_id: set.subject_id().to_string(),
            subset: subset.clone(),
            hrirs,
            features,
        })
    }
}

/// Sum over the measured directions of the per-direction error between a
/// target and a candidate. LSD uses the log-spectral distortion, ITD the
/// absolute ITD difference in samples.
pub fn score_subject(
    target: &[HrtfFeatures],
    candidate: &[HrtfFeatures],
    criterion: CriterionKind,
) -> Result<f64> {
    if target.len() != candidate.len() {
        return Err(Error::Shape(format!(
            "target covers {} directions, candidate {}",
            target.len(),
            candidate.len()
        )));
    }
    let per_dir = |t: &HrtfFeatures, c: &HrtfFeatures| -> Result<f64> {
        match criterion {
            CriterionKind::Lsd => {
                if t.db.len() != c.db.len() {
                    return Err(Error::Shape("spectra differ in bins".into()));
                }
                Ok(metrics::lsd_db(&t.db, &c.db))
            }
            CriterionKind::ItdMae => Ok(metrics::mae_eps(t.itd.0, c.itd.0, 0.0)),
            CriterionKind::Random => Err(Error::InvalidArgument(
                "the random criterion has no score".into(),
            )),
        }
    };
    target
        .iter()
        .zip(candidate)
        .map(|(t, c)| per_dir(t, c))
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub target: String,
    pub criterion: RetrievalCriterion,
    pub k: usize,
    /// Best first.
    pub subjects: Vec<String>,
    /// Matches `subjects`; absent for random retrieval.
    pub scores: Option<Vec<f64>>,
}

/// Retrieves the `k` subjects of `pool` closest to `target` on its measured
/// directions. The target itself is never returned; ties go to the
/// lexicographically smaller id.
pub fn retrieve_topk(
    store: &FeatureStore<'_>,
    target: &TargetMeasurements,
    pool: &[String],
    k: usize,
    criterion: RetrievalCriterion,
) -> Result<RetrievalResult> {
    let mut eligible: Vec<&String> = pool.iter().filter(|s| **s != target.subject_id).collect();
    eligible.sort();
    eligible.dedup();
    if eligible.is_empty() {
        return Err(Error::InvalidArgument("retrieval pool is empty".into()));
    }
    if k == 0 || k > eligible.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} with {} eligible subjects",
            eligible.len()
        )));
    }
    if criterion.kind == CriterionKind::Random {
        let mut rng = ChaCha8Rng::seed_from_u64(criterion.seed);
        eligible.shuffle(&mut rng);
        return Ok(RetrievalResult {
            target: target.subject_id.clone(),
            criterion,
            k,
            subjects: eligible[..k].iter().map(|s| s.to_string()).collect(),
            scores: None,
        });
    }
    let mut scored = eligible
        .par_iter()
        .map(|id| {
            let feats = target
                .subset
                .indices()
                .iter()
                .map(|&d| store.features(id, d).cloned())
                .collect::<Result<Vec<_>>>()?;
            Ok((score_subject(&target.features, &feats, criterion.kind)?, (*id).clone()))
        })
        .collect::<Result<Vec<(f64, String)>>>()?;
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
    scored.truncate(k);
    Ok(RetrievalResult {
        target: target.subject_id.clone(),
        criterion,
        k,
        scores: Some(scored.iter().map(|s| s.0).collect()),
        subjects: scored.into_iter().map(|s| s.1).collect(),
    })
}

/// Features of each listed subject at a grid direction.
pub fn fetch_features<'s>(
    store: &'s FeatureStore<'_>,
    subject_ids: &[String],
    direction: usize,
) -> Result<Vec<&'s HrtfFeatures>> {
    if direction >= store.bundle().grid().len() {
        return Err(Error::OffGrid(direction));
    }
    subject_ids.iter().map(|s| store.features(s, direction)).collect()
}

/// Grid index of `direction`, which must coincide with a grid point.
pub fn grid_index(bundle: &HrirBundle, direction: &Direction) -> Result<usize> {
    let i = bundle.nearest_grid_index(direction);
    if bundle.grid()[i].separation(direction) <= MIN_GRID_SEPARATION {
        Ok(i)
    } else {
        Err(Error::InvalidArgument(format!(
            "direction ({:.6}, {:.6}) is not on the grid",
            direction.azimuth(),
            direction.elevation()
        )))
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_bundle, GridSpec, SynthConfig};

    fn bundle(subjects: usize) -> HrirBundle {
        generate_bundle(&SynthConfig {
            subjects,
            grid: GridSpec::Icosphere(1),
            hrir_length: 128,
            seed: 3,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    /// Independent per-direction error, straight from the definitions.
    fn direct_score(b: &HrirBundle, t: &str, c: &str, dirs: &[usize], kind: CriterionKind) -> f64 {
        let cfg = ItdConfig::default();
        dirs.iter()
            .map(|&d| {
                let (ht, hc) = (b.subject(t).unwrap().hrir(d), b.subject(c).unwrap().hrir(d));
                match kind {
                    CriterionKind::Lsd => metrics::lsd(
                        &dsp::magnitude_spectrum(&ht).unwrap(),
                        &dsp::magnitude_spectrum(&hc).unwrap(),
                    )
                    .unwrap(),
                    _ => {
                        let a = dsp::estimate_itd(&ht, b.sample_rate(), &cfg).unwrap().0;
                        let e = dsp::estimate_itd(&hc, b.sample_rate(), &cfg).unwrap().0;
                        (a - e).abs()
                    }
                }
            })
            .sum()
    }

    fn combinations(n: usize, k: usize, start: usize, cur: &mut Vec<usize>, out: &mut dyn FnMut(&[usize])) {
        if cur.len() == k {
            out(cur);
            return;
        }
        for i in start..n {
            if n - i < k - cur.len() {
                break;
            }
            cur.push(i);
            combinations(n, k, i + 1, cur, out);
            cur.pop();
        }
    }

    #[test]
    fn topk_matches_exhaustive_subset_search() {
        let b = bundle(20);
        let store = FeatureStore::new(&b, ItdConfig::default());
        let subset = MeasurementSubset::new(vec![2, 11, 25, 37], b.grid().len()).unwrap();
        let target = "P0007";
        let m = TargetMeasurements::from_set(b.subject(target).unwrap(), &subset, &ItdConfig::default()).unwrap();
        let pool: Vec<String> = b.subject_ids().into_iter().filter(|s| s != target).collect();
        for kind in [CriterionKind::Lsd, CriterionKind::ItdMae] {
            let singles: Vec<f64> = pool.iter().map(|c| direct_score(&b, target, c, subset.indices(), kind)).collect();
            for k in [1, 5, 10] {
                let mut best = (f64::INFINITY, Vec::new());
                combinations(pool.len(), k, 0, &mut Vec::new(), &mut |ix| {
                    let total: f64 = ix.iter().map(|&i| singles[i]).sum();
                    if total < best.0 - 1e-12 {
                        best = (total, ix.to_vec());
                    }
                });
                let r = retrieve_topk(&store, &m, &b.subject_ids(), k, RetrievalCriterion { kind, seed: 0 }).unwrap();
                let got: f64 = r.scores.as_ref().unwrap().iter().sum();
                assert!((got - best.0).abs() < 1e-9, "{kind:?} k={k}: {got} vs {}", best.0);
                assert!(!r.subjects.iter().any(|s| s == target));
                assert_eq!(r.subjects.len(), k);
                // best first
                assert!(r.scores.unwrap().windows(2).all(|w| w[0] <= w[1]));
            }
        }
    }

    #[test]
    fn ties_resolve_by_id() {
        let b = bundle(4);
        // duplicate subject under two ids that sort apart
        let dup = b.subject("P0002").unwrap();
        let mut sets: Vec<HrirSet> = b.subjects().values().cloned().collect();
        sets.push(HrirSet::new("A0002", dup.sample_rate(), dup.hrir_length(), dup.samples().to_vec()).unwrap());
        let b2 = HrirBundle::new(b.grid().to_vec(), sets).unwrap();
        let store = FeatureStore::new(&b2, ItdConfig::default());
        let subset = MeasurementSubset::new(vec![0, 9], b2.grid().len()).unwrap();
        let twin = HrirSet::new("T", dup.sample_rate(), dup.hrir_length(), dup.samples().to_vec()).unwrap();
        let m = TargetMeasurements::from_set(&twin, &subset, &ItdConfig::default()).unwrap();
        let r = retrieve_topk(&store, &m, &b2.subject_ids(), 2, RetrievalCriterion::LSD).unwrap();
        assert_eq!(r.subjects, vec!["A0002", "P0002"]);
    }

    #[test]
    fn random_is_seeded_and_excludes_target() {
        let b = bundle(8);
        let store = FeatureStore::new(&b, ItdConfig::default());
        let subset = MeasurementSubset::new(vec![1], b.grid().len()).unwrap();
        let m = TargetMeasurements::from_set(b.subject("P0001").unwrap(), &subset, &ItdConfig::default()).unwrap();
        let ids = b.subject_ids();
        let a = retrieve_topk(&store, &m, &ids, 7, RetrievalCriterion::random(4)).unwrap();
        let again = retrieve_topk(&store, &m, &ids, 7, RetrievalCriterion::random(4)).unwrap();
        assert_eq!(a, again);
        assert!(a.scores.is_none() && !a.subjects.contains(&"P0001".to_string()));
        assert!(retrieve_topk(&store, &m, &ids, 8, RetrievalCriterion::random(4)).is_err());
        assert!(retrieve_topk(&store, &m, &ids, 0, RetrievalCriterion::ITD).is_err());
    }

    #[test]
    fn criterion_round_trips_through_text() {
        for c in [RetrievalCriterion::LSD, RetrievalCriterion::ITD, RetrievalCriterion::random(9)] {
            assert_eq!(c.to_string().parse::<RetrievalCriterion>().unwrap(), c);
        }
        assert!("nearest".parse::<RetrievalCriterion>().is_err());
    }
}
