//! Non-neural comparison systems.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{Direction, HrirSet};
use crate::error::{Error, Result};
use crate::retrieval::{retrieve_topk, FeatureStore, RetrievalCriterion, RetrievalResult, TargetMeasurements};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    NearestNeighbor,
    SelectionItd,
    SelectionLsd,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 3] = [Self::NearestNeighbor, Self::SelectionItd, Self::SelectionLsd];

    pub fn name(self) -> &'static str {
        match self {
            Self::NearestNeighbor => "nearest_neighbor",
            Self::SelectionItd => "selection_itd",
            Self::SelectionLsd => "selection_lsd",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown baseline {s:?}")))
    }
}

/// Index into `candidates` of the direction closest to `target`; ties go
/// to the first candidate, which callers keep in grid order.
pub fn nearest_index(target: &Direction, candidates: &[Direction]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in candidates.iter().enumerate() {
        let d = target.angular_distance(c);
        if best.is_none_or(|(_, b)| d < b) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i)
}

/// Copies, for every grid direction, the measured response at the smallest
/// great-circle distance. Ties go to the lower grid index.
pub fn nearest_neighbor(measurements: &TargetMeasurements, grid: &[Direction], sample_rate: u32) -> Result<HrirSet> {
    let indices = measurements.subset.indices();
    if indices.is_empty() {
        return Err(Error::InvalidArgument("no measured directions".into()));
    }
    if let Some(&bad) = indices.iter().find(|&&i| i >= grid.len()) {
        return Err(Error::OffGrid(bad));
    }
    let measured: Vec<Direction> = indices.iter().map(|&i| grid[i]).collect();
    let hrirs: Vec<_> = grid
        .par_iter()
        .map(|d| measurements.hrirs[nearest_index(d, &measured).expect("non-empty")].clone())
        .collect();
    HrirSet::from_hrirs(&measurements.subject_id, sample_rate, &hrirs)
}

/// Picks the single pool subject closest to the target on its measured
/// directions and returns that subject's full set, renamed to the target.
pub fn select_subject(
    store: &FeatureStore<'_>,
    measurements: &TargetMeasurements,
    pool: &[String],
    criterion: RetrievalCriterion,
) -> Result<(HrirSet, RetrievalResult)> {
    let result = retrieve_topk(store, measurements, pool, 1, criterion)?;
    let chosen = store.bundle().subject(&result.subjects[0])?;
    let set = HrirSet::new(
        measurements.subject_id.clone(),
        chosen.sample_rate(),
        chosen.hrir_length(),
        chosen.samples().to_vec(),
    )?;
    Ok((set, result))
}
