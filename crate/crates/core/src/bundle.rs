//! Native on-disk HRIR dataset format and the in-memory data model.
//!
//! A bundle is a directory holding `manifest.json` and one raw payload per
//! subject. Payloads are little-endian `f32`, laid out row-major as
//! `[direction][channel][sample]` with no header, so that a save/load round
//! trip is bit-exact.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fs;
use std::path::Path;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dsp::Hrir;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u64 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Minimum angular separation (radians) between two grid directions.
pub const MIN_GRID_SEPARATION: f64 = 1e-9;

/// Source direction. Azimuth grows counter-clockwise from the front, elevation
/// grows upward from the horizontal plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    azimuth: f64,
    elevation: f64,
}

impl Direction {
    /// Builds a direction, wrapping the azimuth into `[0, 2π)`.
    pub fn new(azimuth: f64, elevation: f64) -> Result<Self> {
        if !azimuth.is_finite() || !elevation.is_finite() {
            return Err(Error::invariant(
                "finite direction",
                format!("({azimuth}, {elevation})"),
            ));
        }
        if !(-FRAC_PI_2..=FRAC_PI_2).contains(&elevation) {
            return Err(Error::invariant(
                "elevation in [-pi/2, pi/2]",
                format!("elevation {elevation}"),
            ));
        }
        let mut az = azimuth.rem_euclid(TAU);
        if az >= TAU {
            az = 0.0;
        }
        Ok(Self {
            azimuth: az,
            elevation,
        })
    }

    /// Builds a direction from a (not necessarily normalized) Cartesian
    /// vector with x to the front, y to the left and z up.
    pub fn from_vector([x, y, z]: [f64; 3]) -> Result<Self> {
        let norm = (x * x + y * y + z * z).sqrt();
        if norm == 0.0 {
            return Err(Error::InvalidArgument("zero direction vector".into()));
        }
        let el = (z / norm).clamp(-1.0, 1.0).asin();
        let az = if x == 0.0 && y == 0.0 { 0.0 } else { y.atan2(x) };
        Self::new(az, el)
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }

    pub fn elevation(&self) -> f64 {
        self.elevation
    }

    pub fn unit_vector(&self) -> [f64; 3] {
        let (sa, ca) = self.azimuth.sin_cos();
        let (se, ce) = self.elevation.sin_cos();
        [ce * ca, ce * sa, se]
    }

    /// Great-circle distance via the spherical law of cosines.
    pub fn angular_distance(&self, other: &Direction) -> f64 {
        let cos = (self.elevation.sin() * other.elevation.sin()
            + self.elevation.cos() * other.elevation.cos() * (self.azimuth - other.azimuth).cos())
        .clamp(-1.0, 1.0);
        cos.acos()
    }

    /// Great-circle distance computed from the chord geometry; accurate for
    /// nearly coincident directions, where the law of cosines is not.
    pub fn separation(&self, other: &Direction) -> f64 {
        let a = self.unit_vector();
        let b = other.unit_vector();
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        let sin = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
        let cos = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
        sin.atan2(cos)
    }
}

/// Impulse responses of one subject on the shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct HrirSet {
    subject_id: String,
    sample_rate: u32,
    hrir_length: usize,
    /// `[direction][channel][sample]`, left ear is channel 0.
    samples: Vec<f32>,
}

impl HrirSet {
    pub fn new(
        subject_id: impl Into<String>,
        sample_rate: u32,
        hrir_length: usize,
        samples: Vec<f32>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        validate_subject_id(&subject_id)?;
        if sample_rate == 0 {
            return Err(Error::invariant("positive sample rate", "sample rate is 0"));
        }
        if hrir_length == 0 {
            return Err(Error::invariant("positive hrir length", "hrir length is 0"));
        }
        if samples.len() % (2 * hrir_length) != 0 {
            return Err(Error::invariant(
                "2 channels of L samples per direction",
                format!(
                    "{} samples is not a multiple of 2 x {hrir_length}",
                    samples.len()
                ),
            ));
        }
        Ok(Self {
            subject_id,
            sample_rate,
            hrir_length,
            samples,
        })
    }

    /// Builds a set from per-direction stereo responses, casting to `f32`.
    pub fn from_hrirs(
        subject_id: impl Into<String>,
        sample_rate: u32,
        hrirs: &[Hrir],
    ) -> Result<Self> {
        let length = hrirs.first().map(|h| h[0].len()).unwrap_or(0);
        let mut samples = Vec::with_capacity(hrirs.len() * 2 * length);
        for h in hrirs {
            for ch in h {
                if ch.len() != length {
                    return Err(Error::invariant(
                        "2 channels of L samples per direction",
                        format!("channel of {} samples, expected {length}", ch.len()),
                    ));
                }
                samples.extend(ch.iter().map(|&x| x as f32));
            }
        }
        Self::new(subject_id, sample_rate, length, samples)
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn hrir_length(&self) -> usize {
        self.hrir_length
    }

    pub fn num_directions(&self) -> usize {
        self.samples.len() / (2 * self.hrir_length)
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn channel(&self, direction: usize, channel: usize) -> &[f32] {
        let start = (direction * 2 + channel) * self.hrir_length;
        &self.samples[start..start + self.hrir_length]
    }

    /// Stereo response at a grid index, widened to `f64`.
    pub fn hrir(&self, direction: usize) -> Hrir {
        [0, 1].map(|c| {
            self.channel(direction, c)
                .iter()
                .map(|&x| f64::from(x))
                .collect()
        })
    }

    /// Keeps only the listed directions, in the given order.
    pub fn restrict(&self, indices: &[usize]) -> Result<Self> {
        let mut samples = Vec::with_capacity(indices.len() * 2 * self.hrir_length);
        for &i in indices {
            if i >= self.num_directions() {
                return Err(Error::OffGrid(i));
            }
            let start = i * 2 * self.hrir_length;
            samples.extend_from_slice(&self.samples[start..start + 2 * self.hrir_length]);
        }
        Self::new(self.subject_id.clone(), self.sample_rate, self.hrir_length, samples)
    }
}

fn validate_subject_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::invariant(
            "subject id is a plain file stem",
            format!("{id:?}"),
        ));
    }
    Ok(())
}

/// A multi-subject dataset on a shared spherical grid. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct HrirBundle {
    grid: Vec<Direction>,
    subjects: BTreeMap<String, HrirSet>,
    sample_rate: u32,
    hrir_length: usize,
}

impl HrirBundle {
    pub fn new(grid: Vec<Direction>, subjects: Vec<HrirSet>) -> Result<Self> {
        let first = subjects
            .first()
            .ok_or_else(|| Error::invariant("at least one subject", "subject list is empty"))?;
        let sample_rate = first.sample_rate;
        let hrir_length = first.hrir_length;
        check_grid(&grid)?;
        let mut map = BTreeMap::new();
        for s in subjects {
            if s.sample_rate != sample_rate {
                return Err(Error::invariant(
                    "shared sample rate",
                    format!("{} has {} Hz, expected {sample_rate}", s.subject_id, s.sample_rate),
                ));
            }
            if s.hrir_length != hrir_length {
                return Err(Error::invariant(
                    "shared hrir length",
                    format!("{} has L={}, expected {hrir_length}", s.subject_id, s.hrir_length),
                ));
            }
            if s.num_directions() != grid.len() {
                return Err(Error::invariant(
                    "one response per grid direction",
                    format!(
                        "{} has {} directions, grid has {}",
                        s.subject_id,
                        s.num_directions(),
                        grid.len()
                    ),
                ));
            }
            if map.contains_key(&s.subject_id) {
                return Err(Error::invariant("unique subject ids", s.subject_id.clone()));
            }
            map.insert(s.subject_id.clone(), s);
        }
        Ok(Self {
            grid,
            subjects: map,
            sample_rate,
            hrir_length,
        })
    }

    pub fn grid(&self) -> &[Direction] {
        &self.grid
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn hrir_length(&self) -> usize {
        self.hrir_length
    }

    pub fn subjects(&self) -> &BTreeMap<String, HrirSet> {
        &self.subjects
    }

    /// Subject ids in lexicographic order.
    pub fn subject_ids(&self) -> Vec<String> {
        self.subjects.keys().cloned().collect()
    }

    pub fn subject(&self, id: &str) -> Result<&HrirSet> {
        self.subjects
            .get(id)
            .ok_or_else(|| Error::UnknownSubject(id.to_string()))
    }

    /// Index of the grid direction closest to `direction`.
    pub fn nearest_grid_index(&self, direction: &Direction) -> usize {
        nearest_index(&self.grid, direction)
    }
}

fn nearest_index(grid: &[Direction], direction: &Direction) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, g) in grid.iter().enumerate() {
        let d = g.separation(direction);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

fn check_grid(grid: &[Direction]) -> Result<()> {
    if grid.is_empty() {
        return Err(Error::invariant("non-empty grid", "grid has no directions"));
    }
    for i in 0..grid.len() {
        for j in i + 1..grid.len() {
            if grid[i].separation(&grid[j]) <= MIN_GRID_SEPARATION {
                return Err(Error::invariant(
                    "pairwise distinct grid directions",
                    format!("directions {i} and {j} coincide"),
                ));
            }
        }
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u64,
    sample_rate_hz: u32,
    hrir_length: usize,
    channels: Vec<String>,
    grid: Vec<[f64; 2]>,
    subjects: Vec<ManifestSubject>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestSubject {
    id: String,
    file: String,
}

/// Reads and validates a bundle directory.
pub fn load_bundle(path: impl AsRef<Path>) -> Result<HrirBundle> {
    let dir = path.as_ref();
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    // Check the version before the full schema so newer layouts are
    // reported as such rather than as parse errors.
    let raw: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    let version = raw
        .get("schema_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Manifest {
            path: manifest_path.clone(),
            message: "missing schema_version".into(),
        })?;
    if version != SCHEMA_VERSION {
        return Err(Error::SchemaVersion {
            found: version,
            expected: SCHEMA_VERSION,
        });
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| Error::Manifest {
        path: manifest_path.clone(),
        message: e.to_string(),
    })?;
    if manifest.channels != ["left", "right"] {
        return Err(Error::Manifest {
            path: manifest_path,
            message: format!("channels must be [\"left\",\"right\"], got {:?}", manifest.channels),
        });
    }
    let grid = manifest
        .grid
        .iter()
        .map(|&[az, el]| Direction::new(az, el))
        .collect::<Result<Vec<_>>>()?;
    let expected = (grid.len() * 2 * manifest.hrir_length * 4) as u64;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for entry in &manifest.subjects {
        validate_subject_id(&entry.id)?;
        if entry.file.contains(['/', '\\']) {
            return Err(Error::Manifest {
                path: manifest_path.clone(),
                message: format!("payload file {:?} must be a plain file name", entry.file),
            });
        }
        let payload_path = dir.join(&entry.file);
        let bytes = match fs::read(&payload_path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(Error::MissingPayload {
                    subject: entry.id.clone(),
                    path: payload_path,
                })
            }
            Err(e) => return Err(Error::io(&payload_path, e)),
        };
        if bytes.len() as u64 != expected {
            return Err(Error::PayloadSize {
                subject: entry.id.clone(),
                expected,
                found: bytes.len() as u64,
            });
        }
        let samples = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        subjects.push(HrirSet::new(
            entry.id.clone(),
            manifest.sample_rate_hz,
            manifest.hrir_length,
            samples,
        )?);
    }
    HrirBundle::new(grid, subjects)
}

/// Writes `bundle` to `path`, creating the directory if needed.
pub fn save_bundle(bundle: &HrirBundle, path: impl AsRef<Path>) -> Result<()> {
    let dir = path.as_ref();
    if bundle.subjects.is_empty() {
        return Err(Error::invariant("at least one subject", "subject map is empty"));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        sample_rate_hz: bundle.sample_rate,
        hrir_length: bundle.hrir_length,
        channels: vec!["left".into(), "right".into()],
        grid: bundle
            .grid
            .iter()
            .map(|d| [d.azimuth(), d.elevation()])
            .collect(),
        subjects: bundle
            .subjects
            .keys()
            .map(|id| ManifestSubject {
                id: id.clone(),
                file: payload_file_name(id),
            })
            .collect(),
    };
    for (id, set) in &bundle.subjects {
        let mut bytes = Vec::with_capacity(set.samples.len() * 4);
        for x in &set.samples {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        let p = dir.join(payload_file_name(id));
        fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&p, text).map_err(|e| Error::io(&p, e))
}

pub fn payload_file_name(subject_id: &str) -> String {
    format!("{subject_id}.f32")
}

/// Sorted, duplicate-free grid indices of the measured directions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasurementSubset {
    indices: Vec<usize>,
}

impl MeasurementSubset {
    pub fn new(mut indices: Vec<usize>, grid_len: usize) -> Result<Self> {
        indices.sort_unstable();
        let before = indices.len();
        indices.dedup();
        if indices.len() != before {
            return Err(Error::invariant("unique subset indices", "duplicate index"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= grid_len) {
            return Err(Error::OffGrid(bad));
        }
        Ok(Self { indices })
    }

    /// Every index of a grid with `grid_len` directions.
    pub fn full(grid_len: usize) -> Self {
        Self {
            indices: (0..grid_len).collect(),
        }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.indices.binary_search(&index).is_ok()
    }
}

/// Farthest-point sampling on the sphere, starting from the grid point
/// nearest the front (azimuth 0, elevation 0).
///
/// Each new point maximizes the minimum angular distance to the points
/// already chosen. Exact ties are broken by `seed`; the same inputs always
/// produce the same subset.
pub fn select_measured_subset(grid: &[Direction], n: usize, seed: u64) -> Result<MeasurementSubset> {
    if n == 0 || n > grid.len() {
        return Err(Error::InvalidArgument(format!(
            "subset size {n} outside [1, {}]",
            grid.len()
        )));
    }
    let front = Direction::new(0.0, 0.0)?;
    let first = nearest_index(grid, &front);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![first];
    let mut min_dist: Vec<f64> = grid.iter().map(|g| g.separation(&grid[first])).collect();
    min_dist[first] = f64::NEG_INFINITY;
    while chosen.len() < n {
        let best = min_dist.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = (0..grid.len())
            .filter(|&i| min_dist[i] > f64::NEG_INFINITY && best - min_dist[i] <= 1e-12)
            .collect();
        let pick = if ties.len() == 1 {
            ties[0]
        } else {
            ties[rng.random_range(0..ties.len())]
        };
        chosen.push(pick);
        for (i, d) in min_dist.iter_mut().enumerate() {
            if *d > f64::NEG_INFINITY {
                *d = d.min(grid[i].separation(&grid[pick]));
            }
        }
        min_dist[pick] = f64::NEG_INFINITY;
    }
    MeasurementSubset::new(chosen, grid.len())
}

/// Subject counts for a deterministic split. `validation` subjects are the
/// last ones of the pre-training block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub pretrain: usize,
    pub validation: usize,
    pub eval: usize,
}

impl SplitSizes {
    /// 179 pre-training subjects (the last 19 for validation) and 20
    /// evaluation subjects.
    pub const FULL_SCALE: SplitSizes = SplitSizes {
        pretrain: 179,
        validation: 19,
        eval: 20,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    /// Removed before splitting.
    pub exclude: Vec<String>,
    pub sizes: SplitSizes,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            exclude: vec!["P0079".into()],
            sizes: SplitSizes::FULL_SCALE,
        }
    }
}

/// Subject partition. `validation_ids` is a subset of `pretrain_ids`;
/// `eval_ids` is disjoint from both.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub pretrain_ids: Vec<String>,
    pub validation_ids: Vec<String>,
    pub eval_ids: Vec<String>,
}

impl DatasetSplit {
    /// Pre-training subjects that are optimized on (validation removed).
    pub fn training_ids(&self) -> Vec<String> {
        let val: BTreeSet<&String> = self.validation_ids.iter().collect();
        self.pretrain_ids
            .iter()
            .filter(|id| !val.contains(id))
            .cloned()
            .collect()
    }
}

pub fn make_split(bundle: &HrirBundle, config: &SplitConfig) -> Result<DatasetSplit> {
    split_ids(bundle.subjects.keys().cloned(), config)
}

/// Lexicographic split of an arbitrary id list.
pub fn split_ids(ids: impl IntoIterator<Item = String>, config: &SplitConfig) -> Result<DatasetSplit> {
    let exclude: BTreeSet<&str> = config.exclude.iter().map(String::as_str).collect();
    let mut ids: Vec<String> = ids
        .into_iter()
        .filter(|id| !exclude.contains(id.as_str()))
        .collect();
    ids.sort();
    ids.dedup();
    let SplitSizes {
        pretrain,
        validation,
        eval,
    } = config.sizes;
    if validation >= pretrain {
        return Err(Error::InvalidArgument(format!(
            "validation size {validation} must be smaller than pretrain size {pretrain}"
        )));
    }
    if ids.len() < pretrain + eval {
        return Err(Error::InvalidArgument(format!(
            "split needs {} subjects, bundle has {} after exclusion",
            pretrain + eval,
            ids.len()
        )));
    }
    Ok(DatasetSplit {
        pretrain_ids: ids[..pretrain].to_vec(),
        validation_ids: ids[pretrain - validation..pretrain].to_vec(),
        eval_ids: ids[pretrain..pretrain + eval].to_vec(),
    })
}

/// Regular octahedron: front, back, left, right, up, down.
pub fn octahedron_grid() -> Vec<Direction> {
    [
        (0.0, 0.0),
        (PI, 0.0),
        (FRAC_PI_2, 0.0),
        (3.0 * FRAC_PI_2, 0.0),
        (0.0, FRAC_PI_2),
        (0.0, -FRAC_PI_2),
    ]
    .into_iter()
    .map(|(a, e)| Direction::new(a, e).expect("valid constant"))
    .collect()
}

/// Geodesic grid from a subdivided icosahedron: 12, 42, 162, 642, …
/// directions for 0, 1, 2, 3, … subdivisions.
pub fn icosphere_grid(subdivisions: u32) -> Vec<Direction> {
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let mut verts: Vec<[f64; 3]> = vec![
        [-1.0, phi, 0.0],
        [1.0, phi, 0.0],
        [-1.0, -phi, 0.0],
        [1.0, -phi, 0.0],
        [0.0, -1.0, phi],
        [0.0, 1.0, phi],
        [0.0, -1.0, -phi],
        [0.0, 1.0, -phi],
        [phi, 0.0, -1.0],
        [phi, 0.0, 1.0],
        [-phi, 0.0, -1.0],
        [-phi, 0.0, 1.0],
    ]
    .into_iter()
    .map(normalize)
    .collect();
    let mut faces: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for _ in 0..subdivisions {
        let mut midpoints: BTreeMap<(usize, usize), usize> = BTreeMap::new();
        let mut next = Vec::with_capacity(faces.len() * 4);
        let mut mid = |a: usize, b: usize, verts: &mut Vec<[f64; 3]>| -> usize {
            let key = (a.min(b), a.max(b));
            *midpoints.entry(key).or_insert_with(|| {
                let (p, q) = (verts[a], verts[b]);
                verts.push(normalize([p[0] + q[0], p[1] + q[1], p[2] + q[2]]));
                verts.len() - 1
            })
        };
        for [a, b, c] in faces {
            let ab = mid(a, b, &mut verts);
            let bc = mid(b, c, &mut verts);
            let ca = mid(c, a, &mut verts);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        faces = next;
    }
    verts
        .into_iter()
        .map(|v| Direction::from_vector(v).expect("unit vector"))
        .collect()
}

fn normalize([x, y, z]: [f64; 3]) -> [f64; 3] {
    let n = (x * x + y * y + z * z).sqrt();
    [x / n, y / n, z / n]
}
