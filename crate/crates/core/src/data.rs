//! Feature datasets, sequence manifests, instance-disjoint splits and the
//! synthetic benchmark generator.
//!
//! # Binary feature format (`FCL1`)
//!
//! All integers and floats little-endian:
//!
//! ```text
//! offset 0   magic       4 bytes  "FCL1"
//! offset 4   version     u32      1
//! offset 8   feature_dim u32
//! offset 12  n_examples  u64
//! offset 20  records, n_examples times:
//!              example_id  u64
//!              instance_id u32
//!              category_id u32
//!              features    feature_dim × f32
//! ```
//!
//! # CSV feature format
//!
//! Header `example_id,instance_id,category_id,f0,...,f{d-1}`, one example per
//! row. Features are written with the shortest decimal form that parses back
//! to the same `f32`.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{ByteReader, PutLe};
use crate::error::{Error, Result};
use crate::math::DenseMatrix;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub example_id: u64,
    pub instance_id: u32,
    pub category_id: u32,
    pub features: Vec<f32>,
}

/// Labeled feature vectors as produced by a frozen backbone.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    feature_dim: usize,
    examples: Vec<Example>,
}

impl FeatureDataset {
    pub fn new(feature_dim: usize, examples: Vec<Example>) -> Result<Self> {
        let mut ids = HashSet::with_capacity(examples.len());
        for e in &examples {
            if e.features.len() != feature_dim {
                return Err(Error::validation(format!(
                    "example {} has {} features, expected {feature_dim}",
                    e.example_id,
                    e.features.len()
                )));
            }
            if e.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::validation(format!(
                    "example {} has a non-finite feature",
                    e.example_id
                )));
            }
            if !ids.insert(e.example_id) {
                return Err(Error::validation(format!("duplicate example id {}", e.example_id)));
            }
        }
        Ok(Self { feature_dim, examples })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn categories(&self) -> BTreeSet<u32> {
        self.examples.iter().map(|e| e.category_id).collect()
    }

    /// Examples whose category is in `categories`, in original order.
    pub fn restrict_to(&self, categories: &BTreeSet<u32>) -> FeatureDataset {
        FeatureDataset {
            feature_dim: self.feature_dim,
            examples: self
                .examples
                .iter()
                .filter(|e| categories.contains(&e.category_id))
                .cloned()
                .collect(),
        }
    }

    /// Widens the selected examples' features into an `f64` matrix.
    pub fn feature_matrix(&self, indices: impl IntoIterator<Item = usize>) -> DenseMatrix {
        let mut data = Vec::new();
        let mut rows = 0;
        for i in indices {
            data.extend(self.examples[i].features.iter().map(|&v| v as f64));
            rows += 1;
        }
        DenseMatrix::new(rows, self.feature_dim, data).expect("dataset features are finite")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(20 + self.examples.len() * (16 + 4 * self.feature_dim));
        buf.extend_from_slice(FCL_MAGIC);
        buf.put_u32(FCL_VERSION);
        buf.put_u32(self.feature_dim as u32);
        buf.put_u64(self.examples.len() as u64);
        for e in &self.examples {
            buf.put_u64(e.example_id);
            buf.put_u32(e.instance_id);
            buf.put_u32(e.category_id);
            for &v in &e.features {
                buf.put_f32(v);
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4, "magic")? != FCL_MAGIC {
            return Err(Error::format(0, "bad magic, expected \"FCL1\""));
        }
        let version = r.u32("version")?;
        if version != FCL_VERSION {
            return Err(Error::format(4, format!("unsupported version {version}")));
        }
        let feature_dim = r.u32("feature_dim")? as usize;
        let n = r.u64("example count")?;
        let record = 16 + 4 * feature_dim;
        let mut examples = Vec::with_capacity((n as usize).min(r.remaining() / record.max(1)));
        for _ in 0..n {
            let at = r.offset();
            let example_id = r.u64("example_id")?;
            let instance_id = r.u32("instance_id")?;
            let category_id = r.u32("category_id")?;
            let mut features = Vec::with_capacity(feature_dim);
            for _ in 0..feature_dim {
                let v = r.f32("feature")?;
                if !v.is_finite() {
                    return Err(Error::validation(format!(
                        "non-finite feature in example {example_id} (record at byte {at})"
                    )));
                }
                features.push(v);
            }
            examples.push(Example {
                example_id,
                instance_id,
                category_id,
                features,
            });
        }
        if r.remaining() != 0 {
            return Err(Error::format(r.offset(), "trailing bytes after last record"));
        }
        Self::new(feature_dim, examples)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "example_id".to_string(),
            "instance_id".to_string(),
            "category_id".to_string(),
        ];
        header.extend((0..self.feature_dim).map(|i| format!("f{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for e in &self.examples {
            let mut rec = vec![
                e.example_id.to_string(),
                e.instance_id.to_string(),
                e.category_id.to_string(),
            ];
            rec.extend(e.features.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.into_inner()
            .map_err(|e| Error::validation(format!("csv writer: {e}")))
    }

    pub fn from_csv(bytes: &[u8]) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes);
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.len() < 3 || &header[0] != "example_id" || &header[1] != "instance_id" || &header[2] != "category_id"
        {
            return Err(Error::format(
                0,
                "csv header must start with example_id,instance_id,category_id",
            ));
        }
        let feature_dim = header.len() - 3;
        for (i, name) in header.iter().skip(3).enumerate() {
            if name != format!("f{i}") {
                return Err(Error::format(
                    0,
                    format!("csv column {} should be f{i}, found {name}", i + 3),
                ));
            }
        }
        let mut examples = Vec::new();
        for rec in rdr.records() {
            let rec = rec.map_err(csv_err)?;
            let line = rec.position().map_or(0, |p| p.line());
            let field = |i: usize| -> Result<&str> {
                rec.get(i).ok_or_else(|| {
                    Error::format(
                        rec.position().map_or(0, |p| p.byte()),
                        format!("line {line}: missing column {i}"),
                    )
                })
            };
            let parse_err = |what: &str| {
                Error::format(
                    rec.position().map_or(0, |p| p.byte()),
                    format!("line {line}: bad {what}"),
                )
            };
            let example_id = field(0)?.trim().parse().map_err(|_| parse_err("example_id"))?;
            let instance_id = field(1)?.trim().parse().map_err(|_| parse_err("instance_id"))?;
            let category_id = field(2)?.trim().parse().map_err(|_| parse_err("category_id"))?;
            let features = (0..feature_dim)
                .map(|i| field(i + 3)?.trim().parse::<f32>().map_err(|_| parse_err("feature")))
                .collect::<Result<Vec<_>>>()?;
            examples.push(Example {
                example_id,
                instance_id,
                category_id,
                features,
            });
        }
        Self::new(feature_dim, examples)
    }
}

const FCL_MAGIC: &[u8; 4] = b"FCL1";
const FCL_VERSION: u32 = 1;

fn csv_err(e: csv::Error) -> Error {
    let offset = e.position().map_or(0, |p| p.byte());
    Error::format(offset, format!("csv: {e}"))
}

fn is_csv(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"))
}

/// Reads a feature file; `.csv` paths use the CSV layout, anything else the
/// binary one.
pub fn read_feature_file(path: &Path) -> Result<FeatureDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if is_csv(path) {
        FeatureDataset::from_csv(&bytes)
    } else {
        FeatureDataset::from_bytes(&bytes)
    }
}

pub fn write_feature_file(dataset: &FeatureDataset, path: &Path) -> Result<()> {
    let bytes = if is_csv(path) {
        dataset.to_csv()?
    } else {
        dataset.to_bytes()
    };
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Splits so that every instance lands entirely in train or in validation.
///
/// Each category contributes `max(1, round(val_fraction × instances))`
/// validation instances, chosen by a seeded shuffle of its sorted instance
/// ids.
pub fn split_by_instance(
    dataset: &FeatureDataset,
    val_fraction: f64,
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::validation(format!(
            "val_fraction must be in (0, 1), got {val_fraction}"
        )));
    }
    let mut owner: HashMap<u32, u32> = HashMap::new();
    let mut instances: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
    for e in dataset.examples() {
        if let Some(&c) = owner.get(&e.instance_id) {
            if c != e.category_id {
                return Err(Error::validation(format!(
                    "instance {} appears under categories {c} and {}",
                    e.instance_id, e.category_id
                )));
            }
        }
        owner.insert(e.instance_id, e.category_id);
        instances.entry(e.category_id).or_default().insert(e.instance_id);
    }
    let mut val_instances = HashSet::new();
    for (&category, ids) in &instances {
        let n = ids.len();
        if n < 2 {
            return Err(Error::validation(format!(
                "category {category} has {n} instance(s); an instance-disjoint split needs at least 2"
            )));
        }
        let n_val = ((val_fraction * n as f64).round() as usize).clamp(1, n - 1);
        let mut ids: Vec<u32> = ids.iter().copied().collect();
        ids.shuffle(&mut rng::substream(seed, &[category as u64]));
        val_instances.extend(ids.into_iter().take(n_val));
    }
    let (val, train): (Vec<_>, Vec<_>) = dataset
        .examples()
        .iter()
        .cloned()
        .partition(|e| val_instances.contains(&e.instance_id));
    Ok((
        FeatureDataset::new(dataset.feature_dim, train)?,
        FeatureDataset::new(dataset.feature_dim, val)?,
    ))
}

/// Parameters of the synthetic category → instance → sample hierarchy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub categories: usize,
    pub instances_per_category: usize,
    pub samples_per_instance: usize,
    pub feature_dim: usize,
    pub category_spread: f64,
    pub instance_spread: f64,
    pub noise_spread: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The default desk-scale benchmark: 10 categories, dimension 64,
    /// spreads 10:3:1, 20 instances of 50 samples each.
    fn default() -> Self {
        Self {
            categories: 10,
            instances_per_category: 20,
            samples_per_instance: 50,
            feature_dim: 64,
            category_spread: 1.0,
            instance_spread: 0.3,
            noise_spread: 0.1,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.categories == 0
            || self.instances_per_category == 0
            || self.samples_per_instance == 0
            || self.feature_dim == 0
        {
            return Err(Error::validation("synthetic counts and dimension must be positive"));
        }
        let spreads = [self.category_spread, self.instance_spread, self.noise_spread];
        if spreads.iter().any(|s| !s.is_finite()) {
            return Err(Error::validation("spreads must be finite"));
        }
        if !(self.category_spread > self.instance_spread
            && self.instance_spread > self.noise_spread
            && self.noise_spread >= 0.0)
        {
            return Err(Error::validation(
                "spreads must satisfy category > instance > noise >= 0",
            ));
        }
        Ok(())
    }
}

fn gaussian_vector(stream: &mut rng::Stream, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(stream);
            z * scale
        })
        .collect()
}

/// Draws the synthetic dataset. Category `c` has id `c`; instance ids and
/// example ids are assigned consecutively from 0.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<FeatureDataset> {
    spec.validate()?;
    let dim = spec.feature_dim;
    let mut examples = Vec::with_capacity(spec.categories * spec.instances_per_category * spec.samples_per_instance);
    let mut instance_id = 0u32;
    let mut example_id = 0u64;
    for c in 0..spec.categories {
        let center = gaussian_vector(
            &mut rng::substream(spec.seed, &[0, c as u64]),
            dim,
            spec.category_spread,
        );
        for _ in 0..spec.instances_per_category {
            let mut s = rng::substream(spec.seed, &[1, instance_id as u64]);
            let offset = gaussian_vector(&mut s, dim, spec.instance_spread);
            let inst: Vec<f64> = center.iter().zip(&offset).map(|(a, b)| a + b).collect();
            for _ in 0..spec.samples_per_instance {
                let noise = gaussian_vector(&mut s, dim, spec.noise_spread);
                let features = inst.iter().zip(&noise).map(|(a, b)| (a + b) as f32).collect();
                examples.push(Example {
                    example_id,
                    instance_id,
                    category_id: c as u32,
                    features,
                });
                example_id += 1;
            }
            instance_id += 1;
        }
    }
    FeatureDataset::new(dim, examples)
}

/// How categories are grouped into sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SequenceLayout {
    /// Sequences of `k` categories each.
    EqualSplit(usize),
    /// 25 categories in 5 sequences of 5.
    HowsStandard,
    /// 25 categories: 3 in the first sequence, then 11 sequences of 2.
    HowsLong,
}

impl SequenceLayout {
    pub fn sizes(&self, n_categories: usize) -> Result<Vec<usize>> {
        match *self {
            SequenceLayout::EqualSplit(k) => {
                if k == 0 || n_categories == 0 || !n_categories.is_multiple_of(k) {
                    return Err(Error::validation(format!(
                        "{n_categories} categories cannot be split into sequences of {k}"
                    )));
                }
                Ok(vec![k; n_categories / k])
            }
            SequenceLayout::HowsStandard => {
                if n_categories != 25 {
                    return Err(Error::validation(format!(
                        "the standard 5x5 layout needs 25 categories, got {n_categories}"
                    )));
                }
                Ok(vec![5; 5])
            }
            SequenceLayout::HowsLong => {
                if n_categories != 25 {
                    return Err(Error::validation(format!(
                        "the long layout needs 25 categories, got {n_categories}"
                    )));
                }
                let mut sizes = vec![3];
                sizes.extend(std::iter::repeat_n(2, 11));
                Ok(sizes)
            }
        }
    }
}

impl FromStr for SequenceLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hows" | "hows-standard" => Ok(SequenceLayout::HowsStandard),
            "hows-long" => Ok(SequenceLayout::HowsLong),
            _ => s
                .strip_prefix("equal:")
                .and_then(|k| k.parse().ok())
                .map(SequenceLayout::EqualSplit)
                .ok_or_else(|| {
                    Error::validation(format!("unknown layout {s:?}; expected equal:<k>, hows or hows-long"))
                }),
        }
    }
}

impl fmt::Display for SequenceLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SequenceLayout::EqualSplit(k) => write!(f, "equal:{k}"),
            SequenceLayout::HowsStandard => f.write_str("hows"),
            SequenceLayout::HowsLong => f.write_str("hows-long"),
        }
    }
}

/// Which categories arrive in which sequence, and where the data lives.
///
/// Stored as TOML with keys `sequences`, `train`, `val` and optional
/// `notes`. Relative paths are resolved against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceManifest {
    pub sequences: Vec<Vec<u32>>,
    pub train: PathBuf,
    pub val: PathBuf,
    #[serde(default)]
    pub notes: String,
}

impl SequenceManifest {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (s, cats) in self.sequences.iter().enumerate() {
            if cats.is_empty() {
                return Err(Error::validation(format!("sequence {s} has no categories")));
            }
            for &c in cats {
                if !seen.insert(c) {
                    return Err(Error::validation(format!(
                        "category {c} appears in more than one sequence (again in sequence {s})"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Checks that every category in `dataset` belongs to some sequence.
    pub fn check_covers(&self, dataset: &FeatureDataset, what: &str) -> Result<()> {
        let known: HashSet<u32> = self.sequences.iter().flatten().copied().collect();
        for c in dataset.categories() {
            if !known.contains(&c) {
                return Err(Error::validation(format!(
                    "{what} data has category {c}, which no sequence contains"
                )));
            }
        }
        Ok(())
    }

    /// Sequence index of every category.
    pub fn sequence_of(&self) -> HashMap<u32, usize> {
        self.sequences
            .iter()
            .enumerate()
            .flat_map(|(s, cats)| cats.iter().map(move |&c| (c, s)))
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::validation(format!("manifest encoding: {e}")))
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let m: SequenceManifest = toml::from_str(text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, manifest_path: &Path, file: &Path) -> PathBuf {
        if file.is_absolute() {
            file.to_path_buf()
        } else {
            manifest_path.parent().unwrap_or_else(|| Path::new(".")).join(file)
        }
    }
}

/// Assigns the categories in `categories` to sequences after a seeded
/// shuffle of their sorted order.
pub fn make_manifest(
    categories: &BTreeSet<u32>,
    layout: SequenceLayout,
    seed: u64,
    train: PathBuf,
    val: PathBuf,
) -> Result<SequenceManifest> {
    let sizes = layout.sizes(categories.len())?;
    let mut order: Vec<u32> = categories.iter().copied().collect();
    order.shuffle(&mut rng::stream(seed));
    let mut sequences = Vec::with_capacity(sizes.len());
    let mut rest = order.as_slice();
    for k in sizes {
        let (head, tail) = rest.split_at(k);
        sequences.push(head.to_vec());
        rest = tail;
    }
    let m = SequenceManifest {
        sequences,
        train,
        val,
        notes: format!("layout {layout}, seed {seed}"),
    };
    m.validate()?;
    Ok(m)
}
