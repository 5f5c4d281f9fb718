//! Labeled feature datasets: synthetic clusters, CSV ingestion, and
//! query/database/train splits.
//!
//! CSV schema: `id,labels,f1,...,fd` where `labels` is a semicolon-joined
//! list of integer label ids. Two items are relevant to each other iff their
//! label sets intersect.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Non-empty sorted set of label ids.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelSet(Vec<u32>);

impl LabelSet {
    pub fn new(mut labels: Vec<u32>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidInput("label set must not be empty".into()));
        }
        labels.sort_unstable();
        labels.dedup();
        Ok(Self(labels))
    }

    pub fn single(label: u32) -> Self {
        Self(vec![label])
    }

    pub fn labels(&self) -> &[u32] {
        &self.0
    }

    /// Smallest label id; used for stratification.
    pub fn primary(&self) -> u32 {
        self.0[0]
    }

    pub fn intersects(&self, other: &LabelSet) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.0.len() && j < other.0.len() {
            match self.0[i].cmp(&other.0[j]) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => return true,
            }
        }
        false
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub database: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    ids: Vec<String>,
    features: Array2<f64>,
    labels: Vec<LabelSet>,
    splits: Option<Splits>,
}

impl LabeledDataset {
    pub fn new(ids: Vec<String>, features: Array2<f64>, labels: Vec<LabelSet>) -> Result<Self> {
        let n = features.nrows();
        if ids.len() != n || labels.len() != n {
            return Err(Error::InvalidInput(format!(
                "{} features, {} ids, {} label sets",
                n,
                ids.len(),
                labels.len()
            )));
        }
        if features.ncols() == 0 {
            return Err(Error::InvalidInput("feature dimension is zero".into()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite feature value".into()));
        }
        Ok(Self {
            ids,
            features,
            labels,
            splits: None,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn features(&self) -> ArrayView2<'_, f64> {
        self.features.view()
    }

    pub fn feature(&self, i: usize) -> ArrayView1<'_, f64> {
        self.features.row(i)
    }

    pub fn labels(&self) -> &[LabelSet] {
        &self.labels
    }

    pub fn splits(&self) -> Option<&Splits> {
        self.splits.as_ref()
    }

    pub fn relevant(&self, i: usize, j: usize) -> bool {
        self.labels[i].intersects(&self.labels[j])
    }

    /// Rows `indices` stacked in order.
    pub fn select_features(&self, indices: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), indices)
    }

    pub fn select_labels(&self, indices: &[usize]) -> Vec<LabelSet> {
        indices.iter().map(|&i| self.labels[i].clone()).collect()
    }

    /// Per-dimension z-scoring. Constant dimensions are only centered.
    pub fn standardize(&mut self) {
        let n = self.len().max(1) as f64;
        for mut col in self.features.columns_mut() {
            let mean = col.sum() / n;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            col.mapv_inplace(|v| if sd > 0.0 { (v - mean) / sd } else { v - mean });
        }
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("id,labels");
        for f in 1..=self.dim() {
            write!(out, ",f{f}").unwrap();
        }
        out.push('\n');
        for (i, row) in self.features.rows().into_iter().enumerate() {
            out.push_str(&self.ids[i]);
            out.push(',');
            let labels: Vec<String> = self.labels[i].0.iter().map(u32::to_string).collect();
            out.push_str(&labels.join(";"));
            for v in row {
                write!(out, ",{v}").unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }
}

pub fn parse_csv(text: &str) -> Result<LabeledDataset> {
    let mut ids = Vec::new();
    let mut labels = Vec::new();
    let mut values = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = line.trim_end_matches('\r');
        if line.is_empty() || (lineno == 0 && line.starts_with("id,")) {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: line_no, msg };
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default();
        let label_field = fields
            .next()
            .ok_or_else(|| parse_err("missing labels column".into()))?;
        let set: Vec<u32> = label_field
            .split(';')
            .map(|l| {
                l.trim()
                    .parse::<u32>()
                    .map_err(|_| parse_err(format!("bad label {l:?}")))
            })
            .collect::<Result<_>>()?;
        let set = LabelSet::new(set).map_err(|_| parse_err("empty label set".into()))?;
        let start = values.len();
        for (f, v) in fields.enumerate() {
            let x: f64 = v
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad feature f{} = {v:?}", f + 1)))?;
            if !x.is_finite() {
                return Err(parse_err(format!("non-finite feature f{}", f + 1)));
            }
            values.push(x);
        }
        let d = values.len() - start;
        match dim {
            None if d == 0 => return Err(parse_err("no feature columns".into())),
            None => dim = Some(d),
            Some(expected) if expected != d => {
                return Err(parse_err(format!("expected {expected} features, found {d}")))
            }
            _ => {}
        }
        ids.push(id.to_string());
        labels.push(set);
    }
    let dim = dim.ok_or(Error::Parse {
        line: 0,
        msg: "file contains no rows".into(),
    })?;
    let features = Array2::from_shape_vec((ids.len(), dim), values).expect("row lengths checked");
    LabeledDataset::new(ids, features, labels)
}

pub fn load_features(path: &Path) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_csv(&text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub per_class: usize,
    pub dim: usize,
    pub sigma: f64,
    /// Probability that an item carries a second label; 0 gives a
    /// single-label dataset.
    #[serde(default)]
    pub overlap: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 20,
            per_class: 150,
            dim: 64,
            sigma: 0.15,
            overlap: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.per_class == 0 || self.dim == 0 {
            return Err(Error::Config("synthetic spec sizes must be positive".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("invalid spread {}", self.sigma)));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!(
                "overlap probability {} outside [0,1)",
                self.overlap
            )));
        }
        if self.overlap > 0.0 && self.num_classes < 2 {
            return Err(Error::Config("multi-label mode needs two classes".into()));
        }
        Ok(())
    }
}

/// Gaussian clusters around class centers on the unit sphere. Items are
/// ordered class by class. A multi-label item is placed around the mean of
/// its classes' centers.
pub fn generate_clusters(spec: &SyntheticSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = random_unit_vectors(spec.num_classes, spec.dim, &mut rng);
    let n = spec.num_classes * spec.per_class;
    let mut features = Array2::zeros((n, spec.dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.num_classes {
        for k in 0..spec.per_class {
            let i = c * spec.per_class + k;
            let mut set = vec![c as u32];
            if spec.overlap > 0.0 && rng.random::<f64>() < spec.overlap {
                let other = (c + rng.random_range(1..spec.num_classes)) % spec.num_classes;
                set.push(other as u32);
            }
            let mut row = features.row_mut(i);
            for &l in &set {
                row += &centers.row(l as usize);
            }
            row /= set.len() as f64;
            for v in row.iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *v += spec.sigma * z;
            }
            labels.push(LabelSet::new(set)?);
        }
    }
    LabeledDataset::new((0..n).map(|i| i.to_string()).collect(), features, labels)
}

fn random_unit_vectors(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut out = Array2::zeros((n, dim));
    for mut row in out.rows_mut() {
        loop {
            row.mapv_inplace(|_: f64| rng.sample::<f64, _>(StandardNormal));
            let norm = row.dot(&row).sqrt();
            if norm > 1e-12 {
                row /= norm;
                break;
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySize {
    /// Fraction of each class, rounded, at least one item.
    Fraction(f64),
    PerClass(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub query: QuerySize,
    /// Cap on training items per class drawn from the database.
    #[serde(default)]
    pub train_per_class: Option<usize>,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            query: QuerySize::Fraction(0.1),
            train_per_class: None,
        }
    }
}

/// Stratified split by primary label: each class contributes its share of
/// queries, the rest of the class goes to the database, and training items
/// are drawn from the database.
pub fn make_splits(mut ds: LabeledDataset, cfg: &SplitConfig, seed: u64) -> Result<LabeledDataset> {
    if let QuerySize::Fraction(f) = cfg.query {
        if !(f > 0.0 && f < 1.0) {
            return Err(Error::Config(format!("query fraction {f} outside (0,1)")));
        }
    }
    if cfg.train_per_class == Some(0) {
        return Err(Error::Config("train_per_class must be positive".into()));
    }
    let mut classes: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, l) in ds.labels.iter().enumerate() {
        classes.entry(l.primary()).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut splits = Splits::default();
    for (class, mut members) in classes {
        let n = members.len();
        let nq = match cfg.query {
            QuerySize::Fraction(f) => ((f * n as f64).round() as usize).max(1),
            QuerySize::PerClass(k) => k,
        };
        if nq >= n {
            return Err(Error::Split(format!(
                "class {class} has {n} items, cannot hold out {nq} queries and keep a database item"
            )));
        }
        members.shuffle(&mut rng);
        splits.query.extend_from_slice(&members[..nq]);
        let db = &members[nq..];
        splits.database.extend_from_slice(db);
        let ntrain = cfg.train_per_class.map_or(db.len(), |c| c.min(db.len()));
        splits.train.extend_from_slice(&db[..ntrain]);
    }
    splits.query.sort_unstable();
    splits.database.sort_unstable();
    splits.train.sort_unstable();
    ds.splits = Some(splits);
    Ok(ds)
}
