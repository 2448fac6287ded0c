//! Dataset records, JSON Lines IO, stratified splitting, label statistics
//! and the synthetic generator.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{build_graph, bronze_ding_eras, GraphError, GraphSpec, NodeKind, RelationGraph};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    SchemaViolation { line: usize, message: String },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Literature,
    Excavation,
    Museum,
}

/// Pixel box around one annotated characteristic. Carried as metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub characteristic: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

/// One artifact. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DingRecord {
    pub id: String,
    pub dynasty: String,
    pub period: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<String>,
    #[serde(default)]
    pub characteristics: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bboxes: Option<Vec<BoundingBox>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<Source>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
}

/// Labels of a record as local indices within each node kind.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordLabels {
    pub dynasty: usize,
    pub period: usize,
    pub shape: usize,
    pub characteristics: Vec<usize>,
}

impl RecordLabels {
    /// Global node indices for the graph losses.
    pub fn to_sample(&self, graph: &RelationGraph) -> crate::losses::SampleLabels {
        crate::losses::SampleLabels {
            period: graph.period(self.period),
            shape: graph.shape(self.shape),
            characteristics: self.characteristics.iter().map(|&c| graph.characteristic(c)).collect(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    graph: Arc<RelationGraph>,
    records: Vec<DingRecord>,
    labels: Vec<RecordLabels>,
}

fn resolve(graph: &RelationGraph, record: &DingRecord) -> Result<RecordLabels, String> {
    let local = |name: &str, kind: NodeKind, offset: usize| {
        graph
            .find_kind(name, kind)
            .map(|i| i - offset)
            .ok_or_else(|| format!("unknown {kind:?} `{name}`"))
    };
    let dynasty = local(&record.dynasty, NodeKind::Dynasty, 0)?;
    let period = local(&record.period, NodeKind::Period, graph.n_dynasties())?;
    if graph.period_parent(period) != dynasty {
        return Err(format!("period `{}` does not belong to dynasty `{}`", record.period, record.dynasty));
    }
    let shape_name = record.shape.as_deref().ok_or("missing shape")?;
    let shape = local(shape_name, NodeKind::Shape, graph.n_era())?;
    let mut characteristics = Vec::with_capacity(record.characteristics.len());
    for c in &record.characteristics {
        let idx = local(c, NodeKind::Characteristic, graph.n_era() + graph.n_shapes())?;
        if characteristics.contains(&idx) {
            return Err(format!("characteristic `{c}` listed twice"));
        }
        characteristics.push(idx);
    }
    Ok(RecordLabels {
        dynasty,
        period,
        shape,
        characteristics,
    })
}

impl Dataset {
    /// Validate records against the graph.
    pub fn new(graph: Arc<RelationGraph>, records: Vec<DingRecord>) -> Result<Self, DataError> {
        let labels = records
            .iter()
            .enumerate()
            .map(|(i, r)| resolve(&graph, r).map_err(|message| DataError::SchemaViolation { line: i + 1, message }))
            .collect::<Result<_, _>>()?;
        Ok(Dataset { graph, records, labels })
    }

    pub fn graph(&self) -> &RelationGraph {
        &self.graph
    }

    pub fn shared_graph(&self) -> Arc<RelationGraph> {
        Arc::clone(&self.graph)
    }

    pub fn records(&self) -> &[DingRecord] {
        &self.records
    }

    pub fn labels(&self) -> &[RecordLabels] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.records[i].split == Some(split)).collect()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.records.iter().find_map(|r| r.features.as_ref().map(Vec::len))
    }

    /// Stack the feature vectors of the given records.
    pub fn feature_matrix(&self, indices: &[usize]) -> Result<Tensor, DataError> {
        let dim = self.feature_dim().ok_or_else(|| DataError::BadConfig("records carry no features".into()))?;
        let mut data = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            match &self.records[i].features {
                Some(f) if f.len() == dim => data.extend_from_slice(f),
                _ => {
                    return Err(DataError::SchemaViolation {
                        line: i + 1,
                        message: format!("expected {dim} features"),
                    })
                }
            }
        }
        Tensor::new(vec![indices.len(), dim], data).map_err(|e| DataError::BadConfig(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DataError> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        self.write_jsonl(&mut out)?;
        out.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, out: &mut W) -> Result<(), DataError> {
        for r in &self.records {
            let line = serde_json::to_string(r).map_err(|e| DataError::BadConfig(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Read a JSON Lines dataset and validate it against `graph`.
///
/// Blank lines are skipped; line numbers in errors are 1-based file lines.
pub fn load_dataset(path: impl AsRef<Path>, graph: Arc<RelationGraph>) -> Result<Dataset, DataError> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut records = Vec::new();
    let mut lines = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: DingRecord = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(record);
        lines.push(i + 1);
    }
    Dataset::new(graph, records).map_err(|e| match e {
        DataError::SchemaViolation { line, message } => DataError::SchemaViolation {
            line: lines[line - 1],
            message,
        },
        other => other,
    })
}

/// How fractional per-stratum quotas are turned into counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Rounding {
    /// Floors plus one extra record for the largest remainders; every
    /// count is within one record of its quota.
    #[default]
    LargestRemainder,
    /// Floor every split but the last, which takes the rest.
    Floor,
}

/// Split counts for one stratum of `n` records.
pub fn allocate(n: usize, ratios: &[f64], rounding: Rounding) -> Vec<usize> {
    let total: f64 = ratios.iter().sum();
    let quotas: Vec<f64> = ratios.iter().map(|r| n as f64 * r / total).collect();
    // Guard against quotas like 3.9999999 from the division.
    let mut counts: Vec<usize> = quotas.iter().map(|q| (q + 1e-9).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut left = n.saturating_sub(assigned);
    match rounding {
        Rounding::Floor => {
            if let Some(last) = counts.last_mut() {
                *last += left;
            }
        }
        Rounding::LargestRemainder => {
            let mut order: Vec<usize> = (0..ratios.len()).collect();
            order.sort_by(|&a, &b| {
                let ra = quotas[a] - counts[a] as f64;
                let rb = quotas[b] - counts[b] as f64;
                rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
            });
            for &j in order.iter().cycle() {
                if left == 0 {
                    break;
                }
                counts[j] += 1;
                left -= 1;
            }
        }
    }
    counts
}

/// Tag records train/val/test, stratified by period.
///
/// Within each period the records are shuffled with `seed` and cut
/// according to `ratios` (train, val, test).
pub fn split_dataset(dataset: &Dataset, ratios: [f64; 3], seed: u64, rounding: Rounding) -> Result<Dataset, DataError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
        return Err(DataError::BadConfig("split ratios must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_period: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, l) in dataset.labels.iter().enumerate() {
        by_period.entry(l.period).or_default().push(i);
    }
    let mut out = dataset.clone();
    for members in by_period.values_mut() {
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), &ratios, rounding);
        let mut start = 0;
        for (split, count) in Split::ALL.iter().zip(counts) {
            for &i in &members[start..start + count] {
                out.records[i].split = Some(*split);
            }
            start += count;
        }
    }
    Ok(out)
}

/// Per-split record counts and the largest per-period deviation from the
/// exact ratio quota.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSummary {
    pub totals: [usize; 3],
    pub max_period_deviation: f64,
}

pub fn split_summary(dataset: &Dataset, ratios: [f64; 3]) -> SplitSummary {
    let total_ratio: f64 = ratios.iter().sum();
    let mut per_period: BTreeMap<usize, [usize; 3]> = BTreeMap::new();
    let mut totals = [0; 3];
    for (r, l) in dataset.records.iter().zip(&dataset.labels) {
        if let Some(s) = r.split {
            let j = s as usize;
            totals[j] += 1;
            per_period.entry(l.period).or_default()[j] += 1;
        }
    }
    let mut max_period_deviation: f64 = 0.0;
    for counts in per_period.values() {
        let n: usize = counts.iter().sum();
        for j in 0..3 {
            let quota = n as f64 * ratios[j] / total_ratio;
            max_period_deviation = max_period_deviation.max((counts[j] as f64 - quota).abs());
        }
    }
    SplitSummary {
        totals,
        max_period_deviation,
    }
}

/// Shannon entropy in bits of an empirical distribution given by counts.
pub fn entropy_bits(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let n = total as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Shape,
    Characteristic,
}

impl std::str::FromStr for Attribute {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "shape" => Ok(Attribute::Shape),
            "characteristic" | "char" => Ok(Attribute::Characteristic),
            other => Err(format!("unknown attribute `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributeValueStats {
    pub value: String,
    pub count: usize,
    pub entropy: f64,
}

/// Entropy of the period labels, conditional entropy given an attribute,
/// and the information gain, all in bits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetStats {
    pub attribute: Attribute,
    /// Records for shape; (record, characteristic) pairs for characteristics.
    pub observations: usize,
    pub entropy: f64,
    pub conditional_entropy: f64,
    pub gain: f64,
    pub values: Vec<AttributeValueStats>,
}

impl DatasetStats {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self.values.iter().map(|v| v.value.len()).max().unwrap_or(5).max(5);
        let _ = writeln!(out, "attribute        {:?}", self.attribute);
        let _ = writeln!(out, "observations     {}", self.observations);
        let _ = writeln!(out, "H(D)             {:.3}", self.entropy);
        let _ = writeln!(out, "H(D|A)           {:.3}", self.conditional_entropy);
        let _ = writeln!(out, "g(D,A)           {:.3}", self.gain);
        let _ = writeln!(out);
        let _ = writeln!(out, "{:<width$}  {:>7}  {:>8}", "value", "count", "H(D|a)");
        for v in &self.values {
            let _ = writeln!(out, "{:<width$}  {:>7}  {:>8.3}", v.value, v.count, v.entropy);
        }
        out
    }
}

/// Information gain of an attribute about the period label.
///
/// For characteristics every (record, characteristic) annotation is one
/// observation; the entropy of the period is taken over the same
/// observations so that the gain stays non-negative.
pub fn dataset_stats(dataset: &Dataset, attribute: Attribute) -> Result<DatasetStats, DataError> {
    if dataset.is_empty() {
        return Err(DataError::EmptyDataset);
    }
    let g = dataset.graph();
    let n_periods = g.n_periods();
    let (n_values, offset) = match attribute {
        Attribute::Shape => (g.n_shapes(), g.n_era()),
        Attribute::Characteristic => (g.n_chars(), g.n_era() + g.n_shapes()),
    };
    // joint[value][period]
    let mut joint = vec![vec![0usize; n_periods]; n_values];
    for l in &dataset.labels {
        match attribute {
            Attribute::Shape => joint[l.shape][l.period] += 1,
            Attribute::Characteristic => {
                for &c in &l.characteristics {
                    joint[c][l.period] += 1;
                }
            }
        }
    }
    let observations: usize = joint.iter().flatten().sum();
    if observations == 0 {
        return Err(DataError::EmptyDataset);
    }
    let marginal: Vec<usize> = (0..n_periods).map(|p| joint.iter().map(|row| row[p]).sum()).collect();
    let entropy = entropy_bits(&marginal);
    let mut conditional_entropy = 0.0;
    let mut values = Vec::new();
    for (v, row) in joint.iter().enumerate() {
        let count: usize = row.iter().sum();
        if count == 0 {
            continue;
        }
        let h = entropy_bits(row);
        conditional_entropy += count as f64 / observations as f64 * h;
        values.push(AttributeValueStats {
            value: g.nodes()[offset + v].name.clone(),
            count,
            entropy: h,
        });
    }
    Ok(DatasetStats {
        attribute,
        observations,
        entropy,
        conditional_entropy,
        gain: entropy - conditional_entropy,
        values,
    })
}

/// Synthetic corpus description. Missing tables are drawn from `seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    /// Periods under each dynasty; `[2, 3, 3, 3]` uses the bronze ding era names.
    pub periods_per_dynasty: Vec<usize>,
    pub n_shapes: usize,
    pub n_chars: usize,
    /// Period sampling weights; uniform when absent.
    pub period_prior: Option<Vec<f64>>,
    /// Exact per-period record counts; overrides `samples` and the prior.
    pub period_counts: Option<Vec<usize>>,
    /// Row per period, categorical over shapes.
    pub shape_given_period: Option<Vec<Vec<f64>>>,
    /// Row per period, independent Bernoulli rate per characteristic.
    pub char_given_period: Option<Vec<Vec<f64>>>,
    /// Shapes with non-zero probability per period, when drawing tables.
    pub shapes_per_period: usize,
    /// Characteristics with non-zero rate per period, when drawing tables.
    pub chars_per_period: usize,
    pub feature_dim: usize,
    /// Standard deviation of the feature noise relative to a unit embedding.
    pub noise: f64,
    pub period_scale: f64,
    pub shape_scale: f64,
    pub char_scale: f64,
    pub samples: usize,
    pub seed: u64,
    /// Optional train/val/test ratios applied after generation.
    pub split: Option<[f64; 3]>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            periods_per_dynasty: vec![2, 3, 3, 3],
            n_shapes: 8,
            n_chars: 16,
            period_prior: None,
            period_counts: None,
            shape_given_period: None,
            char_given_period: None,
            shapes_per_period: 3,
            chars_per_period: 5,
            feature_dim: 64,
            noise: 1.0,
            period_scale: 1.0,
            shape_scale: 1.0,
            char_scale: 1.0,
            samples: 3000,
            seed: 0,
            split: None,
        }
    }
}

fn bad(msg: impl Into<String>) -> DataError {
    DataError::BadConfig(msg.into())
}

fn check_probability_rows(rows: &[Vec<f64>], n_rows: usize, width: usize, normalized: bool, what: &str) -> Result<(), DataError> {
    if rows.len() != n_rows || rows.iter().any(|r| r.len() != width) {
        return Err(bad(format!("{what} must be {n_rows} x {width}")));
    }
    for (i, row) in rows.iter().enumerate() {
        if row.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(bad(format!("{what} row {i} has entries outside [0, 1]")));
        }
        if normalized && (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(bad(format!("{what} row {i} does not sum to 1")));
        }
    }
    Ok(())
}

/// Pick `k` distinct columns for each row, making sure every column is used.
fn draw_support(rng: &mut ChaCha8Rng, rows: usize, cols: usize, k: usize) -> Vec<Vec<usize>> {
    let k = k.clamp(1, cols);
    let mut support: Vec<Vec<usize>> = vec![Vec::new(); rows];
    // Cover each column once, round-robin over rows.
    let mut cover: Vec<usize> = (0..cols).collect();
    cover.shuffle(rng);
    for (i, c) in cover.into_iter().enumerate() {
        support[i % rows].push(c);
    }
    for row in support.iter_mut() {
        while row.len() < k {
            let c = rng.random_range(0..cols);
            if !row.contains(&c) {
                row.push(c);
            }
        }
        row.sort_unstable();
    }
    support
}

impl SynthConfig {
    fn n_periods(&self) -> usize {
        self.periods_per_dynasty.iter().sum()
    }

    fn validate(&self) -> Result<(), DataError> {
        let n_periods = self.n_periods();
        if self.periods_per_dynasty.is_empty() || self.periods_per_dynasty.contains(&0) {
            return Err(bad("every dynasty needs at least one period"));
        }
        if self.n_shapes == 0 || self.feature_dim == 0 {
            return Err(bad("n_shapes and feature_dim must be positive"));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(bad("noise must be >= 0"));
        }
        if let Some(prior) = &self.period_prior {
            if prior.len() != n_periods || prior.iter().any(|p| p.is_nan() || *p < 0.0) || prior.iter().sum::<f64>() <= 0.0 {
                return Err(bad("period_prior needs one non-negative weight per period"));
            }
        }
        if let Some(counts) = &self.period_counts {
            if counts.len() != n_periods {
                return Err(bad("period_counts needs one entry per period"));
            }
        }
        if let Some(t) = &self.shape_given_period {
            check_probability_rows(t, n_periods, self.n_shapes, true, "shape_given_period")?;
        }
        if let Some(t) = &self.char_given_period {
            check_probability_rows(t, n_periods, self.n_chars, false, "char_given_period")?;
        }
        Ok(())
    }

    /// The relation graph implied by the tables: an attribute's parents are
    /// the periods that give it non-zero probability.
    fn build_graph(&self, shape_table: &[Vec<f64>], char_table: &[Vec<f64>]) -> Result<RelationGraph, DataError> {
        let mut spec = if self.periods_per_dynasty == [2, 3, 3, 3] {
            bronze_ding_eras()
        } else {
            let mut spec = GraphSpec::default();
            let mut p = 0;
            for (d, &k) in self.periods_per_dynasty.iter().enumerate() {
                spec = spec.node(format!("dynasty-{d}"), NodeKind::Dynasty);
                for _ in 0..k {
                    spec = spec.node(format!("period-{p}"), NodeKind::Period).edge(format!("dynasty-{d}"), format!("period-{p}"));
                    p += 1;
                }
            }
            spec
        };
        let period_names: Vec<String> = spec
            .nodes
            .iter()
            .filter(|(_, k)| *k == NodeKind::Period)
            .map(|(n, _)| n.clone())
            .collect();
        for (prefix, kind, table, width) in [
            ("shape", NodeKind::Shape, shape_table, self.n_shapes),
            ("char", NodeKind::Characteristic, char_table, self.n_chars),
        ] {
            for a in 0..width {
                let name = format!("{prefix}-{a}");
                spec = spec.node(name.clone(), kind);
                for (p, row) in table.iter().enumerate() {
                    if row[a] > 0.0 {
                        spec = spec.edge(period_names[p].clone(), name.clone());
                    }
                }
            }
        }
        build_graph(&spec).map_err(|e| bad(format!("tables imply an invalid graph: {e}")))
    }
}

/// Generate a labelled corpus with feature vectors.
///
/// Period ~ prior (or exact counts), shape ~ categorical given the period,
/// each characteristic ~ Bernoulli given the period. Features are the sum
/// of fixed random embeddings of the period, the shape and every present
/// characteristic, plus isotropic Gaussian noise. Embedding entries are
/// `N(0, 1/feature_dim)` so an embedding has unit expected squared norm.
pub fn synth_generate(config: &SynthConfig) -> Result<Dataset, DataError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n_periods = config.n_periods();
    let dim = config.feature_dim;

    let shape_table = match &config.shape_given_period {
        Some(t) => t.clone(),
        None => draw_support(&mut rng, n_periods, config.n_shapes, config.shapes_per_period)
            .into_iter()
            .map(|support| {
                let weights: Vec<f64> = support.iter().map(|_| rng.random_range(0.2..1.0)).collect();
                let total: f64 = weights.iter().sum();
                let mut row = vec![0.0; config.n_shapes];
                for (&s, w) in support.iter().zip(weights) {
                    row[s] = w / total;
                }
                row
            })
            .collect(),
    };
    let char_table = match &config.char_given_period {
        Some(t) => t.clone(),
        None if config.n_chars == 0 => vec![Vec::new(); n_periods],
        None => draw_support(&mut rng, n_periods, config.n_chars, config.chars_per_period)
            .into_iter()
            .map(|support| {
                let mut row = vec![0.0; config.n_chars];
                for &c in &support {
                    row[c] = rng.random_range(0.3..0.9);
                }
                row
            })
            .collect(),
    };
    let graph = Arc::new(config.build_graph(&shape_table, &char_table)?);

    let unit = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).map_err(|e| bad(e.to_string()))?;
    let mut embed = |count: usize, scale: f64| -> Vec<Vec<f64>> {
        (0..count)
            .map(|_| (0..dim).map(|_| scale * unit.sample(&mut rng)).collect())
            .collect()
    };
    let period_emb = embed(n_periods, config.period_scale);
    let shape_emb = embed(config.n_shapes, config.shape_scale);
    let char_emb = embed(config.n_chars, config.char_scale);

    let periods: Vec<usize> = match &config.period_counts {
        Some(counts) => {
            let mut all: Vec<usize> = counts.iter().enumerate().flat_map(|(p, &c)| std::iter::repeat_n(p, c)).collect();
            all.shuffle(&mut rng);
            all
        }
        None => {
            let prior = config.period_prior.clone().unwrap_or_else(|| vec![1.0; n_periods]);
            let dist = rand::distr::weighted::WeightedIndex::new(&prior).map_err(|e| bad(e.to_string()))?;
            (0..config.samples).map(|_| dist.sample(&mut rng)).collect()
        }
    };
    if periods.is_empty() {
        return Err(DataError::EmptyDataset);
    }

    let mut records = Vec::with_capacity(periods.len());
    for (i, &p) in periods.iter().enumerate() {
        let shape = rand::distr::weighted::WeightedIndex::new(&shape_table[p])
            .map_err(|e| bad(format!("shape_given_period row {p}: {e}")))?
            .sample(&mut rng);
        let chars: Vec<usize> = (0..config.n_chars).filter(|&c| rng.random_bool(char_table[p][c])).collect();
        let mut x = period_emb[p].clone();
        for (xi, s) in x.iter_mut().zip(&shape_emb[shape]) {
            *xi += s;
        }
        for &c in &chars {
            for (xi, e) in x.iter_mut().zip(&char_emb[c]) {
                *xi += e;
            }
        }
        if config.noise > 0.0 {
            for xi in x.iter_mut() {
                *xi += config.noise * unit.sample(&mut rng);
            }
        }
        let name = |idx: usize| graph.nodes()[idx].name.clone();
        records.push(DingRecord {
            id: format!("ding-{i:05}"),
            dynasty: name(graph.period_parent(p)),
            period: name(graph.period(p)),
            shape: Some(name(graph.shape(shape))),
            characteristics: chars.iter().map(|&c| name(graph.characteristic(c))).collect(),
            bboxes: None,
            source: None,
            split: None,
            features: Some(x),
        });
    }
    let dataset = Dataset::new(graph, records)?;
    match config.split {
        Some(ratios) => split_dataset(&dataset, ratios, config.seed, Rounding::LargestRemainder),
        None => Ok(dataset),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn eras() -> Arc<RelationGraph> {
        let spec = bronze_ding_eras()
            .node("tripod", NodeKind::Shape)
            .edge("Early Shang", "tripod")
            .edge("Late Western Zhou", "tripod")
            .node("taotie", NodeKind::Characteristic)
            .edge("Early Shang", "taotie");
        Arc::new(build_graph(&spec).unwrap())
    }

    fn write_lines(lines: &[&str]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn loads_well_formed_file() {
        let f = write_lines(&[
            r#"{"id":"a","dynasty":"Shang","period":"Early Shang","shape":"tripod","characteristics":["taotie"]}"#,
            r#"{"id":"b","dynasty":"Western Zhou","period":"Late Western Zhou","shape":"tripod","characteristics":[],"source":"museum"}"#,
            r#"{"id":"c","dynasty":"Shang","period":"Early Shang","shape":"tripod","bboxes":[{"characteristic":"taotie","x":1.0,"y":2.0,"w":3.0,"h":4.0}]}"#,
        ]);
        let ds = load_dataset(f.path(), eras()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.labels()[1].period, 4);
        assert_eq!(ds.labels()[0].characteristics, [0]);
    }

    #[test]
    fn rejects_schema_violations() {
        let wrong_dynasty = write_lines(&[r#"{"id":"a","dynasty":"Western Zhou","period":"Early Shang","shape":"tripod"}"#]);
        assert!(matches!(load_dataset(wrong_dynasty.path(), eras()), Err(DataError::SchemaViolation { line: 1, .. })));

        let no_shape = write_lines(&[
            r#"{"id":"a","dynasty":"Shang","period":"Early Shang","shape":"tripod"}"#,
            r#"{"id":"b","dynasty":"Shang","period":"Early Shang"}"#,
        ]);
        match load_dataset(no_shape.path(), eras()) {
            Err(DataError::SchemaViolation { line, message }) => {
                assert_eq!(line, 2);
                assert!(message.contains("shape"));
            }
            other => panic!("{other:?}"),
        }

        let unknown = write_lines(&[r#"{"id":"a","dynasty":"Shang","period":"Early Shang","shape":"bowl"}"#]);
        assert!(matches!(load_dataset(unknown.path(), eras()), Err(DataError::SchemaViolation { .. })));

        let broken = write_lines(&[r#"{"id":"a","dynasty":"Shang""#]);
        assert!(matches!(load_dataset(broken.path(), eras()), Err(DataError::Parse { line: 1, .. })));
    }

    #[test]
    fn allocation_rules() {
        assert_eq!(allocate(10, &[4.0, 1.0, 5.0], Rounding::LargestRemainder), [4, 1, 5]);
        assert_eq!(allocate(10, &[4.0, 1.0, 5.0], Rounding::Floor), [4, 1, 5]);
        assert_eq!(allocate(7, &[4.0, 1.0, 5.0], Rounding::Floor), [2, 0, 5]);
        // quotas 2.8, 0.7, 3.5
        assert_eq!(allocate(7, &[4.0, 1.0, 5.0], Rounding::LargestRemainder), [3, 1, 3]);
    }

    #[test]
    fn ten_records_of_one_period() {
        let cfg = SynthConfig {
            period_prior: Some({
                let mut v = vec![0.0; 11];
                v[5] = 1.0;
                v
            }),
            samples: 10,
            feature_dim: 4,
            ..Default::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        assert!(ds.labels().iter().all(|l| l.period == 5));
        let split = split_dataset(&ds, [4.0, 1.0, 5.0], 3, Rounding::LargestRemainder).unwrap();
        assert_eq!(split_summary(&split, [4.0, 1.0, 5.0]).totals, [4, 1, 5]);
        let again = split_dataset(&ds, [4.0, 1.0, 5.0], 3, Rounding::LargestRemainder).unwrap();
        assert_eq!(split.records(), again.records());
    }

    #[test]
    fn entropy_of_uniform_and_deterministic_attribute() {
        assert!((entropy_bits(&[7; 11]) - 11f64.log2()).abs() < 1e-12);
        assert!((entropy_bits(&[3; 11]) - 3.459).abs() < 5e-4);
        assert!((entropy_bits(&[1; 200]) - 7.644).abs() < 5e-4);

        // one shape per period: the shape determines the period
        let cfg = SynthConfig {
            periods_per_dynasty: vec![1, 2],
            n_shapes: 3,
            n_chars: 0,
            shape_given_period: Some(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]),
            samples: 90,
            feature_dim: 2,
            ..Default::default()
        };
        let ds = synth_generate(&cfg).unwrap();
        let stats = dataset_stats(&ds, Attribute::Shape).unwrap();
        assert!(stats.conditional_entropy.abs() < 1e-12);
        assert!((stats.gain - stats.entropy).abs() < 1e-12);
        assert!(stats.to_table().contains("H(D|A)"));
    }

    #[test]
    fn synth_rejects_bad_tables() {
        let cfg = SynthConfig {
            periods_per_dynasty: vec![1],
            n_shapes: 2,
            shape_given_period: Some(vec![vec![0.7, 0.7]]),
            ..Default::default()
        };
        assert!(matches!(synth_generate(&cfg), Err(DataError::BadConfig(_))));
        let cfg = SynthConfig {
            periods_per_dynasty: vec![1],
            n_shapes: 2,
            n_chars: 1,
            char_given_period: Some(vec![vec![1.5]]),
            ..Default::default()
        };
        assert!(matches!(synth_generate(&cfg), Err(DataError::BadConfig(_))));
    }

    #[test]
    fn synth_is_deterministic_and_round_trips() {
        let cfg = SynthConfig {
            samples: 50,
            feature_dim: 8,
            split: Some([4.0, 1.0, 5.0]),
            seed: 17,
            ..Default::default()
        };
        let a = synth_generate(&cfg).unwrap();
        let b = synth_generate(&cfg).unwrap();
        let mut bytes_a = Vec::new();
        let mut bytes_b = Vec::new();
        a.write_jsonl(&mut bytes_a).unwrap();
        b.write_jsonl(&mut bytes_b).unwrap();
        assert_eq!(bytes_a, bytes_b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        a.save(&path).unwrap();
        let loaded = load_dataset(&path, a.shared_graph()).unwrap();
        let path2 = dir.path().join("e.jsonl");
        loaded.save(&path2).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }
}
