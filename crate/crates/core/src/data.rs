//! Entity records, training windows, candidate enumeration and the on-disk
//! dataset layout.
//!
//! Hour indices are 0-based. Index 0 of every series is UTC midnight of the
//! dataset start date, so hour `i` belongs to calendar day `i / 24`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::GenConfig;

pub const HOURS_PER_DAY: usize = 24;

/// Standard deviations at or below this (relative to the mean magnitude) are
/// treated as zero variance.
pub(crate) const DEGENERATE_STD: f64 = 1e-10;

/// One entity's hourly features, hourly metric and daily interaction snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityRecord {
    pub entity_id: String,
    /// Number of feature channels.
    pub d: usize,
    /// Row-major `hours × d`.
    pub features: Vec<f64>,
    pub metric: Vec<f64>,
    /// One snapshot per calendar day. The snapshot dated day `D` holds the
    /// trailing 30-day counts over days `D-30 ..= D-1`, so it is observable at
    /// midnight of `D`.
    pub interactions: Vec<Vec<f64>>,
}

impl EntityRecord {
    pub fn new(
        entity_id: impl Into<String>,
        d: usize,
        features: Vec<f64>,
        metric: Vec<f64>,
        interactions: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let rec = Self {
            entity_id: entity_id.into(),
            d,
            features,
            metric,
            interactions,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn hours(&self) -> usize {
        self.metric.len()
    }

    pub fn k(&self) -> usize {
        self.interactions.first().map_or(0, Vec::len)
    }

    /// Feature row at hour `t`.
    pub fn row(&self, t: usize) -> &[f64] {
        &self.features[t * self.d..(t + 1) * self.d]
    }

    /// Feature channel `j` as a contiguous series over `[0, end)`.
    pub fn channel(&self, j: usize, end: usize) -> Vec<f64> {
        (0..end).map(|t| self.features[t * self.d + j]).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::Shape(format!("entity {}: d must be positive", self.entity_id)));
        }
        if self.features.len() != self.metric.len() * self.d {
            return Err(Error::Shape(format!(
                "entity {}: features hold {} values, expected {} hours x {} channels",
                self.entity_id,
                self.features.len(),
                self.metric.len(),
                self.d
            )));
        }
        let days = self.metric.len().div_ceil(HOURS_PER_DAY);
        if self.interactions.len() < days {
            return Err(Error::Shape(format!(
                "entity {}: {} interaction snapshots for {} days",
                self.entity_id,
                self.interactions.len(),
                days
            )));
        }
        let k = self.k();
        for (day, snap) in self.interactions.iter().enumerate() {
            if snap.len() != k {
                return Err(Error::Shape(format!(
                    "entity {}: snapshot of day {day} has length {}, expected {k}",
                    self.entity_id,
                    snap.len()
                )));
            }
            if snap.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                return Err(Error::Range(format!(
                    "entity {}: snapshot of day {day} has a negative or non-finite entry",
                    self.entity_id
                )));
            }
        }
        Ok(())
    }
}

/// Look-back and estimation horizons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HorizonConfig {
    /// Input look-back hours.
    pub t_p: usize,
    /// Backward estimation hours.
    pub t_a: usize,
    /// Forward estimation hours.
    pub t_b: usize,
    pub label_delay_days: usize,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self {
            t_p: 168,
            t_a: 24,
            t_b: 24,
            label_delay_days: 90,
        }
    }
}

impl HorizonConfig {
    pub fn horizon(&self) -> usize {
        self.t_a + self.t_b
    }

    /// Smallest anchor with a full look-back and backward window.
    pub fn min_anchor(&self) -> usize {
        self.t_p.max(self.t_a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_p == 0 || self.t_b == 0 {
            return Err(Error::Config(format!(
                "horizon requires t_p > 0 and t_b > 0 (got t_p={}, t_b={})",
                self.t_p, self.t_b
            )));
        }
        Ok(())
    }
}

/// A training candidate: an entity (index into the dataset, which is sorted by
/// id) and an anchor hour.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Candidate {
    pub entity: usize,
    pub anchor: usize,
}

/// What the model sees for one anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    /// Row-major `t_p × d`, hours `anchor - t_p .. anchor`.
    pub input_ts: Vec<f64>,
    pub interaction: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub input: ModelInput,
    /// Metric over hours `anchor - t_a .. anchor + t_b`.
    pub target: Vec<f64>,
}

/// Builds the model input for `anchor` without touching the metric.
pub fn make_input(record: &EntityRecord, anchor: usize, cfg: &HorizonConfig) -> Result<ModelInput> {
    if anchor < cfg.t_p {
        return Err(Error::Range(format!(
            "anchor {anchor} leaves no room for the {}-hour look-back (anchor - t_p < 0)",
            cfg.t_p
        )));
    }
    if anchor > record.hours() {
        return Err(Error::Range(format!(
            "anchor {anchor} lies past the end of the feature series ({} hours)",
            record.hours()
        )));
    }
    let day = anchor / HOURS_PER_DAY;
    let interaction = record
        .interactions
        .get(day)
        .ok_or_else(|| Error::Range(format!("no interaction snapshot for day {day}")))?
        .clone();
    let input_ts = record.features[(anchor - cfg.t_p) * record.d..anchor * record.d].to_vec();
    Ok(ModelInput {
        input_ts,
        interaction,
    })
}

/// Extracts the (input, interaction, target) triple anchored at `anchor`.
pub fn make_window(record: &EntityRecord, anchor: usize, cfg: &HorizonConfig) -> Result<TrainingExample> {
    if anchor < cfg.t_a {
        return Err(Error::Range(format!(
            "anchor {anchor} leaves no room for the {}-hour backward window (anchor - t_a < 0)",
            cfg.t_a
        )));
    }
    if anchor + cfg.t_b > record.hours() {
        return Err(Error::Range(format!(
            "anchor {anchor} + t_b {} exceeds the labeled metric length {}",
            cfg.t_b,
            record.hours()
        )));
    }
    let input = make_input(record, anchor, cfg)?;
    let target = record.metric[anchor - cfg.t_a..anchor + cfg.t_b].to_vec();
    Ok(TrainingExample { input, target })
}

/// All anchors `i` with `max(t_p, t_a) <= i <= labeled_end - t_b`, ascending.
pub fn enumerate_candidates(
    record: &EntityRecord,
    entity: usize,
    labeled_end: usize,
    cfg: &HorizonConfig,
) -> Vec<Candidate> {
    let labeled_end = labeled_end.min(record.hours());
    let lo = cfg.min_anchor();
    if labeled_end < cfg.t_b || labeled_end - cfg.t_b < lo {
        return Vec::new();
    }
    (lo..=labeled_end - cfg.t_b)
        .map(|anchor| Candidate { entity, anchor })
        .collect()
}

/// Result of z-normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct ZNormalized {
    pub values: Vec<f64>,
    /// Set when the input had zero variance; `values` is then all zeros.
    pub degenerate: bool,
}

/// Population mean and standard deviation.
pub fn mean_std(x: &[f64]) -> (f64, f64) {
    if x.is_empty() {
        return (0.0, 0.0);
    }
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub(crate) fn is_degenerate_std(mean: f64, std: f64) -> bool {
    std <= DEGENERATE_STD * mean.abs().max(1.0)
}

/// Z-normalization with the population standard deviation.
pub fn znormalize(x: &[f64]) -> ZNormalized {
    let (mean, std) = mean_std(x);
    if x.is_empty() || is_degenerate_std(mean, std) {
        return ZNormalized {
            values: vec![0.0; x.len()],
            degenerate: true,
        };
    }
    ZNormalized {
        values: x.iter().map(|v| (v - mean) / std).collect(),
        degenerate: false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftKind {
    None,
    Abrupt,
    Incremental,
}

impl std::str::FromStr for DriftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DriftKind::None),
            "abrupt" => Ok(DriftKind::Abrupt),
            "incremental" => Ok(DriftKind::Incremental),
            other => Err(Error::Config(format!(
                "unknown drift kind `{other}` (expected none, abrupt or incremental)"
            ))),
        }
    }
}

/// Recorded drift ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftTruth {
    pub kind: DriftKind,
    pub drift_day: Option<usize>,
    pub drift_hour: Option<usize>,
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub d: usize,
    pub k: usize,
    pub hours: usize,
    pub days: usize,
    /// UTC date of hour 0, `YYYY-MM-DD`.
    pub start_date: String,
    pub entity_ids: Vec<String>,
    pub drift: DriftTruth,
    /// Cluster of each entity, when known.
    #[serde(default)]
    pub clusters: Option<Vec<usize>>,
    #[serde(default)]
    pub generator: Option<GenConfig>,
}

/// A dataset directory loaded in memory. Entities are sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub entities: Vec<EntityRecord>,
}

pub const META_FILE: &str = "meta.json";
pub const INTERACTIONS_FILE: &str = "interactions.csv";

pub fn entity_file_name(id: &str) -> String {
    format!("entity_{id}.csv")
}

impl Dataset {
    pub fn new(meta: DatasetMeta, mut entities: Vec<EntityRecord>) -> Result<Self> {
        entities.sort_by(|a, b| a.entity_id.cmp(&b.entity_id));
        let ds = Self { meta, entities };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entities.len() != self.meta.entity_ids.len() {
            return Err(Error::Shape(format!(
                "meta lists {} entities but {} records are present",
                self.meta.entity_ids.len(),
                self.entities.len()
            )));
        }
        for rec in &self.entities {
            rec.validate()?;
            if rec.d != self.meta.d || rec.hours() != self.meta.hours {
                return Err(Error::Shape(format!(
                    "entity {} has shape {}x{}, meta says {}x{}",
                    rec.entity_id,
                    rec.hours(),
                    rec.d,
                    self.meta.hours,
                    self.meta.d
                )));
            }
            if rec.k() != self.meta.k {
                return Err(Error::Shape(format!(
                    "entity {} interaction length {} != k {}",
                    rec.entity_id,
                    rec.k(),
                    self.meta.k
                )));
            }
        }
        Ok(())
    }

    pub fn entity_index(&self, id: &str) -> Option<usize> {
        self.entities.iter().position(|e| e.entity_id == id)
    }

    /// Candidates of every entity, ordered by (entity, anchor).
    pub fn candidates(&self, labeled_end: usize, cfg: &HorizonConfig) -> Vec<Candidate> {
        self.entities
            .iter()
            .enumerate()
            .flat_map(|(e, rec)| enumerate_candidates(rec, e, labeled_end, cfg))
            .collect()
    }

    pub fn example(&self, c: Candidate, cfg: &HorizonConfig) -> Result<TrainingExample> {
        let rec = self
            .entities
            .get(c.entity)
            .ok_or_else(|| Error::Range(format!("entity index {} out of range", c.entity)))?;
        make_window(rec, c.anchor, cfg)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let meta_path = dir.join(META_FILE);
        let json = serde_json::to_string_pretty(&self.meta)?;
        fs::write(&meta_path, json + "\n")
            .map_err(|e| Error::io(format!("writing {}", meta_path.display()), e))?;
        for rec in &self.entities {
            write_entity(&dir.join(entity_file_name(&rec.entity_id)), rec)?;
        }
        write_interactions(&dir.join(INTERACTIONS_FILE), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path)
            .map_err(|e| Error::io(format!("reading {}", meta_path.display()), e))?;
        let meta: DatasetMeta = serde_json::from_str(&text)
            .map_err(|e| Error::parse(&meta_path, e.line() as u64, e.to_string()))?;
        let days = meta.hours.div_ceil(HOURS_PER_DAY);
        let mut interactions = read_interactions(&dir.join(INTERACTIONS_FILE), &meta, days)?;
        let mut entities = Vec::with_capacity(meta.entity_ids.len());
        for (idx, id) in meta.entity_ids.iter().enumerate() {
            let (features, metric) = read_entity(&dir.join(entity_file_name(id)), meta.d)?;
            let rec = EntityRecord::new(
                id.clone(),
                meta.d,
                features,
                metric,
                std::mem::take(&mut interactions[idx]),
            )?;
            entities.push(rec);
        }
        Dataset::new(meta, entities)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn write_entity(path: &Path, rec: &EntityRecord) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    let mut header = String::from("hour");
    for j in 0..rec.d {
        header.push_str(&format!(",f{j}"));
    }
    header.push_str(",metric\n");
    w.write_all(header.as_bytes()).map_err(io)?;
    let mut line = String::new();
    for t in 0..rec.hours() {
        line.clear();
        line.push_str(&t.to_string());
        for v in rec.row(t) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        line.push(',');
        line.push_str(&rec.metric[t].to_string());
        line.push('\n');
        w.write_all(line.as_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)
}

fn write_interactions(path: &Path, ds: &Dataset) -> Result<()> {
    let mut w = create(path)?;
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    let mut header = String::from("day,entity_id");
    for j in 0..ds.meta.k {
        header.push_str(&format!(",c{j}"));
    }
    header.push('\n');
    w.write_all(header.as_bytes()).map_err(io)?;
    let days = ds.meta.hours.div_ceil(HOURS_PER_DAY);
    let mut line = String::new();
    for day in 0..days {
        for rec in &ds.entities {
            line.clear();
            line.push_str(&format!("{day},{}", rec.entity_id));
            for v in &rec.interactions[day] {
                line.push(',');
                line.push_str(&v.to_string());
            }
            line.push('\n');
            w.write_all(line.as_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

fn open_csv(path: &Path) -> Result<csv::Reader<File>> {
    let file = File::open(path).map_err(|e| Error::parse(path, 0, format!("cannot open file: {e}")))?;
    Ok(csv::ReaderBuilder::new().has_headers(true).from_reader(file))
}

fn parse_f64(path: &Path, line: u64, field: &str) -> Result<f64> {
    let v: f64 = field
        .trim()
        .parse()
        .map_err(|_| Error::parse(path, line, format!("`{field}` is not a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(path, line, format!("non-finite value `{field}`")));
    }
    Ok(v)
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::parse(path, line, e.to_string())
}

fn read_entity(path: &Path, d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let mut expected = vec!["hour".to_string()];
    expected.extend((0..d).map(|j| format!("f{j}")));
    expected.push("metric".into());
    if headers.iter().collect::<Vec<_>>() != expected.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::parse(
            path,
            1,
            format!("header must be `{}`", expected.join(",")),
        ));
    }
    let mut features = Vec::new();
    let mut metric = Vec::new();
    for (row_idx, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(row_idx as u64 + 2, |p| p.line());
        if rec.len() != d + 2 {
            return Err(Error::parse(path, line, format!("expected {} fields, got {}", d + 2, rec.len())));
        }
        let hour: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad hour `{}`", &rec[0])))?;
        if hour != row_idx {
            return Err(Error::parse(path, line, format!("hour {hour} out of sequence (expected {row_idx})")));
        }
        for j in 0..d {
            features.push(parse_f64(path, line, &rec[j + 1])?);
        }
        metric.push(parse_f64(path, line, &rec[d + 1])?);
    }
    Ok((features, metric))
}

fn read_interactions(path: &Path, meta: &DatasetMeta, days: usize) -> Result<Vec<Vec<Vec<f64>>>> {
    let mut rdr = open_csv(path)?;
    let headers = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    if headers.len() != meta.k + 2 || &headers[0] != "day" || &headers[1] != "entity_id" {
        return Err(Error::parse(
            path,
            1,
            format!("header must be `day,entity_id,c0..c{}`", meta.k.saturating_sub(1)),
        ));
    }
    let mut out: Vec<Vec<Option<Vec<f64>>>> = vec![vec![None; days]; meta.entity_ids.len()];
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != meta.k + 2 {
            return Err(Error::parse(path, line, format!("expected {} fields, got {}", meta.k + 2, rec.len())));
        }
        let day: usize = rec[0]
            .trim()
            .parse()
            .map_err(|_| Error::parse(path, line, format!("bad day `{}`", &rec[0])))?;
        let entity = meta
            .entity_ids
            .iter()
            .position(|id| id == &rec[1])
            .ok_or_else(|| Error::parse(path, line, format!("unknown entity `{}`", &rec[1])))?;
        if day >= days {
            return Err(Error::parse(path, line, format!("day {day} beyond the {days}-day span")));
        }
        let values = (0..meta.k)
            .map(|j| parse_f64(path, line, &rec[j + 2]))
            .collect::<Result<Vec<_>>>()?;
        out[entity][day] = Some(values);
    }
    out.into_iter()
        .enumerate()
        .map(|(e, per_day)| {
            per_day
                .into_iter()
                .enumerate()
                .map(|(day, snap)| {
                    snap.ok_or_else(|| {
                        Error::parse(
                            path,
                            0,
                            format!("missing snapshot for entity {} on day {day}", meta.entity_ids[e]),
                        )
                    })
                })
                .collect()
        })
        .collect()
}

/// Directory path helper used by the CLI and tests.
pub fn entity_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(entity_file_name(id))
}
