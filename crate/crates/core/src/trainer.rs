//! Offline training and the simulated daily online loop.
//!
//! The first `offline_days` form a fully labeled archive used for offline
//! training. Every simulated day `T` after that:
//!
//! 1. labels through day `T - label_delay_days` become available, so the
//!    labeled horizon ends at hour `24 * (T - delay + 1)` (never before the
//!    archive end);
//! 2. the error cache, training dynamics and segmentation curves the scheme
//!    needs are refreshed on the labeled candidates;
//! 3. `n_iter` mini-batches are drawn with the scheme and applied;
//! 4. each entity is predicted at midnight of `T` for hours `[-t_a, t_b)`
//!    around it, from features only.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_input, Candidate, Dataset, HorizonConfig, TrainingExample, HOURS_PER_DAY};
use crate::error::{Error, Result};
use crate::model::{auto_gamma, Gamma, ModelConfig, Standardizer, TrainableModel};
use crate::nn::AdamHyper;
use crate::sampling::{
    sample_batch, scheme_weights, CurveCache, DynamicsHistory, ErrorCache, NonTemporalContext, SchemeContext,
    SchemeSpec, Temporal, DYNAMICS_CAPACITY,
};

/// What happens on each simulated day.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum OnlinePolicy {
    /// Keep the offline model unchanged.
    Frozen,
    Update(SchemeSpec),
}

impl FromStr for OnlinePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "frozen" {
            Ok(OnlinePolicy::Frozen)
        } else {
            s.parse().map(OnlinePolicy::Update)
        }
    }
}

impl fmt::Display for OnlinePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OnlinePolicy::Frozen => f.write_str("frozen"),
            OnlinePolicy::Update(s) => s.fmt(f),
        }
    }
}

impl TryFrom<String> for OnlinePolicy {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<OnlinePolicy> for String {
    fn from(p: OnlinePolicy) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub offline_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Mini-batch updates per simulated day.
    pub n_iter: usize,
    pub seed: u64,
    pub scheme: OnlinePolicy,
    /// Length of the fully labeled archive used for offline training.
    pub offline_days: usize,
    /// Training candidates, offline and online, are restricted to anchors
    /// that are multiples of this many hours. 1 keeps every hour; 24 keeps
    /// the midnight anchors predictions are made at.
    pub anchor_stride: usize,
    /// Size of the persistent candidate subsample scored for error schemes.
    pub error_subsample: usize,
    pub dynamics_capacity: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            offline_epochs: 30,
            learning_rate: 1e-3,
            batch_size: 1024,
            n_iter: 100,
            seed: 0,
            scheme: OnlinePolicy::Update(SchemeSpec::UNIFORM),
            offline_days: 365,
            anchor_stride: 1,
            error_subsample: 10_000,
            dynamics_capacity: DYNAMICS_CAPACITY,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("offline_epochs", self.offline_epochs),
            ("batch_size", self.batch_size),
            ("n_iter", self.n_iter),
            ("offline_days", self.offline_days),
            ("anchor_stride", self.anchor_stride),
            ("error_subsample", self.error_subsample),
            ("dynamics_capacity", self.dynamics_capacity),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("train {name} must be >= 1")));
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// One emitted value: the prediction made at midnight of `day` for hour
/// `24 * day + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub day: usize,
    pub entity_id: String,
    pub offset: i64,
    pub predicted: f64,
}

pub const PREDICTION_LOG_HEADER: &str = "day,entity_id,offset,predicted,actual_when_available";

/// Everything the daily loop carries from one day to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationState {
    /// Next day to simulate.
    pub day: usize,
    pub model: TrainableModel,
    pub horizon: HorizonConfig,
    pub train: TrainConfig,
    pub rng: ChaCha8Rng,
    pub errors: ErrorCache,
    pub dynamics: DynamicsHistory,
    pub log: Vec<PredictionRow>,
    pub examples_consumed: u64,
    pub final_offline_loss: f64,
}

/// End (exclusive hour) of the labels visible on `day`.
pub fn labeled_end(day: usize, horizon: &HorizonConfig, offline_days: usize, hours: usize) -> usize {
    let archive = offline_days * HOURS_PER_DAY;
    let revealed = (day + 1).saturating_sub(horizon.label_delay_days) * HOURS_PER_DAY;
    archive.max(revealed).min(hours)
}

/// Feasible candidates with labels before `labeled_end` whose anchor is a
/// multiple of `stride`.
pub fn strided_candidates(ds: &Dataset, labeled_end: usize, horizon: &HorizonConfig, stride: usize) -> Vec<Candidate> {
    let mut c = ds.candidates(labeled_end, horizon);
    c.retain(|c| c.anchor % stride == 0);
    c
}

fn examples(ds: &Dataset, batch: &[Candidate], horizon: &HorizonConfig) -> Result<Vec<TrainingExample>> {
    batch.iter().map(|&c| ds.example(c, horizon)).collect()
}

/// Trains on every feasible candidate of the offline archive.
pub fn train_offline(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    horizon: &HorizonConfig,
) -> Result<SimulationState> {
    train_cfg.validate()?;
    horizon.validate()?;
    model_cfg.validate()?;
    if model_cfg.d != ds.meta.d || model_cfg.t_p != horizon.t_p || model_cfg.horizon != horizon.horizon() {
        return Err(Error::Config("model dimensions do not match the dataset and horizon".into()));
    }
    if model_cfg.variant.uses_interactions() && model_cfg.k != ds.meta.k {
        return Err(Error::Config(format!(
            "model interaction dimension {} != dataset k {}",
            model_cfg.k, ds.meta.k
        )));
    }
    if train_cfg.offline_days > ds.meta.days {
        return Err(Error::Range(format!(
            "offline span of {} days exceeds the dataset's {} days",
            train_cfg.offline_days, ds.meta.days
        )));
    }
    let offline_end = train_cfg.offline_days * HOURS_PER_DAY;
    let mut candidates = strided_candidates(ds, offline_end, horizon, train_cfg.anchor_stride);
    if candidates.is_empty() {
        return Err(Error::Range("no feasible training candidate in the offline span".into()));
    }
    let standardizer = Standardizer::fit(ds, offline_end);
    let gamma = match model_cfg.gamma {
        Gamma::Fixed(g) => g,
        Gamma::Auto => {
            let targets: Vec<Vec<f64>> = candidates
                .iter()
                .map(|&c| ds.example(c, horizon).map(|e| standardizer.target(&e.target)))
                .collect::<Result<_>>()?;
            auto_gamma(targets.iter().map(Vec::as_slice))
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let hyper = AdamHyper {
        learning_rate: train_cfg.learning_rate,
        ..AdamHyper::default()
    };
    let mut model = TrainableModel::new(*model_cfg, hyper, gamma, standardizer, &mut rng)?;
    let mut last_epoch_loss = f64::NAN;
    for epoch in 0..train_cfg.offline_epochs {
        candidates.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in candidates.chunks(train_cfg.batch_size) {
            total += model.train_batch(&examples(ds, chunk, horizon)?)?;
            batches += 1;
        }
        last_epoch_loss = total / batches as f64;
        log::info!("offline epoch {}: mean batch loss {last_epoch_loss}", epoch + 1);
    }
    Ok(SimulationState {
        day: train_cfg.offline_days,
        model,
        horizon: *horizon,
        train: train_cfg.clone(),
        rng,
        errors: ErrorCache::default(),
        dynamics: DynamicsHistory::new(train_cfg.dynamics_capacity),
        log: Vec::new(),
        examples_consumed: 0,
        final_offline_loss: last_epoch_loss,
    })
}

impl SimulationState {
    /// Switches the online policy, e.g. to branch one offline model into
    /// several schemes.
    pub fn with_policy(mut self, policy: OnlinePolicy) -> Self {
        self.train.scheme = policy;
        self
    }

    /// Simulates one day and returns the predictions emitted for it.
    pub fn online_step(&mut self, ds: &Dataset, curves: &mut CurveCache) -> Result<Vec<PredictionRow>> {
        let day = self.day;
        if day >= ds.meta.days {
            return Err(Error::Range(format!(
                "day {day} is past the dataset's {} days",
                ds.meta.days
            )));
        }
        let horizon = self.horizon;
        let now = day * HOURS_PER_DAY;
        if let OnlinePolicy::Update(spec) = self.train.scheme {
            let end = labeled_end(day, &horizon, self.train.offline_days, ds.meta.hours);
            let candidates = strided_candidates(ds, end, &horizon, self.train.anchor_stride);
            if candidates.is_empty() {
                log::warn!("day {day}: no labeled candidates, skipping updates");
            } else {
                if spec.nontemporal.uses_errors() {
                    self.errors.track(&candidates, self.train.error_subsample, &mut self.rng);
                    let model = &self.model;
                    let fresh = self
                        .errors
                        .refresh(day, |c| model.example_loss(&ds.example(c, &horizon)?))?;
                    self.dynamics.record(&fresh);
                }
                let curve_set = match spec.temporal {
                    Temporal::Segment => Some(curves.curve_set(ds, &candidates, end, horizon.t_p)?),
                    _ => None,
                };
                let ctx = SchemeContext {
                    curves: curve_set.as_ref(),
                    nontemporal: NonTemporalContext {
                        dataset: ds,
                        horizon: &horizon,
                        now,
                        errors: Some(&self.errors),
                        dynamics: Some(&self.dynamics),
                    },
                };
                let weights = scheme_weights(spec, &candidates, &ctx)?;
                for _ in 0..self.train.n_iter {
                    let batch = sample_batch(&weights, self.train.batch_size, &mut self.rng)?;
                    self.model.train_batch(&examples(ds, &batch, &horizon)?)?;
                    self.examples_consumed += batch.len() as u64;
                }
            }
        }
        let rows = self.predict_day(ds, day)?;
        self.log.extend(rows.iter().cloned());
        self.day += 1;
        Ok(rows)
    }

    /// Midnight predictions of every entity for `day`; entities without
    /// enough feature history are skipped.
    pub fn predict_day(&self, ds: &Dataset, day: usize) -> Result<Vec<PredictionRow>> {
        let anchor = day * HOURS_PER_DAY;
        let mut rows = Vec::new();
        for rec in &ds.entities {
            let input = match make_input(rec, anchor, &self.horizon) {
                Ok(i) => i,
                Err(Error::Range(msg)) => {
                    log::warn!("day {day}: skipping entity {}: {msg}", rec.entity_id);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let pred = self.model.predict(&input)?;
            for (i, v) in pred.m_hat.iter().enumerate() {
                rows.push(PredictionRow {
                    day,
                    entity_id: rec.entity_id.clone(),
                    offset: i as i64 - self.horizon.t_a as i64,
                    predicted: *v,
                });
            }
        }
        Ok(rows)
    }

    /// Runs `n_days` online steps.
    pub fn run_days(&mut self, ds: &Dataset, n_days: usize, curves: &mut CurveCache) -> Result<()> {
        if self.day + n_days > ds.meta.days {
            return Err(Error::Range(format!(
                "simulating {n_days} days from day {} runs past the dataset's {} days",
                self.day, ds.meta.days
            )));
        }
        for _ in 0..n_days {
            self.online_step(ds, curves)?;
        }
        Ok(())
    }
}

/// Offline training followed by `n_days` simulated days.
pub fn run_simulation(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    horizon: &HorizonConfig,
    n_days: usize,
    curves: &mut CurveCache,
) -> Result<SimulationState> {
    if train_cfg.offline_days + n_days > ds.meta.days {
        return Err(Error::Range(format!(
            "offline span {} + {n_days} online days exceeds the dataset's {} days",
            train_cfg.offline_days, ds.meta.days
        )));
    }
    let mut state = train_offline(ds, model_cfg, train_cfg, horizon)?;
    state.run_days(ds, n_days, curves)?;
    Ok(state)
}

/// Writes the prediction log as CSV. The actual value is never known when a
/// prediction is emitted, so that column is left empty.
pub fn write_prediction_log(rows: &[PredictionRow], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    let io = |e| Error::io(format!("writing {}", path.display()), e);
    writeln!(w, "{PREDICTION_LOG_HEADER}").map_err(io)?;
    for r in rows {
        writeln!(w, "{},{},{},{},", r.day, r.entity_id, r.offset, r.predicted).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Reads a prediction log written by `write_prediction_log`.
pub fn read_prediction_log(path: &Path) -> Result<Vec<PredictionRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::parse(path, 0, format!("cannot open file: {e}")))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let headers = rdr.headers().map_err(|e| Error::parse(path, 1, e.to_string()))?.clone();
    if headers.iter().collect::<Vec<_>>().join(",") != PREDICTION_LOG_HEADER {
        return Err(Error::parse(path, 1, format!("header must be `{PREDICTION_LOG_HEADER}`")));
    }
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::parse(path, e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| Error::parse(path, line, format!("bad {what}"));
        rows.push(PredictionRow {
            day: rec[0].parse().map_err(|_| bad("day"))?,
            entity_id: rec[1].to_string(),
            offset: rec[2].parse().map_err(|_| bad("offset"))?,
            predicted: rec[3].parse().map_err(|_| bad("predicted value"))?,
        });
    }
    Ok(rows)
}
