//! Deterministic synthetic dataset generator.
//!
//! Entities are assigned to clusters round-robin (`e % n_clusters`). Each
//! cluster draws its hourly feature profile from one of `feature_profiles`
//! shared profiles (daily and weekly harmonics with profile-specific phases),
//! so clusters that share a profile are indistinguishable from features alone.
//! The metric is a cluster-specific linear functional of the trailing 3-hour
//! feature mean, scaled per entity. Clusters sharing a profile get functionals
//! whose outputs are anti-correlated, so only the interaction vector (counts
//! concentrated on same-cluster partners) reveals which one applies.
//!
//! Drift acts on the feature-to-metric mapping. Abrupt drift hands cluster `c`
//! the functional of cluster `c + 1` from the drift hour on; incremental drift
//! interpolates towards it linearly until the end. Feature channel 0 carries
//! the regime: its daily component flips sign at an abrupt drift and rotates
//! its phase during an incremental one.
//!
//! Global parameters come from ChaCha stream 0 of `seed`; entity `e` uses
//! stream `e + 1`, so entities can be generated in any order.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, DatasetMeta, DriftKind, DriftTruth, EntityRecord, HOURS_PER_DAY};
use crate::error::{Error, Result};

/// Trailing days summed into each interaction snapshot.
pub const INTERACTION_WINDOW_DAYS: usize = 30;
/// Hours averaged by the metric functional.
pub const METRIC_SMOOTHING_HOURS: usize = 3;
const DAILY_HARMONICS: usize = 3;
const WEEKLY_HARMONICS: usize = 2;
const WEEK_HOURS: usize = 168;
const BASE_DAILY_RATE: f64 = 10.0;
const SELF_AFFINITY: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_entities: usize,
    pub n_clusters: usize,
    /// Distinct feature profiles; clusters `c` and `c'` share one when
    /// `c % feature_profiles == c' % feature_profiles`. Defaults to
    /// `max(1, n_clusters - 1)`.
    pub feature_profiles: Option<usize>,
    pub d: usize,
    /// Interaction dimension; partner `e` is counted in slot `e % k`.
    /// Defaults to `n_entities`.
    pub k: Option<usize>,
    pub days: usize,
    pub drift_kind: DriftKind,
    pub drift_day: Option<usize>,
    /// Per-entity metric scales are log-uniform in `[1, scale_spread]`.
    pub scale_spread: f64,
    /// Noise standard deviation as a fraction of the signal standard deviation.
    pub noise_level: f64,
    /// Probability that an entity-day carries an anomalous metric level shift.
    pub outlier_rate: f64,
    /// Size of an anomalous shift in units of the entity's metric scale.
    pub outlier_scale: f64,
    pub seed: u64,
    /// UTC date of hour 0.
    pub start_date: String,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            n_entities: 30,
            n_clusters: 3,
            feature_profiles: None,
            d: 6,
            k: None,
            days: 540,
            drift_kind: DriftKind::None,
            drift_day: None,
            scale_spread: 1.0,
            noise_level: 0.1,
            outlier_rate: 0.0,
            outlier_scale: 3.0,
            seed: 0,
            start_date: "2017-01-01".into(),
        }
    }
}

impl GenConfig {
    pub fn k(&self) -> usize {
        self.k.unwrap_or(self.n_entities)
    }

    pub fn feature_profiles(&self) -> usize {
        self.feature_profiles.unwrap_or(self.n_clusters.saturating_sub(1).max(1))
    }

    pub fn hours(&self) -> usize {
        self.days * HOURS_PER_DAY
    }

    pub fn cluster_of(&self, entity: usize) -> usize {
        entity % self.n_clusters
    }

    pub fn profile_of(&self, cluster: usize) -> usize {
        cluster % self.feature_profiles()
    }

    pub fn entity_id(&self, entity: usize) -> String {
        let width = self.n_entities.saturating_sub(1).to_string().len().max(3);
        format!("e{entity:0width$}")
    }

    pub fn drift_hour(&self) -> Option<usize> {
        match self.drift_kind {
            DriftKind::None => None,
            _ => self.drift_day.map(|d| d * HOURS_PER_DAY),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_entities == 0 {
            return bad("n_entities must be >= 1".into());
        }
        if self.n_clusters == 0 || self.n_clusters > self.n_entities {
            return bad(format!(
                "n_clusters must be in 1..=n_entities ({}), got {}",
                self.n_entities, self.n_clusters
            ));
        }
        let p = self.feature_profiles();
        if p == 0 || p > self.n_clusters {
            return bad(format!("feature_profiles must be in 1..=n_clusters, got {p}"));
        }
        if self.d == 0 || self.k() == 0 || self.days == 0 {
            return bad("d, k and days must be >= 1".into());
        }
        if !(self.scale_spread >= 1.0) || !self.scale_spread.is_finite() {
            return bad(format!("scale_spread must be >= 1, got {}", self.scale_spread));
        }
        if !(self.noise_level >= 0.0) || !self.noise_level.is_finite() {
            return bad(format!("noise_level must be >= 0, got {}", self.noise_level));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return bad(format!("outlier_rate must be in [0, 1], got {}", self.outlier_rate));
        }
        if !(self.outlier_scale >= 0.0) || !self.outlier_scale.is_finite() {
            return bad(format!("outlier_scale must be >= 0, got {}", self.outlier_scale));
        }
        match (self.drift_kind, self.drift_day) {
            (DriftKind::None, _) => {}
            (_, None) => return bad("drift_day is required when drift_kind is not none".into()),
            (_, Some(day)) if day == 0 || day >= self.days => {
                return bad(format!("drift_day must satisfy 0 < drift_day < days ({}), got {day}", self.days))
            }
            _ if self.n_clusters < 2 => return bad("drift needs at least 2 clusters to permute".into()),
            _ => {}
        }
        Ok(())
    }
}

/// Harmonic components of one channel: `(period, amplitude, phase)`.
#[derive(Debug, Clone)]
struct ChannelProfile {
    daily: Vec<(f64, f64, f64)>,
    weekly: Vec<(f64, f64, f64)>,
    offset: f64,
}

impl ChannelProfile {
    fn draw<R: Rng>(rng: &mut R) -> Self {
        let mut harmonics = |base: f64, n: usize| -> Vec<(f64, f64, f64)> {
            (1..=n)
                .map(|h| {
                    let amp = rng.gen_range(0.3..1.0) / h as f64;
                    (base / h as f64, amp, rng.gen_range(0.0..2.0 * PI))
                })
                .collect()
        };
        let daily = harmonics(HOURS_PER_DAY as f64, DAILY_HARMONICS);
        let weekly = harmonics(WEEK_HOURS as f64, WEEKLY_HARMONICS);
        let offset = rng.gen_range(-1.0..1.0);
        Self { daily, weekly, offset }
    }

    /// Noise-free value. `daily_sign` and `daily_shift` modulate the daily
    /// component for the regime channel.
    fn value(&self, t: f64, daily_sign: f64, daily_shift: f64) -> f64 {
        let wave = |comps: &[(f64, f64, f64)], shift: f64| -> f64 {
            comps
                .iter()
                .map(|&(period, amp, phase)| amp * (2.0 * PI * t / period + phase + shift).sin())
                .sum()
        };
        self.offset + daily_sign * wave(&self.daily, daily_shift) + wave(&self.weekly, 0.0)
    }

    fn signal_std(&self) -> f64 {
        self.daily
            .iter()
            .chain(&self.weekly)
            .map(|c| c.1 * c.1 / 2.0)
            .sum::<f64>()
            .sqrt()
    }
}

/// Global structure shared by all entities.
#[derive(Debug, Clone)]
struct World {
    profiles: Vec<Vec<ChannelProfile>>,
    /// Metric functional per cluster, normalized to unit output std.
    functionals: Vec<Vec<f64>>,
    offsets: Vec<f64>,
}

fn regime_modulation(cfg: &GenConfig, t: usize) -> (f64, f64, f64) {
    // (daily sign, daily phase shift, functional blend towards c + 1)
    let Some(start) = cfg.drift_hour() else {
        return (1.0, 0.0, 0.0);
    };
    if t < start {
        return (1.0, 0.0, 0.0);
    }
    match cfg.drift_kind {
        DriftKind::Abrupt => (-1.0, 0.0, 1.0),
        DriftKind::Incremental => {
            let span = (cfg.hours() - start).max(1) as f64;
            let alpha = ((t - start) as f64 / span).min(1.0);
            (1.0, alpha * PI, alpha)
        }
        DriftKind::None => (1.0, 0.0, 0.0),
    }
}

/// Noise-free features of a profile, smoothed like the metric input, over
/// the first week.
fn profile_gram(profile: &[ChannelProfile]) -> Vec<f64> {
    let d = profile.len();
    let rows: Vec<Vec<f64>> = (0..WEEK_HOURS)
        .map(|t| {
            (0..d)
                .map(|j| {
                    (0..METRIC_SMOOTHING_HOURS)
                        .map(|l| profile[j].value(t as f64 - l as f64, 1.0, 0.0))
                        .sum::<f64>()
                        / METRIC_SMOOTHING_HOURS as f64
                })
                .collect()
        })
        .collect();
    let means: Vec<f64> = (0..d)
        .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / WEEK_HOURS as f64)
        .collect();
    let mut gram = vec![0.0; d * d];
    for r in &rows {
        for a in 0..d {
            for b in 0..d {
                gram[a * d + b] += (r[a] - means[a]) * (r[b] - means[b]) / WEEK_HOURS as f64;
            }
        }
    }
    gram
}

fn quad(gram: &[f64], a: &[f64], b: &[f64]) -> f64 {
    let d = a.len();
    let mut s = 0.0;
    for i in 0..d {
        for j in 0..d {
            s += a[i] * gram[i * d + j] * b[j];
        }
    }
    s
}

fn gaussian_vec<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn build_world(cfg: &GenConfig) -> World {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0);
    let profiles: Vec<Vec<ChannelProfile>> = (0..cfg.feature_profiles())
        .map(|_| (0..cfg.d).map(|_| ChannelProfile::draw(&mut rng)).collect())
        .collect();
    let grams: Vec<Vec<f64>> = profiles.iter().map(|p| profile_gram(p)).collect();
    let mut functionals: Vec<Vec<f64>> = Vec::with_capacity(cfg.n_clusters);
    for c in 0..cfg.n_clusters {
        let p = cfg.profile_of(c);
        let gram = &grams[p];
        let mut w = gaussian_vec(&mut rng, cfg.d);
        // previous cluster on the same profile, if any
        if let Some(prev) = (0..c).rev().find(|&c2| cfg.profile_of(c2) == p) {
            let wp = &functionals[prev];
            let proj = quad(gram, &w, wp);
            for (x, y) in w.iter_mut().zip(wp) {
                *x -= proj * y;
            }
            let norm = quad(gram, &w, &w).sqrt().max(1e-12);
            w = wp.iter().zip(&w).map(|(a, b)| -0.6 * a + 0.8 * b / norm).collect();
        }
        let norm = quad(gram, &w, &w).sqrt().max(1e-12);
        w.iter_mut().for_each(|x| *x /= norm);
        functionals.push(w);
    }
    let offsets = (0..cfg.n_clusters).map(|_| rng.gen_range(2.0..4.0)).collect();
    World {
        profiles,
        functionals,
        offsets,
    }
}

fn entity_rng(cfg: &GenConfig, entity: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(entity as u64 + 1);
    rng
}

/// Adds whole-day level shifts to the metric. Uses its own RNG stream so the
/// rest of the entity is unchanged by the outlier settings.
fn inject_outliers(cfg: &GenConfig, entity: usize, scale: f64, metric: &mut [f64]) {
    if cfg.outlier_rate <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((1 << 32) + entity as u64);
    for day in metric.chunks_mut(HOURS_PER_DAY) {
        if rng.gen::<f64>() < cfg.outlier_rate {
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let shift = sign * cfg.outlier_scale * scale * rng.gen_range(0.5..1.5);
            day.iter_mut().for_each(|v| *v += shift);
        }
    }
}

fn generate_entity(cfg: &GenConfig, world: &World, entity: usize) -> Result<EntityRecord> {
    let mut rng = entity_rng(cfg, entity);
    let (d, hours) = (cfg.d, cfg.hours());
    let cluster = cfg.cluster_of(entity);
    let profile = &world.profiles[cfg.profile_of(cluster)];
    let scale = (rng.gen_range(0.0..1.0) * cfg.scale_spread.ln()).exp();

    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut features = Vec::with_capacity(hours * d);
    for t in 0..hours {
        let (sign, shift, _) = regime_modulation(cfg, t);
        for (j, ch) in profile.iter().enumerate() {
            let (s, sh) = if j == 0 { (sign, shift) } else { (1.0, 0.0) };
            let noise = cfg.noise_level * ch.signal_std() * unit.sample(&mut rng);
            features.push(ch.value(t as f64, s, sh) + noise);
        }
    }

    let next = (cluster + 1) % cfg.n_clusters;
    let mut metric = Vec::with_capacity(hours);
    let mut smoothed = vec![0.0; d];
    for t in 0..hours {
        let lo = t.saturating_sub(METRIC_SMOOTHING_HOURS - 1);
        let n = (t - lo + 1) as f64;
        smoothed.iter_mut().for_each(|v| *v = 0.0);
        for s in lo..=t {
            for j in 0..d {
                smoothed[j] += features[s * d + j] / n;
            }
        }
        let (_, _, blend) = regime_modulation(cfg, t);
        let signal: f64 = (0..d)
            .map(|j| {
                let w = (1.0 - blend) * world.functionals[cluster][j] + blend * world.functionals[next][j];
                w * smoothed[j]
            })
            .sum();
        let noise = cfg.noise_level * unit.sample(&mut rng);
        metric.push(scale * (world.offsets[cluster] + signal + noise));
    }
    inject_outliers(cfg, entity, scale, &mut metric);

    let k = cfg.k();
    let cross = if cfg.n_clusters > 1 {
        1.0 / (4.0 * (cfg.n_clusters - 1) as f64)
    } else {
        0.0
    };
    let rates: Vec<f64> = (0..cfg.n_entities)
        .map(|other| {
            let affinity = if other == entity {
                SELF_AFFINITY
            } else if cfg.cluster_of(other) == cluster {
                rng.gen_range(0.5..1.5)
            } else {
                cross * rng.gen_range(0.5..1.5)
            };
            BASE_DAILY_RATE * affinity
        })
        .collect();
    let sim_days = cfg.days + INTERACTION_WINDOW_DAYS;
    let mut daily: Vec<Vec<f64>> = Vec::with_capacity(sim_days);
    for _ in 0..sim_days {
        let mut row = vec![0.0; k];
        for (other, &rate) in rates.iter().enumerate() {
            if rate > 0.0 {
                let p = Poisson::new(rate).map_err(|e| Error::Config(format!("poisson rate {rate}: {e}")))?;
                row[other % k] += p.sample(&mut rng);
            }
        }
        daily.push(row);
    }
    // snapshot of day D sums simulated days D .. D + 30, i.e. calendar days D-30 ..= D-1
    let mut interactions = Vec::with_capacity(cfg.days);
    let mut acc = vec![0.0; k];
    for row in &daily[..INTERACTION_WINDOW_DAYS] {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
    for day in 0..cfg.days {
        let mut snap = acc.clone();
        if snap.iter().all(|v| *v == 0.0) {
            snap[entity % k] = 1.0;
        }
        interactions.push(snap);
        let (add, sub) = (&daily[day + INTERACTION_WINDOW_DAYS], &daily[day]);
        for j in 0..k {
            acc[j] += add[j] - sub[j];
        }
    }
    EntityRecord::new(cfg.entity_id(entity), d, features, metric, interactions)
}

/// Generates the dataset in memory.
pub fn generate(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let world = build_world(cfg);
    let entities = (0..cfg.n_entities)
        .map(|e| generate_entity(cfg, &world, e))
        .collect::<Result<Vec<_>>>()?;
    let meta = DatasetMeta {
        d: cfg.d,
        k: cfg.k(),
        hours: cfg.hours(),
        days: cfg.days,
        start_date: cfg.start_date.clone(),
        entity_ids: (0..cfg.n_entities).map(|e| cfg.entity_id(e)).collect(),
        drift: DriftTruth {
            kind: cfg.drift_kind,
            drift_day: cfg.drift_hour().and(cfg.drift_day),
            drift_hour: cfg.drift_hour(),
        },
        clusters: Some((0..cfg.n_entities).map(|e| cfg.cluster_of(e)).collect()),
        generator: Some(cfg.clone()),
    };
    Dataset::new(meta, entities)
}

/// Generates the dataset and writes it to `dir`.
pub fn generate_to(cfg: &GenConfig, dir: &Path) -> Result<Dataset> {
    let ds = generate(cfg)?;
    ds.save(dir)?;
    Ok(ds)
}

/// Pooled statistics of one column.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ColumnStats {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

impl ColumnStats {
    fn from_values(values: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0, 0.0);
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values {
            n += 1;
            sum += v;
            sq += v * v;
            min = min.min(v);
            max = max.max(v);
        }
        let mean = if n > 0 { sum / n as f64 } else { 0.0 };
        let var = if n > 0 { (sq / n as f64 - mean * mean).max(0.0) } else { 0.0 };
        Self {
            mean,
            std: var.sqrt(),
            min,
            max,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub n_entities: usize,
    pub d: usize,
    pub k: usize,
    pub hours: usize,
    pub days: usize,
    pub start_date: String,
    pub drift: DriftTruth,
    /// Feature channels pooled over entities and hours.
    pub channels: Vec<ColumnStats>,
    pub metric: ColumnStats,
}

pub fn summarize(ds: &Dataset) -> DatasetSummary {
    let d = ds.meta.d;
    let channels = (0..d)
        .map(|j| {
            ColumnStats::from_values(
                ds.entities
                    .iter()
                    .flat_map(move |e| e.features.iter().skip(j).step_by(d).copied()),
            )
        })
        .collect();
    DatasetSummary {
        n_entities: ds.entities.len(),
        d,
        k: ds.meta.k,
        hours: ds.meta.hours,
        days: ds.meta.days,
        start_date: ds.meta.start_date.clone(),
        drift: ds.meta.drift.clone(),
        channels,
        metric: ColumnStats::from_values(ds.entities.iter().flat_map(|e| e.metric.iter().copied())),
    }
}

/// Loads a dataset directory and summarizes it.
pub fn describe(dir: &Path) -> Result<DatasetSummary> {
    Ok(summarize(&Dataset::load(dir)?))
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "entities: {}", self.n_entities)?;
        writeln!(
            f,
            "span: {} days ({} hours) from {}",
            self.days, self.hours, self.start_date
        )?;
        writeln!(f, "feature channels: {}, interaction dimension: {}", self.d, self.k)?;
        match (self.drift.kind, self.drift.drift_day, self.drift.drift_hour) {
            (DriftKind::None, _, _) => writeln!(f, "drift: none")?,
            (kind, Some(day), Some(hour)) => {
                let name = if kind == DriftKind::Abrupt { "abrupt" } else { "incremental" };
                writeln!(f, "drift: {name} at day {day} (hour {hour})")?
            }
            _ => writeln!(f, "drift: unspecified")?,
        }
        writeln!(f, "column,mean,std,min,max")?;
        for (j, s) in self.channels.iter().enumerate() {
            writeln!(f, "f{j},{},{},{},{}", s.mean, s.std, s.min, s.max)?;
        }
        let s = &self.metric;
        writeln!(f, "metric,{},{},{},{}", s.mean, s.std, s.min, s.max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::znormalize;

    fn small(days: usize) -> GenConfig {
        GenConfig {
            n_entities: 6,
            n_clusters: 2,
            d: 3,
            days,
            seed: 7,
            ..GenConfig::default()
        }
    }

    #[test]
    fn deterministic_and_written_identically() {
        let cfg = small(20);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        a.save(da.path()).unwrap();
        b.save(db.path()).unwrap();
        for id in &a.meta.entity_ids {
            let name = crate::data::entity_file_name(id);
            assert_eq!(
                std::fs::read(da.path().join(&name)).unwrap(),
                std::fs::read(db.path().join(&name)).unwrap()
            );
        }
        for name in [crate::data::META_FILE, crate::data::INTERACTIONS_FILE] {
            assert_eq!(
                std::fs::read(da.path().join(name)).unwrap(),
                std::fs::read(db.path().join(name)).unwrap()
            );
        }
        let loaded = Dataset::load(da.path()).unwrap();
        assert_eq!(loaded, a);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate(&small(10)).unwrap();
        let b = generate(&GenConfig { seed: 8, ..small(10) }).unwrap();
        assert_ne!(a.entities[0].metric, b.entities[0].metric);
    }

    #[test]
    fn outliers_are_whole_day_metric_shifts() {
        let clean = generate(&small(60)).unwrap();
        let dirty = generate(&GenConfig { outlier_rate: 0.2, ..small(60) }).unwrap();
        let mut shifted_days = 0;
        for (a, b) in clean.entities.iter().zip(&dirty.entities) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.interactions, b.interactions);
            for (da, db) in a.metric.chunks(24).zip(b.metric.chunks(24)) {
                let diffs: Vec<f64> = da.iter().zip(db).map(|(x, y)| y - x).collect();
                if diffs[0] != 0.0 {
                    shifted_days += 1;
                    assert!(diffs[0].abs() >= 1.5 - 1e-9);
                }
                assert!(diffs.iter().all(|v| (v - diffs[0]).abs() < 1e-9));
            }
        }
        // 6 entities x 60 days at rate 0.2
        assert!((40..=110).contains(&shifted_days), "{shifted_days}");
    }

    #[test]
    fn drift_hour_recorded() {
        let cfg = GenConfig {
            drift_kind: DriftKind::Abrupt,
            drift_day: Some(200),
            days: 220,
            n_entities: 3,
            n_clusters: 2,
            d: 2,
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.meta.drift.drift_hour, Some(4800));
        assert_eq!(ds.meta.drift.drift_day, Some(200));
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = small(10);
        for cfg in [
            GenConfig { n_clusters: 7, ..base.clone() },
            GenConfig { scale_spread: 0.5, ..base.clone() },
            GenConfig {
                drift_kind: DriftKind::Abrupt,
                drift_day: Some(10),
                ..base.clone()
            },
            GenConfig {
                drift_kind: DriftKind::Abrupt,
                drift_day: None,
                ..base.clone()
            },
            GenConfig { d: 0, ..base.clone() },
            GenConfig { outlier_rate: 1.5, ..base.clone() },
            GenConfig { outlier_scale: -1.0, ..base.clone() },
        ] {
            assert!(matches!(generate(&cfg), Err(Error::Config(_))), "{cfg:?}");
        }
    }

    #[test]
    fn interactions_concentrate_within_cluster() {
        let cfg = GenConfig {
            n_entities: 12,
            n_clusters: 3,
            days: 60,
            ..small(60)
        };
        let ds = generate(&cfg).unwrap();
        let (mut within, mut cross) = (0.0, 0.0);
        for (e, rec) in ds.entities.iter().enumerate() {
            for snap in &rec.interactions {
                assert!(snap.iter().all(|v| *v >= 0.0));
                for (other, v) in snap.iter().enumerate() {
                    if cfg.cluster_of(other) == cfg.cluster_of(e) {
                        within += v;
                    } else {
                        cross += v;
                    }
                }
            }
        }
        assert!(within >= 3.0 * cross, "within {within}, cross {cross}");
    }

    #[test]
    fn interaction_snapshot_is_trailing_sum() {
        let cfg = small(40);
        let world = build_world(&cfg);
        let rec = generate_entity(&cfg, &world, 1).unwrap();
        // consecutive snapshots differ by one day entering and one leaving;
        // all values are integer counts over 30 days with mean rate ~10/day/pair
        let total: f64 = rec.interactions[10].iter().sum();
        let expected_self = BASE_DAILY_RATE * SELF_AFFINITY * INTERACTION_WINDOW_DAYS as f64;
        assert!(total > expected_self * 0.8);
        assert!(rec.interactions[10].iter().all(|v| v.fract() == 0.0));
    }

    #[test]
    fn drift_changes_functionals() {
        for kind in [DriftKind::Abrupt, DriftKind::Incremental] {
            let cfg = GenConfig {
                drift_kind: kind,
                drift_day: Some(10),
                ..small(20)
            };
            let world = build_world(&cfg);
            let (_, _, blend_before) = regime_modulation(&cfg, 239);
            let (_, _, blend_end) = regime_modulation(&cfg, cfg.hours() - 1);
            assert_eq!(blend_before, 0.0);
            assert!(blend_end > 0.9);
            let diff: f64 = world.functionals[0]
                .iter()
                .zip(&world.functionals[1])
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / cfg.d as f64;
            assert!(diff > 0.0);
        }
    }

    #[test]
    fn summary_matches_recomputation() {
        let ds = generate(&small(15)).unwrap();
        let s = summarize(&ds);
        assert_eq!(s.n_entities, 6);
        for j in 0..ds.meta.d {
            let vals: Vec<f64> = ds.entities.iter().flat_map(|e| e.channel(j, e.hours())).collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
            assert!((s.channels[j].mean - mean).abs() < 1e-9);
            assert!((s.channels[j].std - std).abs() < 1e-9);
        }
        let text = s.to_string();
        assert!(text.contains("entities: 6"));
    }

    #[test]
    fn describe_reports_missing_interactions_file() {
        let dir = tempfile::tempdir().unwrap();
        generate_to(&small(5), dir.path()).unwrap();
        std::fs::remove_file(dir.path().join(crate::data::INTERACTIONS_FILE)).unwrap();
        match describe(dir.path()) {
            Err(Error::Parse { file, .. }) => assert!(file.ends_with(crate::data::INTERACTIONS_FILE)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    /// Solves the normal equations `(X^T X + ridge) b = X^T y`.
    fn least_squares(rows: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let p = rows[0].len();
        let mut a = vec![vec![0.0; p + 1]; p];
        for (r, &yv) in rows.iter().zip(y) {
            for i in 0..p {
                for j in 0..p {
                    a[i][j] += r[i] * r[j];
                }
                a[i][p] += r[i] * yv;
            }
        }
        for (i, row) in a.iter_mut().enumerate() {
            row[i] += 1e-9;
        }
        for col in 0..p {
            let piv = (col..p).max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..p {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for c in col..=p {
                        a[r][c] -= f * a[col][c];
                    }
                }
            }
        }
        (0..p).map(|i| a[i][p] / a[i][i]).collect()
    }

    /// Regresses the metric on the trailing feature mean (plus intercept),
    /// optionally interacted with a one-hot cluster indicator, and returns
    /// the windowed shape error on the last third of the span.
    fn oracle_nrmse(ds: &Dataset, cfg: &GenConfig, with_cluster: bool) -> f64 {
        let d = cfg.d;
        let groups = if with_cluster { cfg.n_clusters } else { 1 };
        let p = groups * (d + 1);
        let row_of = |e: usize, rec: &EntityRecord, t: usize| -> Vec<f64> {
            let g = if with_cluster { cfg.cluster_of(e) } else { 0 };
            let mut row = vec![0.0; p];
            let lo = t + 1 - METRIC_SMOOTHING_HOURS;
            row[g * (d + 1)] = 1.0;
            for j in 0..d {
                row[g * (d + 1) + 1 + j] =
                    (lo..=t).map(|s| rec.features[s * d + j]).sum::<f64>() / METRIC_SMOOTHING_HOURS as f64;
            }
            row
        };
        let split = cfg.hours() * 2 / 3;
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for (e, rec) in ds.entities.iter().enumerate() {
            for t in METRIC_SMOOTHING_HOURS..split {
                rows.push(row_of(e, rec, t));
                y.push(rec.metric[t]);
            }
        }
        let beta = least_squares(&rows, &y);
        let mut total = 0.0;
        let mut n = 0usize;
        for (e, rec) in ds.entities.iter().enumerate() {
            let mut start = split;
            while start + 48 <= cfg.hours() {
                let pred: Vec<f64> = (start..start + 48)
                    .map(|t| row_of(e, rec, t).iter().zip(&beta).map(|(a, b)| a * b).sum())
                    .collect();
                let truth = znormalize(&rec.metric[start..start + 48]);
                if !truth.degenerate {
                    let zp = znormalize(&pred).values;
                    let mse: f64 =
                        zp.iter().zip(&truth.values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 48.0;
                    total += mse.sqrt();
                    n += 1;
                }
                start += 24;
            }
        }
        total / n as f64
    }

    #[test]
    fn shared_profile_clusters_need_identity() {
        let cfg = GenConfig {
            n_entities: 10,
            n_clusters: 2,
            feature_profiles: Some(1),
            d: 6,
            days: 42,
            seed: 3,
            ..GenConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let with = oracle_nrmse(&ds, &cfg, true);
        let without = oracle_nrmse(&ds, &cfg, false);
        assert!(with < 0.3, "with cluster identity: {with}");
        assert!(without >= 0.7, "without cluster identity: {without}");
    }
}
