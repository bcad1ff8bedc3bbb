//! Candidate weighting and mini-batch sampling.
//!
//! A scheme pairs a temporal weighting (`uniform`, `fixed<N>`, `decay`,
//! `segment`) with a non-temporal one (`uniform`, `similar`, error ranks and
//! training-dynamics ranks). The two weight vectors are multiplied and
//! renormalized. Every weight vector handed out sums to one.
//!
//! Candidate ages are measured in days back from the newest candidate, i.e.
//! from the end of the labeled horizon.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;
use std::str::FromStr;

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Candidate, Dataset, HorizonConfig, HOURS_PER_DAY};
use crate::error::{Error, Result};
use crate::profile::{fluss_probability, mass, SamplingCurve};

/// Floor of the decay weight and of the similarity weight offset.
pub const WEIGHT_EPS: f64 = 1e-6;
/// Default number of daily error snapshots kept per candidate.
pub const DYNAMICS_CAPACITY: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Temporal {
    Uniform,
    FixedWindow(usize),
    Decay,
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NonTemporal {
    Uniform,
    Similar,
    HighError,
    LowError,
    HighConfidence,
    LowConfidence,
    HighVariability,
    LowVariability,
}

impl NonTemporal {
    pub const ALL: [NonTemporal; 8] = [
        NonTemporal::Uniform,
        NonTemporal::Similar,
        NonTemporal::HighError,
        NonTemporal::LowError,
        NonTemporal::HighConfidence,
        NonTemporal::LowConfidence,
        NonTemporal::HighVariability,
        NonTemporal::LowVariability,
    ];

    pub fn name(self) -> &'static str {
        match self {
            NonTemporal::Uniform => "uniform",
            NonTemporal::Similar => "similar",
            NonTemporal::HighError => "high_error",
            NonTemporal::LowError => "low_error",
            NonTemporal::HighConfidence => "high_confidence",
            NonTemporal::LowConfidence => "low_confidence",
            NonTemporal::HighVariability => "high_variability",
            NonTemporal::LowVariability => "low_variability",
        }
    }

    pub fn uses_errors(self) -> bool {
        !matches!(self, NonTemporal::Uniform | NonTemporal::Similar)
    }
}

/// A `temporal:nontemporal` sampling scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SchemeSpec {
    pub temporal: Temporal,
    pub nontemporal: NonTemporal,
}

impl SchemeSpec {
    pub const UNIFORM: SchemeSpec = SchemeSpec {
        temporal: Temporal::Uniform,
        nontemporal: NonTemporal::Uniform,
    };

    pub fn new(temporal: Temporal, nontemporal: NonTemporal) -> Self {
        Self { temporal, nontemporal }
    }
}

/// Human-readable list of accepted scheme strings.
pub const SCHEME_HELP: &str = "temporal:nontemporal with temporal in {uniform, fixed<days> (e.g. fixed90), decay, segment} \
and nontemporal in {uniform, similar, high_error, low_error, high_confidence, low_confidence, high_variability, low_variability}";

impl FromStr for Temporal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Temporal::Uniform),
            "decay" => Ok(Temporal::Decay),
            "segment" => Ok(Temporal::Segment),
            _ => match s.strip_prefix("fixed").map(str::parse::<usize>) {
                Some(Ok(days)) if days > 0 => Ok(Temporal::FixedWindow(days)),
                _ => Err(Error::Config(format!("unknown temporal scheme `{s}`; expected {SCHEME_HELP}"))),
            },
        }
    }
}

impl fmt::Display for Temporal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Temporal::Uniform => f.write_str("uniform"),
            Temporal::FixedWindow(d) => write!(f, "fixed{d}"),
            Temporal::Decay => f.write_str("decay"),
            Temporal::Segment => f.write_str("segment"),
        }
    }
}

impl FromStr for NonTemporal {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NonTemporal::ALL
            .into_iter()
            .find(|n| n.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown non-temporal scheme `{s}`; expected {SCHEME_HELP}")))
    }
}

impl fmt::Display for NonTemporal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SchemeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (t, n) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("invalid scheme `{s}`; expected {SCHEME_HELP}")))?;
        Ok(Self {
            temporal: t.parse()?,
            nontemporal: n.parse()?,
        })
    }
}

impl fmt::Display for SchemeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.temporal, self.nontemporal)
    }
}

impl TryFrom<String> for SchemeSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<SchemeSpec> for String {
    fn from(s: SchemeSpec) -> String {
        s.to_string()
    }
}

/// Sampling probabilities over a candidate list.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateWeights {
    pub candidates: Vec<Candidate>,
    pub weights: Vec<f64>,
}

impl CandidateWeights {
    /// Normalizes non-negative raw weights. An all-zero vector falls back to
    /// uniform with a warning.
    pub fn from_raw(candidates: Vec<Candidate>, mut raw: Vec<f64>, what: &str) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::Range("no candidates to weight".into()));
        }
        if raw.len() != candidates.len() {
            return Err(Error::Shape(format!(
                "{} weights for {} candidates",
                raw.len(),
                candidates.len()
            )));
        }
        if let Some(p) = raw.iter().position(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::NonFinite(format!("{what} weight {p} is {}", raw[p])));
        }
        let total: f64 = raw.iter().sum();
        if total > 0.0 {
            raw.iter_mut().for_each(|w| *w /= total);
        } else {
            log::warn!("{what}: all weights are zero, falling back to uniform");
            let u = 1.0 / raw.len() as f64;
            raw.iter_mut().for_each(|w| *w = u);
        }
        let out = Self {
            candidates,
            weights: raw,
        };
        out.check()?;
        Ok(out)
    }

    pub fn uniform(candidates: Vec<Candidate>) -> Result<Self> {
        let n = candidates.len();
        Self::from_raw(candidates, vec![1.0; n], "uniform")
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn check(&self) -> Result<()> {
        let sum: f64 = self.weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || self.weights.iter().any(|w| *w < 0.0) {
            return Err(Error::NonFinite(format!("candidate weights sum to {sum}")));
        }
        Ok(())
    }
}

/// Elementwise product of two weightings of the same candidate list.
pub fn combine(w1: &CandidateWeights, w2: &CandidateWeights) -> Result<CandidateWeights> {
    if w1.candidates != w2.candidates {
        return Err(Error::Shape("combined weights must share the candidate list".into()));
    }
    let raw = w1.weights.iter().zip(&w2.weights).map(|(a, b)| a * b).collect();
    CandidateWeights::from_raw(w1.candidates.clone(), raw, "combined scheme")
}

/// `batch_size` independent categorical draws with replacement.
pub fn sample_batch<R: Rng + ?Sized>(w: &CandidateWeights, batch_size: usize, rng: &mut R) -> Result<Vec<Candidate>> {
    let dist = WeightedIndex::new(&w.weights).map_err(|e| Error::Range(format!("invalid weights: {e}")))?;
    Ok((0..batch_size).map(|_| w.candidates[dist.sample(rng)]).collect())
}

fn ages_in_days(candidates: &[Candidate]) -> Vec<f64> {
    let newest = candidates.iter().map(|c| c.anchor).max().unwrap_or(0);
    candidates
        .iter()
        .map(|c| (newest - c.anchor) as f64 / HOURS_PER_DAY as f64)
        .collect()
}

/// Per-entity segmentation curves over the labeled region.
pub type CurveSet = BTreeMap<usize, SamplingCurve>;

/// Temporal weighting. `curves` is required for `segment`; candidate anchor
/// `i` reads curve position `i - t_p`.
pub fn temporal_weights(
    temporal: Temporal,
    candidates: &[Candidate],
    curves: Option<&CurveSet>,
    t_p: usize,
) -> Result<CandidateWeights> {
    let owned = candidates.to_vec();
    match temporal {
        Temporal::Uniform => CandidateWeights::uniform(owned),
        Temporal::FixedWindow(days) => {
            let raw = ages_in_days(candidates)
                .into_iter()
                .map(|a| if a <= days as f64 { 1.0 } else { 0.0 })
                .collect();
            CandidateWeights::from_raw(owned, raw, "fixed window")
        }
        Temporal::Decay => {
            let ages = ages_in_days(candidates);
            let oldest = ages.iter().copied().fold(0.0, f64::max);
            let raw = ages
                .into_iter()
                .map(|a| if oldest > 0.0 { (1.0 - a / oldest).max(WEIGHT_EPS) } else { 1.0 })
                .collect();
            CandidateWeights::from_raw(owned, raw, "decay")
        }
        Temporal::Segment => {
            let curves = curves.ok_or_else(|| Error::Config("segment scheme needs segmentation curves".into()))?;
            let raw = candidates
                .iter()
                .map(|c| {
                    let curve = curves
                        .get(&c.entity)
                        .ok_or_else(|| Error::Range(format!("no segmentation curve for entity {}", c.entity)))?;
                    let pos = c.anchor.checked_sub(t_p).ok_or_else(|| {
                        Error::Range(format!("anchor {} precedes the look-back {t_p}", c.anchor))
                    })?;
                    curve.p.get(pos).copied().ok_or_else(|| {
                        Error::Range(format!(
                            "anchor {} maps past the segmentation curve of entity {}",
                            c.anchor, c.entity
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            CandidateWeights::from_raw(owned, raw, "segment")
        }
    }
}

/// Average 1-based ranks of `keys` in ascending order; exactly equal keys
/// share the mean of their ranks. Ties are otherwise ordered by position,
/// which follows (entity, anchor) for sorted candidate lists.
pub fn average_ranks(keys: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| keys[a].total_cmp(&keys[b]).then(a.cmp(&b)));
    let mut ranks = vec![0.0; keys.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && keys[order[j + 1]] == keys[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Linear-rank weights over the known keys. With `favour_high` the largest
/// key gets weight `n`; otherwise the smallest does. Unknown keys get the
/// neutral rank `(n + 1) / 2`.
fn rank_weights(keys: &[Option<f64>], favour_high: bool) -> Vec<f64> {
    let known: Vec<f64> = keys.iter().flatten().copied().collect();
    let n = known.len() as f64;
    let ranks = average_ranks(&known);
    let neutral = (n + 1.0) / 2.0;
    let mut it = ranks.into_iter();
    keys.iter()
        .map(|k| match k {
            Some(_) => {
                let r = it.next().expect("rank for every known key");
                if favour_high {
                    r
                } else {
                    n + 1.0 - r
                }
            }
            None => neutral,
        })
        .collect()
}

/// Serializes candidate-keyed maps as lists of pairs, since JSON object keys
/// must be strings.
mod candidate_map {
    use super::Candidate;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};
    use std::collections::BTreeMap;

    pub fn serialize<S: Serializer, V: Serialize>(m: &BTreeMap<Candidate, V>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(m.iter())
    }

    pub fn deserialize<'de, D, V>(d: D) -> Result<BTreeMap<Candidate, V>, D::Error>
    where
        D: Deserializer<'de>,
        V: Deserialize<'de>,
    {
        Ok(Vec::<(Candidate, V)>::deserialize(d)?.into_iter().collect())
    }
}

/// Most recent per-window loss on a persistent subsample of candidates.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ErrorCache {
    #[serde(with = "candidate_map")]
    pub errors: BTreeMap<Candidate, f64>,
    /// Candidates evaluated on every refresh.
    pub tracked: BTreeSet<Candidate>,
    /// Fraction of newly labeled candidates joining `tracked`.
    pub inclusion_rate: f64,
    /// Newest anchor per entity already considered for tracking.
    pub seen_until: BTreeMap<usize, usize>,
    /// Simulated day of the last refresh.
    pub refreshed_day: Option<usize>,
}

impl ErrorCache {
    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    /// Extends the tracked subsample with candidates that became labeled
    /// since the last call. The first call draws `subsample_size` uniformly.
    pub fn track<R: Rng + ?Sized>(&mut self, candidates: &[Candidate], subsample_size: usize, rng: &mut R) {
        if self.seen_until.is_empty() {
            let n = candidates.len();
            let take = subsample_size.min(n);
            self.inclusion_rate = if n == 0 { 1.0 } else { take as f64 / n as f64 };
            let mut picked = rand::seq::index::sample(rng, n, take).into_vec();
            picked.sort_unstable();
            self.tracked.extend(picked.into_iter().map(|i| candidates[i]));
        } else {
            for c in candidates {
                let seen = self.seen_until.get(&c.entity).copied();
                if seen.is_none_or(|s| c.anchor > s) && (self.inclusion_rate >= 1.0 || rng.gen::<f64>() < self.inclusion_rate) {
                    self.tracked.insert(*c);
                }
            }
        }
        for c in candidates {
            let e = self.seen_until.entry(c.entity).or_insert(c.anchor);
            *e = (*e).max(c.anchor);
        }
    }

    /// Replaces the cached errors with `loss(candidate)` for every tracked
    /// candidate.
    pub fn refresh<F>(&mut self, day: usize, mut loss: F) -> Result<Vec<(Candidate, f64)>>
    where
        F: FnMut(Candidate) -> Result<f64>,
    {
        let mut fresh = Vec::with_capacity(self.tracked.len());
        for &c in &self.tracked {
            let e = loss(c)?;
            if !(e >= 0.0) || !e.is_finite() {
                return Err(Error::NonFinite(format!("loss of candidate {c:?} is {e}")));
            }
            fresh.push((c, e));
        }
        self.errors = fresh.iter().copied().collect();
        self.refreshed_day = Some(day);
        Ok(fresh)
    }
}

/// Ring buffers of the last `capacity` error snapshots per tracked candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicsHistory {
    pub capacity: usize,
    #[serde(with = "candidate_map")]
    pub snapshots: BTreeMap<Candidate, VecDeque<f64>>,
}

impl Default for DynamicsHistory {
    fn default() -> Self {
        Self::new(DYNAMICS_CAPACITY)
    }
}

impl DynamicsHistory {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            snapshots: BTreeMap::new(),
        }
    }

    pub fn record(&mut self, errors: &[(Candidate, f64)]) {
        for &(c, e) in errors {
            let buf = self.snapshots.entry(c).or_default();
            if buf.len() == self.capacity {
                buf.pop_front();
            }
            buf.push_back(e);
        }
    }

    /// `-mean` of the snapshots, when at least two exist.
    pub fn confidence(&self, c: &Candidate) -> Option<f64> {
        let buf = self.snapshots.get(c).filter(|b| b.len() >= 2)?;
        Some(-buf.iter().sum::<f64>() / buf.len() as f64)
    }

    /// Population std of the snapshots, when at least two exist.
    pub fn variability(&self, c: &Candidate) -> Option<f64> {
        let buf = self.snapshots.get(c).filter(|b| b.len() >= 2)?;
        let v: Vec<f64> = buf.iter().copied().collect();
        Some(crate::data::mean_std(&v).1)
    }
}

/// Inputs needed by the non-temporal schemes.
pub struct NonTemporalContext<'a> {
    pub dataset: &'a Dataset,
    pub horizon: &'a HorizonConfig,
    /// Current hour; features before it are observable.
    pub now: usize,
    pub errors: Option<&'a ErrorCache>,
    pub dynamics: Option<&'a DynamicsHistory>,
}

pub fn nontemporal_weights(
    nontemporal: NonTemporal,
    candidates: &[Candidate],
    ctx: &NonTemporalContext<'_>,
) -> Result<CandidateWeights> {
    let owned = candidates.to_vec();
    let ranked = |keys: Vec<Option<f64>>, favour_high: bool, what: &str| {
        if keys.iter().all(Option::is_none) {
            log::warn!("{what}: no cached errors yet, falling back to uniform");
            return CandidateWeights::uniform(owned.clone());
        }
        CandidateWeights::from_raw(owned.clone(), rank_weights(&keys, favour_high), what)
    };
    let cache_keys = || -> Vec<Option<f64>> {
        let errors = ctx.errors.map(|c| &c.errors);
        candidates.iter().map(|c| errors.and_then(|e| e.get(c).copied())).collect()
    };
    let dyn_keys = |f: &dyn Fn(&DynamicsHistory, &Candidate) -> Option<f64>| -> Vec<Option<f64>> {
        candidates.iter().map(|c| ctx.dynamics.and_then(|d| f(d, c))).collect()
    };
    match nontemporal {
        NonTemporal::Uniform => CandidateWeights::uniform(owned),
        NonTemporal::Similar => similar_weights(candidates, ctx),
        NonTemporal::HighError => ranked(cache_keys(), true, "high_error"),
        NonTemporal::LowError => ranked(cache_keys(), false, "low_error"),
        NonTemporal::HighConfidence => ranked(dyn_keys(&|d, c| d.confidence(c)), true, "high_confidence"),
        NonTemporal::LowConfidence => ranked(dyn_keys(&|d, c| d.confidence(c)), false, "low_confidence"),
        NonTemporal::HighVariability => ranked(dyn_keys(&|d, c| d.variability(c)), true, "high_variability"),
        NonTemporal::LowVariability => ranked(dyn_keys(&|d, c| d.variability(c)), false, "low_variability"),
    }
}

/// Mean per-channel z-distance between each candidate's input window and the
/// entity's current input window; weight `d_max - d + eps` within an entity.
fn similar_weights(candidates: &[Candidate], ctx: &NonTemporalContext<'_>) -> Result<CandidateWeights> {
    let t_p = ctx.horizon.t_p;
    let mut by_entity: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, c) in candidates.iter().enumerate() {
        by_entity.entry(c.entity).or_default().push(i);
    }
    let mut raw = vec![0.0; candidates.len()];
    for (entity, idxs) in by_entity {
        let rec = ctx
            .dataset
            .entities
            .get(entity)
            .ok_or_else(|| Error::Range(format!("entity index {entity} out of range")))?;
        let now = ctx.now.min(rec.hours());
        if now < t_p {
            idxs.iter().for_each(|&i| raw[i] = 1.0);
            continue;
        }
        let last_anchor = idxs.iter().map(|&i| candidates[i].anchor).max().unwrap_or(t_p);
        let mut dist = vec![0.0; idxs.len()];
        let mut used = 0;
        for j in 0..rec.d {
            let series = rec.channel(j, last_anchor);
            let query = rec.channel(j, now)[now - t_p..].to_vec();
            let profile = match mass(&query, &series) {
                Ok(p) => p,
                Err(Error::Degenerate(_)) => continue,
                Err(e) => return Err(e),
            };
            for (d, &i) in dist.iter_mut().zip(&idxs) {
                *d += profile.distances[candidates[i].anchor - t_p];
            }
            used += 1;
        }
        if used == 0 {
            log::warn!("similar: current window of entity {entity} is constant in every channel");
            idxs.iter().for_each(|&i| raw[i] = 1.0);
            continue;
        }
        let d_max = dist.iter().copied().fold(f64::NEG_INFINITY, f64::max) / used as f64;
        for (d, &i) in dist.iter().zip(&idxs) {
            raw[i] = d_max - d / used as f64 + WEIGHT_EPS;
        }
    }
    CandidateWeights::from_raw(candidates.to_vec(), raw, "similar")
}

/// Everything a scheme may need besides the candidate list.
pub struct SchemeContext<'a> {
    pub curves: Option<&'a CurveSet>,
    pub nontemporal: NonTemporalContext<'a>,
}

/// Temporal and non-temporal weights multiplied together.
pub fn scheme_weights(spec: SchemeSpec, candidates: &[Candidate], ctx: &SchemeContext<'_>) -> Result<CandidateWeights> {
    let t = temporal_weights(spec.temporal, candidates, ctx.curves, ctx.nontemporal.horizon.t_p)?;
    if spec.nontemporal == NonTemporal::Uniform {
        return Ok(t);
    }
    let n = nontemporal_weights(spec.nontemporal, candidates, &ctx.nontemporal)?;
    if spec.temporal == Temporal::Uniform {
        return Ok(n);
    }
    combine(&t, &n)
}

/// Segmentation curves keyed by `(entity, labeled_end)`, so repeated runs on
/// the same dataset compute each curve once.
#[derive(Debug, Clone, Default)]
pub struct CurveCache {
    curves: HashMap<(usize, usize), SamplingCurve>,
}

impl CurveCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    /// Curve of `entity` over features `[0, labeled_end)` with subsequence
    /// length `t_p`.
    pub fn get(&mut self, ds: &Dataset, entity: usize, labeled_end: usize, t_p: usize) -> Result<&SamplingCurve> {
        if !self.curves.contains_key(&(entity, labeled_end)) {
            let rec = ds
                .entities
                .get(entity)
                .ok_or_else(|| Error::Range(format!("entity index {entity} out of range")))?;
            let end = labeled_end.min(rec.hours());
            let curve = fluss_probability(&rec.features[..end * rec.d], rec.d, t_p)?;
            self.curves.insert((entity, labeled_end), curve);
        }
        Ok(&self.curves[&(entity, labeled_end)])
    }

    /// Curves for every entity appearing in `candidates`.
    pub fn curve_set(&mut self, ds: &Dataset, candidates: &[Candidate], labeled_end: usize, t_p: usize) -> Result<CurveSet> {
        let entities: BTreeSet<usize> = candidates.iter().map(|c| c.entity).collect();
        let mut out = CurveSet::new();
        for e in entities {
            out.insert(e, self.get(ds, e, labeled_end, t_p)?.clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cands(anchors: &[usize]) -> Vec<Candidate> {
        anchors.iter().map(|&a| Candidate { entity: 0, anchor: a }).collect()
    }

    #[test]
    fn scheme_strings_round_trip() {
        let s: SchemeSpec = "fixed90:uniform".parse().unwrap();
        assert_eq!(s, SchemeSpec::new(Temporal::FixedWindow(90), NonTemporal::Uniform));
        let s: SchemeSpec = "segment:similar".parse().unwrap();
        assert_eq!(s.to_string(), "segment:similar");
        for bad in ["segment", "fixed0:uniform", "fixedx:uniform", "decay:hard", "foo:uniform"] {
            assert!(bad.parse::<SchemeSpec>().is_err(), "{bad}");
        }
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(json, "\"segment:similar\"");
        assert_eq!(serde_json::from_str::<SchemeSpec>(&json).unwrap(), s);
    }

    #[test]
    fn fixed_window_and_fallback() {
        // ages 10 days, 100 days, 0 days
        let c2 = vec![
            Candidate { entity: 0, anchor: 2400 - 240 },
            Candidate { entity: 0, anchor: 0 },
            Candidate { entity: 1, anchor: 2400 },
        ];
        let w = temporal_weights(Temporal::FixedWindow(90), &c2, None, 0).unwrap();
        assert_eq!(w.weights, vec![0.5, 0.0, 0.5]);
        let w = temporal_weights(Temporal::FixedWindow(90), &c2[1..], None, 0).unwrap();
        assert_eq!(w.weights, vec![0.0, 1.0]);
    }

    #[test]
    fn decay_favours_newest() {
        let c = cands(&[2400, 0]);
        let w = temporal_weights(Temporal::Decay, &c, None, 0).unwrap();
        assert!(w.weights[0] / w.weights[1] >= 1e4);
        let c = cands(&[0, 1200, 2400]);
        let w = temporal_weights(Temporal::Decay, &c, None, 0).unwrap();
        assert!(w.weights[0] < w.weights[1] && w.weights[1] < w.weights[2]);
    }

    #[test]
    fn segment_reads_mapped_position() {
        let mut curves = CurveSet::new();
        curves.insert(
            0,
            SamplingCurve {
                cac_sum: vec![0.0; 4],
                p: vec![0.1, 0.2, 0.3, 0.4],
            },
        );
        let c = cands(&[10, 13]);
        let w = temporal_weights(Temporal::Segment, &c, Some(&curves), 10).unwrap();
        assert!((w.weights[0] - 0.2).abs() < 1e-15);
        assert!((w.weights[1] - 0.8).abs() < 1e-15);
        assert!(temporal_weights(Temporal::Segment, &cands(&[14]), Some(&curves), 10).is_err());
        assert!(temporal_weights(Temporal::Segment, &c, None, 10).is_err());
    }

    #[test]
    fn high_error_rank_example() {
        let keys = [Some(5.0), Some(1.0), Some(3.0)];
        let w = CandidateWeights::from_raw(cands(&[0, 1, 2]), rank_weights(&keys, true), "t").unwrap();
        let expect = [0.5, 1.0 / 6.0, 1.0 / 3.0];
        for (a, b) in w.weights.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        let low = rank_weights(&keys, false);
        assert_eq!(low, vec![1.0, 3.0, 2.0]);
        // unknown keys take the neutral rank
        assert_eq!(rank_weights(&[Some(1.0), None, Some(2.0)], true), vec![1.0, 1.5, 2.0]);
    }

    #[test]
    fn ties_average() {
        assert_eq!(average_ranks(&[2.0, 1.0, 2.0, 0.0]), vec![3.5, 2.0, 3.5, 1.0]);
        assert_eq!(average_ranks(&[0.0; 4]), vec![2.5; 4]);
    }

    #[test]
    fn perfect_model_is_uniform() {
        let c = cands(&[0, 1, 2, 3]);
        let mut cache = ErrorCache::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        cache.track(&c, 100, &mut rng);
        let fresh = cache.refresh(1, |_| Ok(0.0)).unwrap();
        assert_eq!(cache.errors.len(), 4);
        let mut hist = DynamicsHistory::default();
        hist.record(&fresh);
        hist.record(&fresh);
        let ds = tiny_dataset();
        let hz = HorizonConfig::default();
        let ctx = NonTemporalContext {
            dataset: &ds,
            horizon: &hz,
            now: 0,
            errors: Some(&cache),
            dynamics: Some(&hist),
        };
        for nt in NonTemporal::ALL.into_iter().filter(|n| n.uses_errors()) {
            let w = nontemporal_weights(nt, &c, &ctx).unwrap();
            assert!(w.weights.iter().all(|x| (x - 0.25).abs() < 1e-15), "{nt}");
        }
    }

    #[test]
    fn low_variability_prefers_constant() {
        let c = cands(&[0, 1]);
        let mut hist = DynamicsHistory::new(10);
        for day in 0..6 {
            let alt = if day % 2 == 0 { 1.0 } else { 3.0 };
            hist.record(&[(c[0], 2.0), (c[1], alt)]);
        }
        assert_eq!(hist.variability(&c[0]), Some(0.0));
        assert_eq!(hist.variability(&c[1]), Some(1.0));
        assert_eq!(hist.confidence(&c[0]), Some(-2.0));
        let ds = tiny_dataset();
        let hz = HorizonConfig::default();
        let ctx = NonTemporalContext {
            dataset: &ds,
            horizon: &hz,
            now: 0,
            errors: None,
            dynamics: Some(&hist),
        };
        let w = nontemporal_weights(NonTemporal::LowVariability, &c, &ctx).unwrap();
        assert!(w.weights[0] > w.weights[1]);
        // ring buffer keeps at most `capacity`
        let mut small = DynamicsHistory::new(3);
        for i in 0..5 {
            small.record(&[(c[0], i as f64)]);
        }
        assert_eq!(small.snapshots[&c[0]], VecDeque::from(vec![2.0, 3.0, 4.0]));
    }

    #[test]
    fn empty_cache_falls_back_to_uniform() {
        let ds = tiny_dataset();
        let hz = HorizonConfig::default();
        let ctx = NonTemporalContext {
            dataset: &ds,
            horizon: &hz,
            now: 0,
            errors: None,
            dynamics: None,
        };
        let w = nontemporal_weights(NonTemporal::HighError, &cands(&[0, 1]), &ctx).unwrap();
        assert_eq!(w.weights, vec![0.5, 0.5]);
    }

    fn tiny_dataset() -> Dataset {
        crate::synthgen::generate(&crate::synthgen::GenConfig {
            n_entities: 2,
            n_clusters: 1,
            d: 2,
            days: 12,
            seed: 1,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn similar_gives_identical_window_max_weight() {
        let ds = tiny_dataset();
        let hz = HorizonConfig {
            t_p: 24,
            t_a: 0,
            t_b: 24,
            label_delay_days: 1,
        };
        let now = 24 * 10;
        let candidates = ds.candidates(now, &hz);
        // the candidate anchored at `now` has exactly the current input window
        let mut with_now = candidates.clone();
        with_now.push(Candidate { entity: 0, anchor: now });
        with_now.sort();
        let ctx = NonTemporalContext {
            dataset: &ds,
            horizon: &hz,
            now,
            errors: None,
            dynamics: None,
        };
        let w = nontemporal_weights(NonTemporal::Similar, &with_now, &ctx).unwrap();
        let idx = with_now.iter().position(|c| c.entity == 0 && c.anchor == now).unwrap();
        let best = with_now
            .iter()
            .zip(&w.weights)
            .filter(|(c, _)| c.entity == 0)
            .map(|(_, w)| *w)
            .fold(0.0, f64::max);
        assert_eq!(w.weights[idx], best);
    }

    #[test]
    fn combine_examples() {
        let c = cands(&[0, 1]);
        let a = CandidateWeights::from_raw(c.clone(), vec![0.5, 0.5], "a").unwrap();
        let b = CandidateWeights::from_raw(c.clone(), vec![0.8, 0.2], "b").unwrap();
        let w = combine(&a, &b).unwrap();
        assert!((w.weights[0] - 0.8).abs() < 1e-15);
        let x = CandidateWeights::from_raw(c.clone(), vec![1.0, 0.0], "x").unwrap();
        let y = CandidateWeights::from_raw(c.clone(), vec![0.0, 1.0], "y").unwrap();
        assert_eq!(combine(&x, &y).unwrap().weights, vec![0.5, 0.5]);
    }

    #[test]
    fn sampler_degenerate_and_deterministic() {
        let c = cands(&[0, 1]);
        let w = CandidateWeights::from_raw(c.clone(), vec![1.0, 0.0], "w").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        assert!(sample_batch(&w, 100, &mut rng).unwrap().iter().all(|x| x.anchor == 0));
        let u = CandidateWeights::uniform(cands(&(0..50).collect::<Vec<_>>())).unwrap();
        let a = sample_batch(&u, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_batch(&u, 64, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tracking_adds_new_candidates_at_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut cache = ErrorCache::default();
        let first = cands(&(0..1000).collect::<Vec<_>>());
        cache.track(&first, 250, &mut rng);
        assert_eq!(cache.tracked.len(), 250);
        assert!((cache.inclusion_rate - 0.25).abs() < 1e-15);
        let second = cands(&(0..5000).collect::<Vec<_>>());
        cache.track(&second, 250, &mut rng);
        let new_tracked = cache.tracked.iter().filter(|c| c.anchor >= 1000).count();
        assert!((800..1200).contains(&new_tracked), "{new_tracked}");
        let mut all = ErrorCache::default();
        all.track(&first, 5000, &mut rng);
        assert_eq!(all.tracked.len(), 1000);
    }

    proptest! {
        #[test]
        fn combine_with_uniform_is_identity(raw in proptest::collection::vec(0.01f64..10.0, 1..60)) {
            let c = cands(&(0..raw.len()).collect::<Vec<_>>());
            let w = CandidateWeights::from_raw(c.clone(), raw, "w").unwrap();
            let u = CandidateWeights::uniform(c).unwrap();
            let out = combine(&w, &u).unwrap();
            for (a, b) in out.weights.iter().zip(&w.weights) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn high_low_error_are_reverse(errors in proptest::collection::vec(0u8..20, 1..60)) {
            let keys: Vec<Option<f64>> = errors.iter().map(|&e| Some(e as f64)).collect();
            let hi = rank_weights(&keys, true);
            let lo = rank_weights(&keys, false);
            let n = keys.len() as f64;
            for (h, l) in hi.iter().zip(&lo) {
                prop_assert!((h + l - (n + 1.0)).abs() < 1e-12);
            }
        }

        #[test]
        fn weights_always_normalized(raw in proptest::collection::vec(0.0f64..5.0, 1..80)) {
            let c = cands(&(0..raw.len()).collect::<Vec<_>>());
            let w = CandidateWeights::from_raw(c, raw, "w").unwrap();
            prop_assert!((w.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!(w.weights.iter().all(|x| *x >= 0.0));
        }
    }
}
