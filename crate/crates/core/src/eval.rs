//! Metrics, the scheme × variant benchmark and average-rank tables.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{znormalize, Dataset, HorizonConfig, HOURS_PER_DAY};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Variant};
use crate::sampling::{average_ranks, CurveCache};
use crate::trainer::{train_offline, OnlinePolicy, PredictionRow, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rmse: f64,
    /// Mean over windows of the RMSE between z-normalized prediction and
    /// z-normalized truth.
    pub nrmse: f64,
    pub r2: f64,
    pub n_windows: usize,
    pub degenerate_windows_skipped: usize,
}

/// A predicted window and the matching ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPair {
    pub predicted: Vec<f64>,
    pub truth: Vec<f64>,
}

fn rmse(a: &[f64], b: &[f64]) -> f64 {
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    (ss / a.len() as f64).sqrt()
}

pub fn compute_metrics(pairs: &[WindowPair]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Range("no prediction windows to score".into()));
    }
    for (i, p) in pairs.iter().enumerate() {
        if p.predicted.len() != p.truth.len() || p.truth.is_empty() {
            return Err(Error::Shape(format!(
                "window {i}: {} predictions vs {} truths",
                p.predicted.len(),
                p.truth.len()
            )));
        }
        if p.predicted.iter().chain(&p.truth).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("window {i}")));
        }
    }
    let n_points: usize = pairs.iter().map(|p| p.truth.len()).sum();
    let ss_res: f64 = pairs
        .iter()
        .flat_map(|p| p.predicted.iter().zip(&p.truth))
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    let truth_mean = pairs.iter().flat_map(|p| &p.truth).sum::<f64>() / n_points as f64;
    let ss_tot: f64 = pairs
        .iter()
        .flat_map(|p| &p.truth)
        .map(|y| (y - truth_mean) * (y - truth_mean))
        .sum();
    if !(ss_tot > 0.0) {
        return Err(Error::Degenerate("truth has zero total variance, R² is undefined".into()));
    }

    let mut nrmse_sum = 0.0;
    let mut scored = 0usize;
    for p in pairs {
        let truth = znormalize(&p.truth);
        if truth.degenerate {
            continue;
        }
        // a flat prediction normalizes to zeros
        nrmse_sum += rmse(&znormalize(&p.predicted).values, &truth.values);
        scored += 1;
    }
    if scored == 0 {
        return Err(Error::Degenerate("every truth window is constant, NRMSE is undefined".into()));
    }
    Ok(MetricReport {
        rmse: (ss_res / n_points as f64).sqrt(),
        nrmse: nrmse_sum / scored as f64,
        r2: 1.0 - ss_res / ss_tot,
        n_windows: pairs.len(),
        degenerate_windows_skipped: pairs.len() - scored,
    })
}

/// Groups a prediction log into windows and joins the ground truth from the
/// dataset. Only days `>= from_day` are kept; windows whose truth runs past
/// the dataset end are dropped.
pub fn join_truth(rows: &[PredictionRow], ds: &Dataset, from_day: usize) -> Result<Vec<WindowPair>> {
    let mut windows: BTreeMap<(usize, &str), Vec<(i64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.day >= from_day) {
        windows.entry((r.day, r.entity_id.as_str())).or_default().push((r.offset, r.predicted));
    }
    let mut pairs = Vec::with_capacity(windows.len());
    for ((day, entity), mut values) in windows {
        let e = ds
            .entity_index(entity)
            .ok_or_else(|| Error::Config(format!("prediction log names unknown entity {entity}")))?;
        values.sort_by_key(|&(o, _)| o);
        if values.windows(2).any(|w| w[1].0 != w[0].0 + 1) {
            return Err(Error::Shape(format!("day {day}, entity {entity}: offsets are not contiguous")));
        }
        let anchor = (day * HOURS_PER_DAY) as i64;
        let start = anchor + values[0].0;
        let end = anchor + values[values.len() - 1].0 + 1;
        if start < 0 || end as usize > ds.meta.hours {
            continue;
        }
        let metric = &ds.entities[e].metric;
        pairs.push(WindowPair {
            predicted: values.iter().map(|&(_, v)| v).collect(),
            truth: metric[start as usize..end as usize].to_vec(),
        });
    }
    Ok(pairs)
}

pub fn evaluate_log(rows: &[PredictionRow], ds: &Dataset, from_day: usize) -> Result<MetricReport> {
    compute_metrics(&join_truth(rows, ds, from_day)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Rmse,
    Nrmse,
    R2,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Rmse, Metric::Nrmse, Metric::R2];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Rmse => "rmse",
            Metric::Nrmse => "nrmse",
            Metric::R2 => "r2",
        }
    }

    pub fn of(self, r: &MetricReport) -> f64 {
        match self {
            Metric::Rmse => r.rmse,
            Metric::Nrmse => r.nrmse,
            Metric::R2 => r.r2,
        }
    }

    /// Rank key where smaller is better.
    fn key(self, r: &MetricReport) -> f64 {
        match self {
            Metric::R2 => -r.r2,
            _ => self.of(r),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric `{s}` (rmse, nrmse, r2)")))
    }
}

/// Grid coordinates of a policy: (temporal, non-temporal).
pub fn policy_axes(p: &OnlinePolicy) -> (String, String) {
    match p {
        OnlinePolicy::Frozen => ("frozen".into(), "frozen".into()),
        OnlinePolicy::Update(s) => (s.temporal.to_string(), s.nontemporal.name().into()),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub variants: Vec<Variant>,
    pub schemes: Vec<OnlinePolicy>,
    /// Architecture template; the variant field is replaced per run.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub horizon: HorizonConfig,
    pub online_days: usize,
    /// Online days excluded from scoring, counted from the first online day.
    #[serde(default)]
    pub eval_skip_days: usize,
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.len() < 2 || self.schemes.len() < 2 {
            return Err(Error::Config("a benchmark needs at least 2 variants and 2 schemes".into()));
        }
        for (what, dup) in [
            ("variant", has_duplicates(&self.variants)),
            ("scheme", has_duplicates(&self.schemes)),
        ] {
            if dup {
                return Err(Error::Config(format!("duplicate {what} in benchmark grid")));
            }
        }
        if self.eval_skip_days >= self.online_days {
            return Err(Error::Config("eval_skip_days leaves no online day to score".into()));
        }
        Ok(())
    }

    pub fn first_scored_day(&self) -> usize {
        self.train.offline_days + self.eval_skip_days
    }
}

fn has_duplicates<T: PartialEq>(xs: &[T]) -> bool {
    xs.iter().enumerate().any(|(i, x)| xs[..i].contains(x))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub scheme: OnlinePolicy,
    pub report: MetricReport,
}

/// Runs every (variant, scheme) cell. The offline model of a variant does
/// not depend on the scheme, so it is trained once and branched.
pub fn benchmark(ds: &Dataset, cfg: &BenchmarkConfig) -> Result<Vec<RunResult>> {
    cfg.validate()?;
    let mut curves = CurveCache::new();
    let mut results = Vec::with_capacity(cfg.variants.len() * cfg.schemes.len());
    for &variant in &cfg.variants {
        let wrap = |scheme: &str, e: Error| Error::Benchmark {
            variant: variant.to_string(),
            scheme: scheme.to_string(),
            source: Box::new(e),
        };
        let model = ModelConfig { variant, ..cfg.model };
        let offline = train_offline(ds, &model, &cfg.train, &cfg.horizon).map_err(|e| wrap("offline", e))?;
        for &scheme in &cfg.schemes {
            log::info!("benchmark {variant} / {scheme}");
            let mut run = || -> Result<MetricReport> {
                let mut state = offline.clone().with_policy(scheme);
                state.run_days(ds, cfg.online_days, &mut curves)?;
                evaluate_log(&state.log, ds, cfg.first_scored_day())
            };
            let report = run().map_err(|e| wrap(&scheme.to_string(), e))?;
            results.push(RunResult { variant, scheme, report });
        }
    }
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankTable {
    pub metric: Metric,
    pub temporal: Vec<String>,
    pub nontemporal: Vec<String>,
    /// `cells[row][col]`: average rank of scheme (nontemporal[row],
    /// temporal[col]), `None` if it was not run.
    pub cells: Vec<Vec<Option<f64>>>,
    pub row_means: Vec<Option<f64>>,
    pub col_means: Vec<Option<f64>>,
}

fn mean_present(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Per variant, ranks of the schemes by `metric` (1 = best, ties averaged).
pub fn variant_ranks(results: &[RunResult], metric: Metric) -> BTreeMap<Variant, Vec<(OnlinePolicy, f64)>> {
    let mut by_variant: BTreeMap<Variant, Vec<&RunResult>> = BTreeMap::new();
    for r in results {
        by_variant.entry(r.variant).or_default().push(r);
    }
    by_variant
        .into_iter()
        .map(|(v, runs)| {
            let keys: Vec<f64> = runs.iter().map(|r| metric.key(&r.report)).collect();
            let ranks = average_ranks(&keys);
            (v, runs.iter().zip(ranks).map(|(r, k)| (r.scheme, k)).collect())
        })
        .collect()
}

/// Average rank of each scheme across variants.
pub fn average_scheme_ranks(results: &[RunResult], metric: Metric) -> Vec<(OnlinePolicy, f64)> {
    let per_variant = variant_ranks(results, metric);
    let mut order: Vec<OnlinePolicy> = Vec::new();
    let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for ranks in per_variant.values() {
        for &(scheme, rank) in ranks {
            if !order.contains(&scheme) {
                order.push(scheme);
            }
            let e = sums.entry(scheme.to_string()).or_insert((0.0, 0));
            e.0 += rank;
            e.1 += 1;
        }
    }
    order
        .into_iter()
        .map(|s| {
            let (sum, n) = sums[&s.to_string()];
            (s, sum / n as f64)
        })
        .collect()
}

pub fn rank_table(results: &[RunResult], metric: Metric) -> RankTable {
    let avg = average_scheme_ranks(results, metric);
    let mut temporal: Vec<String> = Vec::new();
    let mut nontemporal: Vec<String> = Vec::new();
    for (s, _) in &avg {
        let (t, n) = policy_axes(s);
        if !temporal.contains(&t) {
            temporal.push(t);
        }
        if !nontemporal.contains(&n) {
            nontemporal.push(n);
        }
    }
    let mut cells = vec![vec![None; temporal.len()]; nontemporal.len()];
    for (s, rank) in &avg {
        let (t, n) = policy_axes(s);
        let col = temporal.iter().position(|x| *x == t).expect("collected above");
        let row = nontemporal.iter().position(|x| *x == n).expect("collected above");
        cells[row][col] = Some(*rank);
    }
    let row_means = cells.iter().map(|row| mean_present(row.iter().copied())).collect();
    let col_means = (0..temporal.len())
        .map(|c| mean_present(cells.iter().map(|row| row[c])))
        .collect();
    RankTable {
        metric,
        temporal,
        nontemporal,
        cells,
        row_means,
        col_means,
    }
}

impl RankTable {
    pub fn get(&self, scheme: &OnlinePolicy) -> Option<f64> {
        let (t, n) = policy_axes(scheme);
        let col = self.temporal.iter().position(|x| *x == t)?;
        let row = self.nontemporal.iter().position(|x| *x == n)?;
        self.cells[row][col]
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        let mut out = format!("nontemporal,{},mean\n", self.temporal.join(","));
        for (row, name) in self.nontemporal.iter().enumerate() {
            let cells: Vec<String> = self.cells[row].iter().map(|&c| fmt(c)).collect();
            out.push_str(&format!("{name},{},{}\n", cells.join(","), fmt(self.row_means[row])));
        }
        let cols: Vec<String> = self.col_means.iter().map(|&c| fmt(c)).collect();
        out.push_str(&format!("mean,{},\n", cols.join(",")));
        out
    }
}

pub const REPORT_HEADER: &str = "variant,temporal,nontemporal,rmse,nrmse,r2";

pub fn report_csv(results: &[RunResult]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in results {
        let (t, n) = policy_axes(&r.scheme);
        out.push_str(&format!(
            "{},{t},{n},{},{},{}\n",
            r.variant, r.report.rmse, r.report.nrmse, r.report.r2
        ));
    }
    out
}

/// Writes `report.csv` and one `ranks_<metric>.csv` per metric.
pub fn write_benchmark_outputs(results: &[RunResult], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let write = |name: String, text: String| -> Result<()> {
        let path = dir.join(name);
        let mut f = std::fs::File::create(&path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
        f.write_all(text.as_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))
    };
    write("report.csv".into(), report_csv(results))?;
    for m in Metric::ALL {
        write(format!("ranks_{m}.csv"), rank_table(results, m).to_csv())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::SchemeSpec;
    use proptest::prelude::*;

    fn pair(p: &[f64], t: &[f64]) -> WindowPair {
        WindowPair {
            predicted: p.to_vec(),
            truth: t.to_vec(),
        }
    }

    fn truth_windows() -> Vec<Vec<f64>> {
        vec![vec![1.0, 3.0, 2.0, 6.0], vec![4.0, 4.5, 9.0, 1.0], vec![0.0, 2.0, 2.0, 5.0]]
    }

    #[test]
    fn perfect_prediction() {
        let pairs: Vec<_> = truth_windows().iter().map(|t| pair(t, t)).collect();
        let r = compute_metrics(&pairs).unwrap();
        assert_eq!((r.rmse, r.nrmse, r.r2), (0.0, 0.0, 1.0));
        assert_eq!(r.n_windows, 3);
    }

    #[test]
    fn constant_offset_closed_forms() {
        let truths = truth_windows();
        let pairs: Vec<_> = truths
            .iter()
            .map(|t| pair(&t.iter().map(|v| v + 5.0).collect::<Vec<_>>(), t))
            .collect();
        let r = compute_metrics(&pairs).unwrap();
        let all: Vec<f64> = truths.concat();
        let mean = all.iter().sum::<f64>() / 12.0;
        let var = all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 12.0;
        assert!((r.rmse - 5.0).abs() < 1e-12);
        assert!(r.nrmse.abs() < 1e-12);
        assert!((r.r2 - (1.0 - 25.0 / var)).abs() < 1e-12);
    }

    #[test]
    fn global_mean_prediction_has_zero_r2() {
        let truths = truth_windows();
        let mean = truths.concat().iter().sum::<f64>() / 12.0;
        let pairs: Vec<_> = truths.iter().map(|t| pair(&[mean; 4], t)).collect();
        assert!(compute_metrics(&pairs).unwrap().r2.abs() < 1e-12);
    }

    #[test]
    fn degenerate_windows_are_skipped_for_nrmse() {
        let pairs = vec![pair(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), pair(&[5.0, 1.0, 0.0], &[7.0, 7.0, 7.0])];
        let r = compute_metrics(&pairs).unwrap();
        assert_eq!(r.degenerate_windows_skipped, 1);
        assert_eq!(r.nrmse, 0.0);
        assert!(r.rmse > 0.0);
    }

    #[test]
    fn undefined_cases_error() {
        assert!(matches!(compute_metrics(&[]), Err(Error::Range(_))));
        assert!(matches!(
            compute_metrics(&[pair(&[1.0, 2.0], &[3.0, 3.0])]),
            Err(Error::Degenerate(_))
        ));
        assert!(matches!(
            compute_metrics(&[pair(&[1.0], &[3.0, 3.0])]),
            Err(Error::Shape(_))
        ));
    }

    fn scheme(s: &str) -> OnlinePolicy {
        s.parse().unwrap()
    }

    fn result(variant: Variant, s: &str, rmse: f64) -> RunResult {
        RunResult {
            variant,
            scheme: scheme(s),
            report: MetricReport {
                rmse,
                nrmse: rmse,
                r2: 1.0 - rmse,
                n_windows: 1,
                degenerate_windows_skipped: 0,
            },
        }
    }

    #[test]
    fn dominating_scheme_ranks_first() {
        let results = vec![
            result(Variant::Base, "uniform:uniform", 2.0),
            result(Variant::Base, "segment:similar", 1.0),
            result(Variant::Proposed, "uniform:uniform", 0.7),
            result(Variant::Proposed, "segment:similar", 0.5),
        ];
        for m in Metric::ALL {
            let table = rank_table(&results, m);
            assert_eq!(table.get(&scheme("segment:similar")), Some(1.0));
            assert_eq!(table.get(&scheme("uniform:uniform")), Some(2.0));
        }
    }

    #[test]
    fn ties_share_average_rank() {
        let results = vec![
            result(Variant::Base, "uniform:uniform", 1.0),
            result(Variant::Base, "decay:uniform", 1.0),
            result(Variant::Base, "frozen", 3.0),
        ];
        let table = rank_table(&results, Metric::Rmse);
        assert_eq!(table.get(&scheme("uniform:uniform")), Some(1.5));
        assert_eq!(table.get(&scheme("decay:uniform")), Some(1.5));
        assert_eq!(table.get(&scheme("frozen")), Some(3.0));
        assert_eq!(table.temporal, ["uniform", "decay", "frozen"]);
        assert_eq!(table.nontemporal, ["uniform", "frozen"]);
        assert_eq!(table.row_means, [Some(1.5), Some(3.0)]);
        assert_eq!(table.cells[1][0], None);
    }

    #[test]
    fn csv_outputs() {
        let results = vec![
            result(Variant::Base, "uniform:uniform", 2.0),
            result(Variant::Base, "segment:similar", 1.0),
        ];
        let report = report_csv(&results);
        assert_eq!(report.lines().next().unwrap(), REPORT_HEADER);
        assert_eq!(report.lines().nth(2).unwrap(), "base,segment,similar,1,1,0");
        let ranks = rank_table(&results, Metric::Rmse).to_csv();
        assert_eq!(
            ranks,
            "nontemporal,uniform,segment,mean\nuniform,2.0000,,2.0000\nsimilar,,1.0000,1.0000\nmean,2.0000,1.0000,\n"
        );
    }

    #[test]
    fn benchmark_config_checks() {
        let model = ModelConfig::new(Variant::Base, 2, 2, 24, 12);
        let mut cfg = BenchmarkConfig {
            variants: vec![Variant::Base, Variant::Proposed],
            schemes: vec![OnlinePolicy::Update(SchemeSpec::UNIFORM), OnlinePolicy::Frozen],
            model,
            train: TrainConfig::default(),
            horizon: HorizonConfig::default(),
            online_days: 10,
            eval_skip_days: 0,
        };
        assert!(cfg.validate().is_ok());
        cfg.schemes.pop();
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn rmse_translation_equivariant(
            truth in prop::collection::vec(-50.0f64..50.0, 8),
            noise in prop::collection::vec(-5.0f64..5.0, 8),
            c in -100.0f64..100.0,
        ) {
            let pred: Vec<f64> = truth.iter().zip(&noise).map(|(t, n)| t + n).collect();
            prop_assume!(znormalize(&truth).degenerate == false);
            let a = compute_metrics(&[pair(&pred, &truth)]).unwrap();
            let shift = |v: &[f64]| v.iter().map(|x| x + c).collect::<Vec<_>>();
            let b = compute_metrics(&[pair(&shift(&pred), &shift(&truth))]).unwrap();
            prop_assert!((a.rmse - b.rmse).abs() < 1e-12 * (1.0 + c.abs()));
        }

        #[test]
        fn nrmse_invariant_to_positive_affine_prediction(
            truth in prop::collection::vec(-50.0f64..50.0, 12),
            pred in prop::collection::vec(-50.0f64..50.0, 12),
            scale in 0.01f64..100.0,
            shift in -100.0f64..100.0,
        ) {
            prop_assume!(!znormalize(&truth).degenerate && !znormalize(&pred).degenerate);
            let a = compute_metrics(&[pair(&pred, &truth)]).unwrap();
            let moved: Vec<f64> = pred.iter().map(|p| p * scale + shift).collect();
            let b = compute_metrics(&[pair(&moved, &truth)]).unwrap();
            prop_assert!((a.nrmse - b.nrmse).abs() < 1e-9);
        }

        #[test]
        fn rank_sums_are_conserved(
            values in prop::collection::vec(prop::collection::vec(0u8..4, 5), 3),
        ) {
            let schemes = ["uniform:uniform", "segment:similar", "decay:uniform", "fixed90:uniform", "frozen"];
            let variants = [Variant::Base, Variant::BaseInter, Variant::Proposed];
            let results: Vec<RunResult> = variants
                .iter()
                .zip(&values)
                .flat_map(|(&v, row)| schemes.iter().zip(row).map(move |(s, &x)| result(v, s, x as f64)))
                .collect();
            for (_, ranks) in variant_ranks(&results, Metric::Nrmse) {
                let sum: f64 = ranks.iter().map(|(_, r)| r).sum();
                prop_assert_eq!(sum, 15.0);
                prop_assert!(ranks.iter().all(|&(_, r)| (1.0..=5.0).contains(&r)));
            }
        }
    }
}
