//! Similarity search and regime segmentation.
//!
//! `mass` computes z-normalized Euclidean distance profiles with an FFT
//! sliding dot product. `matrix_profile_index` finds every subsequence's
//! nearest non-trivial neighbour with an incremental dot-product recurrence.
//! `corrected_arc_count` turns the neighbour arcs into a boundary score, and
//! `fluss_probability` sums those scores over channels, forces the curve to be
//! non-decreasing and normalizes it into sampling probabilities that favour
//! the most recent regime.
//!
//! Any pair involving a zero-variance subsequence gets the maximal distance
//! `sqrt(2m)`.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data::is_degenerate_std;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DistanceProfile {
    pub distances: Vec<f64>,
    pub m: usize,
    /// Subsequences with zero variance.
    pub degenerate: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixProfileIndex {
    pub nn_index: Vec<usize>,
    pub m: usize,
    pub exclusion_radius: usize,
    pub degenerate: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ArcCountCurve {
    pub cac: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplingCurve {
    /// Summed per-channel arc counts before clamping.
    pub cac_sum: Vec<f64>,
    /// Probability per subsequence start.
    pub p: Vec<f64>,
}

/// Standard trivial-match exclusion radius `ceil(m / 2)`.
pub fn default_exclusion_radius(m: usize) -> usize {
    m.div_ceil(2)
}

/// Rolling mean and population std of every length-`m` window.
fn rolling_stats(x: &[f64], m: usize) -> (Vec<f64>, Vec<f64>, Vec<bool>) {
    let l = x.len() + 1 - m;
    let mut means = Vec::with_capacity(l);
    let mut stds = Vec::with_capacity(l);
    let mut degenerate = Vec::with_capacity(l);
    let mut s = 0.0;
    let mut s2 = 0.0;
    let mut ps = vec![0.0; x.len() + 1];
    let mut ps2 = vec![0.0; x.len() + 1];
    for (i, v) in x.iter().enumerate() {
        s += v;
        s2 += v * v;
        ps[i + 1] = s;
        ps2[i + 1] = s2;
    }
    for i in 0..l {
        let mean = (ps[i + m] - ps[i]) / m as f64;
        let mut var = (ps2[i + m] - ps2[i]) / m as f64 - mean * mean;
        // cancellation guard: recompute directly when the prefix estimate is tiny
        if var < 1e-8 * mean.abs().max(1.0).powi(2) {
            var = x[i..i + m].iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
        }
        let std = var.max(0.0).sqrt();
        means.push(mean);
        stds.push(std);
        degenerate.push(is_degenerate_std(mean, std));
    }
    (means, stds, degenerate)
}

fn centered(x: &[f64]) -> Vec<f64> {
    let mean = x.iter().sum::<f64>() / x.len().max(1) as f64;
    x.iter().map(|v| v - mean).collect()
}

fn check_finite(x: &[f64], what: &str) -> Result<()> {
    match x.iter().position(|v| !v.is_finite()) {
        Some(p) => Err(Error::NonFinite(format!("{what} value {p}"))),
        None => Ok(()),
    }
}

/// `q · s[i..i+m]` for every start `i`, via FFT.
fn sliding_dot(q: &[f64], s: &[f64]) -> Vec<f64> {
    let (m, n) = (q.len(), s.len());
    let size = (n + m).next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);
    let mut a: Vec<Complex<f64>> = s.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(size, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = q.iter().rev().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(size, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (x, y) in a.iter_mut().zip(&b) {
        *x *= y;
    }
    inv.process(&mut a);
    let scale = 1.0 / size as f64;
    (0..=n - m).map(|i| a[i + m - 1].re * scale).collect()
}

fn z_distance(qt: f64, m: usize, mu_a: f64, sd_a: f64, mu_b: f64, sd_b: f64) -> f64 {
    let mf = m as f64;
    let corr = ((qt - mf * mu_a * mu_b) / (mf * sd_a * sd_b)).clamp(-1.0, 1.0);
    (2.0 * mf * (1.0 - corr)).max(0.0).sqrt()
}

/// z-normalized Euclidean distance from `query` to every length-`m`
/// subsequence of `series`.
pub fn mass(query: &[f64], series: &[f64]) -> Result<DistanceProfile> {
    let (m, n) = (query.len(), series.len());
    if m == 0 || m > n {
        return Err(Error::Range(format!("query length {m} must be in 1..={n}")));
    }
    check_finite(query, "query")?;
    check_finite(series, "series")?;
    let q = centered(query);
    let (q_mean, q_std) = crate::data::mean_std(&q);
    if is_degenerate_std(q_mean, q_std) {
        return Err(Error::Degenerate("query has zero variance".into()));
    }
    let s = centered(series);
    let (means, stds, degenerate) = rolling_stats(&s, m);
    let qt = sliding_dot(&q, &s);
    let max_dist = (2.0 * m as f64).sqrt();
    let distances = (0..qt.len())
        .map(|i| {
            if degenerate[i] {
                max_dist
            } else {
                z_distance(qt[i], m, q_mean, q_std, means[i], stds[i])
            }
        })
        .collect();
    Ok(DistanceProfile {
        distances,
        m,
        degenerate,
    })
}

/// Correlations closer than this to the best one count as ties.
pub const TIE_TOLERANCE: f64 = 1e-10;

/// Nearest neighbour of every subsequence outside `|i - j| <= exclusion_radius`.
/// Ties, i.e. squared z-distances within `2 m TIE_TOLERANCE` of the minimum,
/// go to the smallest `j`.
pub fn matrix_profile_index(series: &[f64], m: usize, exclusion_radius: usize) -> Result<MatrixProfileIndex> {
    let n = series.len();
    if m == 0 || n < 2 * m {
        return Err(Error::Range(format!("series of length {n} is shorter than 2m = {}", 2 * m)));
    }
    check_finite(series, "series")?;
    let l = n - m + 1;
    if l <= exclusion_radius + 1 {
        return Err(Error::Range(format!(
            "exclusion radius {exclusion_radius} leaves no admissible neighbour among {l} subsequences"
        )));
    }
    let s = centered(series);
    let (means, stds, degenerate) = rolling_stats(&s, m);
    // Distance is monotone decreasing in the correlation, so neighbours are
    // found by maximizing the clamped correlation. A zero-variance partner has
    // correlation 0, i.e. the maximal distance sqrt(2m).
    let mf = m as f64;
    let inv_sd: Vec<f64> = stds
        .iter()
        .zip(&degenerate)
        .map(|(sd, &flat)| if flat { 0.0 } else { 1.0 / (sd * mf.sqrt()) })
        .collect();
    let scaled_mean: Vec<f64> = means.iter().map(|mu| mu * mf).collect();
    // row 0 of the dot-product matrix, reused as column 0 by symmetry
    let first: Vec<f64> = (0..l).map(|j| crate::nn::dot(&s[..m], &s[j..j + m])).collect();
    let mut qt = first.clone();
    let mut nn_index = vec![0usize; l];
    let mut corr = vec![0.0; l];
    for i in 0..l {
        if i > 0 {
            let (out, add) = (s[i - 1], s[i + m - 1]);
            for j in (1..l).rev() {
                qt[j] = qt[j - 1] - out * s[j - 1] + add * s[j + m - 1];
            }
            qt[0] = first[i];
        }
        let (mu_i, inv_i) = (means[i], inv_sd[i]);
        let lo_end = i.saturating_sub(exclusion_radius);
        let hi_start = (i + exclusion_radius + 1).min(l);
        for j in (0..lo_end).chain(hi_start..l) {
            corr[j] = ((qt[j] - scaled_mean[j] * mu_i) * inv_i * inv_sd[j]).min(1.0);
        }
        let best = (0..lo_end)
            .chain(hi_start..l)
            .map(|j| corr[j])
            .fold(f64::NEG_INFINITY, f64::max);
        nn_index[i] = (0..lo_end)
            .chain(hi_start..l)
            .find(|&j| corr[j] >= best - TIE_TOLERANCE)
            .expect("at least one admissible neighbour");
    }
    Ok(MatrixProfileIndex {
        nn_index,
        m,
        exclusion_radius,
        degenerate,
    })
}

/// Arc crossings per position divided by the count expected for random arcs,
/// capped at 1. The first and last `m` positions are set to 1.
pub fn corrected_arc_count(mpi: &MatrixProfileIndex) -> ArcCountCurve {
    let l = mpi.nn_index.len();
    let mut diff = vec![0i64; l + 1];
    for (i, &j) in mpi.nn_index.iter().enumerate() {
        let (a, b) = (i.min(j), i.max(j));
        if b > a + 1 {
            diff[a + 1] += 1;
            diff[b] -= 1;
        }
    }
    let mut cac = Vec::with_capacity(l);
    let mut count = 0i64;
    for t in 0..l {
        count += diff[t];
        let value = if t < mpi.m || t + mpi.m >= l {
            1.0
        } else {
            let expected = 2.0 * t as f64 * (l - t) as f64 / l as f64;
            (count as f64 / expected).min(1.0)
        };
        cac.push(value);
    }
    ArcCountCurve { cac }
}

/// Reverse scan with a running minimum: every value is lowered to the
/// smallest value at or after it, making the curve non-decreasing.
pub fn clamp_non_decreasing(curve: &mut [f64]) {
    let mut running = f64::INFINITY;
    for v in curve.iter_mut().rev() {
        running = running.min(*v);
        *v = running;
    }
}

/// Clamps then normalizes a summed arc-count curve. A curve with no mass
/// becomes uniform.
pub fn probability_from_sum(cac_sum: Vec<f64>) -> Result<SamplingCurve> {
    if cac_sum.is_empty() {
        return Err(Error::Range("empty arc-count curve".into()));
    }
    let mut p = cac_sum.clone();
    clamp_non_decreasing(&mut p);
    let total: f64 = p.iter().sum();
    if total > 0.0 {
        p.iter_mut().for_each(|v| *v /= total);
    } else {
        let u = 1.0 / p.len() as f64;
        p.iter_mut().for_each(|v| *v = u);
    }
    let curve = SamplingCurve { cac_sum, p };
    check_sampling_curve(&curve.p)?;
    Ok(curve)
}

fn check_sampling_curve(p: &[f64]) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::NonFinite(format!("sampling curve sums to {sum}")));
    }
    if p.iter().any(|v| !(*v >= 0.0)) || p.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Range("sampling curve is negative or decreasing".into()));
    }
    Ok(())
}

/// Segmentation probability over subsequence starts of a row-major `τ × d`
/// series, using subsequence length `m`. Constant channels are skipped; if all
/// are constant the curve is uniform.
pub fn fluss_probability(series: &[f64], d: usize, m: usize) -> Result<SamplingCurve> {
    if d == 0 || series.len() % d != 0 {
        return Err(Error::Shape(format!("{} values do not form rows of width {d}", series.len())));
    }
    let tau = series.len() / d;
    if m == 0 || tau < 2 * m {
        return Err(Error::Range(format!("series of {tau} rows is shorter than 2m = {}", 2 * m)));
    }
    let l = tau - m + 1;
    let radius = default_exclusion_radius(m);
    let mut sum = vec![0.0; l];
    let mut used = 0;
    for j in 0..d {
        let channel: Vec<f64> = (0..tau).map(|t| series[t * d + j]).collect();
        let (mean, std) = crate::data::mean_std(&channel);
        if is_degenerate_std(mean, std) {
            log::warn!("segmentation: channel {j} is constant, skipped");
            continue;
        }
        let mpi = matrix_profile_index(&channel, m, radius)?;
        for (acc, v) in sum.iter_mut().zip(corrected_arc_count(&mpi).cac) {
            *acc += v;
        }
        used += 1;
    }
    if used == 0 {
        log::warn!("segmentation: every channel is constant, using a uniform curve");
        sum.iter_mut().for_each(|v| *v = 0.0);
    }
    probability_from_sum(sum)
}
