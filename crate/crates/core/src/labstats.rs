//! Run bookkeeping and the analysis toolkit: final-epoch averaging, the
//! Wilcoxon rank-sum test, quantiles, hidden-layer activation summaries and
//! parameter histograms.

use serde::{Deserialize, Serialize};

use crate::dataio::{permute_pixels, Dataset, Permutation};
use crate::error::{Error, Result};
use crate::netcore::{forward, ForwardMode, MlpModel, Probe};
use crate::stochastics::RngStream;

/// Number of trailing epochs averaged into a run's final metric.
pub const FINAL_EPOCHS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    /// Mean mini-batch cost with dilution active.
    pub train_cost: f64,
    pub test_cost: f64,
    pub test_error: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    TrainCost,
    TestCost,
    TestError,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::TrainCost, Metric::TestCost, Metric::TestError];

    pub fn of(self, m: &EpochMetrics) -> f64 {
        match self {
            Metric::TrainCost => m.train_cost,
            Metric::TestCost => m.test_cost,
            Metric::TestError => m.test_error,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::TrainCost => "train_cost",
            Metric::TestCost => "test_cost",
            Metric::TestError => "test_error",
        }
    }
}

/// Per-epoch metrics of one (condition, seed) training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub condition: String,
    pub seed: u64,
    pub epochs: Vec<EpochMetrics>,
    pub wall_time_secs: f64,
    /// Epoch at which the loss became non-finite, if it did.
    pub diverged_at: Option<usize>,
}

impl RunRecord {
    pub fn series(&self, metric: Metric) -> Vec<f64> {
        self.epochs.iter().map(|e| metric.of(e)).collect()
    }
}

/// Mean of `metric` over the last three recorded epochs.
pub fn final_metric(record: &RunRecord, metric: Metric) -> Result<f64> {
    final_of_series(&record.series(metric))
}

pub fn final_of_series(series: &[f64]) -> Result<f64> {
    if series.len() < FINAL_EPOCHS {
        return Err(Error::Usage(format!(
            "final metric needs at least {FINAL_EPOCHS} epochs, record has {}",
            series.len()
        )));
    }
    let tail = &series[series.len() - FINAL_EPOCHS..];
    Ok(tail.iter().sum::<f64>() / FINAL_EPOCHS as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSumResult {
    /// Standardised rank sum of the first group; negative when the first
    /// group tends to be smaller.
    pub z: f64,
    /// Two-sided p-value.
    pub p: f64,
    /// Rank sum of the first group.
    pub rank_sum: f64,
}

/// Midranks (1-based) of the pooled sample; ties share their average rank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && values[idx[end]] == values[idx[start]] {
            end += 1;
        }
        let rank = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = rank;
        }
        start = end;
    }
    ranks
}

fn check_groups(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Usage(format!(
            "rank-sum test needs at least two values per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b).any(|v| v.is_nan()) {
        return Err(Error::Data("rank-sum test input contains NaN".into()));
    }
    Ok(())
}

/// Unpaired Wilcoxon rank-sum test, normal approximation with midranks and
/// tie-corrected variance. No continuity correction is applied.
pub fn rank_sum_test(a: &[f64], b: &[f64]) -> Result<RankSumResult> {
    check_groups(a, b)?;
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let n = na + nb;
    let rank_sum: f64 = ranks[..a.len()].iter().sum();
    let mean = na * (n + 1.0) / 2.0;

    let mut sorted = pooled.clone();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    for group in sorted.chunk_by(|x, y| x == y) {
        let t = group.len() as f64;
        tie_term += t * t * t - t;
    }
    let var = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if var <= 0.0 {
        return Ok(RankSumResult {
            z: 0.0,
            p: 1.0,
            rank_sum,
        });
    }
    let z = (rank_sum - mean) / var.sqrt();
    let p = libm::erfc(z.abs() / std::f64::consts::SQRT_2).min(1.0);
    Ok(RankSumResult { z, p, rank_sum })
}

/// Exact two-sided permutation p-value of the rank-sum statistic: the share
/// of all `C(na + nb, na)` group assignments of the pooled midranks whose
/// rank sum lies at least as far from its mean as the observed one.
///
/// Exponential in the group sizes; meant for small groups.
pub fn rank_sum_exact_p(a: &[f64], b: &[f64]) -> Result<f64> {
    check_groups(a, b)?;
    if a.len() + b.len() > 30 {
        return Err(Error::Usage(
            "exact enumeration limited to 30 pooled values".into(),
        ));
    }
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    // Doubled ranks are integers, so comparisons are exact.
    let doubled: Vec<i64> = ranks.iter().map(|r| (2.0 * r) as i64).collect();
    let na = a.len();
    let n = pooled.len() as i64;
    let observed: i64 = doubled[..na].iter().sum();
    // twice the expected rank sum
    let centre = na as i64 * (n + 1);
    let observed_dev = (observed - centre).abs();

    let mut extreme = 0u64;
    let mut total = 0u64;
    let mut chosen = Vec::with_capacity(na);
    enumerate_subsets(&doubled, na, 0, 0, &mut chosen, &mut |sum| {
        total += 1;
        if (sum - centre).abs() >= observed_dev {
            extreme += 1;
        }
    });
    Ok(extreme as f64 / total as f64)
}

fn enumerate_subsets(
    values: &[i64],
    k: usize,
    start: usize,
    sum: i64,
    chosen: &mut Vec<usize>,
    visit: &mut dyn FnMut(i64),
) {
    if chosen.len() == k {
        visit(sum);
        return;
    }
    let remaining = k - chosen.len();
    for i in start..=values.len() - remaining {
        chosen.push(i);
        enumerate_subsets(values, k, i + 1, sum + values[i], chosen, visit);
        chosen.pop();
    }
}

/// Median and interquartile bounds with linear interpolation between order
/// statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MedianIqr {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

pub fn median_iqr(values: &[f64]) -> Result<MedianIqr> {
    if values.is_empty() {
        return Err(Error::Usage("quantiles of an empty sample".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(MedianIqr {
        median: quantile_sorted(&v, 0.5),
        q1: quantile_sorted(&v, 0.25),
        q3: quantile_sorted(&v, 0.75),
    })
}

fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Unbiased (n - 1) standard deviation; zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    let ss: f64 = values.iter().map(|v| (v - m) * (v - m)).sum();
    (ss / (values.len() - 1) as f64).sqrt()
}

/// Which forward pass the hidden outputs are captured from.
pub enum ProbeRegime<'a> {
    /// Dilution active as during training.
    MasksOn(&'a mut RngStream),
    /// Identity transform, original inputs.
    MasksOff,
    /// Identity transform on pixel-permuted inputs.
    MasksOffPermuted(&'a mut RngStream, Permutation),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegimeTag {
    MasksOn,
    MasksOff,
    MasksOffPermuted,
}

impl RegimeTag {
    pub const ALL: [RegimeTag; 3] = [
        RegimeTag::MasksOn,
        RegimeTag::MasksOff,
        RegimeTag::MasksOffPermuted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegimeTag::MasksOn => "masks_on",
            RegimeTag::MasksOff => "masks_off",
            RegimeTag::MasksOffPermuted => "masks_off_permuted",
        }
    }
}

impl std::str::FromStr for RegimeTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RegimeTag::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown probe regime `{s}`")))
    }
}

/// Hidden-layer output averages for one probe pass.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerActivity {
    /// Mean output of each unit over all samples.
    pub unit_means: Vec<f64>,
    /// Mean output over all units, for each sample.
    pub sample_means: Vec<f64>,
}

impl LayerActivity {
    /// Grand mean output of the layer.
    pub fn mean(&self) -> f64 {
        mean(&self.sample_means)
    }

    /// Spread of the per-sample means across samples.
    pub fn sample_std(&self) -> f64 {
        sample_std(&self.sample_means)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationSummary {
    pub regime: RegimeTag,
    pub layers: Vec<LayerActivity>,
}

const PROBE_CHUNK: usize = 500;

/// Forward-passes every sample of `dataset` and reduces each hidden layer's
/// outputs to per-unit and per-sample means.
///
/// With masks on, coefficients are redrawn for each chunk of 500 samples.
pub fn activation_summary(
    model: &MlpModel,
    dataset: &Dataset,
    regime: ProbeRegime<'_>,
) -> Result<ActivationSummary> {
    if dataset.features() != model.input_width() {
        return Err(Error::Shape(format!(
            "dataset has {} features, model expects {}",
            dataset.features(),
            model.input_width()
        )));
    }
    let (tag, mut stream, permuted) = match regime {
        ProbeRegime::MasksOn(s) => (RegimeTag::MasksOn, Some(s), None),
        ProbeRegime::MasksOff => (RegimeTag::MasksOff, None, None),
        ProbeRegime::MasksOffPermuted(s, policy) => (
            RegimeTag::MasksOffPermuted,
            None,
            Some(permute_pixels(dataset, s, policy)),
        ),
    };
    let data = permuted.as_ref().unwrap_or(dataset);

    let widths = model.widths();
    let hidden = &widths[1..widths.len() - 1];
    let mut unit_sums: Vec<Vec<f64>> = hidden.iter().map(|&w| vec![0.0; w]).collect();
    let mut sample_means: Vec<Vec<f64>> = hidden
        .iter()
        .map(|_| Vec::with_capacity(data.len()))
        .collect();

    let indices: Vec<usize> = (0..data.len()).collect();
    let mut probe = Probe::default();
    for chunk in indices.chunks(PROBE_CHUNK) {
        let (x, _) = data.gather(chunk);
        let mode = match stream.as_deref_mut() {
            Some(s) => ForwardMode::Train(s),
            None => ForwardMode::Eval,
        };
        forward(model, &x, mode, Some(&mut probe))?;
        for (h, out) in probe.outputs.iter().enumerate() {
            for r in 0..out.rows() {
                let row = out.row(r);
                for (acc, v) in unit_sums[h].iter_mut().zip(row) {
                    *acc += v;
                }
                sample_means[h].push(row.iter().sum::<f64>() / row.len() as f64);
            }
        }
    }

    let n = data.len() as f64;
    let layers = unit_sums
        .into_iter()
        .zip(sample_means)
        .map(|(sums, samples)| LayerActivity {
            unit_means: sums.into_iter().map(|s| s / n).collect(),
            sample_means: samples,
        })
        .collect();
    Ok(ActivationSummary {
        regime: tag,
        layers,
    })
}

/// Uniform-width bin counts over `[lo, hi]`. Bins are right-open except the
/// last, which includes `hi`; values outside the range (and NaN) are tallied
/// separately.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub underflow: u64,
    pub overflow: u64,
}

impl Histogram {
    pub fn edges(&self) -> Vec<f64> {
        let bins = self.counts.len();
        let width = (self.hi - self.lo) / bins as f64;
        (0..=bins)
            .map(|i| {
                if i == bins {
                    self.hi
                } else {
                    self.lo + i as f64 * width
                }
            })
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum::<u64>() + self.underflow + self.overflow
    }
}

pub fn histogram(values: &[f64], bins: usize, range: (f64, f64)) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(Error::Parameter("histogram needs at least one bin".into()));
    }
    if !(lo.is_finite() && hi.is_finite() && hi > lo) {
        return Err(Error::Parameter(format!(
            "histogram range [{lo}, {hi}] is degenerate"
        )));
    }
    let mut h = Histogram {
        lo,
        hi,
        counts: vec![0; bins],
        underflow: 0,
        overflow: 0,
    };
    let scale = bins as f64 / (hi - lo);
    for &v in values {
        if v < lo {
            h.underflow += 1;
        } else if v > hi || v.is_nan() {
            h.overflow += 1;
        } else {
            let i = (((v - lo) * scale) as usize).min(bins - 1);
            h.counts[i] += 1;
        }
    }
    Ok(h)
}

/// Smallest and largest value, widened by one half on each side if equal.
pub fn shared_range<'a>(groups: impl IntoIterator<Item = &'a [f64]>) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for g in groups {
        for &v in g {
            if v.is_finite() {
                lo = lo.min(v);
                hi = hi.max(v);
            }
        }
    }
    if lo > hi {
        return None;
    }
    if lo == hi {
        return Some((lo - 0.5, hi + 0.5));
    }
    Some((lo, hi))
}

/// Axis ranges for weight and bias histograms, one pair per layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamRanges {
    pub weights: Vec<(f64, f64)>,
    pub biases: Vec<(f64, f64)>,
}

impl ParamRanges {
    /// Ranges covering every model, so histograms from different conditions
    /// share their axes.
    pub fn covering(models: &[&MlpModel]) -> Result<Self> {
        let first = models
            .first()
            .ok_or_else(|| Error::Usage("no models to cover".into()))?;
        let layers = first.layers().len();
        if models.iter().any(|m| m.layers().len() != layers) {
            return Err(Error::Shape("models differ in depth".into()));
        }
        let mut weights = Vec::with_capacity(layers);
        let mut biases = Vec::with_capacity(layers);
        for l in 0..layers {
            weights.push(
                shared_range(models.iter().map(|m| m.layers()[l].weights.data()))
                    .ok_or_else(|| Error::Data(format!("layer {} weights not finite", l + 1)))?,
            );
            biases.push(
                shared_range(models.iter().map(|m| m.layers()[l].bias.data()))
                    .ok_or_else(|| Error::Data(format!("layer {} biases not finite", l + 1)))?,
            );
        }
        Ok(ParamRanges { weights, biases })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParamHistograms {
    pub weights: Histogram,
    pub biases: Histogram,
}

/// Per-layer weight and bias histograms over the given shared ranges.
pub fn param_distributions(
    model: &MlpModel,
    ranges: &ParamRanges,
    bins: usize,
) -> Result<Vec<LayerParamHistograms>> {
    if ranges.weights.len() != model.layers().len() || ranges.biases.len() != model.layers().len() {
        return Err(Error::Shape(
            "parameter ranges do not match model depth".into(),
        ));
    }
    model
        .layers()
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            Ok(LayerParamHistograms {
                weights: histogram(layer.weights.data(), bins, ranges.weights[l])?,
                biases: histogram(layer.bias.data(), bins, ranges.biases[l])?,
            })
        })
        .collect()
}
