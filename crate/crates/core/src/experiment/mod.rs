//! Seed-matched multi-condition training sweeps and their result files.
//!
//! Layout of an output directory:
//!
//! ```text
//! effective_config.toml        every setting, defaults filled in
//! runs/<label>_seed<s>.csv     per-epoch metrics of one run
//! runs/<label>_seed<s>.params  final parameters (snapshot format)
//! runs/<label>_seed<s>.probe.json
//! runs/<label>_seed<s>.json    run record; written last, marks completion
//! metrics.csv                  all run CSVs, condition then seed order
//! curves.csv                   per-epoch median and quartiles per condition
//! summary.json                 final metrics, pairwise rank-sum tests
//! histograms_activations.csv
//! histograms_params.csv
//! ```

mod config;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{default_conditions, Condition, ExperimentConfig, Preset, ProbeSettings};

use crate::dataio::{batches, load_idx, Dataset};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::labstats::{
    activation_summary, final_of_series, histogram, median_iqr, rank_sum_test, shared_range,
    ActivationSummary, EpochMetrics, Metric, ProbeRegime, RegimeTag, RunRecord,
};
use crate::netcore::{
    backward, forward, init_variance_scaling, read_snapshot, sgd_momentum_step,
    softmax_cross_entropy, write_snapshot, ForwardMode, MlpModel, OptimizerState,
};
use crate::stochastics::RngStream;

/// Stream ids. Every stream is keyed by the run seed alone, so runs of
/// different conditions with the same seed share initial parameters, batch
/// order and the probe permutation.
pub const STREAM_INIT: u64 = 1;
pub const STREAM_SHUFFLE: u64 = 2;
pub const STREAM_DILUTION: u64 = 3;
pub const STREAM_PERMUTE: u64 = 4;
pub const STREAM_PROBE: u64 = 5;

const EVAL_CHUNK: usize = 1000;

pub const METRICS_HEADER: &str = "condition,seed,epoch,lr,train_cost,test_cost,test_error";

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Skip (condition, seed) pairs whose run record already exists.
    pub resume: bool,
    /// Per-epoch progress lines on stderr.
    pub progress: bool,
}

pub struct Datasets {
    pub train: Dataset,
    pub test: Dataset,
}

impl Datasets {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let mut train = load_idx(&cfg.train_images, &cfg.train_labels)?;
        if let Some(n) = cfg.train_subset {
            if n > train.len() {
                return Err(Error::Data(format!(
                    "train_subset {n} exceeds the {} available training samples",
                    train.len()
                )));
            }
            train = train.head(n);
        }
        let test = load_idx(&cfg.test_images, &cfg.test_labels)?;
        Ok(Datasets { train, test })
    }
}

pub fn run_stem(label: &str, seed: u64) -> String {
    format!("{label}_seed{seed}")
}

fn runs_dir(out: &Path) -> PathBuf {
    out.join("runs")
}

/// Mean cost and error rate over a whole dataset, with dilution off.
pub fn evaluate(model: &MlpModel, data: &Dataset) -> Result<(f64, f64)> {
    let mut cost = 0.0;
    let mut errors = 0.0;
    for batch in batches(data, EVAL_CHUNK, None)? {
        let (x, y) = batch;
        let (logits, _) = forward(model, &x, ForwardMode::Eval, None)?;
        let (c, e) = softmax_cross_entropy(&logits, &y)?;
        cost += c * y.len() as f64;
        errors += e * y.len() as f64;
    }
    let n = data.len() as f64;
    Ok((cost / n, errors / n))
}

fn is_divergence(e: &Error) -> bool {
    matches!(e, Error::Numeric { .. })
}

/// One full training run. A non-finite loss or activation ends the run
/// early with `diverged_at` set; the returned model is then the last
/// finite one.
pub fn train_run(
    cfg: &ExperimentConfig,
    condition: &Condition,
    seed: u64,
    data: &Datasets,
    progress: bool,
) -> Result<(RunRecord, MlpModel)> {
    let started = Instant::now();
    let spec = cfg.spec(condition)?;
    let mut model = init_variance_scaling(&spec, &mut RngStream::new(seed, STREAM_INIT))?;
    let mut shuffle = RngStream::new(seed, STREAM_SHUFFLE);
    let mut dilution = RngStream::new(seed, STREAM_DILUTION);
    let mut state = OptimizerState::new(&model, cfg.momentum);
    let schedule = cfg.schedule();
    let mut record = RunRecord {
        condition: condition.label.clone(),
        seed,
        epochs: Vec::with_capacity(cfg.epochs),
        wall_time_secs: 0.0,
        diverged_at: None,
    };

    'epochs: for epoch in 0..cfg.epochs {
        let lr = schedule.rate(epoch);
        let before = model.clone();
        let mut cost_sum = 0.0;
        for (x, y) in batches(&data.train, cfg.batch_size, Some(&mut shuffle))? {
            let (logits, cache) = match forward(&model, &x, ForwardMode::Train(&mut dilution), None)
            {
                Ok(v) => v,
                Err(e) if is_divergence(&e) => {
                    record.diverged_at = Some(epoch);
                    model = before;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let (cost, _) = softmax_cross_entropy(&logits, &y)?;
            if !cost.is_finite() {
                record.diverged_at = Some(epoch);
                model = before;
                break 'epochs;
            }
            cost_sum += cost * y.len() as f64;
            let grads = backward(&model, &cache, &y)?;
            sgd_momentum_step(&mut model, &grads, &mut state, lr)?;
        }
        let evaluated = match evaluate(&model, &data.test) {
            Ok(v) if v.0.is_finite() && model.is_finite() => Some(v),
            Ok(_) => None,
            Err(e) if is_divergence(&e) => None,
            Err(e) => return Err(e),
        };
        let Some((test_cost, test_error)) = evaluated else {
            record.diverged_at = Some(epoch);
            model = before;
            break;
        };
        state.epoch = epoch + 1;
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_cost: cost_sum / data.train.len() as f64,
            test_cost,
            test_error,
        };
        if progress {
            eprintln!(
                "{} epoch {epoch}: train {:.4} test {:.4} error {:.4}",
                run_stem(&condition.label, seed),
                metrics.train_cost,
                test_cost,
                test_error
            );
        }
        record.epochs.push(metrics);
    }
    record.wall_time_secs = started.elapsed().as_secs_f64();
    Ok((record, model))
}

/// The three probe regimes on the first `probe.samples` test images.
pub fn probe_model(
    cfg: &ExperimentConfig,
    model: &MlpModel,
    seed: u64,
    test: &Dataset,
) -> Result<Vec<ActivationSummary>> {
    let data = match cfg.probe.samples {
        Some(n) if n < test.len() => test.head(n),
        _ => test.clone(),
    };
    Ok(vec![
        activation_summary(
            model,
            &data,
            ProbeRegime::MasksOn(&mut RngStream::new(seed, STREAM_PROBE)),
        )?,
        activation_summary(model, &data, ProbeRegime::MasksOff)?,
        activation_summary(
            model,
            &data,
            ProbeRegime::MasksOffPermuted(
                &mut RngStream::new(seed, STREAM_PERMUTE),
                cfg.probe.permutation,
            ),
        )?,
    ])
}

pub fn metrics_csv_rows(record: &RunRecord) -> String {
    let mut s = String::new();
    for e in &record.epochs {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            record.condition, record.seed, e.epoch, e.lr, e.train_cost, e.test_cost, e.test_error
        )
        .expect("write to string");
    }
    s
}

fn json_bytes<T: Serialize>(value: &T) -> Vec<u8> {
    let mut v = serde_json::to_vec_pretty(value).expect("serialisable");
    v.push(b'\n');
    v
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::format(path, "json", e.to_string()))
}

fn record_path(out: &Path, label: &str, seed: u64) -> PathBuf {
    runs_dir(out).join(format!("{}.json", run_stem(label, seed)))
}

fn execute_run(
    cfg: &ExperimentConfig,
    condition: &Condition,
    seed: u64,
    data: &Datasets,
    progress: bool,
) -> Result<RunRecord> {
    let dir = runs_dir(&cfg.output_dir);
    let stem = run_stem(&condition.label, seed);
    let (record, model) = train_run(cfg, condition, seed, data, progress)?;
    let mut csv = String::from(METRICS_HEADER);
    csv.push('\n');
    csv.push_str(&metrics_csv_rows(&record));
    write_atomic(&dir.join(format!("{stem}.csv")), csv.as_bytes())?;
    write_snapshot(&model, &dir.join(format!("{stem}.params")))?;
    if cfg.probe.enabled && record.diverged_at.is_none() {
        let probes = probe_model(cfg, &model, seed, &data.test)?;
        write_atomic(
            &dir.join(format!("{stem}.probe.json")),
            &json_bytes(&probes),
        )?;
    }
    write_atomic(
        &record_path(&cfg.output_dir, &condition.label, seed),
        &json_bytes(&record),
    )?;
    if progress {
        match record.diverged_at {
            Some(e) => eprintln!("{stem}: diverged in epoch {e}"),
            None => eprintln!("{stem}: done in {:.1} s", record.wall_time_secs),
        }
    }
    Ok(record)
}

/// Runs every pending (condition, seed) pair, up to `cfg.jobs` at a time,
/// then writes the aggregate files and returns the summary.
pub fn run_experiment(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<Summary> {
    cfg.validate()?;
    let out = &cfg.output_dir;
    let dir = runs_dir(out);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

    let echo = out.join("effective_config.toml");
    if opts.resume && echo.exists() {
        let mut previous = ExperimentConfig::load(&echo)?;
        previous.jobs = cfg.jobs;
        previous.output_dir = cfg.output_dir.clone();
        if previous != *cfg {
            return Err(Error::Usage(format!(
                "{} differs from the requested configuration; refusing to resume",
                echo.display()
            )));
        }
    }
    write_atomic(&echo, cfg.to_toml().as_bytes())?;

    let pending: Vec<(&Condition, u64)> = cfg
        .conditions
        .iter()
        .flat_map(|c| cfg.seeds.iter().map(move |&s| (c, s)))
        .filter(|(c, s)| !(opts.resume && record_path(out, &c.label, *s).exists()))
        .collect();

    if !pending.is_empty() {
        let data = Datasets::load(cfg)?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Usage(format!("thread pool: {e}")))?;
        pool.install(|| {
            pending
                .par_iter()
                .map(|&(c, s)| execute_run(cfg, c, s, &data, opts.progress).map(|_| ()))
                .collect::<Result<Vec<()>>>()
        })?;
    }
    summarize(cfg)
}

/// Rebuilds the aggregate files of a results directory.
pub fn stats(results_dir: &Path) -> Result<Summary> {
    let mut cfg = ExperimentConfig::load(&results_dir.join("effective_config.toml"))?;
    cfg.output_dir = results_dir.to_path_buf();
    summarize(&cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub seed: u64,
    pub epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    /// One value per completed run, in seed order.
    pub values: Vec<f64>,
}

impl FinalStats {
    fn of(values: Vec<f64>) -> Option<Self> {
        let m = median_iqr(&values).ok()?;
        Some(FinalStats {
            median: m.median,
            q1: m.q1,
            q3: m.q3,
            values,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub label: String,
    pub mode: crate::dilution::DilutionMode,
    pub drop_rate: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub completed_seeds: Vec<u64>,
    pub missing_seeds: Vec<u64>,
    pub failed: Vec<FailedRun>,
    /// Keyed by quantity name, e.g. `final.test_cost`,
    /// `activation.masks_off.layer3.mean` or `weights.layer1.median`.
    pub quantities: BTreeMap<String, FinalStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub quantity: String,
    pub a: String,
    pub b: String,
    pub median_a: f64,
    pub median_b: f64,
    /// Positive when `a` tends to be larger.
    pub z: f64,
    pub p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub final_epochs: usize,
    pub conditions: Vec<ConditionSummary>,
    pub comparisons: Vec<Comparison>,
}

impl Summary {
    pub fn condition(&self, label: &str) -> Option<&ConditionSummary> {
        self.conditions.iter().find(|c| c.label == label)
    }

    pub fn comparison(&self, quantity: &str, a: &str, b: &str) -> Option<&Comparison> {
        self.comparisons
            .iter()
            .find(|c| c.quantity == quantity && c.a == a && c.b == b)
    }
}

struct Loaded {
    record: RunRecord,
    model: Option<MlpModel>,
    probes: Option<Vec<ActivationSummary>>,
}

fn median_of(values: &[f64]) -> f64 {
    median_iqr(values).map(|m| m.median).unwrap_or(f64::NAN)
}

/// Scalar per-run quantities used for between-condition comparisons.
fn run_quantities(run: &Loaded) -> BTreeMap<String, f64> {
    let mut q = BTreeMap::new();
    if run.record.diverged_at.is_some() {
        return q;
    }
    for metric in Metric::ALL {
        if let Ok(v) = final_of_series(&run.record.series(metric)) {
            q.insert(format!("final.{}", metric.as_str()), v);
        }
    }
    if let Some(probes) = &run.probes {
        for s in probes {
            for (l, layer) in s.layers.iter().enumerate() {
                let key = format!("activation.{}.layer{}", s.regime.as_str(), l + 1);
                q.insert(format!("{key}.mean"), layer.mean());
                q.insert(format!("{key}.sample_std"), layer.sample_std());
            }
        }
    }
    if let Some(model) = &run.model {
        for (l, layer) in model.layers().iter().enumerate() {
            q.insert(
                format!("weights.layer{}.median", l + 1),
                median_of(layer.weights.data()),
            );
            q.insert(
                format!("biases.layer{}.median", l + 1),
                median_of(layer.bias.data()),
            );
        }
    }
    q
}

/// Reads every completed run and writes `metrics.csv`, `curves.csv`,
/// `summary.json` and the histogram files.
pub fn summarize(cfg: &ExperimentConfig) -> Result<Summary> {
    let out = &cfg.output_dir;
    let dir = runs_dir(out);
    let mut loaded: Vec<(usize, Loaded)> = Vec::new();
    let mut metrics = String::from(METRICS_HEADER);
    metrics.push('\n');
    for (ci, c) in cfg.conditions.iter().enumerate() {
        for &seed in &cfg.seeds {
            let path = record_path(out, &c.label, seed);
            if !path.exists() {
                continue;
            }
            let record: RunRecord = read_json(&path)?;
            metrics.push_str(&metrics_csv_rows(&record));
            let stem = run_stem(&c.label, seed);
            let params = dir.join(format!("{stem}.params"));
            let model = if record.diverged_at.is_none() && params.exists() {
                Some(read_snapshot(&params)?)
            } else {
                None
            };
            let probe_path = dir.join(format!("{stem}.probe.json"));
            let probes = if record.diverged_at.is_none() && probe_path.exists() {
                Some(read_json(&probe_path)?)
            } else {
                None
            };
            loaded.push((
                ci,
                Loaded {
                    record,
                    model,
                    probes,
                },
            ));
        }
    }
    write_atomic(&out.join("metrics.csv"), metrics.as_bytes())?;

    let per_run: Vec<BTreeMap<String, f64>> =
        loaded.iter().map(|(_, r)| run_quantities(r)).collect();
    let mut conditions = Vec::new();
    // condition index -> quantity -> values
    let mut values: Vec<BTreeMap<String, Vec<f64>>> = vec![BTreeMap::new(); cfg.conditions.len()];
    for ((ci, _), q) in loaded.iter().zip(&per_run) {
        for (k, v) in q {
            values[*ci].entry(k.clone()).or_default().push(*v);
        }
    }
    for (ci, c) in cfg.conditions.iter().enumerate() {
        let runs: Vec<&Loaded> = loaded
            .iter()
            .filter(|(i, _)| *i == ci)
            .map(|(_, r)| r)
            .collect();
        let completed: Vec<u64> = runs.iter().map(|r| r.record.seed).collect();
        conditions.push(ConditionSummary {
            label: c.label.clone(),
            mode: c.mode,
            drop_rate: c.drop_rate,
            alpha: c.alpha,
            missing_seeds: cfg
                .seeds
                .iter()
                .copied()
                .filter(|s| !completed.contains(s))
                .collect(),
            completed_seeds: completed,
            failed: runs
                .iter()
                .filter_map(|r| {
                    r.record.diverged_at.map(|epoch| FailedRun {
                        seed: r.record.seed,
                        epoch,
                    })
                })
                .collect(),
            quantities: values[ci]
                .iter()
                .filter_map(|(k, v)| FinalStats::of(v.clone()).map(|s| (k.clone(), s)))
                .collect(),
        });
    }

    let mut comparisons = Vec::new();
    for i in 0..conditions.len() {
        for j in i + 1..conditions.len() {
            for (quantity, a) in &values[i] {
                let Some(b) = values[j].get(quantity) else {
                    continue;
                };
                let Ok(r) = rank_sum_test(a, b) else { continue };
                comparisons.push(Comparison {
                    quantity: quantity.clone(),
                    a: conditions[i].label.clone(),
                    b: conditions[j].label.clone(),
                    median_a: median_of(a),
                    median_b: median_of(b),
                    z: r.z,
                    p: r.p,
                });
            }
        }
    }

    let summary = Summary {
        final_epochs: crate::labstats::FINAL_EPOCHS,
        conditions,
        comparisons,
    };
    write_atomic(&out.join("summary.json"), &json_bytes(&summary))?;
    write_atomic(&out.join("curves.csv"), curves_csv(cfg, &loaded).as_bytes())?;
    write_atomic(
        &out.join("histograms_activations.csv"),
        activation_histograms(cfg, &loaded)?.as_bytes(),
    )?;
    write_atomic(
        &out.join("histograms_params.csv"),
        param_histograms(cfg, &loaded)?.as_bytes(),
    )?;
    Ok(summary)
}

fn curves_csv(cfg: &ExperimentConfig, loaded: &[(usize, Loaded)]) -> String {
    let mut s = String::from("condition,epoch,metric,median,q1,q3\n");
    for (ci, c) in cfg.conditions.iter().enumerate() {
        let runs: Vec<&RunRecord> = loaded
            .iter()
            .filter(|(i, r)| *i == ci && r.record.diverged_at.is_none())
            .map(|(_, r)| &r.record)
            .collect();
        let epochs = runs.iter().map(|r| r.epochs.len()).min().unwrap_or(0);
        for epoch in 0..epochs {
            for metric in Metric::ALL {
                let v: Vec<f64> = runs.iter().map(|r| metric.of(&r.epochs[epoch])).collect();
                if let Ok(m) = median_iqr(&v) {
                    writeln!(
                        s,
                        "{},{epoch},{},{},{},{}",
                        c.label,
                        metric.as_str(),
                        m.median,
                        m.q1,
                        m.q3
                    )
                    .expect("write to string");
                }
            }
        }
    }
    s
}

fn write_hist_rows(
    s: &mut String,
    prefix: &str,
    values: &[f64],
    bins: usize,
    range: (f64, f64),
) -> Result<()> {
    let h = histogram(values, bins, range)?;
    let edges = h.edges();
    for (i, count) in h.counts.iter().enumerate() {
        writeln!(s, "{prefix},{},{},{count}", edges[i], edges[i + 1]).expect("write to string");
    }
    Ok(())
}

/// Per-unit and per-sample activation means pooled over seeds. Ranges run
/// from 0 to the largest value of any condition, per regime, layer and kind.
fn activation_histograms(cfg: &ExperimentConfig, loaded: &[(usize, Loaded)]) -> Result<String> {
    let mut s = String::from("regime,layer,kind,condition,bin_lo,bin_hi,count\n");
    let bins = cfg.probe.histogram_bins;
    let layers = cfg.hidden_widths.len();
    for regime in RegimeTag::ALL {
        for l in 0..layers {
            for kind in ["unit_means", "sample_means"] {
                let pooled: Vec<Vec<f64>> = (0..cfg.conditions.len())
                    .map(|ci| {
                        loaded
                            .iter()
                            .filter(|(i, _)| *i == ci)
                            .filter_map(|(_, r)| r.probes.as_ref())
                            .flat_map(|p| p.iter().filter(|a| a.regime == regime))
                            .flat_map(|a| {
                                let layer = &a.layers[l];
                                if kind == "unit_means" {
                                    layer.unit_means.clone()
                                } else {
                                    layer.sample_means.clone()
                                }
                            })
                            .collect()
                    })
                    .collect();
                let Some((_, hi)) = shared_range(pooled.iter().map(Vec::as_slice)) else {
                    continue;
                };
                let range = if hi > 0.0 { (0.0, hi) } else { (0.0, 1.0) };
                for (ci, v) in pooled.iter().enumerate() {
                    let prefix = format!(
                        "{},{},{kind},{}",
                        regime.as_str(),
                        l + 1,
                        cfg.conditions[ci].label
                    );
                    write_hist_rows(&mut s, &prefix, v, bins, range)?;
                }
            }
        }
    }
    Ok(s)
}

/// Final weights and biases pooled over seeds, on ranges shared by all
/// conditions.
fn param_histograms(cfg: &ExperimentConfig, loaded: &[(usize, Loaded)]) -> Result<String> {
    let mut s = String::from("layer,param,condition,bin_lo,bin_hi,count\n");
    let bins = cfg.probe.histogram_bins;
    let layers = cfg.hidden_widths.len() + 1;
    for l in 0..layers {
        for param in ["weights", "biases"] {
            let pooled: Vec<Vec<f64>> = (0..cfg.conditions.len())
                .map(|ci| {
                    loaded
                        .iter()
                        .filter(|(i, _)| *i == ci)
                        .filter_map(|(_, r)| r.model.as_ref())
                        .flat_map(|m| {
                            let layer = &m.layers()[l];
                            if param == "weights" {
                                layer.weights.data().to_vec()
                            } else {
                                layer.bias.data().to_vec()
                            }
                        })
                        .collect()
                })
                .collect();
            let Some(range) = shared_range(pooled.iter().map(Vec::as_slice)) else {
                continue;
            };
            for (ci, v) in pooled.iter().enumerate() {
                let prefix = format!("{},{param},{}", l + 1, cfg.conditions[ci].label);
                write_hist_rows(&mut s, &prefix, v, bins, range)?;
            }
        }
    }
    Ok(s)
}
