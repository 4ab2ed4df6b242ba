mod common;

use std::path::Path;

use common::*;
use qsd_core::experiment::{run_experiment, stats, ExperimentConfig, RunOptions, METRICS_HEADER};
use qsd_core::netcore::read_snapshot;
use qsd_core::Error;

const SMALL: &str = "hidden_widths = [16, 16, 16]\nbatch_size = 50\ntrain_subset = 400\n";

fn config(data: &Path, out: &Path, extra: &str) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::parse(
        &config_text(data, &format!("{SMALL}{extra}")),
        Path::new("/"),
    )
    .unwrap();
    cfg.output_dir = out.to_path_buf();
    cfg
}

fn data_dir() -> tempfile::TempDir {
    let d = tempfile::tempdir().unwrap();
    write_synthetic_mnist(d.path(), 500, 150);
    d
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path).unwrap()
}

#[test]
fn one_epoch_writes_one_row_per_run() {
    let data = data_dir();
    let out = tempfile::tempdir().unwrap();
    let cfg = config(
        data.path(),
        out.path(),
        "seeds = [3]\nepochs = 1\n[probe]\nsamples = 50\nhistogram_bins = 8\n\
         [[condition]]\nlabel = \"q\"\nmode = \"qsd\"\ndrop_rate = 0.2\nalpha = 0.2\n",
    );
    let summary = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let csv = read(out.path().join("runs/q_seed3.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], METRICS_HEADER);
    assert!(lines[1].starts_with("q,3,0,"));
    let c = summary.condition("q").unwrap();
    assert_eq!(c.completed_seeds, vec![3]);
    assert!(c.failed.is_empty());

    for f in [
        "effective_config.toml",
        "metrics.csv",
        "curves.csv",
        "summary.json",
        "histograms_activations.csv",
        "histograms_params.csv",
        "runs/q_seed3.params",
        "runs/q_seed3.probe.json",
        "runs/q_seed3.json",
    ] {
        assert!(out.path().join(f).is_file(), "{f} missing");
    }
    let model = read_snapshot(&out.path().join("runs/q_seed3.params")).unwrap();
    assert_eq!(model.widths(), vec![784, 16, 16, 16, 10]);
    // fewer than the final-epoch window: no final metrics, but no error
    assert!(!c.quantities.contains_key("final.test_cost"));
}

#[test]
fn matched_seeds_share_everything_but_dilution() {
    let data = data_dir();
    let out = tempfile::tempdir().unwrap();
    let cfg = config(
        data.path(),
        out.path(),
        "seeds = 2\nepochs = 2\n[probe]\nenabled = false\n\
         [[condition]]\nlabel = \"none\"\nmode = \"none\"\ndrop_rate = 0.0\n\
         [[condition]]\nlabel = \"std0\"\nmode = \"standard\"\ndrop_rate = 0.0\n\
         [[condition]]\nlabel = \"std\"\nmode = \"standard\"\ndrop_rate = 0.2\n",
    );
    run_experiment(&cfg, &RunOptions::default()).unwrap();
    let body = |label: &str, seed: u64| -> Vec<String> {
        read(out.path().join(format!("runs/{label}_seed{seed}.csv")))
            .lines()
            .skip(1)
            .map(|l| l.split_once(',').unwrap().1.to_string())
            .collect()
    };
    for seed in 0..2 {
        assert_eq!(body("none", seed), body("std0", seed));
        assert_ne!(body("none", seed), body("std", seed));
    }
    assert_ne!(body("none", 0), body("none", 1));
}

#[test]
fn resume_skips_finished_runs_and_refuses_changed_config() {
    let data = data_dir();
    let out = tempfile::tempdir().unwrap();
    let extra = "seeds = [0]\nepochs = 1\n[probe]\nenabled = false\n";
    let cfg = config(data.path(), out.path(), extra);
    run_experiment(&cfg, &RunOptions::default()).unwrap();
    let record = out.path().join("runs/qsd_seed0.json");
    let first = read(&record);

    // a finished run keeps its record, including the wall time
    run_experiment(
        &cfg,
        &RunOptions {
            resume: true,
            progress: false,
        },
    )
    .unwrap();
    assert_eq!(read(&record), first);

    // a missing record is rerun
    std::fs::remove_file(out.path().join("runs/standard_seed0.json")).unwrap();
    run_experiment(
        &cfg,
        &RunOptions {
            resume: true,
            progress: false,
        },
    )
    .unwrap();
    assert!(out.path().join("runs/standard_seed0.json").is_file());

    let changed = config(
        data.path(),
        out.path(),
        &extra.replace("epochs = 1", "epochs = 2"),
    );
    let err = run_experiment(
        &changed,
        &RunOptions {
            resume: true,
            progress: false,
        },
    )
    .unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
    // without resume the directory is simply overwritten
    run_experiment(&changed, &RunOptions::default()).unwrap();
}

#[test]
fn divergent_runs_are_recorded_and_the_sweep_continues() {
    let data = data_dir();
    let out = tempfile::tempdir().unwrap();
    let cfg = config(
        data.path(),
        out.path(),
        "seeds = [0, 1]\nepochs = 4\nlearning_rate = 1e12\n[probe]\nenabled = false\n",
    );
    let summary = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let failed: usize = summary.conditions.iter().map(|c| c.failed.len()).sum();
    assert!(failed > 0);
    for c in &summary.conditions {
        for f in &c.failed {
            assert!(f.epoch < 4);
            let csv = read(
                out.path()
                    .join(format!("runs/{}_seed{}.csv", c.label, f.seed)),
            );
            assert_eq!(csv.lines().count(), 1 + f.epoch);
        }
    }
    assert!(out.path().join("summary.json").is_file());
}

#[test]
fn stats_rebuilds_the_same_summary() {
    let data = data_dir();
    let out = tempfile::tempdir().unwrap();
    let cfg = config(
        data.path(),
        out.path(),
        "seeds = 3\nepochs = 3\n[probe]\nsamples = 60\nhistogram_bins = 10\n",
    );
    let summary = run_experiment(&cfg, &RunOptions::default()).unwrap();
    let json = read(out.path().join("summary.json"));
    let hist = read(out.path().join("histograms_params.csv"));
    std::fs::remove_file(out.path().join("summary.json")).unwrap();
    let again = stats(out.path()).unwrap();
    assert_eq!(again, summary);
    assert_eq!(read(out.path().join("summary.json")), json);
    assert_eq!(read(out.path().join("histograms_params.csv")), hist);

    let cmp = summary
        .comparison("final.test_cost", "standard", "qsd")
        .unwrap();
    assert!(cmp.p > 0.0 && cmp.p <= 1.0);
    let q = &summary.condition("qsd").unwrap().quantities["final.test_error"];
    assert_eq!(q.values.len(), 3);
    assert!(q.q1 <= q.median && q.median <= q.q3);

    // every condition shares one set of bin edges per layer and kind
    let mut edges = std::collections::BTreeMap::new();
    for line in hist.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let key = (
            f[0].to_string(),
            f[1].to_string(),
            f[3].to_string(),
            f[4].to_string(),
        );
        edges
            .entry(key)
            .or_insert_with(Vec::new)
            .push(f[2].to_string());
    }
    assert!(edges.values().all(|conds| conds.len() == 2));
}

#[test]
fn missing_or_short_data_is_reported() {
    let data = data_dir();
    let out = tempfile::tempdir().unwrap();
    let mut cfg = config(data.path(), out.path(), "epochs = 1\n");
    cfg.train_subset = Some(100_000);
    assert!(matches!(
        run_experiment(&cfg, &RunOptions::default()),
        Err(Error::Data(_))
    ));

    std::fs::remove_file(data.path().join(MNIST_FILES[3])).unwrap();
    let cfg = config(data.path(), out.path(), "epochs = 1\n");
    let err = run_experiment(&cfg, &RunOptions::default()).unwrap_err();
    assert!(err.to_string().contains("t10k-labels"), "{err}");
}

#[test]
fn config_errors_are_itemised() {
    let err = ExperimentConfig::parse("seeds = 0\nbogus = 1\n", Path::new("/")).unwrap_err();
    let Error::Config(items) = err else {
        panic!("{err}")
    };
    let joined = items.join("\n");
    for needle in ["bogus", "train_images", "test_labels", "seeds"] {
        assert!(joined.contains(needle), "{needle} not in {joined}");
    }

    let text = config_text(
        Path::new("/data"),
        "epochs = 0\nmomentum = 1.5\nbogus = 1\n\
         [[condition]]\nlabel = \"a\"\nmode = \"qsd\"\ndrop_rate = 1.2\nalpha = -1\n",
    );
    let err = ExperimentConfig::parse(&text, Path::new("/")).unwrap_err();
    let Error::Config(items) = err else {
        panic!("{err}")
    };
    assert!(items.len() >= 4, "{items:?}");
    let joined = items.join("\n");
    for needle in ["bogus", "epochs", "momentum", "drop_rate", "alpha"] {
        assert!(joined.contains(needle), "{needle} not in {joined}");
    }
}
