use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use qsd_core::dataio::{load_idx, Permutation};
use qsd_core::experiment::{
    run_experiment, stats, ExperimentConfig, Preset, RunOptions, Summary, STREAM_PERMUTE,
    STREAM_PROBE,
};
use qsd_core::labstats::{activation_summary, ProbeRegime};
use qsd_core::netcore::read_snapshot;
use qsd_core::stochastics::RngStream;

#[derive(Parser)]
#[command(
    name = "qsd",
    version,
    about = "Quantal synaptic dilution experiments on MNIST"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Quick,
    Full,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum RegimeArg {
    MasksOn,
    MasksOff,
    MasksOffPermuted,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PermutationArg {
    PerSample,
    Shared,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (condition, seed) pair and write results.
    Run {
        config: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
        /// Runs trained in parallel (overrides the config).
        #[arg(long)]
        jobs: Option<usize>,
        /// Keep finished runs from an earlier invocation.
        #[arg(long)]
        resume: bool,
        /// No per-epoch progress on stderr.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Check a config and print it with all defaults filled in.
    Validate {
        config: PathBuf,
        #[arg(long, value_enum)]
        preset: Option<PresetArg>,
    },
    /// Summarise hidden-layer outputs of a saved model on an IDX image file.
    Probe {
        snapshot: PathBuf,
        /// IDX images; the labels file is found by name unless given.
        dataset: PathBuf,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, value_enum)]
        regime: RegimeArg,
        /// Seed for mask draws and pixel permutation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "per_sample")]
        permutation: PermutationArg,
        /// Include the per-unit and per-sample vectors.
        #[arg(long)]
        full: bool,
    },
    /// Recompute summary files of an existing results directory.
    Stats { results_dir: PathBuf },
}

fn load_config(path: &Path, preset: Option<PresetArg>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(p) = preset {
        cfg.apply_preset(match p {
            PresetArg::Quick => Preset::Quick,
            PresetArg::Full => Preset::Full,
        });
    }
    Ok(cfg)
}

/// `train-images.idx3-ubyte` -> `train-labels.idx1-ubyte`, also for the
/// dashed `train-images-idx3-ubyte` spelling.
fn labels_path_for(images: &Path) -> Option<PathBuf> {
    let name = images.file_name()?.to_str()?;
    for (from, to) in [
        ("images.idx3", "labels.idx1"),
        ("images-idx3", "labels-idx1"),
    ] {
        if name.contains(from) {
            return Some(images.with_file_name(name.replace(from, to)));
        }
    }
    None
}

fn print_summary(summary: &Summary) {
    println!("condition        runs  failed  final test cost (median [q1, q3])");
    for c in &summary.conditions {
        let cost = c
            .quantities
            .get("final.test_cost")
            .map(|s| format!("{:.4} [{:.4}, {:.4}]", s.median, s.q1, s.q3))
            .unwrap_or_else(|| "n/a".into());
        println!(
            "{:<16} {:>4}  {:>6}  {cost}",
            c.label,
            c.completed_seeds.len(),
            c.failed.len()
        );
    }
    for cmp in summary
        .comparisons
        .iter()
        .filter(|c| c.quantity == "final.test_cost")
    {
        println!("{} vs {}: Z = {:.3}, P = {:.4}", cmp.a, cmp.b, cmp.z, cmp.p);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run {
            config,
            preset,
            jobs,
            resume,
            quiet,
        } => {
            let mut cfg = load_config(&config, preset)?;
            if let Some(j) = jobs {
                cfg.jobs = j;
            }
            let summary = run_experiment(
                &cfg,
                &RunOptions {
                    resume,
                    progress: !quiet,
                },
            )?;
            print_summary(&summary);
            println!("results in {}", cfg.output_dir.display());
        }
        Command::Validate { config, preset } => {
            let cfg = load_config(&config, preset)?;
            cfg.validate()?;
            print!("{}", cfg.to_toml());
        }
        Command::Probe {
            snapshot,
            dataset,
            labels,
            regime,
            seed,
            permutation,
            full,
        } => {
            let labels = match labels.or_else(|| labels_path_for(&dataset)) {
                Some(l) => l,
                None => bail!(
                    "cannot derive a labels file from {}; pass --labels",
                    dataset.display()
                ),
            };
            let model = read_snapshot(&snapshot)?;
            let data = load_idx(&dataset, &labels)?;
            let policy = match permutation {
                PermutationArg::PerSample => Permutation::PerSample,
                PermutationArg::Shared => Permutation::Shared,
            };
            let mut probe_stream = RngStream::new(seed, STREAM_PROBE);
            let mut permute_stream = RngStream::new(seed, STREAM_PERMUTE);
            let regime = match regime {
                RegimeArg::MasksOn => ProbeRegime::MasksOn(&mut probe_stream),
                RegimeArg::MasksOff => ProbeRegime::MasksOff,
                RegimeArg::MasksOffPermuted => {
                    ProbeRegime::MasksOffPermuted(&mut permute_stream, policy)
                }
            };
            let summary = activation_summary(&model, &data, regime)?;
            let layers: Vec<_> = summary
                .layers
                .iter()
                .enumerate()
                .map(|(l, a)| {
                    let silent = a.unit_means.iter().filter(|&&m| m == 0.0).count();
                    json!({
                        "layer": l + 1,
                        "mean": a.mean(),
                        "sample_std": a.sample_std(),
                        "silent_units": silent,
                        "units": a.unit_means.len(),
                    })
                })
                .collect();
            let mut report = json!({
                "snapshot": snapshot,
                "dataset": dataset,
                "samples": data.len(),
                "regime": summary.regime.as_str(),
                "layers": layers,
            });
            if full {
                report["activations"] = serde_json::to_value(&summary)?;
            }
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Stats { results_dir } => {
            let summary = stats(&results_dir)
                .with_context(|| format!("summarising {}", results_dir.display()))?;
            print_summary(&summary);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use qsd_core::labstats::RegimeTag;

    #[test]
    fn labels_path_derivation() {
        assert_eq!(
            labels_path_for(Path::new("/d/t10k-images.idx3-ubyte")),
            Some(PathBuf::from("/d/t10k-labels.idx1-ubyte"))
        );
        assert_eq!(
            labels_path_for(Path::new("train-images-idx3-ubyte")),
            Some(PathBuf::from("train-labels-idx1-ubyte"))
        );
        assert_eq!(labels_path_for(Path::new("pixels.bin")), None);
    }

    #[test]
    fn regime_names_match_core() {
        for (arg, tag) in [
            (RegimeArg::MasksOn, RegimeTag::MasksOn),
            (RegimeArg::MasksOff, RegimeTag::MasksOff),
            (RegimeArg::MasksOffPermuted, RegimeTag::MasksOffPermuted),
        ] {
            assert_eq!(arg.to_possible_value().unwrap().get_name(), tag.as_str());
        }
    }
}
