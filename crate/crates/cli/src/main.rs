//! Command-line pipeline around the maneuver-anticipation library.
//!
//! Exit codes: 0 on success, 2 on usage errors, 1 on runtime errors.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use aiohmm::anticipation::{
    default_threshold_grid, threshold_f1_curve, time_to_maneuver_f1_curve,
};
use aiohmm::{
    confusion_matrix, featurize_trace, fit_all, generate_episode, io, score, stream_anticipate,
    sweep, Ablation, EmConfig, FeatureSequence, ManeuverClass, ProtocolConfig, ScenarioConfig,
};

#[derive(Parser)]
#[command(name = "aiohmm", version, about = "Anticipate driving maneuvers from multi-modal context")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ProtocolArgs {
    /// Posterior a maneuver must reach to be predicted.
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    /// Seconds between anticipation steps.
    #[arg(long, default_value_t = 0.8)]
    stride: f64,
    /// Context window length in seconds.
    #[arg(long, default_value_t = 5.0)]
    horizon: f64,
    /// Seconds without further maneuver predictions after one is made.
    #[arg(long, default_value_t = 5.0)]
    lockout: f64,
}

impl ProtocolArgs {
    fn to_config(&self) -> ProtocolConfig {
        ProtocolConfig {
            stride_s: self.stride,
            horizon_s: self.horizon,
            threshold: self.threshold,
            lockout_s: self.lockout,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic episode: trace, annotations and cue times.
    Simulate {
        /// Output prefix; writes <out>.trace.jsonl, <out>.annotations.json,
        /// <out>.cues.json.
        #[arg(long)]
        out: PathBuf,
        /// Episode length in seconds.
        #[arg(long, default_value_t = 300.0)]
        duration: f64,
        /// Scheduled maneuvers per minute.
        #[arg(long, default_value_t = 2.0)]
        rate: f64,
        /// Minimum cue lead time before a maneuver, seconds.
        #[arg(long, default_value_t = 1.0)]
        cue_lead_min: f64,
        /// Maximum cue lead time before a maneuver, seconds.
        #[arg(long, default_value_t = 5.0)]
        cue_lead_max: f64,
        /// Peak pixel displacement of injected head-motion bursts.
        #[arg(long, default_value_t = 6.0)]
        cue_strength: f64,
        /// Background point-motion noise level.
        #[arg(long, default_value_t = 1.0)]
        noise_sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Slice an annotated trace into a labeled feature dataset.
    Featurize {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 5.0)]
        horizon: f64,
        /// Output dataset (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per maneuver class from a labeled dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        /// Latent states per model.
        #[arg(long, default_value_t = 3)]
        states: usize,
        #[arg(long, default_value = "aio_hmm")]
        ablation: Ablation,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        max_iters: usize,
        /// Keep only the diagonal of each emission covariance.
        #[arg(long)]
        diagonal_sigma: bool,
        /// Output model file (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Stream the anticipation protocol over a trace.
    Anticipate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Ground-truth annotations; when given, maneuvers release the
        /// lockout early, as the protocol specifies.
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[command(flatten)]
        protocol: ProtocolArgs,
        /// Output prediction events (JSON lines).
        #[arg(long)]
        out: PathBuf,
    },
    /// Score prediction events against ground truth into a metrics CSV.
    Score {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[command(flatten)]
        protocol: ProtocolArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Cross-validated sweep over state counts and prediction thresholds.
    Sweep {
        #[arg(long)]
        dataset: PathBuf,
        /// Comma-separated latent state counts to try.
        #[arg(long, value_delimiter = ',', default_value = "2,3")]
        states: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        folds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "aio_hmm")]
        ablation: Ablation,
        #[arg(long, default_value_t = 30)]
        max_iters: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Emit the confusion matrix and F1 curves for a set of events.
    Report {
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        #[command(flatten)]
        protocol: ProtocolArgs,
        /// Output prefix; writes <out>.confusion.csv, <out>.threshold_f1.csv,
        /// <out>.ttm_f1.csv.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}

fn group_by_class(dataset: Vec<FeatureSequence>) -> BTreeMap<ManeuverClass, Vec<FeatureSequence>> {
    let mut map: BTreeMap<ManeuverClass, Vec<FeatureSequence>> = BTreeMap::new();
    for seq in dataset {
        map.entry(seq.label).or_default().push(seq);
    }
    map
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    prefix.with_file_name(name)
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Simulate {
            out,
            duration,
            rate,
            cue_lead_min,
            cue_lead_max,
            cue_strength,
            noise_sigma,
            seed,
        } => {
            let cfg = ScenarioConfig {
                duration_s: duration,
                frame_rate: 25.0,
                maneuver_rate_per_min: rate,
                cue_lead_range_s: (cue_lead_min, cue_lead_max),
                cue_strength,
                noise_sigma,
                seed,
            };
            let episode = generate_episode(&cfg)?;
            let trace_path = with_suffix(&out, ".trace.jsonl");
            let ann_path = with_suffix(&out, ".annotations.json");
            let cues_path = with_suffix(&out, ".cues.json");
            io::save_trace(&trace_path, &episode.trace)?;
            io::save_annotations(&ann_path, &episode.annotations)?;
            let cues = serde_json::to_string_pretty(&episode.injected_cue_times)?;
            write_text(&cues_path, &(cues + "\n"))?;
            let maneuvers = episode
                .annotations
                .iter()
                .filter(|a| a.maneuver != ManeuverClass::DrivingStraight)
                .count();
            println!(
                "wrote {} frames, {} annotations ({} maneuvers) to {}*",
                episode.trace.frames.len(),
                episode.annotations.len(),
                maneuvers,
                out.display()
            );
            Ok(())
        }
        Command::Featurize {
            trace,
            annotations,
            horizon,
            out,
        } => {
            let trace = io::load_trace(&trace)?;
            let annotations = io::load_annotations(&annotations)?;
            let outcome = featurize_trace(&trace, &annotations, horizon)?;
            for w in &outcome.warnings {
                eprintln!("warning: {w}");
            }
            io::save_dataset(&out, &outcome.sequences)?;
            println!("wrote {} sequences to {}", outcome.sequences.len(), out.display());
            Ok(())
        }
        Command::Train {
            dataset,
            states,
            ablation,
            seed,
            max_iters,
            diagonal_sigma,
            out,
        } => {
            let sequences = io::load_dataset(&dataset)?;
            let by_class = group_by_class(sequences);
            let mut cfg = EmConfig::new(states);
            cfg.seed = seed;
            cfg.max_iters = max_iters;
            cfg.ablation = ablation;
            cfg.diagonal_sigma = diagonal_sigma;
            let models = fit_all(&by_class, &cfg)?;
            io::save_model_set(&out, &models)?;
            println!("wrote {states}-state {ablation} model set to {}", out.display());
            Ok(())
        }
        Command::Anticipate {
            model,
            trace,
            annotations,
            protocol,
            out,
        } => {
            let models = io::load_model_set(&model)?;
            let trace = io::load_trace(&trace)?;
            let loaded_annotations = annotations.map(io::load_annotations).transpose()?;
            let cfg = protocol.to_config();
            let events = stream_anticipate(&models, &trace, loaded_annotations.as_deref(), &cfg)?;
            io::save_events(&out, &events)?;
            let fired = events
                .iter()
                .filter(|e| e.predicted != ManeuverClass::DrivingStraight)
                .count();
            println!(
                "wrote {} events ({} maneuver predictions) to {}",
                events.len(),
                fired,
                out.display()
            );
            Ok(())
        }
        Command::Score {
            events,
            annotations,
            protocol,
            out,
        } => {
            let events = io::load_events(&events)?;
            let annotations = io::load_annotations(&annotations)?;
            let cfg = protocol.to_config();
            let report = score(&events, &annotations, &cfg)?;
            let mut csv = String::from(
                "threshold,stride_s,horizon_s,lockout_s,tp,fp,fpp,mp,precision,recall,f1,mean_time_to_maneuver_s\n",
            );
            csv.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{}\n",
                cfg.threshold,
                cfg.stride_s,
                cfg.horizon_s,
                cfg.lockout_s,
                report.counts.tp,
                report.counts.fp,
                report.counts.fpp,
                report.counts.mp,
                report.precision,
                report.recall,
                report.f1,
                report.mean_time_to_maneuver_s
            ));
            write_text(&out, &csv)?;
            println!(
                "tp={} fp={} fpp={} mp={} precision={:.4} recall={:.4} f1={:.4} ttm={:.2}s",
                report.counts.tp,
                report.counts.fp,
                report.counts.fpp,
                report.counts.mp,
                report.precision,
                report.recall,
                report.f1,
                report.mean_time_to_maneuver_s
            );
            Ok(())
        }
        Command::Sweep {
            dataset,
            states,
            folds,
            seed,
            ablation,
            max_iters,
            out,
        } => {
            let sequences = io::load_dataset(&dataset)?;
            let by_class = group_by_class(sequences);
            let mut cfg = EmConfig::new(states.first().copied().unwrap_or(2));
            cfg.ablation = ablation;
            cfg.max_iters = max_iters;
            let thresholds = default_threshold_grid();
            let table = sweep(&by_class, &states, &thresholds, folds, seed, &cfg)?;
            let mut csv =
                String::from("n_states,threshold,fold,tp,fp,fpp,mp,precision,recall,f1\n");
            for row in &table.rows {
                csv.push_str(&format!(
                    "{},{},{},{},{},{},{},{},{},{}\n",
                    row.n_states,
                    row.threshold,
                    row.fold,
                    row.tp,
                    row.fp,
                    row.fpp,
                    row.mp,
                    row.precision,
                    row.recall,
                    row.f1
                ));
            }
            write_text(&out, &csv)?;
            println!(
                "best configuration: {} states, threshold {:.2}, mean F1 {:.4}",
                table.best_n_states, table.best_threshold, table.best_mean_f1
            );
            Ok(())
        }
        Command::Report {
            events,
            annotations,
            protocol,
            out,
        } => {
            let events = io::load_events(&events)?;
            let annotations = io::load_annotations(&annotations)?;
            let cfg = protocol.to_config();

            let matrix = confusion_matrix(&events, &annotations, &cfg)?;
            let mut confusion = String::from("predicted");
            for class in ManeuverClass::ALL {
                confusion.push_str(&format!(",{class}"));
            }
            confusion.push('\n');
            for (r, class) in ManeuverClass::ALL.iter().enumerate() {
                confusion.push_str(&class.to_string());
                for c in 0..ManeuverClass::ALL.len() {
                    confusion.push_str(&format!(",{}", matrix[r][c]));
                }
                confusion.push('\n');
            }
            write_text(&with_suffix(&out, ".confusion.csv"), &confusion)?;

            let curve = threshold_f1_curve(&events, &annotations, &cfg, &default_threshold_grid())?;
            let mut csv = String::from("threshold,f1\n");
            for (th, f1) in curve {
                csv.push_str(&format!("{th},{f1}\n"));
            }
            write_text(&with_suffix(&out, ".threshold_f1.csv"), &csv)?;

            let leads: Vec<f64> = (1..=6).map(|k| k as f64 * cfg.stride_s).collect();
            let curve = time_to_maneuver_f1_curve(&events, &annotations, &cfg, &leads)?;
            let mut csv = String::from("time_to_maneuver_s,f1\n");
            for (lead, f1) in curve {
                csv.push_str(&format!("{lead},{f1}\n"));
            }
            write_text(&with_suffix(&out, ".ttm_f1.csv"), &csv)?;
            println!("wrote report CSVs to {}*", out.display());
            Ok(())
        }
    }
}
