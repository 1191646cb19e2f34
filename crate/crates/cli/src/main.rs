//! `tpp` command-line front end.
//!
//! Every subcommand prints a JSON summary on stdout. Failures print one JSON
//! line `{"error": ..., "kind": ...}` on stderr and exit nonzero.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use tpp_core::featmerge::{fit_merger, MergeMap};
use tpp_core::fisher::load_trajectories;
use tpp_core::gmm::{fit_gmm, GmmModel, DEFAULT_EM_ITERS, DEFAULT_EM_TOL};
use tpp_core::harness::config::{BaselineMode, SvmStageConfig};
use tpp_core::harness::experiment::{
    baseline_features, encode_motion, global_fisher_vectors, late_fuse_rows, load_samples, network_probabilities,
    run_experiment, sample_descriptors, score_fuse_rows, score_report, svm_probabilities, train_network, train_svm,
};
use tpp_core::harness::features::load_frame_features;
use tpp_core::harness::manifest::{load_manifest, Modality, Split};
use tpp_core::harness::metrics::MetricKind;
use tpp_core::numkit::derive_seed;
use tpp_core::synth::SynthDataset;
use tpp_core::{FusionWeights, NetParams, PoolOp, PyramidSpec, SvmModel, TrainConfig};

#[derive(Parser)]
#[command(name = "tpp", version, about = "Temporal pyramid pooling video classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a diagonal GMM on trajectory descriptors.
    FitGmm {
        /// Trajectory text files.
        #[arg(long, num_args = 1.., required = true)]
        input: Vec<PathBuf>,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_EM_ITERS)]
        max_iters: usize,
        #[arg(long, default_value_t = DEFAULT_EM_TOL)]
        tol: f64,
        #[arg(long, default_value_t = 100_000)]
        max_descriptors: usize,
    },
    /// Learn a supervised dimension-merging map.
    FitMerger {
        /// TPPF matrix, one frame-level feature per row.
        #[arg(long)]
        features: PathBuf,
        /// Whitespace-separated class index per row of `--features`.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-frame motion features and a manifest that points at them.
    EncodeMotion {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        gmm: PathBuf,
        #[arg(long)]
        merger: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Train a network on the train split.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        /// JSON training config; omitted fields take their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "appearance")]
        modality: Modality,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a network on the test split.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        net: PathBuf,
        #[arg(long, default_value = "map")]
        metric: MetricKind,
        #[arg(long, default_value = "appearance")]
        modality: Modality,
        /// Also write the report here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pooled raw features classified by a linear SVM.
    Baseline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        mode: BaselineMode,
        /// Fine segments of the pyramid (atp, ttp).
        #[arg(long, default_value_t = 5)]
        b: usize,
        #[arg(long, value_enum, default_value_t = Pool::Mean)]
        pool: Pool,
        #[arg(long, default_value_t = SvmStageConfig::default().lambda)]
        lambda: f64,
        #[arg(long, default_value_t = SvmStageConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "map")]
        metric: MetricKind,
        /// Where to save the SVM.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Combine class scores of two models on the test split.
    Fuse {
        #[arg(long, value_enum)]
        mode: FuseMode,
        #[arg(long)]
        manifest: PathBuf,
        /// Appearance weight for late fusion.
        #[arg(long, default_value_t = 1.0 / 3.0)]
        w_appearance: f64,
        /// Late fusion: appearance network.
        #[arg(long)]
        net_appearance: Option<PathBuf>,
        /// Late fusion: motion network.
        #[arg(long)]
        net_motion: Option<PathBuf>,
        /// Score averaging: the network.
        #[arg(long)]
        net: Option<PathBuf>,
        /// Score averaging: input of `--net`.
        #[arg(long, default_value = "appearance")]
        modality: Modality,
        /// Score averaging: GMM for whole-video Fisher vectors.
        #[arg(long)]
        gmm: Option<PathBuf>,
        /// Score averaging: trained SVM; trained on the train split when absent.
        #[arg(long)]
        svm: Option<PathBuf>,
        #[arg(long, default_value_t = SvmStageConfig::default().lambda)]
        lambda: f64,
        #[arg(long, default_value_t = SvmStageConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "map")]
        metric: MetricKind,
    },
    /// Run the stages of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a small synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Pool {
    Mean,
    Max,
}

#[derive(Clone, Copy, ValueEnum)]
enum FuseMode {
    Late,
    ScoreAvg,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.to_string();
            let detail: Vec<&str> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("For more information"))
                .collect();
            let msg = detail.join(" ");
            eprintln!("{}", json!({"error": msg.trim_start_matches("error: "), "kind": "usage"}));
            return ExitCode::from(2);
        }
    };
    match configure_threads().and_then(|()| dispatch(cli.command)) {
        Ok(out) => {
            // A closed pipe downstream is not our failure.
            let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(&out).expect("json value"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            // Core errors already carry their cause in the message.
            let (kind, msg) = match e.downcast_ref::<tpp_core::Error>() {
                Some(core) => (core.kind(), core.to_string()),
                None => ("other", format!("{e:#}")),
            };
            let msg = msg.replace('\n', " ");
            eprintln!("{}", json!({"error": msg, "kind": kind}));
            ExitCode::FAILURE
        }
    }
}

/// Caps the rayon pool at `TPP_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("TPP_THREADS") else {
        return Ok(());
    };
    let n: usize = match raw.trim().parse() {
        Ok(n) if n > 0 => n,
        _ => return Err(tpp_core::Error::Config(format!("TPP_THREADS must be a positive integer, got `{raw}`")).into()),
    };
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring thread pool")?;
    Ok(())
}

fn dispatch(cmd: Command) -> Result<Value> {
    match cmd {
        Command::FitGmm { input, k, seed, out, max_iters, tol, max_descriptors } => {
            let sets = input.iter().map(|p| load_trajectories(p)).collect::<tpp_core::Result<Vec<_>>>()?;
            let points = sample_descriptors(sets.iter().map(Vec::as_slice), max_descriptors, derive_seed(seed, 0))?;
            let model = fit_gmm(&points, k, derive_seed(seed, 1), max_iters, tol)?;
            model.save(&out)?;
            Ok(json!({
                "out": out,
                "descriptors": points.rows(),
                "components": model.components(),
                "dim": model.dim(),
                "log_likelihood": model.log_likelihood(&points)?,
            }))
        }
        Command::FitMerger { features, labels, k, seed, out } => {
            let v = load_frame_features(&features)?;
            let labels = read_labels(&labels)?;
            let map = fit_merger(&v, &labels, k, seed)?;
            map.save(&out)?;
            Ok(json!({"out": out, "source_dim": map.source_dim(), "target_dim": map.target_dim()}))
        }
        Command::EncodeMotion { manifest, gmm, merger, out_dir } => {
            let manifest = load_manifest(&manifest)?;
            let gmm = GmmModel::load(&gmm)?;
            let merger = merger.as_deref().map(MergeMap::load).transpose()?;
            let (encoded, empty) = encode_motion(&manifest, &gmm, merger.as_ref(), &out_dir)?;
            Ok(json!({
                "manifest": out_dir.join(tpp_core::harness::experiment::MOTION_MANIFEST_FILE),
                "videos": encoded.videos.len(),
                "empty_windows": empty,
            }))
        }
        Command::Train { manifest, config, modality, out, seed } => {
            let mut cfg = match &config {
                Some(p) => read_train_config(p)?,
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let manifest = load_manifest(&manifest)?;
            let samples = non_empty(load_samples(&manifest, Split::Train, modality)?, "train")?;
            let outcome = train_network(&samples, manifest.classes.len(), modality, &cfg)?;
            outcome.params.save(&out)?;
            Ok(json!({
                "out": out,
                "videos": samples.len(),
                "pooled_dim": outcome.params.pooled_dim(),
                "epoch_losses": outcome.epoch_losses,
            }))
        }
        Command::Eval { manifest, net, metric, modality, out } => {
            let manifest = load_manifest(&manifest)?;
            let net = NetParams::load(&net)?;
            let samples = non_empty(load_samples(&manifest, Split::Test, modality)?, "test")?;
            let report = score_report(metric, &network_probabilities(&net, &samples, modality)?, &samples)?;
            let value = serde_json::to_value(&report)?;
            if let Some(p) = out {
                write_json(&p, &value)?;
            }
            Ok(value)
        }
        Command::Baseline { manifest, mode, b, pool, lambda, epochs, seed, metric, out } => {
            let manifest = load_manifest(&manifest)?;
            let pyramid = PyramidSpec { segments: b, pool: pool.into() };
            let svm_cfg = SvmStageConfig { lambda, epochs };
            let modality = mode.modality();
            let train_samples = non_empty(load_samples(&manifest, Split::Train, modality)?, "train")?;
            let test_samples = non_empty(load_samples(&manifest, Split::Test, modality)?, "test")?;
            let train_x = baseline_features(&train_samples, mode, pyramid)?;
            let svm = train_svm(&train_x, &train_samples, manifest.classes.len(), svm_cfg, seed)?;
            if let Some(p) = &out {
                svm.save(p)?;
            }
            let test_x = baseline_features(&test_samples, mode, pyramid)?;
            let report = score_report(metric, &svm_probabilities(&svm, &test_x)?, &test_samples)?;
            Ok(json!({"feature_dim": train_x.cols(), "report": report}))
        }
        Command::Fuse {
            mode,
            manifest,
            w_appearance,
            net_appearance,
            net_motion,
            net,
            modality,
            gmm,
            svm,
            lambda,
            epochs,
            seed,
            metric,
        } => {
            let manifest = load_manifest(&manifest)?;
            match mode {
                FuseMode::Late => {
                    let weights = FusionWeights::new(w_appearance)?;
                    let app = NetParams::load(&required(net_appearance, "--net-appearance")?)?;
                    let mot = NetParams::load(&required(net_motion, "--net-motion")?)?;
                    let app_samples = non_empty(load_samples(&manifest, Split::Test, Modality::Appearance)?, "test")?;
                    let mot_samples = load_samples(&manifest, Split::Test, Modality::Motion)?;
                    let probs = late_fuse_rows(
                        &network_probabilities(&app, &app_samples, Modality::Appearance)?,
                        &network_probabilities(&mot, &mot_samples, Modality::Motion)?,
                        weights,
                    )?;
                    Ok(serde_json::to_value(score_report(metric, &probs, &app_samples)?)?)
                }
                FuseMode::ScoreAvg => {
                    let net = NetParams::load(&required(net, "--net")?)?;
                    let gmm = GmmModel::load(&required(gmm, "--gmm")?)?;
                    let svm = match svm {
                        Some(p) => SvmModel::load(&p)?,
                        None => {
                            let (x, _) = global_fisher_vectors(&manifest, Split::Train, &gmm)?;
                            let samples = non_empty(load_samples(&manifest, Split::Train, Modality::Appearance)?, "train")?;
                            train_svm(&x, &samples, manifest.classes.len(), SvmStageConfig { lambda, epochs }, seed)?
                        }
                    };
                    let samples = non_empty(load_samples(&manifest, Split::Test, modality)?, "test")?;
                    let (x, _) = global_fisher_vectors(&manifest, Split::Test, &gmm)?;
                    let probs = score_fuse_rows(&network_probabilities(&net, &samples, modality)?, &svm_probabilities(&svm, &x)?)?;
                    Ok(serde_json::to_value(score_report(metric, &probs, &samples)?)?)
                }
            }
        }
        Command::Run { config } => {
            let outcome = run_experiment(&config)?;
            Ok(json!({
                "report": outcome.report,
                "baseline_report": outcome.baseline_report,
                "artifacts": outcome.artifacts,
            }))
        }
        Command::Synth { out_dir, seed } => {
            let manifest = SynthDataset { seed, ..SynthDataset::default() }.write(&out_dir)?;
            Ok(json!({"manifest": manifest}))
        }
    }
}

impl From<Pool> for PoolOp {
    fn from(p: Pool) -> Self {
        match p {
            Pool::Mean => PoolOp::Mean,
            Pool::Max => PoolOp::Max,
        }
    }
}

fn required(v: Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    v.ok_or_else(|| tpp_core::Error::Config(format!("{flag} is required for this mode")).into())
}

fn non_empty<T>(v: Vec<T>, split: &str) -> Result<Vec<T>> {
    if v.is_empty() {
        bail!(tpp_core::Error::Manifest(format!("no videos in the {split} split")));
    }
    Ok(v)
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| tpp_core::Error::io(path, e))?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        for t in line.split_whitespace() {
            let label = t.parse().map_err(|_| tpp_core::Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                detail: format!("`{t}` is not a class index"),
            })?;
            labels.push(label);
        }
    }
    Ok(labels)
}

fn read_train_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| tpp_core::Error::io(path, e))?;
    let cfg: TrainConfig = serde_json::from_str(&text)
        .map_err(|e| tpp_core::Error::Config(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column())))?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_json(path: &Path, v: &Value) -> Result<()> {
    Ok(tpp_core::codec::write_file(path, serde_json::to_string_pretty(v)?.as_bytes())?)
}
