use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use ucf_forge::disentangler::{CrossTarget, Fusion};
use ucf_forge::evalkit::{self, EvalReport};
use ucf_forge::model::{Ablation, FeatureKind};
use ucf_forge::synthforge::{generate_synthetic_corpus, Dataset, Split, SynthSpec};
use ucf_forge::trainer::{self, TrainConfig, TrainState};

mod record;

use record::RunLog;

/// Shipped training defaults (the paper's protocol at desk width).
const DEFAULT_CONFIG: &str = include_str!("../../../configs/train.toml");

#[derive(Parser)]
#[command(name = "ucf-forge", version, about = "Disentangled forgery-detection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic forgery corpus described by a spec file.
    GenData {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model.
    Train {
        #[command(flatten)]
        opts: TrainOpts,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one or more corpora.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus directory; repeat for a cross-corpus table.
        #[arg(long = "data", required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Restrict fakes to these methods (comma-separated).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
        /// Frozen-feature probes to run, e.g. `specific,common,whole`.
        #[arg(long, value_delimiter = ',')]
        probe: Vec<FeatureKind>,
    },
    /// Write pooled latent features of one split to a TSV file.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
    },
    /// Train the ablation ladder and compare held-out-method AUCs.
    Ablate {
        #[command(flatten)]
        opts: TrainOpts,
        /// Seeds shared by every variant.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Also train the full variant with linear-add fusion.
        #[arg(long)]
        fusion_compare: bool,
    },
}

#[derive(Args)]
struct TrainOpts {
    /// TOML training config; the shipped defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// none, D, DM or DMC.
    #[arg(long)]
    ablation: Option<Ablation>,
    #[arg(long)]
    fusion: Option<Fusion>,
    #[arg(long)]
    cross_target: Option<CrossTarget>,
    #[arg(long)]
    steps: Option<u64>,
}

impl TrainOpts {
    /// Config file (or shipped defaults) with CLI flags applied on top.
    fn resolve(&self) -> Result<TrainConfig> {
        let text = match &self.config {
            Some(path) => fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?,
            None => DEFAULT_CONFIG.to_owned(),
        };
        let mut cfg = TrainConfig::from_toml(&text)?;
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(ablation) = self.ablation {
            cfg.ablation = ablation;
        }
        if let Some(fusion) = self.fusion {
            cfg.decoder_fusion = fusion;
        }
        if let Some(cross) = self.cross_target {
            cfg.cross_target = cross;
        }
        if let Some(steps) = self.steps {
            cfg.steps = steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    check_threads();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for bad input (invalid config or spec), 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ucf_forge::Error>() {
        Some(ucf_forge::Error::Validation { .. } | ucf_forge::Error::Parse { .. }) => 2,
        _ => 1,
    }
}

/// The engine runs on one thread; the variable is accepted so scripts can set it uniformly.
fn check_threads() {
    if let Ok(v) = std::env::var("UCF_FORGE_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => {
                if n > 1 {
                    info!("UCF_FORGE_THREADS={n}: computation is single-threaded, using 1 thread");
                }
            }
            _ => warn!("ignoring UCF_FORGE_THREADS={v:?}: expected a positive integer"),
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out } => gen_data(&spec, &out),
        Command::Train { opts, resume } => train(&opts, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            out,
            split,
            methods,
            probe,
        } => eval(&checkpoint, &data, &out, split, &methods, &probe),
        Command::ExportFeatures {
            checkpoint,
            data,
            out,
            split,
        } => export_features(&checkpoint, &data, &out, split),
        Command::Ablate {
            opts,
            seeds,
            fusion_compare,
        } => ablate(&opts, &seeds, fusion_compare),
    }
}

fn gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let text = fs::read_to_string(spec_path).with_context(|| format!("reading {}", spec_path.display()))?;
    let spec = SynthSpec::from_toml(&text)?;
    let mut run = RunLog::start("gen-data", out)?;
    run.config(Some(spec_path), &spec);
    run.seed(spec.seed);
    let dataset = generate_synthetic_corpus(&spec)?;
    dataset.write(out)?;
    run.artifact(&out.join(ucf_forge::synthforge::MANIFEST_FILE));
    info!(
        "wrote {} images to {} (content hash {})",
        dataset.len(),
        out.display(),
        dataset.content_hash()
    );
    run.finish()?;
    Ok(())
}

fn load_corpus(dir: &Path, size: usize) -> Result<Dataset> {
    Dataset::load(dir, Some(size)).with_context(|| format!("loading corpus {}", dir.display()))
}

fn train(opts: &TrainOpts, resume: Option<&Path>) -> Result<()> {
    let mut run = RunLog::start("train", &opts.out)?;
    let (mut state, dataset) = match resume {
        Some(ckpt) => {
            let mut state = trainer::load_checkpoint(ckpt)?;
            // Only the step budget may change on resume; everything else is part of the run.
            if let Some(steps) = opts.steps {
                state.config.steps = steps;
            }
            info!("resuming from {} at step {}", ckpt.display(), state.step);
            let dataset = load_corpus(&opts.data, state.config.backbone.input_size)?;
            (state, dataset)
        }
        None => {
            let cfg = opts.resolve()?;
            let dataset = load_corpus(&opts.data, cfg.backbone.input_size)?;
            (TrainState::new(cfg, dataset.manifest.n_classes())?, dataset)
        }
    };
    run.config(opts.config.as_deref(), &state.config);
    run.seed(state.config.seed);
    let config_path = opts.out.join("config.toml");
    fs::write(&config_path, state.config.to_toml())?;
    run.artifact(&config_path);
    let records = trainer::train_from(&mut state, &dataset, Some(&opts.out))?;
    if let Some(last) = records.last() {
        info!("finished at step {} with total loss {:.4}", last.step, last.report.total);
    }
    run.artifact(&opts.out.join(trainer::METRICS_FILE));
    run.artifact(&opts.out.join(trainer::FINAL_CHECKPOINT));
    run.finish()?;
    Ok(())
}

fn corpus_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}

fn eval(
    checkpoint: &Path,
    data: &[PathBuf],
    out: &Path,
    split: Split,
    methods: &[String],
    probes: &[FeatureKind],
) -> Result<()> {
    let state = trainer::load_checkpoint(checkpoint)?;
    let mut run = RunLog::start("eval", out)?;
    run.config(None, &state.config);
    run.seed(state.config.seed);
    let methods: Vec<&str> = methods.iter().map(String::as_str).collect();
    let mut failures = 0;
    let mut used = std::collections::BTreeSet::new();
    for dir in data {
        let mut name = corpus_name(dir);
        while !used.insert(name.clone()) {
            name.push('_');
        }
        match eval_corpus(&state, dir, &name, split, &methods, probes, out) {
            Ok((report, paths)) => {
                println!("{}", format_report(&report));
                for p in paths {
                    run.artifact(&p);
                }
            }
            Err(e) => {
                failures += 1;
                eprintln!("error: corpus {}: {e:#}", dir.display());
            }
        }
    }
    run.finish()?;
    if failures > 0 {
        bail!("{failures} of {} corpora could not be evaluated", data.len());
    }
    Ok(())
}

fn eval_corpus(
    state: &TrainState,
    dir: &Path,
    name: &str,
    split: Split,
    methods: &[&str],
    probes: &[FeatureKind],
    out: &Path,
) -> Result<(EvalReport, Vec<PathBuf>)> {
    let dataset = load_corpus(dir, state.config.backbone.input_size)?;
    let (mut report, scores) = evalkit::evaluate(&state.model, &dataset, split, methods, name)?;
    if !probes.is_empty() {
        let train_idx = dataset.manifest.split_indices(Split::Train);
        let test_idx = if methods.is_empty() {
            dataset.manifest.split_indices(split)
        } else {
            dataset.manifest.indices_for_methods(split, methods)?
        };
        for &kind in probes {
            let v = evalkit::probe_features(&state.model, &dataset, kind, &train_idx, &test_idx)?;
            report.probe_auc.insert(kind.to_string(), v);
        }
    }
    let report_path = out.join(format!("report-{name}.json"));
    fs::write(&report_path, serde_json::to_string_pretty(&report)? + "\n")?;
    let scores_path = out.join(format!("scores-{name}.tsv"));
    evalkit::write_scores(&scores, &scores_path)?;
    Ok((report, vec![report_path, scores_path]))
}

fn format_report(r: &EvalReport) -> String {
    let mut line = format!(
        "{}\t{}\tn={}\tauc={:.4}",
        r.corpus,
        r.split.as_str(),
        r.n_samples,
        r.auc_common
    );
    for (k, v) in &r.probe_auc {
        line.push_str(&format!("\tprobe_{k}={v:.4}"));
    }
    line
}

fn export_features(checkpoint: &Path, data: &Path, out: &Path, split: Split) -> Result<()> {
    let state = trainer::load_checkpoint(checkpoint)?;
    let dataset = load_corpus(data, state.config.backbone.input_size)?;
    let indices = dataset.manifest.split_indices(split);
    let n = evalkit::export_features(&state.model, &dataset, &indices, out)?;
    info!("wrote {n} rows to {}", out.display());
    Ok(())
}

/// Methods that never appear in the train split.
fn held_out_methods(dataset: &Dataset) -> Vec<String> {
    let m = &dataset.manifest;
    m.method_vocabulary
        .iter()
        .enumerate()
        .skip(1)
        .filter(|&(k, _)| !m.samples.iter().any(|s| s.y_prime == k && s.split == Split::Train))
        .filter(|&(k, _)| m.samples.iter().any(|s| s.y_prime == k))
        .map(|(_, name)| name.clone())
        .collect()
}

struct AblationRow {
    label: String,
    ablation: Ablation,
    fusion: Fusion,
    aucs: Vec<f64>,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn ablate(opts: &TrainOpts, seeds: &[u64], fusion_compare: bool) -> Result<()> {
    if seeds.is_empty() {
        bail!("--seeds needs at least one seed");
    }
    let base = opts.resolve()?;
    let mut run = RunLog::start("ablate", &opts.out)?;
    run.config(opts.config.as_deref(), &base);
    run.seed(seeds[0]);
    let dataset = load_corpus(&opts.data, base.backbone.input_size)?;
    let held_out = held_out_methods(&dataset);
    if held_out.is_empty() {
        return Err(ucf_forge::Error::Validation {
            field: "data".into(),
            reason: "corpus has no held-out method (every method appears in the train split)".into(),
        }
        .into());
    }
    let held: Vec<&str> = held_out.iter().map(String::as_str).collect();
    info!("held-out methods: {}", held.join(","));

    let mut rows: Vec<AblationRow> = [("baseline", Ablation::BASELINE), ("+D", Ablation::D), ("+D+M", Ablation::DM), ("+D+M+C", Ablation::FULL)]
        .into_iter()
        .map(|(label, ablation)| AblationRow {
            label: label.into(),
            ablation,
            fusion: base.decoder_fusion,
            aucs: Vec::new(),
        })
        .collect();
    if fusion_compare {
        rows.push(AblationRow {
            label: "+D+M+C linear_add".into(),
            ablation: Ablation::FULL,
            fusion: Fusion::LinearAdd,
            aucs: Vec::new(),
        });
    }
    for row in &mut rows {
        for &seed in seeds {
            let cfg = TrainConfig {
                seed,
                ablation: row.ablation,
                decoder_fusion: row.fusion,
                ..base.clone()
            };
            let dir = opts.out.join(format!("{}-{}-seed{seed}", row.ablation.key(), row.fusion));
            info!("training {} (seed {seed})", row.label);
            let (state, _) = trainer::train(&cfg, &dataset, Some(&dir))?;
            let (report, _) = evalkit::evaluate(&state.model, &dataset, Split::Test, &held, "held_out")?;
            info!("{} seed {seed}: held-out AUC {:.4}", row.label, report.auc_common);
            row.aucs.push(report.auc_common);
            run.artifact(&dir.join(trainer::FINAL_CHECKPOINT));
        }
    }

    let mut table = String::from("variant\tablation\tfusion\tmean_auc\tstd_auc");
    for s in seeds {
        table.push_str(&format!("\tseed{s}"));
    }
    table.push('\n');
    for row in &rows {
        let (mean, std) = mean_std(&row.aucs);
        table.push_str(&format!(
            "{}\t{}\t{}\t{mean:.4}\t{std:.4}",
            row.label,
            row.ablation.key(),
            row.fusion
        ));
        for a in &row.aucs {
            table.push_str(&format!("\t{a:.4}"));
        }
        table.push('\n');
    }
    print!("{table}");
    let summary = opts.out.join("summary.tsv");
    fs::write(&summary, &table)?;
    run.artifact(&summary);
    run.finish()?;
    Ok(())
}
