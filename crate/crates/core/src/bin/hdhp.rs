use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hdhp::evaluation::{evaluate_heldout, pattern_report, user_report};
use hdhp::generative::{generate, Hyperparams, SyntheticConfig};
use hdhp::io::{
    load_events, load_json, load_snapshot, load_vocab, manifest_path_for, save_events, save_json,
    save_snapshot, save_vocab, write_gof_csv, write_loglik_csv, write_pattern_csv, write_user_csv, Dataset,
    RunManifest,
};
use hdhp::smc::fit;

/// Hierarchical Dirichlet Hawkes process toolkit.
#[derive(Parser)]
#[command(name = "hdhp", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a synthetic event stream and its ground truth.
    Generate {
        /// Synthetic configuration (JSON); omitted fields take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output events (JSONL).
        #[arg(long)]
        out: PathBuf,
        /// Output ground truth (JSON).
        #[arg(long)]
        truth: PathBuf,
        /// Also write the vocabulary, one word per line.
        #[arg(long)]
        vocab_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the model to an event stream with sequential Monte Carlo.
    Fit {
        #[arg(long)]
        events: PathBuf,
        /// Hyperparameters (JSON); omitted fields take defaults.
        #[arg(long)]
        hyper: Option<PathBuf>,
        /// Output model snapshot (JSON).
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        particles: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        threads: Option<usize>,
        /// Fixed vocabulary, one word per line.
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[command(flatten)]
        split: Split,
    },
    /// Score held-out events under a fitted model.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        /// Output directory.
        #[arg(long)]
        report: PathBuf,
        #[command(flatten)]
        split: Split,
    },
    /// Summarise the patterns and users of a fitted model.
    Report {
        #[arg(long)]
        model: PathBuf,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Number of top words listed per pattern.
        #[arg(long, default_value_t = 10)]
        top_words: usize,
    },
}

/// Train/test boundary. `fit` keeps the events before it, `evaluate` the
/// events from it on.
#[derive(Args, Clone, Copy, Debug)]
#[group(multiple = false)]
struct Split {
    /// Fraction of events, in stream order, used for training.
    #[arg(long)]
    train_frac: Option<f64>,
    /// First time that belongs to the test period.
    #[arg(long)]
    split_time: Option<f64>,
}

impl Split {
    fn index(&self, data: &Dataset) -> Result<Option<usize>> {
        Ok(match (self.train_frac, self.split_time) {
            (Some(f), _) => Some(data.split_index_by_fraction(f)?),
            (None, Some(t)) => Some(data.split_index_at_time(t)),
            (None, None) => None,
        })
    }

    fn to_json(self) -> serde_json::Value {
        serde_json::json!({ "train_frac": self.train_frac, "split_time": self.split_time })
    }
}

fn write_manifest(manifest: &RunManifest, path: &Path) -> Result<()> {
    save_json(path, manifest).with_context(|| format!("writing manifest {}", path.display()))
}

fn run_generate(
    config: Option<PathBuf>,
    out: PathBuf,
    truth: PathBuf,
    vocab_out: Option<PathBuf>,
    seed: Option<u64>,
) -> Result<()> {
    let mut cfg: SyntheticConfig = match &config {
        Some(p) => load_json(p).with_context(|| format!("reading config {}", p.display()))?,
        None => SyntheticConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (events, gt) = generate(&cfg, &mut rng)?;
    let data = Dataset {
        events,
        users: gt.users.clone(),
        vocab: gt.vocab.clone(),
    };
    save_events(&out, &data)?;
    save_json(&truth, &gt)?;
    let mut manifest = RunManifest::new("generate", serde_json::to_value(&cfg)?);
    manifest.seed = Some(cfg.seed);
    manifest.outputs = vec![out.clone(), truth];
    if let Some(v) = vocab_out {
        save_vocab(&v, &gt.vocab)?;
        manifest.outputs.push(v);
    }
    write_manifest(&manifest, &manifest_path_for(&out))?;
    eprintln!("generated {} events for {} users", data.events.len(), data.users.len());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_fit(
    events: PathBuf,
    hyper: Option<PathBuf>,
    out: PathBuf,
    particles: Option<usize>,
    seed: Option<u64>,
    threads: Option<usize>,
    vocab: Option<PathBuf>,
    split: Split,
) -> Result<()> {
    let mut h: Hyperparams = match &hyper {
        Some(p) => load_json(p).with_context(|| format!("reading hyperparameters {}", p.display()))?,
        None => Hyperparams::default(),
    };
    if let Some(p) = particles {
        h.particles = p;
    }
    if let Some(s) = seed {
        h.seed = s;
    }
    let fixed_vocab = match &vocab {
        Some(p) => Some(load_vocab(p)?),
        None if !h.vocab.is_empty() => Some(h.vocab.clone()),
        None => None,
    };
    let data = load_events(&events, fixed_vocab.as_deref())?;
    let train = match split.index(&data)? {
        Some(0) => bail!("the split leaves no training events"),
        Some(i) => data.slice(0..i),
        None => data,
    };
    h.vocab = train.vocab.clone();
    let model = fit(&train.events, &train.users, &h, threads)?;
    save_snapshot(&model, &out)?;

    let mut config = serde_json::to_value(&h)?;
    if let Some(obj) = config.as_object_mut() {
        // The vocabulary is stored in the snapshot; keep the manifest small.
        obj.insert("vocab".into(), serde_json::json!(h.vocab.len()));
        obj.insert("split".into(), split.to_json());
    }
    let mut manifest = RunManifest::new("fit", config);
    manifest.seed = Some(h.seed);
    manifest.threads = threads;
    manifest.outputs = vec![out.clone()];
    write_manifest(&manifest, &manifest_path_for(&out))?;
    eprintln!(
        "fitted {} events: {} patterns, {} tasks, log evidence {:.3}",
        train.events.len(),
        model.patterns.len(),
        model.total_tasks,
        model.log_evidence.last().copied().unwrap_or(0.0)
    );
    Ok(())
}

fn run_evaluate(model_path: PathBuf, test: PathBuf, report: PathBuf, split: Split) -> Result<()> {
    let model = load_snapshot(&model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    let data = load_events(&test, Some(model.vocab()))
        .with_context(|| format!("{} does not match the model vocabulary", test.display()))?;
    let data = match split.index(&data)? {
        Some(i) => data.slice(i..data.events.len()),
        None => data,
    };
    if data.events.is_empty() {
        bail!("no test events after the split");
    }
    let held = evaluate_heldout(&model, &data.events, &data.users)?;
    std::fs::create_dir_all(&report).with_context(|| format!("creating {}", report.display()))?;
    let rows: Vec<_> = held
        .logliks
        .iter()
        .map(|&(i, l)| {
            let e = &data.events[i];
            (i, data.users[e.user].clone(), e.time, l)
        })
        .collect();
    let loglik_csv = report.join("heldout_loglik.csv");
    let gof_csv = report.join("gof_users.csv");
    let summary_json = report.join("summary.json");
    write_loglik_csv(&loglik_csv, &rows)?;
    write_gof_csv(&gof_csv, &held.gof)?;
    let summary = serde_json::json!({
        "events": data.events.len(),
        "scored_events": held.logliks.len(),
        "unknown_user_events": held.unknown_user_events,
        "perplexity": held.perplexity.as_ref().map(|p| p.value),
        "perplexity_diagnostic": held.perplexity.as_ref().and_then(|p| p.diagnostic.clone()),
        "gof_users": held.gof.users.len(),
        "gof_skipped_users": held.gof.skipped.len(),
        "ks_reject_fraction": held.gof.ks_reject_fraction,
        "ad_reject_fraction": held.gof.ad_reject_fraction,
    });
    save_json(&summary_json, &summary)?;
    let mut manifest = RunManifest::new(
        "evaluate",
        serde_json::json!({ "model": model_path, "test": test, "split": split.to_json() }),
    );
    manifest.seed = Some(model.hyperparams.seed);
    manifest.outputs = vec![loglik_csv, gof_csv, summary_json];
    write_manifest(&manifest, &report.join("manifest.json"))?;
    match &held.perplexity {
        Some(p) => eprintln!("perplexity {:.4} over {} events", p.value, p.events),
        None => eprintln!("no events from known users"),
    }
    Ok(())
}

fn run_report(model_path: PathBuf, out: PathBuf, top_words: usize) -> Result<()> {
    let model = load_snapshot(&model_path).with_context(|| format!("loading model {}", model_path.display()))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let patterns_csv = out.join("patterns.csv");
    let users_csv = out.join("users.csv");
    write_pattern_csv(&patterns_csv, &pattern_report(&model, top_words)?)?;
    write_user_csv(&users_csv, &user_report(&model, &model.training_events())?)?;
    let mut manifest = RunManifest::new(
        "report",
        serde_json::json!({ "model": model_path, "top_words": top_words }),
    );
    manifest.seed = Some(model.hyperparams.seed);
    manifest.outputs = vec![patterns_csv, users_csv];
    write_manifest(&manifest, &out.join("manifest.json"))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate {
            config,
            out,
            truth,
            vocab_out,
            seed,
        } => run_generate(config, out, truth, vocab_out, seed),
        Command::Fit {
            events,
            hyper,
            out,
            particles,
            seed,
            threads,
            vocab,
            split,
        } => run_fit(events, hyper, out, particles, seed, threads, vocab, split),
        Command::Evaluate {
            model,
            test,
            report,
            split,
        } => run_evaluate(model, test, report, split),
        Command::Report { model, out, top_words } => run_report(model, out, top_words),
    }
}
