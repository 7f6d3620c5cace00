//! The `manifold` command-line pipeline.
//!
//! `generate` builds the labeled archive, `extract` turns it into a feature
//! matrix, `train`/`eval` fit and score the forest on a deterministic 70/30
//! split, `sweep` varies the advance-notice gap, and `monitor` slides a
//! trained model across a recorded trace. Every output lands under the run
//! directory with its digest listed in `manifest.json`, so identical
//! configurations produce byte-identical artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::archive::{self, Archive};
use crate::config::RunConfig;
use crate::digest::hex_digest;
use crate::engine;
use crate::error::{Error, Result};
use crate::features::{self, FeatureMatrix};
use crate::forest::{self, EvalReport, ForestModel};
use crate::hybrid::ImportanceWeightConfig;
use crate::sim::SimTrace;

#[derive(Debug, Parser)]
#[command(
    name = "manifold",
    version,
    about = "Search for collision-boundary driving scenarios and train collision-warning classifiers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a reference run configuration.
    InitConfig {
        /// Destination file.
        #[arg(long, default_value = "config.json")]
        out: PathBuf,
        /// Global seed to embed.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Search for core pairs and build the labeled archive.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Override the configured number of core pairs.
        #[arg(long)]
        pairs: Option<usize>,
        /// Output directory (defaults to the configured one).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the configured global seed.
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Extract the windowed feature matrix from an archive.
    Extract {
        #[arg(long)]
        config: PathBuf,
        /// Archive directory (defaults to `<out>/archive`).
        #[arg(long)]
        archive: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Train the forest on the 70% split of a feature matrix.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Matrix file (defaults to `<out>/features.csv`).
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Evaluate a model on the held-out 30% split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        /// Model file (defaults to `<out>/model.json`).
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        matrix: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Sweep the advance-notice gap and tabulate F1 per gap.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        archive: Option<PathBuf>,
        /// Gaps in seconds: a range `1..5` or a comma list `1,2.5,4`.
        #[arg(long, default_value = "1..5")]
        x: String,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed_override: Option<u64>,
    },
    /// Slide a trained model across a recorded trace file.
    Monitor {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        trace: PathBuf,
        /// Seconds between window anchors.
        #[arg(long, default_value_t = 0.5)]
        stride: f64,
        /// Output directory for the flag log.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

/// Parse a gap list: `1..5` (integer range, inclusive) or `1,2.5,4`.
pub fn parse_gap_list(s: &str) -> Result<Vec<f64>> {
    let malformed = |detail: String| Error::Malformed {
        what: "--x".into(),
        detail,
    };
    if let Some((lo, hi)) = s.split_once("..") {
        let lo: i64 = lo.trim().parse().map_err(|_| malformed(format!("bad range start {lo}")))?;
        let hi: i64 = hi.trim().parse().map_err(|_| malformed(format!("bad range end {hi}")))?;
        if hi < lo {
            return Err(malformed(format!("empty range {lo}..{hi}")));
        }
        return Ok((lo..=hi).map(|x| x as f64).collect());
    }
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| malformed(format!("bad gap {p}")))
        })
        .collect()
}

fn update_manifest(out_dir: &Path, entries: &[(String, String)]) -> Result<()> {
    let path = out_dir.join("manifest.json");
    let mut manifest: BTreeMap<String, String> = match fs::read_to_string(&path) {
        Ok(text) => serde_json::from_str(&text).unwrap_or_default(),
        Err(_) => BTreeMap::new(),
    };
    for (k, v) in entries {
        manifest.insert(k.clone(), v.clone());
    }
    fs::write(&path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn write_artifact(out_dir: &Path, name: &str, content: &str) -> Result<String> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join(name), content)?;
    let digest = hex_digest(content.as_bytes());
    update_manifest(out_dir, &[(name.to_string(), digest.clone())])?;
    Ok(digest)
}

fn load_config(path: &Path, seed_override: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = seed_override {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| PathBuf::from(&cfg.output_dir))
}

fn weight_config(cfg: &RunConfig) -> ImportanceWeightConfig {
    match cfg.ce.weight_mode {
        crate::hybrid::WeightMode::Unit => ImportanceWeightConfig::unit(),
        crate::hybrid::WeightMode::LikelihoodRatio => ImportanceWeightConfig::likelihood_ratio(
            engine::driving_prior(cfg.scenario.path_steps),
        ),
    }
}

fn cmd_generate(
    config: PathBuf,
    pairs: Option<usize>,
    out: Option<PathBuf>,
    seed_override: Option<u64>,
) -> Result<()> {
    let mut cfg = load_config(&config, seed_override)?;
    if let Some(p) = pairs {
        cfg.dataset.pairs = p;
    }
    let out = out_dir(&cfg, out);
    fs::create_dir_all(&out)?;

    let mut store = Archive::new();
    let ce = cfg.ce.with_seed(cfg.component_seed("core"));
    let weight_cfg = weight_config(&cfg);
    let core = archive::generate_core(
        &mut store,
        cfg.dataset.pairs,
        &ce,
        &cfg.scenario,
        &cfg.cost,
        &weight_cfg,
    )?;
    for w in &core.warnings {
        eprintln!("warning: {w}");
    }
    let variants = archive::generate_variants(
        &mut store,
        cfg.dataset.variants_per_pair,
        cfg.dataset.variant_band,
        &cfg.scenario,
        cfg.component_seed("variants"),
    )?;
    let prior = engine::driving_prior(cfg.scenario.path_steps);
    let rudimentary = archive::generate_rudimentary(
        &mut store,
        cfg.dataset.rudimentary,
        &cfg.scenario,
        &prior,
        cfg.component_seed("rudimentary"),
    )?;

    let archive_dir = out.join("archive");
    let files = archive::save(&store, &archive_dir)?;
    let mut entries: Vec<(String, String)> = files
        .iter()
        .map(|f| (format!("archive/{}", f.path), f.digest.clone()))
        .collect();
    entries.push(("archive.digest".into(), store.digest()));

    // Search histories for plotting, one line-delimited file per pair.
    fs::create_dir_all(out.join("history"))?;
    for (pair_id, history) in &core.histories {
        let text = engine::history_to_jsonl(history);
        let name = format!("history/{pair_id}.jsonl");
        fs::write(out.join(&name), &text)?;
        entries.push((name, hex_digest(text.as_bytes())));
    }
    update_manifest(&out, &entries)?;

    let mean_distance = if core.pair_distances.is_empty() {
        f64::NAN
    } else {
        core.pair_distances.iter().sum::<f64>() / core.pair_distances.len() as f64
    };
    let mean_iters = if core.iterations.is_empty() {
        f64::NAN
    } else {
        core.iterations.iter().sum::<usize>() as f64 / core.iterations.len() as f64
    };
    let mut summary = String::new();
    summary.push_str(&format!("archive digest: {}\n", store.digest()));
    summary.push_str("records per kind:\n");
    for (kind, n) in store.counts_by_kind() {
        summary.push_str(&format!("  {kind}: {n}\n"));
    }
    summary.push_str(&format!(
        "core pairs: {}/{} (mean raw pair distance {:.3})\n",
        core.completed, core.requested, mean_distance
    ));
    summary.push_str(&format!(
        "search iterations: mean {:.1}, max {}\n",
        mean_iters,
        core.iterations.iter().max().copied().unwrap_or(0)
    ));
    summary.push_str(&format!(
        "variants kept: {} vanilla, {} perturbed\n",
        variants.kept_vanilla, variants.kept_perturbed
    ));
    summary.push_str(&format!(
        "rudimentary: {} kept of {} draws\n",
        rudimentary.kept, rudimentary.draws
    ));
    if !core.warnings.is_empty() {
        summary.push_str(&format!("warnings: {}\n", core.warnings.len()));
    }
    write_artifact(&out, "summary.txt", &summary)?;
    print!("{summary}");
    Ok(())
}

fn compose_from_config(cfg: &RunConfig, store: &Archive) -> Result<archive::DatasetHandle> {
    let mix = match &cfg.dataset.mix {
        Some(m) => m.clone(),
        None => store.counts_by_kind(),
    };
    let dataset = archive::compose_dataset(store, &mix)?;
    for w in &dataset.warnings {
        eprintln!("warning: {w}");
    }
    Ok(dataset)
}

fn cmd_extract(
    config: PathBuf,
    archive_path: Option<PathBuf>,
    out: Option<PathBuf>,
    seed_override: Option<u64>,
) -> Result<()> {
    let cfg = load_config(&config, seed_override)?;
    let out = out_dir(&cfg, out);
    let archive_dir = archive_path.unwrap_or_else(|| out.join("archive"));
    let store = archive::load(&archive_dir)?;
    let dataset = compose_from_config(&cfg, &store)?;
    let matrix = features::build_matrix(&store, &dataset, &cfg.window)?;
    let digest = write_artifact(&out, "features.csv", &matrix.to_csv())?;
    println!(
        "features.csv: {} rows x {} columns (digest {digest})",
        matrix.rows.len(),
        matrix.spec.row_len()
    );
    println!(
        "class balance: {} zero-labeled, {} one-labeled",
        dataset.class_balance.0, dataset.class_balance.1
    );
    Ok(())
}

fn read_matrix(path: &Path) -> Result<FeatureMatrix> {
    let text =
        fs::read_to_string(path).map_err(|_| Error::MissingArtifact(path.display().to_string()))?;
    FeatureMatrix::from_csv(&text)
}

fn cmd_train(
    config: PathBuf,
    matrix: Option<PathBuf>,
    out: Option<PathBuf>,
    seed_override: Option<u64>,
) -> Result<()> {
    let cfg = load_config(&config, seed_override)?;
    let out = out_dir(&cfg, out);
    let matrix_path = matrix.unwrap_or_else(|| out.join("features.csv"));
    let full = read_matrix(&matrix_path)?;
    let (train_m, _) = forest::split_train_test(&full, 0.3, cfg.component_seed("split"));
    let model = forest::train(&train_m, &cfg.forest.with_seed(cfg.component_seed("forest")))?;
    let digest = write_artifact(&out, "model.json", &model.to_json())?;
    println!(
        "model.json: {} trees on {} training rows (digest {digest})",
        model.trees.len(),
        train_m.rows.len()
    );
    Ok(())
}

fn cmd_eval(
    config: PathBuf,
    model: Option<PathBuf>,
    matrix: Option<PathBuf>,
    out: Option<PathBuf>,
    seed_override: Option<u64>,
) -> Result<()> {
    let cfg = load_config(&config, seed_override)?;
    let out = out_dir(&cfg, out);
    let model_path = model.unwrap_or_else(|| out.join("model.json"));
    let matrix_path = matrix.unwrap_or_else(|| out.join("features.csv"));
    let model = ForestModel::load(&model_path)?;
    let full = read_matrix(&matrix_path)?;
    if model.manifest.source_digest != full.source_digest {
        return Err(Error::DigestMismatch {
            artifact: "feature matrix".into(),
            declared: model.manifest.source_digest.clone(),
            actual: full.source_digest.clone(),
        });
    }
    let (_, test_m) = forest::split_train_test(&full, 0.3, cfg.component_seed("split"));
    let report = forest::evaluate(&model, &test_m)?;
    let mut text = format!(
        "# model_digest={} matrix_digest={} test_rows={}\n",
        model.digest(),
        full.digest(),
        test_m.rows.len()
    );
    text.push_str(EvalReport::csv_header());
    text.push('\n');
    text.push_str(&report.to_csv_row());
    text.push('\n');
    write_artifact(&out, "eval.csv", &text)?;
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "n/a".into());
    println!(
        "held-out rows: {}  recall {}  precision {}  f1 {}  balanced-accuracy {}  fnr {}",
        test_m.rows.len(),
        fmt(report.recall),
        fmt(report.precision),
        fmt(report.f1),
        fmt(report.balanced_accuracy),
        fmt(report.false_negative_rate),
    );
    Ok(())
}

fn cmd_sweep(
    config: PathBuf,
    archive_path: Option<PathBuf>,
    x: String,
    out: Option<PathBuf>,
    seed_override: Option<u64>,
) -> Result<()> {
    let cfg = load_config(&config, seed_override)?;
    let out = out_dir(&cfg, out);
    let gaps = parse_gap_list(&x)?;
    let archive_dir = archive_path.unwrap_or_else(|| out.join("archive"));
    let store = archive::load(&archive_dir)?;
    let dataset = compose_from_config(&cfg, &store)?;
    let rows = forest::notice_sweep(
        &store,
        &dataset,
        &gaps,
        cfg.window.length,
        cfg.window.period,
        &cfg.forest.with_seed(cfg.component_seed("forest")),
        cfg.component_seed("split"),
    )?;
    let mut text = format!("# archive_digest={} dataset_digest={}\n", store.digest(), dataset.digest);
    text.push_str(&forest::sweep_to_csv(&rows));
    write_artifact(&out, "sweep.csv", &text)?;
    for r in &rows {
        let f1 = r
            .report
            .as_ref()
            .and_then(|m| m.f1)
            .map(|v| format!("{v:.4}"))
            .unwrap_or_else(|| if r.feasible { "n/a".into() } else { "infeasible".into() });
        println!("X = {:>4}s  f1 = {f1}", r.gap);
    }
    Ok(())
}

fn cmd_monitor(model: PathBuf, trace: PathBuf, stride: f64, out: PathBuf) -> Result<()> {
    let model = ForestModel::load(&model)?;
    let text =
        fs::read_to_string(&trace).map_err(|_| Error::MissingArtifact(trace.display().to_string()))?;
    let trace_data = SimTrace::from_csv(&text)?;
    let log = forest::monitor(&model, &trace_data, stride)?;
    if log.is_empty() {
        eprintln!("warning: trace shorter than the feature window; empty log");
    }
    let mut csv = format!(
        "# model_digest={} trace_digest={}\n",
        model.digest(),
        hex_digest(text.as_bytes())
    );
    csv.push_str("anchor_time,label,score\n");
    for (t, label, score) in &log {
        csv.push_str(&format!("{t:?},{label},{score:?}\n"));
    }
    write_artifact(&out, "monitor.csv", &csv)?;
    let flagged = log.iter().filter(|(_, l, _)| *l == 1).count();
    println!("{} windows, {} flagged", log.len(), flagged);
    Ok(())
}

/// Execute one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::InitConfig { out, seed } => {
            let cfg = RunConfig::reference(seed);
            fs::write(&out, cfg.to_json_pretty())?;
            println!("wrote {}", out.display());
            Ok(())
        }
        Command::Generate {
            config,
            pairs,
            out,
            seed_override,
        } => cmd_generate(config, pairs, out, seed_override),
        Command::Extract {
            config,
            archive,
            out,
            seed_override,
        } => cmd_extract(config, archive, out, seed_override),
        Command::Train {
            config,
            matrix,
            out,
            seed_override,
        } => cmd_train(config, matrix, out, seed_override),
        Command::Eval {
            config,
            model,
            matrix,
            out,
            seed_override,
        } => cmd_eval(config, model, matrix, out, seed_override),
        Command::Sweep {
            config,
            archive,
            x,
            out,
            seed_override,
        } => cmd_sweep(config, archive, x, out, seed_override),
        Command::Monitor {
            model,
            trace,
            stride,
            out,
        } => cmd_monitor(model, trace, stride, out),
    }
}
