//! Command-line front end: synthetic data, anti-bias splits, training,
//! inference, evaluation and ablations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use momentdiff_core::data::{
    build_split, generate_corpus, load_corpus, read_annotations, save_corpus, write_annotations, Corpus,
    MomentAnnotation, Partition, SplitKind, SplitSpec, SyntheticConfig,
};
use momentdiff_core::engine::metrics::align_predictions;
use momentdiff_core::engine::report::{format_report, read_predictions, write_histogram_table, write_predictions, write_report};
use momentdiff_core::engine::{
    eval_metrics, infer_corpus, load_checkpoint, run_ablation, save_checkpoint, train_with, AblationAxis, TrainConfig,
};

#[derive(Parser)]
#[command(name = "momentdiff", version, about = "Diffusion-based temporal moment retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus with planted moments.
    GenData {
        /// TOML file with synthetic corpus settings; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a biased train / out-of-distribution test split from annotations.
    Split {
        #[arg(long, value_parser = parse_kind)]
        kind: SplitKind,
        /// Threshold in seconds; 10 for `len`, 15 for `mom` when omitted.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long, default_value_t = 0.8)]
        ratio: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        annotations: PathBuf,
        /// Directory receiving `train.tsv` and `test.tsv`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint directory.
    Train {
        /// Corpus directory.
        #[arg(long)]
        data: PathBuf,
        /// TOML training config; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Restrict training to these queries (default: the train partition, or everything).
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Retrieve moments with a trained checkpoint.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long, default_value_t = 0.0)]
        eta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Restrict inference to these queries (default: the test partition, or everything).
        #[arg(long)]
        annotations: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against annotations.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Metric report, one `name threshold value` row per metric.
        #[arg(long)]
        out: PathBuf,
        /// Per-query table of ground-truth and top-1 spans (default: `<out>.table.tsv`).
        #[arg(long)]
        table: Option<PathBuf>,
    },
    /// Train and evaluate once per value of one configuration axis.
    Ablate {
        #[arg(long, value_parser = parse_axis)]
        axis: AblationAxis,
        #[arg(long, num_args = 1.., required = true)]
        values: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Training queries (default: the train partition).
        #[arg(long)]
        train: Option<PathBuf>,
        /// Evaluation queries (default: the test partition).
        #[arg(long)]
        test: Option<PathBuf>,
        /// Result table; printed to stdout as well.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_kind(s: &str) -> std::result::Result<SplitKind, String> {
    s.parse().map_err(|e: momentdiff_core::Error| e.to_string())
}

fn parse_axis(s: &str) -> std::result::Result<AblationAxis, String> {
    s.parse().map_err(|e: momentdiff_core::Error| e.to_string())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { config, out } => gen_data(config.as_deref(), &out),
        Command::Split {
            kind,
            threshold,
            ratio,
            seed,
            annotations,
            out,
        } => split(kind, threshold, ratio, seed, &annotations, &out),
        Command::Train {
            data,
            config,
            annotations,
            out,
        } => train_cmd(&data, config.as_deref(), annotations.as_deref(), &out),
        Command::Infer {
            ckpt,
            data,
            steps,
            eta,
            seed,
            annotations,
            out,
        } => infer_cmd(&ckpt, &data, steps, eta, seed, annotations.as_deref(), &out),
        Command::Eval {
            pred,
            annotations,
            out,
            table,
        } => eval_cmd(&pred, &annotations, &out, table),
        Command::Ablate {
            axis,
            values,
            data,
            config,
            train,
            test,
            out,
        } => ablate(axis, &values, &data, config.as_deref(), train.as_deref(), test.as_deref(), out.as_deref()),
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

/// Queries named in `annotations`, else the given partition when present, else everything.
fn select(corpus: &Corpus, annotations: Option<&Path>, partition: Partition) -> Result<Corpus> {
    if let Some(path) = annotations {
        let ids: Vec<String> = read_annotations(path)?.into_iter().map(|a| a.query_id).collect();
        return Ok(corpus.select_queries(&ids)?);
    }
    let part = corpus.indices_in(partition);
    Ok(if part.is_empty() { corpus.clone() } else { corpus.subset(&part) })
}

fn gen_data(config: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = match config {
        Some(p) => SyntheticConfig::load(p)?,
        None => SyntheticConfig::default(),
    };
    let corpus = generate_corpus(&cfg)?.corpus;
    save_corpus(&corpus, out)?;
    let anns = corpus.annotations();
    write_annotations(&out.join("annotations.tsv"), &anns)?;
    for (name, part) in [("train.tsv", Partition::Train), ("test.tsv", Partition::Test)] {
        let subset: Vec<MomentAnnotation> = anns.iter().filter(|a| a.partition == Some(part)).cloned().collect();
        write_annotations(&out.join(name), &subset)?;
    }
    println!(
        "wrote {} samples ({} train, {} test) to {}",
        corpus.len(),
        cfg.n_samples,
        cfg.n_test_samples,
        out.display()
    );
    Ok(())
}

fn split(kind: SplitKind, threshold: Option<f64>, ratio: f64, seed: u64, annotations: &Path, out: &Path) -> Result<()> {
    let mut spec = match kind {
        SplitKind::Len => SplitSpec::len(seed),
        SplitKind::Mom => SplitSpec::mom(seed),
    };
    if let Some(t) = threshold {
        spec.threshold_s = t;
    }
    spec.major_ratio = ratio;
    let anns = read_annotations(annotations)?;
    let split = build_split(&anns, &spec)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    for (name, ids) in [("train.tsv", split.train()), ("test.tsv", split.test())] {
        let picked: Vec<MomentAnnotation> = anns.iter().filter(|a| ids.contains(&a.query_id)).cloned().collect();
        write_annotations(&out.join(name), &picked)?;
    }
    println!(
        "train: {} majority + {} minority; test: {} majority + {} minority",
        split.train_majority.len(),
        split.train_minority.len(),
        split.test_majority.len(),
        split.test_minority.len()
    );
    Ok(())
}

fn train_cmd(data: &Path, config: Option<&Path>, annotations: Option<&Path>, out: &Path) -> Result<()> {
    let cfg = load_config(config)?;
    let corpus = select(&load_corpus(data)?, annotations, Partition::Train)?;
    let start = Instant::now();
    let output = train_with(&corpus, &cfg, |e| {
        eprintln!(
            "epoch {:>4}  loss {:.4}  sim {:.4}  vmr {:.4}  ({:.1}s)",
            e.epoch + 1,
            e.loss,
            e.sim,
            e.vmr,
            start.elapsed().as_secs_f64()
        );
    })?;
    save_checkpoint(&output.model, out)?;
    let mut history = String::from("epoch\tloss\tsim\tvmr\n");
    for e in &output.history {
        history.push_str(&format!("{}\t{}\t{}\t{}\n", e.epoch, e.loss, e.sim, e.vmr));
    }
    fs::write(out.join("history.tsv"), history).context("writing loss history")?;
    println!("trained on {} samples; checkpoint in {}", corpus.len(), out.display());
    Ok(())
}

fn infer_cmd(
    ckpt: &Path,
    data: &Path,
    steps: usize,
    eta: f64,
    seed: u64,
    annotations: Option<&Path>,
    out: &Path,
) -> Result<()> {
    let model = load_checkpoint(ckpt)?;
    let corpus = select(&load_corpus(data)?, annotations, Partition::Test)?;
    let start = Instant::now();
    let preds = infer_corpus(&model, &corpus, steps, eta, seed)?;
    let elapsed = start.elapsed().as_secs_f64();
    let named: Vec<_> = corpus
        .samples
        .iter()
        .map(|s| s.annotation.query_id.clone())
        .zip(preds)
        .collect();
    write_predictions(out, &named)?;
    println!("{} queries, {steps} steps, {elapsed:.2}s", named.len());
    Ok(())
}

fn eval_cmd(pred: &Path, annotations: &Path, out: &Path, table: Option<PathBuf>) -> Result<()> {
    let anns = read_annotations(annotations)?;
    let preds = align_predictions(read_predictions(pred)?, &anns)?;
    let report = eval_metrics(&preds, &anns)?;
    write_report(out, &report)?;
    let table = table.unwrap_or_else(|| {
        let mut name = out.as_os_str().to_owned();
        name.push(".table.tsv");
        PathBuf::from(name)
    });
    write_histogram_table(&table, &report)?;
    print!("{}", format_report(&report));
    Ok(())
}

fn ablate(
    axis: AblationAxis,
    values: &[String],
    data: &Path,
    config: Option<&Path>,
    train: Option<&Path>,
    test: Option<&Path>,
    out: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(config)?;
    let corpus = load_corpus(data)?;
    let train_set = select(&corpus, train, Partition::Train)?;
    let test_set = select(&corpus, test, Partition::Test)?;
    if train.is_none() && test.is_none() && corpus.indices_in(Partition::Test).is_empty() {
        bail!("corpus has no test partition; pass --train and --test annotation files");
    }
    let runs = run_ablation(&train_set, &test_set, &cfg, axis, values)?;
    let mut text = String::from("value\tR1@0.3\tR1@0.5\tR1@0.7\tMAP_avg\ttrain_s\tinfer_s\n");
    for r in &runs {
        let rep = &r.report;
        text.push_str(&format!(
            "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.3}\n",
            r.value,
            rep.r1_at(0.3).unwrap_or(f64::NAN),
            rep.r1_at(0.5).unwrap_or(f64::NAN),
            rep.r1_at(0.7).unwrap_or(f64::NAN),
            rep.map_avg,
            r.train_seconds,
            r.infer_seconds
        ));
    }
    if let Some(path) = out {
        fs::write(path, &text).with_context(|| format!("writing {}", path.display()))?;
    }
    std::io::stdout().write_all(text.as_bytes())?;
    Ok(())
}
