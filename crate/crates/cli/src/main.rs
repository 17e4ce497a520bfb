//! `serpent`: generate synthetic corpora, train the self-refining report
//! model, decode reports, and run evaluation/ablation/noise studies.
//!
//! Exit codes: 0 success, 2 usage or config error, 3 data or checkpoint
//! corruption, 4 numerical failure (non-finite loss).

mod config;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use serpent_core::checkpoint::{self, Checkpoint};
use serpent_core::data::{detokenize, generate_corpus, load_corpus, save_corpus, tokenize, Split};
use serpent_core::error::Error;
use serpent_core::eval::{
    aggregation_grid, evaluate_model, lambda_grid, metrics_csv, run_aggregation_ablation,
    run_lambda_ablation, run_noise_sweep, score_candidates, MetricReport,
};
use serpent_core::model::{generate, ModelState};
use serpent_core::train::{loss_log_csv, train_loop};
use serpent_core::vision::ImageSample;

use config::{write_resolved, RunConfig};

type Result<T> = std::result::Result<T, Error>;

#[derive(Parser)]
#[command(name = "serpent", version, about = "Self-refining image-to-report generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblateMode {
    Lambda,
    Aggregation,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Subset {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus and split file.
    GenData {
        /// JSON file with the corpus spec.
        #[arg(long)]
        spec: PathBuf,
        /// Output directory (corpus.jsonl, split.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (model.srpm, loss_log.csv, resolved_config.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Decode reports for every image in a JSONL file.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL input; each line needs an "image" field.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        /// Output JSONL with {"report", "score"} per input line.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score generated (or provided) reports against references.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSONL corpus with reference reports.
        #[arg(long)]
        data: PathBuf,
        /// Optional split file restricting evaluation.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        /// Skip generation and score these reports instead (JSONL with a
        /// "report" field per line, aligned with the evaluated subset).
        #[arg(long)]
        candidates: Option<PathBuf>,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        /// Output directory (metrics.csv, metrics.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per ablation row and tabulate test metrics.
    Ablate {
        #[arg(long, value_enum)]
        mode: AblateMode,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints across Gaussian image-noise variances.
    Noise {
        /// Comma-separated checkpoint paths.
        #[arg(long, value_delimiter = ',')]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Subset::Test)]
        subset: Subset,
        /// Comma-separated variances, ascending, starting at 0.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.2, 0.3, 0.5])]
        variances: Vec<f64>,
        #[arg(long, default_value_t = 0)]
        noise_seed: u64,
        #[arg(long, default_value_t = 3)]
        beam: usize,
        #[arg(long, default_value_t = 32)]
        max_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_)
        | Error::Invalid { .. }
        | Error::ShapeMismatch { .. }
        | Error::Domain { .. }
        | Error::NonScalarRoot { .. } => 2,
        Error::CorpusLine { .. } | Error::Checkpoint(_) | Error::Io(_) | Error::Json(_) => 3,
        Error::NonFinite { .. } => 4,
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli.command) {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { spec, out } => cmd_gen_data(&spec, &out),
        Command::Train { config, out } => cmd_train(&config, &out),
        Command::Generate {
            checkpoint,
            input,
            beam,
            max_len,
            out,
        } => cmd_generate(&checkpoint, &input, beam, max_len, &out),
        Command::Evaluate {
            checkpoint,
            data,
            split,
            subset,
            candidates,
            beam,
            max_len,
            out,
        } => cmd_evaluate(
            &checkpoint,
            &data,
            split.as_deref(),
            subset,
            candidates.as_deref(),
            beam,
            max_len,
            &out,
        ),
        Command::Ablate { mode, config, out } => cmd_ablate(mode, &config, &out),
        Command::Noise {
            checkpoints,
            data,
            split,
            subset,
            variances,
            noise_seed,
            beam,
            max_len,
            out,
        } => cmd_noise(
            &checkpoints,
            &data,
            split.as_deref(),
            subset,
            &variances,
            noise_seed,
            beam,
            max_len,
            &out,
        ),
    }
}

fn cmd_gen_data(spec_path: &Path, out: &Path) -> Result<()> {
    let text = std::fs::read_to_string(spec_path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", spec_path.display())))?;
    let spec: serpent_core::data::SyntheticSpec =
        serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    spec.validate()?;
    let corpus = generate_corpus(&spec)?;
    let split = Split::by_ratio(corpus.len(), spec.seed);
    std::fs::create_dir_all(out)?;
    save_corpus(out.join("corpus.jsonl"), &corpus)?;
    split.save(out.join("split.json"))?;
    write_resolved(out, &spec)?;
    println!(
        "wrote {} examples to {} (train {} / val {} / test {})",
        corpus.len(),
        out.display(),
        split.train.len(),
        split.val.len(),
        split.test.len()
    );
    Ok(())
}

fn cmd_train(config_path: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?.resolve()?;
    let (corpus, split) = cfg.load_data()?;
    check_image_dims(&cfg, &corpus)?;
    let setup = cfg.setup();
    let outcome = train_loop(&corpus, &split, &setup)?;

    std::fs::create_dir_all(out)?;
    write_resolved(out, &cfg)?;
    std::fs::write(out.join("loss_log.csv"), loss_log_csv(&outcome.log))?;
    let ckpt = Checkpoint {
        model: outcome.model,
        optimizer: Some(outcome.optimizer),
        step: outcome.steps,
        extra: serde_json::to_value(&cfg)?,
    };
    checkpoint::save(out.join("model.srpm"), &ckpt)?;
    let last = outcome.log.last().expect("at least one epoch row");
    println!(
        "trained {} steps; final {} loss {:.6}; artifacts in {}",
        outcome.steps,
        last.split,
        last.l_total,
        out.display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct ImageRow {
    image: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct ReportRow {
    report: String,
    #[serde(default)]
    score: f64,
}

fn read_images(path: &Path) -> Result<Vec<ImageSample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut images = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let row: ImageRow = serde_json::from_str(&line).map_err(|e| Error::CorpusLine {
            path: path.display().to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        let height = row.image.len();
        let width = row.image.first().map_or(0, |r| r.len());
        let pixels: Vec<f64> = row.image.into_iter().flatten().collect();
        let image = ImageSample::new(height, width, 1, pixels).map_err(|e| Error::CorpusLine {
            path: path.display().to_string(),
            line: lineno,
            msg: e.to_string(),
        })?;
        images.push(image);
    }
    if images.is_empty() {
        return Err(Error::CorpusLine {
            path: path.display().to_string(),
            line: 0,
            msg: "no input lines".into(),
        });
    }
    Ok(images)
}

fn cmd_generate(
    checkpoint_path: &Path,
    input: &Path,
    beam: usize,
    max_len: usize,
    out: &Path,
) -> Result<()> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let images = read_images(input)?;
    let mut writer = BufWriter::new(File::create(out)?);
    for image in &images {
        let output = generate(&ckpt.model, image, beam, max_len)?;
        let row = ReportRow {
            report: detokenize(&output.ids, &ckpt.model.vocab),
            score: output.score,
        };
        serde_json::to_writer(&mut writer, &row)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    println!("decoded {} reports to {}", images.len(), out.display());
    Ok(())
}

fn subset_indices(n: usize, split: Option<&Path>, subset: Subset) -> Result<Vec<usize>> {
    match split {
        None => Ok((0..n).collect()),
        Some(path) => {
            let s = Split::load(path)?;
            Ok(match subset {
                Subset::Train => s.train,
                Subset::Val => s.val,
                Subset::Test => s.test,
                Subset::All => (0..n).collect(),
            })
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_evaluate(
    checkpoint_path: &Path,
    data: &Path,
    split: Option<&Path>,
    subset: Subset,
    candidates: Option<&Path>,
    beam: usize,
    max_len: usize,
    out: &Path,
) -> Result<()> {
    let ckpt = checkpoint::load(checkpoint_path)?;
    let corpus = load_corpus(data)?;
    let indices = subset_indices(corpus.len(), split, subset)?;

    let report = match candidates {
        Some(cand_path) => {
            let reader = BufReader::new(File::open(cand_path)?);
            let mut seqs = Vec::new();
            for (idx, line) in reader.lines().enumerate() {
                let line = line?;
                let row: ReportRow =
                    serde_json::from_str(&line).map_err(|e| Error::CorpusLine {
                        path: cand_path.display().to_string(),
                        line: idx + 1,
                        msg: e.to_string(),
                    })?;
                seqs.push(tokenize(&row.report, &ckpt.model.vocab));
            }
            score_candidates(&ckpt.model, &corpus, &indices, &seqs)?
        }
        None => evaluate_model(&ckpt.model, &corpus, &indices, beam, max_len, None)?,
    };

    write_metrics(out, &[("eval".to_string(), report)])?;
    println!("{}", metrics_csv(&[("eval".to_string(), report)]));
    Ok(())
}

fn cmd_ablate(mode: AblateMode, config_path: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config_path)?.resolve()?;
    let (corpus, split) = cfg.load_data()?;
    check_image_dims(&cfg, &corpus)?;
    let base = cfg.setup();
    let rows = match mode {
        AblateMode::Lambda => run_lambda_ablation(
            &corpus,
            &split,
            &base,
            &lambda_grid(),
            cfg.eval.beam_width,
            cfg.eval.max_len,
        )?,
        AblateMode::Aggregation => run_aggregation_ablation(
            &corpus,
            &split,
            &base,
            &aggregation_grid(),
            cfg.eval.beam_width,
            cfg.eval.max_len,
        )?,
    };
    std::fs::create_dir_all(out)?;
    write_resolved(out, &cfg)?;
    write_metrics(out, &rows)?;
    print!("{}", metrics_csv(&rows));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_noise(
    checkpoints: &[PathBuf],
    data: &Path,
    split: Option<&Path>,
    subset: Subset,
    variances: &[f64],
    noise_seed: u64,
    beam: usize,
    max_len: usize,
    out: &Path,
) -> Result<()> {
    if checkpoints.is_empty() {
        return Err(Error::Config("noise: at least one checkpoint required".into()));
    }
    let loaded: Vec<(String, Checkpoint)> = checkpoints
        .iter()
        .map(|p| {
            let label = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| p.display().to_string());
            checkpoint::load(p).map(|c| (label, c))
        })
        .collect::<Result<_>>()?;
    let corpus = load_corpus(data)?;
    let indices = subset_indices(corpus.len(), split, subset)?;
    let models: Vec<(String, &ModelState)> = loaded
        .iter()
        .map(|(label, c)| (label.clone(), &c.model))
        .collect();
    let rows = run_noise_sweep(&models, &corpus, &indices, variances, noise_seed, beam, max_len)?;
    std::fs::create_dir_all(out)?;
    write_resolved(
        out,
        &serde_json::json!({
            "checkpoints": checkpoints,
            "variances": variances,
            "noise_seed": noise_seed,
            "beam": beam,
            "max_len": max_len,
        }),
    )?;
    write_metrics(out, &rows)?;
    print!("{}", metrics_csv(&rows));
    Ok(())
}

fn check_image_dims(cfg: &RunConfig, corpus: &[serpent_core::data::Example]) -> Result<()> {
    if let Some(first) = corpus.first() {
        let m = &cfg.model.image;
        if (first.image.height, first.image.width, first.image.channels)
            != (m.height, m.width, m.channels)
        {
            return Err(Error::Config(format!(
                "corpus images are {}x{}x{} but model.image is {}x{}x{}",
                first.image.height,
                first.image.width,
                first.image.channels,
                m.height,
                m.width,
                m.channels
            )));
        }
    }
    Ok(())
}

fn write_metrics(out: &Path, rows: &[(String, MetricReport)]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("metrics.csv"), metrics_csv(rows))?;
    let json_rows: Vec<serde_json::Value> = rows
        .iter()
        .map(|(config, m)| {
            let mut v = serde_json::to_value(m).expect("metrics serialize");
            v["config"] = serde_json::Value::String(config.clone());
            v
        })
        .collect();
    std::fs::write(
        out.join("metrics.json"),
        serde_json::to_string_pretty(&json_rows)? + "\n",
    )?;
    Ok(())
}
