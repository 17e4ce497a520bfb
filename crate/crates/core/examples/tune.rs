//! Scratch experiment driver for calibrating the ablation training regime.

use std::time::Instant;

use serpent_core::data::{generate_corpus, Split, SyntheticSpec};
use serpent_core::decoder::DecoderConfig;
use serpent_core::eval::{evaluate_model, run_noise_sweep, NoiseSpec};
use serpent_core::mapper::{MapperActivation, MapperConfig};
use serpent_core::model::{ImageShape, ModelConfig};
use serpent_core::refine::{AggregationStrategy, GumbelConfig, SimilarityMode};
use serpent_core::train::{train_loop, LossWeights, TrainConfig, TrainSetup};
use serpent_core::vision::EncoderConfig;

fn desk_model() -> ModelConfig {
    let freeze = std::env::var("TUNE_FREEZE").is_ok();
    ModelConfig {
        image: ImageShape::default(),
        encoder: EncoderConfig { freeze, ..EncoderConfig::default() },
        mapper: MapperConfig::default(),
        decoder: DecoderConfig::default(),
    }
}

fn setup(weights: LossWeights, strategy: AggregationStrategy, epochs: usize, lr: f64, seed: u64) -> TrainSetup {
    let similarity = match std::env::var("TUNE_SIM").as_deref() {
        Ok("cosine") => SimilarityMode::Cosine,
        _ => SimilarityMode::Dot,
    };
    TrainSetup {
        model: desk_model(),
        train: TrainConfig {
            lr,
            epochs,
            batch_size: 6,
            seed,
            ..TrainConfig::default()
        },
        weights,
        gumbel: GumbelConfig {
            tau: std::env::var("TUNE_TAU").ok().and_then(|s| s.parse().ok()).unwrap_or(0.5),
            noise_enabled: true,
            rng_seed: seed,
        },
        strategy,
        similarity,
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let mode = args.get(1).map(String::as_str).unwrap_or("speed");
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let seeds: Vec<u64> = args
        .get(4)
        .map(|s| s.split(',').map(|x| x.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![0]);

    let corpus = generate_corpus(&SyntheticSpec {
        n_examples: 720,
        seed: 99,
        max_findings: std::env::var("TUNE_MAXF").ok().and_then(|s| s.parse().ok()).unwrap_or(2),
        ..SyntheticSpec::default()
    })
    .unwrap();
    let split = Split::by_counts(720, 500, 70, 150, 99).unwrap();

    match mode {
        "speed" => {
            let t0 = Instant::now();
            let s = setup(LossWeights::default(), AggregationStrategy::AttentionWeighted, epochs, lr, 0);
            let out = train_loop(&corpus, &split, &s).unwrap();
            let t1 = Instant::now();
            let m = evaluate_model(&out.model, &corpus, &split.test, 3, 24, None).unwrap();
            let t2 = Instant::now();
            println!(
                "train {:.1}s eval {:.1}s  bleu1 {:.4} hall {:.4}",
                (t1 - t0).as_secs_f64(),
                (t2 - t1).as_secs_f64(),
                m.bleu1,
                m.hallucination_rate
            );
            for row in out.log.iter().filter(|r| r.split == "val") {
                println!("epoch {} val ce {:.4} refine {:.4}", row.epoch, row.l_report, row.l_refine);
            }
        }
        "lambda" => {
            let rows = [(0.0, 1.0), (0.3, 0.7), (1.0, 0.0)];
            for &seed in &seeds {
                let mut line = format!("seed {seed}:");
                for (wr, wf) in rows {
                    let w = LossWeights { lambda_report: wr, lambda_refine: wf };
                    let s = setup(w, AggregationStrategy::AttentionWeighted, epochs, lr, seed);
                    let t0 = Instant::now();
                    let out = train_loop(&corpus, &split, &s).unwrap();
                    let m = evaluate_model(&out.model, &corpus, &split.test, 3, 24, None).unwrap();
                    line.push_str(&format!(
                        "  ({wr},{wf}) b1={:.4} hall={:.4} [{:.0}s]",
                        m.bleu1,
                        m.hallucination_rate,
                        t0.elapsed().as_secs_f64()
                    ));
                }
                println!("{line}");
            }
        }
        "agg" => {
            let strategies = [
                AggregationStrategy::AttentionWeighted,
                AggregationStrategy::MeanPool,
                AggregationStrategy::MaxNormPool,
                AggregationStrategy::TopKAttention { k: 5 },
            ];
            for &seed in &seeds {
                let mut line = format!("seed {seed}:");
                for strategy in strategies {
                    let s = setup(LossWeights::default(), strategy, epochs, lr, seed);
                    let out = train_loop(&corpus, &split, &s).unwrap();
                    let m = evaluate_model(&out.model, &corpus, &split.test, 3, 24, None).unwrap();
                    line.push_str(&format!("  {}={:.4}", strategy.label(), m.bleu1));
                }
                println!("{line}");
            }
        }
        "noise" => {
            for &seed in &seeds {
                let combined = setup(LossWeights::default(), AggregationStrategy::AttentionWeighted, epochs, lr, seed);
                let report_only = setup(
                    LossWeights { lambda_report: 1.0, lambda_refine: 0.0 },
                    AggregationStrategy::AttentionWeighted,
                    epochs,
                    lr,
                    seed,
                );
                let a = train_loop(&corpus, &split, &combined).unwrap();
                let b = train_loop(&corpus, &split, &report_only).unwrap();
                let models = [
                    ("combined".to_string(), &a.model),
                    ("report_only".to_string(), &b.model),
                ];
                let rows = run_noise_sweep(
                    &models,
                    &corpus,
                    &split.test,
                    &[0.0, 0.1, 0.2, 0.3, 0.5],
                    seed,
                    3,
                    24,
                )
                .unwrap();
                println!("seed {seed}:");
                for (label, m) in rows {
                    println!("  {label}: b1={:.4} hall={:.4}", m.bleu1, m.hallucination_rate);
                }
                let _ = NoiseSpec::default();
            }
        }
        other => eprintln!("unknown mode {other}"),
    }
}
