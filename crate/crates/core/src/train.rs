//! Training: the weighted total loss, AdamW with a linear-to-zero schedule,
//! and the deterministic epoch loop.
//!
//! Within a batch, per-sample forward/backward passes run on worker threads;
//! gradients are then summed in sample order, so results are bit-identical
//! regardless of thread count.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{build_vocab, Example, Split};
use crate::error::{Error, Result};
use crate::model::{
    forward_example, prepare_example, refine_representation, ModelConfig, ModelState,
    PreparedExample,
};
use crate::refine::{refine_loss, AggregationStrategy, GumbelConfig, SimilarityMode};
use crate::tape::Tape;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_report: f64,
    pub lambda_refine: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_report: 0.3,
            lambda_refine: 0.7,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_report < 0.0 || self.lambda_refine < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if self.lambda_report == 0.0 && self.lambda_refine == 0.0 {
            return Err(Error::Config("loss weights must not both be zero".into()));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        format!("lambda_{}_{}", self.lambda_report, self.lambda_refine)
    }
}

/// Exact weighted sum of the two scalar losses.
pub fn total_loss(l_report: f64, l_refine: f64, w: &LossWeights) -> f64 {
    w.lambda_report * l_report + w.lambda_refine * l_refine
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            epochs: 15,
            batch_size: 6,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("train: batch_size must be >= 1".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("train: epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("train: lr must be > 0".into()));
        }
        Ok(())
    }
}

/// Linear-to-zero schedule: `base_lr * (1 - step / total_steps)`.
pub fn lr_at(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::invalid(
            "lr_at",
            format!("step {step} past total_steps {total_steps}"),
        ));
    }
    Ok(base_lr * (1.0 - step as f64 / total_steps as f64))
}

/// First and second moments, aligned with `ModelState::named_tensors` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn init(model: &ModelState) -> Self {
        let sizes: Vec<usize> = model.named_tensors().iter().map(|(_, t)| t.numel()).collect();
        AdamWState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One AdamW update with bias correction and decoupled weight decay.
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    cfg: &TrainConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * param[i]);
    }
}

/// Apply one optimizer step over every trainable parameter from the gradient
/// accumulators, then clear them.
pub fn adamw_step(model: &mut ModelState, opt: &mut AdamWState, lr: f64, cfg: &TrainConfig) {
    opt.step += 1;
    let t = opt.step;
    for (i, (_, tensor)) in model.named_tensors_mut().into_iter().enumerate() {
        if !tensor.requires_grad {
            continue;
        }
        let grad = match tensor.grad.take() {
            Some(g) => g,
            None => vec![0.0; tensor.data.len()],
        };
        adamw_update(
            &mut tensor.data,
            &grad,
            &mut opt.m[i],
            &mut opt.v[i],
            t,
            lr,
            cfg,
        );
    }
}

/// Everything a training run needs besides the data.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSetup {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub weights: LossWeights,
    pub gumbel: GumbelConfig,
    pub strategy: AggregationStrategy,
    pub similarity: SimilarityMode,
}

impl Default for TrainSetup {
    fn default() -> Self {
        TrainSetup {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            weights: LossWeights::default(),
            gumbel: GumbelConfig::default(),
            strategy: AggregationStrategy::AttentionWeighted,
            similarity: SimilarityMode::Dot,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: &'static str,
    pub l_report: f64,
    pub l_refine: f64,
    pub l_total: f64,
}

/// Render the per-epoch log as CSV.
pub fn loss_log_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,split,l_report,l_refine,l_total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.epoch, r.split, r.l_report, r.l_refine, r.l_total
        ));
    }
    out
}

pub struct TrainOutcome {
    pub model: ModelState,
    pub optimizer: AdamWState,
    pub log: Vec<EpochRow>,
    pub steps: u64,
}

struct SampleResult {
    grads: Vec<Option<Vec<f64>>>,
    ce: f64,
    refine: f64,
    total: f64,
}

fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut x = a
        ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ c.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 30;
    x = x.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^= x >> 31;
    x
}

/// Forward (and optionally backward) one sample under the setup's losses.
fn run_sample(
    model: &ModelState,
    setup: &TrainSetup,
    prepared: &PreparedExample,
    gumbel_seed: u64,
    noise: bool,
    batch_size: usize,
    want_grads: bool,
) -> Result<SampleResult> {
    let w = &setup.weights;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let fwd = forward_example(&mut tape, &bound, &model.config, prepared)?;
    let ce = fwd.report_ce;
    let ce_val = tape.value(ce)[0];

    let mut refine_val = 0.0;
    let mut loss_terms = Vec::new();
    if w.lambda_report > 0.0 {
        loss_terms.push(tape.scale(ce, w.lambda_report));
    }
    if w.lambda_refine > 0.0 {
        let gumbel = GumbelConfig {
            noise_enabled: noise && setup.gumbel.noise_enabled,
            ..setup.gumbel.clone()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(gumbel_seed);
        let h_t = refine_representation(&mut tape, &bound, &fwd, &gumbel, &mut rng, setup.strategy)?;
        let term = refine_loss(&mut tape, &[(h_t, fwd.e_v)], setup.similarity)?;
        refine_val = tape.value(term)[0];
        loss_terms.push(tape.scale(term, w.lambda_refine));
    }
    let mut total = loss_terms[0];
    for &t in &loss_terms[1..] {
        total = tape.add(total, t)?;
    }
    let total = tape.scale(total, 1.0 / batch_size as f64);
    let total_val = tape.value(total)[0] * batch_size as f64;

    let grads = if want_grads {
        tape.backward(total)?;
        bound
            .named_vars()
            .into_iter()
            .map(|(_, var)| tape.grad(var).map(|g| g.to_vec()))
            .collect()
    } else {
        Vec::new()
    };

    Ok(SampleResult {
        grads,
        ce: ce_val,
        refine: refine_val,
        total: total_val,
    })
}

/// Mean losses over a set of examples, teacher-forced, Gumbel noise off.
pub fn evaluate_losses(
    model: &ModelState,
    setup: &TrainSetup,
    prepared: &[PreparedExample],
    indices: &[usize],
) -> Result<(f64, f64, f64)> {
    let results: Vec<SampleResult> = indices
        .par_iter()
        .map(|&i| run_sample(model, setup, &prepared[i], 0, false, 1, false))
        .collect::<Result<_>>()?;
    let n = results.len().max(1) as f64;
    let l_report = results.iter().map(|r| r.ce).sum::<f64>() / n;
    let l_refine = results.iter().map(|r| r.refine).sum::<f64>() / n;
    Ok((l_report, l_refine, total_loss(l_report, l_refine, &setup.weights)))
}

/// Train a fresh model on the split's training set, logging per-epoch losses
/// on the train and validation splits.
pub fn train_loop(corpus: &[Example], split: &Split, setup: &TrainSetup) -> Result<TrainOutcome> {
    setup.train.validate()?;
    setup.weights.validate()?;
    if corpus.is_empty() || split.train.is_empty() {
        return Err(Error::invalid("train_loop", "empty dataset"));
    }

    let vocab = build_vocab(corpus);
    let mut model = ModelState::init(setup.model.clone(), vocab, setup.train.seed)?;
    let prepared: Vec<PreparedExample> = corpus
        .iter()
        .map(|e| prepare_example(e, &model.vocab))
        .collect();

    let mut opt = AdamWState::init(&model);
    let batch = setup.train.batch_size;
    let steps_per_epoch = split.train.len().div_ceil(batch) as u64;
    let total_steps = steps_per_epoch * setup.train.epochs as u64;
    let mut log = Vec::new();

    for epoch in 0..setup.train.epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(
            setup.train.seed,
            epoch as u64,
            0x5eed,
        )));

        let mut ce_sum = 0.0;
        let mut refine_sum = 0.0;
        let mut n_samples = 0usize;

        for chunk in order.chunks(batch) {
            let b = chunk.len();
            let results: Vec<SampleResult> = chunk
                .par_iter()
                .map(|&idx| {
                    let gseed = mix_seed(setup.gumbel.rng_seed, epoch as u64, idx as u64);
                    run_sample(&model, setup, &prepared[idx], gseed, true, b, true)
                })
                .collect::<Result<_>>()?;

            let batch_total: f64 = results.iter().map(|r| r.total).sum::<f64>() / b as f64;
            if !batch_total.is_finite() {
                return Err(Error::NonFinite { step: opt.step });
            }
            for r in &results {
                ce_sum += r.ce;
                refine_sum += r.refine;
            }
            n_samples += b;

            // accumulate gradients in sample order
            for (_, tensor) in model.named_tensors_mut() {
                if tensor.requires_grad {
                    tensor.zero_grad();
                }
            }
            for r in &results {
                for ((_, tensor), grad) in model.named_tensors_mut().into_iter().zip(&r.grads) {
                    if let Some(g) = grad {
                        tensor.accumulate_grad(g);
                    }
                }
            }

            let lr = lr_at(opt.step, total_steps, setup.train.lr)?;
            adamw_step(&mut model, &mut opt, lr, &setup.train);
        }

        let n = n_samples as f64;
        let train_report = ce_sum / n;
        let train_refine = refine_sum / n;
        log.push(EpochRow {
            epoch,
            split: "train",
            l_report: train_report,
            l_refine: train_refine,
            l_total: total_loss(train_report, train_refine, &setup.weights),
        });

        if !split.val.is_empty() {
            let (vr, vf, vt) = evaluate_losses(&model, setup, &prepared, &split.val)?;
            log.push(EpochRow {
                epoch,
                split: "val",
                l_report: vr,
                l_refine: vf,
                l_total: vt,
            });
        }
    }

    Ok(TrainOutcome {
        model,
        optimizer: opt,
        steps: total_steps,
        log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_corpus, SyntheticSpec};
    use crate::decoder::DecoderConfig;
    use crate::mapper::{MapperActivation, MapperConfig};
    use crate::model::ImageShape;
    use crate::vision::EncoderConfig;

    fn tiny_setup(weights: LossWeights, epochs: usize, seed: u64) -> TrainSetup {
        TrainSetup {
            model: ModelConfig {
                image: ImageShape::default(),
                encoder: EncoderConfig {
                    patch_size: 4,
                    d_v: 8,
                    layers: 1,
                    heads: 2,
                    mlp_ratio: 2,
                    freeze: false,
                },
                mapper: MapperConfig {
                    d_v: 8,
                    d_t: 12,
                    hidden: None,
                    activation: MapperActivation::Tanh,
                },
                decoder: DecoderConfig {
                    d_t: 12,
                    layers: 1,
                    heads: 2,
                    mlp_ratio: 2,
                    max_seq_len: 48,
                },
            },
            train: TrainConfig {
                lr: 3e-3,
                epochs,
                batch_size: 4,
                seed,
                ..TrainConfig::default()
            },
            weights,
            gumbel: GumbelConfig {
                tau: 0.5,
                noise_enabled: true,
                rng_seed: seed,
            },
            strategy: AggregationStrategy::AttentionWeighted,
            similarity: SimilarityMode::Dot,
        }
    }

    fn tiny_data(n: usize, seed: u64) -> (Vec<Example>, Split) {
        let corpus = generate_corpus(&SyntheticSpec {
            n_examples: n,
            seed,
            ..SyntheticSpec::default()
        })
        .unwrap();
        let split = Split::by_ratio(n, seed);
        (corpus, split)
    }

    #[test]
    fn total_loss_is_exact_weighted_sum() {
        let w = LossWeights {
            lambda_report: 0.3,
            lambda_refine: 0.7,
        };
        assert!((total_loss(2.0, 1.0, &w) - 1.3).abs() < 1e-15);
        let only_report = LossWeights {
            lambda_report: 1.0,
            lambda_refine: 0.0,
        };
        assert_eq!(total_loss(2.5, 9.9, &only_report), 2.5);
        let only_refine = LossWeights {
            lambda_report: 0.0,
            lambda_refine: 1.0,
        };
        assert_eq!(total_loss(2.5, 9.9, &only_refine), 9.9);
    }

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        assert_eq!(lr_at(0, 100, 1e-4).unwrap(), 1e-4);
        assert_eq!(lr_at(100, 100, 1e-4).unwrap(), 0.0);
        assert_eq!(lr_at(50, 100, 1e-4).unwrap(), 5e-5);
        assert!(lr_at(101, 100, 1e-4).is_err());
    }

    #[test]
    fn adamw_zero_gradient_is_pure_decay() {
        let cfg = TrainConfig::default();
        let mut p = [2.0];
        let mut m = [0.0];
        let mut v = [0.0];
        adamw_update(&mut p, &[0.0], &mut m, &mut v, 1, 0.1, &cfg);
        assert!((p[0] - 2.0 * (1.0 - 0.1 * cfg.weight_decay)).abs() < 1e-15);
    }

    #[test]
    fn adamw_single_step_matches_hand_computation() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = [1.0];
        let mut m = [0.0];
        let mut v = [0.0];
        let g = 0.5;
        adamw_update(&mut p, &[g], &mut m, &mut v, 1, 0.01, &cfg);
        // m = 0.1*0.5 = 0.05; v = 0.001*0.25 = 0.00025
        // m_hat = 0.05/0.1 = 0.5; v_hat = 0.00025/0.001 = 0.25
        // p = 1 - 0.01 * 0.5 / (0.5 + 1e-8)
        let expected = 1.0 - 0.01 * 0.5 / (0.25f64.sqrt() + cfg.eps);
        assert!((p[0] - expected).abs() < 1e-15, "{} vs {expected}", p[0]);
        assert!((m[0] - 0.05).abs() < 1e-15);
        assert!((v[0] - 0.00025).abs() < 1e-15);
    }

    #[test]
    fn identical_params_with_identical_grads_stay_identical() {
        let cfg = TrainConfig::default();
        let mut p1 = [0.7];
        let mut m1 = [0.0];
        let mut v1 = [0.0];
        let mut p2 = [0.7];
        let mut m2 = [0.0];
        let mut v2 = [0.0];
        for t in 1..=5 {
            adamw_update(&mut p1, &[0.3], &mut m1, &mut v1, t, 0.01, &cfg);
            adamw_update(&mut p2, &[0.3], &mut m2, &mut v2, t, 0.01, &cfg);
        }
        assert_eq!(p1, p2);
    }

    #[test]
    fn training_decreases_the_loss() {
        let (corpus, split) = tiny_data(30, 1);
        let setup = tiny_setup(LossWeights::default(), 6, 1);
        let out = train_loop(&corpus, &split, &setup).unwrap();
        let first = &out.log[0];
        let last = out.log.iter().rev().find(|r| r.split == "train").unwrap();
        assert!(
            last.l_total < first.l_total,
            "{} -> {}",
            first.l_total,
            last.l_total
        );
    }

    #[test]
    fn same_seed_gives_bit_identical_logs() {
        let (corpus, split) = tiny_data(20, 2);
        let setup = tiny_setup(LossWeights::default(), 3, 2);
        let a = train_loop(&corpus, &split, &setup).unwrap();
        let b = train_loop(&corpus, &split, &setup).unwrap();
        assert_eq!(loss_log_csv(&a.log), loss_log_csv(&b.log));
        for ((_, ta), (_, tb)) in a
            .model
            .named_tensors()
            .into_iter()
            .zip(b.model.named_tensors())
        {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn report_only_training_ignores_aggregation_strategy() {
        // with lambda_refine = 0 the refine head is never built, so the
        // aggregation strategy cannot influence the trained weights
        let (corpus, split) = tiny_data(16, 3);
        let weights = LossWeights {
            lambda_report: 1.0,
            lambda_refine: 0.0,
        };
        let mut s1 = tiny_setup(weights, 2, 3);
        s1.strategy = AggregationStrategy::AttentionWeighted;
        let mut s2 = tiny_setup(weights, 2, 3);
        s2.strategy = AggregationStrategy::MaxNormPool;
        let a = train_loop(&corpus, &split, &s1).unwrap();
        let b = train_loop(&corpus, &split, &s2).unwrap();
        for ((_, ta), (_, tb)) in a
            .model
            .named_tensors()
            .into_iter()
            .zip(b.model.named_tensors())
        {
            assert_eq!(ta.data, tb.data);
        }
        assert!(a.log.iter().all(|r| r.l_refine == 0.0));
    }

    #[test]
    fn zero_lr_with_zero_decay_keeps_parameters() {
        let (corpus, split) = tiny_data(12, 4);
        let mut setup = tiny_setup(LossWeights::default(), 1, 4);
        setup.train.lr = f64::MIN_POSITIVE; // validate() rejects exact zero
        setup.train.weight_decay = 0.0;
        let out = train_loop(&corpus, &split, &setup).unwrap();
        let fresh = ModelState::init(setup.model.clone(), out.model.vocab.clone(), 4).unwrap();
        for ((_, ta), (_, tb)) in out
            .model
            .named_tensors()
            .into_iter()
            .zip(fresh.named_tensors())
        {
            let max_delta = ta
                .data
                .iter()
                .zip(&tb.data)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_delta < 1e-12, "parameters moved by {max_delta}");
        }
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let setup = tiny_setup(LossWeights::default(), 1, 5);
        let empty_split = Split {
            train: vec![],
            val: vec![],
            test: vec![],
        };
        assert!(train_loop(&[], &empty_split, &setup).is_err());
    }

    #[test]
    fn total_loss_gradient_is_linear_combination() {
        // grads of (0.3 CE + 0.7 refine) == 0.3 * grads(CE) + 0.7 * grads(refine)
        let (corpus, _) = tiny_data(4, 6);
        let vocab = build_vocab(&corpus);
        let setup = tiny_setup(LossWeights::default(), 1, 6);
        let model = ModelState::init(setup.model.clone(), vocab, 6).unwrap();
        let prepared = prepare_example(&corpus[0], &model.vocab);

        let grads_for = |wr: f64, wf: f64| -> Vec<Vec<f64>> {
            let mut s = tiny_setup(
                LossWeights {
                    lambda_report: wr,
                    lambda_refine: wf,
                },
                1,
                6,
            );
            s.gumbel.noise_enabled = false;
            let r = run_sample(&model, &s, &prepared, 0, false, 1, true).unwrap();
            r.grads.into_iter().map(|g| g.unwrap_or_default()).collect()
        };

        let combined = grads_for(0.3, 0.7);
        let report_only = grads_for(1.0, 0.0);
        let refine_only = grads_for(0.0, 1.0);
        for ((c, r), f) in combined.iter().zip(&report_only).zip(&refine_only) {
            for i in 0..c.len() {
                let expected = 0.3 * r[i] + 0.7 * f[i];
                assert!(
                    (c[i] - expected).abs() < 1e-12,
                    "{} vs {expected}",
                    c[i]
                );
            }
        }
    }
}
