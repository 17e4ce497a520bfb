//! Metrics over generated reports (BLEU-1..4, ROUGE-L, embedding similarity,
//! hallucination rate), Gaussian image noise, and the ablation and
//! noise-robustness harnesses.
//!
//! Metric inputs are content token ids: specials stripped, UNK kept. The
//! embedding-similarity metric is a BERTScore-style greedy matching over the
//! model's own frozen embedding rows; it stands in for a pretrained scorer
//! and is never comparable across models with different embeddings.

use std::collections::{BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{detokenize, parse_findings, tokenize, Example, Finding, Split};
use crate::decoder::{TokenSequence, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{generate, ModelState};
use crate::refine::AggregationStrategy;
use crate::tensor::Tensor;
use crate::train::{train_loop, LossWeights, TrainSetup};
use crate::vision::ImageSample;

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub emb_sim: f64,
    pub hallucination_rate: f64,
    pub corpus_size: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    /// Variance of the additive noise.
    pub sigma2: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec { sigma2: 0.0, seed: 0 }
    }
}

/// Strip PAD/BOS/EOS, keeping content words (UNK included).
pub fn content_ids(seq: &TokenSequence) -> Vec<usize> {
    seq.ids()
        .iter()
        .copied()
        .filter(|&id| id != PAD && id != BOS && id != EOS)
        .collect()
}

// ── BLEU ────────────────────────────────────────────────────────────────

fn ngram_counts(ids: &[usize], m: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if ids.len() >= m {
        for gram in ids.windows(m) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus-level BLEU-n: geometric mean of clipped m-gram precisions for
/// m = 1..n with uniform weights, times the brevity penalty
/// `exp(min(0, 1 - ref_len / cand_len))`. Any zero precision gives 0.
pub fn bleu_n(candidates: &[Vec<usize>], references: &[Vec<usize>], n: usize) -> Result<f64> {
    if candidates.is_empty() {
        return Err(Error::invalid("bleu_n", "empty corpus"));
    }
    if candidates.len() != references.len() {
        return Err(Error::invalid(
            "bleu_n",
            format!("{} candidates vs {} references", candidates.len(), references.len()),
        ));
    }
    if !(1..=4).contains(&n) {
        return Err(Error::invalid("bleu_n", format!("order {n} not in 1..=4")));
    }

    let cand_len: usize = candidates.iter().map(|c| c.len()).sum();
    let ref_len: usize = references.iter().map(|r| r.len()).sum();
    if cand_len == 0 {
        return Ok(0.0);
    }

    let mut log_precision_sum = 0.0;
    for m in 1..=n {
        let mut clipped = 0usize;
        let mut total = 0usize;
        for (cand, reference) in candidates.iter().zip(references) {
            let cc = ngram_counts(cand, m);
            let rc = ngram_counts(reference, m);
            for (gram, &count) in &cc {
                total += count;
                clipped += count.min(rc.get(gram).copied().unwrap_or(0));
            }
        }
        if clipped == 0 || total == 0 {
            return Ok(0.0);
        }
        log_precision_sum += (clipped as f64 / total as f64).ln();
    }

    let brevity = (1.0 - ref_len as f64 / cand_len as f64).min(0.0).exp();
    Ok(brevity * (log_precision_sum / n as f64).exp())
}

// ── ROUGE-L ─────────────────────────────────────────────────────────────

fn lcs_len(a: &[usize], b: &[usize]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for &x in a {
        for (j, &y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F-score for one pair: `P = LCS/|cand|`, `R = LCS/|ref|`,
/// `F = (1 + beta^2) P R / (R + beta^2 P)`.
pub fn rouge_l_pair(candidate: &[usize], reference: &[usize], beta: f64) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid("rouge_l", "empty reference"));
    }
    if candidate.is_empty() {
        return Ok(0.0);
    }
    let lcs = lcs_len(candidate, reference) as f64;
    let p = lcs / candidate.len() as f64;
    let r = lcs / reference.len() as f64;
    let denom = r + beta * beta * p;
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok((1.0 + beta * beta) * p * r / denom)
}

/// Corpus ROUGE-L: mean pair score at beta = 1.
pub fn rouge_l(candidates: &[Vec<usize>], references: &[Vec<usize>]) -> Result<f64> {
    if candidates.is_empty() || candidates.len() != references.len() {
        return Err(Error::invalid("rouge_l", "empty or mismatched corpus"));
    }
    let mut sum = 0.0;
    for (c, r) in candidates.iter().zip(references) {
        sum += rouge_l_pair(c, r, 1.0)?;
    }
    Ok(sum / candidates.len() as f64)
}

// ── Embedding similarity ────────────────────────────────────────────────

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x * y).sum();
    let na: f64 = a.iter().map(|&x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Greedy-matching F1 of mean-max cosine similarities between candidate and
/// reference token embeddings, clamped to [0, 1].
pub fn emb_sim(candidate: &[usize], reference: &[usize], embed: &Tensor) -> Result<f64> {
    if candidate.is_empty() || reference.is_empty() {
        return Err(Error::invalid("emb_sim", "empty sequence"));
    }
    let d = embed.shape[1];
    let row = |id: usize| &embed.data[id * d..(id + 1) * d];
    let mut precision = 0.0;
    for &c in candidate {
        let best = reference
            .iter()
            .map(|&r| cosine(row(c), row(r)))
            .fold(f64::NEG_INFINITY, f64::max);
        precision += best;
    }
    precision /= candidate.len() as f64;
    let mut recall = 0.0;
    for &r in reference {
        let best = candidate
            .iter()
            .map(|&c| cosine(row(c), row(r)))
            .fold(f64::NEG_INFINITY, f64::max);
        recall += best;
    }
    recall /= reference.len() as f64;
    if precision + recall <= 0.0 {
        return Ok(0.0);
    }
    Ok((2.0 * precision * recall / (precision + recall)).clamp(0.0, 1.0))
}

// ── Hallucination ───────────────────────────────────────────────────────

/// Fraction of generated findings absent from the ground truth:
/// `|generated \ truth| / max(1, |generated|)`.
pub fn hallucination_rate(generated: &BTreeSet<Finding>, truth: &BTreeSet<Finding>) -> f64 {
    let wrong = generated.difference(truth).count();
    wrong as f64 / generated.len().max(1) as f64
}

// ── Gaussian noise ──────────────────────────────────────────────────────

/// Draw the additive noise field (pre-clamp values).
pub fn gaussian_noise_field(n: usize, spec: &NoiseSpec) -> Vec<f64> {
    if spec.sigma2 == 0.0 {
        return vec![0.0; n];
    }
    let normal = Normal::new(0.0, spec.sigma2.sqrt()).expect("nonnegative std dev");
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

/// Add seeded i.i.d. Gaussian noise to each pixel, clamping to [0, 1].
/// Variance zero returns the image unchanged.
pub fn add_gaussian_noise(img: &ImageSample, spec: &NoiseSpec) -> ImageSample {
    if spec.sigma2 == 0.0 {
        return img.clone();
    }
    let field = gaussian_noise_field(img.pixels.len(), spec);
    let pixels = img
        .pixels
        .iter()
        .zip(&field)
        .map(|(&p, &g)| (p + g).clamp(0.0, 1.0))
        .collect();
    ImageSample {
        height: img.height,
        width: img.width,
        channels: img.channels,
        pixels,
    }
}

// ── Corpus evaluation ───────────────────────────────────────────────────

/// Generated reports for the given corpus indices, in order.
pub fn generate_corpus_reports(
    model: &ModelState,
    corpus: &[Example],
    indices: &[usize],
    beam_width: usize,
    max_len: usize,
    noise: Option<&NoiseSpec>,
) -> Result<Vec<TokenSequence>> {
    indices
        .par_iter()
        .map(|&i| {
            let image = match noise {
                Some(spec) => {
                    let per_image = NoiseSpec {
                        sigma2: spec.sigma2,
                        seed: spec.seed.wrapping_add(i as u64),
                    };
                    add_gaussian_noise(&corpus[i].image, &per_image)
                }
                None => corpus[i].image.clone(),
            };
            Ok(generate(model, &image, beam_width, max_len)?.ids)
        })
        .collect()
}

/// Score candidate sequences against the references of the given corpus
/// indices. Empty candidates score zero on the pairwise metrics.
pub fn score_candidates(
    model: &ModelState,
    corpus: &[Example],
    indices: &[usize],
    candidates: &[TokenSequence],
) -> Result<MetricReport> {
    if indices.is_empty() || indices.len() != candidates.len() {
        return Err(Error::invalid("score_candidates", "empty or mismatched corpus"));
    }
    let cand_ids: Vec<Vec<usize>> = candidates.iter().map(content_ids).collect();
    let ref_ids: Vec<Vec<usize>> = indices
        .iter()
        .map(|&i| content_ids(&tokenize(&corpus[i].report, &model.vocab)))
        .collect();

    let mut sim_sum = 0.0;
    let mut hall_sum = 0.0;
    for ((cand, reference), &i) in cand_ids.iter().zip(&ref_ids).zip(indices) {
        if !cand.is_empty() {
            sim_sum += emb_sim(cand, reference, &model.decoder.embed)?;
        }
        let text = detokenize(
            &TokenSequence::new(cand.clone(), model.vocab.size())?,
            &model.vocab,
        );
        hall_sum += hallucination_rate(&parse_findings(&text), &corpus[i].findings);
    }
    let n = indices.len() as f64;

    Ok(MetricReport {
        bleu1: bleu_n(&cand_ids, &ref_ids, 1)?,
        bleu2: bleu_n(&cand_ids, &ref_ids, 2)?,
        bleu3: bleu_n(&cand_ids, &ref_ids, 3)?,
        bleu4: bleu_n(&cand_ids, &ref_ids, 4)?,
        rouge_l: rouge_l(&cand_ids, &ref_ids)?,
        emb_sim: sim_sum / n,
        hallucination_rate: hall_sum / n,
        corpus_size: indices.len(),
    })
}

/// Generate with beam search on (optionally noisy) images and score.
pub fn evaluate_model(
    model: &ModelState,
    corpus: &[Example],
    indices: &[usize],
    beam_width: usize,
    max_len: usize,
    noise: Option<&NoiseSpec>,
) -> Result<MetricReport> {
    let candidates = generate_corpus_reports(model, corpus, indices, beam_width, max_len, noise)?;
    score_candidates(model, corpus, indices, &candidates)
}

// ── Harnesses ───────────────────────────────────────────────────────────

/// The five loss-weight rows of the weighting ablation.
pub fn lambda_grid() -> Vec<LossWeights> {
    [(0.0, 1.0), (0.3, 0.7), (0.5, 0.5), (0.7, 0.3), (1.0, 0.0)]
        .into_iter()
        .map(|(lambda_report, lambda_refine)| LossWeights {
            lambda_report,
            lambda_refine,
        })
        .collect()
}

/// All four aggregation strategies, attention-based first.
pub fn aggregation_grid() -> Vec<AggregationStrategy> {
    vec![
        AggregationStrategy::AttentionWeighted,
        AggregationStrategy::MeanPool,
        AggregationStrategy::MaxNormPool,
        AggregationStrategy::TopKAttention { k: 5 },
    ]
}

/// Train one model per loss-weight row (shared seed) and evaluate each on the
/// test split.
pub fn run_lambda_ablation(
    corpus: &[Example],
    split: &Split,
    base: &TrainSetup,
    grid: &[LossWeights],
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<(String, MetricReport)>> {
    if grid.is_empty() {
        return Err(Error::invalid("run_lambda_ablation", "empty grid"));
    }
    let mut rows = Vec::new();
    for weights in grid {
        let setup = TrainSetup {
            weights: *weights,
            ..base.clone()
        };
        let outcome = train_loop(corpus, split, &setup)?;
        let report = evaluate_model(&outcome.model, corpus, &split.test, beam_width, max_len, None)?;
        rows.push((weights.label(), report));
    }
    Ok(rows)
}

/// Train one model per aggregation strategy (shared seed) and evaluate each.
pub fn run_aggregation_ablation(
    corpus: &[Example],
    split: &Split,
    base: &TrainSetup,
    strategies: &[AggregationStrategy],
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<(String, MetricReport)>> {
    if strategies.is_empty() {
        return Err(Error::invalid("run_aggregation_ablation", "empty strategy list"));
    }
    let mut rows = Vec::new();
    for &strategy in strategies {
        let setup = TrainSetup {
            strategy,
            ..base.clone()
        };
        let outcome = train_loop(corpus, split, &setup)?;
        let report = evaluate_model(&outcome.model, corpus, &split.test, beam_width, max_len, None)?;
        rows.push((strategy.label(), report));
    }
    Ok(rows)
}

/// Evaluate two trained models across noise variances. Variances must be
/// sorted ascending and include 0.
pub fn run_noise_sweep(
    models: &[(String, &ModelState)],
    corpus: &[Example],
    indices: &[usize],
    variances: &[f64],
    noise_seed: u64,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<(String, MetricReport)>> {
    if variances.is_empty() || variances[0] != 0.0 {
        return Err(Error::invalid("run_noise_sweep", "variances must start at 0"));
    }
    if variances.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(
            "run_noise_sweep",
            "variances must be strictly ascending",
        ));
    }
    let mut rows = Vec::new();
    for &sigma2 in variances {
        for (label, model) in models {
            let spec = NoiseSpec {
                sigma2,
                seed: noise_seed,
            };
            let report = evaluate_model(model, corpus, indices, beam_width, max_len, Some(&spec))?;
            rows.push((format!("{label}@{sigma2}"), report));
        }
    }
    Ok(rows)
}

/// CSV rendering shared by the ablation and noise harnesses.
pub fn metrics_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out =
        String::from("config,bleu1,bleu2,bleu3,bleu4,rouge_l,emb_sim,hallucination_rate\n");
    for (config, m) in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            config, m.bleu1, m.bleu2, m.bleu3, m.bleu4, m.rouge_l, m.emb_sim, m.hallucination_rate
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(words: &[&str]) -> Vec<usize> {
        // toy id assignment for metric tests: each distinct word gets an id
        let mut map = HashMap::new();
        let mut out = Vec::new();
        for &w in words {
            let next = map.len() + 4;
            out.push(*map.entry(w).or_insert(next));
        }
        out
    }

    #[test]
    fn bleu_identity_is_one() {
        let c = vec![ids(&["a", "b", "c", "d"])];
        for n in 1..=4 {
            assert!((bleu_n(&c, &c, n).unwrap() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bleu_brevity_penalty_hand_example() {
        // candidate "the cat" vs reference "the cat sat"
        let cand = vec![vec![10, 11]];
        let reference = vec![vec![10, 11, 12]];
        let b1 = bleu_n(&cand, &reference, 1).unwrap();
        assert!((b1 - (-0.5f64).exp()).abs() < 1e-9);
        assert!((b1 - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn bleu_empty_candidate_is_zero() {
        let cand = vec![vec![]];
        let reference = vec![vec![10, 11]];
        assert_eq!(bleu_n(&cand, &reference, 1).unwrap(), 0.0);
    }

    #[test]
    fn bleu_empty_corpus_is_an_error() {
        assert!(bleu_n(&[], &[], 1).is_err());
    }

    #[test]
    fn bleu_is_order_invariant() {
        let c = vec![ids(&["a", "b"]), ids(&["c", "d", "e"])];
        let r = vec![ids(&["a", "x"]), ids(&["c", "d", "y"])];
        let swapped_c = vec![c[1].clone(), c[0].clone()];
        let swapped_r = vec![r[1].clone(), r[0].clone()];
        for n in 1..=2 {
            assert_eq!(
                bleu_n(&c, &r, n).unwrap(),
                bleu_n(&swapped_c, &swapped_r, n).unwrap()
            );
        }
    }

    #[test]
    fn rouge_identity_is_one() {
        let s = ids(&["a", "b", "c"]);
        assert!((rouge_l_pair(&s, &s, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rouge_hand_example() {
        // cand "a b d", ref "a c b d": LCS 3, P 1, R 3/4, F1 6/7
        let cand = vec![4, 5, 6];
        let reference = vec![4, 7, 5, 6];
        let f = rouge_l_pair(&cand, &reference, 1.0).unwrap();
        assert!((f - 6.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn rouge_disjoint_is_zero() {
        assert_eq!(rouge_l_pair(&[4, 5], &[6, 7], 1.0).unwrap(), 0.0);
    }

    #[test]
    fn rouge_empty_reference_is_an_error() {
        assert!(rouge_l_pair(&[4], &[], 1.0).is_err());
    }

    #[test]
    fn emb_sim_identity_and_orthogonal() {
        let embed = Tensor::new(
            vec![6, 2],
            vec![
                0.0, 0.0, // pad
                0.0, 0.0, // bos
                0.0, 0.0, // eos
                0.0, 0.0, // unk
                1.0, 0.0, // word 4
                0.0, 1.0, // word 5
            ],
        )
        .unwrap();
        assert!((emb_sim(&[4, 5], &[4, 5], &embed).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(emb_sim(&[4], &[5], &embed).unwrap(), 0.0);
        assert!(emb_sim(&[], &[4], &embed).is_err());
    }

    #[test]
    fn emb_sim_matches_hand_computed_greedy_value() {
        // two tokens with embeddings (1,0) and (0.6,0.8): cos = 0.6
        let embed = Tensor::new(
            vec![6, 2],
            vec![
                0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, //
                1.0, 0.0, //
                0.6, 0.8,
            ],
        )
        .unwrap();
        // candidate [4,5] vs reference [4]:
        // precision = (cos(4,4) + cos(5,4))/2 = (1 + 0.6)/2 = 0.8
        // recall = max over candidates = 1
        // F1 = 2*0.8*1/(1.8) = 8/9
        let f = emb_sim(&[4, 5], &[4], &embed).unwrap();
        assert!((f - 8.0 / 9.0).abs() < 1e-12);
    }

    #[test]
    fn hallucination_edge_cases() {
        use crate::data::{FindingType, Quadrant};
        let a: BTreeSet<Finding> = [(FindingType::Disk, Quadrant::UpperLeft)].into();
        let b: BTreeSet<Finding> = [
            (FindingType::Disk, Quadrant::UpperLeft),
            (FindingType::VerticalBar, Quadrant::LowerRight),
        ]
        .into();
        let empty = BTreeSet::new();
        assert_eq!(hallucination_rate(&a, &b), 0.0); // generated subset of truth
        assert_eq!(hallucination_rate(&b, &empty), 1.0); // all wrong
        assert_eq!(hallucination_rate(&b, &a), 0.5); // 1 of 2 wrong
        assert_eq!(hallucination_rate(&empty, &a), 0.0); // nothing generated
        assert_eq!(hallucination_rate(&a, &a), 0.0);
    }

    #[test]
    fn zero_variance_noise_is_identity() {
        let img = ImageSample::constant(8, 8, 1, 0.5);
        let spec = NoiseSpec { sigma2: 0.0, seed: 1 };
        assert_eq!(add_gaussian_noise(&img, &spec), img);
    }

    #[test]
    fn noise_is_seed_deterministic() {
        let img = ImageSample::constant(8, 8, 1, 0.5);
        let spec = NoiseSpec { sigma2: 0.1, seed: 2 };
        assert_eq!(add_gaussian_noise(&img, &spec), add_gaussian_noise(&img, &spec));
        let other = NoiseSpec { sigma2: 0.1, seed: 3 };
        assert_ne!(add_gaussian_noise(&img, &spec), add_gaussian_noise(&img, &other));
    }

    #[test]
    fn noise_field_statistics_match_spec() {
        // sigma^2 = 0.09 over 16x16 pixels, pre-clamp
        let spec = NoiseSpec { sigma2: 0.09, seed: 4 };
        let field = gaussian_noise_field(256, &spec);
        let shifted: Vec<f64> = field.iter().map(|g| 0.5 + g).collect();
        let mean = shifted.iter().sum::<f64>() / 256.0;
        let var = shifted.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 256.0;
        assert!((mean - 0.5).abs() < 0.01, "sample mean {mean}");
        assert!((var - 0.09).abs() < 0.15 * 0.09, "sample variance {var}");
    }

    #[test]
    fn noise_sweep_rejects_bad_variance_lists() {
        let err = run_noise_sweep(&[], &[], &[], &[0.1, 0.2], 0, 1, 4).unwrap_err();
        assert!(err.to_string().contains("start at 0"), "{err}");
        let err = run_noise_sweep(&[], &[], &[], &[0.0, 0.2, 0.1], 0, 1, 4).unwrap_err();
        assert!(err.to_string().contains("ascending"), "{err}");
    }

    #[test]
    fn lambda_grid_matches_the_five_rows() {
        let grid = lambda_grid();
        let expected = [(0.0, 1.0), (0.3, 0.7), (0.5, 0.5), (0.7, 0.3), (1.0, 0.0)];
        assert_eq!(grid.len(), 5);
        for (w, (r, f)) in grid.iter().zip(expected) {
            assert_eq!((w.lambda_report, w.lambda_refine), (r, f));
        }
    }

    #[test]
    fn metrics_csv_has_the_contract_header() {
        let rows = vec![(
            "demo".to_string(),
            MetricReport {
                bleu1: 1.0,
                bleu2: 1.0,
                bleu3: 1.0,
                bleu4: 1.0,
                rouge_l: 1.0,
                emb_sim: 1.0,
                hallucination_rate: 0.0,
                corpus_size: 3,
            },
        )];
        let csv = metrics_csv(&rows);
        assert!(csv.starts_with(
            "config,bleu1,bleu2,bleu3,bleu4,rouge_l,emb_sim,hallucination_rate\n"
        ));
        assert!(csv.contains("demo,1,1,1,1,1,1,0"));
    }
}
