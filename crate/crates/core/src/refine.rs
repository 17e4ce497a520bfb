//! The self-refining head: differentiable reconstruction of generated-token
//! embeddings via Gumbel-Softmax, aggregation into a single text
//! representation, and the alignment loss against the pooled image
//! representation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::SpanMap;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct GumbelConfig {
    pub tau: f64,
    pub noise_enabled: bool,
    pub rng_seed: u64,
}

impl Default for GumbelConfig {
    fn default() -> Self {
        GumbelConfig {
            tau: 0.5,
            noise_enabled: true,
            rng_seed: 0,
        }
    }
}

/// How the reconstructed token embeddings are collapsed into `h_t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationStrategy {
    AttentionWeighted,
    MeanPool,
    MaxNormPool,
    TopKAttention { k: usize },
}

impl AggregationStrategy {
    pub fn label(&self) -> String {
        match self {
            AggregationStrategy::AttentionWeighted => "attention".into(),
            AggregationStrategy::MeanPool => "mean".into(),
            AggregationStrategy::MaxNormPool => "max_norm".into(),
            AggregationStrategy::TopKAttention { k } => format!("top{k}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityMode {
    /// Raw dot product; the formulation of the refine loss.
    Dot,
    /// Cosine similarity; bounded, for runs where raw dot products saturate
    /// the exponential.
    Cosine,
}

impl Default for SimilarityMode {
    fn default() -> Self {
        SimilarityMode::Dot
    }
}

/// Draw standard Gumbel noise `g = -ln(-ln(u))`, `u ~ Uniform(0,1)`.
pub fn sample_gumbel(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let mut u: f64 = rng.gen();
            while u == 0.0 {
                u = rng.gen();
            }
            -(-u.ln()).ln()
        })
        .collect()
}

/// Gumbel-Softmax over each logit row: `softmax((log_softmax(l) + g) / tau)`.
///
/// The per-row log-normalization shifts a row uniformly, which the outer
/// softmax cancels, so this is computed as `softmax((l + g) / tau)`. With
/// noise disabled `g` is zero; at `tau = 1` that reduces to the plain softmax
/// of the logits, bit for bit.
pub fn gumbel_softmax_with(
    tape: &mut Tape,
    logits: Var,
    noise: Option<&[f64]>,
    tau: f64,
) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::domain("gumbel_softmax", format!("tau must be > 0, got {tau}")));
    }
    let shifted = match noise {
        Some(g) => {
            let gv = tape.constant(tape.shape(logits).to_vec(), g.to_vec())?;
            tape.add(logits, gv)?
        }
        None => logits,
    };
    let scaled = tape.scale(shifted, 1.0 / tau);
    tape.softmax(scaled)
}

/// Gumbel-Softmax with noise drawn from `rng` when the config enables it.
pub fn gumbel_softmax(
    tape: &mut Tape,
    logits: Var,
    cfg: &GumbelConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let noise = if cfg.noise_enabled {
        Some(sample_gumbel(tape.value(logits).len(), rng))
    } else {
        None
    };
    gumbel_softmax_with(tape, logits, noise.as_deref(), cfg.tau)
}

/// Reconstruct per-position token embeddings as weights times the embedding
/// matrix: `[T, d] x [d, d_t] -> [T, d_t]`.
pub fn reconstruct_embeddings(tape: &mut Tape, weights: Var, embed: Var) -> Result<Var> {
    tape.matmul(weights, embed)
}

/// Mean attention mass each generated position receives, averaged over heads
/// and span queries and restricted to span keys. Not yet normalized.
fn span_attention_mass(tape: &mut Tape, attn: &[Var], span: &SpanMap) -> Result<Var> {
    let (q0, q1) = (span.gen_start(), span.gen_end());
    let mut acc: Option<Var> = None;
    for &head in attn {
        let rows = tape.slice_rows(head, q0, q1)?;
        let block = tape.slice_cols(rows, q0, q1)?;
        let per_key = tape.mean_rows(block)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, per_key)?,
            None => per_key,
        });
    }
    let total = acc.ok_or_else(|| Error::invalid("aggregate", "no attention heads"))?;
    Ok(tape.scale(total, 1.0 / attn.len() as f64))
}

/// Collapse `[S, d_t]` reconstructed embeddings into a single `[d_t]` vector.
pub fn aggregate(
    tape: &mut Tape,
    embeds: Var,
    attn: &[Var],
    span: &SpanMap,
    strategy: AggregationStrategy,
) -> Result<Var> {
    let shape = tape.shape(embeds).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::invalid("aggregate", format!("bad embeds shape {shape:?}")));
    }
    let s = shape[0];
    let d_t = shape[1];
    if s != span.gen_len() {
        return Err(Error::ShapeMismatch {
            op: "aggregate",
            lhs: shape,
            rhs: vec![span.gen_len(), d_t],
        });
    }

    match strategy {
        AggregationStrategy::MeanPool => tape.mean_rows(embeds),

        AggregationStrategy::AttentionWeighted => {
            let mass = span_attention_mass(tape, attn, span)?;
            let total = tape.sum(mass);
            let inv = tape.recip(total)?;
            let weights = tape.mul_scalar(mass, inv)?;
            let row = tape.reshape(weights, vec![1, s])?;
            let out = tape.matmul(row, embeds)?;
            tape.reshape(out, vec![d_t])
        }

        AggregationStrategy::MaxNormPool => {
            let data = tape.value(embeds);
            let mut best = 0;
            let mut best_norm = f64::NEG_INFINITY;
            for i in 0..s {
                let row = &data[i * d_t..(i + 1) * d_t];
                let norm: f64 = row.iter().map(|&x| x * x).sum();
                if norm > best_norm {
                    best_norm = norm;
                    best = i;
                }
            }
            let row = tape.slice_rows(embeds, best, best + 1)?;
            tape.reshape(row, vec![d_t])
        }

        AggregationStrategy::TopKAttention { k } => {
            let k = k.max(1).min(s);
            let mass = span_attention_mass(tape, attn, span)?;
            let w = tape.value(mass).to_vec();
            let mut order: Vec<usize> = (0..s).collect();
            order.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
            let mut chosen = order[..k].to_vec();
            chosen.sort_unstable();
            let rows = tape.lookup(embeds, &chosen)?;
            tape.mean_rows(rows)
        }
    }
}

/// Mean over the batch of `exp(-sim(h, e))`.
pub fn refine_loss(
    tape: &mut Tape,
    pairs: &[(Var, Var)],
    mode: SimilarityMode,
) -> Result<Var> {
    if pairs.is_empty() {
        return Err(Error::invalid("refine_loss", "empty batch"));
    }
    let mut acc: Option<Var> = None;
    for &(h, e) in pairs {
        let sim = similarity(tape, h, e, mode)?;
        let neg = tape.scale(sim, -1.0);
        let term = tape.exp(neg)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, term)?,
            None => term,
        });
    }
    Ok(tape.scale(acc.unwrap(), 1.0 / pairs.len() as f64))
}

fn similarity(tape: &mut Tape, h: Var, e: Var, mode: SimilarityMode) -> Result<Var> {
    if tape.shape(h) != tape.shape(e) {
        return Err(Error::ShapeMismatch {
            op: "refine_loss",
            lhs: tape.shape(h).to_vec(),
            rhs: tape.shape(e).to_vec(),
        });
    }
    let prod = tape.mul(h, e)?;
    let dot = tape.sum(prod);
    match mode {
        SimilarityMode::Dot => Ok(dot),
        SimilarityMode::Cosine => {
            let hh = tape.mul(h, h)?;
            let hs = tape.sum(hh);
            let hn = tape.sqrt(hs)?;
            let ee = tape.mul(e, e)?;
            let es = tape.sum(ee);
            let en = tape.sqrt(es)?;
            let denom = tape.mul(hn, en)?;
            let inv = tape.recip(denom)?;
            tape.mul(dot, inv)
        }
    }
}
