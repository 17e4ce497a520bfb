//! Decoder-only causal language model: token embedding, causal transformer
//! forward with last-layer attention capture, the report cross-entropy loss,
//! and beam-search decoding.
//!
//! The input sequence is `[mapped image embeddings; token embeddings]`; image
//! positions participate in the causal mask as an ordinary prefix. The output
//! head is weight-tied to the embedding matrix.

use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{causal_mask, stack_forward, StackParams};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Token inventory with fixed reserved ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Build from word types in first-occurrence order, after the reserved ids.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().cloned().zip(0..).collect();
        for text in texts {
            for word in text.split_whitespace() {
                if !index.contains_key(word) {
                    index.insert(word.to_string(), tokens.len());
                    tokens.push(word.to_string());
                }
            }
        }
        Vocabulary { tokens, index }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    /// Id of a word, or `UNK` for out-of-vocabulary words.
    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuild from a stored token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len()
            || RESERVED.iter().zip(&tokens).any(|(a, b)| a != b)
        {
            return Err(Error::invalid(
                "vocabulary",
                "token list must start with the reserved tokens",
            ));
        }
        let index = tokens.iter().cloned().zip(0..).collect();
        Ok(Vocabulary { tokens, index })
    }
}

/// A validated id sequence: ids in range, at most one EOS, nothing after it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(Error::invalid(
                "token_sequence",
                format!("id {bad} out of range for vocabulary of {vocab_size}"),
            ));
        }
        if let Some(pos) = ids.iter().position(|&i| i == EOS) {
            if pos + 1 != ids.len() {
                return Err(Error::invalid(
                    "token_sequence",
                    "tokens found after EOS",
                ));
            }
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub d_t: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub max_seq_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_t: 48,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            max_seq_len: 64,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("decoder: layers must be >= 1".into()));
        }
        if self.heads == 0 || self.d_t % self.heads != 0 {
            return Err(Error::Config(format!(
                "decoder: d_t {} not divisible by heads {}",
                self.d_t, self.heads
            )));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_t * self.mlp_ratio
    }
}

/// Decoder weights. The embedding matrix doubles as the output head.
#[derive(Debug, Clone)]
pub struct DecoderParams<T> {
    pub embed: T,
    pub pos: T,
    pub stack: StackParams<T>,
}

impl<T> DecoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> DecoderParams<U> {
        DecoderParams {
            embed: f(&self.embed),
            pos: f(&self.pos),
            stack: self.stack.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.embed"), &self.embed);
        f(format!("{prefix}.pos"), &self.pos);
        self.stack.visit(&format!("{prefix}.stack"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.embed"), &mut self.embed);
        f(format!("{prefix}.pos"), &mut self.pos);
        self.stack.visit_mut(&format!("{prefix}.stack"), f);
    }
}

impl DecoderParams<Tensor> {
    pub fn init(cfg: &DecoderConfig, vocab_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (cfg.d_t as f64).sqrt();
        DecoderParams {
            embed: Tensor::uniform(vec![vocab_size, cfg.d_t], scale, rng).with_grad(),
            pos: Tensor::uniform(vec![cfg.max_seq_len, cfg.d_t], 0.02, rng).with_grad(),
            stack: StackParams::init(cfg.layers, cfg.d_t, cfg.mlp_hidden(), rng),
        }
    }
}

/// Where the image, prompt, and report tokens sit in the input sequence.
///
/// Tokens occupy positions `image_len..image_len + token_len`; the prompt is
/// the first `prompt_len` of them. Logits are emitted for the positions that
/// predict report tokens: the last prompt position through the last token
/// position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanMap {
    pub image_len: usize,
    pub prompt_len: usize,
    pub token_len: usize,
}

impl SpanMap {
    pub fn total_len(&self) -> usize {
        self.image_len + self.token_len
    }

    /// First input position whose output predicts a report token.
    pub fn gen_start(&self) -> usize {
        self.image_len + self.prompt_len - 1
    }

    /// One past the last predictive position.
    pub fn gen_end(&self) -> usize {
        self.image_len + self.token_len
    }

    /// Number of predicted report tokens (report words plus EOS).
    pub fn gen_len(&self) -> usize {
        self.token_len - self.prompt_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 || self.token_len < self.prompt_len {
            return Err(Error::invalid(
                "span_map",
                format!("prompt {} tokens {}", self.prompt_len, self.token_len),
            ));
        }
        Ok(())
    }
}

/// Everything the refine head consumes from one forward pass.
pub struct ForwardRecord {
    /// `[gen_len, d]` next-token logits for the predictive positions.
    pub logits: Var,
    /// Last decoder layer's attention, one `[L, L]` tensor per head.
    pub last_attn: Vec<Var>,
    pub span: SpanMap,
}

/// Embed a token sequence: `E[ids[i]]` plus the learned positional embedding
/// for sequence position `i`.
pub fn embed_tokens(tape: &mut Tape, ids: &[usize], params: &DecoderParams<Var>) -> Result<Var> {
    let tok = tape.lookup(params.embed, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let max_pos = tape.shape(params.pos)[0];
    if ids.len() > max_pos {
        return Err(Error::invalid(
            "embed_tokens",
            format!("{} tokens exceed positional table of {max_pos}", ids.len()),
        ));
    }
    let pos = tape.lookup(params.pos, &positions)?;
    tape.add(tok, pos)
}

/// Causal forward over the concatenated `[image; tokens]` embedding sequence.
pub fn forward(
    tape: &mut Tape,
    input_embeds: Var,
    span: SpanMap,
    cfg: &DecoderConfig,
    params: &DecoderParams<Var>,
) -> Result<ForwardRecord> {
    span.validate()?;
    let len = tape.shape(input_embeds)[0];
    if len != span.total_len() {
        return Err(Error::ShapeMismatch {
            op: "decoder_forward",
            lhs: tape.shape(input_embeds).to_vec(),
            rhs: vec![span.total_len(), cfg.d_t],
        });
    }
    if len > cfg.max_seq_len {
        return Err(Error::invalid(
            "decoder_forward",
            format!("sequence length {len} exceeds max_seq_len {}", cfg.max_seq_len),
        ));
    }
    let mask = causal_mask(len);
    let (hidden, last_attn) = stack_forward(tape, input_embeds, &params.stack, cfg.heads, Some(&mask))?;
    let gen_hidden = tape.slice_rows(hidden, span.gen_start(), span.gen_end())?;
    let head = tape.transpose(params.embed)?;
    let logits = tape.matmul(gen_hidden, head)?;
    Ok(ForwardRecord {
        logits,
        last_attn,
        span,
    })
}

/// Mean cross-entropy of the logits against the target ids, skipping PAD
/// targets.
pub fn report_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<Var> {
    let rows = tape.shape(logits)[0];
    if rows != targets.len() {
        return Err(Error::invalid(
            "report_loss",
            format!("{rows} logit rows vs {} targets", targets.len()),
        ));
    }
    let keep: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != PAD).collect();
    if keep.is_empty() {
        return Err(Error::invalid("report_loss", "all targets are PAD"));
    }
    if keep.len() == targets.len() {
        return tape.cross_entropy(logits, targets);
    }
    let kept_targets: Vec<usize> = keep.iter().map(|&i| targets[i]).collect();
    let kept_logits = tape.lookup(logits, &keep)?;
    tape.cross_entropy(kept_logits, &kept_targets)
}

// ── Beam search ─────────────────────────────────────────────────────────

/// A decoded report: generated ids (EOS included when reached), the summed
/// log-probability of the generated tokens, and the last-layer attention over
/// the generated span (`[heads, S, S]`).
#[derive(Debug, Clone)]
pub struct GenerationOutput {
    pub ids: TokenSequence,
    pub score: f64,
    pub attn: Tensor,
}

#[derive(Debug, Clone)]
struct Beam {
    ids: Vec<usize>,
    log_prob: f64,
    finished: bool,
}

impl Beam {
    fn normalized(&self) -> f64 {
        if self.ids.is_empty() {
            0.0
        } else {
            self.log_prob / self.ids.len() as f64
        }
    }
}

fn rank(a: &Beam, b: &Beam) -> std::cmp::Ordering {
    b.normalized()
        .total_cmp(&a.normalized())
        .then_with(|| a.ids.cmp(&b.ids))
}

fn log_probs_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

/// One value-only decoder pass returning the next-token log-probabilities at
/// the final position.
fn next_log_probs(
    cfg: &DecoderConfig,
    params: &DecoderParams<Tensor>,
    image_embeds: &Tensor,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let bound = params.map(&mut |t| tape.leaf(t));
    let img = tape.leaf(image_embeds);
    let tok = embed_tokens(&mut tape, tokens, &bound)?;
    let input = tape.concat_rows(img, tok)?;
    let span = SpanMap {
        image_len: image_embeds.shape[0],
        prompt_len: tokens.len(),
        token_len: tokens.len(),
    };
    let record = forward(&mut tape, input, span, cfg, &bound)?;
    Ok(log_probs_row(tape.value(record.logits)))
}

/// Length-normalized beam search from a prompt, conditioned on mapped image
/// embeddings. Ties break toward the lexicographically smaller id sequence,
/// so decoding is fully deterministic. Stops each beam at EOS or `max_len`
/// generated tokens.
pub fn beam_search(
    cfg: &DecoderConfig,
    params: &DecoderParams<Tensor>,
    image_embeds: &Tensor,
    prompt: &[usize],
    beam_width: usize,
    max_len: usize,
) -> Result<GenerationOutput> {
    if beam_width < 1 {
        return Err(Error::invalid("beam_search", "beam_width must be >= 1"));
    }
    let k = image_embeds.shape[0];
    let budget = cfg
        .max_seq_len
        .saturating_sub(k + prompt.len())
        .min(max_len);
    if budget == 0 {
        return Err(Error::invalid(
            "beam_search",
            "no room to generate: prompt plus image reach max_seq_len",
        ));
    }

    let mut beams = vec![Beam {
        ids: Vec::new(),
        log_prob: 0.0,
        finished: false,
    }];

    for _ in 0..budget {
        if beams.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &beams {
            if beam.finished {
                candidates.push(beam.clone());
                continue;
            }
            let mut tokens = prompt.to_vec();
            tokens.extend_from_slice(&beam.ids);
            let lps = next_log_probs(cfg, params, image_embeds, &tokens)?;
            for (tok, &lp) in lps.iter().enumerate() {
                let mut ids = beam.ids.clone();
                ids.push(tok);
                candidates.push(Beam {
                    ids,
                    log_prob: beam.log_prob + lp,
                    finished: tok == EOS,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(beam_width);
        beams = candidates;
    }

    beams.sort_by(rank);
    let best = beams.into_iter().next().expect("beam set never empty");

    // Final pass over the chosen sequence to expose its attention record.
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(&best.ids);
    let mut tape = Tape::new();
    let bound = params.map(&mut |t| tape.leaf(t));
    let img = tape.leaf(image_embeds);
    let tok = embed_tokens(&mut tape, &tokens, &bound)?;
    let input = tape.concat_rows(img, tok)?;
    let span = SpanMap {
        image_len: k,
        prompt_len: prompt.len(),
        token_len: tokens.len(),
    };
    let record = forward(&mut tape, input, span, cfg, &bound)?;
    let s0 = k + prompt.len();
    let s1 = s0 + best.ids.len();
    let heads = record.last_attn.len();
    let span_w = s1 - s0;
    let mut attn_data = Vec::with_capacity(heads * span_w * span_w);
    for &head in &record.last_attn {
        let sliced = tape.slice_rows(head, s0, s1)?;
        let sliced = tape.slice_cols(sliced, s0, s1)?;
        attn_data.extend_from_slice(tape.value(sliced));
    }
    let attn = Tensor::new(vec![heads, span_w, span_w], attn_data)?;

    let vocab_size = params.embed.shape[0];
    Ok(GenerationOutput {
        ids: TokenSequence::new(best.ids, vocab_size)?,
        score: best.log_prob,
        attn,
    })
}

/// Greedy decoding; identical to `beam_search` with width 1 and used by its
/// equivalence test.
pub fn greedy_decode(
    cfg: &DecoderConfig,
    params: &DecoderParams<Tensor>,
    image_embeds: &Tensor,
    prompt: &[usize],
    max_len: usize,
) -> Result<Vec<usize>> {
    let k = image_embeds.shape[0];
    let budget = cfg
        .max_seq_len
        .saturating_sub(k + prompt.len())
        .min(max_len);
    let mut generated: Vec<usize> = Vec::new();
    for _ in 0..budget {
        let mut tokens = prompt.to_vec();
        tokens.extend_from_slice(&generated);
        let lps = next_log_probs(cfg, params, image_embeds, &tokens)?;
        // argmax with ties to the lower id
        let mut best = 0;
        for (i, &lp) in lps.iter().enumerate() {
            if lp > lps[best] {
                best = i;
            }
        }
        generated.push(best);
        if best == EOS {
            break;
        }
    }
    Ok(generated)
}
