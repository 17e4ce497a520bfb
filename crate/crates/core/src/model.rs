//! Full model assembly: encoder, mapper, and decoder parameters plus the
//! end-to-end forward pass used for both training and generation.
//!
//! One training forward produces, on a single tape: the report cross-entropy,
//! the pooled-and-mapped image representation `e_v`, and the forward record
//! (logits, last-layer attention, span) the refine head consumes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{prompt_ids, tokenize, Example};
use crate::decoder::{
    self, beam_search, embed_tokens, report_loss, DecoderConfig, DecoderParams, ForwardRecord,
    GenerationOutput, SpanMap, Vocabulary,
};
use crate::error::{Error, Result};
use crate::mapper::{map_patches, map_pooled, MapperConfig, MapperParams};
use crate::refine::{aggregate, gumbel_softmax, AggregationStrategy, GumbelConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::vision::{encode, image_to_patches, pool, EncoderConfig, EncoderParams, ImageSample};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields, default)]
pub struct ImageShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for ImageShape {
    fn default() -> Self {
        ImageShape {
            height: 16,
            width: 16,
            channels: 1,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub image: ImageShape,
    pub encoder: EncoderConfig,
    pub mapper: MapperConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.mapper.validate()?;
        self.decoder.validate()?;
        let p = self.encoder.patch_size;
        if self.image.height % p != 0 || self.image.width % p != 0 {
            return Err(Error::Config(format!(
                "image {}x{} not divisible by patch size {p}",
                self.image.height, self.image.width
            )));
        }
        if self.mapper.d_v != self.encoder.d_v {
            return Err(Error::Config(format!(
                "mapper d_v {} != encoder d_v {}",
                self.mapper.d_v, self.encoder.d_v
            )));
        }
        if self.mapper.d_t != self.decoder.d_t {
            return Err(Error::Config(format!(
                "mapper d_t {} != decoder d_t {}",
                self.mapper.d_t, self.decoder.d_t
            )));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        (self.image.height / self.encoder.patch_size) * (self.image.width / self.encoder.patch_size)
    }

    pub fn patch_dim(&self) -> usize {
        self.image.channels * self.encoder.patch_size * self.encoder.patch_size
    }
}

/// All learnable parameters plus the configs and vocabulary they assume.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub encoder: EncoderParams<Tensor>,
    pub mapper: MapperParams<Tensor>,
    pub decoder: DecoderParams<Tensor>,
}

/// The same parameters bound onto a tape for one forward pass.
pub struct BoundModel {
    pub encoder: EncoderParams<Var>,
    pub mapper: MapperParams<Var>,
    pub decoder: DecoderParams<Var>,
}

impl BoundModel {
    /// Bound vars in the same order as `ModelState::named_tensors`.
    pub fn named_vars(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        self.encoder.visit("encoder", &mut |name, &v| out.push((name, v)));
        self.mapper.visit("mapper", &mut |name, &v| out.push((name, v)));
        self.decoder.visit("decoder", &mut |name, &v| out.push((name, v)));
        out
    }
}

impl ModelState {
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut encoder = EncoderParams::init(
            &config.encoder,
            config.patch_dim(),
            config.patch_count(),
            &mut rng,
        );
        if config.encoder.freeze {
            encoder.visit_mut("encoder", &mut |_, t: &mut Tensor| {
                t.requires_grad = false;
            });
        }
        let mapper = MapperParams::init(&config.mapper, &mut rng);
        let decoder = DecoderParams::init(&config.decoder, vocab.size(), &mut rng);
        Ok(ModelState {
            config,
            vocab,
            encoder,
            mapper,
            decoder,
        })
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.encoder.visit("encoder", &mut |name, t| out.push((name, t)));
        self.mapper.visit("mapper", &mut |name, t| out.push((name, t)));
        self.decoder.visit("decoder", &mut |name, t| out.push((name, t)));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.encoder
            .visit_mut("encoder", &mut |name, t: &mut Tensor| out.push((name, t)));
        self.mapper
            .visit_mut("mapper", &mut |name, t: &mut Tensor| out.push((name, t)));
        self.decoder
            .visit_mut("decoder", &mut |name, t: &mut Tensor| out.push((name, t)));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            encoder: self.encoder.map(&mut |t| tape.leaf(t)),
            mapper: self.mapper.map(&mut |t| tape.leaf(t)),
            decoder: self.decoder.map(&mut |t| tape.leaf(t)),
        }
    }

    pub fn prompt(&self) -> Vec<usize> {
        prompt_ids(&self.vocab)
    }
}

/// A tokenized training sample.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub pixels: Tensor,
    /// `[BOS, prompt..., report words...]` fed to the decoder.
    pub input_tokens: Vec<usize>,
    /// `[report words..., EOS]`, one per predictive position.
    pub targets: Vec<usize>,
    pub prompt_len: usize,
}

pub fn prepare_example(example: &Example, vocab: &Vocabulary) -> PreparedExample {
    let prompt = prompt_ids(vocab);
    let report = tokenize(&example.report, vocab);
    let ids = report.ids();
    let words = &ids[1..ids.len() - 1];
    let mut input_tokens = prompt.clone();
    input_tokens.extend_from_slice(words);
    let mut targets = words.to_vec();
    targets.push(decoder::EOS);
    PreparedExample {
        pixels: Tensor {
            shape: vec![example.image.pixels.len()],
            data: example.image.pixels.clone(),
            requires_grad: false,
            grad: None,
        },
        input_tokens,
        targets,
        prompt_len: prompt.len(),
    }
}

/// Outputs of one teacher-forced forward pass.
pub struct ExampleForward {
    pub record: ForwardRecord,
    /// Mapped pooled image representation, `[d_t]`.
    pub e_v: Var,
    /// Scalar report cross-entropy for this sample.
    pub report_ce: Var,
}

/// Run the whole pipeline for one sample on the given tape.
pub fn forward_example(
    tape: &mut Tape,
    bound: &BoundModel,
    config: &ModelConfig,
    prepared: &PreparedExample,
) -> Result<ExampleForward> {
    let img_leaf = tape.leaf(&prepared.pixels);
    let patches = image_to_patches(
        tape,
        img_leaf,
        config.image.height,
        config.image.width,
        config.image.channels,
        config.encoder.patch_size,
    )?;
    let patch_embeds = encode(tape, patches, &config.encoder, &bound.encoder)?;
    let pooled = pool(tape, patch_embeds)?;
    let e_v = map_pooled(tape, pooled, &config.mapper, &bound.mapper)?;
    let mapped_patches = map_patches(tape, patch_embeds, &config.mapper, &bound.mapper)?;

    let tok = embed_tokens(tape, &prepared.input_tokens, &bound.decoder)?;
    let input = tape.concat_rows(mapped_patches, tok)?;
    let span = SpanMap {
        image_len: config.patch_count(),
        prompt_len: prepared.prompt_len,
        token_len: prepared.input_tokens.len(),
    };
    let record = decoder::forward(tape, input, span, &config.decoder, &bound.decoder)?;
    let report_ce = report_loss(tape, record.logits, &prepared.targets)?;
    Ok(ExampleForward {
        record,
        e_v,
        report_ce,
    })
}

/// Build `h_t` for one sample: Gumbel-Softmax over the teacher-forced logits,
/// embedding reconstruction, then aggregation.
pub fn refine_representation(
    tape: &mut Tape,
    bound: &BoundModel,
    fwd: &ExampleForward,
    gumbel: &GumbelConfig,
    rng: &mut ChaCha8Rng,
    strategy: AggregationStrategy,
) -> Result<Var> {
    let weights = gumbel_softmax(tape, fwd.record.logits, gumbel, rng)?;
    let embeds = tape.matmul(weights, bound.decoder.embed)?;
    aggregate(tape, embeds, &fwd.record.last_attn, &fwd.record.span, strategy)
}

/// Value-only pass computing the mapped image embeddings `[k, d_t]` that
/// condition generation.
pub fn image_embeddings(state: &ModelState, image: &ImageSample) -> Result<Tensor> {
    let expected = (state.config.image.height, state.config.image.width, state.config.image.channels);
    if (image.height, image.width, image.channels) != expected {
        return Err(Error::invalid(
            "image_embeddings",
            format!(
                "image {}x{}x{} does not match model {}x{}x{}",
                image.height, image.width, image.channels, expected.0, expected.1, expected.2
            ),
        ));
    }
    let mut tape = Tape::new();
    let bound = state.bind(&mut tape);
    let leaf = tape.constant(vec![image.pixels.len()], image.pixels.clone())?;
    let patches = image_to_patches(
        &mut tape,
        leaf,
        image.height,
        image.width,
        image.channels,
        state.config.encoder.patch_size,
    )?;
    let patch_embeds = encode(&mut tape, patches, &state.config.encoder, &bound.encoder)?;
    let mapped = map_patches(&mut tape, patch_embeds, &state.config.mapper, &bound.mapper)?;
    Ok(tape.to_tensor(mapped))
}

/// Generate a report for an image with beam search.
pub fn generate(
    state: &ModelState,
    image: &ImageSample,
    beam_width: usize,
    max_len: usize,
) -> Result<GenerationOutput> {
    let embeds = image_embeddings(state, image)?;
    let prompt = state.prompt();
    beam_search(
        &state.config.decoder,
        &state.decoder,
        &embeds,
        &prompt,
        beam_width,
        max_len,
    )
}
