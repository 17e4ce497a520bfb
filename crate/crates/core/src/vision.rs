//! Image patching, a small transformer encoder over patches, and pooling to a
//! single global image representation.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::transformer::{stack_forward, StackParams};

/// A single-precision-free image: `height x width x channels` reals in [0, 1],
/// row-major with channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f64>,
}

impl ImageSample {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != height * width * channels {
            return Err(Error::invalid(
                "image",
                format!(
                    "{}x{}x{} image needs {} pixels, got {}",
                    height,
                    width,
                    channels,
                    height * width * channels,
                    pixels.len()
                ),
            ));
        }
        if !pixels.iter().all(|p| p.is_finite()) {
            return Err(Error::invalid("image", "non-finite pixel value"));
        }
        Ok(ImageSample {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn constant(height: usize, width: usize, channels: usize, value: f64) -> Self {
        ImageSample {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    pub fn pixel(&self, y: usize, x: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }
}

/// Configuration of the patch encoder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub patch_size: usize,
    pub d_v: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Exclude encoder weights from optimization (the large-scale regime
    /// uses a pretrained, frozen encoder).
    pub freeze: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            patch_size: 4,
            d_v: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            freeze: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::Config("encoder: layers must be >= 1".into()));
        }
        if self.heads == 0 || self.d_v % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder: d_v {} not divisible by heads {}",
                self.d_v, self.heads
            )));
        }
        if self.patch_size == 0 {
            return Err(Error::Config("encoder: patch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        self.d_v * self.mlp_ratio
    }
}

/// Encoder weights: linear patch projection, learned positional embeddings,
/// and the transformer stack.
#[derive(Debug, Clone)]
pub struct EncoderParams<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub pos: T,
    pub stack: StackParams<T>,
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> EncoderParams<U> {
        EncoderParams {
            patch_w: f(&self.patch_w),
            patch_b: f(&self.patch_b),
            pos: f(&self.pos),
            stack: self.stack.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.patch_w"), &self.patch_w);
        f(format!("{prefix}.patch_b"), &self.patch_b);
        f(format!("{prefix}.pos"), &self.pos);
        self.stack.visit(&format!("{prefix}.stack"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.patch_w"), &mut self.patch_w);
        f(format!("{prefix}.patch_b"), &mut self.patch_b);
        f(format!("{prefix}.pos"), &mut self.pos);
        self.stack.visit_mut(&format!("{prefix}.stack"), f);
    }
}

impl EncoderParams<Tensor> {
    /// `in_dim` is the flattened patch length `C*P*P`; `k` the patch count.
    pub fn init(cfg: &EncoderConfig, in_dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / (in_dim as f64).sqrt();
        EncoderParams {
            patch_w: Tensor::uniform(vec![in_dim, cfg.d_v], scale, rng).with_grad(),
            patch_b: Tensor::zeros(vec![cfg.d_v]).with_grad(),
            pos: Tensor::uniform(vec![k, cfg.d_v], 0.02, rng).with_grad(),
            stack: StackParams::init(cfg.layers, cfg.d_v, cfg.mlp_hidden(), rng),
        }
    }
}

fn check_divisible(img: &ImageSample, p: usize) -> Result<(usize, usize)> {
    if p == 0 || img.height % p != 0 || img.width % p != 0 {
        return Err(Error::invalid(
            "patchify",
            format!(
                "{}x{} image not divisible by patch size {}",
                img.height, img.width, p
            ),
        ));
    }
    Ok((img.height / p, img.width / p))
}

/// Flat pixel indices for each patch, row-major over the patch grid, with
/// channel-major ordering inside a patch (`C*P*P` per patch).
pub fn patch_pixel_indices(h: usize, w: usize, c: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut ids = Vec::with_capacity(h * w * c);
    for gy in 0..gh {
        for gx in 0..gw {
            for ch in 0..c {
                for py in 0..p {
                    for px in 0..p {
                        let y = gy * p + py;
                        let x = gx * p + px;
                        ids.push((y * w + x) * c + ch);
                    }
                }
            }
        }
    }
    ids
}

/// Split an image into `k = (H/P)*(W/P)` flattened patch vectors.
pub fn patchify(img: &ImageSample, p: usize) -> Result<Vec<Vec<f64>>> {
    check_divisible(img, p)?;
    let ids = patch_pixel_indices(img.height, img.width, img.channels, p);
    let plen = img.channels * p * p;
    Ok(ids
        .chunks(plen)
        .map(|chunk| chunk.iter().map(|&i| img.pixels[i]).collect())
        .collect())
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &[Vec<f64>],
    height: usize,
    width: usize,
    channels: usize,
    p: usize,
) -> Result<ImageSample> {
    let plen = channels * p * p;
    let expected = (height / p) * (width / p);
    if patches.len() != expected || patches.iter().any(|v| v.len() != plen) {
        return Err(Error::invalid(
            "unpatchify",
            format!("expected {expected} patches of length {plen}"),
        ));
    }
    let ids = patch_pixel_indices(height, width, channels, p);
    let mut pixels = vec![0.0; height * width * channels];
    let flat = patches.iter().flatten();
    for (&dst, &v) in ids.iter().zip(flat) {
        pixels[dst] = v;
    }
    ImageSample::new(height, width, channels, pixels)
}

/// Gather a flat image leaf (`[H*W*C]`) into a `[k, C*P*P]` patch matrix on
/// the tape, so gradients can reach the pixels.
pub fn image_to_patches(
    tape: &mut Tape,
    img: Var,
    height: usize,
    width: usize,
    channels: usize,
    p: usize,
) -> Result<Var> {
    let n = height * width * channels;
    let col = tape.reshape(img, vec![n, 1])?;
    let ids = patch_pixel_indices(height, width, channels, p);
    let gathered = tape.lookup(col, &ids)?;
    let k = (height / p) * (width / p);
    tape.reshape(gathered, vec![k, channels * p * p])
}

/// Encode a `[k, C*P*P]` patch matrix into `[k, d_v]` contextual patch
/// embeddings: linear projection, learned positions, then the block stack.
pub fn encode(
    tape: &mut Tape,
    patches: Var,
    cfg: &EncoderConfig,
    params: &EncoderParams<Var>,
) -> Result<Var> {
    let proj = tape.matmul(patches, params.patch_w)?;
    let proj = tape.add_bias(proj, params.patch_b)?;
    let x = tape.add(proj, params.pos)?;
    let (out, _) = stack_forward(tape, x, &params.stack, cfg.heads, None)?;
    Ok(out)
}

/// Mean over patch rows: `[k, d_v] -> [d_v]`.
pub fn pool(tape: &mut Tape, patch_embeddings: Var) -> Result<Var> {
    tape.mean_rows(patch_embeddings)
}
