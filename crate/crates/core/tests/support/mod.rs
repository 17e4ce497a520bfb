//! An independent scalar-loop re-implementation of the encoder and decoder
//! forward passes, used as the second route for golden-value tests. Written
//! against the architecture definition directly: nested `Vec` matrices and
//! explicit loops, no tape.

use serpent_core::decoder::{DecoderConfig, DecoderParams, SpanMap};
use serpent_core::tensor::Tensor;
use serpent_core::transformer::{BlockParams, StackParams};
use serpent_core::vision::{EncoderConfig, EncoderParams};

pub type Mat = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Mat {
    let (m, n) = (t.shape[0], t.shape[1]);
    (0..m).map(|i| t.data[i * n..(i + 1) * n].to_vec()).collect()
}

fn matvec_rows(x: &Mat, w: &Mat) -> Mat {
    // y[i][j] = sum_k x[i][k] * w[k][j]
    let n = w[0].len();
    x.iter()
        .map(|row| {
            let mut out = vec![0.0; n];
            for (k, &xv) in row.iter().enumerate() {
                for j in 0..n {
                    out[j] += xv * w[k][j];
                }
            }
            out
        })
        .collect()
}

fn layer_norm(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    let eps = 1e-5;
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, &v)| (v - mean) * inv * gain[j] + bias[j])
                .collect()
        })
        .collect()
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn attention(x: &Mat, block: &BlockParams<Tensor>, heads: usize, causal: bool) -> Mat {
    let len = x.len();
    let d = x[0].len();
    let dh = d / heads;
    let q = matvec_rows(x, &rows(&block.attn.wq));
    let k = matvec_rows(x, &rows(&block.attn.wk));
    let v = matvec_rows(x, &rows(&block.attn.wv));

    let mut mixed = vec![vec![0.0; d]; len];
    for h in 0..heads {
        let c0 = h * dh;
        for qi in 0..len {
            let mut scores = vec![f64::NEG_INFINITY; len];
            let limit = if causal { qi + 1 } else { len };
            for ki in 0..limit {
                let mut dot = 0.0;
                for c in 0..dh {
                    dot += q[qi][c0 + c] * k[ki][c0 + c];
                }
                scores[ki] = dot / (dh as f64).sqrt();
            }
            softmax_row(&mut scores);
            for (ki, &w) in scores.iter().enumerate() {
                if w != 0.0 {
                    for c in 0..dh {
                        mixed[qi][c0 + c] += w * v[ki][c0 + c];
                    }
                }
            }
        }
    }
    matvec_rows(&mixed, &rows(&block.attn.wo))
}

fn block_forward(x: &Mat, block: &BlockParams<Tensor>, heads: usize, causal: bool) -> Mat {
    let n1 = layer_norm(x, &block.norm1.gain.data, &block.norm1.bias.data);
    let attn_out = attention(&n1, block, heads, causal);
    let x1: Mat = x
        .iter()
        .zip(&attn_out)
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| p + q).collect())
        .collect();

    let n2 = layer_norm(&x1, &block.norm2.gain.data, &block.norm2.bias.data);
    let mut hidden = matvec_rows(&n2, &rows(&block.mlp.w1));
    for row in &mut hidden {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v + block.mlp.b1.data[j]).tanh();
        }
    }
    let mut mlp_out = matvec_rows(&hidden, &rows(&block.mlp.w2));
    for row in &mut mlp_out {
        for (j, v) in row.iter_mut().enumerate() {
            *v += block.mlp.b2.data[j];
        }
    }
    x1.iter()
        .zip(&mlp_out)
        .map(|(a, b)| a.iter().zip(b).map(|(&p, &q)| p + q).collect())
        .collect()
}

fn stack_forward(mut x: Mat, stack: &StackParams<Tensor>, heads: usize, causal: bool) -> Mat {
    for block in &stack.blocks {
        x = block_forward(&x, block, heads, causal);
    }
    layer_norm(&x, &stack.final_norm.gain.data, &stack.final_norm.bias.data)
}

/// Scalar-loop encoder forward over flattened patches.
pub fn encoder_forward(
    patches: &Mat,
    cfg: &EncoderConfig,
    params: &EncoderParams<Tensor>,
) -> Mat {
    let mut x = matvec_rows(patches, &rows(&params.patch_w));
    let pos = rows(&params.pos);
    for (i, row) in x.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += params.patch_b.data[j] + pos[i][j];
        }
    }
    stack_forward(x, &params.stack, cfg.heads, false)
}

/// Scalar-loop decoder forward over `[image; tokens]`; returns the logits of
/// the span's predictive positions.
pub fn decoder_forward(
    image_embeds: &Mat,
    tokens: &[usize],
    cfg: &DecoderConfig,
    params: &DecoderParams<Tensor>,
    span: &SpanMap,
) -> Mat {
    let embed = rows(&params.embed);
    let pos = rows(&params.pos);
    let mut x: Mat = image_embeds.clone();
    for (i, &id) in tokens.iter().enumerate() {
        let row: Vec<f64> = embed[id]
            .iter()
            .zip(&pos[i])
            .map(|(&e, &p)| e + p)
            .collect();
        x.push(row);
    }
    let hidden = stack_forward(x, &params.stack, cfg.heads, true);
    let mut logits = Vec::new();
    for qi in span.gen_start()..span.gen_end() {
        let h = &hidden[qi];
        let row: Vec<f64> = embed
            .iter()
            .map(|e| e.iter().zip(h).map(|(&a, &b)| a * b).sum())
            .collect();
        logits.push(row);
    }
    logits
}

pub fn max_abs_diff(flat: &[f64], mat: &Mat) -> f64 {
    let oracle: Vec<f64> = mat.iter().flatten().copied().collect();
    assert_eq!(flat.len(), oracle.len(), "shape mismatch vs oracle");
    flat.iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}
