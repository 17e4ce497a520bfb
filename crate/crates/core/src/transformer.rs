//! Pre-norm transformer blocks shared by the vision encoder and the decoder.
//!
//! Parameter structs are generic over the value type: `Tensor` for stored
//! weights, [`Var`] once bound to a tape. `map` and the `visit*` methods walk
//! fields in declaration order; checkpointing and optimizer traversal rely on
//! that order being stable.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Fill value for masked attention scores. Large enough that the masked
/// entries underflow to exactly zero after softmax, small enough to stay
/// finite.
pub const MASK_FILL: f64 = -1e30;

#[derive(Debug, Clone)]
pub struct NormParams<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone)]
pub struct AttentionParams<T> {
    pub wq: T,
    pub wk: T,
    pub wv: T,
    pub wo: T,
}

#[derive(Debug, Clone)]
pub struct MlpParams<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone)]
pub struct BlockParams<T> {
    pub norm1: NormParams<T>,
    pub attn: AttentionParams<T>,
    pub norm2: NormParams<T>,
    pub mlp: MlpParams<T>,
}

/// A stack of blocks followed by a final layer norm.
#[derive(Debug, Clone)]
pub struct StackParams<T> {
    pub blocks: Vec<BlockParams<T>>,
    pub final_norm: NormParams<T>,
}

impl<T> NormParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> NormParams<U> {
        NormParams {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.gain"), &self.gain);
        f(format!("{prefix}.bias"), &self.bias);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.gain"), &mut self.gain);
        f(format!("{prefix}.bias"), &mut self.bias);
    }
}

impl<T> AttentionParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> AttentionParams<U> {
        AttentionParams {
            wq: f(&self.wq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            wo: f(&self.wo),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }
}

impl<T> MlpParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MlpParams<U> {
        MlpParams {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }
}

impl<T> BlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> BlockParams<U> {
        BlockParams {
            norm1: self.norm1.map(f),
            attn: self.attn.map(f),
            norm2: self.norm2.map(f),
            mlp: self.mlp.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.attn.visit(&format!("{prefix}.attn"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        self.attn.visit_mut(&format!("{prefix}.attn"), f);
        self.norm2.visit_mut(&format!("{prefix}.norm2"), f);
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
    }
}

impl<T> StackParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> StackParams<U> {
        StackParams {
            blocks: self.blocks.iter().map(|b| b.map(f)).collect(),
            final_norm: self.final_norm.map(f),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("{prefix}.blocks.{i}"), f);
        }
        self.final_norm.visit(&format!("{prefix}.final_norm"), f);
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("{prefix}.blocks.{i}"), f);
        }
        self.final_norm.visit_mut(&format!("{prefix}.final_norm"), f);
    }
}

// ── Initialization ──────────────────────────────────────────────────────

fn linear_init(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = 1.0 / (rows as f64).sqrt();
    Tensor::uniform(vec![rows, cols], scale, rng).with_grad()
}

impl NormParams<Tensor> {
    pub fn init(d: usize) -> Self {
        NormParams {
            gain: Tensor::new(vec![d], vec![1.0; d]).unwrap().with_grad(),
            bias: Tensor::zeros(vec![d]).with_grad(),
        }
    }
}

impl BlockParams<Tensor> {
    pub fn init(d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        BlockParams {
            norm1: NormParams::init(d),
            attn: AttentionParams {
                wq: linear_init(d, d, rng),
                wk: linear_init(d, d, rng),
                wv: linear_init(d, d, rng),
                wo: linear_init(d, d, rng),
            },
            norm2: NormParams::init(d),
            mlp: MlpParams {
                w1: linear_init(d, hidden, rng),
                b1: Tensor::zeros(vec![hidden]).with_grad(),
                w2: linear_init(hidden, d, rng),
                b2: Tensor::zeros(vec![d]).with_grad(),
            },
        }
    }
}

impl StackParams<Tensor> {
    pub fn init(layers: usize, d: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        StackParams {
            blocks: (0..layers).map(|_| BlockParams::init(d, hidden, rng)).collect(),
            final_norm: NormParams::init(d),
        }
    }
}

// ── Forward ─────────────────────────────────────────────────────────────

/// Strictly-upper-triangular mask for causal attention over `len` positions.
pub fn causal_mask(len: usize) -> Vec<bool> {
    let mut mask = vec![false; len * len];
    for q in 0..len {
        for k in (q + 1)..len {
            mask[q * len + k] = true;
        }
    }
    mask
}

fn norm(tape: &mut Tape, x: Var, p: &NormParams<Var>) -> Result<Var> {
    tape.layer_norm(x, p.gain, p.bias, LN_EPS)
}

/// Multi-head self-attention on `[len, d]` input. Returns the mixed output
/// (before the output projection is added to the residual) and the per-head
/// attention weights.
fn attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionParams<Var>,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(x)[1];
    let dh = d / heads;
    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut head_outs = Vec::with_capacity(heads);
    let mut head_attn = Vec::with_capacity(heads);
    for h in 0..heads {
        let (c0, c1) = (h * dh, (h + 1) * dh);
        let qh = tape.slice_cols(q, c0, c1)?;
        let kh = tape.slice_cols(k, c0, c1)?;
        let vh = tape.slice_cols(v, c0, c1)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let scores = match mask {
            Some(m) => tape.masked_fill(scores, m, MASK_FILL)?,
            None => scores,
        };
        let attn = tape.softmax(scores)?;
        head_outs.push(tape.matmul(attn, vh)?);
        head_attn.push(attn);
    }
    let mut mixed = head_outs[0];
    for &o in &head_outs[1..] {
        mixed = tape.concat_cols(mixed, o)?;
    }
    let out = tape.matmul(mixed, p.wo)?;
    Ok((out, head_attn))
}

/// One pre-norm block: `x + attn(ln(x))`, then `x + mlp(ln(x))` with a tanh
/// hidden activation. Returns the block output and its attention weights.
pub fn block_forward(
    tape: &mut Tape,
    x: Var,
    p: &BlockParams<Var>,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let n1 = norm(tape, x, &p.norm1)?;
    let (attn_out, attn_weights) = attention(tape, n1, &p.attn, heads, mask)?;
    let x = tape.add(x, attn_out)?;

    let n2 = norm(tape, x, &p.norm2)?;
    let pre = tape.matmul(n2, p.mlp.w1)?;
    let pre = tape.add_bias(pre, p.mlp.b1)?;
    let act = tape.tanh(pre);
    let mlp_out = tape.matmul(act, p.mlp.w2)?;
    let mlp_out = tape.add_bias(mlp_out, p.mlp.b2)?;
    let x = tape.add(x, mlp_out)?;
    Ok((x, attn_weights))
}

/// Run the full stack and final norm. Returns the normalized output and the
/// attention weights of the last block.
pub fn stack_forward(
    tape: &mut Tape,
    mut x: Var,
    p: &StackParams<Var>,
    heads: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let mut last_attn = Vec::new();
    for block in &p.blocks {
        let (out, attn) = block_forward(tape, x, block, heads, mask)?;
        x = out;
        last_attn = attn;
    }
    let out = norm(tape, x, &p.final_norm)?;
    Ok((out, last_attn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn bind(tape: &mut Tape, p: &StackParams<Tensor>) -> StackParams<Var> {
        p.map(&mut |t| tape.leaf(t))
    }

    #[test]
    fn causal_mask_zeroes_future_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = StackParams::init(2, 8, 16, &mut rng);
        let mut tape = Tape::new();
        let bound = bind(&mut tape, &params);
        let x = Tensor::uniform(vec![5, 8], 1.0, &mut rng);
        let xv = tape.leaf(&x);
        let mask = causal_mask(5);
        let (_, attn) = stack_forward(&mut tape, xv, &bound, 2, Some(&mask)).unwrap();
        for head in attn {
            let w = tape.value(head);
            for q in 0..5 {
                let row_sum: f64 = w[q * 5..(q + 1) * 5].iter().sum();
                assert!((row_sum - 1.0).abs() < 1e-9);
                for k in (q + 1)..5 {
                    assert_eq!(w[q * 5 + k], 0.0, "attn[{q},{k}] must be exactly zero");
                }
            }
        }
    }

    #[test]
    fn causality_later_inputs_do_not_affect_earlier_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = StackParams::init(2, 8, 16, &mut rng);
        let x = Tensor::uniform(vec![4, 8], 1.0, &mut rng);
        let mut perturbed = x.clone();
        for v in &mut perturbed.data[3 * 8..] {
            *v += 0.7;
        }
        let mask = causal_mask(4);

        let run = |input: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params);
            let xv = tape.leaf(input);
            let (out, _) = stack_forward(&mut tape, xv, &bound, 2, Some(&mask)).unwrap();
            tape.value(out).to_vec()
        };

        let a = run(&x);
        let b = run(&perturbed);
        // rows 0..3 identical bit-for-bit, row 3 differs
        assert_eq!(&a[..3 * 8], &b[..3 * 8]);
        assert_ne!(&a[3 * 8..], &b[3 * 8..]);
    }

    #[test]
    fn forward_is_deterministic_across_tapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = StackParams::init(1, 8, 8, &mut rng);
        let x = Tensor::uniform(vec![3, 8], 1.0, &mut rng);
        let run = |input: &Tensor| -> Vec<f64> {
            let mut tape = Tape::new();
            let bound = bind(&mut tape, &params);
            let xv = tape.leaf(input);
            let (out, _) = stack_forward(&mut tape, xv, &bound, 2, None).unwrap();
            tape.value(out).to_vec()
        };
        assert_eq!(run(&x), run(&x));
    }
}
