//! Toy visual and text encoders.
//!
//! Both are small pre-norm transformer stacks built on the tape. The visual
//! encoder prepends a class token, injects a per-sample camera embedding and
//! projects into the cross-modal space; the text encoder embeds abstract
//! template ids around learnable prompt tokens, mean-pools and projects.

pub mod text;
pub mod visual;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{ParamSet, RealArray, StreamRng, Tape, Var};

pub use text::{encode_prompt, init_text_params, text_forward};
pub use visual::{encode_image, encode_tokens, init_visual_params, VisualFeatures};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDims {
    pub input_dim: usize,
    pub visual_dim: usize,
    pub cross_modal_dim: usize,
    pub token_dim: usize,
    pub tokens_per_image: usize,
    pub visual_blocks: usize,
    pub visual_heads: usize,
    pub text_blocks: usize,
    pub vocab_size: usize,
    pub num_cameras: usize,
    /// Learnable positional embeddings on visual tokens.
    pub positional: bool,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            input_dim: 16,
            visual_dim: 64,
            cross_modal_dim: 32,
            token_dim: 32,
            tokens_per_image: 16,
            visual_blocks: 2,
            visual_heads: 2,
            text_blocks: 2,
            vocab_size: 32,
            num_cameras: 4,
            positional: true,
        }
    }
}

pub(crate) const INIT_SIGMA: f64 = 0.02;

pub(crate) fn rand_param(rng: &mut StreamRng, shape: &[usize], sigma: f64) -> RealArray {
    let n: usize = shape.iter().product();
    RealArray::new(shape.to_vec(), rng.normal_vec(n, 0.0, sigma)).expect("init")
}

/// Insert the parameters of one pre-norm attention block under `prefix`.
pub(crate) fn init_block_params(
    set: &mut ParamSet,
    prefix: &str,
    dim: usize,
    rng: &mut StreamRng,
) {
    let hidden = 2 * dim;
    set.insert(format!("{prefix}.ln1.gamma"), RealArray::full(&[dim], 1.0), true);
    set.insert(format!("{prefix}.ln1.beta"), RealArray::zeros(&[dim]), true);
    for name in ["wq", "wk", "wv", "wo"] {
        set.insert(
            format!("{prefix}.attn.{name}"),
            rand_param(rng, &[dim, dim], INIT_SIGMA),
            true,
        );
    }
    set.insert(format!("{prefix}.ln2.gamma"), RealArray::full(&[dim], 1.0), true);
    set.insert(format!("{prefix}.ln2.beta"), RealArray::zeros(&[dim]), true);
    set.insert(
        format!("{prefix}.ff.w1"),
        rand_param(rng, &[dim, hidden], INIT_SIGMA),
        true,
    );
    set.insert(format!("{prefix}.ff.b1"), RealArray::zeros(&[hidden]), true);
    set.insert(
        format!("{prefix}.ff.w2"),
        rand_param(rng, &[hidden, dim], INIT_SIGMA),
        true,
    );
    set.insert(format!("{prefix}.ff.b2"), RealArray::zeros(&[dim]), true);
}

/// Pre-norm block forward: x + MHA(LN(x)), then x + FF(LN(x)).
pub(crate) fn block_forward(
    tape: &Tape,
    set: &ParamSet,
    prefix: &str,
    x: Var,
    dim: usize,
    heads: usize,
) -> Result<Var> {
    assert!(dim % heads == 0, "dim {dim} not divisible by heads {heads}");
    let head_dim = dim / heads;
    let scale = 1.0 / (head_dim as f64).sqrt();

    let g1 = tape.param(set, &format!("{prefix}.ln1.gamma"))?;
    let b1 = tape.param(set, &format!("{prefix}.ln1.beta"))?;
    let normed = tape.layer_norm(x, g1, b1)?;

    let wq = tape.param(set, &format!("{prefix}.attn.wq"))?;
    let wk = tape.param(set, &format!("{prefix}.attn.wk"))?;
    let wv = tape.param(set, &format!("{prefix}.attn.wv"))?;
    let wo = tape.param(set, &format!("{prefix}.attn.wo"))?;
    let q = tape.matmul(normed, wq)?;
    let k = tape.matmul(normed, wk)?;
    let v = tape.matmul(normed, wv)?;

    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * head_dim, head_dim)?;
        let kh = tape.slice_cols(k, h * head_dim, head_dim)?;
        let vh = tape.slice_cols(v, h * head_dim, head_dim)?;
        let scores = tape.scale(tape.matmul(qh, tape.transpose(kh))?, scale);
        let attn = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(attn, vh)?);
    }
    let merged = if heads == 1 {
        head_outs[0]
    } else {
        tape.concat_cols(&head_outs)?
    };
    let attended = tape.matmul(merged, wo)?;
    let x = tape.add(x, attended)?;

    let g2 = tape.param(set, &format!("{prefix}.ln2.gamma"))?;
    let b2 = tape.param(set, &format!("{prefix}.ln2.beta"))?;
    let normed2 = tape.layer_norm(x, g2, b2)?;
    let w1 = tape.param(set, &format!("{prefix}.ff.w1"))?;
    let fb1 = tape.param(set, &format!("{prefix}.ff.b1"))?;
    let w2 = tape.param(set, &format!("{prefix}.ff.w2"))?;
    let fb2 = tape.param(set, &format!("{prefix}.ff.b2"))?;
    let h1 = tape.gelu(tape.add_row_broadcast(tape.matmul(normed2, w1)?, fb1)?);
    let h2 = tape.add_row_broadcast(tape.matmul(h1, w2)?, fb2)?;
    tape.add(x, h2)
}
