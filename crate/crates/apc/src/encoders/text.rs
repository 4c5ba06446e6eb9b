//! Text encoder over abstract token ids, with a slot for learnable prompt
//! tokens. Frozen after the pretraining stage; stays differentiable with
//! respect to its inputs.

use crate::encoders::{block_forward, init_block_params, rand_param, EncoderDims, INIT_SIGMA};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, StreamRng, Tape, Var};

pub fn init_text_params(set: &mut ParamSet, dims: &EncoderDims, rng: &mut StreamRng) {
    set.insert(
        "text.vocab",
        rand_param(rng, &[dims.vocab_size, dims.token_dim], INIT_SIGMA),
        true,
    );
    for b in 0..dims.text_blocks {
        init_block_params(set, &format!("text.block{b}"), dims.token_dim, rng);
    }
    set.insert(
        "text.pool.w",
        rand_param(rng, &[dims.token_dim, dims.cross_modal_dim], INIT_SIGMA),
        true,
    );
}

/// Encode a sequence of `prefix ++ learnable ++ suffix` into a unit-norm
/// cross-modal vector `[D_c]`. `learnable` is an `[L x D_tok]` taped matrix;
/// pass `None` for pure template sequences.
pub fn text_forward(
    tape: &Tape,
    set: &ParamSet,
    dims: &EncoderDims,
    prefix_ids: &[usize],
    learnable: Option<Var>,
    suffix_ids: &[usize],
) -> Result<Var> {
    for &id in prefix_ids.iter().chain(suffix_ids) {
        if id >= dims.vocab_size {
            return Err(Error::OutOfRange {
                what: "token id",
                value: id,
                bound: dims.vocab_size,
            });
        }
    }
    let vocab = tape.param(set, "text.vocab")?;
    let mut parts = Vec::new();
    if !prefix_ids.is_empty() {
        parts.push(tape.select_rows(vocab, prefix_ids)?);
    }
    if let Some(l) = learnable {
        parts.push(l);
    }
    if !suffix_ids.is_empty() {
        parts.push(tape.select_rows(vocab, suffix_ids)?);
    }
    if parts.is_empty() {
        return Err(Error::Contract("text_forward needs a nonempty sequence".into()));
    }
    let mut x = if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(&parts)?
    };
    for b in 0..dims.text_blocks {
        x = block_forward(tape, set, &format!("text.block{b}"), x, dims.token_dim, 1)?;
    }
    let seq_len = tape.shape(x)[0];
    let pooled = tape.scale(tape.sum_axis0(x), 1.0 / seq_len as f64);
    let pool_w = tape.param(set, "text.pool.w")?;
    let pooled_row = tape.reshape(pooled, vec![1, dims.token_dim])?;
    let g = tape.row(tape.matmul(pooled_row, pool_w)?, 0)?;
    tape.l2_normalize(g)
}

/// One attribute prompt: fixed template around `[L x D_tok]` learnable tokens.
pub fn encode_prompt(
    tape: &Tape,
    set: &ParamSet,
    dims: &EncoderDims,
    template_prefix: &[usize],
    learnable_tokens: Var,
    template_suffix: &[usize],
) -> Result<Var> {
    let shape = tape.shape(learnable_tokens);
    if shape.len() != 2 || shape[0] < 1 || shape[1] != dims.token_dim {
        return Err(Error::BadShape {
            op: "encode_prompt",
            expected: format!("[L x {}] with L >= 1", dims.token_dim),
            got: shape,
        });
    }
    text_forward(tape, set, dims, template_prefix, Some(learnable_tokens), template_suffix)
}
