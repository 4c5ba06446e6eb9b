//! Attribute prompt generator: the learnable attribute dictionary, the
//! orthogonality regularizer, hard Top-K relevance gating and the two-stage
//! composition of selected prompts with visual tokens.

use serde::{Deserialize, Serialize};

use crate::encoders::{encode_prompt, rand_param, EncoderDims, INIT_SIGMA};
use crate::error::{Error, Result};
use crate::numerics::{ParamSet, RealArray, StreamRng, Tape, Var};

/// Abstract template ids realizing "A photo of a ... person/vehicle.".
pub const TEMPLATE_PREFIX: [usize; 4] = [0, 1, 2, 3];
pub const TEMPLATE_SUFFIX: [usize; 2] = [4, 5];

/// First vocabulary id available for planted-attribute caption tokens.
pub const CAPTION_ID_BASE: usize = TEMPLATE_PREFIX.len() + TEMPLATE_SUFFIX.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeDictionary {
    /// Number of attributes (S).
    pub attribute_count: usize,
    /// Learnable tokens per attribute (L).
    pub tokens_per_attribute: usize,
    pub template_prefix: Vec<usize>,
    pub template_suffix: Vec<usize>,
}

impl AttributeDictionary {
    pub fn new(attribute_count: usize, tokens_per_attribute: usize) -> Result<Self> {
        if attribute_count < 2 {
            return Err(Error::Validation {
                field: "attribute_count".into(),
                message: "must be >= 2".into(),
            });
        }
        if tokens_per_attribute < 1 {
            return Err(Error::Validation {
                field: "tokens_per_attribute".into(),
                message: "must be >= 1".into(),
            });
        }
        Ok(AttributeDictionary {
            attribute_count,
            tokens_per_attribute,
            template_prefix: TEMPLATE_PREFIX.to_vec(),
            template_suffix: TEMPLATE_SUFFIX.to_vec(),
        })
    }
}

/// Install the dictionary's token table as `sad.tokens`, `[S x L*D_tok]`.
pub fn init_sad_params(
    set: &mut ParamSet,
    dict: &AttributeDictionary,
    dims: &EncoderDims,
    rng: &mut StreamRng,
) {
    set.insert(
        "sad.tokens",
        rand_param(
            rng,
            &[dict.attribute_count, dict.tokens_per_attribute * dims.token_dim],
            INIT_SIGMA,
        ),
        true,
    );
}

/// Attribute prompt embeddings: one unit-norm row per attribute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSet {
    /// `[S x D_c]`, rows unit-norm.
    pub prompts: RealArray,
    /// Training step at which these prompts were generated.
    pub step: u64,
}

/// Run every dictionary entry through the (possibly frozen) text encoder.
/// Returns the stacked `[S x D_c]` prompt matrix as a taped variable;
/// gradients flow into `sad.tokens` and, if unfrozen, the text weights.
pub fn compute_prompts(
    tape: &Tape,
    sad_set: &ParamSet,
    text_set: &ParamSet,
    dims: &EncoderDims,
    dict: &AttributeDictionary,
) -> Result<Var> {
    let table = tape.param(sad_set, "sad.tokens")?;
    let l = dict.tokens_per_attribute;
    let mut rows = Vec::with_capacity(dict.attribute_count);
    for s in 0..dict.attribute_count {
        let flat = tape.select_rows(table, &[s])?;
        let tokens = tape.reshape(flat, vec![l, dims.token_dim])?;
        let g = encode_prompt(
            tape,
            text_set,
            dims,
            &dict.template_prefix,
            tokens,
            &dict.template_suffix,
        )?;
        rows.push(g);
    }
    tape.stack_rows(&rows)
}

/// Plain-value prompt computation for evaluation and probes.
pub fn compute_prompt_set(
    sad_set: &ParamSet,
    text_set: &ParamSet,
    dims: &EncoderDims,
    dict: &AttributeDictionary,
    step: u64,
) -> Result<PromptSet> {
    let tape = Tape::new();
    let prompts = compute_prompts(&tape, sad_set, text_set, dims, dict)?;
    Ok(PromptSet {
        prompts: tape.value(prompts),
        step,
    })
}

/// Sum of absolute off-diagonal cosine similarities. `prompts` rows must be
/// unit-norm (they are, coming out of the text encoder), so the Gram matrix
/// is exactly the cosine matrix and the diagonal drops out of the loss.
pub fn orthogonality_loss(tape: &Tape, prompts: Var) -> Result<Var> {
    let shape = tape.shape(prompts);
    if shape.len() != 2 || shape[0] < 2 {
        return Err(Error::BadShape {
            op: "orthogonality_loss",
            expected: "[S x D_c] with S >= 2".into(),
            got: shape,
        });
    }
    let s = shape[0];
    let gram = tape.matmul(prompts, tape.transpose(prompts))?;
    let mut mask = RealArray::full(&[s, s], 1.0);
    for i in 0..s {
        mask.data_mut()[i * s + i] = 0.0;
    }
    let off_diag = tape.mul(gram, tape.constant(mask))?;
    Ok(tape.sum(tape.abs(off_diag)))
}

/// Hard Top-K gate: indices of the K prompts most cosine-similar to `r`,
/// ordered by descending similarity, ties broken toward the lower index.
/// Gradients flow through the selected prompt values, not the ranking.
pub fn select_topk(tape: &Tape, r: Var, prompts: Var, k: usize) -> Result<(Vec<usize>, Var)> {
    let shape = tape.shape(prompts);
    let s = shape[0];
    if k < 1 || k > s {
        return Err(Error::OutOfRange {
            what: "top-k",
            value: k,
            bound: s + 1,
        });
    }
    let sims = prompt_similarities(&tape.value(r), &tape.value(prompts));
    let order = rank_descending(&sims);
    let indices: Vec<usize> = order[..k].to_vec();
    let selected = tape.select_rows(prompts, &indices)?;
    Ok((indices, selected))
}

/// Cosine similarity of `r` against each unit-norm prompt row.
pub fn prompt_similarities(r: &RealArray, prompts: &RealArray) -> Vec<f64> {
    let norm = r.norm2().max(1e-12);
    (0..prompts.rows())
        .map(|j| {
            let row = prompts.row_slice(j);
            let dot: f64 = row.iter().zip(r.data()).map(|(a, b)| a * b).sum();
            dot / norm
        })
        .collect()
}

/// Indices sorted by descending value; equal values keep index order.
pub fn rank_descending(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .partial_cmp(&values[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PcmSource {
    /// Stage-1 keys/values read the projected sequence `[T x D_c]`.
    Projected,
    /// Stage-1 keys/values read the raw visual sequence `[T x D_v]`.
    Raw,
}

impl PcmSource {
    pub fn dim(&self, dims: &EncoderDims) -> usize {
        match self {
            PcmSource::Projected => dims.cross_modal_dim,
            PcmSource::Raw => dims.visual_dim,
        }
    }
}

pub fn init_pcm_params(
    set: &mut ParamSet,
    dims: &EncoderDims,
    pcm_dim: usize,
    source: PcmSource,
    rng: &mut StreamRng,
) {
    let dc = dims.cross_modal_dim;
    let src = source.dim(dims);
    set.insert("pcm.q1", rand_param(rng, &[dc, pcm_dim], INIT_SIGMA), true);
    set.insert("pcm.k1", rand_param(rng, &[src, pcm_dim], INIT_SIGMA), true);
    set.insert("pcm.v1", rand_param(rng, &[src, dc], INIT_SIGMA), true);
    set.insert("pcm.q2", rand_param(rng, &[dc, pcm_dim], INIT_SIGMA), true);
    set.insert("pcm.k2", rand_param(rng, &[dc, pcm_dim], INIT_SIGMA), true);
    set.insert("pcm.v2", rand_param(rng, &[dc, dc], INIT_SIGMA), true);
}

/// Attention weights observed during composition, for instrumentation.
#[derive(Clone, Debug)]
pub struct PcmTrace {
    /// Stage-1 weights `[K x (N+1)]`, rows sum to 1.
    pub stage1: RealArray,
    /// Stage-2 weights `[1 x K]`.
    pub stage2: RealArray,
}

/// Two-stage single-head composition with residual additions:
/// prompts attend over visual tokens, then the projected class feature
/// attends over the enriched prompts.
pub fn pcm_compose(
    tape: &Tape,
    set: &ParamSet,
    selected: Var,
    visual_src: Var,
    r: Var,
    pcm_dim: usize,
) -> Result<(Var, PcmTrace)> {
    let scale = 1.0 / (pcm_dim as f64).sqrt();
    let wq1 = tape.param(set, "pcm.q1")?;
    let wk1 = tape.param(set, "pcm.k1")?;
    let wv1 = tape.param(set, "pcm.v1")?;
    let q1 = tape.matmul(selected, wq1)?;
    let k1 = tape.matmul(visual_src, wk1)?;
    let v1 = tape.matmul(visual_src, wv1)?;
    let a1 = tape.softmax_rows(tape.scale(tape.matmul(q1, tape.transpose(k1))?, scale));
    let enriched = tape.add(selected, tape.matmul(a1, v1)?)?;

    let wq2 = tape.param(set, "pcm.q2")?;
    let wk2 = tape.param(set, "pcm.k2")?;
    let wv2 = tape.param(set, "pcm.v2")?;
    let dc = tape.shape(r)[0];
    let r_row = tape.reshape(r, vec![1, dc])?;
    let q2 = tape.matmul(r_row, wq2)?;
    let k2 = tape.matmul(enriched, wk2)?;
    let v2 = tape.matmul(enriched, wv2)?;
    let a2 = tape.softmax_rows(tape.scale(tape.matmul(q2, tape.transpose(k2))?, scale));
    let f_a = tape.add(r, tape.row(tape.matmul(a2, v2)?, 0)?)?;
    Ok((
        f_a,
        PcmTrace {
            stage1: tape.value(a1),
            stage2: tape.value(a2),
        },
    ))
}
