//! Model assembly: encoders plus the attribute pathway, duplicated into the
//! fast/slow streams, with feature extraction for evaluation.

use crate::apg::{
    compute_prompts, init_pcm_params, init_sad_params, pcm_compose, select_topk,
    AttributeDictionary, PcmSource, PromptSet,
};
use crate::encoders::{encode_tokens, init_text_params, init_visual_params, EncoderDims};
use crate::error::Result;
use crate::fsts::FastSlowState;
use crate::harness::config::{FeatureMode, TrainConfig};
use crate::losses::init_head_params;
use crate::numerics::{ParamSet, RealArray, StreamRng, Tape, Var};
use crate::synthworld::ImageSample;

/// Distilled model-shape settings, independent of training hyperparameters.
#[derive(Clone, Debug)]
pub struct ModelShape {
    pub dims: EncoderDims,
    pub dict: Option<AttributeDictionary>,
    pub top_k: usize,
    pub pcm: Option<(usize, PcmSource)>,
    pub use_fsts: bool,
    pub temperature: f64,
    pub num_classes: usize,
    pub feature_mode: FeatureMode,
}

impl ModelShape {
    pub fn from_config(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        let dims = cfg.encoder.dims(&cfg.world);
        let dict = if cfg.ablation.sad {
            Some(AttributeDictionary::new(
                cfg.sad.attribute_count,
                cfg.sad.tokens_per_attribute,
            )?)
        } else {
            None
        };
        let pcm = if cfg.ablation.pcm {
            Some((cfg.pcm.dim, cfg.pcm.source))
        } else {
            None
        };
        Ok(ModelShape {
            dims,
            dict,
            top_k: cfg.sad.top_k,
            pcm,
            use_fsts: cfg.ablation.fsts,
            temperature: cfg.fsts.temperature,
            num_classes,
            feature_mode: cfg.ablation.features,
        })
    }

    pub fn has_attribute_pathway(&self) -> bool {
        self.dict.is_some()
    }

    pub fn feature_width(&self) -> usize {
        match (self.feature_mode, self.has_attribute_pathway()) {
            (FeatureMode::Concat, true) => self.dims.cross_modal_dim + self.dims.visual_dim,
            _ => self.dims.visual_dim,
        }
    }
}

pub struct ApcModel {
    pub shape: ModelShape,
    /// Frozen after pretraining (or from the start when pretraining is
    /// skipped).
    pub text: ParamSet,
    pub state: FastSlowState,
}

/// Build the fast-stream parameter set: visual encoder, dictionary tokens,
/// composition projections and classifier heads.
pub fn init_fast_params(shape: &ModelShape, rng: &mut StreamRng) -> ParamSet {
    let mut set = ParamSet::new();
    init_visual_params(&mut set, &shape.dims, rng);
    if let Some(dict) = &shape.dict {
        init_sad_params(&mut set, dict, &shape.dims, rng);
    }
    if let Some((pcm_dim, source)) = shape.pcm {
        init_pcm_params(&mut set, &shape.dims, pcm_dim, source, rng);
    }
    let attr_dim = shape
        .has_attribute_pathway()
        .then_some(shape.dims.cross_modal_dim);
    init_head_params(&mut set, shape.dims.visual_dim, attr_dim, shape.num_classes, rng);
    set
}

pub fn init_model(
    shape: ModelShape,
    momentum: f64,
    update_interval: usize,
    rng: &mut StreamRng,
) -> Result<ApcModel> {
    let mut text = ParamSet::new();
    init_text_params(&mut text, &shape.dims, rng);
    let fast = init_fast_params(&shape, rng);
    let state = FastSlowState::new(fast, momentum, update_interval)?;
    Ok(ApcModel { shape, text, state })
}

/// Recompute the attribute prompt matrix on this tape, if the model has a
/// dictionary. Rows are unit-norm.
pub fn prompts_var(tape: &Tape, params: &ParamSet, model: &ApcModel) -> Result<Option<Var>> {
    match &model.shape.dict {
        Some(dict) => Ok(Some(compute_prompts(
            tape,
            params,
            &model.text,
            &model.shape.dims,
            dict,
        )?)),
        None => Ok(None),
    }
}

/// Plain-value prompt set from a chosen stream.
pub fn prompt_set(model: &ApcModel, params: &ParamSet, step: u64) -> Result<Option<PromptSet>> {
    match &model.shape.dict {
        Some(dict) => Ok(Some(crate::apg::compute_prompt_set(
            params,
            &model.text,
            &model.shape.dims,
            dict,
            step,
        )?)),
        None => Ok(None),
    }
}

/// Per-sample forward outputs on the tape.
pub struct SampleForward {
    pub f_v: Var,
    pub f_a: Option<Var>,
    pub r: Var,
    /// Top-K indices when the composition module ran; the argmax index in
    /// similarity-aggregation mode.
    pub selected: Vec<usize>,
}

/// Forward one sample through a stream. `prompts` must come from the same
/// parameter set (see [`prompts_var`]).
pub fn forward_sample(
    tape: &Tape,
    params: &ParamSet,
    model: &ApcModel,
    tokens: Var,
    camera: usize,
    prompts: Option<Var>,
) -> Result<SampleForward> {
    let vis = encode_tokens(tape, params, &model.shape.dims, tokens, camera)?;
    let Some(prompts) = prompts else {
        return Ok(SampleForward {
            f_v: vis.f_v,
            f_a: None,
            r: vis.r,
            selected: Vec::new(),
        });
    };
    match model.shape.pcm {
        Some((pcm_dim, source)) => {
            let (indices, selected) = select_topk(tape, vis.r, prompts, model.shape.top_k)?;
            let src = match source {
                PcmSource::Projected => vis.r_seq,
                PcmSource::Raw => vis.f_seq,
            };
            let (f_a, _trace) = pcm_compose(tape, params, selected, src, vis.r, pcm_dim)?;
            Ok(SampleForward {
                f_v: vis.f_v,
                f_a: Some(f_a),
                r: vis.r,
                selected: indices,
            })
        }
        None => {
            // dictionary without composition: similarity-weighted prompt
            // aggregation, softmax over cosines at the shared temperature
            let dc = model.shape.dims.cross_modal_dim;
            let rn = tape.l2_normalize(vis.r)?;
            let rn_row = tape.reshape(rn, vec![1, dc])?;
            let sims = tape.matmul(rn_row, tape.transpose(prompts))?;
            let weights = tape.softmax_rows(tape.scale(sims, 1.0 / model.shape.temperature));
            let f_a = tape.row(tape.matmul(weights, prompts)?, 0)?;
            let wvals = tape.value(weights);
            let argmax = crate::apg::rank_descending(wvals.data())[0];
            Ok(SampleForward {
                f_v: vis.f_v,
                f_a: Some(f_a),
                r: vis.r,
                selected: vec![argmax],
            })
        }
    }
}

/// Which parameter stream to read at inference time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Fast,
    Slow,
}

impl ApcModel {
    pub fn stream(&self, which: Stream) -> &ParamSet {
        match which {
            Stream::Fast => &self.state.fast,
            Stream::Slow => &self.state.slow,
        }
    }

    /// Inference features for one sample: `(f_v, f_a, r)` as plain values.
    pub fn infer(
        &self,
        which: Stream,
        sample: &ImageSample,
    ) -> Result<(Vec<f64>, Option<Vec<f64>>, Vec<f64>)> {
        let params = self.stream(which);
        let tape = Tape::new();
        let prompts = prompts_var(&tape, params, self)?;
        let tokens = tape.constant(sample.tokens.clone());
        let fwd = forward_sample(&tape, params, self, tokens, sample.camera, prompts)?;
        Ok((
            tape.value(fwd.f_v).into_data(),
            fwd.f_a.map(|v| tape.value(v).into_data()),
            tape.value(fwd.r).into_data(),
        ))
    }

    /// Final retrieval representation rows: `concat(f_a, f_v)` or `f_v`
    /// depending on the feature mode and pathway availability.
    pub fn extract_features(
        &self,
        which: Stream,
        samples: &[&ImageSample],
    ) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            let (f_v, f_a, _r) = self.infer(which, s)?;
            let row = match (self.shape.feature_mode, f_a) {
                (FeatureMode::Concat, Some(mut fa)) => {
                    fa.extend_from_slice(&f_v);
                    fa
                }
                _ => f_v,
            };
            rows.push(row);
        }
        Ok(rows)
    }

    /// Projected class features `r` for probe items.
    pub fn project_features(
        &self,
        which: Stream,
        samples: &[&ImageSample],
    ) -> Result<Vec<Vec<f64>>> {
        let mut rows = Vec::with_capacity(samples.len());
        for s in samples {
            let (_, _, r) = self.infer(which, s)?;
            rows.push(r);
        }
        Ok(rows)
    }
}

/// Training-time token augmentation: row dropout plus Gaussian jitter.
pub fn augment_tokens(
    tokens: &RealArray,
    dropout: f64,
    noise_sigma: f64,
    rng: &mut StreamRng,
) -> RealArray {
    let mut out = tokens.clone();
    let (n, d) = (tokens.rows(), tokens.cols());
    for t in 0..n {
        if dropout > 0.0 && rng.bernoulli(dropout) {
            out.data_mut()[t * d..(t + 1) * d].fill(0.0);
        }
    }
    if noise_sigma > 0.0 {
        for v in out.data_mut() {
            *v += rng.normal(0.0, noise_sigma);
        }
    }
    out
}
