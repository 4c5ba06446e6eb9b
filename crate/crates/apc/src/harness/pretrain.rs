//! Pretraining emulation: a symmetric contrastive alignment between the
//! visual class feature and compositions of per-attribute text embeddings.
//! This is the "pretrained knowledge" the slow stream later preserves;
//! the text encoder is frozen once this stage ends.

use crate::apg::{rank_descending, CAPTION_ID_BASE, TEMPLATE_PREFIX, TEMPLATE_SUFFIX};
use crate::encoders::{encode_tokens, init_text_params, init_visual_params, text_forward};
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::numerics::{Adam, ParamSet, RealArray, StreamRng, Tape, Var};
use crate::synthworld::{generate_world, render_image, Dataset, World};

pub struct PretrainOutcome {
    /// `visual.*` and `text.*` parameters after alignment training.
    pub params: ParamSet,
    pub epoch_losses: Vec<f64>,
    /// Mean top-10 purity of the oracle-injected attribute probe on
    /// noise-free renders.
    pub probe_purity: f64,
}

fn caption_sequence(attribute: usize) -> Vec<usize> {
    let mut ids = TEMPLATE_PREFIX.to_vec();
    ids.push(CAPTION_ID_BASE + attribute);
    ids.extend_from_slice(&TEMPLATE_SUFFIX);
    ids
}

/// Embed every planted attribute's caption; rows are unit-norm, `[A x D_c]`.
fn attribute_text_embeddings(
    tape: &Tape,
    params: &ParamSet,
    dims: &crate::encoders::EncoderDims,
    num_attributes: usize,
) -> Result<Var> {
    let mut rows = Vec::with_capacity(num_attributes);
    for a in 0..num_attributes {
        let ids = caption_sequence(a);
        rows.push(text_forward(tape, params, dims, &ids, None, &[])?);
    }
    tape.stack_rows(&rows)
}

pub fn pretrain(
    cfg: &TrainConfig,
    run_seed: u64,
    world: &World,
    dataset: &Dataset,
    train_indices: &[usize],
) -> Result<PretrainOutcome> {
    let dims = cfg.encoder.dims(&cfg.world);
    let a_count = world.spec.num_latent_attributes;
    let mut rng = StreamRng::new(run_seed, "init");
    let mut params = ParamSet::new();
    init_visual_params(&mut params, &dims, &mut rng);
    init_text_params(&mut params, &dims, &mut rng);

    let mut adam = Adam::new(cfg.pretrain.learning_rate, 0.9, 0.999, 1e-8);
    let mut batch_rng = StreamRng::new(run_seed, "pretrain-batching");
    let tau = cfg.pretrain.temperature;
    let mut epoch_losses = Vec::with_capacity(cfg.pretrain.epochs);

    for epoch in 0..cfg.pretrain.epochs {
        let mut order: Vec<usize> = train_indices.to_vec();
        batch_rng.shuffle(&mut order);
        let mut epoch_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(cfg.pretrain.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let tape = Tape::new();
            let text_embs = attribute_text_embeddings(&tape, &params, &dims, a_count)?;
            let mut r_rows = Vec::with_capacity(chunk.len());
            let mut cap_rows = Vec::with_capacity(chunk.len());
            for &idx in chunk {
                let s = &dataset.samples[idx];
                let tokens = tape.constant(s.tokens.clone());
                let vis = encode_tokens(&tape, &params, &dims, tokens, s.camera)?;
                r_rows.push(tape.l2_normalize(vis.r)?);
                let w = RealArray::new(
                    vec![1, a_count],
                    world.identities[s.identity].attribute_vector.clone(),
                )?;
                let cap = tape.row(tape.matmul(tape.constant(w), text_embs)?, 0)?;
                cap_rows.push(tape.l2_normalize(cap)?);
            }
            let r = tape.stack_rows(&r_rows)?;
            let captions = tape.stack_rows(&cap_rows)?;
            let logits = tape.scale(tape.matmul(r, tape.transpose(captions))?, 1.0 / tau);
            let b = chunk.len();
            let diag_idx: Vec<(usize, usize)> = (0..b).map(|i| (i, i)).collect();
            let loss_rows = {
                let lse = tape.sum(tape.logsumexp_rows(logits));
                let diag = tape.sum(tape.gather(logits, &diag_idx)?);
                tape.scale(tape.sub(lse, diag)?, 1.0 / b as f64)
            };
            let loss_cols = {
                let lt = tape.transpose(logits);
                let lse = tape.sum(tape.logsumexp_rows(lt));
                let diag = tape.sum(tape.gather(lt, &diag_idx)?);
                tape.scale(tape.sub(lse, diag)?, 1.0 / b as f64)
            };
            let loss = tape.scale(tape.add(loss_rows, loss_cols)?, 0.5);
            let value = tape.item(loss);
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, step: steps });
            }
            let grads = tape.backward(loss)?;
            params.apply_grads(&grads)?;
            adam.step(&mut params);
            epoch_sum += value;
            steps += 1;
        }
        epoch_losses.push(if steps > 0 { epoch_sum / steps as f64 } else { 0.0 });
    }

    let probe_purity = oracle_probe_purity(cfg, &params, world)?;
    Ok(PretrainOutcome {
        params,
        epoch_losses,
        probe_purity,
    })
}

/// Probe the pretrained alignment: inject each attribute's caption embedding
/// as a prompt, rank noise-free renders by cosine to it, and measure how
/// many of the top 10 actually carry that attribute.
pub fn oracle_probe_purity(
    cfg: &TrainConfig,
    params: &ParamSet,
    world: &World,
) -> Result<f64> {
    let dims = cfg.encoder.dims(&cfg.world);
    let a_count = world.spec.num_latent_attributes;
    let mut clean_spec = world.spec.clone();
    clean_spec.noise_sigma = 0.0;
    let clean = generate_world(&clean_spec)?;

    let tape = Tape::new();
    let text_embs = attribute_text_embeddings(&tape, params, &dims, a_count)?;
    let prompt_rows = tape.value(text_embs);

    let mut render_rng = StreamRng::new(world.spec.seed, "probe-render");
    let mut rs: Vec<Vec<f64>> = Vec::new();
    let mut identities = Vec::new();
    let domain = cfg.scenario.train_domains[0];
    for id in 0..clean.spec.num_identities {
        for _ in 0..2 {
            let cam = render_rng.below(clean.spec.num_cameras);
            let sample = render_image(&clean, id, cam, domain, &mut render_rng)?;
            let tokens = tape.constant(sample.tokens.clone());
            let vis = encode_tokens(&tape, params, &dims, tokens, cam)?;
            rs.push(tape.value(vis.r).into_data());
            identities.push(id);
        }
    }
    let top_n = 10.min(rs.len());
    let mut purity_sum = 0.0;
    for a in 0..a_count {
        let g = prompt_rows.row_slice(a);
        let gnorm = g.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let sims: Vec<f64> = rs
            .iter()
            .map(|r| {
                let dot: f64 = r.iter().zip(g).map(|(x, y)| x * y).sum();
                let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                dot / (rn * gnorm)
            })
            .collect();
        let order = rank_descending(&sims);
        let hits = order[..top_n]
            .iter()
            .filter(|&&i| clean.identities[identities[i]].attribute_vector[a] > 0.0)
            .count();
        purity_sum += hits as f64 / top_n as f64;
    }
    Ok(purity_sum / a_count as f64)
}
