//! The training loop: initial prototype construction, per-iteration forward
//! and losses, fast-stream optimizer steps, and slow-stream EMA updates with
//! prototype resampling at the configured interval. Inference features come
//! from the slow stream.

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::apg::orthogonality_loss;
use crate::error::{Error, Result};
use crate::eval::{attribute_probe, compute_map_cmc, gram_report, EvalItem, EvalReport, ProbeItem};
use crate::fsts::{build_prototypes, contrastive_loss, ema_update, FastSlowState, PrototypeBank};
use crate::harness::config::TrainConfig;
use crate::harness::model::{
    augment_tokens, forward_sample, init_fast_params, prompt_set, prompts_var, ApcModel,
    ModelShape, Stream,
};
use crate::harness::pretrain::PretrainOutcome;
use crate::losses::{identity_loss, total_loss, triplet_loss, LossParts};
use crate::numerics::{Adam, ParamSet, StreamRng, Tape};
use crate::synthworld::{
    generate_world, make_splits, render_dataset, sample_batch_pk, Dataset, Splits, World,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TraceEvent {
    InitialPrototypeBuild { step: u64 },
    OptimStep { step: u64, epoch: usize },
    EmaUpdate { step: u64 },
    PrototypeRebuild { step: u64 },
    EpochEnd { epoch: usize, step: u64 },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub id_v: f64,
    pub id_a: f64,
    pub tri_v: f64,
    pub tri_a: f64,
    pub con: f64,
    pub orth: f64,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramSummary {
    pub mean_abs_off_diag: f64,
    pub max_abs_off_diag: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub seed: u64,
    pub config_hash: String,
    pub scenario: String,
    pub hyperparameters: serde_json::Value,
    pub epochs: Vec<EpochLosses>,
    /// Labeled "source:sus", "dg:fus", ...; the slow stream is the
    /// deployment model, fast-stream numbers ride along for comparison.
    pub evals: Vec<EvalReport>,
    pub gram: Option<GramSummary>,
    pub attribute_recovery: Option<f64>,
    pub selection_histogram: Option<Vec<u64>>,
    pub pretrain_probe_purity: Option<f64>,
    pub wall_clock_secs: f64,
}

impl RunReport {
    pub fn eval(&self, label: &str) -> Option<&EvalReport> {
        self.evals.iter().find(|e| e.scenario == label)
    }

    /// The deployment-model report on the hardest available scenario.
    pub fn primary_eval(&self) -> Option<&EvalReport> {
        for label in ["dg:sus", "dg:fus", "source:sus", "source:fus"] {
            if let Some(e) = self.eval(label) {
                return Some(e);
            }
        }
        None
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub model: ApcModel,
    pub trace: Vec<TraceEvent>,
    pub world: World,
    pub dataset: Dataset,
    pub splits: Splits,
    /// Final prototype bank (present when the slow stream is in play).
    pub bank: Option<PrototypeBank>,
}

/// Build the model for a config, optionally seeding encoder weights from a
/// pretraining outcome. The text encoder is frozen here in either case.
pub fn build_model(
    cfg: &TrainConfig,
    num_classes: usize,
    update_interval: usize,
    rng: &mut StreamRng,
    pretrained: Option<&ParamSet>,
) -> Result<ApcModel> {
    let shape = ModelShape::from_config(cfg, num_classes)?;
    let mut text = ParamSet::new();
    crate::encoders::init_text_params(&mut text, &shape.dims, rng);
    let mut fast = init_fast_params(&shape, rng);
    if let Some(pre) = pretrained {
        for p in fast.iter_mut() {
            if !p.name.starts_with("visual.") {
                continue;
            }
            let src = pre.get(&p.name)?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "pretrained {}: shape {:?} does not match config {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
        for p in text.iter_mut() {
            let src = pre.get(&p.name)?;
            if src.value.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "pretrained {}: shape {:?} does not match config {:?}",
                    p.name,
                    src.value.shape(),
                    p.value.shape()
                )));
            }
            p.value = src.value.clone();
        }
    }
    text.freeze();
    let state = FastSlowState::new(fast, cfg.fsts.momentum, update_interval)?;
    Ok(ApcModel { shape, text, state })
}

fn build_bank(
    model: &ApcModel,
    dataset: &Dataset,
    images_by_label: &[Vec<usize>],
    rng: &mut StreamRng,
    step: u64,
) -> Result<PrototypeBank> {
    build_prototypes(
        images_by_label,
        |idx| {
            let (f_v, f_a, _r) = model.infer(Stream::Slow, &dataset.samples[idx])?;
            Ok((f_v, f_a))
        },
        rng,
        step,
    )
}

fn eval_items(
    model: &ApcModel,
    stream: Stream,
    dataset: &Dataset,
    indices: &[usize],
) -> Result<Vec<EvalItem>> {
    let samples: Vec<&crate::synthworld::ImageSample> =
        indices.iter().map(|&i| &dataset.samples[i]).collect();
    let rows = model.extract_features(stream, &samples)?;
    Ok(rows
        .into_iter()
        .zip(indices)
        .map(|(features, &i)| EvalItem {
            features,
            identity: dataset.samples[i].identity,
            camera: dataset.samples[i].camera,
        })
        .collect())
}

pub fn eval_split(
    model: &ApcModel,
    stream: Stream,
    dataset: &Dataset,
    splits: &Splits,
    label: &str,
    seed: u64,
    config_hash: &str,
) -> Result<EvalReport> {
    let query = eval_items(model, stream, dataset, &splits.query)?;
    let gallery = eval_items(model, stream, dataset, &splits.gallery)?;
    compute_map_cmc(&query, &gallery, label, seed, config_hash, true)
}

pub fn train(
    cfg: &TrainConfig,
    run_seed: u64,
    pretrained: Option<&PretrainOutcome>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let config_hash = cfg.hash();

    let world = generate_world(&cfg.world_for_seed(run_seed))?;
    let dataset = render_dataset(&world, cfg.dataset.images_per_identity_per_domain)?;
    let splits = make_splits(&world, &dataset, &cfg.split_config())?;

    // contiguous training labels
    let label_of: HashMap<usize, usize> = splits
        .train_identities
        .iter()
        .enumerate()
        .map(|(l, &id)| (id, l))
        .collect();
    let num_classes = splits.train_identities.len();
    let mut images_by_label: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for &i in &splits.train {
        images_by_label[label_of[&dataset.samples[i].identity]].push(i);
    }

    let batch_size = cfg.optimizer.batch_identities * cfg.optimizer.batch_images_per_identity;
    let steps_per_epoch = (splits.train.len() / batch_size).max(1);
    let update_interval = if cfg.fsts.slow_update_interval == 0 {
        steps_per_epoch
    } else {
        cfg.fsts.slow_update_interval
    };

    let mut init_rng = StreamRng::new(run_seed, "init");
    let mut model = build_model(
        cfg,
        num_classes,
        update_interval,
        &mut init_rng,
        pretrained.map(|p| &p.params),
    )?;

    let mut adam = Adam::new(
        cfg.optimizer.learning_rate,
        cfg.optimizer.beta1,
        cfg.optimizer.beta2,
        cfg.optimizer.eps,
    );
    let mut batch_rng = StreamRng::new(run_seed, "batching");
    let mut proto_rng = StreamRng::new(run_seed, "prototypes");
    let aug_sigma = cfg.augment.noise_sigma.unwrap_or(world.spec.noise_sigma);
    let use_fsts = model.shape.use_fsts;
    let s_count = model.shape.dict.as_ref().map(|d| d.attribute_count);

    let mut trace = Vec::new();
    let mut global_step: u64 = 0;
    let mut bank: Option<PrototypeBank> = if use_fsts {
        let b = build_bank(&model, &dataset, &images_by_label, &mut proto_rng, 0)?;
        trace.push(TraceEvent::InitialPrototypeBuild { step: 0 });
        Some(b)
    } else {
        None
    };

    let mut epochs_out = Vec::with_capacity(cfg.optimizer.epochs);
    let mut histogram: Option<Vec<u64>> = s_count.map(|s| vec![0; s]);

    for epoch in 0..cfg.optimizer.epochs {
        if let Some(h) = &mut histogram {
            h.iter_mut().for_each(|c| *c = 0); // keep only the last epoch
        }
        let mut sums = EpochLosses {
            epoch,
            ..Default::default()
        };
        for _ in 0..steps_per_epoch {
            global_step += 1;
            let batch = sample_batch_pk(
                &dataset,
                &splits.train,
                cfg.optimizer.batch_identities,
                cfg.optimizer.batch_images_per_identity,
                &mut batch_rng,
            )?;

            let tape = Tape::new();
            let prompts = prompts_var(&tape, &model.state.fast, &model)?;
            let mut f_v_rows = Vec::with_capacity(batch.len());
            let mut f_a_rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            let mut con_terms = Vec::new();
            for &idx in &batch {
                let s = &dataset.samples[idx];
                let label = label_of[&s.identity];
                let tokens = tape.constant(augment_tokens(
                    &s.tokens,
                    cfg.augment.token_dropout,
                    aug_sigma,
                    &mut batch_rng,
                ));
                let fwd =
                    forward_sample(&tape, &model.state.fast, &model, tokens, s.camera, prompts)?;
                if let Some(h) = &mut histogram {
                    for &sel in &fwd.selected {
                        h[sel] += 1;
                    }
                }
                if let Some(b) = &bank {
                    con_terms.push(contrastive_loss(
                        &tape,
                        fwd.f_v,
                        fwd.f_a,
                        label,
                        b,
                        cfg.fsts.temperature,
                    )?);
                }
                f_v_rows.push(fwd.f_v);
                if let Some(fa) = fwd.f_a {
                    f_a_rows.push(fa);
                }
                labels.push(label);
            }

            let distinct_labels = {
                let mut l = labels.clone();
                l.sort_unstable();
                l.dedup();
                l.len()
            };
            let feats_v = tape.stack_rows(&f_v_rows)?;
            let head_v = tape.param(&model.state.fast, "head.visual.w")?;
            let id_v = identity_loss(&tape, feats_v, head_v, &labels, cfg.loss.label_smoothing)?;
            let tri_v = (distinct_labels >= 2)
                .then(|| triplet_loss(&tape, feats_v, &labels, cfg.loss.triplet_margin))
                .transpose()?;
            let (id_a, tri_a) = if f_a_rows.len() == batch.len() {
                let feats_a = tape.stack_rows(&f_a_rows)?;
                let head_a = tape.param(&model.state.fast, "head.attr.w")?;
                let id_a =
                    identity_loss(&tape, feats_a, head_a, &labels, cfg.loss.label_smoothing)?;
                let tri_a = (distinct_labels >= 2)
                    .then(|| triplet_loss(&tape, feats_a, &labels, cfg.loss.triplet_margin))
                    .transpose()?;
                (Some(id_a), tri_a)
            } else {
                (None, None)
            };
            let con = if con_terms.is_empty() {
                None
            } else {
                let mut acc = con_terms[0];
                for &t in &con_terms[1..] {
                    acc = tape.add(acc, t)?;
                }
                Some(tape.scale(acc, 1.0 / con_terms.len() as f64))
            };
            let orth = match (prompts, cfg.ablation.orth) {
                (Some(p), true) => Some(orthogonality_loss(&tape, p)?),
                _ => None,
            };
            let parts = LossParts {
                id_v: Some(id_v),
                id_a,
                tri_v,
                tri_a,
                con,
                orth,
            };
            let total = total_loss(&tape, &parts, cfg.loss.kappa)?;
            let total_value = tape.item(total);
            if !total_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    step: global_step as usize,
                });
            }
            let grads = tape.backward(total)?;
            let part_val = |v: Option<crate::numerics::Var>| v.map_or(0.0, |v| tape.item(v));
            sums.id_v += part_val(parts.id_v);
            sums.id_a += part_val(parts.id_a);
            sums.tri_v += part_val(parts.tri_v);
            sums.tri_a += part_val(parts.tri_a);
            sums.con += part_val(parts.con);
            sums.orth += part_val(parts.orth);
            sums.total += total_value;
            drop(tape);

            model.state.fast.apply_grads(&grads)?;
            adam.step(&mut model.state.fast);
            trace.push(TraceEvent::OptimStep {
                step: global_step,
                epoch,
            });

            if use_fsts && global_step % update_interval as u64 == 0 {
                ema_update(&mut model.state)?;
                trace.push(TraceEvent::EmaUpdate { step: global_step });
                bank = Some(build_bank(
                    &model,
                    &dataset,
                    &images_by_label,
                    &mut proto_rng,
                    global_step,
                )?);
                trace.push(TraceEvent::PrototypeRebuild { step: global_step });
            }
        }
        let n = steps_per_epoch as f64;
        for v in [
            &mut sums.id_v,
            &mut sums.id_a,
            &mut sums.tri_v,
            &mut sums.tri_a,
            &mut sums.con,
            &mut sums.orth,
            &mut sums.total,
        ] {
            *v /= n;
        }
        trace.push(TraceEvent::EpochEnd {
            epoch,
            step: global_step,
        });
        epochs_out.push(sums);
    }

    // evaluation: slow stream is the deployment model
    let infer_stream = if use_fsts { Stream::Slow } else { Stream::Fast };
    let stream_tag = |s: Stream| if s == Stream::Slow { "sus" } else { "fus" };
    let mut evals = Vec::new();
    let source_splits = make_splits(&world, &dataset, &cfg.source_split_config())?;
    let has_dg = cfg.is_dg();
    let mut streams = vec![infer_stream];
    if use_fsts {
        streams.push(Stream::Fast);
    }
    for &stream in &streams {
        evals.push(eval_split(
            &model,
            stream,
            &dataset,
            &source_splits,
            &format!("source:{}", stream_tag(stream)),
            run_seed,
            &config_hash,
        )?);
        if has_dg {
            evals.push(eval_split(
                &model,
                stream,
                &dataset,
                &splits,
                &format!("dg:{}", stream_tag(stream)),
                run_seed,
                &config_hash,
            )?);
        }
    }

    // interpretability reports off the deployment stream
    let (gram, attribute_recovery) = match prompt_set(
        &model,
        model.stream(infer_stream),
        global_step,
    )? {
        Some(ps) => {
            let gr = gram_report(&ps)?;
            let probe_split = &splits; // dg scenario when present, else source
            let mut probe_indices = probe_split.query.clone();
            probe_indices.extend_from_slice(&probe_split.gallery);
            let samples: Vec<&crate::synthworld::ImageSample> =
                probe_indices.iter().map(|&i| &dataset.samples[i]).collect();
            let rs = model.project_features(infer_stream, &samples)?;
            let items: Vec<ProbeItem> = rs
                .into_iter()
                .zip(&probe_indices)
                .map(|(r, &i)| ProbeItem {
                    r,
                    identity: dataset.samples[i].identity,
                })
                .collect();
            let top_n = 10.min(items.len());
            let probe = attribute_probe(&ps, &items, &world, top_n)?;
            (
                Some(GramSummary {
                    mean_abs_off_diag: gr.mean_abs_off_diag,
                    max_abs_off_diag: gr.max_abs_off_diag,
                }),
                Some(probe.recovery_score),
            )
        }
        None => (None, None),
    };

    let report = RunReport {
        seed: run_seed,
        config_hash,
        scenario: format!("train_domains={:?}", cfg.scenario.train_domains),
        hyperparameters: serde_json::json!({
            "attribute_count": s_count,
            "tokens_per_attribute": model.shape.dict.as_ref().map(|d| d.tokens_per_attribute),
            "top_k": s_count.map(|_| model.shape.top_k),
            "momentum": cfg.fsts.momentum,
            "slow_update_interval": update_interval,
            "temperature": cfg.fsts.temperature,
            "kappa": cfg.loss.kappa,
            "learning_rate": cfg.optimizer.learning_rate,
            "epochs": cfg.optimizer.epochs,
            "batch": format!("{}x{}", cfg.optimizer.batch_identities, cfg.optimizer.batch_images_per_identity),
            "steps_per_epoch": steps_per_epoch,
        }),
        epochs: epochs_out,
        evals,
        gram,
        attribute_recovery,
        selection_histogram: histogram,
        pretrain_probe_purity: pretrained.map(|p| p.probe_purity),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };

    Ok(TrainOutcome {
        report,
        model,
        trace,
        world,
        dataset,
        splits,
        bank,
    })
}

/// Run pretraining (when enabled) and then the main loop.
pub fn pretrain_and_train(cfg: &TrainConfig, run_seed: u64) -> Result<TrainOutcome> {
    let pre = if cfg.pretrain.enabled {
        let world = generate_world(&cfg.world_for_seed(run_seed))?;
        let dataset = render_dataset(&world, cfg.dataset.images_per_identity_per_domain)?;
        let splits = make_splits(&world, &dataset, &cfg.split_config())?;
        Some(crate::harness::pretrain::pretrain(
            cfg,
            run_seed,
            &world,
            &dataset,
            &splits.train,
        )?)
    } else {
        None
    };
    train(cfg, run_seed, pre.as_ref())
}
