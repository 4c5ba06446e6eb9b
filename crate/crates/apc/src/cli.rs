//! Command-line entry points: `gen-world`, `pretrain`, `train`, `eval`,
//! `probe` and `ablate`. Exit codes: 0 success, 1 validation error,
//! 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{collect_section, load_section, read_blobs, write_blobs};
use crate::encoders::EncoderDims;
use crate::error::{Error, Result};
use crate::eval::{attribute_probe, gram_report, ProbeItem};
use crate::fsts::{FastSlowState, PrototypeBank};
use crate::harness::config::TrainConfig;
use crate::harness::model::{init_fast_params, ApcModel, ModelShape, Stream};
use crate::harness::pretrain::PretrainOutcome;
use crate::harness::train::{eval_split, train, RunReport, TrainOutcome};
use crate::harness::{ablate, pretrain_and_train, to_csv};
use crate::numerics::{ParamSet, RealArray, StreamRng};
use crate::synthworld::{generate_world, make_splits, read_dataset, render_dataset, write_dataset};

#[derive(Parser, Debug)]
#[command(name = "apc", version, about = "Attribute prompt composition on a synthetic attribute world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a dataset directory (world.json + samples.bin).
    GenWorld {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the alignment pretraining stage and save its checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full training run (pretrains inline when enabled).
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Reuse a pretraining checkpoint instead of pretraining inline.
        #[arg(long)]
        pretrained: Option<PathBuf>,
    },
    /// Evaluate a saved checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Dataset directory; omit to regenerate from the config.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump features, prompt vectors, Gram matrix and the attribute probe.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full ablation sweep.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return 1;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e @ (Error::Config(_) | Error::Validation { .. })) => {
            eprintln!("error: {e}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    TrainConfig::from_json(&text)
}

fn pick_seed(cfg: &TrainConfig, flag: Option<u64>) -> u64 {
    flag.unwrap_or_else(|| cfg.seeds.first().copied().unwrap_or(0))
}

#[derive(Serialize, Deserialize)]
pub struct ModelCheckpointHeader {
    pub kind: String,
    pub dims: EncoderDims,
    pub num_classes: usize,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
pub struct PretrainCheckpointHeader {
    pub kind: String,
    pub dims: EncoderDims,
    pub probe_purity: f64,
    pub seed: u64,
    pub config_hash: String,
}

pub fn save_model(path: &Path, model: &ApcModel, seed: u64, config_hash: &str) -> Result<()> {
    let header = ModelCheckpointHeader {
        kind: "model".into(),
        dims: model.shape.dims.clone(),
        num_classes: model.shape.num_classes,
        seed,
        config_hash: config_hash.into(),
    };
    let mut blobs = IndexMap::new();
    collect_section(&mut blobs, "text", &model.text);
    collect_section(&mut blobs, "fast", &model.state.fast);
    collect_section(&mut blobs, "slow", &model.state.slow);
    write_blobs(path, &header, &blobs)
}

pub fn load_model(path: &Path, cfg: &TrainConfig) -> Result<(ApcModel, ModelCheckpointHeader)> {
    let (header, blobs): (ModelCheckpointHeader, _) = read_blobs(path)?;
    if header.kind != "model" {
        return Err(Error::Checkpoint(format!(
            "{} is a {:?} checkpoint, expected model",
            path.display(),
            header.kind
        )));
    }
    let shape = ModelShape::from_config(cfg, header.num_classes)?;
    if shape.dims != header.dims {
        return Err(Error::Checkpoint(
            "checkpoint dimensions do not match the config".into(),
        ));
    }
    let mut rng = StreamRng::new(0, "load");
    let mut text = ParamSet::new();
    crate::encoders::init_text_params(&mut text, &shape.dims, &mut rng);
    load_section(&blobs, "text", &mut text)?;
    text.freeze();
    let mut fast = init_fast_params(&shape, &mut rng);
    load_section(&blobs, "fast", &mut fast)?;
    let mut state = FastSlowState::new(fast, 0.0, 1)?;
    load_section(&blobs, "slow", &mut state.slow)?;
    Ok((ApcModel { shape, text, state }, header))
}

pub fn save_pretrain(
    path: &Path,
    outcome: &PretrainOutcome,
    dims: &EncoderDims,
    seed: u64,
    config_hash: &str,
) -> Result<()> {
    let header = PretrainCheckpointHeader {
        kind: "pretrain".into(),
        dims: dims.clone(),
        probe_purity: outcome.probe_purity,
        seed,
        config_hash: config_hash.into(),
    };
    let mut blobs = IndexMap::new();
    collect_section(&mut blobs, "params", &outcome.params);
    write_blobs(path, &header, &blobs)
}

pub fn load_pretrain(path: &Path, cfg: &TrainConfig) -> Result<PretrainOutcome> {
    let (header, blobs): (PretrainCheckpointHeader, _) = read_blobs(path)?;
    if header.kind != "pretrain" {
        return Err(Error::Checkpoint(format!(
            "{} is a {:?} checkpoint, expected pretrain",
            path.display(),
            header.kind
        )));
    }
    let dims = cfg.encoder.dims(&cfg.world);
    if dims != header.dims {
        return Err(Error::Checkpoint(
            "pretrain checkpoint dimensions do not match the config".into(),
        ));
    }
    let mut rng = StreamRng::new(0, "load");
    let mut params = ParamSet::new();
    crate::encoders::init_visual_params(&mut params, &dims, &mut rng);
    crate::encoders::init_text_params(&mut params, &dims, &mut rng);
    load_section(&blobs, "params", &mut params)?;
    Ok(PretrainOutcome {
        params,
        epoch_losses: Vec::new(),
        probe_purity: header.probe_purity,
    })
}

fn save_prototypes(path: &Path, bank: &PrototypeBank) -> Result<()> {
    #[derive(Serialize)]
    struct Header<'a> {
        kind: &'a str,
        build_step: u64,
        source_image_ids: &'a [usize],
    }
    let mut blobs = IndexMap::new();
    blobs.insert("h_v".to_string(), bank.h_v.clone());
    if let Some(ha) = &bank.h_a {
        blobs.insert("h_a".to_string(), ha.clone());
    }
    write_blobs(
        path,
        &Header {
            kind: "prototypes",
            build_step: bank.build_step,
            source_image_ids: &bank.source_image_ids,
        },
        &blobs,
    )
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn prompts_json(model: &ApcModel, report: &RunReport) -> Result<Option<serde_json::Value>> {
    let stream = if model.shape.use_fsts { Stream::Slow } else { Stream::Fast };
    let Some(ps) = crate::harness::model::prompt_set(model, model.stream(stream), 0)? else {
        return Ok(None);
    };
    let rows: Vec<Vec<f64>> = (0..ps.prompts.rows())
        .map(|i| ps.prompts.row_slice(i).to_vec())
        .collect();
    Ok(Some(serde_json::json!({
        "prompts": rows,
        "selection_histogram": report.selection_histogram,
    })))
}

fn save_run_outputs(out: &Path, cfg: &TrainConfig, outcome: &TrainOutcome) -> Result<()> {
    fs::create_dir_all(out)?;
    save_model(
        &out.join("checkpoint.ckpt"),
        &outcome.model,
        outcome.report.seed,
        &outcome.report.config_hash,
    )?;
    if let Some(bank) = &outcome.bank {
        save_prototypes(&out.join("prototypes.bin"), bank)?;
    }
    let primary = outcome.report.primary_eval().ok_or_else(|| {
        Error::Data("training produced no evaluation report".into())
    })?;
    write_json(&out.join("report.json"), primary)?;
    write_json(&out.join("run_report.json"), &outcome.report)?;
    if let Some(pj) = prompts_json(&outcome.model, &outcome.report)? {
        write_json(&out.join("prompts.json"), &pj)?;
    }
    let _ = cfg;
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::GenWorld { config, seed, out } => {
            let cfg = load_config(&config)?;
            let seed = pick_seed(&cfg, seed);
            let world = generate_world(&cfg.world_for_seed(seed))?;
            let dataset = render_dataset(&world, cfg.dataset.images_per_identity_per_domain)?;
            write_dataset(&out, &world, &dataset)?;
            println!(
                "wrote {} samples across {} identities to {}",
                dataset.len(),
                world.spec.num_identities,
                out.display()
            );
            Ok(())
        }
        Cmd::Pretrain { config, seed, out } => {
            let cfg = load_config(&config)?;
            let seed = pick_seed(&cfg, seed);
            let world = generate_world(&cfg.world_for_seed(seed))?;
            let dataset = render_dataset(&world, cfg.dataset.images_per_identity_per_domain)?;
            let splits = make_splits(&world, &dataset, &cfg.split_config())?;
            let outcome =
                crate::harness::pretrain::pretrain(&cfg, seed, &world, &dataset, &splits.train)?;
            fs::create_dir_all(&out)?;
            let dims = cfg.encoder.dims(&cfg.world);
            save_pretrain(&out.join("pretrain.ckpt"), &outcome, &dims, seed, &cfg.hash())?;
            write_json(
                &out.join("pretrain_report.json"),
                &serde_json::json!({
                    "seed": seed,
                    "config_hash": cfg.hash(),
                    "epoch_losses": outcome.epoch_losses,
                    "probe_purity": outcome.probe_purity,
                }),
            )?;
            println!("pretrain probe purity: {:.3}", outcome.probe_purity);
            Ok(())
        }
        Cmd::Train {
            config,
            seed,
            out,
            pretrained,
        } => {
            let cfg = load_config(&config)?;
            let seed = pick_seed(&cfg, seed);
            let outcome = match pretrained {
                Some(path) => {
                    let pre = load_pretrain(&path, &cfg)?;
                    train(&cfg, seed, Some(&pre))?
                }
                None => pretrain_and_train(&cfg, seed)?,
            };
            save_run_outputs(&out, &cfg, &outcome)?;
            if let Some(primary) = outcome.report.primary_eval() {
                println!(
                    "{}: mAP {:.3}, rank-1 {:.3} ({} queries)",
                    primary.scenario, primary.map, primary.cmc.r1, primary.n_query
                );
            }
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            config,
            seed,
            data,
            out,
        } => {
            let cfg = load_config(&config)?;
            let seed = pick_seed(&cfg, seed);
            let (model, header) = load_model(&checkpoint, &cfg)?;
            let (world, dataset) = match data {
                Some(dir) => {
                    let (world, dataset) = read_dataset(&dir)?;
                    let expect = &cfg.world;
                    if world.spec.input_dim != expect.input_dim
                        || world.spec.tokens_per_image != expect.tokens_per_image
                        || world.spec.num_cameras != expect.num_cameras
                    {
                        return Err(Error::Config(
                            "dataset directory does not match the config's world shape".into(),
                        ));
                    }
                    (world, dataset)
                }
                None => {
                    let world = generate_world(&cfg.world_for_seed(seed))?;
                    let dataset =
                        render_dataset(&world, cfg.dataset.images_per_identity_per_domain)?;
                    (world, dataset)
                }
            };
            let splits = make_splits(&world, &dataset, &cfg.split_config())?;
            let stream = if model.shape.use_fsts { Stream::Slow } else { Stream::Fast };
            let label = format!(
                "{}:{}",
                if cfg.is_dg() { "dg" } else { "source" },
                if stream == Stream::Slow { "sus" } else { "fus" }
            );
            let report = eval_split(
                &model,
                stream,
                &dataset,
                &splits,
                &label,
                seed,
                &header.config_hash,
            )?;
            fs::create_dir_all(&out)?;
            write_json(&out.join("report.json"), &report)?;
            println!("{}: mAP {:.3}, rank-1 {:.3}", report.scenario, report.map, report.cmc.r1);
            Ok(())
        }
        Cmd::Probe {
            checkpoint,
            config,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let seed = pick_seed(&cfg, seed);
            let (model, header) = load_model(&checkpoint, &cfg)?;
            let world = generate_world(&cfg.world_for_seed(seed))?;
            let dataset = render_dataset(&world, cfg.dataset.images_per_identity_per_domain)?;
            let splits = make_splits(&world, &dataset, &cfg.split_config())?;
            let stream = if model.shape.use_fsts { Stream::Slow } else { Stream::Fast };
            let mut indices = splits.query.clone();
            indices.extend_from_slice(&splits.gallery);
            let samples: Vec<&crate::synthworld::ImageSample> =
                indices.iter().map(|&i| &dataset.samples[i]).collect();

            fs::create_dir_all(&out)?;
            let rows = model.extract_features(stream, &samples)?;
            let width = rows.first().map(|r| r.len()).unwrap_or(0);
            let flat: Vec<f64> = rows.iter().flatten().copied().collect();
            let features = RealArray::new(vec![rows.len(), width], flat)?;
            let mut blobs = IndexMap::new();
            blobs.insert("features".to_string(), features);
            write_blobs(
                &out.join("features.bin"),
                &serde_json::json!({"kind": "features", "count": rows.len(), "width": width}),
                &blobs,
            )?;
            write_json(
                &out.join("meta.json"),
                &serde_json::json!({
                    "seed": seed,
                    "config_hash": header.config_hash,
                    "feature_width": width,
                    "items": indices
                        .iter()
                        .map(|&i| {
                            let s = &dataset.samples[i];
                            serde_json::json!({
                                "identity": s.identity,
                                "camera": s.camera,
                                "domain": s.domain,
                            })
                        })
                        .collect::<Vec<_>>(),
                }),
            )?;

            if let Some(ps) =
                crate::harness::model::prompt_set(&model, model.stream(stream), 0)?
            {
                let rs = model.project_features(stream, &samples)?;
                let items: Vec<ProbeItem> = rs
                    .into_iter()
                    .zip(&indices)
                    .map(|(r, &i)| ProbeItem {
                        r,
                        identity: dataset.samples[i].identity,
                    })
                    .collect();
                let top_n = 10.min(items.len());
                let probe = attribute_probe(&ps, &items, &world, top_n)?;
                let gram = gram_report(&ps)?;
                write_json(
                    &out.join("probe.json"),
                    &serde_json::json!({
                        "seed": seed,
                        "recovery_score": probe.recovery_score,
                        "per_attribute": probe.per_attribute,
                        "gram_mean_abs_off_diag": gram.mean_abs_off_diag,
                        "gram_max_abs_off_diag": gram.max_abs_off_diag,
                    }),
                )?;
                let rows: Vec<Vec<f64>> = (0..ps.prompts.rows())
                    .map(|i| ps.prompts.row_slice(i).to_vec())
                    .collect();
                write_json(
                    &out.join("prompts.json"),
                    &serde_json::json!({"prompts": rows, "selection_histogram": null}),
                )?;
                println!("probe recovery score: {:.3}", probe.recovery_score);
            }
            Ok(())
        }
        Cmd::Ablate { config, out } => {
            let cfg = load_config(&config)?;
            let table = ablate(&cfg)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("ablation.csv"), to_csv(&table))?;
            write_json(&out.join("ablation.json"), &table)?;
            let failed = table.rows.iter().filter(|r| r.status != "ok").count();
            println!(
                "{} runs complete ({} failed); table at {}",
                table.rows.len(),
                failed,
                out.join("ablation.csv").display()
            );
            Ok(())
        }
    }
}
