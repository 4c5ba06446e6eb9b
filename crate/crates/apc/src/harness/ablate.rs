//! Ablation sweep: component rows, attribute-count and token-count sweeps,
//! and the orthogonality on/off pair, across every configured seed.
//! Runs are independent and execute on a small worker pool capped by the
//! `APC_THREADS` environment variable.

use std::collections::VecDeque;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::harness::config::{FeatureMode, TrainConfig};
use crate::harness::train::pretrain_and_train;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub variant: String,
    pub seed: u64,
    pub scenario: String,
    pub map: Option<f64>,
    pub rank1: Option<f64>,
    pub source_map: Option<f64>,
    pub gram_mean_off_diag: Option<f64>,
    pub attribute_recovery: Option<f64>,
    pub status: String,
    pub error: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// One named run derived from the base config.
#[derive(Clone, Debug)]
pub struct AblationJob {
    pub group: String,
    pub variant: String,
    pub seed: u64,
    pub cfg: TrainConfig,
}

fn single_domain(cfg: &TrainConfig) -> TrainConfig {
    let mut out = cfg.clone();
    let d = cfg.scenario.train_domains[0];
    out.scenario.train_domains = vec![d];
    out.scenario.test_domains = vec![d];
    out
}

fn component_variant(cfg: &TrainConfig, fsts: bool, sad: bool, pcm: bool) -> TrainConfig {
    let mut out = cfg.clone();
    out.ablation.fsts = fsts;
    out.ablation.sad = sad;
    out.ablation.pcm = pcm;
    out.ablation.features = if sad { FeatureMode::Concat } else { FeatureMode::VisualOnly };
    out
}

/// The full sweep: 4 component rows + 4 attribute counts + 4 token counts
/// + orthogonality on/off, per seed.
pub fn ablation_jobs(cfg: &TrainConfig) -> Vec<AblationJob> {
    let mut jobs = Vec::new();
    for &seed in &cfg.seeds {
        for (variant, fsts, sad, pcm) in [
            ("base", false, false, false),
            ("fsts", true, false, false),
            ("fsts_sad", true, true, false),
            ("fsts_sad_pcm", true, true, true),
        ] {
            jobs.push(AblationJob {
                group: "components".into(),
                variant: variant.into(),
                seed,
                cfg: component_variant(cfg, fsts, sad, pcm),
            });
        }
        for s in [4usize, 8, 16, 32] {
            let mut c = single_domain(cfg);
            c.sad.attribute_count = s;
            c.sad.top_k = (s / 4).max(1).min(cfg.sad.top_k);
            jobs.push(AblationJob {
                group: "attribute_count".into(),
                variant: format!("S{s}"),
                seed,
                cfg: c,
            });
        }
        for l in [1usize, 2, 4, 8] {
            let mut c = single_domain(cfg);
            c.sad.tokens_per_attribute = l;
            jobs.push(AblationJob {
                group: "tokens_per_attribute".into(),
                variant: format!("L{l}"),
                seed,
                cfg: c,
            });
        }
        for on in [true, false] {
            let mut c = single_domain(cfg);
            c.ablation.orth = on;
            jobs.push(AblationJob {
                group: "orthogonality".into(),
                variant: if on { "with_orth".into() } else { "without_orth".into() },
                seed,
                cfg: c,
            });
        }
    }
    jobs
}

pub fn run_job(job: &AblationJob) -> AblationRow {
    match pretrain_and_train(&job.cfg, job.seed) {
        Ok(outcome) => {
            let primary = outcome.report.primary_eval();
            let source = outcome
                .report
                .eval("source:sus")
                .or_else(|| outcome.report.eval("source:fus"));
            AblationRow {
                group: job.group.clone(),
                variant: job.variant.clone(),
                seed: job.seed,
                scenario: outcome.report.scenario.clone(),
                map: primary.map(|e| e.map),
                rank1: primary.map(|e| e.cmc.r1),
                source_map: source.map(|e| e.map),
                gram_mean_off_diag: outcome.report.gram.as_ref().map(|g| g.mean_abs_off_diag),
                attribute_recovery: outcome.report.attribute_recovery,
                status: "ok".into(),
                error: None,
            }
        }
        Err(e) => AblationRow {
            group: job.group.clone(),
            variant: job.variant.clone(),
            seed: job.seed,
            scenario: String::new(),
            map: None,
            rank1: None,
            source_map: None,
            gram_mean_off_diag: None,
            attribute_recovery: None,
            status: "failed".into(),
            error: Some(e.to_string()),
        },
    }
}

pub fn worker_count(jobs: usize) -> usize {
    let cap = std::env::var("APC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        });
    cap.min(jobs).max(1)
}

/// Execute the sweep. Individual failures are recorded in their rows; the
/// remaining runs continue.
pub fn ablate(cfg: &TrainConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let jobs = ablation_jobs(cfg);
    let workers = worker_count(jobs.len());
    let queue: Mutex<VecDeque<(usize, AblationJob)>> =
        Mutex::new(jobs.into_iter().enumerate().collect());
    let results: Mutex<Vec<(usize, AblationRow)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let next = queue.lock().unwrap().pop_front();
                let Some((i, job)) = next else { break };
                let row = run_job(&job);
                results.lock().unwrap().push((i, row));
            });
        }
    });
    let mut rows = results.into_inner().unwrap();
    rows.sort_by_key(|(i, _)| *i);
    Ok(AblationTable {
        rows: rows.into_iter().map(|(_, r)| r).collect(),
    })
}

pub fn to_csv(table: &AblationTable) -> String {
    let mut out = String::from(
        "group,variant,seed,scenario,map,rank1,source_map,gram_mean_off_diag,attribute_recovery,status,error\n",
    );
    let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{:?},{},{},{},{},{},{},{}\n",
            r.group,
            r.variant,
            r.seed,
            r.scenario,
            fmt(r.map),
            fmt(r.rank1),
            fmt(r.source_map),
            fmt(r.gram_mean_off_diag),
            fmt(r.attribute_recovery),
            r.status,
            r.error.clone().unwrap_or_default().replace(',', ";"),
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_count_is_fourteen_per_seed() {
        let mut cfg = TrainConfig::default();
        cfg.seeds = vec![0, 1];
        let jobs = ablation_jobs(&cfg);
        assert_eq!(jobs.len(), (4 + 4 + 4 + 2) * 2);
        for j in &jobs {
            j.cfg.validate().unwrap();
        }
    }

    #[test]
    fn sweep_jobs_are_single_domain() {
        let cfg = TrainConfig::default();
        for j in ablation_jobs(&cfg) {
            if j.group != "components" {
                assert!(!j.cfg.is_dg(), "{} should be single-domain", j.variant);
            } else {
                assert!(j.cfg.is_dg());
            }
        }
    }

    #[test]
    fn top_k_stays_within_attribute_count() {
        let cfg = TrainConfig::default();
        for j in ablation_jobs(&cfg) {
            assert!(j.cfg.sad.top_k <= j.cfg.sad.attribute_count);
        }
    }
}
