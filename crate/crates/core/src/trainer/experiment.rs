use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{predict, prepare, train, Mode, PreparedExample, TrainConfig, TrainState};
use crate::concepts::ConceptVocabulary;
use crate::dataset::{compute_metrics, gap, CompositionFreq, Metrics, SyntheticSplit};
use crate::error::{Error, Result};
use crate::numerics::ParamMap;
use crate::rggm::LossBreakdown;
use crate::vqa::{EmbeddingTable, VqaExample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub id: Metrics,
    pub ood: Metrics,
}

/// Mean and sample standard deviation of every reported field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: serde_json::Value,
    pub per_seed: Vec<SeedResult>,
    pub aggregate: Aggregate,
}

/// Everything one seed produces.
#[derive(Clone, Debug)]
pub struct SeedRun {
    pub result: SeedResult,
    pub params: ParamMap,
    pub log: Vec<LossBreakdown>,
}

pub fn evaluate_split(
    params: &ParamMap,
    cfg: &TrainConfig,
    prepared: &[PreparedExample],
    examples: &[VqaExample],
    freq: &CompositionFreq,
    tail_quantile: f64,
) -> Result<Metrics> {
    let predictions = prepared.iter().map(|ex| predict(params, cfg, ex)).collect::<Result<Vec<_>>>()?;
    compute_metrics(&predictions, examples, freq, tail_quantile)
}

/// Prepared copies of the three splits.
pub struct PreparedSplit {
    pub train: Vec<PreparedExample>,
    pub id_test: Vec<PreparedExample>,
    pub ood_test: Vec<PreparedExample>,
}

pub fn prepare_split(cfg: &TrainConfig, vocab: &ConceptVocabulary, split: &SyntheticSplit) -> Result<PreparedSplit> {
    check_consistency(cfg, vocab, split)?;
    let table = EmbeddingTable::new(vocab)?;
    Ok(PreparedSplit {
        train: prepare(&split.train, vocab, &table, cfg.kl_bins)?,
        id_test: prepare(&split.id_test, vocab, &table, cfg.kl_bins)?,
        ood_test: prepare(&split.ood_test, vocab, &table, cfg.kl_bins)?,
    })
}

fn check_consistency(cfg: &TrainConfig, vocab: &ConceptVocabulary, split: &SyntheticSplit) -> Result<()> {
    cfg.validate()?;
    vocab.validate()?;
    let all = split.train.iter().chain(&split.id_test).chain(&split.ood_test);
    if let Some(ex) = all.clone().find(|ex| ex.scene.num_objects() != cfg.n_objects) {
        return Err(Error::Config(format!(
            "dataset scene has {} objects but n_objects = {}",
            ex.scene.num_objects(),
            cfg.n_objects
        )));
    }
    let freq = &split.composition_freq.0;
    if freq.len() != vocab.num_classes || freq.iter().any(|row| row.len() != vocab.num_attributes) {
        return Err(Error::Config("frequency table does not match the vocabulary".into()));
    }
    for ex in all {
        ex.validate(vocab).map_err(|e| Error::Config(format!("dataset/vocabulary mismatch: {e}")))?;
    }
    if split.train.is_empty() || split.id_test.is_empty() || split.ood_test.is_empty() {
        return Err(Error::Config("every split needs at least one example".into()));
    }
    Ok(())
}

/// Trains one seed and scores both test splits.
pub fn run_seed(
    cfg: &TrainConfig,
    seed: u64,
    vocab: &ConceptVocabulary,
    split: &SyntheticSplit,
    prepared: &PreparedSplit,
    tail_quantile: f64,
) -> Result<SeedRun> {
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let mut state = TrainState::new(&cfg, vocab)?;
    let log = train(&mut state, &prepared.train, &cfg)?;
    let freq = &split.composition_freq;
    let id = evaluate_split(&state.params, &cfg, &prepared.id_test, &split.id_test, freq, tail_quantile)?;
    let mut ood = evaluate_split(&state.params, &cfg, &prepared.ood_test, &split.ood_test, freq, tail_quantile)?;
    ood.gap = Some(gap(id.all, ood.all));
    Ok(SeedRun { result: SeedResult { seed, id, ood }, params: state.params, log })
}

fn fields(r: &SeedResult) -> Vec<(&'static str, Option<f64>)> {
    vec![
        ("id_all", Some(r.id.all)),
        ("id_tail", r.id.tail),
        ("id_head", r.id.head),
        ("id_delta", r.id.delta),
        ("ood_all", Some(r.ood.all)),
        ("ood_tail", r.ood.tail),
        ("ood_head", r.ood.head),
        ("ood_delta", r.ood.delta),
        ("gap", r.ood.gap),
    ]
}

/// Mean and sample std (zero for a single seed) over fields defined in every seed.
pub fn aggregate(results: &[SeedResult]) -> Aggregate {
    let mut mean = BTreeMap::new();
    let mut std = BTreeMap::new();
    if results.is_empty() {
        return Aggregate { mean, std };
    }
    let per_seed: Vec<_> = results.iter().map(fields).collect();
    for (i, (name, _)) in per_seed[0].iter().enumerate() {
        let values: Option<Vec<f64>> = per_seed.iter().map(|f| f[i].1).collect();
        if let Some(values) = values {
            let (m, s) = mean_std(&values);
            mean.insert(name.to_string(), m);
            std.insert(name.to_string(), s);
        }
    }
    Aggregate { mean, std }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (m, 0.0);
    }
    let var = values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var.sqrt())
}

/// Trains and evaluates every seed on one dataset.
pub fn run_experiment(
    cfg: &TrainConfig,
    seeds: &[u64],
    vocab: &ConceptVocabulary,
    split: &SyntheticSplit,
    tail_quantile: f64,
) -> Result<(ExperimentReport, Vec<SeedRun>)> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let prepared = prepare_split(cfg, vocab, split)?;
    let runs = seeds
        .iter()
        .map(|&s| run_seed(cfg, s, vocab, split, &prepared, tail_quantile))
        .collect::<Result<Vec<_>>>()?;
    let per_seed: Vec<SeedResult> = runs.iter().map(|r| r.result.clone()).collect();
    let report =
        ExperimentReport { config: serde_json::to_value(cfg)?, aggregate: aggregate(&per_seed), per_seed };
    Ok((report, runs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub eta: f64,
    pub id: Metrics,
    pub ood: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: serde_json::Value,
    pub seed: u64,
    pub rows: Vec<SweepRow>,
    pub ood_all_mean: f64,
    pub ood_all_std: f64,
}

/// Re-runs the graph-generative mode once per branch threshold on one seed.
pub fn run_sweep(
    cfg: &TrainConfig,
    etas: &[f64],
    seed: u64,
    vocab: &ConceptVocabulary,
    split: &SyntheticSplit,
    tail_quantile: f64,
) -> Result<SweepReport> {
    if etas.is_empty() {
        return Err(Error::Config("sweep needs at least one eta".into()));
    }
    let base = TrainConfig { mode: Mode::Xggm, ..cfg.clone() };
    let prepared = prepare_split(&base, vocab, split)?;
    let rows = etas
        .iter()
        .map(|&eta| {
            let c = TrainConfig { eta, ..base.clone() };
            let run = run_seed(&c, seed, vocab, split, &prepared, tail_quantile)?;
            Ok(SweepRow { eta, id: run.result.id, ood: run.result.ood })
        })
        .collect::<Result<Vec<_>>>()?;
    let ood: Vec<f64> = rows.iter().map(|r| r.ood.all).collect();
    let (ood_all_mean, ood_all_std) = mean_std(&ood);
    Ok(SweepReport { config: serde_json::to_value(&base)?, seed, rows, ood_all_mean, ood_all_std })
}
