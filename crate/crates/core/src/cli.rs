//! Config and command implementations behind the `ggm` binary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::concepts::ConceptVocabulary;
use crate::dataset::{generate_dataset, read_split, write_split, DatasetConfig, SyntheticSplit, METRICS_CSV_HEADER};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::gradsuite::{run_suite, SuiteOptions, SuiteReport};
use crate::heatmap;
use crate::rggm::{NoiseScoreMode, LossBreakdown};
use crate::trainer::{self, relation_pair, run_experiment, run_sweep, ExperimentReport, InferencePath, Mode, SweepReport, TrainConfig};
use crate::vqa::EmbeddingTable;

/// Every knob of every command in one flat JSON object. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub tail_quantile: f64,
    pub sweep_etas: Vec<f64>,
    pub sweep_seed: u64,

    pub num_classes: usize,
    pub num_attributes: usize,
    pub train_size: usize,
    pub id_test_size: usize,
    pub ood_test_size: usize,
    pub holdout_fraction: f64,
    pub rare_fraction: f64,
    pub data_seed: u64,
    pub embed_dim: usize,
    pub embed_seed: u64,

    pub mode: Mode,
    pub eta: f64,
    pub sigma: f64,
    pub n_k: usize,
    pub n_l: usize,
    pub n_objects: usize,
    pub hidden: usize,
    pub alpha_r: f64,
    pub beta_r: f64,
    pub alpha_n: f64,
    pub beta_n: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub noise_score_mode: NoiseScoreMode,
    pub tie_assembly: bool,
    pub separate_encoders: bool,
    pub node_bias: bool,
    pub feature_noise: f64,
    pub kl_bins: usize,
    pub kl_eps: f64,
    pub kl_temperature: f64,
    pub var_floor: f64,
    pub inference: InferencePath,
}

impl Default for CliConfig {
    fn default() -> Self {
        let d = DatasetConfig::default();
        let t = TrainConfig::default();
        Self {
            output_dir: PathBuf::from("out"),
            seeds: vec![0, 1, 2, 3, 4],
            tail_quantile: 0.2,
            sweep_etas: (1..=9).map(|i| i as f64 / 10.0).collect(),
            sweep_seed: 0,
            num_classes: d.num_classes,
            num_attributes: d.num_attributes,
            train_size: d.train_size,
            id_test_size: d.id_test_size,
            ood_test_size: d.ood_test_size,
            holdout_fraction: d.holdout_fraction,
            rare_fraction: d.rare_fraction,
            data_seed: d.seed,
            embed_dim: 16,
            embed_seed: 0,
            mode: t.mode,
            eta: t.eta,
            sigma: t.sigma,
            n_k: t.n_k,
            n_l: t.n_l,
            n_objects: t.n_objects,
            hidden: t.hidden,
            alpha_r: t.alpha_r,
            beta_r: t.beta_r,
            alpha_n: t.alpha_n,
            beta_n: t.beta_n,
            lr: t.lr,
            batch_size: t.batch_size,
            epochs: t.epochs,
            noise_score_mode: t.noise_score_mode,
            tie_assembly: t.tie_assembly,
            separate_encoders: t.separate_encoders,
            node_bias: t.node_bias,
            feature_noise: t.feature_noise,
            kl_bins: t.kl_bins,
            kl_eps: t.kl_eps,
            kl_temperature: t.kl_temperature,
            var_floor: t.var_floor,
            inference: t.inference,
        }
    }
}

impl CliConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset().validate()?;
        self.vocab().validate()?;
        self.train(0).validate()?;
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        if !(self.tail_quantile > 0.0 && self.tail_quantile <= 1.0) {
            return Err(Error::Config(format!("tail_quantile must be in (0, 1], got {}", self.tail_quantile)));
        }
        if self.sweep_etas.is_empty() || self.sweep_etas.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::Config("sweep_etas must be a non-empty list of values in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn dataset(&self) -> DatasetConfig {
        DatasetConfig {
            num_classes: self.num_classes,
            num_attributes: self.num_attributes,
            n_objects: self.n_objects,
            train_size: self.train_size,
            id_test_size: self.id_test_size,
            ood_test_size: self.ood_test_size,
            holdout_fraction: self.holdout_fraction,
            rare_fraction: self.rare_fraction,
            seed: self.data_seed,
        }
    }

    pub fn vocab(&self) -> ConceptVocabulary {
        ConceptVocabulary {
            num_classes: self.num_classes,
            num_attributes: self.num_attributes,
            embed_dim: self.embed_dim,
            embed_seed: self.embed_seed,
        }
    }

    pub fn train(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            mode: self.mode,
            eta: self.eta,
            sigma: self.sigma,
            n_k: self.n_k,
            n_l: self.n_l,
            n_objects: self.n_objects,
            hidden: self.hidden,
            alpha_r: self.alpha_r,
            beta_r: self.beta_r,
            alpha_n: self.alpha_n,
            beta_n: self.beta_n,
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            noise_score_mode: self.noise_score_mode,
            tie_assembly: self.tie_assembly,
            separate_encoders: self.separate_encoders,
            node_bias: self.node_bias,
            feature_noise: self.feature_noise,
            kl_bins: self.kl_bins,
            kl_eps: self.kl_eps,
            kl_temperature: self.kl_temperature,
            var_floor: self.var_floor,
            inference: self.inference,
        }
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    /// Directory for training outputs of the configured mode.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join(match self.mode {
            Mode::Xggm => "xggm",
            Mode::Baseline => "baseline",
        })
    }
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Generates the benchmark and writes it under `<output_dir>/data`.
pub fn cmd_gen_data(cfg: &CliConfig) -> Result<SyntheticSplit> {
    cfg.validate()?;
    let split = generate_dataset(&cfg.dataset())?;
    write_split(&cfg.data_dir(), &split)?;
    Ok(split)
}

pub const LOSS_CSV_HEADER: &str = "step,branch,l_grad,l_dist,l_bce,total";

pub fn loss_csv(log: &[LossBreakdown]) -> String {
    let mut out = format!("{LOSS_CSV_HEADER}\n");
    for (step, b) in log.iter().enumerate() {
        let _ = writeln!(out, "{step},{},{},{},{},{}", b.branch, b.l_grad, b.l_dist, b.l_bce, b.total);
    }
    out
}

pub fn checkpoint_path(run_dir: &Path, seed: u64) -> PathBuf {
    run_dir.join(format!("checkpoint_seed{seed}.json"))
}

/// Trains every seed on the stored dataset and writes checkpoints, loss logs,
/// `report.json` and `metrics.csv` under the run directory.
pub fn cmd_train(cfg: &CliConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let split = read_split(&cfg.data_dir())?;
    let (mut report, runs) = run_experiment(&cfg.train(0), &cfg.seeds, &cfg.vocab(), &split, cfg.tail_quantile)?;
    report.config = serde_json::to_value(cfg)?;
    let dir = cfg.run_dir();
    let mut metrics = format!("seed,{METRICS_CSV_HEADER}\n");
    for run in &runs {
        let seed = run.result.seed;
        Checkpoint { config: cfg.clone(), seed, params: run.params.clone() }.save(&checkpoint_path(&dir, seed))?;
        write_atomic(&dir.join(format!("loss_seed{seed}.csv")), loss_csv(&run.log).as_bytes())?;
        let _ = writeln!(metrics, "{seed},{}", run.result.id.csv_row("id_test"));
        let _ = writeln!(metrics, "{seed},{}", run.result.ood.csv_row("ood_test"));
    }
    write_atomic(&dir.join("metrics.csv"), metrics.as_bytes())?;
    write_atomic(&dir.join("report.json"), &json_bytes(&report)?)?;
    Ok(report)
}

/// Runs the gradient suite with the configured iteration and layer counts.
pub fn cmd_gradcheck(cfg: &CliConfig, corrupt: Option<String>) -> Result<SuiteReport> {
    cfg.validate()?;
    run_suite(&SuiteOptions { n_k: cfg.n_k, n_l: cfg.n_l, corrupt, ..SuiteOptions::default() })
}

pub fn gradcheck_text(report: &SuiteReport) -> String {
    let mut out = String::new();
    for c in &report.checks {
        let status = if c.passed { "PASS" } else { "FAIL" };
        let _ = writeln!(out, "{status} {:<20} max_rel_err={:.3e} threshold={:.0e}", c.name, c.max_error, c.threshold);
        for (p, e) in &c.per_param {
            let _ = writeln!(out, "    {p:<24} {e:.3e}");
        }
    }
    let _ = writeln!(out, "{}", if report.passed { "all checks passed" } else { "gradient check FAILED" });
    out
}

/// Which stored split an exported example comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitName {
    Train,
    IdTest,
    OodTest,
}

impl std::str::FromStr for SplitName {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Self::Train),
            "id_test" => Ok(Self::IdTest),
            "ood_test" => Ok(Self::OodTest),
            _ => Err(format!("unknown split {s:?}; expected train, id_test or ood_test")),
        }
    }
}

/// Paths written by [`cmd_export_heatmap`].
#[derive(Clone, Debug)]
pub struct HeatmapFiles {
    pub gt_csv: PathBuf,
    pub gt_pgm: PathBuf,
    pub gen_csv: PathBuf,
    pub gen_pgm: PathBuf,
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// Writes `R_GT` and the generated relation matrix for one example as CSV and PGM.
///
/// The split is regenerated from the config stored in the checkpoint.
pub fn cmd_export_heatmap(checkpoint: &Path, split: SplitName, index: usize, out_prefix: &Path) -> Result<HeatmapFiles> {
    let ckpt = Checkpoint::<CliConfig>::load(checkpoint)?;
    let cfg = &ckpt.config;
    cfg.validate()?;
    let data = generate_dataset(&cfg.dataset())?;
    let examples = match split {
        SplitName::Train => &data.train,
        SplitName::IdTest => &data.id_test,
        SplitName::OodTest => &data.ood_test,
    };
    let ex = examples
        .get(index)
        .ok_or_else(|| Error::Index(format!("example index {index} out of range for a split of {}", examples.len())))?;
    let vocab = cfg.vocab();
    let table = EmbeddingTable::new(&vocab)?;
    let tcfg = cfg.train(ckpt.seed);
    let prepared = trainer::prepare(std::slice::from_ref(ex), &vocab, &table, tcfg.kl_bins)?;
    let (gt, gen) = relation_pair(&ckpt.params, &tcfg, &prepared[0])?;
    let files = HeatmapFiles {
        gt_csv: with_suffix(out_prefix, "_gt.csv"),
        gt_pgm: with_suffix(out_prefix, "_gt.pgm"),
        gen_csv: with_suffix(out_prefix, "_gen.csv"),
        gen_pgm: with_suffix(out_prefix, "_gen.pgm"),
    };
    write_atomic(&files.gt_csv, heatmap::to_csv(&gt).as_bytes())?;
    write_atomic(&files.gt_pgm, heatmap::to_pgm(&gt).as_bytes())?;
    write_atomic(&files.gen_csv, heatmap::to_csv(&gen).as_bytes())?;
    write_atomic(&files.gen_pgm, heatmap::to_pgm(&gen).as_bytes())?;
    Ok(files)
}

/// Re-trains the graph-generative mode for each configured η on `sweep_seed`.
/// Writes `sweep.json` and `sweep.csv` under `<output_dir>/sweep`.
pub fn cmd_sweep(cfg: &CliConfig) -> Result<SweepReport> {
    cfg.validate()?;
    let split = read_split(&cfg.data_dir())?;
    let mut report =
        run_sweep(&cfg.train(cfg.sweep_seed), &cfg.sweep_etas, cfg.sweep_seed, &cfg.vocab(), &split, cfg.tail_quantile)?;
    report.config = serde_json::to_value(cfg)?;
    let dir = cfg.output_dir.join("sweep");
    let mut csv = String::from("eta,id_all,ood_all,ood_tail,ood_head,gap\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in &report.rows {
        let _ = writeln!(csv, "{},{},{},{},{},{}", r.eta, r.id.all, r.ood.all, opt(r.ood.tail), opt(r.ood.head), opt(r.ood.gap));
    }
    let _ = writeln!(csv, "mean,,{},,,", report.ood_all_mean);
    let _ = writeln!(csv, "std,,{},,,", report.ood_all_std);
    write_atomic(&dir.join("sweep.csv"), csv.as_bytes())?;
    write_atomic(&dir.join("sweep.json"), &json_bytes(&report)?)?;
    Ok(report)
}
