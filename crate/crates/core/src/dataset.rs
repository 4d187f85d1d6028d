//! Synthetic compositional OOD benchmark and the accuracy metrics engine.
//!
//! A composition is a `(class, attribute)` pair. A fraction of compositions
//! never appears in training scenes ("held out"), another fraction appears
//! rarely. The OOD split asks only about held-out or rare compositions; the
//! ID split mirrors training.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::concepts::SceneSpec;
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::numerics::{RngState, SeededRng};
use crate::vqa::VqaExample;

/// Sampling weight of a rare composition relative to a regular one.
pub const RARE_WEIGHT: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub num_attributes: usize,
    pub n_objects: usize,
    pub train_size: usize,
    pub id_test_size: usize,
    pub ood_test_size: usize,
    pub holdout_fraction: f64,
    pub rare_fraction: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 8,
            num_attributes: 8,
            n_objects: 8,
            train_size: 2000,
            id_test_size: 500,
            ood_test_size: 500,
            holdout_fraction: 0.2,
            rare_fraction: 0.1,
            seed: 7,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.num_classes < 2 || self.num_attributes < 2 {
            return bad("need >= 2 classes and attributes".into());
        }
        if self.n_objects < 2 || self.n_objects > self.num_classes {
            return bad(format!("n_objects must be in [2, num_classes], got {}", self.n_objects));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return bad(format!("holdout_fraction must be in (0, 1), got {}", self.holdout_fraction));
        }
        if !(self.rare_fraction >= 0.0) || self.holdout_fraction + self.rare_fraction >= 1.0 {
            return bad("holdout_fraction + rare_fraction must be < 1 and rare_fraction >= 0".into());
        }
        if self.train_size == 0 || self.id_test_size == 0 || self.ood_test_size == 0 {
            return bad("split sizes must be >= 1".into());
        }
        Ok(())
    }

    fn num_compositions(&self) -> usize {
        self.num_classes * self.num_attributes
    }
}

/// Train-set occurrence count of every composition, indexed `[class][attribute]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CompositionFreq(pub Vec<Vec<u64>>);

impl CompositionFreq {
    pub fn zeros(num_classes: usize, num_attributes: usize) -> Self {
        Self(vec![vec![0; num_attributes]; num_classes])
    }

    pub fn get(&self, class: usize, attribute: usize) -> u64 {
        self.0[class][attribute]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().flatten().sum()
    }

    pub fn from_examples(examples: &[VqaExample], num_classes: usize, num_attributes: usize) -> Self {
        let mut f = Self::zeros(num_classes, num_attributes);
        for ex in examples {
            for &(c, a) in &ex.scene.objects {
                f.0[c][a] += 1;
            }
        }
        f
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSplit {
    pub train: Vec<VqaExample>,
    pub id_test: Vec<VqaExample>,
    pub ood_test: Vec<VqaExample>,
    pub composition_freq: CompositionFreq,
    pub heldout: Vec<(usize, usize)>,
    pub rare: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Kind {
    Regular,
    Rare,
    HeldOut,
}

struct Sampler<'a> {
    cfg: &'a DatasetConfig,
    kinds: Vec<Vec<Kind>>,
}

impl Sampler<'_> {
    fn attribute_weights(&self, class: usize) -> Vec<f64> {
        self.kinds[class]
            .iter()
            .map(|k| match k {
                Kind::Regular => 1.0,
                Kind::Rare => RARE_WEIGHT,
                Kind::HeldOut => 0.0,
            })
            .collect()
    }

    /// Scene with distinct classes following the training distribution; `fixed`
    /// pins one object to a given composition.
    fn scene(&self, g: &mut SeededRng, fixed: Option<(usize, usize)>) -> (SceneSpec, usize) {
        let mut classes: Vec<usize> = (0..self.cfg.num_classes).filter(|&c| Some(c) != fixed.map(|f| f.0)).collect();
        g.shuffle(&mut classes);
        let free = self.cfg.n_objects - usize::from(fixed.is_some());
        let mut objects: Vec<(usize, usize)> =
            classes[..free].iter().map(|&c| (c, g.weighted(&self.attribute_weights(c)))).collect();
        let slot = match fixed {
            Some(f) => {
                let slot = g.below(self.cfg.n_objects);
                objects.insert(slot, f);
                slot
            }
            None => g.below(self.cfg.n_objects),
        };
        (SceneSpec { objects }, slot)
    }

    fn in_distribution(&self, g: &mut SeededRng) -> VqaExample {
        let (scene, slot) = self.scene(g, None);
        let (question, answer) = scene.objects[slot];
        VqaExample { scene, question, answer }
    }
}

/// Builds all three splits; deterministic in `cfg.seed`.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<SyntheticSplit> {
    cfg.validate()?;
    let mut g = RngState::new(cfg.seed, 0).generator();
    let total = cfg.num_compositions();
    let n_heldout = ((cfg.holdout_fraction * total as f64).round() as usize).max(1);
    let n_rare = (cfg.rare_fraction * total as f64).round() as usize;
    if n_heldout >= total {
        return Err(Error::Config("every composition would be held out".into()));
    }

    let mut order: Vec<(usize, usize)> =
        (0..cfg.num_classes).flat_map(|c| (0..cfg.num_attributes).map(move |a| (c, a))).collect();
    g.shuffle(&mut order);

    let mut kinds = vec![vec![Kind::Regular; cfg.num_attributes]; cfg.num_classes];
    let regular_left = |kinds: &[Vec<Kind>], c: usize| kinds[c].iter().filter(|k| **k == Kind::Regular).count();
    let mut heldout = Vec::new();
    for &(c, a) in &order {
        if heldout.len() == n_heldout {
            break;
        }
        // every class keeps at least one regular attribute
        if regular_left(&kinds, c) > 1 {
            kinds[c][a] = Kind::HeldOut;
            heldout.push((c, a));
        }
    }
    let mut rare = Vec::new();
    for &(c, a) in &order {
        if rare.len() == n_rare {
            break;
        }
        if kinds[c][a] == Kind::Regular && regular_left(&kinds, c) > 1 {
            kinds[c][a] = Kind::Rare;
            rare.push((c, a));
        }
    }
    if heldout.len() < n_heldout || rare.len() < n_rare {
        return Err(Error::Config(format!(
            "cannot hold out {n_heldout} and make {n_rare} rare while keeping a regular attribute per class"
        )));
    }
    heldout.sort_unstable();
    rare.sort_unstable();

    let sampler = Sampler { cfg, kinds };
    let train: Vec<VqaExample> = (0..cfg.train_size).map(|_| sampler.in_distribution(&mut g)).collect();
    let id_test: Vec<VqaExample> = (0..cfg.id_test_size).map(|_| sampler.in_distribution(&mut g)).collect();
    let targets: Vec<(usize, usize)> = heldout.iter().chain(&rare).copied().collect();
    let ood_test = (0..cfg.ood_test_size)
        .map(|_| {
            let target = targets[g.below(targets.len())];
            let (scene, _) = sampler.scene(&mut g, Some(target));
            VqaExample { scene, question: target.0, answer: target.1 }
        })
        .collect();
    let composition_freq = CompositionFreq::from_examples(&train, cfg.num_classes, cfg.num_attributes);
    Ok(SyntheticSplit { train, id_test, ood_test, composition_freq, heldout, rare })
}

impl SyntheticSplit {
    /// Distinct compositions that occur in training scenes.
    pub fn train_compositions(&self) -> BTreeSet<(usize, usize)> {
        self.train.iter().flat_map(|ex| ex.scene.objects.iter().copied()).collect()
    }
}

/// Accuracy summary of one evaluated split. Percentages; `None` when undefined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub all: f64,
    pub tail: Option<f64>,
    pub head: Option<f64>,
    pub delta: Option<f64>,
    pub gap: Option<f64>,
    pub n: usize,
    pub n_tail: usize,
}

/// `(head - tail) / tail × 100`; undefined for a zero tail accuracy.
pub fn delta(head: f64, tail: f64) -> Option<f64> {
    (tail > 0.0).then(|| (head - tail) / tail * 100.0)
}

/// ID accuracy minus OOD accuracy, in points.
pub fn gap(id_all: f64, ood_all: f64) -> f64 {
    id_all - ood_all
}

/// Whether the composition is in the lowest `tail_quantile` of its question
/// group's train frequencies (zero counts included).
pub fn is_tail(freq: &CompositionFreq, class: usize, attribute: usize, tail_quantile: f64) -> bool {
    let mut group = freq.0[class].clone();
    group.sort_unstable();
    let k = ((tail_quantile * group.len() as f64).ceil() as usize).clamp(1, group.len());
    freq.get(class, attribute) <= group[k - 1]
}

pub fn compute_metrics(
    predictions: &[usize],
    split: &[VqaExample],
    freq: &CompositionFreq,
    tail_quantile: f64,
) -> Result<Metrics> {
    if predictions.len() != split.len() {
        return Err(Error::Contract(format!("{} predictions for {} examples", predictions.len(), split.len())));
    }
    if split.is_empty() {
        return Err(Error::Contract("cannot score an empty split".into()));
    }
    let (mut correct, mut tail_n, mut tail_ok, mut head_ok) = (0usize, 0usize, 0usize, 0usize);
    for (&p, ex) in predictions.iter().zip(split) {
        let (c, a) = ex.composition();
        if c >= freq.0.len() || a >= freq.0[c].len() {
            return Err(Error::Index(format!("composition ({c}, {a}) outside the frequency table")));
        }
        let ok = p == ex.answer;
        correct += usize::from(ok);
        if is_tail(freq, c, a, tail_quantile) {
            tail_n += 1;
            tail_ok += usize::from(ok);
        } else {
            head_ok += usize::from(ok);
        }
    }
    let pct = |num: usize, den: usize| (den > 0).then(|| 100.0 * num as f64 / den as f64);
    let head_n = split.len() - tail_n;
    let (tail, head) = (pct(tail_ok, tail_n), pct(head_ok, head_n));
    Ok(Metrics {
        all: 100.0 * correct as f64 / split.len() as f64,
        tail,
        head,
        delta: tail.zip(head).and_then(|(t, h)| delta(h, t)),
        gap: None,
        n: split.len(),
        n_tail: tail_n,
    })
}

pub const METRICS_CSV_HEADER: &str = "split,all,tail,head,delta,gap";

impl Metrics {
    pub fn csv_row(&self, split: &str) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!("{split},{},{},{},{},{}", self.all, opt(self.tail), opt(self.head), opt(self.delta), opt(self.gap))
    }
}

pub fn write_jsonl(path: &Path, examples: &[VqaExample]) -> Result<()> {
    let mut buf = Vec::new();
    for ex in examples {
        serde_json::to_writer(&mut buf, ex)?;
        buf.write_all(b"\n")?;
    }
    write_atomic(path, &buf)
}

pub fn read_jsonl(path: &Path) -> Result<Vec<VqaExample>> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in file.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub const TRAIN_FILE: &str = "train.jsonl";
pub const ID_TEST_FILE: &str = "id_test.jsonl";
pub const OOD_TEST_FILE: &str = "ood_test.jsonl";
pub const FREQ_FILE: &str = "composition_freq.json";

#[derive(Serialize, Deserialize)]
struct FreqFile {
    counts: CompositionFreq,
    heldout: Vec<(usize, usize)>,
    rare: Vec<(usize, usize)>,
}

/// Writes the three split files and the frequency table into `dir`.
pub fn write_split(dir: &Path, split: &SyntheticSplit) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join(TRAIN_FILE), &split.train)?;
    write_jsonl(&dir.join(ID_TEST_FILE), &split.id_test)?;
    write_jsonl(&dir.join(OOD_TEST_FILE), &split.ood_test)?;
    let freq = FreqFile { counts: split.composition_freq.clone(), heldout: split.heldout.clone(), rare: split.rare.clone() };
    let mut bytes = serde_json::to_vec_pretty(&freq)?;
    bytes.push(b'\n');
    write_atomic(&dir.join(FREQ_FILE), &bytes)
}

pub fn read_split(dir: &Path) -> Result<SyntheticSplit> {
    let freq: FreqFile = serde_json::from_slice(&std::fs::read(dir.join(FREQ_FILE))?)?;
    Ok(SyntheticSplit {
        train: read_jsonl(&dir.join(TRAIN_FILE))?,
        id_test: read_jsonl(&dir.join(ID_TEST_FILE))?,
        ood_test: read_jsonl(&dir.join(OOD_TEST_FILE))?,
        composition_freq: freq.counts,
        heldout: freq.heldout,
        rare: freq.rare,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig { train_size: 300, id_test_size: 50, ood_test_size: 60, ..DatasetConfig::default() }
    }

    #[test]
    fn sizes_and_disjointness() {
        let s = generate_dataset(&small()).unwrap();
        assert_eq!((s.train.len(), s.id_test.len(), s.ood_test.len()), (300, 50, 60));
        let train = s.train_compositions();
        assert!(s.heldout.iter().all(|c| !train.contains(c)));
        assert_eq!(s.heldout.len(), 13);
        let targets: BTreeSet<_> = s.heldout.iter().chain(&s.rare).collect();
        assert!(s.ood_test.iter().all(|ex| targets.contains(&ex.composition())));
    }

    #[test]
    fn examples_are_valid() {
        let s = generate_dataset(&small()).unwrap();
        let vocab = crate::concepts::ConceptVocabulary { num_classes: 8, num_attributes: 8, embed_dim: 4, embed_seed: 0 };
        for ex in s.train.iter().chain(&s.id_test).chain(&s.ood_test) {
            ex.validate(&vocab).unwrap();
            assert_eq!(ex.scene.num_objects(), 8);
        }
    }

    #[test]
    fn freq_matches_brute_force_scan() {
        let s = generate_dataset(&small()).unwrap();
        let mut counts = vec![vec![0u64; 8]; 8];
        for ex in &s.train {
            for (c, a) in &ex.scene.objects {
                counts[*c][*a] += 1;
            }
        }
        assert_eq!(s.composition_freq.0, counts);
        assert_eq!(s.composition_freq.total(), 300 * 8);
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_dataset(&small()).unwrap(), generate_dataset(&small()).unwrap());
    }

    #[test]
    fn infeasible_configs() {
        let cfg = DatasetConfig { holdout_fraction: 0.95, rare_fraction: 0.0, ..small() };
        assert!(matches!(generate_dataset(&cfg), Err(Error::Config(_))));
        assert!(DatasetConfig { n_objects: 9, ..small() }.validate().is_err());
        assert!(DatasetConfig { holdout_fraction: 0.6, rare_fraction: 0.4, ..small() }.validate().is_err());
    }

    #[test]
    fn delta_and_gap_arithmetic() {
        assert!((delta(57.70, 49.80).unwrap() - 15.86).abs() < 0.005);
        assert!((delta(57.70, 49.80).unwrap() - 15.90).abs() <= 0.05);
        assert_eq!(delta(50.0, 50.0), Some(0.0));
        assert_eq!(delta(50.0, 0.0), None);
        assert!((gap(65.21, 59.98) - 5.23).abs() < 1e-9);
    }

    #[test]
    fn tail_is_lowest_quintile() {
        let freq = CompositionFreq(vec![vec![0, 5, 9, 20, 1, 30, 40, 50]]);
        let tail: Vec<_> = (0..8).filter(|&a| is_tail(&freq, 0, a, 0.2)).collect();
        assert_eq!(tail, vec![0, 4]);
    }

    #[test]
    fn metrics_partition_and_empty_tail() {
        let freq = CompositionFreq(vec![vec![10, 10], vec![10, 10]]);
        let ex = |q, a| VqaExample { scene: SceneSpec { objects: vec![(q, a), (1 - q, 0)] }, question: q, answer: a };
        let split = vec![ex(0, 0), ex(1, 1), ex(0, 1)];
        let m = compute_metrics(&[0, 0, 1], &split, &freq, 0.2).unwrap();
        // all counts tie, so every example falls into the tail group
        assert_eq!(m.n_tail, 3);
        assert_eq!(m.head, None);
        assert_eq!(m.delta, None);
        assert!((m.all - 200.0 / 3.0).abs() < 1e-12);
        assert!(compute_metrics(&[0], &split, &freq, 0.2).is_err());
    }
}
