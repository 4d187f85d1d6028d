//! Registered finite-difference checks for every tape operation, the model
//! modules and both full branch objectives.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::concepts::{ConceptVocabulary, SceneSpec};
use crate::encoder::{self, EncoderConfig, EncoderVars};
use crate::error::Result;
use crate::numerics::{grad_check, tape_objective, Matrix, ParamMap, RngState, Tape, Var};
use crate::rggm::{self, Branch};
use crate::trainer::{example_objective, prepare, TrainConfig, TrainState};
use crate::vqa::{self, EmbeddingTable, VqaExample, VqaVars};

/// Threshold for single operations and model modules.
pub const CORE_TOLERANCE: f64 = 1e-4;
/// Threshold for the two full branch objectives.
pub const COMPOSITE_TOLERANCE: f64 = 1e-3;
/// Finite-difference step.
pub const STEP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckKind {
    Core,
    Composite,
}

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: CheckKind,
    pub threshold: f64,
    pub max_error: f64,
    pub per_param: BTreeMap<String, f64>,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct SuiteReport {
    pub n_objects: usize,
    pub hidden: usize,
    pub n_k: usize,
    pub n_l: usize,
    pub checks: Vec<CheckResult>,
    pub passed: bool,
}

/// Dimensions and the optional test hook.
#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub n_objects: usize,
    pub hidden: usize,
    pub n_k: usize,
    pub n_l: usize,
    pub seed: u64,
    /// Name of a check whose analytic gradient gets perturbed before comparison.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self { n_objects: 4, hidden: 6, n_k: 2, n_l: 2, seed: 0, corrupt: None }
    }
}

type Objective<'a> = Box<dyn Fn(&ParamMap) -> Result<(f64, ParamMap)> + 'a>;

struct Check<'a> {
    name: String,
    kind: CheckKind,
    theta: ParamMap,
    f: Objective<'a>,
}

struct Builder {
    rng: crate::numerics::SeededRng,
}

impl Builder {
    fn gauss(&mut self, r: usize, c: usize) -> Matrix {
        self.rng.gaussian_matrix(r, c, 0.0, 1.0).expect("sigma > 0")
    }

    /// Values in `(0.05, 0.95)`, away from histogram edges and kinks.
    fn unit(&mut self, r: usize, c: usize) -> Matrix {
        let data = (0..r * c).map(|_| 0.05 + 0.9 * self.rng.open01()).collect();
        Matrix::from_vec(r, c, data).expect("shape")
    }

    /// Magnitudes in `(0.1, 1.1)` with random signs, so ReLU kinks are far away.
    fn away_from_zero(&mut self, r: usize, c: usize) -> Matrix {
        let data = (0..r * c)
            .map(|_| {
                let m = 0.1 + self.rng.open01();
                if self.rng.open01() < 0.5 {
                    -m
                } else {
                    m
                }
            })
            .collect();
        Matrix::from_vec(r, c, data).expect("shape")
    }
}

/// Reduces a matrix node to a scalar with fixed random weights so every entry matters.
fn weighted_sum(tape: &mut Tape, v: Var, weights: &Matrix) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    let p = tape.mul(v, w)?;
    tape.sum(p)
}

fn op_check<'a, B>(name: &str, theta: ParamMap, build: B) -> Check<'a>
where
    B: Fn(&mut Tape, &BTreeMap<String, Var>) -> Result<Var> + 'a,
{
    Check { name: name.into(), kind: CheckKind::Core, theta, f: Box::new(tape_objective(build)) }
}

fn pm(entries: Vec<(&str, Matrix)>) -> ParamMap {
    entries.into_iter().map(|(k, v)| (k.to_owned(), v)).collect()
}

fn core_op_checks(b: &mut Builder, n: usize, d: usize) -> Vec<Check<'static>> {
    let mut checks = Vec::new();
    let wn = b.gauss(n, d);
    let wnn = b.gauss(n, n);
    let wd = b.gauss(1, d);
    let wp = b.gauss(1, n * (n - 1) / 2);
    let wflat = b.gauss(1, n * d);

    let (a, bm) = (b.gauss(n, d), b.gauss(d, n));
    let w = wnn.clone();
    checks.push(op_check("matmul", pm(vec![("a", a), ("b", bm)]), move |t, v| {
        let o = t.matmul(v["a"], v["b"])?;
        weighted_sum(t, o, &w)
    }));
    let (a, bm) = (b.gauss(n, d), b.gauss(n, d));
    let w = wnn.clone();
    checks.push(op_check("matmul_t", pm(vec![("a", a), ("b", bm)]), move |t, v| {
        let o = t.matmul_t(v["a"], v["b"])?;
        weighted_sum(t, o, &w)
    }));
    for (name, which) in [("add", 0), ("sub", 1), ("mul", 2)] {
        let (a, bm) = (b.gauss(n, d), b.gauss(n, d));
        let w = wn.clone();
        checks.push(op_check(name, pm(vec![("a", a), ("b", bm)]), move |t, v| {
            let o = match which {
                0 => t.add(v["a"], v["b"])?,
                1 => t.sub(v["a"], v["b"])?,
                _ => t.mul(v["a"], v["b"])?,
            };
            weighted_sum(t, o, &w)
        }));
    }
    let (a, row) = (b.gauss(n, d), b.gauss(1, d));
    let w = wn.clone();
    checks.push(op_check("add_row", pm(vec![("a", a), ("row", row)]), move |t, v| {
        let o = t.add_row(v["a"], v["row"])?;
        weighted_sum(t, o, &w)
    }));
    let w = wn.clone();
    checks.push(op_check("scale", pm(vec![("a", b.gauss(n, d))]), move |t, v| {
        let o = t.scale(v["a"], -1.7)?;
        weighted_sum(t, o, &w)
    }));
    let w = wn.clone();
    checks.push(op_check("sigmoid", pm(vec![("a", b.gauss(n, d))]), move |t, v| {
        let o = t.sigmoid(v["a"])?;
        weighted_sum(t, o, &w)
    }));
    let w = wn.clone();
    checks.push(op_check("relu", pm(vec![("a", b.away_from_zero(n, d))]), move |t, v| {
        let o = t.relu(v["a"])?;
        weighted_sum(t, o, &w)
    }));
    checks.push(op_check("sum", pm(vec![("a", b.gauss(n, d))]), |t, v| t.sum(v["a"])));
    checks.push(op_check("mean", pm(vec![("a", b.gauss(n, d))]), |t, v| t.mean(v["a"])));
    checks.push(op_check("sum_squares", pm(vec![("a", b.gauss(n, d))]), |t, v| t.sum_squares(v["a"])));
    let w = wd.clone();
    checks.push(op_check("mean_rows", pm(vec![("a", b.gauss(n, d))]), move |t, v| {
        let o = t.mean_rows(v["a"])?;
        weighted_sum(t, o, &w)
    }));
    let w = wn.clone();
    checks.push(op_check("repeat_rows", pm(vec![("a", b.gauss(1, d))]), move |t, v| {
        let o = t.repeat_rows(v["a"], n)?;
        weighted_sum(t, o, &w)
    }));
    let w = wflat.clone();
    checks.push(op_check("flatten", pm(vec![("a", b.gauss(n, d))]), move |t, v| {
        let o = t.flatten(v["a"])?;
        weighted_sum(t, o, &w)
    }));
    let w = wp.clone();
    checks.push(op_check("pack_upper", pm(vec![("a", b.gauss(n, n))]), move |t, v| {
        let o = t.pack_upper(v["a"])?;
        weighted_sum(t, o, &w)
    }));
    let w = wnn.clone();
    checks.push(op_check("unpack_upper", pm(vec![("r", b.gauss(1, n * (n - 1) / 2))]), move |t, v| {
        let o = t.unpack_upper(v["r"], n)?;
        weighted_sum(t, o, &w)
    }));
    let (m, stack) = (b.gauss(n, d), b.gauss(n * d, d));
    let w = wn.clone();
    checks.push(op_check("per_row_matmul", pm(vec![("m", m), ("w", stack)]), move |t, v| {
        let o = t.per_row_matmul(v["m"], v["w"])?;
        weighted_sum(t, o, &w)
    }));
    let w = wn.clone();
    checks.push(op_check("gaussian_score", pm(vec![("a", b.gauss(n, d))]), move |t, v| {
        let o = t.gaussian_score(v["a"], 1e-6)?;
        weighted_sum(t, o, &w)
    }));
    let (a, bm) = (b.gauss(n, d), b.gauss(n, d).scale(2.0));
    checks.push(op_check("gaussian_kl_sym", pm(vec![("a", a), ("b", bm)]), |t, v| {
        t.gaussian_kl_sym(v["a"], v["b"], 1e-6)
    }));
    let bins = 16;
    let wb = b.gauss(1, bins);
    checks.push(op_check("soft_histogram", pm(vec![("a", b.unit(1, n * (n - 1) / 2))]), move |t, v| {
        let o = t.soft_histogram(v["a"], bins, 0.01)?;
        weighted_sum(t, o, &wb)
    }));
    let (p, q) = (b.unit(1, bins), b.unit(1, bins));
    checks.push(op_check("hist_kl_sym", pm(vec![("p", p), ("q", q)]), |t, v| t.hist_kl_sym(v["p"], v["q"], 1e-3)));
    let target = Matrix::from_vec(1, d, (0..d).map(|i| f64::from(i == 1)).collect()).expect("shape");
    checks.push(op_check("bce_with_logits", pm(vec![("z", b.gauss(1, d))]), move |t, v| {
        t.bce_with_logits(v["z"], &target)
    }));
    checks
}

fn module_checks(b: &mut Builder, opts: &SuiteOptions) -> Result<Vec<Check<'static>>> {
    let (n, d) = (opts.n_objects, opts.hidden);
    let mut checks = Vec::new();
    let wn = b.gauss(n, d);
    let wnn = b.gauss(n, n);

    let r = b.unit(n, n);
    let theta = pm(vec![("v", b.gauss(n, d)), ("w", b.gauss(n * d, d)), ("b", b.gauss(n, d))]);
    let w = wn.clone();
    checks.push(op_check("gcn_layer", theta, move |t, v| {
        let r = t.constant(r.clone())?;
        let o = encoder::gcn_layer(t, r, v["v"], v["w"], v["b"])?;
        weighted_sum(t, o, &w)
    }));

    let enc_cfg = EncoderConfig { n_objects: n, hidden: d, iterations: opts.n_k, layers: opts.n_l, tie_assembly: false };
    let mut theta = encoder::init_encoder_params(&enc_cfg, "enc", RngState::new(opts.seed, 11))?;
    // nonzero biases so every path is exercised
    for (name, m) in theta.iter_mut() {
        if name.ends_with(".b") {
            *m = b.gauss(n, d).scale(0.3);
        }
    }
    theta.insert("v0".into(), b.gauss(n, d));
    let r = b.unit(n, n);
    let w = wn.clone();
    let cfg = enc_cfg;
    checks.push(Check {
        name: "encoder_iteration".into(),
        kind: CheckKind::Core,
        theta: theta.clone(),
        f: Box::new(move |p: &ParamMap| {
            let mut t = Tape::new();
            let enc = EncoderVars::register(&mut t, p, &cfg, "enc")?;
            let v0 = t.param("v0", p["v0"].clone())?;
            let rv = t.constant(r.clone())?;
            let o = encoder::encoder_iteration(&mut t, &enc.iterations[0], v0, rv)?;
            let loss = weighted_sum(&mut t, o, &w)?;
            Ok((t.value(loss).item(), t.backward(loss)?.into_named()))
        }),
    });

    let w = wnn.clone();
    checks.push(op_check("relation_from_nodes", pm(vec![("v", b.gauss(n, d))]), move |t, v| {
        let o = encoder::relation_from_nodes(t, v["v"])?;
        weighted_sum(t, o, &w)
    }));
    let wd = b.gauss(1, d);
    checks.push(op_check("graph_readout", pm(vec![("v", b.gauss(n, d))]), move |t, v| {
        let o = encoder::graph_readout(t, v["v"])?;
        weighted_sum(t, o, &wd)
    }));

    let objects = b.gauss(n, d);
    let cfg = enc_cfg;
    let r0 = b.unit(n, n);
    let r0 = Matrix::from_vec(n, n, (0..n * n).map(|k| {
        let (i, j) = (k / n, k % n);
        if i == j { 1.0 } else { r0.get(i.min(j), i.max(j)) }
    }).collect())?;
    let w = wnn.clone();
    let mut theta = encoder::init_encoder_params(&enc_cfg, "enc", RngState::new(opts.seed, 12))?;
    theta.insert("objects".into(), objects);
    checks.push(Check {
        name: "r_gen".into(),
        kind: CheckKind::Core,
        theta,
        f: Box::new(move |p: &ParamMap| {
            let mut t = Tape::new();
            let enc = EncoderVars::register(&mut t, p, &cfg, "enc")?;
            let o = t.param("objects", p["objects"].clone())?;
            let r0 = t.constant(r0.clone())?;
            let (rg, _) = rggm::r_gen(&mut t, &enc, o, r0)?;
            let loss = weighted_sum(&mut t, rg, &w)?;
            Ok((t.value(loss).item(), t.backward(loss)?.into_named()))
        }),
    });
    Ok(checks)
}

/// Tiny vocabulary, scene and trained-from-scratch parameters for the objective checks.
fn composite_fixture(opts: &SuiteOptions) -> Result<(TrainConfig, ConceptVocabulary, Vec<VqaExample>)> {
    let (n, d) = (opts.n_objects, opts.hidden);
    let vocab = ConceptVocabulary { num_classes: n + 1, num_attributes: 5, embed_dim: 5, embed_seed: opts.seed };
    let cfg = TrainConfig {
        n_objects: n,
        hidden: d,
        n_k: opts.n_k,
        n_l: opts.n_l,
        seed: opts.seed,
        feature_noise: 0.3,
        ..TrainConfig::default()
    };
    let objects = (0..n).map(|i| (i + 1, (i * 3) % 5)).collect();
    let ex = VqaExample { scene: SceneSpec { objects }, question: 2, answer: 3 };
    Ok((cfg, vocab, vec![ex]))
}

type CompositeCase = (String, ParamMap, TrainConfig, crate::trainer::PreparedExample, Branch);

fn composite_checks(opts: &SuiteOptions) -> Result<Vec<CompositeCase>> {
    let (cfg, vocab, examples) = composite_fixture(opts)?;
    let table = EmbeddingTable::new(&vocab)?;
    let prepared = prepare(&examples, &vocab, &table, cfg.kl_bins)?;
    let mut params = TrainState::new(&cfg, &vocab)?.params;
    // nonzero biases so every path is exercised
    let mut b = Builder { rng: RngState::new(opts.seed, 99).generator() };
    for (name, m) in params.iter_mut() {
        if name.ends_with(".b") && name.starts_with("enc") {
            let (r, c) = m.shape();
            *m = b.gauss(r, c).scale(0.3);
        }
    }
    let mut out = Vec::new();
    for (name, branch) in [("rggm_loss", Branch::R), ("nggm_loss", Branch::N)] {
        out.push((name.to_owned(), params.clone(), cfg.clone(), prepared[0].clone(), branch));
    }
    Ok(out)
}

fn evaluate(check: &Check, corrupt: bool) -> Result<CheckResult> {
    let threshold = match check.kind {
        CheckKind::Core => CORE_TOLERANCE,
        CheckKind::Composite => COMPOSITE_TOLERANCE,
    };
    let report = if corrupt {
        grad_check(&check.theta, STEP, |p: &ParamMap| {
            let (v, mut g) = (check.f)(p)?;
            if let Some(first) = g.values_mut().next() {
                first.data_mut()[0] += 0.1;
            }
            Ok((v, g))
        })?
    } else {
        grad_check(&check.theta, STEP, &check.f)?
    };
    let max_error = report.max_error();
    Ok(CheckResult {
        name: check.name.clone(),
        kind: check.kind,
        threshold,
        max_error,
        per_param: report.per_param,
        passed: max_error <= threshold,
    })
}

/// Names of all registered checks, in execution order.
pub fn check_names() -> Vec<String> {
    let opts = SuiteOptions::default();
    let mut b = Builder { rng: RngState::new(opts.seed, 1).generator() };
    let mut names: Vec<String> = core_op_checks(&mut b, opts.n_objects, opts.hidden).into_iter().map(|c| c.name).collect();
    names.extend(module_checks(&mut b, &opts).expect("default dims are valid").into_iter().map(|c| c.name));
    names.extend(["vqa_bce".to_owned(), "rggm_loss".to_owned(), "nggm_loss".to_owned()]);
    names
}

/// Runs every registered check.
pub fn run_suite(opts: &SuiteOptions) -> Result<SuiteReport> {
    let mut b = Builder { rng: RngState::new(opts.seed, 1).generator() };
    let mut checks = core_op_checks(&mut b, opts.n_objects, opts.hidden);
    checks.extend(module_checks(&mut b, opts)?);

    let composites = composite_checks(opts)?;
    let (_, params, cfg, ex, _) = &composites[0];
    let vqa_theta: ParamMap = params.iter().filter(|(k, _)| k.starts_with("vqa.")).map(|(k, v)| (k.clone(), v.clone())).collect();
    let noise = b.gauss(cfg.n_objects, cfg.hidden).scale(0.3);
    let vex = ex.clone();
    checks.push(Check {
        name: "vqa_bce".into(),
        kind: CheckKind::Core,
        theta: vqa_theta,
        f: Box::new(move |p: &ParamMap| {
            let mut t = Tape::new();
            let vars = VqaVars::register(&mut t, p)?;
            let rep = vqa::vqa_r(&mut t, &vars, &vex.input, Some(&noise))?;
            let z = vqa::vqa_c(&mut t, &vars, rep.x, None)?;
            let loss = t.bce_with_logits(z, &vex.input.target)?;
            Ok((t.value(loss).item(), t.backward(loss)?.into_named()))
        }),
    });

    let mut results = Vec::new();
    for c in &checks {
        results.push(evaluate(c, opts.corrupt.as_deref() == Some(c.name.as_str()))?);
    }
    for (name, params, cfg, ex, branch) in &composites {
        let f = example_objective(cfg, *branch, ex, opts.seed)?;
        // only the parameters this branch touches
        let used = f(params)?.1;
        let theta: ParamMap = params.iter().filter(|(k, _)| used.contains_key(*k)).map(|(k, v)| (k.clone(), v.clone())).collect();
        let check = Check { name: name.clone(), kind: CheckKind::Composite, theta, f: Box::new(f) };
        results.push(evaluate(&check, opts.corrupt.as_deref() == Some(name.as_str()))?);
    }
    let passed = results.iter().all(|r| r.passed);
    Ok(SuiteReport { n_objects: opts.n_objects, hidden: opts.hidden, n_k: opts.n_k, n_l: opts.n_l, checks: results, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_suite_passes() {
        let report = run_suite(&SuiteOptions::default()).unwrap();
        for c in &report.checks {
            assert!(c.passed, "{} max error {:e}", c.name, c.max_error);
        }
        let names: Vec<_> = report.checks.iter().map(|c| c.name.clone()).collect();
        assert_eq!(names, check_names());
    }

    #[test]
    fn corrupted_check_fails_alone() {
        let opts = SuiteOptions { corrupt: Some("sigmoid".into()), ..SuiteOptions::default() };
        let report = run_suite(&opts).unwrap();
        assert!(!report.passed);
        let failed: Vec<_> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
        assert_eq!(failed, ["sigmoid"]);
    }
}
