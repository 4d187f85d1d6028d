//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits non-zero if any failed.
//!
//! Runs without the libtest harness so the lines always show: `cargo test -p ggm-core --test acceptance`.

mod common;

use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use ggm_core::cli::CliConfig;
use ggm_core::concepts::{build_gt_relation, ConceptVocabulary, SceneSpec};
use ggm_core::dataset::{compute_metrics, generate_dataset, CompositionFreq};
use ggm_core::encoder::{init_encoder_params, EncoderConfig};
use ggm_core::gradsuite::{run_suite, SuiteOptions};
use ggm_core::numerics::{pack_upper, unpack_upper, upper_len, RngState};
use ggm_core::rggm::{r_gen_values, r_init_values, Branch};
use ggm_core::trainer::{draw_branch, run_experiment, run_sweep, Mode};
use ggm_core::vqa::{bce_loss, VqaExample};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn criterion_1_gradients() -> Outcome {
    let start = Instant::now();
    let report = run_suite(&SuiteOptions { n_objects: 4, hidden: 6, n_k: 2, n_l: 2, ..SuiteOptions::default() }).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let worst = |composite: bool| {
        report
            .checks
            .iter()
            .filter(|c| (c.kind == ggm_core::gradsuite::CheckKind::Composite) == composite)
            .map(|c| c.max_error)
            .fold(0.0, f64::max)
    };
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    outcome(
        report.passed && secs < 30.0,
        format!(
            "{} checks, worst core {:.1e} (<= 1e-4), worst composite {:.1e} (<= 1e-3), {secs:.2}s (< 30s), failed {failed:?}",
            report.checks.len(),
            worst(false),
            worst(true)
        ),
    )
}

fn criterion_2_oracles() -> Outcome {
    const N: u64 = 100;
    let results = [
        ("gcn_layer", common::gcn_layer_max_error(N)),
        ("encoder_iteration", common::encoder_iteration_max_error(N)),
        ("relation_from_nodes", common::relation_from_nodes_max_error(N)),
        ("build_gt_relation", common::gt_relation_max_error(N)),
        ("score_generated", common::score_generated_max_error(N)),
        ("loss_kl_symmetric", common::loss_kl_symmetric_max_error(N)),
    ];
    let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
    let parts: Vec<String> = results.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    outcome(worst <= 1e-12, format!("{N} instances each, max rel err: {}", parts.join(", ")))
}

fn criterion_3_invariants() -> Outcome {
    let mut worst_sym = 0.0f64;
    let mut range_ok = true;
    let mut roundtrip_ok = true;
    for case in 0..200u64 {
        let mut g = RngState::new(31, case).generator();
        let (n, d) = (3 + g.below(6), 1 + g.below(8));
        let p = upper_len(n);
        let gauss = |g: &mut ggm_core::numerics::SeededRng, r, c| g.gaussian_matrix(r, c, 0.0, 1.0).unwrap();
        let (x, w, b) = (gauss(&mut g, 1, d), gauss(&mut g, d, p), gauss(&mut g, 1, p));
        let init = r_init_values(&x, &w, &b, 1.0, RngState::new(32, case), n).unwrap();
        worst_sym = worst_sym.max(init.r0.asymmetry());
        range_ok &= init.r.data().iter().all(|&v| v > 0.0 && v < 1.0);
        range_ok &= (0..n).all(|i| init.r0.get(i, i) == 1.0);
        roundtrip_ok &= pack_upper(&init.r0).unwrap() == init.r_hat;
        roundtrip_ok &= unpack_upper(&pack_upper(&init.r0).unwrap(), n).unwrap() == init.r0;

        let cfg = EncoderConfig { n_objects: n, hidden: d, iterations: 1 + g.below(3), layers: g.below(3), tie_assembly: false };
        let params = init_encoder_params(&cfg, "enc", RngState::new(33, case)).unwrap();
        let objects = gauss(&mut g, n, d).map(|v| v.max(0.0));
        let (rg, trace) = r_gen_values(&params, &cfg, "enc", &objects, &init.r0).unwrap();
        for m in trace.iter().filter_map(|s| s.relation.as_ref()).chain(std::iter::once(&rg)) {
            worst_sym = worst_sym.max(m.asymmetry());
            range_ok &= m.data().iter().all(|&v| v > 0.0 && v < 1.0);
        }

        let vocab = ConceptVocabulary { num_classes: 8, num_attributes: 8, embed_dim: 16, embed_seed: case };
        let mut classes: Vec<usize> = (0..8).collect();
        g.shuffle(&mut classes);
        let scene = SceneSpec { objects: classes[..n].iter().map(|&c| (c, g.below(8))).collect() };
        let gt = build_gt_relation(&scene, &vocab).unwrap();
        worst_sym = worst_sym.max(gt.asymmetry());
        range_ok &= gt.data().iter().all(|&v| (0.0..=1.0).contains(&v));
    }
    let mut bce_err = 0.0f64;
    for k in 1..=16usize {
        for hot in 0..k {
            let t: Vec<f64> = (0..k).map(|i| f64::from(i == hot)).collect();
            bce_err = bce_err.max((bce_loss(&vec![0.0; k], &t).unwrap() - std::f64::consts::LN_2).abs());
        }
    }
    outcome(
        worst_sym <= 1e-12 && range_ok && roundtrip_ok && bce_err <= 1e-12,
        format!(
            "200 instances: max asymmetry {worst_sym:.1e}, ranges ok {range_ok}, pack/unpack exact {roundtrip_ok}, |BCE(0) - ln2| {bce_err:.1e}"
        ),
    )
}

/// Examples whose answers are correct for the first `correct` entries, split into a
/// tail composition `(0, 0)` and a head composition `(0, 2)`.
fn metric_fixture(tail: (usize, usize), head: (usize, usize)) -> (Vec<VqaExample>, Vec<usize>, CompositionFreq) {
    let ex = |a: usize| VqaExample { scene: SceneSpec { objects: vec![(0, a), (1, 1)] }, question: 0, answer: a };
    let mut examples = Vec::new();
    let mut preds = Vec::new();
    for (attr, (n, correct)) in [(0usize, tail), (2usize, head)] {
        for i in 0..n {
            examples.push(ex(attr));
            preds.push(if i < correct { attr } else { 7 });
        }
    }
    // class 0: attribute 0 is the rarest, so with q = 0.2 over 8 attributes it forms the tail
    let mut counts = vec![vec![10u64; 8]; 8];
    counts[0][0] = 0;
    counts[0][1] = 5;
    (examples, preds, CompositionFreq(counts))
}

fn criterion_4_metrics() -> Outcome {
    let (examples, preds, freq) = metric_fixture((1000, 498), (1000, 577));
    let m = compute_metrics(&preds, &examples, &freq, 0.2).unwrap();
    let d = m.delta.unwrap_or(f64::NAN);
    let tail_head_ok = m.tail == Some(49.8) && m.head == Some(57.7);
    let delta_ok = (d - 15.86).abs() < 0.005 && (d - 15.90).abs() <= 0.05;

    let (id_ex, id_preds, freq) = metric_fixture((5000, 3260), (5000, 3261));
    let (ood_ex, ood_preds, _) = metric_fixture((5000, 3000), (5000, 2998));
    let id = compute_metrics(&id_preds, &id_ex, &freq, 0.2).unwrap();
    let ood = compute_metrics(&ood_preds, &ood_ex, &freq, 0.2).unwrap();
    let g = ggm_core::dataset::gap(id.all, ood.all);
    let gap_ok = id.all == 65.21 && ood.all == 59.98 && (g - 5.23).abs() < 1e-9;
    outcome(
        tail_head_ok && delta_ok && gap_ok,
        format!(
            "tail {:?} head {:?} -> delta {d:.4} (15.86; |delta - 15.90| <= 0.05); ID {} OOD {} -> gap {g:.10}",
            m.tail, m.head, id.all, ood.all
        ),
    )
}

fn criterion_5_branches() -> Outcome {
    let steps = 10_000u64;
    let mut fractions = Vec::new();
    let mut deterministic = true;
    for seed in 0..5 {
        let r = (0..steps).filter(|&s| draw_branch(seed, s, 0.8) == Branch::R).count();
        fractions.push(r as f64 / steps as f64);
        deterministic &= (0..steps).all(|s| draw_branch(seed, s, 1.0) == Branch::R);
        deterministic &= (0..steps).all(|s| draw_branch(seed, s, 0.0) == Branch::N);
    }
    let in_band = fractions.iter().all(|f| (0.78..=0.82).contains(f));
    outcome(
        in_band && deterministic,
        format!("eta 0.8 R fraction over 1e4 steps per seed {fractions:?}; eta 0 all N and eta 1 all R: {deterministic}"),
    )
}

struct DirectionalResult {
    improvement: f64,
    outcome: Outcome,
}

fn criterion_6_directional() -> DirectionalResult {
    let cli = CliConfig::default();
    let split = generate_dataset(&cli.dataset()).unwrap();
    let vocab = cli.vocab();
    let start = Instant::now();
    let run = |mode: Mode| {
        let cfg = ggm_core::trainer::TrainConfig { mode, ..cli.train(0) };
        run_experiment(&cfg, &cli.seeds, &vocab, &split, cli.tail_quantile).unwrap().0
    };
    let base = run(Mode::Baseline);
    let xggm = run(Mode::Xggm);
    let secs = start.elapsed().as_secs_f64();
    let m = |r: &ggm_core::trainer::ExperimentReport, k: &str| r.aggregate.mean[k];
    let improvement = m(&xggm, "ood_all") - m(&base, "ood_all");
    let gap_smaller = m(&xggm, "gap") < m(&base, "gap");
    let per_seed = |r: &ggm_core::trainer::ExperimentReport| {
        r.per_seed.iter().map(|s| format!("{:.1}", s.ood.all)).collect::<Vec<_>>().join("/")
    };
    let outcome = outcome(
        improvement >= 2.0 && gap_smaller && secs <= 600.0,
        format!(
            "{} seeds: OOD baseline {:.2} [{}] vs xggm {:.2} [{}] (+{improvement:.2}, need >= 2.0); ID {:.2} vs {:.2}; gap {:.2} vs {:.2}; {secs:.0}s (<= 600s)",
            cli.seeds.len(),
            m(&base, "ood_all"),
            per_seed(&base),
            m(&xggm, "ood_all"),
            per_seed(&xggm),
            m(&base, "id_all"),
            m(&xggm, "id_all"),
            m(&base, "gap"),
            m(&xggm, "gap"),
        ),
    );
    DirectionalResult { improvement, outcome }
}

fn criterion_7_sweep(improvement: f64) -> Outcome {
    let cli = CliConfig::default();
    let split = generate_dataset(&cli.dataset()).unwrap();
    let etas: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let report = run_sweep(&cli.train(0), &etas, 0, &cli.vocab(), &split, cli.tail_quantile).unwrap();
    let ood: Vec<String> = report.rows.iter().map(|r| format!("{:.1}", r.ood.all)).collect();
    outcome(
        report.rows.len() == 9 && report.ood_all_std < improvement,
        format!(
            "OOD over eta 0.1..0.9 [{}]: mean {:.2}, std {:.3} vs improvement {improvement:.2}",
            ood.join("/"),
            report.ood_all_mean,
            report.ood_all_std
        ),
    )
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn criterion_8_determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        format!(r#"{{"output_dir": {out:?}, "train_size": 160, "id_test_size": 40, "ood_test_size": 40, "seeds": [0, 1], "epochs": 2}}"#),
    )
    .unwrap();
    let cfg = cfg.to_str().unwrap().to_owned();
    let ckpt = out.join("xggm/checkpoint_seed0.json").display().to_string();
    let heat = out.join("heat/ex0").display().to_string();
    let report = out.join("gradcheck.json").display().to_string();
    let commands: Vec<Vec<&str>> = vec![
        vec!["gen-data", "--config", &cfg],
        vec!["train", "--config", &cfg, "--mode", "baseline"],
        vec!["train", "--config", &cfg, "--mode", "xggm"],
        vec!["sweep", "--config", &cfg],
        vec!["export-heatmap", "--checkpoint", &ckpt, "--index", "0", "--out", &heat],
        vec!["gradcheck", "--config", &cfg, "--report", &report],
    ];
    let run_all = || {
        for args in &commands {
            let o = Command::new(env!("CARGO_BIN_EXE_ggm")).args(args).output().unwrap();
            assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
        snapshot(&out)
    };
    let first = run_all();
    let second = run_all();
    let differing: Vec<&str> =
        first.iter().zip(&second).filter(|(a, b)| a != b).map(|(a, _)| a.0.as_str()).collect();
    outcome(
        first.len() == second.len() && differing.is_empty(),
        format!("{} commands run twice, {} output files, differing {differing:?}", commands.len(), first.len()),
    )
}

fn main() -> ExitCode {
    let mut lines = Vec::new();
    let mut record = |n: usize, name: &str, o: Outcome| {
        let line = format!("criterion {n} [{}] {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        println!("{line}");
        lines.push((o.passed, line));
    };
    record(1, "gradient suite", criterion_1_gradients());
    record(2, "oracle equivalence", criterion_2_oracles());
    record(3, "structural invariants", criterion_3_invariants());
    record(4, "metric arithmetic", criterion_4_metrics());
    record(5, "branch statistics", criterion_5_branches());
    let directional = criterion_6_directional();
    let improvement = directional.improvement;
    record(6, "directional OOD experiment", directional.outcome);
    record(7, "eta sweep robustness", criterion_7_sweep(improvement));
    record(8, "determinism", criterion_8_determinism());
    let failed = lines.iter().filter(|(p, _)| !p).count();
    println!("acceptance: {} of {} criteria passed", lines.len() - failed, lines.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
