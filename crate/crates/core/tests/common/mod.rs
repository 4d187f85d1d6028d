//! Brute-force re-implementations of library routines. Each `*_max_error`
//! runs the library and the oracle on `instances` random tiny inputs and
//! returns the worst relative error.

#![allow(dead_code)]

use ggm_core::concepts::{build_gt_relation, cosine, ConceptKind, ConceptVocabulary, SceneSpec};
use ggm_core::encoder::{encoder_iteration_values, gcn_layer_values, graph_readout_values, relation_from_nodes_values};
use ggm_core::numerics::{Matrix, RngState, SeededRng};
use ggm_core::rggm::{loss_kl_symmetric, score_generated};


type Grid = Vec<Vec<f64>>;

fn rng(case: u64) -> SeededRng {
    RngState::new(2024, case).generator()
}

fn grid(g: &mut SeededRng, r: usize, c: usize) -> Grid {
    (0..r).map(|_| (0..c).map(|_| g.normal()).collect()).collect()
}

fn to_matrix(m: &Grid) -> Matrix {
    Matrix::from_rows(m).unwrap()
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn rel(got: f64, want: f64) -> f64 {
    (got - want).abs() / want.abs().max(1.0)
}

fn grid_error(got: &Matrix, want: &Grid) -> f64 {
    if got.shape() != (want.len(), want[0].len()) {
        return f64::INFINITY;
    }
    let mut worst = 0.0f64;
    for (i, row) in want.iter().enumerate() {
        for (j, w) in row.iter().enumerate() {
            worst = worst.max(rel(got.get(i, j), *w));
        }
    }
    worst
}

/// `out[i][j] = sigmoid(Σ_k (Σ_m R[i][m] V[m][k]) W[i·d + k][j] + b[i][j])`.
fn gcn_oracle(r: &Grid, v: &Grid, w: &Grid, b: &Grid) -> Grid {
    let (n, d) = (v.len(), v[0].len());
    let mut out = vec![vec![0.0; d]; n];
    for i in 0..n {
        let mut msg = vec![0.0; d];
        for (m, vm) in v.iter().enumerate() {
            for k in 0..d {
                msg[k] += r[i][m] * vm[k];
            }
        }
        for j in 0..d {
            let mut z = b[i][j];
            for k in 0..d {
                z += msg[k] * w[i * d + k][j];
            }
            out[i][j] = sig(z);
        }
    }
    out
}

fn assemble_oracle(v: &Grid, wa: &Grid, ba: &Grid) -> Grid {
    let (n, d) = (v.len(), v[0].len());
    (0..n)
        .map(|i| {
            (0..d)
                .map(|j| {
                    let z: f64 = ba[i][j] + (0..d).map(|k| v[i][k] * wa[i * d + k][j]).sum::<f64>();
                    z.max(0.0)
                })
                .collect()
        })
        .collect()
}

fn dims(g: &mut SeededRng) -> (usize, usize) {
    (2 + g.below(4), 1 + g.below(5))
}

pub fn gcn_layer_max_error(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for case in 0..instances {
        let mut g = rng(case);
        let (n, d) = dims(&mut g);
        let (r, v, w, b) = (grid(&mut g, n, n), grid(&mut g, n, d), grid(&mut g, n * d, d), grid(&mut g, n, d));
        let got = gcn_layer_values(&to_matrix(&r), &to_matrix(&v), &to_matrix(&w), &to_matrix(&b)).unwrap();
        worst = worst.max(grid_error(&got, &gcn_oracle(&r, &v, &w, &b)));
    }
    worst
}

pub fn encoder_iteration_max_error(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for case in 0..instances {
        let mut g = rng(1000 + case);
        let (n, d) = dims(&mut g);
        let layers_n = 1 + g.below(3);
        let r = grid(&mut g, n, n);
        let v0 = grid(&mut g, n, d);
        let layers: Vec<(Grid, Grid)> = (0..layers_n).map(|_| (grid(&mut g, n * d, d), grid(&mut g, n, d))).collect();
        let (wa, ba) = (grid(&mut g, n * d, d), grid(&mut g, n, d));

        let mut want = assemble_oracle(&v0, &wa, &ba);
        let mut cur = v0.clone();
        for (w, b) in &layers {
            cur = gcn_oracle(&r, &cur, w, b);
            let term = assemble_oracle(&cur, &wa, &ba);
            for i in 0..n {
                for j in 0..d {
                    want[i][j] += term[i][j];
                }
            }
        }
        let lm: Vec<(Matrix, Matrix)> = layers.iter().map(|(w, b)| (to_matrix(w), to_matrix(b))).collect();
        let got = encoder_iteration_values(&lm, (&to_matrix(&wa), &to_matrix(&ba)), &to_matrix(&v0), &to_matrix(&r))
            .unwrap();
        worst = worst.max(grid_error(&got, &want));
    }
    worst
}

pub fn relation_from_nodes_max_error(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for case in 0..instances {
        let mut g = rng(2000 + case);
        let (n, d) = dims(&mut g);
        let v = grid(&mut g, n, d);
        let want: Grid = (0..n)
            .map(|i| (0..n).map(|j| sig((0..d).map(|k| v[i][k] * v[j][k]).sum())).collect())
            .collect();
        worst = worst.max(grid_error(&relation_from_nodes_values(&to_matrix(&v)).unwrap(), &want));
    }
    worst
}

pub fn graph_readout_max_error(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for case in 0..instances {
        let mut g = rng(2500 + case);
        let (n, d) = dims(&mut g);
        let v = grid(&mut g, n, d);
        let want = vec![(0..d).map(|k| v.iter().map(|row| row[k]).sum::<f64>() / n as f64).collect::<Vec<_>>()];
        worst = worst.max(grid_error(&graph_readout_values(&to_matrix(&v)).unwrap(), &want));
    }
    worst
}

pub fn gt_relation_max_error(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for case in 0..instances {
        let mut g = rng(3000 + case);
        let vocab = ConceptVocabulary {
            num_classes: 3 + g.below(6),
            num_attributes: 2 + g.below(6),
            embed_dim: 1 + g.below(8),
            embed_seed: case,
        };
        let n = 2 + g.below(vocab.num_classes - 1);
        let mut classes: Vec<usize> = (0..vocab.num_classes).collect();
        g.shuffle(&mut classes);
        let objects: Vec<(usize, usize)> = classes[..n].iter().map(|&c| (c, g.below(vocab.num_attributes))).collect();
        let scene = SceneSpec { objects: objects.clone() };

        let mut want = vec![vec![0.0; n]; n];
        for i in 0..n {
            for j in 0..n {
                want[i][j] = if i == j {
                    1.0
                } else {
                    let ci = vocab.embed(ConceptKind::Class, objects[i].0).unwrap();
                    let cj = vocab.embed(ConceptKind::Class, objects[j].0).unwrap();
                    let ai = vocab.embed(ConceptKind::Attribute, objects[i].1).unwrap();
                    let aj = vocab.embed(ConceptKind::Attribute, objects[j].1).unwrap();
                    let c = (cosine(&ci, &aj) + cosine(&cj, &ai)) / 2.0;
                    ((c + 1.0) / 2.0).clamp(0.0, 1.0)
                };
            }
        }
        worst = worst.max(grid_error(&build_gt_relation(&scene, &vocab).unwrap(), &want));
    }
    worst
}

pub fn score_generated_max_error(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for case in 0..instances {
        let mut g = rng(4000 + case);
        let len = 2 + g.below(12);
        let scale = if case % 4 == 0 { 1e-5 } else { 1.0 };
        let values: Vec<f64> = (0..len).map(|_| g.normal() * scale).collect();
        let floor = 1e-6;
        let mu = values.iter().sum::<f64>() / len as f64;
        let var = values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / len as f64;
        let want: Vec<f64> = values.iter().map(|v| -(v - mu) / var.max(floor)).collect();
        let got = score_generated(&values, floor).unwrap();
        for (a, b) in got.iter().zip(&want) {
            worst = worst.max(rel(*a, *b));
        }
    }
    worst
}

fn hist_oracle(values: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for &v in values {
        // bin b covers [b/bins, (b+1)/bins); 1.0 and above fall into the last bin
        let mut idx = bins - 1;
        for b in 0..bins {
            if v < (b + 1) as f64 / bins as f64 {
                idx = b;
                break;
            }
        }
        h[idx] += 1.0;
    }
    h.iter().map(|c| c / values.len() as f64).collect()
}

pub fn loss_kl_symmetric_max_error(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for case in 0..instances {
        let mut g = rng(5000 + case);
        let bins = 2 + g.below(16);
        let eps = 1e-3;
        let p_sample: Vec<f64> = (0..1 + g.below(30)).map(|_| g.open01()).collect();
        let q_sample: Vec<f64> = (0..1 + g.below(30)).map(|_| g.open01()).collect();
        let smooth = |h: Vec<f64>| -> Vec<f64> {
            let z: f64 = h.iter().map(|x| x + eps).sum();
            h.iter().map(|x| (x + eps) / z).collect()
        };
        let p = smooth(hist_oracle(&p_sample, bins));
        let q = smooth(hist_oracle(&q_sample, bins));
        let kl = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * (x / y).ln()).sum::<f64>();
        let want = kl(&p, &q) + kl(&q, &p);
        let got = loss_kl_symmetric(&p_sample, &q_sample, bins, eps).unwrap();
        worst = worst.max(rel(got, want));
    }
    worst
}
