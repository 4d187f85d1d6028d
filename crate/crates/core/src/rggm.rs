//! Relation branch: initialize a noisy relation matrix from `x`, regenerate it
//! through the graph encoder, and score it against the ground-truth relations.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::encoder::{
    encoder_iteration, graph_readout, relation_from_nodes, trace_values, EncoderConfig, EncoderVars,
    IterationTrace, StepVars,
};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{evaluate, smoothed_kl_sym, upper_len, Matrix, ParamMap, RngState, Tape, Var};
use crate::vqa::lookup;

pub const RINIT_W: &str = "rinit.w";
pub const RINIT_B: &str = "rinit.b";

/// Which form of the noise-prior score to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseScoreMode {
    /// `-(r̂ - r)² / σ²`
    Squared,
    /// `-(r̂ - r) / σ²`, the Gaussian score.
    #[default]
    Corrected,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    R,
    N,
    #[serde(rename = "BMU")]
    Bmu,
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Branch::R => "R",
            Branch::N => "N",
            Branch::Bmu => "BMU",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_grad: f64,
    pub l_dist: f64,
    pub l_bce: f64,
    pub total: f64,
    pub branch: Branch,
}

impl LossBreakdown {
    pub fn weighted(l_grad: f64, l_dist: f64, l_bce: f64, alpha: f64, beta: f64, branch: Branch) -> Self {
        Self { l_grad, l_dist, l_bce, total: alpha * l_grad + beta * l_dist + l_bce, branch }
    }

    pub fn is_finite(&self) -> bool {
        [self.l_grad, self.l_dist, self.l_bce, self.total].iter().all(|v| v.is_finite())
    }
}

/// `α·L_∇ + β·L_D + L_bce` for the relation branch.
pub fn rggm_total_loss(l_grad: f64, l_dist: f64, l_bce: f64, alpha: f64, beta: f64) -> LossBreakdown {
    LossBreakdown::weighted(l_grad, l_dist, l_bce, alpha, beta, Branch::R)
}

/// Loss knobs shared by both branches.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearnSettings {
    pub sigma: f64,
    pub noise_score_mode: NoiseScoreMode,
    pub var_floor: f64,
    pub kl_bins: usize,
    pub kl_eps: f64,
    pub kl_temperature: f64,
}

impl Default for LearnSettings {
    fn default() -> Self {
        Self { sigma: 1.0, noise_score_mode: NoiseScoreMode::Corrected, var_floor: 1e-6, kl_bins: 16, kl_eps: 1e-3, kl_temperature: 0.01 }
    }
}

/// `W_r` (`d × P`, `P = N_o(N_o-1)/2`) from `N(0, 1/d)` and a zero bias.
pub fn init_rinit_params(n_objects: usize, hidden: usize, rng: RngState) -> Result<ParamMap> {
    let p = upper_len(n_objects);
    let w = rng.generator().gaussian_matrix(hidden, p, 0.0, (1.0 / hidden as f64).sqrt())?;
    Ok(ParamMap::from([(RINIT_W.to_owned(), w), (RINIT_B.to_owned(), Matrix::zeros(1, p))]))
}

pub fn register_rinit(tape: &mut Tape, params: &ParamMap) -> Result<(Var, Var)> {
    Ok((
        tape.param(RINIT_W, lookup(params, RINIT_W)?.clone())?,
        tape.param(RINIT_B, lookup(params, RINIT_B)?.clone())?,
    ))
}

#[derive(Clone, Copy, Debug)]
pub struct RInitVars {
    pub r: Var,
    pub r_hat: Var,
    pub r0: Var,
}

/// `r = sigmoid(x W_r + b_r)`, `r̂ = r + ε`, `R_0` = symmetric unpacking of `r̂` with unit diagonal.
pub fn r_init(tape: &mut Tape, x: Var, (w, b): (Var, Var), noise: &Matrix, n_objects: usize) -> Result<RInitVars> {
    let z = tape.matmul(x, w)?;
    let z = tape.add(z, b)?;
    let r = tape.sigmoid(z)?;
    if noise.shape() != tape.shape(r) {
        return Err(dim_err!("relation noise {:?} vs r {:?}", noise.shape(), tape.shape(r)));
    }
    let eps = tape.constant(noise.clone())?;
    let r_hat = tape.add(r, eps)?;
    let r0 = tape.unpack_upper(r_hat, n_objects)?;
    Ok(RInitVars { r, r_hat, r0 })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RInitResult {
    pub r: Matrix,
    pub r_hat: Matrix,
    pub r0: Matrix,
}

/// Value-level [`r_init`], drawing `ε ~ N(0, σ²)` from `rng`.
pub fn r_init_values(x: &Matrix, w: &Matrix, b: &Matrix, sigma: f64, rng: RngState, n_objects: usize) -> Result<RInitResult> {
    let noise = rng.generator().gaussian_matrix(1, w.cols(), 0.0, sigma)?;
    let mut tape = Tape::new();
    let (xv, wv, bv) = (tape.constant(x.clone())?, tape.constant(w.clone())?, tape.constant(b.clone())?);
    let out = r_init(&mut tape, xv, (wv, bv), &noise, n_objects)?;
    Ok(RInitResult {
        r: tape.value(out.r).clone(),
        r_hat: tape.value(out.r_hat).clone(),
        r0: tape.value(out.r0).clone(),
    })
}

/// Regenerates relations: nodes start at the object features, each iteration
/// encodes under the previous relation matrix and rebuilds `sigmoid(V Vᵀ)`.
/// Returns the last relation matrix and the per-iteration trace.
pub fn r_gen(tape: &mut Tape, enc: &EncoderVars, objects: Var, r0: Var) -> Result<(Var, Vec<StepVars>)> {
    if enc.iterations.is_empty() {
        return Err(Error::Config("the encoder needs at least one iteration".into()));
    }
    let (mut v, mut r) = (objects, r0);
    let mut steps = Vec::with_capacity(enc.iterations.len());
    for it in &enc.iterations {
        v = encoder_iteration(tape, it, v, r)?;
        r = relation_from_nodes(tape, v)?;
        let readout = graph_readout(tape, v)?;
        steps.push(StepVars { nodes: v, relation: Some(r), readout });
    }
    Ok((r, steps))
}

pub fn r_gen_values(
    params: &ParamMap,
    cfg: &EncoderConfig,
    prefix: &str,
    objects: &Matrix,
    r0: &Matrix,
) -> Result<(Matrix, IterationTrace)> {
    let mut tape = Tape::new();
    let enc = EncoderVars::register(&mut tape, params, cfg, prefix)?;
    let (o, r) = (tape.constant(objects.clone())?, tape.constant(r0.clone())?);
    let (rg, steps) = r_gen(&mut tape, &enc, o, r)?;
    Ok((tape.value(rg).clone(), trace_values(&tape, &steps)))
}

/// Score of the Gaussian noise prior at `r̂` given `r`, per `mode`.
pub fn score_noisy(r_hat: &[f64], r: &[f64], sigma: f64, mode: NoiseScoreMode) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    if r_hat.len() != r.len() {
        return Err(dim_err!("score_noisy lengths {} vs {}", r_hat.len(), r.len()));
    }
    let s2 = sigma * sigma;
    Ok(r_hat
        .iter()
        .zip(r)
        .map(|(a, b)| match mode {
            NoiseScoreMode::Squared => -(a - b).powi(2) / s2,
            NoiseScoreMode::Corrected => -(a - b) / s2,
        })
        .collect())
}

/// Tape form of [`score_noisy`]; inputs are same-shaped nodes.
pub fn score_noisy_var(tape: &mut Tape, r_hat: Var, r: Var, sigma: f64, mode: NoiseScoreMode) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::Parameter(format!("sigma must be > 0, got {sigma}")));
    }
    let diff = tape.sub(r_hat, r)?;
    let num = match mode {
        NoiseScoreMode::Squared => tape.mul(diff, diff)?,
        NoiseScoreMode::Corrected => diff,
    };
    tape.scale(num, -1.0 / (sigma * sigma))
}

/// Score of a single Gaussian moment-fitted to `values`: `-(e - μ) / max(σ², floor)`.
pub fn score_generated(values: &[f64], var_floor: f64) -> Result<Vec<f64>> {
    if values.len() < 2 {
        return Err(Error::Contract(format!("need >= 2 generated values, got {}", values.len())));
    }
    let m = evaluate(|t| {
        let v = t.constant(Matrix::row_vector(values.to_vec()))?;
        t.gaussian_score(v, var_floor)
    })?;
    Ok(m.into_vec())
}

/// Mean squared difference between two score vectors.
pub fn score_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.value(a).len();
    let diff = tape.sub(a, b)?;
    let ss = tape.sum_squares(diff)?;
    tape.scale(ss, 1.0 / n as f64)
}

/// Gradient-consistency loss between the generated relation elements
/// (strictly upper triangle of `R_g`) and the noise-prior score.
pub fn grad_consistency_var(tape: &mut Tape, rg: Var, init: &RInitVars, s: &LearnSettings) -> Result<Var> {
    let packed = tape.pack_upper(rg)?;
    let generated = tape.gaussian_score(packed, s.var_floor)?;
    let prior = score_noisy_var(tape, init.r_hat, init.r, s.sigma, s.noise_score_mode)?;
    score_distance(tape, generated, prior)
}

/// Value-level gradient-consistency loss.
pub fn loss_grad_consistency(
    rg: &Matrix,
    r_hat: &[f64],
    r: &[f64],
    sigma: f64,
    mode: NoiseScoreMode,
    var_floor: f64,
) -> Result<f64> {
    let prior = score_noisy(r_hat, r, sigma, mode)?;
    let out = evaluate(|t| {
        let rg = t.constant(rg.clone())?;
        let packed = t.pack_upper(rg)?;
        if t.value(packed).len() != prior.len() {
            return Err(dim_err!("R_g has {} relations, prior {}", t.value(packed).len(), prior.len()));
        }
        let generated = t.gaussian_score(packed, var_floor)?;
        let p = t.constant(Matrix::row_vector(prior.clone()))?;
        score_distance(t, generated, p)
    })?;
    Ok(out.item())
}

/// Probability histogram over `[0, 1]` with hard bin counts; out-of-range values land in the edge bins.
pub fn hard_histogram(values: &[f64], bins: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Contract("histogram of an empty sample".into()));
    }
    if bins < 2 {
        return Err(Error::Parameter(format!("need >= 2 bins, got {bins}")));
    }
    let mut h = vec![0.0; bins];
    for &v in values {
        let idx = ((v.clamp(0.0, 1.0) * bins as f64).floor() as usize).min(bins - 1);
        h[idx] += 1.0;
    }
    let n = values.len() as f64;
    Ok(h.into_iter().map(|c| c / n).collect())
}

/// Symmetric KL between eps-smoothed hard histograms of two samples.
pub fn loss_kl_symmetric(p_sample: &[f64], q_sample: &[f64], bins: usize, eps: f64) -> Result<f64> {
    if !(eps > 0.0) {
        return Err(Error::Parameter(format!("eps must be > 0, got {eps}")));
    }
    let (p, q) = (hard_histogram(p_sample, bins)?, hard_histogram(q_sample, bins)?);
    Ok(smoothed_kl_sym(&p, &q, eps))
}

/// Distribution loss used in training: soft histogram of the generated
/// relation elements against the fixed hard histogram of the ground truth.
pub fn dist_loss_var(tape: &mut Tape, rg: Var, gt_histogram: &Matrix, s: &LearnSettings) -> Result<Var> {
    let packed = tape.pack_upper(rg)?;
    let p = tape.soft_histogram(packed, s.kl_bins, s.kl_temperature)?;
    let q = tape.constant(gt_histogram.clone())?;
    tape.hist_kl_sym(p, q, s.kl_eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gaussian_matrix;

    #[test]
    fn zero_sigma_keeps_clean_relations() {
        let x = gaussian_matrix(RngState::new(1, 0), 1, 5, 0.0, 1.0).unwrap();
        let p = init_rinit_params(4, 5, RngState::new(1, 1)).unwrap();
        let out = r_init_values(&x, &p[RINIT_W], &p[RINIT_B], 0.0, RngState::new(1, 2), 4).unwrap();
        assert_eq!(out.r, out.r_hat);
        assert_eq!(out.r0.asymmetry(), 0.0);
        assert!((0..4).all(|i| out.r0.get(i, i) == 1.0));
        assert!(out.r.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(crate::numerics::pack_upper(&out.r0).unwrap(), out.r_hat);
    }

    #[test]
    fn score_noisy_modes() {
        assert_eq!(score_noisy(&[0.3, 0.7], &[0.3, 0.7], 1.0, NoiseScoreMode::Squared).unwrap(), vec![0.0, 0.0]);
        assert_eq!(score_noisy(&[0.3], &[0.3], 2.0, NoiseScoreMode::Corrected).unwrap(), vec![0.0]);
        assert_eq!(score_noisy(&[1.0], &[0.5], 1.0, NoiseScoreMode::Corrected).unwrap(), vec![-0.5]);
        assert_eq!(score_noisy(&[1.0], &[0.5], 1.0, NoiseScoreMode::Squared).unwrap(), vec![-0.25]);
        assert!(matches!(score_noisy(&[1.0], &[0.5], 0.0, NoiseScoreMode::Squared), Err(Error::Parameter(_))));
    }

    #[test]
    fn score_noisy_shrinks_with_sigma() {
        let a = score_noisy(&[1.3], &[0.5], 1.0, NoiseScoreMode::Corrected).unwrap()[0];
        let b = score_noisy(&[1.3], &[0.5], 10.0, NoiseScoreMode::Corrected).unwrap()[0];
        assert!((a / b - 100.0).abs() < 1e-9);
    }

    #[test]
    fn score_generated_cases() {
        assert!(score_generated(&[0.4, 0.4, 0.4], 1e-6).unwrap().iter().all(|v| v.abs() < 1e-9));
        assert_eq!(score_generated(&[0.5, 0.5], 1e-6).unwrap(), vec![0.0; 2]);
        let s = score_generated(&[0.2, 0.4, 0.6], 1e-6).unwrap();
        assert!((s[0] - 7.5).abs() < 1e-12, "{s:?}");
        assert!(s[1].abs() < 1e-12);
        assert!(score_generated(&[0.2], 1e-6).is_err());
    }

    #[test]
    fn grad_consistency_examples() {
        let out = evaluate(|t| {
            let a = t.constant(Matrix::row_vector(vec![1.0, 0.0]))?;
            let b = t.constant(Matrix::row_vector(vec![0.0, 0.0]))?;
            score_distance(t, a, b)
        })
        .unwrap();
        assert_eq!(out.item(), 0.5);
    }

    #[test]
    fn total_loss_arithmetic() {
        assert_eq!(rggm_total_loss(3.0, 2.0, 0.7, 0.0, 0.0).total, 0.7);
        assert_eq!(rggm_total_loss(1.0, 1.0, 1.0, 6.0, 72.0).total, 79.0);
    }

    #[test]
    fn histogram_kl_cases() {
        let a = [0.1, 0.3, 0.8, 0.95];
        assert_eq!(loss_kl_symmetric(&a, &a, 16, 1e-3).unwrap(), 0.0);
        let b = [0.2, 0.25, 0.6, 0.5];
        assert_eq!(loss_kl_symmetric(&a, &b, 16, 1e-3).unwrap(), loss_kl_symmetric(&b, &a, 16, 1e-3).unwrap());
        assert!(loss_kl_symmetric(&[], &b, 16, 1e-3).is_err());
    }
}
