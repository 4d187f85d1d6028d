//! Representation branch: noisy node initialization from `x`, node generation
//! under the ground-truth relations, and moment-based losses against the
//! object features.

use crate::encoder::{encoder_iteration, graph_readout, trace_values, EncoderConfig, EncoderVars, IterationTrace, StepVars};
use crate::error::{dim_err, Error, Result};
use crate::numerics::{Matrix, ParamMap, RngState, Tape, Var};
use crate::rggm::{score_distance, score_noisy_var, Branch, NoiseScoreMode, LearnSettings, LossBreakdown};
use crate::vqa::lookup;

pub const NINIT_W: &str = "ninit.w";
pub const NINIT_B: &str = "ninit.b";
pub const NINIT_NODE_BIAS: &str = "ninit.node_bias";

/// Variance floor of the Gaussian moment fits in the distribution loss.
pub const KL_VAR_FLOOR: f64 = 1e-6;

/// Fully-connected map `d → d` plus, when `node_bias` is set, a learned
/// `N_o × d` offset so that initial nodes differ.
pub fn init_ninit_params(n_objects: usize, hidden: usize, node_bias: bool, rng: RngState) -> Result<ParamMap> {
    let mut g = rng.generator();
    let std = (1.0 / hidden as f64).sqrt();
    let mut p = ParamMap::new();
    p.insert(NINIT_W.into(), g.gaussian_matrix(hidden, hidden, 0.0, std)?);
    p.insert(NINIT_B.into(), Matrix::zeros(1, hidden));
    if node_bias {
        p.insert(NINIT_NODE_BIAS.into(), g.gaussian_matrix(n_objects, hidden, 0.0, std)?);
    }
    Ok(p)
}

#[derive(Clone, Copy, Debug)]
pub struct NInitParamVars {
    pub w: Var,
    pub b: Var,
    pub node_bias: Option<Var>,
}

pub fn register_ninit(tape: &mut Tape, params: &ParamMap) -> Result<NInitParamVars> {
    Ok(NInitParamVars {
        w: tape.param(NINIT_W, lookup(params, NINIT_W)?.clone())?,
        b: tape.param(NINIT_B, lookup(params, NINIT_B)?.clone())?,
        node_bias: params.get(NINIT_NODE_BIAS).map(|m| tape.param(NINIT_NODE_BIAS, m.clone())).transpose()?,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct NInitVars {
    pub v_x: Var,
    pub v_hat: Var,
}

/// `V_x = FC([x, …, x]) (+ node bias)`, `V̂_x = V_x + ε`; `V̂_x` seeds the generator.
pub fn n_init(tape: &mut Tape, x: Var, p: &NInitParamVars, noise: &Matrix, n_objects: usize) -> Result<NInitVars> {
    let spanned = tape.repeat_rows(x, n_objects)?;
    let z = tape.matmul(spanned, p.w)?;
    let mut v_x = tape.add_row(z, p.b)?;
    if let Some(nb) = p.node_bias {
        v_x = tape.add(v_x, nb)?;
    }
    if noise.shape() != tape.shape(v_x) {
        return Err(dim_err!("node noise {:?} vs V_x {:?}", noise.shape(), tape.shape(v_x)));
    }
    let eps = tape.constant(noise.clone())?;
    let v_hat = tape.add(v_x, eps)?;
    Ok(NInitVars { v_x, v_hat })
}

#[derive(Clone, Debug, PartialEq)]
pub struct NInitResult {
    pub v_x: Matrix,
    pub v_hat: Matrix,
    pub sigma: f64,
}

pub fn n_init_values(x: &Matrix, params: &ParamMap, sigma: f64, rng: RngState, n_objects: usize) -> Result<NInitResult> {
    let d = lookup(params, NINIT_W)?.cols();
    let noise = rng.generator().gaussian_matrix(n_objects, d, 0.0, sigma)?;
    let mut tape = Tape::new();
    let vars = register_ninit(&mut tape, params)?;
    let xv = tape.constant(x.clone())?;
    let out = n_init(&mut tape, xv, &vars, &noise, n_objects)?;
    Ok(NInitResult { v_x: tape.value(out.v_x).clone(), v_hat: tape.value(out.v_hat).clone(), sigma })
}

/// Node generation: every iteration encodes under the fixed ground-truth relations.
pub fn n_gen(tape: &mut Tape, enc: &EncoderVars, v0: Var, r_gt: Var) -> Result<(Var, Vec<StepVars>)> {
    if enc.iterations.is_empty() {
        return Err(Error::Config("the encoder needs at least one iteration".into()));
    }
    let mut v = v0;
    let mut steps = Vec::with_capacity(enc.iterations.len());
    for it in &enc.iterations {
        v = encoder_iteration(tape, it, v, r_gt)?;
        let readout = graph_readout(tape, v)?;
        steps.push(StepVars { nodes: v, relation: None, readout });
    }
    Ok((v, steps))
}

pub fn n_gen_values(
    params: &ParamMap,
    cfg: &EncoderConfig,
    prefix: &str,
    v0: &Matrix,
    r_gt: &Matrix,
) -> Result<(Matrix, IterationTrace)> {
    let mut tape = Tape::new();
    let enc = EncoderVars::register(&mut tape, params, cfg, prefix)?;
    let (v, r) = (tape.constant(v0.clone())?, tape.constant(r_gt.clone())?);
    let (vg, steps) = n_gen(&mut tape, &enc, v, r)?;
    Ok((tape.value(vg).clone(), trace_values(&tape, &steps)))
}

/// Gradient-consistency loss over all node-feature entries treated as one population.
pub fn grad_consistency_var(tape: &mut Tape, vg: Var, init: &NInitVars, s: &LearnSettings) -> Result<Var> {
    let flat_g = tape.flatten(vg)?;
    let generated = tape.gaussian_score(flat_g, s.var_floor)?;
    let (flat_hat, flat_x) = (tape.flatten(init.v_hat)?, tape.flatten(init.v_x)?);
    let prior = score_noisy_var(tape, flat_hat, flat_x, s.sigma, s.noise_score_mode)?;
    score_distance(tape, generated, prior)
}

/// Symmetric KL between moment-fitted Gaussians of `V_g` and the object features.
pub fn dist_loss_var(tape: &mut Tape, vg: Var, objects: Var) -> Result<Var> {
    tape.gaussian_kl_sym(vg, objects, KL_VAR_FLOOR)
}

/// Value-level losses of the representation branch.
#[allow(clippy::too_many_arguments)]
pub fn nggm_losses(
    vg: &Matrix,
    v_hat: &Matrix,
    v_x: &Matrix,
    objects: &Matrix,
    sigma: f64,
    mode: NoiseScoreMode,
    alpha: f64,
    beta: f64,
    l_bce: f64,
) -> Result<LossBreakdown> {
    if vg.shape() != v_hat.shape() || v_hat.shape() != v_x.shape() {
        return Err(dim_err!("V_g {:?}, V̂_x {:?}, V_x {:?}", vg.shape(), v_hat.shape(), v_x.shape()));
    }
    let settings = LearnSettings { sigma, noise_score_mode: mode, ..LearnSettings::default() };
    let mut tape = Tape::new();
    let init = NInitVars { v_x: tape.constant(v_x.clone())?, v_hat: tape.constant(v_hat.clone())? };
    let g = tape.constant(vg.clone())?;
    let o = tape.constant(objects.clone())?;
    let l_grad = grad_consistency_var(&mut tape, g, &init, &settings)?;
    let l_dist = dist_loss_var(&mut tape, g, o)?;
    Ok(LossBreakdown::weighted(tape.value(l_grad).item(), tape.value(l_dist).item(), l_bce, alpha, beta, Branch::N))
}
