//! Training loop for the graph generative scheme and the baseline, plus the
//! experiment runner.

mod config;
mod experiment;
mod optim;

pub use config::{InferencePath, Mode, TrainConfig};
pub use experiment::{
    aggregate, evaluate_split, mean_std, prepare_split, run_experiment, run_seed, run_sweep, Aggregate,
    ExperimentReport, PreparedSplit, SeedResult, SeedRun, SweepReport, SweepRow,
};
pub use optim::Adam;

use crate::concepts::{relation_from_embeddings, ConceptVocabulary};
use crate::encoder::EncoderVars;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ParamMap, RngState, Tape, Var};
use crate::rggm::{self, hard_histogram, Branch, LossBreakdown};
use crate::vqa::{self, EmbeddingTable, EncodedExample, ModelDims, VqaExample, VqaVars};
use crate::{encoder, nggm};

/// Substream ids; a stream is `(purpose << 48) | counter`.
mod stream {
    pub const VQA_INIT: u64 = 1;
    pub const ENC_INIT: u64 = 2;
    pub const ENC_N_INIT: u64 = 3;
    pub const RINIT_INIT: u64 = 4;
    pub const NINIT_INIT: u64 = 5;
    pub const SHUFFLE: u64 = 6;
    pub const NOISE: u64 = 7;
    pub const BRANCH: u64 = 8;

    pub fn id(purpose: u64, counter: u64) -> u64 {
        (purpose << 48) | counter
    }
}

/// Example inputs plus the ground-truth relation matrix and its histogram.
#[derive(Clone, Debug)]
pub struct PreparedExample {
    pub input: EncodedExample,
    pub r_gt: Matrix,
    pub gt_histogram: Matrix,
}

/// Embeds examples and precomputes their ground-truth relations.
pub fn prepare(
    examples: &[VqaExample],
    vocab: &ConceptVocabulary,
    table: &EmbeddingTable,
    kl_bins: usize,
) -> Result<Vec<PreparedExample>> {
    examples
        .iter()
        .map(|ex| {
            ex.validate(vocab)?;
            let classes: Vec<Vec<f64>> = ex.scene.objects.iter().map(|&(c, _)| table.class(c).to_vec()).collect();
            let attrs: Vec<Vec<f64>> = ex.scene.objects.iter().map(|&(_, a)| table.attribute(a).to_vec()).collect();
            let r_gt = relation_from_embeddings(&classes, &attrs);
            let gt_histogram = Matrix::row_vector(hard_histogram(crate::numerics::pack_upper(&r_gt)?.data(), kl_bins)?);
            Ok(PreparedExample { input: table.encode(ex)?, r_gt, gt_histogram })
        })
        .collect()
}

/// Parameters, optimizer moments and the step counter.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ParamMap,
    pub optimizer: Adam,
    pub step: u64,
    pub seed: u64,
}

impl TrainState {
    /// Fresh parameters for every module; the VQA initialization depends only on the seed.
    pub fn new(cfg: &TrainConfig, vocab: &ConceptVocabulary) -> Result<Self> {
        cfg.validate()?;
        let dims = ModelDims {
            n_objects: cfg.n_objects,
            hidden: cfg.hidden,
            embed_dim: vocab.embed_dim,
            num_answers: vocab.num_attributes,
        };
        let seed = cfg.seed;
        let mut params = vqa::init_vqa_params(&dims, RngState::new(seed, stream::id(stream::VQA_INIT, 0)))?;
        let enc = cfg.encoder();
        params.extend(encoder::init_encoder_params(
            &enc,
            cfg.encoder_prefix(true),
            RngState::new(seed, stream::id(stream::ENC_INIT, 0)),
        )?);
        if cfg.separate_encoders {
            params.extend(encoder::init_encoder_params(
                &enc,
                cfg.encoder_prefix(false),
                RngState::new(seed, stream::id(stream::ENC_N_INIT, 0)),
            )?);
        }
        params.extend(rggm::init_rinit_params(
            cfg.n_objects,
            cfg.hidden,
            RngState::new(seed, stream::id(stream::RINIT_INIT, 0)),
        )?);
        params.extend(nggm::init_ninit_params(
            cfg.n_objects,
            cfg.hidden,
            cfg.node_bias,
            RngState::new(seed, stream::id(stream::NINIT_INIT, 0)),
        )?);
        Ok(Self { params, optimizer: Adam::new(cfg.lr), step: 0, seed })
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.params.iter().find(|(_, m)| !m.is_finite()) {
            Some((name, _)) => Err(Error::Numeric(format!("parameter {name} is not finite at step {}", self.step))),
            None => Ok(()),
        }
    }
}

/// Noise drawn for one example in one step.
struct ExampleNoise {
    features: Option<Matrix>,
    relation: Matrix,
    nodes: Matrix,
}

fn draw_noise(cfg: &TrainConfig, seed: u64, step: u64, slot: u64) -> Result<ExampleNoise> {
    // 2^20 examples per batch is far above any batch size in use
    let mut g = RngState::new(seed, stream::id(stream::NOISE, (step << 20) | slot)).generator();
    let (n, d) = (cfg.n_objects, cfg.hidden);
    let features =
        if cfg.feature_noise > 0.0 { Some(g.gaussian_matrix(n, d, 0.0, cfg.feature_noise)?) } else { None };
    Ok(ExampleNoise {
        features,
        relation: g.gaussian_matrix(1, crate::numerics::upper_len(n), 0.0, cfg.sigma)?,
        nodes: g.gaussian_matrix(n, d, 0.0, cfg.sigma)?,
    })
}

/// Branch for `step`: relation branch iff `cond ≤ η` with `cond ~ U(0, 1)`.
pub fn draw_branch(seed: u64, step: u64, eta: f64) -> Branch {
    let cond = RngState::new(seed, stream::id(stream::BRANCH, step)).generator().open01();
    if cond <= eta {
        Branch::R
    } else {
        Branch::N
    }
}

/// Loss nodes of one example.
struct ExampleLoss {
    total: Var,
    l_grad: Option<Var>,
    l_dist: Option<Var>,
    l_bce: Var,
}

fn build_example(
    tape: &mut Tape,
    params: &ParamMap,
    cfg: &TrainConfig,
    branch: Branch,
    ex: &PreparedExample,
    noise: &ExampleNoise,
) -> Result<ExampleLoss> {
    let vqa_vars = VqaVars::register(tape, params)?;
    let rep = vqa::vqa_r(tape, &vqa_vars, &ex.input, noise.features.as_ref())?;
    let settings = cfg.learn_settings();
    let (logits, l_grad, l_dist, alpha, beta) = match branch {
        Branch::Bmu => (vqa::vqa_c(tape, &vqa_vars, rep.x, None)?, None, None, 0.0, 0.0),
        Branch::R => {
            let enc = EncoderVars::register(tape, params, &cfg.encoder(), cfg.encoder_prefix(true))?;
            let proj = rggm::register_rinit(tape, params)?;
            let init = rggm::r_init(tape, rep.x, proj, &noise.relation, cfg.n_objects)?;
            let (rg, steps) = rggm::r_gen(tape, &enc, rep.objects, init.r0)?;
            let readout = steps.last().expect("at least one iteration").readout;
            let logits = vqa::vqa_c(tape, &vqa_vars, rep.x, Some(readout))?;
            let l_grad = rggm::grad_consistency_var(tape, rg, &init, &settings)?;
            let l_dist = rggm::dist_loss_var(tape, rg, &ex.gt_histogram, &settings)?;
            (logits, Some(l_grad), Some(l_dist), cfg.alpha_r, cfg.beta_r)
        }
        Branch::N => {
            let enc = EncoderVars::register(tape, params, &cfg.encoder(), cfg.encoder_prefix(false))?;
            let proj = nggm::register_ninit(tape, params)?;
            let init = nggm::n_init(tape, rep.x, &proj, &noise.nodes, cfg.n_objects)?;
            let r_gt = tape.constant(ex.r_gt.clone())?;
            let (vg, steps) = nggm::n_gen(tape, &enc, init.v_hat, r_gt)?;
            let readout = steps.last().expect("at least one iteration").readout;
            let logits = vqa::vqa_c(tape, &vqa_vars, rep.x, Some(readout))?;
            let l_grad = nggm::grad_consistency_var(tape, vg, &init, &settings)?;
            let l_dist = nggm::dist_loss_var(tape, vg, rep.objects)?;
            (logits, Some(l_grad), Some(l_dist), cfg.alpha_n, cfg.beta_n)
        }
    };
    let l_bce = tape.bce_with_logits(logits, &ex.input.target)?;
    let mut total = l_bce;
    if let (Some(g), Some(d)) = (l_grad, l_dist) {
        let wg = tape.scale(g, alpha)?;
        let wd = tape.scale(d, beta)?;
        let adv = tape.add(wg, wd)?;
        total = tape.add(adv, l_bce)?;
    }
    Ok(ExampleLoss { total, l_grad, l_dist, l_bce })
}

/// Mean losses and gradients of `batch` under `branch`, without updating anything.
pub fn batch_gradients(
    state: &TrainState,
    batch: &[&PreparedExample],
    cfg: &TrainConfig,
    branch: Branch,
) -> Result<(LossBreakdown, ParamMap)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grads = ParamMap::new();
    let (mut l_grad, mut l_dist, mut l_bce, mut total) = (0.0, 0.0, 0.0, 0.0);
    for (slot, ex) in batch.iter().enumerate() {
        let noise = draw_noise(cfg, state.seed, state.step, slot as u64)?;
        let mut tape = Tape::new();
        let loss = build_example(&mut tape, &state.params, cfg, branch, ex, &noise)?;
        let value = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
        l_grad += value(loss.l_grad) * scale;
        l_dist += value(loss.l_dist) * scale;
        l_bce += tape.value(loss.l_bce).item() * scale;
        total += tape.value(loss.total).item() * scale;
        for (name, g) in tape.backward(loss.total)?.into_named() {
            match grads.get_mut(&name) {
                Some(acc) => acc.add_assign(&g.scale(scale))?,
                None => {
                    grads.insert(name, g.scale(scale));
                }
            }
        }
    }
    Ok((LossBreakdown { l_grad, l_dist, l_bce, total, branch }, grads))
}

fn at_step(e: Error, step: u64, branch: Branch) -> Error {
    match e {
        Error::Numeric(msg) => Error::Numeric(format!("step {step} ({branch} branch): {msg}")),
        other => other,
    }
}

fn apply(state: &mut TrainState, breakdown: LossBreakdown, grads: &ParamMap) -> Result<LossBreakdown> {
    if !breakdown.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss at step {}: {breakdown:?}", state.step)));
    }
    state.optimizer.step(&mut state.params, grads)?;
    state.check_finite().map_err(|e| Error::Numeric(format!("{e}; last losses {breakdown:?}")))?;
    state.step += 1;
    Ok(breakdown)
}

/// One graph-generative step: draws the branch, runs it on the batch and updates
/// every parameter that took part.
pub fn train_step_xggm(state: &mut TrainState, batch: &[&PreparedExample], cfg: &TrainConfig) -> Result<LossBreakdown> {
    let branch = draw_branch(state.seed, state.step, cfg.eta);
    let (breakdown, grads) = batch_gradients(state, batch, cfg, branch).map_err(|e| at_step(e, state.step, branch))?;
    apply(state, breakdown, &grads)
}

/// One baseline step: BCE of the plain VQA model only.
pub fn train_step_baseline(
    state: &mut TrainState,
    batch: &[&PreparedExample],
    cfg: &TrainConfig,
) -> Result<LossBreakdown> {
    let (breakdown, grads) =
        batch_gradients(state, batch, cfg, Branch::Bmu).map_err(|e| at_step(e, state.step, Branch::Bmu))?;
    apply(state, breakdown, &grads)
}

/// Runs `cfg.epochs` passes over `train`, shuffled per epoch. Returns the per-step log.
pub fn train(state: &mut TrainState, train: &[PreparedExample], cfg: &TrainConfig) -> Result<Vec<LossBreakdown>> {
    let mut log = Vec::new();
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        RngState::new(state.seed, stream::id(stream::SHUFFLE, epoch as u64)).generator().shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedExample> = chunk.iter().map(|&i| &train[i]).collect();
            let b = match cfg.mode {
                Mode::Xggm => train_step_xggm(state, &batch, cfg)?,
                Mode::Baseline => train_step_baseline(state, &batch, cfg)?,
            };
            log.push(b);
        }
    }
    Ok(log)
}

/// Answer logits for one example with no noise anywhere.
pub fn predict_logits(params: &ParamMap, cfg: &TrainConfig, ex: &PreparedExample) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vqa_vars = VqaVars::register(&mut tape, params)?;
    let rep = vqa::vqa_r(&mut tape, &vqa_vars, &ex.input, None)?;
    let vbar = match (cfg.mode, cfg.inference) {
        (Mode::Xggm, InferencePath::RelationGraph) => {
            let enc = EncoderVars::register(&mut tape, params, &cfg.encoder(), cfg.encoder_prefix(true))?;
            let proj = rggm::register_rinit(&mut tape, params)?;
            let quiet = Matrix::zeros(1, crate::numerics::upper_len(cfg.n_objects));
            let init = rggm::r_init(&mut tape, rep.x, proj, &quiet, cfg.n_objects)?;
            let (_, steps) = rggm::r_gen(&mut tape, &enc, rep.objects, init.r0)?;
            Some(steps.last().expect("at least one iteration").readout)
        }
        _ => None,
    };
    let logits = vqa::vqa_c(&mut tape, &vqa_vars, rep.x, vbar)?;
    Ok(tape.value(logits).clone())
}

pub fn predict(params: &ParamMap, cfg: &TrainConfig, ex: &PreparedExample) -> Result<usize> {
    Ok(vqa::argmax(predict_logits(params, cfg, ex)?.data()))
}

/// Noise-free relation-branch pass: ground truth and generated relation matrices.
pub fn relation_pair(params: &ParamMap, cfg: &TrainConfig, ex: &PreparedExample) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::new();
    let vqa_vars = VqaVars::register(&mut tape, params)?;
    let rep = vqa::vqa_r(&mut tape, &vqa_vars, &ex.input, None)?;
    let enc = EncoderVars::register(&mut tape, params, &cfg.encoder(), cfg.encoder_prefix(true))?;
    let proj = rggm::register_rinit(&mut tape, params)?;
    let quiet = Matrix::zeros(1, crate::numerics::upper_len(cfg.n_objects));
    let init = rggm::r_init(&mut tape, rep.x, proj, &quiet, cfg.n_objects)?;
    let (rg, _) = rggm::r_gen(&mut tape, &enc, rep.objects, init.r0)?;
    Ok((ex.r_gt.clone(), tape.value(rg).clone()))
}

/// Total loss of one example under `branch` as a function of the parameters, with
/// the noise of step 0 frozen. Used for gradient checks of the full objective.
pub fn example_objective<'a>(
    cfg: &'a TrainConfig,
    branch: Branch,
    ex: &'a PreparedExample,
    seed: u64,
) -> Result<impl Fn(&ParamMap) -> Result<(f64, ParamMap)> + 'a> {
    let noise = draw_noise(cfg, seed, 0, 0)?;
    Ok(move |params: &ParamMap| {
        let mut tape = Tape::new();
        let loss = build_example(&mut tape, params, cfg, branch, ex, &noise)?;
        Ok((tape.value(loss.total).item(), tape.backward(loss.total)?.into_named()))
    })
}
