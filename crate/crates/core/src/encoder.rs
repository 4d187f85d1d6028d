//! Iterative graph encoder shared by the relation and representation branches.
//!
//! One iteration runs `N_l` GCN-style layers with per-node weights under a
//! fixed relation matrix, then sums ReLU projections of the input and every
//! layer output.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Result};
use crate::numerics::{evaluate, Matrix, ParamMap, RngState, Tape, Var};
use crate::vqa::lookup;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_objects: usize,
    pub hidden: usize,
    pub iterations: usize,
    pub layers: usize,
    pub tie_assembly: bool,
}

impl EncoderConfig {
    fn layer_names(&self, prefix: &str, k: usize, l: usize) -> (String, String) {
        (format!("{prefix}.k{k}.l{l}.w"), format!("{prefix}.k{k}.l{l}.b"))
    }

    fn assembly_names(&self, prefix: &str, k: usize) -> (String, String) {
        if self.tie_assembly {
            (format!("{prefix}.asm.w"), format!("{prefix}.asm.b"))
        } else {
            (format!("{prefix}.k{k}.asm.w"), format!("{prefix}.k{k}.asm.b"))
        }
    }
}

/// Per-node weight stacks `N(0, 1/d)` and zero biases for every iteration and layer.
pub fn init_encoder_params(cfg: &EncoderConfig, prefix: &str, rng: RngState) -> Result<ParamMap> {
    let mut g = rng.generator();
    let (n, d) = (cfg.n_objects, cfg.hidden);
    let std = (1.0 / d as f64).sqrt();
    let mut p = ParamMap::new();
    for k in 0..cfg.iterations {
        for l in 0..cfg.layers {
            let (w, b) = cfg.layer_names(prefix, k, l);
            p.insert(w, g.gaussian_matrix(n * d, d, 0.0, std)?);
            p.insert(b, Matrix::zeros(n, d));
        }
        let (w, b) = cfg.assembly_names(prefix, k);
        if !p.contains_key(&w) {
            p.insert(w, g.gaussian_matrix(n * d, d, 0.0, std)?);
            p.insert(b, Matrix::zeros(n, d));
        }
    }
    Ok(p)
}

/// Weights of one iteration as tape nodes.
#[derive(Clone, Debug)]
pub struct IterationVars {
    pub layers: Vec<(Var, Var)>,
    pub assembly: (Var, Var),
}

#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub iterations: Vec<IterationVars>,
}

impl EncoderVars {
    pub fn register(tape: &mut Tape, params: &ParamMap, cfg: &EncoderConfig, prefix: &str) -> Result<Self> {
        let mut assembly: Option<(Var, Var)> = None;
        let mut iterations = Vec::with_capacity(cfg.iterations);
        for k in 0..cfg.iterations {
            let mut layers = Vec::with_capacity(cfg.layers);
            for l in 0..cfg.layers {
                let (w, b) = cfg.layer_names(prefix, k, l);
                layers.push((tape.param(&w, lookup(params, &w)?.clone())?, tape.param(&b, lookup(params, &b)?.clone())?));
            }
            let asm = match (cfg.tie_assembly, assembly) {
                (true, Some(shared)) => shared,
                _ => {
                    let (w, b) = cfg.assembly_names(prefix, k);
                    (tape.param(&w, lookup(params, &w)?.clone())?, tape.param(&b, lookup(params, &b)?.clone())?)
                }
            };
            assembly = Some(asm);
            iterations.push(IterationVars { layers, assembly: asm });
        }
        Ok(Self { iterations })
    }
}

/// `sigmoid((R V) W_i + b_i)` row by row, with `W` a stack of per-node matrices.
pub fn gcn_layer(tape: &mut Tape, r: Var, v: Var, w: Var, b: Var) -> Result<Var> {
    let (n, d) = tape.shape(v);
    if tape.shape(r) != (n, n) || tape.shape(w) != (n * d, d) || tape.shape(b) != (n, d) {
        return Err(dim_err!(
            "gcn_layer R {:?} V {:?} W {:?} b {:?}",
            tape.shape(r),
            tape.shape(v),
            tape.shape(w),
            tape.shape(b)
        ));
    }
    let msg = tape.matmul(r, v)?;
    let z = tape.per_row_matmul(msg, w)?;
    let z = tape.add(z, b)?;
    tape.sigmoid(z)
}

/// `Σ_{l=0..N_l} relu(V^(l) W_a + b_a)` where `V^(0)` is the input and each
/// further `V^(l)` is a [`gcn_layer`] under the same fixed relation matrix.
pub fn encoder_iteration(tape: &mut Tape, it: &IterationVars, v_in: Var, r_fixed: Var) -> Result<Var> {
    let (wa, ba) = it.assembly;
    let (n, d) = tape.shape(v_in);
    if tape.shape(wa) != (n * d, d) || tape.shape(ba) != (n, d) {
        return Err(dim_err!("assembly W {:?} b {:?} for V {:?}", tape.shape(wa), tape.shape(ba), (n, d)));
    }
    let project = |tape: &mut Tape, v: Var| -> Result<Var> {
        let z = tape.per_row_matmul(v, wa)?;
        let z = tape.add(z, ba)?;
        tape.relu(z)
    };
    let mut out = project(tape, v_in)?;
    let mut current = v_in;
    for &(w, b) in &it.layers {
        current = gcn_layer(tape, r_fixed, current, w, b)?;
        let term = project(tape, current)?;
        out = tape.add(out, term)?;
    }
    Ok(out)
}

/// `sigmoid(V Vᵀ)`.
pub fn relation_from_nodes(tape: &mut Tape, v: Var) -> Result<Var> {
    let gram = tape.matmul_t(v, v)?;
    tape.sigmoid(gram)
}

/// Mean over node rows.
pub fn graph_readout(tape: &mut Tape, v: Var) -> Result<Var> {
    tape.mean_rows(v)
}

/// Per-iteration outputs: node features, regenerated relations (relation branch only) and readout.
#[derive(Clone, Debug, PartialEq)]
pub struct IterationStep {
    pub nodes: Matrix,
    pub relation: Option<Matrix>,
    pub readout: Matrix,
}

pub type IterationTrace = Vec<IterationStep>;

/// Tape-side trace entry.
#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub nodes: Var,
    pub relation: Option<Var>,
    pub readout: Var,
}

pub fn trace_values(tape: &Tape, steps: &[StepVars]) -> IterationTrace {
    steps
        .iter()
        .map(|s| IterationStep {
            nodes: tape.value(s.nodes).clone(),
            relation: s.relation.map(|r| tape.value(r).clone()),
            readout: tape.value(s.readout).clone(),
        })
        .collect()
}

pub fn gcn_layer_values(r: &Matrix, v: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    evaluate(|t| {
        let (r, v, w, b) = (t.constant(r.clone())?, t.constant(v.clone())?, t.constant(w.clone())?, t.constant(b.clone())?);
        gcn_layer(t, r, v, w, b)
    })
}

/// Value-level [`encoder_iteration`]; `layers` holds `(W, b)` per layer.
pub fn encoder_iteration_values(
    layers: &[(Matrix, Matrix)],
    assembly: (&Matrix, &Matrix),
    v_in: &Matrix,
    r_fixed: &Matrix,
) -> Result<Matrix> {
    evaluate(|t| {
        let layers = layers
            .iter()
            .map(|(w, b)| Ok((t.constant(w.clone())?, t.constant(b.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        let it = IterationVars { layers, assembly: (t.constant(assembly.0.clone())?, t.constant(assembly.1.clone())?) };
        let (v, r) = (t.constant(v_in.clone())?, t.constant(r_fixed.clone())?);
        encoder_iteration(t, &it, v, r)
    })
}

pub fn relation_from_nodes_values(v: &Matrix) -> Result<Matrix> {
    evaluate(|t| {
        let v = t.constant(v.clone())?;
        relation_from_nodes(t, v)
    })
}

pub fn graph_readout_values(v: &Matrix) -> Result<Matrix> {
    evaluate(|t| {
        let v = t.constant(v.clone())?;
        graph_readout(t, v)
    })
}
