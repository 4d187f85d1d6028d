//! Toy VQA model: a representation half producing the fused vector `x` and
//! per-object features, and an answer classifier over attributes.

use serde::{Deserialize, Serialize};

use crate::concepts::{ConceptKind, ConceptVocabulary, SceneSpec};
use crate::error::{Error, Result};
use crate::numerics::{bce_value, Matrix, ParamMap, RngState, SeededRng, Tape, Var};

/// One question: "which attribute does `question` (a class id) have?".
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VqaExample {
    pub scene: SceneSpec,
    #[serde(rename = "q")]
    pub question: usize,
    pub answer: usize,
}

impl VqaExample {
    pub fn validate(&self, vocab: &ConceptVocabulary) -> Result<()> {
        self.scene.validate(vocab)?;
        let paired: Vec<usize> =
            self.scene.objects.iter().filter(|(c, _)| *c == self.question).map(|&(_, a)| a).collect();
        match paired.as_slice() {
            [a] if *a == self.answer => Ok(()),
            [] => Err(Error::Contract(format!("queried class {} not in scene", self.question))),
            _ => Err(Error::Contract(format!("answer {} does not match the queried object", self.answer))),
        }
    }

    /// Ground-truth `(class, attribute)` composition the question asks about.
    pub fn composition(&self) -> (usize, usize) {
        (self.question, self.answer)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub n_objects: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub num_answers: usize,
}

/// All class and attribute embeddings, computed once.
#[derive(Clone, Debug)]
pub struct EmbeddingTable {
    classes: Vec<Vec<f64>>,
    attributes: Vec<Vec<f64>>,
    embed_dim: usize,
}

impl EmbeddingTable {
    pub fn new(vocab: &ConceptVocabulary) -> Result<Self> {
        vocab.validate()?;
        Ok(Self {
            classes: (0..vocab.num_classes).map(|c| vocab.embed(ConceptKind::Class, c)).collect::<Result<_>>()?,
            attributes: (0..vocab.num_attributes)
                .map(|a| vocab.embed(ConceptKind::Attribute, a))
                .collect::<Result<_>>()?,
            embed_dim: vocab.embed_dim,
        })
    }

    pub fn class(&self, id: usize) -> &[f64] {
        &self.classes[id]
    }

    pub fn attribute(&self, id: usize) -> &[f64] {
        &self.attributes[id]
    }

    pub fn classes(&self) -> &[Vec<f64>] {
        &self.classes
    }

    pub fn attributes(&self) -> &[Vec<f64>] {
        &self.attributes
    }

    /// Model inputs for one example.
    pub fn encode(&self, ex: &VqaExample) -> Result<EncodedExample> {
        let n = ex.scene.num_objects();
        let mut objects = Vec::with_capacity(n * 2 * self.embed_dim);
        for &(c, a) in &ex.scene.objects {
            if c >= self.classes.len() || a >= self.attributes.len() {
                return Err(Error::Index(format!("object ({c}, {a}) outside vocabulary")));
            }
            objects.extend_from_slice(&self.classes[c]);
            objects.extend_from_slice(&self.attributes[a]);
        }
        if ex.question >= self.classes.len() || ex.answer >= self.attributes.len() {
            return Err(Error::Index(format!("question {} / answer {} outside vocabulary", ex.question, ex.answer)));
        }
        let mut target = vec![0.0; self.attributes.len()];
        target[ex.answer] = 1.0;
        Ok(EncodedExample {
            objects: Matrix::from_vec(n, 2 * self.embed_dim, objects)?,
            question: Matrix::row_vector(self.classes[ex.question].clone()),
            target: Matrix::row_vector(target),
            answer: ex.answer,
        })
    }
}

/// Embedded inputs: concatenated class⊕attribute rows, the queried class row, one-hot target.
#[derive(Clone, Debug)]
pub struct EncodedExample {
    pub objects: Matrix,
    pub question: Matrix,
    pub target: Matrix,
    pub answer: usize,
}

pub const OBJ_W: &str = "vqa.obj.w";
pub const OBJ_B: &str = "vqa.obj.b";
pub const Q_W: &str = "vqa.q.w";
pub const Q_B: &str = "vqa.q.b";
pub const FUSE_W: &str = "vqa.fuse.w";
pub const FUSE_B: &str = "vqa.fuse.b";
pub const CLS_W: &str = "vqa.cls.w";
pub const CLS_B: &str = "vqa.cls.b";

/// Fresh VQA parameters: weights `N(0, 1/fan_in)`, biases zero.
pub fn init_vqa_params(dims: &ModelDims, rng: RngState) -> Result<ParamMap> {
    let mut g = rng.generator();
    let mut p = ParamMap::new();
    let d = dims.hidden;
    let weight =
        |g: &mut SeededRng, rows: usize, cols: usize| g.gaussian_matrix(rows, cols, 0.0, (1.0 / rows as f64).sqrt());
    p.insert(OBJ_W.into(), weight(&mut g, 2 * dims.embed_dim, d)?);
    p.insert(Q_W.into(), weight(&mut g, dims.embed_dim, d)?);
    p.insert(FUSE_W.into(), weight(&mut g, d, d)?);
    p.insert(CLS_W.into(), weight(&mut g, d, dims.num_answers)?);
    p.insert(OBJ_B.into(), Matrix::zeros(1, d));
    p.insert(Q_B.into(), Matrix::zeros(1, d));
    p.insert(FUSE_B.into(), Matrix::zeros(1, d));
    p.insert(CLS_B.into(), Matrix::zeros(1, dims.num_answers));
    Ok(p)
}

pub(crate) fn lookup<'a>(params: &'a ParamMap, name: &str) -> Result<&'a Matrix> {
    params.get(name).ok_or_else(|| Error::Config(format!("missing parameter {name}")))
}

/// VQA parameters registered on a tape.
#[derive(Clone, Copy, Debug)]
pub struct VqaVars {
    obj_w: Var,
    obj_b: Var,
    q_w: Var,
    q_b: Var,
    fuse_w: Var,
    fuse_b: Var,
    cls_w: Var,
    cls_b: Var,
}

impl VqaVars {
    pub fn register(tape: &mut Tape, params: &ParamMap) -> Result<Self> {
        let mut reg = |name: &str| tape.param(name, lookup(params, name)?.clone());
        Ok(Self {
            obj_w: reg(OBJ_W)?,
            obj_b: reg(OBJ_B)?,
            q_w: reg(Q_W)?,
            q_b: reg(Q_B)?,
            fuse_w: reg(FUSE_W)?,
            fuse_b: reg(FUSE_B)?,
            cls_w: reg(CLS_W)?,
            cls_b: reg(CLS_B)?,
        })
    }
}

/// Output of the representation half.
#[derive(Clone, Copy, Debug)]
pub struct Representation {
    /// Fused cross-modality vector, `1 × d`.
    pub x: Var,
    /// Object features, `N_o × d`.
    pub objects: Var,
}

/// `o_n = relu(obj(c_n ⊕ a_n) + ε_n)`, `x = relu(fuse(mean_n o_n + q(c_query)))`.
/// `noise` is the pre-activation perturbation (`N_o × d`), if any.
pub fn vqa_r(tape: &mut Tape, vars: &VqaVars, input: &EncodedExample, noise: Option<&Matrix>) -> Result<Representation> {
    let e = tape.constant(input.objects.clone())?;
    let pre = tape.matmul(e, vars.obj_w)?;
    let mut pre = tape.add_row(pre, vars.obj_b)?;
    if let Some(eps) = noise {
        let eps = tape.constant(eps.clone())?;
        pre = tape.add(pre, eps)?;
    }
    let objects = tape.relu(pre)?;
    let pooled = tape.mean_rows(objects)?;
    let q = tape.constant(input.question.clone())?;
    let q = tape.matmul(q, vars.q_w)?;
    let q = tape.add(q, vars.q_b)?;
    let h = tape.add(pooled, q)?;
    let h = tape.matmul(h, vars.fuse_w)?;
    let h = tape.add(h, vars.fuse_b)?;
    let x = tape.relu(h)?;
    Ok(Representation { x, objects })
}

/// Answer logits `cls(x + vbar)`; with no `vbar`, `cls(x)`.
pub fn vqa_c(tape: &mut Tape, vars: &VqaVars, x: Var, vbar: Option<Var>) -> Result<Var> {
    let input = match vbar {
        Some(v) => tape.add(x, v)?,
        None => x,
    };
    let z = tape.matmul(input, vars.cls_w)?;
    tape.add(z, vars.cls_b)
}

/// Value-level representation pass. `feature_noise = 0` is deterministic.
pub fn vqa_r_forward(
    params: &ParamMap,
    input: &EncodedExample,
    rng: RngState,
    feature_noise: f64,
) -> Result<(Matrix, Matrix)> {
    let mut tape = Tape::new();
    let vars = VqaVars::register(&mut tape, params)?;
    let d = lookup(params, OBJ_W)?.cols();
    let noise = if feature_noise > 0.0 {
        Some(rng.generator().gaussian_matrix(input.objects.rows(), d, 0.0, feature_noise)?)
    } else if feature_noise < 0.0 {
        return Err(Error::Parameter(format!("feature_noise must be >= 0, got {feature_noise}")));
    } else {
        None
    };
    let rep = vqa_r(&mut tape, &vars, input, noise.as_ref())?;
    Ok((tape.value(rep.x).clone(), tape.value(rep.objects).clone()))
}

/// Value-level classifier.
pub fn vqa_c_forward(params: &ParamMap, x: &Matrix, vbar: Option<&Matrix>) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vars = VqaVars::register(&mut tape, params)?;
    let d = lookup(params, CLS_W)?.rows();
    if x.shape() != (1, d) || vbar.is_some_and(|v| v.shape() != (1, d)) {
        return Err(Error::Config(format!("classifier input must be 1x{d}")));
    }
    let xv = tape.constant(x.clone())?;
    let vb = vbar.map(|v| tape.constant(v.clone())).transpose()?;
    let logits = vqa_c(&mut tape, &vars, xv, vb)?;
    Ok(tape.value(logits).clone())
}

/// Mean binary cross-entropy over answer dimensions.
pub fn bce_loss(logits: &[f64], target: &[f64]) -> Result<f64> {
    if logits.len() != target.len() || logits.is_empty() {
        return Err(Error::Contract(format!("bce lengths {} vs {}", logits.len(), target.len())));
    }
    if target.iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::Contract("bce targets must be 0 or 1".into()));
    }
    Ok(bce_value(logits, target))
}

/// Index of the largest logit (first on ties).
pub fn argmax(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best
}
