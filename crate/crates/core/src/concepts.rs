//! Concept vocabulary, deterministic pseudo-embeddings and the ground-truth
//! relation matrix built from class/attribute similarities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConceptKind {
    Class,
    Attribute,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptVocabulary {
    pub num_classes: usize,
    pub num_attributes: usize,
    pub embed_dim: usize,
    pub embed_seed: u64,
}

impl ConceptVocabulary {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_attributes < 2 {
            return Err(Error::Config(format!(
                "vocabulary needs >= 2 classes and attributes, got {} and {}",
                self.num_classes, self.num_attributes
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::Config("embed_dim must be positive".into()));
        }
        Ok(())
    }

    fn bound(&self, kind: ConceptKind) -> usize {
        match kind {
            ConceptKind::Class => self.num_classes,
            ConceptKind::Attribute => self.num_attributes,
        }
    }

    /// Unit-norm embedding, a pure function of `(embed_seed, kind, id)`.
    pub fn embed(&self, kind: ConceptKind, id: usize) -> Result<Vec<f64>> {
        if id >= self.bound(kind) {
            return Err(Error::Index(format!("{kind:?} id {id} >= {}", self.bound(kind))));
        }
        let tag = match kind {
            ConceptKind::Class => 1u64,
            ConceptKind::Attribute => 2u64,
        };
        let mut g = RngState::new(self.embed_seed, (tag << 32) | id as u64).generator();
        loop {
            let v: Vec<f64> = (0..self.embed_dim).map(|_| g.normal()).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                return Ok(v.into_iter().map(|x| x / norm).collect());
            }
        }
    }
}

/// Objects in one scene as `(class_id, attribute_id)` pairs; node `i` is object `i`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SceneSpec {
    pub objects: Vec<(usize, usize)>,
}

impl SceneSpec {
    pub fn num_objects(&self) -> usize {
        self.objects.len()
    }

    pub fn validate(&self, vocab: &ConceptVocabulary) -> Result<()> {
        if self.objects.len() < 2 {
            return Err(Error::Contract(format!("scene needs >= 2 objects, got {}", self.objects.len())));
        }
        for &(c, a) in &self.objects {
            if c >= vocab.num_classes || a >= vocab.num_attributes {
                return Err(Error::Index(format!("object ({c}, {a}) outside vocabulary")));
            }
        }
        Ok(())
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Ground-truth relation matrix: the class of each node is paired with the
/// attribute of every other node, the two directed cosines are averaged and
/// mapped onto `[0, 1]` by `(cos + 1) / 2`. The diagonal is 1.
pub fn build_gt_relation(scene: &SceneSpec, vocab: &ConceptVocabulary) -> Result<Matrix> {
    scene.validate(vocab)?;
    let classes = scene
        .objects
        .iter()
        .map(|&(c, _)| vocab.embed(ConceptKind::Class, c))
        .collect::<Result<Vec<_>>>()?;
    let attrs = scene
        .objects
        .iter()
        .map(|&(_, a)| vocab.embed(ConceptKind::Attribute, a))
        .collect::<Result<Vec<_>>>()?;
    Ok(relation_from_embeddings(&classes, &attrs))
}

/// Relation matrix from per-node class and attribute embeddings (equal lengths).
pub fn relation_from_embeddings(classes: &[Vec<f64>], attrs: &[Vec<f64>]) -> Matrix {
    let n = classes.len();
    let mut r = Matrix::identity(n);
    for i in 0..n {
        for j in i + 1..n {
            let sym = 0.5 * (cosine(&classes[i], &attrs[j]) + cosine(&classes[j], &attrs[i]));
            let v = ((sym + 1.0) / 2.0).clamp(0.0, 1.0);
            r.set(i, j, v);
            r.set(j, i, v);
        }
    }
    r
}

/// Node targets for the representation branch are the object features themselves.
pub fn node_gt_features(objects: &Matrix) -> Matrix {
    objects.clone()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(dim: usize) -> ConceptVocabulary {
        ConceptVocabulary { num_classes: 8, num_attributes: 8, embed_dim: dim, embed_seed: 11 }
    }

    #[test]
    fn embeddings_are_deterministic_unit_vectors() {
        let v = vocab(16);
        let a = v.embed(ConceptKind::Class, 3).unwrap();
        assert_eq!(a, v.embed(ConceptKind::Class, 3).unwrap());
        assert_ne!(a, v.embed(ConceptKind::Attribute, 3).unwrap());
        let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn out_of_bounds_id() {
        assert!(matches!(vocab(4).embed(ConceptKind::Attribute, 8), Err(Error::Index(_))));
    }

    #[test]
    fn random_pairs_nearly_orthogonal() {
        let v = ConceptVocabulary { num_classes: 100, num_attributes: 100, embed_dim: 64, embed_seed: 5 };
        let mean_abs: f64 = (0..100)
            .map(|i| {
                let a = v.embed(ConceptKind::Class, i).unwrap();
                let b = v.embed(ConceptKind::Attribute, (i * 37 + 11) % 100).unwrap();
                cosine(&a, &b).abs()
            })
            .sum::<f64>()
            / 100.0;
        assert!(mean_abs <= 0.3, "{mean_abs}");
    }

    #[test]
    fn gt_relation_shape_and_range() {
        let scene = SceneSpec { objects: vec![(0, 1), (2, 3), (4, 5), (6, 7)] };
        let r = build_gt_relation(&scene, &vocab(16)).unwrap();
        assert_eq!(r.shape(), (4, 4));
        assert_eq!(r.asymmetry(), 0.0);
        for i in 0..4 {
            assert_eq!(r.get(i, i), 1.0);
        }
        assert!(r.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn identical_embeddings_give_all_ones() {
        let e = vec![vec![0.6, 0.8]; 5];
        assert_eq!(relation_from_embeddings(&e, &e), Matrix::filled(5, 5, 1.0));
    }

    #[test]
    fn invalid_scene_rejected() {
        let scene = SceneSpec { objects: vec![(0, 1), (9, 0)] };
        assert!(build_gt_relation(&scene, &vocab(4)).is_err());
    }

    #[test]
    fn node_targets_pass_through() {
        let o = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(node_gt_features(&o), o);
    }
}
