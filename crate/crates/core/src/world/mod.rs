//! Synthetic concept world.
//!
//! A world is a fixed vocabulary of concepts, each with a random unit
//! direction in the shared embedding space. Scene features stand in for a
//! frozen vision encoder: they are the normalized mean of the directions of
//! the concepts present, plus a small Gaussian perturbation.

mod archive;
mod bundle_io;
mod caption;
mod split;

pub use archive::{
    export_embedding_archive, import_embedding_archive, EmbeddingArchive, ARCHIVE_MAGIC,
    ARCHIVE_VERSION,
};
pub use bundle_io::{read_bundle, write_bundle};
pub use caption::{synthesize_caption, CaptionQuad, TemplateId, NEGATED_TEMPLATES};
pub use split::{
    build_split, build_split_with, BinaryItem, BundleManifest, CaptionRecord, ClsItem,
    DatasetBundle, McqItem, McqType, SplitConfig, SplitKind,
};

use crate::linalg;
use crate::{NeatError, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Every concept name the tokenizer knows. Worlds use a prefix of this list,
/// so its length is the concept capacity.
pub const CONCEPT_NAMES: &[&str] = &[
    "dog", "cat", "grass", "bus", "car", "tree", "bird", "horse", "boat", "truck", "chair",
    "table", "cup", "lamp", "apple", "banana", "clock", "bench", "kite", "sheep", "cow", "train",
    "bicycle", "umbrella", "pizza", "laptop", "phone", "book", "vase", "bottle", "bear", "zebra",
    "giraffe", "elephant", "airplane", "sofa", "bed", "sink", "oven", "river",
];

pub type ConceptId = usize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: ConceptId,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub dim: usize,
    pub concepts: Vec<Concept>,
    directions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub scene_id: u64,
    /// Sorted, deduplicated concept ids.
    pub present: Vec<ConceptId>,
    pub feature: Vec<f64>,
}

impl SceneSpec {
    pub fn contains(&self, concept: ConceptId) -> bool {
        self.present.binary_search(&concept).is_ok()
    }
}

/// Creates a deterministic world of `num_concepts` concepts in `dim` dimensions.
pub fn generate_world(num_concepts: usize, dim: usize, seed: u64) -> Result<World> {
    if num_concepts < 4 {
        return Err(NeatError::invalid(format!(
            "need at least 4 concepts, got {num_concepts}"
        )));
    }
    if num_concepts > CONCEPT_NAMES.len() {
        return Err(NeatError::invalid(format!(
            "{num_concepts} concepts exceed the tokenizer capacity of {}",
            CONCEPT_NAMES.len()
        )));
    }
    if dim < 8 {
        return Err(NeatError::invalid(format!(
            "embedding dimension must be >= 8, got {dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let concepts = CONCEPT_NAMES[..num_concepts]
        .iter()
        .enumerate()
        .map(|(id, name)| Concept {
            id,
            name: name.to_string(),
        })
        .collect();
    let directions = (0..num_concepts)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            linalg::normalized(&v)
        })
        .collect();
    Ok(World {
        seed,
        dim,
        concepts,
        directions,
    })
}

impl World {
    pub fn num_concepts(&self) -> usize {
        self.concepts.len()
    }

    pub fn name(&self, id: ConceptId) -> &str {
        &self.concepts[id].name
    }

    pub fn concept_by_name(&self, name: &str) -> Option<ConceptId> {
        self.concepts.iter().position(|c| c.name == name)
    }

    pub fn direction(&self, id: ConceptId) -> &[f64] {
        &self.directions[id]
    }

    /// Canonical serialization, used for hashing and byte-level comparisons.
    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("world serializes")
    }

    pub(crate) fn check_ids(&self, ids: &[ConceptId]) -> Result<()> {
        match ids.iter().find(|&&c| c >= self.num_concepts()) {
            Some(bad) => Err(NeatError::invalid(format!("unknown concept id {bad}"))),
            None => Ok(()),
        }
    }
}

/// Feature of a scene showing `present`: the normalized mean of the concept
/// directions plus `noise_scale`-sized isotropic Gaussian noise. Components are
/// rounded to `f32` so features survive the archive format unchanged.
pub fn render_scene_features(
    world: &World,
    present: &[ConceptId],
    noise_scale: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if present.is_empty() {
        return Err(NeatError::invalid(
            "scene must contain at least one concept",
        ));
    }
    world.check_ids(present)?;
    let dim = world.dim;
    let mut v = vec![0.0; dim];
    for &c in present {
        linalg::axpy(1.0 / present.len() as f64, world.direction(c), &mut v);
    }
    if noise_scale > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sigma = noise_scale / (dim as f64).sqrt();
        for x in v.iter_mut() {
            let g: f64 = StandardNormal.sample(&mut rng);
            *x += sigma * g;
        }
    }
    linalg::normalize_in_place(&mut v);
    for x in v.iter_mut() {
        *x = *x as f32 as f64;
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn world_is_deterministic() {
        let a = generate_world(10, 32, 7).unwrap();
        let b = generate_world(10, 32, 7).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());
    }

    #[test]
    fn seed_changes_directions() {
        let a = generate_world(10, 32, 7).unwrap();
        let b = generate_world(10, 32, 8).unwrap();
        assert_ne!(a.to_bytes(), b.to_bytes());
        assert_eq!(a.concepts, b.concepts);
        assert_ne!(a.direction(0), b.direction(0));
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(generate_world(3, 32, 1).is_err());
        assert!(generate_world(CONCEPT_NAMES.len() + 1, 32, 1).is_err());
        assert!(generate_world(10, 4, 1).is_err());
        assert!(generate_world(CONCEPT_NAMES.len(), 32, 1).is_ok());
    }

    #[test]
    fn concept_names_are_single_lowercase_tokens() {
        let mut names: Vec<_> = CONCEPT_NAMES.to_vec();
        for n in &names {
            assert!(n.chars().all(|c| c.is_ascii_lowercase()), "{n}");
        }
        names.sort();
        names.dedup();
        assert_eq!(names.len(), CONCEPT_NAMES.len());
    }

    #[test]
    fn single_concept_without_noise_is_its_direction() {
        let w = generate_world(10, 32, 7).unwrap();
        let f = render_scene_features(&w, &[3], 0.0, 0).unwrap();
        for (a, b) in f.iter().zip(w.direction(3)) {
            assert!((a - b).abs() < 1e-7);
        }
    }

    #[test]
    fn two_concepts_without_noise_is_normalized_midpoint() {
        let w = generate_world(10, 32, 7).unwrap();
        let f = render_scene_features(&w, &[1, 4], 0.0, 0).unwrap();
        let mid: Vec<f64> = w
            .direction(1)
            .iter()
            .zip(w.direction(4))
            .map(|(a, b)| a + b)
            .collect();
        let n = mid.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (a, m) in f.iter().zip(&mid) {
            assert!((a - m / n).abs() < 1e-7);
        }
    }

    #[test]
    fn empty_scene_is_rejected() {
        let w = generate_world(10, 32, 7).unwrap();
        assert!(render_scene_features(&w, &[], 0.1, 0).is_err());
        assert!(render_scene_features(&w, &[10], 0.1, 0).is_err());
    }

    proptest::proptest! {
        #[test]
        fn features_have_unit_norm(
            ids in proptest::collection::btree_set(0usize..10, 1..4),
            noise in 0.0f64..2.0,
            seed in 0u64..1000,
        ) {
            let w = generate_world(10, 32, 7).unwrap();
            let ids: Vec<_> = ids.into_iter().collect();
            let f = render_scene_features(&w, &ids, noise, seed).unwrap();
            let n = linalg::norm(&f);
            proptest::prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }
}
