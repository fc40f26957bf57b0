use super::caption::{CaptionQuad, TemplateId, NEGATED_TEMPLATES};
use super::{render_scene_features, ConceptId, SceneSpec, World};
use crate::{NeatError, Result};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SplitKind {
    PretrainAffirmative,
    RetrievalNeg,
    McqNeg,
    BinaryNeg,
    ClsNeg,
    ClsRevNeg,
}

impl SplitKind {
    pub const ALL: [SplitKind; 6] = [
        SplitKind::PretrainAffirmative,
        SplitKind::RetrievalNeg,
        SplitKind::McqNeg,
        SplitKind::BinaryNeg,
        SplitKind::ClsNeg,
        SplitKind::ClsRevNeg,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitKind::PretrainAffirmative => "pretrain_affirmative",
            SplitKind::RetrievalNeg => "retrieval_neg",
            SplitKind::McqNeg => "mcq_neg",
            SplitKind::BinaryNeg => "binary_neg",
            SplitKind::ClsNeg => "cls_neg",
            SplitKind::ClsRevNeg => "cls_rev_neg",
        }
    }

    pub fn parse(s: &str) -> Option<SplitKind> {
        SplitKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s.to_ascii_lowercase())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum McqType {
    Affirmed,
    Negated,
    Hybrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub noise_scale: f64,
    pub max_concepts_per_scene: usize,
    /// Affirmative splits only: draw every concept set at most once, so that
    /// retrieval over the split is well posed.
    pub distinct_sets: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            noise_scale: 0.1,
            max_concepts_per_scene: 3,
            distinct_sets: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleManifest {
    pub world_seed: u64,
    pub num_concepts: usize,
    pub dim: usize,
    pub split_seed: u64,
    pub size: usize,
    pub config: SplitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub caption_id: u64,
    pub quad: CaptionQuad,
    pub scene_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqItem {
    pub scene_id: u64,
    pub choices: Vec<CaptionQuad>,
    pub correct_index: usize,
    pub mcq_type: McqType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinaryItem {
    pub scene_id: u64,
    pub concept: ConceptId,
    pub concept_present: bool,
    /// "This image shows X" against an affirmative statement about another concept.
    pub aff_statements: [String; 2],
    pub aff_correct: usize,
    /// "This image shows X" against "This image does not show X".
    pub neg_statements: [String; 2],
    pub neg_correct: usize,
}

/// One image of a template classification task with one candidate caption
/// per class. For `CLS_NEG` candidate `k` reads "a photo of the k but not of
/// the d_k"; for `CLS_REV_NEG` it is the reversal "a photo of the d_k but not
/// of the k".
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClsItem {
    pub scene_id: u64,
    pub class: ConceptId,
    pub distractors: Vec<ConceptId>,
    pub candidates: Vec<CaptionQuad>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetBundle {
    pub split: SplitKind,
    pub manifest: BundleManifest,
    pub scenes: Vec<SceneSpec>,
    pub captions: Vec<CaptionRecord>,
    #[serde(default)]
    pub mcq: Vec<McqItem>,
    #[serde(default)]
    pub binary: Vec<BinaryItem>,
    #[serde(default)]
    pub cls: Vec<ClsItem>,
}

impl DatasetBundle {
    pub fn scene(&self, scene_id: u64) -> Option<&SceneSpec> {
        // scene ids are dense indices for generated bundles
        match self.scenes.get(scene_id as usize) {
            Some(s) if s.scene_id == scene_id => Some(s),
            _ => self.scenes.iter().find(|s| s.scene_id == scene_id),
        }
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("bundle serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Every caption text in the bundle that came out of a template, in a
    /// stable order (paired captions, MCQ choices, classification candidates).
    pub fn templated_captions(&self) -> Vec<&CaptionQuad> {
        let mut out: Vec<&CaptionQuad> = self.captions.iter().map(|r| &r.quad).collect();
        out.extend(self.mcq.iter().flat_map(|m| m.choices.iter()));
        out.extend(self.cls.iter().flat_map(|c| c.candidates.iter()));
        out
    }

    /// Checks the structural invariants of the bundle.
    pub fn validate(&self) -> Result<()> {
        for r in &self.captions {
            let scene = self.scene(r.scene_id).ok_or_else(|| {
                NeatError::Validation(format!(
                    "caption {} references missing scene {}",
                    r.caption_id, r.scene_id
                ))
            })?;
            if self.split == SplitKind::PretrainAffirmative && r.quad.template_id.is_negated() {
                return Err(NeatError::Validation(
                    "pretraining split contains a negated caption".into(),
                ));
            }
            if !r.quad.is_true_of(&scene.present) {
                return Err(NeatError::Validation(format!(
                    "caption {:?} is false of its scene",
                    r.quad.caption
                )));
            }
        }
        for m in &self.mcq {
            let scene = self
                .scene(m.scene_id)
                .ok_or_else(|| NeatError::Validation("mcq item without scene".into()))?;
            let truths: Vec<bool> = m
                .choices
                .iter()
                .map(|c| c.is_true_of(&scene.present))
                .collect();
            if m.choices.len() != 4
                || truths.iter().filter(|&&t| t).count() != 1
                || !truths[m.correct_index]
            {
                return Err(NeatError::Validation(format!(
                    "mcq item for scene {} is unsound",
                    m.scene_id
                )));
            }
        }
        Ok(())
    }
}

/// Builds a split with the default [`SplitConfig`].
pub fn build_split(
    world: &World,
    kind: SplitKind,
    size: usize,
    seed: u64,
) -> Result<DatasetBundle> {
    build_split_with(world, kind, size, seed, &SplitConfig::default())
}

pub fn build_split_with(
    world: &World,
    kind: SplitKind,
    size: usize,
    seed: u64,
    config: &SplitConfig,
) -> Result<DatasetBundle> {
    if size == 0 {
        return Err(NeatError::invalid("split size must be positive"));
    }
    let c = world.num_concepts();
    if config.max_concepts_per_scene == 0 || config.max_concepts_per_scene >= c {
        return Err(NeatError::invalid(
            "max_concepts_per_scene must be in 1..num_concepts",
        ));
    }
    let mut gen = Generator {
        world,
        config,
        rng: ChaCha8Rng::seed_from_u64(seed),
        scenes: Vec::new(),
    };
    let mut bundle = DatasetBundle {
        split: kind,
        manifest: BundleManifest {
            world_seed: world.seed,
            num_concepts: c,
            dim: world.dim,
            split_seed: seed,
            size,
            config: config.clone(),
        },
        scenes: Vec::new(),
        captions: Vec::new(),
        mcq: Vec::new(),
        binary: Vec::new(),
        cls: Vec::new(),
    };
    match kind {
        SplitKind::PretrainAffirmative => gen.pretrain(size, &mut bundle)?,
        SplitKind::RetrievalNeg => gen.retrieval(size, &mut bundle)?,
        SplitKind::McqNeg => gen.mcq(size, &mut bundle)?,
        SplitKind::BinaryNeg => gen.binary(size, &mut bundle)?,
        SplitKind::ClsNeg | SplitKind::ClsRevNeg => {
            gen.cls(size, kind == SplitKind::ClsRevNeg, &mut bundle)?
        }
    }
    bundle.scenes = gen.scenes;
    bundle.validate()?;
    Ok(bundle)
}

struct Generator<'a> {
    world: &'a World,
    config: &'a SplitConfig,
    rng: ChaCha8Rng,
    scenes: Vec<SceneSpec>,
}

impl Generator<'_> {
    fn num_concepts(&self) -> usize {
        self.world.num_concepts()
    }

    fn add_scene(&mut self, mut present: Vec<ConceptId>) -> Result<u64> {
        present.sort_unstable();
        present.dedup();
        let scene_id = self.scenes.len() as u64;
        let feature = render_scene_features(
            self.world,
            &present,
            self.config.noise_scale,
            self.rng.next_u64(),
        )?;
        self.scenes.push(SceneSpec {
            scene_id,
            present,
            feature,
        });
        Ok(scene_id)
    }

    /// Random concept set containing `include`, avoiding `exclude`, with at
    /// most `max` members.
    fn random_set(
        &mut self,
        include: &[ConceptId],
        exclude: &[ConceptId],
        max: usize,
    ) -> Vec<ConceptId> {
        let lo = include.len().max(1);
        let target = self.rng.random_range(lo..=max.max(lo));
        let mut pool: Vec<ConceptId> = (0..self.num_concepts())
            .filter(|c| !include.contains(c) && !exclude.contains(c))
            .collect();
        pool.shuffle(&mut self.rng);
        let mut set = include.to_vec();
        set.extend(pool.into_iter().take(target - include.len()));
        set.sort_unstable();
        set
    }

    fn absent(&self, present: &[ConceptId]) -> Vec<ConceptId> {
        (0..self.num_concepts())
            .filter(|c| !present.contains(c))
            .collect()
    }

    fn pretrain(&mut self, size: usize, bundle: &mut DatasetBundle) -> Result<()> {
        let max = self.config.max_concepts_per_scene;
        let sets: Vec<Vec<ConceptId>> = if self.config.distinct_sets {
            let mut all = subsets_up_to(self.num_concepts(), max);
            if size > all.len() {
                return Err(NeatError::invalid(format!(
                    "{size} distinct scenes requested but only {} concept sets exist",
                    all.len()
                )));
            }
            all.shuffle(&mut self.rng);
            all.truncate(size);
            all
        } else {
            (0..size).map(|_| self.random_set(&[], &[], max)).collect()
        };
        for set in sets {
            let mut order = set.clone();
            order.shuffle(&mut self.rng);
            let scene_id = self.add_scene(set)?;
            let quad = CaptionQuad::fill(self.world, &order, TemplateId::Affirmative, None)?;
            bundle.captions.push(CaptionRecord {
                caption_id: scene_id,
                quad,
                scene_id,
            });
        }
        Ok(())
    }

    fn retrieval(&mut self, size: usize, bundle: &mut DatasetBundle) -> Result<()> {
        let c = self.num_concepts();
        let mut combos = Vec::with_capacity(NEGATED_TEMPLATES.len() * c * (c - 1));
        for t in NEGATED_TEMPLATES {
            for x in 0..c {
                for y in (0..c).filter(|&y| y != x) {
                    combos.push((t, x, y));
                }
            }
        }
        if size > combos.len() {
            return Err(NeatError::invalid(format!(
                "{size} retrieval items requested but only {} distinct negated captions exist",
                combos.len()
            )));
        }
        combos.shuffle(&mut self.rng);
        for (i, &(t, x, y)) in combos[..size].iter().enumerate() {
            let set = self.random_set(&[x], &[y], self.config.max_concepts_per_scene);
            let scene_id = self.add_scene(set)?;
            let quad = CaptionQuad::fill(self.world, &[x], t, Some(y))?;
            bundle.captions.push(CaptionRecord {
                caption_id: i as u64,
                quad,
                scene_id,
            });
        }
        Ok(())
    }

    fn random_template(&mut self) -> TemplateId {
        *NEGATED_TEMPLATES.choose(&mut self.rng).expect("non-empty")
    }

    fn false_affirmative(&mut self, present: &[ConceptId]) -> Result<CaptionQuad> {
        let w = *self
            .absent(present)
            .choose(&mut self.rng)
            .expect("scene leaves absent concepts");
        CaptionQuad::fill(self.world, &[w], TemplateId::Affirmative, None)
    }

    /// A negated caption that is false of the scene: it either affirms an
    /// absent concept or negates a present one.
    fn false_negated(&mut self, present: &[ConceptId]) -> Result<CaptionQuad> {
        let t = self.random_template();
        let absent = self.absent(present);
        let c = self.num_concepts();
        if present.len() >= 2 && self.rng.random_bool(0.3) {
            let mut pair = present.to_vec();
            pair.shuffle(&mut self.rng);
            return CaptionQuad::fill(self.world, &[pair[0]], t, Some(pair[1]));
        }
        let w = *absent.choose(&mut self.rng).expect("absent concept");
        let others: Vec<ConceptId> = (0..c).filter(|&o| o != w).collect();
        let n = *others.choose(&mut self.rng).expect("other concept");
        CaptionQuad::fill(self.world, &[w], t, Some(n))
    }

    fn mcq(&mut self, size: usize, bundle: &mut DatasetBundle) -> Result<()> {
        let c = self.num_concepts();
        let max = self.config.max_concepts_per_scene.min(c - 3);
        for i in 0..size {
            let mcq_type = [McqType::Affirmed, McqType::Negated, McqType::Hybrid][i % 3];
            let set = self.random_set(&[], &[], max);
            let absent = self.absent(&set);
            let x = *set.choose(&mut self.rng).expect("non-empty");
            let y = *absent.choose(&mut self.rng).expect("absent");
            let t = self.random_template();
            let true_neg = CaptionQuad::fill(self.world, &[x], t, Some(y))?;
            let true_aff = CaptionQuad::fill(self.world, &[x], TemplateId::Affirmative, None)?;
            let mut choices = Vec::with_capacity(4);
            let correct = match mcq_type {
                McqType::Affirmed => {
                    choices.push(true_aff);
                    self.fill_distinct(&mut choices, 4, |g| g.false_affirmative(&set))?;
                    0
                }
                McqType::Negated => {
                    let rt = self.random_template();
                    let reversal = CaptionQuad::fill(self.world, &[y], rt, Some(x))?;
                    choices.push(true_neg);
                    choices.push(reversal);
                    self.fill_distinct(&mut choices, 4, |g| g.false_negated(&set))?;
                    0
                }
                McqType::Hybrid => {
                    if self.rng.random_bool(0.5) {
                        choices.push(true_aff);
                        self.fill_distinct(&mut choices, 2, |g| g.false_affirmative(&set))?;
                        self.fill_distinct(&mut choices, 4, |g| g.false_negated(&set))?;
                    } else {
                        let rt = self.random_template();
                        let reversal = CaptionQuad::fill(self.world, &[y], rt, Some(x))?;
                        choices.push(true_neg);
                        choices.push(reversal);
                        self.fill_distinct(&mut choices, 4, |g| g.false_affirmative(&set))?;
                    }
                    0
                }
            };
            let correct_quad = choices[correct].clone();
            choices.shuffle(&mut self.rng);
            let correct_index = choices
                .iter()
                .position(|q| *q == correct_quad)
                .expect("correct choice kept");
            let scene_id = self.add_scene(set)?;
            bundle.captions.push(CaptionRecord {
                caption_id: i as u64,
                quad: correct_quad,
                scene_id,
            });
            bundle.mcq.push(McqItem {
                scene_id,
                choices,
                correct_index,
                mcq_type,
            });
        }
        Ok(())
    }

    fn fill_distinct(
        &mut self,
        choices: &mut Vec<CaptionQuad>,
        target: usize,
        mut make: impl FnMut(&mut Self) -> Result<CaptionQuad>,
    ) -> Result<()> {
        let mut attempts = 0;
        while choices.len() < target {
            let q = make(self)?;
            if !choices.iter().any(|c| c.caption == q.caption) {
                choices.push(q);
            }
            attempts += 1;
            if attempts > 1000 {
                return Err(NeatError::invalid(
                    "world too small to draw distinct distractors",
                ));
            }
        }
        Ok(())
    }

    fn binary(&mut self, size: usize, bundle: &mut DatasetBundle) -> Result<()> {
        let c = self.num_concepts();
        let max = self.config.max_concepts_per_scene;
        for i in 0..size {
            let concept = i % c;
            let concept_present = (i / c).is_multiple_of(2);
            let set = if concept_present {
                self.random_set(&[concept], &[], max)
            } else {
                self.random_set(&[], &[concept], max)
            };
            let other = if concept_present {
                *self.absent(&set).choose(&mut self.rng).expect("absent")
            } else {
                *set.choose(&mut self.rng).expect("non-empty")
            };
            let name = self.world.name(concept);
            let shows = format!("This image shows the {name}");
            let shows_other = format!("This image shows the {}", self.world.name(other));
            let not_shows = format!("This image does not show the {name}");

            let (aff_statements, aff_correct) =
                self.ordered_pair(shows.clone(), shows_other, concept_present);
            let (neg_statements, neg_correct) =
                self.ordered_pair(shows, not_shows, concept_present);
            let scene_id = self.add_scene(set)?;
            bundle.binary.push(BinaryItem {
                scene_id,
                concept,
                concept_present,
                aff_statements,
                aff_correct,
                neg_statements,
                neg_correct,
            });
        }
        Ok(())
    }

    /// Randomly orders `(a, b)`; returns the index of `a` if `a_true`, else of `b`.
    fn ordered_pair(&mut self, a: String, b: String, a_true: bool) -> ([String; 2], usize) {
        if self.rng.random_bool(0.5) {
            ([a, b], if a_true { 0 } else { 1 })
        } else {
            ([b, a], if a_true { 1 } else { 0 })
        }
    }

    fn cls(&mut self, size: usize, reversed: bool, bundle: &mut DatasetBundle) -> Result<()> {
        let c = self.num_concepts();
        for i in 0..size {
            let class = i % c;
            let distractors: Vec<ConceptId> = (0..c)
                .map(|k| {
                    let d = self.rng.random_range(0..c - 1);
                    if d >= k {
                        d + 1
                    } else {
                        d
                    }
                })
                .collect();
            let scene_id = self.add_scene(vec![class])?;
            let mut candidates = Vec::with_capacity(c);
            for k in 0..c {
                let q = if reversed {
                    CaptionQuad::fill(self.world, &[distractors[k]], TemplateId::ButNot, Some(k))?
                } else {
                    CaptionQuad::fill(self.world, &[k], TemplateId::ButNot, Some(distractors[k]))?
                };
                candidates.push(q);
            }
            let truth = CaptionQuad::fill(
                self.world,
                &[class],
                TemplateId::ButNot,
                Some(distractors[class]),
            )?;
            bundle.captions.push(CaptionRecord {
                caption_id: i as u64,
                quad: truth,
                scene_id,
            });
            bundle.cls.push(ClsItem {
                scene_id,
                class,
                distractors,
                candidates,
            });
        }
        Ok(())
    }
}

fn subsets_up_to(n: usize, max: usize) -> Vec<Vec<ConceptId>> {
    fn rec(start: usize, n: usize, max: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if !cur.is_empty() {
            out.push(cur.clone());
        }
        if cur.len() == max {
            return;
        }
        for i in start..n {
            cur.push(i);
            rec(i + 1, n, max, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, n, max, &mut Vec::new(), &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::generate_world;

    fn world() -> World {
        generate_world(12, 32, 7).unwrap()
    }

    #[test]
    fn retrieval_split_is_bijective() {
        let w = world();
        let b = build_split(&w, SplitKind::RetrievalNeg, 512, 3).unwrap();
        assert_eq!(b.scenes.len(), 512);
        assert_eq!(b.captions.len(), 512);
        let mut scene_ids: Vec<_> = b.captions.iter().map(|c| c.scene_id).collect();
        scene_ids.sort_unstable();
        scene_ids.dedup();
        assert_eq!(scene_ids.len(), 512);
        let mut texts: Vec<_> = b.captions.iter().map(|c| c.quad.caption.clone()).collect();
        texts.sort();
        texts.dedup();
        assert_eq!(texts.len(), 512);
    }

    #[test]
    fn retrieval_split_rejects_oversize() {
        let w = world();
        assert!(build_split(&w, SplitKind::RetrievalNeg, 4 * 12 * 11 + 1, 3).is_err());
    }

    #[test]
    fn same_seed_same_hash() {
        let w = world();
        for kind in SplitKind::ALL {
            let a = build_split(&w, kind, 60, 11).unwrap();
            let b = build_split(&w, kind, 60, 11).unwrap();
            assert_eq!(a.hash(), b.hash(), "{kind:?}");
        }
        let a = build_split(&w, SplitKind::McqNeg, 60, 11).unwrap();
        let b = build_split(&w, SplitKind::McqNeg, 60, 12).unwrap();
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn pretrain_split_is_affirmative_and_distinct_sets_are_unique() {
        let w = world();
        let cfg = SplitConfig {
            distinct_sets: true,
            ..SplitConfig::default()
        };
        let b = build_split_with(&w, SplitKind::PretrainAffirmative, 200, 5, &cfg).unwrap();
        assert!(b
            .captions
            .iter()
            .all(|c| c.quad.template_id == TemplateId::Affirmative));
        let mut sets: Vec<_> = b.scenes.iter().map(|s| s.present.clone()).collect();
        sets.sort();
        sets.dedup();
        assert_eq!(sets.len(), 200);
        assert!(build_split_with(&w, SplitKind::PretrainAffirmative, 299, 5, &cfg).is_err());
    }

    #[test]
    fn mcq_types_cycle() {
        let w = world();
        let b = build_split(&w, SplitKind::McqNeg, 30, 2).unwrap();
        let counts = |t| b.mcq.iter().filter(|m| m.mcq_type == t).count();
        assert_eq!(counts(McqType::Affirmed), 10);
        assert_eq!(counts(McqType::Negated), 10);
        assert_eq!(counts(McqType::Hybrid), 10);
        for m in &b.mcq {
            let negs = m
                .choices
                .iter()
                .filter(|c| c.template_id.is_negated())
                .count();
            match m.mcq_type {
                McqType::Affirmed => assert_eq!(negs, 0),
                McqType::Negated => assert_eq!(negs, 4),
                McqType::Hybrid => assert_eq!(negs, 2),
            }
        }
    }

    #[test]
    fn binary_items_are_consistent() {
        let w = world();
        let b = build_split(&w, SplitKind::BinaryNeg, 48, 2).unwrap();
        for item in &b.binary {
            let scene = b.scene(item.scene_id).unwrap();
            assert_eq!(scene.contains(item.concept), item.concept_present);
            let neg_true = &item.neg_statements[item.neg_correct];
            assert_eq!(neg_true.contains("does not"), !item.concept_present);
        }
    }

    #[test]
    fn cls_bundles_share_distractors() {
        let w = world();
        let neg = build_split(&w, SplitKind::ClsNeg, 24, 9).unwrap();
        let rev = build_split(&w, SplitKind::ClsRevNeg, 24, 9).unwrap();
        for (a, b) in neg.cls.iter().zip(&rev.cls) {
            assert_eq!(a.distractors, b.distractors);
            for (qa, qb) in a.candidates.iter().zip(&b.candidates) {
                assert_eq!(qa.reversed, qb.caption);
            }
            assert!(a.candidates[a.class].is_true_of(&[a.class]));
            assert!(!b.candidates[b.class].is_true_of(&[b.class]));
        }
    }

    #[test]
    fn subset_count() {
        assert_eq!(subsets_up_to(12, 3).len(), 12 + 66 + 220);
    }
}
