use super::{ConceptId, World};
use crate::{NeatError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TemplateId {
    ButNot,
    Without,
    Not,
    No,
    Affirmative,
}

pub const NEGATED_TEMPLATES: [TemplateId; 4] = [
    TemplateId::ButNot,
    TemplateId::Without,
    TemplateId::Not,
    TemplateId::No,
];

impl TemplateId {
    pub fn is_negated(self) -> bool {
        self != TemplateId::Affirmative
    }
}

/// A caption together with its decomposition and its reversal.
///
/// `affirmed` and `negated` record which concepts the generator used; the
/// text fields are the ground truth the decomposer is scored against.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionQuad {
    pub caption: String,
    pub positive_part: String,
    pub negative_part: String,
    pub reversed: String,
    pub template_id: TemplateId,
    pub affirmed: Vec<ConceptId>,
    pub negated: Option<ConceptId>,
}

pub(crate) fn photo_of(names: &[&str]) -> String {
    let listed: Vec<String> = names.iter().map(|n| format!("the {n}")).collect();
    format!("a photo of {}", listed.join(" and "))
}

impl CaptionQuad {
    /// Fills a template without checking it against any scene.
    pub(crate) fn fill(
        world: &World,
        affirmed: &[ConceptId],
        template: TemplateId,
        negated: Option<ConceptId>,
    ) -> Result<Self> {
        world.check_ids(affirmed)?;
        if affirmed.is_empty() {
            return Err(NeatError::invalid(
                "caption must affirm at least one concept",
            ));
        }
        let names: Vec<&str> = affirmed.iter().map(|&c| world.name(c)).collect();
        if template == TemplateId::Affirmative {
            if negated.is_some() {
                return Err(NeatError::invalid(
                    "affirmative captions take no negated concept",
                ));
            }
            let caption = photo_of(&names);
            return Ok(CaptionQuad {
                positive_part: caption.clone(),
                caption,
                negative_part: String::new(),
                reversed: String::new(),
                template_id: template,
                affirmed: affirmed.to_vec(),
                negated: None,
            });
        }
        let neg = negated
            .ok_or_else(|| NeatError::invalid("negated template needs a negated concept"))?;
        world.check_ids(&[neg])?;
        if affirmed.len() != 1 {
            return Err(NeatError::invalid(
                "negated captions affirm exactly one concept",
            ));
        }
        if affirmed[0] == neg {
            return Err(NeatError::invalid(
                "a caption cannot affirm and negate the same concept",
            ));
        }
        let (x, y) = (names[0], world.name(neg));
        let caption = match template {
            TemplateId::ButNot => format!("a photo of the {x} but not of the {y}"),
            TemplateId::Without => format!("a photo of the {x} without the {y}"),
            TemplateId::Not => format!("a photo of the {x} not with the {y}"),
            TemplateId::No => format!("a photo of the {x} with no {y}"),
            TemplateId::Affirmative => unreachable!(),
        };
        Ok(CaptionQuad {
            caption,
            positive_part: format!("a photo of the {x}"),
            negative_part: format!("a photo of the {y}"),
            reversed: format!("a photo of the {y} but not of the {x}"),
            template_id: template,
            affirmed: affirmed.to_vec(),
            negated: Some(neg),
        })
    }

    /// The reversed caption as a quad of its own (always a but-not form).
    pub fn reversed_quad(&self) -> Option<CaptionQuad> {
        let neg = self.negated?;
        Some(CaptionQuad {
            caption: self.reversed.clone(),
            positive_part: self.negative_part.clone(),
            negative_part: self.positive_part.clone(),
            reversed: swap_but_not(&self.reversed)?,
            template_id: TemplateId::ButNot,
            affirmed: vec![neg],
            negated: Some(self.affirmed[0]),
        })
    }

    /// Whether the caption is a true description of a scene with `present`.
    pub fn is_true_of(&self, present: &[ConceptId]) -> bool {
        self.affirmed.iter().all(|c| present.contains(c))
            && self.negated.is_none_or(|n| !present.contains(&n))
    }
}

fn swap_but_not(text: &str) -> Option<String> {
    let (left, right) = text.split_once(" but not of ")?;
    let subject = left.strip_prefix("a photo of ")?;
    Some(format!("a photo of {right} but not of {subject}"))
}

/// Builds a caption for a scene whose concepts are `present`, affirming
/// `affirmed` and, for negated templates, negating `negated`.
///
/// Rejects captions that would be false of the scene.
pub fn synthesize_caption(
    world: &World,
    present: &[ConceptId],
    affirmed: &[ConceptId],
    template: TemplateId,
    negated: Option<ConceptId>,
) -> Result<CaptionQuad> {
    world.check_ids(present)?;
    if let Some(c) = affirmed.iter().find(|c| !present.contains(c)) {
        return Err(NeatError::invalid(format!(
            "affirmed concept {} is not in the scene",
            world.name(*c)
        )));
    }
    if let Some(n) = negated {
        if present.contains(&n) {
            return Err(NeatError::invalid(format!(
                "negated concept {} is present in the scene",
                world.name(n)
            )));
        }
    }
    CaptionQuad::fill(world, affirmed, template, negated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::generate_world;

    fn world() -> World {
        generate_world(10, 32, 7).unwrap()
    }

    #[test]
    fn but_not_caption_and_parts() {
        let w = world();
        let (dog, cat) = (
            w.concept_by_name("dog").unwrap(),
            w.concept_by_name("cat").unwrap(),
        );
        let q = synthesize_caption(&w, &[dog], &[dog], TemplateId::ButNot, Some(cat)).unwrap();
        assert_eq!(q.caption, "a photo of the dog but not of the cat");
        assert_eq!(q.positive_part, "a photo of the dog");
        assert_eq!(q.negative_part, "a photo of the cat");
        assert_eq!(q.reversed, "a photo of the cat but not of the dog");
    }

    #[test]
    fn affirmative_caption() {
        let w = world();
        let dog = w.concept_by_name("dog").unwrap();
        let q = synthesize_caption(&w, &[dog], &[dog], TemplateId::Affirmative, None).unwrap();
        assert_eq!(q.caption, "a photo of the dog");
        assert_eq!(q.positive_part, "a photo of the dog");
        assert!(q.negative_part.is_empty());
        assert!(q.reversed.is_empty());
    }

    #[test]
    fn negating_a_present_concept_is_rejected() {
        let w = world();
        let dog = w.concept_by_name("dog").unwrap();
        let grass = w.concept_by_name("grass").unwrap();
        let err = synthesize_caption(&w, &[dog, grass], &[grass], TemplateId::ButNot, Some(dog));
        assert!(err.is_err());
    }

    #[test]
    fn other_templates_reverse_into_but_not_form() {
        let w = world();
        for t in NEGATED_TEMPLATES {
            let q = synthesize_caption(&w, &[0, 2], &[0], t, Some(1)).unwrap();
            assert_eq!(q.reversed, "a photo of the cat but not of the dog");
            assert!(q.is_true_of(&[0, 2]));
            let r = q.reversed_quad().unwrap();
            assert!(!r.is_true_of(&[0, 2]));
            assert_eq!(r.reversed, "a photo of the dog but not of the cat");
        }
    }

    #[test]
    fn multi_concept_affirmative() {
        let w = world();
        let q = synthesize_caption(&w, &[0, 1, 2], &[2, 0], TemplateId::Affirmative, None).unwrap();
        assert_eq!(q.caption, "a photo of the grass and the dog");
    }
}
