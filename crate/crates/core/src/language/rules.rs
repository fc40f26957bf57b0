use super::{Confidence, DecompositionResult, DecompositionSource};
use crate::{NeatError, Result};

/// Negation cues in matching priority order.
const CUES: [&[&str]; 4] = [&["but", "not"], &["without"], &["not"], &["no"]];

const CUE_WORDS: [&str; 3] = ["not", "no", "without"];
const PREPOSITIONS: [&str; 5] = ["on", "with", "in", "near", "of"];
const ARTICLES: [&str; 3] = ["a", "an", "the"];
const PHOTO_PREFIX: &str = "a photo of ";

fn words(caption: &str) -> Vec<String> {
    caption
        .split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| matches!(c, '.' | ',' | '!' | '?' | ';' | ':' | '"'))
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

fn find_cue(words: &[String]) -> Option<(usize, usize, usize)> {
    for (rank, cue) in CUES.iter().enumerate() {
        if let Some(start) = words
            .windows(cue.len())
            .position(|w| w.iter().zip(cue.iter()).all(|(a, b)| a == b))
        {
            return Some((rank, start, start + cue.len()));
        }
    }
    None
}

fn join_clean(words: &[String]) -> String {
    words
        .iter()
        .filter(|w| !CUE_WORDS.contains(&w.as_str()))
        .map(String::as_str)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Strips "a photo of " so the subject can be re-embedded in a new frame.
pub(super) fn subject_of(positive: &str) -> &str {
    positive.strip_prefix(PHOTO_PREFIX).unwrap_or(positive)
}

pub(super) fn reversed_from_parts(positive: &str, negative: &str) -> String {
    format!("{negative} but not of {}", subject_of(positive))
}

/// Splits a negated caption into its affirmed and negated parts.
///
/// Known templates give exact splits; anything else is split at the first
/// cue (by priority) and marked heuristic.
pub fn decompose(caption: &str) -> Result<DecompositionResult> {
    let words = words(caption);
    if words.is_empty() {
        return Err(NeatError::invalid("caption is empty"));
    }
    let (rank, start, end) =
        find_cue(&words).ok_or_else(|| NeatError::NoNegationFound(caption.to_string()))?;
    let mut left = words[..start].to_vec();
    let mut right = words[end..].to_vec();

    let exact = match rank {
        0 => {
            let had_of = right.first().is_some_and(|w| w == "of");
            if had_of {
                right.remove(0);
            }
            had_of
        }
        1 => true,
        2 => {
            let had_prep = right
                .first()
                .is_some_and(|w| PREPOSITIONS.contains(&w.as_str()));
            if had_prep {
                right.remove(0);
            }
            had_prep
        }
        _ => {
            let with_no = left.last().is_some_and(|w| w == "with");
            if with_no
                && right
                    .first()
                    .is_some_and(|w| !ARTICLES.contains(&w.as_str()))
            {
                right.insert(0, "the".to_string());
            }
            with_no
        }
    };
    while left
        .last()
        .is_some_and(|w| matches!(w.as_str(), "but" | "and" | "with"))
    {
        left.pop();
    }

    let positive = join_clean(&left);
    let np = join_clean(&right);
    if positive.is_empty() || np.is_empty() {
        return Err(NeatError::Validation(format!(
            "cannot split {caption:?} into two non-empty parts"
        )));
    }
    let negative = format!("{PHOTO_PREFIX}{np}");
    Ok(DecompositionResult {
        reversed: reversed_from_parts(&positive, &negative),
        positive_part: positive,
        negative_part: negative,
        source: DecompositionSource::Rule,
        confidence: if exact {
            Confidence::Exact
        } else {
            Confidence::Heuristic
        },
        fallback_reason: None,
    })
}

/// The semantically reversed caption: affirms what was negated and negates
/// what was affirmed.
pub fn reverse(caption: &str) -> Result<String> {
    decompose(caption).map(|d| d.reversed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn split(caption: &str) -> (String, String, String, Confidence) {
        let d = decompose(caption).unwrap();
        (d.positive_part, d.negative_part, d.reversed, d.confidence)
    }

    #[test]
    fn worked_examples() {
        let (p, n, r, c) = split("a photo of a dog not on grass");
        assert_eq!(p, "a photo of a dog");
        assert_eq!(n, "a photo of grass");
        assert_eq!(r, "a photo of grass but not of a dog");
        assert_eq!(c, Confidence::Exact);

        let (p, n, _, _) = split("a scene without a bus");
        assert_eq!(p, "a scene");
        assert_eq!(n, "a photo of a bus");
    }

    #[test]
    fn every_template_by_hand() {
        let cases = [
            (
                "a photo of the dog but not of the cat",
                "a photo of the dog",
                "a photo of the cat",
            ),
            (
                "a photo of the dog without the cat",
                "a photo of the dog",
                "a photo of the cat",
            ),
            (
                "a photo of the dog not with the cat",
                "a photo of the dog",
                "a photo of the cat",
            ),
            (
                "a photo of the dog with no cat",
                "a photo of the dog",
                "a photo of the cat",
            ),
        ];
        for (caption, pos, neg) in cases {
            let (p, n, r, c) = split(caption);
            assert_eq!((p.as_str(), n.as_str()), (pos, neg), "{caption}");
            assert_eq!(r, "a photo of the cat but not of the dog");
            assert_eq!(c, Confidence::Exact);
        }
    }

    #[test]
    fn affirmative_has_no_negation() {
        assert!(matches!(
            decompose("a photo of the dog"),
            Err(NeatError::NoNegationFound(_))
        ));
        assert!(matches!(
            reverse("a photo of the dog and the cat"),
            Err(NeatError::NoNegationFound(_))
        ));
        assert!(decompose("   ").is_err());
    }

    #[test]
    fn but_not_wins_over_not() {
        let d = decompose("a dog but not a cat").unwrap();
        assert_eq!(d.positive_part, "a dog");
        assert_eq!(d.negative_part, "a photo of a cat");
        assert_eq!(d.confidence, Confidence::Heuristic);
    }

    #[test]
    fn unknown_forms_are_heuristic() {
        let d = decompose("A dog, not a cat.").unwrap();
        assert_eq!(d.positive_part, "a dog");
        assert_eq!(d.negative_part, "a photo of a cat");
        assert_eq!(d.confidence, Confidence::Heuristic);
        assert!(decompose("no cat").is_err());
    }

    #[test]
    fn reversal_is_an_involution_on_but_not() {
        let x = "a photo of the dog but not of the cat";
        assert_eq!(reverse(&reverse(x).unwrap()).unwrap(), x);
    }

    #[test]
    fn parts_never_carry_cue_words() {
        let d = decompose("a photo of the dog not near no cat without a bus").unwrap();
        for part in [&d.positive_part, &d.negative_part] {
            assert!(part.split(' ').all(|w| !CUE_WORDS.contains(&w)), "{part}");
        }
    }
}
