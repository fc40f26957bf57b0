//! Caption decomposition into affirmed and negated parts, and caption reversal.

#[cfg(feature = "llm")]
mod llm;
mod rules;

#[cfg(feature = "llm")]
pub use llm::{build_prompt, parse_reply, LlmClientConfig, LlmDecomposer, PromptTemplate};
pub use rules::{decompose, reverse};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DecompositionSource {
    Rule,
    Llm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Confidence {
    Exact,
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionResult {
    pub positive_part: String,
    pub negative_part: String,
    pub reversed: String,
    pub source: DecompositionSource,
    pub confidence: Confidence,
    /// Set when a remote decomposition failed and the rules answered instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_reason: Option<String>,
}

impl DecompositionResult {
    /// Reversal computed from an existing decomposition.
    pub fn reverse(&self) -> String {
        rules::reversed_from_parts(&self.positive_part, &self.negative_part)
    }
}

/// Anything that can split a caption into its parts.
pub trait Decomposer: Sync {
    fn decompose(&self, caption: &str) -> crate::Result<DecompositionResult>;
}

/// The deterministic rule engine.
#[derive(Debug, Clone, Copy, Default)]
pub struct RuleDecomposer;

impl Decomposer for RuleDecomposer {
    fn decompose(&self, caption: &str) -> crate::Result<DecompositionResult> {
        rules::decompose(caption)
    }
}

#[cfg(feature = "llm")]
impl Decomposer for LlmDecomposer {
    fn decompose(&self, caption: &str) -> crate::Result<DecompositionResult> {
        LlmDecomposer::decompose(self, caption)
    }
}

/// Which decomposer to run over captions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecomposerKind {
    #[default]
    Rule,
    Llm,
}
