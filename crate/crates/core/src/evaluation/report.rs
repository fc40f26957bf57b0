use super::{BinaryMetrics, ClsMetrics, McqMetrics, RetrievalMetrics, ShiftDiagnostics};
use crate::Result;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub label: String,
    pub checkpoint_hash: String,
    pub config_hash: String,
    /// Content hash of every bundle the numbers came from, by split name.
    pub split_hashes: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// Unix seconds; excluded from reproducibility comparisons.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub created_unix: Option<u64>,
}

/// Results of one model on every task that was evaluated.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub meta: ReportMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_neg: Option<RetrievalMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retrieval_affirmative: Option<RetrievalMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcq: Option<McqMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub binary: Option<BinaryMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_neg: Option<ClsMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cls_rev_neg: Option<ClsMetrics>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<ShiftDiagnostics>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// The same report with timestamps removed, for comparing runs.
    pub fn without_timestamps(&self) -> Self {
        let mut r = self.clone();
        r.meta.created_unix = None;
        r
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::retrieval_from_similarity;

    #[test]
    fn json_round_trip_is_lossless() {
        let sim = vec![
            vec![0.3, 0.1, 0.7],
            vec![0.2, 0.9, 0.1],
            vec![0.1 / 3.0, 0.2, 0.5],
        ];
        let mut r = EvaluationReport {
            retrieval_neg: Some(retrieval_from_similarity(&sim).unwrap()),
            cls_neg: Some(ClsMetrics {
                top1_accuracy: 100.0 / 3.0,
                top1_error_rate: 200.0 / 3.0,
                count: 3,
            }),
            ..Default::default()
        };
        r.meta
            .split_hashes
            .insert("retrieval_neg".into(), "abc".into());
        r.meta.created_unix = Some(12);
        let back = EvaluationReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        assert_eq!(back.without_timestamps().meta.created_unix, None);
    }
}
