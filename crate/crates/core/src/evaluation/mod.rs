//! Scoring of frozen and adapted encoders, and distribution-shift diagnostics.

mod report;
mod retrieval;
mod shift;
mod tasks;

pub use report::{EvaluationReport, ReportMeta};
pub use retrieval::{
    retrieval_eval, retrieval_from_embeddings, retrieval_from_similarity, RetrievalMetrics,
};
pub use shift::{
    histogram, median_pairwise_distance, mmd, mmd_with_bandwidth, overlap_coefficient,
    shift_diagnostics, similarity_histograms, HistogramTable, MmdResult, ShiftDiagnostics,
    HISTOGRAM_BINS,
};
pub use tasks::{
    binary_neg_eval, mcq_eval, template_cls_eval, BinaryMetrics, ClsMetrics, ConceptBinary,
    McqMetrics,
};

use crate::model::TextEncoder;
use crate::Result;

/// Maps caption text to unit-norm embeddings.
pub trait TextEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>>;
}

impl TextEmbedder for TextEncoder {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
        self.encode_texts(texts)
    }
}

#[cfg(test)]
pub(crate) mod testing {
    use super::TextEmbedder;
    use crate::linalg;
    use crate::Result;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::HashMap;

    /// Returns the given vectors in call order, ignoring the texts.
    pub struct Fixed(pub Vec<Vec<f64>>);

    impl TextEmbedder for Fixed {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            assert_eq!(texts.len(), self.0.len());
            Ok(self.0.clone())
        }
    }

    /// Looks texts up in a table; unknown texts get a fixed random vector.
    pub struct TableEmbedder {
        pub table: HashMap<String, Vec<f64>>,
        pub dim: usize,
        pub seed: u64,
    }

    impl TextEmbedder for TableEmbedder {
        fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f64>>> {
            Ok(texts
                .iter()
                .map(|t| {
                    self.table.get(t).cloned().unwrap_or_else(|| {
                        let h = t
                            .bytes()
                            .fold(self.seed, |a, b| a.wrapping_mul(131).wrapping_add(b as u64));
                        let mut rng = ChaCha8Rng::seed_from_u64(h);
                        linalg::normalized(
                            &(0..self.dim)
                                .map(|_| rng.random_range(-1.0..1.0))
                                .collect::<Vec<_>>(),
                        )
                    })
                })
                .collect())
        }
    }
}
