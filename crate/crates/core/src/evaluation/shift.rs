use super::TextEmbedder;
use crate::linalg;
use crate::world::DatasetBundle;
use crate::{NeatError, Result};
use serde::{Deserialize, Serialize};

pub const HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MmdResult {
    pub value: f64,
    pub bandwidth: f64,
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Median Euclidean distance over all unordered pairs of `points`, or 1.0
/// when that median is zero or there are fewer than two points.
pub fn median_pairwise_distance(points: &[&[f64]]) -> f64 {
    let mut d = Vec::with_capacity(points.len() * points.len().saturating_sub(1) / 2);
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            d.push(squared_distance(points[i], points[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    d.sort_by(f64::total_cmp);
    let m = d.len();
    let median = if m % 2 == 1 {
        d[m / 2]
    } else {
        0.5 * (d[m / 2 - 1] + d[m / 2])
    };
    if median > 0.0 {
        median
    } else {
        1.0
    }
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.len() < 2 || b.len() < 2 {
        return Err(NeatError::invalid("mmd needs at least two points per set"));
    }
    let d = a[0].len();
    if let Some(bad) = a.iter().chain(b).find(|v| v.len() != d) {
        return Err(NeatError::DimensionMismatch {
            expected: d,
            found: bad.len(),
        });
    }
    Ok(d)
}

/// Unbiased Gaussian-kernel MMD², clipped at zero and square-rooted, with
/// kernel `exp(−‖x−y‖² / 2σ²)`.
pub fn mmd_with_bandwidth(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> Result<f64> {
    check_sets(a, b)?;
    if !(sigma > 0.0) {
        return Err(NeatError::invalid("mmd bandwidth must be positive"));
    }
    let gamma = 1.0 / (2.0 * sigma * sigma);
    let k = |x: &[f64], y: &[f64]| (-gamma * squared_distance(x, y)).exp();
    let within = |s: &[Vec<f64>]| {
        let mut total = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                total += k(&s[i], &s[j]);
            }
        }
        2.0 * total / (s.len() * (s.len() - 1)) as f64
    };
    let mut cross = 0.0;
    for x in a {
        for y in b {
            cross += k(x, y);
        }
    }
    let mmd2 = within(a) + within(b) - 2.0 * cross / (a.len() * b.len()) as f64;
    Ok(mmd2.max(0.0).sqrt())
}

/// MMD with the bandwidth set to the median pairwise distance of `a ∪ b`.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<MmdResult> {
    check_sets(a, b)?;
    let pooled: Vec<&[f64]> = a.iter().chain(b).map(Vec::as_slice).collect();
    let bandwidth = median_pairwise_distance(&pooled);
    Ok(MmdResult {
        value: mmd_with_bandwidth(a, b, bandwidth)?,
        bandwidth,
    })
}

/// Counts of `values` (expected in `[0, 1]`) over equal-width bins; 1.0
/// lands in the last bin.
pub fn histogram(values: &[f64], bins: usize) -> Vec<usize> {
    let mut out = vec![0; bins];
    for &v in values {
        let b = ((v * bins as f64).floor() as isize).clamp(0, bins as isize - 1) as usize;
        out[b] += 1;
    }
    out
}

/// Shared area of two histograms after normalizing each to unit mass.
pub fn overlap_coefficient(a: &[usize], b: &[usize]) -> f64 {
    let (na, nb) = (
        a.iter().sum::<usize>().max(1) as f64,
        b.iter().sum::<usize>().max(1) as f64,
    );
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x as f64 / na).min(y as f64 / nb))
        .sum()
}

/// Histograms of matched-pair similarity and mean unmatched similarity for
/// one caption kind, after joint min-max scaling to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramTable {
    pub kind: String,
    pub raw_min: f64,
    pub raw_max: f64,
    pub pos_counts: Vec<usize>,
    pub neg_counts: Vec<usize>,
    pub pos_mean: f64,
    pub neg_mean: f64,
    pub overlap: f64,
}

impl HistogramTable {
    pub fn to_csv(&self) -> String {
        let bins = self.pos_counts.len();
        let mut out = String::from("bin_low,bin_high,pos_count,neg_count\n");
        for b in 0..bins {
            let low = b as f64 / bins as f64;
            let high = (b + 1) as f64 / bins as f64;
            out.push_str(&format!(
                "{low:.2},{high:.2},{},{}\n",
                self.pos_counts[b], self.neg_counts[b]
            ));
        }
        out
    }
}

fn histogram_table(kind: &str, texts: &[Vec<f64>], images: &[Vec<f64>]) -> HistogramTable {
    let n = texts.len();
    let mut pos = Vec::with_capacity(n);
    let mut neg = Vec::with_capacity(n);
    for (i, v) in images.iter().enumerate() {
        let sims: Vec<f64> = texts.iter().map(|t| linalg::dot(v, t)).collect();
        pos.push(sims[i]);
        let others: f64 = sims
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, s)| s)
            .sum();
        neg.push(if n > 1 { others / (n - 1) as f64 } else { 0.0 });
    }
    let lo = pos
        .iter()
        .chain(&neg)
        .copied()
        .fold(f64::INFINITY, f64::min);
    let hi = pos
        .iter()
        .chain(&neg)
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = |xs: &[f64]| -> Vec<f64> {
        xs.iter()
            .map(|x| if hi > lo { (x - lo) / (hi - lo) } else { 0.0 })
            .collect()
    };
    let pos_counts = histogram(&scale(&pos), HISTOGRAM_BINS);
    let neg_counts = histogram(&scale(&neg), HISTOGRAM_BINS);
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    HistogramTable {
        kind: kind.to_string(),
        raw_min: lo,
        raw_max: hi,
        overlap: overlap_coefficient(&pos_counts, &neg_counts),
        pos_mean: mean(&pos),
        neg_mean: mean(&neg),
        pos_counts,
        neg_counts,
    }
}

/// The three caption populations of a negated bundle, in caption order:
/// the affirmative positive parts, the negated captions and their reversals.
fn populations(bundle: &DatasetBundle) -> Result<([Vec<String>; 3], Vec<Vec<f64>>)> {
    let mut kinds: [Vec<String>; 3] = Default::default();
    let mut images = Vec::new();
    for rec in bundle
        .captions
        .iter()
        .filter(|r| r.quad.template_id.is_negated())
    {
        kinds[0].push(rec.quad.positive_part.clone());
        kinds[1].push(rec.quad.caption.clone());
        kinds[2].push(rec.quad.reversed.clone());
        images.push(
            bundle
                .scene(rec.scene_id)
                .ok_or_else(|| NeatError::Validation(format!("missing scene {}", rec.scene_id)))?
                .feature
                .clone(),
        );
    }
    if images.len() < 2 {
        return Err(NeatError::invalid(
            "diagnostics need at least two negated captions",
        ));
    }
    Ok((kinds, images))
}

pub const KIND_NAMES: [&str; 3] = ["normal", "nc", "rnc"];

/// Per caption kind (normal, nc, rnc) similarity histograms against the
/// paired scenes.
pub fn similarity_histograms(
    embedder: &dyn TextEmbedder,
    bundle: &DatasetBundle,
) -> Result<Vec<HistogramTable>> {
    let (kinds, images) = populations(bundle)?;
    kinds
        .iter()
        .zip(KIND_NAMES)
        .map(|(texts, name)| Ok(histogram_table(name, &embedder.embed(texts)?, &images)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftDiagnostics {
    pub mmd_norm_vs_nc: f64,
    pub mmd_nc_vs_rnc: f64,
    /// One bandwidth, from the pooled three populations, serves both pairs.
    pub bandwidth: f64,
    pub estimator: String,
    pub histograms: Vec<HistogramTable>,
}

pub fn shift_diagnostics(
    embedder: &dyn TextEmbedder,
    bundle: &DatasetBundle,
) -> Result<ShiftDiagnostics> {
    let (kinds, images) = populations(bundle)?;
    let emb: Vec<Vec<Vec<f64>>> = kinds
        .iter()
        .map(|t| embedder.embed(t))
        .collect::<Result<_>>()?;
    let pooled: Vec<&[f64]> = emb.iter().flatten().map(Vec::as_slice).collect();
    let bandwidth = median_pairwise_distance(&pooled);
    Ok(ShiftDiagnostics {
        mmd_norm_vs_nc: mmd_with_bandwidth(&emb[0], &emb[1], bandwidth)?,
        mmd_nc_vs_rnc: mmd_with_bandwidth(&emb[1], &emb[2], bandwidth)?,
        bandwidth,
        estimator:
            "sqrt of clipped unbiased MMD^2, gaussian kernel, median pairwise distance bandwidth"
                .to_string(),
        histograms: emb
            .iter()
            .zip(KIND_NAMES)
            .map(|(e, name)| histogram_table(name, e, &images))
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn cloud(seed: u64, n: usize, d: usize, center: f64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).unwrap();
        (0..n)
            .map(|_| (0..d).map(|_| center + normal.sample(&mut rng)).collect())
            .collect()
    }

    /// Every kernel entry written out, including the full biased sums, then
    /// the diagonal removed by hand.
    fn oracle_mmd(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> f64 {
        let k = |x: &Vec<f64>, y: &Vec<f64>| {
            let mut s = 0.0;
            for i in 0..x.len() {
                s += (x[i] - y[i]).powi(2);
            }
            (-s / (2.0 * sigma * sigma)).exp()
        };
        let (m, n) = (a.len() as f64, b.len() as f64);
        let (mut kxx, mut kyy, mut kxy) = (0.0, 0.0, 0.0);
        for x in a {
            for y in a {
                kxx += k(x, y);
            }
        }
        for x in b {
            for y in b {
                kyy += k(x, y);
            }
        }
        for x in a {
            for y in b {
                kxy += k(x, y);
            }
        }
        // diagonal entries are exactly 1
        let v = (kxx - m) / (m * (m - 1.0)) + (kyy - n) / (n * (n - 1.0)) - 2.0 * kxy / (m * n);
        v.max(0.0).sqrt()
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = cloud(1, 64, 8, 0.0);
        assert!(mmd(&a, &a.clone()).unwrap().value <= 1e-9);
    }

    #[test]
    fn separated_clouds_beat_split_cloud_and_match_oracle() {
        let a = cloud(1, 64, 8, 0.0);
        let b = cloud(2, 64, 8, 3.0);
        let c = cloud(3, 64, 8, 0.0);
        let between = mmd(&a, &b).unwrap();
        let within = mmd(&a, &c).unwrap();
        assert!(between.value > within.value);
        for (x, y, r) in [(&a, &b, between), (&a, &c, within)] {
            assert!((r.value - oracle_mmd(x, y, r.bandwidth)).abs() <= 1e-9);
        }
    }

    #[test]
    fn rejects_bad_input() {
        let a = cloud(1, 4, 8, 0.0);
        let b = cloud(1, 4, 6, 0.0);
        assert!(matches!(
            mmd(&a, &b),
            Err(NeatError::DimensionMismatch { .. })
        ));
        assert!(mmd(&a[..1], &a).is_err());
    }

    #[test]
    fn histogram_edge_cases() {
        let t = histogram_table("x", &vec![vec![1.0, 0.0]; 5], &vec![vec![1.0, 0.0]; 5]);
        assert_eq!(t.pos_counts.iter().filter(|&&c| c > 0).count(), 1);
        assert_eq!(t.pos_counts[0], 5);
        assert_eq!(histogram(&[0.0, 0.5, 1.0], 20), {
            let mut v = vec![0; 20];
            v[0] = 1;
            v[10] = 1;
            v[19] = 1;
            v
        });
        assert!((overlap_coefficient(&[1, 1], &[1, 1]) - 1.0).abs() < 1e-12);
        assert_eq!(overlap_coefficient(&[2, 0], &[0, 3]), 0.0);
        assert!(t
            .to_csv()
            .starts_with("bin_low,bin_high,pos_count,neg_count\n0.00,0.05,5,5\n"));
    }

    proptest! {
        #[test]
        fn mmd_is_symmetric_and_non_negative(seed in 0u64..300, shift in 0.0f64..2.0) {
            let a = cloud(seed, 10, 4, 0.0);
            let b = cloud(seed + 1000, 13, 4, shift);
            let x = mmd(&a, &b).unwrap();
            let y = mmd(&b, &a).unwrap();
            prop_assert!(x.value >= 0.0);
            prop_assert!((x.value - y.value).abs() <= 1e-12);
            prop_assert_eq!(x.bandwidth, y.bandwidth);
        }

        #[test]
        fn histogram_conserves_counts(seed in 0u64..300, n in 2usize..40) {
            let texts: Vec<Vec<f64>> = cloud(seed, n, 6, 0.0).iter().map(|v| linalg::normalized(v)).collect();
            let images: Vec<Vec<f64>> = cloud(seed + 7, n, 6, 0.0).iter().map(|v| linalg::normalized(v)).collect();
            let t = histogram_table("x", &texts, &images);
            prop_assert_eq!(t.pos_counts.iter().sum::<usize>(), n);
            prop_assert_eq!(t.neg_counts.iter().sum::<usize>(), n);
        }
    }
}
