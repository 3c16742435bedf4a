//! Verification and identification metrics with per-domain breakdowns.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{PairList, Split, SyntheticDataset};
use crate::tensor::{dot, Matrix, Rng};

/// Default false-accept levels at desk scale.
pub const DEFAULT_FAR_LEVELS: [f64; 2] = [1e-2, 1e-3];

/// Best-threshold verification accuracy.
///
/// Candidate thresholds are −∞, the midpoints between consecutive distinct
/// similarities, and +∞; a pair is accepted when `sim >= threshold`. Returns
/// the best accuracy and the lowest threshold reaching it.
pub fn verification_accuracy(similarities: &[f64], same: &[bool]) -> Result<(f64, f64)> {
    if similarities.len() != same.len() {
        return Err(Error::LengthMismatch {
            left: similarities.len(),
            right: same.len(),
        });
    }
    if similarities.is_empty() {
        return Err(Error::EmptyInput);
    }
    if similarities.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("verification_accuracy"));
    }
    let n = similarities.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| similarities[a].total_cmp(&similarities[b]));

    let positives = same.iter().filter(|&&s| s).count();
    // Threshold −∞: everything accepted.
    let mut correct = positives;
    let mut best = correct;
    let mut best_threshold = f64::NEG_INFINITY;
    let mut i = 0;
    while i < n {
        // Move the whole tie group at this value below the threshold.
        let v = similarities[order[i]];
        while i < n && similarities[order[i]] == v {
            if same[order[i]] {
                correct -= 1;
            } else {
                correct += 1;
            }
            i += 1;
        }
        let threshold = if i < n {
            0.5 * (v + similarities[order[i]])
        } else {
            f64::INFINITY
        };
        if correct > best {
            best = correct;
            best_threshold = threshold;
        }
    }
    Ok((best as f64 / n as f64, best_threshold))
}

/// Accuracy of a fixed threshold (`sim >= threshold` means same).
pub fn accuracy_at(similarities: &[f64], same: &[bool], threshold: f64) -> f64 {
    let correct = similarities
        .iter()
        .zip(same)
        .filter(|(&s, &y)| (s >= threshold) == y)
        .count();
    correct as f64 / similarities.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TarAtFar {
    pub far: f64,
    /// `None` when there are too few negatives (`far · |neg| < 1`).
    pub tar: Option<f64>,
    pub threshold: Option<f64>,
}

/// True-accept rate at each false-accept level.
///
/// The threshold is the smallest value accepting at most `floor(far·|neg|)`
/// negatives: just above the `(a+1)`-th largest negative similarity.
pub fn tar_at_far(pos: &[f64], neg: &[f64], far_levels: &[f64]) -> Vec<TarAtFar> {
    let mut sorted_neg = neg.to_vec();
    sorted_neg.sort_by(|a, b| b.total_cmp(a));
    far_levels
        .iter()
        .map(|&far| {
            let budget = far * neg.len() as f64;
            if pos.is_empty() || budget < 1.0 || !(far < 1.0) {
                return TarAtFar {
                    far,
                    tar: None,
                    threshold: None,
                };
            }
            let allowed = budget.floor() as usize;
            let threshold = sorted_neg[allowed].next_up();
            let accepted = pos.iter().filter(|&&p| p >= threshold).count();
            TarAtFar {
                far,
                tar: Some(accepted as f64 / pos.len() as f64),
                threshold: Some(threshold),
            }
        })
        .collect()
}

/// Fraction of probes whose most similar gallery row (cosine, ties to the
/// lowest index) carries the same label.
pub fn rank1_identification(
    probe_features: &Matrix,
    probe_labels: &[usize],
    gallery_features: &Matrix,
    gallery_labels: &[usize],
) -> Result<f64> {
    if gallery_features.rows() == 0 {
        return Err(Error::EmptyGallery);
    }
    if probe_features.rows() == 0 {
        return Err(Error::EmptyInput);
    }
    if probe_features.rows() != probe_labels.len()
        || gallery_features.rows() != gallery_labels.len()
    {
        return Err(Error::LengthMismatch {
            left: probe_features.rows(),
            right: probe_labels.len(),
        });
    }
    let sims = crate::tensor::cosine_matrix(probe_features, gallery_features)?;
    let hits = (0..sims.rows())
        .filter(|&i| {
            let best = crate::tensor::argmax(sims.row(i)).unwrap();
            gallery_labels[best] == probe_labels[i]
        })
        .count();
    Ok(hits as f64 / probe_labels.len() as f64)
}

/// Anything that maps input rows to unit-norm embeddings.
pub trait Embedder {
    fn embed(&self, inputs: &Matrix) -> Result<Matrix>;
}

/// Input-independent random unit embeddings: the chance-level control.
#[derive(Clone, Debug)]
pub struct RandomEmbedder {
    pub seed: u64,
    pub dim: usize,
}

impl Embedder for RandomEmbedder {
    fn embed(&self, inputs: &Matrix) -> Result<Matrix> {
        let mut rng = Rng::new(self.seed);
        Matrix::seeded_gaussian(&mut rng, inputs.rows(), self.dim).l2_normalize_rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMetrics {
    pub domain_id: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub accuracy: f64,
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall_verif_acc: f64,
    pub threshold_used: f64,
    pub mean_domain_verif_acc: f64,
    pub per_domain: Vec<DomainMetrics>,
    /// Keyed by the FAR level formatted with `{}`.
    pub tar_at_far: BTreeMap<String, Option<f64>>,
    pub rank1: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl MetricsReport {
    pub fn domain_accuracy(&self, domain: usize) -> Option<f64> {
        self.per_domain
            .iter()
            .find(|d| d.domain_id == domain)
            .map(|d| d.accuracy)
    }

    /// CSV columns `domain_id,n_pos,n_neg,accuracy,threshold`.
    pub fn write_domain_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "domain_id,n_pos,n_neg,accuracy,threshold")?;
        for d in &self.per_domain {
            writeln!(
                w,
                "{},{},{},{},{}",
                d.domain_id, d.n_pos, d.n_neg, d.accuracy, d.threshold
            )?;
        }
        Ok(())
    }
}

/// Embeds every held-out sample once and scores pairs, per domain and
/// overall, plus rank-1 identification on the held-out gallery/probe split.
pub fn per_domain_report(
    model: &dyn Embedder,
    ds: &SyntheticDataset,
    pairs: &PairList,
    far_levels: &[f64],
) -> Result<MetricsReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let eval_idx = ds.indices_of(Split::Eval);
    let mut row_of = vec![usize::MAX; ds.len()];
    for (r, &i) in eval_idx.iter().enumerate() {
        row_of[i] = r;
    }
    for p in &pairs.pairs {
        if p.a >= ds.len()
            || p.b >= ds.len()
            || row_of[p.a] == usize::MAX
            || row_of[p.b] == usize::MAX
        {
            return Err(Error::InvalidConfig(format!(
                "pair ({}, {}) does not reference held-out samples of this dataset",
                p.a, p.b
            )));
        }
    }
    let emb = model.embed(&ds.inputs().select_rows(&eval_idx))?;
    let sims: Vec<f64> = pairs
        .pairs
        .iter()
        .map(|p| dot(emb.row(row_of[p.a]), emb.row(row_of[p.b])))
        .collect();
    let same: Vec<bool> = pairs.pairs.iter().map(|p| p.same_class).collect();

    let (overall, threshold) = verification_accuracy(&sims, &same)?;

    let num_domains = ds.num_domains();
    let mut per_domain = Vec::with_capacity(num_domains);
    for domain in 0..num_domains {
        let idx: Vec<usize> = (0..pairs.len())
            .filter(|&k| pairs.pairs[k].domain == domain)
            .collect();
        if idx.is_empty() {
            continue;
        }
        let s: Vec<f64> = idx.iter().map(|&k| sims[k]).collect();
        let y: Vec<bool> = idx.iter().map(|&k| same[k]).collect();
        let (acc, thr) = verification_accuracy(&s, &y)?;
        per_domain.push(DomainMetrics {
            domain_id: domain,
            n_pos: y.iter().filter(|&&v| v).count(),
            n_neg: y.iter().filter(|&&v| !v).count(),
            accuracy: acc,
            threshold: thr,
        });
    }
    let mean_domain_verif_acc =
        per_domain.iter().map(|d| d.accuracy).sum::<f64>() / per_domain.len() as f64;

    let pos: Vec<f64> = (0..sims.len())
        .filter(|&k| same[k])
        .map(|k| sims[k])
        .collect();
    let neg: Vec<f64> = (0..sims.len())
        .filter(|&k| !same[k])
        .map(|k| sims[k])
        .collect();
    let tar = tar_at_far(&pos, &neg, far_levels)
        .into_iter()
        .map(|t| (format!("{}", t.far), t.tar))
        .collect();

    let (gallery, probes) = ds.identification_split();
    let rows = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| row_of[i]).collect() };
    let labels =
        |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| ds.class_labels()[i]).collect() };
    let rank1 = if probes.is_empty() {
        0.0
    } else {
        rank1_identification(
            &emb.select_rows(&rows(&probes)),
            &labels(&probes),
            &emb.select_rows(&rows(&gallery)),
            &labels(&gallery),
        )?
    };

    Ok(MetricsReport {
        overall_verif_acc: overall,
        threshold_used: threshold,
        mean_domain_verif_acc,
        per_domain,
        tar_at_far: tar,
        rank1,
        n_pos: pos.len(),
        n_neg: neg.len(),
        config: serde_json::Value::Null,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn separable_pairs() {
        let (acc, thr) =
            verification_accuracy(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap();
        assert_eq!(acc, 1.0);
        assert!(thr > 0.2 && thr <= 0.8);
    }

    #[test]
    fn all_positive_pairs() {
        let (acc, thr) = verification_accuracy(&[0.3, -0.2, 0.5], &[true; 3]).unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(thr, f64::NEG_INFINITY);
    }

    #[test]
    fn interleaved_pairs() {
        let (acc, thr) =
            verification_accuracy(&[0.6, 0.7, 0.8, 0.1], &[true, false, true, false]).unwrap();
        assert_eq!(acc, 0.75);
        assert_abs_diff_eq!(thr, 0.35, epsilon = 1e-15);
        assert!(matches!(
            verification_accuracy(&[], &[]),
            Err(Error::EmptyInput)
        ));
    }

    #[test]
    fn tar_examples() {
        let pos: Vec<f64> = (0..100).map(|i| 1.0 + i as f64).collect();
        let neg: Vec<f64> = (0..1000).map(|i| -(i as f64)).collect();
        let r = tar_at_far(&pos, &neg, &[1e-2, 1e-3, 1e-4]);
        assert_eq!(r[0].tar, Some(1.0));
        assert_eq!(r[1].tar, Some(1.0));
        assert_eq!(r[2].tar, None);

        // identical multisets: TAR = a/n with a = floor(far·n)
        let same: Vec<f64> = (0..1000).map(|i| i as f64 / 1000.0).collect();
        let r = tar_at_far(&same, &same, &[1e-2, 1e-3]);
        assert_eq!(r[0].tar, Some(0.01));
        assert_eq!(r[1].tar, Some(0.001));
    }

    #[test]
    fn rank1_examples() {
        let g = Matrix::identity(4);
        assert_eq!(
            rank1_identification(&g, &[0, 1, 2, 3], &g, &[0, 1, 2, 3]).unwrap(),
            1.0
        );
        let mut probes = g.clone();
        for (i, v) in probes.data_mut().iter_mut().enumerate() {
            *v += 1e-3 * ((i * 7 % 5) as f64 - 2.0);
        }
        assert_eq!(
            rank1_identification(&probes, &[0, 1, 2, 3], &g, &[0, 1, 2, 3]).unwrap(),
            1.0
        );
        assert!(matches!(
            rank1_identification(&g, &[0, 1, 2, 3], &Matrix::zeros(0, 4), &[]),
            Err(Error::EmptyGallery)
        ));
    }

    #[test]
    fn ties_in_rank1_go_to_lowest_gallery_index() {
        let g = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let p = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert_eq!(rank1_identification(&p, &[7], &g, &[7, 8]).unwrap(), 1.0);
        assert_eq!(rank1_identification(&p, &[8], &g, &[7, 8]).unwrap(), 0.0);
    }
}
