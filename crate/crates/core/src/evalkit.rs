//! Detection scoring, AUC, frozen-feature probes and feature export.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureKind, UcfModel};
use crate::nn::Tensor;
use crate::synthforge::{Dataset, Split};
use crate::LABEL_FAKE;

/// AUC as an exact fraction `wins2 / pairs2`, where `wins2` counts every
/// positive–negative win twice and every tie once, and `pairs2 = 2 * P * N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AucFraction {
    pub wins2: u64,
    pub pairs2: u64,
}

impl AucFraction {
    pub fn value(self) -> f64 {
        self.wins2 as f64 / self.pairs2 as f64
    }
}

/// Mann–Whitney AUC with midranks for ties: the probability that a random
/// positive outscores a random negative, ties counting one half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64> {
    auc_fraction(scores, labels).map(AucFraction::value)
}

pub fn auc_fraction(scores: &[f64], labels: &[usize]) -> Result<AucFraction> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(bad) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::validation("scores", format!("score {bad} is not a number")));
    }
    let n_pos = labels.iter().filter(|&&l| l == LABEL_FAKE).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {n_pos} positives and {n_neg} negatives"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps every midrank an integer.
    let mut twice_rank_sum_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the midrank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == LABEL_FAKE).count() as u64;
        twice_rank_sum_pos += twice_mid * pos_in_group;
        i = j + 1;
    }
    let (p, n) = (n_pos as u64, n_neg as u64);
    Ok(AucFraction {
        wins2: twice_rank_sum_pos - p * (p + 1),
        pairs2: 2 * p * n,
    })
}

/// Per-corpus evaluation summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus: String,
    pub split: Split,
    /// Restriction applied to fakes (empty: all methods of the split).
    pub methods: Vec<String>,
    pub n_samples: usize,
    pub auc_common: f64,
    /// Frozen-feature logistic probe AUCs keyed by feature kind.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub probe_auc: BTreeMap<String, f64>,
}

/// `sample_id` and fake probability of each evaluated image.
pub type ScoreTable = Vec<(String, f64)>;

fn scores_for(model: &UcfModel<f32>, dataset: &Dataset, indices: &[usize]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(indices.len());
    for chunk in indices.chunks(256) {
        let x = dataset.batch(chunk)?;
        out.extend(model.detect(&x)?.into_iter().map(f64::from));
    }
    Ok(out)
}

/// Detect on the samples at `indices` and report their AUC.
pub fn evaluate_indices(
    model: &UcfModel<f32>,
    dataset: &Dataset,
    indices: &[usize],
    corpus: &str,
    split: Split,
    methods: &[&str],
) -> Result<(EvalReport, ScoreTable)> {
    let scores = scores_for(model, dataset, indices)?;
    let labels: Vec<usize> = indices.iter().map(|&i| dataset.manifest.samples[i].y).collect();
    let report = EvalReport {
        corpus: corpus.to_owned(),
        split,
        methods: methods.iter().map(|m| m.to_string()).collect(),
        n_samples: indices.len(),
        auc_common: auc(&scores, &labels)?,
        probe_auc: BTreeMap::new(),
    };
    let table = indices
        .iter()
        .zip(&scores)
        .map(|(&i, &s)| (dataset.manifest.samples[i].sample_id.clone(), s))
        .collect();
    Ok((report, table))
}

/// Evaluate a split, optionally restricted to reals plus fakes of `methods`.
pub fn evaluate(
    model: &UcfModel<f32>,
    dataset: &Dataset,
    split: Split,
    methods: &[&str],
    corpus: &str,
) -> Result<(EvalReport, ScoreTable)> {
    let indices = if methods.is_empty() {
        dataset.manifest.split_indices(split)
    } else {
        dataset.manifest.indices_for_methods(split, methods)?
    };
    evaluate_indices(model, dataset, &indices, corpus, split, methods)
}

/// Pooled features `[n, d]` of the samples at `indices`.
pub fn pooled_features(model: &UcfModel<f32>, dataset: &Dataset, indices: &[usize], kind: FeatureKind) -> Result<Tensor<f32>> {
    let mut parts = Vec::new();
    for chunk in indices.chunks(256) {
        parts.push(model.features(&dataset.batch(chunk)?, kind)?);
    }
    if parts.is_empty() {
        return Err(Error::InsufficientData("no samples to extract features from".into()));
    }
    Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())
}

/// L2-regularized logistic regression fitted by Newton's method on standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LogisticProbe {
    mean: Vec<f64>,
    scale: Vec<f64>,
    /// Kept feature dimensions (non-constant on the training set).
    kept: Vec<usize>,
    weights: DVector<f64>,
}

const PROBE_RIDGE: f64 = 1e-2;
const PROBE_MAX_ITERS: usize = 100;

impl LogisticProbe {
    pub fn fit(features: &Tensor<f32>, labels: &[usize]) -> Result<Self> {
        let (n, d) = features.dims2()?;
        if labels.len() != n {
            return Err(Error::Shape(format!("{} labels for {n} feature rows", labels.len())));
        }
        let x = |i: usize, j: usize| f64::from(features.data()[i * d + j]);
        let mut mean = vec![0.0; d];
        let mut scale = vec![0.0; d];
        let mut kept = Vec::new();
        for j in 0..d {
            let m = (0..n).map(|i| x(i, j)).sum::<f64>() / n.max(1) as f64;
            let var = (0..n).map(|i| (x(i, j) - m).powi(2)).sum::<f64>() / n.max(1) as f64;
            mean[j] = m;
            scale[j] = var.sqrt();
            if var > 1e-12 * (1.0 + m * m) {
                kept.push(j);
            }
        }
        if kept.is_empty() {
            return Err(Error::ProbeFailure("every feature dimension has zero variance".into()));
        }
        let k = kept.len() + 1;
        let design = DMatrix::from_fn(n, k, |i, c| {
            if c == 0 {
                1.0
            } else {
                let j = kept[c - 1];
                (x(i, j) - mean[j]) / scale[j]
            }
        });
        let t = DVector::from_iterator(n, labels.iter().map(|&l| if l == LABEL_FAKE { 1.0 } else { 0.0 }));
        let mut w = DVector::zeros(k);
        for _ in 0..PROBE_MAX_ITERS {
            let p = (&design * &w).map(sigmoid);
            let mut grad = design.transpose() * (&p - &t);
            let mut weighted = design.clone();
            for (i, mut row) in weighted.row_iter_mut().enumerate() {
                row *= (p[i] * (1.0 - p[i])).max(1e-12);
            }
            let mut hess = design.transpose() * weighted;
            for c in 1..k {
                grad[c] += PROBE_RIDGE * w[c];
                hess[(c, c)] += PROBE_RIDGE;
            }
            hess[(0, 0)] += 1e-9;
            let step = hess
                .cholesky()
                .ok_or_else(|| Error::ProbeFailure("Newton system is not positive definite".into()))?
                .solve(&grad);
            w -= &step;
            if step.amax() < 1e-10 {
                break;
            }
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::ProbeFailure("probe weights diverged".into()));
        }
        Ok(LogisticProbe {
            mean,
            scale,
            kept,
            weights: w,
        })
    }

    /// Fake probability of each feature row.
    pub fn predict(&self, features: &Tensor<f32>) -> Result<Vec<f64>> {
        let (n, d) = features.dims2()?;
        if d != self.mean.len() {
            return Err(Error::Shape(format!("probe fitted on {} dims, got {d}", self.mean.len())));
        }
        Ok((0..n)
            .map(|i| {
                let row = features.row(i);
                let z = self.weights[0]
                    + self
                        .kept
                        .iter()
                        .enumerate()
                        .map(|(c, &j)| self.weights[c + 1] * (f64::from(row[j]) - self.mean[j]) / self.scale[j])
                        .sum::<f64>();
                sigmoid(z)
            })
            .collect())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fit a probe on the frozen features of `train_indices` and report its AUC on `test_indices`.
pub fn probe_features(
    model: &UcfModel<f32>,
    dataset: &Dataset,
    kind: FeatureKind,
    train_indices: &[usize],
    test_indices: &[usize],
) -> Result<f64> {
    let labels = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| dataset.manifest.samples[i].y).collect() };
    let probe = LogisticProbe::fit(&pooled_features(model, dataset, train_indices, kind)?, &labels(train_indices))?;
    let scores = probe.predict(&pooled_features(model, dataset, test_indices, kind)?)?;
    auc(&scores, &labels(test_indices))
}

/// One row per sample: id, labels, then pooled specific, common and content dimensions.
pub fn export_features(model: &UcfModel<f32>, dataset: &Dataset, indices: &[usize], out: &Path) -> Result<usize> {
    if indices.is_empty() {
        return Err(Error::InsufficientData("nothing to export".into()));
    }
    let kinds = [FeatureKind::Specific, FeatureKind::Common, FeatureKind::Content];
    let feats = kinds
        .iter()
        .map(|&k| pooled_features(model, dataset, indices, k))
        .collect::<Result<Vec<_>>>()?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = fs::File::create(out).map_err(|e| Error::io(out, e))?;
    let mut w = BufWriter::new(file);
    let mut header = vec!["sample_id".to_owned(), "y".to_owned(), "y_prime".to_owned()];
    for (k, f) in kinds.iter().zip(&feats) {
        header.extend((0..f.shape()[1]).map(|j| format!("{k}_{j}")));
    }
    let io = |e| Error::io(out, e);
    writeln!(w, "{}", header.join("\t")).map_err(io)?;
    for (row, &i) in indices.iter().enumerate() {
        let s = &dataset.manifest.samples[i];
        let mut fields = vec![s.sample_id.clone(), s.y.to_string(), s.y_prime.to_string()];
        for f in &feats {
            fields.extend(f.row(row).iter().map(|v| v.to_string()));
        }
        writeln!(w, "{}", fields.join("\t")).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(indices.len())
}

/// `sample_id<TAB>score` per line.
pub fn write_scores(table: &ScoreTable, out: &Path) -> Result<()> {
    let mut text = String::new();
    for (id, s) in table {
        text.push_str(&format!("{id}\t{s}\n"));
    }
    fs::write(out, text).map_err(|e| Error::io(out, e))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn brute_force(scores: &[f64], labels: &[usize]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn hand_cases() {
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 5], &[0, 1, 0, 1, 1]).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_undefined() {
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedMetric(_))));
        assert!(matches!(auc(&[0.1, f64::NAN], &[1, 0]), Err(Error::Validation { .. })));
    }

    #[test]
    fn flip_and_monotone_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let n = rng.random_range(2..40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.random_range(0..10) as f64) / 10.0).collect();
            let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 0;
            labels[1] = 1;
            let a = auc(&scores, &labels).unwrap();
            let flipped: Vec<usize> = labels.iter().map(|l| 1 - l).collect();
            let (f, g) = (auc_fraction(&scores, &labels).unwrap(), auc_fraction(&scores, &flipped).unwrap());
            assert_eq!(f.pairs2, g.pairs2);
            assert_eq!(f.wins2 + g.wins2, f.pairs2);
            assert!((a - (1.0 - g.value())).abs() <= f64::EPSILON);
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            assert_eq!(a, auc(&warped, &labels).unwrap());
            assert_eq!(a, brute_force(&scores, &labels));
        }
    }

    #[test]
    fn probe_separates_linearly_separable_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 200;
        let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let feats = Tensor::from_fn(&[n, 3], |k| {
            let (i, j) = (k / 3, k % 3);
            let shift = if j == 0 && labels[i] == 1 { 2.0 } else { 0.0 };
            shift + rng.random_range(-1.0..1.0)
        });
        let probe = LogisticProbe::fit(&feats, &labels).unwrap();
        let a = auc(&probe.predict(&feats).unwrap(), &labels).unwrap();
        assert!(a > 0.95, "{a}");
        assert_eq!(probe, LogisticProbe::fit(&feats, &labels).unwrap());
    }

    #[test]
    fn constant_features_fail_the_probe() {
        let feats = Tensor::full(&[10, 4], 0.5);
        let labels: Vec<usize> = (0..10).map(|i| i % 2).collect();
        assert!(matches!(LogisticProbe::fit(&feats, &labels), Err(Error::ProbeFailure(_))));
    }
}
