//! Loss terms and triplet construction.
//!
//! Every loss has two faces: a graph builder used by the trainer (so gradients
//! flow) and a plain function over tensors used for inspection and testing.
//! Both share the same arithmetic because the plain function evaluates the
//! graph builder on constant inputs.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::LatentBundle;
use crate::disentangler::{CrossTarget, ReconstructionSet, ReconstructionVars};
use crate::error::{Error, Result};
use crate::nn::{Float, Graph, Tensor, Var};
use crate::{LABEL_FAKE, LABEL_REAL};

/// Weights of the auxiliary terms relative to the common cross-entropy, plus the triplet margin.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Specific-feature (method) classification.
    pub lambda_1: f64,
    /// Reconstruction.
    pub lambda_2: f64,
    /// Contrastive regularization.
    pub lambda_3: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_1: 0.1,
            lambda_2: 0.3,
            lambda_3: 0.05,
            alpha: 3.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("lambda_3", self.lambda_3),
            ("alpha", self.alpha),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(field, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss components of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub ce_common: f64,
    pub ce_specific: f64,
    pub reconstruction: f64,
    pub contrastive: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce_common: f64,
    pub ce_specific: f64,
    pub reconstruction: f64,
    pub contrastive: f64,
    pub total: f64,
}

impl LossReport {
    pub fn components(&self) -> LossComponents {
        LossComponents {
            ce_common: self.ce_common,
            ce_specific: self.ce_specific,
            reconstruction: self.reconstruction,
            contrastive: self.contrastive,
        }
    }
}

/// Weighted total of the components. A non-finite component is reported as a
/// divergence naming that component; the step index is left at 0 for the caller to fill in.
pub fn total_loss(c: LossComponents, w: &LossWeights) -> Result<LossReport> {
    for (name, v) in [
        ("ce_common", c.ce_common),
        ("ce_specific", c.ce_specific),
        ("reconstruction", c.reconstruction),
        ("contrastive", c.contrastive),
    ] {
        if !v.is_finite() {
            return Err(Error::Divergence {
                component: name.into(),
                step: 0,
            });
        }
    }
    Ok(LossReport {
        ce_common: c.ce_common,
        ce_specific: c.ce_specific,
        reconstruction: c.reconstruction,
        contrastive: c.contrastive,
        total: c.ce_common + w.lambda_1 * c.ce_specific + w.lambda_2 * c.reconstruction + w.lambda_3 * c.contrastive,
    })
}

fn eval_scalar<T: Float>(build: impl FnOnce(&mut Graph<T>) -> Result<Var>) -> Result<T> {
    let mut g = Graph::new();
    let v = build(&mut g)?;
    Ok(g.scalar(v))
}

fn check_binary_width<T: Float>(g: &Graph<T>, logits: Var) -> Result<()> {
    let (_, k) = g.value(logits).dims2()?;
    if k != 2 {
        return Err(Error::Shape(format!("common logits need 2 columns, got {k}")));
    }
    Ok(())
}

/// Mean binary cross-entropy of `[n, 2]` logits (column 1 = fake).
pub fn common_ce_graph<T: Float>(g: &mut Graph<T>, logits: Var, y: &[usize]) -> Result<Var> {
    check_binary_width(g, logits)?;
    g.softmax_cross_entropy(logits, y)
}

pub fn common_ce_loss<T: Float>(logits: &Tensor<T>, y: &[usize]) -> Result<T> {
    eval_scalar(|g| {
        let l = g.constant(logits.clone());
        common_ce_graph(g, l, y)
    })
}

/// Mean cross-entropy over the method vocabulary (real at index 0), for real and fake samples alike.
pub fn specific_ce_graph<T: Float>(g: &mut Graph<T>, logits: Var, y_prime: &[usize], n_classes: usize) -> Result<Var> {
    let (_, k) = g.value(logits).dims2()?;
    if k != n_classes {
        return Err(Error::validation(
            "n_classes",
            format!("specific logits have {k} columns but the vocabulary has {n_classes} classes"),
        ));
    }
    g.softmax_cross_entropy(logits, y_prime)
}

pub fn specific_ce_loss<T: Float>(logits: &Tensor<T>, y_prime: &[usize], n_classes: usize) -> Result<T> {
    eval_scalar(|g| {
        let l = g.constant(logits.clone());
        specific_ce_graph(g, l, y_prime, n_classes)
    })
}

/// Row indices into a batch: `(anchor, positive, negative)` per triplet.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct TripletIndices {
    pub anchors: Vec<usize>,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl TripletIndices {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn push(&mut self, a: usize, p: usize, n: usize) {
        self.anchors.push(a);
        self.positives.push(p);
        self.negatives.push(n);
    }
}

fn check_labels(y: &[usize], y_prime: &[usize]) -> Result<()> {
    if y.len() != y_prime.len() {
        return Err(Error::Shape(format!("{} binary labels vs {} method labels", y.len(), y_prime.len())));
    }
    for (i, (&b, &m)) in y.iter().zip(y_prime).enumerate() {
        let consistent = (b == LABEL_REAL && m == LABEL_REAL) || (b == LABEL_FAKE && m != LABEL_REAL);
        if !consistent {
            return Err(Error::validation(
                "labels",
                format!("sample {i}: binary label {b} disagrees with method label {m}"),
            ));
        }
    }
    Ok(())
}

fn pick<R: Rng + ?Sized>(set: &[usize], rng: &mut R) -> usize {
    set[rng.random_range(0..set.len())]
}

/// Draw one common and one specific triplet per eligible fake anchor, in anchor order.
///
/// Common: positive is any other fake, negative a real. Specific: positive is
/// another fake of the same method, negative a fake of a different method, or a
/// real when the batch holds a single method.
pub fn sample_triplets<R: Rng + ?Sized>(
    y: &[usize],
    y_prime: &[usize],
    rng: &mut R,
) -> Result<(TripletIndices, TripletIndices)> {
    check_labels(y, y_prime)?;
    let fakes: Vec<usize> = (0..y.len()).filter(|&i| y[i] == LABEL_FAKE).collect();
    let reals: Vec<usize> = (0..y.len()).filter(|&i| y[i] == LABEL_REAL).collect();
    let mut common = TripletIndices::default();
    let mut specific = TripletIndices::default();
    for &a in &fakes {
        let others: Vec<usize> = fakes.iter().copied().filter(|&j| j != a).collect();
        if !others.is_empty() && !reals.is_empty() {
            common.push(a, pick(&others, rng), pick(&reals, rng));
        }
        let same: Vec<usize> = others.iter().copied().filter(|&j| y_prime[j] == y_prime[a]).collect();
        let different: Vec<usize> = fakes.iter().copied().filter(|&j| y_prime[j] != y_prime[a]).collect();
        let negatives = if different.is_empty() { &reals } else { &different };
        if !same.is_empty() && !negatives.is_empty() {
            specific.push(a, pick(&same, rng), pick(negatives, rng));
        }
    }
    if common.is_empty() {
        warn!("no eligible common triplets in a batch of {}", y.len());
    }
    if specific.is_empty() {
        warn!("no eligible specific triplets in a batch of {}", y.len());
    }
    Ok((common, specific))
}

/// Pooled embeddings of each triplet role, `[k, d]` each.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletSet<T: Float = f32> {
    pub anchors: Tensor<T>,
    pub positives: Tensor<T>,
    pub negatives: Tensor<T>,
}

impl<T: Float> TripletSet<T> {
    /// Gather rows of `[n, d]` embeddings.
    pub fn gather(embeddings: &Tensor<T>, idx: &TripletIndices) -> Result<Self> {
        let (n, _) = embeddings.dims2()?;
        let all = idx.anchors.iter().chain(&idx.positives).chain(&idx.negatives);
        if let Some(&bad) = all.into_iter().find(|&&i| i >= n) {
            return Err(Error::Shape(format!("triplet index {bad} outside batch of {n}")));
        }
        Ok(TripletSet {
            anchors: embeddings.select_rows(&idx.anchors),
            positives: embeddings.select_rows(&idx.positives),
            negatives: embeddings.select_rows(&idx.negatives),
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Spatial global average of a `[n, c, h, w]` map.
pub fn pool<T: Float>(features: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.constant(features.clone());
    let p = g.global_avg_pool(x)?;
    Ok(g.value(p).clone())
}

/// Common (on `f_common`) and specific (on `f_specific`) triplet sets for an encoded batch.
pub fn build_triplets<T: Float, R: Rng + ?Sized>(
    bundle: &LatentBundle<T>,
    y: &[usize],
    y_prime: &[usize],
    rng: &mut R,
) -> Result<(TripletSet<T>, TripletSet<T>)> {
    if y.len() != bundle.len() {
        return Err(Error::Shape(format!("{} labels for a batch of {}", y.len(), bundle.len())));
    }
    let (ci, si) = sample_triplets(y, y_prime, rng)?;
    Ok((
        TripletSet::gather(&pool(&bundle.f_common)?, &ci)?,
        TripletSet::gather(&pool(&bundle.f_specific)?, &si)?,
    ))
}

pub fn contrastive_loss<T: Float>(triplets: &TripletSet<T>, alpha: f64) -> Result<T> {
    if triplets.is_empty() {
        warn!("contrastive loss over an empty triplet set is 0");
        return Ok(T::zero());
    }
    eval_scalar(|g| {
        let a = g.constant(triplets.anchors.clone());
        let p = g.constant(triplets.positives.clone());
        let n = g.constant(triplets.negatives.clone());
        g.triplet_margin(a, p, n, T::from_f64_lossy(alpha))
    })
}

/// Triplet-margin loss on pooled `[n, c, h, w]` features; a constant 0 node when `idx` is empty.
pub fn contrastive_graph<T: Float>(g: &mut Graph<T>, features: Var, idx: &TripletIndices, alpha: f64) -> Result<Var> {
    if idx.is_empty() {
        return Ok(g.constant(Tensor::scalar(T::zero())));
    }
    let pooled = g.global_avg_pool(features)?;
    let a = g.select_rows(pooled, &idx.anchors)?;
    let p = g.select_rows(pooled, &idx.positives)?;
    let n = g.select_rows(pooled, &idx.negatives)?;
    g.triplet_margin(a, p, n, T::from_f64_lossy(alpha))
}

/// Targets of `(self_0, self_1, cross_0, cross_1)`.
fn targets<'a, T: Float>(x0: &'a Tensor<T>, x1: &'a Tensor<T>, cross: CrossTarget) -> [&'a Tensor<T>; 4] {
    match cross {
        CrossTarget::ContentDonor => [x0, x1, x0, x1],
        CrossTarget::FingerprintDonor => [x0, x1, x1, x0],
    }
}

/// Sum of the four mean-L1 reconstruction terms.
pub fn reconstruction_graph<T: Float>(
    g: &mut Graph<T>,
    x0: &Tensor<T>,
    x1: &Tensor<T>,
    recs: &ReconstructionVars,
    cross: CrossTarget,
) -> Result<Var> {
    let outs = [recs.self_0, recs.self_1, recs.cross_0, recs.cross_1];
    let mut terms = Vec::with_capacity(4);
    for (out, target) in outs.into_iter().zip(targets(x0, x1, cross)) {
        terms.push((g.l1_mean(out, target)?, T::one()));
    }
    g.weighted_sum(&terms)
}

pub fn reconstruction_loss<T: Float>(
    x0: &Tensor<T>,
    x1: &Tensor<T>,
    recs: &ReconstructionSet<T>,
    cross: CrossTarget,
) -> Result<T> {
    eval_scalar(|g| {
        let vars = ReconstructionVars {
            self_0: g.constant(recs.self_0.clone()),
            self_1: g.constant(recs.self_1.clone()),
            cross_0: g.constant(recs.cross_0.clone()),
            cross_1: g.constant(recs.cross_1.clone()),
        };
        reconstruction_graph(g, x0, x1, &vars, cross)
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn t(shape: &[usize], v: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, v).unwrap()
    }

    #[test]
    fn common_ce_closed_forms() {
        let perfect = t(&[2, 2], vec![-50.0, 50.0, 50.0, -50.0]);
        assert!(common_ce_loss(&perfect, &[1, 0]).unwrap() < 1e-12);
        let uniform = Tensor::<f64>::zeros(&[3, 2]);
        let v = common_ce_loss(&uniform, &[0, 1, 1]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn common_ce_is_permutation_invariant() {
        let logits = t(&[3, 2], vec![0.3, -1.0, 2.0, 0.5, -0.2, 0.1]);
        let a = common_ce_loss(&logits, &[0, 1, 1]).unwrap();
        let b = common_ce_loss(&logits.select_rows(&[2, 0, 1]), &[1, 0, 1]).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn common_ce_length_mismatch_is_shape_error() {
        let logits = Tensor::<f64>::zeros(&[3, 2]);
        assert!(matches!(common_ce_loss(&logits, &[0, 1]), Err(Error::Shape(_))));
    }

    #[test]
    fn specific_ce_uniform_and_validation() {
        let uniform = Tensor::<f64>::zeros(&[4, 5]);
        let v = specific_ce_loss(&uniform, &[0, 1, 3, 4], 5).unwrap();
        assert!((v - 5f64.ln()).abs() < 1e-12);
        let three = Tensor::<f64>::zeros(&[2, 3]);
        assert!(matches!(
            specific_ce_loss(&three, &[0, 3], 3),
            Err(Error::Validation { .. })
        ));
        assert!(matches!(
            specific_ce_loss(&three, &[0, 1], 5),
            Err(Error::Validation { .. })
        ));
    }

    fn triplets(a: Vec<f64>, p: Vec<f64>, n: Vec<f64>) -> TripletSet<f64> {
        let d = a.len();
        TripletSet {
            anchors: t(&[1, d], a),
            positives: t(&[1, d], p),
            negatives: t(&[1, d], n),
        }
    }

    #[test]
    fn contrastive_hand_cases() {
        let far = triplets(vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 5.0]);
        assert!(contrastive_loss(&far, 3.0).unwrap().abs() < 1e-12);
        let same = triplets(vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]);
        assert!((contrastive_loss(&same, 3.0).unwrap() - 3.0).abs() < 1e-12);
        let equal = triplets(vec![0.0, 0.0], vec![2.0, 0.0], vec![0.0, -2.0]);
        assert!((contrastive_loss(&equal, 3.0).unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn contrastive_empty_is_zero() {
        let empty = TripletSet::<f64> {
            anchors: Tensor::zeros(&[0, 4]),
            positives: Tensor::zeros(&[0, 4]),
            negatives: Tensor::zeros(&[0, 4]),
        };
        assert_eq!(contrastive_loss(&empty, 3.0).unwrap(), 0.0);
    }

    #[test]
    fn triplet_eligibility() {
        // fake-A, fake-A, fake-B, real
        let y = [1, 1, 1, 0];
        let yp = [1, 1, 2, 0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let (c, s) = sample_triplets(&y, &yp, &mut rng).unwrap();
            assert_eq!(c.len(), 3);
            for k in 0..c.len() {
                assert_ne!(c.anchors[k], c.positives[k]);
                assert_eq!(y[c.positives[k]], 1);
                assert_eq!(c.negatives[k], 3);
            }
            // Only the two method-A fakes have a same-method partner.
            assert_eq!(s.anchors, vec![0, 1]);
            assert_eq!(s.positives, vec![1, 0]);
            assert_eq!(s.negatives, vec![2, 2]);
        }
    }

    #[test]
    fn specific_negative_falls_back_to_real() {
        let (_, s) = sample_triplets(&[1, 1, 0], &[2, 2, 0], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(s.negatives, vec![2, 2]);
    }

    #[test]
    fn single_fake_gives_empty_sets() {
        let (c, s) = sample_triplets(&[1, 0, 0], &[1, 0, 0], &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert!(c.is_empty() && s.is_empty());
    }

    #[test]
    fn inconsistent_labels_rejected() {
        let r = sample_triplets(&[1, 0], &[0, 0], &mut ChaCha8Rng::seed_from_u64(1));
        assert!(matches!(r, Err(Error::Validation { .. })));
    }

    #[test]
    fn build_triplets_pools_the_right_halves() {
        let n = 4;
        let bundle = LatentBundle {
            f_specific: Tensor::from_fn(&[n, 2, 2, 2], |i| (i / 8) as f64),
            f_common: Tensor::from_fn(&[n, 2, 2, 2], |i| -((i / 8) as f64)),
            content: Tensor::zeros(&[n, 3, 2, 2]),
        };
        let (c, s) = build_triplets(&bundle, &[1, 1, 1, 0], &[1, 1, 2, 0], &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(c.anchors.shape(), &[3, 2]);
        assert_eq!(c.negatives.data(), &[-3.0; 6]);
        assert_eq!(s.anchors.data(), &[0.0, 0.0, 1.0, 1.0]);
    }

    fn recs(v: [f64; 4]) -> ReconstructionSet<f64> {
        ReconstructionSet {
            self_0: Tensor::full(&[1, 3, 2, 2], v[0]),
            self_1: Tensor::full(&[1, 3, 2, 2], v[1]),
            cross_0: Tensor::full(&[1, 3, 2, 2], v[2]),
            cross_1: Tensor::full(&[1, 3, 2, 2], v[3]),
        }
    }

    #[test]
    fn reconstruction_hand_cases() {
        let x0 = Tensor::full(&[1, 3, 2, 2], 0.2);
        let x1 = Tensor::full(&[1, 3, 2, 2], 0.8);
        let perfect = recs([0.2, 0.8, 0.2, 0.8]);
        assert!(reconstruction_loss(&x0, &x1, &perfect, CrossTarget::ContentDonor).unwrap() < 1e-12);
        let off = recs([0.7, 0.3, 0.7, 0.3]);
        let v = reconstruction_loss(&x0, &x1, &off, CrossTarget::ContentDonor).unwrap();
        assert!((v - 2.0).abs() < 1e-12);
        // Swapped cross targets: the crosses of `perfect` now miss by 0.6 each.
        let v = reconstruction_loss(&x0, &x1, &perfect, CrossTarget::FingerprintDonor).unwrap();
        assert!((v - 1.2).abs() < 1e-12);
    }

    #[test]
    fn reconstruction_shape_mismatch() {
        let x0 = Tensor::full(&[1, 3, 4, 4], 0.2);
        let r = reconstruction_loss(&x0, &x0, &recs([0.0; 4]), CrossTarget::ContentDonor);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn total_loss_arithmetic() {
        let w = LossWeights::default();
        let ones = LossComponents {
            ce_common: 1.0,
            ce_specific: 1.0,
            reconstruction: 1.0,
            contrastive: 1.0,
        };
        assert!((total_loss(ones, &w).unwrap().total - 1.45).abs() < 1e-12);
        assert_eq!(total_loss(LossComponents::default(), &w).unwrap().total, 0.0);
        let c = LossComponents {
            ce_common: 2.0,
            ..Default::default()
        };
        assert_eq!(total_loss(c, &w).unwrap().total, 2.0);
    }

    #[test]
    fn total_loss_names_nan_component() {
        let c = LossComponents {
            reconstruction: f64::NAN,
            ..Default::default()
        };
        match total_loss(c, &LossWeights::default()) {
            Err(Error::Divergence { component, .. }) => assert_eq!(component, "reconstruction"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn weights_validation_names_field() {
        let w = LossWeights {
            lambda_2: -0.1,
            ..Default::default()
        };
        match w.validate() {
            Err(Error::Validation { field, .. }) => assert_eq!(field, "lambda_2"),
            other => panic!("{other:?}"),
        }
    }
}
